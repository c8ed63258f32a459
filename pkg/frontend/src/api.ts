// Typed client for the annotation service HTTP API (see docs/api.md).
// The UI never invents label ids: every id it submits originates from a
// taxonomy list returned by the server.

export interface TaxonomyEntry {
  id: number;
  name: string;
}

export interface Task {
  done: boolean;
  blob_id: string;
  crop_url: string;
  context_url: string;
  original_url: string;
  taxonomy: TaxonomyEntry[];
}

export interface AnnotatorState {
  annotator_id: string;
  completed: number;
  control_encounters: number;
  score: number | null;
}

export class ApiRequestError extends Error {
  constructor(
    public status: number,
    public code: string,
    message: string,
  ) {
    super(message);
    this.name = "ApiRequestError";
  }
}

async function parseError(response: Response): Promise<ApiRequestError> {
  let code = "error";
  let message = `request failed with status ${response.status}`;
  try {
    const body = await response.json();
    if (body && typeof body.code === "string") code = body.code;
    if (body && typeof body.message === "string") message = body.message;
  } catch {
    // non-JSON error body; keep defaults
  }
  return new ApiRequestError(response.status, code, message);
}

export class ApiClient {
  constructor(
    private baseUrl: string = "",
    private fetchFn: typeof fetch = (...args) => fetch(...args),
  ) {}

  private async getJson<T>(path: string): Promise<T> {
    const response = await this.fetchFn(this.baseUrl + path);
    if (!response.ok) throw await parseError(response);
    return (await response.json()) as T;
  }

  nextTask(annotator: string): Promise<Task> {
    return this.getJson<Task>(`/api/task?annotator=${encodeURIComponent(annotator)}`);
  }

  taxonomy(): Promise<TaxonomyEntry[]> {
    return this.getJson<{ classes: TaxonomyEntry[] }>("/api/taxonomy").then((r) => r.classes);
  }

  score(annotator: string): Promise<AnnotatorState> {
    return this.getJson<AnnotatorState>(`/api/score?annotator=${encodeURIComponent(annotator)}`);
  }

  async submit(annotator: string, blobId: string, labelId: number): Promise<AnnotatorState> {
    const response = await this.fetchFn(this.baseUrl + "/api/annotations", {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify({ annotator, blob_id: blobId, label_id: labelId }),
    });
    if (!response.ok) throw await parseError(response);
    return (await response.json()) as AnnotatorState;
  }

  imageUrl(path: string): string {
    return this.baseUrl + path;
  }
}
