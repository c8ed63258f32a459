// One-task-at-a-time annotation screen.
//
// Server-authoritative by design: the only client-side state is the
// annotator id and the currently open task. Label buttons are rebuilt from
// the taxonomy the server sent with the task, so ids always originate from
// the service. Exactly one submission can be in flight, and a task view
// never produces a second annotation once one has been accepted.

import { AnnotatorState, ApiClient, ApiRequestError, Task, TaxonomyEntry } from "./api.js";
import { t } from "./locale.js";

const SHORTCUTS = "123456789abcdefg";

type RetryAction = (() => void) | null;

export class AnnotationApp {
  private task: Task | null = null;
  private taxonomy: TaxonomyEntry[] = [];
  private inFlight = false;
  private accepted = false; // a label for the current task view was accepted
  private imagesPending = 0;
  private retryAction: RetryAction = null;

  constructor(
    private root: HTMLElement,
    private api: ApiClient,
    private annotator: string,
  ) {
    this.root.classList.add("annotator-app");
    this.root.innerHTML = `
      <header class="topbar">
        <span class="annotator-id"></span>
        <span class="completed-count"></span>
        <span class="score-badge"></span>
      </header>
      <main class="task-area">
        <section class="viewer">
          <figure class="context-figure">
            <img class="context-img" alt="context with the box highlighted" />
            <figcaption>${t("context_caption")}</figcaption>
          </figure>
          <figure class="crop-figure">
            <img class="crop-img" alt="detected region" />
            <figcaption>${t("crop_caption")}</figcaption>
          </figure>
          <a class="original-link" target="_blank" rel="noopener">${t("open_original")}</a>
        </section>
        <section class="labels"></section>
      </main>
      <div class="toast hidden" role="alert"></div>
      <button class="retry-button hidden" type="button">${t("retry")}</button>
      <section class="done-screen hidden">
        <h2>${t("done_title")}</h2>
        <p>${t("done_body")}</p>
      </section>
    `;
    this.el(".annotator-id").textContent = annotator;
    this.el<HTMLButtonElement>(".retry-button").addEventListener("click", () => {
      const action = this.retryAction;
      this.hideRetry();
      if (action) action();
    });
    document.addEventListener("keydown", (e) => this.onKey(e));
  }

  private el<T extends HTMLElement = HTMLElement>(selector: string): T {
    const node = this.root.querySelector<T>(selector);
    if (!node) throw new Error(`missing element ${selector}`);
    return node;
  }

  async start(): Promise<void> {
    await this.advance();
  }

  // -- task lifecycle -------------------------------------------------------

  private async advance(): Promise<void> {
    let task: Task;
    try {
      task = await this.api.nextTask(this.annotator);
    } catch {
      this.showToast(t("submit_failed"));
      this.showRetry(() => void this.advance());
      return;
    }
    this.renderTask(task);
  }

  renderTask(task: Task): void {
    this.task = task;
    this.accepted = false;
    this.inFlight = false;
    this.hideToast();
    this.hideRetry();

    if (task.done) {
      this.el(".task-area").classList.add("hidden");
      this.el(".labels").innerHTML = "";
      this.el(".done-screen").classList.remove("hidden");
      return;
    }
    this.el(".task-area").classList.remove("hidden");
    this.el(".done-screen").classList.add("hidden");

    this.taxonomy = task.taxonomy;
    this.renderButtons();
    this.loadImages(task);
    const link = this.el<HTMLAnchorElement>(".original-link");
    link.href = this.api.imageUrl(task.original_url);
  }

  private renderButtons(): void {
    const host = this.el(".labels");
    host.innerHTML = "";
    this.taxonomy.forEach((entry, index) => {
      const button = document.createElement("button");
      button.type = "button";
      button.className = "label-button";
      button.dataset.labelId = String(entry.id);
      const key = index < SHORTCUTS.length ? SHORTCUTS[index] : "";
      button.textContent = key ? `${key} · ${entry.name}` : entry.name;
      if (key) button.dataset.shortcut = key;
      button.addEventListener("click", () => void this.submit(entry.id));
      host.appendChild(button);
    });
    this.setButtonsEnabled(false); // gated until both images load
  }

  private loadImages(task: Task): void {
    const context = this.el<HTMLImageElement>(".context-img");
    const crop = this.el<HTMLImageElement>(".crop-img");
    this.imagesPending = 2;
    const onLoad = () => {
      this.imagesPending -= 1;
      if (this.imagesPending === 0) this.setButtonsEnabled(true);
    };
    const onError = () => {
      this.showToast(t("image_failed"));
      this.showRetry(() => this.loadImages(task));
      this.setButtonsEnabled(false);
    };
    for (const [img, url] of [
      [context, task.context_url],
      [crop, task.crop_url],
    ] as const) {
      img.onload = onLoad;
      img.onerror = onError;
      img.src = this.api.imageUrl(url);
    }
  }

  private setButtonsEnabled(enabled: boolean): void {
    this.root
      .querySelectorAll<HTMLButtonElement>(".label-button")
      .forEach((b) => (b.disabled = !enabled));
  }

  // -- submission -----------------------------------------------------------

  async submit(labelId: number): Promise<void> {
    if (!this.task || this.task.done || this.inFlight || this.accepted) return;
    const blobId = this.task.blob_id;
    this.inFlight = true;
    this.setButtonsEnabled(false);
    try {
      const state = await this.api.submit(this.annotator, blobId, labelId);
      this.accepted = true;
      this.renderState(state);
      await this.advance();
    } catch (error) {
      this.inFlight = false;
      if (error instanceof ApiRequestError && error.code === "unknown_label") {
        // stale taxonomy: refresh the class list, keep the task open
        this.showToast(t("label_rejected"));
        try {
          this.taxonomy = await this.api.taxonomy();
        } catch {
          // keep the previous snapshot if the refetch also fails
        }
        this.renderButtons();
        this.setButtonsEnabled(true);
      } else {
        // network or server trouble: task retained, user retries explicitly
        this.showToast(t("submit_failed"));
        this.showRetry(() => void this.submit(labelId));
        this.setButtonsEnabled(true);
      }
    } finally {
      this.inFlight = false;
    }
  }

  renderState(state: AnnotatorState): void {
    const badge = this.el(".score-badge");
    if (state.score === null) {
      badge.textContent = `${t("score_label")}: ${t("score_insufficient")}`;
      badge.classList.add("score-insufficient");
    } else {
      badge.textContent = `${t("score_label")}: ${state.score.toFixed(2)}`;
      badge.classList.remove("score-insufficient");
    }
    this.el(".completed-count").textContent = `${t("completed_label")}: ${state.completed}`;
  }

  // -- keyboard -------------------------------------------------------------

  private onKey(event: KeyboardEvent): void {
    if (!this.task || this.task.done) return;
    const target = event.target as HTMLElement | null;
    if (target && (target.tagName === "INPUT" || target.tagName === "TEXTAREA")) return;
    const index = SHORTCUTS.indexOf(event.key.toLowerCase());
    if (index < 0 || index >= this.taxonomy.length) return;
    const button = this.root.querySelector<HTMLButtonElement>(
      `.label-button[data-shortcut="${SHORTCUTS[index]}"]`,
    );
    if (button && !button.disabled) {
      // same code path as the click, hence the same request body
      void this.submit(this.taxonomy[index].id);
    }
  }

  // -- toast / retry --------------------------------------------------------

  private showToast(message: string): void {
    const toast = this.el(".toast");
    toast.textContent = message;
    toast.classList.remove("hidden");
  }

  private hideToast(): void {
    this.el(".toast").classList.add("hidden");
  }

  private showRetry(action: () => void): void {
    this.retryAction = action;
    this.el(".retry-button").classList.remove("hidden");
  }

  private hideRetry(): void {
    this.retryAction = null;
    this.el(".retry-button").classList.add("hidden");
  }
}
