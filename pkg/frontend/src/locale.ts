// UI strings. English is the shipped locale; add a language by extending
// STRINGS and switching setLocale at bootstrap.

export type LocaleKey =
  | "score_label"
  | "score_insufficient"
  | "completed_label"
  | "open_original"
  | "context_caption"
  | "crop_caption"
  | "done_title"
  | "done_body"
  | "retry"
  | "loading"
  | "image_failed"
  | "submit_failed"
  | "label_rejected";

const STRINGS: Record<string, Record<LocaleKey, string>> = {
  en: {
    score_label: "score",
    score_insufficient: "insufficient data",
    completed_label: "labeled",
    open_original: "open original page",
    context_caption: "context (box highlighted)",
    crop_caption: "detected region",
    done_title: "All done",
    done_body: "There is nothing left to annotate. Thank you!",
    retry: "Retry",
    loading: "loading…",
    image_failed: "Could not load the task images.",
    submit_failed: "Could not send the label. Your task is unchanged.",
    label_rejected: "That label was rejected (the class list may have changed).",
  },
};

let current = "en";

export function setLocale(locale: string): void {
  if (STRINGS[locale]) current = locale;
}

export function t(key: LocaleKey): string {
  return STRINGS[current][key];
}
