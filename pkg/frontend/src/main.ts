// Bootstrap: resolve the annotator id (the only client-persisted value),
// then hand the page over to the app.

import { ApiClient } from "./api.js";
import { AnnotationApp } from "./app.js";

const STORAGE_KEY = "scoreblobs.annotator";

function resolveAnnotator(): string | null {
  const params = new URLSearchParams(window.location.search);
  const fromQuery = params.get("annotator");
  if (fromQuery) {
    localStorage.setItem(STORAGE_KEY, fromQuery);
    return fromQuery;
  }
  return localStorage.getItem(STORAGE_KEY);
}

function showLogin(root: HTMLElement): void {
  root.innerHTML = `
    <form class="login">
      <label>annotator id <input name="annotator" autofocus required /></label>
      <button type="submit">start</button>
    </form>
  `;
  root.querySelector("form")!.addEventListener("submit", (e) => {
    e.preventDefault();
    const input = root.querySelector<HTMLInputElement>("input[name=annotator]")!;
    const id = input.value.trim();
    if (!id) return;
    localStorage.setItem(STORAGE_KEY, id);
    boot(root, id);
  });
}

function boot(root: HTMLElement, annotator: string): void {
  const app = new AnnotationApp(root, new ApiClient(""), annotator);
  void app.start();
}

const root = document.getElementById("app");
if (root) {
  const annotator = resolveAnnotator();
  if (annotator) boot(root, annotator);
  else showLogin(root);
}
