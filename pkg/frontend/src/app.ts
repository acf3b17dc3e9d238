// Single-page console: hash routing over the four workflows, all data from
// the /v1 service, views re-rendered from (state, last response) only.

import { ApiClient, type SaliencyResponse, type ScoreResponse } from "./api.js";
import { RequestGate, clampThreshold, initialState, type ViewState } from "./state.js";
import {
  renderDiscrepancy,
  renderError,
  renderGallery,
  renderSaliencyViewer,
  renderTriage,
  sortTriage,
} from "./views.js";

const api = new ApiClient(
  (window as unknown as { BRAINALIGN_BASE_URL?: string }).BRAINALIGN_BASE_URL ?? "",
);
const gate = new RequestGate();
let state: ViewState = initialState();

let lastTriage: ScoreResponse[] = [];
let lastSaliency: SaliencyResponse | null = null;

function root(): HTMLElement {
  return document.getElementById("view")!;
}

function navigate(): void {
  const hash = window.location.hash || "#/triage";
  const [path, queryString] = hash.slice(2).split("?");
  const params = new URLSearchParams(queryString ?? "");
  const parts = path.split("/");
  if (parts[0] === "triage") void showTriage();
  else if (parts[0] === "search") void showSearch();
  else if (parts[0] === "viewer")
    void showViewer(decodeURIComponent(parts[1] ?? ""), decodeURIComponent(parts[2] ?? ""),
                    params.get("query"));
  else if (parts[0] === "discrepancy") showDiscrepancyForm(decodeURIComponent(parts[1] ?? ""));
  else void showTriage();
}

async function showTriage(): Promise<void> {
  const ticket = gate.issue("triage");
  root().innerHTML = `<p class="loading">scoring exams...</p>`;
  try {
    const catalog = await api.listExams();
    const scores: ScoreResponse[] = [];
    for (const exam of catalog.exams) {
      scores.push(await api.score(exam.exam_id, ["there are normal intracranial appearances"]));
    }
    if (!gate.isCurrent("triage", ticket)) return;
    lastTriage = scores;
    paintTriage();
  } catch (err) {
    if (gate.isCurrent("triage", ticket)) root().innerHTML = renderError(String(err));
  }
}

function paintTriage(): void {
  const rows = sortTriage(lastTriage);
  root().innerHTML =
    `<div class="controls"><label>threshold ` +
    `<input id="threshold" type="range" min="0" max="1" step="0.01" value="${state.threshold}">` +
    `<span id="threshold-value">${state.threshold.toFixed(2)}</span></label></div>` +
    renderTriage(rows, state.threshold);
  document.getElementById("threshold")!.addEventListener("input", (event) => {
    state = { ...state, threshold: clampThreshold(Number((event.target as HTMLInputElement).value)) };
    paintTriage(); // recolor live from cached scores
  });
}

async function showSearch(): Promise<void> {
  root().innerHTML =
    `<form id="search-form">` +
    `<input id="search-query" type="text" placeholder="textual descriptor" ` +
    `value="${state.queryText}"><button type="submit">search</button>` +
    `<span id="search-error" class="inline-error"></span></form>` +
    `<div id="gallery"></div>`;
  document.getElementById("search-form")!.addEventListener("submit", (event) => {
    event.preventDefault();
    const text = (document.getElementById("search-query") as HTMLInputElement).value.trim();
    if (!text) {
      document.getElementById("search-error")!.textContent = "enter a query";
      return;
    }
    state = { ...state, queryText: text };
    void runSearch(text);
  });
}

async function runSearch(text: string): Promise<void> {
  const ticket = gate.issue("search");
  const target = document.getElementById("gallery")!;
  target.innerHTML = `<p class="loading">searching...</p>`;
  try {
    const response = await api.retrieve(text, null, state.retrievalK);
    const thumbnails = new Map<string, string>();
    for (const result of response.results) {
      const detail = await api.score(result.exam_id, [text]);
      const seq = detail.queries[0].ensemble.sequence;
      const sal = await api.saliency(result.exam_id, seq, text);
      thumbnails.set(result.exam_id, sal.heatmap_png_base64);
      if (!gate.isCurrent("search", ticket)) return;
    }
    if (!gate.isCurrent("search", ticket)) return;
    target.innerHTML = renderGallery(response, thumbnails);
  } catch (err) {
    if (gate.isCurrent("search", ticket)) target.innerHTML = renderError(String(err));
  }
}

async function showViewer(examId: string, sequence: string, query: string | null): Promise<void> {
  const ticket = gate.issue("viewer");
  root().innerHTML = `<p class="loading">computing saliency...</p>`;
  const text = query ?? state.queryText ?? "there are normal intracranial appearances";
  try {
    let seq = sequence;
    if (!seq) {
      const detail = await api.score(examId, [text]);
      seq = detail.queries[0].ensemble.sequence;
    }
    const payload = await api.saliency(examId, seq, text);
    if (!gate.isCurrent("viewer", ticket)) return;
    lastSaliency = payload;
    state = { ...state, activeExam: examId, activeSequence: seq, sliceCursor: payload.key_slice };
    paintViewer();
  } catch (err) {
    if (gate.isCurrent("viewer", ticket)) root().innerHTML = renderError(String(err));
  }
}

function paintViewer(): void {
  if (!lastSaliency) return;
  root().innerHTML = renderSaliencyViewer(lastSaliency, state);
  root().querySelector(".scrubber")!.addEventListener("input", (event) => {
    state = { ...state, sliceCursor: Number((event.target as HTMLInputElement).value) };
    paintViewer();
  });
  root().querySelector(".overlay")!.addEventListener("change", (event) => {
    state = { ...state, overlayOn: (event.target as HTMLInputElement).checked };
    paintViewer(); // toggling the overlay leaves the slice cursor untouched
  });
}

function showDiscrepancyForm(examId: string): void {
  root().innerHTML =
    `<form id="discrepancy-form">` +
    `<input id="discrepancy-exam" type="text" placeholder="exam id" value="${examId}">` +
    `<textarea id="discrepancy-report" rows="6" placeholder="provisional report"></textarea>` +
    `<button type="submit">check</button></form>` +
    `<div id="flags"></div>`;
  const rerun = () => {
    const exam = (document.getElementById("discrepancy-exam") as HTMLInputElement).value.trim();
    const text = (document.getElementById("discrepancy-report") as HTMLTextAreaElement).value.trim();
    if (exam && text) void runDiscrepancy(exam, text);
  };
  document.getElementById("discrepancy-form")!.addEventListener("submit", (event) => {
    event.preventDefault();
    rerun();
  });
  document.getElementById("discrepancy-report")!.addEventListener("change", rerun);
}

async function runDiscrepancy(examId: string, reportText: string): Promise<void> {
  const ticket = gate.issue("discrepancy");
  const target = document.getElementById("flags")!;
  target.innerHTML = `<p class="loading">checking...</p>`;
  try {
    const response = await api.discrepancy(examId, reportText);
    if (!gate.isCurrent("discrepancy", ticket)) return;
    target.innerHTML = renderDiscrepancy(response);
  } catch (err) {
    if (gate.isCurrent("discrepancy", ticket)) target.innerHTML = renderError(String(err));
  }
}

window.addEventListener("hashchange", navigate);
window.addEventListener("DOMContentLoaded", navigate);
