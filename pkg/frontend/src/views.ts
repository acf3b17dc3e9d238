// Pure view renderers: deterministic functions of (state, last responses).
// They return HTML strings so the contract tests can assert on them directly.

import type {
  DiscrepancyResponse,
  RetrieveResponse,
  SaliencyResponse,
  ScoreResponse,
} from "./api.js";
import type { ViewState } from "./state.js";

export interface TriageRow {
  exam_id: string;
  score: number;
  top_sequence: string;
}

export function escapeHtml(text: string): string {
  return text
    .replace(/&/g, "&amp;")
    .replace(/</g, "&lt;")
    .replace(/>/g, "&gt;")
    .replace(/"/g, "&quot;");
}

/** Worklist order: ensemble abnormality descending, exam id as tie-break. */
export function sortTriage(scores: ScoreResponse[]): TriageRow[] {
  const rows = scores.map((s) => ({
    exam_id: s.exam_id,
    score: s.abnormality.ensemble.value,
    top_sequence: s.abnormality.ensemble.sequence,
  }));
  rows.sort((a, b) => b.score - a.score || a.exam_id.localeCompare(b.exam_id));
  return rows;
}

export function renderTriage(rows: TriageRow[], threshold: number): string {
  const body = rows
    .map((r) => {
      const flagged = r.score >= threshold;
      return (
        `<tr class="${flagged ? "flagged" : "clear"}" data-exam="${escapeHtml(r.exam_id)}">` +
        `<td><a href="#/viewer/${encodeURIComponent(r.exam_id)}/${encodeURIComponent(r.top_sequence)}">` +
        `${escapeHtml(r.exam_id)}</a></td>` +
        `<td class="score">${r.score.toFixed(4)}</td>` +
        `<td>${escapeHtml(r.top_sequence)}</td></tr>`
      );
    })
    .join("");
  return (
    `<table class="triage"><thead><tr>` +
    `<th>exam</th><th>ensemble abnormality</th><th>top sequence</th></tr></thead>` +
    `<tbody>${body}</tbody></table>`
  );
}

export function renderGallery(
  response: RetrieveResponse,
  thumbnails: Map<string, string>, // exam_id -> base64 PNG of the key slice
): string {
  if (response.results.length === 0) {
    return `<p class="empty">no matches</p>`;
  }
  const cards = response.results
    .map((r) => {
      const thumb = thumbnails.get(r.exam_id);
      const img = thumb
        ? `<img alt="${escapeHtml(r.exam_id)} key slice" src="data:image/png;base64,${thumb}">`
        : `<div class="placeholder"></div>`;
      return (
        `<a class="card" data-exam="${escapeHtml(r.exam_id)}" ` +
        `href="#/viewer/${encodeURIComponent(r.exam_id)}?query=${encodeURIComponent(response.query)}">` +
        `${img}<span class="exam">${escapeHtml(r.exam_id)}</span>` +
        `<span class="cosine">${r.cosine.toFixed(4)}</span></a>`
      );
    })
    .join("");
  return `<div class="gallery">${cards}</div>`;
}

export function lineoutSvg(values: number[], cursor: number, keySlice: number): string {
  const width = 320;
  const height = 96;
  const peak = Math.max(...values, 1e-12);
  const step = values.length > 1 ? width / (values.length - 1) : width;
  const points = values
    .map((v, i) => `${(i * step).toFixed(1)},${(height - (v / peak) * (height - 6)).toFixed(1)}`)
    .join(" ");
  const cursorX = (cursor * step).toFixed(1);
  const keyX = (keySlice * step).toFixed(1);
  return (
    `<svg class="lineout" viewBox="0 0 ${width} ${height}" role="img">` +
    `<polyline points="${points}" fill="none" stroke="currentColor"/>` +
    `<line class="key" x1="${keyX}" y1="0" x2="${keyX}" y2="${height}"/>` +
    `<line class="cursor" x1="${cursorX}" y1="0" x2="${cursorX}" y2="${height}"/>` +
    `</svg>`
  );
}

export function renderSaliencyViewer(payload: SaliencyResponse, state: ViewState): string {
  const cursor = state.sliceCursor ?? payload.key_slice;
  const overlay = state.overlayOn;
  const atKeySlice = cursor === payload.key_slice;
  const image = overlay
    ? `<img class="heatmap${atKeySlice ? "" : " offslice"}" alt="saliency heatmap" ` +
      `src="data:image/png;base64,${payload.heatmap_png_base64}">`
    : `<p class="overlay-off">overlay hidden</p>`;
  return (
    `<section class="viewer" data-exam="${escapeHtml(payload.exam_id)}" ` +
    `data-sequence="${escapeHtml(payload.sequence)}">` +
    `<h2>${escapeHtml(payload.exam_id)} / ${escapeHtml(payload.sequence)}</h2>` +
    `<p class="query">${escapeHtml(payload.query)}</p>` +
    lineoutSvg(payload.lineout, cursor, payload.key_slice) +
    `<input class="scrubber" type="range" min="0" max="${payload.n_slices - 1}" ` +
    `step="1" value="${cursor}">` +
    `<label class="overlay-toggle"><input type="checkbox" class="overlay" ` +
    `${overlay ? "checked" : ""}> heatmap overlay</label>` +
    `<p class="key-slice">key slice ${payload.key_slice} of ${payload.n_slices}</p>` +
    image +
    `</section>`
  );
}

export function renderDiscrepancy(response: DiscrepancyResponse | null): string {
  if (response === null || response.flags.length === 0) {
    return `<p class="empty">no templates evaluated; add templates or a report to check</p>`;
  }
  const rows = response.flags
    .map(
      (f) =>
        `<tr class="${f.flagged ? "flagged" : "clear"}">` +
        `<td><a href="#/viewer/${encodeURIComponent(response.exam_id)}?query=${encodeURIComponent(f.query)}">` +
        `${escapeHtml(f.query)}</a></td>` +
        `<td>${f.scan_similarity.toFixed(4)}</td>` +
        `<td>${f.report_similarity.toFixed(4)}</td>` +
        `<td>${f.flagged ? "FLAG" : "ok"}</td></tr>`,
    )
    .join("");
  return (
    `<table class="discrepancy"><thead><tr>` +
    `<th>query</th><th>scan similarity</th><th>report similarity</th><th></th>` +
    `</tr></thead><tbody>${rows}</tbody></table>`
  );
}

export function renderError(message: string): string {
  return `<div class="error-banner">${escapeHtml(message)}</div>`;
}
