// Pure state -> HTML rendering; main.ts injects the result and binds
// events. Keeping this a string function lets tests assert on the exact
// markup without a DOM.

import { AppState } from './state.js';

function esc(value: string): string {
  return value
    .replace(/&/g, '&amp;')
    .replace(/</g, '&lt;')
    .replace(/>/g, '&gt;')
    .replace(/"/g, '&quot;');
}

function pct(value: number): string {
  return Number.isFinite(value) ? `${(value * 100).toFixed(1)}%` : 'n/a';
}

export function renderScanCard(state: AppState, heatmapUrl: string | null): string {
  if (state.phase === 'uploading') {
    return '<p class="pending" role="status">Uploading scan…</p>';
  }
  const scan = state.scan;
  if (!scan) {
    return '<p class="hint">Upload a chest X-ray (PGM) to get a verdict.</p>';
  }
  const sourceBadge =
    scan.source === 'server'
      ? '<span class="badge badge-server">server</span>'
      : '<span class="badge badge-local">local model (offline)</span>';
  const confirmState =
    scan.confirmation === 'none'
      ? ''
      : `<p class="confirmation">Marked <strong>${scan.confirmation}</strong>` +
        (scan.confirmationQueued
          ? ' <span class="queued">(queued until reconnect)</span>'
          : '') +
        '</p>';
  const heatmap =
    scan.heatmapShown && heatmapUrl
      ? `<img class="heatmap" alt="occlusion heatmap overlay" src="${esc(heatmapUrl)}">`
      : '';
  return [
    `<div class="verdict verdict-${scan.verdict.toLowerCase()}">`,
    `<h2>${scan.verdict}</h2>`,
    `<p class="probability">P(pneumonia) = ${pct(scan.probability)} ${sourceBadge}</p>`,
    `<p class="model-info">model v${scan.modelVersion} — recall ${pct(scan.recall)}, precision ${pct(scan.precision)}</p>`,
    confirmState,
    '<div class="actions">',
    '<button id="confirm-yes" accesskey="y">Confirm diagnosis</button>',
    '<button id="confirm-no" accesskey="n">Reject diagnosis</button>',
    '<button id="toggle-heatmap" accesskey="h">' +
      (scan.heatmapShown ? 'Hide heatmap' : 'Show heatmap') +
      '</button>',
    '</div>',
    heatmap,
    '</div>',
  ].join('\n');
}

export function renderStatusBar(state: AppState): string {
  const status = state.status;
  if (!status) {
    return '<p class="status status-unknown">status: waiting for daemon…</p>';
  }
  const stale = state.statusStale
    ? ' <span class="stale" role="alert">stale</span>'
    : '';
  const offline =
    status.connectivity === 'offline'
      ? '<span class="badge badge-local">offline — verdicts come from the local model</span>'
      : '';
  const kb = (status.ledger.bytes_up + status.ledger.bytes_down) / 1024;
  return [
    `<p class="status status-${status.connectivity}">`,
    `link: ${status.connectivity}${stale} ${offline}`,
    ` · pending uploads: ${status.cache_depth}`,
    ` · model v${status.model_version} (${status.model_digest.slice(0, 12)})`,
    ` · recall ${pct(status.recall)} / precision ${pct(status.precision)}`,
    ` · ${kb.toFixed(0)} KB used`,
    '</p>',
  ].join('');
}

export function renderError(state: AppState): string {
  if (!state.error) return '';
  return `<p class="error" role="alert">${esc(state.error)} <button id="retry">Retry</button></p>`;
}

export function render(state: AppState, heatmapUrl: string | null): string {
  return [
    renderStatusBar(state),
    renderError(state),
    renderScanCard(state, heatmapUrl),
  ].join('\n');
}
