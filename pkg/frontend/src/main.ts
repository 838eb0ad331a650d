// Browser wiring: single file input, rendered card, status polling.
// The daemon serves this bundle itself, so the API base URL is empty.

import { DaemonApi } from './api.js';
import { App } from './state.js';
import { render } from './view.js';

const api = new DaemonApi('');
const app = new App(api);

const root = document.getElementById('app') as HTMLElement;
const fileInput = document.getElementById('file-input') as HTMLInputElement;

function paint(): void {
  root.innerHTML = render(app.state, app.heatmapUrl());
  document
    .getElementById('confirm-yes')
    ?.addEventListener('click', () => void app.confirm(true));
  document
    .getElementById('confirm-no')
    ?.addEventListener('click', () => void app.confirm(false));
  document
    .getElementById('toggle-heatmap')
    ?.addEventListener('click', () => app.toggleHeatmap());
  document
    .getElementById('retry')
    ?.addEventListener('click', () => void app.refreshStatus());
}

app.subscribe(paint);
paint();

fileInput.addEventListener('change', () => {
  const file = fileInput.files?.[0];
  if (file) void app.selectFile(file);
  fileInput.value = '';
});

app.startPolling(5000);
