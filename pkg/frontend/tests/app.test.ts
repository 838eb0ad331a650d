// Flow tests against a mocked daemon; no running backend is needed.

import { beforeEach, describe, expect, it } from 'vitest';

import { DaemonApi, ScanResponse, StatusResponse } from '../src/api.js';
import { App, FileLike } from '../src/state.js';
import { render, renderScanCard, renderStatusBar } from '../src/view.js';

interface RecordedRequest {
  path: string;
  body: unknown;
}

class MockDaemon {
  requests: RecordedRequest[] = [];
  // one net confirmation per scan id: last write wins, like the daemon
  confirmations = new Map<string, boolean>();
  scanSource: 'server' | 'local' = 'server';
  connectivity: StatusResponse['connectivity'] = 'online';
  failStatus = false;
  uploadCount = 0;

  fetchFn = async (input: string, init?: RequestInit): Promise<Response> => {
    const path = input;
    if (path === '/api/scan') {
      this.uploadCount += 1;
      this.requests.push({ path, body: init?.body ?? null });
      const payload: ScanResponse = {
        scan_id: `scan-${this.uploadCount}`,
        probability: 0.91,
        verdict: 'Pneumonia',
        source: this.scanSource,
        model_version: 3,
        recall: 0.97,
        precision: 0.88,
      };
      return jsonResponse(payload);
    }
    if (path === '/api/confirm') {
      const body = JSON.parse(String(init?.body));
      this.requests.push({ path, body });
      this.confirmations.set(body.scan_id, body.confirmed);
      return jsonResponse({
        scan_id: body.scan_id,
        confirmed: body.confirmed,
        queued: this.connectivity !== 'online',
      });
    }
    if (path === '/api/status') {
      if (this.failStatus) {
        throw new Error('connection refused');
      }
      const payload: StatusResponse = {
        connectivity: this.connectivity,
        cache_depth: this.connectivity === 'online' ? 0 : 2,
        model_version: 3,
        model_digest: 'abcdef0123456789',
        recall: 0.97,
        precision: 0.88,
        ledger: { scans: 4, bytes_up: 70000, bytes_down: 300, model_bytes_down: 0 },
      };
      return jsonResponse(payload);
    }
    return jsonResponse({ error: 'not found' }, 404);
  };
}

function jsonResponse(payload: unknown, status = 200): Response {
  return new Response(JSON.stringify(payload), {
    status,
    headers: { 'Content-Type': 'application/json' },
  });
}

function pgmFile(name = 'chest.pgm'): FileLike {
  const bytes = new TextEncoder().encode('P5\n2 2\n255\n....');
  return {
    name,
    type: '',
    arrayBuffer: async () => bytes.buffer as ArrayBuffer,
  };
}

describe('upload flow', () => {
  let daemon: MockDaemon;
  let app: App;

  beforeEach(() => {
    daemon = new MockDaemon();
    app = new App(new DaemonApi('', daemon.fetchFn));
  });

  it('upload -> verdict -> confirm takes at most 3 interactions', async () => {
    await app.selectFile(pgmFile()); // interaction 1: pick the file
    expect(app.state.phase).toBe('ready');
    const rendered = renderScanCard(app.state, null);
    expect(rendered).toContain('Pneumonia');
    expect(rendered).toContain('badge-server');

    await app.confirm(true); // interaction 2: one click
    expect(app.state.scan?.confirmation).toBe('confirmed');
    expect(daemon.confirmations.get('scan-1')).toBe(true);
    expect(app.interactions).toBeLessThanOrEqual(3);
  });

  it('renders the local badge when the daemon fell back offline', async () => {
    daemon.scanSource = 'local';
    await app.selectFile(pgmFile());
    const rendered = renderScanCard(app.state, null);
    expect(rendered).toContain('badge-local');
    expect(rendered).toContain('local model (offline)');
  });

  it('rejects non-image files before any upload', async () => {
    await app.selectFile({
      name: 'notes.txt',
      type: 'text/plain',
      arrayBuffer: async () => new ArrayBuffer(0),
    });
    expect(daemon.uploadCount).toBe(0);
    expect(app.state.error).toContain('notes.txt');
  });

  it('shows an actionable message when the daemon is unreachable', async () => {
    const dead = new DaemonApi('', async () => {
      throw new Error('ECONNREFUSED');
    });
    const offlineApp = new App(dead);
    await offlineApp.selectFile(pgmFile());
    expect(offlineApp.state.phase).toBe('idle');
    expect(offlineApp.state.error).toContain('daemon unreachable');
  });
});

describe('confirmation idempotence', () => {
  it('repeated confirm clicks produce one net record', async () => {
    const daemon = new MockDaemon();
    const app = new App(new DaemonApi('', daemon.fetchFn));
    await app.selectFile(pgmFile());

    await app.confirm(true);
    await app.confirm(true);
    await app.confirm(true);
    const confirmPosts = daemon.requests.filter((r) => r.path === '/api/confirm');
    expect(confirmPosts.length).toBe(1); // repeats never leave the UI
    expect(daemon.confirmations.size).toBe(1);
  });

  it('reject then confirm leaves a single net record, confirmed', async () => {
    const daemon = new MockDaemon();
    const app = new App(new DaemonApi('', daemon.fetchFn));
    await app.selectFile(pgmFile());

    await app.confirm(false);
    await app.confirm(true);
    expect(daemon.confirmations.size).toBe(1);
    expect(daemon.confirmations.get('scan-1')).toBe(true);
    expect(app.state.scan?.confirmation).toBe('confirmed');
  });

  it('flags queued confirmations while offline', async () => {
    const daemon = new MockDaemon();
    daemon.connectivity = 'offline';
    const app = new App(new DaemonApi('', daemon.fetchFn));
    await app.selectFile(pgmFile());
    await app.confirm(true);
    expect(app.state.scan?.confirmationQueued).toBe(true);
    expect(renderScanCard(app.state, null)).toContain('queued until reconnect');
  });
});

describe('status panel', () => {
  it('renders connectivity, cache depth and model metrics', async () => {
    const daemon = new MockDaemon();
    const app = new App(new DaemonApi('', daemon.fetchFn));
    await app.refreshStatus();
    const bar = renderStatusBar(app.state);
    expect(bar).toContain('link: online');
    expect(bar).toContain('pending uploads: 0');
    expect(bar).toContain('model v3');
    expect(bar).toContain('recall 97.0%');
  });

  it('marks stale data when a poll fails', async () => {
    const daemon = new MockDaemon();
    const app = new App(new DaemonApi('', daemon.fetchFn));
    await app.refreshStatus();
    daemon.failStatus = true;
    await app.refreshStatus();
    expect(app.state.statusStale).toBe(true);
    expect(renderStatusBar(app.state)).toContain('stale');
  });

  it('shows the offline banner from daemon status', async () => {
    const daemon = new MockDaemon();
    daemon.connectivity = 'offline';
    const app = new App(new DaemonApi('', daemon.fetchFn));
    await app.refreshStatus();
    const bar = renderStatusBar(app.state);
    expect(bar).toContain('link: offline');
    expect(bar).toContain('local model');
  });
});

describe('heatmap toggle', () => {
  it('loads on demand and renders the overlay url', async () => {
    const daemon = new MockDaemon();
    const app = new App(new DaemonApi('', daemon.fetchFn));
    await app.selectFile(pgmFile());
    expect(render(app.state, app.heatmapUrl())).not.toContain('<img');
    app.toggleHeatmap();
    const html = render(app.state, app.heatmapUrl());
    expect(html).toContain('/api/heatmap/scan-1');
  });
});
