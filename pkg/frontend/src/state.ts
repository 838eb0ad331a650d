// Application state and flows. The UI never computes or alters
// predictions; it renders what the daemon returned, verbatim.

import {
  ConfirmResponse,
  DaemonApi,
  DaemonError,
  ScanResponse,
  StatusResponse,
} from './api.js';

export type Confirmation = 'none' | 'confirmed' | 'rejected';

export interface ScanView {
  scanId: string;
  probability: number;
  verdict: 'Normal' | 'Pneumonia';
  source: 'server' | 'local';
  modelVersion: number;
  recall: number;
  precision: number;
  confirmation: Confirmation;
  confirmationQueued: boolean;
  heatmapShown: boolean;
}

export interface AppState {
  phase: 'idle' | 'uploading' | 'ready';
  scan: ScanView | null;
  status: StatusResponse | null;
  statusStale: boolean;
  error: string | null;
}

export interface FileLike {
  name: string;
  type?: string;
  arrayBuffer(): Promise<ArrayBuffer>;
}

function acceptable(file: FileLike): boolean {
  if (file.name.toLowerCase().endsWith('.pgm')) return true;
  return (file.type ?? '').startsWith('image/');
}

export class App {
  state: AppState = {
    phase: 'idle',
    scan: null,
    status: null,
    statusStale: false,
    error: null,
  };

  /** Counts user-initiated actions; the primary flow must need at most 3. */
  interactions = 0;

  private listeners: Array<(state: AppState) => void> = [];
  private confirmInFlight = false;

  constructor(private readonly api: DaemonApi) {}

  subscribe(listener: (state: AppState) => void): void {
    this.listeners.push(listener);
  }

  private emit(): void {
    for (const listener of this.listeners) listener(this.state);
  }

  private set(update: Partial<AppState>): void {
    this.state = { ...this.state, ...update };
    this.emit();
  }

  /** Interaction 1: choosing a file uploads it and renders the verdict. */
  async selectFile(file: FileLike): Promise<void> {
    this.interactions += 1;
    if (!acceptable(file)) {
      // rejected client-side; nothing is sent to the daemon
      this.set({ error: `${file.name} is not an image the daemon accepts` });
      return;
    }
    this.set({ phase: 'uploading', error: null });
    try {
      const bytes = await file.arrayBuffer();
      const response: ScanResponse = await this.api.uploadScan(bytes);
      this.set({
        phase: 'ready',
        scan: {
          scanId: response.scan_id,
          probability: response.probability,
          verdict: response.verdict,
          source: response.source,
          modelVersion: response.model_version,
          recall: response.recall,
          precision: response.precision,
          confirmation: 'none',
          confirmationQueued: false,
          heatmapShown: false,
        },
      });
    } catch (err) {
      const reason =
        err instanceof DaemonError && err.status === 0
          ? 'daemon unreachable — check that the edge service is running'
          : String(err instanceof Error ? err.message : err);
      this.set({ phase: 'idle', error: reason });
    }
  }

  /** Interaction 2: one click records the reviewer's mark. Repeat clicks
   * with the same value are ignored, so the daemon sees one net record. */
  async confirm(confirmed: boolean): Promise<void> {
    this.interactions += 1;
    const scan = this.state.scan;
    if (!scan || this.confirmInFlight) return;
    const wanted: Confirmation = confirmed ? 'confirmed' : 'rejected';
    if (scan.confirmation === wanted) return;
    this.confirmInFlight = true;
    try {
      const outcome: ConfirmResponse = await this.api.confirm(
        scan.scanId,
        confirmed,
      );
      this.set({
        scan: {
          ...scan,
          confirmation: wanted,
          confirmationQueued: outcome.queued,
        },
        error: null,
      });
    } catch (err) {
      this.set({
        error: String(err instanceof Error ? err.message : err),
      });
    } finally {
      this.confirmInFlight = false;
    }
  }

  /** Optional interaction: heatmaps load on demand to spare the link. */
  toggleHeatmap(): void {
    this.interactions += 1;
    const scan = this.state.scan;
    if (!scan) return;
    this.set({ scan: { ...scan, heatmapShown: !scan.heatmapShown } });
  }

  heatmapUrl(): string | null {
    const scan = this.state.scan;
    return scan ? this.api.heatmapUrl(scan.scanId) : null;
  }

  /** Status polling; a failed poll flags the panel as stale. */
  async refreshStatus(): Promise<void> {
    try {
      const status = await this.api.status();
      this.set({ status, statusStale: false });
    } catch {
      this.set({ statusStale: true });
    }
  }

  startPolling(intervalMs = 5000): () => void {
    void this.refreshStatus();
    const timer = setInterval(() => void this.refreshStatus(), intervalMs);
    return () => clearInterval(timer);
  }
}
