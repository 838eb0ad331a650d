// Client for the edge daemon's localhost HTTP/JSON API.

export interface ScanResponse {
  scan_id: string;
  probability: number; // P(Pneumonia)
  verdict: 'Normal' | 'Pneumonia';
  source: 'server' | 'local';
  model_version: number;
  recall: number;
  precision: number;
}

export interface ConfirmResponse {
  scan_id: string;
  confirmed: boolean;
  queued: boolean;
}

export interface StatusResponse {
  connectivity: 'online' | 'offline' | 'unknown';
  cache_depth: number;
  model_version: number;
  model_digest: string;
  recall: number;
  precision: number;
  ledger: {
    scans: number;
    bytes_up: number;
    bytes_down: number;
    model_bytes_down: number;
  };
}

export class DaemonError extends Error {
  constructor(message: string, readonly status: number) {
    super(message);
  }
}

type FetchLike = (input: string, init?: RequestInit) => Promise<Response>;

export class DaemonApi {
  constructor(
    private readonly baseUrl = '',
    private readonly fetchFn: FetchLike = (...args) => fetch(...args),
  ) {}

  private async request<T>(path: string, init?: RequestInit): Promise<T> {
    let response: Response;
    try {
      response = await this.fetchFn(this.baseUrl + path, init);
    } catch (err) {
      throw new DaemonError(`daemon unreachable: ${String(err)}`, 0);
    }
    const body = await response.json().catch(() => ({}));
    if (!response.ok) {
      const message =
        typeof body === 'object' && body && 'error' in body
          ? String((body as { error: unknown }).error)
          : `request failed (${response.status})`;
      throw new DaemonError(message, response.status);
    }
    return body as T;
  }

  uploadScan(bytes: ArrayBuffer | Uint8Array): Promise<ScanResponse> {
    const payload: ArrayBuffer =
      bytes instanceof Uint8Array ? (bytes.slice().buffer as ArrayBuffer) : bytes;
    return this.request<ScanResponse>('/api/scan', {
      method: 'POST',
      headers: { 'Content-Type': 'application/octet-stream' },
      body: payload,
    });
  }

  confirm(scanId: string, confirmed: boolean): Promise<ConfirmResponse> {
    return this.request<ConfirmResponse>('/api/confirm', {
      method: 'POST',
      headers: { 'Content-Type': 'application/json' },
      body: JSON.stringify({ scan_id: scanId, confirmed }),
    });
  }

  status(): Promise<StatusResponse> {
    return this.request<StatusResponse>('/api/status');
  }

  heatmapUrl(scanId: string): string {
    return `${this.baseUrl}/api/heatmap/${encodeURIComponent(scanId)}`;
  }
}
