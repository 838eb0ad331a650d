"""Edge-node daemon: preprocess, predict (server first, local compressed
model as fallback), durable store-and-forward cache, and digest-driven
model updates with resumable, atomic installs.

Storage layout under the client's directory::

    model.cxrc       active compressed model (only ever replaced atomically)
    download.tmp     partial model transfer (append-only, resumable)
    download.json    {digest, total} for the transfer in progress
    cache.jsonl      FIFO queue of pending scan uploads and confirmations
    results.jsonl    every verdict this client produced
    scans/<id>.pgm   preprocessed rasters (heatmaps are computed from these)

Local HTTP/JSON API (consumed by the web UI)::

    GET  /api/status            connectivity, cache depth, model identity,
                                ledger totals, model recall/precision
    POST /api/scan              body: binary PGM; returns scan_id,
                                probability, verdict, source, model_version,
                                recall, precision
    POST /api/confirm           {"scan_id": ..., "confirmed": bool}
    GET  /api/heatmap/<id>      PNG overlay of the occlusion heatmap
"""

from __future__ import annotations

import base64
import json
import os
import threading
import uuid
import zlib
from dataclasses import dataclass

import numpy as np

from .compress import CorruptionError, decompress_model, parse_compressed
from .imaging import GrayImage, InvalidImageError, PreprocessConfig, decode_pgm, normalize, preprocess, write_pgm
from .netsim import EventLog, SimClock
from .protocol import (
    BandwidthLedger,
    Frame,
    LinkError,
    MsgType,
    PredictResponse,
    ProtocolError,
    ScanMetadata,
    Transport,
    UpdateAvailable,
    decode_frame,
    encode_frame,
    pack_chunk_request,
    pack_confirm,
    pack_scan_request,
    pack_update_check,
    unpack_chunk,
    unpack_error,
)


class ClientError(Exception):
    pass


class ModelUnavailableError(ClientError):
    """Offline with no local model installed yet."""


class ScanNotFoundError(ClientError):
    pass


class SimulatedCrash(Exception):
    """Raised by injected kill switches in crash-safety tests."""


@dataclass(frozen=True)
class ScanResult:
    scan_id: str
    probability: float              # P(Pneumonia)
    verdict: int                    # 0 Normal, 1 Pneumonia
    source: str                     # "server" | "local"
    model_version: int
    recall: float
    precision: float
    server_probability: float | None = None
    disagreement: bool = False


class PictureCache:
    """Durable FIFO of pending uploads; one net entry per (kind, id)."""

    def __init__(self, path):
        self.path = str(path)
        self._entries: list[dict] = []
        if os.path.exists(self.path):
            with open(self.path, encoding="utf-8") as fh:
                for line in fh:
                    line = line.strip()
                    if line:
                        self._entries.append(json.loads(line))

    def __len__(self) -> int:
        return len(self._entries)

    def entries(self) -> list[dict]:
        return list(self._entries)

    def _rewrite(self) -> None:
        tmp = self.path + ".tmp"
        with open(tmp, "w", encoding="utf-8") as fh:
            for entry in self._entries:
                fh.write(json.dumps(entry) + "\n")
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, self.path)

    def append(self, entry: dict) -> bool:
        key = (entry["kind"], entry["id"])
        for i, existing in enumerate(self._entries):
            if (existing["kind"], existing["id"]) == key:
                if existing == entry:
                    return False
                self._entries[i] = entry    # e.g. reject then confirm
                self._rewrite()
                return False
        self._entries.append(entry)
        with open(self.path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(entry) + "\n")
            fh.flush()
            os.fsync(fh.fileno())
        return True

    def head(self) -> dict | None:
        return self._entries[0] if self._entries else None

    def pop_head(self) -> None:
        self._entries.pop(0)
        self._rewrite()


@dataclass
class SyncReport:
    scans_flushed: int = 0
    confirmations_flushed: int = 0
    update: str = "none"            # none | installed | resumed | failed | offline
    installed_version: int | None = None
    model_bytes: int = 0


class EdgeClient:
    """One radiology workstation's relay agent."""

    def __init__(self, storage_dir, transport: Transport,
                 preprocess_cfg: PreprocessConfig | None = None,
                 clock: SimClock | None = None,
                 ledger: BandwidthLedger | None = None,
                 log: EventLog | None = None,
                 kill=None, token: str = ""):
        self.root = str(storage_dir)
        os.makedirs(os.path.join(self.root, "scans"), exist_ok=True)
        self.transport = transport
        self.cfg = preprocess_cfg or PreprocessConfig()
        self.clock = clock or SimClock()
        self.ledger = ledger or BandwidthLedger()
        self.log = log
        self.kill = kill or (lambda point: None)
        self.token = token

        self.cache = PictureCache(os.path.join(self.root, "cache.jsonl"))
        self._results_path = os.path.join(self.root, "results.jsonl")
        self._model_path = os.path.join(self.root, "model.cxrc")
        self._tmp_path = os.path.join(self.root, "download.tmp")
        self._tmp_meta_path = os.path.join(self.root, "download.json")

        self.connected: bool | None = None      # unknown until first exchange
        self._results: dict[str, dict] = {}
        if os.path.exists(self._results_path):
            with open(self._results_path, encoding="utf-8") as fh:
                for line in fh:
                    if line.strip():
                        rec = json.loads(line)
                        self._results[rec["id"]] = rec

        self._model = None          # (restored ModelArtifact, Network)
        if os.path.exists(self._model_path):
            self._load_model()

    # --- local model ---------------------------------------------------------

    def _load_model(self) -> None:
        from .nn import Network

        with open(self._model_path, "rb") as fh:
            cm = parse_compressed(fh.read())
        artifact = decompress_model(cm)
        self._model = (artifact, Network(artifact))
        side = artifact.input_shape[0]
        if side != self.cfg.target_side:
            # preprocessing must feed exactly what the model expects
            self.cfg = PreprocessConfig(gamma=self.cfg.gamma, target_side=side)

    @property
    def model_digest(self) -> str:
        return self._model[0].digest if self._model else ""

    @property
    def model_version(self) -> int:
        return self._model[0].version if self._model else 0

    def _model_metrics(self) -> tuple[float, float]:
        if not self._model:
            return float("nan"), float("nan")
        m = self._model[0].val_metrics
        return (float(m.get("recall", float("nan"))),
                float(m.get("precision", float("nan"))))

    # --- scan handling ---------------------------------------------------------

    def _event(self, event: str, **fields) -> None:
        if self.log:
            self.log.log(self.clock.now, event, **fields)

    def _exchange(self, frame: Frame, label: str,
                  model_bytes: int = 0) -> Frame:
        request = encode_frame(frame)
        response = self.transport.exchange(request)
        self.ledger.log_exchange(label, len(request), len(response),
                                 model_bytes=model_bytes)
        reply = decode_frame(response)
        if reply.msg_type == MsgType.ERROR:
            code, message = unpack_error(reply)
            raise ProtocolError(f"server error {code}: {message}",
                                reason="server")
        return reply

    def _record_result(self, result: ScanResult) -> None:
        rec = {"id": result.scan_id, "prob": result.probability,
               "verdict": result.verdict, "source": result.source,
               "version": result.model_version,
               "server_prob": result.server_probability,
               "disagreement": result.disagreement}
        self._results[result.scan_id] = rec
        with open(self._results_path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(rec) + "\n")

    def handle_scan(self, raw_image: GrayImage,
                    scan_id: str | None = None) -> ScanResult:
        """Preprocess once, ask the server, fall back to the local model."""
        scan_id = scan_id or uuid.uuid4().hex[:12]
        try:
            image = preprocess(raw_image, self.cfg)
        except InvalidImageError:
            raise
        write_pgm(image, os.path.join(self.root, "scans", f"{scan_id}.pgm"))

        meta = ScanMetadata(
            scan_id=scan_id, width=image.width, height=image.height,
            client_version=self.model_version,
            client_digest=self.model_digest,
            timestamp=self.clock.now, token=self.token)
        try:
            reply = self._exchange(pack_scan_request(meta, image.tobytes()),
                                   "predict")
            resp = PredictResponse.unpack(reply)
            self.connected = True
            result = ScanResult(scan_id, resp.probability, resp.verdict,
                                "server", resp.model_version, resp.recall,
                                resp.precision)
            self._event("predict", id=scan_id, source="server",
                        verdict=result.verdict, version=resp.model_version)
        except LinkError:
            self.connected = False
            result = self._local_scan(scan_id, image)
        self._record_result(result)
        return result

    def _local_scan(self, scan_id: str, image: GrayImage) -> ScanResult:
        if self._model is None:
            raise ModelUnavailableError(
                "offline and no local model provisioned")
        artifact, net = self._model
        probs = net.forward(normalize(image)[None])
        prob = float(probs[0, 1])
        verdict = 1 if prob >= 0.5 else 0
        recall, precision = self._model_metrics()
        self.cache.append({
            "kind": "scan", "id": scan_id,
            "w": image.width, "h": image.height,
            "raster": base64.b64encode(zlib.compress(image.tobytes())).decode(),
            "prob": prob, "verdict": verdict, "ts": self.clock.now,
        })
        self._event("predict", id=scan_id, source="local", verdict=verdict,
                    version=self.model_version, cached=len(self.cache))
        return ScanResult(scan_id, prob, verdict, "local",
                          self.model_version, recall, precision)

    def record_confirmation(self, scan_id: str, confirmed: bool) -> dict:
        """Queue (or directly deliver) the reviewer's confirm/reject mark."""
        if scan_id not in self._results:
            raise ScanNotFoundError(f"scan {scan_id} was not evaluated here")
        entry = {"kind": "confirm", "id": scan_id, "confirmed": confirmed}
        if len(self.cache) == 0:
            try:
                self._exchange(pack_confirm(scan_id, confirmed), "confirm")
                self.connected = True
                self._event("confirm", id=scan_id, delivery="direct")
                return {"scan_id": scan_id, "confirmed": confirmed,
                        "queued": False}
            except LinkError:
                self.connected = False
        self.cache.append(entry)
        self._event("confirm", id=scan_id, delivery="queued")
        return {"scan_id": scan_id, "confirmed": confirmed, "queued": True}

    # --- sync -----------------------------------------------------------------

    def _flush_entry(self, entry: dict) -> None:
        if entry["kind"] == "scan":
            raster = zlib.decompress(base64.b64decode(entry["raster"]))
            meta = ScanMetadata(
                scan_id=entry["id"], width=entry["w"], height=entry["h"],
                client_version=self.model_version,
                client_digest=self.model_digest,
                timestamp=entry.get("ts", 0.0), token=self.token,
                local_prob=entry["prob"], local_verdict=entry["verdict"])
            reply = self._exchange(pack_scan_request(meta, raster, flush=True),
                                   "flush")
            resp = PredictResponse.unpack(reply)
            stored = self._results.get(entry["id"])
            if stored is not None:
                stored["server_prob"] = resp.probability
                stored["disagreement"] = (resp.verdict != stored["verdict"])
            self._event("flush", id=entry["id"], server_verdict=resp.verdict)
        else:
            self._exchange(pack_confirm(entry["id"], entry["confirmed"]),
                           "confirm")
            self._event("flush_confirm", id=entry["id"])

    def sync_cycle(self) -> SyncReport:
        """Drain the cache FIFO, then check for (and install) model updates."""
        report = SyncReport()
        while True:
            entry = self.cache.head()
            if entry is None:
                break
            try:
                self._flush_entry(entry)
            except LinkError:
                self.connected = False
                report.update = "offline"
                return report
            self.cache.pop_head()
            if entry["kind"] == "scan":
                report.scans_flushed += 1
            else:
                report.confirmations_flushed += 1

        try:
            reply = self._exchange(pack_update_check(self.model_digest),
                                   "update_check")
        except LinkError:
            self.connected = False
            report.update = "offline"
            return report
        self.connected = True

        if reply.msg_type == MsgType.UPDATE_NONE:
            self._event("update_check", result="current",
                        digest=self.model_digest[:12])
            return report
        if reply.msg_type != MsgType.UPDATE_AVAIL:
            raise ProtocolError(f"unexpected {reply.msg_type.name}",
                                reason="type")
        avail = UpdateAvailable.unpack(reply)
        self._event("update_check", result="available",
                    digest=avail.digest[:12], size=avail.total_size)
        try:
            report.model_bytes = self._download_and_install(avail)
        except LinkError:
            self.connected = False
            report.update = "resumed" if os.path.exists(self._tmp_path) else "failed"
            return report
        except CorruptionError:
            report.update = "failed"
            return report
        report.update = "installed"
        report.installed_version = self.model_version
        return report

    def _download_and_install(self, avail: UpdateAvailable) -> int:
        offset = 0
        if os.path.exists(self._tmp_meta_path) and os.path.exists(self._tmp_path):
            with open(self._tmp_meta_path, encoding="utf-8") as fh:
                meta = json.load(fh)
            if meta.get("digest") == avail.digest:
                offset = os.path.getsize(self._tmp_path)
                self._event("download_resume", offset=offset)
            else:
                os.remove(self._tmp_path)
        if offset == 0:
            with open(self._tmp_meta_path, "w", encoding="utf-8") as fh:
                json.dump({"digest": avail.digest, "total": avail.total_size}, fh)
            with open(self._tmp_path, "wb"):
                pass

        model_bytes = 0
        while offset < avail.total_size:
            reply = self._exchange(pack_chunk_request(avail.digest, offset),
                                   "model_chunk",
                                   model_bytes=0)
            digest, got_offset, total, data = unpack_chunk(reply)
            if digest != avail.digest or got_offset != offset or not data:
                raise ProtocolError("chunk out of sequence", reason="chunk")
            with open(self._tmp_path, "ab") as fh:
                fh.write(data)
                fh.flush()
                os.fsync(fh.fileno())
            offset += len(data)
            model_bytes += len(data)
            self.ledger.model_bytes_down += len(data)
            self.kill("after_chunk")
        self._event("download_complete", bytes=offset)
        self.kill("after_download")

        with open(self._tmp_path, "rb") as fh:
            blob = fh.read()
        cm = parse_compressed(blob)         # digest self-check inside
        if cm.restored_digest != avail.digest:
            os.remove(self._tmp_path)
            os.remove(self._tmp_meta_path)
            raise CorruptionError("downloaded model digest mismatch")
        self.kill("after_verify")

        os.replace(self._tmp_path, self._model_path)
        if os.path.exists(self._tmp_meta_path):
            os.remove(self._tmp_meta_path)
        self.kill("after_install")
        self._load_model()
        self._event("model_installed", version=self.model_version,
                    digest=self.model_digest[:12])
        return model_bytes

    def provision(self) -> SyncReport:
        """First-time model download; afterwards a local model always exists."""
        return self.sync_cycle()

    # --- status ------------------------------------------------------------------

    def result_for(self, scan_id: str) -> dict:
        if scan_id not in self._results:
            raise ScanNotFoundError(scan_id)
        return dict(self._results[scan_id])

    def status(self) -> dict:
        recall, precision = self._model_metrics()
        return {
            "connectivity": {True: "online", False: "offline",
                             None: "unknown"}[self.connected],
            "cache_depth": len(self.cache),
            "model_version": self.model_version,
            "model_digest": self.model_digest,
            "recall": recall,
            "precision": precision,
            "ledger": self.ledger.totals(),
        }


# --- plain-text config ----------------------------------------------------------

def parse_config(text: str) -> dict:
    """key=value lines; '#' starts a comment."""
    out = {}
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ClientError(f"bad config line: {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


# --- TCP transport ---------------------------------------------------------------

class TcpTransport(Transport):
    """One framed request/response per call over a pooled TCP connection."""

    def __init__(self, host: str, port: int, timeout_s: float = 10.0):
        self.host = host
        self.port = port
        self.timeout_s = timeout_s
        self._sock = None
        self._lock = threading.Lock()

    def _connect(self):
        import socket

        sock = socket.create_connection((self.host, self.port),
                                        timeout=self.timeout_s)
        sock.settimeout(self.timeout_s)
        return sock

    def exchange(self, request: bytes) -> bytes:
        from .server import read_framed

        with self._lock:
            try:
                if self._sock is None:
                    self._sock = self._connect()
                self._sock.sendall(request)
                reply = read_framed(self._sock)
                if reply is None:
                    raise ConnectionError("server closed connection")
                return reply
            except (OSError, ConnectionError, ProtocolError) as exc:
                if self._sock is not None:
                    try:
                        self._sock.close()
                    except OSError:
                        pass
                    self._sock = None
                raise LinkError(str(exc)) from exc


# --- grayscale PNG (for the browser-facing heatmap endpoint) -----------------------

def png_gray(pixels: np.ndarray) -> bytes:
    import struct

    h, w = pixels.shape
    raw = b"".join(b"\x00" + pixels[i].tobytes() for i in range(h))

    def chunk(tag: bytes, data: bytes) -> bytes:
        body = tag + data
        return struct.pack(">I", len(data)) + body + struct.pack(
            ">I", zlib.crc32(body))

    ihdr = struct.pack(">IIBBBBB", w, h, 8, 0, 0, 0, 0)
    return (b"\x89PNG\r\n\x1a\n" + chunk(b"IHDR", ihdr)
            + chunk(b"IDAT", zlib.compress(raw)) + chunk(b"IEND", b""))


# --- localhost HTTP/JSON API --------------------------------------------------------

def _jsonable(value):
    """NaN is not valid JSON; browsers reject it. Map it to null."""
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, float) and not np.isfinite(value):
        return None
    return value


def serve_api(client: EdgeClient, host: str = "127.0.0.1", port: int = 7746,
              static_dir: str | None = None):
    """Start the daemon's local HTTP surface; returns the server object."""
    from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

    class Handler(BaseHTTPRequestHandler):
        def log_message(self, *args):
            pass

        def _json(self, payload: dict, status: int = 200) -> None:
            body = json.dumps(_jsonable(payload)).encode()
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)

        def _bytes(self, body: bytes, content_type: str) -> None:
            self.send_response(200)
            self.send_header("Content-Type", content_type)
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)

        def do_GET(self):
            if self.path == "/api/status":
                return self._json(client.status())
            if self.path.startswith("/api/heatmap/"):
                scan_id = self.path.rsplit("/", 1)[1]
                return self._heatmap(scan_id)
            return self._static(self.path)

        def _heatmap(self, scan_id: str):
            from .imaging import read_pgm
            from .saliency import occlusion_heatmap

            pgm = os.path.join(client.root, "scans", f"{scan_id}.pgm")
            if not os.path.exists(pgm) or client._model is None:
                return self._json({"error": "heatmap unavailable"}, 404)
            image = read_pgm(pgm)
            hm = occlusion_heatmap(client._model[0], image)
            blend = (0.5 * image.pixels + 0.5 * hm.values * 255.0)
            overlay = np.clip(np.floor(blend + 0.5), 0, 255).astype(np.uint8)
            return self._bytes(png_gray(overlay), "image/png")

        def _static(self, path: str):
            if static_dir is None:
                return self._json({"error": "not found"}, 404)
            name = "index.html" if path in ("", "/") else path.lstrip("/")
            base = os.path.abspath(static_dir)
            full = os.path.abspath(os.path.normpath(os.path.join(base, name)))
            if not full.startswith(base + os.sep):
                return self._json({"error": "not found"}, 404)
            if not os.path.isfile(full):
                return self._json({"error": "not found"}, 404)
            kind = ("text/html" if full.endswith(".html")
                    else "application/javascript" if full.endswith(".js")
                    else "text/css" if full.endswith(".css")
                    else "application/octet-stream")
            with open(full, "rb") as fh:
                return self._bytes(fh.read(), kind)

        def do_POST(self):
            length = int(self.headers.get("Content-Length", "0"))
            body = self.rfile.read(length)
            if self.path == "/api/scan":
                return self._scan(body)
            if self.path == "/api/confirm":
                return self._confirm(body)
            return self._json({"error": "not found"}, 404)

        def _scan(self, body: bytes):
            try:
                image = decode_pgm(body)
            except InvalidImageError as exc:
                return self._json({"error": str(exc)}, 400)
            try:
                result = client.handle_scan(image)
            except ModelUnavailableError as exc:
                return self._json({"error": str(exc)}, 503)
            return self._json({
                "scan_id": result.scan_id,
                "probability": result.probability,
                "verdict": "Pneumonia" if result.verdict == 1 else "Normal",
                "source": result.source,
                "model_version": result.model_version,
                "recall": result.recall,
                "precision": result.precision,
            })

        def _confirm(self, body: bytes):
            try:
                payload = json.loads(body.decode() or "{}")
                scan_id = payload["scan_id"]
                confirmed = bool(payload["confirmed"])
            except (ValueError, KeyError):
                return self._json({"error": "scan_id and confirmed required"}, 400)
            try:
                outcome = client.record_confirmation(scan_id, confirmed)
            except ScanNotFoundError:
                return self._json({"error": f"unknown scan {scan_id}"}, 404)
            return self._json(outcome)

    server = ThreadingHTTPServer((host, port), Handler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    return server
