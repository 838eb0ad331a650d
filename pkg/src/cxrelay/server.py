"""Central service: full-model prediction, versioned model registry with
compressed counterparts, scan ingestion into sections, and the
retrain-evaluate-replace loop.

The registry is content-addressed: every artifact lives under its own
digest and stays retrievable forever; an index file tracks versions and the
single active marker. A version is only advertised to clients once its
compressed counterpart exists. Replacement compares candidate and active on
a held-out evaluation set frozen at deployment, so the active model's
policy metric can never regress.
"""

from __future__ import annotations

import json
import os
import threading
from dataclasses import dataclass

import numpy as np

from .compress import (
    CompressedModel,
    CompressionConfig,
    compress_model,
    read_compressed,
    serialize_compressed,
)
from .dataset import Batch, Label, ScanRecord, ScanStore, Section
from .imaging import GrayImage, normalize
from .metrics import confusion, f_beta, report
from .nn import (
    ModelArtifact,
    Network,
    TrainConfig,
    TrainingDivergedError,
    build_artifact,
    deserialize_artifact,
    reference_architecture,
    serialize_artifact,
    transfer_retrain,
)
from .nn.model import compact_architecture
from .protocol import (
    CHUNK_SIZE,
    ErrorCode,
    Frame,
    MsgType,
    PredictResponse,
    ProtocolError,
    UpdateAvailable,
    decode_frame,
    encode_frame,
    pack_ack,
    pack_chunk,
    pack_error,
    unpack_chunk,
    unpack_confirm,
    unpack_scan_request,
    unpack_update_check,
)
from .synthetic import make_disc_dataset


class ServerError(Exception):
    pass


class RegistryError(ServerError):
    pass


@dataclass(frozen=True)
class RetrainPolicy:
    threshold: int = 1              # update-batch size that triggers retraining
    metric: str = "f_beta"          # "f_beta" | "accuracy"
    beta: float = 2.0               # recall weight

    def __post_init__(self):
        if self.threshold < 1:
            raise ServerError("threshold must be >= 1")
        if self.metric not in ("f_beta", "accuracy"):
            raise ServerError(f"unknown policy metric {self.metric!r}")


@dataclass(frozen=True)
class RegistryEntry:
    version: int
    digest: str                     # full artifact digest
    restored_digest: str            # model identity clients compare against
    compressed_size: int
    original_size: int
    metrics: dict


@dataclass(frozen=True)
class DecisionReport:
    base_version: int
    base_metric: float
    candidate_metric: float | None
    replaced: bool
    new_version: int | None
    batch_consumed: int
    incident: str | None = None


class ModelRegistry:
    """Content-addressed artifact store with an active-version marker."""

    def __init__(self, root):
        self.root = str(root)
        self._artifacts = os.path.join(self.root, "artifacts")
        self._compressed = os.path.join(self.root, "compressed")
        self._index_path = os.path.join(self.root, "index.json")
        os.makedirs(self._artifacts, exist_ok=True)
        os.makedirs(self._compressed, exist_ok=True)
        self._lock = threading.Lock()
        self._index = {"versions": [], "active": None}
        if os.path.exists(self._index_path):
            with open(self._index_path, encoding="utf-8") as fh:
                self._index = json.load(fh)

    def _save_index(self) -> None:
        tmp = self._index_path + ".tmp"
        with open(tmp, "w", encoding="utf-8") as fh:
            json.dump(self._index, fh, indent=1)
        os.replace(tmp, self._index_path)

    def entries(self) -> list[RegistryEntry]:
        return [RegistryEntry(**e) for e in self._index["versions"]]

    def next_version(self) -> int:
        versions = [e["version"] for e in self._index["versions"]]
        return max(versions, default=0) + 1

    def publish(self, artifact: ModelArtifact,
                cfg: CompressionConfig | None = None,
                activate: bool = True) -> RegistryEntry:
        """Store artifact + compressed counterpart; optionally activate.

        The registry owns version numbering: the stored copy is re-stamped
        with the next free version so the sequence stays monotone.
        """
        with self._lock:
            version = self.next_version()
            stamped = ModelArtifact(artifact.layers, artifact.weights,
                                    artifact.input_shape, version=version,
                                    val_metrics=dict(artifact.val_metrics))
            blob = serialize_artifact(stamped)
            digest = stamped.digest
            cm = compress_model(stamped, cfg)
            centry = RegistryEntry(
                version=version, digest=digest,
                restored_digest=cm.restored_digest,
                compressed_size=cm.compressed_size,
                original_size=cm.original_size,
                metrics=dict(stamped.val_metrics),
            )
            with open(os.path.join(self._artifacts, f"{digest}.cxrm"), "wb") as fh:
                fh.write(blob)
            cpath = os.path.join(self._compressed, f"{cm.restored_digest}.cxrc")
            with open(cpath, "wb") as fh:
                fh.write(serialize_compressed(cm))
            self._index["versions"].append(centry.__dict__)
            if activate:
                self._index["active"] = version
            self._save_index()
            return centry

    def activate(self, version: int) -> None:
        with self._lock:
            if not any(e["version"] == version for e in self._index["versions"]):
                raise RegistryError(f"unknown version {version}")
            self._index["active"] = version
            self._save_index()

    def active_entry(self) -> RegistryEntry:
        active = self._index["active"]
        if active is None:
            raise RegistryError("registry has no active model")
        for e in self._index["versions"]:
            if e["version"] == active:
                return RegistryEntry(**e)
        raise RegistryError("active version missing from index")

    def load_artifact(self, entry: RegistryEntry) -> ModelArtifact:
        path = os.path.join(self._artifacts, f"{entry.digest}.cxrm")
        with open(path, "rb") as fh:
            artifact = deserialize_artifact(fh.read())
        if artifact.digest != entry.digest:
            raise RegistryError("stored artifact digest mismatch")
        return artifact

    def load_by_version(self, version: int) -> ModelArtifact:
        for e in self.entries():
            if e.version == version:
                return self.load_artifact(e)
        raise RegistryError(f"unknown version {version}")

    def compressed_bytes(self, restored_digest: str) -> bytes:
        path = os.path.join(self._compressed, f"{restored_digest}.cxrc")
        if not os.path.exists(path):
            raise RegistryError(f"no compressed model {restored_digest[:12]}")
        with open(path, "rb") as fh:
            return fh.read()

    def load_compressed(self, restored_digest: str) -> CompressedModel:
        return read_compressed(
            os.path.join(self._compressed, f"{restored_digest}.cxrc"))


class ServerCore:
    """Frame handler plus the retraining loop; one instance per deployment."""

    def __init__(self, storage_root, arch: str = "reference", seed: int = 0,
                 eval_set: tuple[np.ndarray, np.ndarray] | None = None,
                 policy: RetrainPolicy | None = None,
                 train_cfg: TrainConfig | None = None,
                 compression: CompressionConfig | None = None,
                 default_section: Section = Section.PRIVATE,
                 input_side: int = 128, chunk_size: int = CHUNK_SIZE):
        self.root = str(storage_root)
        os.makedirs(self.root, exist_ok=True)
        self.registry = ModelRegistry(os.path.join(self.root, "registry"))
        self.store = ScanStore(os.path.join(self.root, "data"),
                               target_side=input_side)
        self.policy = policy or RetrainPolicy()
        self.train_cfg = train_cfg or TrainConfig(
            batch_size=16, epochs=3, patience=3, seed=seed)
        self.compression = compression or CompressionConfig()
        self.default_section = default_section
        self.input_side = input_side
        self.chunk_size = chunk_size

        # held-out evaluation set, frozen at deployment, never trained on
        if eval_set is None:
            eval_set = make_disc_dataset(40, seed=seed + 9000, side=input_side)
        self.eval_set = eval_set

        self._retrain_lock = threading.Lock()
        self._swap_lock = threading.Lock()
        self._responses: dict[str, bytes] = {}
        self._verdicts: dict[str, int] = {}

        try:
            entry = self.registry.active_entry()
        except RegistryError:
            layers = (reference_architecture() if arch == "reference"
                      else compact_architecture())
            entry = self.registry.publish(
                build_artifact(layers, input_shape=(input_side, input_side, 1),
                               seed=seed),
                self.compression)
        self._install_active(entry)

    # --- active model handling -------------------------------------------

    def _install_active(self, entry: RegistryEntry) -> None:
        artifact = self.registry.load_artifact(entry)
        with self._swap_lock:
            # single reference assignment: a request snapshot sees one version
            self._active = (entry, artifact, Network(artifact))

    def active_snapshot(self) -> tuple[RegistryEntry, ModelArtifact, Network]:
        return self._active

    def publish_artifact(self, artifact: ModelArtifact) -> RegistryEntry:
        """Operator-driven publish (tests and the CLI use this)."""
        entry = self.registry.publish(artifact, self.compression)
        self._install_active(entry)
        return entry

    # --- frame dispatch -----------------------------------------------------

    def handle_frame(self, raw: bytes) -> bytes:
        try:
            frame = decode_frame(raw)
        except ProtocolError as exc:
            return encode_frame(pack_error(ErrorCode.MALFORMED, str(exc)))
        try:
            if frame.msg_type in (MsgType.PREDICT_REQ, MsgType.FLUSH_BATCH):
                return encode_frame(self._serve_scan(frame))
            if frame.msg_type == MsgType.CONFIRM_REQ:
                return encode_frame(self._serve_confirm(frame))
            if frame.msg_type == MsgType.UPDATE_CHECK:
                return encode_frame(self._serve_update_check(frame))
            if frame.msg_type == MsgType.MODEL_CHUNK:
                return encode_frame(self._serve_chunk(frame))
            return encode_frame(pack_error(ErrorCode.MALFORMED,
                                           f"unexpected {frame.msg_type.name}"))
        except ProtocolError as exc:
            return encode_frame(pack_error(ErrorCode.MALFORMED, str(exc)))
        except Exception as exc:   # never leak a stack to the wire
            return encode_frame(pack_error(ErrorCode.INTERNAL, str(exc)))

    def _serve_scan(self, frame: Frame) -> Frame:
        meta, raster = unpack_scan_request(frame)
        cached = self._responses.get(meta.scan_id)
        if cached is not None:
            # scan ids are client-unique; replays get the recorded response
            return decode_frame(cached)

        entry, _, net = self.active_snapshot()
        if meta.width != self.input_side or meta.height != self.input_side:
            return pack_error(ErrorCode.OVERSIZE,
                              f"expected {self.input_side}px square raster")
        image = GrayImage.from_bytes(meta.width, meta.height, raster)
        probs = net.forward(normalize(image)[None])
        p_pneumonia = float(probs[0, 1])
        # 0.5 threshold; the tie goes to Pneumonia (recall first)
        verdict = 1 if p_pneumonia >= 0.5 else 0

        self.store.ingest(ScanRecord(
            id=meta.scan_id, image=image, label=Label.UNLABELED,
            section=self.default_section, batch=Batch.UPDATE))
        self._verdicts[meta.scan_id] = verdict

        metrics = entry.metrics or {}
        resp = PredictResponse(
            probability=p_pneumonia, verdict=verdict,
            model_version=entry.version,
            recall=float(metrics.get("recall", float("nan"))),
            precision=float(metrics.get("precision", float("nan"))),
            model_digest=entry.restored_digest,
            version_mismatch=bool(meta.client_digest
                                  and meta.client_digest != entry.restored_digest),
        ).pack()
        self._responses[meta.scan_id] = encode_frame(resp)
        return resp

    def _serve_confirm(self, frame: Frame) -> Frame:
        scan_id, confirmed = unpack_confirm(frame)
        try:
            record = self.store.get(scan_id)
        except KeyError:
            return pack_error(ErrorCode.NOT_FOUND, f"unknown scan {scan_id}")
        verdict = self._verdicts.get(scan_id)
        if verdict is None:
            _, _, net = self.active_snapshot()
            probs = net.forward(normalize(record.image)[None])
            verdict = 1 if float(probs[0, 1]) >= 0.5 else 0
        self.store.set_confirmation(scan_id, confirmed, verdict=Label(verdict))
        return pack_ack(scan_id)

    def _serve_update_check(self, frame: Frame) -> Frame:
        client_digest = unpack_update_check(frame)
        entry, _, _ = self.active_snapshot()
        if client_digest == entry.restored_digest:
            return Frame(MsgType.UPDATE_NONE)
        blob = self.registry.compressed_bytes(entry.restored_digest)
        return UpdateAvailable(entry.restored_digest, len(blob), entry.version,
                               chunk_size=self.chunk_size).pack()

    def _serve_chunk(self, frame: Frame) -> Frame:
        digest, offset, _, _ = unpack_chunk(frame)
        try:
            blob = self.registry.compressed_bytes(digest)
        except RegistryError as exc:
            return pack_error(ErrorCode.NOT_FOUND, str(exc))
        if offset > len(blob):
            return pack_error(ErrorCode.OVERSIZE, "offset beyond model end")
        return pack_chunk(digest, offset, len(blob),
                          blob[offset:offset + self.chunk_size])

    # --- retraining -----------------------------------------------------------

    def _policy_metric(self, net: Network, policy: RetrainPolicy) -> float:
        x, y = self.eval_set
        preds = []
        for i in range(0, len(x), 64):
            preds.append(net.forward(x[i:i + 64]).argmax(axis=1))
        preds = np.concatenate(preds)
        if policy.metric == "accuracy":
            return float((preds == y).mean())
        rep = report(confusion(y, preds))
        pneumonia = rep.per_class[1]
        return f_beta(pneumonia.precision, pneumonia.recall, policy.beta)

    def _training_data(self) -> tuple[np.ndarray, np.ndarray]:
        records = [r for r in self.store.records()
                   if r.label != Label.UNLABELED]
        if not records:
            return (np.zeros((0, self.input_side, self.input_side, 1),
                             dtype=np.float32), np.zeros(0, dtype=np.int64))
        x = np.stack([normalize(r.image) for r in records]).astype(np.float32)
        y = np.array([int(r.label) for r in records], dtype=np.int64)
        return x, y

    def retrain_and_maybe_replace(self, policy: RetrainPolicy | None = None,
                                  train_cfg: TrainConfig | None = None) -> DecisionReport:
        """Retrain from the active model on used+update data and replace the
        active version only if the candidate strictly beats it on the frozen
        evaluation set. Serialized: concurrent triggers queue behind the lock
        and see the earlier trigger's outcome as their base."""
        policy = policy or self.policy
        cfg = train_cfg or self.train_cfg
        with self._retrain_lock:
            update_batch = [r for r in self.store.records(batch=Batch.UPDATE)
                            if r.label != Label.UNLABELED]
            if len(update_batch) < policy.threshold:
                raise ServerError(
                    f"update batch {len(update_batch)} below threshold "
                    f"{policy.threshold}")
            entry, base_artifact, base_net = self.active_snapshot()
            base_metric = self._policy_metric(base_net, policy)

            data = self._training_data()
            try:
                candidate, _ = transfer_retrain(base_artifact, data,
                                                self.eval_set, cfg)
            except TrainingDivergedError as exc:
                return DecisionReport(
                    base_version=entry.version, base_metric=base_metric,
                    candidate_metric=None, replaced=False, new_version=None,
                    batch_consumed=0, incident=f"training diverged: {exc}")

            candidate_metric = self._policy_metric(Network(candidate), policy)
            replaced = candidate_metric > base_metric
            new_version = None
            if replaced:
                new_entry = self.registry.publish(candidate, self.compression)
                self._install_active(new_entry)
                new_version = new_entry.version
            consumed = self.store.consume_update_batch()
            return DecisionReport(
                base_version=entry.version, base_metric=base_metric,
                candidate_metric=candidate_metric, replaced=replaced,
                new_version=new_version, batch_consumed=len(consumed))

    def export_public_dataset(self, dest) -> str:
        """Emit exactly the public-section records with their manifest."""
        return self.store.export(dest, Section.PUBLIC)


# --- TCP serving -------------------------------------------------------------

def read_framed(sock) -> bytes | None:
    """Read one frame off a socket; None on clean EOF."""
    from .protocol import HEADER
    head = b""
    while len(head) < HEADER.size:
        got = sock.recv(HEADER.size - len(head))
        if not got:
            return None
        head += got
    _, _, _, length = HEADER.unpack(head)
    need = length + 4
    body = b""
    while len(body) < need:
        got = sock.recv(need - len(body))
        if not got:
            raise ProtocolError("connection closed mid-frame", reason="truncated")
        body += got
    return head + body


def serve_tcp(core: ServerCore, host: str = "127.0.0.1", port: int = 7745):
    """Threaded framed-TCP server; returns the server object (call
    ``shutdown()`` to stop)."""
    import socketserver

    class Handler(socketserver.BaseRequestHandler):
        def handle(self):
            while True:
                try:
                    raw = read_framed(self.request)
                except (ProtocolError, ConnectionError):
                    return
                if raw is None:
                    return
                self.request.sendall(core.handle_frame(raw))

    class Server(socketserver.ThreadingTCPServer):
        allow_reuse_address = True
        daemon_threads = True

    server = Server((host, port), Handler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    return server
