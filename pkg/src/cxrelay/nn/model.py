"""Model description, weight initialization, execution, and the artifact
file format.

Artifact files ("CXRM") hold, in order: magic, format version, model
version, input shape, layer count, per-layer spec blocks, stored validation
metrics, little-endian float32 weight blocks, and a trailing SHA-256 digest
of all preceding bytes. The hex digest doubles as the model's identity for
update checks and registry addressing.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field

import numpy as np

from .layers import (
    ConvLayer,
    DenseLayer,
    FlattenLayer,
    MaxPoolLayer,
    ReluLayer,
    ShapeError,
    SoftmaxLayer,
)

MAGIC = b"CXRM"
FORMAT_VERSION = 1

_KINDS = ("conv2d", "maxpool2d", "relu", "flatten", "dense", "softmax")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    filters: int = 0
    kernel: int = 0
    stride: int = 1
    units: int = 0
    pool: int = 0

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ShapeError(f"unknown layer kind {self.kind!r}")

    def out_shape(self, in_shape: tuple[int, ...]) -> tuple[int, ...]:
        if self.kind == "conv2d":
            h, w, _ = in_shape
            oh, ow = h - self.kernel + 1, w - self.kernel + 1
            if oh < 1 or ow < 1:
                raise ShapeError("conv kernel larger than its input")
            return (oh, ow, self.filters)
        if self.kind == "maxpool2d":
            h, w, c = in_shape
            if h < self.pool or w < self.pool:
                raise ShapeError("pool window larger than its input")
            return (h // self.pool, w // self.pool, c)
        if self.kind == "flatten":
            return (int(np.prod(in_shape)),)
        if self.kind == "dense":
            return (self.units,)
        return tuple(in_shape)      # relu / softmax

    @property
    def parametric(self) -> bool:
        return self.kind in ("conv2d", "dense")


def conv2d(filters: int, kernel: int = 3) -> LayerSpec:
    return LayerSpec("conv2d", filters=filters, kernel=kernel)


def maxpool2d(pool: int = 2) -> LayerSpec:
    return LayerSpec("maxpool2d", pool=pool)


def relu() -> LayerSpec:
    return LayerSpec("relu")


def flatten() -> LayerSpec:
    return LayerSpec("flatten")


def dense(units: int) -> LayerSpec:
    return LayerSpec("dense", units=units)


def softmax_spec() -> LayerSpec:
    return LayerSpec("softmax")


def reference_architecture() -> list[LayerSpec]:
    """Three conv/pool stages and a small dense head, for 128x128x1 input."""
    return [
        conv2d(16, 3), relu(), maxpool2d(2),
        conv2d(32, 3), relu(), maxpool2d(2),
        conv2d(64, 3), relu(), maxpool2d(2),
        flatten(),
        dense(64), relu(),
        dense(2), softmax_spec(),
    ]


def compact_architecture() -> list[LayerSpec]:
    """A small variant for protocol and simulator tests."""
    return [
        conv2d(4, 3), relu(), maxpool2d(4),
        conv2d(8, 3), relu(), maxpool2d(4),
        flatten(),
        dense(8), relu(),
        dense(2), softmax_spec(),
    ]


@dataclass(frozen=True)
class ModelArtifact:
    """Immutable sealed model: specs, weights, identity.

    ``weights`` holds [W, b] pairs in layer order for parametric layers.
    ``val_metrics`` stores (precision, recall, accuracy) from the last
    validation pass, NaN before any training.
    """

    layers: tuple[LayerSpec, ...]
    weights: tuple[np.ndarray, ...]
    input_shape: tuple[int, int, int]
    version: int = 1
    val_metrics: dict = field(default_factory=dict)

    @property
    def digest(self) -> str:
        return hashlib.sha256(serialize_artifact(self)[:-32]).hexdigest()

    def weight_shapes(self) -> list[tuple[int, ...]]:
        return [w.shape for w in self.weights]

    def parameter_count(self) -> int:
        return int(sum(w.size for w in self.weights))


def _weight_shapes(layers, input_shape):
    shapes = []
    cur = tuple(input_shape)
    for spec in layers:
        if spec.kind == "conv2d":
            shapes.append((spec.kernel, spec.kernel, cur[-1], spec.filters))
            shapes.append((spec.filters,))
        elif spec.kind == "dense":
            shapes.append((cur[0], spec.units))
            shapes.append((spec.units,))
        cur = spec.out_shape(cur)
    return shapes


def build_artifact(layers: list[LayerSpec], input_shape=(128, 128, 1),
                   seed: int = 0, version: int = 1) -> ModelArtifact:
    """Initialize weights with uniform fan-in scaling, U(+-sqrt(6/fan_in))."""
    rng = np.random.default_rng(seed)
    weights = []
    for shape in _weight_shapes(layers, input_shape):
        if len(shape) == 1:
            weights.append(np.zeros(shape, dtype=np.float32))
        else:
            fan_in = int(np.prod(shape[:-1]))
            limit = np.sqrt(6.0 / fan_in)
            weights.append(rng.uniform(-limit, limit, size=shape).astype(np.float32))
    return ModelArtifact(tuple(layers), tuple(weights), tuple(input_shape),
                         version=version)


class Network:
    """Runtime execution of an artifact; owns per-pass caches."""

    def __init__(self, artifact: ModelArtifact, dtype=np.float32):
        self.artifact = artifact
        self.dtype = dtype
        self.params: list[np.ndarray] = [w.astype(dtype) for w in artifact.weights]
        self.layers = []
        self._param_slots: list[tuple[int, int]] = []
        i = 0
        for spec in artifact.layers:
            if spec.kind == "conv2d":
                self.layers.append(ConvLayer(self.params[i], self.params[i + 1]))
                self._param_slots.append((i, 2))
                i += 2
            elif spec.kind == "dense":
                self.layers.append(DenseLayer(self.params[i], self.params[i + 1]))
                self._param_slots.append((i, 2))
                i += 2
            elif spec.kind == "maxpool2d":
                self.layers.append(MaxPoolLayer(spec.pool))
                self._param_slots.append((i, 0))
            elif spec.kind == "relu":
                self.layers.append(ReluLayer())
                self._param_slots.append((i, 0))
            elif spec.kind == "flatten":
                self.layers.append(FlattenLayer())
                self._param_slots.append((i, 0))
            elif spec.kind == "softmax":
                self.layers.append(SoftmaxLayer())
                self._param_slots.append((i, 0))

    def set_params(self, params: list[np.ndarray]) -> None:
        self.params = params
        for layer, (i, n) in zip(self.layers, self._param_slots):
            if n:
                layer.w, layer.b = params[i], params[i + 1]

    def forward(self, batch: np.ndarray) -> np.ndarray:
        x = np.asarray(batch, dtype=self.dtype)
        if x.ndim == 3:
            x = x[None]
        if tuple(x.shape[1:]) != tuple(self.artifact.input_shape):
            raise ShapeError(
                f"batch shape {x.shape[1:]} != model input "
                f"{self.artifact.input_shape}")
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, dloss_dout: np.ndarray) -> list[np.ndarray]:
        """Backpropagate from d(loss)/d(output); returns per-weight grads."""
        grads: list[np.ndarray | None] = [None] * len(self.params)
        dy = dloss_dout
        for layer, (i, n) in zip(reversed(self.layers),
                                 reversed(self._param_slots)):
            dy, wgrads = layer.backward(dy)
            for k, g in enumerate(wgrads):
                grads[i + k] = g
        return grads  # type: ignore[return-value]

    def to_artifact(self, version: int | None = None,
                    val_metrics: dict | None = None) -> ModelArtifact:
        a = self.artifact
        return ModelArtifact(
            a.layers,
            tuple(np.array(p, dtype=np.float32) for p in self.params),
            a.input_shape,
            version=a.version if version is None else version,
            val_metrics=dict(a.val_metrics if val_metrics is None else val_metrics),
        )


def forward(model: ModelArtifact, batch: np.ndarray) -> np.ndarray:
    """Convenience single forward pass; output rows are class probabilities."""
    return Network(model).forward(batch)


# --- serialization ----------------------------------------------------------

_KIND_CODE = {k: i for i, k in enumerate(_KINDS, start=1)}
_CODE_KIND = {i: k for k, i in _KIND_CODE.items()}


def _pack_spec(spec: LayerSpec) -> bytes:
    return struct.pack("<BHHHH", _KIND_CODE[spec.kind], spec.filters,
                       spec.kernel, spec.units, spec.pool)


def _unpack_spec(raw: bytes) -> LayerSpec:
    code, filters, kernel, units, pool = struct.unpack("<BHHHH", raw)
    return LayerSpec(_CODE_KIND[code], filters=filters, kernel=kernel,
                     units=units, pool=pool)


def pack_header(magic: bytes, artifact) -> bytes:
    m = artifact.val_metrics
    metrics = (m.get("precision", float("nan")), m.get("recall", float("nan")),
               m.get("accuracy", float("nan")))
    head = struct.pack("<4sBI3I B", magic, FORMAT_VERSION, artifact.version,
                       *artifact.input_shape, len(artifact.layers))
    specs = b"".join(_pack_spec(s) for s in artifact.layers)
    return head + specs + struct.pack("<3f", *metrics)


def unpack_header(data: bytes, magic: bytes):
    """Returns (version, input_shape, specs, val_metrics, offset)."""
    got, fmt, version, ih, iw, ic, n_layers = struct.unpack_from("<4sBI3IB", data, 0)
    if got != magic:
        raise ShapeError(f"bad magic {got!r}")
    if fmt != FORMAT_VERSION:
        raise ShapeError(f"unsupported format version {fmt}")
    off = struct.calcsize("<4sBI3IB")
    specs = []
    for _ in range(n_layers):
        specs.append(_unpack_spec(data[off:off + 9]))
        off += 9
    prec, rec, acc = struct.unpack_from("<3f", data, off)
    off += 12
    metrics = {}
    if not np.isnan(prec):
        metrics = {"precision": float(prec), "recall": float(rec),
                   "accuracy": float(acc)}
    return version, (ih, iw, ic), tuple(specs), metrics, off


def serialize_artifact(artifact: ModelArtifact) -> bytes:
    body = pack_header(MAGIC, artifact)
    for w in artifact.weights:
        body += np.ascontiguousarray(w, dtype="<f4").tobytes()
    return body + hashlib.sha256(body).digest()


def deserialize_artifact(data: bytes) -> ModelArtifact:
    stored = data[-32:]
    body = data[:-32]
    if hashlib.sha256(body).digest() != stored:
        raise ShapeError("artifact digest mismatch (corrupt file)")
    version, input_shape, specs, metrics, off = unpack_header(body, MAGIC)
    weights = []
    for shape in _weight_shapes(specs, input_shape):
        n = int(np.prod(shape))
        arr = np.frombuffer(body, dtype="<f4", count=n, offset=off)
        weights.append(arr.reshape(shape).copy())
        off += 4 * n
    if off != len(body):
        raise ShapeError("trailing bytes after weight blocks")
    return ModelArtifact(specs, tuple(weights), tuple(input_shape),
                         version=version, val_metrics=metrics)
