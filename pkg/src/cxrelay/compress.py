"""Model compression: magnitude pruning, codebook quantization, Huffman
coding, and the compressed artifact container shipped to clients.

Per weight tensor the pipeline is
  prune    : zero the floor(sparsity * n) smallest-magnitude entries
  quantize : 1-D k-means codebook over the survivors (linspace-seeded, so
             the codebook is deterministic), indices per survivor
  huffman  : canonical prefix code over the index stream

Biases are tiny and stay as raw float32. The Huffman stage is bit-exact;
all loss comes from prune+quantize, and decompression reproduces exactly
the pruned+quantized weights whose digest was recorded at compression time.

Container layout ("CXRC"): header identical in shape to the artifact
header, then the source artifact's digest, the restored (pruned+quantized)
model's digest, the original serialized size, per-layer blocks (bitmap as
alternating varint run lengths, codebook as little-endian float32, code
lengths, padded bit stream, raw bias), and a trailing SHA-256 of all
preceding bytes.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

import numpy as np

from .nn.model import (
    ModelArtifact,
    _weight_shapes,
    pack_header,
    serialize_artifact,
    unpack_header,
)

CMAGIC = b"CXRC"


class CompressionError(Exception):
    pass


class CorruptionError(CompressionError):
    """Stored digest does not match recomputed content."""


class DecodeError(CompressionError):
    """Huffman stream or container structure is malformed."""

    def __init__(self, message: str, offset: int | None = None):
        super().__init__(message if offset is None
                         else f"{message} (at offset {offset})")
        self.offset = offset


@dataclass(frozen=True)
class CompressionConfig:
    """Defaults land the reference CNN comfortably past 10x.

    Dense layers hold nearly all parameters and take the aggressive
    ``sparsity_target``; convolution stacks are small and fragile, so they
    are pruned gently (``conv_sparsity``) the way the technique is applied
    in practice.
    """

    sparsity_target: float = 0.9        # dense layers
    conv_sparsity: float = 0.3
    conv_bits: int = 8
    dense_bits: int = 5

    def __post_init__(self):
        for name in ("sparsity_target", "conv_sparsity"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise CompressionError(f"{name} must be in [0, 1)")
        for bits in (self.conv_bits, self.dense_bits):
            if bits is not None and not 1 <= bits <= 16:
                raise CompressionError("codebook bits must be in [1, 16]")

    @classmethod
    def passthrough(cls) -> "CompressionConfig":
        """No pruning, no quantization: survivors stored as raw float32."""
        return cls(sparsity_target=0.0, conv_sparsity=0.0,
                   conv_bits=None, dense_bits=None)  # type: ignore[arg-type]

    def bits_for(self, kind: str) -> int | None:
        return self.conv_bits if kind == "conv2d" else self.dense_bits

    def sparsity_for(self, kind: str) -> float:
        return self.conv_sparsity if kind == "conv2d" else self.sparsity_target


# --- pruning -----------------------------------------------------------------

def prune(weights: np.ndarray, sparsity: float) -> tuple[np.ndarray, np.ndarray]:
    """Zero the floor(sparsity*n) smallest-|w| entries (stable tie-break).

    Returns (pruned tensor, survivor bitmap of the same shape)."""
    if not 0.0 <= sparsity < 1.0:
        raise CompressionError("sparsity must be in [0, 1)")
    flat = weights.reshape(-1)
    n_zero = int(np.floor(sparsity * flat.size))
    keep = np.ones(flat.size, dtype=bool)
    if n_zero:
        order = np.argsort(np.abs(flat), kind="stable")
        keep[order[:n_zero]] = False
    pruned = np.where(keep, flat, 0).astype(weights.dtype)
    return pruned.reshape(weights.shape), keep.reshape(weights.shape)


# --- codebook quantization ---------------------------------------------------

def quantize(survivors: np.ndarray, bits: int,
             max_iter: int = 25) -> tuple[np.ndarray, np.ndarray]:
    """1-D k-means codebook over the surviving weights.

    Centroids are seeded with a linear spacing over [min, max], so the first
    assignment equals a uniform-bin quantizer and Lloyd iterations can only
    lower the reconstruction error from there. Values with <= 2^bits
    distinct levels are reproduced exactly.
    """
    values = np.asarray(survivors, dtype=np.float64).reshape(-1)
    if values.size == 0:
        return np.zeros(0, dtype=np.float32), np.zeros(0, dtype=np.uint32)
    if not 1 <= bits <= 16:
        raise CompressionError("bits must be in [1, 16]")
    k = 1 << bits

    distinct = np.unique(values)
    if distinct.size <= k:
        codebook = distinct
        idx = np.searchsorted(codebook, values)
    else:
        codebook = np.linspace(values.min(), values.max(), k)
        idx = np.zeros(values.size, dtype=np.int64)
        for _ in range(max_iter):
            # nearest centroid via boundary bisection (codebook stays sorted)
            bounds = (codebook[1:] + codebook[:-1]) / 2.0
            new_idx = np.searchsorted(bounds, values)
            sums = np.bincount(new_idx, weights=values, minlength=k)
            counts = np.bincount(new_idx, minlength=k)
            occupied = counts > 0
            updated = codebook.copy()
            updated[occupied] = sums[occupied] / counts[occupied]
            updated = np.sort(updated)
            if np.array_equal(new_idx, idx) and np.allclose(updated, codebook):
                break
            codebook, idx = updated, new_idx
        # one final assignment so every survivor maps to its nearest centroid
        bounds = (codebook[1:] + codebook[:-1]) / 2.0
        idx = np.searchsorted(bounds, values)
        # drop unused centroids, remap indices
        used = np.zeros(k, dtype=bool)
        used[np.unique(idx)] = True
        remap = np.cumsum(used) - 1
        codebook = codebook[used]
        idx = remap[idx]

    return codebook.astype(np.float32), idx.astype(np.uint32)


def dequantize(codebook: np.ndarray, indices: np.ndarray) -> np.ndarray:
    return codebook[indices]


# --- canonical Huffman coding -----------------------------------------------

def huffman_code_lengths(freqs: np.ndarray) -> np.ndarray:
    """Code length per symbol (0 for absent symbols); the single-symbol
    alphabet degenerates to a 1-bit code."""
    import heapq

    present = [int(s) for s in np.flatnonzero(freqs)]
    if not present:
        raise CompressionError("cannot build a code for an empty stream")
    lengths = np.zeros(len(freqs), dtype=np.uint8)
    if len(present) == 1:
        lengths[present[0]] = 1
        return lengths
    heap = [(int(freqs[s]), s, (s,)) for s in present]
    heapq.heapify(heap)
    tick = len(freqs)   # deterministic tie-break for equal frequencies
    while len(heap) > 1:
        fa, _, ga = heapq.heappop(heap)
        fb, _, gb = heapq.heappop(heap)
        for s in ga + gb:
            lengths[s] += 1
        heapq.heappush(heap, (fa + fb, tick, ga + gb))
        tick += 1
    return lengths


def _canonical_codes(lengths: np.ndarray) -> dict[int, tuple[int, int]]:
    """symbol -> (code, bitlength), codes assigned in (length, symbol) order."""
    order = sorted((int(l), s) for s, l in enumerate(lengths) if l > 0)
    codes = {}
    code = 0
    prev_len = order[0][0]
    for length, sym in order:
        code <<= (length - prev_len)
        codes[sym] = (code, length)
        code += 1
        prev_len = length
    return codes


def huffman_encode(indices: np.ndarray,
                   alphabet: int | None = None) -> tuple[np.ndarray, bytes, int]:
    """Returns (code lengths per symbol, padded stream, exact bit count)."""
    indices = np.asarray(indices, dtype=np.int64)
    if indices.size == 0:
        raise CompressionError("cannot encode an empty stream")
    n_sym = int(indices.max()) + 1 if alphabet is None else alphabet
    freqs = np.bincount(indices, minlength=n_sym)
    lengths = huffman_code_lengths(freqs)
    codes = _canonical_codes(lengths)

    acc = 0
    nbits = 0
    out = bytearray()
    for sym in indices:
        code, ln = codes[int(sym)]
        acc = (acc << ln) | code
        nbits += ln
        while nbits >= 8:
            nbits -= 8
            out.append((acc >> nbits) & 0xFF)
            acc &= (1 << nbits) - 1
    total_bits = len(out) * 8 + nbits
    if nbits:
        out.append((acc << (8 - nbits)) & 0xFF)
    return lengths, bytes(out), total_bits


def huffman_decode(stream: bytes, lengths: np.ndarray, count: int) -> np.ndarray:
    """Decode ``count`` symbols; raises :class:`DecodeError` with the bit
    offset when the stream does not parse."""
    codes = _canonical_codes(np.asarray(lengths))
    table = {v: s for s, v in codes.items()}
    max_len = max(l for _, l in codes.values())
    out = np.empty(count, dtype=np.uint32)
    code = 0
    ln = 0
    bit = 0
    total = len(stream) * 8
    got = 0
    while got < count:
        if bit >= total:
            raise DecodeError("stream exhausted before all symbols", offset=bit)
        byte = stream[bit >> 3]
        code = (code << 1) | ((byte >> (7 - (bit & 7))) & 1)
        ln += 1
        bit += 1
        if (code, ln) in table:
            out[got] = table[(code, ln)]
            got += 1
            code = 0
            ln = 0
        elif ln > max_len:
            raise DecodeError("invalid code word", offset=bit)
    return out


# --- bitmap run-length coding --------------------------------------------

def _varint(value: int) -> bytes:
    out = bytearray()
    while True:
        b = value & 0x7F
        value >>= 7
        if value:
            out.append(b | 0x80)
        else:
            out.append(b)
            return bytes(out)


def _read_varint(data: bytes, off: int) -> tuple[int, int]:
    value = 0
    shift = 0
    while True:
        b = data[off]
        off += 1
        value |= (b & 0x7F) << shift
        if not b & 0x80:
            return value, off
        shift += 7


def rle_encode_bitmap(bitmap: np.ndarray) -> bytes:
    """Alternating run lengths, starting with a zero-run (possibly empty)."""
    flat = bitmap.reshape(-1).astype(bool)
    runs = []
    current = False
    run = 0
    for v in flat:
        if v == current:
            run += 1
        else:
            runs.append(run)
            current = v
            run = 1
    runs.append(run)
    return b"".join(_varint(r) for r in runs)


def rle_decode_bitmap(data: bytes, n: int) -> tuple[np.ndarray, int]:
    flat = np.zeros(n, dtype=bool)
    pos = 0
    off = 0
    value = False
    while pos < n:
        run, off = _read_varint(data, off)
        if pos + run > n:
            raise DecodeError("bitmap run overflows tensor", offset=off)
        if value:
            flat[pos:pos + run] = True
        pos += run
        value = not value
    return flat, off


# --- whole-model pipeline -----------------------------------------------

@dataclass(frozen=True)
class LayerBlock:
    """Compressed form of one parametric layer's weight tensor + raw bias."""

    kind: str
    shape: tuple[int, ...]
    bitmap: np.ndarray             # bool, tensor shape
    codebook: np.ndarray           # float32; empty => raw survivors
    indices: np.ndarray            # uint32 per survivor (codebook mode)
    raw_survivors: np.ndarray      # float32 (passthrough mode)
    bias: np.ndarray               # float32


@dataclass(frozen=True)
class CompressedModel:
    layers: tuple
    input_shape: tuple[int, int, int]
    version: int
    val_metrics: dict
    blocks: tuple[LayerBlock, ...]
    original_digest: str
    restored_digest: str
    original_size: int

    @property
    def compressed_size(self) -> int:
        return len(serialize_compressed(self))

    @property
    def ratio(self) -> float:
        return self.original_size / self.compressed_size

    @property
    def digest(self) -> str:
        return hashlib.sha256(serialize_compressed(self)[:-32]).hexdigest()


def _parametric_layers(artifact: ModelArtifact):
    """Yields (spec, weight, bias) triples in layer order."""
    i = 0
    for spec in artifact.layers:
        if spec.parametric:
            yield spec, artifact.weights[i], artifact.weights[i + 1]
            i += 2


def fine_tune_pruned(artifact: ModelArtifact, masks: list[np.ndarray],
                     data_xy, epochs: int = 4, learning_rate: float = 1e-3,
                     batch_size: int = 64, seed: int = 0) -> ModelArtifact:
    """Retrain the surviving weights only (gradients and weights stay
    masked), recovering accuracy lost to pruning before quantization."""
    from .nn.losses import crossentropy_grad, one_hot
    from .nn.model import Network
    from .nn.optim import AdamState, step_adam

    x, y = data_xy
    net = Network(artifact, dtype=np.float32)
    mask32 = [m.astype(np.float32) for m in masks]
    state = AdamState()
    rng = np.random.default_rng(seed)
    for _ in range(epochs):
        order = rng.permutation(len(x))
        for i in range(0, len(order), batch_size):
            idx = order[i:i + batch_size]
            pred = net.forward(np.asarray(x[idx], dtype=np.float32))
            grads = net.backward(crossentropy_grad(
                pred, one_hot(y[idx], dtype=np.float32)))
            grads = [g * m for g, m in zip(grads, mask32)]
            stepped = step_adam(net.params, grads, learning_rate, state)
            net.set_params([p * m for p, m in zip(stepped, mask32)])
    return net.to_artifact()


def compress_model(artifact: ModelArtifact,
                   cfg: CompressionConfig | None = None,
                   fine_tune_data=None,
                   fine_tune_epochs: int = 4) -> CompressedModel:
    cfg = cfg or CompressionConfig()

    # phase 1: prune every parametric weight tensor (biases stay dense)
    masks: dict[int, np.ndarray] = {}
    pruned_weights = list(artifact.weights)
    slot = 0
    for spec in artifact.layers:
        if spec.parametric:
            pruned, bitmap = prune(artifact.weights[slot],
                                   cfg.sparsity_for(spec.kind))
            pruned_weights[slot] = pruned
            masks[slot] = bitmap
            slot += 2
    working = ModelArtifact(artifact.layers, tuple(pruned_weights),
                            artifact.input_shape, version=artifact.version,
                            val_metrics=dict(artifact.val_metrics))

    # phase 2 (optional): masked fine-tune of the survivors
    if fine_tune_data is not None and fine_tune_epochs > 0:
        all_masks = []
        slot = 0
        for spec in artifact.layers:
            if spec.parametric:
                all_masks.append(masks[slot])
                all_masks.append(np.ones_like(artifact.weights[slot + 1],
                                              dtype=bool))
                slot += 2
        working = fine_tune_pruned(working, all_masks, fine_tune_data,
                                   epochs=fine_tune_epochs)
        working = ModelArtifact(artifact.layers, working.weights,
                                artifact.input_shape, version=artifact.version,
                                val_metrics=dict(artifact.val_metrics))

    # phase 3: quantize survivors per layer and assemble blocks
    blocks = []
    restored_weights = []
    slot = 0
    for spec, w, b in _parametric_layers(working):
        bitmap = masks[slot]
        slot += 2
        survivors = w.reshape(-1)[bitmap.reshape(-1)]
        bits = cfg.bits_for(spec.kind)
        use_codebook = bits is not None and survivors.size > 0
        if use_codebook:
            codebook, indices = quantize(survivors, bits)
            lengths, stream, _ = huffman_encode(indices,
                                                alphabet=codebook.size)
            coded_bytes = 4 * codebook.size + len(lengths) + len(stream) + 14
            # tiny tensors: the codebook+table overhead can exceed raw floats
            use_codebook = coded_bytes < 4 * survivors.size
        if use_codebook:
            raw = np.zeros(0, dtype=np.float32)
            values = dequantize(codebook, indices)
        else:
            codebook = np.zeros(0, dtype=np.float32)
            indices = np.zeros(0, dtype=np.uint32)
            raw = survivors.astype(np.float32)
            values = raw
        restored = np.zeros(w.size, dtype=np.float32)
        restored[bitmap.reshape(-1)] = values
        restored_weights.append(restored.reshape(w.shape))
        restored_weights.append(b.astype(np.float32))
        blocks.append(LayerBlock(spec.kind, tuple(w.shape), bitmap, codebook,
                                 indices, raw, b.astype(np.float32)))

    restored_artifact = ModelArtifact(
        artifact.layers, tuple(restored_weights), artifact.input_shape,
        version=artifact.version, val_metrics=dict(artifact.val_metrics))
    return CompressedModel(
        layers=artifact.layers,
        input_shape=artifact.input_shape,
        version=artifact.version,
        val_metrics=dict(artifact.val_metrics),
        blocks=tuple(blocks),
        original_digest=artifact.digest,
        restored_digest=restored_artifact.digest,
        original_size=len(serialize_artifact(artifact)),
    )


def decompress_model(cm: CompressedModel) -> ModelArtifact:
    """Rebuild the pruned+quantized model and verify its recorded digest."""
    weights = []
    for block in cm.blocks:
        flat = np.zeros(int(np.prod(block.shape)), dtype=np.float32)
        if block.codebook.size:
            flat[block.bitmap.reshape(-1)] = dequantize(block.codebook,
                                                        block.indices)
        elif block.raw_survivors.size:
            flat[block.bitmap.reshape(-1)] = block.raw_survivors
        weights.append(flat.reshape(block.shape))
        weights.append(block.bias.copy())
    artifact = ModelArtifact(cm.layers, tuple(weights), cm.input_shape,
                             version=cm.version,
                             val_metrics=dict(cm.val_metrics))
    if artifact.digest != cm.restored_digest:
        raise CorruptionError("decompressed model digest mismatch")
    return artifact


# --- container serialization ------------------------------------------------

def serialize_compressed(cm: CompressedModel) -> bytes:
    body = bytearray(pack_header(CMAGIC, cm))
    body += bytes.fromhex(cm.original_digest)
    body += bytes.fromhex(cm.restored_digest)
    body += struct.pack("<Q", cm.original_size)
    for block in cm.blocks:
        n = int(np.prod(block.shape))
        survivors = int(block.bitmap.sum())
        rle = rle_encode_bitmap(block.bitmap)
        body += struct.pack("<QQI", n, survivors, len(rle))
        body += rle
        body += struct.pack("<H", block.codebook.size)
        if block.codebook.size:
            body += block.codebook.astype("<f4").tobytes()
            lengths, stream, nbits = huffman_encode(
                block.indices, alphabet=block.codebook.size)
            body += struct.pack("<H", len(lengths)) + lengths.tobytes()
            body += struct.pack("<QI", nbits, len(stream)) + stream
        else:
            body += block.raw_survivors.astype("<f4").tobytes()
        body += struct.pack("<I", block.bias.size)
        body += block.bias.astype("<f4").tobytes()
    return bytes(body) + hashlib.sha256(bytes(body)).digest()


def parse_compressed(data: bytes) -> CompressedModel:
    stored = data[-32:]
    body = data[:-32]
    if hashlib.sha256(body).digest() != stored:
        raise CorruptionError("compressed container digest mismatch")
    version, input_shape, specs, metrics, off = unpack_header(body, CMAGIC)
    original_digest = body[off:off + 32].hex()
    restored_digest = body[off + 32:off + 64].hex()
    off += 64
    (original_size,) = struct.unpack_from("<Q", body, off)
    off += 8

    blocks = []
    for spec in specs:
        if not spec.parametric:
            continue
        n, survivors, rle_len = struct.unpack_from("<QQI", body, off)
        off += struct.calcsize("<QQI")
        bitmap_flat, used = rle_decode_bitmap(body[off:off + rle_len], n)
        if used != rle_len:
            raise DecodeError("bitmap RLE length mismatch", offset=off + used)
        if int(bitmap_flat.sum()) != survivors:
            raise DecodeError("survivor count mismatch", offset=off)
        off += rle_len
        (k,) = struct.unpack_from("<H", body, off)
        off += 2
        if k:
            codebook = np.frombuffer(body, dtype="<f4", count=k, offset=off).copy()
            off += 4 * k
            (n_lengths,) = struct.unpack_from("<H", body, off)
            off += 2
            lengths = np.frombuffer(body, dtype=np.uint8, count=n_lengths,
                                    offset=off).copy()
            off += n_lengths
            nbits, stream_len = struct.unpack_from("<QI", body, off)
            off += struct.calcsize("<QI")
            stream = body[off:off + stream_len]
            off += stream_len
            indices = (huffman_decode(stream, lengths, survivors)
                       if survivors else np.zeros(0, dtype=np.uint32))
            raw = np.zeros(0, dtype=np.float32)
        else:
            codebook = np.zeros(0, dtype=np.float32)
            indices = np.zeros(0, dtype=np.uint32)
            raw = np.frombuffer(body, dtype="<f4", count=survivors,
                                offset=off).copy()
            off += 4 * survivors
        (bias_n,) = struct.unpack_from("<I", body, off)
        off += 4
        bias = np.frombuffer(body, dtype="<f4", count=bias_n, offset=off).copy()
        off += 4 * bias_n

        # recover the tensor shape from the spec chain
        blocks.append((spec.kind, bitmap_flat, codebook, indices, raw, bias))

    if off != len(body):
        raise DecodeError("trailing bytes in container", offset=off)

    # rebuild shapes by walking the spec chain
    shapes = _weight_shapes(specs, input_shape)
    weight_shapes = shapes[0::2]
    final_blocks = []
    for (kind, bitmap_flat, codebook, indices, raw, bias), shape in zip(
            blocks, weight_shapes):
        final_blocks.append(LayerBlock(kind, tuple(shape),
                                       bitmap_flat.reshape(shape), codebook,
                                       indices, raw, bias))
    return CompressedModel(specs, input_shape, version, metrics,
                           tuple(final_blocks), original_digest,
                           restored_digest, original_size)


def write_compressed(cm: CompressedModel, path) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize_compressed(cm))


def read_compressed(path) -> CompressedModel:
    with open(path, "rb") as fh:
        return parse_compressed(fh.read())
