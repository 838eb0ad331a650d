"""Client/server wire protocol and the bandwidth ledger.

Frame layout (all integers little-endian)::

    magic   2 bytes  "CX"
    version 1 byte
    type    1 byte
    length  4 bytes  payload byte count
    payload
    crc32   4 bytes  over header+payload

An empty-payload frame is exactly 12 bytes. Scan-bearing requests carry a
metadata block padded to exactly 1024 bytes followed by the raster, so a
128x128 scan costs 16384 + 1024 = 17408 payload bytes: the "(17+1) KB per
scan" budget line item. Responses stay under 256 payload bytes.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from enum import IntEnum

MAGIC = b"CX"
VERSION = 1
HEADER = struct.Struct("<2sBBI")
MAX_PAYLOAD = 16 * 1024 * 1024
METADATA_BLOCK = 1024
RESPONSE_BUDGET = 256
CHUNK_SIZE = 8192


class ProtocolError(Exception):
    def __init__(self, message: str, reason: str = "malformed"):
        super().__init__(message)
        self.reason = reason


class MsgType(IntEnum):
    PREDICT_REQ = 1
    PREDICT_RESP = 2
    CONFIRM_REQ = 3
    ACK = 4
    UPDATE_CHECK = 5
    UPDATE_AVAIL = 6
    UPDATE_NONE = 7
    MODEL_CHUNK = 8
    FLUSH_BATCH = 9
    ERROR = 10


@dataclass(frozen=True)
class Frame:
    msg_type: MsgType
    payload: bytes = b""


def encode_frame(frame: Frame) -> bytes:
    if len(frame.payload) > MAX_PAYLOAD:
        raise ProtocolError("payload too large", reason="oversize")
    head = HEADER.pack(MAGIC, VERSION, int(frame.msg_type), len(frame.payload))
    body = head + frame.payload
    return body + struct.pack("<I", zlib.crc32(body))


def decode_frame(data: bytes) -> Frame:
    if len(data) < HEADER.size + 4:
        raise ProtocolError("frame shorter than header", reason="truncated")
    magic, version, msg_type, length = HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise ProtocolError(f"bad magic {magic!r}", reason="magic")
    if version != VERSION:
        raise ProtocolError(f"unsupported version {version}", reason="version")
    if length > MAX_PAYLOAD:
        raise ProtocolError("declared payload too large", reason="oversize")
    if len(data) != HEADER.size + length + 4:
        raise ProtocolError("frame length mismatch", reason="length")
    body = data[:HEADER.size + length]
    (crc,) = struct.unpack_from("<I", data, HEADER.size + length)
    if zlib.crc32(body) != crc:
        raise ProtocolError("checksum failure", reason="crc")
    try:
        kind = MsgType(msg_type)
    except ValueError:
        raise ProtocolError(f"unknown message type {msg_type}", reason="type")
    return Frame(kind, data[HEADER.size:HEADER.size + length])


def frame_overhead() -> int:
    return HEADER.size + 4


# --- scan metadata block -----------------------------------------------------

@dataclass(frozen=True)
class ScanMetadata:
    """Fixed-size (1024-byte) per-scan request metadata."""

    scan_id: str
    width: int
    height: int
    client_version: int = 0
    client_digest: str = ""          # hex sha256 or empty
    timestamp: float = 0.0
    token: str = ""
    local_prob: float | None = None  # set when flushing an offline verdict
    local_verdict: int | None = None


def pack_metadata(meta: ScanMetadata) -> bytes:
    sid = meta.scan_id.encode()
    token = meta.token.encode()
    if len(sid) > 64:
        raise ProtocolError("scan id longer than 64 bytes", reason="oversize")
    digest = bytes.fromhex(meta.client_digest) if meta.client_digest else b"\x00" * 32
    if len(digest) != 32:
        raise ProtocolError("digest must be 32 bytes", reason="digest")
    has_local = meta.local_prob is not None
    block = struct.pack("<B", len(sid)) + sid
    block += struct.pack("<HH", meta.width, meta.height)
    block += struct.pack("<B", 1 if has_local else 0)
    block += struct.pack("<fB", meta.local_prob if has_local else 0.0,
                         meta.local_verdict or 0)
    block += struct.pack("<I", meta.client_version)
    block += digest
    block += struct.pack("<d", meta.timestamp)
    block += struct.pack("<H", len(token)) + token
    if len(block) > METADATA_BLOCK:
        raise ProtocolError("metadata exceeds its 1 KB budget", reason="oversize")
    return block + b"\x00" * (METADATA_BLOCK - len(block))


def unpack_metadata(block: bytes) -> ScanMetadata:
    if len(block) != METADATA_BLOCK:
        raise ProtocolError("metadata block must be exactly 1024 bytes",
                            reason="length")
    off = 0
    (sid_len,) = struct.unpack_from("<B", block, off)
    off += 1
    scan_id = block[off:off + sid_len].decode()
    off += sid_len
    width, height = struct.unpack_from("<HH", block, off)
    off += 4
    (has_local,) = struct.unpack_from("<B", block, off)
    off += 1
    local_prob, local_verdict = struct.unpack_from("<fB", block, off)
    off += 5
    (client_version,) = struct.unpack_from("<I", block, off)
    off += 4
    digest = block[off:off + 32]
    off += 32
    (timestamp,) = struct.unpack_from("<d", block, off)
    off += 8
    (token_len,) = struct.unpack_from("<H", block, off)
    off += 2
    token = block[off:off + token_len].decode()
    return ScanMetadata(
        scan_id=scan_id, width=width, height=height,
        client_version=client_version,
        client_digest="" if digest == b"\x00" * 32 else digest.hex(),
        timestamp=timestamp, token=token,
        local_prob=float(local_prob) if has_local else None,
        local_verdict=int(local_verdict) if has_local else None,
    )


# --- message payloads --------------------------------------------------------

def pack_scan_request(meta: ScanMetadata, raster: bytes,
                      flush: bool = False) -> Frame:
    kind = MsgType.FLUSH_BATCH if flush else MsgType.PREDICT_REQ
    return Frame(kind, pack_metadata(meta) + raster)


def unpack_scan_request(frame: Frame) -> tuple[ScanMetadata, bytes]:
    if len(frame.payload) < METADATA_BLOCK:
        raise ProtocolError("scan request shorter than metadata block",
                            reason="truncated")
    meta = unpack_metadata(frame.payload[:METADATA_BLOCK])
    raster = frame.payload[METADATA_BLOCK:]
    if len(raster) != meta.width * meta.height:
        raise ProtocolError("raster length does not match metadata dims",
                            reason="length")
    return meta, raster


@dataclass(frozen=True)
class PredictResponse:
    probability: float              # P(Pneumonia)
    verdict: int                    # 0 Normal, 1 Pneumonia
    model_version: int
    recall: float
    precision: float
    model_digest: str
    version_mismatch: bool = False

    def pack(self) -> Frame:
        digest = bytes.fromhex(self.model_digest) if self.model_digest else b"\x00" * 32
        payload = struct.pack("<fBIff", self.probability, self.verdict,
                              self.model_version, self.recall, self.precision)
        payload += digest + struct.pack("<B", 1 if self.version_mismatch else 0)
        assert len(payload) <= RESPONSE_BUDGET
        return Frame(MsgType.PREDICT_RESP, payload)

    @classmethod
    def unpack(cls, frame: Frame) -> "PredictResponse":
        prob, verdict, version, recall, precision = struct.unpack_from(
            "<fBIff", frame.payload, 0)
        off = struct.calcsize("<fBIff")
        digest = frame.payload[off:off + 32]
        (mismatch,) = struct.unpack_from("<B", frame.payload, off + 32)
        return cls(float(prob), int(verdict), int(version), float(recall),
                   float(precision), digest.hex(), bool(mismatch))


def pack_confirm(scan_id: str, confirmed: bool) -> Frame:
    sid = scan_id.encode()
    return Frame(MsgType.CONFIRM_REQ,
                 struct.pack("<B", len(sid)) + sid
                 + struct.pack("<B", 1 if confirmed else 0))


def unpack_confirm(frame: Frame) -> tuple[str, bool]:
    (n,) = struct.unpack_from("<B", frame.payload, 0)
    sid = frame.payload[1:1 + n].decode()
    (flag,) = struct.unpack_from("<B", frame.payload, 1 + n)
    return sid, bool(flag)


def pack_ack(echo_id: str = "") -> Frame:
    return Frame(MsgType.ACK, echo_id.encode())


def pack_update_check(digest: str) -> Frame:
    raw = bytes.fromhex(digest) if digest else b"\x00" * 32
    if len(raw) != 32:
        raise ProtocolError("digest must be 32 bytes hex", reason="digest")
    return Frame(MsgType.UPDATE_CHECK, raw)


def unpack_update_check(frame: Frame) -> str:
    if len(frame.payload) != 32:
        raise ProtocolError("update check payload must be 32 bytes",
                            reason="length")
    return "" if frame.payload == b"\x00" * 32 else frame.payload.hex()


@dataclass(frozen=True)
class UpdateAvailable:
    digest: str
    total_size: int
    version: int
    chunk_size: int = CHUNK_SIZE

    def pack(self) -> Frame:
        return Frame(MsgType.UPDATE_AVAIL,
                     bytes.fromhex(self.digest)
                     + struct.pack("<QII", self.total_size, self.version,
                                   self.chunk_size))

    @classmethod
    def unpack(cls, frame: Frame) -> "UpdateAvailable":
        digest = frame.payload[:32].hex()
        total, version, chunk = struct.unpack_from("<QII", frame.payload, 32)
        return cls(digest, int(total), int(version), int(chunk))


def pack_chunk_request(digest: str, offset: int) -> Frame:
    return Frame(MsgType.MODEL_CHUNK,
                 bytes.fromhex(digest) + struct.pack("<QQ", offset, 0))


def pack_chunk(digest: str, offset: int, total: int, data: bytes) -> Frame:
    return Frame(MsgType.MODEL_CHUNK,
                 bytes.fromhex(digest) + struct.pack("<QQ", offset, total) + data)


def unpack_chunk(frame: Frame) -> tuple[str, int, int, bytes]:
    digest = frame.payload[:32].hex()
    offset, total = struct.unpack_from("<QQ", frame.payload, 32)
    return digest, int(offset), int(total), frame.payload[48:]


def pack_error(code: int, message: str) -> Frame:
    return Frame(MsgType.ERROR, struct.pack("<B", code) + message.encode())


def unpack_error(frame: Frame) -> tuple[int, str]:
    return frame.payload[0], frame.payload[1:].decode()


class ErrorCode(IntEnum):
    MALFORMED = 1
    NOT_FOUND = 2
    OVERSIZE = 3
    INTERNAL = 4


# --- transports ---------------------------------------------------------------

class LinkError(Exception):
    """Transport could not complete an exchange (down or timed out)."""


class Transport:
    """One request/response exchange per call; implementations raise
    :class:`LinkError` when the link is unavailable."""

    def exchange(self, request: bytes) -> bytes:
        raise NotImplementedError


class LoopbackTransport(Transport):
    """Directly invokes a server-side frame handler; always 'online'."""

    def __init__(self, handler):
        self.handler = handler

    def exchange(self, request: bytes) -> bytes:
        return self.handler(request)


# --- transcripts ---------------------------------------------------------------

def write_transcript(path, frames: list[bytes]) -> None:
    """Length-prefixed frame log (u32 LE per entry) for replay testing."""
    with open(path, "wb") as fh:
        for frame in frames:
            fh.write(struct.pack("<I", len(frame)))
            fh.write(frame)


def read_transcript(path) -> list[bytes]:
    frames = []
    with open(path, "rb") as fh:
        data = fh.read()
    off = 0
    while off < len(data):
        if off + 4 > len(data):
            raise ProtocolError("truncated transcript entry", reason="truncated")
        (length,) = struct.unpack_from("<I", data, off)
        off += 4
        if off + length > len(data):
            raise ProtocolError("truncated transcript frame", reason="truncated")
        frames.append(data[off:off + length])
        off += length
    return frames


class RecordingTransport(Transport):
    """Wraps a transport, logging every exchanged frame in order."""

    def __init__(self, inner: Transport):
        self.inner = inner
        self.frames: list[bytes] = []

    def exchange(self, request: bytes) -> bytes:
        self.frames.append(request)
        response = self.inner.exchange(request)
        self.frames.append(response)
        return response

    def save(self, path) -> None:
        write_transcript(path, self.frames)


# --- bandwidth ledger ----------------------------------------------------------

@dataclass
class BandwidthLedger:
    """Byte accounting for everything the client sent and received."""

    scans: int = 0
    bytes_up: int = 0
    bytes_down: int = 0
    model_bytes_down: int = 0
    events: list = field(default_factory=list)

    def log_exchange(self, label: str, up: int, down: int,
                     model_bytes: int = 0) -> None:
        self.bytes_up += up
        self.bytes_down += down
        self.model_bytes_down += model_bytes
        if label in ("predict", "flush"):   # every scan costs one upload
            self.scans += 1
        self.events.append((label, up, down))

    def totals(self) -> dict:
        return {
            "scans": self.scans,
            "bytes_up": self.bytes_up,
            "bytes_down": self.bytes_down,
            "model_bytes_down": self.model_bytes_down,
        }


def ledger_weekly_total(scans_per_day: float, per_scan_kb: float,
                        overhead_kb: float, updates_per_week: float,
                        model_mb: float) -> float:
    """Projected weekly KB: scans*(scan+overhead)*7 + updates*model*1024."""
    if min(scans_per_day, per_scan_kb, overhead_kb, updates_per_week,
           model_mb) < 0:
        raise ValueError("ledger inputs must be non-negative")
    return (scans_per_day * (per_scan_kb + overhead_kb) * 7
            + updates_per_week * model_mb * 1024)
