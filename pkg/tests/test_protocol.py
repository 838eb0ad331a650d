import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cxrelay.protocol import (
    Frame,
    MsgType,
    PredictResponse,
    ProtocolError,
    ScanMetadata,
    UpdateAvailable,
    decode_frame,
    encode_frame,
    frame_overhead,
    ledger_weekly_total,
    pack_ack,
    pack_chunk,
    pack_confirm,
    pack_metadata,
    pack_scan_request,
    pack_update_check,
    unpack_chunk,
    unpack_confirm,
    unpack_metadata,
    unpack_scan_request,
    unpack_update_check,
)

DIGEST = "ab" * 32


class TestFrameCodec:
    def test_empty_ack_is_12_bytes(self):
        assert len(encode_frame(pack_ack())) == 12
        assert frame_overhead() == 12

    def test_roundtrip(self):
        frame = Frame(MsgType.PREDICT_REQ, b"hello world")
        assert decode_frame(encode_frame(frame)) == frame

    def test_crc_rejects_flip(self):
        data = bytearray(encode_frame(Frame(MsgType.ACK, b"abcdef")))
        data[9] ^= 0x40
        with pytest.raises(ProtocolError):
            decode_frame(bytes(data))

    def test_bad_magic(self):
        data = bytearray(encode_frame(pack_ack()))
        data[0] = 0x58
        with pytest.raises(ProtocolError) as err:
            decode_frame(bytes(data))
        assert err.value.reason in ("magic", "crc")

    def test_single_bit_corruption_always_detected(self):
        rng = np.random.default_rng(0)
        payload = rng.integers(0, 256, size=64, dtype=np.uint8).tobytes()
        wire = encode_frame(Frame(MsgType.FLUSH_BATCH, payload))
        for _ in range(200):
            pos = int(rng.integers(0, len(wire)))
            bit = 1 << int(rng.integers(0, 8))
            corrupted = bytearray(wire)
            corrupted[pos] ^= bit
            with pytest.raises(ProtocolError):
                decode_frame(bytes(corrupted))

    @settings(max_examples=200, deadline=None)
    @given(kind=st.sampled_from(list(MsgType)),
           payload=st.binary(max_size=512))
    def test_fuzz_roundtrip(self, kind, payload):
        frame = Frame(kind, payload)
        assert decode_frame(encode_frame(frame)) == frame


class TestScanRequest:
    def meta(self, **kw):
        defaults = dict(scan_id="scan-0001", width=128, height=128,
                        client_version=3, client_digest=DIGEST,
                        timestamp=1234.5, token="tok")
        defaults.update(kw)
        return ScanMetadata(**defaults)

    def test_metadata_block_is_1kb(self):
        assert len(pack_metadata(self.meta())) == 1024

    def test_metadata_roundtrip(self):
        meta = self.meta(local_prob=0.75, local_verdict=1)
        again = unpack_metadata(pack_metadata(meta))
        assert again.scan_id == meta.scan_id
        assert again.client_digest == DIGEST
        assert again.local_verdict == 1
        assert abs(again.local_prob - 0.75) < 1e-6
        assert again.token == "tok"

    def test_predict_request_budget(self):
        raster = bytes(16384)
        frame = pack_scan_request(self.meta(), raster)
        assert len(frame.payload) == 17408             # 16 KB image + 1 KB meta
        assert len(encode_frame(frame)) == 17408 + frame_overhead()

    def test_scan_request_roundtrip(self):
        raster = bytes(range(256)) * 64
        meta = self.meta(width=128, height=128)
        frame = pack_scan_request(meta, raster, flush=True)
        assert frame.msg_type == MsgType.FLUSH_BATCH
        got_meta, got_raster = unpack_scan_request(frame)
        assert got_meta.scan_id == meta.scan_id
        assert got_raster == raster

    def test_raster_length_checked(self):
        frame = pack_scan_request(self.meta(), bytes(100))
        with pytest.raises(ProtocolError):
            unpack_scan_request(frame)


class TestPredictResponse:
    def test_roundtrip_and_budget(self):
        resp = PredictResponse(probability=0.93, verdict=1, model_version=7,
                               recall=0.97, precision=0.88,
                               model_digest=DIGEST, version_mismatch=True)
        frame = resp.pack()
        assert len(frame.payload) <= 256
        assert len(encode_frame(frame)) < 300
        again = PredictResponse.unpack(frame)
        assert again.verdict == 1
        assert again.model_version == 7
        assert again.version_mismatch
        assert abs(again.probability - 0.93) < 1e-6
        assert again.model_digest == DIGEST


class TestUpdateMessages:
    def test_update_check_roundtrip(self):
        frame = pack_update_check(DIGEST)
        assert unpack_update_check(frame) == DIGEST
        assert unpack_update_check(pack_update_check("")) == ""

    def test_update_avail_roundtrip(self):
        avail = UpdateAvailable(DIGEST, total_size=123456, version=4)
        again = UpdateAvailable.unpack(avail.pack())
        assert again == avail

    def test_chunk_roundtrip(self):
        frame = pack_chunk(DIGEST, offset=8192, total=123456, data=b"x" * 100)
        digest, offset, total, data = unpack_chunk(frame)
        assert (digest, offset, total, data) == (DIGEST, 8192, 123456, b"x" * 100)


class TestConfirm:
    def test_roundtrip(self):
        sid, flag = unpack_confirm(pack_confirm("scan-9", False))
        assert sid == "scan-9" and flag is False


class TestTranscript:
    def test_roundtrip(self, tmp_path):
        from cxrelay.protocol import read_transcript, write_transcript

        frames = [encode_frame(pack_ack()), encode_frame(pack_confirm("a", True)),
                  encode_frame(Frame(MsgType.FLUSH_BATCH, bytes(100)))]
        path = tmp_path / "log.bin"
        write_transcript(path, frames)
        assert read_transcript(path) == frames
        # every recorded frame decodes cleanly on replay
        for raw in read_transcript(path):
            decode_frame(raw)

    def test_truncation_detected(self, tmp_path):
        from cxrelay.protocol import read_transcript, write_transcript

        path = tmp_path / "log.bin"
        write_transcript(path, [encode_frame(pack_ack())])
        blob = path.read_bytes()
        path.write_bytes(blob[:-3])
        with pytest.raises(ProtocolError):
            read_transcript(path)

    def test_recording_transport(self, tmp_path):
        from cxrelay.protocol import LoopbackTransport, RecordingTransport

        recorder = RecordingTransport(LoopbackTransport(
            lambda req: encode_frame(pack_ack("ok"))))
        request = encode_frame(pack_confirm("s1", True))
        recorder.exchange(request)
        path = tmp_path / "exchange.bin"
        recorder.save(path)
        from cxrelay.protocol import read_transcript

        frames = read_transcript(path)
        assert frames[0] == request
        assert decode_frame(frames[1]).msg_type == MsgType.ACK


class TestLedger:
    def test_paper_reference_arithmetic(self):
        assert ledger_weekly_total(100, 17, 1, 1, 5) == 17720

    def test_empty_week(self):
        assert ledger_weekly_total(0, 17, 1, 0, 5) == 0

    def test_no_update_week(self):
        assert ledger_weekly_total(100, 17, 1, 0, 5) == 12600

    def test_rejects_negative(self):
        with pytest.raises(ValueError):
            ledger_weekly_total(-1, 17, 1, 1, 5)
