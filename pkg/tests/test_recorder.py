
import numpy as np
import pytest

from rdm.codecs import CodecSpec, Decoder, PlanIncompatible, deserialize_tensor
from rdm.container import open_container
from rdm.recorder import (
    CorruptInput,
    DtypeMismatch,
    LOSSLESS_PLAN,
    Recorder,
    RecorderClosed,
    TranscodePlan,
    infer_stream,
    start_episode,
    transcode,
)

MS = 1_000_000


def capture_episode(path, n_frames=20, with_action=True):
    rec = Recorder(path, metadata=[("task", "demo")])
    rng = np.random.default_rng(9)
    for i in range(n_frames):
        rec.add("cam0", rng.integers(0, 256, (8, 8, 3), dtype=np.uint8),
                timestamp_ns=i * 33 * MS)
        if with_action:
            rec.add("action", rng.normal(size=7).astype(np.float32),
                    timestamp_ns=i * 33 * MS)
    rec.add("instruction", "pick up the tiger", timestamp_ns=0)
    rec.close()
    return path


def test_empty_episode(tmp_path):
    path = tmp_path / "empty.rdm"
    rec = start_episode(path, metadata=[("operator", "nobody")])
    rec.close()
    with open_container(path) as reader:
        assert reader.empty_episode
        assert reader.metadata == {"operator": "nobody"}
        assert list(reader.iter_packets()) == []


def test_metadata_last_writer_wins():
    rec_meta = [("a", "1"), ("b", "2"), ("a", "3")]
    import io

    rec = Recorder(io.BytesIO(), metadata=rec_meta)
    assert rec._writer.metadata == (("a", "3"), ("b", "2"))
    rec.close()


def test_read_only_sink(tmp_path):
    target = tmp_path / "x.rdm"
    target.write_bytes(b"")
    with open(target, "rb") as read_only:
        with pytest.raises(OSError):
            Recorder(read_only)
    with pytest.raises(OSError):
        Recorder(tmp_path / "no_such_dir" / "x.rdm")


def test_kind_inference(tmp_path):
    rec = Recorder(tmp_path / "ep.rdm")
    rec.add("cam0", np.zeros((180, 320, 3), dtype=np.uint8), timestamp_ns=0)
    rec.add("cam0", np.zeros((180, 320, 3), dtype=np.uint8), timestamp_ns=1)
    rec.add("instr", "pick up the tiger", timestamp_ns=0)
    rec.add("joints", np.zeros(7, dtype=np.float32), timestamp_ns=0)
    rec.add("ranges", np.zeros((16, 16), dtype=np.uint16), timestamp_ns=0, kind="depth")
    rec.add("pose", np.zeros((4, 4), dtype=np.float64), timestamp_ns=0)
    kinds = {s.name: s.kind for s in rec.streams}
    assert kinds == {
        "cam0": "vision", "instr": "language", "joints": "action",
        "ranges": "depth", "pose": "other",
    }
    assert [s.stream_id for s in rec.streams] == [1, 2, 3, 4, 5]
    rec.close()
    with open_container(tmp_path / "ep.rdm") as reader:
        assert reader.raw
        cam = reader.stream("cam0")
        assert (cam.dtype, cam.shape) == ("u8", (180, 320, 3))
        assert len(list(reader.iter_packets(streams=["cam0"]))) == 2


def test_infer_stream_contract():
    assert infer_stream("x", "hello") == ("language", "utf8", ())
    assert infer_stream("x", np.zeros((2, 2, 3), np.uint8)) == ("vision", "u8", (2, 2, 3))
    assert infer_stream("x", np.zeros(5, np.int64)) == ("action", "i64", (5,))
    assert infer_stream("x", np.zeros((2, 2), np.uint16)) == ("other", "u16", (2, 2))
    assert infer_stream("x", np.zeros((2, 2), np.float32), kind="depth")[0] == "depth"
    with pytest.raises(DtypeMismatch):
        infer_stream("x", np.zeros(3), kind="language")


def test_dtype_and_shape_guards(tmp_path):
    rec = Recorder(tmp_path / "ep.rdm")
    rec.add("cam0", np.zeros((4, 4, 3), dtype=np.uint8), timestamp_ns=0)
    with pytest.raises(DtypeMismatch):
        rec.add("cam0", np.zeros((4, 4, 3), dtype=np.float32), timestamp_ns=1)
    from rdm.recorder import ShapeMismatch

    with pytest.raises(ShapeMismatch):
        rec.add("cam0", np.zeros((5, 4, 3), dtype=np.uint8), timestamp_ns=1)
    rec.close()


def test_close_semantics(tmp_path):
    path = capture_episode(tmp_path / "ep.rdm", n_frames=5)
    with open_container(path) as reader:
        assert len(list(reader.iter_packets())) == 11  # 5 vision + 5 action + 1 text
    rec = Recorder(tmp_path / "again.rdm")
    rec.close()
    with pytest.raises(RecorderClosed):
        rec.close()
    with pytest.raises(RecorderClosed):
        rec.add("cam0", np.zeros((2, 2, 3), np.uint8))


def test_capture_clock_monotonic(tmp_path):
    rec = Recorder(tmp_path / "ep.rdm")
    rec.add("joints", np.zeros(3, np.float32))
    rec.add("joints", np.ones(3, np.float32))
    rec.close()
    with open_container(tmp_path / "ep.rdm") as reader:
        pts = [p.pts_ns for p in reader.iter_packets()]
    assert pts[0] == 0  # origin is the first add
    assert pts[1] >= pts[0]


def test_transcode_keyframe_cadence(tmp_path):
    raw = tmp_path / "raw.rdm"
    rec = Recorder(raw)
    rng = np.random.default_rng(1)
    for i in range(100):
        rec.add("cam0", rng.integers(0, 256, (6, 6, 3), dtype=np.uint8),
                timestamp_ns=i * 33 * MS)
    rec.close()
    out = tmp_path / "ll.rdm"
    transcode(raw, out, TranscodePlan({"vision": CodecSpec("delta_ll", keyframe_interval=10)}))
    with open_container(out) as reader:
        assert not reader.raw
        assert reader.stream("cam0").codec.codec_id == "delta_ll"
        flags = [p.keyframe for p in reader.iter_packets()]
    assert sum(flags) == 10 and len(flags) == 100
    assert all(flags[i] == (i % 10 == 0) for i in range(100))
    # the input was left untouched
    with open_container(raw) as reader:
        assert reader.raw


def test_transcode_rejects_non_raw(tmp_path):
    raw = capture_episode(tmp_path / "raw.rdm", n_frames=4)
    out = tmp_path / "a.rdm"
    transcode(raw, out, LOSSLESS_PLAN)
    with pytest.raises(CorruptInput):
        transcode(out, tmp_path / "b.rdm", LOSSLESS_PLAN)


def test_transcode_plan_incompatible(tmp_path):
    raw = capture_episode(tmp_path / "raw.rdm", n_frames=2)
    plan = TranscodePlan({"language": CodecSpec("delta_q", quant_step=4)})
    with pytest.raises(PlanIncompatible):
        transcode(raw, tmp_path / "bad.rdm", plan)


def decode_all(path):
    """Full decode of every stream: {name: (pts list, values list)}."""
    out = {}
    with open_container(path) as reader:
        for stream in reader.header.streams:
            decoder = Decoder(stream.codec)
            pts, values = [], []
            for packet in reader.iter_packets(streams=[stream.stream_id]):
                pts.append(packet.pts_ns)
                values.append(decoder.decode(packet.payload, packet.keyframe))
            out[stream.name] = (pts, values)
    return out


def test_two_phase_equivalence(tmp_path):
    raw = capture_episode(tmp_path / "raw.rdm", n_frames=25)
    out = tmp_path / "ll.rdm"
    transcode(raw, out, LOSSLESS_PLAN)
    before = decode_all(raw)
    after = decode_all(out)
    assert before.keys() == after.keys()
    for name in before:
        assert before[name][0] == after[name][0]  # timestamps preserved exactly
        for a, b in zip(before[name][1], after[name][1]):
            if isinstance(a, str):
                assert a == b
            else:
                np.testing.assert_array_equal(a, b)
    with open_container(raw) as r_raw, open_container(out) as r_out:
        assert r_raw.header.metadata == r_out.header.metadata


def test_inference_determinism(tmp_path):
    defs = []
    for run in range(2):
        rec = Recorder(tmp_path / f"ep{run}.rdm")
        rng = np.random.default_rng(0)
        for i in range(5):
            rec.add("cam0", rng.integers(0, 256, (4, 4, 3), dtype=np.uint8), timestamp_ns=i)
            rec.add("act", rng.normal(size=3).astype(np.float32), timestamp_ns=i)
        defs.append(rec.streams)
        rec.close()
    assert defs[0] == defs[1]


def test_raw_capture_payloads_are_plain_tensors(tmp_path):
    raw = capture_episode(tmp_path / "raw.rdm", n_frames=1, with_action=False)
    with open_container(raw) as reader:
        packet = next(reader.iter_packets(streams=["cam0"]))
        frame = deserialize_tensor(packet.payload)  # no compression layer
        assert frame.shape == (8, 8, 3)
