import numpy as np
from rdm.codecs import CodecSpec, Decoder
from rdm.container import open_container
from rdm.recorder import Recorder, TranscodePlan, transcode

MS = 1_000_000


def make_vision_episode(path, n_frames=60, size=8, keyframe_interval=10, seed=0,
                        quant_step=None, with_action=True):
    """Capture + transcode a small episode; returns the finalized path."""
    raw = path.with_suffix(".raw.rdm")
    rec = Recorder(raw, metadata=[("seed", str(seed))])
    rng = np.random.default_rng(seed)
    for i in range(n_frames):
        rec.add("cam0", rng.integers(0, 256, (size, size, 3), dtype=np.uint8),
                timestamp_ns=i * 33 * MS)
        if with_action:
            rec.add("action", rng.normal(size=7).astype(np.float32),
                    timestamp_ns=i * 33 * MS)
    rec.add("instruction", "stack the cups", timestamp_ns=0)
    rec.close()
    if quant_step is None:
        vision = CodecSpec("delta_ll", keyframe_interval=keyframe_interval)
    else:
        vision = CodecSpec("delta_q", keyframe_interval=keyframe_interval,
                           quant_step=quant_step)
    plan = TranscodePlan({
        "vision": vision,
        "action": CodecSpec("raw", compressor_id="zlib"),
        "language": CodecSpec("raw", compressor_id="zlib"),
    })
    transcode(raw, path, plan)
    return path


def brute_force_decode(path):
    """Independent full decode oracle: container iteration + codec state,
    bypassing the loader entirely."""
    out = {}
    with open_container(path) as reader:
        for stream in reader.header.streams:
            decoder = Decoder(stream.codec)
            pts, values = [], []
            for packet in reader.iter_packets(streams=[stream.stream_id]):
                values.append(decoder.decode(packet.payload, packet.keyframe))
                pts.append(packet.pts_ns)
            if stream.dtype == "utf8":
                out[stream.name] = (np.asarray(pts, dtype=np.uint64), values)
            else:
                stacked = np.stack(values) if values else np.empty((0, *stream.shape))
                out[stream.name] = (np.asarray(pts, dtype=np.uint64), stacked)
    return out

