"""TensorDump: a neutral uncompressed interchange layout.

One directory per episode: `manifest.json` plus, per stream, a raw
little-endian frame file and a u64 timestamp file.  Numeric frame files
are the frames back to back ([n, *shape] row-major); utf8 frame files are
a sequence of u32-LE length-prefixed UTF-8 records.  The manifest's counts
must match the file sizes exactly; anything else is a CorruptDump.
"""

from __future__ import annotations

import json
import re
from pathlib import Path

import numpy as np

from .codecs import DTYPES, frame_bytes
from .container import ContainerReader, open_container
from .loader import EpisodeData, StreamData, load_episode
from .recorder import Recorder

MANIFEST = "manifest.json"
DUMP_FORMAT = "tensordump"
DUMP_VERSION = 1


class CorruptDump(Exception):
    pass


def _safe_name(stream_id: int, name: str) -> str:
    return f"s{stream_id}_" + re.sub(r"[^A-Za-z0-9_.-]", "_", name)


def is_dump(path) -> bool:
    manifest = Path(path) / MANIFEST
    if not manifest.is_file():
        return False
    try:
        return json.loads(manifest.read_text()).get("format") == DUMP_FORMAT
    except (json.JSONDecodeError, OSError):
        return False


def write_dump(source, out_dir, episode: EpisodeData | None = None) -> Path:
    """Decode a container (or use a pre-decoded episode) into a dump dir."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    reader = source if isinstance(source, ContainerReader) else open_container(source)
    try:
        if episode is None:
            episode = load_episode(reader)
        lossy = any(s.codec.lossy for s in reader.header.streams)
        streams = reader.header.streams
    finally:
        if reader is not source:
            reader.close()

    entries = []
    for stream in streams:
        data = episode.streams[stream.name]
        base = _safe_name(stream.stream_id, stream.name)
        frames_file = f"{base}.frames"
        ts_file = f"{base}.pts"
        ts = np.ascontiguousarray(data.timestamps, dtype="<u8")
        (out_dir / ts_file).write_bytes(ts.tobytes())
        if stream.dtype == "utf8":
            blob = b"".join(
                len(enc).to_bytes(4, "little") + enc
                for enc in (text.encode("utf-8") for text in data.frames)
            )
            (out_dir / frames_file).write_bytes(blob)
            total = len(blob)
        else:
            array = np.ascontiguousarray(data.frames, dtype=DTYPES[stream.dtype])
            (out_dir / frames_file).write_bytes(array.tobytes())
            total = array.nbytes
        entries.append({
            "name": stream.name,
            "stream_id": stream.stream_id,
            "kind": stream.kind,
            "dtype": stream.dtype,
            "shape": list(stream.shape),
            "codec": "none",
            "n_frames": int(data.n_frames),
            "frames_file": frames_file,
            "timestamps_file": ts_file,
            "frames_bytes": int(total),
            "rate_hint_hz": stream.rate_hint_hz,
        })
    manifest = {
        "format": DUMP_FORMAT,
        "version": DUMP_VERSION,
        "lossy": lossy,
        "metadata": dict(episode.metadata),
        "streams": entries,
    }
    (out_dir / MANIFEST).write_text(json.dumps(manifest, indent=2) + "\n")
    return out_dir


def read_dump(dump_dir) -> tuple[EpisodeData, dict]:
    """Load a dump back into arrays, validating sizes against the manifest."""
    dump_dir = Path(dump_dir)
    manifest_path = dump_dir / MANIFEST
    if not manifest_path.is_file():
        raise CorruptDump(f"{dump_dir}: no {MANIFEST}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise CorruptDump(f"{manifest_path}: {exc}") from exc
    if manifest.get("format") != DUMP_FORMAT or manifest.get("version") != DUMP_VERSION:
        raise CorruptDump(f"{manifest_path}: not a {DUMP_FORMAT} v{DUMP_VERSION} manifest")

    episode = EpisodeData(metadata=dict(manifest.get("metadata", {})))
    for entry in manifest["streams"]:
        name = entry["name"]
        dtype = entry["dtype"]
        shape = tuple(entry["shape"])
        n = int(entry["n_frames"])
        ts_path = dump_dir / entry["timestamps_file"]
        frames_path = dump_dir / entry["frames_file"]
        if not ts_path.is_file() or not frames_path.is_file():
            raise CorruptDump(f"{dump_dir}: stream {name!r} files missing")
        ts_blob = ts_path.read_bytes()
        if len(ts_blob) != 8 * n:
            raise CorruptDump(f"{ts_path}: {len(ts_blob)} octets for {n} timestamps")
        timestamps = np.frombuffer(ts_blob, dtype="<u8")
        blob = frames_path.read_bytes()
        if len(blob) != int(entry["frames_bytes"]):
            raise CorruptDump(
                f"{frames_path}: {len(blob)} octets, manifest says {entry['frames_bytes']}"
            )
        if dtype == "utf8":
            frames, offset = [], 0
            for _ in range(n):
                if offset + 4 > len(blob):
                    raise CorruptDump(f"{frames_path}: truncated utf8 record")
                length = int.from_bytes(blob[offset:offset + 4], "little")
                offset += 4
                if offset + length > len(blob):
                    raise CorruptDump(f"{frames_path}: utf8 record overruns file")
                frames.append(blob[offset:offset + length].decode("utf-8"))
                offset += length
            if offset != len(blob):
                raise CorruptDump(f"{frames_path}: trailing octets after {n} records")
        else:
            expected = n * frame_bytes(dtype, shape)
            if len(blob) != expected:
                raise CorruptDump(f"{frames_path}: {len(blob)} octets, need {expected}")
            frames = np.frombuffer(blob, dtype=DTYPES[dtype]).reshape((n, *shape))
        episode.streams[name] = StreamData(
            name=name, kind=entry["kind"], dtype=dtype, shape=shape,
            timestamps=timestamps, frames=frames,
        )
    return episode, manifest


def recapture(episode: EpisodeData, stream_order, dst) -> str:
    """Re-capture decoded arrays as a raw container via the recorder path.

    `stream_order` is a sequence of (name, kind) fixing stream ids.
    """
    recorder = Recorder(dst, metadata=list(episode.metadata.items()))
    cursors: dict[str, int] = {}
    events: list[tuple[int, int, str]] = []
    # First sample of each stream goes first, in the given order, so stream
    # ids survive the round trip; the rest interleave globally by time.
    for order, (name, kind) in enumerate(stream_order, start=1):
        data = episode.streams[name]
        if data.n_frames == 0:
            continue
        recorder.add(name, data.frames[0],
                     timestamp_ns=int(data.timestamps[0]), kind=kind)
        cursors[name] = 1
        for i in range(1, data.n_frames):
            events.append((int(data.timestamps[i]), order, name))
    events.sort(key=lambda e: (e[0], e[1]))
    for pts, _, name in events:
        data = episode.streams[name]
        index = cursors[name]
        cursors[name] = index + 1
        recorder.add(name, data.frames[index], timestamp_ns=pts)
    recorder.close()
    return str(dst)


def dump_to_container(dump_dir, dst) -> str:
    """Re-capture a dump as a raw container."""
    episode, manifest = read_dump(dump_dir)
    entries = sorted(manifest["streams"], key=lambda e: e["stream_id"])
    return recapture(episode, [(e["name"], e["kind"]) for e in entries], dst)
