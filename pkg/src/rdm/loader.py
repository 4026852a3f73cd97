"""Decode episodes and slices to arrays, through a memory-mapped cache.

Vision and depth streams route through a three-way plan decision balancing
decode work against cache reads:

    1. cache file present and mapped bytes under the high-water fraction of
       the memory budget        -> ReadCache
    2. cache file absent, budget saturated, and the stream not accessed
       often enough to promote  -> DecodeDirect
    3. otherwise                -> MaterializeCache (decode once, write the
       cache file, map it)

Cache files live in `cache_dir`, one per (episode content hash, stream id),
written to a temporary name and atomically renamed so concurrent writers
and readers never see partial files.  Layout, little-endian throughout:

    magic "RDMC" | u32 version | u8 dtype tag | u8 rank | u16 reserved
    u64 n_frames | 8-octet source checksum | u32 dims[rank] | pad to 8
    u64 timestamps[n_frames]
    frame data, n_frames x frame_bytes, row-major

so frame i starts at header_size + 8*n_frames + i*frame_bytes.  Language
and action streams are cheap and always decode directly.
"""

from __future__ import annotations

import enum
import hashlib
import itertools
import os
import struct
import tempfile
import threading
from collections import OrderedDict, deque
from concurrent.futures import ProcessPoolExecutor, ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .codecs import DTYPE_TAGS, DTYPES, Decoder, MissingKeyframe, frame_bytes
from .container import ContainerReader, StreamDef, open_container

CACHE_MAGIC = b"RDMC"
CACHE_VERSION = 1
CACHE_SUFFIX = ".rdc"
_HEADER = struct.Struct("<4sIBBHQ8s")


class LoaderError(Exception):
    pass


class RangeOutOfBounds(LoaderError):
    pass


class CacheCorrupt(LoaderError):
    pass


class EmptyReference(LoaderError):
    pass


class LoadPlan(enum.Enum):
    DECODE_DIRECT = "decode_direct"
    READ_CACHE = "read_cache"
    MATERIALIZE_CACHE = "materialize_cache"


@dataclass(frozen=True)
class CachePolicy:
    cache_dir: str
    memory_budget_bytes: int = 1 << 30
    high_water: float = 0.9
    access_promote_threshold: int = 2
    disk_cap_bytes: int | None = None

    def __post_init__(self):
        if self.memory_budget_bytes <= 0:
            raise ValueError("memory budget must be positive")
        if not 0 < self.high_water <= 1:
            raise ValueError("high_water must be in (0, 1]")


@dataclass(frozen=True)
class CacheState:
    """Inputs the plan decision consults for one (episode, stream)."""

    cache_present: bool
    resident_fraction: float
    access_count: int


def choose_plan(state: CacheState, policy: CachePolicy) -> LoadPlan:
    """The three-rule decision table; deterministic in its inputs."""
    if state.cache_present and state.resident_fraction < policy.high_water:
        return LoadPlan.READ_CACHE
    if (
        not state.cache_present
        and state.resident_fraction >= policy.high_water
        and state.access_count < policy.access_promote_threshold
    ):
        return LoadPlan.DECODE_DIRECT
    return LoadPlan.MATERIALIZE_CACHE


@dataclass
class StreamData:
    name: str
    kind: str
    dtype: str
    shape: tuple[int, ...]
    timestamps: np.ndarray                  # u64 ns, non-decreasing
    frames: np.ndarray | list[str]          # [n, *shape] array, or strings
    gap_mask: np.ndarray | None = None      # set by align_to

    @property
    def n_frames(self) -> int:
        return len(self.timestamps)


@dataclass
class EpisodeData:
    metadata: dict[str, str]
    streams: dict[str, StreamData] = field(default_factory=dict)

    def __getitem__(self, name: str) -> StreamData:
        return self.streams[name]


class CacheManager:
    """Per-policy cache bookkeeping: access counts, the mmap pool whose
    total size is the resident-memory estimate, and disk eviction."""

    def __init__(self, policy: CachePolicy):
        self.policy = policy
        self.dir = Path(policy.cache_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()
        self._access: dict[tuple[str, int], int] = {}
        self._maps: OrderedDict[Path, np.memmap] = OrderedDict()

    def cache_path(self, file_hash: str, stream_id: int) -> Path:
        return self.dir / f"{file_hash}_s{stream_id}{CACHE_SUFFIX}"

    def mapped_bytes(self) -> int:
        with self._lock:
            return sum(m.nbytes for m in self._maps.values())

    def resident_fraction(self) -> float:
        return self.mapped_bytes() / self.policy.memory_budget_bytes

    def state_for(self, file_hash: str, stream_id: int) -> CacheState:
        path = self.cache_path(file_hash, stream_id)
        with self._lock:
            count = self._access.get((file_hash, stream_id), 0)
            mapped = sum(m.nbytes for m in self._maps.values())
        return CacheState(
            cache_present=path.exists(),
            resident_fraction=mapped / self.policy.memory_budget_bytes,
            access_count=count,
        )

    def note_access(self, file_hash: str, stream_id: int):
        with self._lock:
            key = (file_hash, stream_id)
            self._access[key] = self._access.get(key, 0) + 1

    def reset_access(self, file_hash: str, stream_id: int):
        with self._lock:
            self._access.pop((file_hash, stream_id), None)

    def get_map(self, path: Path) -> np.memmap:
        with self._lock:
            cached = self._maps.get(path)
            if cached is not None:
                self._maps.move_to_end(path)
                return cached
        mapped = np.memmap(path, dtype=np.uint8, mode="r")
        with self._lock:
            self._maps[path] = mapped
            self._maps.move_to_end(path)
            self._trim_locked(keep=path)
        return mapped

    def drop_map(self, path: Path):
        with self._lock:
            self._maps.pop(path, None)

    def _trim_locked(self, keep: Path):
        total = sum(m.nbytes for m in self._maps.values())
        while total > self.policy.memory_budget_bytes and len(self._maps) > 1:
            victim, mapped = next(iter(self._maps.items()))
            if victim == keep:
                break
            del self._maps[victim]
            total -= mapped.nbytes

    def evict_disk(self):
        """Whole-file LRU eviction once the cache dir exceeds its cap.
        Files currently mapped are skipped; eviction never interrupts a read."""
        cap = self.policy.disk_cap_bytes
        if cap is None:
            return
        entries = sorted(
            (p for p in self.dir.glob(f"*{CACHE_SUFFIX}") if p.is_file()),
            key=lambda p: p.stat().st_mtime,
        )
        total = sum(p.stat().st_size for p in entries)
        with self._lock:
            pooled = set(self._maps)
        for path in entries:
            if total <= cap:
                break
            if path in pooled:
                continue
            size = path.stat().st_size
            try:
                path.unlink()
            except OSError:
                continue
            total -= size
            hash_part, _, sid_part = path.stem.rpartition("_s")
            if hash_part:
                self.reset_access(hash_part, int(sid_part))


_managers: dict[CachePolicy, CacheManager] = {}
_managers_lock = threading.Lock()


def manager_for(policy: CachePolicy) -> CacheManager:
    with _managers_lock:
        found = _managers.get(policy)
        if found is None:
            found = _managers[policy] = CacheManager(policy)
        return found


_hash_memo: dict[str, tuple[tuple[int, int], str]] = {}
_hash_memo_lock = threading.Lock()


def _file_hash(reader: ContainerReader) -> str:
    """Content hash for cache keying, memoized on (mtime, size) for files."""
    if reader.path is None:
        return reader.file_hash()
    stat = os.stat(reader.path)
    key = os.path.abspath(reader.path)
    fingerprint = (stat.st_mtime_ns, stat.st_size)
    with _hash_memo_lock:
        hit = _hash_memo.get(key)
        if hit is not None and hit[0] == fingerprint:
            return hit[1]
    digest = reader.file_hash()
    with _hash_memo_lock:
        _hash_memo[key] = (fingerprint, digest)
    return digest


def _stream_checksum(file_hash: str, stream_id: int) -> bytes:
    digest = hashlib.blake2b(digest_size=8)
    digest.update(file_hash.encode())
    digest.update(stream_id.to_bytes(8, "little"))
    return digest.digest()


def _header_size(rank: int) -> int:
    raw = _HEADER.size + 4 * rank
    return (raw + 7) & ~7


def write_cache_file(path: Path, stream: StreamDef, checksum: bytes,
                     timestamps: np.ndarray, frames: np.ndarray):
    """Write the documented layout to a temp file and atomically rename."""
    rank = len(stream.shape)
    header = _HEADER.pack(
        CACHE_MAGIC, CACHE_VERSION, DTYPE_TAGS[stream.dtype], rank, 0,
        len(timestamps), checksum,
    ) + b"".join(int(d).to_bytes(4, "little") for d in stream.shape)
    header = header.ljust(_header_size(rank), b"\x00")
    fd, tmp_name = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as out:
            out.write(header)
            out.write(np.ascontiguousarray(timestamps, dtype="<u8").tobytes())
            out.write(np.ascontiguousarray(frames, dtype=DTYPES[stream.dtype]).tobytes())
            out.flush()
            os.fsync(out.fileno())
        os.replace(tmp_name, path)
    except BaseException:
        try:
            os.unlink(tmp_name)
        except OSError:
            pass
        raise


def read_cache_views(mapped: np.memmap, stream: StreamDef, checksum: bytes):
    """Validate a mapped cache file and return (timestamps, frames) views."""
    if len(mapped) < _HEADER.size:
        raise CacheCorrupt("cache file shorter than its header")
    magic, version, tag, rank, _, n_frames, stored = _HEADER.unpack(
        mapped[:_HEADER.size].tobytes()
    )
    if magic != CACHE_MAGIC or version != CACHE_VERSION:
        raise CacheCorrupt(f"bad cache magic/version {magic!r}/{version}")
    if stored != checksum:
        raise CacheCorrupt("source checksum mismatch")
    if tag != DTYPE_TAGS[stream.dtype] or rank != len(stream.shape):
        raise CacheCorrupt("cached dtype/rank disagrees with the stream")
    head = _header_size(rank)
    dims = tuple(
        int.from_bytes(mapped[_HEADER.size + 4 * i:_HEADER.size + 4 * i + 4].tobytes(), "little")
        for i in range(rank)
    )
    if dims != stream.shape:
        raise CacheCorrupt(f"cached shape {dims} disagrees with {stream.shape}")
    per_frame = frame_bytes(stream.dtype, stream.shape)
    expected = head + 8 * n_frames + per_frame * n_frames
    if len(mapped) != expected:
        raise CacheCorrupt(f"cache file is {len(mapped)} octets, expected {expected}")
    timestamps = np.frombuffer(mapped, dtype="<u8", count=n_frames, offset=head)
    frames = np.frombuffer(
        mapped, dtype=DTYPES[stream.dtype],
        count=n_frames * per_frame // DTYPES[stream.dtype].itemsize,
        offset=head + 8 * n_frames,
    ).reshape((n_frames, *stream.shape))
    return timestamps, frames


def _decode_stream(reader: ContainerReader, stream: StreamDef,
                   decoded_counter: list | None = None):
    """Sequential full decode of one stream -> (timestamps, frames)."""
    decoder = Decoder(stream.codec)
    timestamps, frames = [], []
    for packet in reader.iter_packets(streams=[stream.stream_id]):
        frames.append(decoder.decode(packet.payload, packet.keyframe))
        timestamps.append(packet.pts_ns)
    if decoded_counter is not None:
        decoded_counter.append(decoder.frames_decoded)
    ts = np.asarray(timestamps, dtype=np.uint64)
    if stream.dtype == "utf8":
        return ts, frames
    if frames:
        return ts, np.stack(frames)
    return ts, np.empty((0, *stream.shape), dtype=DTYPES[stream.dtype])


def _materialize(reader: ContainerReader, stream: StreamDef, manager: CacheManager,
                 file_hash: str):
    """Decode once, write the cache file, and return the decoded arrays."""
    timestamps, frames = _decode_stream(reader, stream)
    path = manager.cache_path(file_hash, stream.stream_id)
    write_cache_file(path, stream, _stream_checksum(file_hash, stream.stream_id),
                     timestamps, frames)
    manager.evict_disk()
    return timestamps, frames


def materialize_cache(source, stream, policy: CachePolicy) -> Path:
    """Ensure the cache file for one stream exists; returns its path."""
    manager = manager_for(policy)
    with _as_reader(source) as (reader, _):
        stream = reader.stream(stream)
        file_hash = _file_hash(reader)
        path = manager.cache_path(file_hash, stream.stream_id)
        if path.exists():
            try:
                read_cache_views(manager.get_map(path), stream,
                                 _stream_checksum(file_hash, stream.stream_id))
                return path
            except CacheCorrupt:
                manager.drop_map(path)
                path.unlink(missing_ok=True)
        _materialize(reader, stream, manager, file_hash)
        return path


class _as_reader:
    """Context adapter: pass paths or already-open ContainerReaders."""

    def __init__(self, source):
        self.source = source

    def __enter__(self):
        if isinstance(self.source, ContainerReader):
            return self.source, False
        self.reader = open_container(self.source)
        return self.reader, True

    def __exit__(self, exc_type, exc, tb):
        if not isinstance(self.source, ContainerReader):
            self.reader.close()


def _load_cached_stream(reader, stream, manager, file_hash, plan):
    """Execute a ReadCache/MaterializeCache plan; returns owned arrays."""
    path = manager.cache_path(file_hash, stream.stream_id)
    checksum = _stream_checksum(file_hash, stream.stream_id)
    if path.exists():
        try:
            mapped = manager.get_map(path)
            ts_view, frame_view = read_cache_views(mapped, stream, checksum)
            return ts_view.copy(), frame_view.copy()
        except CacheCorrupt:
            # Stale or damaged: fall back to a decode and rebuild the file.
            manager.drop_map(path)
            path.unlink(missing_ok=True)
    if plan is LoadPlan.READ_CACHE:
        # The file vanished between the decision and the read; rebuild.
        plan = LoadPlan.MATERIALIZE_CACHE
    timestamps, frames = _materialize(reader, stream, manager, file_hash)
    return timestamps, frames


def load_episode(source, policy: CachePolicy | None = None,
                 stats: dict | None = None) -> EpisodeData:
    """Decode every stream of a finalized episode into in-memory arrays."""
    plans: dict[str, LoadPlan] = {}
    decoded_counter: list[int] = []
    with _as_reader(source) as (reader, _):
        episode = EpisodeData(metadata=reader.metadata)
        manager = manager_for(policy) if policy is not None else None
        file_hash = _file_hash(reader) if manager is not None else None
        for stream in reader.header.streams:
            cacheable = stream.kind in ("vision", "depth") and manager is not None
            if cacheable:
                state = manager.state_for(file_hash, stream.stream_id)
                plan = choose_plan(state, policy)
                manager.note_access(file_hash, stream.stream_id)
                if plan is LoadPlan.DECODE_DIRECT:
                    timestamps, frames = _decode_stream(reader, stream, decoded_counter)
                else:
                    timestamps, frames = _load_cached_stream(
                        reader, stream, manager, file_hash, plan
                    )
            else:
                plan = LoadPlan.DECODE_DIRECT
                timestamps, frames = _decode_stream(reader, stream, decoded_counter)
            plans[stream.name] = plan
            episode.streams[stream.name] = StreamData(
                name=stream.name, kind=stream.kind, dtype=stream.dtype,
                shape=stream.shape, timestamps=timestamps, frames=frames,
            )
    if stats is not None:
        stats["plans"] = plans
        stats["frames_decoded"] = int(sum(decoded_counter))
    return episode


def _resolve_range(locations, frames, time_range):
    n = len(locations)
    if (frames is None) == (time_range is None):
        raise ValueError("pass exactly one of frames, time_range")
    if frames is not None:
        a, b = frames
        if not 0 <= a <= b <= n:
            raise RangeOutOfBounds(f"frames [{a}, {b}) outside [0, {n})")
        return a, b
    t0, t1 = time_range
    if t0 > t1:
        raise RangeOutOfBounds(f"time range [{t0}, {t1}) is inverted")
    pts = [loc.pts_ns for loc in locations]
    a = int(np.searchsorted(pts, t0, side="left"))
    b = int(np.searchsorted(pts, t1, side="left"))
    return a, b


def load_slice(source, stream, frames: tuple[int, int] | None = None,
               time_range: tuple[int, int] | None = None,
               policy: CachePolicy | None = None,
               stats: dict | None = None):
    """Decode one stream's frames [a, b), by index or by time window.

    On a cold cache this decodes from the latest keyframe at or before `a`,
    at most (b - a) + K - 1 frames; on a warm cache it touches only the
    mapped pages covering the slice.
    """
    with _as_reader(source) as (reader, _):
        stream = reader.stream(stream)
        locations = reader.scan_stream(stream)
        a, b = _resolve_range(locations, frames, time_range)

        if stats is not None:
            stats.setdefault("frames_decoded", 0)
            stats.setdefault("plan", LoadPlan.DECODE_DIRECT)
        if a == b:
            ts = np.empty(0, dtype=np.uint64)
            if stream.dtype == "utf8":
                return ts, []
            return ts, np.empty((0, *stream.shape), dtype=DTYPES[stream.dtype])

        manager = manager_for(policy) if policy is not None else None
        if manager is not None and stream.kind in ("vision", "depth"):
            file_hash = _file_hash(reader)
            path = manager.cache_path(file_hash, stream.stream_id)
            manager.note_access(file_hash, stream.stream_id)
            if path.exists():
                try:
                    mapped = manager.get_map(path)
                    ts_view, frame_view = read_cache_views(
                        mapped, stream, _stream_checksum(file_hash, stream.stream_id)
                    )
                    if stats is not None:
                        stats["plan"] = LoadPlan.READ_CACHE
                    return ts_view[a:b].copy(), frame_view[a:b].copy()
                except CacheCorrupt:
                    manager.drop_map(path)
                    path.unlink(missing_ok=True)

        keyframe_index = next(
            (i for i in range(a, -1, -1) if locations[i].keyframe), None
        )
        if keyframe_index is None:
            raise MissingKeyframe(f"stream {stream.name!r} has no keyframe before {a}")
        start_cluster = locations[keyframe_index].cluster_offset
        ordinal = next(
            i for i, loc in enumerate(locations) if loc.cluster_offset == start_cluster
        )
        decoder = Decoder(stream.codec)
        timestamps, collected = [], []
        for _, slot, packet in reader.iter_cluster_from(start_cluster):
            if packet.stream_id != stream.stream_id:
                continue
            index = ordinal
            ordinal += 1
            if index < keyframe_index:
                continue
            value = decoder.decode(packet.payload, packet.keyframe)
            if a <= index < b:
                timestamps.append(packet.pts_ns)
                collected.append(value)
            if index >= b - 1:
                break
        if stats is not None:
            stats["frames_decoded"] = decoder.frames_decoded
            stats["plan"] = LoadPlan.DECODE_DIRECT
        ts = np.asarray(timestamps, dtype=np.uint64)
        if stream.dtype == "utf8":
            return ts, collected
        return ts, np.stack(collected)


def _load_one(source, policy):
    try:
        return load_episode(source, policy)
    except Exception as exc:
        raise LoaderError(f"{source}: {exc}") from exc


def make_executor(concurrency: int, use_processes: bool = False):
    """Worker pool for batch_load/prefetch_iter.  Decoding is CPU-bound
    numpy work on small arrays, so real scaling needs processes; threads
    remain useful when callers mostly hit the warm cache."""
    cls = ProcessPoolExecutor if use_processes else ThreadPoolExecutor
    return cls(max_workers=concurrency)


def batch_load(sources, policy: CachePolicy | None = None, concurrency: int = 1,
               executor=None) -> list[EpisodeData]:
    """Load whole episodes concurrently; results keep input order and are
    identical to sequential loads regardless of worker count."""
    sources = list(sources)
    if concurrency < 1:
        raise ValueError("concurrency must be >= 1")
    if not sources:
        return []
    if executor is not None:
        return list(executor.map(_load_one, sources, itertools.repeat(policy)))
    if concurrency == 1:
        return [_load_one(s, policy) for s in sources]
    with make_executor(concurrency) as pool:
        return list(pool.map(_load_one, sources, itertools.repeat(policy)))


def prefetch_iter(sources, policy: CachePolicy | None = None, buffer: int = 50,
                  workers: int | None = None, executor=None):
    """Iterate decoded episodes in order with a bounded look-ahead.

    Background work fills at most `buffer` episodes past the consumer and
    stops promptly when the iterator is dropped; a background failure
    surfaces at the next iteration point.
    """
    if buffer < 1:
        raise ValueError("buffer must be >= 1")
    sources = list(sources)
    worker_count = min(workers or 4, buffer, max(1, len(sources)))

    def generate():
        pool = executor if executor is not None else ThreadPoolExecutor(
            max_workers=worker_count
        )
        pending = deque()
        iterator = iter(sources)
        try:
            for source in itertools.islice(iterator, buffer):
                pending.append(pool.submit(_load_one, source, policy))
            while pending:
                episode = pending.popleft().result()
                upcoming = next(iterator, None)
                if upcoming is not None:
                    pending.append(pool.submit(_load_one, upcoming, policy))
                yield episode
        finally:
            for future in pending:
                future.cancel()
            if executor is None:
                pool.shutdown(wait=False, cancel_futures=True)

    return generate()


def align_to(episode: EpisodeData, reference_stream: str) -> EpisodeData:
    """Resample every stream onto the reference's timestamps by
    nearest-earlier sample; positions before a stream's first sample are
    zero-filled and flagged in gap_mask."""
    if reference_stream not in episode.streams:
        raise KeyError(f"no stream {reference_stream!r}")
    reference = episode.streams[reference_stream]
    if reference.n_frames == 0:
        raise EmptyReference(f"reference stream {reference_stream!r} is empty")
    ref_ts = np.asarray(reference.timestamps, dtype=np.uint64)
    aligned = EpisodeData(metadata=dict(episode.metadata))
    for name, stream in episode.streams.items():
        if name == reference_stream:
            aligned.streams[name] = StreamData(
                name=name, kind=stream.kind, dtype=stream.dtype, shape=stream.shape,
                timestamps=ref_ts.copy(),
                frames=stream.frames.copy() if isinstance(stream.frames, np.ndarray)
                else list(stream.frames),
                gap_mask=np.zeros(len(ref_ts), dtype=bool),
            )
            continue
        own_ts = np.asarray(stream.timestamps, dtype=np.uint64)
        picks = np.searchsorted(own_ts, ref_ts, side="right") - 1
        gaps = picks < 0
        picks = np.clip(picks, 0, None)
        if stream.dtype == "utf8":
            frames = [
                "" if gap else stream.frames[i] for i, gap in zip(picks, gaps)
            ]
        elif stream.n_frames == 0:
            frames = np.zeros((len(ref_ts), *stream.shape), dtype=DTYPES[stream.dtype])
            gaps = np.ones(len(ref_ts), dtype=bool)
        else:
            frames = np.asarray(stream.frames)[picks].copy()
            frames[gaps] = 0
        aligned.streams[name] = StreamData(
            name=name, kind=stream.kind, dtype=stream.dtype, shape=stream.shape,
            timestamps=ref_ts.copy(), frames=frames,
            gap_mask=np.asarray(gaps, dtype=bool),
        )
    return aligned
