"""The .rdm trajectory container: schema, writer, reader, seeking.

One file holds one episode: a stream table, time-grouped packet clusters,
and a cue index mapping time to cluster offsets and to the latest keyframe
per stream.  DocType is "robo-dm", version 1.  Element IDs reuse Matroska
IDs where the semantics match so generic EBML inspectors can walk the file;
leaves specific to this format live in the 0x7D80-0x7DBF range.

    EBML            1A45DFA3  (DocType "robo-dm", DocTypeVersion 1)
    Segment         18538067  (size unknown while writing, patched on finalize)
      Info          1549A966
        ClusterSpanNs   7D80  uint, cluster span in ns (default 1 s)
        RawCapture      7D81  uint 0/1, raw two-phase capture flag
        MetadataEntry   7D82  master, repeated
          MetadataKey   7D83  utf8
          MetadataValue 7D84  utf8
      TracksOffset      7DBE  uint, 8 octets, absolute offset of Tracks
      CuesOffset        7DBF  uint, 8 octets, absolute offset of Cues
      Cluster       1F43B675  repeated
        ClusterTimestamp  E7  uint, base pts of the cluster in ns
        Packet            A3  VINT stream id, u64-BE pts_ns, flags octet
                              (0x80 = keyframe), then the payload
      Tracks        1654AE6B  written after the clusters so streams may be
        TrackEntry        AE  declared while capture is in progress
          TrackNumber     D7  uint, stream id (contiguous from 1)
          TrackName     536E  utf8
          StreamKind    7D90  uint (vision 0, depth 1, language 2, action 3, other 4)
          ElementDtype  7D91  uint, dtype tag from rdm.codecs
          ShapeDim      7D92  uint, repeated in row-major order
          RateHintHz    7D93  float64, optional
          CodecSpec     7D98  master
            CodecName         7D99  utf8
            KeyframeInterval  7D9A  uint
            QuantStep         7D9B  uint
            CompressorId      7D9C  utf8
            ExternalCmd       7D9D  utf8, repeated argv entries
            LossyFlag         7D9E  uint 0/1
      Cues          1C53BB6B
        CuePoint          BB  one per cluster
          CueTime             B3  uint, cluster base pts in ns
          CueClusterOffset  7DB0  uint, absolute offset of the cluster
          CueStreamEntry    7DB1  master, repeated: latest keyframe at or
            CueStreamId         7DB2  before CueTime for one stream
            CueKeyframePts      7DB3
            CueKeyframeCluster  7DB4  absolute offset of its cluster

Timestamps are unsigned nanoseconds relative to the episode start.  Packets
inside a cluster are sorted by (pts, stream id); a finalized file contains
no unknown sizes and is fully self-contained.
"""

from __future__ import annotations

import hashlib
import io
import mmap
import os
from bisect import bisect_right
from dataclasses import dataclass, field, replace

from . import ebml
from .codecs import DTYPE_TAGS, TAG_DTYPES, CodecSpec, validate_codec
from .ebml import UNKNOWN, encode_uint, decode_uint, read_element, write_element

DOC_TYPE = "robo-dm"
DOC_VERSION = 1
FILE_EXTENSION = ".rdm"
DEFAULT_CLUSTER_SPAN_NS = 1_000_000_000

STREAM_KINDS = ("vision", "depth", "language", "action", "other")

EBML_HEADER = 0x1A45DFA3
EBML_VERSION = 0x4286
EBML_READ_VERSION = 0x42F7
EBML_MAX_ID_LENGTH = 0x42F2
EBML_MAX_SIZE_LENGTH = 0x42F3
DOCTYPE = 0x4282
DOCTYPE_VERSION = 0x4287
DOCTYPE_READ_VERSION = 0x4285

SEGMENT = 0x18538067
INFO = 0x1549A966
CLUSTER_SPAN_NS = 0x7D80
RAW_CAPTURE = 0x7D81
METADATA_ENTRY = 0x7D82
METADATA_KEY = 0x7D83
METADATA_VALUE = 0x7D84
TRACKS_OFFSET = 0x7DBE
CUES_OFFSET = 0x7DBF

TRACKS = 0x1654AE6B
TRACK_ENTRY = 0xAE
TRACK_NUMBER = 0xD7
TRACK_NAME = 0x536E
STREAM_KIND = 0x7D90
ELEMENT_DTYPE = 0x7D91
SHAPE_DIM = 0x7D92
RATE_HINT_HZ = 0x7D93
CODEC_SPEC = 0x7D98
CODEC_NAME = 0x7D99
KEYFRAME_INTERVAL = 0x7D9A
QUANT_STEP = 0x7D9B
COMPRESSOR_ID = 0x7D9C
EXTERNAL_CMD = 0x7D9D
LOSSY_FLAG = 0x7D9E

CLUSTER = 0x1F43B675
CLUSTER_TIMESTAMP = 0xE7
PACKET = 0xA3

CUES = 0x1C53BB6B
CUE_POINT = 0xBB
CUE_TIME = 0xB3
CUE_CLUSTER_OFFSET = 0x7DB0
CUE_STREAM_ENTRY = 0x7DB1
CUE_STREAM_ID = 0x7DB2
CUE_KEYFRAME_PTS = 0x7DB3
CUE_KEYFRAME_CLUSTER = 0x7DB4

MASTER_IDS = {
    EBML_HEADER, SEGMENT, INFO, METADATA_ENTRY, TRACKS, TRACK_ENTRY,
    CODEC_SPEC, CLUSTER, CUES, CUE_POINT, CUE_STREAM_ENTRY,
}

KEYFRAME_BIT = 0x80


class ContainerError(Exception):
    pass


class InvalidHeader(ContainerError):
    pass


class UnknownStream(ContainerError):
    pass


class NonMonotonicTimestamp(ContainerError):
    pass


class WriterClosed(ContainerError):
    pass


class BadMagic(ContainerError):
    pass


class UnsupportedVersion(ContainerError):
    pass


class MissingIndex(ContainerError):
    pass


class CorruptHeader(ContainerError):
    pass


class CorruptCluster(ContainerError):
    pass


class NoKeyframeBefore(ContainerError):
    pass


@dataclass(frozen=True)
class StreamDef:
    stream_id: int
    name: str
    kind: str
    dtype: str
    shape: tuple[int, ...] = ()
    codec: CodecSpec = field(default_factory=CodecSpec)
    rate_hint_hz: float | None = None

    def __post_init__(self):
        if self.kind not in STREAM_KINDS:
            raise InvalidHeader(f"unknown stream kind {self.kind!r}")
        if self.dtype not in DTYPE_TAGS:
            raise InvalidHeader(f"unknown dtype {self.dtype!r}")
        if self.dtype == "utf8" and self.shape != ():
            raise InvalidHeader("utf8 streams are scalar")
        validate_codec(self.codec, self.dtype, self.kind)


@dataclass(frozen=True)
class TrajectoryHeader:
    streams: tuple[StreamDef, ...]
    metadata: tuple[tuple[str, str], ...] = ()
    doc_type: str = DOC_TYPE
    doc_version: int = DOC_VERSION


@dataclass(frozen=True)
class Packet:
    stream_id: int
    pts_ns: int
    keyframe: bool
    payload: bytes


@dataclass(frozen=True)
class CuePoint:
    cue_pts_ns: int
    cluster_offset: int
    per_stream_keyframe: dict[int, tuple[int, int]]   # id -> (pts, cluster offset)


def _validate_streams(streams) -> tuple[StreamDef, ...]:
    streams = tuple(streams)
    names = [s.name for s in streams]
    if len(set(names)) != len(names):
        raise InvalidHeader(f"duplicate stream names in {names}")
    for index, stream in enumerate(streams, start=1):
        if stream.stream_id != index:
            raise InvalidHeader(
                f"stream ids must be contiguous from 1, got {stream.stream_id} at {index}"
            )
    return streams


def _encode_stream_def(stream: StreamDef) -> bytes:
    codec = stream.codec
    codec_children = [
        (CODEC_NAME, codec.codec_id.encode()),
        (KEYFRAME_INTERVAL, encode_uint(codec.keyframe_interval)),
        (QUANT_STEP, encode_uint(codec.quant_step)),
        (COMPRESSOR_ID, codec.compressor_id.encode()),
        (LOSSY_FLAG, encode_uint(int(codec.lossy))),
    ]
    if codec.external_cmd:
        codec_children += [(EXTERNAL_CMD, arg.encode()) for arg in codec.external_cmd]
    children = [
        (TRACK_NUMBER, encode_uint(stream.stream_id)),
        (TRACK_NAME, stream.name.encode()),
        (STREAM_KIND, encode_uint(STREAM_KINDS.index(stream.kind))),
        (ELEMENT_DTYPE, encode_uint(DTYPE_TAGS[stream.dtype])),
    ]
    children += [(SHAPE_DIM, encode_uint(dim)) for dim in stream.shape]
    if stream.rate_hint_hz is not None:
        children.append((RATE_HINT_HZ, ebml.encode_float(stream.rate_hint_hz)))
    children.append((CODEC_SPEC, codec_children))
    return write_element(TRACK_ENTRY, children)


def _decode_stream_def(buf, header) -> StreamDef:
    fields = {"shape": [], "rate_hint_hz": None}
    codec_kwargs = {}
    for child in ebml.iter_children(buf, header.payload_offset, header.end):
        payload = buf[child.payload_offset:child.end]
        if child.id == TRACK_NUMBER:
            fields["stream_id"] = decode_uint(payload)
        elif child.id == TRACK_NAME:
            fields["name"] = bytes(payload).decode()
        elif child.id == STREAM_KIND:
            fields["kind"] = STREAM_KINDS[decode_uint(payload)]
        elif child.id == ELEMENT_DTYPE:
            fields["dtype"] = TAG_DTYPES[decode_uint(payload)]
        elif child.id == SHAPE_DIM:
            fields["shape"].append(decode_uint(payload))
        elif child.id == RATE_HINT_HZ:
            fields["rate_hint_hz"] = ebml.decode_float(payload)
        elif child.id == CODEC_SPEC:
            external = []
            for leaf in ebml.iter_children(buf, child.payload_offset, child.end):
                value = bytes(buf[leaf.payload_offset:leaf.end])
                if leaf.id == CODEC_NAME:
                    codec_kwargs["codec_id"] = value.decode()
                elif leaf.id == KEYFRAME_INTERVAL:
                    codec_kwargs["keyframe_interval"] = decode_uint(value)
                elif leaf.id == QUANT_STEP:
                    codec_kwargs["quant_step"] = decode_uint(value)
                elif leaf.id == COMPRESSOR_ID:
                    codec_kwargs["compressor_id"] = value.decode()
                elif leaf.id == EXTERNAL_CMD:
                    external.append(value.decode())
            if external:
                codec_kwargs["external_cmd"] = tuple(external)
    try:
        codec = CodecSpec(**codec_kwargs)
        return StreamDef(
            stream_id=fields["stream_id"],
            name=fields["name"],
            kind=fields["kind"],
            dtype=fields["dtype"],
            shape=tuple(fields["shape"]),
            codec=codec,
            rate_hint_hz=fields["rate_hint_hz"],
        )
    except KeyError as exc:
        raise CorruptHeader(f"track entry missing {exc}") from exc


class ContainerWriter:
    """Single-owner writer.  Streams may be declared up front via the
    header or incrementally with declare_stream() while recording."""

    def __init__(self, sink, streams=(), metadata=(), cluster_span_ns=DEFAULT_CLUSTER_SPAN_NS,
                 raw=False, allow_empty=False):
        if cluster_span_ns < 1:
            raise InvalidHeader(f"cluster span {cluster_span_ns} < 1 ns")
        self._streams = list(_validate_streams(streams))
        if not self._streams and not allow_empty:
            raise InvalidHeader("a trajectory needs at least one stream")
        self.cluster_span_ns = int(cluster_span_ns)
        self.raw = bool(raw)
        self.metadata = tuple((str(k), str(v)) for k, v in (
            metadata.items() if isinstance(metadata, dict) else metadata
        ))
        if hasattr(sink, "write"):
            self._file = sink
            self._owns_file = False
            self.path = getattr(sink, "name", None)
        else:
            self.path = os.fspath(sink)
            self._file = open(self.path, "w+b")
            self._owns_file = True
        self._closed = False
        self._last_pts: dict[int, int] = {}
        self._last_keyframe: dict[int, tuple[int, int]] = {}
        self._cluster_base: int | None = None
        self._cluster_packets: list[Packet] = []
        self._cues: list[CuePoint] = []
        self._write_preamble()

    # -- layout ------------------------------------------------------------

    def _write_preamble(self):
        ebml_header = write_element(EBML_HEADER, [
            (EBML_VERSION, encode_uint(1)),
            (EBML_READ_VERSION, encode_uint(1)),
            (EBML_MAX_ID_LENGTH, encode_uint(4)),
            (EBML_MAX_SIZE_LENGTH, encode_uint(8)),
            (DOCTYPE, DOC_TYPE.encode()),
            (DOCTYPE_VERSION, encode_uint(DOC_VERSION)),
            (DOCTYPE_READ_VERSION, encode_uint(DOC_VERSION)),
        ])
        self._file.write(ebml_header)
        self._file.write(ebml.encode_id(SEGMENT))
        self._segment_size_offset = self._file.tell()
        self._file.write(ebml.encode_unknown_size(8))
        self._segment_payload_start = self._file.tell()
        info_children = [
            (CLUSTER_SPAN_NS, encode_uint(self.cluster_span_ns)),
            (RAW_CAPTURE, encode_uint(int(self.raw))),
        ]
        info_children += [
            (METADATA_ENTRY, [(METADATA_KEY, k.encode()), (METADATA_VALUE, v.encode())])
            for k, v in self.metadata
        ]
        self._file.write(write_element(INFO, info_children))
        self._tracks_pointer_offset = self._pointer(TRACKS_OFFSET)
        self._cues_pointer_offset = self._pointer(CUES_OFFSET)

    def _pointer(self, element_id: int) -> int:
        """Write an 8-octet placeholder offset; returns its payload position."""
        self._file.write(ebml.encode_id(element_id))
        self._file.write(ebml.encode_vint(8, size_context=True))
        payload_at = self._file.tell()
        self._file.write(bytes(8))
        return payload_at

    def _patch(self, offset: int, data: bytes):
        self._file.seek(offset)
        self._file.write(data)
        self._file.seek(0, io.SEEK_END)

    # -- stream declaration --------------------------------------------------

    @property
    def streams(self) -> tuple[StreamDef, ...]:
        return tuple(self._streams)

    def declare_stream(self, stream: StreamDef) -> StreamDef:
        if self._closed:
            raise WriterClosed("writer is finalized")
        if any(s.name == stream.name for s in self._streams):
            raise InvalidHeader(f"duplicate stream name {stream.name!r}")
        expected = len(self._streams) + 1
        if stream.stream_id != expected:
            raise InvalidHeader(f"next stream id is {expected}, got {stream.stream_id}")
        self._streams.append(stream)
        return stream

    # -- packets ---------------------------------------------------------------

    def append(self, packet: Packet):
        if self._closed:
            raise WriterClosed("writer is finalized")
        if not 1 <= packet.stream_id <= len(self._streams):
            raise UnknownStream(f"stream {packet.stream_id} not declared")
        if not packet.payload:
            raise ContainerError("empty packet payload")
        last = self._last_pts.get(packet.stream_id)
        if last is not None and packet.pts_ns < last:
            raise NonMonotonicTimestamp(
                f"stream {packet.stream_id}: {packet.pts_ns} after {last}"
            )
        if packet.pts_ns < 0:
            raise NonMonotonicTimestamp("timestamps are relative to episode start (>= 0)")
        self._last_pts[packet.stream_id] = packet.pts_ns
        if self._cluster_base is None:
            self._cluster_base = self._span_base(packet.pts_ns)
        elif packet.pts_ns >= self._cluster_base + self.cluster_span_ns:
            self._flush_cluster()
            self._cluster_base = self._span_base(packet.pts_ns)
        # Raw capture tolerates stream-local ordering: a packet earlier than
        # the current base stays in the current cluster and is re-grouped at
        # remux time.
        self._cluster_packets.append(packet)

    def _span_base(self, pts_ns: int) -> int:
        return pts_ns // self.cluster_span_ns * self.cluster_span_ns

    def _flush_cluster(self):
        if self._cluster_base is None or not self._cluster_packets:
            self._cluster_base = None
            self._cluster_packets = []
            return
        base = self._cluster_base
        packets = sorted(self._cluster_packets, key=lambda p: (p.pts_ns, p.stream_id))
        offset = self._file.tell()
        # Cue keyframe map reflects keyframes at or before the cue time.
        for p in packets:
            if p.keyframe and p.pts_ns <= base:
                self._last_keyframe[p.stream_id] = (p.pts_ns, offset)
        self._cues.append(CuePoint(base, offset, dict(self._last_keyframe)))
        for p in packets:
            if p.keyframe:
                self._last_keyframe[p.stream_id] = (p.pts_ns, offset)
        body = [(CLUSTER_TIMESTAMP, encode_uint(base))]
        for p in packets:
            body.append((PACKET, b"".join((
                ebml.encode_vint(p.stream_id),
                p.pts_ns.to_bytes(8, "big"),
                bytes([KEYFRAME_BIT if p.keyframe else 0]),
                p.payload,
            ))))
        self._file.write(write_element(CLUSTER, body))
        self._cluster_base = None
        self._cluster_packets = []

    # -- finalize ------------------------------------------------------------

    def finalize(self):
        """Flush, write Tracks and Cues, patch every pending size/offset."""
        if self._closed:
            raise WriterClosed("finalize called twice")
        self._flush_cluster()
        tracks_at = self._file.tell()
        self._file.write(write_element(
            TRACKS, [_encode_stream_def(s) for s in self._streams]
        ))
        cues_at = self._file.tell()
        cue_elements = []
        for cue in self._cues:
            children = [
                (CUE_TIME, encode_uint(cue.cue_pts_ns)),
                (CUE_CLUSTER_OFFSET, encode_uint(cue.cluster_offset)),
            ]
            for stream_id in sorted(cue.per_stream_keyframe):
                pts, cluster = cue.per_stream_keyframe[stream_id]
                children.append((CUE_STREAM_ENTRY, [
                    (CUE_STREAM_ID, encode_uint(stream_id)),
                    (CUE_KEYFRAME_PTS, encode_uint(pts)),
                    (CUE_KEYFRAME_CLUSTER, encode_uint(cluster)),
                ]))
            cue_elements.append((CUE_POINT, children))
        self._file.write(write_element(CUES, cue_elements))
        end = self._file.tell()
        self._patch(self._tracks_pointer_offset, encode_uint(tracks_at, 8))
        self._patch(self._cues_pointer_offset, encode_uint(cues_at, 8))
        segment_size = end - self._segment_payload_start
        self._patch(self._segment_size_offset, ebml.encode_vint(segment_size, size_context=True, width=8))
        self._file.flush()
        if self._owns_file:
            self._file.close()
        self._closed = True

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if not self._closed and exc_type is None:
            self.finalize()


def create_container(sink, header: TrajectoryHeader, cluster_span_ns=DEFAULT_CLUSTER_SPAN_NS,
                     raw=False) -> ContainerWriter:
    """Open a writer for a new container described by `header`."""
    if header.doc_type != DOC_TYPE or header.doc_version != DOC_VERSION:
        raise InvalidHeader(f"doc {header.doc_type!r} v{header.doc_version} unsupported")
    return ContainerWriter(
        sink,
        streams=header.streams,
        metadata=header.metadata,
        cluster_span_ns=cluster_span_ns,
        raw=raw,
    )


@dataclass(frozen=True)
class PacketLocation:
    """Address of one packet: its cluster plus the slot within it."""
    pts_ns: int
    keyframe: bool
    cluster_offset: int
    slot: int


class ContainerReader:
    """Random-access reader over a finalized container.

    Immutable once opened; one reader may be shared across threads, and any
    number of readers may map the same file.
    """

    def __init__(self, source):
        if isinstance(source, (bytes, bytearray, memoryview)):
            self._buf = bytes(source)
            self.path = None
            self._mmap = None
            self._file = None
        else:
            self.path = os.fspath(source)
            self._file = open(self.path, "rb")
            try:
                self._mmap = mmap.mmap(self._file.fileno(), 0, access=mmap.ACCESS_READ)
            except ValueError as exc:
                self._file.close()
                raise CorruptHeader(f"{self.path}: empty file") from exc
            self._buf = self._mmap
        self._parse()

    def close(self):
        if self._mmap is not None:
            self._mmap.close()
            self._mmap = None
        if self._file is not None:
            self._file.close()
            self._file = None

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        self.close()

    # -- parsing ---------------------------------------------------------------

    def _parse(self):
        buf = self._buf
        try:
            head = read_element(buf, 0)
        except ebml.EbmlError as exc:
            raise BadMagic(f"not an EBML file: {exc}") from exc
        if head.id != EBML_HEADER:
            raise BadMagic(f"leading element {head.id:#x} is not an EBML header")
        doc_type, doc_version = None, None
        for child in ebml.iter_children(buf, head.payload_offset, head.end):
            if child.id == DOCTYPE:
                doc_type = bytes(buf[child.payload_offset:child.end]).decode()
            elif child.id == DOCTYPE_VERSION:
                doc_version = decode_uint(buf[child.payload_offset:child.end])
        if doc_type != DOC_TYPE:
            raise BadMagic(f"doc type {doc_type!r} is not {DOC_TYPE!r}")
        if doc_version != DOC_VERSION:
            raise UnsupportedVersion(f"doc version {doc_version}")
        try:
            segment = read_element(buf, head.end)
        except ebml.EbmlError as exc:
            raise CorruptHeader(str(exc)) from exc
        if segment.id != SEGMENT:
            raise CorruptHeader(f"expected segment, found {segment.id:#x}")
        if segment.size is UNKNOWN:
            raise MissingIndex("segment size unknown: file was never finalized")
        if segment.end > len(buf):
            raise CorruptHeader("segment overruns end of file")
        self._segment_end = segment.end

        tracks_at = cues_at = None
        self.cluster_span_ns = DEFAULT_CLUSTER_SPAN_NS
        self.raw = False
        metadata: list[tuple[str, str]] = []
        offset = segment.payload_offset
        try:
            while offset < segment.end:
                child = read_element(buf, offset)
                if child.id == INFO:
                    self.cluster_span_ns, self.raw, metadata = self._parse_info(child)
                elif child.id == TRACKS_OFFSET:
                    tracks_at = decode_uint(buf[child.payload_offset:child.end])
                elif child.id == CUES_OFFSET:
                    cues_at = decode_uint(buf[child.payload_offset:child.end])
                if child.id == CLUSTER or None not in (tracks_at, cues_at):
                    break
                offset = child.end
        except ebml.EbmlError as exc:
            raise CorruptHeader(str(exc)) from exc
        if not tracks_at or not cues_at:
            raise MissingIndex("tracks/cues offsets absent: file was never finalized")
        try:
            streams = self._parse_tracks(read_element(buf, tracks_at))
            self.cues = self._parse_cues(read_element(buf, cues_at))
        except (ebml.EbmlError, IndexError, ValueError) as exc:
            raise MissingIndex(f"unparseable index: {exc}") from exc
        self.header = TrajectoryHeader(streams=streams, metadata=tuple(metadata))
        self._by_name = {s.name: s for s in streams}
        self._by_id = {s.stream_id: s for s in streams}
        self._cue_times = [c.cue_pts_ns for c in self.cues]

    def _parse_info(self, info):
        buf = self._buf
        span, raw = DEFAULT_CLUSTER_SPAN_NS, False
        metadata = []
        for child in ebml.iter_children(buf, info.payload_offset, info.end):
            if child.id == CLUSTER_SPAN_NS:
                span = decode_uint(buf[child.payload_offset:child.end])
            elif child.id == RAW_CAPTURE:
                raw = bool(decode_uint(buf[child.payload_offset:child.end]))
            elif child.id == METADATA_ENTRY:
                key = value = ""
                for leaf in ebml.iter_children(buf, child.payload_offset, child.end):
                    text = bytes(buf[leaf.payload_offset:leaf.end]).decode()
                    if leaf.id == METADATA_KEY:
                        key = text
                    elif leaf.id == METADATA_VALUE:
                        value = text
                metadata.append((key, value))
        return span, raw, metadata

    def _parse_tracks(self, tracks):
        if tracks.id != TRACKS:
            raise CorruptHeader(f"tracks pointer hits {tracks.id:#x}")
        streams = []
        for child in ebml.iter_children(self._buf, tracks.payload_offset, tracks.end):
            if child.id == TRACK_ENTRY:
                streams.append(_decode_stream_def(self._buf, child))
        try:
            return _validate_streams(streams)
        except InvalidHeader as exc:
            raise CorruptHeader(str(exc)) from exc

    def _parse_cues(self, cues):
        if cues.id != CUES:
            raise MissingIndex(f"cues pointer hits {cues.id:#x}")
        buf = self._buf
        out = []
        for cue in ebml.iter_children(buf, cues.payload_offset, cues.end):
            if cue.id != CUE_POINT:
                continue
            time = cluster = None
            keyframes = {}
            for child in ebml.iter_children(buf, cue.payload_offset, cue.end):
                if child.id == CUE_TIME:
                    time = decode_uint(buf[child.payload_offset:child.end])
                elif child.id == CUE_CLUSTER_OFFSET:
                    cluster = decode_uint(buf[child.payload_offset:child.end])
                elif child.id == CUE_STREAM_ENTRY:
                    sid = pts = at = None
                    for leaf in ebml.iter_children(buf, child.payload_offset, child.end):
                        value = decode_uint(buf[leaf.payload_offset:leaf.end])
                        if leaf.id == CUE_STREAM_ID:
                            sid = value
                        elif leaf.id == CUE_KEYFRAME_PTS:
                            pts = value
                        elif leaf.id == CUE_KEYFRAME_CLUSTER:
                            at = value
                    keyframes[sid] = (pts, at)
            if time is None or cluster is None:
                raise MissingIndex("cue point without time or offset")
            out.append(CuePoint(time, cluster, keyframes))
        return out

    # -- surface ---------------------------------------------------------------

    @property
    def metadata(self) -> dict[str, str]:
        return dict(self.header.metadata)

    @property
    def empty_episode(self) -> bool:
        return not self.header.streams

    def stream(self, key) -> StreamDef:
        if isinstance(key, StreamDef):
            return key
        found = self._by_id.get(key) or self._by_name.get(key)
        if found is None:
            raise UnknownStream(f"no stream {key!r}")
        return found

    def file_hash(self) -> str:
        """Content fingerprint of the whole file (cache keying)."""
        digest = hashlib.blake2b(digest_size=16)
        view = memoryview(self._buf)
        step = 1 << 22
        for start in range(0, len(view), step):
            digest.update(view[start:start + step])
        return digest.hexdigest()

    def _resolve_filter(self, streams):
        if streams is None:
            return None
        return {self.stream(k).stream_id for k in streams}

    def _cluster_packets(self, cluster_offset: int):
        """Yield (slot, pts, keyframe, payload_span) for one cluster."""
        buf = self._buf
        try:
            cluster = read_element(buf, cluster_offset)
            if cluster.id != CLUSTER:
                raise CorruptCluster(f"cue points at {cluster.id:#x}, not a cluster")
            slot = 0
            for child in ebml.iter_children(buf, cluster.payload_offset, cluster.end):
                if child.id != PACKET:
                    continue
                sid, width = ebml.decode_vint(buf, child.payload_offset)
                fixed = child.payload_offset + width
                if fixed + 9 > child.end:
                    raise CorruptCluster("packet shorter than its fixed fields")
                pts = int.from_bytes(buf[fixed:fixed + 8], "big")
                keyframe = bool(buf[fixed + 8] & KEYFRAME_BIT)
                yield slot, sid, pts, keyframe, (fixed + 9, child.end)
                slot += 1
        except ebml.EbmlError as exc:
            raise CorruptCluster(str(exc)) from exc

    def iter_packets(self, streams=None, time_range=None):
        """Yield packets in (pts, stream id) order.

        `streams` filters by name or id; `time_range` is a half-open
        [t0, t1) window in ns, entered at the cue covering t0.
        """
        wanted = self._resolve_filter(streams)
        t0, t1 = time_range if time_range is not None else (None, None)
        if time_range is not None and t0 > t1:
            raise ContainerError(f"bad time range [{t0}, {t1})")
        first_cue = 0
        if t0 is not None and self.cues:
            first_cue = max(0, bisect_right(self._cue_times, t0) - 1)
        for cue in self.cues[first_cue:]:
            if t1 is not None and cue.cue_pts_ns >= t1:
                break
            for _, sid, pts, keyframe, (a, b) in self._cluster_packets(cue.cluster_offset):
                if wanted is not None and sid not in wanted:
                    continue
                if t0 is not None and pts < t0:
                    continue
                if t1 is not None and pts >= t1:
                    continue
                yield Packet(sid, pts, keyframe, bytes(self._buf[a:b]))

    def scan_stream(self, key) -> list[PacketLocation]:
        """Packet addresses of one stream, in order, payloads untouched."""
        sid = self.stream(key).stream_id
        out = []
        for cue in self.cues:
            for slot, packet_sid, pts, keyframe, _ in self._cluster_packets(cue.cluster_offset):
                if packet_sid == sid:
                    out.append(PacketLocation(pts, keyframe, cue.cluster_offset, slot))
        return out

    def read_packet_at(self, location: PacketLocation) -> Packet:
        for slot, sid, pts, keyframe, (a, b) in self._cluster_packets(location.cluster_offset):
            if slot == location.slot:
                return Packet(sid, pts, keyframe, bytes(self._buf[a:b]))
        raise CorruptCluster(f"no slot {location.slot} in cluster at {location.cluster_offset}")

    def iter_cluster_from(self, cluster_offset: int):
        """Yield (cluster_offset, slot, Packet) from the given cluster on."""
        index = next(
            (i for i, cue in enumerate(self.cues) if cue.cluster_offset == cluster_offset),
            None,
        )
        if index is None:
            raise CorruptCluster(f"no cue for cluster at {cluster_offset}")
        for cue in self.cues[index:]:
            for slot, sid, pts, keyframe, (a, b) in self._cluster_packets(cue.cluster_offset):
                yield cue.cluster_offset, slot, Packet(sid, pts, keyframe, bytes(self._buf[a:b]))

    def seek_keyframe(self, key, t_ns: int) -> tuple[int, int]:
        """Latest keyframe of a stream with pts <= t_ns, as
        (pts, cluster offset): binary search over cues, then one cluster scan."""
        sid = self.stream(key).stream_id
        if not self.cues:
            raise NoKeyframeBefore(f"empty file has no keyframes before {t_ns}")
        index = bisect_right(self._cue_times, t_ns) - 1
        if index < 0:
            raise NoKeyframeBefore(f"no cluster at or before {t_ns}")
        cue = self.cues[index]
        best = cue.per_stream_keyframe.get(sid)
        for _, packet_sid, pts, keyframe, _span in self._cluster_packets(cue.cluster_offset):
            if packet_sid == sid and keyframe and pts <= t_ns:
                if best is None or pts >= best[0]:
                    best = (pts, cue.cluster_offset)
        if best is None:
            raise NoKeyframeBefore(f"stream {sid} has no keyframe at or before {t_ns}")
        return best


def open_container(source) -> ContainerReader:
    """Open a finalized container from a path or bytes."""
    return ContainerReader(source)
