"""Two-phase episode capture: raw serialized packets first, transcode later.

Compression is kept out of the capture loop: add() serializes every sample
verbatim into a raw-flagged container, inferring stream kind, dtype and
shape from the first sample of each name.  transcode() then re-encodes the
raw capture under a per-kind codec plan and rewrites it with the packets of
all streams interleaved globally by (pts, stream id).
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import codecs
from .codecs import CodecSpec, Decoder, Encoder, Frame, dtype_name, serialize_tensor
from .container import (
    DEFAULT_CLUSTER_SPAN_NS,
    ContainerReader,
    ContainerWriter,
    Packet,
    StreamDef,
    open_container,
)


class RecorderError(Exception):
    pass


class RecorderClosed(RecorderError):
    pass


class DtypeMismatch(RecorderError):
    pass


class ShapeMismatch(RecorderError):
    pass


class CorruptInput(RecorderError):
    pass


def default_plan() -> dict[str, CodecSpec]:
    return {
        "vision": CodecSpec("delta_q", quant_step=32),
        "depth": CodecSpec("delta_ll"),
        "language": CodecSpec("raw", compressor_id="zlib"),
        "action": CodecSpec("raw", compressor_id="zlib"),
        "other": CodecSpec("raw", compressor_id="zlib"),
    }


@dataclass(frozen=True)
class TranscodePlan:
    """Codec assignment per stream kind; unlisted kinds fall back to raw."""

    per_kind: dict[str, CodecSpec] = field(default_factory=default_plan)

    def codec_for(self, stream: StreamDef) -> CodecSpec:
        spec = self.per_kind.get(stream.kind, CodecSpec("raw", compressor_id="zlib"))
        codecs.validate_codec(spec, stream.dtype, stream.kind)
        return spec


LOSSLESS_PLAN = TranscodePlan({
    "vision": CodecSpec("delta_ll"),
    "depth": CodecSpec("delta_ll"),
    "language": CodecSpec("raw", compressor_id="zlib"),
    "action": CodecSpec("raw", compressor_id="zlib"),
    "other": CodecSpec("raw", compressor_id="zlib"),
})


def infer_stream(name: str, value, kind: str | None = None) -> tuple[str, str, tuple[int, ...]]:
    """Map one sample to (kind, dtype, shape).

    Inference: rank-3 u8 with a trailing dim of 3 is vision, text is
    language, rank-1 numerics are action, everything else is other.  Depth
    is never inferred; pass kind="depth" explicitly.
    """
    if isinstance(value, str):
        inferred = "language"
        dtype, shape = "utf8", ()
    else:
        array = np.asarray(value)
        dtype = dtype_name(array.dtype)
        shape = tuple(array.shape)
        if array.ndim == 3 and dtype == "u8" and shape[-1] == 3:
            inferred = "vision"
        elif array.ndim == 1 and dtype != "utf8":
            inferred = "action"
        else:
            inferred = "other"
    if kind is not None:
        if kind == "language" and dtype != "utf8":
            raise DtypeMismatch(f"{name}: language streams carry text, not {dtype}")
        if kind != "language" and dtype == "utf8":
            raise DtypeMismatch(f"{name}: text samples make a language stream")
        inferred = kind
    return inferred, dtype, shape


class Recorder:
    """Collects one episode into a raw container.  Single-owner."""

    def __init__(self, sink, metadata=(), cluster_span_ns=None):
        merged: dict[str, str] = {}
        for key, value in (metadata.items() if isinstance(metadata, dict) else metadata):
            merged[str(key)] = str(value)      # last writer wins, order kept
        span = cluster_span_ns if cluster_span_ns is not None else DEFAULT_CLUSTER_SPAN_NS
        self._writer = ContainerWriter(
            sink, streams=(), metadata=tuple(merged.items()),
            cluster_span_ns=span, raw=True, allow_empty=True,
        )
        self.path = self._writer.path
        self._origin_ns: int | None = None
        self._defs: dict[str, StreamDef] = {}
        self._closed = False

    def add(self, stream_name: str, data, timestamp_ns: int | None = None,
            kind: str | None = None):
        """Record one sample; the first sample of a name declares its stream."""
        if self._closed:
            raise RecorderClosed("episode already closed")
        if timestamp_ns is None:
            now = time.monotonic_ns()
            if self._origin_ns is None:
                self._origin_ns = now
            pts_ns = now - self._origin_ns
        else:
            pts_ns = int(timestamp_ns)

        if isinstance(data, str):
            frame = Frame.from_text(data)
        else:
            frame = Frame.from_array(np.asarray(data))

        stream = self._defs.get(stream_name)
        if stream is None:
            inferred_kind, dtype, shape = infer_stream(stream_name, data, kind)
            stream = StreamDef(
                stream_id=len(self._defs) + 1,
                name=stream_name,
                kind=inferred_kind,
                dtype=dtype,
                shape=shape,
                codec=CodecSpec("raw"),
            )
            self._writer.declare_stream(stream)
            self._defs[stream_name] = stream
        else:
            if frame.dtype != stream.dtype:
                raise DtypeMismatch(
                    f"{stream_name}: stream is {stream.dtype}, sample is {frame.dtype}"
                )
            if frame.dtype != "utf8" and frame.shape != stream.shape:
                raise ShapeMismatch(
                    f"{stream_name}: stream shape {stream.shape}, sample shape {frame.shape}"
                )
        self._writer.append(Packet(
            stream_id=stream.stream_id,
            pts_ns=pts_ns,
            keyframe=True,
            payload=serialize_tensor(frame),
        ))

    @property
    def streams(self) -> tuple[StreamDef, ...]:
        return self._writer.streams

    def close(self):
        """Finalize the raw capture; returns its path (or sink)."""
        if self._closed:
            raise RecorderClosed("close called twice")
        self._writer.finalize()
        self._closed = True
        return self.path

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if not self._closed and exc_type is None:
            self.close()


def start_episode(sink, metadata=()) -> Recorder:
    return Recorder(sink, metadata)


def transcode(source, sink, plan: TranscodePlan | None = None):
    """Re-encode a raw capture under `plan` into a finalized container.

    The input must carry the raw-capture flag and is left untouched; the
    output interleaves all packets globally by (pts, stream id) and carries
    the plan's codec specs in its stream table.
    """
    if plan is None:
        plan = TranscodePlan()
    reader = source if isinstance(source, ContainerReader) else open_container(source)
    try:
        if not reader.raw:
            raise CorruptInput("transcode input must be a raw capture (raw=true)")
        out_streams = []
        for stream in reader.header.streams:
            spec = plan.codec_for(stream)
            out_streams.append(StreamDef(
                stream_id=stream.stream_id,
                name=stream.name,
                kind=stream.kind,
                dtype=stream.dtype,
                shape=stream.shape,
                codec=spec,
                rate_hint_hz=stream.rate_hint_hz,
            ))

        encoded: list[tuple[int, int, bool, bytes]] = []
        for stream, out in zip(reader.header.streams, out_streams):
            src_decoder = Decoder(stream.codec)
            encoder = Encoder(out.codec, stream.dtype, stream.shape)
            pts_list = []
            for packet in reader.iter_packets(streams=[stream.stream_id]):
                value = src_decoder.decode(packet.payload, packet.keyframe)
                pts_list.append(packet.pts_ns)
                for payload, keyframe in encoder.encode(value, packet.pts_ns):
                    encoded.append((packet.pts_ns, stream.stream_id, keyframe, payload))
            tail = encoder.finish()
            if tail:
                if len(tail) != len(pts_list):
                    raise CorruptInput(
                        f"external codec for {stream.name!r} must emit one packet per frame"
                    )
                encoded.extend(
                    (pts, stream.stream_id, keyframe, payload)
                    for pts, (payload, keyframe) in zip(pts_list, tail)
                )

        encoded.sort(key=lambda entry: (entry[0], entry[1]))
        writer = ContainerWriter(
            sink, streams=tuple(out_streams), metadata=reader.header.metadata,
            cluster_span_ns=reader.cluster_span_ns, raw=False,
            allow_empty=not out_streams,
        )
        for pts, sid, keyframe, payload in encoded:
            writer.append(Packet(sid, pts, keyframe, payload))
        writer.finalize()
        return writer.path if writer.path is not None else sink
    finally:
        if reader is not source:
            reader.close()
