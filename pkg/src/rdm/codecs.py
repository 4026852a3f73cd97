"""Frame codecs: tensor serialization and keyframe-gated delta compression.

Payload layout of a serialized tensor (the on-wire unit for raw packets and
keyframes) is, in order: a 1-octet dtype tag, a 1-octet rank, rank 4-octet
little-endian dims, then the element data little-endian row-major.  utf8
frames have rank 0 and carry the encoded string as their data.

Two built-in inter-frame codecs stand in for production video codecs while
keeping their two load-bearing behaviors, inter-frame compression and
keyframe-gated decoding:

  delta_ll  every K-th frame is a keyframe (compressed serialized tensor);
            the rest are per-octet differences mod 256 against the previous
            reconstruction, compressed.  Lossless.
  delta_q   like delta_ll, but frames are first snapped to multiples of the
            quantization step q, so reconstructions are off by at most
            floor(q/2) per element.  The previous-frame state on BOTH sides
            is the quantized reconstruction, never the source frame, which
            keeps encoder and decoder in lockstep.

The `external` codec shells out to a user command; see ExternalEncoder.
"""

from __future__ import annotations

import subprocess
import zlib
from dataclasses import dataclass, field, replace

import numpy as np

CODEC_IDS = ("raw", "delta_ll", "delta_q", "external")
COMPRESSORS = ("none", "zlib")

DTYPES = {
    "u8": np.dtype("<u1"),
    "u16": np.dtype("<u2"),
    "i32": np.dtype("<i4"),
    "i64": np.dtype("<i8"),
    "f32": np.dtype("<f4"),
    "f64": np.dtype("<f8"),
}
DTYPE_TAGS = {"u8": 1, "u16": 2, "i32": 3, "i64": 4, "f32": 5, "f64": 6, "utf8": 7}
TAG_DTYPES = {tag: name for name, tag in DTYPE_TAGS.items()}

DEFAULT_KEYFRAME_INTERVAL = 10


class CodecError(Exception):
    pass


class ShapeMismatch(CodecError):
    pass


class UnknownDtypeTag(CodecError):
    pass


class Truncated(CodecError):
    pass


class MissingKeyframe(CodecError):
    pass


class CorruptPayload(CodecError):
    pass


class PlanIncompatible(CodecError):
    pass


@dataclass(frozen=True)
class CodecSpec:
    """Per-stream codec configuration, recorded verbatim in the container."""

    codec_id: str = "raw"
    keyframe_interval: int = 0      # 0 means the codec's default
    quant_step: int = 1             # delta_q only, >= 2 there
    compressor_id: str | None = None
    external_cmd: tuple[str, ...] | None = None
    lossy: bool = field(init=False, default=False)

    def __post_init__(self):
        if self.codec_id not in CODEC_IDS:
            raise PlanIncompatible(f"unknown codec {self.codec_id!r}")
        k = self.keyframe_interval
        if k == 0:
            k = 1 if self.codec_id == "raw" else DEFAULT_KEYFRAME_INTERVAL
            object.__setattr__(self, "keyframe_interval", k)
        if k < 1:
            raise PlanIncompatible(f"keyframe interval {k} < 1")
        if self.codec_id == "raw" and k != 1:
            raise PlanIncompatible("raw codec requires keyframe_interval 1")
        if self.codec_id == "delta_q" and self.quant_step < 2:
            raise PlanIncompatible(f"delta_q requires quant_step >= 2, got {self.quant_step}")
        if self.codec_id == "external" and not self.external_cmd:
            raise PlanIncompatible("external codec requires external_cmd")
        compressor = self.compressor_id
        if compressor is None:
            compressor = "zlib" if self.codec_id in ("delta_ll", "delta_q") else "none"
            object.__setattr__(self, "compressor_id", compressor)
        if compressor not in COMPRESSORS:
            raise PlanIncompatible(f"unknown compressor {compressor!r}")
        object.__setattr__(self, "lossy", self.codec_id == "delta_q")

    def with_compressor(self, compressor_id: str) -> "CodecSpec":
        return replace(self, compressor_id=compressor_id)


RAW = CodecSpec()


def validate_codec(spec: CodecSpec, dtype: str, kind: str) -> None:
    """Reject codec/stream pairings that cannot work (PlanIncompatible)."""
    if dtype == "utf8" and spec.codec_id != "raw":
        raise PlanIncompatible(f"{spec.codec_id} cannot encode utf8 stream kind={kind}")
    if spec.codec_id == "external" and kind not in ("vision", "depth"):
        raise PlanIncompatible(f"external codec is limited to vision/depth, got {kind}")


@dataclass(frozen=True)
class Frame:
    """One decoded sample: dtype name, shape, and little-endian bytes."""

    dtype: str
    shape: tuple[int, ...]
    data: bytes

    @classmethod
    def from_array(cls, array: np.ndarray) -> "Frame":
        dtype = dtype_name(array.dtype)
        data = np.ascontiguousarray(array).astype(DTYPES[dtype], copy=False)
        return cls(dtype, tuple(array.shape), data.tobytes())

    @classmethod
    def from_text(cls, text: str) -> "Frame":
        return cls("utf8", (), text.encode("utf-8"))

    def to_array(self) -> np.ndarray:
        if self.dtype == "utf8":
            raise ShapeMismatch("utf8 frame has no array form; use .text")
        return np.frombuffer(self.data, dtype=DTYPES[self.dtype]).reshape(self.shape)

    @property
    def text(self) -> str:
        if self.dtype != "utf8":
            raise ShapeMismatch(f"{self.dtype} frame is not text")
        return self.data.decode("utf-8")


def dtype_name(dt: np.dtype) -> str:
    for name, candidate in DTYPES.items():
        if candidate == dt.newbyteorder("<"):
            return name
    raise ShapeMismatch(f"unsupported dtype {dt}")


def frame_bytes(dtype: str, shape: tuple[int, ...]) -> int:
    return DTYPES[dtype].itemsize * int(np.prod(shape, dtype=np.int64))


def serialize_tensor(frame: Frame) -> bytes:
    tag = DTYPE_TAGS.get(frame.dtype)
    if tag is None:
        raise ShapeMismatch(f"unsupported dtype {frame.dtype!r}")
    if frame.dtype != "utf8":
        expected = frame_bytes(frame.dtype, frame.shape)
        if len(frame.data) != expected:
            raise ShapeMismatch(
                f"shape {frame.shape} x {frame.dtype} needs {expected} octets, got {len(frame.data)}"
            )
    elif frame.shape != ():
        raise ShapeMismatch("utf8 frames are scalar")
    header = bytes([tag, len(frame.shape)])
    dims = b"".join(int(d).to_bytes(4, "little") for d in frame.shape)
    return header + dims + frame.data


def deserialize_tensor(payload) -> Frame:
    payload = bytes(payload)
    if len(payload) < 2:
        raise Truncated("payload shorter than tag+rank")
    tag, rank = payload[0], payload[1]
    dtype = TAG_DTYPES.get(tag)
    if dtype is None:
        raise UnknownDtypeTag(f"dtype tag {tag:#x}")
    if len(payload) < 2 + 4 * rank:
        raise Truncated("payload shorter than its dims")
    shape = tuple(
        int.from_bytes(payload[2 + 4 * i: 6 + 4 * i], "little") for i in range(rank)
    )
    data = payload[2 + 4 * rank:]
    if dtype != "utf8":
        expected = frame_bytes(dtype, shape)
        if len(data) < expected:
            raise Truncated(f"expected {expected} data octets, got {len(data)}")
        if len(data) > expected:
            raise ShapeMismatch(f"expected {expected} data octets, got {len(data)}")
    return Frame(dtype, shape, data)


def compress_bytes(data: bytes, compressor_id: str = "zlib") -> bytes:
    if compressor_id == "none":
        return bytes(data)
    if compressor_id == "zlib":
        return zlib.compress(bytes(data), 6)
    raise PlanIncompatible(f"unknown compressor {compressor_id!r}")


def decompress_bytes(data: bytes, compressor_id: str = "zlib") -> bytes:
    if compressor_id == "none":
        return bytes(data)
    if compressor_id == "zlib":
        try:
            return zlib.decompress(bytes(data))
        except zlib.error as exc:
            raise CorruptPayload(str(exc)) from exc
    raise PlanIncompatible(f"unknown compressor {compressor_id!r}")


def quantize(array: np.ndarray, step: int) -> np.ndarray:
    """Snap every element to the nearest multiple of `step` (ties up),
    saturating at the dtype limits instead of wrapping."""
    if array.dtype.kind == "f":
        wide = np.floor((array.astype(np.float64) + step / 2) / step) * step
        return wide.astype(array.dtype)
    info = np.iinfo(array.dtype)
    v = array.astype(np.int64)
    m = v // step
    bump = (v - m * step) >= (step - step // 2)
    level = m + bump
    # Clamp the level before multiplying so level*step cannot overflow
    # int64 at the i64 extremes; saturated elements stay within
    # floor(step/2) of the source value because the unclamped multiple
    # already was.
    level = np.clip(level, -(2**63) // step, (2**63 - 1) // step)
    snapped = np.clip(level * step, info.min, info.max)
    return snapped.astype(array.dtype)


class Encoder:
    """Single-stream encoder state; not shareable across streams."""

    def __init__(self, spec: CodecSpec, dtype: str, shape: tuple[int, ...]):
        if dtype == "utf8" and spec.codec_id != "raw":
            raise PlanIncompatible(f"{spec.codec_id} cannot encode utf8 frames")
        self.spec = spec
        self.dtype = dtype
        self.shape = tuple(shape)
        self.counter = 0
        self._previous: np.ndarray | None = None   # reconstruction bytes, u8 view
        self._external = ExternalEncoder(spec) if spec.codec_id == "external" else None

    def encode(self, value, pts_ns: int = 0) -> list[tuple[bytes, bool]]:
        """Encode one frame; returns [(payload, keyframe flag), ...]."""
        frame = self._coerce(value)
        spec = self.spec
        if spec.codec_id == "raw":
            payload = compress_bytes(serialize_tensor(frame), spec.compressor_id)
            self.counter += 1
            return [(payload, True)]
        if spec.codec_id == "external":
            return self._external.feed(frame)

        array = frame.to_array()
        if spec.codec_id == "delta_q":
            array = quantize(array, spec.quant_step)
        recon = np.frombuffer(array.tobytes(), dtype=np.uint8)
        keyframe = self.counter % spec.keyframe_interval == 0
        if keyframe:
            payload = compress_bytes(
                serialize_tensor(Frame.from_array(array)), spec.compressor_id
            )
        else:
            delta = recon - self._previous       # uint8 wraps mod 256
            payload = compress_bytes(delta.tobytes(), spec.compressor_id)
        self._previous = recon
        self.counter += 1
        return [(payload, keyframe)]

    def finish(self) -> list[tuple[bytes, bool]]:
        if self._external is not None:
            return self._external.finish()
        return []

    def _coerce(self, value) -> Frame:
        if isinstance(value, Frame):
            frame = value
        elif isinstance(value, str):
            frame = Frame.from_text(value)
        else:
            frame = Frame.from_array(np.asarray(value))
        if frame.dtype != self.dtype:
            raise ShapeMismatch(f"stream is {self.dtype}, frame is {frame.dtype}")
        if frame.dtype != "utf8" and frame.shape != self.shape:
            raise ShapeMismatch(f"stream shape {self.shape}, frame shape {frame.shape}")
        return frame


class Decoder:
    """Single-stream decoder state.  The first packet after creation or a
    seek reset must be a keyframe."""

    def __init__(self, spec: CodecSpec, dtype: str | None = None, shape=None):
        self.spec = spec
        self.dtype = dtype
        self.shape = tuple(shape) if shape is not None else None
        self.frames_decoded = 0
        self._previous: np.ndarray | None = None

    def reset(self):
        self._previous = None

    def decode(self, payload: bytes, keyframe: bool):
        """Returns the reconstructed np.ndarray (or str for utf8 frames)."""
        spec = self.spec
        data = decompress_bytes(payload, spec.compressor_id)
        if keyframe or spec.codec_id == "raw":
            frame = deserialize_tensor(data)
            self.dtype = frame.dtype
            self.shape = frame.shape
            self.frames_decoded += 1
            if frame.dtype == "utf8":
                return frame.text
            array = frame.to_array()
            self._previous = np.frombuffer(frame.data, dtype=np.uint8)
            return array
        if self._previous is None:
            raise MissingKeyframe("delta packet with no prior reconstruction")
        delta = np.frombuffer(data, dtype=np.uint8)
        if delta.shape != self._previous.shape:
            raise CorruptPayload(
                f"delta of {delta.size} octets against {self._previous.size}-octet frame"
            )
        recon = self._previous + delta            # uint8 wraps mod 256
        self._previous = recon
        self.frames_decoded += 1
        return np.frombuffer(recon.tobytes(), dtype=DTYPES[self.dtype]).reshape(self.shape)


class ExternalEncoder:
    """Contract for user-supplied codecs, run as a subprocess in batch mode.

    stdin:  a sequence of u32-LE length-prefixed serialized tensors.
    stdout: a sequence of u32-LE length-prefixed packets, each a 1-octet
            keyframe flag (0 or 1) followed by the payload.

    The command is invoked as `cmd encode` / `cmd decode`; a decoder gets
    the packet framing on stdin and must emit length-prefixed serialized
    tensors.  Frames are buffered and flushed at finish() to keep the pipe
    protocol deadlock-free.
    """

    def __init__(self, spec: CodecSpec):
        self.spec = spec
        self._frames: list[bytes] = []

    def feed(self, frame: Frame) -> list[tuple[bytes, bool]]:
        self._frames.append(serialize_tensor(frame))
        return []

    def finish(self) -> list[tuple[bytes, bool]]:
        blob = b"".join(len(f).to_bytes(4, "little") + f for f in self._frames)
        out = _run_external(self.spec.external_cmd, "encode", blob)
        packets = []
        for record in _iter_length_prefixed(out):
            if not record:
                raise CorruptPayload("external codec emitted an empty packet")
            packets.append((record[1:], bool(record[0])))
        return packets


def external_decode(spec: CodecSpec, packets) -> list[Frame]:
    blob = b"".join(
        (len(p) + 1).to_bytes(4, "little") + bytes([kf]) + p for p, kf in packets
    )
    out = _run_external(spec.external_cmd, "decode", blob)
    return [deserialize_tensor(rec) for rec in _iter_length_prefixed(out)]


def _run_external(cmd, mode: str, blob: bytes) -> bytes:
    proc = subprocess.run(
        list(cmd) + [mode], input=blob, stdout=subprocess.PIPE, check=False
    )
    if proc.returncode != 0:
        raise CorruptPayload(f"external codec exited {proc.returncode}")
    return proc.stdout


def _iter_length_prefixed(blob: bytes):
    offset = 0
    while offset < len(blob):
        if offset + 4 > len(blob):
            raise Truncated("dangling length prefix")
        length = int.from_bytes(blob[offset:offset + 4], "little")
        offset += 4
        if offset + length > len(blob):
            raise Truncated("length prefix overruns stream")
        yield blob[offset:offset + length]
        offset += length
