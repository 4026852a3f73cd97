"""Self-contained EBML container for time-aligned robot trajectory data.

The pieces, bottom up: `ebml` (VINT and element primitives), `codecs`
(tensor serialization plus delta compression with keyframes), `container`
(the .rdm file format: writer, reader, cue-based seeking), `recorder`
(two-phase capture then transcode), `loader` (decode to arrays through a
memory-mapped cache with plan balancing), `dump` (the TensorDump
interchange layout), `synth` (seeded synthetic episodes), and `cli`.
"""

from .codecs import (
    CodecSpec,
    Decoder,
    Encoder,
    Frame,
    compress_bytes,
    decompress_bytes,
    deserialize_tensor,
    quantize,
    serialize_tensor,
)
from .container import (
    ContainerReader,
    ContainerWriter,
    CuePoint,
    Packet,
    StreamDef,
    TrajectoryHeader,
    create_container,
    open_container,
)
from .dump import dump_to_container, read_dump, write_dump
from .loader import (
    CachePolicy,
    CacheState,
    EpisodeData,
    LoadPlan,
    StreamData,
    align_to,
    batch_load,
    choose_plan,
    load_episode,
    load_slice,
    materialize_cache,
    prefetch_iter,
)
from .recorder import Recorder, TranscodePlan, start_episode, transcode

__version__ = "0.1.0"

__all__ = [
    "CachePolicy",
    "CacheState",
    "CodecSpec",
    "ContainerReader",
    "ContainerWriter",
    "CuePoint",
    "Decoder",
    "Encoder",
    "EpisodeData",
    "Frame",
    "LoadPlan",
    "Packet",
    "Recorder",
    "StreamData",
    "StreamDef",
    "TrajectoryHeader",
    "TranscodePlan",
    "align_to",
    "batch_load",
    "choose_plan",
    "compress_bytes",
    "create_container",
    "decompress_bytes",
    "deserialize_tensor",
    "dump_to_container",
    "load_episode",
    "load_slice",
    "materialize_cache",
    "open_container",
    "prefetch_iter",
    "quantize",
    "read_dump",
    "serialize_tensor",
    "start_episode",
    "transcode",
    "write_dump",
]
