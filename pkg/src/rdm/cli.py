"""Command line tools: generate, convert, transcode, inspect, verify,
bench, and stats over .rdm datasets.

Exit codes: 0 success, 1 verification failure, 2 error.  Machine-readable
output via --json; bench also writes per-batch CSV with --csv.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import codecs, dump as dump_mod, loader, recorder as recorder_mod, synth
from .codecs import CodecSpec
from .container import ContainerError, FILE_EXTENSION, open_container
from .loader import CachePolicy, batch_load, load_episode, make_executor, prefetch_iter
from .recorder import TranscodePlan, transcode

DATASET_MANIFEST = "manifest.json"
DATASET_FORMAT = "rdm-dataset"


class InvalidSpec(Exception):
    pass


class DivisionByZeroSize(Exception):
    pass


# -- dataset plumbing ---------------------------------------------------------

def episode_files(dataset_dir: Path) -> list[Path]:
    manifest = dataset_dir / DATASET_MANIFEST
    if manifest.is_file():
        doc = json.loads(manifest.read_text())
        if doc.get("format") == DATASET_FORMAT:
            return [dataset_dir / name for name in doc["episodes"]]
    return sorted(dataset_dir.glob(f"*{FILE_EXTENSION}"))


def _resolve_episodes(src: Path) -> list[Path]:
    """A container path, or every episode of a dataset directory."""
    if src.is_file():
        return [src]
    if src.is_dir():
        found = episode_files(src)
        if found:
            return found
    raise InvalidSpec(f"{src}: no episodes found")


def _policy(args) -> CachePolicy | None:
    if getattr(args, "no_cache", False):
        return None
    return CachePolicy(
        cache_dir=args.cache_dir,
        memory_budget_bytes=args.memory_budget,
    )


# -- gen ----------------------------------------------------------------------

def cmd_gen(args) -> int:
    if args.width < 1 or args.height < 1:
        raise InvalidSpec(f"resolution ({args.height}, {args.width}) must be positive")
    if args.frames < 1:
        raise InvalidSpec("frames must be >= 1")
    if args.episodes < 0:
        raise InvalidSpec("episodes must be >= 0")
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    names = []
    plan = None
    if args.vision_codec != "raw":
        plan = _plan_from_flags(args)
    for index in range(args.episodes):
        name = f"episode_{index:03d}{FILE_EXTENSION}"
        target = out / name
        if plan is None:
            synth.capture_episode(
                target, seed=[args.seed, index], n_frames=args.frames,
                height=args.height, width=args.width, fps=args.fps,
                action_hz=args.action_hz,
            )
        else:
            raw = out / f".raw_{name}"
            synth.capture_episode(
                raw, seed=[args.seed, index], n_frames=args.frames,
                height=args.height, width=args.width, fps=args.fps,
                action_hz=args.action_hz,
            )
            transcode(raw, target, plan)
            raw.unlink()
        names.append(name)
    manifest = {
        "format": DATASET_FORMAT,
        "version": 1,
        "seed": args.seed,
        "episodes": names,
        "params": {
            "frames": args.frames, "height": args.height, "width": args.width,
            "fps": args.fps, "action_hz": args.action_hz,
            "vision_codec": args.vision_codec,
        },
    }
    (out / DATASET_MANIFEST).write_text(json.dumps(manifest, indent=2) + "\n")
    _emit(args, manifest, f"wrote {len(names)} episodes to {out}")
    return 0


# -- convert ------------------------------------------------------------------

def cmd_convert(args) -> int:
    src, dst = Path(args.src), Path(args.dst)
    converted = []
    if src.is_file():
        dump_mod.write_dump(src, dst)
        converted.append({"src": str(src), "dst": str(dst), "direction": "to_dump"})
    elif dump_mod.is_dump(src):
        dump_mod.dump_to_container(src, dst)
        converted.append({"src": str(src), "dst": str(dst), "direction": "to_container"})
    elif src.is_dir():
        episodes = episode_files(src)
        dump_dirs = sorted(p.parent for p in src.glob(f"*/{dump_mod.MANIFEST}"))
        if episodes:
            dst.mkdir(parents=True, exist_ok=True)
            for episode in episodes:
                out = dst / episode.stem
                dump_mod.write_dump(episode, out)
                converted.append({"src": str(episode), "dst": str(out), "direction": "to_dump"})
        elif dump_dirs:
            dst.mkdir(parents=True, exist_ok=True)
            for dump_dir in dump_dirs:
                out = dst / f"{dump_dir.name}{FILE_EXTENSION}"
                dump_mod.dump_to_container(dump_dir, out)
                converted.append({
                    "src": str(dump_dir), "dst": str(out), "direction": "to_container",
                })
        else:
            raise InvalidSpec(f"{src}: nothing convertible found")
    else:
        raise InvalidSpec(f"{src}: no such input")
    _emit(args, {"converted": converted}, f"converted {len(converted)} item(s)")
    return 0


# -- transcode ----------------------------------------------------------------

def _plan_from_flags(args) -> TranscodePlan:
    per_kind = recorder_mod.default_plan()
    vision = args.vision_codec
    if vision == "raw":
        per_kind["vision"] = CodecSpec("raw", compressor_id=args.compressor)
    elif vision == "delta_ll":
        per_kind["vision"] = CodecSpec(
            "delta_ll", keyframe_interval=args.keyframe_interval,
            compressor_id=args.compressor,
        )
    elif vision == "delta_q":
        per_kind["vision"] = CodecSpec(
            "delta_q", keyframe_interval=args.keyframe_interval,
            quant_step=args.quant_step, compressor_id=args.compressor,
        )
    else:
        raise InvalidSpec(f"unknown vision codec {vision!r}")
    return TranscodePlan(per_kind)


def cmd_transcode(args) -> int:
    plan = _plan_from_flags(args)
    src, dst = Path(args.src), Path(args.dst)
    episodes = _resolve_episodes(src)
    results = []
    if len(episodes) > 1:
        dst.mkdir(parents=True, exist_ok=True)
    for episode in episodes:
        target = dst if len(episodes) == 1 else dst / episode.name
        with open_container(episode) as reader:
            if reader.raw:
                transcode(reader, target, plan)
            else:
                # Not a raw capture: decode fully, re-capture, then encode.
                decoded = load_episode(reader)
                order = [(s.name, s.kind) for s in reader.header.streams]
                staging = target.with_suffix(".staging.rdm")
                dump_mod.recapture(decoded, order, staging)
                try:
                    transcode(staging, target, plan)
                finally:
                    staging.unlink()
        results.append({"src": str(episode), "dst": str(target),
                        "bytes": target.stat().st_size})
    if len(episodes) > 1:
        manifest = {
            "format": DATASET_FORMAT, "version": 1, "seed": None,
            "episodes": [r["dst"].rsplit("/", 1)[-1] for r in results],
            "params": {"transcoded_from": str(src)},
        }
        (dst / DATASET_MANIFEST).write_text(json.dumps(manifest, indent=2) + "\n")
    _emit(args, {"transcoded": results}, f"transcoded {len(results)} episode(s)")
    return 0


# -- inspect ------------------------------------------------------------------

def cmd_inspect(args) -> int:
    path = Path(args.src)
    with open_container(path) as reader:
        streams = []
        counts = {s.stream_id: {"packets": 0, "keyframes": 0, "payload_bytes": 0}
                  for s in reader.header.streams}
        for packet in reader.iter_packets():
            entry = counts[packet.stream_id]
            entry["packets"] += 1
            entry["keyframes"] += bool(packet.keyframe)
            entry["payload_bytes"] += len(packet.payload)
        for stream in reader.header.streams:
            spec = stream.codec
            streams.append({
                "stream_id": stream.stream_id,
                "name": stream.name,
                "kind": stream.kind,
                "dtype": stream.dtype,
                "shape": list(stream.shape),
                "codec": spec.codec_id,
                "keyframe_interval": spec.keyframe_interval,
                "quant_step": spec.quant_step,
                "compressor": spec.compressor_id,
                "lossy": spec.lossy,
                **counts[stream.stream_id],
            })
        report = {
            "path": str(path),
            "file_bytes": path.stat().st_size,
            "doc_type": reader.header.doc_type,
            "doc_version": reader.header.doc_version,
            "raw": reader.raw,
            "empty_episode": reader.empty_episode,
            "cluster_span_ns": reader.cluster_span_ns,
            "cues": len(reader.cues),
            "metadata": reader.metadata,
            "streams": streams,
        }
    if args.json:
        print(json.dumps(report, indent=2))
        return 0
    print(f"{path}: doc {report['doc_type']} v{report['doc_version']}, "
          f"{report['file_bytes']} bytes, raw={report['raw']}, "
          f"{report['cues']} cues, span {report['cluster_span_ns']} ns")
    for key, value in report["metadata"].items():
        print(f"  meta {key} = {value}")
    for s in report["streams"]:
        shape = "x".join(map(str, s["shape"])) or "scalar"
        print(f"  #{s['stream_id']} {s['name']} [{s['kind']} {s['dtype']} {shape}] "
              f"codec={s['codec']} packets={s['packets']} keyframes={s['keyframes']} "
              f"bytes={s['payload_bytes']}")
    return 0


# -- verify -------------------------------------------------------------------

def _max_abs_error(decoded, reference, dtype: str) -> float:
    if dtype == "utf8":
        return 0.0 if list(decoded) == list(reference) else float("inf")
    a, b = np.asarray(decoded), np.asarray(reference)
    if a.shape != b.shape:
        return float("inf")
    if a.size == 0:
        return 0.0
    if dtype in ("u8", "u16", "i32"):
        return float(np.abs(a.astype(np.int64) - b.astype(np.int64)).max())
    if dtype == "i64":
        if np.array_equal(a, b):
            return 0.0
        return float(np.abs(a.astype(np.float64) - b.astype(np.float64)).max())
    return float(np.abs(a.astype(np.float64) - b.astype(np.float64)).max())


def _verify_one(episode_path: Path, dump_dir: Path, tolerance: float) -> dict:
    decoded = load_episode(episode_path)
    reference, _ = dump_mod.read_dump(dump_dir)
    report = {"episode": str(episode_path), "reference": str(dump_dir),
              "streams": {}, "pass": True}
    names = set(decoded.streams) | set(reference.streams)
    for name in sorted(names):
        if name not in decoded.streams or name not in reference.streams:
            report["streams"][name] = {"error": "missing stream", "pass": False}
            report["pass"] = False
            continue
        mine, ref = decoded.streams[name], reference.streams[name]
        ts_equal = np.array_equal(np.asarray(mine.timestamps), np.asarray(ref.timestamps))
        err = _max_abs_error(mine.frames, ref.frames, mine.dtype)
        ok = ts_equal and err <= tolerance
        report["streams"][name] = {
            "max_abs_error": err, "timestamps_equal": bool(ts_equal), "pass": ok,
        }
        report["pass"] = report["pass"] and ok
    return report


def cmd_verify(args) -> int:
    src, reference = Path(args.src), Path(args.reference)
    episodes = _resolve_episodes(src)
    if len(episodes) == 1 and dump_mod.is_dump(reference):
        pairs = [(episodes[0], reference)]
    else:
        pairs = [(episode, reference / episode.stem) for episode in episodes]
    reports = [_verify_one(e, d, args.max_abs_error) for e, d in pairs]
    passed = all(r["pass"] for r in reports)
    summary = {"tolerance": args.max_abs_error, "pass": passed, "episodes": reports}
    worst = max(
        (s["max_abs_error"] for r in reports for s in r["streams"].values()
         if "max_abs_error" in s),
        default=0.0,
    )
    _emit(args, summary,
          f"{'PASS' if passed else 'FAIL'}: {len(reports)} episode(s), "
          f"max abs error {worst} (tolerance {args.max_abs_error})")
    return 0 if passed else 1


# -- bench --------------------------------------------------------------------

def _digest_episode(digest, episode):
    for name in sorted(episode.streams):
        data = episode.streams[name]
        digest.update(name.encode())
        digest.update(np.ascontiguousarray(data.timestamps, dtype="<u8").tobytes())
        if data.dtype == "utf8":
            for text in data.frames:
                digest.update(text.encode("utf-8"))
        else:
            digest.update(np.ascontiguousarray(data.frames).tobytes())


def cmd_bench(args) -> int:
    dataset = Path(args.dataset)
    episodes = _resolve_episodes(dataset)
    policy = _policy(args)
    if args.cold and policy is not None:
        cache_dir = Path(policy.cache_dir)
        if cache_dir.is_dir():
            for stale in cache_dir.glob(f"*{loader.CACHE_SUFFIX}"):
                stale.unlink()
        loader.manager_for(policy)._maps.clear()
    if args.warm and policy is not None:
        for episode in episodes:
            load_episode(episode, policy)

    total = args.batches * args.batch_size
    sequence = [episodes[k % len(episodes)] for k in range(total)]
    digest = hashlib.blake2b(digest_size=16)
    latencies = []
    executor = None
    if args.concurrency > 1:
        executor = make_executor(args.concurrency, use_processes=args.workers == "process")
    started = time.perf_counter()
    try:
        if args.prefetch > 0:
            iterator = prefetch_iter(sequence, policy, buffer=args.prefetch,
                                     workers=args.concurrency, executor=executor)
            for _ in range(args.batches):
                t0 = time.perf_counter()
                batch = [next(iterator) for _ in range(args.batch_size)]
                latencies.append((time.perf_counter() - t0) * 1e3)
                for episode in batch:
                    _digest_episode(digest, episode)
        else:
            for index in range(args.batches):
                chunk = sequence[index * args.batch_size:(index + 1) * args.batch_size]
                t0 = time.perf_counter()
                batch = batch_load(chunk, policy, concurrency=args.concurrency,
                                   executor=executor)
                latencies.append((time.perf_counter() - t0) * 1e3)
                for episode in batch:
                    _digest_episode(digest, episode)
    finally:
        if executor is not None:
            executor.shutdown()
    total_seconds = time.perf_counter() - started

    report = {
        "dataset": str(dataset),
        "episodes": len(episodes),
        "batches": args.batches,
        "batch_size": args.batch_size,
        "concurrency": args.concurrency,
        "workers": args.workers,
        "prefetch": args.prefetch,
        "mode": "cold" if args.cold else ("warm" if args.warm else "asis"),
        "cache": policy is not None,
        "latency_ms": latencies,
        "total_seconds": total_seconds,
        "throughput_eps": args.batch_size * args.batches / total_seconds,
        "content_digest": digest.hexdigest(),
    }
    if args.csv:
        with open(args.csv, "w") as out:
            out.write("batch_index,latency_ms\n")
            for index, latency in enumerate(latencies):
                out.write(f"{index},{latency:.3f}\n")
    _emit(args, report,
          f"{args.batches} batches x {args.batch_size} episodes: "
          f"{report['throughput_eps']:.1f} eps, "
          f"median latency {sorted(latencies)[len(latencies) // 2]:.1f} ms, "
          f"digest {report['content_digest'][:12]}")
    return 0


# -- stats --------------------------------------------------------------------

def _tree_bytes(path: Path) -> int:
    if path.is_file():
        return path.stat().st_size
    if path.is_dir():
        return sum(p.stat().st_size for p in path.rglob("*") if p.is_file())
    raise InvalidSpec(f"{path}: no such path")


def format_ratio(ratio: float) -> str:
    return f"{ratio:.1f}x" if ratio < 10 else f"{round(ratio):d}x"


def cmd_stats(args) -> int:
    entries = []
    for item in args.labels:
        label, _, path = item.partition("=")
        if not path:
            raise InvalidSpec(f"{item!r}: expected LABEL=PATH")
        entries.append((label, Path(path)))
    baseline_label = args.baseline or entries[0][0]
    sizes = {label: _tree_bytes(path) for label, path in entries}
    if baseline_label not in sizes:
        raise InvalidSpec(f"baseline {baseline_label!r} not among labels")
    baseline = sizes[baseline_label]
    ratios = {}
    for label, size in sizes.items():
        if size == 0:
            raise DivisionByZeroSize(f"{label}: zero bytes")
        ratios[label] = baseline / size
    report = {
        "baseline": baseline_label,
        "bytes": sizes,
        "ratio_vs_baseline": ratios,
        "ratio_labels": {label: format_ratio(r) for label, r in ratios.items()},
    }
    lines = [
        f"{label}: {sizes[label]} bytes ({report['ratio_labels'][label]} vs {baseline_label})"
        for label in sizes
    ]
    _emit(args, report, "\n".join(lines))
    return 0


# -- plumbing -----------------------------------------------------------------

def _emit(args, payload: dict, human: str):
    if getattr(args, "json", False):
        print(json.dumps(payload, indent=2))
    else:
        print(human)


def _global_flags(parser, suppress=False):
    d = argparse.SUPPRESS if suppress else None
    parser.add_argument("--seed", type=int, help="RNG seed for gen",
                        **({"default": d} if suppress else {"default": 0}))
    parser.add_argument("--cache-dir",
                        help="decode cache directory (default ./.rdm_cache)",
                        **({"default": d} if suppress else {"default": ".rdm_cache"}))
    parser.add_argument("--memory-budget", type=int,
                        help="decode cache memory budget in bytes",
                        **({"default": d} if suppress else {"default": 1 << 30}))
    parser.add_argument("--json", action="store_true",
                        help="machine-readable output",
                        **({"default": d} if suppress else {}))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rdm",
        description="Trajectory container tools: generate, convert, inspect, "
                    "verify, and benchmark .rdm datasets.",
    )
    _global_flags(parser)
    # The same flags are accepted after the subcommand; SUPPRESS keeps the
    # subparser from clobbering values given before it.
    shared = argparse.ArgumentParser(add_help=False)
    _global_flags(shared, suppress=True)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", parents=[shared], help="generate a synthetic dataset")
    p.add_argument("out_dir")
    p.add_argument("--episodes", type=int, default=20)
    p.add_argument("--frames", type=int, default=100)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--fps", type=float, default=30.0)
    p.add_argument("--action-hz", type=float, default=100.0)
    p.add_argument("--vision-codec", default="raw",
                   choices=["raw", "delta_ll", "delta_q"],
                   help="raw capture (default) or transcode in one step")
    p.add_argument("--keyframe-interval", type=int, default=10)
    p.add_argument("--quant-step", type=int, default=32)
    p.add_argument("--compressor", default="zlib", choices=["zlib", "none"])
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("convert", parents=[shared], help="container <-> tensor dump")
    p.add_argument("src")
    p.add_argument("dst")
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("transcode", parents=[shared], help="re-encode under different codecs")
    p.add_argument("src")
    p.add_argument("dst")
    p.add_argument("--vision-codec", default="delta_q",
                   choices=["raw", "delta_ll", "delta_q"])
    p.add_argument("--keyframe-interval", type=int, default=10)
    p.add_argument("--quant-step", type=int, default=32)
    p.add_argument("--compressor", default="zlib", choices=["zlib", "none"])
    p.set_defaults(func=cmd_transcode)

    p = sub.add_parser("inspect", parents=[shared], help="report header, streams, packets, cues")
    p.add_argument("src")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("verify", parents=[shared], help="compare a container against a dump")
    p.add_argument("src")
    p.add_argument("--reference", required=True)
    p.add_argument("--max-abs-error", type=float, default=0.0)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("bench", parents=[shared], help="measure batch loading throughput")
    p.add_argument("dataset")
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--batches", type=int, default=200)
    p.add_argument("--concurrency", type=int, default=1)
    mode = p.add_mutually_exclusive_group()
    mode.add_argument("--cold", action="store_true",
                      help="clear the cache dir before running")
    mode.add_argument("--warm", action="store_true",
                      help="pre-load every episode before timing")
    p.add_argument("--prefetch", type=int, default=50,
                   help="episodes of look-ahead (0 disables the prefetcher)")
    p.add_argument("--workers", default="process", choices=["process", "thread"],
                   help="worker pool kind when concurrency > 1")
    p.add_argument("--no-cache", action="store_true",
                   help="bypass the decode cache entirely")
    p.add_argument("--csv", help="write per-batch latencies to this CSV file")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("stats", parents=[shared], help="byte totals and ratios per format label")
    p.add_argument("labels", nargs="+", metavar="LABEL=PATH")
    p.add_argument("--baseline", help="label to use as the ratio baseline")
    p.set_defaults(func=cmd_stats)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ContainerError, codecs.CodecError, recorder_mod.RecorderError,
            loader.LoaderError, dump_mod.CorruptDump, InvalidSpec,
            DivisionByZeroSize, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
