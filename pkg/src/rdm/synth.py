"""Synthetic episodes: smooth moving video, action random walks, one
instruction string.  Deterministic for a given seed, so generated datasets
are byte-identical across runs."""

from __future__ import annotations

import numpy as np

from .recorder import Recorder

NS = 1_000_000_000

WORDS = (
    "pick", "place", "push", "stack", "fold", "open", "close", "wipe",
    "the tiger", "the mug", "the towel", "the drawer", "the lid", "the block",
)


def smooth_field(rng: np.random.Generator, height: int, width: int,
                 levels: int = 32) -> np.ndarray:
    """A low-frequency random field in [0, 255]: a few 2-D sinusoids,
    posterized to `levels` so the scene has flat regions like real footage."""
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    field = np.zeros((height, width))
    for _ in range(4):
        fy, fx = rng.uniform(0.4, 1.5, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        field += rng.uniform(0.3, 1.0) * np.sin(
            2 * np.pi * (fy * ys / height + fx * xs / width) + phase
        )
    field -= field.min()
    field *= 255.0 / max(field.max(), 1e-9)
    step = 256.0 / levels
    return np.clip(np.round(field / step) * step, 0, 255)


def video_frames(rng: np.random.Generator, n_frames: int, height: int, width: int,
                 max_shift: int = 2) -> np.ndarray:
    """Moving 2-D pattern, per-frame translation bounded by max_shift px."""
    channels = [smooth_field(rng, height, width) for _ in range(3)]
    base = np.stack(channels, axis=-1).astype(np.uint8)
    frames = np.empty((n_frames, height, width, 3), dtype=np.uint8)
    dy = dx = 0
    for i in range(n_frames):
        frames[i] = np.roll(base, (dy, dx), axis=(0, 1))
        dy += int(rng.integers(-max_shift, max_shift + 1))
        dx += int(rng.integers(-max_shift, max_shift + 1))
    return frames


def action_walk(rng: np.random.Generator, n_samples: int, dims: int = 7) -> np.ndarray:
    """Clipped random walk in [-1, 1]^dims."""
    steps = rng.normal(scale=0.05, size=(n_samples, dims))
    return np.clip(np.cumsum(steps, axis=0), -1.0, 1.0).astype(np.float32)


def instruction(rng: np.random.Generator) -> str:
    verb = WORDS[int(rng.integers(0, 8))]
    noun = WORDS[8 + int(rng.integers(0, 6))]
    return f"{verb} {noun}"


def capture_episode(path, seed: int, n_frames: int = 100, height: int = 64,
                    width: int = 64, fps: float = 30.0, action_hz: float = 100.0,
                    metadata=()) -> str:
    """Record one synthetic raw episode at `path` and finalize it."""
    rng = np.random.default_rng(seed)
    frames = video_frames(rng, n_frames, height, width)
    duration_ns = int(n_frames * NS / fps)
    n_actions = max(1, int(duration_ns * action_hz / NS))
    actions = action_walk(rng, n_actions)

    recorder = Recorder(path, metadata=tuple(metadata) + (("seed", str(seed)),))
    recorder.add("instruction", instruction(rng), timestamp_ns=0)
    for i in range(n_frames):
        recorder.add("cam0", frames[i], timestamp_ns=int(i * NS / fps))
    for i in range(n_actions):
        recorder.add("action", actions[i], timestamp_ns=int(i * NS / action_hz))
    recorder.close()
    return str(path)
