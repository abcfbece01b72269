"""Attention masks and model-delay accounting for the streaming decoder.

Text self-attention is banded over token positions; cross-attention and
audio self-attention are banded over audio frames.  A ``True`` entry means the
query may attend to the key.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

UNBOUNDED = None


@dataclass(frozen=True)
class MaskSpec:
    """Window of ``left`` past and ``right`` future keys around a query.

    ``left=None`` means unbounded history.  ``right`` is always finite; the
    offline decoder is a right context at least as long as the sequence.
    """
    left: Optional[int] = UNBOUNDED
    right: int = 0

    def __post_init__(self):
        if self.right < 0 or (self.left is not None and self.left < 0):
            raise ValueError(f"mask context must be non-negative: {self}")


def _window_mask(centers: np.ndarray, num_keys: int, spec: MaskSpec) -> np.ndarray:
    keys = np.arange(num_keys)[None, :]
    c = np.asarray(centers)[:, None]
    allowed = keys <= c + spec.right
    if spec.left is not None:
        allowed &= keys >= c - spec.left
    return allowed


def band_self_mask(n: int, spec: MaskSpec) -> np.ndarray:
    if n < 1:
        raise ValueError("mask needs at least one position")
    return _window_mask(np.arange(n), n, spec)


def time_aligned_cross_mask(times: Sequence[int], audio_len: int, spec: MaskSpec) -> np.ndarray:
    """Row ``i`` allows audio frames within ``spec`` of ``times[i]``."""
    times = np.asarray(times)
    if times.size and (times.min() < 0 or times.max() >= audio_len):
        raise ValueError("timestamps must lie in [0, audio_len)")
    return _window_mask(times, audio_len, spec)


@dataclass(frozen=True)
class DelayConfig:
    layers: int
    right_per_layer: int
    frame_size: float  # seconds
    audio_self_attention: bool = True
    steps: int = 1
    # False drops the audio self-attention of the bottom layer.
    bottom_audio_sa: bool = True

    def __post_init__(self):
        if self.layers < 1 or self.right_per_layer < 0 or self.frame_size <= 0 or self.steps < 1:
            raise ValueError(f"invalid delay config: {self}")

    @property
    def effective_depth(self) -> int:
        if self.audio_self_attention and self.bottom_audio_sa:
            return self.layers + 1
        return self.layers


def receptive_bound(cfg: DelayConfig) -> int:
    """Future audio frames, relative to a query's timestamp, visible in one step."""
    return cfg.effective_depth * cfg.right_per_layer


def model_delay(cfg: DelayConfig) -> float:
    """Per-refinement-step delay in seconds."""
    return receptive_bound(cfg) * cfg.frame_size


def total_delay(cfg: DelayConfig) -> float:
    return cfg.steps * model_delay(cfg)


def render_mask(mask: np.ndarray) -> str:
    """ASCII grid: one row per query, ``#`` allowed and ``.`` disallowed."""
    return "\n".join("".join("#" if v else "." for v in row) for row in np.asarray(mask, bool))


def parse_mask(text: str) -> np.ndarray:
    rows = [ln.strip() for ln in text.strip().splitlines()]
    return np.array([[c == "#" for c in row] for row in rows], dtype=bool)
