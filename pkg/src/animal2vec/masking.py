"""Span masking of embedding frames, multi-mask clones and mask statistics."""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from . import ShapeError


@dataclass
class MaskConfig:
    p: float = 0.15
    M: int = 2
    clones: int = 8
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.p <= 1.0:
            raise ValueError(f"mask probability must lie in [0, 1], got {self.p}")
        if self.M < 1:
            raise ValueError(f"mask length must be >= 1, got {self.M}")
        if self.clones < 1:
            raise ValueError(f"clone count must be >= 1, got {self.clones}")

    @property
    def expected_coverage(self) -> float:
        return 1.0 - (1.0 - self.p) ** self.M


@dataclass
class MaskPlan:
    masks: np.ndarray  # (clones, T) bool, True = masked
    starts: list = field(default_factory=list, repr=False)

    @property
    def coverage(self) -> float:
        return float(self.masks.mean()) if self.masks.size else 0.0

    @property
    def union_coverage(self) -> float:
        """Fraction of frames masked in at least one clone."""
        return float(self.masks.any(axis=0).mean()) if self.masks.size else 0.0


def spans_from_starts(starts: np.ndarray, M: int) -> np.ndarray:
    """Union of spans [s, s + M) truncated at the end of the sequence."""
    starts = np.asarray(starts, dtype=bool)
    counts = np.convolve(starts.astype(np.int32), np.ones(M, dtype=np.int32))[: len(starts)]
    return counts > 0


def _draw(T: int, config: MaskConfig, rng: np.random.Generator):
    starts = rng.random(T) < config.p
    return starts, spans_from_starts(starts, config.M)


def sample_mask(T: int, config: MaskConfig, seed: int | None = None) -> MaskPlan:
    """Independent Bernoulli(p) span starts per clone; spans of M frames, unioned.

    A clone that comes out empty is redrawn once. ``seed`` overrides ``config.seed``.
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    seq = np.random.SeedSequence(config.seed if seed is None else seed)
    masks = np.zeros((config.clones, T), dtype=bool)
    all_starts = []
    for i, child in enumerate(seq.spawn(config.clones)):
        rng = np.random.default_rng(child)
        starts, mask = _draw(T, config, rng)
        if not mask.any() and config.p > 0:
            starts, mask = _draw(T, config, rng)
        masks[i] = mask
        all_starts.append(np.flatnonzero(starts))
    return MaskPlan(masks, all_starts)


def run_lengths(mask: np.ndarray) -> np.ndarray:
    """Lengths of maximal runs of True in a 1-D boolean array."""
    m = np.concatenate([[False], np.asarray(mask, dtype=bool), [False]])
    edges = np.flatnonzero(np.diff(m.astype(np.int8)))
    return edges[1::2] - edges[::2]


def mask_statistics(plan: MaskPlan, frame_ms: float):
    """Per-clone coverage, histogram of masked run lengths, and the modal run length in ms."""
    if plan.masks.size == 0:
        raise ValueError("empty mask plan")
    hist: Counter = Counter()
    for row in plan.masks:
        hist.update(run_lengths(row).tolist())
    hist = dict(sorted(hist.items()))
    mode_ms = 0.0
    if hist:
        mode = max(hist, key=lambda k: (hist[k], -k))
        mode_ms = mode * frame_ms
    return plan.coverage, hist, mode_ms


def apply_mask_student(frames, mask):
    """Keep only unmasked rows. Returns (kept rows, their original indices)."""
    mask = np.asarray(mask, dtype=bool)
    if len(mask) != len(frames):
        raise ShapeError(f"mask of length {len(mask)} for {len(frames)} frames")
    index_map = np.flatnonzero(~mask)
    if len(index_map) == 0:
        raise ShapeError("every frame is masked; nothing left for the student")
    return frames[index_map], index_map.tolist()


def scatter_back(kept, index_map, T: int):
    """Place rows back at their original positions in a zero-filled length-T array."""
    out = np.zeros((T,) + tuple(np.shape(kept)[1:]), dtype=np.asarray(kept).dtype)
    out[np.asarray(index_map, dtype=int)] = kept
    return out


def fill_masked_noise(frames: np.ndarray, mask, seed: int) -> np.ndarray:
    """Replace masked rows with i.i.d. standard normal draws; unmasked rows are untouched."""
    mask = np.asarray(mask, dtype=bool)
    if len(mask) != len(frames):
        raise ShapeError(f"mask of length {len(mask)} for {len(frames)} frames")
    out = np.array(frames, copy=True)
    rng = np.random.default_rng(seed)
    n = int(mask.sum())
    if n:
        out[mask] = rng.standard_normal((n,) + out.shape[1:]).astype(out.dtype, copy=False)
    return out
