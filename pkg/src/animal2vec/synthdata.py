"""Deterministic synthetic corpus: sparse band-limited calls in impulsive broadband noise."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .corpus import AudioClip, ClassTable, LabelEvent, dump_manifest, save_clip


@dataclass
class CallClass:
    name: str
    band_hz: tuple[float, float]
    duration_ms: tuple[float, float]
    rate: float = 1.0  # calls per clip; fractional part is a Bernoulli extra call


@dataclass
class SynthSpec:
    n_clips: int = 200
    clip_s: float = 5.0
    sample_rate: int = 8000
    classes: list = field(default_factory=lambda: [
        # at least 80 ms so a 100 ms pooled trace can cross 0.5
        CallClass("low", (800.0, 900.0), (80.0, 120.0)),
        CallClass("mid", (950.0, 1050.0), (100.0, 140.0)),
        CallClass("high", (1100.0, 1200.0), (120.0, 180.0)),
    ])
    background_std: float = 0.01
    burst_rate_hz: float = 2.0
    burst_ms: tuple[float, float] = (0.5, 3.0)
    burst_amplitude: tuple[float, float] = (0.05, 0.3)
    call_amplitude: tuple[float, float] = (0.15, 0.4)
    min_gap_s: float = 0.05
    seed: int = 0

    def table(self) -> ClassTable:
        return ClassTable([c.name for c in self.classes])

    def validate(self):
        nyquist = self.sample_rate / 2
        for c in self.classes:
            lo, hi = c.band_hz
            if not 0 < lo <= hi < nyquist:
                raise ValueError(f"band {c.band_hz} of {c.name!r} not inside (0, {nyquist})")
            if c.duration_ms[0] <= 0 or c.duration_ms[1] < c.duration_ms[0]:
                raise ValueError(f"bad duration range {c.duration_ms} for {c.name!r}")
            if c.duration_ms[1] / 1000 > self.clip_s:
                raise ValueError(f"calls of {c.name!r} longer than the clip")
        bands = [tuple(c.band_hz) for c in self.classes]
        if len(set(bands)) != len(bands):
            warnings.warn("two classes share an identical band; they are not separable by "
                          "frequency", stacklevel=2)


def _call(duration_s: float, band, amplitude: float, sr: int, rng) -> np.ndarray:
    n = max(2, int(round(duration_s * sr)))
    t = np.arange(n) / sr
    f0, f1 = band if rng.random() < 0.5 else band[::-1]
    phase = 2 * np.pi * (f0 * t + 0.5 * (f1 - f0) / duration_s * t ** 2)
    return amplitude * np.hanning(n) * np.sin(phase + rng.uniform(0, 2 * np.pi))


def _place(durations, clip_s: float, gap: float, rng, tries: int = 200):
    """Random non-overlapping onsets with at least ``gap`` seconds between calls."""
    placed = []
    for d in durations:
        for _ in range(tries):
            on = rng.uniform(gap, clip_s - gap - d)
            if all(s is None or on + d + gap <= s[0] or on >= s[1] + gap for s in placed):
                placed.append((on, on + d))
                break
        else:
            placed.append(None)  # no room left; the call is dropped
    return placed


def generate_clip(spec: SynthSpec, index: int, rng: np.random.Generator):
    sr = spec.sample_rate
    n = int(round(spec.clip_s * sr))
    x = rng.normal(0.0, spec.background_std, n)

    n_bursts = rng.poisson(spec.burst_rate_hz * spec.clip_s)
    for _ in range(n_bursts):
        length = max(1, int(round(rng.uniform(*spec.burst_ms) / 1000 * sr)))
        start = int(rng.integers(0, max(1, n - length)))
        env = np.exp(-np.arange(length) / max(1.0, length / 4))
        x[start:start + length] += rng.uniform(*spec.burst_amplitude) * env * \
            rng.standard_normal(length)

    wanted = []
    for cls_id, c in enumerate(spec.classes):
        count = int(np.floor(c.rate)) + int(rng.random() < c.rate - np.floor(c.rate))
        for _ in range(count):
            wanted.append((cls_id, rng.uniform(*c.duration_ms) / 1000))
    rng.shuffle(wanted)
    spans = _place([d for _, d in wanted], spec.clip_s, spec.min_gap_s, rng)
    events = []
    for (cls_id, d), span in zip(wanted, spans):
        if span is None:
            continue
        call = _call(d, spec.classes[cls_id].band_hz, rng.uniform(*spec.call_amplitude), sr, rng)
        start = int(round(span[0] * sr))
        call = call[: n - start]
        x[start:start + len(call)] += call
        onset = round(start / sr, 6)
        offset = round((start + len(call)) / sr, 6)
        events.append(LabelEvent(cls_id, onset, offset, False))
    x = np.clip(x, -1.0, 32767 / 32768)
    # quantize now so the in-memory clip equals what a WAV round trip returns
    x = np.round(x * 32768.0) / 32768.0
    events.sort(key=LabelEvent.sort_key)
    return AudioClip(f"clip{index:05d}", x, sr), events


def generate(spec: SynthSpec, out_dir=None):
    """Build the corpus; with ``out_dir`` also write audio/*.wav, labels.csv, classes.txt.

    Returns (clips, events by clip id, class table).
    """
    spec.validate()
    children = np.random.SeedSequence(spec.seed).spawn(spec.n_clips)
    clips, events = [], {}
    for i, child in enumerate(children):
        clip, evs = generate_clip(spec, i, np.random.default_rng(child))
        clips.append(clip)
        events[clip.id] = evs
    table = spec.table()
    if out_dir is not None:
        out = Path(out_dir)
        (out / "audio").mkdir(parents=True, exist_ok=True)
        for clip in clips:
            path = out / "audio" / f"{clip.id}.wav"
            save_clip(clip, path)
            clip.source_path = str(path)
        (out / "labels.csv").write_text(dump_manifest(events, table), encoding="utf-8")
        (out / "classes.txt").write_text(table.dumps(), encoding="utf-8")
    return clips, events, table


def labeled_fraction(clips, events) -> float:
    total = sum(c.duration_s for c in clips)
    labeled = sum(e.offset_s - e.onset_s for evs in events.values() for e in evs)
    return labeled / total
