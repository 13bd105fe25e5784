"""Audio and label ingestion, resampling, frame targets and data splits."""
from __future__ import annotations

import csv
import io
import math
import wave
from collections import Counter, defaultdict
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import FormatError, LabelError, UnsupportedFormatError

MANIFEST_HEADER = ("clip_id", "class", "onset_s", "offset_s", "focal")


@dataclass
class AudioClip:
    id: str
    samples: np.ndarray
    sample_rate: int
    source_path: str = ""

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass(frozen=True)
class LabelEvent:
    class_id: int
    onset_s: float
    offset_s: float
    focal: bool = False

    def __post_init__(self):
        if not self.offset_s > self.onset_s:
            raise LabelError(f"offset {self.offset_s} must exceed onset {self.onset_s}")
        if self.onset_s < 0:
            raise LabelError(f"negative onset {self.onset_s}")

    def sort_key(self):
        return (self.onset_s, self.offset_s, self.class_id, self.focal)


@dataclass
class ClassTable:
    names: list[str]
    focal_index: int | None = None

    def __post_init__(self):
        if not self.names or any(not n for n in self.names):
            raise LabelError("class names must be non-empty")
        if len(set(self.names)) != len(self.names):
            raise LabelError("class names must be unique")
        if self.focal_index is not None and not 0 <= self.focal_index < len(self.names):
            raise LabelError(f"focal index {self.focal_index} out of range")

    def __len__(self):
        return len(self.names)

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise LabelError(f"unknown class name {name!r}") from None

    @property
    def scored_classes(self) -> list[int]:
        """Class indices that enter micro/macro averages (everything but the focal class)."""
        return [i for i in range(len(self.names)) if i != self.focal_index]

    @classmethod
    def load(cls, path) -> "ClassTable":
        return cls.parse(Path(path).read_text(encoding="utf-8"))

    @classmethod
    def parse(cls, text: str) -> "ClassTable":
        names, focal = [], None
        for line in text.splitlines():
            line = line.strip()
            if not line:
                continue
            if line.startswith("#focal="):
                focal = line[len("#focal="):].strip()
                continue
            if line.startswith("#"):
                continue
            names.append(line)
        table = cls(names)
        if focal is not None:
            table.focal_index = table.index(focal)
        return table

    def dumps(self) -> str:
        lines = list(self.names)
        if self.focal_index is not None:
            lines.append(f"#focal={self.names[self.focal_index]}")
        return "\n".join(lines) + "\n"


@dataclass
class FrameTargets:
    frames: np.ndarray  # (T, C) in {0, 1}
    frame_rate: float


@dataclass
class SplitPlan:
    fold_assignments: dict[str, int]
    k: int
    fraction: float = 1.0

    def fold(self, i: int) -> list[str]:
        return [cid for cid, f in self.fold_assignments.items() if f == i]

    def train_ids(self, eval_fold: int) -> list[str]:
        return [cid for cid, f in self.fold_assignments.items() if f != eval_fold]


# ---------------------------------------------------------------------------
# audio


def load_clip(path) -> AudioClip:
    """Decode a mono PCM16 RIFF/WAVE file into floats in [-1, 1)."""
    path = Path(path)
    try:
        with wave.open(str(path), "rb") as wf:
            n_channels = wf.getnchannels()
            width = wf.getsampwidth()
            rate = wf.getframerate()
            n = wf.getnframes()
            raw = wf.readframes(n)
    except wave.Error as exc:
        msg = str(exc)
        if "unknown format" in msg:
            raise UnsupportedFormatError(f"{path}: {msg}") from exc
        raise FormatError(f"{path}: {msg}") from exc
    except EOFError as exc:
        raise FormatError(f"{path}: truncated header") from exc
    if n_channels != 1:
        raise UnsupportedFormatError(f"{path}: {n_channels} channels, expected mono")
    if width != 2:
        raise UnsupportedFormatError(f"{path}: {8 * width}-bit samples, expected 16-bit PCM")
    if rate <= 0:
        raise FormatError(f"{path}: invalid sample rate {rate}")
    pcm = np.frombuffer(raw, dtype="<i2")
    return AudioClip(path.stem, pcm.astype(np.float64) / 32768.0, rate, str(path))


def save_clip(clip: AudioClip, path) -> None:
    pcm = np.clip(np.round(np.asarray(clip.samples) * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(int(clip.sample_rate))
        wf.writeframes(pcm.tobytes())


KAISER_BETA = 14.769656459379492
FILTER_SUPPORT_S = 0.008
ROLLOFF = 0.99


def _resample_kernels(orig: int, new: int, zero_crossings: int, half_width: int, beta: float):
    """Polyphase windowed-sinc kernels; one row per output phase."""
    base = min(orig, new) * ROLLOFF
    idx = np.arange(-half_width, half_width + orig, dtype=np.float64)[None, :] / orig
    t = -np.arange(new, dtype=np.float64)[:, None] / new + idx
    t = np.clip(t * base, -zero_crossings, zero_crossings)
    window = np.i0(beta * np.sqrt(1.0 - (t / zero_crossings) ** 2)) / np.i0(beta)
    kernels = np.sinc(t) * window * (base / orig)
    return kernels


def resample(clip: AudioClip, target_rate: int) -> AudioClip:
    """Kaiser-windowed sinc resampling; output length is round(len * target / source)."""
    if target_rate <= 0:
        raise ValueError(f"target rate must be positive, got {target_rate}")
    if target_rate == clip.sample_rate:
        return AudioClip(clip.id, clip.samples.copy(), clip.sample_rate, clip.source_path)
    ratio = Fraction(int(target_rate), int(clip.sample_rate))
    new, orig = ratio.numerator, ratio.denominator
    # zero crossings per side of the prototype filter; 8 ms total support at the lower rate
    zero_crossings = max(1, int(round(FILTER_SUPPORT_S / 2 * min(clip.sample_rate, target_rate))))
    half_width = int(math.ceil(zero_crossings * orig / (min(orig, new) * ROLLOFF)))
    kernels = _resample_kernels(orig, new, zero_crossings, half_width, KAISER_BETA)
    x = np.asarray(clip.samples, dtype=np.float64)
    n_out = int(round(len(x) * target_rate / clip.sample_rate))
    n_blocks = -(-n_out // new)
    width = kernels.shape[1]
    padded = np.zeros(half_width + n_blocks * orig + width, dtype=np.float64)
    padded[half_width:half_width + len(x)] = x
    frames = np.lib.stride_tricks.sliding_window_view(padded, width)[::orig][:n_blocks]
    out = (frames @ kernels.T).reshape(-1)[:n_out]
    return AudioClip(clip.id, out, int(target_rate), clip.source_path)


# ---------------------------------------------------------------------------
# labels


def load_labels(path, table: ClassTable, clip_id: str | None = None) -> list[LabelEvent]:
    """Parse a label manifest. With ``clip_id`` only that clip's rows are returned."""
    return [ev for cid, ev in _read_manifest(Path(path), table) if clip_id is None or cid == clip_id]


def load_manifest(path, table: ClassTable) -> dict[str, list[LabelEvent]]:
    out: dict[str, list[LabelEvent]] = defaultdict(list)
    for cid, ev in _read_manifest(Path(path), table):
        out[cid].append(ev)
    return dict(out)


def _read_manifest(path: Path, table: ClassTable):
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return rows
        if tuple(h.strip() for h in header) != MANIFEST_HEADER:
            raise LabelError(f"{path}: bad header {header!r}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 5:
                raise LabelError(f"{path}:{lineno}: expected 5 fields, got {len(row)}")
            cid, name, onset, offset, focal = (c.strip() for c in row)
            try:
                class_id = table.index(name)
            except LabelError as exc:
                raise LabelError(f"{path}:{lineno}: {exc}") from None
            try:
                on, off = float(onset), float(offset)
            except ValueError:
                raise LabelError(f"{path}:{lineno}: non-numeric time") from None
            if focal not in ("0", "1"):
                raise LabelError(f"{path}:{lineno}: focal must be 0 or 1, got {focal!r}")
            if not off > on:
                raise LabelError(f"{path}:{lineno}: offset {off} <= onset {on}")
            rows.append((cid, LabelEvent(class_id, on, off, focal == "1")))
    rows.sort(key=lambda r: (r[0], r[1].sort_key()))
    return rows


def dump_manifest(events: Mapping[str, Iterable[LabelEvent]], table: ClassTable) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(MANIFEST_HEADER)
    for cid in events:
        for ev in sorted(events[cid], key=LabelEvent.sort_key):
            writer.writerow([cid, table.names[ev.class_id], f"{ev.onset_s:.6f}",
                             f"{ev.offset_s:.6f}", int(ev.focal)])
    return buf.getvalue()


def frame_targets(events: Sequence[LabelEvent], duration_s: float, frame_rate: float,
                  table: ClassTable, n_frames: int | None = None,
                  offset_s: float = 0.0) -> FrameTargets:
    """Rasterize interval labels: frame t is on for class c iff its center lies in an event.

    Frame centers sit at ``offset_s + (t + 0.5) / frame_rate``. ``n_frames`` defaults to
    ``round(duration_s * frame_rate)``; the offset lets the grid follow a model whose
    output frames are shifted by half a receptive field.
    """
    if frame_rate <= 0:
        raise ValueError(f"frame rate must be positive, got {frame_rate}")
    if n_frames is None:
        n_frames = int(round(duration_s * frame_rate))
    out = np.zeros((n_frames, len(table)), dtype=np.float32)
    centers = offset_s + (np.arange(n_frames) + 0.5) / frame_rate
    tol = 1e-9
    for ev in events:
        if ev.onset_s < -tol or ev.offset_s > duration_s + tol:
            raise LabelError(f"event [{ev.onset_s}, {ev.offset_s}] outside clip of {duration_s} s")
        inside = (centers >= ev.onset_s) & (centers < ev.offset_s)
        out[inside, ev.class_id] = 1.0
        if ev.focal and table.focal_index is not None:
            out[inside, table.focal_index] = 1.0
    return FrameTargets(out, frame_rate)


# ---------------------------------------------------------------------------
# splits


def _label_set(item) -> Counter:
    if isinstance(item, FrameTargets):
        return Counter(np.flatnonzero(item.frames.any(axis=0)).tolist())
    counts = Counter()
    for x in item:
        counts[x.class_id if isinstance(x, LabelEvent) else int(x)] += 1
    return counts


def stratified_kfold(clips: Sequence[tuple[str, object]], k: int, seed: int) -> SplitPlan:
    """Iterative stratification (rarest label first) of multi-label clips into k folds.

    ``clips`` pairs each id with its labels: a FrameTargets, a list of LabelEvent, or an
    iterable of class ids. Only label presence matters, not multiplicity.
    """
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    if k > len(clips):
        raise ValueError(f"k={k} exceeds the number of clips ({len(clips)})")
    rng = np.random.default_rng(seed)
    ids = [cid for cid, _ in clips]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate clip ids")
    labels = {cid: set(_label_set(item)) for cid, item in clips}

    n = len(ids)
    fold_sizes = np.full(k, n // k, dtype=float)
    fold_sizes[: n % k] += 1
    desired = fold_sizes.copy()
    all_labels = sorted(set().union(*labels.values())) if labels else []
    label_totals = Counter(lab for s in labels.values() for lab in s)
    desired_per_label = {lab: label_totals[lab] * fold_sizes / n for lab in all_labels}

    unassigned = {cid: labels[cid] for cid in ids}
    order = list(ids)
    assignments: dict[str, int] = {}

    def pick(candidates: np.ndarray) -> int:
        best = candidates[desired[candidates] == desired[candidates].max()]
        return int(rng.choice(best)) if len(best) > 1 else int(best[0])

    while unassigned:
        remaining = Counter(lab for s in unassigned.values() for lab in s)
        if not remaining:
            break
        min_count = min(remaining.values())
        rarest = sorted(lab for lab, c in remaining.items() if c == min_count)
        lab = rarest[int(rng.integers(len(rarest)))] if len(rarest) > 1 else rarest[0]
        members = [cid for cid in order if cid in unassigned and lab in unassigned[cid]]
        rng.shuffle(members)
        for cid in members:
            want = desired_per_label[lab]
            cand = np.flatnonzero(want == want.max())
            f = pick(cand)
            assignments[cid] = f
            desired[f] -= 1
            for other in unassigned[cid]:
                desired_per_label[other][f] -= 1
            del unassigned[cid]

    rest = [cid for cid in order if cid in unassigned]
    rng.shuffle(rest)
    for cid in rest:
        f = pick(np.arange(k))
        assignments[cid] = f
        desired[f] -= 1
    return SplitPlan({cid: assignments[cid] for cid in ids}, k)


def fewshot_subsample(plan: SplitPlan | None, train_fold_ids: Sequence[str], fraction: float,
                      seed: int, labels: Mapping[str, object] | None = None) -> list[str]:
    """Stratified subset of a training split holding about ``fraction`` of its clips.

    Each clip is grouped under its rarest label (clips without labels form their own
    group). Group quotas use floor plus largest remainder, and every nonempty group keeps
    at least one clip, so the result can exceed round(fraction * N) by a few clips.
    The evaluation fold recorded in ``plan`` is never touched.
    """
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    ids = list(train_fold_ids)
    if fraction == 1.0:
        return ids
    rng = np.random.default_rng(seed)
    sets = {cid: set(_label_set(labels[cid])) if labels is not None else set() for cid in ids}
    freq = Counter(lab for s in sets.values() for lab in s)
    groups: dict[object, list[str]] = defaultdict(list)
    for cid in ids:
        s = sets[cid]
        key = min(s, key=lambda lab: (freq[lab], lab)) if s else None
        groups[key].append(cid)
    keys = sorted(groups, key=lambda g: (g is None, -1 if g is None else g))

    target = int(round(fraction * len(ids)))
    exact = {g: fraction * len(groups[g]) for g in keys}
    quota = {g: int(math.floor(exact[g])) for g in keys}
    leftover = target - sum(quota.values())
    tiebreak = rng.random(len(keys))
    by_remainder = sorted(range(len(keys)), key=lambda i: (-(exact[keys[i]] - quota[keys[i]]),
                                                             tiebreak[i]))
    for i in by_remainder[:max(leftover, 0)]:
        quota[keys[i]] += 1
    for g in keys:
        if g is not None:
            quota[g] = max(quota[g], 1)

    chosen: set[str] = set()
    for g in keys:
        members = sorted(groups[g])
        take = rng.permutation(len(members))[: min(quota[g], len(members))]
        chosen.update(members[i] for i in take)
    if not chosen:
        raise ValueError(f"fraction {fraction} of {len(ids)} clips leaves an empty subset")
    return [cid for cid in ids if cid in chosen]
