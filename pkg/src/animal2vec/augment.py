"""Between-classes-learning mixing with A-weighted short-window levels."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ShapeError

SILENCE_DB = -120.0


@dataclass
class MixConfig:
    input_strength: float = 0.5
    target_strength: float = 0.0
    token_prob: float = 1.0
    window_s: float = 0.05


def _a_response(freqs):
    f2 = np.asarray(freqs, dtype=np.float64) ** 2
    num = (12194.0 ** 2) * f2 ** 2
    den = ((f2 + 20.6 ** 2) * np.sqrt((f2 + 107.7 ** 2) * (f2 + 737.9 ** 2))
           * (f2 + 12194.0 ** 2))
    return num / den


def a_weighting_db(freqs) -> np.ndarray:
    """IEC 61672 A-weighting gain in dB, normalized to 0 dB at 1 kHz."""
    with np.errstate(divide="ignore"):
        return 20.0 * np.log10(_a_response(freqs) / _a_response(1000.0))


def a_weighted_level(segment, sample_rate: int, window_s: float = 0.05) -> float:
    """Maximum A-weighted RMS level (dB re full scale RMS) over non-overlapping windows.

    Silence returns the -120 dB floor.
    """
    x = np.asarray(segment, dtype=np.float64)
    win = max(1, int(round(window_s * sample_rate)))
    if len(x) < win:
        raise ShapeError(f"segment of {len(x)} samples shorter than one {win}-sample window")
    n_win = len(x) // win
    frames = x[: n_win * win].reshape(n_win, win)
    spec = np.fft.rfft(frames, axis=1)
    gain = 10.0 ** (a_weighting_db(np.fft.rfftfreq(win, 1.0 / sample_rate)) / 20.0)
    spec = spec * gain
    # Parseval: mean square of the weighted window
    power = np.abs(spec) ** 2
    power[:, 1:] *= 2.0
    if win % 2 == 0:
        power[:, -1] /= 2.0
    ms = power.sum(axis=1) / win ** 2
    peak = ms.max()
    if peak <= 0:
        return SILENCE_DB
    return max(10.0 * np.log10(peak), SILENCE_DB)


def mix_coefficient(r: float, g1: float, g2: float) -> float:
    return 1.0 / (1.0 + 10.0 ** ((g1 - g2) / 20.0) * (1.0 - r) / r)


def bc_mix(x1, x2, r: float, g1: float, g2: float) -> np.ndarray:
    """Level-aware mix of two waveforms, renormalized to preserve power."""
    x1 = np.asarray(x1)
    x2 = np.asarray(x2)
    if x1.shape != x2.shape:
        raise ShapeError(f"cannot mix shapes {x1.shape} and {x2.shape}")
    if r >= 1.0:
        return x1.copy()
    if r <= 0.0:
        return x2.copy()
    pq = mix_coefficient(r, g1, g2)
    return (pq * x1 + (1.0 - pq) * x2) / np.sqrt(pq ** 2 + (1.0 - pq) ** 2)


def mix_targets(y1, y2, r: float, strength: float) -> np.ndarray:
    y1 = np.asarray(y1, dtype=np.float64)
    y2 = np.asarray(y2, dtype=np.float64)
    if y1.shape != y2.shape:
        raise ShapeError(f"cannot mix target shapes {y1.shape} and {y2.shape}")
    return (1.0 - strength) * y1 + strength * (r * y1 + (1.0 - r) * y2)


def bcl_batch(waves: np.ndarray, targets, config: MixConfig, sample_rate: int,
              rng: np.random.Generator):
    """Mix each sample of a batch with a random other sample.

    A sample is mixed with probability ``token_prob``. The mixed waveform is blended with
    the original by ``input_strength``; targets (if given) are mixed with the same ratio
    scaled by ``target_strength``.
    Returns (waves, targets) as new arrays.
    """
    waves = np.asarray(waves, dtype=np.float64)
    n = len(waves)
    out_w = waves.copy()
    out_t = None if targets is None else np.asarray(targets, dtype=np.float64).copy()
    if n < 2 or config.token_prob <= 0:
        return out_w, out_t
    levels = [a_weighted_level(w, sample_rate, config.window_s) for w in waves]
    for i in range(n):
        if rng.random() >= config.token_prob:
            continue
        j = int(rng.integers(n - 1))
        j = j + 1 if j >= i else j
        r = float(rng.uniform(0.0, 1.0))
        r = min(max(r, 1e-6), 1 - 1e-6)
        mixed = bc_mix(waves[i], waves[j], r, levels[i], levels[j])
        s = config.input_strength
        out_w[i] = (1.0 - s) * waves[i] + s * mixed
        if out_t is not None:
            out_t[i] = mix_targets(targets[i], targets[j], r, config.target_strength)
    return out_w, out_t
