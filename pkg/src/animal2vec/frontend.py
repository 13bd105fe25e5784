"""Raw-waveform feature extractor: learnable sinc filterbank, PSwish, strided conv stack."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import ShapeError

MEERKAT_LAYOUT = ((512, 10, 5), (512, 3, 2), (512, 3, 2), (512, 3, 2),
                  (512, 3, 1), (512, 2, 1), (512, 2, 1))
SPECTRAL_RESOLUTION_HZ = 126
CUTOFF_EPS_HZ = 1.0
MIN_MEL_HZ = 30.0


@dataclass
class FrontendConfig:
    n_filters: int = 127
    sample_rate: int = 8000
    conv_layers: tuple = MEERKAT_LAYOUT
    sinc_activation: str = "pswish"  # pswish | identity | leaky_relu
    conv_activation: str = "gelu"  # gelu | leaky_relu
    kernel_length: int | None = None

    def __post_init__(self):
        self.conv_layers = tuple(tuple(int(v) for v in layer) for layer in self.conv_layers)
        if self.kernel_length is None:
            self.kernel_length = sinc_kernel_length(self.sample_rate)

    @property
    def total_stride(self) -> int:
        return math.prod(s for _, _, s in self.conv_layers)

    @property
    def effective_rate(self) -> float:
        return self.sample_rate / self.total_stride

    @property
    def out_dim(self) -> int:
        return self.conv_layers[-1][0] if self.conv_layers else self.n_filters


@dataclass
class SincFilter:
    f_low: float
    bandwidth: float
    kernel_length: int = 63


def sinc_kernel_length(sample_rate: int) -> int:
    """floor(sr / 126), made odd so the kernel is symmetric."""
    if sample_rate < SPECTRAL_RESOLUTION_HZ:
        raise ValueError(f"sample rate {sample_rate} below {SPECTRAL_RESOLUTION_HZ} Hz")
    k = sample_rate // SPECTRAL_RESOLUTION_HZ
    return k if k % 2 else k - 1


def clamp_cutoffs(f_low, bandwidth, sample_rate):
    nyquist = sample_rate / 2
    f1 = torch.clamp(torch.abs(f_low), max=nyquist - CUTOFF_EPS_HZ)
    f2 = torch.clamp(f1 + torch.abs(bandwidth), max=nyquist)
    return f1, f2


def sinc_kernels(f_low: torch.Tensor, bandwidth: torch.Tensor, kernel_length: int,
                 sample_rate: int) -> torch.Tensor:
    """Band-pass kernels, one row per filter, differentiable in the cutoffs.

    Each row is the difference of two windowed ideal low-passes at cutoffs f2 and f1.
    """
    f1, f2 = clamp_cutoffs(f_low, bandwidth, sample_rate)
    half = (kernel_length - 1) // 2
    # |n| keeps every tap pair bit-identical
    n = torch.arange(-half, half + 1, dtype=f_low.dtype, device=f_low.device).abs()
    window = 0.54 + 0.46 * torch.cos(math.pi * n / max(half, 1))

    def lowpass(fc):
        fc = (fc / sample_rate)[:, None]
        return 2 * fc * torch.sinc(2 * fc * n[None, :])

    return (lowpass(f2) - lowpass(f1)) * window


def sinc_kernel(filt: SincFilter, sample_rate: int) -> np.ndarray:
    k = sinc_kernels(torch.tensor([filt.f_low], dtype=torch.float64),
                     torch.tensor([filt.bandwidth], dtype=torch.float64),
                     filt.kernel_length, sample_rate)
    return k[0].numpy()


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_initialize(config: FrontendConfig) -> list[SincFilter]:
    """Filters spanning points i and i+2 of n_filters+2 Mel-spaced points in [30 Hz, Nyquist]."""
    n = config.n_filters
    if n < 2:
        raise ValueError("need at least two sinc filters")
    nyquist = config.sample_rate / 2
    edges = mel_to_hz(np.linspace(hz_to_mel(MIN_MEL_HZ), hz_to_mel(nyquist), n + 2))
    return [SincFilter(float(edges[i]), float(edges[i + 2] - edges[i]), config.kernel_length)
            for i in range(n)]


def pswish(x, alpha, beta):
    """x * alpha * sigmoid(beta * x); the identity at alpha=2, beta=0."""
    return x * alpha * torch.sigmoid(beta * x)


class PSwish(nn.Module):
    """One learnable (alpha, beta) pair per channel of a (B, C, L) input."""

    def __init__(self, channels: int, alpha: float = 2.0, beta: float = 0.0):
        super().__init__()
        self.alpha = nn.Parameter(torch.full((channels,), float(alpha)))
        self.beta = nn.Parameter(torch.full((channels,), float(beta)))

    def forward(self, x):
        return pswish(x, self.alpha[:, None], self.beta[:, None])


class ChannelNorm(nn.LayerNorm):
    """LayerNorm over channels of a (B, C, L) tensor, applied frame by frame."""

    def forward(self, x):
        return super().forward(x.transpose(1, 2)).transpose(1, 2)


class SincConv(nn.Module):
    def __init__(self, config: FrontendConfig):
        super().__init__()
        filters = mel_initialize(config)
        self.sample_rate = config.sample_rate
        self.kernel_length = config.kernel_length
        self.f_low = nn.Parameter(torch.tensor([f.f_low for f in filters]))
        self.bandwidth = nn.Parameter(torch.tensor([f.bandwidth for f in filters]))

    def kernels(self):
        return sinc_kernels(self.f_low, self.bandwidth, self.kernel_length, self.sample_rate)

    def filters(self) -> list[SincFilter]:
        return [SincFilter(float(a), float(b), self.kernel_length)
                for a, b in zip(self.f_low.detach().cpu(), self.bandwidth.detach().cpu())]

    def forward(self, x):
        return F.conv1d(x, self.kernels()[:, None, :])


def _activation(name: str, channels: int) -> nn.Module:
    if name == "pswish":
        return PSwish(channels)
    if name == "identity":
        return nn.Identity()
    if name == "leaky_relu":
        return nn.LeakyReLU()
    if name == "gelu":
        return nn.GELU()
    raise ValueError(f"unknown activation {name!r}")


class Frontend(nn.Module):
    """Waveform (B, L) -> features (B, T, C) at the effective frame rate."""

    def __init__(self, config: FrontendConfig):
        super().__init__()
        self.config = config
        self.sinc = SincConv(config)
        self.sinc_act = _activation(config.sinc_activation, config.n_filters)
        self.sinc_norm = ChannelNorm(config.n_filters)
        layers = []
        in_ch = config.n_filters
        for ch, width, stride in config.conv_layers:
            layers.append(nn.Sequential(
                nn.Conv1d(in_ch, ch, width, stride=stride),
                _activation(config.conv_activation, ch),
                ChannelNorm(ch),
            ))
            in_ch = ch
        self.convs = nn.ModuleList(layers)

    def output_length(self, n_samples: int) -> int:
        return output_length(self.config, n_samples)

    def pre_activation(self, wave: torch.Tensor) -> torch.Tensor:
        return self.sinc(wave[:, None, :])

    def forward(self, wave: torch.Tensor) -> torch.Tensor:
        if wave.dim() == 1:
            wave = wave[None]
        if self.output_length(wave.shape[-1]) < 1:
            raise ShapeError(f"{wave.shape[-1]} samples too short for the frontend")
        x = self.sinc_norm(self.sinc_act(self.pre_activation(wave)))
        for layer in self.convs:
            x = layer(x)
        return x.transpose(1, 2)

    def no_decay_parameters(self):
        """PSwish parameters, which are kept out of weight decay."""
        return [p for m in self.modules() if isinstance(m, PSwish) for p in m.parameters()]


def output_length(config: FrontendConfig, n_samples: int) -> int:
    length = n_samples - config.kernel_length + 1
    for _, width, stride in config.conv_layers:
        if length < width:
            return 0
        length = (length - width) // stride + 1
    return max(length, 0)


def receptive_field(config: FrontendConfig, sinc_kernel_length: int | None = None):
    """Input span (samples, milliseconds) that influences one output frame."""
    rf = 1
    for _, width, stride in reversed(config.conv_layers):
        rf = (rf - 1) * stride + width
    if sinc_kernel_length:
        rf = rf + sinc_kernel_length - 1
    return rf, rf / config.sample_rate * 1000.0


def frame_center_offset_s(config: FrontendConfig) -> float:
    """Time of output frame 0's receptive-field center minus half a frame period.

    Passing this as ``offset_s`` to frame-grid helpers aligns frame t with the model's
    t-th output.
    """
    rf, _ = receptive_field(config, config.kernel_length)
    return (rf - 1) / 2 / config.sample_rate - 0.5 / config.effective_rate


def cumulative_frequency_response(filters: list[SincFilter], sample_rate: int,
                                  n_bins: int = 512):
    """Area-normalized sum of filter magnitude responses on n_bins points in [0, Nyquist].

    Returns (frequencies_hz, response).
    """
    if n_bins < 16:
        raise ValueError("n_bins must be >= 16")
    freqs = np.linspace(0.0, sample_rate / 2, n_bins)
    total = np.zeros(n_bins)
    for filt in filters:
        kern = sinc_kernel(filt, sample_rate)
        n = np.arange(len(kern)) - (len(kern) - 1) / 2
        resp = np.exp(-2j * np.pi * np.outer(freqs / sample_rate, n)) @ kern
        total += np.abs(resp)
    area = np.trapezoid(total, freqs)
    if area <= 0:
        return freqs, np.full(n_bins, 1.0 / (sample_rate / 2))
    return freqs, total / area


def band_mass(freqs, response, low_hz: float, high_hz: float) -> float:
    """Trapezoidal integral of a CFR over [low_hz, high_hz]."""
    sel = (freqs >= low_hz) & (freqs <= high_hz)
    return float(np.trapezoid(response[sel], freqs[sel]))
