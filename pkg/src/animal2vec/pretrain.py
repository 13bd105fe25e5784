"""Mean-teacher self-distillation: EMA teacher, multi-mask student regression, schedules."""
from __future__ import annotations

import copy
import hashlib
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import DivergenceError, StateError
from .augment import MixConfig, bcl_batch
from .masking import MaskConfig, sample_mask
from .network import Animal2Vec, Encoder

INSTANCE_NORM_EPS = 1e-5


@dataclass
class EmaConfig:
    tau_start: float = 0.999
    tau_end: float = 0.9999
    anneal_steps: int = 0

    def __post_init__(self):
        if self.tau_end < self.tau_start:
            raise ValueError("tau_end must be >= tau_start")


@dataclass
class OptimConfig:
    lr_peak: float = 1e-4
    weight_decay: float = 0.01
    warmup_steps: int = 10_000
    total_steps: int = 408_000
    clip_norm: float = 1.0
    betas: tuple = (0.9, 0.98)
    eps: float = 1e-6
    # Adam moves a parameter by about lr per step whatever its scale; sinc cutoffs are in Hz
    sinc_lr_scale: float = 1.0

    def __post_init__(self):
        if self.warmup_steps > self.total_steps:
            raise ValueError("warmup_steps must not exceed total_steps")
        self.betas = tuple(self.betas)


@dataclass
class PretrainConfig:
    ema: EmaConfig = field(default_factory=EmaConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    mask: MaskConfig = field(default_factory=MaskConfig)
    bcl: MixConfig = field(default_factory=lambda: MixConfig(0.5, 0.0, 1.0, 0.05))
    batch_size: int = 4
    crop_s: float = 2.0
    top_k: int | None = None  # teacher layers averaged into the target; None = all
    masked_loss_only: bool = True
    seed: int = 0


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from arbitrary parts."""
    h = hashlib.sha256(repr(parts).encode()).digest()
    return int.from_bytes(h[:8], "little") & ((1 << 63) - 1)


# ---------------------------------------------------------------------------
# schedules and EMA


def tau_schedule(step: int, config: EmaConfig) -> float:
    if config.anneal_steps <= 0 or step >= config.anneal_steps:
        return config.tau_end
    frac = step / config.anneal_steps
    return config.tau_start + frac * (config.tau_end - config.tau_start)


def cosine_lr(step: int, config: OptimConfig) -> float:
    """Linear warmup to lr_peak, then cosine decay to 0 at total_steps."""
    if step > config.total_steps or step < 0:
        return 0.0
    if step < config.warmup_steps:
        return config.lr_peak * step / config.warmup_steps
    span = config.total_steps - config.warmup_steps
    if span <= 0:
        return config.lr_peak
    progress = (step - config.warmup_steps) / span
    return config.lr_peak * 0.5 * (1.0 + math.cos(math.pi * progress))


def _named_tensors(obj):
    if isinstance(obj, nn.Module):
        return dict(obj.named_parameters())
    return dict(obj)


@torch.no_grad()
def ema_update(teacher, student, tau: float):
    """teacher <- tau * teacher + (1 - tau) * student, in place. Returns the teacher."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must lie in [0, 1], got {tau}")
    t_params = _named_tensors(teacher)
    s_params = _named_tensors(student)
    if t_params.keys() != s_params.keys():
        raise StateError("teacher and student parameter names differ")
    for name, t in t_params.items():
        s = s_params[name]
        if t.shape != s.shape:
            raise StateError(f"shape mismatch for {name}: {tuple(t.shape)} vs {tuple(s.shape)}")
        t.mul_(tau).add_(s.detach(), alpha=1.0 - tau)
    return teacher


# ---------------------------------------------------------------------------
# targets


def instance_norm_time(x):
    """Normalize each channel of (B, T, d) over time."""
    return F.instance_norm(x.transpose(1, 2), eps=INSTANCE_NORM_EPS).transpose(1, 2)


@torch.no_grad()
def teacher_targets(features, teacher: Encoder, top_k: int | None = None):
    """Average of the top-K teacher layer outputs, each instance-normalized over time."""
    was = teacher.training
    teacher.eval()
    try:
        out = teacher(features.detach())
    finally:
        teacher.train(was)
    k = top_k or len(out.per_layer)
    layers = [instance_norm_time(y) for y in out.per_layer[-k:]]
    return torch.stack(layers).mean(dim=0)


def collapse_monitor(targets) -> float:
    """Mean over dimensions of the per-dimension std across all (batch, time) rows."""
    if isinstance(targets, torch.Tensor):
        rows = targets.reshape(-1, targets.shape[-1])
    else:
        rows = torch.cat([torch.as_tensor(t).reshape(-1, np.shape(t)[-1]) for t in targets])
    if rows.shape[0] < 2:
        return 0.0
    return float(rows.double().std(dim=0).mean())


# ---------------------------------------------------------------------------
# optimizer


def build_optimizer(modules: dict, optim: OptimConfig) -> torch.optim.AdamW:
    """AdamW with decay on weight matrices only; sinc cutoffs get their own lr scale."""
    decay, no_decay, sinc = [], [], []
    seen = set()
    for prefix, module in modules.items():
        for name, p in module.named_parameters():
            if id(p) in seen:
                continue
            seen.add(id(p))
            if name.endswith("sinc.f_low") or name.endswith("sinc.bandwidth"):
                sinc.append(p)
            elif p.dim() < 2 or ".alpha" in name or ".beta" in name:
                no_decay.append(p)
            else:
                decay.append(p)
    groups = [
        {"params": decay, "weight_decay": optim.weight_decay, "lr_scale": 1.0},
        {"params": no_decay, "weight_decay": 0.0, "lr_scale": 1.0},
        {"params": sinc, "weight_decay": 0.0, "lr_scale": optim.sinc_lr_scale},
    ]
    groups = [g for g in groups if g["params"]]
    return torch.optim.AdamW(groups, lr=0.0, betas=optim.betas, eps=optim.eps)


def set_lr(optimizer, lr: float):
    for g in optimizer.param_groups:
        g["lr"] = lr * g.get("lr_scale", 1.0)


def clip_and_norm(params, max_norm: float) -> float:
    params = [p for p in params if p.grad is not None]
    if not params:
        return 0.0
    return float(torch.nn.utils.clip_grad_norm_(params, max_norm))


# ---------------------------------------------------------------------------
# distillation


@dataclass
class DistillBatch:
    waves: torch.Tensor  # (B, L)
    masks: np.ndarray  # (B, clones, T) bool
    seed: int


def masked_mse(pred, target, mask):
    """Per-sequence MSE over masked frames, averaged over sequences with masked frames.

    An all-empty mask set gives a zero loss that still carries the graph.
    """
    sq = ((pred - target) ** 2).mean(dim=-1)
    m = mask.to(sq.dtype)
    counts = m.sum(dim=1)
    valid = counts > 0
    if not bool(valid.any()):
        return (pred * 0.0).sum()
    per_seq = (sq * m).sum(dim=1)[valid] / counts[valid]
    return per_seq.mean()


class Pretrainer:
    """Owns the student model, its EMA teacher encoder and the optimizer."""

    def __init__(self, model: Animal2Vec, config: PretrainConfig):
        self.model = model
        self.config = config
        self.teacher = copy.deepcopy(model.encoder)
        for p in self.teacher.parameters():
            p.requires_grad_(False)
        self.optimizer = build_optimizer(
            {"frontend": model.frontend, "encoder": model.encoder, "decoder": model.decoder},
            config.optim)
        self.step = 0
        self.teacher_forward_calls = 0
        self.last_stats: dict = {}

    def trainable_parameters(self):
        return [p for g in self.optimizer.param_groups for p in g["params"]]

    def _teacher(self, feats):
        self.teacher_forward_calls += feats.shape[0]
        return teacher_targets(feats, self.teacher, self.config.top_k)

    def loss(self, batch: DistillBatch):
        """Distillation loss for a batch; also returns the teacher targets."""
        model = self.model
        feats = model.frontend(batch.waves)
        B, T, _ = feats.shape
        masks = torch.as_tensor(batch.masks[:, :, :T])
        n_clones = masks.shape[1]
        targets = self._teacher(feats)

        flat_mask = masks.reshape(B * n_clones, T)
        rep = feats.repeat_interleave(n_clones, dim=0)
        x = model.encoder.embed(rep, hide=flat_mask)
        keep = ~flat_mask
        lengths = keep.sum(dim=1)
        if bool((lengths == 0).any()):
            raise StateError("a clone masks every frame; the student has no input")
        L = int(lengths.max())
        order = torch.argsort((~keep).to(torch.int8), dim=1, stable=True)[:, :L]
        gathered = torch.gather(x, 1, order[..., None].expand(-1, -1, x.shape[-1]))
        pad = torch.arange(L)[None, :] >= lengths[:, None]
        out = model.encoder.contextualize(gathered, key_padding_mask=pad)

        # student rows back at their frames, masked frames filled with N(0, 1)
        valid = ~pad
        rows = torch.arange(B * n_clones)[:, None].expand(-1, L)
        full = torch.randn(B * n_clones, T, x.shape[-1], dtype=x.dtype)
        full = full.index_put((rows[valid], order[valid]), out.final[valid])
        pred = model.decoder(full)
        tgt = targets.repeat_interleave(n_clones, dim=0)
        loss_mask = flat_mask if self.config.masked_loss_only else torch.ones_like(flat_mask)
        return masked_mse(pred, tgt, loss_mask), targets

    def distill_step(self, batch: DistillBatch) -> dict:
        cfg = self.config
        torch.manual_seed(batch.seed)
        self.model.train()
        lr = cosine_lr(self.step, cfg.optim)
        tau = tau_schedule(self.step, cfg.ema)
        loss, targets = self.loss(batch)
        value = float(loss.detach())
        if not math.isfinite(value):
            raise DivergenceError(self.step, value)
        self.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        grad_norm = clip_and_norm(self.trainable_parameters(), cfg.optim.clip_norm)
        set_lr(self.optimizer, lr)
        self.optimizer.step()
        ema_update(self.teacher, self.model.encoder, tau)
        self.step += 1
        self.last_stats = {"step": self.step, "loss": value, "lr": lr, "tau": tau,
                           "collapse": collapse_monitor(targets), "grad_norm": grad_norm}
        return self.last_stats

    def make_batch(self, waves: list, step: int | None = None) -> DistillBatch:
        """Random crops, BCL input mixing and fresh masks, all derived from (seed, step)."""
        cfg = self.config
        step = self.step if step is None else step
        seed = derive_seed(cfg.seed, "pretrain", step)
        rng = np.random.default_rng(seed)
        sr = self.model.frontend_cfg.sample_rate
        crop = int(round(cfg.crop_s * sr))
        idx = rng.choice(len(waves), size=cfg.batch_size, replace=len(waves) < cfg.batch_size)
        crops = []
        for i in idx:
            w = np.asarray(waves[i], dtype=np.float64)
            if len(w) <= crop:
                crops.append(np.pad(w, (0, crop - len(w))))
            else:
                start = int(rng.integers(len(w) - crop + 1))
                crops.append(w[start:start + crop])
        crops = np.stack(crops)
        if cfg.bcl.token_prob > 0:
            crops, _ = bcl_batch(crops, None, cfg.bcl, sr, rng)
        T = self.model.frontend.output_length(crop)
        masks = np.stack([sample_mask(T, cfg.mask, seed=int(rng.integers(2 ** 62))).masks
                          for _ in range(cfg.batch_size)])
        dtype = next(self.model.parameters()).dtype
        return DistillBatch(torch.as_tensor(crops, dtype=dtype), masks, seed)
