"""Supervised finetuning with a frozen frontend, focal loss and masking as regularization."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from . import DivergenceError, ShapeError, StateError
from .augment import MixConfig, bcl_batch
from .masking import MaskConfig, sample_mask
from .network import Animal2Vec, layer_average
from .pretrain import OptimConfig, build_optimizer, clip_and_norm, cosine_lr, derive_seed, set_lr

FOCAL_EPS = 1e-7


@dataclass
class FocalConfig:
    gamma: float = 2.0


@dataclass
class FinetuneSchedule:
    warmup_steps: int = 2000
    frozen_steps: int = 10_000
    total_steps: int = 30_000

    def __post_init__(self):
        if self.frozen_steps > self.total_steps:
            raise ValueError("frozen_steps must not exceed total_steps")


@dataclass
class FinetuneConfig:
    schedule: FinetuneSchedule = field(default_factory=FinetuneSchedule)
    lr: float = 3e-5
    weight_decay: float = 0.01
    clip_norm: float = 1.0
    betas: tuple = (0.9, 0.98)
    mask: MaskConfig = field(default_factory=lambda: MaskConfig(0.0825, 4, 1))
    bcl: MixConfig = field(default_factory=lambda: MixConfig(0.5, 0.5, 1.0, 0.05))
    focal: FocalConfig = field(default_factory=FocalConfig)
    layer_average_k: int | None = None
    batch_size: int = 8
    crop_s: float = 2.0
    seed: int = 0

    def optim(self) -> OptimConfig:
        s = self.schedule
        return OptimConfig(self.lr, self.weight_decay, s.warmup_steps, s.total_steps,
                           self.clip_norm, self.betas)


def focal_loss(likelihood, target, gamma: float, reduction: str = "mean"):
    """Focal loss on sigmoid likelihoods with soft targets in [0, 1].

    p_t = y p + (1 - y)(1 - p); loss = -(1 - p_t)^gamma [y log p + (1 - y) log(1 - p)].
    """
    p = torch.as_tensor(likelihood)
    y = torch.as_tensor(target, dtype=p.dtype)
    p = p.clamp(FOCAL_EPS, 1.0 - FOCAL_EPS)
    bce = -(y * torch.log(p) + (1.0 - y) * torch.log1p(-p))
    if gamma:
        p_t = y * p + (1.0 - y) * (1.0 - p)
        bce = (1.0 - p_t) ** gamma * bce
    if reduction == "mean":
        return bce.mean()
    if reduction == "sum":
        return bce.sum()
    return bce


@dataclass
class LabeledClip:
    id: str
    wave: np.ndarray
    targets: np.ndarray  # (T_model, C) on the model's output frame grid


class Finetuner:
    """Trains the head (and, after the frozen phase, the encoder) of a pretrained model."""

    def __init__(self, model: Animal2Vec, config: FinetuneConfig):
        if model.head is None:
            raise StateError("model has no classification head")
        self.model = model
        self.config = config
        for p in model.frontend.parameters():
            p.requires_grad_(False)
        self.optimizer = build_optimizer({"encoder": model.encoder, "head": model.head},
                                         config.optim())
        self.step = 0
        self.last_stats: dict = {}

    @property
    def encoder_frozen(self) -> bool:
        return self.step < self.config.schedule.frozen_steps

    def make_batch(self, clips: list[LabeledClip], step: int | None = None):
        cfg = self.config
        step = self.step if step is None else step
        seed = derive_seed(cfg.seed, "finetune", step)
        rng = np.random.default_rng(seed)
        fc = self.model.frontend_cfg
        stride = fc.total_stride
        crop = int(round(cfg.crop_s * fc.sample_rate))
        T = self.model.frontend.output_length(crop)
        idx = rng.choice(len(clips), size=cfg.batch_size, replace=len(clips) < cfg.batch_size)
        waves, targets = [], []
        for i in idx:
            clip = clips[i]
            w, y = clip.wave, clip.targets
            if len(w) < crop:
                w = np.pad(w, (0, crop - len(w)))
                y = np.pad(y, ((0, max(0, T - len(y))), (0, 0)))
                start_frame = 0
            else:
                start_frame = int(rng.integers((len(w) - crop) // stride + 1))
            s = start_frame * stride
            waves.append(w[s:s + crop])
            targets.append(y[start_frame:start_frame + T])
        waves = np.stack(waves)
        targets = np.stack(targets)
        if cfg.bcl.token_prob > 0:
            waves, targets = bcl_batch(waves, targets, cfg.bcl, fc.sample_rate, rng)
        masks = None
        if cfg.mask.p > 0:
            masks = np.stack([sample_mask(T, cfg.mask, seed=int(rng.integers(2 ** 62))).masks[0]
                              for _ in range(cfg.batch_size)])
        dtype = next(self.model.parameters()).dtype
        return (torch.as_tensor(waves, dtype=dtype), torch.as_tensor(targets, dtype=dtype),
                None if masks is None else torch.as_tensor(masks), seed)

    def forward(self, waves, hide=None):
        model = self.model
        with torch.no_grad():
            feats = model.frontend(waves)
        x = model.encoder.embed(feats)
        if hide is not None:
            x = torch.where(hide[..., None], torch.randn_like(x), x)
        out = model.encoder.contextualize(x)
        k = self.config.layer_average_k or model.net_cfg.layers
        return model.head(layer_average(out, k))

    def finetune_step(self, batch) -> dict:
        waves, targets, hide, seed = batch
        torch.manual_seed(seed)
        frozen = self.encoder_frozen
        for p in self.model.encoder.parameters():
            p.requires_grad_(not frozen)
        self.model.train()
        self.model.frontend.eval()
        if frozen:
            self.model.encoder.eval()
        lr = cosine_lr(self.step, self.config.optim())
        probs = self.forward(waves, hide)
        loss = focal_loss(probs, targets[:, :probs.shape[1]], self.config.focal.gamma)
        value = float(loss.detach())
        if not math.isfinite(value):
            raise DivergenceError(self.step, value)
        self.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        params = [p for g in self.optimizer.param_groups for p in g["params"]]
        grad_norm = clip_and_norm(params, self.config.clip_norm)
        set_lr(self.optimizer, lr)
        self.optimizer.step()
        self.step += 1
        self.last_stats = {"step": self.step, "loss": value, "lr": lr,
                           "frozen": frozen, "grad_norm": grad_norm}
        return self.last_stats


@torch.no_grad()
def predict_likelihoods(model: Animal2Vec, wave, layer_average_k: int | None = None) -> np.ndarray:
    """Frame-wise class likelihoods (T, C) at the effective rate, in eval mode."""
    if model.head is None:
        raise StateError("model has no classification head")
    wave = np.asarray(wave)
    if model.frontend.output_length(len(wave)) < 1:
        raise ShapeError(f"{len(wave)} samples is shorter than the frontend receptive field")
    was = model.training
    model.eval()
    try:
        dtype = next(model.parameters()).dtype
        x = torch.as_tensor(wave, dtype=dtype)[None]
        out = model.encoder(model.frontend(x))
        k = layer_average_k or model.net_cfg.layers
        probs = model.head(layer_average(out, k))[0]
    finally:
        model.train(was)
    return probs.numpy().astype(np.float64)
