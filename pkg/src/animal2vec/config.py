"""Flat ``key = value`` run configuration with dotted namespaces."""
from __future__ import annotations

import hashlib
from pathlib import Path

from .augment import MixConfig
from .finetune import FinetuneConfig, FinetuneSchedule, FocalConfig
from .frontend import FrontendConfig
from .masking import MaskConfig
from .network import NetworkConfig
from .pretrain import EmaConfig, OptimConfig, PretrainConfig

DESK_LAYOUT = "64x10x5,64x3x2,64x3x2,64x3x2,64x3x1,64x2x1,64x2x1"

# desk-scale defaults; paper-scale values live in configs/meerkat_paper.conf
DEFAULTS: dict[str, object] = {
    "seed": 0,
    "data.dir": "",
    "data.sample_rate": 8000,
    "data.folds": 5,
    "data.fold": 0,
    "frontend.n_filters": 32,
    "frontend.layout": DESK_LAYOUT,
    "frontend.sinc_activation": "pswish",
    "frontend.conv_activation": "gelu",
    "model.layers": 4,
    "model.heads": 4,
    "model.embed_dim": 64,
    "model.ffn_dim": 256,
    "model.dropout": 0.0,
    "model.layerdrop": 0.0,
    "model.pos_conv_kernel": 9,
    "model.pos_conv_groups": 4,
    "decoder.dim": 64,
    "decoder.kernel": 7,
    "decoder.groups": 4,
    "decoder.layers": 2,
    "pretrain.lr": 5e-4,
    "pretrain.warmup_steps": 200,
    "pretrain.total_steps": 2000,
    "pretrain.batch_size": 8,
    "pretrain.crop_s": 1.0,
    "pretrain.weight_decay": 0.01,
    "pretrain.clip_norm": 1.0,
    "pretrain.beta1": 0.9,
    "pretrain.beta2": 0.98,
    "pretrain.sinc_lr_scale": 100.0,
    "pretrain.top_k": 0,
    "pretrain.masked_loss_only": True,
    "mask.p": 0.15,
    "mask.M": 2,
    "mask.clones": 2,
    "ema.tau_start": 0.999,
    "ema.tau_end": 0.9999,
    "ema.anneal_steps": 600,
    "bcl.input_strength": 0.5,
    "bcl.target_strength": 0.0,
    "bcl.token_prob": 1.0,
    "bcl.window_s": 0.05,
    "finetune.lr": 1e-3,
    "finetune.warmup_steps": 50,
    "finetune.frozen_steps": 100,
    "finetune.total_steps": 600,
    "finetune.batch_size": 8,
    "finetune.crop_s": 2.0,
    "finetune.weight_decay": 0.01,
    "finetune.clip_norm": 1.0,
    "finetune.mask.p": 0.0825,
    "finetune.mask.M": 4,
    "finetune.bcl.input_strength": 0.5,
    "finetune.bcl.target_strength": 0.5,
    "finetune.bcl.token_prob": 1.0,
    "finetune.bcl.window_s": 0.05,
    "focal.gamma": 2.0,
    "layer_average.K": 0,
    "checkpoint.every": 500,
    "checkpoint.keep": 2,
    "eval.threshold": 0.5,
    "eval.pool_s": 0.1,
    "eval.iou": 0.5,
    "eval.levels": 101,
}


class ConfigError(ValueError):
    pass


def _convert(key: str, raw: str, default):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(default).__name__}") from None
    return raw


def parse(text: str, base: dict | None = None) -> dict:
    cfg = dict(DEFAULTS if base is None else base)
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in DEFAULTS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        cfg[key] = _convert(key, value, DEFAULTS[key])
    return cfg


def load(path=None, overrides: dict | None = None) -> dict:
    cfg = parse(Path(path).read_text(encoding="utf-8")) if path else dict(DEFAULTS)
    for key, value in (overrides or {}).items():
        if key not in DEFAULTS:
            raise ConfigError(f"unknown key {key!r}")
        cfg[key] = _convert(key, str(value), DEFAULTS[key]) if isinstance(value, str) else value
    return cfg


def dumps(cfg: dict) -> str:
    return "".join(f"{k} = {cfg[k]}\n" for k in sorted(cfg))


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(dumps(cfg).encode()).hexdigest()[:16]


def parse_layout(text: str) -> tuple:
    layers = []
    for part in text.split(","):
        try:
            ch, w, s = (int(v) for v in part.strip().lower().split("x"))
        except ValueError:
            raise ConfigError(f"bad layer spec {part!r}; expected CHxWIDTHxSTRIDE") from None
        layers.append((ch, w, s))
    return tuple(layers)


def _checked(build):
    """Report inconsistent values from the dataclass validators as config errors."""
    def wrapper(*args, **kw):
        try:
            return build(*args, **kw)
        except ValueError as err:
            if isinstance(err, ConfigError):
                raise
            raise ConfigError(f"{build.__name__}: {err}") from err
    wrapper.__name__ = build.__name__
    wrapper.__doc__ = build.__doc__
    return wrapper


@_checked
def frontend_config(cfg: dict) -> FrontendConfig:
    return FrontendConfig(n_filters=cfg["frontend.n_filters"],
                          sample_rate=cfg["data.sample_rate"],
                          conv_layers=parse_layout(cfg["frontend.layout"]),
                          sinc_activation=cfg["frontend.sinc_activation"],
                          conv_activation=cfg["frontend.conv_activation"])


@_checked
def network_config(cfg: dict, n_classes: int = 0) -> NetworkConfig:
    fc = frontend_config(cfg)
    return NetworkConfig(in_dim=fc.out_dim, layers=cfg["model.layers"], heads=cfg["model.heads"],
                         embed_dim=cfg["model.embed_dim"], ffn_dim=cfg["model.ffn_dim"] or None,
                         dropout=cfg["model.dropout"], layerdrop=cfg["model.layerdrop"],
                         pos_conv_kernel=cfg["model.pos_conv_kernel"],
                         pos_conv_groups=cfg["model.pos_conv_groups"],
                         decoder_dim=cfg["decoder.dim"], decoder_kernel=cfg["decoder.kernel"],
                         decoder_groups=cfg["decoder.groups"], decoder_layers=cfg["decoder.layers"],
                         n_classes=n_classes)


@_checked
def pretrain_config(cfg: dict, seed: int) -> PretrainConfig:
    optim = OptimConfig(lr_peak=cfg["pretrain.lr"], weight_decay=cfg["pretrain.weight_decay"],
                        warmup_steps=cfg["pretrain.warmup_steps"],
                        total_steps=cfg["pretrain.total_steps"],
                        clip_norm=cfg["pretrain.clip_norm"],
                        betas=(cfg["pretrain.beta1"], cfg["pretrain.beta2"]),
                        sinc_lr_scale=cfg["pretrain.sinc_lr_scale"])
    return PretrainConfig(
        ema=EmaConfig(cfg["ema.tau_start"], cfg["ema.tau_end"], cfg["ema.anneal_steps"]),
        optim=optim,
        mask=MaskConfig(cfg["mask.p"], cfg["mask.M"], cfg["mask.clones"], seed),
        bcl=MixConfig(cfg["bcl.input_strength"], cfg["bcl.target_strength"],
                      cfg["bcl.token_prob"], cfg["bcl.window_s"]),
        batch_size=cfg["pretrain.batch_size"], crop_s=cfg["pretrain.crop_s"],
        top_k=cfg["pretrain.top_k"] or None, masked_loss_only=cfg["pretrain.masked_loss_only"],
        seed=seed)


@_checked
def finetune_config(cfg: dict, seed: int) -> FinetuneConfig:
    return FinetuneConfig(
        schedule=FinetuneSchedule(cfg["finetune.warmup_steps"], cfg["finetune.frozen_steps"],
                                  cfg["finetune.total_steps"]),
        lr=cfg["finetune.lr"], weight_decay=cfg["finetune.weight_decay"],
        clip_norm=cfg["finetune.clip_norm"],
        betas=(cfg["pretrain.beta1"], cfg["pretrain.beta2"]),
        mask=MaskConfig(cfg["finetune.mask.p"], cfg["finetune.mask.M"], 1, seed),
        bcl=MixConfig(cfg["finetune.bcl.input_strength"], cfg["finetune.bcl.target_strength"],
                      cfg["finetune.bcl.token_prob"], cfg["finetune.bcl.window_s"]),
        focal=FocalConfig(cfg["focal.gamma"]),
        layer_average_k=cfg["layer_average.K"] or None,
        batch_size=cfg["finetune.batch_size"], crop_s=cfg["finetune.crop_s"], seed=seed)
