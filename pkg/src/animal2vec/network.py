"""Transformer encoder, regression decoder, classification head and layer averaging."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .frontend import Frontend, FrontendConfig


@dataclass
class NetworkConfig:
    in_dim: int = 512
    layers: int = 16
    heads: int = 16
    embed_dim: int = 1024
    ffn_dim: int | None = None
    dropout: float = 0.1
    layerdrop: float = 0.1
    pos_conv_kernel: int = 19
    pos_conv_groups: int = 16
    use_pos_conv: bool = True
    decoder_dim: int = 768
    decoder_kernel: int = 7
    decoder_groups: int = 16
    decoder_layers: int = 4
    n_classes: int = 0

    def __post_init__(self):
        if self.embed_dim % self.heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by {self.heads} heads")
        if self.ffn_dim is None:
            self.ffn_dim = 4 * self.embed_dim


@dataclass
class LayerOutputs:
    per_layer: list  # N tensors of shape (B, T, d)
    final: torch.Tensor  # last layer after the final layer norm
    maps: list | None = None  # N tensors (B, H, T, T) when collected

    def stacked(self) -> torch.Tensor:
        return torch.stack(self.per_layer)


def attention(q, k, v, n: float, key_padding_mask=None):
    """softmax(q k^T / sqrt(n)) v over the last two axes. Returns (out, weights)."""
    logits = q @ k.transpose(-2, -1) / math.sqrt(n)
    if key_padding_mask is not None:
        logits = logits.masked_fill(key_padding_mask[..., None, :], float("-inf"))
    a = torch.softmax(logits, dim=-1)
    return a @ v, a


class MultiHeadAttention(nn.Module):
    def __init__(self, dim: int, heads: int, dropout: float = 0.0):
        super().__init__()
        self.heads = heads
        self.head_dim = dim // heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x, key_padding_mask=None, need_weights: bool = False):
        B, L, D = x.shape
        q, k, v = self.qkv(x).view(B, L, 3, self.heads, self.head_dim).permute(2, 0, 3, 1, 4)
        mask = None if key_padding_mask is None else key_padding_mask[:, None, :]
        if need_weights:
            out, a = attention(q, k, v, self.head_dim, mask)
        else:
            # fused kernel, same math; attn_mask marks keys that may be attended
            keep = None if mask is None else ~mask[..., None, :]
            out, a = F.scaled_dot_product_attention(q, k, v, attn_mask=keep), None
        out = self.dropout(out).transpose(1, 2).reshape(B, L, D)
        return self.proj(out), a


class Block(nn.Module):
    """Pre-norm transformer block."""

    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        d = cfg.embed_dim
        self.norm1 = nn.LayerNorm(d)
        self.attn = MultiHeadAttention(d, cfg.heads, cfg.dropout)
        self.norm2 = nn.LayerNorm(d)
        self.ffn = nn.Sequential(nn.Linear(d, cfg.ffn_dim), nn.GELU(), nn.Dropout(cfg.dropout),
                                 nn.Linear(cfg.ffn_dim, d))
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, x, key_padding_mask=None, need_weights: bool = False):
        h, a = self.attn(self.norm1(x), key_padding_mask, need_weights)
        x = x + self.drop(h)
        x = x + self.drop(self.ffn(self.norm2(x)))
        return x, a


class PositionalConv(nn.Module):
    """Grouped temporal convolution whose GELU output is added to the input."""

    def __init__(self, dim: int, kernel: int, groups: int):
        super().__init__()
        if kernel % 2 == 0:
            raise ValueError("positional conv kernel must be odd")
        self.conv = nn.Conv1d(dim, dim, kernel, padding=kernel // 2, groups=groups)

    def forward(self, x):
        return x + F.gelu(self.conv(x.transpose(1, 2))).transpose(1, 2)


class Encoder(nn.Module):
    """Feature projection, positional conv, transformer blocks and a final norm."""

    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        self.cfg = cfg
        self.in_norm = nn.LayerNorm(cfg.in_dim)
        self.in_proj = nn.Linear(cfg.in_dim, cfg.embed_dim)
        self.pos = (PositionalConv(cfg.embed_dim, cfg.pos_conv_kernel, cfg.pos_conv_groups)
                    if cfg.use_pos_conv else nn.Identity())
        self.in_drop = nn.Dropout(cfg.dropout)
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.layers))
        self.norm = nn.LayerNorm(cfg.embed_dim)

    def embed(self, features, hide=None):
        """Project frontend features and add positional encoding.

        ``hide`` (B, T) bool zeroes those frames before the positional conv so that
        content of masked frames cannot leak into their neighbours.
        """
        x = self.in_proj(self.in_norm(features))
        if hide is not None:
            x = x.masked_fill(hide[..., None], 0.0)
        return self.in_drop(self.pos(x))

    def contextualize(self, x, key_padding_mask=None, collect: bool = False) -> LayerOutputs:
        per_layer, maps = [], [] if collect else None
        for block in self.blocks:
            if self.training and self.cfg.layerdrop > 0 and \
                    torch.rand(()) < self.cfg.layerdrop:
                per_layer.append(x)
                if collect:
                    maps.append(None)
                continue
            x, a = block(x, key_padding_mask, collect)
            per_layer.append(x)
            if collect:
                maps.append(a.detach())
        return LayerOutputs(per_layer, self.norm(x), maps)

    def forward(self, features, key_padding_mask=None, collect: bool = False) -> LayerOutputs:
        return self.contextualize(self.embed(features), key_padding_mask, collect)


def transformer_forward(frames, encoder: Encoder, train_mode: bool = False,
                        collect: bool = False):
    """Run the encoder on (T, d0) or (B, T, d0) frames. Returns (LayerOutputs, maps)."""
    was_training = encoder.training
    encoder.train(train_mode)
    try:
        squeeze = frames.dim() == 2
        out = encoder(frames[None] if squeeze else frames, collect=collect)
    finally:
        encoder.train(was_training)
    return out, (attention_maps(out.maps) if collect else None)


def attention_maps(maps):
    """Stack collected maps to (N, B, H, L, L) and average over heads then layers."""
    kept = [m for m in maps if m is not None]
    if not kept:
        return None
    stacked = torch.stack(kept)
    return {"maps": stacked, "averaged": stacked.mean(dim=2).mean(dim=0)}


class ConvDecoder(nn.Module):
    """Residual stack of grouped 1-D convs regressing teacher targets frame by frame."""

    def __init__(self, cfg: NetworkConfig, target_dim: int | None = None):
        super().__init__()
        dim = cfg.decoder_dim
        self.in_proj = nn.Linear(cfg.embed_dim, dim)
        self.convs = nn.ModuleList(
            nn.Conv1d(dim, dim, cfg.decoder_kernel, padding=cfg.decoder_kernel // 2,
                      groups=cfg.decoder_groups)
            for _ in range(cfg.decoder_layers))
        self.norms = nn.ModuleList(nn.LayerNorm(dim) for _ in range(cfg.decoder_layers))
        self.out_proj = nn.Linear(dim, target_dim or cfg.embed_dim)

    def forward(self, x):
        x = self.in_proj(x)
        for conv, norm in zip(self.convs, self.norms):
            h = conv(x.transpose(1, 2)).transpose(1, 2)
            x = x + F.gelu(norm(h))
        return self.out_proj(x)


class ClassificationHead(nn.Module):
    def __init__(self, dim: int, n_classes: int):
        super().__init__()
        self.proj = nn.Linear(dim, n_classes)

    def forward(self, x):
        return torch.sigmoid(self.proj(x))


def layer_average(outputs, K: int):
    """Mean of the last K per-layer outputs."""
    per_layer = outputs.per_layer if isinstance(outputs, LayerOutputs) else list(outputs)
    if not 1 <= K <= len(per_layer):
        raise ValueError(f"K={K} outside [1, {len(per_layer)}]")
    return torch.stack(per_layer[-K:]).mean(dim=0)


class Animal2Vec(nn.Module):
    """Frontend + student encoder + regression decoder + optional classification head."""

    def __init__(self, frontend_cfg: FrontendConfig, net_cfg: NetworkConfig):
        super().__init__()
        if net_cfg.in_dim != frontend_cfg.out_dim:
            raise ValueError(f"network in_dim {net_cfg.in_dim} != frontend out_dim "
                             f"{frontend_cfg.out_dim}")
        self.frontend_cfg = frontend_cfg
        self.net_cfg = net_cfg
        self.frontend = Frontend(frontend_cfg)
        self.encoder = Encoder(net_cfg)
        self.decoder = ConvDecoder(net_cfg)
        self.head = ClassificationHead(net_cfg.embed_dim, net_cfg.n_classes) \
            if net_cfg.n_classes else None
