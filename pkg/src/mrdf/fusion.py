"""Concatenation fusion through a transformer stack, plus classifier heads.

Layout (per frame):  f_a = A_P(A_E(x_a)),  f_v = V_P(V_E(x_v)),
f_m = Stack(AV_P(f_a ++ f_v)).  Clip-level vectors are masked temporal means.
The unimodal heads read the pre-fusion pooled embeddings; the multimodal
head reads the pooled transformer output.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn as nn
from torch import Tensor

from mrdf.config import FusionConfig, ModelConfig
from mrdf.encoders import FrameEncoder


@dataclass
class HeadOutputs:
    logits_m: Tensor  # [B, 2]
    logits_a: Tensor
    logits_v: Tensor


@dataclass
class ModelOutputs:
    f_a: Tensor  # [B, T, embed_dim]
    f_v: Tensor
    pooled_a: Tensor  # [B, embed_dim]
    pooled_v: Tensor
    f_m: Tensor  # [B, T, model_dim]
    pooled_m: Tensor
    heads: HeadOutputs


def length_mask(lengths: Optional[Tensor], t: int, device=None) -> Optional[Tensor]:
    """Boolean ``[B, T]`` mask, True on valid frames (None when no padding)."""
    if lengths is None:
        return None
    return torch.arange(t, device=device)[None, :] < lengths[:, None]


def temporal_mean(x: Tensor, mask: Optional[Tensor] = None) -> Tensor:
    if mask is None:
        return x.mean(dim=-2)
    w = mask.to(x.dtype).unsqueeze(-1)
    return (x * w).sum(dim=-2) / w.sum(dim=-2).clamp_min(1.0)


class TransformerStack(nn.Module):
    """Learned absolute positions + ``n_blocks`` pre-norm encoder blocks.

    With zero blocks the stack is the identity.
    """

    def __init__(self, cfg: FusionConfig):
        super().__init__()
        self.n_blocks = cfg.n_blocks
        if cfg.n_blocks:
            self.pos = nn.Parameter(torch.zeros(cfg.max_len, cfg.model_dim))
            nn.init.normal_(self.pos, std=0.02)
            self.blocks = nn.ModuleList(
                nn.TransformerEncoderLayer(
                    cfg.model_dim,
                    cfg.n_heads,
                    dim_feedforward=cfg.ff_dim,
                    dropout=cfg.dropout,
                    activation="gelu",
                    batch_first=True,
                    norm_first=True,
                )
                for _ in range(cfg.n_blocks)
            )
            self.norm = nn.LayerNorm(cfg.model_dim)

    def forward(self, x: Tensor, mask: Optional[Tensor] = None) -> Tensor:
        if not self.n_blocks:
            return x
        t = x.shape[-2]
        if t > self.pos.shape[0]:
            raise ValueError(f"sequence of {t} frames exceeds max_len {self.pos.shape[0]}")
        x = x + self.pos[:t]
        pad = None if mask is None else ~mask
        for block in self.blocks:
            x = block(x, src_key_padding_mask=pad)
        return self.norm(x)


class MRDFModel(nn.Module):
    """Encoders, projectors, fusion transformer and heads as one trainable bundle."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        fc = cfg.fusion
        self.audio_encoder = FrameEncoder(cfg.audio)
        self.visual_encoder = FrameEncoder(cfg.visual)
        self.audio_proj = nn.Linear(cfg.audio.out_dim, fc.embed_dim)
        self.visual_proj = nn.Linear(cfg.visual.out_dim, fc.embed_dim)
        self.av_proj = nn.Linear(2 * fc.embed_dim, fc.model_dim)
        self.transformer = TransformerStack(fc)
        self.head_m = nn.Linear(fc.model_dim, 2)
        self.head_a = nn.Linear(fc.embed_dim, 2)
        self.head_v = nn.Linear(fc.embed_dim, 2)

    def embed(self, audio: Tensor, visual: Tensor):
        f_a = self.audio_proj(self.audio_encoder(audio))
        f_v = self.visual_proj(self.visual_encoder(visual))
        return f_a, f_v

    def fuse(self, f_a: Tensor, f_v: Tensor, mask: Optional[Tensor] = None) -> Tensor:
        if f_a.shape[:-1] != f_v.shape[:-1]:
            raise ValueError(
                f"audio and visual streams differ in length: {tuple(f_a.shape)} vs {tuple(f_v.shape)}"
            )
        unbatched = f_a.ndim == 2
        if unbatched:
            f_a, f_v = f_a.unsqueeze(0), f_v.unsqueeze(0)
        f_m = self.transformer(self.av_proj(torch.cat([f_a, f_v], dim=-1)), mask)
        return f_m[0] if unbatched else f_m

    def classify(self, f_m: Tensor, pooled_a: Tensor, pooled_v: Tensor,
                 mask: Optional[Tensor] = None) -> HeadOutputs:
        if pooled_a.shape[-1] != self.head_a.in_features or pooled_v.shape[-1] != self.head_v.in_features:
            raise ValueError("pooled embedding width does not match the unimodal heads")
        if f_m.shape[-1] != self.head_m.in_features:
            raise ValueError("fused feature width does not match the multimodal head")
        pooled_m = temporal_mean(f_m, mask)
        return HeadOutputs(self.head_m(pooled_m), self.head_a(pooled_a), self.head_v(pooled_v))

    def forward(self, audio: Tensor, visual: Tensor, lengths: Optional[Tensor] = None) -> ModelOutputs:
        f_a, f_v = self.embed(audio, visual)
        if f_a.shape[1] != f_v.shape[1]:
            raise ValueError(f"unaligned batch: {f_a.shape[1]} audio vs {f_v.shape[1]} visual frames")
        mask = length_mask(lengths, f_a.shape[1], f_a.device)
        pooled_a = temporal_mean(f_a, mask)
        pooled_v = temporal_mean(f_v, mask)
        f_m = self.fuse(f_a, f_v, mask)
        heads = self.classify(f_m, pooled_a, pooled_v, mask)
        return ModelOutputs(f_a, f_v, pooled_a, pooled_v, f_m, temporal_mean(f_m, mask), heads)


def build_model(cfg: ModelConfig, seed: Optional[int] = None) -> MRDFModel:
    if seed is not None:
        torch.manual_seed(seed)
    return MRDFModel(cfg)
