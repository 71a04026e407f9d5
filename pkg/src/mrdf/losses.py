"""Objective terms: cosine similarity, cross-modality regularization,
within-modality regularization (margin or cross-entropy), detection
cross-entropy and their weighted total.

Every term accepts ``reduction="mean"`` (divide by the number of samples or
pairs) or ``reduction="sum"`` (literal sums).
"""

from __future__ import annotations

import math
import warnings
from typing import Tuple

import torch
import torch.nn.functional as F
from torch import Tensor

from mrdf.config import LossConfig
from mrdf.core_types import LossBreakdown


class ZeroNormWarning(RuntimeWarning):
    """A cosine similarity was requested for a zero-length vector (result set to 0)."""


class NonFiniteLossError(FloatingPointError, ValueError):
    def __init__(self, term: str, value: float):
        self.term = term
        super().__init__(f"loss term {term} is not finite ({value})")


def _safe_normalize(x: Tensor) -> Tuple[Tensor, Tensor]:
    norm = torch.linalg.vector_norm(x, dim=-1, keepdim=True)
    zero = norm == 0
    if bool(zero.any()):
        warnings.warn("zero-norm embedding; cosine similarity defined as 0", ZeroNormWarning, stacklevel=3)
    unit = x / torch.where(zero, torch.ones_like(norm), norm)
    return unit, zero.squeeze(-1)


def cosine(u: Tensor, v: Tensor) -> Tensor:
    """Row-wise cosine similarity along the last axis; zero vectors give 0."""
    u = torch.as_tensor(u)
    v = torch.as_tensor(v)
    if u.shape[-1] != v.shape[-1]:
        raise ValueError(f"dimension mismatch: {u.shape[-1]} vs {v.shape[-1]}")
    if not u.is_floating_point():
        u = u.double()
    if not v.is_floating_point():
        v = v.double()
    uu, _ = _safe_normalize(u)
    vv, _ = _safe_normalize(v)
    return (uu * vv).sum(-1)


def _reduce(x: Tensor, reduction: str, count: int | None = None) -> Tensor:
    if reduction == "sum":
        return x.sum()
    if reduction == "mean":
        n = x.numel() if count is None else count
        return x.sum() / max(n, 1)
    raise ValueError(f"unknown reduction {reduction!r}")


def _check_labels(y: Tensor, n: int, name: str) -> Tensor:
    y = torch.as_tensor(y)
    if y.shape != (n,):
        raise ValueError(f"{name} must have shape ({n},), got {tuple(y.shape)}")
    return y


def l_cmr(pooled_a: Tensor, pooled_v: Tensor, y_c: Tensor, reduction: str = "mean") -> Tensor:
    """Pull paired (y_c=1) audio/visual embeddings together, hinge unpaired ones at 0."""
    if pooled_a.shape != pooled_v.shape:
        raise ValueError(
            f"audio and visual embeddings differ in shape: {tuple(pooled_a.shape)} vs {tuple(pooled_v.shape)}"
        )
    y = _check_labels(y_c, pooled_a.shape[0], "y_c").to(pooled_a.dtype)
    d = cosine(pooled_a, pooled_v)
    per = y * (1.0 - d) + (1.0 - y) * torch.clamp(d, min=0.0)
    return _reduce(per, reduction)


def margin_from_similarity(sim: Tensor, y: Tensor, alpha: float = 0.0, reduction: str = "mean") -> Tensor:
    """Margin loss from a precomputed ``[B, B]`` similarity matrix (upper triangle used)."""
    b = sim.shape[0]
    if sim.shape != (b, b):
        raise ValueError(f"similarity matrix must be square, got {tuple(sim.shape)}")
    y = _check_labels(y, b, "y")
    iu = torch.triu_indices(b, b, offset=1, device=sim.device)
    d = sim[iu[0], iu[1]]
    same = (y[iu[0]] == y[iu[1]]).to(sim.dtype)
    per = same * (1.0 - d) + (1.0 - same) * torch.clamp(d - alpha, min=0.0)
    return _reduce(per, reduction)


def l_wmr_margin(emb: Tensor, y: Tensor, alpha: float = 0.0, reduction: str = "mean") -> Tensor:
    """Pairwise margin loss over unordered within-batch pairs i < j.

    Same-label pairs cost ``1 - d_ij``; different-label pairs cost
    ``max(0, d_ij - alpha)``.
    """
    b = emb.shape[0]
    _check_labels(y, b, "y")
    if b < 2:
        warnings.warn("within-modality margin loss needs >= 2 samples; returning 0", RuntimeWarning, stacklevel=2)
        return emb.sum() * 0.0
    unit, _ = _safe_normalize(emb)
    return margin_from_similarity(unit @ unit.T, y, alpha, reduction)


def _softmax_ce(logits: Tensor, target: Tensor, reduction: str, name: str) -> Tensor:
    if logits.ndim != 2:
        raise ValueError(f"{name}: logits must be [B x k], got {tuple(logits.shape)}")
    if not bool(torch.isfinite(logits).all()):
        raise NonFiniteLossError(name, float("nan"))
    target = _check_labels(target, logits.shape[0], "labels").long()
    return F.cross_entropy(logits, target, reduction=reduction)


def l_wmr_ce(logits_n: Tensor, y_n: Tensor, reduction: str = "mean") -> Tensor:
    """Cross-entropy of a unimodal head against its modality's label."""
    return _softmax_ce(logits_n, y_n, reduction, "l_wmr_ce")


def l_ce(logits_m: Tensor, y_m: Tensor, reduction: str = "mean") -> Tensor:
    """Cross-entropy of the multimodal head against the overall fake label."""
    return _softmax_ce(logits_m, y_m, reduction, "l_ce")


def total_loss(
    l_ce_value: float,
    l_cmr_value: float,
    l_wmr_a_value: float,
    l_wmr_v_value: float,
    weights: Tuple[float, float, float] = (1.0, 1.0, 1.0),
) -> LossBreakdown:
    """Weighted total ``w_ce*ce + w_cmr*cmr + w_wmr*(wmr_a + wmr_v)``."""
    w = tuple(float(x) for x in weights)
    if min(w) < 0 or max(w) <= 0:
        raise ValueError("weights must be nonnegative with at least one positive")
    return LossBreakdown(float(l_ce_value), float(l_cmr_value), float(l_wmr_a_value),
                         float(l_wmr_v_value), w)


def objective(outputs, y_m: Tensor, y_a: Tensor, y_v: Tensor, y_c: Tensor,
              cfg: LossConfig) -> Tuple[Tensor, LossBreakdown]:
    """Differentiable total for one batch plus its logged breakdown.

    ``cfg.variant`` selects the within-modality term (``margin`` or ``ce``);
    ``baseline`` keeps only the detection cross-entropy.
    """
    w_ce, w_cmr, w_wmr = cfg.effective_weights()
    red = cfg.reduction
    heads = outputs.heads
    parts = {"l_ce": l_ce(heads.logits_m, y_m, red)}
    zero = parts["l_ce"] * 0.0
    if cfg.variant == "baseline":
        parts.update(l_cmr=zero, l_wmr_a=zero, l_wmr_v=zero)
    else:
        parts["l_cmr"] = l_cmr(outputs.pooled_a, outputs.pooled_v, y_c, red)
        if cfg.variant == "margin":
            parts["l_wmr_a"] = l_wmr_margin(outputs.pooled_a, y_a, cfg.margin.alpha_a, red)
            parts["l_wmr_v"] = l_wmr_margin(outputs.pooled_v, y_v, cfg.margin.alpha_v, red)
        else:
            t_a, t_v = (y_a, y_v) if cfg.wmr_ce_target == "modality" else (y_m, y_m)
            parts["l_wmr_a"] = l_wmr_ce(heads.logits_a, t_a, red)
            parts["l_wmr_v"] = l_wmr_ce(heads.logits_v, t_v, red)
    values = {}
    for name, t in parts.items():
        v = float(t.detach())
        if not math.isfinite(v):
            raise NonFiniteLossError(name, v)
        values[name] = v
    total = w_ce * parts["l_ce"]
    if cfg.variant != "baseline":
        total = total + w_cmr * parts["l_cmr"] + w_wmr * (parts["l_wmr_a"] + parts["l_wmr_v"])
    breakdown = total_loss(values["l_ce"], values["l_cmr"], values["l_wmr_a"], values["l_wmr_v"],
                           (w_ce, w_cmr, w_wmr))
    return total, breakdown
