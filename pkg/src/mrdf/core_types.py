"""Label algebra for the four manipulation categories and shared records."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Tuple

import numpy as np


class Category(str, enum.Enum):
    FAFV = "FAFV"
    FARV = "FARV"
    RAFV = "RAFV"
    RARV = "RARV"

    @property
    def fake_audio(self) -> bool:
        return self.value[0] == "F"

    @property
    def fake_visual(self) -> bool:
        return self.value[2] == "F"


CATEGORIES: Tuple[Category, ...] = tuple(Category)

PAIRING_POLICIES = ("any_fake_negative", "single_fake_negative")


@dataclass(frozen=True)
class LabelSet:
    y_m: int
    y_a: int
    y_v: int
    y_c: int

    def as_tuple(self) -> Tuple[int, int, int, int]:
        return (self.y_m, self.y_a, self.y_v, self.y_c)


def labels_from_category(
    category: Category | str, pairing_policy: str = "any_fake_negative"
) -> LabelSet:
    """Derive (y_m, y_a, y_v, y_c) for a category.

    ``any_fake_negative`` marks every clip with a manipulated modality as an
    unpaired (y_c = 0) sample. ``single_fake_negative`` only treats clips
    with exactly one manipulated modality as unpaired, so FAFV clips count
    as paired (both streams share a provenance).
    """
    category = Category(category)
    if pairing_policy not in PAIRING_POLICIES:
        raise ValueError(f"unknown pairing_policy {pairing_policy!r}")
    y_a = int(category.fake_audio)
    y_v = int(category.fake_visual)
    if pairing_policy == "any_fake_negative":
        y_c = int(not y_a and not y_v)
    else:
        y_c = int(y_a == y_v)
    return LabelSet(y_m=int(y_a or y_v), y_a=y_a, y_v=y_v, y_c=y_c)


@dataclass(frozen=True)
class Sample:
    id: str
    identity: str
    category: Category
    labels: LabelSet
    audio_ref: str
    visual_ref: str
    t_a: int
    t_v: int

    def __post_init__(self):
        if self.t_a < 1 or self.t_v < 1:
            raise ValueError(f"sample {self.id}: frame counts must be >= 1")
        if self.labels.as_tuple()[:3] != labels_from_category(self.category).as_tuple()[:3]:
            raise ValueError(f"sample {self.id}: labels inconsistent with {self.category.value}")


@dataclass(frozen=True)
class FeatureClip:
    """Aligned frame features of one clip with their temporal means."""

    f_a: np.ndarray
    f_v: np.ndarray
    pooled_a: np.ndarray = field(init=False)
    pooled_v: np.ndarray = field(init=False)

    def __post_init__(self):
        if self.f_a.ndim != 2 or self.f_v.ndim != 2:
            raise ValueError("frame features must be [T x D] matrices")
        if self.f_a.shape[0] != self.f_v.shape[0]:
            raise ValueError(
                f"unaligned clip: audio has {self.f_a.shape[0]} frames, visual {self.f_v.shape[0]}"
            )
        object.__setattr__(self, "pooled_a", self.f_a.mean(axis=0))
        object.__setattr__(self, "pooled_v", self.f_v.mean(axis=0))

    @property
    def T(self) -> int:
        return self.f_a.shape[0]


@dataclass(frozen=True)
class LossBreakdown:
    l_ce: float
    l_cmr: float
    l_wmr_a: float
    l_wmr_v: float
    weights: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    total: float = field(init=False)

    def __post_init__(self):
        w_ce, w_cmr, w_wmr = self.weights
        total = w_ce * self.l_ce + w_cmr * self.l_cmr + w_wmr * (self.l_wmr_a + self.l_wmr_v)
        object.__setattr__(self, "total", float(total))

    def as_dict(self) -> dict:
        return {
            "l_ce": self.l_ce,
            "l_cmr": self.l_cmr,
            "l_wmr_a": self.l_wmr_a,
            "l_wmr_v": self.l_wmr_v,
            "total": self.total,
        }
