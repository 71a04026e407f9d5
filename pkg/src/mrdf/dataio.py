"""Manifest ingestion, balanced sampling, identity-disjoint folds and synthetic data.

Manifest files are UTF-8 TSV with a header line::

    id  identity  category  audio_ref  visual_ref  t_a  t_v

Feature files are NumPy ``.npy`` containers (the header stores the ``(T, D)``
shape and dtype). Relative refs resolve against the manifest's directory.
"""

from __future__ import annotations

import csv
import logging
import os
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np

from mrdf.core_types import CATEGORIES, Category, Sample, labels_from_category

logger = logging.getLogger(__name__)

MANIFEST_FIELDS = ("id", "identity", "category", "audio_ref", "visual_ref", "t_a", "t_v")


class ManifestError(ValueError):
    """Malformed manifest content; ``row`` is the 1-based file line when known."""

    def __init__(self, message: str, row: int | None = None):
        self.row = row
        super().__init__(f"row {row}: {message}" if row is not None else message)


class InsufficientSamplesError(ValueError):
    def __init__(self, category: Category, have: int, need: int):
        self.category = category
        super().__init__(f"category {category.value} has {have} samples, {need} requested")


@dataclass(frozen=True)
class Manifest:
    samples: Tuple[Sample, ...]
    source: str = ""

    def __post_init__(self):
        object.__setattr__(self, "samples", tuple(self.samples))
        seen = set()
        for s in self.samples:
            if s.id in seen:
                raise ManifestError(f"duplicate sample id {s.id!r}")
            seen.add(s.id)

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    @property
    def identities(self) -> List[str]:
        return sorted({s.identity for s in self.samples})

    @property
    def root(self) -> Path:
        return Path(self.source).parent if self.source else Path(".")

    def category_counts(self) -> Dict[Category, int]:
        counts = Counter(s.category for s in self.samples)
        return {c: counts.get(c, 0) for c in CATEGORIES}

    def subset(self, ids: Sequence[str]) -> "Manifest":
        wanted = set(ids)
        return Manifest(tuple(s for s in self.samples if s.id in wanted), self.source)

    def resolve(self, ref: str) -> Path:
        p = Path(ref)
        return p if p.is_absolute() else self.root / p


@dataclass(frozen=True)
class FoldPlan:
    k: int
    folds: Tuple[Tuple[Tuple[str, ...], Tuple[str, ...]], ...]
    seed: int = 0


@dataclass(frozen=True)
class SynthSpec:
    n_identities: int = 50
    clips_per_category: int = 120
    frames: int = 8
    latent_dim: int = 8
    noise_scale: float = 1.0
    manipulation_shift: float = 1.5
    seed: int = 7
    audio_dim: int = 16
    visual_dim: int = 16
    audio_ratio: int = 4
    # defaults put a tiny baseline at roughly 0.8-0.9 AUC, leaving headroom for
    # cross-modal cues: visual fakes carry only a faint shift, so catching them
    # hinges on the identity component shared by genuine audio and video
    identity_scale: float = 3.0
    visual_shift_scale: float = 0.15

    def __post_init__(self):
        for name in ("n_identities", "clips_per_category", "frames", "latent_dim",
                     "audio_dim", "visual_dim", "audio_ratio"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if min(self.noise_scale, self.manipulation_shift, self.identity_scale, self.visual_shift_scale) < 0:
            raise ValueError("noise, shift and scale parameters must be >= 0")


def _parse_row(row: List[str], lineno: int, pairing_policy: str) -> Sample:
    if len(row) != len(MANIFEST_FIELDS):
        raise ManifestError(f"expected {len(MANIFEST_FIELDS)} fields, got {len(row)}", lineno)
    sid, identity, cat, audio_ref, visual_ref, t_a, t_v = (c.strip() for c in row)
    if not sid or not identity:
        raise ManifestError("empty id or identity", lineno)
    try:
        category = Category(cat)
    except ValueError:
        raise ManifestError(f"unknown category {cat!r}", lineno) from None
    try:
        t_a_i, t_v_i = int(t_a), int(t_v)
    except ValueError:
        raise ManifestError(f"frame counts must be integers, got {t_a!r}, {t_v!r}", lineno) from None
    if t_a_i < 1 or t_v_i < 1:
        raise ManifestError("frame counts must be >= 1", lineno)
    return Sample(
        id=sid,
        identity=identity,
        category=category,
        labels=labels_from_category(category, pairing_policy),
        audio_ref=audio_ref,
        visual_ref=visual_ref,
        t_a=t_a_i,
        t_v=t_v_i,
    )


def load_manifest(path: str | os.PathLike, pairing_policy: str = "any_fake_negative") -> Manifest:
    """Parse a manifest TSV. Referenced feature files are not touched here."""
    path = Path(path)
    samples: List[Sample] = []
    seen: Dict[str, int] = {}
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh, delimiter="\t")
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != MANIFEST_FIELDS:
            raise ManifestError(f"header must be {' '.join(MANIFEST_FIELDS)}", 1)
        for lineno, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            sample = _parse_row(row, lineno, pairing_policy)
            if sample.id in seen:
                raise ManifestError(
                    f"duplicate sample id {sample.id!r} (first on row {seen[sample.id]})", lineno
                )
            seen[sample.id] = lineno
            samples.append(sample)
    return Manifest(tuple(samples), str(path))


def write_manifest(manifest: Manifest, path: str | os.PathLike) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, delimiter="\t", lineterminator="\n")
        writer.writerow(MANIFEST_FIELDS)
        for s in manifest.samples:
            writer.writerow([s.id, s.identity, s.category.value, s.audio_ref, s.visual_ref, s.t_a, s.t_v])


def balanced_subset(manifest: Manifest, per_category: int, seed: int) -> Manifest:
    """Draw exactly ``per_category`` samples of each category (1:1:1:1)."""
    if per_category < 0:
        raise ValueError("per_category must be >= 0")
    by_cat: Dict[Category, List[Sample]] = defaultdict(list)
    for s in manifest.samples:
        by_cat[s.category].append(s)
    for c in CATEGORIES:
        if len(by_cat[c]) < per_category:
            raise InsufficientSamplesError(c, len(by_cat[c]), per_category)
    rng = np.random.default_rng(seed)
    chosen = set()
    for c in CATEGORIES:
        pool = by_cat[c]
        idx = rng.choice(len(pool), size=per_category, replace=False) if per_category else []
        chosen.update(pool[i].id for i in idx)
    # keep manifest order so the result does not depend on dict iteration
    return Manifest(tuple(s for s in manifest.samples if s.id in chosen), manifest.source)


def _partition_identities(identities: Sequence[str], k: int, seed: int) -> List[List[str]]:
    rng = np.random.default_rng(seed)
    order = list(identities)
    perm = rng.permutation(len(order))
    shuffled = [order[i] for i in perm]
    return [shuffled[i::k] for i in range(k)]


def identity_kfold(manifest: Manifest, k: int, seed: int) -> FoldPlan:
    """Split by identity into ``k`` near-equal groups; each group is one test fold."""
    if k < 2:
        raise ValueError("identity_kfold requires k >= 2")
    identities = manifest.identities
    if len(identities) < k:
        raise ValueError(f"need at least {k} identities, manifest has {len(identities)}")
    groups = _partition_identities(identities, k, seed)
    folds = []
    for g in groups:
        test_idents = set(g)
        test = tuple(s.id for s in manifest.samples if s.identity in test_idents)
        train = tuple(s.id for s in manifest.samples if s.identity not in test_idents)
        folds.append((train, test))
    return FoldPlan(k=k, folds=tuple(folds), seed=seed)


def holdout_identities(manifest: Manifest, fraction: float, seed: int) -> Tuple[Manifest, Manifest]:
    """Split off roughly ``fraction`` of identities (at least one) as a validation set."""
    identities = manifest.identities
    if fraction <= 0 or len(identities) < 2:
        return manifest, Manifest((), manifest.source)
    n_val = min(len(identities) - 1, max(1, int(round(fraction * len(identities)))))
    rng = np.random.default_rng(seed)
    val_idents = {identities[i] for i in rng.choice(len(identities), size=n_val, replace=False)}
    train = tuple(s for s in manifest.samples if s.identity not in val_idents)
    val = tuple(s for s in manifest.samples if s.identity in val_idents)
    return Manifest(train, manifest.source), Manifest(val, manifest.source)


def write_foldplan(plan: FoldPlan, path: str | os.PathLike) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(f"# k={plan.k} seed={plan.seed}\n")
        for i, (train, test) in enumerate(plan.folds):
            for sid in train:
                fh.write(f"{i}\ttrain\t{sid}\n")
            for sid in test:
                fh.write(f"{i}\ttest\t{sid}\n")


def read_foldplan(path: str | os.PathLike) -> FoldPlan:
    k = seed = None
    splits: Dict[int, Dict[str, List[str]]] = defaultdict(lambda: {"train": [], "test": []})
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            if line.startswith("#"):
                meta = dict(tok.split("=", 1) for tok in line[1:].split())
                k, seed = int(meta["k"]), int(meta["seed"])
                continue
            parts = line.split("\t")
            if len(parts) != 3 or parts[1] not in ("train", "test"):
                raise ManifestError("fold lines are 'fold_index<TAB>train|test<TAB>sample_id'", lineno)
            splits[int(parts[0])][parts[1]].append(parts[2])
    k = k if k is not None else len(splits)
    folds = tuple((tuple(splits[i]["train"]), tuple(splits[i]["test"])) for i in range(k))
    return FoldPlan(k=k, folds=folds, seed=seed or 0)


def save_features(path: str | os.PathLike, matrix: np.ndarray) -> None:
    matrix = np.asarray(matrix)
    if matrix.ndim < 2:
        raise ValueError("feature containers hold at least a (T, D) matrix")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    np.save(path, matrix, allow_pickle=False)


def load_features(path: str | os.PathLike) -> np.ndarray:
    """Load one per-clip feature container; missing files surface here, not at parse time."""
    if not Path(path).exists():
        raise FileNotFoundError(f"feature file not found: {path}")
    return np.load(path, allow_pickle=False)


def _trajectory(rng: np.random.Generator, frames: int, dim: int, base: np.ndarray) -> np.ndarray:
    # AR(1) latent path around ``base`` so neighbouring frames are correlated
    z = np.empty((frames, dim))
    z[0] = rng.standard_normal(dim)
    for t in range(1, frames):
        z[t] = 0.7 * z[t - 1] + np.sqrt(1 - 0.7**2) * rng.standard_normal(dim)
    return base + z


def generate_synthetic(spec: SynthSpec, out_dir: str | os.PathLike) -> Manifest:
    """Write a 1:1:1:1 synthetic corpus and its manifest under ``out_dir``.

    Real streams are linear mixes of one shared latent path (audio at
    ``audio_ratio`` sub-frames per visual frame). A manipulated stream is
    driven by an independent path and offset by ``manipulation_shift`` along
    a fixed per-modality direction (scaled by ``visual_shift_scale`` for the
    visual stream, so the two modalities can differ in how easy they are).
    """
    out_dir = Path(out_dir)
    feat_dir = out_dir / "features"
    feat_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)

    mix_a = rng.standard_normal((spec.latent_dim, spec.audio_dim)) / np.sqrt(spec.latent_dim)
    mix_v = rng.standard_normal((spec.latent_dim, spec.visual_dim)) / np.sqrt(spec.latent_dim)
    dir_a = rng.standard_normal(spec.audio_dim)
    dir_a /= np.linalg.norm(dir_a)
    dir_v = rng.standard_normal(spec.visual_dim)
    dir_v /= np.linalg.norm(dir_v)
    identity_base = spec.identity_scale * rng.standard_normal((spec.n_identities, spec.latent_dim))

    samples: List[Sample] = []
    n = 0
    for j in range(spec.clips_per_category):
        for ci, cat in enumerate(CATEGORIES):
            ident = (j * len(CATEGORIES) + ci) % spec.n_identities
            base = identity_base[ident]
            z = _trajectory(rng, spec.frames, spec.latent_dim, base)
            z_a = _trajectory(rng, spec.frames, spec.latent_dim, 0.0) if cat.fake_audio else z
            z_v = _trajectory(rng, spec.frames, spec.latent_dim, 0.0) if cat.fake_visual else z

            audio = np.repeat(z_a @ mix_a, spec.audio_ratio, axis=0)
            audio += spec.noise_scale * rng.standard_normal(audio.shape)
            visual = z_v @ mix_v + spec.noise_scale * rng.standard_normal((spec.frames, spec.visual_dim))
            if cat.fake_audio:
                audio += spec.manipulation_shift * dir_a
            if cat.fake_visual:
                visual += spec.visual_shift_scale * spec.manipulation_shift * dir_v

            sid = f"clip{n:05d}"
            a_ref = f"features/{sid}_audio.npy"
            v_ref = f"features/{sid}_visual.npy"
            save_features(out_dir / a_ref, audio.astype(np.float32))
            save_features(out_dir / v_ref, visual.astype(np.float32))
            samples.append(
                Sample(
                    id=sid,
                    identity=f"id{ident:03d}",
                    category=cat,
                    labels=labels_from_category(cat),
                    audio_ref=a_ref,
                    visual_ref=v_ref,
                    t_a=audio.shape[0],
                    t_v=visual.shape[0],
                )
            )
            n += 1
    manifest_path = out_dir / "manifest.tsv"
    manifest = Manifest(tuple(samples), str(manifest_path))
    write_manifest(manifest, manifest_path)
    logger.info("wrote %d synthetic clips to %s", len(samples), out_dir)
    return manifest
