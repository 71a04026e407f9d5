"""Embedding dumps and their 2-D t-SNE projections."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Tuple

import numpy as np

from mrdf.config import Config
from mrdf.core_types import CATEGORIES
from mrdf.dataio import Manifest

STAGES = {
    "pre_fusion_audio": ("pooled_a", "audio"),
    "pre_fusion_visual": ("pooled_v", "visual"),
    "post_fusion": ("pooled_m", "audiovisual"),
}

CATEGORY_COLORS = {"FAFV": "tab:red", "FARV": "tab:orange", "RAFV": "tab:purple", "RARV": "tab:green"}


@dataclass
class EmbeddingDump:
    ids: List[str]
    categories: List[str]
    modality: str
    stage: str
    vectors: np.ndarray  # [N, D]

    def __post_init__(self):
        if not (len(self.ids) == len(self.categories) == len(self.vectors)):
            raise ValueError("ids, categories and vectors must have equal length")


def dump_embeddings(model, manifest: Manifest, stage: str, cfg: Config, dataset=None) -> EmbeddingDump:
    """One clip-level vector per sample at ``stage`` (inference mode)."""
    if stage not in STAGES:
        raise ValueError(f"unknown stage {stage!r}; choose from {', '.join(STAGES)}")
    from mrdf.trainer import ClipDataset, predict

    ds = dataset or ClipDataset(manifest, cfg.frontend.ratio)
    key, modality = STAGES[stage]
    vectors = predict(model, ds)[key].astype(np.float64)
    return EmbeddingDump(
        ids=[s.id for s in ds.samples],
        categories=[s.category.value for s in ds.samples],
        modality=modality,
        stage=stage,
        vectors=vectors,
    )


def write_dump(dump: EmbeddingDump, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["sample_id", "category", "modality", "stage",
                    *(f"e{i}" for i in range(dump.vectors.shape[1]))])
        for sid, cat, row in zip(dump.ids, dump.categories, dump.vectors):
            w.writerow([sid, cat, dump.modality, dump.stage, *(repr(float(x)) for x in row)])


def read_dump(path: str | Path) -> EmbeddingDump:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh, delimiter="\t"))
    body = rows[1:]
    if not body:
        raise ValueError(f"{path}: empty embedding dump")
    return EmbeddingDump(
        ids=[r[0] for r in body],
        categories=[r[1] for r in body],
        modality=body[0][2],
        stage=body[0][3],
        vectors=np.array([[float(x) for x in r[4:]] for r in body]),
    )


def tsne_2d(vectors: np.ndarray, perplexity: float = 30.0, seed: int = 0) -> np.ndarray:
    from sklearn.manifold import TSNE

    n = len(vectors)
    if n <= 3 * perplexity:
        raise ValueError(f"t-SNE with perplexity {perplexity} needs more than {3 * perplexity:g} points, got {n}")
    return TSNE(n_components=2, perplexity=perplexity, init="pca", random_state=seed).fit_transform(
        np.asarray(vectors, dtype=np.float64)
    )


def project_2d(dump: EmbeddingDump, out_prefix: str | Path, perplexity: float = 30.0,
               seed: int = 0) -> Tuple[Path, Path, np.ndarray]:
    """Write ``<prefix>.png`` and ``<prefix>_coords.tsv``; returns both paths and the coordinates."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    coords = tsne_2d(dump.vectors, perplexity, seed)
    out_prefix = Path(out_prefix)
    out_prefix.parent.mkdir(parents=True, exist_ok=True)
    coords_path = out_prefix.with_name(out_prefix.name + "_coords.tsv")
    with open(coords_path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["sample_id", "category", "modality", "x", "y"])
        for sid, cat, (x, y) in zip(dump.ids, dump.categories, coords):
            w.writerow([sid, cat, dump.modality, repr(float(x)), repr(float(y))])

    fig, ax = plt.subplots(figsize=(5, 5))
    cats = np.array(dump.categories)
    known = [c.value for c in CATEGORIES]
    for cat in known + sorted(set(cats) - set(known)):
        sel = cats == cat
        if sel.any():
            ax.scatter(coords[sel, 0], coords[sel, 1], s=8, label=cat,
                       color=CATEGORY_COLORS.get(cat))
    ax.set_title(f"{dump.stage} ({dump.modality})")
    ax.set_xticks([])
    ax.set_yticks([])
    ax.legend(markerscale=2, fontsize=8)
    img_path = out_prefix.with_name(out_prefix.name + ".png")
    fig.tight_layout()
    fig.savefig(img_path, dpi=120)
    plt.close(fig)
    return img_path, coords_path, coords
