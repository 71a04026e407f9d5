"""Detection metrics, per-category breakdowns and identity-disjoint cross-validation."""

from __future__ import annotations

import csv
import json
import logging
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy.stats import rankdata

from mrdf.config import Config
from mrdf.core_types import CATEGORIES, Category, Sample
from mrdf.dataio import FoldPlan, Manifest, holdout_identities, identity_kfold

logger = logging.getLogger(__name__)

CLASSES = ("real", "fake")


class MetricWarning(RuntimeWarning):
    """A metric had a zero denominator and was reported as 0."""


def auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """P(random fake scores above random real), ties counted 1/2 (Mann-Whitney U)."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    if s.shape != y.shape or s.ndim != 1:
        raise ValueError("scores and labels must be 1-D arrays of equal length")
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC is undefined unless both classes are present")
    ranks = rankdata(s)  # average ranks resolve ties as halves
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def confusion_matrix(y_true: Sequence[int], y_pred: Sequence[int]) -> np.ndarray:
    """2x2 counts, rows = true (real, fake), columns = predicted."""
    cm = np.zeros((2, 2), dtype=np.int64)
    np.add.at(cm, (np.asarray(y_true, dtype=int), np.asarray(y_pred, dtype=int)), 1)
    return cm


def _ratio(num: float, den: float, what: str, flags: List[str]) -> float:
    if den == 0:
        flags.append(what)
        warnings.warn(f"{what}: zero denominator, reported as 0", MetricWarning, stacklevel=3)
        return 0.0
    return num / den


def prf(confusion) -> tuple[Dict[str, Dict[str, float]], List[str]]:
    """Per-class precision/recall/F1 and the list of metrics that hit a zero denominator."""
    cm = np.asarray(confusion)
    if cm.shape != (2, 2) or (cm < 0).any():
        raise ValueError("confusion must be a 2x2 array of nonnegative counts")
    flags: List[str] = []
    out = {}
    for c, name in enumerate(CLASSES):
        tp = cm[c, c]
        p = _ratio(tp, cm[:, c].sum(), f"{name}.precision", flags)
        r = _ratio(tp, cm[c, :].sum(), f"{name}.recall", flags)
        f1 = _ratio(2 * p * r, p + r, f"{name}.f1", flags)
        out[name] = {"precision": float(p), "recall": float(r), "f1": float(f1)}
    return out, flags


def per_category_accuracy(preds: Sequence[int], samples: Sequence[Sample]) -> Dict[str, float]:
    """Accuracy (in percent) within each category present in ``samples``."""
    preds = np.asarray(preds)
    if len(preds) != len(samples):
        raise ValueError(f"{len(preds)} predictions for {len(samples)} samples")
    out = {}
    for c in CATEGORIES:
        idx = [i for i, s in enumerate(samples) if s.category == c]
        if idx:
            y = np.array([samples[i].labels.y_m for i in idx])
            out[c.value] = float(100.0 * (preds[idx] == y).mean())
    return out


@dataclass
class EvalReport:
    accuracy: float
    auc: float
    per_class: Dict[str, Dict[str, float]]
    per_category: Dict[str, float]
    confusion: List[List[int]]
    n: int
    flags: List[str] = field(default_factory=list)

    def flat(self) -> Dict[str, float]:
        out = {"accuracy": self.accuracy, "auc": self.auc, "n": float(self.n)}
        for cls, m in self.per_class.items():
            for k, v in m.items():
                out[f"{cls}.{k}"] = v
        for cat, v in self.per_category.items():
            out[f"category.{cat}"] = v
        return out


def build_report(scores: np.ndarray, preds: np.ndarray, samples: Sequence[Sample]) -> EvalReport:
    y = np.array([s.labels.y_m for s in samples])
    cm = confusion_matrix(y, preds)
    per_class, flags = prf(cm)
    try:
        a = auc(scores, y)
    except ValueError:
        a = float("nan")
        flags.append("auc")
    return EvalReport(
        accuracy=float(np.trace(cm) / len(y)),
        auc=a,
        per_class=per_class,
        per_category=per_category_accuracy(preds, samples),
        confusion=cm.tolist(),
        n=int(len(y)),
        flags=flags,
    )


def evaluate(model, manifest: Manifest, cfg: Config, dataset=None):
    """Score ``manifest`` with ``model``; returns (EvalReport, raw predictions)."""
    from mrdf.trainer import ClipDataset, predict

    ds = dataset or ClipDataset(manifest, cfg.frontend.ratio)
    p = predict(model, ds)
    return build_report(p["score"], p["pred"], ds.samples), p


@dataclass
class CrossValReport:
    per_fold: List[EvalReport]
    mean: Dict[str, float]
    std: Dict[str, float]
    extras: Dict[str, List[float]] = field(default_factory=dict)

    @property
    def k(self) -> int:
        return len(self.per_fold)


def aggregate(reports: Sequence[EvalReport]) -> tuple[Dict[str, float], Dict[str, float]]:
    """Unweighted mean and population std over folds, metric by metric."""
    keys = sorted({k for r in reports for k in r.flat()})
    mean, std = {}, {}
    for k in keys:
        vals = np.array([r.flat().get(k, np.nan) for r in reports], dtype=float)
        mean[k] = float(np.nanmean(vals))
        std[k] = float(np.nanstd(vals))
    return mean, std


class FoldError(RuntimeError):
    def __init__(self, fold: int, cause: Exception):
        self.fold = fold
        super().__init__(f"fold {fold}: {cause}")


def _paired_cosine(pa: np.ndarray, pv: np.ndarray) -> np.ndarray:
    na = np.linalg.norm(pa, axis=1)
    nv = np.linalg.norm(pv, axis=1)
    den = na * nv
    return np.where(den > 0, (pa * pv).sum(1) / np.where(den > 0, den, 1.0), 0.0)


def crossval(
    manifest: Manifest,
    k: int,
    cfg: Config,
    out_dir: str | Path | None = None,
    plan: Optional[FoldPlan] = None,
) -> CrossValReport:
    """Train and evaluate on each identity-disjoint fold, then aggregate.

    A ``val_fraction`` share of each fold's training identities is held out
    for model selection bookkeeping; the reported model is the final epoch.
    """
    from mrdf.trainer import ClipDataset, predict, train

    plan = plan or identity_kfold(manifest, k, cfg.eval.split_seed)
    by_id = {s.id: s for s in manifest.samples}
    reports: List[EvalReport] = []
    extras: Dict[str, List[float]] = {"cos_paired": [], "cos_unpaired": []}
    for i, (train_ids, test_ids) in enumerate(plan.folds):
        try:
            train_m = manifest.subset(train_ids)
            test_m = manifest.subset(test_ids)
            overlap = {by_id[s].identity for s in train_ids} & {by_id[s].identity for s in test_ids}
            if overlap:
                raise ValueError(f"identities {sorted(overlap)[:3]} appear in train and test")
            fit_m, val_m = holdout_identities(train_m, cfg.train.val_fraction, cfg.train.seed + i)
            fold_dir = Path(out_dir) / f"fold_{i}" if out_dir is not None else None
            state = train(fit_m, val_m if len(val_m) else None, cfg, fold_dir)
            test_ds = ClipDataset(test_m, cfg.frontend.ratio)
            p = predict(state.model, test_ds)
        except Exception as exc:
            raise FoldError(i, exc) from exc
        report = build_report(p["score"], p["pred"], test_ds.samples)
        reports.append(report)
        cos = _paired_cosine(p["pooled_a"], p["pooled_v"])
        rarv = np.array([s.category == Category.RARV for s in test_ds.samples])
        extras["cos_paired"].append(float(cos[rarv].mean()) if rarv.any() else float("nan"))
        extras["cos_unpaired"].append(float(cos[~rarv].mean()) if (~rarv).any() else float("nan"))
        if fold_dir is not None:
            write_report(report, fold_dir)
            write_predictions(test_ds.samples, p, fold_dir / "predictions.tsv")
        logger.info("fold %d: acc=%.4f auc=%.4f", i, report.accuracy, report.auc)
    mean, std = aggregate(reports)
    cv = CrossValReport(reports, mean, std, extras)
    if out_dir is not None:
        write_crossval(cv, out_dir)
    return cv


def write_report(report: EvalReport, out_dir: str | Path) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "report.txt", "w", encoding="utf-8") as fh:
        for key, value in report.flat().items():
            fh.write(f"{key}: {value:.6f}\n")
        fh.write(f"confusion: {report.confusion}\n")
        if report.flags:
            fh.write(f"flags: {', '.join(report.flags)}\n")
    with open(out_dir / "report.json", "w", encoding="utf-8") as fh:
        json.dump(asdict(report), fh, indent=2)


def write_predictions(samples: Sequence[Sample], p: Dict[str, np.ndarray], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(("sample_id", "score_fake", "pred", "y_m", "category"))
        for s, score, pred in zip(samples, p["score"], p["pred"]):
            w.writerow((s.id, f"{score:.8f}", int(pred), s.labels.y_m, s.category.value))


def write_crossval(cv: CrossValReport, out_dir: str | Path) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "crossval.txt", "w", encoding="utf-8") as fh:
        fh.write(f"folds: {cv.k}\n")
        for key in cv.mean:
            fh.write(f"{key}: {cv.mean[key]:.6f} +- {cv.std[key]:.6f}\n")
    rows = [r.flat() for r in cv.per_fold]
    keys = sorted({k for r in rows for k in r})
    with open(out_dir / "crossval.tsv", "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["fold", *keys])
        for i, r in enumerate(rows):
            w.writerow([i, *(f"{r.get(k, float('nan')):.6f}" for k in keys)])
        w.writerow(["mean", *(f"{cv.mean[k]:.6f}" for k in keys)])
        w.writerow(["std", *(f"{cv.std[k]:.6f}" for k in keys)])
