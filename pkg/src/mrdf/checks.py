"""Independent reference implementations and the bundled self-test.

The oracles here are deliberately naive (explicit Python loops, ``math``
scalars) so they share no code path with the vectorized kernels they check.
"""

from __future__ import annotations

import math
import time
import warnings
from dataclasses import dataclass
from typing import Callable, List, Sequence

import numpy as np
import torch

from mrdf import losses
from mrdf.core_types import CATEGORIES, Category, labels_from_category
from mrdf.evaluation import auc


def naive_cosine(u: Sequence[float], v: Sequence[float]) -> float:
    dot = sum(a * b for a, b in zip(u, v))
    nu = math.sqrt(sum(a * a for a in u))
    nv = math.sqrt(sum(b * b for b in v))
    return 0.0 if nu == 0 or nv == 0 else dot / (nu * nv)


def naive_l_cmr(pa, pv, y_c, reduction="mean") -> float:
    total = 0.0
    for a, v, y in zip(pa, pv, y_c):
        d = naive_cosine(a, v)
        total += (1.0 - d) if y == 1 else max(0.0, d)
    return total / len(y_c) if reduction == "mean" else total


def naive_l_wmr_margin(emb, y, alpha=0.0, reduction="mean") -> float:
    total, pairs = 0.0, 0
    for i in range(len(emb)):
        for j in range(i + 1, len(emb)):
            d = naive_cosine(emb[i], emb[j])
            total += (1.0 - d) if y[i] == y[j] else max(0.0, d - alpha)
            pairs += 1
    return total / pairs if reduction == "mean" and pairs else total


def naive_softmax_ce(logits, y, reduction="mean") -> float:
    total = 0.0
    for row, label in zip(logits, y):
        m = max(row)
        lse = m + math.log(sum(math.exp(z - m) for z in row))
        total += lse - row[int(label)]
    return total / len(y) if reduction == "mean" else total


def brute_auc(scores, labels) -> float:
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    if not pos or not neg:
        raise ValueError("both classes required")
    wins = 0.0
    for p in pos:
        for n in neg:
            wins += 1.0 if p > n else 0.5 if p == n else 0.0
    return wins / (len(pos) * len(neg))


def central_difference(f: Callable[[np.ndarray], float], x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Elementwise central finite-difference gradient of scalar ``f`` at ``x``."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    with torch.no_grad():  # probes never need a graph
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = f(x)
            flat[i] = orig - step
            fm = f(x)
            flat[i] = orig
            g[i] = (fp - fm) / (2 * step)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    """Norm-wise relative error ``|a - b| / max(|a|, |b|, floor)``."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), floor))


def autograd_vs_fd(fn: Callable[[torch.Tensor], torch.Tensor], x: np.ndarray, step: float = 1e-5) -> float:
    """Relative error between autograd and central differences for ``fn`` at ``x``."""
    t = torch.tensor(x, dtype=torch.float64, requires_grad=True)
    fn(t).backward()
    analytic = t.grad.numpy()
    numeric = central_difference(lambda z: float(fn(torch.from_numpy(z))), x, step)
    return relative_error(analytic, numeric)


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.name}: {self.detail} ({self.seconds:.2f}s)"


def _random_batch(rng: np.random.Generator, max_b: int = 32, max_d: int = 64, min_b: int = 1):
    b = int(rng.integers(min_b, max_b + 1))
    d = int(rng.integers(1, max_d + 1))
    return b, d


def check_loss_oracles(n_batches: int = 100, seed: int = 0, tol: float = 1e-9) -> CheckResult:
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    worst = {"l_cmr": 0.0, "l_wmr_margin": 0.0, "l_wmr_ce": 0.0, "l_ce": 0.0}
    for _ in range(n_batches):
        b, d = _random_batch(rng, min_b=2)
        pa, pv = rng.standard_normal((b, d)), rng.standard_normal((b, d))
        y = rng.integers(0, 2, b)
        logits = 3 * rng.standard_normal((b, 2))
        alpha = float(rng.uniform(-0.5, 0.5))
        red = "mean" if rng.random() < 0.5 else "sum"
        ta, tv, ty, tl = (torch.from_numpy(pa), torch.from_numpy(pv), torch.from_numpy(y), torch.from_numpy(logits))
        pairs = {
            "l_cmr": (losses.l_cmr(ta, tv, ty, red), naive_l_cmr(pa.tolist(), pv.tolist(), y.tolist(), red)),
            "l_wmr_margin": (losses.l_wmr_margin(ta, ty, alpha, red),
                             naive_l_wmr_margin(pa.tolist(), y.tolist(), alpha, red)),
            "l_wmr_ce": (losses.l_wmr_ce(tl, ty, red), naive_softmax_ce(logits.tolist(), y.tolist(), red)),
            "l_ce": (losses.l_ce(tl, ty, red), naive_softmax_ce(logits.tolist(), y.tolist(), red)),
        }
        for name, (fast, slow) in pairs.items():
            worst[name] = max(worst[name], abs(float(fast) - slow))
    ok = all(v <= tol for v in worst.values())
    detail = ", ".join(f"{k} max|diff|={v:.1e}" for k, v in worst.items())
    return CheckResult("loss oracle equivalence", ok, detail, time.perf_counter() - t0)


def check_loss_gradients(n_instances: int = 20, seed: int = 0, tol: float = 1e-4,
                         step: float = 1e-5) -> CheckResult:
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    worst = {"cosine": 0.0, "l_cmr": 0.0, "l_wmr_margin": 0.0, "l_wmr_ce": 0.0, "l_ce": 0.0}
    for _ in range(n_instances):
        b, d = _random_batch(rng, max_b=8, max_d=12, min_b=2)
        pa, pv = rng.standard_normal((b, d)), rng.standard_normal((b, d))
        y = torch.from_numpy(rng.integers(0, 2, b))
        logits = 2 * rng.standard_normal((b, 2))
        alpha = float(rng.uniform(-0.3, 0.3))
        tv = torch.from_numpy(pv)
        ta = torch.from_numpy(pa)
        worst["cosine"] = max(worst["cosine"], autograd_vs_fd(lambda x: losses.cosine(x[0], tv[0]), pa, step))
        worst["l_cmr"] = max(worst["l_cmr"], autograd_vs_fd(lambda x: losses.l_cmr(x, tv, y), pa, step),
                             autograd_vs_fd(lambda x: losses.l_cmr(ta, x, y), pv, step))
        worst["l_wmr_margin"] = max(worst["l_wmr_margin"],
                                    autograd_vs_fd(lambda x: losses.l_wmr_margin(x, y, alpha), pa, step))
        worst["l_wmr_ce"] = max(worst["l_wmr_ce"], autograd_vs_fd(lambda x: losses.l_wmr_ce(x, y), logits, step))
        worst["l_ce"] = max(worst["l_ce"], autograd_vs_fd(lambda x: losses.l_ce(x, y), logits, step))
    ok = all(v <= tol for v in worst.values())
    detail = ", ".join(f"{k} rel={v:.1e}" for k, v in worst.items())
    return CheckResult("loss gradients vs finite differences", ok, detail, time.perf_counter() - t0)


def check_auc_oracle(n_sets: int = 50, seed: int = 0, tol: float = 1e-12, max_n: int = 1000) -> CheckResult:
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    worst = 0.0
    for i in range(n_sets):
        n = int(rng.integers(2, max_n + 1))
        labels = rng.integers(0, 2, n)
        labels[0], labels[1] = 0, 1
        # every other set uses coarse scores so ties are exercised
        scores = rng.random(n) if i % 2 else np.round(rng.random(n), 1)
        worst = max(worst, abs(auc(scores, labels) - brute_auc(scores.tolist(), labels.tolist())))
    return CheckResult("AUC vs pairwise oracle", worst <= tol, f"max|diff|={worst:.1e}", time.perf_counter() - t0)


TRUTH_TABLE = {
    Category.RARV: (0, 0, 0, 1),
    Category.RAFV: (1, 0, 1, 0),
    Category.FARV: (1, 1, 0, 0),
    Category.FAFV: (1, 1, 1, 0),
}


def check_label_algebra() -> CheckResult:
    t0 = time.perf_counter()
    bad = []
    for c in CATEGORIES:
        ls = labels_from_category(c)
        if ls.as_tuple() != TRUTH_TABLE[c]:
            bad.append(f"{c.value} table")
        if ls.y_m != int(ls.y_a or ls.y_v) or ls.y_c != int((not ls.y_a) and (not ls.y_v)):
            bad.append(f"{c.value} algebra")
    if len({labels_from_category(c) for c in CATEGORIES}) != len(CATEGORIES):
        bad.append("not injective")
    return CheckResult("label algebra", not bad, "ok" if not bad else "; ".join(bad), time.perf_counter() - t0)


def run_checks(seed: int = 0) -> List[CheckResult]:
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", losses.ZeroNormWarning)
        return [
            check_label_algebra(),
            check_loss_oracles(seed=seed),
            check_loss_gradients(seed=seed),
            check_auc_oracle(seed=seed),
        ]
