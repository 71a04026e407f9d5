"""Acceptance criteria, one test each.

Every test records a ``PASS``/``FAIL`` line (shown in the terminal summary)
carrying the measured quantity next to its threshold.
"""

import time
import warnings

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from mrdf.checks import check_auc_oracle, check_loss_gradients, check_loss_oracles
from mrdf.config import tiny_config
from mrdf.core_types import CATEGORIES, Category, Sample, labels_from_category
from mrdf.dataio import Manifest, SynthSpec, balanced_subset, generate_synthetic, holdout_identities, identity_kfold
from mrdf.evaluation import crossval
from mrdf.losses import ZeroNormWarning
from mrdf.trainer import train

# Synthetic corpus for the end-to-end experiment (criterion 7): generator defaults, seed 7.
E2E_SPEC = dict(seed=7)
E2E_SEEDS = (0, 1, 2)
E2E_BUDGET_S = 600.0


def record(number, title, passed, detail, seconds):
    line = f"[{'PASS' if passed else 'FAIL'}] criterion {number} {title}: {detail} ({seconds:.1f}s)"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert passed, line


def test_criterion_1_loss_oracles():
    t0 = time.perf_counter()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ZeroNormWarning)
        r = check_loss_oracles(n_batches=100, tol=1e-9)
    dt = time.perf_counter() - t0
    record(1, "loss oracle equivalence (tol 1e-9, < 10 s)", r.passed and dt < 10, r.detail, dt)


def test_criterion_2_gradients():
    t0 = time.perf_counter()
    r = check_loss_gradients(n_instances=20, tol=1e-4, step=1e-5)
    dt = time.perf_counter() - t0
    record(2, "gradients vs central differences (rel 1e-4, < 30 s)", r.passed and dt < 30, r.detail, dt)


def test_criterion_3_auc_oracle():
    t0 = time.perf_counter()
    r = check_auc_oracle(n_sets=50, tol=1e-12, max_n=1000)
    dt = time.perf_counter() - t0
    record(3, "AUC vs pairwise oracle (tol 1e-12, < 10 s)", r.passed and dt < 10, r.detail, dt)


def test_criterion_4_label_algebra():
    t0 = time.perf_counter()
    # (y_m, y_a, y_v, y_c), written out by hand
    table = {
        "RARV": (0, 0, 0, 1),
        "RAFV": (1, 0, 1, 0),
        "FARV": (1, 1, 0, 0),
        "FAFV": (1, 1, 1, 0),
    }
    bad = []
    for c in CATEGORIES:
        ls = labels_from_category(c)
        if ls.as_tuple() != table[c.value]:
            bad.append(c.value)
        if ls.y_m != (ls.y_a | ls.y_v) or ls.y_c != ((1 - ls.y_a) & (1 - ls.y_v)):
            bad.append(c.value + " algebra")
    record(4, "label algebra truth table", not bad and len(CATEGORIES) == 4,
           "4/4 rows match" if not bad else f"mismatch: {bad}", time.perf_counter() - t0)


def _random_manifest(rng):
    n_ids = int(rng.integers(2, 30))
    samples = []
    for i in range(int(rng.integers(n_ids, 200))):
        ident = f"p{i % n_ids if i < n_ids else rng.integers(n_ids)}"
        cat = CATEGORIES[int(rng.integers(4))]
        samples.append(Sample(f"c{i}", ident, cat, labels_from_category(cat), "a.npy", "v.npy", 4, 1))
    return Manifest(tuple(samples), "<memory>")


def test_criterion_5_protocol_properties():
    t0 = time.perf_counter()
    rng = np.random.default_rng(5)
    failures = []
    for trial in range(200):
        m = _random_manifest(rng)
        k = int(rng.integers(2, min(len(m.identities), 10) + 1))
        seed = int(rng.integers(1 << 30))
        plan = identity_kfold(m, k, seed)
        ident = {s.id: s.identity for s in m.samples}
        tests = [set(test) for _, test in plan.folds]
        if set().union(*tests) != {s.id for s in m.samples} or sum(map(len, tests)) != len(m):
            failures.append(f"{trial}: coverage")
        for train_ids, test_ids in plan.folds:
            if {ident[s] for s in train_ids} & {ident[s] for s in test_ids}:
                failures.append(f"{trial}: identity leak")
            if set(train_ids) | set(test_ids) != set(ident):
                failures.append(f"{trial}: fold does not partition")
        if identity_kfold(m, k, seed).folds != plan.folds:
            failures.append(f"{trial}: kfold not deterministic")
        per_cat = min(m.category_counts().values())
        if per_cat > 0:
            n = int(rng.integers(1, per_cat + 1))
            sub = balanced_subset(m, n, seed)
            if set(sub.category_counts().values()) != {n}:
                failures.append(f"{trial}: histogram {sub.category_counts()}")
            if balanced_subset(m, n, seed).samples != sub.samples:
                failures.append(f"{trial}: balance not deterministic")
    record(5, "identity-disjoint folds and balanced sampling over 200 manifests", not failures,
           "all properties hold" if not failures else "; ".join(failures[:5]), time.perf_counter() - t0)


def test_criterion_6_degenerate_weights(tmp_path):
    t0 = time.perf_counter()
    m = generate_synthetic(SynthSpec(n_identities=10, clips_per_category=16, frames=6, seed=7), tmp_path)
    fit, val = holdout_identities(m, 0.2, 0)
    common = {"train.epochs": 3, "train.batch_size": 16}
    base = train(fit, val, tiny_config(**common, **{"loss.variant": "baseline"})).step_log
    worst = 0.0
    for variant in ("ce", "margin"):
        zeroed = train(fit, val, tiny_config(**common, **{"loss.variant": variant, "loss.weights.cmr": 0.0,
                                                          "loss.weights.wmr": 0.0})).step_log
        assert len(zeroed) == len(base)
        worst = max(worst, max(abs(a["total"] - b["total"]) for a, b in zip(base, zeroed)))
    record(6, "zero regularizer weights reproduce baseline totals (tol 1e-9)", worst <= 1e-9,
           f"{len(base)} steps x 2 variants, max|diff|={worst:.1e}", time.perf_counter() - t0)


@pytest.fixture(scope="module")
def e2e(tmp_path_factory):
    t0 = time.perf_counter()
    m = generate_synthetic(SynthSpec(**E2E_SPEC), tmp_path_factory.mktemp("e2e"))
    runs = {}
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for seed in E2E_SEEDS:
            for variant in ("baseline", "ce", "margin"):
                cfg = tiny_config(**{"loss.variant": variant, "train.seed": seed})
                runs[variant, seed] = crossval(m, 5, cfg)
    return m, runs, time.perf_counter() - t0


def test_criterion_7_synthetic_end_to_end(e2e):
    m, runs, seconds = e2e
    cfg = tiny_config()
    fu = cfg.model.fusion
    shape_ok = (cfg.model.audio.arch == cfg.model.visual.arch == "small_mlp" and fu.n_blocks == 2
                and fu.model_dim == 64 and cfg.train.epochs == 10 and cfg.train.batch_size == 16
                and min(m.category_counts().values()) >= 80 and len(m.identities) >= 50)
    auc = {k: r.mean["auc"] for k, r in runs.items()}
    rafv = {k: r.mean["category.RAFV"] for k, r in runs.items()}
    base = [auc["baseline", s] for s in E2E_SEEDS]
    band = all(0.75 <= a <= 0.95 for a in base)
    gains = {v: [auc[v, s] - auc["baseline", s] for s in E2E_SEEDS] for v in ("ce", "margin")}
    a_ok = all(g >= 0.01 for gs in gains.values() for g in gs)
    gaps = {v: [np.nanmean(runs[v, s].extras["cos_paired"]) - np.nanmean(runs[v, s].extras["cos_unpaired"])
                for s in E2E_SEEDS] for v in ("ce", "margin")}
    b_ok = all(g >= 0.2 for gs in gaps.values() for g in gs)
    rafv_mean = {v: float(np.mean([rafv[v, s] for s in E2E_SEEDS])) for v in ("baseline", "ce", "margin")}
    # per seed, each regularized variant must beat that seed's baseline
    c_ok = all(rafv[v, s] > rafv["baseline", s] for v in ("ce", "margin") for s in E2E_SEEDS)
    t_ok = seconds < E2E_BUDGET_S
    detail = (
        f"baseline AUC {np.round(base, 3).tolist()} (band {'ok' if band else 'MISSED'}); "
        f"AUC gain ce {np.round(gains['ce'], 3).tolist()}, margin {np.round(gains['margin'], 3).tolist()} "
        f"(need >= 0.01 each); cosine gap min {min(min(g) for g in gaps.values()):.3f} (need >= 0.2); "
        f"RAFV acc (seed mean) baseline {rafv_mean['baseline']:.1f} vs ce {rafv_mean['ce']:.1f}, "
        f"margin {rafv_mean['margin']:.1f}, improved on {'every' if c_ok else 'NOT every'} seed; runtime {seconds:.0f}s (< {E2E_BUDGET_S:.0f}s)"
    )
    record(7, "synthetic end-to-end", shape_ok and band and a_ok and b_ok and c_ok and t_ok, detail, seconds)


def test_criterion_8_determinism(tmp_path, capsys):
    from mrdf.cli import run

    t0 = time.perf_counter()
    diffs = []
    outs = {}
    for rep in ("a", "b"):
        d = tmp_path / rep
        assert run(["synth", "--seed", "7", "--clips", "12", "--identities", "10", "--frames", "6",
                    "--out", str(d / "data")]) == 0
        assert run(["train", "--data", str(d / "data"), "--out", str(d / "train"), "--preset", "tiny",
                    "--epochs", "2", "--variant", "margin"]) == 0
        assert run(["eval", "--data", str(d / "data"), "--checkpoint", str(d / "train/checkpoints/last.pt"),
                    "--out", str(d / "eval")]) == 0
        assert run(["crossval", "--data", str(d / "data"), "--out", str(d / "cv"), "--preset", "tiny",
                    "--epochs", "2", "--variant", "ce", "--k", "5"]) == 0
        outs[rep] = d
    capsys.readouterr()
    a, b = outs["a"], outs["b"]
    for rel in ["data/manifest.tsv", "data/features/clip00000_audio.npy", "train/history.json",
                "eval/report.txt", "eval/predictions.tsv", "cv/crossval.tsv", "cv/fold_3/predictions.tsv"]:
        if (a / rel).read_bytes() != (b / rel).read_bytes():
            diffs.append(rel)
    record(8, "repeated commands give identical outputs", not diffs,
           "synth, train, eval, crossval outputs byte-identical" if not diffs else f"differs: {diffs}",
           time.perf_counter() - t0)
