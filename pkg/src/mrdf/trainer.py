"""Adam training loop with per-epoch checkpoints and exact resumption."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import torch

from mrdf import config as config_mod
from mrdf.config import Config
from mrdf.core_types import CATEGORIES, Sample
from mrdf.dataio import Manifest, load_features
from mrdf.frontend import align
from mrdf.fusion import MRDFModel, build_model
from mrdf.losses import objective

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


class ClipDataset:
    """All clips of a manifest, aligned and padded into dense tensors."""

    def __init__(self, manifest: Manifest, ratio: int = 4, dtype=torch.float32):
        if not len(manifest):
            raise ValueError("cannot build a dataset from an empty manifest")
        self.samples: List[Sample] = list(manifest.samples)
        audio, visual = [], []
        for s in self.samples:
            clip = align(load_features(manifest.resolve(s.audio_ref)),
                         load_features(manifest.resolve(s.visual_ref)), ratio)
            audio.append(torch.as_tensor(clip.audio_frames, dtype=dtype))
            visual.append(torch.as_tensor(clip.visual_frames, dtype=dtype))
        lengths = torch.tensor([a.shape[0] for a in audio])
        self.audio = torch.nn.utils.rnn.pad_sequence(audio, batch_first=True)
        self.visual = torch.nn.utils.rnn.pad_sequence(visual, batch_first=True)
        self.lengths = None if bool((lengths == lengths[0]).all()) else lengths
        labels = torch.tensor([s.labels.as_tuple() for s in self.samples], dtype=torch.long)
        self.y_m, self.y_a, self.y_v, self.y_c = labels.unbind(1)
        self.category_index = torch.tensor([CATEGORIES.index(s.category) for s in self.samples])

    def __len__(self) -> int:
        return len(self.samples)

    def batch(self, idx: torch.Tensor):
        lengths = None if self.lengths is None else self.lengths[idx]
        audio, visual = self.audio[idx], self.visual[idx]
        if lengths is not None:
            t = int(lengths.max())
            audio, visual = audio[:, :t], visual[:, :t]
        return audio, visual, lengths


@dataclass
class TrainState:
    model: MRDFModel
    optimizer: torch.optim.Optimizer
    cfg: Config
    epoch: int = 0
    step: int = 0
    history: List[Dict[str, float]] = field(default_factory=list)
    step_log: List[Dict[str, float]] = field(default_factory=list)
    shuffle_gen: torch.Generator = field(default_factory=torch.Generator)
    scheduler: Optional[torch.optim.lr_scheduler.LRScheduler] = None
    best_val_auc: float = -math.inf
    best_epoch: int = 0

    def rng_state(self) -> Dict[str, torch.Tensor]:
        return {"torch": torch.get_rng_state(), "shuffle": self.shuffle_gen.get_state()}


def new_state(cfg: Config) -> TrainState:
    tc = cfg.train
    torch.manual_seed(tc.seed)
    model = build_model(cfg.model)
    optimizer = torch.optim.Adam(model.parameters(), lr=tc.lr, betas=tc.betas, eps=tc.eps)
    scheduler = None
    if tc.lr_schedule == "cosine":
        scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(optimizer, T_max=tc.epochs)
    gen = torch.Generator().manual_seed(tc.seed + 1)
    return TrainState(model, optimizer, cfg, shuffle_gen=gen, scheduler=scheduler)


def _epoch_order(ds: ClipDataset, gen: torch.Generator, stratified: bool) -> torch.Tensor:
    perm = torch.randperm(len(ds), generator=gen)
    if not stratified:
        return perm
    # round-robin over categories so every batch mixes labels
    buckets = [perm[ds.category_index[perm] == c] for c in range(len(CATEGORIES))]
    order = []
    for i in range(max(len(b) for b in buckets)):
        order.extend(int(b[i]) for b in buckets if i < len(b))
    return torch.tensor(order)


@torch.no_grad()
def predict(model: MRDFModel, ds: ClipDataset, batch_size: int = 256) -> Dict[str, np.ndarray]:
    """Fake-class probabilities, argmax predictions and pooled embeddings."""
    was_training = model.training
    model.eval()
    out: Dict[str, list] = {k: [] for k in ("score", "pred", "pooled_a", "pooled_v", "pooled_m")}
    for start in range(0, len(ds), batch_size):
        idx = torch.arange(start, min(start + batch_size, len(ds)))
        audio, visual, lengths = ds.batch(idx)
        o = model(audio, visual, lengths)
        logits = o.heads.logits_m.double()
        out["score"].append(torch.softmax(logits, dim=-1)[:, 1])
        out["pred"].append(logits.argmax(dim=-1))
        out["pooled_a"].append(o.pooled_a)
        out["pooled_v"].append(o.pooled_v)
        out["pooled_m"].append(o.pooled_m)
    model.train(was_training)
    return {k: torch.cat(v).numpy() for k, v in out.items()}


def _validate(state: TrainState, val: Optional[ClipDataset]) -> Dict[str, float]:
    if val is None:
        return {}
    from mrdf.evaluation import auc

    p = predict(state.model, val)
    y = val.y_m.numpy()
    metrics = {"val_acc": float((p["pred"] == y).mean())}
    if 0 < y.sum() < len(y):
        metrics["val_auc"] = auc(p["score"], y)
    return metrics


def train_epoch(state: TrainState, ds: ClipDataset) -> Dict[str, float]:
    cfg = state.cfg
    model = state.model
    model.train()
    order = _epoch_order(ds, state.shuffle_gen, cfg.train.stratified_batches)
    bs = cfg.train.batch_size
    sums: Dict[str, float] = {}
    n_batches = 0
    for start in range(0, len(order), bs):
        idx = order[start:start + bs]
        if len(idx) < 2:
            continue  # pairwise terms need two samples
        audio, visual, lengths = ds.batch(idx)
        outputs = model(audio, visual, lengths)
        total, parts = objective(outputs, ds.y_m[idx], ds.y_a[idx], ds.y_v[idx], ds.y_c[idx], cfg.loss)
        state.optimizer.zero_grad(set_to_none=True)
        total.backward()
        state.optimizer.step()
        state.step += 1
        row = parts.as_dict()
        state.step_log.append({"step": state.step, **row})
        for k, v in row.items():
            sums[k] = sums.get(k, 0.0) + v
        n_batches += 1
    if state.scheduler is not None:
        state.scheduler.step()
    return {k: v / max(n_batches, 1) for k, v in sums.items()}


def train(
    manifest_train: Manifest,
    manifest_val: Optional[Manifest],
    cfg: Config,
    out_dir: str | Path | None = None,
    state: Optional[TrainState] = None,
    datasets: Optional[tuple] = None,
) -> TrainState:
    """Run (or continue) training up to ``cfg.train.epochs`` epochs.

    Checkpoints ``epoch_XXX.pt``, ``last.pt`` and ``best.pt`` (highest
    validation AUC) land in ``out_dir/checkpoints`` when ``out_dir`` is set.
    """
    if datasets is None:
        train_ds = ClipDataset(manifest_train, cfg.frontend.ratio)
        val_ds = ClipDataset(manifest_val, cfg.frontend.ratio) if manifest_val is not None and len(manifest_val) else None
    else:
        train_ds, val_ds = datasets
    if state is None:
        state = new_state(cfg)
    else:
        state.cfg = cfg
    ckpt_dir = Path(out_dir) / "checkpoints" if out_dir is not None else None
    while state.epoch < cfg.train.epochs:
        row = train_epoch(state, train_ds)
        state.epoch += 1
        row.update(_validate(state, val_ds))
        row["epoch"] = state.epoch
        state.history.append(row)
        logger.info("epoch %d: %s", state.epoch, {k: round(v, 4) for k, v in row.items()})
        improved = row.get("val_auc", -math.inf) > state.best_val_auc
        if improved:
            state.best_val_auc = row["val_auc"]
            state.best_epoch = state.epoch
        if ckpt_dir is not None:
            if cfg.train.checkpoint_every_epoch:
                save_checkpoint(state, ckpt_dir / f"epoch_{state.epoch:03d}.pt")
            save_checkpoint(state, ckpt_dir / "last.pt")
            if improved:
                save_checkpoint(state, ckpt_dir / "best.pt")
    return state


def save_checkpoint(state: TrainState, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    params = state.model.state_dict()
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "config": config_mod.flatten(state.cfg),
        "params": params,
        "shapes": {k: list(v.shape) for k, v in params.items()},
        "optimizer": state.optimizer.state_dict(),
        "scheduler": state.scheduler.state_dict() if state.scheduler is not None else None,
        "epoch": state.epoch,
        "step": state.step,
        "history": state.history,
        "step_log": state.step_log,
        "rng": state.rng_state(),
        "best_val_auc": state.best_val_auc,
        "best_epoch": state.best_epoch,
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)


def _read_checkpoint(path: str | Path) -> dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:  # torch raises several unrelated types for bad files
        raise CheckpointError(f"corrupt checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or "format_version" not in payload:
        raise CheckpointError(f"{path} is not a checkpoint file")
    if payload["format_version"] != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: checkpoint version {payload['format_version']}, expected {CHECKPOINT_VERSION}"
        )
    return payload


def _check_shapes(model: MRDFModel, payload: dict, path) -> None:
    expected = {k: list(v.shape) for k, v in model.state_dict().items()}
    saved = payload["shapes"]
    for name in sorted(set(expected) | set(saved)):
        if expected.get(name) != saved.get(name):
            raise CheckpointError(
                f"{path}: shape mismatch for {name}: checkpoint {saved.get(name)}, model {expected.get(name)}"
            )


def load_model(path: str | Path, cfg: Optional[Config] = None) -> tuple[MRDFModel, Config]:
    """Rebuild the model stored in a checkpoint (eval mode)."""
    payload = _read_checkpoint(path)
    saved_cfg = config_mod.apply_overrides(Config(), payload["config"])
    cfg = cfg or saved_cfg
    model = MRDFModel(cfg.model)
    _check_shapes(model, payload, path)
    model.load_state_dict(payload["params"])
    model.eval()
    return model, cfg


def resume(checkpoint_path: str | Path, cfg: Optional[Config] = None) -> TrainState:
    """Restore the full training state; pass ``cfg`` to train further under new settings."""
    payload = _read_checkpoint(checkpoint_path)
    saved_cfg = config_mod.apply_overrides(Config(), payload["config"])
    cfg = cfg or saved_cfg
    state = new_state(cfg)
    _check_shapes(state.model, payload, checkpoint_path)
    state.model.load_state_dict(payload["params"])
    state.optimizer.load_state_dict(payload["optimizer"])
    if state.scheduler is not None and payload["scheduler"] is not None:
        state.scheduler.load_state_dict(payload["scheduler"])
    state.epoch = payload["epoch"]
    state.step = payload["step"]
    state.history = list(payload["history"])
    state.step_log = list(payload["step_log"])
    state.best_val_auc = payload["best_val_auc"]
    state.best_epoch = payload["best_epoch"]
    torch.set_rng_state(payload["rng"]["torch"])
    state.shuffle_gen.set_state(payload["rng"]["shuffle"])
    return state
