"""Adam, cosine annealing with warm restarts, and the pairwise training loop."""

from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import data as data_mod
from . import metrics
from .losses import LossConfig, cross_entropy_logits, differential_loss, total_loss
from .model import (ArchConfig, Model, categorical_logits, differential_head,
                    extract_features_batch, predict, save_checkpoint)
from .pairing import differential_features, enumerate_pairs
from .rngs import substream

log = logging.getLogger(__name__)

LOG_HEADER = ["epoch", "lr", "loss_cat", "loss_diff", "loss_total", "val_acc", "val_f1", "val_kappa"]


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class ScheduleConfig:
    lr_max: float = 1e-4
    lr_min: float = 0.0
    T_0: int = 10
    T_mult: int = 2

    def __post_init__(self):
        if not self.lr_max > self.lr_min >= 0:
            raise ValueError(f"need lr_max > lr_min >= 0, got {self.lr_max}, {self.lr_min}")
        if self.T_0 < 1 or self.T_mult < 1:
            raise ValueError("T_0 and T_mult must be >= 1")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    epochs: int = 50
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    arch: ArchConfig = field(default_factory=ArchConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    augment: str = "none"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")
        if self.loss.diff_loss_kind != "none" and self.batch_size < 2:
            raise ValueError("differential learning needs batch_size >= 2")
        if self.augment not in data_mod.AUGMENT_MODES:
            raise ValueError(f"unknown augmentation {self.augment!r}")


# --------------------------------------------------------------------- Adam


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, ad.Tensor], state: AdamState, lr: float,
              grads: dict[str, np.ndarray] | None = None) -> None:
    """One bias-corrected Adam update, in place. Uses ``p.grad`` unless ``grads`` is given."""
    if grads is None:
        grads = {name: p.grad for name, p in params.items()}
    for name, p in params.items():
        g = grads[name]
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise ad.ShapeError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            raise ad.NumericDomainError(f"non-finite gradient in parameter group {name}")
    state.t += 1
    t = state.t
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads[name]
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        step = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data -= step.astype(p.data.dtype)


# ---------------------------------------------------------------- schedule


def lr_at(epoch: float, cfg: ScheduleConfig) -> float:
    """Cosine annealing with warm restarts; cycle i lasts T_0 * T_mult**i epochs."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    T_i = cfg.T_0
    t_cur = float(epoch)
    while t_cur >= T_i:
        t_cur -= T_i
        T_i *= cfg.T_mult
    return cfg.lr_min + (cfg.lr_max - cfg.lr_min) * (1 + math.cos(math.pi * t_cur / T_i)) / 2


# ------------------------------------------------------------------- loops


def batch_indices(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Shuffled batches; a trailing batch of one sample is dropped."""
    order = rng.permutation(n)
    batches = [order[s:s + batch_size] for s in range(0, n, batch_size)]
    if batches and len(batches[-1]) < 2:
        batches.pop()
    return batches


def batch_losses(model: Model, images: np.ndarray, labels: np.ndarray, loss_cfg: LossConfig):
    """(L_cat, L_diff or None, L_total) for one batch; all extraction done once."""
    F = extract_features_batch(model, images)
    loss_cat = cross_entropy_logits(labels, categorical_logits(model, F))
    loss_diff = None
    if loss_cfg.diff_loss_kind != "none":
        pairs = enumerate_pairs(labels, model.config.num_classes)
        r_hat = differential_head(model, differential_features(F, pairs))
        loss_diff = differential_loss(pairs.r, r_hat, loss_cfg)
    return loss_cat, loss_diff, total_loss(loss_cat, loss_diff, loss_cfg.lam)


def train_epoch(model: Model, dataset: data_mod.Dataset, cfg: TrainConfig, state: AdamState,
                epoch: int = 0, lr: float | None = None) -> dict:
    """One pass over ``dataset``; returns mean losses over batches."""
    if len(dataset) == 0:
        raise TrainingError("empty training set")
    lr = lr_at(epoch, cfg.schedule) if lr is None else lr
    rng = substream(cfg.seed, "shuffle", epoch)
    aug_rng = substream(cfg.seed, "augment", epoch)
    sums = np.zeros(3)
    count = 0
    for b, idx in enumerate(batch_indices(len(dataset), cfg.batch_size, rng)):
        images = dataset.images[idx]
        if cfg.augment != "none":
            images = np.stack([data_mod.augment(img, cfg.augment, aug_rng) for img in images])
        labels = dataset.labels[idx]
        model.zero_grad()
        try:
            loss_cat, loss_diff, loss = batch_losses(model, images, labels, cfg.loss)
            ad.backward(loss)
            adam_step(model.params, state, lr)
        except (ArithmeticError, ad.NumericDomainError) as exc:
            raise TrainingError(f"epoch {epoch}, batch {b}: {exc}") from exc
        sums += (loss_cat.item(), 0.0 if loss_diff is None else loss_diff.item(), loss.item())
        count += 1
    mean = sums / max(count, 1)
    return {"loss_cat": mean[0], "loss_diff": mean[1], "loss_total": mean[2], "batches": count}


def new_adam(cfg: TrainConfig) -> AdamState:
    return AdamState(beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.adam_eps)


def evaluate_model(model: Model, dataset: data_mod.Dataset) -> dict:
    preds = predict(model, dataset.images)
    return metrics.evaluate(dataset.labels, preds, dataset.num_classes)


@dataclass
class TrainResult:
    log: list[dict]
    best_epoch: int
    best_val_acc: float
    best_path: Path
    final_path: Path
    log_path: Path


def _check_writable(out_dir: Path) -> None:
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        probe = out_dir / ".write-probe"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise OSError(f"output directory {out_dir} is not writable: {exc}") from exc


def _fmt(v: float) -> str:
    return f"{v:.6f}"


def train(model: Model, train_set: data_mod.Dataset, val_set: data_mod.Dataset,
          cfg: TrainConfig, out_dir: str | Path) -> TrainResult:
    """Run all epochs, logging validation metrics and keeping the best checkpoint."""
    out_dir = Path(out_dir)
    _check_writable(out_dir)
    best_path = out_dir / "best.ckpt"
    final_path = out_dir / "final.ckpt"
    log_path = out_dir / "metrics.csv"
    state = new_adam(cfg)
    rows: list[dict] = []
    best_acc, best_epoch = -1.0, -1
    save_checkpoint(model, best_path)
    with open(log_path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(LOG_HEADER)
        for epoch in range(cfg.epochs):
            lr = lr_at(epoch, cfg.schedule)
            summary = train_epoch(model, train_set, cfg, state, epoch, lr)
            ev = evaluate_model(model, val_set) if len(val_set) else {
                "acc": float("nan"), "f1": float("nan"), "kappa": float("nan")}
            row = {"epoch": epoch + 1, "lr": lr, **{k: summary[k] for k in ("loss_cat", "loss_diff", "loss_total")},
                   "val_acc": ev["acc"], "val_f1": ev["f1"], "val_kappa": ev["kappa"]}
            rows.append(row)
            writer.writerow([row["epoch"]] + [_fmt(row[k]) for k in LOG_HEADER[1:]])
            fh.flush()
            log.info("epoch %d lr=%.2e L_total=%.4f val_acc=%.4f", epoch + 1, lr,
                     row["loss_total"], row["val_acc"])
            if ev["acc"] > best_acc:
                best_acc, best_epoch = ev["acc"], epoch + 1
                save_checkpoint(model, best_path)
    save_checkpoint(model, final_path)
    return TrainResult(rows, best_epoch, best_acc, best_path, final_path, log_path)


def dior_threads(default: int | None = None) -> int:
    """Parallelism cap from DIOR_THREADS (default: all cores)."""
    raw = os.environ.get("DIOR_THREADS")
    if raw:
        return max(1, int(raw))
    return default or os.cpu_count() or 1
