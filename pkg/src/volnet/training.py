"""Adam optimization loop with deterministic seeding and epoch scheduling.

Given the same config and seed, two runs produce identical shuffles,
identical updates, and therefore identical loss curves (bit-exact in f64).
The per-epoch records go to a line-delimited log plus a JSON summary.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .architectures import Model, save_checkpoint
from .layers import softmax, softmax_crossentropy
from .tensor import ShapeError


class TrainingDiverged(RuntimeError):
    """Loss became NaN; carries the path of the last good checkpoint."""

    def __init__(self, message: str, checkpoint_path: str | None = None):
        super().__init__(message)
        self.checkpoint_path = checkpoint_path


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 8
    lr_start: float = 1e-4
    lr_end: float = 1e-6
    lr_schedule: str = "cosine"
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.lr_end > self.lr_start:
            raise ValueError("lr_end must not exceed lr_start")
        if self.lr_schedule not in ("cosine", "linear"):
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Learning rate for an epoch: lr_start at 0, lr_end at the last epoch,
    monotone nonincreasing in between (cosine or linear)."""
    if not 0 <= epoch < cfg.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.epochs})")
    if cfg.epochs == 1:
        return cfg.lr_start
    t = epoch / (cfg.epochs - 1)
    if cfg.lr_schedule == "linear":
        return cfg.lr_start + (cfg.lr_end - cfg.lr_start) * t
    return cfg.lr_end + (cfg.lr_start - cfg.lr_end) * 0.5 * (1.0 + math.cos(math.pi * t))


class Adam:
    """Bias-corrected first/second moment update, in place on Param.data."""

    def __init__(self, params, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.params = list(params)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {p.name: np.zeros_like(p.data) for p in self.params}
        self.v = {p.name: np.zeros_like(p.data) for p in self.params}

    def step(self, lr: float):
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for p in self.params:
            g = p.grad
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient in {p.name}")
            m = self.m[p.name]
            v = self.v[p.name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.zero_grad()


def adam_step(params, state: Adam, lr: float):
    """Single optimizer step over params whose .grad buffers are populated."""
    state.step(lr)
    return state


def _check_dataset(x: np.ndarray, y: np.ndarray):
    if x.ndim != 5:
        raise ShapeError(f"expected volumes (N,C,D,H,W), got {x.shape}")
    if len(x) == 0:
        raise ValueError("dataset is empty")
    y = np.asarray(y)
    if y.shape != (len(x),):
        raise ShapeError(f"labels shape {y.shape} != ({len(x)},)")
    if y.size and not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    return y.astype(np.int64)


def evaluate(model: Model, x: np.ndarray, y: np.ndarray,
             batch_size: int = 8) -> tuple[float, float, np.ndarray]:
    """Eval-mode mean loss, accuracy, and positive-class scores."""
    y = _check_dataset(x, y)
    total_loss = 0.0
    correct = 0
    scores = np.empty(len(x), dtype=np.float64)
    for lo in range(0, len(x), batch_size):
        xb = x[lo:lo + batch_size]
        yb = y[lo:lo + batch_size]
        logits = model.forward(xb, mode="eval")
        loss, _ = softmax_crossentropy(logits, yb)
        total_loss += loss * len(xb)
        probs = softmax(logits)
        scores[lo:lo + len(xb)] = probs[:, 1]
        correct += int((logits.argmax(axis=1) == yb).sum())
    return total_loss / len(x), correct / len(x), scores


@dataclass
class TrainReport:
    epochs: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    best_acc: float = -1.0
    checkpoint_paths: dict = field(default_factory=dict)

    def final(self) -> dict:
        return self.epochs[-1] if self.epochs else {}


def _float_repr(x: float) -> float:
    return float(np.float64(x))


def write_report(report: TrainReport, out_dir: str):
    os.makedirs(out_dir, exist_ok=True)
    log_path = os.path.join(out_dir, "train_log.jsonl")
    with open(log_path, "w", encoding="utf-8") as f:
        for rec in report.epochs:
            f.write(json.dumps(rec, sort_keys=True) + "\n")
    summary = {
        "epochs": len(report.epochs),
        "final": report.final(),
        "best_epoch": report.best_epoch,
        "best_acc": report.best_acc,
        "checkpoints": report.checkpoint_paths,
    }
    with open(os.path.join(out_dir, "summary.json"), "w", encoding="utf-8") as f:
        json.dump(summary, f, sort_keys=True, indent=2)
    return log_path


def train(model: Model, x: np.ndarray, y: np.ndarray, cfg: TrainConfig,
          out_dir: str | None = None, val: tuple[np.ndarray, np.ndarray] | None = None,
          log=None) -> TrainReport:
    """Seeded Adam training. Shuffles per epoch with a fixed generator,
    checkpoints every epoch (last + best by validation accuracy, or by
    training accuracy when no validation set is given), and aborts on NaN
    loss keeping the last good checkpoint."""
    y = _check_dataset(x, y)
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    optimizer = Adam(model.parameters())
    model.zero_grads()
    report = TrainReport()
    last_path = best_path = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        last_path = os.path.join(out_dir, "last.ckpt")
        best_path = os.path.join(out_dir, "best.ckpt")
    n = len(x)
    for epoch in range(cfg.epochs):
        lr = lr_at(epoch, cfg)
        order = rng.permutation(n)
        epoch_loss = 0.0
        correct = 0
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            xb = x[idx]
            yb = y[idx]
            logits = model.forward(xb, mode="train")
            loss, grad = softmax_crossentropy(logits, yb)
            if not math.isfinite(loss):
                raise TrainingDiverged(
                    f"loss diverged to {loss} at epoch {epoch}", last_path)
            model.backward(grad)
            optimizer.step(lr)
            epoch_loss += loss * len(xb)
            correct += int((logits.argmax(axis=1) == yb).sum())
        rec = {
            "epoch": epoch,
            "lr": _float_repr(lr),
            "loss": _float_repr(epoch_loss / n),
            "acc": _float_repr(correct / n),
        }
        select_acc = rec["acc"]
        if val is not None:
            val_loss, val_acc, _ = evaluate(model, val[0], val[1], cfg.batch_size)
            rec["val_loss"] = _float_repr(val_loss)
            rec["val_acc"] = _float_repr(val_acc)
            select_acc = val_acc
        report.epochs.append(rec)
        if log is not None:
            log(rec)
        if out_dir is not None:
            save_checkpoint(model, last_path)
            report.checkpoint_paths["last"] = "last.ckpt"
            if select_acc > report.best_acc:
                save_checkpoint(model, best_path)
                report.checkpoint_paths["best"] = "best.ckpt"
        if select_acc > report.best_acc:
            report.best_acc = select_acc
            report.best_epoch = epoch
    if out_dir is not None:
        write_report(report, out_dir)
    return report
