"""Minibatch SGD training loop with resumable checkpoints."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autograd import SGD, NonFiniteError, Tensor, backward, load_checkpoint, save_checkpoint
from .data import DatasetRecord, dihedral
from .evalkit import evaluate_model
from .head import OBJECTNESS_MODES, assign_targets, detection_loss, head_anchors, head_raw
from .pyramid import ModelConfig, SfpnModel

log = logging.getLogger(__name__)

LOG_FIELDS = ("epoch", "loss", "ap50")
# augmentation mode -> number of dihedral codes drawn from (0: identity, 1: hflip)
AUGMENT_CODES = {"none": 1, "hflip": 2, "dihedral": 8}


@dataclass
class TrainConfig:
    epochs: int = 60
    batch_size: int = 8
    lr: float = 0.01
    final_lr: float = 1e-4
    momentum: float = 0.9
    seed: int = 0
    augment: str = "dihedral"  # see AUGMENT_CODES
    sol: bool = False  # fine-tune with heads on synthetic levels too
    eval_every: int = 1
    objectness: str = "balanced"  # see detection_loss

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.lr <= 0 or self.final_lr <= 0:
            raise ValueError("learning rates must be positive")
        if self.objectness not in OBJECTNESS_MODES:
            raise ValueError(f"objectness must be one of {OBJECTNESS_MODES}")
        if self.augment not in AUGMENT_CODES:
            raise ValueError(f"augment must be one of {tuple(AUGMENT_CODES)}")


def cosine_lr(step: int, total: int, lr: float, final_lr: float) -> float:
    if total <= 1:
        return lr
    t = min(step / (total - 1), 1.0)
    return final_lr + 0.5 * (lr - final_lr) * (1.0 + math.cos(math.pi * t))


def model_state(model: SfpnModel, opt: SGD | None = None, epoch: int | None = None,
                best_ap50: float | None = None) -> dict[str, np.ndarray]:
    state: dict[str, np.ndarray] = dict(model.params.state())
    if opt is not None:
        for name, v in opt.velocity.items():
            state["opt.velocity." + name] = v
    if epoch is not None:
        state["train.epoch"] = np.array(float(epoch))
    if best_ap50 is not None:
        state["train.best_ap50"] = np.array(float(best_ap50))
    return state


def save_model(path: str | Path, model: SfpnModel, opt: SGD | None = None, epoch: int | None = None,
               best_ap50: float | None = None) -> None:
    Path(path).write_bytes(save_checkpoint(model_state(model, opt, epoch, best_ap50)))


def load_model(path: str | Path, config: ModelConfig, dtype=np.float32) -> tuple[SfpnModel, dict]:
    """Rebuild a model from a checkpoint; extra entries are returned untouched."""
    state = load_checkpoint(Path(path).read_bytes())
    model = SfpnModel(config, dtype)
    missing = [n for n in model.params.names() if n not in state]
    if missing:
        raise ValueError(f"checkpoint does not match config {config.variant}: missing {missing[:3]}")
    model.params.load_state(state)
    extra = {k: v for k, v in state.items() if k not in model.params}
    return model, extra


def make_batch(records: list[DatasetRecord], codes: np.ndarray, anchors, dtype):
    batch = [dihedral(r, int(c)) if c else r for r, c in zip(records, codes)]
    images = Tensor(np.concatenate([r.image for r in batch]).astype(dtype))
    assigns = [assign_targets(r.boxes, r.classes, anchors) for r in batch]
    return images, assigns


def train_step(model: SfpnModel, opt: SGD, images: Tensor, assigns, sol: bool,
               objectness: str = "balanced") -> float:
    raws = head_raw(model, model.forward(images), sol)
    loss = detection_loss(raws, assigns, model.config.num_classes, objectness)
    value = loss.item()
    if not math.isfinite(value):
        raise NonFiniteError("loss is not finite")
    backward(loss)
    opt.step()
    return value


def epoch_plan(seed: int, epoch: int, n: int, batch_size: int, augment: str = "dihedral"):
    """Batch order and per-image dihedral codes depend only on (seed, epoch)."""
    rng = np.random.default_rng([seed, epoch])
    perm = rng.permutation(n)
    codes = rng.integers(0, AUGMENT_CODES[augment], n)
    return [(perm[i:i + batch_size], codes[i:i + batch_size]) for i in range(0, n, batch_size)]


def train(model: SfpnModel, train_set: list[DatasetRecord], val_set: list[DatasetRecord] | None,
          cfg: TrainConfig, out_dir: str | Path | None = None, resume: str | Path | None = None,
          max_steps: int | None = None, stop_after: int | None = None) -> list[dict]:
    """Train in place; returns the per-epoch log rows.

    With ``out_dir`` set, writes ``last.ckpt`` every epoch, ``best.ckpt`` on
    each AP50 improvement and ``train_log.csv``. ``stop_after`` ends this
    invocation after that many epochs while keeping the full-length learning
    rate schedule, so a later ``resume`` continues the same run.
    """
    if not train_set:
        raise ValueError("empty training set")
    opt = SGD(model.params, cfg.lr, cfg.momentum)
    anchors = head_anchors(model, cfg.sol)
    steps_per_epoch = math.ceil(len(train_set) / cfg.batch_size)
    total_steps = steps_per_epoch * cfg.epochs
    start_epoch, best = 0, -1.0
    rows: list[dict] = []
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    if resume is not None:
        state = load_checkpoint(Path(resume).read_bytes())
        model.params.load_state(state)
        prefix = "opt.velocity."
        opt.velocity = {k[len(prefix):]: v.reshape(model.params[k[len(prefix):]].shape).astype(model.dtype)
                        for k, v in state.items() if k.startswith(prefix)}
        start_epoch = int(state["train.epoch"].reshape(-1)[0]) + 1
        best = float(state.get("train.best_ap50", np.array(-1.0)).reshape(-1)[0])
        if out is not None and (out / "train_log.csv").exists():
            with open(out / "train_log.csv") as fh:
                rows = [{"epoch": int(r["epoch"]), "loss": float(r["loss"]), "ap50": float(r["ap50"])}
                        for r in csv.DictReader(fh) if int(r["epoch"]) < start_epoch]

    step = start_epoch * steps_per_epoch
    end_epoch = cfg.epochs if stop_after is None else min(cfg.epochs, start_epoch + stop_after)
    for epoch in range(start_epoch, end_epoch):
        t0 = time.perf_counter()
        losses = []
        for idx, codes in epoch_plan(cfg.seed, epoch, len(train_set), cfg.batch_size, cfg.augment):
            opt.lr = cosine_lr(step, total_steps, cfg.lr, cfg.final_lr)
            images, assigns = make_batch([train_set[i] for i in idx], codes, anchors, model.dtype)
            losses.append(train_step(model, opt, images, assigns, cfg.sol, cfg.objectness))
            step += 1
            if max_steps is not None and len(losses) >= max_steps:
                break
        ap50 = float("nan")
        if val_set and ((epoch + 1) % cfg.eval_every == 0 or epoch + 1 == cfg.epochs):
            ap50 = evaluate_model(model, val_set, sol=cfg.sol)[0].ap50
        row = {"epoch": epoch, "loss": float(np.mean(losses)), "ap50": ap50}
        rows.append(row)
        log.info("epoch %d loss %.4f ap50 %.4f (%.1fs)", epoch, row["loss"], ap50, time.perf_counter() - t0)
        improved = not math.isnan(ap50) and ap50 > best
        if improved:
            best = ap50
        if out is not None:
            if improved or not val_set:
                save_model(out / "best.ckpt", model, epoch=epoch, best_ap50=best)
            save_model(out / "last.ckpt", model, opt, epoch=epoch, best_ap50=best)
            write_log(out / "train_log.csv", rows)
    return rows


def write_log(path: str | Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow({k: r[k] for k in LOG_FIELDS})
