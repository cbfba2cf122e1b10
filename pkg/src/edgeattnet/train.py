"""End-to-end training: Adam on BCE+Dice with per-epoch validation logging."""
from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .losses import total_loss
from .metrics import (NoEvaluablePairsError, ScaleSet, evaluate_dataset,
                      evaluate_image, extract_instances)
from .model import Model, save_model
from .tensor import AdamState, Tensor, adam_step


class TrainingDivergedError(RuntimeError):
    """Raised when the training loss turns non-finite."""


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_loss: float
    val_bce: float
    val_dice: float
    val_miou_pairwise: float
    val_miou_multiscale: float


@dataclass
class TrainResult:
    model: Model
    history: list
    best_epoch: int
    best_val_loss: float
    checkpoint_path: str | None


def _stack_batch(samples):
    images = np.stack([s.image.pixels for s in samples])[:, None, :, :]
    targets = np.stack([s.union.astype(np.float64) for s in samples])[:, None, :, :]
    return Tensor(images), Tensor(targets)


def binary_dice_coefficient(pred_bits: np.ndarray, target_bits: np.ndarray) -> float:
    """2|P & T| / (|P| + |T|); 1.0 when both masks are empty."""
    inter = np.logical_and(pred_bits, target_bits).sum()
    denom = pred_bits.sum() + target_bits.sum()
    if denom == 0:
        return 1.0
    return 2.0 * float(inter) / float(denom)


def training_dice(model: Model, samples, threshold: float = 0.5) -> float:
    """Mean binary Dice of eval-mode predictions over the given samples."""
    scores = []
    for s in samples:
        prob = model.predict_proba(Tensor(s.image.pixels[None, None]))
        scores.append(binary_dice_coefficient(prob[0, 0] >= threshold, s.union))
    return float(np.mean(scores))


def _validate(model: Model, val_samples, scales: ScaleSet, threshold: float):
    if not val_samples:
        return math.nan, math.nan, math.nan, 0.0, 0.0
    x, t = _stack_batch(val_samples)
    with T.no_grad():
        lv = total_loss(model.forward(x, training=False), t)
    records = []
    for s in val_samples:
        prob = model.predict_proba(Tensor(s.image.pixels[None, None]))
        pt_set = extract_instances(s.image_id, prob[0, 0], threshold=threshold)
        records.append(evaluate_image(s.gt_set(), pt_set, scales))
    try:
        report = evaluate_dataset(records, scales)
        miou_p, miou_m = report.miou_pairwise, report.miou_multiscale
    except NoEvaluablePairsError:
        miou_p = miou_m = 0.0
    return lv.total.item(), lv.bce.item(), lv.dice.item(), miou_p, miou_m


def train_model(model: Model, train_samples, val_samples, epochs: int,
                lr: float = 1e-4, batch_size: int = 4, seed: int = 0,
                out_dir: str | None = None, threshold: float = 0.5,
                scales: ScaleSet | None = None, stop_fn=None,
                log_name: str = "train_log.csv") -> TrainResult:
    """Train in place; keeps the checkpoint with the best validation loss.

    `stop_fn(epoch, stats)` may end training early. Only train/val samples
    are ever read here; held-out test data stays with the evaluate command.
    NaN loss aborts with the last finished epoch saved as last_good.
    """
    scales = scales or ScaleSet()
    order_rng = np.random.default_rng(seed)
    dropout_rng = np.random.default_rng(seed + 1)
    state = AdamState()
    history = []
    best_val = math.inf
    best_epoch = -1
    ckpt_path = None
    log_path = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        ckpt_path = save_model(out_dir, model)  # epoch-0 state; best overwrites
        log_path = os.path.join(out_dir, log_name)
        with open(log_path, "w", newline="") as fh:
            csv.writer(fh).writerow(
                ["epoch", "train_loss", "val_loss", "val_bce", "val_dice",
                 "val_miou_pairwise", "val_miou_multiscale"])

    for epoch in range(epochs):
        order = order_rng.permutation(len(train_samples))
        epoch_losses = []
        for start in range(0, len(order), batch_size):
            batch = [train_samples[i] for i in order[start:start + batch_size]]
            x, t = _stack_batch(batch)
            model.zero_grads()
            lv = total_loss(model.forward(x, training=True, rng=dropout_rng), t)
            loss = lv.total.item()
            if not math.isfinite(loss):
                if out_dir is not None:
                    save_model(out_dir, model, name="last_good")
                raise TrainingDivergedError(
                    f"non-finite training loss {loss} at epoch {epoch}; "
                    f"last finished epoch saved as last_good")
            lv.total.backward()
            adam_step(model.params, state, lr=lr)
            epoch_losses.append(loss)

        val_loss, val_bce, val_dice, miou_p, miou_m = _validate(
            model, val_samples, scales, threshold)
        stats = EpochStats(epoch=epoch, train_loss=float(np.mean(epoch_losses)),
                           val_loss=val_loss, val_bce=val_bce, val_dice=val_dice,
                           val_miou_pairwise=miou_p, val_miou_multiscale=miou_m)
        history.append(stats)
        if log_path is not None:
            with open(log_path, "a", newline="") as fh:
                csv.writer(fh).writerow(
                    [stats.epoch, repr(stats.train_loss), repr(stats.val_loss),
                     repr(stats.val_bce), repr(stats.val_dice),
                     repr(stats.val_miou_pairwise), repr(stats.val_miou_multiscale)])
        candidate = val_loss if val_samples else stats.train_loss
        if candidate < best_val:
            best_val = candidate
            best_epoch = epoch
            if out_dir is not None:
                ckpt_path = save_model(out_dir, model)
        if stop_fn is not None and stop_fn(epoch, stats):
            break

    return TrainResult(model=model, history=history, best_epoch=best_epoch,
                       best_val_loss=best_val, checkpoint_path=ckpt_path)
