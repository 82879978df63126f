"""Training loop, memorization metrics and repeat aggregation."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from kgmem.model import (
    AdamState,
    ModelConfig,
    NonFiniteError,
    adam_step,
    init_params,
    load_checkpoint,
    loss_and_grads,
    predict_logits,
    save_checkpoint,
)
from kgmem.tokenizer import EncodedBatch

EVAL_CHUNK = 2048


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, snapshot: dict):
        super().__init__(message)
        self.snapshot = snapshot


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 128
    epochs: int = 500
    eval_every: int = 2
    seed: int = 0
    shuffle: bool = True
    lr: float = 1e-3
    # "target": loss only where target_mask is set; "all": every next-token position
    loss_positions: str = "target"

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 1 or self.eval_every < 1:
            raise ValueError("batch_size, epochs and eval_every must be >= 1")
        if self.loss_positions not in ("target", "all"):
            raise ValueError("loss_positions must be 'target' or 'all'")


@dataclass
class CapacityCurve:
    eval_epochs: list[int] = field(default_factory=list)
    accuracy: list[float] = field(default_factory=list)
    mac: list[int] = field(default_factory=list)
    loss: list[float] = field(default_factory=list)
    n_predictions: int = 0

    @property
    def final_accuracy(self) -> float:
        return self.accuracy[-1]

    @property
    def final_mac(self) -> int:
        return self.mac[-1]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "accuracy", "mac", "loss"])
        for row in zip(self.eval_epochs, self.accuracy, self.mac, self.loss):
            w.writerow([row[0], repr(row[1]), row[2], repr(row[3])])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, n_predictions: int = 0) -> "CapacityCurve":
        rows = list(csv.DictReader(io.StringIO(text)))
        return cls(
            eval_epochs=[int(r["epoch"]) for r in rows],
            accuracy=[float(r["accuracy"]) for r in rows],
            mac=[int(r["mac"]) for r in rows],
            loss=[float(r["loss"]) for r in rows],
            n_predictions=n_predictions,
        )

    def to_dict(self) -> dict:
        return {
            "eval_epochs": list(self.eval_epochs), "accuracy": list(self.accuracy),
            "mac": list(self.mac), "loss": list(self.loss), "n_predictions": self.n_predictions,
        }


@dataclass
class RepeatSummary:
    eval_epochs: list[int]
    n_repeats: int
    accuracy_mean: np.ndarray
    accuracy_2sd: np.ndarray
    mac_mean: np.ndarray
    mac_2sd: np.ndarray

    @property
    def final(self) -> dict:
        return {
            "accuracy_mean": float(self.accuracy_mean[-1]),
            "accuracy_2sd": float(self.accuracy_2sd[-1]),
            "mac_mean": float(self.mac_mean[-1]),
            "mac_2sd": float(self.mac_2sd[-1]),
        }


def evaluate(params, cfg: ModelConfig, batch: EncodedBatch) -> tuple[float, int]:
    """Teacher-forced greedy accuracy and MAC over the masked positions.

    ``np.argmax`` returns the first maximum, so ties go to the lowest id.
    """
    total = batch.n_predictions
    if total == 0:
        raise ValueError("batch has no target positions")
    correct = 0
    for lo in range(0, batch.rows, EVAL_CHUNK):
        sub = batch.take(slice(lo, lo + EVAL_CHUNK))
        if not sub.target_mask.any():
            continue
        logits, targets = predict_logits(params, cfg, sub.tokens, sub.target_mask)
        correct += int((logits.argmax(axis=-1) == targets).sum())
    return correct / total, correct


def _loss_mask(batch: EncodedBatch, mode: str) -> np.ndarray:
    if mode == "target":
        return batch.target_mask
    pos = np.arange(batch.max_len)
    return (pos[None, :] >= 1) & (pos[None, :] < batch.lengths[:, None])


@dataclass
class _RunState:
    params: dict
    adam: AdamState
    epoch: int
    shuffle_state: dict
    act_state: dict
    curve: CapacityCurve


def _streams(seed: int):
    init_ss, shuffle_ss, act_ss = np.random.SeedSequence(seed & (2**64 - 1)).spawn(3)
    return (
        int(init_ss.generate_state(1, dtype=np.uint64)[0]),
        np.random.Generator(np.random.PCG64(shuffle_ss)),
        np.random.Generator(np.random.PCG64(act_ss)),
    )


def train(
    cfg: ModelConfig,
    tcfg: TrainConfig,
    batch: EncodedBatch,
    *,
    dtype=np.float32,
    checkpoint_path: str | Path | None = None,
    checkpoint_every: int = 0,
    resume: bool = False,
    on_eval=None,
):
    """Train on ``batch`` and evaluate on the same rows.

    Evaluations happen at every ``eval_every``-th epoch and at the last
    epoch. Returns ``(params, curve)``. With ``checkpoint_path`` and
    ``checkpoint_every > 0`` the full run state is written every that many
    epochs; ``resume=True`` continues from it bit-exactly.
    """
    if batch.rows == 0:
        raise ValueError("empty dataset")
    if int(batch.tokens.max()) >= cfg.vocab_size:
        raise ValueError("dataset contains ids outside the model vocabulary")
    loss_mask = _loss_mask(batch, tcfg.loss_positions)
    init_seed, shuffle_rng, act_rng = _streams(tcfg.seed)

    if resume and checkpoint_path and Path(checkpoint_path).exists():
        _, params, adam, extra = load_checkpoint(checkpoint_path)
        shuffle_rng.bit_generator.state = extra["shuffle_state"]
        act_rng.bit_generator.state = extra["act_state"]
        curve = CapacityCurve(**extra["curve"])
        start_epoch = extra["epoch"]
    else:
        params = init_params(cfg, init_seed, dtype=dtype)
        adam = AdamState.zeros_like(params, lr=tcfg.lr)
        curve = CapacityCurve(n_predictions=batch.n_predictions)
        start_epoch = 0

    n = batch.rows
    for epoch in range(start_epoch + 1, tcfg.epochs + 1):
        order = shuffle_rng.permutation(n) if tcfg.shuffle else np.arange(n)
        total, steps = 0.0, 0
        for lo in range(0, n, tcfg.batch_size):
            idx = order[lo : lo + tcfg.batch_size]
            mask = loss_mask[idx]
            if not mask.any():
                continue
            loss, grads = loss_and_grads(params, cfg, batch.tokens[idx], mask, rng=act_rng)
            if not math.isfinite(loss):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}, step {adam.step + 1}",
                    {"epoch": epoch, "step": adam.step + 1, "loss": loss, "curve": curve.to_dict()},
                )
            try:
                adam_step(params, grads, adam)
            except NonFiniteError as exc:
                raise TrainingDiverged(
                    str(exc), {"epoch": epoch, "step": adam.step + 1, "loss": loss, "curve": curve.to_dict()}
                ) from exc
            total += loss
            steps += 1
        if epoch % tcfg.eval_every == 0 or epoch == tcfg.epochs:
            acc, mac = evaluate(params, cfg, batch)
            curve.eval_epochs.append(epoch)
            curve.accuracy.append(acc)
            curve.mac.append(mac)
            curve.loss.append(total / max(steps, 1))
            if on_eval is not None:
                on_eval(epoch, acc, mac)
        if checkpoint_path and checkpoint_every > 0 and epoch % checkpoint_every == 0:
            save_checkpoint(checkpoint_path, cfg, params, adam, {
                "epoch": epoch,
                "shuffle_state": shuffle_rng.bit_generator.state,
                "act_state": act_rng.bit_generator.state,
                "curve": curve.to_dict(),
            })
    return params, curve


def epochs_to_accuracy(curve: CapacityCurve, threshold: float) -> int | None:
    """First evaluated epoch whose accuracy reaches ``threshold``."""
    for epoch, acc in zip(curve.eval_epochs, curve.accuracy):
        if acc >= threshold:
            return epoch
    return None


def aggregate_repeats(curves: list[CapacityCurve]) -> RepeatSummary:
    """Pointwise mean and twice the sample standard deviation."""
    if len(curves) < 2:
        raise ValueError("need at least 2 curves to estimate a spread")
    grid = curves[0].eval_epochs
    for c in curves[1:]:
        if c.eval_epochs != grid:
            raise ValueError("curves were evaluated on different epoch grids")
    acc = np.array([c.accuracy for c in curves], dtype=float)
    mac = np.array([c.mac for c in curves], dtype=float)
    return RepeatSummary(
        eval_epochs=list(grid),
        n_repeats=len(curves),
        accuracy_mean=acc.mean(axis=0),
        accuracy_2sd=2 * acc.std(axis=0, ddof=1),
        mac_mean=mac.mean(axis=0),
        mac_2sd=2 * mac.std(axis=0, ddof=1),
    )
