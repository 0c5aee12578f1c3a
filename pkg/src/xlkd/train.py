"""Shared optimization loop: AdamW, learning-rate range test, epoch schedule
with best-validation checkpointing."""
from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .numeric import Tensor

log = logging.getLogger(__name__)


class NonFiniteGradientError(RuntimeError):
    pass


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainSettings:
    epochs: int = 30
    batch_size: int = 32
    lr: float | str = "auto"  # explicit rate, or "auto" for the range test
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    seed: int = 0
    clip_norm: float | None = 1.0
    early_stop: int = 10  # non-improving epochs before stopping

    def resolved(self, lr: float) -> "TrainSettings":
        out = copy.copy(self)
        out.lr = lr
        return out


@dataclass
class AdamWState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def collect_grads(params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {name: p.grad for name, p in params.items() if p.grad is not None}


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> None:
    total = 0.0
    for g in grads.values():
        total += float((g.astype(np.float64) ** 2).sum())
    norm = total ** 0.5
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale


def adamw_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
               state: AdamWState, settings: TrainSettings) -> None:
    """Decoupled-weight-decay Adam update with bias correction, in place."""
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise NonFiniteGradientError(f"non-finite gradient in layer {name!r}")
    lr = float(settings.lr)
    state.step += 1
    t = state.step
    bc1 = 1.0 - settings.beta1 ** t
    bc2 = 1.0 - settings.beta2 ** t
    for name, g in grads.items():
        p = params[name]
        m = state.m.setdefault(name, np.zeros_like(p.values, dtype=np.float64))
        v = state.v.setdefault(name, np.zeros_like(p.values, dtype=np.float64))
        m *= settings.beta1
        m += (1.0 - settings.beta1) * g
        v *= settings.beta2
        v += (1.0 - settings.beta2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        update = lr * (m_hat / (np.sqrt(v_hat) + settings.eps))
        if settings.weight_decay:
            update = update + lr * settings.weight_decay * p.values
        p.values = (p.values - update).astype(p.values.dtype)


def _params_of(trainable) -> dict[str, Tensor]:
    return trainable.parameters() if hasattr(trainable, "parameters") else trainable


def _clone(trainable):
    if hasattr(trainable, "clone"):
        return trainable.clone()
    return {k: Tensor(v.values.copy(), requires_grad=True)
            for k, v in trainable.items()}


def lr_range_test(trainable, make_loss: Callable[[object, int], Tensor],
                  settings: TrainSettings, lo: float = 1e-6, hi: float = 1e-1,
                  steps: int = 100) -> float:
    """Exponential learning-rate sweep on a throwaway copy of the model.

    Picks the rate at the steepest descent of the smoothed loss curve, divided
    by 10; falls back to 1e-3 when the curve never descends."""
    probe = _clone(trainable)
    params = _params_of(probe)
    state = AdamWState()
    rates = lo * (hi / lo) ** (np.arange(steps) / (steps - 1))
    smoothed: list[float] = []
    ema, beta = 0.0, 0.9
    best = np.inf
    for i, rate in enumerate(rates):
        for p in params.values():
            p.zero_grad()
        loss = make_loss(probe, i)
        value = loss.item()
        if not np.isfinite(value):
            break
        loss.backward()
        grads = collect_grads(params)
        if settings.clip_norm:
            clip_gradients(grads, settings.clip_norm)
        try:
            adamw_step(params, grads, state, settings.resolved(float(rate)))
        except NonFiniteGradientError:
            break
        ema = beta * ema + (1.0 - beta) * value
        corrected = ema / (1.0 - beta ** (i + 1))
        smoothed.append(corrected)
        best = min(best, corrected)
        if corrected > 4.0 * best and i > 10:
            break
    if len(smoothed) < 2:
        log.warning("lr range test diverged immediately; falling back to 1e-3")
        return 1e-3
    # slope of the smoothed curve over a short window, ignoring the EMA
    # warm-up region where batch-to-batch noise dominates
    window = min(5, len(smoothed) - 1)
    skip = min(10, max(0, len(smoothed) - window - 1))
    slopes = [(smoothed[i + window] - smoothed[i]) / window
              for i in range(skip, len(smoothed) - window)]
    if not slopes:
        slopes = list(np.diff(smoothed))
        skip = 0
    idx = int(np.argmin(slopes))
    tol = 1e-9 * max(1.0, abs(smoothed[skip + idx]))
    if slopes[idx] >= -tol:
        log.warning("lr range test found no descent; falling back to 1e-3")
        return 1e-3
    return float(rates[skip + idx] / 10.0)


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    val_score: float
    lr: float

    def to_doc(self) -> dict:
        return {"epoch": self.epoch, "loss": self.loss,
                "val_score": self.val_score, "lr": self.lr}


@dataclass
class FitResult:
    model: object
    log: list[EpochRecord]
    best_epoch: int
    best_score: float
    lr: float


def fit(model, examples: Sequence, build_loss: Callable,
        validate: Callable[[object], float], settings: TrainSettings,
        make_loss_for_lr: Callable | None = None) -> FitResult:
    """Epoch loop with seeded shuffling, per-epoch validation, and return of
    the best-validation checkpoint (ties resolved to the earlier epoch).

    ``build_loss(model, batch_examples, rng)`` must return a scalar loss
    tensor; ``validate(model)`` a scalar score where higher is better."""
    params = _params_of(model)
    if settings.lr == "auto":
        probe_rng = np.random.default_rng(settings.seed + 1)

        def probe_loss(m, i):
            lo = (i * settings.batch_size) % max(1, len(examples))
            chunk = [examples[(lo + j) % len(examples)]
                     for j in range(min(settings.batch_size, len(examples)))]
            return build_loss(m, chunk, probe_rng)

        lr = lr_range_test(model, make_loss_for_lr or probe_loss, settings)
    else:
        lr = float(settings.lr)
    run_settings = settings.resolved(lr)

    state = AdamWState()
    shuffle_rng = np.random.default_rng(settings.seed)
    loss_rng = np.random.default_rng(settings.seed + 2)
    if hasattr(model, "train"):
        model.train(np.random.default_rng(settings.seed + 3))
    history: list[EpochRecord] = []
    best_score, best_epoch = -np.inf, -1
    best_snapshot: dict[str, np.ndarray] | None = None
    stale = 0
    for epoch in range(1, settings.epochs + 1):
        order = shuffle_rng.permutation(len(examples))
        epoch_losses = []
        for lo in range(0, len(order), settings.batch_size):
            chunk = [examples[i] for i in order[lo:lo + settings.batch_size]]
            for p in params.values():
                p.zero_grad()
            loss = build_loss(model, chunk, loss_rng)
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}, batch {lo // settings.batch_size}")
            loss.backward()
            grads = collect_grads(params)
            if run_settings.clip_norm:
                clip_gradients(grads, run_settings.clip_norm)
            adamw_step(params, grads, state, run_settings)
            epoch_losses.append(value)
        if hasattr(model, "eval"):
            model.eval()
        score = float(validate(model))
        if hasattr(model, "train"):
            model.train(np.random.default_rng(settings.seed + 3 + epoch))
        history.append(EpochRecord(epoch=epoch, loss=float(np.mean(epoch_losses)),
                                   val_score=score, lr=lr))
        if score > best_score:
            best_score, best_epoch = score, epoch
            best_snapshot = {k: p.values.copy() for k, p in params.items()}
            stale = 0
        else:
            stale += 1
            if settings.early_stop and stale >= settings.early_stop:
                break
    if best_snapshot is not None:
        for k, p in params.items():
            p.values = best_snapshot[k]
    if hasattr(model, "eval"):
        model.eval()
    return FitResult(model=model, log=history, best_epoch=best_epoch,
                     best_score=best_score, lr=lr)


def write_log(history: Sequence[EpochRecord], path) -> None:
    import json
    import pathlib

    pathlib.Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for record in history:
            fh.write(json.dumps(record.to_doc(), sort_keys=True) + "\n")
