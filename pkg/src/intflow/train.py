"""Optimization: Adamax, warmup-then-decay schedule, EMA, training loop.

The loop is fully seeded: given the same config and dataset, two runs
produce identical parameters and metric rows (wall-clock column aside).
Validation uses EMA shadow weights when enabled; the raw parameters never
see them.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, RoundingConfig
from .errors import ParameterError, TrainingDivergence, TrainingError
from .flows import FlowModel, save_model, training_loss

_DIVERGENCE_SLACK = 5.0
_DIVERGENCE_PATIENCE = 3


@dataclass
class AdamaxState:
    """First moment and infinity-norm accumulators, keyed by parameter name."""

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    u: dict[str, np.ndarray] = field(default_factory=dict)


def adamax_step(
    state: AdamaxState,
    params: list[Parameter],
    grads: list[np.ndarray],
    lr: float,
) -> None:
    """One in-place Adamax update over a parameter group.

    The caller advances ``state.step`` once per optimization step; groups
    updated within the same step share the bias correction.
    """
    if len(params) != len(grads):
        raise ParameterError("one gradient per parameter required")
    correction = 1.0 - state.beta1**state.step
    for p, g in zip(params, grads):
        g = np.asarray(g, dtype=np.float64)
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {p.name!r}")
        m = state.m.setdefault(p.name, np.zeros_like(p.value))
        u = state.u.setdefault(p.name, np.zeros_like(p.value))
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        np.maximum(state.beta2 * u, np.abs(g), out=u)
        p.value[...] -= lr * m / (correction * (u + state.eps))


@dataclass(frozen=True)
class LrSchedule:
    """Linear warmup to ``base`` over ``warmup`` epochs, then decay per epoch."""

    base: float
    decay: float = 1.0
    warmup: int = 10

    def __post_init__(self) -> None:
        if self.base <= 0 or not 0 < self.decay <= 1 or self.warmup < 0:
            raise ParameterError("schedule needs base > 0, decay in (0, 1], warmup >= 0")


def lr_at(s: LrSchedule, epoch: int) -> float:
    if epoch < 0:
        raise ParameterError("epoch must be non-negative")
    if epoch < s.warmup:
        return s.base * (epoch + 1) / s.warmup
    return s.base * s.decay**epoch


class EmaWeights:
    """Exponential moving average of parameters, applied only at evaluation."""

    def __init__(self, params: list[Parameter], decay: float = 0.9999) -> None:
        if not 0.0 <= decay <= 1.0:
            raise ParameterError(f"EMA decay must lie in [0, 1], got {decay}")
        self.decay = decay
        self.shadow = {p.name: p.value.copy() for p in params}

    def update(self, params: list[Parameter]) -> None:
        for p in params:
            s = self.shadow[p.name]
            s *= self.decay
            s += (1.0 - self.decay) * p.value

    def swap(self, params: list[Parameter]) -> None:
        """Exchange live and shadow values; calling twice restores both."""
        for p in params:
            tmp = p.value.copy()
            p.value[...] = self.shadow[p.name]
            self.shadow[p.name][...] = tmp


def ema_update(e: EmaWeights, params: list[Parameter]) -> None:
    e.update(params)


def ema_swap(e: EmaWeights, params: list[Parameter]) -> None:
    e.swap(params)


@dataclass(frozen=True)
class TrainConfig:
    """Loop shape and optimizer settings for one run."""

    epochs: int = 10
    iters_per_epoch: int = 100
    batch_size: int = 128
    seed: int = 0
    coupling_lr: float = 1e-4
    prior_lr: float = 1e-3
    lr_decay: float = 0.999
    warmup_epochs: int = 1
    use_ema: bool = True
    ema_decay: float = 0.9999
    rounding: RoundingConfig = RoundingConfig(forward="hard_round", backward="identity")
    continuous: bool = False
    checkpoint_every: int = 0  # epochs; 0 disables intermediate checkpoints


@dataclass
class TrainResult:
    """What a finished (or aborted) run hands back."""

    epochs_run: int
    final_bpd: float
    metrics: list[tuple[int, str, float, float, float]]
    checkpoints: list[np.ndarray]


def _metrics_writer(path: Path | None):
    if path is None:
        return None, None
    path.parent.mkdir(parents=True, exist_ok=True)
    handle = path.open("w", newline="")
    writer = csv.writer(handle)
    writer.writerow(["epoch", "split", "bpd", "lr", "wall_time"])
    return handle, writer


def train(
    model: FlowModel,
    data,
    cfg: TrainConfig,
    metrics_path: str | Path | None = None,
    checkpoint_dir: str | Path | None = None,
) -> TrainResult:
    """Run the seeded loop: Adamax over two parameter groups, EMA, eval.

    ``data`` provides ``train_batch(rng, n) -> (B, H, W, C) reals`` and
    ``eval_bpd(model) -> float``.  A validation bpd above the input bit
    depth plus five for three consecutive epochs aborts with
    TrainingDivergence.
    """
    rng = np.random.default_rng(cfg.seed)
    groups = model.param_groups()
    schedules = {
        "coupling": LrSchedule(cfg.coupling_lr, cfg.lr_decay, cfg.warmup_epochs),
        "prior": LrSchedule(cfg.prior_lr, cfg.lr_decay, cfg.warmup_epochs),
    }
    opt = AdamaxState()
    ema = EmaWeights(model.parameters(), cfg.ema_decay) if cfg.use_ema else None
    handle, writer = _metrics_writer(None if metrics_path is None else Path(metrics_path))
    started = time.monotonic()
    metrics: list[tuple[int, str, float, float, float]] = []
    checkpoints: list[np.ndarray] = []
    bad_epochs = 0
    final_bpd = float("nan")
    epochs_run = 0
    try:
        for epoch in range(cfg.epochs):
            lrs = {name: lr_at(s, epoch) for name, s in schedules.items()}
            running = 0.0
            for _ in range(cfg.iters_per_epoch):
                reals = data.train_batch(rng, cfg.batch_size)
                if cfg.continuous:
                    reals = reals + rng.uniform(size=reals.shape) * 2.0**-model.bits
                loss = training_loss(
                    model, reals, cfg.rounding, rng, continuous=cfg.continuous
                )
                params = model.parameters()
                grads = ad.gradient(loss, params)
                by_name = dict(zip((p.name for p in params), grads))
                opt.step += 1
                for name, group in groups.items():
                    adamax_step(opt, group, [by_name[p.name] for p in group], lrs[name])
                if ema is not None:
                    ema.update(params)
                running += float(loss.value)
            train_bpd = running / cfg.iters_per_epoch

            if ema is not None:
                ema.swap(model.parameters())
            val_bpd = data.eval_bpd(model)
            if ema is not None:
                ema.swap(model.parameters())

            wall = time.monotonic() - started
            lr_main = lrs["coupling"]
            for split, bpd in (("train", train_bpd), ("val", val_bpd)):
                metrics.append((epoch, split, bpd, lr_main, wall))
                if writer is not None:
                    writer.writerow([epoch, split, f"{bpd:.8f}", f"{lr_main:.3e}", f"{wall:.3f}"])
            if writer is not None:
                handle.flush()

            checkpoints.append(ad.params_vector(model.parameters()))
            if checkpoint_dir is not None and cfg.checkpoint_every:
                if (epoch + 1) % cfg.checkpoint_every == 0:
                    out = Path(checkpoint_dir)
                    out.mkdir(parents=True, exist_ok=True)
                    save_model(model, out / f"epoch{epoch:04d}.idfm")

            final_bpd = val_bpd
            epochs_run = epoch + 1
            bad_epochs = bad_epochs + 1 if val_bpd > model.bits + _DIVERGENCE_SLACK else 0
            if bad_epochs >= _DIVERGENCE_PATIENCE:
                raise TrainingDivergence(
                    f"validation bpd {val_bpd:.3f} exceeded {model.bits} + "
                    f"{_DIVERGENCE_SLACK} for {_DIVERGENCE_PATIENCE} consecutive epochs"
                )
    finally:
        if handle is not None:
            handle.close()
    return TrainResult(epochs_run, final_bpd, metrics, checkpoints)
