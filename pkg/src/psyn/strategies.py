"""Update rules for BSP, ASGD, BMUF and EASGD, and the CV-driven learning-rate schedule.

Everything here is a pure function of explicit state; the cluster simulator
decides when each rule fires.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .errors import ConfigError, InputError, ShardExhausted
from .numkit import Batch, Gradient, Model, backward, sgd_step

KINDS = ("bsp", "asgd", "bmuf", "easgd-sync", "easgd-async")
SYNCHRONOUS = ("bsp", "bmuf", "easgd-sync")


@dataclass(frozen=True)
class StrategyConfig:
    """Strategy selection and hyperparameters.

    For BMUF, ``block_momentum`` and ``c_constant`` are mutually exclusive;
    when neither is given ``c_constant`` defaults to 1 and the momentum is
    solved from it (see :func:`bmuf_resolve_zeta`).  ``elastic_alpha`` is the
    EASGD step ``lr * lambda``; 0 disables the elastic exchange altogether.
    """

    kind: str
    n_workers: int = 1
    sync_period: int = 1
    lr: float = 0.1
    block_momentum: float | None = None
    block_lr: float = 1.0
    c_constant: float | None = None
    elastic_alpha: float = 0.1

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown strategy {self.kind!r}; expected one of {KINDS}", "strategy.kind")
        if self.n_workers < 1:
            raise ConfigError("must be >= 1", "strategy.n_workers")
        if self.sync_period < 1:
            raise ConfigError("must be >= 1", "strategy.sync_period")
        if not self.lr > 0:
            raise ConfigError("must be > 0", "strategy.lr")
        if self.kind == "bmuf":
            if self.block_momentum is not None and self.c_constant is not None:
                raise ConfigError(
                    "block_momentum conflicts with c_constant; give one or the other",
                    "strategy.block_momentum",
                )
            if not self.block_lr > 0:
                raise ConfigError("must be > 0", "strategy.block_lr")
            if self.block_momentum is not None and not 0.0 <= self.block_momentum < 1.0:
                raise ConfigError("must lie in [0, 1)", "strategy.block_momentum")
            self.zeta  # validates the C-derived momentum eagerly
        if self.kind.startswith("easgd") and not 0.0 <= self.elastic_alpha <= 1.0:
            raise ConfigError("must lie in (0, 1], or 0 to disable", "strategy.elastic_alpha")

    @property
    def zeta(self) -> float:
        if self.block_momentum is not None:
            return float(self.block_momentum)
        c = 1.0 if self.c_constant is None else self.c_constant
        try:
            return bmuf_resolve_zeta(c, self.block_lr, self.n_workers)
        except InputError as exc:
            raise ConfigError(str(exc), "strategy.c_constant") from None


# ---------------------------------------------------------------------------
# BSP


def bsp_average(locals_: Sequence[np.ndarray]) -> np.ndarray:
    """Elementwise mean of the local models, accumulated in worker order.

    The sum is anchored at the first model, so identical inputs come back
    unchanged bit for bit.
    """
    if len(locals_) == 0:
        raise InputError("cannot average an empty set of models")
    first = np.asarray(locals_[0], dtype=np.float64)
    acc = np.zeros_like(first)
    for w in locals_[1:]:
        w = np.asarray(w, dtype=np.float64)
        if w.shape != first.shape:
            raise InputError(f"dimension mismatch in average: {w.shape} vs {first.shape}")
        acc += w - first
    return first + acc / len(locals_)


# ---------------------------------------------------------------------------
# ASGD


def asgd_server_apply(global_: np.ndarray, grad: Gradient, lr: float) -> np.ndarray:
    """Apply a (possibly stale) gradient to the server's current model."""
    if grad.values.shape != global_.shape:
        raise InputError(f"gradient dim {grad.dim} != model dim {global_.size}")
    return sgd_step(global_, grad, lr)


class LocalRound(NamedTuple):
    grad: Gradient
    local: np.ndarray
    steps: int


def asgd_worker_round(model: Model, local: np.ndarray, batches: Iterable[Batch],
                      tau: int, lr: float) -> LocalRound:
    """Run up to ``tau`` local SGD steps starting from the pulled model.

    The returned gradient is the sum of the per-step gradients, which equals
    ``(local - new_local) / lr`` in exact arithmetic, so the server applying it
    with the same ``lr`` reproduces the worker's displacement.  ``steps < tau``
    means the stream ran out mid-round.
    """
    if tau < 1:
        raise InputError("tau must be >= 1")
    w = local
    total = None
    samples = steps = 0
    it = iter(batches)
    for _ in range(tau):
        batch = next(it, None)
        if batch is None:
            break
        g = backward(model.with_params(w), batch)
        w = sgd_step(w, g, lr)
        total = g.values if total is None else total + g.values
        samples += g.sample_count
        steps += 1
    if steps == 0:
        raise ShardExhausted(0)
    return LocalRound(Gradient(total, samples), w, steps)


# ---------------------------------------------------------------------------
# BMUF


@dataclass(frozen=True)
class BmufState:
    global_: np.ndarray
    delta: np.ndarray
    block_index: int = 0

    @classmethod
    def start(cls, w0: np.ndarray) -> "BmufState":
        return cls(np.array(w0, dtype=np.float64), np.zeros_like(w0, dtype=np.float64), 0)


def bmuf_resolve_zeta(c: float, block_lr: float, n_workers: int) -> float:
    """Block momentum from ``block_lr / (n_workers * (1 - zeta)) == c``."""
    if c < 1 or not block_lr > 0 or n_workers < 1:
        raise InputError("need c >= 1, block_lr > 0 and n_workers >= 1")
    zeta = 1.0 - block_lr / (n_workers * c)
    if not 0.0 <= zeta < 1.0:
        raise InputError(
            f"block momentum {zeta} outside [0, 1) for c={c}, block_lr={block_lr}, N={n_workers}"
        )
    return zeta


def bmuf_block_update(state: BmufState, locals_: Sequence[np.ndarray], zeta: float,
                      block_lr: float) -> BmufState:
    """One filtered global update from the block's local models (CBM variant).

    The returned ``global_`` is where every worker restarts the next block.
    """
    avg = bsp_average(locals_)
    if avg.shape != state.global_.shape:
        raise InputError("local model dim does not match the global model")
    g = avg - state.global_
    delta = zeta * state.delta + block_lr * g
    # prev + delta rewritten around the average so that zeta=0, block_lr=1
    # returns the plain average bit for bit
    new_global = avg + (zeta * state.delta + (block_lr - 1.0) * g)
    return BmufState(new_global, delta, state.block_index + 1)


# ---------------------------------------------------------------------------
# EASGD


def easgd_sync_step(locals_: Sequence[np.ndarray], grads: Sequence[Gradient],
                    global_: np.ndarray, lr: float, lam: float
                    ) -> tuple[list[np.ndarray], np.ndarray]:
    if len(locals_) != len(grads) or len(locals_) == 0:
        raise InputError("need one gradient per local model")
    if not (lr > 0 and lam >= 0):
        raise InputError("need lr > 0 and lambda >= 0")
    a = lr * lam
    new_locals = []
    pull = np.zeros_like(global_)
    for w, g in zip(locals_, grads):
        if w.shape != global_.shape or g.values.shape != global_.shape:
            raise InputError("dimension mismatch in EASGD step")
        new_locals.append(w - lr * g.values - a * (w - global_))
        pull += global_ - w
    return new_locals, global_ - a * pull


def easgd_async_exchange(local: np.ndarray, global_: np.ndarray, alpha: float
                         ) -> tuple[np.ndarray, np.ndarray]:
    """Elastic exchange between one worker and the server, both sides from pre-exchange values."""
    if local.shape != global_.shape:
        raise InputError("dimension mismatch in elastic exchange")
    if not 0.0 < alpha <= 1.0:
        raise InputError(f"alpha must lie in (0, 1], got {alpha}")
    diff = local - global_
    return local - alpha * diff, global_ + alpha * diff


# ---------------------------------------------------------------------------
# learning-rate schedule


@dataclass(frozen=True)
class LrSchedulerState:
    current_lr: float
    phase: str = "fixed"
    prev_cv_loss: float | None = None

    @property
    def stopped(self) -> bool:
        return self.phase == "stopped"


KEEP_THRESHOLD = 0.01
STOP_THRESHOLD = 0.001


def lr_schedule_update(state: LrSchedulerState, cv_loss: float) -> tuple[LrSchedulerState, bool]:
    """Advance the schedule by one epoch's CV loss; returns ``(new_state, stop)``.

    Fixed lr while the CV loss drops by at least 1% relative to the previous
    epoch, then halve every epoch until the drop falls below 0.1%.
    """
    if not np.isfinite(cv_loss):
        raise InputError("cv_loss must be finite")
    if state.stopped:
        return state, True
    prev = state.prev_cv_loss
    if prev is None:
        return replace(state, prev_cv_loss=cv_loss), False
    drop = (prev - cv_loss) / prev if prev != 0 else 0.0
    if state.phase == "fixed":
        if drop >= KEEP_THRESHOLD:
            return replace(state, prev_cv_loss=cv_loss), False
        return LrSchedulerState(state.current_lr / 2, "halving", cv_loss), False
    if drop < STOP_THRESHOLD:
        return LrSchedulerState(state.current_lr, "stopped", cv_loss), True
    return LrSchedulerState(state.current_lr / 2, "halving", cv_loss), False
