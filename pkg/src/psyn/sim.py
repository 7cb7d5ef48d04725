"""Deterministic discrete-event simulation of a data-parallel training cluster.

Workers and the parameter server never run concurrently on the host: all
asynchrony comes from the timing model (per-worker seconds per minibatch plus a
fixed exchange cost), and simultaneous events are ordered by worker id and then
by sequence number.  Two runs with the same inputs therefore produce the same
trace and the same model bit for bit, asynchronous strategies included.

Synchronous strategies (BSP, BMUF, sync EASGD) walk the epoch block by block:
worker ``i`` trains on split ``i`` of the block, then everyone meets at a
barrier.  Asynchronous strategies (ASGD, async EASGD) put the epoch's splits in
a shared queue; an idle worker takes the next split, trains on it, and talks to
the server when done, so faster workers process more splits.
"""

from __future__ import annotations

import csv
import heapq
import io
import math
from collections import deque
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .data import Dataset, ShardedDataset, epoch_permutation
from .errors import InputError, NumericError, ProtocolError
from .numkit import WARMSTART_STREAM, Gradient, Model, backward, forward_loss, rng, sgd_step
from .strategies import (
    SYNCHRONOUS,
    BmufState,
    LrSchedulerState,
    StrategyConfig,
    asgd_server_apply,
    asgd_worker_round,
    bmuf_block_update,
    bsp_average,
    easgd_async_exchange,
    easgd_sync_step,
    lr_schedule_update,
)

SERVER = 2**31 - 1  # sorts after every worker id at equal times
EVENT_KINDS = ("compute-done", "push", "pull", "barrier", "block-commit", "exchange")
DIVERGENCE_FACTOR = 1e3


@dataclass(frozen=True)
class SimConfig:
    strategy: StrategyConfig
    compute_time: tuple[float, ...]
    exchange_cost: float = 0.0
    epochs_max: int = 20
    seed: int = 0
    record_globals: bool = False

    def __post_init__(self):
        ct = tuple(float(t) for t in self.compute_time)
        object.__setattr__(self, "compute_time", ct)
        if len(ct) != self.strategy.n_workers:
            raise InputError(
                f"compute_time has {len(ct)} entries for {self.strategy.n_workers} workers"
            )
        if any(not t > 0 for t in ct):
            raise InputError("compute times must be > 0")
        if self.exchange_cost < 0:
            raise InputError("exchange_cost must be >= 0")
        if self.epochs_max < 1:
            raise InputError("epochs_max must be >= 1")

    @property
    def n_workers(self) -> int:
        return self.strategy.n_workers


class SimEvent(NamedTuple):
    time: float
    worker: int
    kind: str
    seq: int
    staleness_k: int | None = None

    @property
    def key(self) -> tuple[float, int, int]:
        return (self.time, self.worker, self.seq)


class CurvePoint(NamedTuple):
    epoch: int
    train_loss: float
    cv_loss: float
    lr: float
    sim_time: float


@dataclass
class RunResult:
    final_global: np.ndarray
    learning_curve: list[CurvePoint]
    trace: list[SimEvent]
    simulated_wall_clock: float
    status: str = "converged"  # converged | max-epochs | diverged
    final_locals: list[np.ndarray] = field(default_factory=list)
    speedup_vs_reference: float | None = None
    global_history: list[np.ndarray] = field(default_factory=list)

    @property
    def epochs(self) -> int:
        return self.learning_curve[-1].epoch if self.learning_curve else 0

    @property
    def diverged(self) -> bool:
        return self.status == "diverged"

    @property
    def final_cv_loss(self) -> float:
        return math.inf if self.diverged else self.learning_curve[-1].cv_loss

    def seconds_per_epoch(self) -> float:
        return self.simulated_wall_clock / max(self.epochs, 1)


def barrier_sync(arrivals: Sequence[float], exchange_cost: float) -> float:
    """Time at which a barrier over ``arrivals`` releases."""
    if len(arrivals) == 0:
        raise InputError("barrier needs at least one worker")
    return max(arrivals) + exchange_cost


def measure_speedup(result: RunResult, reference: RunResult) -> float:
    """Reference seconds per epoch divided by parallel seconds per epoch."""
    par = result.seconds_per_epoch()
    if par <= 0:
        raise InputError("parallel run has zero simulated time")
    return reference.seconds_per_epoch() / par


def _check_finite(w: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(w)):
        raise NumericError(f"non-finite values in {what}")
    return w


class _Trace:
    def __init__(self):
        self.events: list[SimEvent] = []

    def emit(self, time: float, worker: int, kind: str, k: int | None = None) -> None:
        self.events.append(SimEvent(time, worker, kind, len(self.events), k))


# ---------------------------------------------------------------------------
# synchronous strategies


class _SyncCluster:
    def __init__(self, config: SimConfig, model: Model, shards: ShardedDataset):
        self.cfg = config
        self.st = config.strategy
        self.model = model
        self.shards = shards
        self.global_ = model.params.copy()
        self.locals = [model.params.copy() for _ in range(config.n_workers)]
        self.bmuf = BmufState.start(model.params)
        # lambda is fixed from the initial lr; the elastic step then follows the schedule
        self.lam = self.st.elastic_alpha / self.st.lr
        self.history: list[np.ndarray] = []

    def run_epoch(self, epoch: int, now: float, lr: float, trace: _Trace) -> float:
        for block in self.shards.blocks(epoch):
            now = self._block(block, now, lr, trace)
        return now

    def _local_steps(self, w: np.ndarray, batches: list[np.ndarray], lr: float) -> np.ndarray:
        for idx in batches:
            g = backward(self.model.with_params(w), self.shards.dataset.batch(idx))
            w = sgd_step(w, g, lr)
        return w

    def _block(self, block, start: float, lr: float, trace: _Trace) -> float:
        kind = self.st.kind
        pending: list[tuple[float, int, str]] = []
        arrivals, finals = [], []
        for i, split in enumerate(block.splits):
            batches = self.shards.minibatches(split)
            t = start
            for _ in batches:
                t += self.cfg.compute_time[i]
                pending.append((t, i, "compute-done"))
            arrivals.append(t)
            if kind == "easgd-sync":
                # the last minibatch's gradient goes into the joint elastic step
                w = self._local_steps(self.locals[i], batches[:-1], lr)
                if batches:
                    g = backward(self.model.with_params(w), self.shards.dataset.batch(batches[-1]))
                else:
                    g = Gradient(np.zeros_like(w), 0)
                finals.append((w, g))
            else:
                # BSP and CBM-BMUF restart every block from the global model
                self.locals[i] = self._local_steps(self.global_, batches, lr)
        t_bar = barrier_sync(arrivals, self.cfg.exchange_cost)
        for t, i, k in sorted(pending):
            trace.emit(t, i, k)
        trace.emit(t_bar, SERVER, "barrier")

        if kind == "bsp":
            self.global_ = bsp_average(self.locals)
        elif kind == "bmuf":
            self.bmuf = bmuf_block_update(self.bmuf, self.locals, self.st.zeta, self.st.block_lr)
            self.global_ = self.bmuf.global_
            trace.emit(t_bar, SERVER, "block-commit")
        else:
            ws = [w for w, _ in finals]
            gs = [g for _, g in finals]
            self.locals, self.global_ = easgd_sync_step(ws, gs, self.global_, lr, self.lam)
            for w in self.locals:
                _check_finite(w, "local model")
            trace.emit(t_bar, SERVER, "exchange")
        _check_finite(self.global_, "global model")
        if self.cfg.record_globals:
            self.history.append(self.global_.copy())
        return t_bar


# ---------------------------------------------------------------------------
# asynchronous strategies


class _AsyncCluster:
    """Event-queue runtime for a parameter server and ``N`` workers."""

    def __init__(self, config: SimConfig, model: Model, shards: ShardedDataset):
        self.cfg = config
        self.st = config.strategy
        self.model = model
        self.shards = shards
        self.global_ = model.params.copy()
        self.version = 0
        self.locals = [model.params.copy() for _ in range(config.n_workers)]
        self.history: list[np.ndarray] = []

    def run_epoch(self, epoch: int, now: float, lr: float, trace: _Trace) -> float:
        work = deque(s for b in self.shards.blocks(epoch) for s in b.splits if len(s) > 0)
        heap: list[tuple] = []
        counter = 0

        def schedule(t, worker, action, payload=None):
            nonlocal counter
            heapq.heappush(heap, (t, worker, counter, action, payload))
            counter += 1

        if trace.events and trace.events[-1].key[:2] > (now, 0):
            # the new epoch's pulls must follow the previous epoch's last push
            now = math.nextafter(now, math.inf)
        for i in range(self.cfg.n_workers):
            schedule(now, i, "start")
        end = now
        while heap:
            t, i, _, action, payload = heapq.heappop(heap)
            end = max(end, t)
            if action == "compute-done":
                trace.emit(t, i, "compute-done")
            elif action == "deliver":
                self._deliver(t, i, payload, lr, trace)
                self._begin_round(t, i, work, lr, schedule, trace)
            else:  # start
                self._begin_round(t, i, work, lr, schedule, trace)
        return end

    def _begin_round(self, t, i, work, lr, schedule, trace):
        if not work:
            return
        split = work.popleft()
        batches = [self.shards.dataset.batch(idx) for idx in self.shards.minibatches(split)]
        if self.st.kind == "asgd":
            trace.emit(t, i, "pull")
            pulled_version = self.version
            rnd = asgd_worker_round(self.model, self.global_, batches, len(batches), lr)
            self.locals[i] = rnd.local
            payload = (pulled_version, rnd.grad)
        else:
            w = self.locals[i]
            for b in batches:
                w = sgd_step(w, backward(self.model.with_params(w), b), lr)
            self.locals[i] = w
            payload = None
        done = t
        for _ in batches:
            done += self.cfg.compute_time[i]
            schedule(done, i, "compute-done")
        schedule(done + self.cfg.exchange_cost, i, "deliver", payload)

    def _deliver(self, t, i, payload, lr, trace):
        if self.st.kind == "asgd":
            pulled_version, grad = payload
            if grad.values.shape != self.global_.shape:
                raise ProtocolError(f"worker {i} pushed a gradient of dim {grad.dim}")
            self.global_ = asgd_server_apply(self.global_, grad, lr)
            trace.emit(t, i, "push", self.version - pulled_version)
            self.version += 1
        else:
            if self.st.elastic_alpha > 0:
                self.locals[i], self.global_ = easgd_async_exchange(
                    self.locals[i], self.global_, self.st.elastic_alpha)
                _check_finite(self.global_, "global model")
            trace.emit(t, i, "exchange")
        if self.cfg.record_globals:
            self.history.append(self.global_.copy())


# ---------------------------------------------------------------------------
# driver


def _evaluated(cluster) -> np.ndarray:
    """Model whose losses are reported: the server/global model, except that
    EASGD with the exchange disabled has no meaningful center and is judged
    by the mean of its local models."""
    st = cluster.st
    if st.kind.startswith("easgd") and st.elastic_alpha == 0:
        return bsp_average(cluster.locals)
    return cluster.global_


def _losses(model: Model, w: np.ndarray, train: Dataset, cv: Dataset) -> tuple[float, float]:
    m = model.with_params(w)
    return forward_loss(m, train.batch()), forward_loss(m, cv.batch())


def _diverging(train_loss: float, initial: float) -> bool:
    return not math.isfinite(train_loss) or train_loss > DIVERGENCE_FACTOR * max(initial, 1e-300)


def run_simulation(config: SimConfig, model0: Model, shards: ShardedDataset,
                   cv: Dataset | None = None, reference: RunResult | None = None) -> RunResult:
    """Train ``model0`` with the configured strategy until the schedule stops it.

    ``model0`` is the shared warm-start model and ``shards`` must be built for
    ``config.n_workers`` workers and the strategy's sync period.  Stops on
    scheduler stop (``converged``), after ``epochs_max`` epochs
    (``max-epochs``) or when the training loss blows up (``diverged``).
    """
    st = config.strategy
    if shards.n_workers != st.n_workers or shards.sync_period != st.sync_period:
        raise InputError("dataset is sharded for a different worker count or sync period")
    train = shards.dataset
    cv = cv if cv is not None else train
    cluster = (_SyncCluster if st.kind in SYNCHRONOUS else _AsyncCluster)(config, model0, shards)
    trace = _Trace()

    sched = LrSchedulerState(st.lr)
    tr0, cv0 = _losses(model0, _evaluated(cluster), train, cv)
    sched, _ = lr_schedule_update(sched, cv0)
    curve = [CurvePoint(0, tr0, cv0, st.lr, 0.0)]
    now = 0.0
    status = "max-epochs"
    for epoch in range(1, config.epochs_max + 1):
        lr = sched.current_lr
        try:
            now = cluster.run_epoch(epoch - 1, now, lr, trace)
            tr, cvl = _losses(model0, _evaluated(cluster), train, cv)
        except NumericError:
            curve.append(CurvePoint(epoch, math.inf, math.inf, lr, now))
            status = "diverged"
            break
        curve.append(CurvePoint(epoch, tr, cvl, lr, now))
        if _diverging(tr, tr0) or not math.isfinite(cvl):
            status = "diverged"
            break
        sched, stop = lr_schedule_update(sched, cvl)
        if stop:
            status = "converged"
            break

    result = RunResult(_evaluated(cluster).copy(), curve, trace.events, now, status,
                       [w.copy() for w in cluster.locals], None, cluster.history)
    if reference is not None:
        result.speedup_vs_reference = measure_speedup(result, reference)
    return result


def sequential_sgd(model0: Model, train: Dataset, minibatch: int, lr: float,
                   compute_time: float = 1.0, epochs_max: int = 20, seed: int = 0,
                   reshuffle: bool = True, cv: Dataset | None = None) -> RunResult:
    """Single-worker minibatch SGD under the same schedule: the speedup and reduction reference."""
    cv = cv if cv is not None else train
    w = model0.params.copy()
    sched = LrSchedulerState(lr)
    tr0, cv0 = _losses(model0, w, train, cv)
    sched, _ = lr_schedule_update(sched, cv0)
    curve = [CurvePoint(0, tr0, cv0, lr, 0.0)]
    trace = _Trace()
    now = 0.0
    status = "max-epochs"
    for epoch in range(1, epochs_max + 1):
        rate = sched.current_lr
        perm = epoch_permutation(train.n, seed, epoch - 1 if reshuffle else 0)
        try:
            for start in range(0, train.n, minibatch):
                batch = train.batch(perm[start:start + minibatch])
                w = sgd_step(w, backward(model0.with_params(w), batch), rate)
                now += compute_time
                trace.emit(now, 0, "compute-done")
            tr, cvl = _losses(model0, w, train, cv)
        except NumericError:
            curve.append(CurvePoint(epoch, math.inf, math.inf, rate, now))
            status = "diverged"
            break
        curve.append(CurvePoint(epoch, tr, cvl, rate, now))
        if _diverging(tr, tr0):
            status = "diverged"
            break
        sched, stop = lr_schedule_update(sched, cvl)
        if stop:
            status = "converged"
            break
    return RunResult(w, curve, trace.events, now, status, [w.copy()])


def warm_start(model: Model, train: Dataset, minibatch: int, lr: float, seed: int = 0,
               epochs: int = 1) -> Model:
    """Shared initial model: ``epochs`` passes of single-worker minibatch SGD."""
    w = model.params.copy()
    for e in range(epochs):
        perm = rng(seed, WARMSTART_STREAM + e).permutation(train.n)
        for start in range(0, train.n, minibatch):
            batch = train.batch(perm[start:start + minibatch])
            w = sgd_step(w, backward(model.with_params(w), batch), lr)
    return model.with_params(w)


# ---------------------------------------------------------------------------
# export


def trace_csv(events: Sequence[SimEvent]) -> str:
    buf = io.StringIO()
    out = csv.writer(buf, lineterminator="\n")
    out.writerow(["time", "worker", "kind", "seq", "staleness"])
    for e in events:
        who = "server" if e.worker == SERVER else e.worker
        out.writerow([repr(e.time), who, e.kind, e.seq, "" if e.staleness_k is None else e.staleness_k])
    return buf.getvalue()


def curve_csv(curve: Sequence[CurvePoint]) -> str:
    buf = io.StringIO()
    out = csv.writer(buf, lineterminator="\n")
    out.writerow(["epoch", "train_loss", "cv_loss", "lr", "sim_time"])
    for p in curve:
        out.writerow([p.epoch, repr(p.train_loss), repr(p.cv_loss), repr(p.lr), repr(p.sim_time)])
    return buf.getvalue()


def read_curve_csv(text: str) -> list[CurvePoint]:
    rows = csv.DictReader(io.StringIO(text))
    return [CurvePoint(int(r["epoch"]), float(r["train_loss"]), float(r["cv_loss"]),
                       float(r["lr"]), float(r["sim_time"])) for r in rows]
