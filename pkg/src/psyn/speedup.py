"""Analytic speedup model for data-parallel training.

    s = 1 / (utilization / N + t_c / t_s)

``utilization`` (>= 1) is the slowdown factor of a worker whose minibatch does
not fill the device; ``t_c / t_s`` is communication overhead per epoch relative
to single-worker compute time per epoch.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

from .errors import InputError

STRUCTURES = ("shared-ratio", "per-period-ratio")


@dataclass(frozen=True)
class SpeedupInputs:
    t_s: float
    t_c: float
    n_workers: int
    utilization: float = 1.0

    def __post_init__(self):
        if not self.t_s > 0 or self.t_c < 0 or self.n_workers < 1 or self.utilization < 1:
            raise InputError(f"invalid speedup inputs {self}")

    @property
    def ratio(self) -> float:
        return self.t_c / self.t_s


@dataclass(frozen=True)
class SpeedupObservation:
    n_workers: int
    sync_period: int
    minibatch: int
    measured_speedup: float

    def __post_init__(self):
        if self.n_workers < 1 or not self.measured_speedup > 0:
            raise InputError(f"invalid observation {self}")

    @property
    def superlinear(self) -> bool:
        return self.measured_speedup > self.n_workers


def speedup(n_workers: float, ratio: float, utilization: float = 1.0) -> float:
    return 1.0 / (utilization / n_workers + ratio)


def predict_speedup(inputs: SpeedupInputs) -> float:
    return speedup(inputs.n_workers, inputs.ratio, inputs.utilization)


def invert_ratio(s: float, n_workers: int, utilization: float = 1.0) -> float:
    """The ``t_c / t_s`` that yields speedup ``s``."""
    if not s > 0:
        raise InputError("speedup must be positive")
    # slack for the last-bit difference between 1 / (u / N) and N / u
    if s > n_workers / utilization * (1.0 + 1e-12):
        raise InputError(
            f"speedup {s} exceeds N/utilization = {n_workers / utilization}: infeasible"
        )
    return max(1.0 / s - utilization / n_workers, 0.0)


# ---------------------------------------------------------------------------
# fitting


def _golden(f: Callable[[float], float], lo: float, hi: float, tol: float = 1e-13) -> float:
    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c, d = b - invphi * (b - a), a + invphi * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol * (1.0 + abs(a) + abs(b)):
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = f(d)
    return (a + b) / 2.0


def _grid_then_golden(f: Callable[[float], float], lo: float, hi: float, n: int = 64) -> float:
    pts = [lo + (hi - lo) * i / n for i in range(n + 1)]
    vals = [f(p) for p in pts]
    j = min(range(len(pts)), key=vals.__getitem__)
    return _golden(f, pts[max(j - 1, 0)], pts[min(j + 1, n)])


@dataclass(frozen=True)
class FitResult:
    utilization: float
    ratios: dict[tuple, float]
    residuals: list[float]
    structure: str

    def predict(self, obs: SpeedupObservation) -> float:
        return speedup(obs.n_workers, self.ratios[_group(obs, self.structure)], self.utilization)

    @property
    def sse(self) -> float:
        return sum(r * r for r in self.residuals)


def _group(obs: SpeedupObservation, structure: str) -> tuple:
    # a "period" group is one (sync period, minibatch) setting
    return () if structure == "shared-ratio" else (obs.sync_period, obs.minibatch)


def fit_model(observations: Sequence[SpeedupObservation], structure: str = "shared-ratio",
              utilization: float | None = None, max_utilization: float = 16.0,
              max_ratio: float = 10.0) -> FitResult:
    """Least-squares fit of utilization and per-group ``t_c / t_s`` to measured speedups.

    Pass ``utilization`` to hold it fixed (it is not identifiable when every
    observation has the same worker count).  For a fixed utilization each
    group's ratio is a one-dimensional problem; the outer search over
    utilization is a coarse grid refined by golden section.
    """
    if structure not in STRUCTURES:
        raise InputError(f"structure must be one of {STRUCTURES}")
    groups: dict[tuple, list[SpeedupObservation]] = {}
    for o in observations:
        groups.setdefault(_group(o, structure), []).append(o)
    n_params = len(groups) + (utilization is None)
    if not groups or len(observations) < n_params:
        raise InputError(
            f"underdetermined: {len(observations)} observations for {n_params} parameters"
        )
    if utilization is None and len({o.n_workers for o in observations}) < 2:
        raise InputError("utilization is not identifiable from a single worker count; fix it")

    def best_ratios(u: float) -> dict[tuple, float]:
        out = {}
        for key, obs in groups.items():
            def sse(r, obs=obs):
                return sum((speedup(o.n_workers, r, u) - o.measured_speedup) ** 2 for o in obs)
            out[key] = _grid_then_golden(sse, 0.0, max_ratio)
        return out

    def total(u: float) -> float:
        ratios = best_ratios(u)
        return sum((speedup(o.n_workers, ratios[_group(o, structure)], u) - o.measured_speedup) ** 2
                   for o in observations)

    u = utilization if utilization is not None else _grid_then_golden(total, 1.0, max_utilization, 48)
    ratios = best_ratios(u)
    residuals = [speedup(o.n_workers, ratios[_group(o, structure)], u) - o.measured_speedup
                 for o in observations]
    return FitResult(u, ratios, residuals, structure)


# ---------------------------------------------------------------------------
# CSV io


def read_observations(text: str) -> list[SpeedupObservation]:
    rows = csv.DictReader(io.StringIO(text))
    need = {"n_workers", "sync_period", "minibatch", "speedup"}
    if rows.fieldnames is None or not need <= set(rows.fieldnames):
        raise InputError(f"observation CSV needs columns {sorted(need)}")
    return [SpeedupObservation(int(r["n_workers"]), int(r["sync_period"]), int(r["minibatch"]),
                               float(r["speedup"])) for r in rows]


def fit_report_csv(observations: Iterable[SpeedupObservation], fit: FitResult) -> str:
    buf = io.StringIO()
    out = csv.writer(buf, lineterminator="\n")
    out.writerow(["n_workers", "sync_period", "minibatch", "speedup", "predicted",
                  "residual", "ratio", "utilization", "superlinear"])
    for o, r in zip(observations, fit.residuals):
        out.writerow([o.n_workers, o.sync_period, o.minibatch, o.measured_speedup,
                      repr(fit.predict(o)), repr(r), repr(fit.ratios[_group(o, fit.structure)]),
                      repr(fit.utilization), int(o.superlinear)])
    return buf.getvalue()
