"""Experiment configuration files.

The format is one ``key = value`` per line with dotted section names::

    # comments start with '#'
    seed = 42
    data.task = linreg
    strategy.kind = bmuf
    strategy.n_workers = 4
    timing.compute_time = 1.0, 1.0, 1.0, 2.5
    sweep.sync_period = 5, 20, 80

List values are comma separated.  ``sweep.*`` keys turn a file into a grid of
runs, one per combination of the listed values.  Unknown keys are rejected.
"""

from __future__ import annotations

import hashlib
import itertools
from dataclasses import dataclass, replace
from pathlib import Path

from .errors import ConfigError
from .strategies import KINDS, StrategyConfig


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _list(conv):
    def parse(s: str):
        items = [x.strip() for x in s.split(",") if x.strip()]
        if not items:
            raise ValueError("empty list")
        return tuple(conv(x) for x in items)
    return parse


def _opt_float(s: str):
    return None if s.strip().lower() in ("", "none") else float(s)


# key -> (attribute on ExperimentConfig, parser)
KEYS = {
    "seed": ("seed", int),
    "out": ("out", str),
    "data.task": ("task", str),
    "data.n": ("n", int),
    "data.d": ("d", int),
    "data.noise": ("noise", float),
    "data.cond": ("cond", float),
    "data.classes": ("n_classes", int),
    "data.cv_fraction": ("cv_fraction", float),
    "data.reshuffle": ("reshuffle", _bool),
    "model.kind": ("model_kind", str),
    "model.hidden": ("hidden", _list(int)),
    "model.loss": ("loss", str),
    "strategy.kind": ("kind", str),
    "strategy.n_workers": ("n_workers", int),
    "strategy.sync_period": ("sync_period", int),
    "strategy.lr": ("lr", float),
    "strategy.block_momentum": ("block_momentum", _opt_float),
    "strategy.block_lr": ("block_lr", float),
    "strategy.c_constant": ("c_constant", _opt_float),
    "strategy.elastic_alpha": ("elastic_alpha", float),
    "train.minibatch": ("minibatch", int),
    "train.epochs_max": ("epochs_max", int),
    "train.warm_start_epochs": ("warm_start_epochs", int),
    "train.warm_start_lr": ("warm_start_lr", _opt_float),
    "timing.compute_time": ("compute_time", _list(float)),
    "timing.exchange_cost": ("exchange_cost", float),
    "sweep.kind": ("sweep_kind", _list(str)),
    "sweep.n_workers": ("sweep_n_workers", _list(int)),
    "sweep.sync_period": ("sweep_sync_period", _list(int)),
    "sweep.minibatch": ("sweep_minibatch", _list(int)),
}
_ATTR_TO_KEY = {attr: key for key, (attr, _) in KEYS.items()}
SWEEP_AXES = {"sweep_kind": "kind", "sweep_n_workers": "n_workers",
              "sweep_sync_period": "sync_period", "sweep_minibatch": "minibatch"}
# per-strategy sync periods that fill in when a sweep varies the strategy only
DEFAULT_PERIODS = {"bsp": 5, "asgd": 1, "bmuf": 80, "easgd-sync": 64, "easgd-async": 64}


@dataclass(frozen=True)
class ExperimentConfig:
    kind: str = ""
    seed: int = 0
    out: str = ""
    task: str = "linreg"
    n: int = 2000
    d: int = 20
    noise: float = 0.0
    cond: float = 10.0
    n_classes: int = 4
    cv_fraction: float = 0.1
    reshuffle: bool = True
    model_kind: str = "linear"
    hidden: tuple[int, ...] = (16,)
    loss: str = ""
    n_workers: int = 4
    sync_period: int | None = None
    lr: float = 0.05
    block_momentum: float | None = None
    block_lr: float = 1.0
    c_constant: float | None = None
    elastic_alpha: float = 0.1
    minibatch: int = 10
    epochs_max: int = 30
    warm_start_epochs: int = 1
    warm_start_lr: float | None = None
    compute_time: tuple[float, ...] = (1.0,)
    exchange_cost: float = 0.0
    sweep_kind: tuple[str, ...] = ()
    sweep_n_workers: tuple[int, ...] = ()
    sweep_sync_period: tuple[int, ...] = ()
    sweep_minibatch: tuple[int, ...] = ()

    @property
    def is_sweep(self) -> bool:
        return any(getattr(self, a) for a in SWEEP_AXES)

    @property
    def tau(self) -> int:
        return self.sync_period if self.sync_period is not None else DEFAULT_PERIODS[self.kind]

    def strategy(self) -> StrategyConfig:
        return StrategyConfig(self.kind, self.n_workers, self.tau, self.lr, self.block_momentum,
                              self.block_lr, self.c_constant, self.elastic_alpha)

    def worker_times(self) -> tuple[float, ...]:
        ct = self.compute_time
        if len(ct) == 1:
            return ct * self.n_workers
        if len(ct) != self.n_workers:
            raise ConfigError(f"{len(ct)} entries for {self.n_workers} workers",
                              "timing.compute_time")
        return ct

    def validate(self) -> "ExperimentConfig":
        """Check a single (non-sweep) cell; raises ConfigError naming the key."""
        if not self.kind:
            raise ConfigError("missing required key", "strategy.kind")
        self.strategy()
        if self.task not in ("linreg", "logreg", "mlp-teacher"):
            raise ConfigError(f"unknown task {self.task!r}", "data.task")
        if self.model_kind not in ("linear", "logistic", "mlp"):
            raise ConfigError(f"unknown model {self.model_kind!r}", "model.kind")
        pairs = {"linreg": ("linear", "mlp"), "logreg": ("logistic", "mlp"), "mlp-teacher": ("mlp",)}
        if self.model_kind not in pairs[self.task]:
            raise ConfigError(f"{self.model_kind} model cannot fit task {self.task}", "model.kind")
        for attr, lo in (("n", 2), ("d", 1), ("minibatch", 1), ("epochs_max", 1)):
            if getattr(self, attr) < lo:
                raise ConfigError(f"must be >= {lo}", _ATTR_TO_KEY[attr])
        if self.warm_start_epochs < 0:
            raise ConfigError("must be >= 0", "train.warm_start_epochs")
        if not 0 < self.cv_fraction <= 0.5:
            raise ConfigError("must lie in (0, 0.5]", "data.cv_fraction")
        if self.noise < 0:
            raise ConfigError("must be >= 0", "data.noise")
        if self.cond < 1:
            raise ConfigError("must be >= 1", "data.cond")
        if any(t <= 0 for t in self.compute_time):
            raise ConfigError("compute times must be > 0", "timing.compute_time")
        if self.exchange_cost < 0:
            raise ConfigError("must be >= 0", "timing.exchange_cost")
        self.worker_times()
        n_train = self.n - int(round(self.cv_fraction * self.n))
        if n_train < self.n_workers * self.minibatch:
            raise ConfigError(
                f"minibatch {self.minibatch} too large for {n_train} training samples "
                f"over {self.n_workers} workers", "train.minibatch")
        return self

    def cells(self) -> list[tuple[str, "ExperimentConfig"]]:
        """Resolved single-run configs, one per sweep combination."""
        axes = [(attr, getattr(self, sweep) or (getattr(self, attr),))
                for sweep, attr in SWEEP_AXES.items()]
        base = replace(self, sweep_kind=(), sweep_n_workers=(), sweep_sync_period=(),
                       sweep_minibatch=())
        out = []
        for combo in itertools.product(*(vals for _, vals in axes)):
            cell = replace(base, **{attr: v for (attr, _), v in zip(axes, combo)})
            if cell.kind not in KINDS:
                raise ConfigError(f"unknown strategy {cell.kind!r}",
                                  "sweep.kind" if self.sweep_kind else "strategy.kind")
            out.append((cell.cell_name(), cell.validate()))
        return out

    def cell_name(self) -> str:
        return f"{self.kind}_n{self.n_workers}_tau{self.tau}_mb{self.minibatch}"

    def to_text(self) -> str:
        lines = []
        for key, (attr, _) in KEYS.items():
            v = getattr(self, attr)
            if key == "strategy.sync_period":
                v = self.tau if self.kind else v
            if v is None or v == () or (key == "out"):
                continue
            if isinstance(v, tuple):
                v = ", ".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = str(v).lower()
            lines.append(f"{key} = {v}")
        return "\n".join(lines) + "\n"

    def config_hash(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()

    def problem_key(self) -> str:
        """Hash of the dataset and model settings; runs are comparable iff these match."""
        keys = [k for k in KEYS if k.startswith(("data.", "model.")) or k == "seed"]
        text = "\n".join(f"{k}={getattr(self, KEYS[k][0])}" for k in keys)
        return hashlib.sha256(text.encode()).hexdigest()[:16]


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    values: dict[str, object] = {}
    seen = set()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, _, val = (s.strip() for s in line.partition("="))
        if key not in KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown key", key)
        if key in seen:
            raise ConfigError(f"{source}:{lineno}: duplicate key", key)
        seen.add(key)
        attr, conv = KEYS[key]
        try:
            values[attr] = conv(val)
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value {val!r} ({exc})", key) from None
    cfg = ExperimentConfig(**values)
    if not cfg.kind and not cfg.sweep_kind:
        raise ConfigError("missing required key", "strategy.kind")
    return cfg


def load_config(path: str | Path) -> ExperimentConfig:
    p = Path(path)
    return parse_config(p.read_text(), str(p))


def bundled_config(name: str) -> Path:
    """Path of a config shipped with the package (e.g. ``tau-sweep``)."""
    p = Path(__file__).parent / "configs" / f"{name}.cfg"
    if not p.exists():
        raise ConfigError(f"no bundled config named {name!r}")
    return p
