"""Command line entry point: ``psyn run|sweep|compare|fit-speedup|reproduce-figures``.

Exit codes: 0 finished, 2 training diverged, 64 configuration error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import experiments as ex
from .config import bundled_config, load_config
from .errors import ConfigError, InputError
from .speedup import STRUCTURES, fit_model, fit_report_csv, read_observations

log = logging.getLogger("psyn")


def _config(args):
    path = Path(args.config)
    if not path.exists() and not path.suffix:
        path = bundled_config(args.config)
    cfg = load_config(path)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    out = Path(args.out) if args.out else ex.default_out(cfg, path)
    return cfg, out


def cmd_run(args) -> int:
    cfg, out = _config(args)
    if cfg.is_sweep:
        raise ConfigError("config defines sweep axes; use `psyn sweep`", "sweep")
    code, res = ex.run_experiment(cfg.validate(), out)
    print(f"{out}: {res.status}, {res.epochs} epochs, final cv loss {res.final_cv_loss:.6g}, "
          f"speedup {res.speedup_vs_reference:.3f}")
    return code


def cmd_sweep(args) -> int:
    cfg, out = _config(args)
    done = ex.sweep(cfg, out, args.jobs)
    sys.stdout.write((out / "compare.csv").read_text())
    print(f"{len(done)} runs in {out}")
    return ex.EXIT_OK


def cmd_compare(args) -> int:
    table = ex.compare(args.runs)
    _emit(table, args.out)
    return ex.EXIT_OK


def cmd_figures(args) -> int:
    _emit(ex.reproduce_figures(args.runs), args.out)
    return ex.EXIT_OK


def cmd_fit(args) -> int:
    path = Path(args.observations)
    if not path.exists() and not path.suffix:
        path = Path(__file__).parent / "tables" / f"{args.observations}.csv"
    obs = read_observations(path.read_text())
    fit = fit_model(obs, args.structure, args.utilization)
    _emit(fit_report_csv(obs, fit), args.out)
    log.info("utilization %.6g, sse %.3g", fit.utilization, fit.sse)
    return ex.EXIT_OK


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="psyn", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True)

    for name, fn, helptext in (("run", cmd_run, "simulate one config"),
                               ("sweep", cmd_sweep, "simulate every cell of a sweep config")):
        sp = sub.add_parser(name, help=helptext)
        sp.add_argument("--config", required=True,
                        help="config file, or the name of a bundled config (e.g. tau-sweep)")
        sp.add_argument("--out", help="output directory (default $PSYN_OUT/<config name>)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--jobs", type=int, default=1, help="parallel sweep cells")
        sp.set_defaults(fn=fn)

    sp = sub.add_parser("compare", help="comparison table of finished runs")
    sp.add_argument("runs", nargs="+")
    sp.add_argument("--out")
    sp.set_defaults(fn=cmd_compare)

    sp = sub.add_parser("reproduce-figures", help="learning-curve series as long CSV")
    sp.add_argument("runs", nargs="+")
    sp.add_argument("--out")
    sp.set_defaults(fn=cmd_figures)

    sp = sub.add_parser("fit-speedup", help="fit the speedup model to measured speedups")
    sp.add_argument("observations",
                    help="CSV n_workers,sync_period,minibatch,speedup or a bundled table name")
    sp.add_argument("--structure", choices=STRUCTURES, default="shared-ratio")
    sp.add_argument("--utilization", type=float, help="hold utilization fixed")
    sp.add_argument("--out")
    sp.set_defaults(fn=cmd_fit)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return ex.EXIT_CONFIG
    except (InputError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
