"""Command-line front end: gen-data, run-al, sweep-lambda, report.

Every command accepts ``--config FILE`` (flat key=value lines) plus a
few overriding flags. Exit codes: 0 success, 2 configuration error,
3 data error, 4 runtime contract violation.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import data as data_mod
from . import harness
from .harness import ConfigError
from .tensor import ContractError, DimensionError


def _load_pairs(args) -> dict[str, str]:
    pairs: dict[str, str] = {}
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        pairs = harness.parse_config_pairs(path.read_text())
    for key, attr in (("lambda", "lam"), ("alpha", "alpha"), ("strategy", "strategy"),
                      ("seeds", "seeds"), ("rounds", "rounds"), ("k", "k"),
                      ("out", "out")):
        value = getattr(args, attr, None)
        if value is not None:
            pairs[key] = str(value)
    return pairs


def _require_out(cfg_out, args_out) -> str:
    out = args_out or cfg_out
    if not out:
        raise ConfigError("an output directory is required (--out or out= in config)")
    return out


def _cmd_gen_data(args) -> int:
    pairs = _load_pairs(args)
    spec = harness.dataset_spec_from_pairs(pairs)
    try:
        spec.validate()
    except ContractError as exc:
        raise ConfigError(str(exc)) from exc
    out = _require_out(pairs.get("out"), args.out)
    dataset = data_mod.generate(spec)
    data_mod.save(dataset, out)
    print(f"wrote {len(dataset.samples)} samples to {out}")
    return 0


def _cmd_run_al(args) -> int:
    pairs = _load_pairs(args)
    cfg = harness.experiment_config_from_pairs(pairs)
    out = _require_out(cfg.out_dir, args.out)
    results = harness.run_experiment(cfg, out_dir=out)
    finals = np.array([[r.metrics[-1].accuracy, r.metrics[-1].macro_auc,
                        r.metrics[-1].mean_dice] for r in results])
    mean = finals.mean(axis=0)
    print(f"strategy={cfg.strategy} lambda={cfg.lam} seeds={len(cfg.seeds)}")
    print(f"final accuracy {mean[0]:.4f}  macro-AUC {mean[1]:.4f}  mean dice {mean[2]:.4f}")
    print(f"artifacts in {out}")
    return 0


def _cmd_sweep_lambda(args) -> int:
    pairs = _load_pairs(args)
    cfg = harness.experiment_config_from_pairs(pairs)
    out = _require_out(cfg.out_dir, args.out)
    try:
        lambdas = [float(v) for v in args.lambdas.split(",") if v.strip() != ""]
    except ValueError as exc:
        raise ConfigError(f"bad --lambdas list {args.lambdas!r}") from exc
    rows = harness.sweep_lambda(cfg, lambdas, out_dir=out)
    by_lam: dict[float, list[float]] = {}
    for r in rows:
        by_lam.setdefault(r["lambda"], []).append(r["final_accuracy"])
    for lam in sorted(by_lam):
        print(f"lambda={lam:g} mean final accuracy {np.mean(by_lam[lam]):.4f}")
    print(f"sweep table in {out}/sweep.csv")
    return 0


def _cmd_report(args) -> int:
    out = harness.report(args.run_dir, out_dir=args.out)
    print(f"report written to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="egal",
                                     description="explanation-guided active learning")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, with_overrides=True):
        p.add_argument("--config", help="flat key=value config file")
        p.add_argument("--out", help="output directory")
        if with_overrides:
            p.add_argument("--lambda", dest="lam", type=float, default=None,
                           help="composite mixing weight in [0,1]")
            p.add_argument("--alpha", type=float, default=None,
                           help="explanation-loss weight")
            p.add_argument("--strategy", choices=harness.acquisition.STRATEGIES,
                           default=None)
            p.add_argument("--seeds", default=None, help="comma-separated run seeds")
            p.add_argument("--rounds", type=int, default=None)
            p.add_argument("--k", type=int, default=None, help="samples per round")

    p = sub.add_parser("gen-data", help="generate and save a synthetic dataset")
    common(p, with_overrides=False)
    p.set_defaults(fn=_cmd_gen_data)

    p = sub.add_parser("run-al", help="run one active-learning experiment")
    common(p)
    p.set_defaults(fn=_cmd_run_al)

    p = sub.add_parser("sweep-lambda", help="run the mixing-weight sweep")
    common(p)
    p.add_argument("--lambdas", default="0,0.25,0.5,0.75,1",
                   help="comma-separated lambda values")
    p.set_defaults(fn=_cmd_sweep_lambda)

    p = sub.add_parser("report", help="aggregate a finished run directory")
    p.add_argument("run_dir")
    p.add_argument("--out", default=None)
    p.set_defaults(fn=_cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except data_mod.DatasetError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except (ContractError, DimensionError) as exc:
        print(f"contract violation: {exc}", file=sys.stderr)
        return 4


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    sys.exit(main())
