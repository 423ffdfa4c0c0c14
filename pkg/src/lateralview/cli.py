"""Command-line entry point: ``lateralview <verb> ...``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import yaml

from . import experiment as ex
from .data import prepare
from .errors import LateralViewError
from .evaluation import REGIMES
from .synth import SynthConfig, generate

log = logging.getLogger("lateralview")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _load_yaml(path):
    if path is None:
        return {}
    with open(path) as f:
        return yaml.safe_load(f) or {}


def _experiment_config(args) -> ex.ExperimentConfig:
    if args.config is None:
        raise UsageError("--config is required")
    d = _load_yaml(args.config)
    if args.seed is not None:
        d["seed"] = args.seed
    return ex.ExperimentConfig.from_dict(d)


def cmd_prepare(args):
    if not args.manifest or not args.hierarchy:
        raise UsageError("prepare needs --manifest and --hierarchy")
    out = args.out or ex.default_out_root() / "prepared"
    summary = prepare(args.manifest, args.hierarchy, out, side=args.side,
                      min_patients=args.min_patients, extended=args.extended)
    print(json.dumps(summary, indent=1))


def cmd_synth(args):
    d = _load_yaml(args.config)
    d = d.get("dataset", {}).get("synth", d) if "dataset" in d else d
    for key in ("n_patients", "n_labels", "image_side", "noise_std"):
        v = getattr(args, key)
        if v is not None:
            d[key] = v
    if args.seed is not None:
        d["seed"] = args.seed
    cfg = SynthConfig(**d)
    out = Path(args.out or ex.default_out_root() / "synth")
    generate(cfg, out)
    print(out)


def cmd_train(args):
    cfg = _experiment_config(args)
    exp, records = ex.cmd_train(cfg, args.out, jobs=args.jobs)
    print(exp)
    for r in records:
        print(f"{r.run_id}: best validation AUC {r.best_val_auc:.4f} at epoch {r.best_epoch}")


def cmd_evaluate(args):
    regimes = tuple(args.regimes.split(",")) if args.regimes else REGIMES
    bad = [r for r in regimes if r not in REGIMES]
    if bad:
        raise UsageError(f"unknown regimes {bad}; choose from {','.join(REGIMES)}")
    print(ex.cmd_evaluate(args.experiment, regimes), end="")


def cmd_sweep(args):
    print(ex.cmd_sweep(args.experiment))


def cmd_compare(args):
    print(ex.cmd_compare(args.experiment, args.model_a, args.model_b))


def cmd_search(args):
    cfg = _experiment_config(args)
    if args.space is None:
        raise UsageError("search needs --space")
    out = ex.cmd_search(cfg, args.model, _load_yaml(args.space), args.trials, args.out)
    print(out)


def cmd_report(args):
    print(ex.cmd_report(args.experiment), end="")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="experiment or synth config (YAML/JSON)")
    common.add_argument("--out", help=f"output directory or root (default ${ex.OUT_ENV} or ./experiments)")
    common.add_argument("--seed", type=int)
    common.add_argument("--jobs", type=int, default=1)
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="lateralview", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    s = sub.add_parser("prepare", parents=[common], help="ingest a manifest into a tensor cache")
    s.add_argument("--manifest")
    s.add_argument("--hierarchy")
    s.add_argument("--side", type=int, default=224)
    s.add_argument("--min-patients", type=int, default=50)
    s.add_argument("--extended", action="store_true", help="add PA-only patients")
    s.set_defaults(func=cmd_prepare)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic paired-view dataset")
    s.add_argument("--n-patients", type=int)
    s.add_argument("--n-labels", type=int)
    s.add_argument("--image-side", type=int)
    s.add_argument("--noise-std", type=float)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", parents=[common], help="train every model for n_runs splits")
    s.set_defaults(func=cmd_train)

    for verb, func, hlp in (("evaluate", cmd_evaluate, "mean ± std table over test regimes"),
                            ("sweep", cmd_sweep, "lateral-proportion sweep"),
                            ("report", cmd_report, "table plus pairwise t-tests")):
        s = sub.add_parser(verb, parents=[common], help=hlp)
        s.add_argument("experiment")
        if verb == "evaluate":
            s.add_argument("--regimes", help="comma separated subset of BOTH,PA_ONLY,L_ONLY")
        s.set_defaults(func=func)

    s = sub.add_parser("compare", parents=[common], help="label-wise indifference comparison")
    s.add_argument("experiment")
    s.add_argument("model_a")
    s.add_argument("model_b")
    s.set_defaults(func=cmd_compare)

    s = sub.add_parser("search", parents=[common], help="random hyperparameter search")
    s.add_argument("--model", required=True)
    s.add_argument("--space", help="search space file")
    s.add_argument("--trials", type=int, default=40)
    s.set_defaults(func=cmd_search)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        args.func(args)
    except UsageError as e:
        print(f"lateralview: {e}", file=sys.stderr)
        return 1
    except LateralViewError as e:
        print(f"lateralview: {type(e).__name__}: {e}", file=sys.stderr)
        return e.exit_code
    except (KeyError, ValueError) as e:
        print(f"lateralview: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
