"""Train every model on the synthetic desk task and write the full report set.

    python scripts/desk_reproduction.py --config configs/desk.yaml --out experiments

Besides the standard products (table, sweep, comparison, t-tests) this prints
macro AUC stratified by where each label is visible, which is where the
benefit of the lateral view shows up.
"""

import argparse
import logging

import numpy as np

from lateralview import experiment as ex
from lateralview.evaluation import REGIMES
from lateralview.synth import BOTH, L_ONLY, PA_ONLY, labels_by_visibility
from lateralview.training import DISPLAY_NAMES


def stratified(records, truth):
    groups = {"PA-visible": [PA_ONLY], "L-visible": [L_ONLY], "both-visible": [BOTH]}
    groups = {k: labels_by_visibility(truth, v) for k, v in groups.items()}
    lines = [f"{'model':12s} {'regime':8s} " + " ".join(f"{g:>13s}" for g in groups)]
    for name in ex.model_order(r.model for r in records):
        for regime in REGIMES:
            cells = []
            for labels in groups.values():
                vals = [r.test[regime]["per_label"].get(l) for r in records
                        if r.model == name and regime in r.test for l in labels]
                vals = [v for v in vals if v is not None]
                cells.append(f"{np.mean(vals):13.3f}" if vals else f"{'---':>13s}")
            if any(c.strip() != "---" for c in cells):
                lines.append(f"{DISPLAY_NAMES[name]:12s} {regime:8s} " + " ".join(cells))
    return "\n".join(lines)


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--config", default="configs/desk.yaml")
    p.add_argument("--out", default=None)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--compare", nargs=2, default=["auxloss_cl", "dualnet"], metavar=("A", "B"))
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    cfg = ex.ExperimentConfig.load(args.config)
    exp, records = ex.cmd_train(cfg, args.out, jobs=args.jobs)
    print(f"experiment: {exp}\n")
    print(ex.cmd_evaluate(exp))
    truth = ex.load_truth(exp)
    if truth is not None:
        print("\nMacro AUC by label visibility")
        print(stratified(ex.load_records(exp), truth))
    if any(ex.native_regime(m) == ex.BOTH for m in cfg.models):
        print(f"\nsweep written to {ex.cmd_sweep(exp)}")
    a, b = args.compare
    if cfg.n_runs >= 2 and a in cfg.models and b in cfg.models:
        print(f"comparison written to {ex.cmd_compare(exp, a, b)}")
    print()
    print(ex.cmd_report(exp))


if __name__ == "__main__":
    main()
