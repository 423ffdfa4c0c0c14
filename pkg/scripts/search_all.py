"""Random hyperparameter search for several models on one experiment's data.

    python scripts/search_all.py --config configs/desk.yaml --trials 40

Each model's trials land in ``<experiment>/search/<model>/`` and the combined
validation-AUC distribution plot in ``<experiment>/search/search.svg``.
"""

import argparse
import csv
import logging

import yaml

from lateralview import experiment as ex


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--config", default="configs/desk.yaml")
    p.add_argument("--space", default="configs/search_space.yaml")
    p.add_argument("--models", nargs="+", default=None)
    p.add_argument("--trials", type=int, default=40)
    p.add_argument("--out", default=None)
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    cfg = ex.ExperimentConfig.load(args.config)
    with open(args.space) as f:
        space = yaml.safe_load(f)
    for model in args.models or cfg.models:
        out = ex.cmd_search(cfg, model, space, args.trials, args.out)
        with open(out / "trials.csv") as f:
            best = next(csv.DictReader(f))
        print(f"{model:12s} best val AUC {float(best['val_auc']):.4f}  ({out / 'best_config.yaml'})")


if __name__ == "__main__":
    main()
