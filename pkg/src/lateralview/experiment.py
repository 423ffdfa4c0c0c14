"""Experiment directories: dataset materialisation, resumable training runs and reports.

Layout of an experiment directory::

    config.yaml            resolved ExperimentConfig
    data/                  prepared cache (vocab.json, studies.json, cache/)
    raw/                   synthetic source images and manifest, when synthesised
    splits/run{i}.json     patient split shared by every model for run i
    runs/{model}/run{i}/   record.json + checkpoint.pt
    eval/ sweep/ compare/ search/   outputs of the analysis commands
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import os
import shutil
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import yaml

from . import plots
from .data import (
    DatasetManifest, PreparedData, SplitAssignment, Study, extend_split, load_prepared,
    make_split, prepare,
)
from .errors import NoRuns, VocabularyMismatch, ZeroVariance
from .evaluation import (
    BOTH, INDIFFERENT, L_ONLY, PA_ONLY, REGIMES, RunRecord, aggregate_runs,
    indifference_compare, lateral_proportion_sweep, macro_auc, predict_rows, render_table,
    significance_test, supported_regimes, write_predictions, write_table_csv,
)
from .models import BackboneConfig, load_checkpoint, save_checkpoint
from .synth import SynthConfig, generate
from .training import (
    DISPLAY_NAMES, MODEL_PRESETS, TrainConfig, preset, random_search, train,
)

log = logging.getLogger(__name__)

OUT_ENV = "LATERALVIEW_OUT"


def default_out_root() -> Path:
    return Path(os.environ.get(OUT_ENV, "experiments"))


@dataclass
class ExperimentConfig:
    dataset: dict = field(default_factory=lambda: {"synth": {}})
    models: list = field(default_factory=lambda: ["densenet_pa", "auxloss_cl"])
    n_runs: int = 5
    seed: int = 0
    backbone: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    model_train: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.n_runs < 1:
            raise ValueError("n_runs must be >= 1")
        for m in self.models:
            if m not in MODEL_PRESETS:
                raise KeyError(f"unknown model {m!r}; choose from {sorted(MODEL_PRESETS)}")
        if not ("synth" in self.dataset) ^ ("manifest" in self.dataset):
            raise ValueError("dataset needs exactly one of 'synth' or 'manifest'")

    @classmethod
    def from_dict(cls, d) -> "ExperimentConfig":
        d = dict(d or {})
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown experiment config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path) as f:
            return cls.from_dict(yaml.safe_load(f))

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    def dump(self, path) -> None:
        _atomic_text(path, yaml.safe_dump(self.to_dict(), sort_keys=True))

    @property
    def hash(self) -> str:
        return config_hash(self.to_dict())

    # resolved pieces

    def backbone_config(self) -> BackboneConfig:
        kw = dict(self.backbone)
        if "synth" in self.dataset and "input_side" not in kw:
            kw["input_side"] = self.synth_config().image_side
        return BackboneConfig(**kw)

    def synth_config(self) -> SynthConfig:
        return SynthConfig(**self.dataset["synth"])

    def model_setup(self, name: str, n_labels: int):
        overrides = dict(self.train)
        overrides.update(self.model_train.get(name, {}))
        return preset(name, n_labels, self.backbone_config(), **overrides)


def config_hash(d) -> str:
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:10]


def _atomic_text(path, text: str) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _write_json(path, obj) -> None:
    _atomic_text(path, json.dumps(obj, indent=1))


# ---------------------------------------------------------------- dataset


def materialise_dataset(cfg: ExperimentConfig, target: Path) -> None:
    ds = cfg.dataset
    if "synth" in ds:
        sc = cfg.synth_config()
        generate(sc, target / "raw")
        prepare(target / "raw" / "manifest.csv", target / "raw" / "hierarchy.csv", target / "data",
                side=sc.image_side, min_patients=int(ds.get("min_patients", 50)))
        shutil.copy(target / "raw" / "synth_truth.json", target / "data" / "synth_truth.json")
    else:
        prepare(ds["manifest"], ds["hierarchy"], target / "data", side=int(ds.get("side", 224)),
                min_patients=int(ds.get("min_patients", 50)), extended=bool(ds.get("extended", False)))


def open_experiment(cfg: ExperimentConfig, out_root=None) -> Path:
    """Return the experiment directory for ``cfg``, creating it atomically if new."""
    out_root = Path(out_root) if out_root is not None else default_out_root()
    out_root.mkdir(parents=True, exist_ok=True)
    exp = out_root / f"exp-{cfg.hash}"
    if exp.exists():
        return exp
    tmp = Path(tempfile.mkdtemp(prefix=f".exp-{cfg.hash}-", dir=out_root))
    try:
        cfg.dump(tmp / "config.yaml")
        materialise_dataset(cfg, tmp)
        (tmp / "splits").mkdir()
        (tmp / "runs").mkdir()
        os.replace(tmp, exp)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return exp


def load_experiment(exp_dir) -> tuple[ExperimentConfig, PreparedData]:
    exp_dir = Path(exp_dir)
    if not (exp_dir / "config.yaml").exists():
        raise NoRuns(f"{exp_dir} is not an experiment directory")
    return ExperimentConfig.load(exp_dir / "config.yaml"), load_prepared(exp_dir / "data")


def load_truth(exp_dir) -> Optional[dict]:
    p = Path(exp_dir) / "data" / "synth_truth.json"
    return json.loads(p.read_text()) if p.exists() else None


def run_split(exp_dir, data: PreparedData, cfg: ExperimentConfig, run: int) -> SplitAssignment:
    """Split for run ``run``; identical for every model. PA-only patients always train."""
    path = Path(exp_dir) / "splits" / f"run{run}.json"
    if path.exists():
        return SplitAssignment.from_dict(json.loads(path.read_text()))
    paired = [Study(p, s, 0, "cache", "cache") for p, s, ok in
              zip(data.patient_ids, data.study_ids, data.present[:, 1]) if ok]
    split = make_split(DatasetManifest(tuple(paired), "main"), cfg.seed + run)
    if not data.present[:, 1].all():
        everyone = tuple(Study(p, s, 0, "cache") for p, s in zip(data.patient_ids, data.study_ids))
        split = extend_split(split, DatasetManifest(everyone, "extended"))
    _write_json(path, split.to_dict())
    return split


# ---------------------------------------------------------------- training


def run_dir(exp_dir, model: str, run: int) -> Path:
    return Path(exp_dir) / "runs" / model / f"run{run}"


def score_test_split(model, data, split, regimes=REGIMES) -> dict:
    rows = data.rows(split.members("test"))
    out = {}
    for regime in regimes:
        if regime in supported_regimes(model.spec):
            scores = predict_rows(model, data, rows, regime)
            out[regime] = macro_auc(scores, data.targets[rows], data.labels, regime).to_dict()
    return out


def train_one(exp_dir, name: str, run: int) -> RunRecord:
    exp_dir = Path(exp_dir)
    cfg, data = load_experiment(exp_dir)
    split = run_split(exp_dir, data, cfg, run)
    spec, tc = cfg.model_setup(name, len(data.labels))
    tc = replace(tc, seed=cfg.seed + run)
    res = train(spec, data, split, tc, model_name=name, run_id=f"{name}/run{run}")
    res.record.test = score_test_split(res.model, data, split)
    d = run_dir(exp_dir, name, run)
    d.mkdir(parents=True, exist_ok=True)
    save_checkpoint(d / "checkpoint.pt", res.model, data.vocab_hash, data.labels,
                    extra={"train_config": tc.to_dict()})
    res.record.save(d / "record.json")
    return res.record


def _worker(args):
    torch.set_num_threads(1)
    return train_one(*args)


def check_vocabulary(exp_dir, data: PreparedData) -> None:
    for ckpt in sorted(Path(exp_dir).glob("runs/*/run*/checkpoint.pt")):
        payload = torch.load(ckpt, map_location="cpu", weights_only=False)
        if payload["vocab_hash"] != data.vocab_hash:
            raise VocabularyMismatch(
                f"{ckpt} was trained with vocabulary {payload['vocab_hash']} but the experiment "
                f"data has {data.vocab_hash}; refusing to mix results"
            )


def cmd_train(cfg: ExperimentConfig, out_root=None, jobs: int = 1) -> tuple[Path, list]:
    exp = open_experiment(cfg, out_root)
    _, data = load_experiment(exp)
    check_vocabulary(exp, data)
    for run in range(cfg.n_runs):
        run_split(exp, data, cfg, run)
    todo = [(str(exp), m, r) for r in range(cfg.n_runs) for m in cfg.models
            if not (run_dir(exp, m, r) / "record.json").exists()]
    log.info("%s: %d runs to train, %d already complete", exp.name, len(todo),
             cfg.n_runs * len(cfg.models) - len(todo))
    if jobs > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            list(pool.map(_worker, todo))
    else:
        for args in todo:
            train_one(*args)
    return exp, load_records(exp)


def load_records(exp_dir, models: Optional[Sequence[str]] = None) -> list:
    recs = []
    for path in sorted(Path(exp_dir).glob("runs/*/run*/record.json"),
                       key=lambda p: (p.parent.parent.name, int(p.parent.name[3:]))):
        rec = RunRecord.load(path)
        if models is None or rec.model in models:
            recs.append(rec)
    return recs


def model_order(names) -> list:
    names = set(names)
    return [m for m in MODEL_PRESETS if m in names]


# ---------------------------------------------------------------- analysis


def cmd_evaluate(exp_dir, regimes=REGIMES) -> str:
    exp_dir = Path(exp_dir)
    cfg, data = load_experiment(exp_dir)
    ckpts = sorted(exp_dir.glob("runs/*/run*/checkpoint.pt"))
    if not ckpts:
        raise NoRuns(f"{exp_dir} has no trained runs")
    out = exp_dir / "eval"
    out.mkdir(exist_ok=True)
    records = []
    for ckpt in ckpts:
        name, run = ckpt.parent.parent.name, int(ckpt.parent.name[3:])
        model, _ = load_checkpoint(ckpt, data.vocab_hash)
        split = run_split(exp_dir, data, cfg, run)
        rows = data.rows(split.members("test"))
        rec = RunRecord.load(ckpt.parent / "record.json")
        rec.test = {}
        for regime in regimes:
            if regime not in supported_regimes(model.spec):
                continue
            scores = predict_rows(model, data, rows, regime)
            rec.test[regime] = macro_auc(scores, data.targets[rows], data.labels, regime).to_dict()
            write_predictions(out / f"{name}_run{run}_{regime}.csv",
                              [data.patient_ids[r] for r in rows], data.labels, scores,
                              data.targets[rows])
        records.append(rec)
    records.sort(key=lambda r: (r.model, int(r.run_id.rsplit("run", 1)[1])))
    agg = aggregate_runs(records, regimes)
    models = model_order(r.model for r in records)
    table = render_table(agg, models, DISPLAY_NAMES, regimes)
    _atomic_text(out / "table.txt", table)
    write_table_csv(out / "table.csv", agg, models, DISPLAY_NAMES, regimes)
    _write_json(out / "evaluation.json", {r.run_id: r.test for r in records})
    return table


def cmd_sweep(exp_dir) -> Path:
    exp_dir = Path(exp_dir)
    cfg, data = load_experiment(exp_dir)
    ckpts = sorted(exp_dir.glob("runs/*/run*/checkpoint.pt"),
                   key=lambda p: (p.parent.parent.name, int(p.parent.name[3:])))
    if not ckpts:
        raise NoRuns(f"{exp_dir} has no trained runs")
    curves = {}
    for ckpt in ckpts:
        name, run = ckpt.parent.parent.name, int(ckpt.parent.name[3:])
        model, _ = load_checkpoint(ckpt, data.vocab_hash)
        if len(model.spec.views) < 2:
            continue
        split = run_split(exp_dir, data, cfg, run)
        pts = lateral_proportion_sweep(model, data, split)
        curves.setdefault(name, []).append([p.macro for p in pts])
    out = exp_dir / "sweep"
    out.mkdir(exist_ok=True)
    rows, plotted = [], {}
    for name in model_order(curves):
        arr = np.asarray(curves[name])
        means = [float(np.mean(arr[:, k])) for k in range(arr.shape[1])]
        stds = [float(arr[:, k].std(ddof=1)) if arr.shape[0] > 1 else 0.0 for k in range(arr.shape[1])]
        for k in range(arr.shape[1]):
            rows.append([name, k, 1 - k / 100, repr(means[k]), repr(stds[k]), arr.shape[0]])
        plotted[DISPLAY_NAMES[name]] = [(1 - k / 100, means[k]) for k in range(arr.shape[1])]
    with open(out / "sweep_table.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["model", "percent_removed", "proportion_paired", "macro_auc", "std", "n_runs"])
        w.writerows(rows)
    plots.plot_sweep(plotted, out / "sweep.svg", out / "sweep.csv")
    return out


def per_label_runs(records: Sequence[RunRecord], regime: str) -> dict:
    out = {}
    for rec in records:
        res = rec.test.get(regime)
        if res is None:
            continue
        for label, v in res["per_label"].items():
            if v is not None:
                out.setdefault(label, []).append(v)
    return out


def native_regime(name: str) -> str:
    topo = MODEL_PRESETS[name][0]
    return {"SINGLE_PA": PA_ONLY, "SINGLE_L": L_ONLY}.get(topo, BOTH)


def cmd_compare(exp_dir, model_a: str, model_b: str, regime_a=None, regime_b=None) -> Path:
    exp_dir = Path(exp_dir)
    _, data = load_experiment(exp_dir)
    for m in (model_a, model_b):
        if m not in MODEL_PRESETS:
            raise KeyError(f"unknown model {m!r}")
    recs_a, recs_b = load_records(exp_dir, [model_a]), load_records(exp_dir, [model_b])
    if not recs_a or not recs_b:
        missing = model_a if not recs_a else model_b
        raise NoRuns(f"no runs for model {missing!r} in {exp_dir}")
    ra = per_label_runs(recs_a, regime_a or native_regime(model_a))
    rb = per_label_runs(recs_b, regime_b or native_regime(model_b))
    labels = [l for l in data.labels if len(ra.get(l, [])) >= 2 and len(rb.get(l, [])) >= 2]
    if not labels:
        raise ValueError("comparison needs at least 2 evaluable runs per model")
    verdicts = indifference_compare({l: ra[l] for l in labels}, {l: rb[l] for l in labels})
    counts = dict(zip(data.labels, data.targets.sum(axis=0).astype(int).tolist()))
    out = exp_dir / "compare"
    out.mkdir(exist_ok=True)
    stem = f"{model_a}_vs_{model_b}"
    bars = []
    with open(out / f"{stem}.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["label", "n_samples", "mean_a", "std_a", "mean_b", "std_b", "verdict"])
        for l in labels:
            a, b = np.asarray(ra[l]), np.asarray(rb[l])
            w.writerow([l, counts[l], f"{a.mean():.6f}", f"{a.std(ddof=1):.6f}",
                        f"{b.mean():.6f}", f"{b.std(ddof=1):.6f}", verdicts[l]])
            if verdicts[l] == "A_BETTER":
                bars.append((l, counts[l], float(b.mean()), float(a.mean())))
    bars.sort(key=lambda t: t[3] - t[2], reverse=True)
    plots.plot_label_bars(bars, DISPLAY_NAMES[model_a], DISPLAY_NAMES[model_b],
                          out / f"{stem}_bars.svg", out / f"{stem}_bars.csv")
    summary = {v: sum(1 for x in verdicts.values() if x == v)
               for v in ("A_BETTER", "B_BETTER", INDIFFERENT)}
    _write_json(out / f"{stem}_summary.json", summary)
    return out


def cmd_search(cfg: ExperimentConfig, model: str, space: dict, n_trials: int = 40,
               out_root=None) -> Path:
    exp = open_experiment(cfg, out_root)
    _, data = load_experiment(exp)
    split = run_split(exp, data, cfg, 0)
    spec, base = cfg.model_setup(model, len(data.labels))
    base = replace(base, seed=cfg.seed)
    trials = random_search(spec, data, split, base, space, n_trials, seed=cfg.seed, model_name=model)
    out = exp / "search" / model
    out.mkdir(parents=True, exist_ok=True)
    keys = sorted(space)
    with open(out / "trials.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["trial", "status", "val_auc"] + keys)
        for t in trials:
            w.writerow([t.index, t.status, repr(t.val_auc)] + [t.params.get(k) for k in keys])
    best = next((t for t in trials if not math.isnan(t.val_auc)), None)
    if best is not None:
        _atomic_text(out / "best_config.yaml", yaml.safe_dump(best.config.to_dict(), sort_keys=True))
    dists = {}
    for d in sorted((exp / "search").iterdir()):
        if (d / "trials.csv").exists():
            with open(d / "trials.csv") as f:
                vals = [float(r["val_auc"]) for r in csv.DictReader(f)]
            dists[DISPLAY_NAMES.get(d.name, d.name)] = [v for v in vals if not math.isnan(v)]
    plots.plot_search(dists, exp / "search" / "search.svg", exp / "search" / "search.csv")
    return out


def cmd_report(exp_dir) -> str:
    exp_dir = Path(exp_dir)
    records = load_records(exp_dir)
    if not records:
        raise NoRuns(f"{exp_dir} has no trained runs")
    agg = aggregate_runs(records)
    models = model_order(r.model for r in records)
    lines = [render_table(agg, models, DISPLAY_NAMES), "", "Paired t-tests on macro AUC"]
    rows = []
    for regime in REGIMES:
        for i, a in enumerate(models):
            for b in models[i + 1:]:
                xa = _macros_by_run(records, a, regime)
                xb = _macros_by_run(records, b, regime)
                common = sorted(set(xa) & set(xb))
                if len(common) < 2:
                    continue
                try:
                    t = significance_test([xa[r] for r in common], [xb[r] for r in common])
                    rows.append([regime, a, b, len(common), f"{t.t:.4f}", f"{t.p:.4g}"])
                except ZeroVariance:
                    rows.append([regime, a, b, len(common), "zero variance", ""])
    for r in rows:
        lines.append(f"  {r[0]:8s} {DISPLAY_NAMES[r[1]]:>11s} vs {DISPLAY_NAMES[r[2]]:<11s} "
                     f"n={r[3]}  t={r[4]}  p={r[5]}")
    text = "\n".join(lines) + "\n"
    _atomic_text(exp_dir / "report.txt", text)
    with open(exp_dir / "significance.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["regime", "model_a", "model_b", "n_runs", "t", "p"])
        w.writerows(rows)
    return text


def _macros_by_run(records, model, regime) -> dict:
    out = {}
    for rec in records:
        m = rec.macro(regime)
        if rec.model == model and m is not None and not math.isnan(m):
            out[int(rec.run_id.rsplit("run", 1)[1])] = m
    return out
