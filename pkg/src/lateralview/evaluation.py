"""AUC, test regimes, the lateral-proportion sweep and cross-run statistics."""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import asdict, dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np
import torch
from scipy import stats
from scipy.stats import rankdata

from .errors import DegenerateLabel, RegimeUnsupported, VocabularyMismatch, ZeroVariance
from .models import ViewBatch, predict

BOTH, PA_ONLY, L_ONLY = "BOTH", "PA_ONLY", "L_ONLY"
REGIMES = (BOTH, PA_ONLY, L_ONLY)
REGIME_COLUMNS = {BOTH: "Both", PA_ONLY: "PA", L_ONLY: "L"}
A_BETTER, B_BETTER, INDIFFERENT = "A_BETTER", "B_BETTER", "INDIFFERENT"
SCHEMA_VERSION = 1
# spreads below this are float rounding of equal AUC values, far finer than any AUC resolution
ZERO_SPREAD = 1e-12


def auc(scores, labels) -> float:
    """Mann-Whitney AUC with half credit for ties, via average ranks."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DegenerateLabel("AUC needs at least one positive and one negative")
    ranks = rankdata(scores)
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass
class RegimeResult:
    regime: str
    per_label: dict
    macro: float
    excluded: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def macro_auc(scores: np.ndarray, targets: np.ndarray, labels: Sequence[str], regime: str = "",
              subset: Optional[Sequence[str]] = None) -> RegimeResult:
    per_label, excluded = {}, []
    for i, name in enumerate(labels):
        if subset is not None and name not in subset:
            continue
        try:
            per_label[name] = auc(scores[:, i], targets[:, i])
        except DegenerateLabel:
            per_label[name] = None
            excluded.append(name)
    vals = [v for v in per_label.values() if v is not None]
    macro = float(np.mean(vals)) if vals else math.nan
    return RegimeResult(regime, per_label, macro, excluded)


def subset_macro(result: RegimeResult, labels: Sequence[str]) -> float:
    vals = [result.per_label[l] for l in labels if result.per_label.get(l) is not None]
    return float(np.mean(vals)) if vals else math.nan


# ---------------------------------------------------------------- regimes


def supported_regimes(spec) -> tuple:
    if spec.views == ("PA",):
        return (PA_ONLY,)
    if spec.views == ("L",):
        return (L_ONLY,)
    return REGIMES


def check_regime(spec, regime: str) -> None:
    if regime not in REGIMES:
        raise ValueError(f"unknown regime {regime!r}")
    if regime not in supported_regimes(spec):
        raise RegimeUnsupported(f"{spec.topology} cannot be evaluated in the {regime} regime")


def regime_mask(present: np.ndarray, regime: str) -> np.ndarray:
    out = np.asarray(present, dtype=bool).copy()
    if regime == PA_ONLY:
        out[:, 1] = False
    elif regime == L_ONLY:
        out[:, 0] = False
    return out


@torch.no_grad()
def predict_rows(model, data, rows: np.ndarray, regime: str = BOTH, batch_size: int = 64,
                 present: Optional[np.ndarray] = None) -> np.ndarray:
    """Probabilities for ``rows`` under ``regime``.

    Rows are grouped by view availability and processed in fixed-size chunks
    in row order, so a given (rows, regime) always yields identical outputs.
    """
    spec = model.spec
    check_regime(spec, regime)
    model.eval()
    dtype = next(model.parameters()).dtype
    avail = regime_mask(data.present[rows] if present is None else present, regime)
    if "PA" not in spec.views:
        avail[:, 0] = False
    if "L" not in spec.views:
        avail[:, 1] = False
    out = np.zeros((len(rows), len(data.labels)), dtype=np.float64)
    patterns = {tuple(p) for p in avail}
    for pattern in sorted(patterns, reverse=True):
        if not any(pattern):
            continue
        idx = np.flatnonzero((avail == pattern).all(axis=1))
        for start in range(0, len(idx), batch_size):
            chunk = idx[start:start + batch_size]
            r = rows[chunk]
            pa = torch.from_numpy(data.images[r, 0:1]).to(dtype) if pattern[0] else None
            l = torch.from_numpy(data.images[r, 1:2]).to(dtype) if pattern[1] else None
            batch = ViewBatch.from_views(pa, l)
            out[chunk] = predict(model(batch)).double().numpy()
    missing = ~avail.any(axis=1)
    if missing.any():
        out[missing] = np.nan
    return out


def evaluate_rows(model, data, rows, regime: str = BOTH, batch_size: int = 64) -> RegimeResult:
    scores = predict_rows(model, data, rows, regime, batch_size)
    return macro_auc(scores, data.targets[rows], data.labels, regime)


def evaluate_regime(model, data, split, regime: str, batch_size: int = 64,
                    vocab_hash: Optional[str] = None) -> RegimeResult:
    if vocab_hash is not None and data.vocab_hash and vocab_hash != data.vocab_hash:
        raise VocabularyMismatch(f"checkpoint vocabulary {vocab_hash} != data {data.vocab_hash}")
    rows = data.rows(split.members("test"))
    return evaluate_rows(model, data, rows, regime, batch_size)


def removal_order(patient_ids: Sequence[str], seed: int) -> list:
    ids = sorted(patient_ids)
    perm = np.random.default_rng(seed).permutation(len(ids))
    return [ids[i] for i in perm]


def n_removed(k: int, n: int) -> int:
    return int(math.floor(k * n / 100 + 0.5))


@dataclass
class SweepPoint:
    percent_removed: int
    proportion_paired: float
    macro: float
    n_stripped: int


def lateral_proportion_sweep(model, data, split, seed: Optional[int] = None,
                             batch_size: int = 64, step: int = 1) -> list:
    """Macro AUC as the lateral view is stripped from a growing, nested set of test patients."""
    test_ids = split.members("test")
    rows = data.rows(test_ids)
    p_both = predict_rows(model, data, rows, BOTH, batch_size)
    p_pa = predict_rows(model, data, rows, PA_ONLY, batch_size)
    order = removal_order(test_ids, split.seed if seed is None else seed)
    position = {pid: i for i, pid in enumerate(order)}
    rank = np.array([position[data.patient_ids[r]] for r in rows])
    targets = data.targets[rows]
    n = len(rows)
    points = []
    for k in range(0, 101, step):
        m = n_removed(k, n)
        stripped = rank < m
        scores = np.where(stripped[:, None], p_pa, p_both)
        res = macro_auc(scores, targets, data.labels)
        points.append(SweepPoint(k, 1.0 - k / 100.0, res.macro, m))
    return points


# ---------------------------------------------------------------- comparisons


def indifference_compare(runs_a: Mapping[str, Sequence[float]],
                         runs_b: Mapping[str, Sequence[float]]) -> dict:
    """Per-label verdict: a gap below the better model's run-to-run std is a tie."""
    verdicts = {}
    for label in runs_a:
        a = np.asarray(runs_a[label], dtype=np.float64)
        b = np.asarray(runs_b[label], dtype=np.float64)
        if a.size < 2 or b.size < 2:
            raise ValueError(f"label {label!r}: need at least 2 runs per model")
        ma, mb = a.mean(), b.mean()
        if ma == mb:
            verdicts[label] = INDIFFERENT
            continue
        better_std = a.std(ddof=1) if ma > mb else b.std(ddof=1)
        if abs(ma - mb) < better_std:
            verdicts[label] = INDIFFERENT
        else:
            verdicts[label] = A_BETTER if ma > mb else B_BETTER
    return verdicts


@dataclass
class TTest:
    t: float
    p: float
    df: float
    paired: bool


def significance_test(aucs_a, aucs_b, paired: bool = True) -> TTest:
    """Two-sided t-test on per-run macro AUCs: paired by default, Welch otherwise."""
    a = np.asarray(aucs_a, dtype=np.float64)
    b = np.asarray(aucs_b, dtype=np.float64)
    if a.size < 2 or b.size < 2:
        raise ValueError("need at least 2 runs per model")
    if paired:
        if a.size != b.size:
            raise ValueError("paired test needs equal run counts")
        d = a - b
        n = d.size
        if np.ptp(d) <= ZERO_SPREAD:
            raise ZeroVariance("all paired differences are identical")
        sd = d.std(ddof=1)
        t = d.mean() / (sd / math.sqrt(n))
        df = n - 1
    else:
        if np.ptp(a) <= ZERO_SPREAD and np.ptp(b) <= ZERO_SPREAD:
            raise ZeroVariance("both samples have zero variance")
        va, vb = a.var(ddof=1) / a.size, b.var(ddof=1) / b.size
        t = (a.mean() - b.mean()) / math.sqrt(va + vb)
        df = (va + vb) ** 2 / (va ** 2 / (a.size - 1) + vb ** 2 / (b.size - 1))
    p = 2 * stats.t.sf(abs(t), df)
    return TTest(float(t), float(p), float(df), paired)


# ---------------------------------------------------------------- run records


@dataclass
class RunRecord:
    run_id: str
    model: str
    seed: int
    split_id: str
    split_seed: int = 0
    spec_hash: str = ""
    config_hash: str = ""
    val_curve: list = field(default_factory=list)
    train_loss: list = field(default_factory=list)
    best_epoch: int = -1
    best_val_auc: float = math.nan
    untrainable: list = field(default_factory=list)
    test: dict = field(default_factory=dict)  # regime -> RegimeResult dict
    schema_version: int = SCHEMA_VERSION

    def macro(self, regime: str) -> Optional[float]:
        r = self.test.get(regime)
        return None if r is None else r["macro"]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "RunRecord":
        d = dict(d)
        if d.get("schema_version", SCHEMA_VERSION) != SCHEMA_VERSION:
            raise ValueError(f"unsupported RunRecord schema {d.get('schema_version')}")
        return cls(**d)

    def save(self, path) -> None:
        tmp = f"{path}.tmp"
        with open(tmp, "w") as f:
            json.dump(_json_safe(self.to_dict()), f, indent=1)
        os.replace(tmp, path)

    @classmethod
    def load(cls, path) -> "RunRecord":
        with open(path) as f:
            return cls.from_dict(_json_restore(json.load(f)))


def _json_safe(obj):
    if isinstance(obj, float) and math.isnan(obj):
        return "NaN"
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_json_safe(v) for v in obj]
    return obj


def _json_restore(obj):
    if obj == "NaN":
        return math.nan
    if isinstance(obj, dict):
        return {k: _json_restore(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_json_restore(v) for v in obj]
    return obj


@dataclass
class Aggregate:
    mean: float
    std: float
    n: int

    @property
    def single_run(self) -> bool:
        return self.n == 1

    def __str__(self):
        return f"{self.mean:.3f} ± {self.std:.3f}"


def aggregate_runs(records: Sequence[RunRecord], regimes=REGIMES) -> dict:
    """Mean and sample std of macro AUC per (model, regime)."""
    values = {}
    for rec in records:
        for regime in regimes:
            m = rec.macro(regime)
            if m is not None and not math.isnan(m):
                values.setdefault((rec.model, regime), []).append(m)
    out = {}
    for key, vals in values.items():
        arr = np.asarray(vals)
        std = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
        out[key] = Aggregate(float(arr.mean()), std, int(arr.size))
    return out


def render_table(agg: Mapping, models: Sequence[str], names: Optional[Mapping] = None,
                 regimes=REGIMES) -> str:
    names = names or {}
    rows = [["Model"] + [REGIME_COLUMNS[r] for r in regimes]]
    single = False
    for m in models:
        row = [names.get(m, m)]
        for r in regimes:
            a = agg.get((m, r))
            if a is None:
                row.append("---")
            else:
                row.append(str(a) + ("*" if a.single_run else ""))
                single |= a.single_run
        rows.append(row)
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    lines = []
    for j, r in enumerate(rows):
        cells = [r[0].ljust(widths[0])] + [c.center(widths[i]) for i, c in enumerate(r) if i > 0]
        lines.append("  ".join(cells).rstrip())
        if j == 0:
            lines.append("-" * len(lines[0]))
    if single:
        lines.append("* single run, std not estimable (reported as 0)")
    return "\n".join(lines) + "\n"


def write_table_csv(path, agg: Mapping, models: Sequence[str], names=None, regimes=REGIMES) -> None:
    names = names or {}
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["model", "regime", "mean", "std", "n_runs"])
        for m in models:
            for r in regimes:
                a = agg.get((m, r))
                if a is not None:
                    w.writerow([names.get(m, m), REGIME_COLUMNS[r], f"{a.mean:.6f}", f"{a.std:.6f}", a.n])


def write_predictions(path, patient_ids, labels, scores, targets) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["patient_id", "label", "score", "target"])
        for i, pid in enumerate(patient_ids):
            for j, label in enumerate(labels):
                w.writerow([pid, label, repr(float(scores[i, j])), int(targets[i, j])])
