"""Acceptance suite: one test per criterion, ``pytest -v tests/test_acceptance.py``.

Criterion 9 trains two desk-scale models on 2,000 synthetic patients and takes
a few minutes on one CPU core; deselect it with ``-m "not slow"``.
"""

import json
import math
import re
import time
from dataclasses import replace

import numpy as np
import pytest
import torch

from conftest import SNAPSHOTS, TINY, mask_numbers, random_prepared
from oracles import finite_difference_check, hand_t, pairwise_auc
from lateralview import experiment as ex
from lateralview.data import make_split, manifest_from_prepared
from lateralview.errors import ZeroVariance
from lateralview.evaluation import (
    BOTH, L_ONLY, PA_ONLY, auc, evaluate_regime, lateral_proportion_sweep, significance_test,
)
from lateralview.models import (
    AUXLOSS, DUALNET, HEMIS, STACKED, TOPOLOGIES, SINGLE_L, SINGLE_PA, ModelSpec, ViewBatch,
    build_model, gap, hemis_fuse, load_checkpoint, predict,
)
from lateralview.synth import BOTH as VIS_BOTH, L_ONLY as VIS_L, labels_by_visibility
from lateralview.training import (
    AUXLOSS_BRANCH, DROP_L, DROP_PA, HEMIS_DROP, JOINT, KEEP_BOTH, CurriculumConfig, TrainConfig,
    apply_branch_update, auxloss_total, class_weight, class_weights, curriculum_sample,
    make_optimizers, weighted_bce,
)
from lateralview.training import L_ONLY as STEP_L, PA_ONLY as STEP_PA


def state(module):
    return {k: v.detach().clone() for k, v in module.state_dict().items()}


def identical(a, b):
    return a.keys() == b.keys() and all(torch.equal(a[k], b[k]) for k in a)


def images(n=4, side=16, seed=0, dtype=torch.float32):
    g = torch.Generator().manual_seed(seed)
    return (torch.randn(n, 1, side, side, generator=g, dtype=dtype),
            torch.randn(n, 1, side, side, generator=g, dtype=dtype))


def test_c01_auc_matches_pairwise_oracle():
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(500):
        n = int(rng.integers(2, 201))
        y = rng.integers(0, 2, n)
        if y.min() == y.max():
            y[rng.integers(n)] ^= 1
        s = rng.integers(0, max(2, n // 5), n).astype(float)
        worst = max(worst, abs(auc(s, y) - pairwise_auc(s, y)))
    assert worst < 1e-9
    assert time.perf_counter() - start < 10


def test_c02_branch_isolation():
    start = time.perf_counter()
    torch.manual_seed(0)
    m = build_model(ModelSpec(AUXLOSS, TINY, n_labels=3)).train()
    opts = make_optimizers(m, TrainConfig(lr_pa=1e-2, lr_l=1e-2, lr_common=1e-2))
    pa, l = images()
    y = torch.tensor([[1.0, 0, 1], [0, 1, 0], [1, 1, 0], [0, 0, 1]])
    batch = ViewBatch.from_views(pa, l)
    # warm the optimiser state so isolation is tested with live Adam moments
    apply_branch_update(m, opts, batch, y, JOINT, [1.0, 2.0, 5.0])
    frozen = (m.branch_l, m.fc_l, m.fc_joint)
    before = [state(x) for x in frozen]
    pa_before = state(m.branch_pa)
    apply_branch_update(m, opts, batch, y, STEP_PA, [1.0, 2.0, 5.0])
    assert all(identical(b, state(x)) for b, x in zip(before, frozen))
    assert not identical(pa_before, state(m.branch_pa))
    assert time.perf_counter() - start < 5


def test_c03_hemis_fusion():
    g = torch.Generator().manual_seed(0)
    a, b = torch.randn(3, 4, 5, 5, generator=g), torch.randn(3, 4, 5, 5, generator=g)
    assert torch.equal(hemis_fuse(a, b), hemis_fuse(b, a))
    for single in (hemis_fuse(a, None), hemis_fuse(None, a)):
        assert torch.count_nonzero(single[:, 4:]) == 0 and torch.equal(single[:, :4], a)
    fused = hemis_fuse(torch.ones(1, 1, 1, 1), torch.full((1, 1, 1, 1), 3.0))
    assert fused[0, 0, 0, 0].item() == 2.0 and fused[0, 1, 0, 0].item() == 1.0


def test_c04_gradient_check():
    start = time.perf_counter()
    smooth = replace(TINY, activation="silu")
    errors = {}
    for topology in TOPOLOGIES:
        torch.manual_seed(0)
        m = build_model(ModelSpec(topology, smooth, n_labels=3)).double().eval()
        pa, l = images(dtype=torch.float64)
        batch = ViewBatch.from_views(None if topology == SINGLE_L else pa,
                                     None if topology == SINGLE_PA else l)
        y = (torch.rand(4, 3, generator=torch.Generator().manual_seed(1)) > 0.5).double()
        w = torch.tensor([1.0, 2.0, 5.0], dtype=torch.float64)
        if topology == AUXLOSS:
            loss = lambda: auxloss_total(m(batch), y, w)
        else:
            loss = lambda: weighted_bce(m(batch).joint_logits, y, w)
        errors[topology], _, _ = finite_difference_check(loss, list(m.parameters()), 10, 1e-3, seed=0)
    print("relative errors:", {k: f"{v:.2e}" for k, v in errors.items()})
    assert all(e < 1e-4 for e in errors.values()), errors
    assert time.perf_counter() - start < 120


def test_c05_curriculum_frequencies():
    start = time.perf_counter()
    rng = np.random.default_rng(0)
    aux = curriculum_sample(CurriculumConfig(AUXLOSS_BRANCH), rng, 100_000)
    hem = curriculum_sample(CurriculumConfig(HEMIS_DROP), rng, 100_000)
    for draws, names, expected in ((aux, (STEP_PA, STEP_L, JOINT), (0.2, 0.2, 0.6)),
                                   (hem, (DROP_PA, DROP_L, KEEP_BOTH), (0.25, 0.25, 0.5))):
        for name, p in zip(names, expected):
            assert abs(np.mean(draws == name) - p) <= 0.01
    assert time.perf_counter() - start < 5


def test_c06_class_weights():
    assert class_weight(1, 999) == 5.0
    assert class_weight(100, 100) == 1.0
    rng = np.random.default_rng(0)
    y = (rng.random((5000, 40)) < rng.uniform(0.001, 0.999, 40)).astype(np.float32)
    w, mask = class_weights(y)
    assert mask.all() and np.all((w > 0) & (w <= 5.0))


def test_c07_missing_view_contracts():
    pa, _ = images()
    with torch.no_grad():
        for topology in (STACKED, DUALNET):
            torch.manual_seed(0)
            m = build_model(ModelSpec(topology, TINY, n_labels=3)).eval()
            assert torch.equal(m(ViewBatch.from_views(pa, None)).joint_logits,
                               m(ViewBatch.from_views(pa, torch.zeros_like(pa))).joint_logits)
        torch.manual_seed(0)
        m = build_model(ModelSpec(AUXLOSS, TINY, n_labels=3)).eval()
        assert torch.equal(predict(m(ViewBatch.from_views(pa, None))),
                           torch.sigmoid(m.fc_pa(gap(m.branch_pa(pa)))))


def test_c08_sweep_endpoints(trained):
    exp, _ = trained
    cfg, data = ex.load_experiment(exp)
    checked = 0
    for ckpt in sorted(exp.glob("runs/*/run*/checkpoint.pt")):
        model, _ = load_checkpoint(ckpt, data.vocab_hash)
        if len(model.spec.views) < 2:
            continue
        split = ex.run_split(exp, data, cfg, int(ckpt.parent.name[3:]))
        pts = lateral_proportion_sweep(model, data, split)
        assert pts[0].macro == evaluate_regime(model, data, split, BOTH).macro
        assert pts[-1].macro == evaluate_regime(model, data, split, PA_ONLY).macro
        checked += 1
    # untrained HeMIS on random data covers the mean/variance fusion path
    rnd = random_prepared(60)
    split = make_split(manifest_from_prepared(rnd), 1)
    torch.manual_seed(0)
    m = build_model(ModelSpec(HEMIS, TINY, n_labels=3)).eval()
    pts = lateral_proportion_sweep(m, rnd, split)
    assert pts[0].macro == evaluate_regime(m, rnd, split, BOTH).macro
    assert pts[-1].macro == evaluate_regime(m, rnd, split, PA_ONLY).macro
    assert checked == 4


DESK = dict(
    dataset={"synth": {"n_patients": 2000, "n_labels": 9, "image_side": 64, "seed": 0}},
    models=["densenet_pa", "auxloss_cl"], n_runs=1, seed=0, train={"epochs": 10},
)


@pytest.mark.slow
def test_c09_lateral_information_recovered(tmp_path):
    exp, records = ex.cmd_train(ex.ExperimentConfig.from_dict(DESK), tmp_path)
    truth = ex.load_truth(exp)
    l_only = labels_by_visibility(truth, [VIS_L])
    l_visible = labels_by_visibility(truth, [VIS_L, VIS_BOTH])
    rec = {r.model: r for r in records}

    def mean_over(model, regime, labels):
        per = rec[model].test[regime]["per_label"]
        vals = [per[l] for l in labels if per.get(l) is not None]
        assert len(vals) == len(labels)
        return float(np.mean(vals))

    single_pa = mean_over("densenet_pa", PA_ONLY, l_only)
    aux_both = mean_over("auxloss_cl", BOTH, l_only)
    retention = mean_over("auxloss_cl", L_ONLY, l_visible) / mean_over("auxloss_cl", BOTH, l_visible)
    print(f"L-only labels: AuxLoss-CL {aux_both:.3f} vs DenseNet-PA {single_pa:.3f}; "
          f"L_ONLY retention {retention:.1%}")
    assert aux_both - single_pa >= 0.05
    assert single_pa <= 0.60
    assert retention >= 0.90


DETERMINISM = dict(
    dataset={"synth": {"n_patients": 200, "image_side": 64, "seed": 5}, "min_patients": 5},
    models=["densenet_pa", "dualnet", "hemis_cl", "auxloss_cl"], n_runs=2, seed=11,
    train={"epochs": 2},
)


def test_c10_determinism(tmp_path):
    cfg = ex.ExperimentConfig.from_dict(DETERMINISM)
    exp_a, recs_a = ex.cmd_train(cfg, tmp_path / "a")
    exp_b, recs_b = ex.cmd_train(cfg, tmp_path / "b")
    for run in range(cfg.n_runs):
        split = f"splits/run{run}.json"
        assert json.loads((exp_a / split).read_text()) == json.loads((exp_b / split).read_text())
    assert [r.run_id for r in recs_a] == [r.run_id for r in recs_b]
    for a, b in zip(recs_a, recs_b):
        assert a.split_id == b.split_id
        assert a.test.keys() == b.test.keys()
        for regime in a.test:
            assert abs(a.macro(regime) - b.macro(regime)) <= 1e-5


def test_c11_report_shape(trained):
    exp, _ = trained
    table = ex.cmd_evaluate(exp)
    lines = table.splitlines()
    assert lines[0].split() == ["Model", "Both", "PA", "L"]
    cell = r"(\d\.\d{3} ± \d\.\d{3}\*?|---)"
    for line in lines[2:]:
        assert re.fullmatch(r"\S+\s+" + r"\s+".join([cell] * 3), line.strip()), line
    assert lines[2].split()[1] == "---" and lines[2].split()[-1] == "---"
    assert mask_numbers(table) == (SNAPSHOTS / "table_layout.txt").read_text(encoding="utf-8")


A5 = [0.812, 0.806, 0.809, 0.811, 0.807]
B5 = [0.801, 0.799, 0.803, 0.798, 0.802]


def test_c12_statistics():
    res = significance_test(A5, B5)
    assert abs(res.t - hand_t([a - b for a, b in zip(A5, B5)])) < 1e-9
    assert 0.0 <= res.p <= 1.0 and not math.isnan(res.p)
    with pytest.raises(ZeroVariance):
        significance_test([0.8] * 5, [0.8] * 5)
    with pytest.raises(ZeroVariance):
        significance_test([0.81, 0.82, 0.83, 0.84, 0.85], [0.80, 0.81, 0.82, 0.83, 0.84])
