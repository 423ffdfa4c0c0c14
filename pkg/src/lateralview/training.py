"""Loss, class weights, curriculum view/loss sampling, per-branch Adam and random search."""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Mapping, Optional

import numpy as np
import torch
import torch.nn.functional as F

from .data import PreparedData, SplitAssignment
from .errors import MissingHead, NonFiniteLoss
from .evaluation import RunRecord, evaluate_rows
from .models import (
    AUXLOSS, DUALNET, HEMIS, SINGLE_L, SINGLE_PA, STACKED,
    BackboneConfig, ModelOutput, ModelSpec, ViewBatch, build_model,
)

log = logging.getLogger(__name__)

NONE, HEMIS_DROP, AUXLOSS_BRANCH = "NONE", "HEMIS_DROP", "AUXLOSS_BRANCH"
DROP_PA, DROP_L, KEEP_BOTH = "DROP_PA", "DROP_L", "KEEP_BOTH"
PA_ONLY, L_ONLY, JOINT = "PA_ONLY", "L_ONLY", "JOINT"
GROUPS = ("pa", "l", "common")


@dataclass(frozen=True)
class CurriculumConfig:
    mode: str = NONE
    hemis_drop_each: float = 0.25
    auxloss_branch_each: float = 0.2

    def __post_init__(self):
        if self.mode not in (NONE, HEMIS_DROP, AUXLOSS_BRANCH):
            raise ValueError(f"unknown curriculum mode {self.mode!r}")
        for p in (self.hemis_drop_each, self.auxloss_branch_each):
            if not 0.0 <= p <= 0.5:
                raise ValueError("per-view curriculum probability must lie in [0, 0.5]")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 40
    batch_size: int = 8
    lr_pa: float = 1e-4
    lr_l: float = 1e-4
    lr_common: float = 1e-4
    lr_decay_factor: float = 10.0
    dropout_p: float = 0.0
    class_weight_clamp: float = 5.0
    loss_weights: tuple = (1.0, 0.3, 0.3)  # joint, pa, l
    curriculum: CurriculumConfig = field(default_factory=CurriculumConfig)
    seed: int = 0
    augment: bool = False
    eval_batch_size: int = 64

    def __post_init__(self):
        if isinstance(self.curriculum, Mapping):
            object.__setattr__(self, "curriculum", CurriculumConfig(**self.curriculum))
        object.__setattr__(self, "loss_weights", tuple(float(w) for w in self.loss_weights))
        if min(self.lr_pa, self.lr_l, self.lr_common) <= 0:
            raise ValueError("learning rates must be positive")
        if min(self.loss_weights) < 0 or len(self.loss_weights) != 3:
            raise ValueError("loss_weights must be three non-negative numbers")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")

    @property
    def decay_at(self) -> int:
        return self.epochs // 2

    def to_dict(self) -> dict:
        d = asdict(self)
        d["loss_weights"] = list(self.loss_weights)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        return cls(**dict(d))

    @property
    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:12]


# Best hyperparameters reported for full-scale training, as
# (topology, learning rates (pa, l, common), dropout, curriculum).
MODEL_PRESETS = {
    "densenet_pa": (SINGLE_PA, (5.8e-4,) * 3, 0.0, NONE),
    "densenet_l": (SINGLE_L, (2.6e-4,) * 3, 0.2, NONE),
    "stacked": (STACKED, (1.9e-4,) * 3, 0.1, NONE),
    "dualnet": (DUALNET, (3.0e-4, 7.6e-4, 2.7e-4), 0.2, NONE),
    "hemis": (HEMIS, (3.8e-4, 2.0e-5, 2.8e-5), 0.1, NONE),
    "hemis_cl": (HEMIS, (1.7e-4, 5.6e-4, 7.2e-5), 0.1, HEMIS_DROP),
    "auxloss": (AUXLOSS, (2.1e-4, 1.9e-4, 6.6e-4), 0.2, NONE),
    "auxloss_cl": (AUXLOSS, (6.9e-5, 9.5e-5, 5.2e-5), 0.1, AUXLOSS_BRANCH),
}
DISPLAY_NAMES = {
    "densenet_pa": "DenseNet-PA", "densenet_l": "DenseNet-L", "stacked": "Stacked",
    "dualnet": "DualNet", "hemis": "HeMIS", "hemis_cl": "HeMIS-CL",
    "auxloss": "AuxLoss", "auxloss_cl": "AuxLoss-CL",
}


def preset(name: str, n_labels: int, backbone: Optional[BackboneConfig] = None,
           **overrides) -> tuple[ModelSpec, TrainConfig]:
    """ModelSpec and TrainConfig for a named model; ``overrides`` replace TrainConfig fields."""
    try:
        topology, (lr_pa, lr_l, lr_common), dropout, mode = MODEL_PRESETS[name]
    except KeyError:
        raise KeyError(f"unknown model {name!r}; choose from {sorted(MODEL_PRESETS)}") from None
    spec = ModelSpec(topology, backbone or BackboneConfig(), n_labels)
    if "joint_combine" in overrides:
        spec = replace(spec, joint_combine=overrides.pop("joint_combine"))
    cfg = dict(lr_pa=lr_pa, lr_l=lr_l, lr_common=lr_common, dropout_p=dropout,
               curriculum=CurriculumConfig(mode))
    curriculum = overrides.pop("curriculum", None)
    cfg.update(overrides)
    if curriculum is not None:
        base = asdict(cfg["curriculum"])
        base.update(curriculum if isinstance(curriculum, Mapping) else asdict(curriculum))
        cfg["curriculum"] = CurriculumConfig(**base)
    return spec, TrainConfig(**cfg)


# ---------------------------------------------------------------- loss


def class_weight(n_pos: int, n_neg: int, clamp: float = 5.0) -> float:
    if n_pos < 1:
        raise ValueError("labels without training positives are excluded from the loss")
    return min(n_neg / n_pos, clamp)


def class_weights(targets: np.ndarray, clamp: float = 5.0) -> tuple[np.ndarray, np.ndarray]:
    """Per-label positive weights and a trainable mask from training targets.

    Labels with no positives or no negatives are masked out; their weight is
    reported as 1.0 but never used.
    """
    n_pos = targets.sum(axis=0)
    n_neg = targets.shape[0] - n_pos
    mask = (n_pos > 0) & (n_neg > 0)
    w = np.ones(targets.shape[1], dtype=np.float64)
    for i in np.flatnonzero(mask):
        w[i] = class_weight(int(n_pos[i]), int(n_neg[i]), clamp)
    return w, mask


def weighted_bce(logits, targets, weights, mask=None):
    """Mean of -[w*y*log s(x) + (1-y)*log(1-s(x))] over samples and trainable labels."""
    weights = torch.as_tensor(weights, dtype=logits.dtype)
    targets = targets.to(logits.dtype)
    # log s(x) = -softplus(-x), log(1 - s(x)) = -softplus(x)
    per = weights * targets * F.softplus(-logits) + (1 - targets) * F.softplus(logits)
    if mask is not None:
        mask = torch.as_tensor(mask, dtype=torch.bool)
        per = per[:, mask]
    loss = per.mean()
    if not torch.isfinite(loss):
        raise NonFiniteLoss()
    return loss


def auxloss_total(output: ModelOutput, targets, weights, loss_weights=(1.0, 0.3, 0.3), mask=None):
    heads = (output.joint_logits, output.pa_logits, output.l_logits)
    if any(h is None for h in heads):
        raise MissingHead("AuxLoss total needs joint, PA and L logits")
    total = 0.0
    for w, h in zip(loss_weights, heads):
        total = total + w * weighted_bce(h, targets, weights, mask)
    return total


# ---------------------------------------------------------------- curriculum


def curriculum_sample(config: CurriculumConfig, rng: np.random.Generator, size=None):
    """Draw branch decisions; one string, or an array of ``size`` strings."""
    if config.mode == HEMIS_DROP:
        p, choices = config.hemis_drop_each, (DROP_PA, DROP_L, KEEP_BOTH)
    elif config.mode == AUXLOSS_BRANCH:
        p, choices = config.auxloss_branch_each, (PA_ONLY, L_ONLY, JOINT)
    else:
        return KEEP_BOTH if size is None else np.full(size, KEEP_BOTH)
    u = rng.random(size)
    out = np.where(u < p, choices[0], np.where(u < 2 * p, choices[1], choices[2]))
    return str(out) if size is None else out


# ---------------------------------------------------------------- optimisation


def lr_at(epoch: int, config: TrainConfig) -> dict:
    scale = 1.0 if epoch < config.decay_at else 1.0 / config.lr_decay_factor
    return {"pa": config.lr_pa * scale, "l": config.lr_l * scale, "common": config.lr_common * scale}


def make_optimizers(model, config: TrainConfig) -> dict:
    """One Adam per non-empty parameter group so moment buffers stay independent."""
    lrs = lr_at(0, config)
    opts = {}
    for name, params in model.param_groups().items():
        if params:
            opts[name] = torch.optim.Adam(params, lr=lrs[name], betas=(0.9, 0.999), eps=1e-8)
    return opts


def set_learning_rates(optimizers: dict, lrs: dict) -> None:
    for name, opt in optimizers.items():
        for g in opt.param_groups:
            g["lr"] = lrs[name]


def _step(optimizers: dict, groups, loss) -> None:
    for name in optimizers:
        optimizers[name].zero_grad(set_to_none=True)
    loss.backward()
    for name in groups:
        if name in optimizers:
            optimizers[name].step()


def _rows_with(batch: ViewBatch, col: int):
    return batch.present[:, col]


def aux_branch_loss(model, batch: ViewBatch, targets, weights, mask, view: str):
    col = 0 if view == "PA" else 1
    rows = _rows_with(batch, col)
    x = batch.view(view)
    if x is None or not bool(rows.any()):
        return None
    if not bool(rows.all()):
        x, targets = x[rows], targets[rows]
    return weighted_bce(model.forward_branch(x, view), targets, weights, mask)


def auxloss_joint_loss(model, batch: ViewBatch, targets, weights, mask, loss_weights):
    """Joint AuxLoss objective; PA-only rows (extended data) use the PA head alone."""
    paired = batch.present.all(dim=1)
    if bool(paired.all()):
        return auxloss_total(model(batch), targets, weights, loss_weights, mask)
    parts, n = [], len(batch)
    if bool(paired.any()):
        sub = ViewBatch(batch.pa[paired], batch.l[paired], batch.present[paired])
        parts.append(auxloss_total(model(sub), targets[paired], weights, loss_weights, mask)
                     * (int(paired.sum()) / n))
    pa_rows = batch.present[:, 0] & ~paired
    if bool(pa_rows.any()):
        logits = model.forward_branch(batch.pa[pa_rows], "PA")
        parts.append(weighted_bce(logits, targets[pa_rows], weights, mask) * (int(pa_rows.sum()) / n))
    return sum(parts)


def apply_branch_update(model, optimizers: dict, batch: ViewBatch, targets, decision: str,
                        weights, mask=None, loss_weights=(1.0, 0.3, 0.3)):
    """One AuxLoss step restricted to the branch chosen by the curriculum.

    ``PA_ONLY`` backpropagates the PA head loss and steps only the PA group
    (PA backbone + PA head); the lateral branch is not even evaluated, so its
    parameters and normalisation statistics stay bit-identical. ``L_ONLY``
    mirrors it; ``JOINT`` steps every group on the weighted sum of losses.
    Returns the loss value, or None when the chosen view is absent.
    """
    if decision == PA_ONLY:
        loss, groups = aux_branch_loss(model, batch, targets, weights, mask, "PA"), ("pa",)
    elif decision == L_ONLY:
        loss, groups = aux_branch_loss(model, batch, targets, weights, mask, "L"), ("l",)
    else:
        loss, groups = auxloss_joint_loss(model, batch, targets, weights, mask, loss_weights), GROUPS
    if loss is None:
        return None
    _step(optimizers, groups, loss)
    return float(loss.detach())


# ---------------------------------------------------------------- batches


def make_batch(data: PreparedData, rows: np.ndarray, spec: ModelSpec, present=None,
               dtype=torch.float32) -> ViewBatch:
    """ViewBatch for ``rows``; ``present`` overrides availability (curriculum drops)."""
    avail = data.present[rows] if present is None else present
    views = spec.views
    pa = torch.from_numpy(data.images[rows, 0:1]).to(dtype) if "PA" in views else None
    l = None
    if "L" in views and bool(avail[:, 1].any()):
        l = torch.from_numpy(data.images[rows, 1:2]).to(dtype)
    mask = torch.from_numpy(np.asarray(avail, dtype=bool).copy())
    if "PA" not in views:
        mask[:, 0] = False
    if "L" not in views:
        mask[:, 1] = False
    return ViewBatch(pa, l, mask)


def augment_views(batch: ViewBatch, gen: torch.Generator, max_shift=0.05, max_degrees=5.0):
    """Random horizontal jitter and small rotation, shared by both views of a sample."""
    n = len(batch)
    ref = batch.pa if batch.pa is not None else batch.l
    theta = (torch.rand(n, generator=gen) * 2 - 1) * math.radians(max_degrees)
    shift = (torch.rand(n, generator=gen) * 2 - 1) * 2 * max_shift
    cos, sin = torch.cos(theta), torch.sin(theta)
    mat = torch.stack([torch.stack([cos, -sin, shift], 1),
                       torch.stack([sin, cos, torch.zeros(n)], 1)], 1).to(ref.dtype)
    grid = F.affine_grid(mat, list(ref.shape), align_corners=False)

    def warp(x):
        if x is None:
            return None
        # warp in [0, 2] so the zero padding maps back to the darkest pixel value
        return F.grid_sample(x + 1, grid, align_corners=False, padding_mode="zeros") - 1

    return ViewBatch(warp(batch.pa), warp(batch.l), batch.present)


# ---------------------------------------------------------------- training loop


@dataclass
class TrainResult:
    model: object
    record: RunRecord
    best_state: dict


def validation_regime(spec: ModelSpec) -> str:
    return {SINGLE_PA: "PA_ONLY", SINGLE_L: "L_ONLY"}.get(spec.topology, "BOTH")


def train(spec: ModelSpec, data: PreparedData, split: SplitAssignment, config: TrainConfig,
          model_name: str = "", run_id: str = "", on_epoch=None) -> TrainResult:
    """Train with per-branch Adam, keep the epoch with the best validation macro AUC."""
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    gen = torch.Generator().manual_seed(config.seed)
    spec = replace(spec, backbone=replace(spec.backbone, dropout_p=config.dropout_p))
    model = build_model(spec)
    optimizers = make_optimizers(model, config)

    train_rows = data.rows(split.members("train"))
    valid_rows = data.rows(split.members("valid"))
    weights, mask = class_weights(data.targets[train_rows], config.class_weight_clamp)
    untrainable = [data.labels[i] for i in np.flatnonzero(~mask)]
    if untrainable:
        log.warning("labels without training positives or negatives, excluded from loss: %s",
                    untrainable)
    if not mask.any():
        raise ValueError("no trainable label in the training split")
    regime = validation_regime(spec)

    def validate():
        model.eval()
        res = evaluate_rows(model, data, valid_rows, regime, config.eval_batch_size)
        return res.macro

    val_curve, loss_curve = [], []
    best_auc, best_epoch = -math.inf, -1
    best_state = copy.deepcopy(model.state_dict())
    if config.epochs == 0:
        auc0 = validate()
        val_curve.append(auc0)
        best_auc, best_epoch = auc0, 0
    for epoch in range(config.epochs):
        t0 = time.time()
        set_learning_rates(optimizers, lr_at(epoch, config))
        model.train()
        order = rng.permutation(train_rows)
        losses = []
        for b, start in enumerate(range(0, len(order), config.batch_size)):
            rows = order[start:start + config.batch_size]
            try:
                loss = _train_step(model, optimizers, data, rows, spec, config, weights, mask, rng, gen)
            except NonFiniteLoss:
                raise NonFiniteLoss(batch_index=b, epoch=epoch) from None
            if loss is not None:
                losses.append(loss)
        loss_curve.append(float(np.mean(losses)) if losses else math.nan)
        auc = validate()
        val_curve.append(auc)
        score = -math.inf if math.isnan(auc) else auc
        if score > best_auc:
            best_auc, best_epoch = score, epoch
            best_state = copy.deepcopy(model.state_dict())
        log.info("%s epoch %d loss %.4f val auc %.4f (%.1fs)", model_name or spec.topology,
                 epoch, loss_curve[-1], auc, time.time() - t0)
        if on_epoch is not None:
            on_epoch(epoch, loss_curve[-1], auc)
    model.load_state_dict(best_state)
    model.eval()
    record = RunRecord(
        run_id=run_id, model=model_name or spec.topology, seed=config.seed,
        split_id=split.split_id, split_seed=split.seed, spec_hash=spec.hash,
        config_hash=config.hash, val_curve=val_curve, train_loss=loss_curve,
        best_epoch=best_epoch, best_val_auc=best_auc if best_auc > -math.inf else math.nan,
        untrainable=untrainable,
    )
    return TrainResult(model, record, best_state)


def _train_step(model, optimizers, data, rows, spec, config, weights, mask, rng, gen):
    present = data.present[rows].copy()
    mode = config.curriculum.mode
    if spec.topology == HEMIS and mode == HEMIS_DROP:
        decisions = curriculum_sample(config.curriculum, rng, size=len(rows))
        paired = present.all(axis=1)
        present[paired & (decisions == DROP_PA), 0] = False
        present[paired & (decisions == DROP_L), 1] = False
    batch = make_batch(data, rows, spec, present)
    if config.augment:
        batch = augment_views(batch, gen)
    targets = torch.from_numpy(data.targets[rows])
    if spec.topology == AUXLOSS:
        decision = curriculum_sample(config.curriculum, rng) if mode == AUXLOSS_BRANCH else JOINT
        return apply_branch_update(model, optimizers, batch, targets, decision, weights, mask,
                                   config.loss_weights)
    loss = weighted_bce(model(batch).joint_logits, targets, weights, mask)
    _step(optimizers, GROUPS, loss)
    return float(loss.detach())


# ---------------------------------------------------------------- random search


def sample_params(space: Mapping, rng: np.random.Generator) -> dict:
    """Draw one value per hyperparameter from ``{"dist": ..., ...}`` entries."""
    out = {}
    for name in sorted(space):
        d = space[name]
        kind = d["dist"]
        if kind == "log_uniform":
            out[name] = float(math.exp(rng.uniform(math.log(d["low"]), math.log(d["high"]))))
        elif kind == "uniform":
            out[name] = float(rng.uniform(d["low"], d["high"]))
        elif kind == "choice":
            vals = list(d["values"])
            out[name] = vals[int(rng.integers(len(vals)))]
        else:
            raise ValueError(f"unknown distribution {kind!r} for {name}")
    return out


def apply_params(config: TrainConfig, params: Mapping) -> TrainConfig:
    """Apply sampled hyperparameters; ``view_drop`` is the total curriculum drop probability."""
    params = dict(params)
    kw = {}
    drop = params.pop("view_drop", None)
    if drop is not None:
        cur = config.curriculum
        kw["curriculum"] = replace(cur, hemis_drop_each=drop / 2, auxloss_branch_each=drop / 2)
    fields = set(TrainConfig.__dataclass_fields__)
    unknown = set(params) - fields
    if unknown:
        raise ValueError(f"search space names unknown TrainConfig fields: {sorted(unknown)}")
    kw.update(params)
    return replace(config, **kw)


@dataclass
class Trial:
    index: int
    params: dict
    config: TrainConfig
    val_auc: float
    status: str = "ok"


def random_search(spec: ModelSpec, data: PreparedData, split: SplitAssignment, base: TrainConfig,
                  space: Mapping, n_trials: int = 40, seed: int = 0, model_name: str = "") -> list:
    """Train ``n_trials`` sampled configurations; returns trials sorted by validation AUC."""
    rng = np.random.default_rng(seed)
    trials = []
    for i in range(n_trials):
        params = sample_params(space, rng)
        try:
            cfg = apply_params(base, params)
            cfg = replace(cfg, seed=base.seed + i)
            res = train(spec, data, split, cfg, model_name=model_name, run_id=f"trial{i}")
            trials.append(Trial(i, params, cfg, res.record.best_val_auc))
        except Exception as e:  # a failed trial is recorded, not fatal
            log.warning("trial %d failed: %s", i, e)
            trials.append(Trial(i, params, base, math.nan, f"failed: {e}"))
    return sorted(trials, key=lambda t: (math.isnan(t.val_auc), -(t.val_auc if not math.isnan(t.val_auc) else 0), t.index))
