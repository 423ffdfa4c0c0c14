"""Dense-block backbone and the single- and multi-view topologies.

Images enter as ``(batch, 1, side, side)`` tensors. A missing view is
represented by ``None`` in a :class:`ViewBatch`; substituting zeros is an
explicit step taken only by the topologies that need both inputs.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import AmbiguousOutput, BothViewsMissing, MixedAvailability, VocabularyMismatch

SINGLE_PA = "SINGLE_PA"
SINGLE_L = "SINGLE_L"
STACKED = "STACKED"
DUALNET = "DUALNET"
HEMIS = "HEMIS"
AUXLOSS = "AUXLOSS"
TOPOLOGIES = (SINGLE_PA, SINGLE_L, STACKED, DUALNET, HEMIS, AUXLOSS)
CONCAT, AVERAGE = "CONCAT", "AVERAGE"
# silu is a smooth stand-in used where finite differences must not straddle kinks
_ACTIVATIONS = {"relu": nn.ReLU, "silu": nn.SiLU}


@dataclass(frozen=True)
class BackboneConfig:
    n_blocks: int = 4
    growth_rate: int = 8
    layers_per_block: tuple = (2, 2, 2, 2)
    initial_channels: int = 16
    bn_size: int = 4
    compression: float = 0.5
    dropout_p: float = 0.0
    input_channels: int = 1
    input_side: int = 64
    stem_kernel: int = 3
    stem_stride: int = 2
    stem_pool: bool = False
    activation: str = "relu"

    def __post_init__(self):
        layers = self.layers_per_block
        if isinstance(layers, int):
            layers = (layers,) * self.n_blocks
        object.__setattr__(self, "layers_per_block", tuple(int(n) for n in layers))
        if self.n_blocks < 2:
            raise ValueError("backbone needs at least 2 dense blocks")
        if len(self.layers_per_block) != self.n_blocks:
            raise ValueError("layers_per_block must have one entry per block")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError("dropout_p must lie in [0, 1)")
        if self.input_channels not in (1, 2):
            raise ValueError("input_channels must be 1 or 2")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"activation must be one of {sorted(_ACTIVATIONS)}")

    @classmethod
    def densenet121(cls, **kw) -> "BackboneConfig":
        base = dict(n_blocks=4, growth_rate=32, layers_per_block=(6, 12, 24, 16),
                    initial_channels=64, input_side=224, stem_kernel=7, stem_stride=2,
                    stem_pool=True)
        base.update(kw)
        return cls(**base)


@dataclass(frozen=True)
class ModelSpec:
    topology: str
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    n_labels: int = 1
    joint_combine: str = CONCAT
    tied_branches: bool = False

    def __post_init__(self):
        if self.topology not in TOPOLOGIES:
            raise ValueError(f"unknown topology {self.topology!r}")
        if self.joint_combine not in (CONCAT, AVERAGE):
            raise ValueError(f"unknown joint_combine {self.joint_combine!r}")
        channels = 2 if self.topology == STACKED else 1
        if self.backbone.input_channels != channels:
            object.__setattr__(self, "backbone", replace(self.backbone, input_channels=channels))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["backbone"]["layers_per_block"] = list(self.backbone.layers_per_block)
        return d

    @classmethod
    def from_dict(cls, d) -> "ModelSpec":
        d = dict(d)
        d["backbone"] = BackboneConfig(**d["backbone"])
        return cls(**d)

    @property
    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:12]

    @property
    def views(self) -> tuple:
        """Views the model consumes."""
        return {SINGLE_PA: ("PA",), SINGLE_L: ("L",)}.get(self.topology, ("PA", "L"))


@dataclass
class ViewBatch:
    pa: Optional[torch.Tensor]
    l: Optional[torch.Tensor]
    present: torch.Tensor  # (batch, 2) bool: pa_present, l_present

    @classmethod
    def from_views(cls, pa=None, l=None, present=None) -> "ViewBatch":
        ref = pa if pa is not None else l
        if ref is None:
            raise BothViewsMissing("a batch needs at least one view")
        if present is None:
            n = ref.shape[0]
            present = torch.stack([torch.full((n,), pa is not None),
                                   torch.full((n,), l is not None)], dim=1)
        return cls(pa, l, present.bool())

    def __len__(self):
        return int(self.present.shape[0])

    @property
    def uniform(self) -> Optional[tuple]:
        """``(pa_present, l_present)`` if every sample shares it, else None."""
        first = self.present[0]
        if bool((self.present == first).all()):
            return bool(first[0]), bool(first[1])
        return None

    def view(self, name: str) -> Optional[torch.Tensor]:
        return self.pa if name == "PA" else self.l


@dataclass
class ModelOutput:
    joint_logits: Optional[torch.Tensor] = None
    pa_logits: Optional[torch.Tensor] = None
    l_logits: Optional[torch.Tensor] = None


# ---------------------------------------------------------------- backbone


class DenseLayer(nn.Module):
    def __init__(self, in_ch, growth, bn_size, dropout_p, activation="relu"):
        super().__init__()
        self.norm1 = nn.BatchNorm2d(in_ch)
        self.conv1 = nn.Conv2d(in_ch, bn_size * growth, 1, bias=False)
        self.norm2 = nn.BatchNorm2d(bn_size * growth)
        self.conv2 = nn.Conv2d(bn_size * growth, growth, 3, padding=1, bias=False)
        self.act = _ACTIVATIONS[activation]()
        self.dropout_p = dropout_p

    def forward(self, x):
        h = self.conv1(self.act(self.norm1(x)))
        h = self.conv2(self.act(self.norm2(h)))
        if self.dropout_p > 0:
            h = F.dropout(h, self.dropout_p, self.training)
        return torch.cat([x, h], dim=1)


class Transition(nn.Sequential):
    def __init__(self, in_ch, out_ch, activation="relu"):
        super().__init__(nn.BatchNorm2d(in_ch), _ACTIVATIONS[activation](),
                         nn.Conv2d(in_ch, out_ch, 1, bias=False), nn.AvgPool2d(2))


def _dense_block(in_ch, n_layers, cfg):
    layers = []
    for i in range(n_layers):
        layers.append(DenseLayer(in_ch + i * cfg.growth_rate, cfg.growth_rate, cfg.bn_size,
                                 cfg.dropout_p, cfg.activation))
    return nn.Sequential(*layers), in_ch + n_layers * cfg.growth_rate


class DenseBackbone(nn.Module):
    """Dense blocks ``first .. last-1`` of the configured backbone.

    With ``first == 0`` the module starts with the stem convolution and takes
    images; otherwise it takes feature maps with ``in_channels`` channels.
    Every block except the network's final one is followed by a transition;
    the final one is followed by BatchNorm + ReLU.
    """

    def __init__(self, cfg: BackboneConfig, first=0, last=None, in_channels=None):
        super().__init__()
        last = cfg.n_blocks if last is None else last
        stages = []
        if first == 0:
            ch = cfg.initial_channels
            stem = [nn.Conv2d(in_channels or cfg.input_channels, ch, cfg.stem_kernel,
                              stride=cfg.stem_stride, padding=cfg.stem_kernel // 2, bias=False)]
            if cfg.stem_pool:
                stem += [nn.BatchNorm2d(ch), _ACTIVATIONS[cfg.activation](),
                         nn.MaxPool2d(3, stride=2, padding=1)]
            stages.append(nn.Sequential(*stem))
        else:
            ch = in_channels
        for b in range(first, last):
            block, ch = _dense_block(ch, cfg.layers_per_block[b], cfg)
            stages.append(block)
            if b < cfg.n_blocks - 1:
                out = int(ch * cfg.compression)
                stages.append(Transition(ch, out, cfg.activation))
                ch = out
            else:
                stages.append(nn.Sequential(nn.BatchNorm2d(ch), _ACTIVATIONS[cfg.activation]()))
        self.body = nn.Sequential(*stages)
        self.out_channels = ch

    def forward(self, x):
        return self.body(x)


def gap(x):
    return x.mean(dim=(2, 3))


def init_weights(module: nn.Module) -> None:
    for m in module.modules():
        if isinstance(m, nn.Conv2d):
            nn.init.kaiming_uniform_(m.weight, nonlinearity="relu")
        elif isinstance(m, nn.BatchNorm2d):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)
        elif isinstance(m, nn.Linear):
            nn.init.zeros_(m.bias)


# ---------------------------------------------------------------- fusion helpers


def substitute_missing_view(batch: ViewBatch) -> ViewBatch:
    """Replace absent views (whole tensors or masked rows) with zeros.

    ``present`` is carried over untouched so evaluation can still tell real
    from substituted views.
    """
    if not bool(batch.present.any(dim=1).all()):
        raise BothViewsMissing("a sample has neither view")
    ref = batch.pa if batch.pa is not None else batch.l
    if ref is None:
        raise BothViewsMissing("a batch needs at least one view")
    out = []
    for x, col in ((batch.pa, 0), (batch.l, 1)):
        if x is None:
            x = torch.zeros_like(ref)
        elif not bool(batch.present[:, col].all()):
            keep = batch.present[:, col].view(-1, 1, 1, 1)
            x = torch.where(keep, x, torch.zeros_like(x))
        out.append(x)
    return ViewBatch(out[0], out[1], batch.present)


def hemis_fuse(feat_pa, feat_l, present=None):
    """Pixelwise mean and population variance over the available views.

    Returns ``cat(mean, variance)`` along channels. A sample with a single
    view gets that view's map as the mean and an exact zero variance.
    ``present`` (batch x 2) marks availability per sample when both tensors
    are given for a mixed batch.
    """
    if feat_pa is None and feat_l is None:
        raise BothViewsMissing("HeMIS fusion needs at least one feature map")
    if feat_pa is None or feat_l is None:
        f = feat_pa if feat_pa is not None else feat_l
        return torch.cat([f, torch.zeros_like(f)], dim=1)
    if feat_pa.shape != feat_l.shape:
        raise ValueError(f"feature map shapes differ: {tuple(feat_pa.shape)} vs {tuple(feat_l.shape)}")
    mean = (feat_pa + feat_l) / 2
    var = ((feat_pa - mean) ** 2 + (feat_l - mean) ** 2) / 2
    if present is not None and not bool(present.all()):
        if not bool(present.any(dim=1).all()):
            raise BothViewsMissing("a sample has neither view")
        pa_only = (present[:, 0] & ~present[:, 1]).view(-1, 1, 1, 1)
        l_only = (present[:, 1] & ~present[:, 0]).view(-1, 1, 1, 1)
        mean = torch.where(pa_only, feat_pa, torch.where(l_only, feat_l, mean))
        var = torch.where(pa_only | l_only, torch.zeros_like(var), var)
    return torch.cat([mean, var], dim=1)


# ---------------------------------------------------------------- topologies


class MultiViewModel(nn.Module):
    """Common interface: ``forward(ViewBatch) -> ModelOutput`` and branch groups."""

    spec: ModelSpec

    def param_groups(self) -> dict:
        """Parameters keyed by learning-rate group: ``pa``, ``l`` and ``common``."""
        raise NotImplementedError


class SingleView(MultiViewModel):
    def __init__(self, spec: ModelSpec):
        super().__init__()
        self.spec = spec
        self.view_name = "PA" if spec.topology in (SINGLE_PA, STACKED) else "L"
        self.features = DenseBackbone(spec.backbone)
        self.fc = nn.Linear(self.features.out_channels, spec.n_labels)
        init_weights(self)

    def forward(self, batch: ViewBatch) -> ModelOutput:
        x = batch.view(self.view_name)
        if x is None:
            raise BothViewsMissing(f"{self.spec.topology} needs the {self.view_name} view")
        return ModelOutput(joint_logits=self.fc(gap(self.features(x))))

    def param_groups(self):
        return {"common": list(self.parameters())}


class Stacked(SingleView):
    def forward(self, batch: ViewBatch) -> ModelOutput:
        batch = substitute_missing_view(batch)
        if batch.pa.shape != batch.l.shape:
            raise ValueError("PA and L views must share a shape to be stacked")
        x = torch.cat([batch.pa, batch.l], dim=1)
        return ModelOutput(joint_logits=self.fc(gap(self.features(x))))


class DualNet(MultiViewModel):
    def __init__(self, spec: ModelSpec):
        super().__init__()
        self.spec = spec
        self.branch_pa = DenseBackbone(spec.backbone)
        self.branch_l = self.branch_pa if spec.tied_branches else DenseBackbone(spec.backbone)
        width = self.branch_pa.out_channels
        self.fc = nn.Linear(2 * width, spec.n_labels)
        init_weights(self)

    def embed(self, batch: ViewBatch):
        return gap(self.branch_pa(batch.pa)), gap(self.branch_l(batch.l))

    def forward(self, batch: ViewBatch) -> ModelOutput:
        batch = substitute_missing_view(batch)
        if batch.pa.shape != batch.l.shape:
            raise ValueError("PA and L views must share a shape")
        v_pa, v_l = self.embed(batch)
        return ModelOutput(joint_logits=self.fc(torch.cat([v_pa, v_l], dim=1)))

    def param_groups(self):
        groups = {"pa": list(self.branch_pa.parameters()), "common": list(self.fc.parameters())}
        groups["l"] = [] if self.spec.tied_branches else list(self.branch_l.parameters())
        return groups


class HeMIS(MultiViewModel):
    def __init__(self, spec: ModelSpec):
        super().__init__()
        self.spec = spec
        cfg = spec.backbone
        split = cfg.n_blocks - 1
        self.branch_pa = DenseBackbone(cfg, 0, split)
        self.branch_l = self.branch_pa if spec.tied_branches else DenseBackbone(cfg, 0, split)
        self.trunk = DenseBackbone(cfg, split, cfg.n_blocks, in_channels=2 * self.branch_pa.out_channels)
        self.fc = nn.Linear(self.trunk.out_channels, spec.n_labels)
        init_weights(self)

    def branch_features(self, batch: ViewBatch):
        feats = []
        for x, col, branch in ((batch.pa, 0, self.branch_pa), (batch.l, 1, self.branch_l)):
            if x is None or not bool(batch.present[:, col].any()):
                feats.append(None)
                continue
            rows = batch.present[:, col]
            if bool(rows.all()):
                feats.append(branch(x))
            else:
                f = branch(x[rows])
                full = f.new_zeros((len(batch),) + tuple(f.shape[1:]))
                full[rows] = f
                feats.append(full)
        return feats

    def forward(self, batch: ViewBatch) -> ModelOutput:
        feat_pa, feat_l = self.branch_features(batch)
        fused = hemis_fuse(feat_pa, feat_l, batch.present)
        return ModelOutput(joint_logits=self.fc(gap(self.trunk(fused))))

    def param_groups(self):
        groups = {"pa": list(self.branch_pa.parameters()),
                  "common": list(self.trunk.parameters()) + list(self.fc.parameters())}
        groups["l"] = [] if self.spec.tied_branches else list(self.branch_l.parameters())
        return groups


class AuxLoss(MultiViewModel):
    """DualNet with one extra classification head per branch.

    With a single view present only that branch's head is evaluated; the
    other branch and the joint head are not touched.
    """

    def __init__(self, spec: ModelSpec):
        super().__init__()
        self.spec = spec
        self.branch_pa = DenseBackbone(spec.backbone)
        self.branch_l = self.branch_pa if spec.tied_branches else DenseBackbone(spec.backbone)
        width = self.branch_pa.out_channels
        self.fc_pa = nn.Linear(width, spec.n_labels)
        self.fc_l = nn.Linear(width, spec.n_labels)
        joint_in = 2 * width if spec.joint_combine == CONCAT else width
        self.fc_joint = nn.Linear(joint_in, spec.n_labels)
        init_weights(self)

    def combine(self, v_pa, v_l):
        if self.spec.joint_combine == CONCAT:
            return torch.cat([v_pa, v_l], dim=1)
        return (v_pa + v_l) / 2

    def forward_branch(self, x, view: str):
        if view == "PA":
            return self.fc_pa(gap(self.branch_pa(x)))
        return self.fc_l(gap(self.branch_l(x)))

    def forward(self, batch: ViewBatch) -> ModelOutput:
        avail = batch.uniform
        if avail is None:
            raise MixedAvailability("AuxLoss needs the same views present for every sample")
        has_pa, has_l = avail[0] and batch.pa is not None, avail[1] and batch.l is not None
        if not (has_pa or has_l):
            raise BothViewsMissing("AuxLoss needs at least one view")
        if has_pa and has_l:
            v_pa, v_l = gap(self.branch_pa(batch.pa)), gap(self.branch_l(batch.l))
            return ModelOutput(joint_logits=self.fc_joint(self.combine(v_pa, v_l)),
                               pa_logits=self.fc_pa(v_pa), l_logits=self.fc_l(v_l))
        if has_pa:
            return ModelOutput(pa_logits=self.forward_branch(batch.pa, "PA"))
        return ModelOutput(l_logits=self.forward_branch(batch.l, "L"))

    def param_groups(self):
        groups = {"pa": list(self.branch_pa.parameters()) + list(self.fc_pa.parameters()),
                  "l": list(self.fc_l.parameters()),
                  "common": list(self.fc_joint.parameters())}
        if not self.spec.tied_branches:
            groups["l"] = list(self.branch_l.parameters()) + groups["l"]
        return groups


_CLASSES = {SINGLE_PA: SingleView, SINGLE_L: SingleView, STACKED: Stacked,
            DUALNET: DualNet, HEMIS: HeMIS, AUXLOSS: AuxLoss}


def build_model(spec: ModelSpec) -> MultiViewModel:
    return _CLASSES[spec.topology](spec)


def predict(output: ModelOutput) -> torch.Tensor:
    if output.joint_logits is not None:
        return torch.sigmoid(output.joint_logits)
    branches = [t for t in (output.pa_logits, output.l_logits) if t is not None]
    if len(branches) == 2:
        raise AmbiguousOutput("both branch logits present without a joint head")
    if not branches:
        raise AmbiguousOutput("output has no logits")
    return torch.sigmoid(branches[0])


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(path, model: MultiViewModel, vocab_hash: str, labels=(), extra=None) -> None:
    payload = {
        "state_dict": model.state_dict(),
        "spec": model.spec.to_dict(),
        "vocab_hash": vocab_hash,
        "labels": list(labels),
        "extra": extra or {},
    }
    tmp = f"{path}.tmp"
    torch.save(payload, tmp)
    os.replace(tmp, path)


def load_checkpoint(path, vocab_hash: Optional[str] = None):
    """Rebuild a model from a checkpoint; refuse a vocabulary mismatch."""
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if vocab_hash is not None and payload["vocab_hash"] != vocab_hash:
        raise VocabularyMismatch(
            f"checkpoint {path} was trained on vocabulary {payload['vocab_hash']}, "
            f"data has {vocab_hash}"
        )
    model = build_model(ModelSpec.from_dict(payload["spec"]))
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, payload
