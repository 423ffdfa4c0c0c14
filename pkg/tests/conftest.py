import os
import re
from pathlib import Path

import numpy as np
import pytest
import torch
from hypothesis import settings

from lateralview.data import PreparedData, load_prepared, make_split, manifest_from_prepared, prepare
from lateralview.experiment import ExperimentConfig, cmd_train
from lateralview.models import BackboneConfig
from lateralview.synth import SynthConfig, generate

settings.register_profile("ci", max_examples=200, deadline=None)
settings.register_profile("dev", max_examples=30, deadline=None)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "dev"))

torch.set_num_threads(1)

TINY = BackboneConfig(input_side=16, growth_rate=4, initial_channels=8, layers_per_block=1, bn_size=2)


@pytest.fixture
def tiny_backbone():
    return TINY


def random_prepared(n=24, n_labels=3, side=16, seed=0, pa_only=0) -> PreparedData:
    """In-memory dataset with random images; the last ``pa_only`` patients lack a lateral view."""
    rng = np.random.default_rng(seed)
    images = rng.uniform(-1, 1, size=(n, 2, side, side)).astype(np.float32)
    present = np.ones((n, 2), dtype=bool)
    if pa_only:
        present[n - pa_only:, 1] = False
        images[n - pa_only:, 1] = 0.0
    targets = np.zeros((n, n_labels), dtype=np.float32)
    # every label gets both classes
    for j in range(n_labels):
        targets[:, j] = rng.permutation(np.arange(n) % 2)
    ids = [f"p{i:03d}" for i in range(n)]
    return PreparedData(tuple(f"lab{j}" for j in range(n_labels)), ids, [f"{p}_s0" for p in ids],
                        images, present, targets, "vh", "extended" if pa_only else "main")


@pytest.fixture
def prepared_small():
    return random_prepared()


@pytest.fixture(scope="session")
def synth_prepared(tmp_path_factory):
    """Small noiseless-ish synthetic corpus, prepared through the real pipeline."""
    root = tmp_path_factory.mktemp("synth")
    cfg = SynthConfig(n_patients=80, image_side=16, noise_std=5.0, seed=3)
    generate(cfg, root / "raw")
    prepare(root / "raw" / "manifest.csv", root / "raw" / "hierarchy.csv", root / "data",
            side=16, min_patients=5)
    data = load_prepared(root / "data")
    split = make_split(manifest_from_prepared(data), 0)
    return data, split


# ---------------------------------------------------------------- tiny experiments

SNAPSHOTS = Path(__file__).parent / "snapshots"

TINY_BACKBONE = {"growth_rate": 4, "initial_channels": 8, "layers_per_block": 1, "bn_size": 2}


def tiny_config(**kw):
    """A seconds-scale experiment: 60 synthetic patients at 32 px, one epoch."""
    d = dict(
        dataset={"synth": {"n_patients": 60, "image_side": 32, "noise_std": 10.0, "seed": 1},
                 "min_patients": 3},
        models=["densenet_pa", "dualnet", "auxloss_cl"],
        n_runs=2, seed=0, backbone=TINY_BACKBONE,
        train={"epochs": 1, "lr_pa": 1e-3, "lr_l": 1e-3, "lr_common": 1e-3},
    )
    d.update(kw)
    return ExperimentConfig.from_dict(d)


def mask_numbers(text):
    return re.sub(r"\d", "#", text)


@pytest.fixture(scope="session")
def trained(tmp_path_factory):
    return cmd_train(tiny_config(), tmp_path_factory.mktemp("exp"))
