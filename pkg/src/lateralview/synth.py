"""Seeded synthetic paired-view dataset.

Every label owns one cell of a fixed grid; an active label paints an
axis-aligned rectangle inside its cell, in the PA image, the lateral image,
or both, according to the label's visibility class. Labels are drawn
independently, so a lateral-only label carries no information in the PA
image.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .data import Study, write_hierarchy, write_manifest
from .errors import EmptyManifest

PA_ONLY, L_ONLY, BOTH = "PA_ONLY", "L_ONLY", "BOTH"
VISIBILITY_CLASSES = (PA_ONLY, L_ONLY, BOTH)
BACKGROUND = 40.0


def default_visibility(n_labels: int) -> list:
    return [VISIBILITY_CLASSES[j % 3] for j in range(n_labels)]


def default_prevalence(n_labels: int) -> list:
    if n_labels == 1:
        return [0.1]
    return [round(0.1 + 0.35 * j / (n_labels - 1), 4) for j in range(n_labels)]


@dataclass
class SynthConfig:
    n_patients: int = 2000
    n_labels: int = 9
    visibility: list = None
    prevalence: list = None
    image_side: int = 64
    noise_std: float = 20.0
    seed: int = 0
    # glyph brightness above background; glyph j uses amplitude[j % len]
    amplitude: tuple = (90.0, 120.0, 150.0)

    def __post_init__(self):
        if self.visibility is None:
            self.visibility = default_visibility(self.n_labels)
        if self.prevalence is None:
            self.prevalence = default_prevalence(self.n_labels)
        self.visibility = list(self.visibility)
        self.prevalence = [float(p) for p in self.prevalence]
        self.amplitude = tuple(float(a) for a in self.amplitude)

    def validate(self) -> None:
        if self.n_patients < 1:
            raise EmptyManifest("synthetic dataset needs at least one patient")
        if len(self.visibility) != self.n_labels or len(self.prevalence) != self.n_labels:
            raise ValueError("visibility and prevalence need one entry per label")
        bad = [v for v in self.visibility if v not in VISIBILITY_CLASSES]
        if bad:
            raise ValueError(f"unknown visibility classes {bad}")
        if self.n_labels >= 3 and set(self.visibility) != set(VISIBILITY_CLASSES):
            raise ValueError("need at least one label per visibility class")
        if not all(0.0 < p < 1.0 for p in self.prevalence):
            raise ValueError("prevalences must lie in (0, 1)")
        if len(self.prevalence) >= 3 and min(self.prevalence) >= 1 / 6:
            raise ValueError("at least one prevalence must be below 1/6 to exercise the class-weight clamp")
        if self.noise_std < 0:
            raise ValueError("noise_std must be non-negative")
        if self.image_side < 2 * grid_size(self.n_labels):
            raise ValueError("image_side too small for the glyph grid")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["amplitude"] = list(self.amplitude)
        return d


def label_names(n_labels: int) -> list:
    return [f"synth_{j:02d}" for j in range(n_labels)]


def grid_size(n_labels: int) -> int:
    return max(1, math.ceil(math.sqrt(n_labels)))


def glyph_boxes(n_labels: int, side: int, view: str) -> list:
    """Pixel box (top, left, bottom, right) for every label in ``view``.

    The lateral view mirrors the grid horizontally so the two views share no
    pixel correspondence. Boxes sit strictly inside their cells, so no two
    labels overlap.
    """
    g = grid_size(n_labels)
    cell = side // g
    boxes = []
    for j in range(n_labels):
        r, c = divmod(j, g)
        if view == "L":
            c = g - 1 - c
        # height/width vary with the label so shapes differ as well as positions
        h = max(1, int(cell * (0.4 + 0.3 * ((j % 3) / 2))))
        w = max(1, int(cell * (0.7 - 0.3 * ((j % 3) / 2))))
        top = r * cell + (cell - h) // 2
        left = c * cell + (cell - w) // 2
        boxes.append((top, left, top + h, left + w))
    return boxes


def render(z: np.ndarray, config: SynthConfig, view: str, rng=None) -> np.ndarray:
    """Render one view for label vector ``z`` as a uint8 image."""
    side = config.image_side
    img = np.full((side, side), BACKGROUND, dtype=np.float64)
    visible = (PA_ONLY, BOTH) if view == "PA" else (L_ONLY, BOTH)
    for j, (t, l, b, r) in enumerate(glyph_boxes(config.n_labels, side, view)):
        if z[j] and config.visibility[j] in visible:
            img[t:b, l:r] += config.amplitude[j % len(config.amplitude)]
    if config.noise_std > 0 and rng is not None:
        img += rng.normal(0.0, config.noise_std, size=img.shape)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def sample_patient(config: SynthConfig, seq: np.random.SeedSequence):
    rng = np.random.default_rng(seq)
    z = (rng.random(config.n_labels) < np.asarray(config.prevalence)).astype(np.int8)
    pa = render(z, config, "PA", rng)
    lat = render(z, config, "L", rng)
    return z, pa, lat


def generate(config: SynthConfig, out) -> dict:
    """Write images, ``manifest.csv``, ``hierarchy.csv`` and ``synth_truth.json`` under ``out``."""
    config.validate()
    out = Path(out)
    img_dir = out / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    names = label_names(config.n_labels)
    seqs = np.random.SeedSequence(config.seed).spawn(config.n_patients)
    width = len(str(config.n_patients - 1))
    studies, truth = [], {}
    for i, seq in enumerate(seqs):
        pid = f"p{i:0{width}d}"
        z, pa, lat = sample_patient(config, seq)
        pa_path, l_path = img_dir / f"{pid}_PA.png", img_dir / f"{pid}_L.png"
        Image.fromarray(pa, mode="L").save(pa_path)
        Image.fromarray(lat, mode="L").save(l_path)
        labels = frozenset(n for n, on in zip(names, z) if on)
        studies.append(Study(pid, f"{pid}_s0", 0, f"images/{pa_path.name}",
                             f"images/{l_path.name}", labels))
        truth[pid] = [int(v) for v in z]
    write_manifest(out / "manifest.csv", studies, root=out)
    write_hierarchy(out / "hierarchy.csv", {n: n for n in names})
    sidecar = {
        "labels": names,
        "visibility": dict(zip(names, config.visibility)),
        "config": config.to_dict(),
        "z": truth,
    }
    (out / "synth_truth.json").write_text(json.dumps(sidecar))
    return sidecar


def labels_by_visibility(truth: dict, classes) -> list:
    classes = set(classes)
    return sorted(n for n, v in truth["visibility"].items() if v in classes)
