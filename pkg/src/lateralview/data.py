"""Manifest ingestion, label vocabulary, preprocessing, splits and the tensor cache."""

from __future__ import annotations

import ast
import csv
import datetime as dt
import hashlib
import json
import logging
import math
import os
from collections import defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from PIL import Image

from .errors import (
    DuplicatePatient,
    EmptyManifest,
    EmptyVocabulary,
    InvalidImage,
    ManifestError,
    UnknownLabel,
)

log = logging.getLogger(__name__)

VIEWS = ("PA", "L")
MANIFEST_COLUMNS = ("patient_id", "study_id", "order_key", "view", "image_path", "labels")
SPLIT_FRACTIONS = (0.6, 0.2, 0.2)
DEFAULT_SIDE = 224


@dataclass(frozen=True)
class Study:
    patient_id: str
    study_id: str
    order_key: object
    pa_image: object
    l_image: object = None
    labels: frozenset = frozenset()

    @property
    def has_lateral(self) -> bool:
        return self.l_image is not None


@dataclass(frozen=True)
class LabelVocabulary:
    hierarchy: Mapping[str, str]
    retained: tuple = ()
    min_patients: int = 50

    def __post_init__(self):
        for top in set(self.hierarchy.values()):
            if self.hierarchy.get(top, top) != top:
                raise ValueError(f"top-level label {top!r} does not map to itself")

    def top_level(self, label: str) -> str:
        if label in self.hierarchy:
            return self.hierarchy[label]
        if label in self.hierarchy.values():
            return label
        raise UnknownLabel(label)

    def index(self, label: str) -> int:
        return self.retained.index(label)

    @property
    def hash(self) -> str:
        payload = json.dumps({"retained": list(self.retained)})
        return hashlib.sha256(payload.encode()).hexdigest()[:16]

    def to_dict(self) -> dict:
        return {
            "hierarchy": dict(sorted(self.hierarchy.items())),
            "retained": list(self.retained),
            "min_patients": self.min_patients,
            "hash": self.hash,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "LabelVocabulary":
        return cls(dict(d["hierarchy"]), tuple(d["retained"]), int(d["min_patients"]))


@dataclass(frozen=True)
class DatasetManifest:
    studies: tuple
    mode: str = "main"

    def __post_init__(self):
        if self.mode not in ("main", "extended"):
            raise ValueError(f"unknown manifest mode {self.mode!r}")
        seen = set()
        for s in self.studies:
            if s.patient_id in seen:
                raise DuplicatePatient(f"patient {s.patient_id!r} appears twice")
            seen.add(s.patient_id)
            if self.mode == "main" and s.l_image is None:
                raise ManifestError(f"study {s.study_id!r} has no lateral view in a main manifest")

    @property
    def patient_ids(self) -> list:
        return sorted(s.patient_id for s in self.studies)

    def __len__(self):
        return len(self.studies)


@dataclass(frozen=True)
class SplitAssignment:
    seed: int
    assignment: Mapping[str, str]
    fractions: tuple = SPLIT_FRACTIONS

    def members(self, part: str) -> list:
        return sorted(p for p, a in self.assignment.items() if a == part)

    @property
    def sizes(self) -> tuple:
        return tuple(len(self.members(p)) for p in ("train", "valid", "test"))

    @property
    def split_id(self) -> str:
        payload = json.dumps(sorted(self.assignment.items()))
        return hashlib.sha256(payload.encode()).hexdigest()[:12]

    def to_dict(self) -> dict:
        return {"seed": self.seed, "fractions": list(self.fractions),
                "assignment": dict(sorted(self.assignment.items()))}

    @classmethod
    def from_dict(cls, d: Mapping) -> "SplitAssignment":
        return cls(int(d["seed"]), dict(d["assignment"]), tuple(d["fractions"]))


# ---------------------------------------------------------------- labels


def map_to_top_level(labels: Iterable[str], vocab: LabelVocabulary) -> frozenset:
    return frozenset(vocab.top_level(l) for l in labels)


def filter_labels(manifest: DatasetManifest, vocab: LabelVocabulary) -> LabelVocabulary:
    """Keep top-level labels carried by at least ``vocab.min_patients`` distinct patients."""
    patients = defaultdict(set)
    for s in manifest.studies:
        for label in s.labels:
            patients[label].add(s.patient_id)
    retained = tuple(sorted(l for l, p in patients.items() if len(p) >= vocab.min_patients))
    if not retained:
        raise EmptyVocabulary(
            f"no label is present in at least {vocab.min_patients} patients "
            f"({len(manifest)} patients in manifest)"
        )
    return replace(vocab, retained=retained)


def encode_targets(study: Study, vocab: LabelVocabulary) -> np.ndarray:
    y = np.zeros(len(vocab.retained), dtype=np.float32)
    for i, label in enumerate(vocab.retained):
        if label in study.labels:
            y[i] = 1.0
    return y


# ---------------------------------------------------------------- studies


def select_first_study(studies: Sequence[Study]) -> Study:
    return min(studies, key=lambda s: (s.order_key, s.study_id))


def build_main(studies: Iterable[Study]) -> tuple[DatasetManifest, list]:
    """Pair views and keep the first paired study of every patient.

    Returns the main manifest and, for patients with no paired study, their
    first PA-only study (candidates for the extended dataset).
    """
    by_patient = defaultdict(list)
    for s in studies:
        by_patient[s.patient_id].append(s)
    paired, pa_only = [], []
    for pid in sorted(by_patient):
        group = by_patient[pid]
        with_l = [s for s in group if s.l_image is not None]
        if with_l:
            paired.append(select_first_study(with_l))
        else:
            pa_only.append(select_first_study(group))
    return DatasetManifest(tuple(paired), "main"), pa_only


def build_extended(main: DatasetManifest, pa_only_studies: Sequence[Study]) -> DatasetManifest:
    existing = {s.patient_id for s in main.studies}
    extra = []
    for s in pa_only_studies:
        if s.patient_id in existing:
            raise DuplicatePatient(f"PA-only patient {s.patient_id!r} already in the main manifest")
        extra.append(replace(s, l_image=None))
    return DatasetManifest(tuple(main.studies) + tuple(extra), "extended")


# ---------------------------------------------------------------- splits


def make_split(manifest: DatasetManifest, seed: int) -> SplitAssignment:
    ids = manifest.patient_ids
    n = len(ids)
    if n < 5:
        raise ValueError(f"need at least 5 patients to split, got {n}")
    order = np.random.default_rng(seed).permutation(n)
    n_train = math.floor(SPLIT_FRACTIONS[0] * n)
    n_valid = math.floor(SPLIT_FRACTIONS[1] * n)
    assignment = {}
    for rank, i in enumerate(order):
        if rank < n_train:
            assignment[ids[i]] = "train"
        elif rank < n_train + n_valid:
            assignment[ids[i]] = "valid"
        else:
            assignment[ids[i]] = "test"
    return SplitAssignment(seed, assignment)


def extend_split(split: SplitAssignment, extended: DatasetManifest) -> SplitAssignment:
    """Send every patient absent from ``split`` to train; valid/test stay untouched."""
    assignment = dict(split.assignment)
    for pid in extended.patient_ids:
        assignment.setdefault(pid, "train")
    return SplitAssignment(split.seed, assignment, split.fractions)


# ---------------------------------------------------------------- images


def preprocess_image(img, side: int = DEFAULT_SIDE) -> np.ndarray:
    """Center-crop to a square, bilinear resize to ``side`` and scale [0, 255] to [-1, 1]."""
    arr = np.asarray(img, dtype=np.float32)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise InvalidImage(f"expected a non-empty 2-D grayscale image, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)) or arr.min() < 0 or arr.max() > 255:
        raise InvalidImage("pixel values must lie in [0, 255]")
    h, w = arr.shape
    s = min(h, w)
    top, left = (h - s) // 2, (w - s) // 2
    arr = arr[top:top + s, left:left + s]
    if s != side:
        arr = np.asarray(Image.fromarray(arr, mode="F").resize((side, side), Image.BILINEAR),
                         dtype=np.float32)
    out = arr / np.float32(127.5) - np.float32(1.0)
    return np.clip(out, -1.0, 1.0).astype(np.float32)


def load_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.uint8)


# ---------------------------------------------------------------- files


def parse_order_key(raw: str):
    raw = raw.strip()
    try:
        return int(raw)
    except ValueError:
        pass
    try:
        return dt.date.fromisoformat(raw)
    except ValueError:
        raise ManifestError(f"order_key {raw!r} is neither an integer nor an ISO-8601 date") from None


def read_hierarchy(path) -> dict:
    hierarchy = {}
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:2]] != ["raw_label", "top_level_label"]:
            raise ManifestError(f"{path}: expected header raw_label,top_level_label")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 2:
                raise ManifestError(f"{path}:{lineno}: expected 2 columns, got {len(row)}")
            raw, top = row[0].strip(), row[1].strip()
            hierarchy[raw] = top
    for top in set(hierarchy.values()):
        hierarchy.setdefault(top, top)
    return hierarchy


def write_hierarchy(path, hierarchy: Mapping[str, str]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["raw_label", "top_level_label"])
        for raw, top in sorted(hierarchy.items()):
            w.writerow([raw, top])


def read_manifest(path, vocab: LabelVocabulary | None = None) -> list:
    """Read a manifest CSV into studies, one per study_id.

    Image references are resolved relative to the manifest's directory.
    Raw labels are mapped to top level when ``vocab`` is given; unknown
    labels raise :class:`UnknownLabel` carrying the offending line number.
    """
    path = Path(path)
    root = path.parent
    rows = defaultdict(dict)
    meta = {}
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != MANIFEST_COLUMNS:
            raise ManifestError(f"{path}: header must be {','.join(MANIFEST_COLUMNS)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(MANIFEST_COLUMNS):
                raise ManifestError(f"{path}:{lineno}: expected 6 columns, got {len(row)}")
            pid, sid, key, view, img, labels = (c.strip() for c in row)
            if not pid or not sid:
                raise ManifestError(f"{path}:{lineno}: empty patient_id or study_id")
            if view not in VIEWS:
                raise ManifestError(f"{path}:{lineno}: view must be PA or L, got {view!r}")
            try:
                order_key = parse_order_key(key)
            except ManifestError as e:
                raise ManifestError(f"{path}:{lineno}: {e}") from None
            raw = frozenset(l.strip() for l in labels.split("|") if l.strip())
            if vocab is not None:
                for l in raw:
                    try:
                        vocab.top_level(l)
                    except UnknownLabel:
                        raise UnknownLabel(l, row=lineno) from None
            if view in rows[sid]:
                raise ManifestError(f"{path}:{lineno}: duplicate {view} view for study {sid!r}")
            rows[sid][view] = str(root / img) if not os.path.isabs(img) else img
            prev = meta.get(sid)
            if prev is None:
                meta[sid] = (pid, order_key, set(raw), lineno)
            else:
                if prev[0] != pid:
                    raise ManifestError(f"{path}:{lineno}: study {sid!r} has two patient ids")
                prev[2].update(raw)
    studies = []
    for sid, views in rows.items():
        pid, order_key, raw, lineno = meta[sid]
        if "PA" not in views:
            log.debug("study %s has no PA view, skipped", sid)
            continue
        labels = map_to_top_level(raw, vocab) if vocab is not None else frozenset(raw)
        studies.append(Study(pid, sid, order_key, views["PA"], views.get("L"), labels))
    return studies


def write_manifest(path, studies: Iterable[Study], root=None) -> None:
    root = Path(root) if root is not None else Path(path).parent
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(MANIFEST_COLUMNS)
        for s in studies:
            labels = "|".join(sorted(s.labels))
            for view, img in (("PA", s.pa_image), ("L", s.l_image)):
                if img is None:
                    continue
                rel = os.path.relpath(img, root) if os.path.isabs(str(img)) else img
                w.writerow([s.patient_id, s.study_id, s.order_key, view, rel, labels])


def padchest_to_manifest(padchest_csv, image_dir, out_path) -> int:
    """Convert the published PadChest CSV (ImageID, StudyID, PatientID, StudyDate_DICOM,
    Projection, Labels) into a manifest. Projections other than PA and L are dropped."""
    n = 0
    with open(padchest_csv, newline="", encoding="utf-8") as f, \
            open(out_path, "w", newline="", encoding="utf-8") as g:
        w = csv.writer(g)
        w.writerow(MANIFEST_COLUMNS)
        for row in csv.DictReader(f):
            view = row["Projection"].strip()
            if view not in VIEWS:
                continue
            try:
                labels = ast.literal_eval(row["Labels"]) if row["Labels"] else []
            except (ValueError, SyntaxError):
                labels = []
            labels = [l.strip() for l in labels if isinstance(l, str) and l.strip()]
            date = row["StudyDate_DICOM"].strip()
            if len(date) == 8 and date.isdigit():
                date = f"{date[:4]}-{date[4:6]}-{date[6:]}"
            w.writerow([row["PatientID"], row["StudyID"], date, view,
                        os.path.join(image_dir, row["ImageID"]), "|".join(labels)])
            n += 1
    return n


# ---------------------------------------------------------------- cache


def _checksum(buf: bytes) -> str:
    return hashlib.sha256(buf).hexdigest()


def write_study_cache(cache_dir, study_id: str, views: Mapping[str, np.ndarray]) -> dict:
    """Write one study as little-endian float32 tensors plus a JSON sidecar."""
    cache_dir = Path(cache_dir)
    present = [v for v in VIEWS if views.get(v) is not None]
    buf = b"".join(np.asarray(views[v], dtype="<f4").tobytes() for v in present)
    side = int(np.asarray(views["PA"]).shape[0])
    meta = {"study_id": study_id, "views": present, "side": side, "checksum": _checksum(buf)}
    _atomic_write(cache_dir / f"{study_id}.f32", buf)
    _atomic_write(cache_dir / f"{study_id}.json", json.dumps(meta).encode())
    return meta


def read_study_cache(cache_dir, study_id: str, verify: bool = True) -> dict:
    cache_dir = Path(cache_dir)
    meta = json.loads((cache_dir / f"{study_id}.json").read_text())
    buf = (cache_dir / f"{study_id}.f32").read_bytes()
    if verify and _checksum(buf) != meta["checksum"]:
        raise ManifestError(f"checksum mismatch for cached study {study_id!r}")
    side = meta["side"]
    arr = np.frombuffer(buf, dtype="<f4").reshape(len(meta["views"]), side, side)
    return {v: arr[i].astype(np.float32) for i, v in enumerate(meta["views"])}


def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


@dataclass
class PreparedData:
    """In-memory view of a prepared cache: images, availability and targets."""

    labels: tuple
    patient_ids: list
    study_ids: list
    images: np.ndarray              # (n, 2, side, side), zeros where a view is absent
    present: np.ndarray             # (n, 2) bool, columns PA, L
    targets: np.ndarray             # (n, n_labels)
    vocab_hash: str = ""
    mode: str = "main"
    index: dict = field(default_factory=dict)

    def __post_init__(self):
        self.index = {p: i for i, p in enumerate(self.patient_ids)}

    def rows(self, patient_ids: Iterable[str]) -> np.ndarray:
        return np.array([self.index[p] for p in patient_ids if p in self.index], dtype=np.int64)

    @property
    def side(self) -> int:
        return int(self.images.shape[-1])


def _preprocess_study(study: Study, side: int) -> dict:
    views = {"PA": preprocess_image(load_image(study.pa_image), side)}
    if study.l_image is not None:
        views["L"] = preprocess_image(load_image(study.l_image), side)
    return views


def prepare(manifest_path, hierarchy_path, out, side: int = DEFAULT_SIDE,
            min_patients: int = 50, extended: bool = False) -> dict:
    """Ingest a manifest and write the preprocessed cache, vocabulary and summary to ``out``."""
    out = Path(out)
    hierarchy = read_hierarchy(hierarchy_path)
    vocab = LabelVocabulary(hierarchy, (), min_patients)
    studies = read_manifest(manifest_path, vocab)
    if not studies:
        raise EmptyManifest(f"{manifest_path}: no usable studies")
    main, pa_only = build_main(studies)
    if len(main) == 0:
        raise EmptyManifest(f"{manifest_path}: no patient has a paired PA and lateral study")
    vocab = filter_labels(main, vocab)
    manifest = build_extended(main, pa_only) if extended else main

    cache_dir = out / "cache"
    cache_dir.mkdir(parents=True, exist_ok=True)
    records = []
    for s in manifest.studies:
        meta = write_study_cache(cache_dir, s.study_id, _preprocess_study(s, side))
        records.append({"patient_id": s.patient_id, "study_id": s.study_id,
                        "labels": sorted(s.labels), "views": meta["views"]})
    histogram = {l: sum(l in r["labels"] for r in records) for l in vocab.retained}
    summary = {
        "mode": manifest.mode,
        "side": side,
        "n_patients": len(manifest),
        "n_paired": len(main),
        "n_pa_only": len(manifest) - len(main),
        "n_labels": len(vocab.retained),
        "label_histogram": histogram,
        "vocab_hash": vocab.hash,
    }
    _atomic_write(out / "vocab.json", json.dumps(vocab.to_dict(), indent=1).encode())
    _atomic_write(out / "studies.json", json.dumps(
        {"mode": manifest.mode, "side": side, "studies": records}, indent=1).encode())
    _atomic_write(out / "summary.json", json.dumps(summary, indent=1).encode())
    log.info("prepared %d studies (%d paired) with %d labels",
             summary["n_patients"], summary["n_paired"], summary["n_labels"])
    return summary


def load_vocab(prepared_dir) -> LabelVocabulary:
    return LabelVocabulary.from_dict(json.loads((Path(prepared_dir) / "vocab.json").read_text()))


def load_prepared(prepared_dir) -> PreparedData:
    prepared_dir = Path(prepared_dir)
    vocab = load_vocab(prepared_dir)
    index = json.loads((prepared_dir / "studies.json").read_text())
    side = index["side"]
    recs = sorted(index["studies"], key=lambda r: r["patient_id"])
    n = len(recs)
    images = np.zeros((n, 2, side, side), dtype=np.float32)
    present = np.zeros((n, 2), dtype=bool)
    targets = np.zeros((n, len(vocab.retained)), dtype=np.float32)
    for i, r in enumerate(recs):
        views = read_study_cache(prepared_dir / "cache", r["study_id"])
        for j, v in enumerate(VIEWS):
            if v in views:
                images[i, j] = views[v]
                present[i, j] = True
        study = Study(r["patient_id"], r["study_id"], 0, None, None, frozenset(r["labels"]))
        targets[i] = encode_targets(study, vocab)
    return PreparedData(vocab.retained, [r["patient_id"] for r in recs],
                        [r["study_id"] for r in recs], images, present, targets,
                        vocab.hash, index["mode"])


def manifest_from_prepared(data: PreparedData) -> DatasetManifest:
    """Rebuild a lightweight manifest (no image refs) for split construction."""
    studies = tuple(
        Study(p, s, 0, "cache", "cache" if data.present[i, 1] else None)
        for i, (p, s) in enumerate(zip(data.patient_ids, data.study_ids))
    )
    mode = "main" if data.present[:, 1].all() else "extended"
    return DatasetManifest(studies, mode)
