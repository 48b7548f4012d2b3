"""Per-class code-space centroids and distance-vector image encoding.

Every image is encoded against each subtype dictionary and represented by its
Euclidean distances to all class centroids, concatenated in the contractual
global order: 10 color classes, then 7 shape classes, then the texture
classes in lexicographic order (47 for the full texture corpus, giving a
64-entry vector).
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .sparse_dict import CodingParams, Dictionary, stagewise_encode_batch
from .synthgen import COLOR_CLASSES, SHAPE_CLASSES, load_image, resize_image

SUBTYPE_ORDER = ("color", "shape", "texture")
_FIXED_ROSTERS = {"color": COLOR_CLASSES, "shape": SHAPE_CLASSES}


@dataclass
class CentroidSet:
    """Ordered per-subtype class centroids in sparse-code space."""

    labels: dict = field(default_factory=dict)     # subtype -> ordered class labels
    centroids: dict = field(default_factory=dict)  # subtype -> (n_classes, code_dim)

    def __post_init__(self):
        unknown = set(self.labels) - set(SUBTYPE_ORDER)
        if unknown:
            raise ValueError(f"unknown subtypes {sorted(unknown)}")
        if set(self.labels) != set(self.centroids):
            raise ValueError("labels and centroids cover different subtypes")
        for st, labels in self.labels.items():
            mat = np.asarray(self.centroids[st], dtype=np.float64)
            if mat.ndim != 2 or mat.shape[0] != len(labels):
                raise ValueError(f"{st}: centroid matrix shape {mat.shape} does not "
                                 f"match {len(labels)} classes")
            if not np.all(np.isfinite(mat)):
                raise ValueError(f"{st}: non-finite centroid values")
            self.centroids[st] = mat

    @property
    def subtypes(self) -> tuple:
        return tuple(st for st in SUBTYPE_ORDER if st in self.labels)

    @property
    def size(self) -> int:
        return sum(len(self.labels[st]) for st in self.subtypes)

    def global_labels(self) -> list:
        """(subtype, class) pairs in vector-entry order."""
        out = []
        for st in self.subtypes:
            out.extend((st, lbl) for lbl in self.labels[st])
        return out

    def subtype_slices(self) -> dict:
        """Vector index range occupied by each subtype block."""
        slices, start = {}, 0
        for st in self.subtypes:
            stop = start + len(self.labels[st])
            slices[st] = slice(start, stop)
            start = stop
        return slices


def compute_centroids(codes_by_subtype) -> CentroidSet:
    """Arithmetic mean of each class's codes, validated against the rosters.

    Color and shape must cover their full fixed class lists; texture classes
    are taken as given, ordered lexicographically.  A class with no codes is
    an error naming the class.
    """
    labels, centroids = {}, {}
    for subtype in SUBTYPE_ORDER:
        if subtype not in codes_by_subtype:
            continue
        class_codes = codes_by_subtype[subtype]
        if subtype in _FIXED_ROSTERS:
            roster = list(_FIXED_ROSTERS[subtype])
            extra = set(class_codes) - set(roster)
            if extra:
                raise ValueError(f"unknown {subtype} classes {sorted(extra)}")
        else:
            roster = sorted(class_codes)
            if not roster:
                raise ValueError("texture subtype has no classes")
        dim = None
        rows = []
        for lbl in roster:
            codes = np.asarray(class_codes.get(lbl, []), dtype=np.float64)
            if codes.size == 0:
                raise ValueError(f"incomplete centroids: {subtype} class {lbl!r} has no codes")
            if codes.ndim == 1:
                codes = codes[None, :]
            if dim is None:
                dim = codes.shape[1]
            elif codes.shape[1] != dim:
                raise ValueError(f"{subtype} class {lbl!r}: code dimension "
                                 f"{codes.shape[1]} != {dim}")
            rows.append(codes.mean(axis=0))
        labels[subtype] = roster
        centroids[subtype] = np.vstack(rows)
    unknown = set(codes_by_subtype) - set(SUBTYPE_ORDER)
    if unknown:
        raise ValueError(f"unknown subtypes {sorted(unknown)}")
    if not labels:
        raise ValueError("no subtypes given")
    return CentroidSet(labels=labels, centroids=centroids)


def encode_cost(img: np.ndarray, dicts, cents: CentroidSet,
                params: CodingParams | None = None) -> np.ndarray:
    """Distance vector of one image: resize, sparse-code, distance per centroid."""
    if set(dicts) != set(cents.labels):
        raise ValueError(f"dictionary subtypes {sorted(dicts)} do not match "
                         f"centroid subtypes {sorted(cents.labels)}")
    blocks = []
    for subtype in cents.subtypes:
        dictionary = dicts[subtype]
        if dictionary.signal_shape is None:
            raise ValueError(f"{subtype} dictionary has no signal shape; cannot resize input")
        h, w, _ = dictionary.signal_shape
        if cents.centroids[subtype].shape[1] != dictionary.atom_count:
            raise ValueError(f"{subtype}: centroid dimension "
                             f"{cents.centroids[subtype].shape[1]} != atom count "
                             f"{dictionary.atom_count}")
        signal = resize_image(img, w, h).astype(np.float64).ravel() / 255.0
        code = stagewise_encode_batch(dictionary, signal[None, :], params)[0]
        blocks.append(np.linalg.norm(cents.centroids[subtype] - code[None, :], axis=1))
    return np.concatenate(blocks)


@dataclass
class FeatureRecord:
    path: str
    label: str
    vector: np.ndarray


def encode_batch(entries, dicts, cents: CentroidSet,
                 params: CodingParams | None = None) -> tuple:
    """Order-preserving batch encode; unreadable images become failure entries.

    entries is an iterable of (path, label) pairs or manifest entries with
    .path/.label attributes.  Returns (records, failures) where failures are
    (path, reason) pairs for images that could not be read.
    """
    records, failures = [], []
    for entry in entries:
        path, label = (entry.path, entry.label) if hasattr(entry, "path") else entry
        try:
            img = load_image(path)
        except Exception as exc:
            failures.append((path, str(exc)))
            continue
        records.append(FeatureRecord(path=path, label=label,
                                     vector=encode_cost(img, dicts, cents, params)))
    return records, failures


def nearest_centroid_label(cents: CentroidSet, subtype: str, vector: np.ndarray) -> str:
    """Class of the smallest distance entry within one subtype's block."""
    if subtype not in cents.labels:
        raise ValueError(f"no {subtype!r} block in centroid set")
    block = np.asarray(vector, dtype=np.float64)[cents.subtype_slices()[subtype]]
    return cents.labels[subtype][int(np.argmin(block))]


# ---------------------------------------------------------------------------
# Persistence


def save_centroids(cents: CentroidSet, path) -> None:
    doc = {
        "order": list(cents.subtypes),
        "blocks": {
            st: {"labels": list(cents.labels[st]),
                 "centroids": cents.centroids[st].tolist()}
            for st in cents.subtypes
        },
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)


def load_centroids(path) -> CentroidSet:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    labels = {st: list(block["labels"]) for st, block in doc["blocks"].items()}
    centroids = {st: np.asarray(block["centroids"], dtype=np.float64)
                 for st, block in doc["blocks"].items()}
    return CentroidSet(labels=labels, centroids=centroids)


def save_features(records, path) -> None:
    """CSV rows path,label,d0..d{n-1}; all vectors must share one length."""
    records = list(records)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n_dims = len(records[0].vector) if records else 0
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["path", "label"] + [f"d{i}" for i in range(n_dims)])
        for rec in records:
            if len(rec.vector) != n_dims:
                raise ValueError(f"{rec.path}: vector length {len(rec.vector)} != {n_dims}")
            writer.writerow([rec.path, rec.label] + [repr(float(v)) for v in rec.vector])


def load_features(path) -> list:
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[:2] != ["path", "label"]:
            raise ValueError(f"{path}: expected header path,label,d0,..., got {header}")
        n_dims = len(header) - 2
        for row in reader:
            if len(row) != n_dims + 2:
                raise ValueError(f"{path}: row for {row[:1]} has {len(row) - 2} values, "
                                 f"expected {n_dims}")
            vec = np.array([float(v) for v in row[2:]], dtype=np.float64)
            out.append(FeatureRecord(path=row[0], label=row[1], vector=vec))
    return out
