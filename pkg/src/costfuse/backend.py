"""Task-specific classifier backend behind a softmax-output contract.

The reference classifier is a deliberately small pixel-space network: images
are downsampled, flattened, and fed to the shared MLP machinery.  It exists
for interface conformance and fusion demonstrations, not accuracy.  Scores
computed by heavier external models can be supplied instead through a
precomputed score table with the same activation contract.

Pair mode consumes the element-wise absolute difference of the two
downsampled images, so scoring is symmetric in the pair order by
construction.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import mlp
from .seeding import derive_seed
from .synthgen import load_image, resize_image

IDENTITY_MODE = "identity"
PAIR_MODE = "pair"
PAIR_CLASSES = ["same", "different"]


@dataclass(frozen=True)
class BackendTrainConfig:
    mode: str = IDENTITY_MODE
    downsample: int = 16
    hidden: tuple = (64, 32)
    epochs: int = 2000
    learning_rate: float = 0.05
    seed: int = 0
    max_genuine_per_class: int = 60   # pair-mode sampling caps
    imposter_ratio: float = 1.0

    def __post_init__(self):
        if self.mode not in (IDENTITY_MODE, PAIR_MODE):
            raise ValueError(f"mode must be {IDENTITY_MODE!r} or {PAIR_MODE!r}")
        if self.downsample < 1:
            raise ValueError("downsample must be >= 1")


@dataclass
class BackendModel:
    mode: str
    model: mlp.MlpModel
    downsample: int

    @property
    def classes(self) -> list:
        return self.model.classes


def _pixel_vector(img: np.ndarray, edge: int) -> np.ndarray:
    return resize_image(img, edge, edge).astype(np.float64).ravel() / 255.0


def _entry_pairs(entries):
    for entry in entries:
        yield (entry.path, entry.label) if hasattr(entry, "path") else tuple(entry)


def reference_classifier_train(entries, cfg: BackendTrainConfig) -> tuple:
    """Train the reference pixel classifier; returns (BackendModel, loss history).

    entries are (path, label) pairs or manifest entries.  Identity mode fits
    an n-class softmax over the labels; pair mode builds genuine/imposter
    image pairs from the labels and fits a two-node same/different softmax.
    """
    items = list(_entry_pairs(entries))
    if not items:
        raise ValueError("no training entries")
    edge = cfg.downsample
    dim = edge * edge * 3
    images = {path: _pixel_vector(load_image(path), edge) for path, _ in items}
    by_label = {}
    for path, label in items:
        by_label.setdefault(label, []).append(path)
    classes = sorted(by_label)

    if cfg.mode == IDENTITY_MODE:
        X = np.array([images[p] for p, _ in items])
        y = np.array([classes.index(lbl) for _, lbl in items])
        net = mlp.init_mlp([dim, *cfg.hidden, len(classes)], seed=cfg.seed, classes=classes)
    else:
        if len(classes) < 2:
            raise ValueError("pair mode needs at least two classes to form imposter pairs")
        rng = np.random.default_rng(derive_seed(cfg.seed, "backend-pairs"))
        genuine = []
        for lbl in classes:
            paths = by_label[lbl]
            combos = [(paths[i], paths[j])
                      for i in range(len(paths)) for j in range(i + 1, len(paths))]
            if len(combos) > cfg.max_genuine_per_class:
                picked = rng.choice(len(combos), size=cfg.max_genuine_per_class, replace=False)
                combos = [combos[i] for i in sorted(picked)]
            genuine.extend(combos)
        if not genuine:
            raise ValueError("pair mode needs at least one class with two images")
        n_imposter = max(1, int(round(len(genuine) * cfg.imposter_ratio)))
        imposter = []
        seen = set()
        while len(imposter) < n_imposter:
            la, lb = rng.choice(len(classes), size=2, replace=False)
            pa = by_label[classes[la]][int(rng.integers(len(by_label[classes[la]])))]
            pb = by_label[classes[lb]][int(rng.integers(len(by_label[classes[lb]])))]
            key = (pa, pb) if pa <= pb else (pb, pa)
            if key in seen:
                continue
            seen.add(key)
            imposter.append((pa, pb))
        feats, ys = [], []
        for pa, pb in genuine:
            feats.append(np.abs(images[pa] - images[pb]))
            ys.append(0)
        for pa, pb in imposter:
            feats.append(np.abs(images[pa] - images[pb]))
            ys.append(1)
        X, y = np.array(feats), np.array(ys)
        net = mlp.init_mlp([dim, *cfg.hidden, 2], seed=cfg.seed, classes=list(PAIR_CLASSES))

    trained, history = mlp.train(
        net, X, y, mlp.TrainConfig(epochs=cfg.epochs, learning_rate=cfg.learning_rate,
                                   seed=cfg.seed))
    return BackendModel(mode=cfg.mode, model=trained, downsample=cfg.downsample), history


def image_activations(backend: BackendModel, img: np.ndarray) -> np.ndarray:
    if backend.mode != IDENTITY_MODE:
        raise ValueError("single-image scoring requires an identity-mode backend")
    return mlp.forward(backend.model, _pixel_vector(img, backend.downsample))


def pair_activations(backend: BackendModel, img_a: np.ndarray, img_b: np.ndarray) -> np.ndarray:
    if backend.mode != PAIR_MODE:
        raise ValueError("pair scoring requires a pair-mode backend")
    va = _pixel_vector(img_a, backend.downsample)
    vb = _pixel_vector(img_b, backend.downsample)
    return mlp.forward(backend.model, np.abs(va - vb))


def backend_score(backend: BackendModel, inputs) -> np.ndarray:
    """Softmax activations for an image (identity mode) or image pair (pair mode)."""
    if backend.mode == PAIR_MODE:
        if not (isinstance(inputs, tuple) and len(inputs) == 2):
            raise ValueError("pair-mode backend expects a (image, image) tuple")
        return pair_activations(backend, inputs[0], inputs[1])
    if isinstance(inputs, tuple):
        raise ValueError("identity-mode backend expects a single image")
    return image_activations(backend, inputs)


def save_backend(backend: BackendModel, path) -> None:
    doc = {
        "mode": backend.mode,
        "downsample": backend.downsample,
        "classes": backend.model.classes,
        "layer_sizes": backend.model.layer_sizes,
        "weights": [w.tolist() for w in backend.model.weights],
        "biases": [b.tolist() for b in backend.model.biases],
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)


def load_backend(path) -> BackendModel:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    model = mlp.MlpModel(weights=[np.asarray(w, dtype=np.float64) for w in doc["weights"]],
                         biases=[np.asarray(b, dtype=np.float64) for b in doc["biases"]],
                         classes=doc.get("classes"))
    return BackendModel(mode=doc["mode"], model=model, downsample=doc["downsample"])


# ---------------------------------------------------------------------------
# Precomputed score tables (externally computed deep-model outputs)


@dataclass
class PrecomputedScoreTable:
    """Lookup of activation vectors keyed by image path or ordered path pair.

    Pair lookups fall back to the reversed key, so symmetric exporters only
    need one row per pair.
    """

    mode: str
    entries: dict

    def activation(self, path: str) -> np.ndarray:
        if self.mode != IDENTITY_MODE:
            raise ValueError("per-image lookup requires an identity-mode table")
        if path not in self.entries:
            raise KeyError(f"no precomputed score for {path!r}")
        return self.entries[path]

    def pair_value(self, path_a: str, path_b: str) -> np.ndarray:
        if self.mode != PAIR_MODE:
            raise ValueError("pair lookup requires a pair-mode table")
        if (path_a, path_b) in self.entries:
            return self.entries[(path_a, path_b)]
        if (path_b, path_a) in self.entries:
            return self.entries[(path_b, path_a)]
        raise KeyError(f"no precomputed score for pair ({path_a!r}, {path_b!r})")


def save_precomputed(table: PrecomputedScoreTable, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        if table.mode == IDENTITY_MODE:
            width = max((len(v) for v in table.entries.values()), default=1)
            writer.writerow(["path"] + [f"v{i}" for i in range(width)])
            for key, vec in table.entries.items():
                writer.writerow([key] + [repr(float(v)) for v in vec])
        else:
            width = max((len(v) for v in table.entries.values()), default=1)
            writer.writerow(["path1", "path2"] + [f"v{i}" for i in range(width)])
            for (pa, pb), vec in table.entries.items():
                writer.writerow([pa, pb] + [repr(float(v)) for v in vec])


def load_precomputed(path) -> PrecomputedScoreTable:
    """Parse a score CSV; the header names declare the table mode."""
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ValueError(f"{path}: empty file, expected a header row")
        if header[0] == "path1" and len(header) >= 3 and header[1] == "path2":
            mode, key_width = PAIR_MODE, 2
        elif header[0] == "path" and len(header) >= 2:
            mode, key_width = IDENTITY_MODE, 1
        else:
            raise ValueError(f"{path}: line 1: header must start with "
                             f"'path' or 'path1,path2', got {header}")
        entries = {}
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise ValueError(f"{path}: line {lineno}: expected {len(header)} fields, "
                                 f"got {len(row)}")
            key = row[0] if key_width == 1 else (row[0], row[1])
            if key in entries:
                raise ValueError(f"{path}: line {lineno}: duplicate key {key!r}")
            try:
                vec = np.array([float(v) for v in row[key_width:]], dtype=np.float64)
            except ValueError as exc:
                raise ValueError(f"{path}: line {lineno}: {exc}") from None
            entries[key] = vec
    return PrecomputedScoreTable(mode=mode, entries=entries)
