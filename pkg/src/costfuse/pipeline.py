"""Configuration-driven pipeline stages with artifact and manifest tracking.

A run is described by one TOML config (see presets/).  Stages execute in a
fixed topological order, each consuming upstream artifacts from the run's
output directory and writing its own.  All randomness derives from the
config's master seed, so rerunning a stage with an identical config
reproduces byte-identical artifacts.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import __version__, backend, cost_space, fusion_eval, mlp, sparse_dict, synthgen
from .seeding import derive_seed

STAGE_ORDER = (
    "gen", "learn-dict", "centroids", "encode", "train-cost",
    "train-backend", "score", "fuse", "eval-verify", "eval-identify",
)


class ConfigError(ValueError):
    """Invalid or unknown configuration content (CLI exit code 1)."""


class DependencyError(RuntimeError):
    """A required upstream artifact is missing (CLI exit code 2)."""


# ---------------------------------------------------------------------------
# Configuration sections


@dataclass
class RunSection:
    master_seed: int = 20260810
    out_dir: str = "runs/desk"


@dataclass
class StagesSection:
    enabled: list = field(default_factory=lambda: list(STAGE_ORDER))


@dataclass
class GenSection:
    image_size: int = 32
    color_per_class: int = 60
    shape_per_class: int = 40
    texture_classes: int = 5
    texture_per_class: int = 20
    texture_root: str = ""      # external corpus; empty selects the stand-in generator
    paper_red: bool = False


@dataclass
class DictSection:
    signal_size: int = 16
    atoms: int = 32
    sparsity: float = 0.1
    step: float = 0.05
    max_iters: int = 3000       # 0 means 10 * atoms
    epochs: int = 15


@dataclass
class TaskSection:
    subtypes: list = field(default_factory=lambda: ["color"])
    train_per_class: int = 25
    eval_per_class: int = 15
    gallery_per_class: int = 3


@dataclass
class FeaturesSection:
    normalize: str = "none"   # "zscore" fits mean/std on the training split


@dataclass
class CostClassifierSection:
    hidden1: int = 48
    hidden2: int = 24
    epochs: int = 1500
    learning_rate: float = 0.05


@dataclass
class BackendSection:
    mode: str = "identity"
    downsample: int = 8
    hidden1: int = 32
    hidden2: int = 16
    epochs: int = 400
    learning_rate: float = 0.05
    precomputed: str = ""


@dataclass
class FusionSection:
    alpha: float = 0.3
    alpha_search: bool = True
    alpha_grid: list = field(default_factory=lambda: [round(0.1 * i, 1) for i in range(11)])
    normalize: str = "minmax"
    distance: str = "euclidean"
    far_levels: list = field(default_factory=lambda: [0.01, 0.001])
    genuine_pairs_per_class: int = 30
    imposter_ratio: float = 2.0


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    stages: StagesSection = field(default_factory=StagesSection)
    gen: GenSection = field(default_factory=GenSection)
    dict: DictSection = field(default_factory=DictSection)
    task: TaskSection = field(default_factory=TaskSection)
    features: FeaturesSection = field(default_factory=FeaturesSection)
    cost_classifier: CostClassifierSection = field(default_factory=CostClassifierSection)
    backend: BackendSection = field(default_factory=BackendSection)
    fusion: FusionSection = field(default_factory=FusionSection)


_SECTIONS = {
    "run": RunSection, "stages": StagesSection, "gen": GenSection, "dict": DictSection,
    "task": TaskSection, "features": FeaturesSection,
    "cost_classifier": CostClassifierSection,
    "backend": BackendSection, "fusion": FusionSection,
}


def _check_type(section: str, key: str, value, default):
    path = f"{section}.{key}"
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected bool, got {type(value).__name__}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected int, got {type(value).__name__}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected float, got {type(value).__name__}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected string, got {type(value).__name__}")
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected list, got {type(value).__name__}")
        return list(value)
    raise ConfigError(f"{path}: unsupported value type")


def parse_config(source) -> RunConfig:
    """Parse TOML text or a file path into a validated RunConfig.

    Unknown sections or keys are rejected with the offending field path.
    """
    if isinstance(source, (str, Path)) and "\n" not in str(source) and Path(source).exists():
        text = Path(source).read_text(encoding="utf-8")
    else:
        text = str(source)
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config is not valid TOML: {exc}") from None

    cfg = RunConfig()
    for section, content in doc.items():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown section [{section}]")
        if not isinstance(content, dict):
            raise ConfigError(f"[{section}] must be a table")
        target = getattr(cfg, section)
        defaults = {f.name: getattr(target, f.name) for f in dataclasses.fields(target)}
        for key, value in content.items():
            if key not in defaults:
                raise ConfigError(f"unknown key {section}.{key}")
            setattr(target, key, _check_type(section, key, value, defaults[key]))
    _validate_semantics(cfg)
    return cfg


def _validate_semantics(cfg: RunConfig) -> None:
    for stage in cfg.stages.enabled:
        if stage not in STAGE_ORDER:
            raise ConfigError(f"stages.enabled: unknown stage {stage!r}")
    for key in ("image_size", "color_per_class", "shape_per_class",
                "texture_classes", "texture_per_class"):
        if getattr(cfg.gen, key) < 1:
            raise ConfigError(f"gen.{key}: must be >= 1")
    if cfg.dict.signal_size < 1 or cfg.dict.atoms < 1 or cfg.dict.epochs < 1:
        raise ConfigError("dict.signal_size, dict.atoms, dict.epochs must be >= 1")
    if cfg.dict.sparsity < 0 or cfg.dict.step <= 0 or cfg.dict.max_iters < 0:
        raise ConfigError("dict.sparsity >= 0, dict.step > 0, dict.max_iters >= 0 required")
    for st in cfg.task.subtypes:
        if st not in ("color", "shape"):
            raise ConfigError(f"task.subtypes: {st!r} is not a generated subtype")
    if not cfg.task.subtypes:
        raise ConfigError("task.subtypes: need at least one subtype")
    if cfg.task.train_per_class < 1 or cfg.task.eval_per_class < 2:
        raise ConfigError("task.train_per_class >= 1 and task.eval_per_class >= 2 required")
    if not 1 <= cfg.task.gallery_per_class < cfg.task.eval_per_class:
        raise ConfigError("task.gallery_per_class must be in [1, eval_per_class)")
    if cfg.features.normalize not in ("none", "zscore"):
        raise ConfigError(f"features.normalize: unknown method {cfg.features.normalize!r}")
    if cfg.backend.mode not in (backend.IDENTITY_MODE, backend.PAIR_MODE):
        raise ConfigError(f"backend.mode: unknown mode {cfg.backend.mode!r}")
    if cfg.fusion.normalize not in ("minmax", "none"):
        raise ConfigError(f"fusion.normalize: unknown method {cfg.fusion.normalize!r}")
    if cfg.fusion.distance not in ("euclidean", "cosine"):
        raise ConfigError(f"fusion.distance: unknown metric {cfg.fusion.distance!r}")
    if not 0.0 <= cfg.fusion.alpha <= 1.0:
        raise ConfigError("fusion.alpha must be in [0, 1]")
    if not cfg.fusion.alpha_grid or any(not 0.0 <= a <= 1.0 for a in cfg.fusion.alpha_grid):
        raise ConfigError("fusion.alpha_grid must be non-empty with values in [0, 1]")
    if not cfg.fusion.far_levels or any(not 0.0 < f < 1.0 for f in cfg.fusion.far_levels):
        raise ConfigError("fusion.far_levels must be non-empty with values in (0, 1)")


def _toml_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        text = repr(value)
        return text if any(c in text for c in ".eE") else text + ".0"
    if isinstance(value, str):
        return json.dumps(value)
    if isinstance(value, list):
        return "[" + ", ".join(_toml_value(v) for v in value) + "]"
    raise ConfigError(f"cannot serialize value {value!r}")


def serialize_config(cfg: RunConfig) -> str:
    lines = []
    for section, cls in _SECTIONS.items():
        lines.append(f"[{section}]")
        target = getattr(cfg, section)
        for f in dataclasses.fields(cls):
            lines.append(f"{f.name} = {_toml_value(getattr(target, f.name))}")
        lines.append("")
    return "\n".join(lines)


def config_hash(cfg: RunConfig) -> str:
    return hashlib.sha256(serialize_config(cfg).encode("utf-8")).hexdigest()


# ---------------------------------------------------------------------------
# Artifact layout


def artifact_paths(out_dir) -> dict:
    out = Path(out_dir)
    paths = {
        "color_manifest": out / "data" / "color_manifest.csv",
        "shape_manifest": out / "data" / "shape_manifest.csv",
        "texture_manifest": out / "data" / "texture_manifest.csv",
        "task_train_manifest": out / "data" / "task_train_manifest.csv",
        "task_eval_manifest": out / "data" / "task_eval_manifest.csv",
        "centroids": out / "models" / "centroids.json",
        "train_features": out / "features" / "task_train.csv",
        "eval_features": out / "features" / "task_eval.csv",
        "cost_mlp": out / "models" / "cost_classifier.json",
        "cost_loss": out / "reports" / "cost_classifier_loss.json",
        "feature_scaler": out / "models" / "feature_scaler.json",
        "backend_model": out / "models" / "backend.json",
        "backend_loss": out / "reports" / "backend_loss.json",
        "pairs": out / "eval" / "pairs.csv",
        "scores": out / "eval" / "scores.csv",
        "scores_fused": out / "eval" / "scores_fused.csv",
        "alpha": out / "eval" / "alpha.json",
        "verify_summary": out / "eval" / "verify_summary.json",
        "identify_summary": out / "eval" / "identify_summary.json",
    }
    for st in cost_space.SUBTYPE_ORDER:
        paths[f"dict_{st}"] = out / "models" / f"dict_{st}.json"
        paths[f"dict_report_{st}"] = out / "reports" / f"dict_{st}_report.json"
    for ch in ("cost", "supervised", "fused"):
        paths[f"roc_{ch}"] = out / "eval" / f"roc_{ch}.csv"
        paths[f"cmc_{ch}"] = out / "eval" / f"cmc_{ch}.csv"
    return paths


def _dependencies(cfg: RunConfig) -> dict:
    """stage -> list of (artifact key, producing stage), transitively expanded."""
    deps = {
        "gen": [],
        "learn-dict": [(f"{st}_manifest", "gen") for st in cost_space.SUBTYPE_ORDER],
        "centroids": [(f"{st}_manifest", "gen") for st in cost_space.SUBTYPE_ORDER]
                     + [(f"dict_{st}", "learn-dict") for st in cost_space.SUBTYPE_ORDER],
        "encode": [("task_train_manifest", "gen"), ("task_eval_manifest", "gen"),
                   ("centroids", "centroids")]
                  + [(f"dict_{st}", "learn-dict") for st in cost_space.SUBTYPE_ORDER],
        "train-cost": [("train_features", "encode")],
        "train-backend": [("task_train_manifest", "gen")],
        "score": [("task_eval_manifest", "gen"), ("eval_features", "encode"),
                  ("cost_mlp", "train-cost")],
        "fuse": [("scores", "score")],
        "eval-verify": [("scores", "score"), ("scores_fused", "fuse")],
        "eval-identify": [("task_eval_manifest", "gen"), ("eval_features", "encode"),
                          ("cost_mlp", "train-cost"), ("scores", "score"),
                          ("alpha", "fuse")],
    }
    if not cfg.backend.precomputed:
        deps["score"].append(("backend_model", "train-backend"))
        deps["eval-identify"].append(("backend_model", "train-backend"))
    if cfg.features.normalize == "zscore":
        deps["score"].append(("feature_scaler", "train-cost"))
        deps["eval-identify"].append(("feature_scaler", "train-cost"))
    return deps


def check_dependencies(cfg: RunConfig, stage: str, out_dir) -> None:
    paths = artifact_paths(out_dir)
    for key, producer in _dependencies(cfg)[stage]:
        if not paths[key].exists():
            raise DependencyError(
                f"stage {stage!r} requires artifact {str(paths[key])!r} "
                f"produced by stage {producer!r}; run that stage first")
    if cfg.backend.precomputed and stage in ("score", "eval-identify"):
        if not Path(cfg.backend.precomputed).exists():
            raise DependencyError(
                f"stage {stage!r} requires the precomputed score file "
                f"{cfg.backend.precomputed!r} (backend.precomputed)")


# ---------------------------------------------------------------------------
# Stage helpers


def _load_signals(entries, signal_size: int) -> np.ndarray:
    rows = []
    for e in entries:
        img = synthgen.load_image(e.path)
        rows.append(synthgen.resize_image(img, signal_size, signal_size)
                    .astype(np.float64).ravel() / 255.0)
    return np.array(rows)


def _coding_params(cfg: RunConfig) -> sparse_dict.CodingParams:
    return sparse_dict.CodingParams(
        sparsity=cfg.dict.sparsity, step=cfg.dict.step,
        max_iters=cfg.dict.max_iters if cfg.dict.max_iters > 0 else None)


def _load_dicts(paths) -> dict:
    return {st: sparse_dict.load_dictionary(paths[f"dict_{st}"])
            for st in cost_space.SUBTYPE_ORDER}


def _encode_entries_batched(entries, dicts, cents) -> list:
    """Batched equivalent of cost_space.encode_batch for readable images."""
    images = []
    kept = []
    failures = []
    for e in entries:
        try:
            images.append(synthgen.load_image(e.path))
        except Exception as exc:
            failures.append((e.path, str(exc)))
            continue
        kept.append(e)
    if not kept:
        return [], failures
    blocks = []
    for subtype in cents.subtypes:
        d = dicts[subtype]
        h, w, _ = d.signal_shape
        X = np.array([synthgen.resize_image(img, w, h).astype(np.float64).ravel() / 255.0
                      for img in images])
        H = sparse_dict.stagewise_encode_batch(d, X)
        cent = cents.centroids[subtype]
        diff = H[:, None, :] - cent[None, :, :]
        blocks.append(np.sqrt(np.einsum("ijk,ijk->ij", diff, diff)))
    vectors = np.concatenate(blocks, axis=1)
    records = [cost_space.FeatureRecord(path=e.path, label=e.label, vector=vectors[i])
               for i, e in enumerate(kept)]
    return records, failures


def _make_pairs(entries, seed: int, genuine_per_class: int, imposter_ratio: float) -> list:
    """Fold splitter: seeded genuine/imposter pair list from labeled entries."""
    rng = np.random.default_rng(seed)
    by_label = {}
    for e in entries:
        by_label.setdefault(e.label, []).append(e.path)
    labels = sorted(by_label)
    if len(labels) < 2:
        raise ValueError("pair construction needs at least two identities")
    genuine = []
    for lbl in labels:
        paths = by_label[lbl]
        combos = [(paths[i], paths[j])
                  for i in range(len(paths)) for j in range(i + 1, len(paths))]
        if len(combos) > genuine_per_class:
            picked = rng.choice(len(combos), size=genuine_per_class, replace=False)
            combos = [combos[i] for i in sorted(picked)]
        genuine.extend(combos)
    n_imposter = max(1, int(round(len(genuine) * imposter_ratio)))
    imposter, seen = [], set()
    attempts = 0
    while len(imposter) < n_imposter and attempts < 50 * n_imposter:
        attempts += 1
        la, lb = rng.choice(len(labels), size=2, replace=False)
        pa = by_label[labels[la]][int(rng.integers(len(by_label[labels[la]])))]
        pb = by_label[labels[lb]][int(rng.integers(len(by_label[labels[lb]])))]
        key = (pa, pb) if pa <= pb else (pb, pa)
        if key in seen:
            continue
        seen.add(key)
        imposter.append((pa, pb))
    pairs = [(pa, pb, fusion_eval.GENUINE) for pa, pb in genuine]
    pairs += [(pa, pb, fusion_eval.IMPOSTER) for pa, pb in imposter]
    return pairs


class _SupervisedScorer:
    """Uniform pairwise-distance interface over live backends and score tables."""

    def __init__(self, cfg: RunConfig, paths):
        self.distance = cfg.fusion.distance
        self.table = None
        self.backend = None
        if cfg.backend.precomputed:
            self.table = backend.load_precomputed(cfg.backend.precomputed)
            self.mode = self.table.mode
        else:
            self.backend = backend.load_backend(paths["backend_model"])
            self.mode = self.backend.mode
        self._image_acts = {}

    def _activation(self, path: str) -> np.ndarray:
        if path not in self._image_acts:
            if self.table is not None:
                self._image_acts[path] = self.table.activation(path)
            else:
                self._image_acts[path] = backend.image_activations(
                    self.backend, synthgen.load_image(path))
        return self._image_acts[path]

    def pair_distance(self, path_a: str, path_b: str) -> float:
        if self.mode == backend.IDENTITY_MODE:
            return fusion_eval.softmax_distance(
                self._activation(path_a), self._activation(path_b), self.distance)
        if self.table is not None:
            value = self.table.pair_value(path_a, path_b)
            return float(value[1]) if value.size >= 2 else float(value[0])
        acts = backend.pair_activations(
            self.backend, synthgen.load_image(path_a), synthgen.load_image(path_b))
        return float(acts[1])  # probability the pair is of different identities


# ---------------------------------------------------------------------------
# Stage implementations (each returns artifact keys plus optional notes)


def _stage_gen(cfg: RunConfig, out_dir) -> tuple:
    data_dir = Path(out_dir) / "data"
    ms = cfg.run.master_seed
    synthgen.gen_dataset("color", cfg.gen.color_per_class, derive_seed(ms, "gen", "color"),
                         cfg.gen.image_size, data_dir, paper_red=cfg.gen.paper_red)
    synthgen.gen_dataset("shape", cfg.gen.shape_per_class, derive_seed(ms, "gen", "shape"),
                         cfg.gen.image_size, data_dir)
    notes = {}
    if cfg.gen.texture_root:
        _, skipped = synthgen.ingest_texture_dir(cfg.gen.texture_root, cfg.gen.image_size,
                                                 data_dir)
        notes["texture_skipped"] = len(skipped)
    else:
        synthgen.gen_texture_standin(cfg.gen.texture_classes, cfg.gen.texture_per_class,
                                     derive_seed(ms, "gen", "texture"),
                                     cfg.gen.image_size, data_dir)

    # Task identities are the class labels of the selected generated subtypes.
    train_m = synthgen.DatasetManifest(seed=ms, image_size=cfg.gen.image_size)
    eval_m = synthgen.DatasetManifest(seed=ms, image_size=cfg.gen.image_size)
    n_total = cfg.task.train_per_class + cfg.task.eval_per_class
    for subtype in cfg.task.subtypes:
        for label in synthgen.class_roster(subtype):
            class_dir = data_dir / "task" / subtype / label
            class_dir.mkdir(parents=True, exist_ok=True)
            for i in range(n_total):
                img_seed = derive_seed(ms, "task", subtype, label, i)
                if subtype == "color":
                    img = synthgen.gen_color_image(label, img_seed, cfg.gen.image_size,
                                                   paper_red=cfg.gen.paper_red)
                else:
                    img = synthgen.gen_shape_image(label, img_seed, cfg.gen.image_size)
                path = class_dir / f"{label}_{i:05d}.png"
                synthgen.save_png(img, path)
                entry = synthgen.ManifestEntry(str(path), subtype, label)
                (train_m if i < cfg.task.train_per_class else eval_m).entries.append(entry)
    paths = artifact_paths(out_dir)
    train_m.save(paths["task_train_manifest"])
    eval_m.save(paths["task_eval_manifest"])
    keys = ["color_manifest", "shape_manifest", "texture_manifest",
            "task_train_manifest", "task_eval_manifest"]
    return keys, notes


def _stage_learn_dict(cfg: RunConfig, out_dir) -> tuple:
    paths = artifact_paths(out_dir)
    params = _coding_params(cfg)
    size = cfg.dict.signal_size
    keys = []
    for subtype in cost_space.SUBTYPE_ORDER:
        manifest = synthgen.DatasetManifest.load(paths[f"{subtype}_manifest"])
        X = _load_signals(manifest.entries, size)
        dictionary, report = sparse_dict.learn_dictionary(
            X, cfg.dict.atoms, params, epochs=cfg.dict.epochs,
            seed=derive_seed(cfg.run.master_seed, "dict", subtype),
            subtype=subtype, signal_shape=(size, size, 3))
        sparse_dict.save_dictionary(dictionary, paths[f"dict_{subtype}"])
        report_doc = {"objectives": report.objectives, "epochs": report.epochs,
                      "fallback_epochs": report.fallback_epochs,
                      "dictionary_checksum": report.dictionary_checksum}
        paths[f"dict_report_{subtype}"].parent.mkdir(parents=True, exist_ok=True)
        with open(paths[f"dict_report_{subtype}"], "w", encoding="utf-8") as fh:
            json.dump(report_doc, fh)
        keys += [f"dict_{subtype}", f"dict_report_{subtype}"]
    return keys, {}


def _stage_centroids(cfg: RunConfig, out_dir) -> tuple:
    paths = artifact_paths(out_dir)
    dicts = _load_dicts(paths)
    codes_by_subtype = {}
    for subtype in cost_space.SUBTYPE_ORDER:
        manifest = synthgen.DatasetManifest.load(paths[f"{subtype}_manifest"])
        X = _load_signals(manifest.entries, cfg.dict.signal_size)
        H = sparse_dict.stagewise_encode_batch(dicts[subtype], X)
        per_class = {}
        for row, entry in zip(H, manifest.entries):
            per_class.setdefault(entry.label, []).append(row)
        codes_by_subtype[subtype] = per_class
    cents = cost_space.compute_centroids(codes_by_subtype)
    cost_space.save_centroids(cents, paths["centroids"])
    return ["centroids"], {"n_centroids": cents.size}


def _stage_encode(cfg: RunConfig, out_dir) -> tuple:
    paths = artifact_paths(out_dir)
    dicts = _load_dicts(paths)
    cents = cost_space.load_centroids(paths["centroids"])
    notes = {}
    for which, manifest_key, feature_key in (
            ("train", "task_train_manifest", "train_features"),
            ("eval", "task_eval_manifest", "eval_features")):
        manifest = synthgen.DatasetManifest.load(paths[manifest_key])
        records, failures = _encode_entries_batched(manifest.entries, dicts, cents)
        for path, reason in failures:
            warnings.warn(f"encode: skipped {path}: {reason}")
        notes[f"{which}_failures"] = len(failures)
        cost_space.save_features(records, paths[feature_key])
    return ["train_features", "eval_features"], notes


def _load_scaler(cfg: RunConfig, paths):
    """(mean, std) arrays when z-score feature scaling is enabled, else None."""
    if cfg.features.normalize != "zscore":
        return None
    with open(paths["feature_scaler"], encoding="utf-8") as fh:
        doc = json.load(fh)
    return np.asarray(doc["mean"]), np.asarray(doc["std"])


def _apply_scaler(vectors: np.ndarray, scaler) -> np.ndarray:
    if scaler is None:
        return vectors
    mean, std = scaler
    return (vectors - mean) / std


def _stage_train_cost(cfg: RunConfig, out_dir) -> tuple:
    paths = artifact_paths(out_dir)
    records = cost_space.load_features(paths["train_features"])
    if not records:
        raise RuntimeError("no training features; encode produced an empty set")
    classes = sorted({r.label for r in records})
    X = np.array([r.vector for r in records])
    y = np.array([classes.index(r.label) for r in records])
    keys = ["cost_mlp", "cost_loss"]
    if cfg.features.normalize == "zscore":
        mean = X.mean(axis=0)
        std = np.maximum(X.std(axis=0), 1e-9)
        paths["feature_scaler"].parent.mkdir(parents=True, exist_ok=True)
        with open(paths["feature_scaler"], "w", encoding="utf-8") as fh:
            json.dump({"mean": mean.tolist(), "std": std.tolist()}, fh)
        X = (X - mean) / std
        keys.append("feature_scaler")
    seed = derive_seed(cfg.run.master_seed, "cost-classifier")
    net = mlp.init_mlp([X.shape[1], cfg.cost_classifier.hidden1,
                        cfg.cost_classifier.hidden2, len(classes)],
                       seed=seed, classes=classes)
    trained, history = mlp.train(net, X, y, mlp.TrainConfig(
        epochs=cfg.cost_classifier.epochs,
        learning_rate=cfg.cost_classifier.learning_rate, seed=seed))
    mlp.save_mlp(trained, paths["cost_mlp"])
    with open(paths["cost_loss"], "w", encoding="utf-8") as fh:
        json.dump({"loss": history}, fh)
    acc = float((np.argmax(mlp.predict_proba(trained, X), axis=1) == y).mean())
    return keys, {"train_accuracy": acc}


def _stage_train_backend(cfg: RunConfig, out_dir) -> tuple:
    paths = artifact_paths(out_dir)
    if cfg.backend.precomputed:
        table = backend.load_precomputed(cfg.backend.precomputed)
        return [], {"precomputed": cfg.backend.precomputed, "entries": len(table.entries)}
    manifest = synthgen.DatasetManifest.load(paths["task_train_manifest"])
    bcfg = backend.BackendTrainConfig(
        mode=cfg.backend.mode, downsample=cfg.backend.downsample,
        hidden=(cfg.backend.hidden1, cfg.backend.hidden2),
        epochs=cfg.backend.epochs, learning_rate=cfg.backend.learning_rate,
        seed=derive_seed(cfg.run.master_seed, "backend"))
    model, history = backend.reference_classifier_train(manifest.entries, bcfg)
    backend.save_backend(model, paths["backend_model"])
    with open(paths["backend_loss"], "w", encoding="utf-8") as fh:
        json.dump({"loss": history}, fh)
    return ["backend_model", "backend_loss"], {}


def _stage_score(cfg: RunConfig, out_dir) -> tuple:
    paths = artifact_paths(out_dir)
    manifest = synthgen.DatasetManifest.load(paths["task_eval_manifest"])
    pairs = _make_pairs(manifest.entries, derive_seed(cfg.run.master_seed, "pairs"),
                        cfg.fusion.genuine_pairs_per_class, cfg.fusion.imposter_ratio)
    fusion_eval.save_pair_list(pairs, paths["pairs"])

    features = {r.path: r.vector for r in cost_space.load_features(paths["eval_features"])}
    model = mlp.load_mlp(paths["cost_mlp"])
    scaler = _load_scaler(cfg, paths)
    order = [e.path for e in manifest.entries if e.path in features]
    acts = mlp.predict_proba(model, _apply_scaler(
        np.array([features[p] for p in order]), scaler))
    cost_acts = dict(zip(order, acts))

    scorer = _SupervisedScorer(cfg, paths)
    records = []
    for pa, pb, label in pairs:
        dc = fusion_eval.softmax_distance(cost_acts[pa], cost_acts[pb], cfg.fusion.distance)
        ds = scorer.pair_distance(pa, pb)
        records.append(fusion_eval.ScoreRecord(path_a=pa, path_b=pb, dist_cost=dc,
                                               dist_supervised=ds, label=label))
    fusion_eval.save_score_records(records, paths["scores"])
    return ["pairs", "scores"], {"n_pairs": len(records)}


def _stage_fuse(cfg: RunConfig, out_dir) -> tuple:
    paths = artifact_paths(out_dir)
    records = fusion_eval.load_score_records(paths["scores"])
    normalized = fusion_eval.normalize_records(records, cfg.fusion.normalize)
    if cfg.fusion.alpha_search:
        alpha = fusion_eval.grid_search_alpha(normalized, cfg.fusion.alpha_grid,
                                              far_level=cfg.fusion.far_levels[0])
    else:
        alpha = cfg.fusion.alpha
    fused = fusion_eval.fuse_records(normalized, alpha)
    fusion_eval.save_score_records(fused, paths["scores_fused"])
    with open(paths["alpha"], "w", encoding="utf-8") as fh:
        json.dump({"alpha": alpha, "normalize": cfg.fusion.normalize,
                   "searched": cfg.fusion.alpha_search,
                   "grid": list(cfg.fusion.alpha_grid)}, fh)
    return ["scores_fused", "alpha"], {"alpha": alpha}


def _stage_eval_verify(cfg: RunConfig, out_dir) -> tuple:
    paths = artifact_paths(out_dir)
    records = fusion_eval.load_score_records(paths["scores_fused"])
    summary = {}
    keys = []
    for channel in ("cost", "supervised", "fused"):
        report = fusion_eval.verification_metrics(records, on=channel,
                                                  far_levels=tuple(cfg.fusion.far_levels))
        fusion_eval.save_roc_csv(report.roc, paths[f"roc_{channel}"])
        summary[channel] = {f"gar_at_far_{lvl}": gar for lvl, gar in report.gar_at.items()}
        keys.append(f"roc_{channel}")
    with open(paths["verify_summary"], "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2)
    return keys + ["verify_summary"], summary


def _stage_eval_identify(cfg: RunConfig, out_dir) -> tuple:
    paths = artifact_paths(out_dir)
    manifest = synthgen.DatasetManifest.load(paths["task_eval_manifest"])
    by_label = {}
    for e in manifest.entries:
        by_label.setdefault(e.label, []).append(e.path)
    gallery, probes = [], []
    for label in sorted(by_label):
        items = by_label[label]
        n_gal = min(cfg.task.gallery_per_class, len(items) - 1)
        gallery += [(p, label) for p in items[:n_gal]]
        probes += [(p, label) for p in items[n_gal:]]
    if not probes:
        raise RuntimeError("no probe images after the gallery split")

    features = {r.path: r.vector for r in cost_space.load_features(paths["eval_features"])}
    model = mlp.load_mlp(paths["cost_mlp"])
    scaler = _load_scaler(cfg, paths)
    all_paths = [p for p, _ in gallery] + [p for p, _ in probes]
    acts = mlp.predict_proba(model, _apply_scaler(
        np.array([features[p] for p in all_paths]), scaler))
    act_by_path = dict(zip(all_paths, acts))

    scorer = _SupervisedScorer(cfg, paths)
    n_p, n_g = len(probes), len(gallery)
    d_cost = np.empty((n_p, n_g))
    d_sup = np.empty((n_p, n_g))
    for i, (pp, _) in enumerate(probes):
        for j, (gp, _) in enumerate(gallery):
            d_cost[i, j] = fusion_eval.softmax_distance(act_by_path[pp], act_by_path[gp],
                                                        cfg.fusion.distance)
            d_sup[i, j] = scorer.pair_distance(pp, gp)
    if cfg.fusion.normalize != "none":
        d_cost = fusion_eval.normalize_scores(d_cost.ravel(),
                                              cfg.fusion.normalize).reshape(d_cost.shape)
        d_sup = fusion_eval.normalize_scores(d_sup.ravel(),
                                             cfg.fusion.normalize).reshape(d_sup.shape)
    with open(paths["alpha"], encoding="utf-8") as fh:
        alpha = json.load(fh)["alpha"]

    probe_ids = [lbl for _, lbl in probes]
    gallery_ids = [lbl for _, lbl in gallery]
    matrices = {"cost": d_cost, "supervised": d_sup,
                "fused": alpha * d_cost + (1.0 - alpha) * d_sup}
    summary = {"alpha": alpha}
    keys = []
    for channel, matrix in matrices.items():
        curve = fusion_eval.cmc(matrix, probe_ids, gallery_ids)
        fusion_eval.save_cmc_csv(curve, paths[f"cmc_{channel}"])
        summary[channel] = {
            "rank1": curve.rate(1),
            "rank5": curve.rate(min(5, len(curve.rates))),
        }
        keys.append(f"cmc_{channel}")
    with open(paths["identify_summary"], "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2)
    return keys + ["identify_summary"], summary


_STAGE_FUNCS = {
    "gen": _stage_gen,
    "learn-dict": _stage_learn_dict,
    "centroids": _stage_centroids,
    "encode": _stage_encode,
    "train-cost": _stage_train_cost,
    "train-backend": _stage_train_backend,
    "score": _stage_score,
    "fuse": _stage_fuse,
    "eval-verify": _stage_eval_verify,
    "eval-identify": _stage_eval_identify,
}


# ---------------------------------------------------------------------------
# Execution and run manifest


def _sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def run_stage(cfg: RunConfig, stage: str, out_dir=None, threads: int | None = None) -> dict:
    """Execute one stage; returns its manifest entry."""
    if stage not in _STAGE_FUNCS:
        raise ConfigError(f"unknown stage {stage!r}")
    out = Path(out_dir) if out_dir is not None else Path(cfg.run.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    check_dependencies(cfg, stage, out)
    paths = artifact_paths(out)
    started = time.monotonic()
    keys, notes = _STAGE_FUNCS[stage](cfg, out)
    seconds = time.monotonic() - started
    artifacts = [{"path": str(paths[k].relative_to(out)), "sha256": _sha256_file(paths[k])}
                 for k in keys]
    entry = {"stage": stage, "seconds": round(seconds, 3),
             "artifacts": artifacts, "notes": notes}
    _update_manifest(cfg, out, entry, threads)
    return entry


def _update_manifest(cfg: RunConfig, out: Path, entry: dict, threads) -> None:
    manifest_path = out / "run_manifest.json"
    if manifest_path.exists():
        with open(manifest_path, encoding="utf-8") as fh:
            manifest = json.load(fh)
    else:
        manifest = {"tool_version": __version__, "config_hash": config_hash(cfg),
                    "threads": threads, "stages": []}
    manifest["config_hash"] = config_hash(cfg)
    manifest["threads"] = threads
    manifest["stages"] = [s for s in manifest["stages"] if s["stage"] != entry["stage"]]
    manifest["stages"].append(entry)
    with open(manifest_path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2)


def run_all(cfg: RunConfig, out_dir=None, threads: int | None = None) -> dict:
    """Run every enabled stage in topological order; stops at the first failure."""
    out = Path(out_dir) if out_dir is not None else Path(cfg.run.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    enabled = set(cfg.stages.enabled)
    manifest = {"tool_version": __version__, "config_hash": config_hash(cfg),
                "threads": threads, "stages": []}
    manifest_path = out / "run_manifest.json"
    with open(manifest_path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2)
    for stage in STAGE_ORDER:
        if stage in enabled:
            manifest["stages"].append(run_stage(cfg, stage, out, threads))
    with open(manifest_path, encoding="utf-8") as fh:
        return json.load(fh)
