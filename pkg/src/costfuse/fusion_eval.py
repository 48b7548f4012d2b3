"""Distance fusion and verification/identification metrics.

Distances come from classifier softmax activations (Euclidean by default,
cosine behind a flag).  Fusion is the weighted sum

    fused = alpha * dist_cost + (1 - alpha) * dist_supervised

computed exactly on the stored operands; any scale alignment (min/max
normalization per channel) is an explicit prior stage, never folded into the
fusion arithmetic.  Verification sweeps thresholds over the observed
distances: a pair is accepted when its distance is <= threshold, FAR is the
accepted fraction of imposter pairs and GAR the accepted fraction of genuine
pairs.  GAR@x%FAR reads the curve at the largest threshold whose FAR does
not exceed x.  Identification ranks gallery entries by ascending distance
with ties broken by gallery index.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

GENUINE = "genuine"
IMPOSTER = "imposter"
_CHANNEL_FIELDS = {"cost": "dist_cost", "supervised": "dist_supervised", "fused": "dist_fused"}


@dataclass(frozen=True)
class ScoreRecord:
    path_a: str
    path_b: str
    dist_cost: float
    dist_supervised: float
    label: str
    dist_fused: float | None = None

    def __post_init__(self):
        if self.label not in (GENUINE, IMPOSTER):
            raise ValueError(f"label must be {GENUINE!r} or {IMPOSTER!r}, got {self.label!r}")


def softmax_distance(p, q, metric: str = "euclidean") -> float:
    """Distance between two softmax activation vectors."""
    a = np.asarray(p, dtype=np.float64)
    b = np.asarray(q, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"activation vectors must share one length, got {a.shape} vs {b.shape}")
    for name, v in (("first", a), ("second", b)):
        if not np.all(np.isfinite(v)) or v.min() < 0.0 or abs(v.sum() - 1.0) > 1e-6:
            raise ValueError(f"{name} argument is not a probability vector")
    if metric == "euclidean":
        return float(np.linalg.norm(a - b))
    if metric == "cosine":
        denom = np.linalg.norm(a) * np.linalg.norm(b)
        return float(1.0 - float(a @ b) / denom)
    raise ValueError(f"unknown metric {metric!r}")


def fuse(dist_cost: float, dist_supervised: float, alpha: float) -> float:
    """Weighted sum of the two channel distances."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    return alpha * dist_cost + (1.0 - alpha) * dist_supervised


def normalize_scores(values, method: str = "minmax") -> np.ndarray:
    """Map a score set onto [0, 1] (minmax) or pass through (none).

    A constant set maps to all zeros under minmax.
    """
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValueError("cannot normalize an empty score set")
    if not np.all(np.isfinite(v)):
        raise ValueError("scores contain non-finite values")
    if method == "none":
        return v.copy()
    if method == "minmax":
        lo, hi = float(v.min()), float(v.max())
        if hi == lo:
            return np.zeros_like(v)
        return (v - lo) / (hi - lo)
    raise ValueError(f"unknown normalization {method!r}")


def normalize_records(records, method: str = "minmax") -> list:
    """Apply normalize_scores per channel across the whole record set."""
    records = list(records)
    if not records:
        return []
    costs = normalize_scores([r.dist_cost for r in records], method)
    sups = normalize_scores([r.dist_supervised for r in records], method)
    return [replace(r, dist_cost=float(c), dist_supervised=float(s))
            for r, c, s in zip(records, costs, sups)]


def fuse_records(records, alpha: float) -> list:
    """Attach the exact fused distance for the given alpha to every record."""
    return [replace(r, dist_fused=fuse(r.dist_cost, r.dist_supervised, alpha))
            for r in records]


# ---------------------------------------------------------------------------
# Verification


@dataclass
class RocCurve:
    """(threshold, FAR, GAR) points swept over the observed distances."""

    thresholds: np.ndarray
    far: np.ndarray
    gar: np.ndarray

    def gar_at_far(self, level: float) -> float:
        """GAR at the largest threshold whose FAR does not exceed level."""
        idx = int(np.searchsorted(self.far, level, side="right")) - 1
        return float(self.gar[max(idx, 0)])


@dataclass
class VerificationReport:
    roc: RocCurve
    gar_at: dict  # FAR level -> GAR


def _channel_values(records, on: str) -> np.ndarray:
    field = _CHANNEL_FIELDS.get(on)
    if field is None:
        raise ValueError(f"channel must be one of {sorted(_CHANNEL_FIELDS)}, got {on!r}")
    values = []
    for r in records:
        v = getattr(r, field)
        if v is None:
            raise ValueError("records carry no fused distance; run fuse_records first")
        values.append(v)
    return np.asarray(values, dtype=np.float64)


def verification_metrics(records, on: str = "fused",
                         far_levels=(0.01, 0.001)) -> VerificationReport:
    """ROC sweep plus GAR at the requested FAR operating points."""
    records = list(records)
    d = _channel_values(records, on)
    genuine = np.array([r.label == GENUINE for r in records])
    n_gen = int(genuine.sum())
    n_imp = len(records) - n_gen
    if n_gen == 0 or n_imp == 0:
        raise ValueError("need at least one genuine and one imposter record")
    gen_sorted = np.sort(d[genuine])
    imp_sorted = np.sort(d[~genuine])
    thresholds = np.unique(d)
    gar = np.searchsorted(gen_sorted, thresholds, side="right") / n_gen
    far = np.searchsorted(imp_sorted, thresholds, side="right") / n_imp
    # Anchor the sweep with an accept-nothing point so FAR=0 is always present.
    thresholds = np.concatenate([[thresholds[0] - 1.0], thresholds])
    far = np.concatenate([[0.0], far])
    gar = np.concatenate([[0.0], gar])
    roc = RocCurve(thresholds=thresholds, far=far, gar=gar)
    return VerificationReport(roc=roc, gar_at={lvl: roc.gar_at_far(lvl) for lvl in far_levels})


# ---------------------------------------------------------------------------
# Identification


@dataclass
class CmcCurve:
    """Cumulative identification rate per rank, 1-based."""

    rates: np.ndarray

    def rate(self, rank: int) -> float:
        if not 1 <= rank <= len(self.rates):
            raise ValueError(f"rank must be in [1, {len(self.rates)}]")
        return float(self.rates[rank - 1])


def cmc(distances, probe_ids, gallery_ids) -> CmcCurve:
    """Rank probes against the gallery by ascending distance.

    distances is a (n_probes, n_gallery) matrix; ties are broken by gallery
    index (stable sort).  Every probe identity must occur in the gallery.
    """
    D = np.asarray(distances, dtype=np.float64)
    probe_ids = list(probe_ids)
    gallery_ids = np.asarray(list(gallery_ids), dtype=object)
    if D.shape != (len(probe_ids), len(gallery_ids)):
        raise ValueError(f"distance matrix {D.shape} does not match "
                         f"{len(probe_ids)} probes x {len(gallery_ids)} gallery entries")
    n_gallery = len(gallery_ids)
    ranks = np.empty(len(probe_ids), dtype=np.int64)
    for i, pid in enumerate(probe_ids):
        order = np.argsort(D[i], kind="stable")
        hits = np.flatnonzero(gallery_ids[order] == pid)
        if hits.size == 0:
            raise ValueError(f"probe identity {pid!r} absent from gallery")
        ranks[i] = hits[0] + 1
    counts = np.bincount(ranks, minlength=n_gallery + 1)[1:]
    return CmcCurve(rates=np.cumsum(counts) / len(probe_ids))


# ---------------------------------------------------------------------------
# Alpha selection

DEFAULT_ALPHA_GRID = tuple(round(0.1 * i, 1) for i in range(11))


def grid_search_alpha(records, grid=DEFAULT_ALPHA_GRID, far_level: float = 0.01) -> float:
    """Grid alpha maximizing GAR at the FAR operating point; ties pick the smallest."""
    grid = sorted(grid)
    if not grid:
        raise ValueError("alpha grid is empty")
    if grid[0] < 0.0 or grid[-1] > 1.0:
        raise ValueError("alpha grid values must lie in [0, 1]")
    best_alpha, best_gar = None, -1.0
    for alpha in grid:
        report = verification_metrics(fuse_records(records, alpha), on="fused",
                                      far_levels=(far_level,))
        gar = report.gar_at[far_level]
        if gar > best_gar:
            best_alpha, best_gar = alpha, gar
    return float(best_alpha)


# ---------------------------------------------------------------------------
# File formats


def save_pair_list(pairs, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["path1", "path2", "label"])
        for pa, pb, label in pairs:
            writer.writerow([pa, pb, label])


def load_pair_list(path) -> list:
    """Read (path1, path2, label) rows, rejecting conflicting duplicate pairs."""
    pairs = []
    seen = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["path1", "path2", "label"]:
            raise ValueError(f"{path}: expected header path1,path2,label, got {header}")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 3:
                raise ValueError(f"{path}: line {lineno}: expected 3 fields, got {len(row)}")
            pa, pb, label = row
            if label not in (GENUINE, IMPOSTER):
                raise ValueError(f"{path}: line {lineno}: label must be "
                                 f"{GENUINE!r} or {IMPOSTER!r}, got {label!r}")
            key = (pa, pb) if pa <= pb else (pb, pa)
            if seen.get(key, label) != label:
                raise ValueError(f"{path}: line {lineno}: pair {key} already "
                                 f"listed with conflicting label")
            seen[key] = label
            pairs.append((pa, pb, label))
    return pairs


def save_score_records(records, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["path1", "path2", "dist_cost", "dist_supervised",
                         "dist_fused", "label"])
        for r in records:
            fused = "" if r.dist_fused is None else repr(float(r.dist_fused))
            writer.writerow([r.path_a, r.path_b, repr(float(r.dist_cost)),
                             repr(float(r.dist_supervised)), fused, r.label])


def load_score_records(path) -> list:
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        expected = ["path1", "path2", "dist_cost", "dist_supervised", "dist_fused", "label"]
        if header != expected:
            raise ValueError(f"{path}: expected header {','.join(expected)}, got {header}")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 6:
                raise ValueError(f"{path}: line {lineno}: expected 6 fields, got {len(row)}")
            out.append(ScoreRecord(
                path_a=row[0], path_b=row[1], dist_cost=float(row[2]),
                dist_supervised=float(row[3]),
                dist_fused=float(row[4]) if row[4] else None, label=row[5]))
    return out


def save_roc_csv(roc: RocCurve, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["threshold", "far", "gar"])
        for t, f, g in zip(roc.thresholds, roc.far, roc.gar):
            writer.writerow([repr(float(t)), repr(float(f)), repr(float(g))])


def load_roc_csv(path) -> RocCurve:
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["threshold", "far", "gar"]:
            raise ValueError(f"{path}: expected header threshold,far,gar, got {header}")
        for row in reader:
            rows.append([float(v) for v in row])
    arr = np.asarray(rows, dtype=np.float64)
    return RocCurve(thresholds=arr[:, 0], far=arr[:, 1], gar=arr[:, 2])


def save_cmc_csv(curve: CmcCurve, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["rank", "rate"])
        for rank, rate in enumerate(curve.rates, start=1):
            writer.writerow([rank, repr(float(rate))])


def load_cmc_csv(path) -> CmcCurve:
    rates = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["rank", "rate"]:
            raise ValueError(f"{path}: expected header rank,rate, got {header}")
        for row in reader:
            rates.append(float(row[1]))
    return CmcCurve(rates=np.asarray(rates, dtype=np.float64))
