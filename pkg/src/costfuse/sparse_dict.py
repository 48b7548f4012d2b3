"""Sparse dictionary learning with a forward-stagewise (epsilon-step) encoder.

The encoder greedily approximates the LASSO problem

    minimize ||x - D h||_2^2 + sparsity * ||h||_1

by fixed-size coordinate moves: usually growing the coefficient of the
most-correlated atom (classic forward stagewise), plus shrink moves on
overshot coefficients so the solve reaches LASSO stationarity instead of
stalling at the monotone-path limit.  Every applied move strictly decreases
the penalized objective; a signal stops when no single move helps, which
matches the max-correlation <= sparsity/2 stopping rule up to step
resolution.  Dictionary updates use the method of optimal directions: a
ridge-regularized least-squares solve over all atoms given fixed codes,
followed by atom renormalization and re-seeding of unused atoms.

Signals are stored as rows (M, d); dictionary atoms as unit-norm columns
(d, k).  All encoding of a batch shares one Gram matrix so correlations are
updated in O(k) per step instead of O(d k).
"""

from __future__ import annotations

import hashlib
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .synthgen import save_png

DEFAULT_RIDGE = 1e-6


@dataclass(frozen=True)
class CodingParams:
    """Stagewise encoder settings.

    max_iters=None resolves to 10 * atom_count at encode time.
    """

    sparsity: float = 0.1
    step: float = 0.01
    max_iters: int | None = None

    def __post_init__(self):
        if self.sparsity < 0.0:
            raise ValueError("sparsity must be >= 0")
        if self.step <= 0.0:
            raise ValueError("step must be > 0")
        if self.max_iters is not None and self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")

    def resolved_max_iters(self, atom_count: int) -> int:
        return self.max_iters if self.max_iters is not None else 10 * atom_count


@dataclass
class Dictionary:
    """Unit-norm atom matrix (d, k) with its subtype tag and coding defaults."""

    atoms: np.ndarray
    subtype: str = ""
    signal_shape: tuple | None = None  # (h, w, 3) for image-derived signals
    coding: CodingParams = field(default_factory=CodingParams)
    seed: int | None = None

    def __post_init__(self):
        self.atoms = np.asarray(self.atoms, dtype=np.float64)
        if self.atoms.ndim != 2 or self.atoms.size == 0:
            raise ValueError("atoms must be a non-empty (d, k) matrix")
        norms = np.linalg.norm(self.atoms, axis=0)
        if np.any(norms <= 0.0) or not np.all(np.isfinite(self.atoms)):
            raise ValueError("atoms must be finite and non-zero")
        if self.signal_shape is not None:
            self.signal_shape = tuple(int(v) for v in self.signal_shape)
            if int(np.prod(self.signal_shape)) != self.atom_dim:
                raise ValueError(
                    f"signal_shape {self.signal_shape} does not match atom dimension {self.atom_dim}")

    @property
    def atom_dim(self) -> int:
        return self.atoms.shape[0]

    @property
    def atom_count(self) -> int:
        return self.atoms.shape[1]

    def checksum(self) -> str:
        return hashlib.sha256(np.ascontiguousarray(self.atoms).tobytes()).hexdigest()


@dataclass
class LearnReport:
    """Per-epoch objective trace plus bookkeeping for one learning run."""

    objectives: list
    epochs: int
    fallback_epochs: list
    dictionary_checksum: str


def _as_signal_matrix(signals, atom_dim: int) -> np.ndarray:
    X = np.asarray(signals, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != atom_dim:
        raise ValueError(f"signals must be (M, {atom_dim}), got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ValueError("signals contain non-finite values")
    return X


def _stagewise_batch(atoms: np.ndarray, X: np.ndarray, sparsity: float, step: float,
                     max_iters: int) -> np.ndarray:
    """Run the stagewise solve for every row of X; returns codes (M, k).

    Each iteration applies, per signal, the fixed-size coordinate move that
    most decreases the penalized objective: either growing the coefficient of
    the most correlated atom or shrinking an overshot coefficient whose L1
    saving outweighs its correlation.  A signal stops once no single move
    decreases its objective (which subsumes the max-correlation <= sparsity/2
    stationarity rule up to step resolution) or its iteration budget is spent.
    """
    k = atoms.shape[1]
    n = X.shape[0]
    corr = atoms.T @ X.T                      # corr[j, i] = <atom_j, residual_i>
    gram = atoms.T @ atoms
    col_sq = np.diag(gram).copy()
    codes = np.zeros((k, n))
    active = np.arange(n)
    for _ in range(max_iters):
        if active.size == 0:
            break
        sub = corr[:, active]
        cur = codes[:, active]
        # objective change of h_j -> h_j + delta is
        #   -2 delta corr_j + delta^2 |atom_j|^2 + sparsity (|h_j+delta|-|h_j|)
        grow = step * np.sign(sub)
        grow[grow == 0.0] = step
        obj_grow = (-2.0 * grow * sub + step * step * col_sq[:, None]
                    + sparsity * (np.abs(cur + grow) - np.abs(cur)))
        shrink = -step * np.sign(cur)
        obj_shrink = (-2.0 * shrink * sub + step * step * col_sq[:, None]
                      + sparsity * (np.abs(cur + shrink) - np.abs(cur)))
        obj_shrink[cur == 0.0] = np.inf
        use_shrink = obj_shrink < obj_grow
        best = np.where(use_shrink, obj_shrink, obj_grow)
        j = np.argmin(best, axis=0)
        col_idx = np.arange(active.size)
        obj_best = best[j, col_idx]
        delta = np.where(use_shrink[j, col_idx], shrink[j, col_idx], grow[j, col_idx])
        keep = obj_best < 0.0
        if not keep.any():
            break
        cols = active[keep]
        jk = j[keep]
        dk = delta[keep]
        codes[jk, cols] += dk
        corr[:, cols] -= gram[:, jk] * dk[None, :]
        active = cols
    return codes.T


def stagewise_encode_batch(dictionary: Dictionary, signals, params: CodingParams | None = None) -> np.ndarray:
    """Encode rows of ``signals`` against the dictionary; returns codes (M, k)."""
    p = params if params is not None else dictionary.coding
    X = _as_signal_matrix(signals, dictionary.atom_dim)
    return _stagewise_batch(dictionary.atoms, X, p.sparsity, p.step,
                            p.resolved_max_iters(dictionary.atom_count))


def stagewise_encode(dictionary: Dictionary, signal, params: CodingParams | None = None) -> np.ndarray:
    """Encode a single signal; returns a coefficient vector of length k."""
    return stagewise_encode_batch(dictionary, np.asarray(signal, dtype=np.float64), params)[0]


def coding_objective(dictionary: Dictionary, signals, codes, sparsity: float | None = None) -> float:
    """Mean of ||x_i - D h_i||_2^2 + sparsity * ||h_i||_1 over all samples."""
    X = _as_signal_matrix(signals, dictionary.atom_dim)
    H = np.asarray(codes, dtype=np.float64)
    if H.ndim == 1:
        H = H[None, :]
    if H.shape[0] != X.shape[0]:
        raise ValueError(f"{X.shape[0]} signals but {H.shape[0]} codes")
    if H.shape[1] != dictionary.atom_count:
        raise ValueError(f"codes must have {dictionary.atom_count} coefficients")
    lam = dictionary.coding.sparsity if sparsity is None else sparsity
    resid = X - H @ dictionary.atoms.T
    per_sample = np.einsum("ij,ij->i", resid, resid) + lam * np.abs(H).sum(axis=1)
    return float(per_sample.mean())


def reconstruct(dictionary: Dictionary, code) -> np.ndarray:
    """Linear reconstruction D @ h."""
    h = np.asarray(code, dtype=np.float64)
    if h.shape != (dictionary.atom_count,):
        raise ValueError(f"code must have length {dictionary.atom_count}, got {h.shape}")
    return dictionary.atoms @ h


def _mod_update(atoms: np.ndarray, X: np.ndarray, H: np.ndarray,
                ridge: float = DEFAULT_RIDGE) -> tuple:
    """One method-of-optimal-directions step; returns (new_atoms, used_fallback)."""
    k = atoms.shape[1]
    if not np.any(H):
        return atoms.copy(), False
    hth = H.T @ H
    fallback = False
    try:
        solved = np.linalg.solve(hth + ridge * np.eye(k), H.T @ X)  # (k, d)
        new_atoms = solved.T
        if not np.all(np.isfinite(new_atoms)):
            raise np.linalg.LinAlgError("non-finite MOD solution")
    except np.linalg.LinAlgError:
        # Ill-conditioned system: fall back to a scaled gradient step on the
        # reconstruction term.
        fallback = True
        scale = max(1.0, float(np.abs(hth).max()))
        new_atoms = atoms + (X.T @ H - atoms @ hth) / scale

    usage = np.count_nonzero(H, axis=0)
    dead = np.flatnonzero(usage == 0)
    if dead.size:
        resid = X - H @ new_atoms.T
        errs = np.einsum("ij,ij->i", resid, resid)
        worst = np.argsort(errs)[::-1]
        for slot, atom_idx in enumerate(dead):
            if slot >= worst.size:
                break
            candidate = X[worst[slot]]
            nrm = np.linalg.norm(candidate)
            if nrm > 1e-12:
                new_atoms[:, atom_idx] = candidate / nrm

    norms = np.linalg.norm(new_atoms, axis=0)
    degenerate = norms <= 1e-12
    if degenerate.any():
        new_atoms[:, degenerate] = atoms[:, degenerate]
        norms = np.linalg.norm(new_atoms, axis=0)
    return new_atoms / norms, fallback


def dict_update(dictionary: Dictionary, signals, codes) -> Dictionary:
    """Return a new dictionary after one least-squares atom update."""
    X = _as_signal_matrix(signals, dictionary.atom_dim)
    H = np.asarray(codes, dtype=np.float64)
    if H.shape != (X.shape[0], dictionary.atom_count):
        raise ValueError(f"codes must be ({X.shape[0]}, {dictionary.atom_count}), got {H.shape}")
    new_atoms, _ = _mod_update(dictionary.atoms, X, H)
    return Dictionary(atoms=new_atoms, subtype=dictionary.subtype,
                      signal_shape=dictionary.signal_shape, coding=dictionary.coding,
                      seed=dictionary.seed)


def learn_dictionary(signals, atom_count: int, params: CodingParams | None = None,
                     epochs: int = 100, seed: int = 0, subtype: str = "",
                     signal_shape=None) -> tuple:
    """Alternate stagewise encoding and MOD updates for a number of epochs.

    The dictionary is initialized from atom_count distinct normalized training
    signals chosen by the seeded generator; if fewer signals than atoms are
    available the remainder are random unit vectors (with a warning).  The
    report records the penalized objective at the start of every epoch, i.e.
    entry 0 is the objective of the initial dictionary.
    """
    if atom_count < 1:
        raise ValueError("atom_count must be >= 1")
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    X = np.asarray(signals, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 1:
        raise ValueError("signals must be a non-empty (M, d) matrix")
    if not np.all(np.isfinite(X)):
        raise ValueError("signals contain non-finite values")
    p = params if params is not None else CodingParams()
    n, dim = X.shape
    rng = np.random.default_rng(seed)

    picked = rng.choice(n, size=min(atom_count, n), replace=False)
    atoms = X[picked].T.copy()
    if atom_count > n:
        warnings.warn(f"atom_count {atom_count} exceeds {n} training signals; "
                      "padding with random unit vectors")
        extra = rng.standard_normal((dim, atom_count - n))
        atoms = np.concatenate([atoms, extra], axis=1)
    norms = np.linalg.norm(atoms, axis=0)
    for j in np.flatnonzero(norms <= 1e-12):
        atoms[:, j] = rng.standard_normal(dim)
    atoms = atoms / np.linalg.norm(atoms, axis=0)

    max_iters = p.resolved_max_iters(atom_count)
    objectives = []
    fallback_epochs = []
    for epoch in range(epochs):
        H = _stagewise_batch(atoms, X, p.sparsity, p.step, max_iters)
        resid = X - H @ atoms.T
        per_sample = np.einsum("ij,ij->i", resid, resid) + p.sparsity * np.abs(H).sum(axis=1)
        objectives.append(float(per_sample.mean()))
        atoms, fb = _mod_update(atoms, X, H)
        if fb:
            fallback_epochs.append(epoch)

    dictionary = Dictionary(atoms=atoms, subtype=subtype, signal_shape=signal_shape,
                            coding=p, seed=seed)
    report = LearnReport(objectives=objectives, epochs=epochs,
                         fallback_epochs=fallback_epochs,
                         dictionary_checksum=dictionary.checksum())
    return dictionary, report


# ---------------------------------------------------------------------------
# Persistence and visualization


def save_dictionary(dictionary: Dictionary, path) -> None:
    """JSON round-trips float values exactly (repr-based decimal encoding)."""
    doc = {
        "subtype": dictionary.subtype,
        "d": dictionary.atom_dim,
        "k": dictionary.atom_count,
        "signal_shape": list(dictionary.signal_shape) if dictionary.signal_shape else None,
        "coding": {
            "sparsity": dictionary.coding.sparsity,
            "step": dictionary.coding.step,
            "max_iters": dictionary.coding.max_iters,
        },
        "seed": dictionary.seed,
        "atoms": dictionary.atoms.T.tolist(),  # one row per atom
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)


def load_dictionary(path) -> Dictionary:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    atoms = np.asarray(doc["atoms"], dtype=np.float64).T
    if atoms.shape != (doc["d"], doc["k"]):
        raise ValueError(f"{path}: atom matrix shape {atoms.shape} does not match "
                         f"declared ({doc['d']}, {doc['k']})")
    coding = CodingParams(sparsity=doc["coding"]["sparsity"], step=doc["coding"]["step"],
                          max_iters=doc["coding"]["max_iters"])
    shape = tuple(doc["signal_shape"]) if doc.get("signal_shape") else None
    return Dictionary(atoms=atoms, subtype=doc.get("subtype", ""), signal_shape=shape,
                      coding=coding, seed=doc.get("seed"))


def export_atoms(dictionary: Dictionary, grid_path) -> np.ndarray:
    """Tile per-atom min/max-rescaled images into a square-ish grid PNG."""
    if dictionary.signal_shape is None or len(dictionary.signal_shape) != 3 \
            or dictionary.signal_shape[2] != 3:
        raise ValueError("dictionary atoms are not image-shaped (need signal_shape (h, w, 3))")
    h, w, _ = dictionary.signal_shape
    k = dictionary.atom_count
    cols = int(math.ceil(math.sqrt(k)))
    rows = int(math.ceil(k / cols))
    grid = np.zeros((rows * h, cols * w, 3), dtype=np.uint8)
    for idx in range(k):
        atom = dictionary.atoms[:, idx].reshape(h, w, 3)
        lo, hi = float(atom.min()), float(atom.max())
        if hi > lo:
            tile = (atom - lo) / (hi - lo) * 255.0
        else:
            tile = np.zeros_like(atom)
        r, c = divmod(idx, cols)
        grid[r * h:(r + 1) * h, c * w:(c + 1) * w] = np.floor(tile + 0.5).astype(np.uint8)
    save_png(grid, grid_path)
    return grid
