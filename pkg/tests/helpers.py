"""Shared test utilities: independent oracles and small dataset builders.

The oracles here deliberately use naive algorithms (scalar loops, dense
solves, exhaustive scans) so they stay independent of the library's
vectorized implementations.
"""

import numpy as np

from costfuse import synthgen
from costfuse.seeding import derive_seed


# ---------------------------------------------------------------------------
# Oracles


def cd_lasso(atoms: np.ndarray, x: np.ndarray, sparsity: float,
             max_sweeps: int = 5000, tol: float = 1e-12) -> np.ndarray:
    """Coordinate-descent solution of min ||x - D h||^2 + sparsity * ||h||_1."""
    d, k = atoms.shape
    h = np.zeros(k)
    residual = x.astype(np.float64).copy()
    col_sq = (atoms ** 2).sum(axis=0)
    for _ in range(max_sweeps):
        biggest = 0.0
        for j in range(k):
            if col_sq[j] == 0.0:
                continue
            rho = atoms[:, j] @ residual + col_sq[j] * h[j]
            if rho > sparsity / 2.0:
                new = (rho - sparsity / 2.0) / col_sq[j]
            elif rho < -sparsity / 2.0:
                new = (rho + sparsity / 2.0) / col_sq[j]
            else:
                new = 0.0
            change = new - h[j]
            if change != 0.0:
                residual -= change * atoms[:, j]
                h[j] = new
                biggest = max(biggest, abs(change))
        if biggest < tol:
            break
    return h


def lasso_objective(atoms: np.ndarray, x: np.ndarray, h: np.ndarray,
                    sparsity: float) -> float:
    r = x - atoms @ h
    return float(r @ r + sparsity * np.abs(h).sum())


def brute_force_gar_at_far(distances, labels, level: float) -> float:
    """GAR at the largest candidate threshold whose FAR does not exceed level."""
    d = np.asarray(distances, dtype=np.float64)
    genuine = np.asarray([lab == "genuine" for lab in labels])
    candidates = sorted(set(d.tolist()))
    candidates = [candidates[0] - 1.0] + candidates
    best_t = None
    for t in candidates:
        far = float((d[~genuine] <= t).sum()) / max((~genuine).sum(), 1)
        if far <= level:
            best_t = t
    if best_t is None:
        return 0.0
    return float((d[genuine] <= best_t).sum()) / genuine.sum()


def brute_force_cmc_rates(distances, probe_ids, gallery_ids) -> np.ndarray:
    """Exhaustive rank computation with gallery-index tie breaking."""
    D = np.asarray(distances, dtype=np.float64)
    n_gallery = len(gallery_ids)
    ranks = []
    for i, pid in enumerate(probe_ids):
        order = sorted(range(n_gallery), key=lambda j: (D[i, j], j))
        rank = next(pos + 1 for pos, j in enumerate(order) if gallery_ids[j] == pid)
        ranks.append(rank)
    rates = []
    for r in range(1, n_gallery + 1):
        rates.append(sum(1 for x in ranks if x <= r) / len(ranks))
    return np.asarray(rates)


def reference_bilinear(img: np.ndarray, w: int, h: int) -> np.ndarray:
    """Scalar-loop bilinear resampler with half-pixel centers and round-half-up."""
    src_h, src_w = img.shape[:2]
    out = np.zeros((h, w, 3), dtype=np.uint8)
    for oy in range(h):
        sy = min(max((oy + 0.5) * src_h / h - 0.5, 0.0), src_h - 1)
        y0 = int(np.floor(sy))
        y1 = min(y0 + 1, src_h - 1)
        fy = sy - y0
        for ox in range(w):
            sx = min(max((ox + 0.5) * src_w / w - 0.5, 0.0), src_w - 1)
            x0 = int(np.floor(sx))
            x1 = min(x0 + 1, src_w - 1)
            fx = sx - x0
            for ch in range(3):
                top = img[y0, x0, ch] * (1 - fx) + img[y0, x1, ch] * fx
                bot = img[y1, x0, ch] * (1 - fx) + img[y1, x1, ch] * fx
                out[oy, ox, ch] = min(max(int(np.floor(top * (1 - fy) + bot * fy + 0.5)), 0), 255)
    return out


def fit_line_max_residual(points: np.ndarray) -> float:
    """Max perpendicular distance of 2-D points to their total-least-squares line."""
    centered = points - points.mean(axis=0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    normal = vt[-1]
    return float(np.abs(centered @ normal).max())


def fit_circle_kasa(points: np.ndarray):
    """Algebraic circle fit; returns (center, radius)."""
    x, y = points[:, 0], points[:, 1]
    A = np.column_stack([2 * x, 2 * y, np.ones_like(x)])
    b = x ** 2 + y ** 2
    sol, *_ = np.linalg.lstsq(A, b, rcond=None)
    cx, cy, c = sol
    return np.array([cx, cy]), float(np.sqrt(c + cx ** 2 + cy ** 2))


def convex_hull(points: np.ndarray) -> np.ndarray:
    """Andrew monotone chain; returns hull vertices in counterclockwise order."""
    pts = sorted(map(tuple, points))
    if len(pts) <= 2:
        return np.asarray(pts, dtype=np.float64)

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower, upper = [], []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    for p in reversed(pts):
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return np.asarray(lower[:-1] + upper[:-1], dtype=np.float64)


def max_distance_to_polygon_boundary(points: np.ndarray, polygon: np.ndarray) -> float:
    """Max over points of the min distance to any polygon edge."""
    best = np.full(len(points), np.inf)
    n = len(polygon)
    for i in range(n):
        p1, p2 = polygon[i], polygon[(i + 1) % n]
        seg = p2 - p1
        seg_len_sq = float(seg @ seg)
        if seg_len_sq == 0.0:
            dist = np.hypot(*(points - p1).T)
        else:
            t = np.clip(((points - p1) @ seg) / seg_len_sq, 0.0, 1.0)
            proj = p1 + t[:, None] * seg
            dist = np.hypot(*(points - proj).T)
        best = np.minimum(best, dist)
    return float(best.max())


# ---------------------------------------------------------------------------
# Dataset builders


def color_signal_matrix(per_class: int, size: int, seed: int, tag: str = "sig"):
    """Signals and labels for all 10 color classes at the given edge size."""
    sigs, labels = [], []
    for label in synthgen.COLOR_CLASSES:
        for i in range(per_class):
            s = derive_seed(seed, tag, "color", label, i)
            img = synthgen.gen_color_image(label, s, size)
            sigs.append(img.astype(np.float64).ravel() / 255.0)
            labels.append(label)
    return np.array(sigs), labels


def shape_signal_matrix(per_class: int, gen_size: int, sig_size: int, seed: int,
                        tag: str = "sig"):
    """Shape signals rendered at gen_size and resized to sig_size."""
    sigs, labels = [], []
    for label in synthgen.SHAPE_CLASSES:
        for i in range(per_class):
            s = derive_seed(seed, tag, "shape", label, i)
            img = synthgen.gen_shape_image(label, s, gen_size)
            img = synthgen.resize_image(img, sig_size, sig_size)
            sigs.append(img.astype(np.float64).ravel() / 255.0)
            labels.append(label)
    return np.array(sigs), labels


def write_identity_images(root, per_class: int, size: int, seed: int,
                          classes=("red", "green", "blue")):
    """Write labeled color images to disk; returns (path, label) entries."""
    entries = []
    for label in classes:
        for i in range(per_class):
            img = synthgen.gen_color_image(label, derive_seed(seed, "id", label, i), size)
            path = root / label / f"{label}_{i:03d}.png"
            synthgen.save_png(img, path)
            entries.append((str(path), label))
    return entries
