"""Streamline distances, the symmetric training loss, and bundle metrics.

All pairwise evaluations accumulate point distances in index order and
average with sequential sums, so results are reproducible bit for bit
regardless of blocking or worker count.
"""
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .streamlines import UNLABELED

BLOCK_ROWS = 256


def _as_bundle(x):
    arr = x.as_array() if hasattr(x, "as_array") else np.asarray(x, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValidationError(f"expected (N, P, 3) streamlines, got shape {arr.shape}")
    if len(arr) == 0:
        raise ValidationError("empty streamline set")
    return arr


def _seq_mean(x):
    # cumsum adds strictly left to right, unlike the pairwise np.sum
    return float(np.cumsum(x)[-1] / len(x))


def _check_same_p(a, b):
    if a.shape[1] != b.shape[1]:
        raise ValidationError(f"point counts differ: {a.shape[1]} vs {b.shape[1]}")


def _l21_block(a, b):
    """(len(a), len(b)) direct-order L2,1 distances."""
    acc = np.zeros((len(a), len(b)))
    for i in range(a.shape[1]):
        d = a[:, None, i, :] - b[None, :, i, :]
        dx, dy, dz = d[..., 0], d[..., 1], d[..., 2]
        acc = acc + np.sqrt(dx * dx + dy * dy + dz * dz)
    return acc / a.shape[1]


def _block_distances(a, b, flip):
    d = _l21_block(a, b)
    if flip:
        d = np.minimum(d, _l21_block(a, b[:, ::-1]))
    return d


def _map_blocks(fn, n_rows, workers):
    starts = list(range(0, n_rows, BLOCK_ROWS))
    if workers and workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            return list(pool.map(fn, starts))
    return [fn(s) for s in starts]


def pairwise_distances(a, b, metric="l21", workers=1):
    """Full distance matrix between two streamline sets (``l21`` or ``mdf``)."""
    a, b = _as_bundle(a), _as_bundle(b)
    _check_same_p(a, b)
    flip = _flip(metric)
    blocks = _map_blocks(lambda s: _block_distances(a[s:s + BLOCK_ROWS], b, flip), len(a), workers)
    return np.vstack(blocks)


def _flip(metric):
    if metric not in ("l21", "mdf"):
        raise ValueError(f"unknown metric {metric!r}")
    return metric == "mdf"


def min_distances(a, b, metric="l21", workers=1):
    """Row and column minima of the distance matrix without storing it.

    Returns ``(row_min, row_arg, col_min, col_arg)``; ties resolve to the
    lowest index.
    """
    a, b = _as_bundle(a), _as_bundle(b)
    _check_same_p(a, b)
    flip = _flip(metric)

    def run(s):
        d = _block_distances(a[s:s + BLOCK_ROWS], b, flip)
        return d.min(axis=1), d.argmin(axis=1), d.min(axis=0), d.argmin(axis=0) + s

    results = _map_blocks(run, len(a), workers)
    row_min = np.concatenate([r[0] for r in results])
    row_arg = np.concatenate([r[1] for r in results])
    col_min, col_arg = results[0][2].copy(), results[0][3].copy()
    for _, _, cmin, carg in results[1:]:
        better = cmin < col_min
        col_min[better], col_arg[better] = cmin[better], carg[better]
    return row_min, row_arg, col_min, col_arg


def l21_distance(a, b):
    """Mean Euclidean distance between index-corresponding points."""
    a, b = _as_bundle(a), _as_bundle(b)
    _check_same_p(a, b)
    return float(_l21_block(a[:1], b[:1])[0, 0])


def mdf_distance(a, b):
    """Mean direct-flip distance: the smaller of L2,1 to ``b`` and to reversed ``b``."""
    a, b = _as_bundle(a), _as_bundle(b)
    _check_same_p(a, b)
    return float(_block_distances(a[:1], b[:1], flip=True)[0, 0])


def chamfer_loss(moved, fixed, workers=1):
    """Symmetric average-minimum L2,1 distance between two streamline sets."""
    row_min, _, col_min, _ = min_distances(moved, fixed, "l21", workers)
    return _seq_mean(row_min) + _seq_mean(col_min)


def chamfer_loss_and_grad(moved, fixed, workers=1):
    """Loss value and its (sub)gradient w.r.t. the moved streamline points."""
    m, f = _as_bundle(moved), _as_bundle(fixed)
    row_min, row_arg, col_min, col_arg = min_distances(m, f, "l21", workers)
    loss = _seq_mean(row_min) + _seq_mean(col_min)
    n_m, n_f, p = len(m), len(f), m.shape[1]

    def unit(diff):
        norm = np.linalg.norm(diff, axis=-1, keepdims=True)
        return np.divide(diff, norm, out=np.zeros_like(diff), where=norm > 0)

    grad = unit(m - f[row_arg]) / (n_m * p)
    np.add.at(grad, col_arg, unit(m[col_arg] - f) / (n_f * p))
    return loss, grad


def abd(bundle_a, bundle_b, workers=1):
    """Average bundle distance: mean of the two directional mean min-MDF values."""
    row_min, _, col_min, _ = min_distances(bundle_a, bundle_b, "mdf", workers)
    return (_seq_mean(row_min) + _seq_mean(col_min)) / 2.0


# -- tract density and weighted dice -------------------------------------------------

@dataclass(frozen=True, eq=False)
class TractDensityMap:
    origin: np.ndarray   # (3,) mm, corner of voxel (0, 0, 0)
    voxel_size: float
    counts: np.ndarray   # (nx, ny, nz) int64

    def same_grid(self, other):
        return (self.voxel_size == other.voxel_size
                and np.array_equal(self.origin, other.origin)
                and self.counts.shape == other.counts.shape)


def grid_bounds(tractograms, voxel_size):
    """Voxel-aligned ``(lo, hi)`` covering every point of the given tractograms."""
    if not voxel_size > 0:
        raise ValidationError("voxel size must be positive")
    pts = np.vstack([t.coords if hasattr(t, "coords") else np.asarray(t).reshape(-1, 3)
                     for t in tractograms])
    lo = np.floor(pts.min(axis=0) / voxel_size) * voxel_size
    hi = (np.floor(pts.max(axis=0) / voxel_size) + 1) * voxel_size
    return lo, hi


def tract_density_map(bundle, voxel_size=2.0, bounds=None):
    """Count streamline points per voxel on a half-open floor-binned grid.

    Points outside ``bounds`` are dropped.  Without ``bounds`` the grid is the
    voxel-aligned box around the bundle.
    """
    if not voxel_size > 0:
        raise ValidationError("voxel size must be positive")
    pts = bundle.coords if hasattr(bundle, "coords") else np.asarray(bundle, float).reshape(-1, 3)
    lo, hi = grid_bounds([pts], voxel_size) if bounds is None else map(np.asarray, bounds)
    lo = np.asarray(lo, dtype=np.float64)
    shape = tuple(int(s) for s in np.ceil((np.asarray(hi, float) - lo) / voxel_size - 1e-9))
    if min(shape) < 1:
        raise ValidationError("empty grid bounds")
    idx = np.floor((pts - lo) / voxel_size).astype(np.int64)
    inside = np.all((idx >= 0) & (idx < np.array(shape)), axis=1)
    flat = np.ravel_multi_index(tuple(idx[inside].T), shape)
    counts = np.bincount(flat, minlength=int(np.prod(shape))).astype(np.int64).reshape(shape)
    return TractDensityMap(lo, float(voxel_size), counts)


def wdice(map_a, map_b):
    """Density-weighted Dice: overlapping mass over total mass."""
    if not map_a.same_grid(map_b):
        raise ValidationError("density maps are defined on different grids")
    a, b = map_a.counts, map_b.counts
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        raise ValidationError("both density maps are empty")
    both = (a > 0) & (b > 0)
    return (int(a[both].sum()) + int(b[both].sum())) / total


# -- bundle-wise report -----------------------------------------------------------

def bundle_report(moved, fixed, voxel_size=2.0, workers=1):
    """Per-bundle ABD and wDice rows plus their means.

    Returns a list of dicts with keys ``bundle, abd_mm, wdice, n_moving,
    n_fixed``.  Unlabeled inputs yield one ``"whole"`` row.
    """
    if moved.is_labeled != fixed.is_labeled:
        raise ValidationError("one tractogram is labeled and the other is not")
    bounds = grid_bounds([moved, fixed], voxel_size)
    if not moved.is_labeled:
        pairs = [("whole", moved, fixed)]
    else:
        mb, fb = moved.bundles(), fixed.bundles()
        if set(mb) != set(fb):
            missing = sorted(set(mb) ^ set(fb))
            raise ValidationError(f"bundle labels differ between tractograms: {missing}")
        pairs = [(lab, mb[lab], fb[lab]) for lab in sorted(mb) if lab != UNLABELED]
    rows = []
    for name, a, b in pairs:
        rows.append({
            "bundle": name,
            "abd_mm": abd(a, b, workers),
            "wdice": wdice(tract_density_map(a, voxel_size, bounds),
                           tract_density_map(b, voxel_size, bounds)),
            "n_moving": len(a),
            "n_fixed": len(b),
        })
    return rows
