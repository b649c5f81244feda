"""Regularized thin-plate-spline warps between matched 3D keypoints.

The warp is ``T(x) = A @ [x, 1] + sum_i W_i U(|P_i - x|)`` with kernel
``U(r) = r**2 log r``.  Its parameters solve the bordered system

    [[K + lam*I, Ph], [Ph.T, 0]] @ [W; A.T] = [Q; 0]

where ``K_ij = U(|P_i - P_j|)`` and ``Ph = [P, 1]``.  The zero block enforces
the side conditions ``sum W_i = 0`` and ``sum W_i P_i^T = 0``.

Before factorization the border columns are re-expressed in centered,
scaled coordinates (an exact change of variables for ``A``) so that the
condition estimate reflects the geometry rather than the unit of length.
"""
import logging
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.linalg import lu_factor, lu_solve
from scipy.linalg.lapack import dgecon

from .errors import NumericalError, ValidationError

logger = logging.getLogger(__name__)

COND_WARN = 1e12
COND_FAIL = 1e14
DEFAULT_LAMBDA = 0.5
WARP_BLOCK = 16384


class IllConditionedWarning(RuntimeWarning):
    pass


def kernel_u(r):
    """``U(r) = r^2 ln r`` with ``U(0) = 0``."""
    r = np.asarray(r, dtype=np.float64)
    if np.any(r < 0):
        raise ValidationError("kernel_u is defined for r >= 0 only")
    safe = np.where(r > 0, r, 1.0)
    out = np.where(r > 0, r * r * np.log(safe), 0.0)
    return out if out.ndim else float(out)


def _kernel_grad_factor(r):
    # dU/dr / r = 2 ln r + 1; multiplied by (P - x) gives dU/dP. Zero at r=0.
    safe = np.where(r > 0, r, 1.0)
    return np.where(r > 0, 2.0 * np.log(safe) + 1.0, 0.0)


def _pairwise_dist(a, b):
    diff = a[:, None, :] - b[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


@dataclass(frozen=True, eq=False)
class TpsTransform:
    """Solved thin-plate-spline warp from moving to fixed space."""

    control_points: np.ndarray  # (K, 3)
    affine: np.ndarray          # (3, 4)
    weights: np.ndarray         # (K, 3)
    lam: float

    @property
    def n_controls(self):
        return len(self.control_points)

    @classmethod
    def identity(cls, control_points, lam=0.0):
        cp = np.asarray(control_points, dtype=np.float64)
        return cls(cp, np.hstack([np.eye(3), np.zeros((3, 1))]), np.zeros_like(cp), lam)


@dataclass(eq=False)
class TpsCache:
    """Forward quantities retained for :func:`tps_backward`."""

    lu_piv: tuple          # factors of the equilibrated system
    border: np.ndarray     # (4, 4) change of variables, A.T = border @ B
    solution: np.ndarray   # (K+4, 3) stacked [W; A.T]
    moving: np.ndarray
    fixed: np.ndarray
    lam: float


def _check_pairs(moving, fixed):
    P = np.asarray(moving, dtype=np.float64)
    Q = np.asarray(fixed, dtype=np.float64)
    if P.ndim != 2 or P.shape[1] != 3 or P.shape != Q.shape:
        raise ValidationError(f"keypoint pairs need matching (K, 3) arrays, got {P.shape} and {Q.shape}")
    if len(P) < 4:
        raise ValidationError("at least 4 keypoint pairs are required")
    if not (np.all(np.isfinite(P)) and np.all(np.isfinite(Q))):
        raise NumericalError("keypoints contain non-finite values")
    return P, Q


def system_matrix(moving, lam):
    P = np.asarray(moving, dtype=np.float64)
    k = len(P)
    L = np.zeros((k + 4, k + 4))
    L[:k, :k] = kernel_u(_pairwise_dist(P, P)) + lam * np.eye(k)
    L[:k, k:k + 3] = P
    L[:k, k + 3] = 1.0
    L[k:, :k] = L[:k, k:].T
    return L


def _border_transform(P, kernel_block):
    """Map ``[x, 1] -> g * [(x - c) / s, 1]`` with ``c`` the centroid and ``s`` the rms radius.

    ``g`` matches the border to the typical kernel entry.
    """
    c = P.mean(axis=0)
    s = np.sqrt(((P - c) ** 2).sum(axis=1).mean())
    s = s if s > 0 else 1.0
    g = np.abs(kernel_block).mean()
    g = g if np.isfinite(g) and g > 0 else 1.0
    T = np.eye(4)
    T[:3, :3] /= s
    T[3, :3] = -c / s
    return T * g


def solve_tps(moving, fixed, lam=DEFAULT_LAMBDA, return_cache=False):
    """Fit the warp mapping ``moving[k]`` onto ``fixed[k]``.

    Parameters
    ----------
    moving, fixed : (K, 3) array_like
        Matched keypoints, paired by row.
    lam : float
        Regularization, ``>= 0``; 0 gives exact interpolation.
    return_cache : bool
        Also return the factorization needed by :func:`tps_backward`.

    Raises
    ------
    NumericalError
        When the estimated condition number exceeds ``COND_FAIL``
        (e.g. duplicated or coplanar control points at ``lam = 0``).
    """
    if not lam >= 0:
        raise ValidationError(f"lambda must be >= 0, got {lam}")
    P, Q = _check_pairs(moving, fixed)
    k = len(P)
    L = system_matrix(P, lam)
    border = _border_transform(P, L[:k, :k])
    L[:k, k:] = L[:k, k:] @ border
    L[k:, :k] = L[:k, k:].T
    anorm = np.abs(L).sum(axis=0).max()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", category=RuntimeWarning)
        lu_piv = lu_factor(L, check_finite=False)
    rcond, info = dgecon(lu_piv[0], anorm, norm="1")
    cond = np.inf if rcond == 0 or info != 0 else 1.0 / rcond
    if not cond <= COND_FAIL:
        raise NumericalError(
            f"TPS system is singular or ill-conditioned (cond ~ {cond:.3g}); "
            "control points may be duplicated or coplanar, try lambda > 0")
    if cond > COND_WARN:
        warnings.warn(f"TPS system condition number ~ {cond:.3g}", IllConditionedWarning, stacklevel=2)
    rhs = np.zeros((k + 4, 3))
    rhs[:k] = Q
    sol = lu_solve(lu_piv, rhs, check_finite=False)
    sol[k:] = border @ sol[k:]
    if not np.all(np.isfinite(sol)):
        raise NumericalError("TPS solve produced non-finite parameters")
    transform = TpsTransform(P.copy(), sol[k:].T.copy(), sol[:k].copy(), float(lam))
    if return_cache:
        return transform, TpsCache(lu_piv, border, sol, P.copy(), Q.copy(), float(lam))
    return transform


def kernel_matrix(transform, pts):
    return kernel_u(_pairwise_dist(np.asarray(pts, dtype=np.float64), transform.control_points))


def apply_transform(transform, pts, block=WARP_BLOCK):
    """Warp an ``(n, 3)`` array of points; evaluated in blocks of ``block`` rows."""
    pts = np.asarray(pts, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValidationError(f"points must have shape (n, 3), got {pts.shape}")
    A, W, cp = transform.affine, transform.weights, transform.control_points
    out = np.empty_like(pts)
    cp_sq = np.einsum("ij,ij->i", cp, cp)
    for start in range(0, len(pts), block):
        x = pts[start:start + block]
        # |x - c|^2 via the expanded form; clipped against round-off.
        d2 = np.einsum("ij,ij->i", x, x)[:, None] + cp_sq[None, :] - 2.0 * (x @ cp.T)
        np.maximum(d2, 0.0, out=d2)
        # r^2 ln r = 0.5 r^2 ln r^2
        u = np.zeros_like(d2)
        pos = d2 > 0
        u[pos] = 0.5 * d2[pos] * np.log(d2[pos])
        out[start:start + block] = x @ A[:, :3].T + A[:, 3] + u @ W
    if not np.all(np.isfinite(out)):
        raise NumericalError("warped points are not finite")
    return out


def apply_transform_exact(transform, pts, block=4096):
    """Warp points using explicit differences (no expanded-norm shortcut).

    Free of cancellation near control points; this is the forward used
    during training, paired with :func:`warp_backward`.
    """
    pts = np.asarray(pts, dtype=np.float64)
    A, W = transform.affine, transform.weights
    out = pts @ A[:, :3].T + A[:, 3]
    for start in range(0, len(pts), block):
        x = pts[start:start + block]
        out[start:start + block] += kernel_u(_pairwise_dist(x, transform.control_points)) @ W
    return out


def warp_backward(transform, pts, grad_out, block=4096):
    """Gradients of :func:`apply_transform_exact` w.r.t. A, W and control points.

    Returns
    -------
    grad_affine : (3, 4)
    grad_weights : (K, 3)
    grad_controls : (K, 3)
        Gradient through the kernel terms only.
    """
    x = np.asarray(pts, dtype=np.float64)
    g = np.asarray(grad_out, dtype=np.float64)
    cp, W = transform.control_points, transform.weights
    grad_affine = np.hstack([g.T @ x, g.sum(axis=0)[:, None]])
    grad_weights = np.zeros_like(W)
    grad_controls = np.zeros_like(cp)
    for start in range(0, len(x), block):
        xb, gb = x[start:start + block], g[start:start + block]
        diff = cp[None, :, :] - xb[:, None, :]          # P_i - x
        r = np.sqrt(np.einsum("nkd,nkd->nk", diff, diff))
        grad_weights += kernel_u(r).T @ gb
        coef = (gb @ W.T) * _kernel_grad_factor(r)
        grad_controls += np.einsum("nk,nkd->kd", coef, diff)
    return grad_affine, grad_weights, grad_controls


def tps_backward(cache, grad_affine, grad_weights):
    """Adjoint of :func:`solve_tps`.

    Given gradients of a scalar loss w.r.t. the solved ``A`` (3, 4) and
    ``W`` (K, 3), return gradients w.r.t. the moving and fixed keypoints.
    The transposed system is solved with the retained LU factors.
    """
    if cache is None:
        raise ValidationError("tps_backward needs the cache returned by solve_tps(return_cache=True)")
    P, Z = cache.moving, cache.solution
    k = len(P)
    dZ = np.vstack([np.asarray(grad_weights, float), np.asarray(grad_affine, float).T])
    # the factored matrix is S.T L S with S = diag(I, border)
    dZ[k:] = cache.border.T @ dZ[k:]
    G = lu_solve(cache.lu_piv, dZ, trans=1, check_finite=False)
    G[k:] = cache.border @ G[k:]
    grad_fixed = G[:k].copy()
    dL = -G @ Z.T
    dK = dL[:k, :k]
    dPh = dL[:k, k:] + dL[k:, :k].T
    diff = P[:, None, :] - P[None, :, :]
    r = np.sqrt(np.einsum("ijd,ijd->ij", diff, diff))
    coef = (dK + dK.T) * _kernel_grad_factor(r)
    grad_moving = np.einsum("ij,ijd->id", coef, diff) + dPh[:, :3]
    return grad_moving, grad_fixed


def sample_lambda(rng, lam_min=1e-3, lam_max=10.0):
    """Log-uniform draw from ``[lam_min, lam_max]``."""
    if not (lam_min > 0 and lam_max >= lam_min):
        raise ValidationError(f"invalid lambda range [{lam_min}, {lam_max}]")
    if lam_min == lam_max:
        return float(lam_min)
    return float(np.exp(rng.uniform(np.log(lam_min), np.log(lam_max))))
