"""Synthetic bundles, phantoms and ground-truth deformations.

Phantom bundles are jittered copies of parametric centerlines.  A
registration pair is made by warping a phantom with a random, bounded
thin-plate-spline (or sinusoidal) displacement field, recording the exact
per-point displacement so that results can be scored against the truth.
"""
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import NumericalError, ValidationError
from .streamlines import Tractogram, resample_streamline
from .tps import TpsTransform, apply_transform, solve_tps

FAMILIES = ("arc", "helix", "c_shape", "u_shape")
_CENTERLINE_SAMPLES = 200


@dataclass(frozen=True)
class BundleSpec:
    """Parameters of one synthetic bundle.

    ``radius`` is the bend radius; ``extent`` is the helix rise or the
    U-shape leg length.  Offsets are drawn per streamline with standard
    deviation ``sigma`` and clipped at ``3 * sigma``.
    """

    family: str = "arc"
    radius: float = 30.0
    extent: float = 30.0
    n_streamlines: int = 400
    sigma: float = 2.0
    seed: int = 0
    n_points: int = 15
    center: tuple = (0.0, 0.0, 0.0)
    rotation: tuple = (0.0, 0.0, 0.0)  # xyz Euler angles, radians
    label: int = 0

    def validate(self):
        if self.family not in FAMILIES:
            raise ValidationError(f"unknown centerline family {self.family!r}")
        if self.radius <= 0 or self.extent <= 0:
            raise ValidationError("radius and extent must be positive")
        if self.n_streamlines < 1 or self.n_points < 2:
            raise ValidationError("n_streamlines >= 1 and n_points >= 2 required")
        if self.sigma < 0:
            raise ValidationError("sigma must be >= 0")


def centerline(spec, n=_CENTERLINE_SAMPLES):
    """Dense centerline polyline in bundle-local coordinates (before rotation)."""
    r, e = spec.radius, spec.extent
    if spec.family == "arc":
        th = np.linspace(0.0, np.pi, n)
        return np.stack([r * np.cos(th), r * np.sin(th), np.zeros(n)], axis=1)
    if spec.family == "c_shape":
        th = np.linspace(0.25 * np.pi, 1.75 * np.pi, n)
        return np.stack([r * np.cos(th), r * np.sin(th), np.zeros(n)], axis=1)
    if spec.family == "helix":
        th = np.linspace(0.0, 2.0 * np.pi, n)
        return np.stack([r * np.cos(th), r * np.sin(th), e * th / (2 * np.pi) - e / 2], axis=1)
    # u_shape: leg down, half circle, leg up
    n_leg = n // 3
    n_arc = n - 2 * n_leg
    leg = np.linspace(e, 0.0, n_leg, endpoint=False)
    th = np.linspace(np.pi, 2.0 * np.pi, n_arc)
    left = np.stack([-r * np.ones(n_leg), leg, np.zeros(n_leg)], axis=1)
    bottom = np.stack([r * np.cos(th), r * np.sin(th), np.zeros(n_arc)], axis=1)
    right = np.stack([r * np.ones(n_leg), leg[::-1], np.zeros(n_leg)], axis=1)
    return np.vstack([left, bottom, right])


def _clipped_offsets(rng, n, sigma):
    off = rng.normal(0.0, sigma, size=(n, 3)) if sigma > 0 else np.zeros((n, 3))
    norm = np.linalg.norm(off, axis=1, keepdims=True)
    limit = 3.0 * sigma
    scale = np.where(norm > limit, limit / np.where(norm > 0, norm, 1.0), 1.0)
    return off * scale


def gen_bundle(spec):
    """Generate a labeled bundle of ``spec.n_streamlines`` resampled streamlines."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    rot = Rotation.from_euler("xyz", spec.rotation).as_matrix()
    line = centerline(spec) @ rot.T + np.asarray(spec.center, dtype=np.float64)
    seg = np.linalg.norm(np.diff(line, axis=0), axis=1)
    u = np.concatenate([[0.0], np.cumsum(seg)]) / seg.sum()
    start = _clipped_offsets(rng, spec.n_streamlines, spec.sigma)
    end = _clipped_offsets(rng, spec.n_streamlines, spec.sigma)
    out = np.empty((spec.n_streamlines, spec.n_points, 3))
    for i in range(spec.n_streamlines):
        offset = (1.0 - u)[:, None] * start[i] + u[:, None] * end[i]
        out[i] = resample_streamline(line + offset, spec.n_points)
    labels = np.full(spec.n_streamlines, spec.label)
    return Tractogram.from_array(out, labels, {spec.label: f"{spec.family}_{spec.label}"})


def phantom_specs(n_bundles=6, seed=0, n_streamlines=400, n_points=15, sigma=2.0,
                  min_separation=40.0, half_box=45.0, max_tries=10000):
    """Bundle specs with centroids at least ``min_separation`` mm apart."""
    if n_bundles < 1:
        raise ValidationError("n_bundles must be >= 1")
    rng = np.random.default_rng(seed)
    centers = []
    tries = 0
    while len(centers) < n_bundles:
        tries += 1
        if tries > max_tries:
            raise ValidationError("could not place bundles with the requested separation")
        c = rng.uniform(-half_box, half_box, size=3)
        if all(np.linalg.norm(c - o) >= min_separation for o in centers):
            centers.append(c)
    specs = []
    for b, c in enumerate(centers):
        specs.append(BundleSpec(
            family=FAMILIES[b % len(FAMILIES)],
            radius=float(rng.uniform(15.0, 28.0)),
            extent=float(rng.uniform(20.0, 35.0)),
            n_streamlines=n_streamlines,
            sigma=sigma,
            seed=int(rng.integers(2**31)),
            n_points=n_points,
            center=tuple(float(v) for v in c),
            rotation=tuple(float(v) for v in rng.uniform(0.0, 2 * np.pi, size=3)),
            label=b,
        ))
    return specs


def gen_phantom(n_bundles=6, seed=0, **kwargs):
    """Union of separated bundles labeled ``0 .. n_bundles - 1``."""
    bundles = [gen_bundle(s) for s in phantom_specs(n_bundles, seed, **kwargs)]
    names = {}
    for b in bundles:
        names.update(b.label_names)
    return Tractogram(np.vstack([b.coords for b in bundles]),
                      np.concatenate([b.lengths for b in bundles]),
                      np.concatenate([b.labels for b in bundles]), names)


@dataclass(eq=False)
class GroundTruthWarp:
    """Known deformation from fixed to moving.

    ``displacement[i] = moving.coords[i] - fixed.coords[i]`` for every point.
    ``transform`` is the generating TPS (``None`` for sinusoidal warps).
    """

    displacement: np.ndarray
    d_max: float
    kind: str = "tps"
    transform: TpsTransform = None
    info: dict = field(default_factory=dict)

    def recover(self, moving):
        """Map moving points back with the recorded correspondences."""
        return moving.with_coords(moving.coords - self.displacement)


def _probe_points(tract, n=10, pad=5.0):
    lo, hi = tract.coords.min(axis=0) - pad, tract.coords.max(axis=0) + pad
    axes = [np.linspace(lo[d], hi[d], n) for d in range(3)]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    return np.vstack([grid, tract.coords])


def _draw_tps(tract, d_max, rng, n_controls):
    lo, hi = tract.coords.min(axis=0), tract.coords.max(axis=0)
    controls = rng.uniform(lo, hi, size=(n_controls, 3))
    disp = rng.normal(size=(n_controls, 3))
    unit = solve_tps(controls, controls + disp, lam=0.0)
    probes = _probe_points(tract)
    peak = np.linalg.norm(apply_transform(unit, probes) - probes, axis=1).max()
    scale = d_max / peak * (1.0 - 1e-6)
    ident = np.hstack([np.eye(3), np.zeros((3, 1))])
    return TpsTransform(controls, ident + scale * (unit.affine - ident), scale * unit.weights, 0.0)


def _draw_sine(tract, d_max, rng):
    span = np.ptp(tract.coords, axis=0).max()
    freq = rng.normal(size=(3, 3)) * (2 * np.pi / span)
    phase = rng.uniform(0, 2 * np.pi, size=3)
    amp = rng.uniform(0.5, 1.0, size=3)
    probes = _probe_points(tract)
    peak = np.linalg.norm(amp * np.sin(probes @ freq.T + phase), axis=1).max()
    amp = amp * d_max / peak * (1.0 - 1e-6)
    return lambda x: amp * np.sin(x @ freq.T + phase)


def make_pair(tract, d_max=5.0, seed=0, kind="tps", n_controls=8, max_retries=10):
    """Create ``(moving, fixed, truth)`` where ``moving`` is a warped copy of ``tract``.

    Raises
    ------
    NumericalError
        If no draw satisfies the displacement bound within ``max_retries``.
    """
    if d_max < 0:
        raise ValidationError("d_max must be >= 0")
    if kind not in ("tps", "sine"):
        raise ValidationError(f"unknown warp kind {kind!r}")
    fixed = tract
    if d_max == 0:
        zero = np.zeros_like(tract.coords)
        truth = GroundTruthWarp(zero, 0.0, kind, TpsTransform.identity(tract.coords[:4]) if kind == "tps" else None)
        return tract.with_coords(tract.coords.copy()), fixed, truth
    rng = np.random.default_rng(seed)
    for attempt in range(max_retries):
        try:
            if kind == "tps":
                transform = _draw_tps(tract, d_max, rng, n_controls)
                moved = apply_transform(transform, tract.coords)
            else:
                transform = None
                moved = tract.coords + _draw_sine(tract, d_max, rng)(tract.coords)
        except NumericalError:
            continue
        disp = moved - tract.coords
        if np.linalg.norm(disp, axis=1).max() <= d_max:
            truth = GroundTruthWarp(disp, float(d_max), kind, transform, {"attempts": attempt + 1})
            return tract.with_coords(moved), fixed, truth
    raise NumericalError(f"no warp satisfying d_max={d_max} after {max_retries} draws")
