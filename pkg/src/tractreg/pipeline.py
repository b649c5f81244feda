"""Inference: keypoints on a streamline subset, TPS solve, whole-tractogram warp."""
import logging
import time
from dataclasses import dataclass

from .errors import ValidationError
from .fileio import read_container, write_container
from .network import detect_keypoints, nn_baseline_keypoints
from .streamlines import resample_tractogram, sample_indices
from .tps import DEFAULT_LAMBDA, TpsTransform, apply_transform, solve_tps

logger = logging.getLogger(__name__)

TRANSFORM_MAGIC = b"TTPS"
TRANSFORM_VERSION = 1
DEFAULT_SUBSET = 30000


def save_transform(transform, path):
    meta = {"K": transform.n_controls, "lambda": transform.lam}
    arrays = {"control_points": transform.control_points, "affine": transform.affine,
              "weights": transform.weights}
    write_container(path, TRANSFORM_MAGIC, TRANSFORM_VERSION, meta, arrays)


def load_transform(path):
    meta, arrays = read_container(path, TRANSFORM_MAGIC, TRANSFORM_VERSION)
    t = TpsTransform(arrays["control_points"], arrays["affine"], arrays["weights"], meta["lambda"])
    if t.control_points.shape != (meta["K"], 3) or t.weights.shape != (meta["K"], 3) \
            or t.affine.shape != (3, 4):
        raise ValidationError("transform arrays have inconsistent shapes")
    return t


def keypoint_subset(tractogram, subset_size, seed, n_points):
    """Seeded streamline subset resampled to ``n_points`` for keypoint detection."""
    n = len(tractogram)
    if subset_size is None:
        subset_size = min(DEFAULT_SUBSET, n)
    elif subset_size > n:
        logger.warning("subset size %d exceeds %d streamlines; using all", subset_size, n)
        subset_size = n
    sub = tractogram.subset(sample_indices(n, subset_size, seed))
    return sub if sub.n_points == n_points else resample_tractogram(sub, n_points)


def subject_keypoints(tractogram, params, n_points, subset_size=None, seed=0):
    return detect_keypoints(keypoint_subset(tractogram, subset_size, seed, n_points), params)


@dataclass
class Registration:
    moved: object
    transform: TpsTransform
    moving_keypoints: object
    fixed_keypoints: object
    seconds: dict


def register(moving, fixed, params=None, lam=DEFAULT_LAMBDA, subset_size=None,
             seed=0, matcher="net", n_points=15, n_keypoints=None):
    """Register ``moving`` onto ``fixed``.

    With ``matcher="net"`` keypoints come from the trained network; with
    ``matcher="nn"`` randomly sampled moving points are paired with their
    nearest fixed points (``n_keypoints`` of them, default ``params.n_keypoints``).
    Both subjects use the same subset seed.  Every point of ``moving`` is
    warped, whatever its streamline length.
    """
    t0 = time.perf_counter()
    sub_m = keypoint_subset(moving, subset_size, seed, n_points)
    sub_f = keypoint_subset(fixed, subset_size, seed, n_points)
    if matcher == "net":
        if params is None:
            raise ValidationError("the network matcher needs model parameters")
        kp_m, kp_f = detect_keypoints(sub_m, params), detect_keypoints(sub_f, params)
    elif matcher == "nn":
        k = n_keypoints or (params.n_keypoints if params is not None else None)
        if k is None:
            raise ValidationError("n_keypoints is required for the nn matcher")
        kp_m, kp_f = nn_baseline_keypoints(sub_m, sub_f, k, seed)
    else:
        raise ValidationError(f"unknown matcher {matcher!r}")
    t1 = time.perf_counter()
    transform = solve_tps(kp_m, kp_f, lam)
    t2 = time.perf_counter()
    moved = moving.with_coords(apply_transform(transform, moving.coords))
    t3 = time.perf_counter()
    seconds = {"keypoints": t1 - t0, "solve": t2 - t1, "warp": t3 - t2, "total": t3 - t0}
    logger.info("registered %d streamlines in %.2f s", len(moving), seconds["total"])
    return Registration(moved, transform, kp_m, kp_f, seconds)
