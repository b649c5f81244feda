"""Streamline containers, arc-length resampling, patch sampling and graphs.

A streamline is an ``(n, 3)`` float array of RAS millimeter coordinates.
A :class:`Tractogram` stores many streamlines back to back in a single
coordinate buffer, in the spirit of an array sequence.
"""
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateStreamlineError, ValidationError

UNLABELED = -1


def _as_points(points):
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValidationError(f"streamline must have shape (n, 3), got {pts.shape}")
    if not np.all(np.isfinite(pts)):
        raise ValidationError("streamline contains non-finite coordinates")
    return pts


def arc_length(points):
    """Total polyline length in mm."""
    pts = np.asarray(points, dtype=np.float64)
    return float(np.linalg.norm(np.diff(pts, axis=0), axis=1).sum())


def resample_streamline(points, n_points):
    """Resample a polyline to ``n_points`` points equally spaced in arc length.

    Linear interpolation between input vertices; the first and last input
    points are reproduced exactly.

    Parameters
    ----------
    points : (n, 3) array_like
        Input polyline, ``n >= 2``.
    n_points : int
        Number of output points, at least 2.

    Returns
    -------
    (n_points, 3) ndarray

    Raises
    ------
    DegenerateStreamlineError
        If the polyline has zero arc length.
    """
    pts = _as_points(points)
    if n_points < 2:
        raise ValidationError("n_points must be >= 2")
    if len(pts) < 2:
        raise DegenerateStreamlineError("streamline needs at least 2 points")
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    keep = np.concatenate([[True], seg > 0])
    pts, seg = pts[keep], seg[seg > 0]
    if len(seg) == 0:
        raise DegenerateStreamlineError("streamline has zero arc length")
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    targets = np.linspace(0.0, cum[-1], n_points)
    out = np.empty((n_points, 3))
    for d in range(3):
        out[:, d] = np.interp(targets, cum, pts[:, d])
    out[0], out[-1] = pts[0], pts[-1]
    return out


@dataclass(frozen=True, eq=False)
class Tractogram:
    """An immutable set of streamlines.

    Attributes
    ----------
    coords : (M, 3) float64 ndarray
        All points of all streamlines, concatenated.
    lengths : (N,) int64 ndarray
        Point count of each streamline.
    labels : (N,) int64 ndarray
        Bundle label per streamline, ``-1`` when unlabeled.
    label_names : dict
        Optional bundle id -> name table.
    """

    coords: np.ndarray
    lengths: np.ndarray
    labels: np.ndarray = None
    label_names: dict = field(default_factory=dict)

    def __post_init__(self):
        coords = np.ascontiguousarray(self.coords, dtype=np.float64).reshape(-1, 3)
        lengths = np.asarray(self.lengths, dtype=np.int64).reshape(-1)
        if len(lengths) == 0:
            raise ValidationError("a tractogram needs at least one streamline")
        if np.any(lengths < 2):
            raise ValidationError("every streamline needs at least 2 points")
        if int(lengths.sum()) != len(coords):
            raise ValidationError("lengths do not add up to the number of points")
        if not np.all(np.isfinite(coords)):
            raise ValidationError("tractogram contains non-finite coordinates")
        if self.labels is None:
            labels = np.full(len(lengths), UNLABELED, dtype=np.int64)
        else:
            labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
            if labels.shape != lengths.shape:
                raise ValidationError("one label per streamline is required")
        for arr in (coords, lengths, labels):
            arr.flags.writeable = False
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "lengths", lengths)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "label_names", dict(self.label_names))

    @classmethod
    def from_streamlines(cls, streamlines, labels=None, label_names=None):
        pts = [_as_points(s) for s in streamlines]
        if not pts:
            raise ValidationError("a tractogram needs at least one streamline")
        return cls(np.concatenate(pts), [len(p) for p in pts], labels,
                   label_names or {})

    @classmethod
    def from_array(cls, array, labels=None, label_names=None):
        """Build from an ``(N, P, 3)`` array of equal-length streamlines."""
        arr = np.asarray(array, dtype=np.float64)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise ValidationError(f"expected (N, P, 3) array, got {arr.shape}")
        return cls(arr.reshape(-1, 3), np.full(arr.shape[0], arr.shape[1]),
                   labels, label_names or {})

    def __len__(self):
        return len(self.lengths)

    @property
    def n_points(self):
        """Common point count P, or 0 when streamline lengths vary."""
        p = int(self.lengths[0])
        return p if np.all(self.lengths == p) else 0

    @property
    def offsets(self):
        return np.concatenate([[0], np.cumsum(self.lengths)[:-1]])

    def streamline(self, i):
        start = int(self.offsets[i])
        return self.coords[start:start + int(self.lengths[i])]

    def __iter__(self):
        for start, n in zip(self.offsets, self.lengths):
            yield self.coords[start:start + n]

    def as_array(self):
        """View as ``(N, P, 3)``; requires equal lengths."""
        p = self.n_points
        if p == 0:
            raise ValidationError("streamlines have different point counts; resample first")
        return self.coords.reshape(len(self), p, 3)

    @property
    def is_labeled(self):
        return bool(np.any(self.labels != UNLABELED))

    def subset(self, indices):
        idx = np.asarray(indices, dtype=np.int64)
        if self.n_points:
            arr = self.as_array()[idx]
            return Tractogram.from_array(arr, self.labels[idx], self.label_names)
        return Tractogram.from_streamlines([self.streamline(i) for i in idx],
                                           self.labels[idx], self.label_names)

    def with_coords(self, coords):
        """Same topology and labels, new point coordinates."""
        return Tractogram(coords, self.lengths, self.labels, self.label_names)

    def bundles(self):
        """Map label -> sub-tractogram, sorted by label."""
        return {int(lab): self.subset(np.flatnonzero(self.labels == lab))
                for lab in np.unique(self.labels)}

    def equals(self, other):
        return (np.array_equal(self.lengths, other.lengths)
                and np.array_equal(self.labels, other.labels)
                and np.array_equal(self.coords, other.coords))


def resample_tractogram(tractogram, n_points):
    """Resample every streamline to ``n_points`` (degenerate ones raise)."""
    out = np.empty((len(tractogram), n_points, 3))
    for i, s in enumerate(tractogram):
        try:
            out[i] = resample_streamline(s, n_points)
        except DegenerateStreamlineError as exc:
            raise DegenerateStreamlineError(f"streamline {i}: {exc}") from None
    return Tractogram.from_array(out, tractogram.labels, tractogram.label_names)


def sample_indices(n_total, n, seed):
    """Uniform sample of ``n`` of ``range(n_total)`` without replacement."""
    if n > n_total:
        raise ValidationError(f"cannot sample {n} streamlines from {n_total}")
    if n < 1:
        raise ValidationError("sample size must be positive")
    rng = np.random.default_rng(seed)
    return rng.choice(n_total, size=n, replace=False)


def sample_patch(tractogram, n, seed):
    """Random patch of ``n`` streamlines; deterministic given ``seed``."""
    return tractogram.subset(sample_indices(len(tractogram), n, seed))


@dataclass(frozen=True, eq=False)
class StreamlineGraph:
    """Multigraph of sequentially connected streamline points.

    ``neighbors[i]`` holds the lower- and higher-index neighbor of node ``i``
    along its streamline; endpoints repeat their single neighbor.
    """

    coords: np.ndarray      # (n_nodes, 3)
    edges: np.ndarray       # (n_edges, 2), undirected, i < j
    membership: np.ndarray  # (n_nodes,) streamline index
    neighbors: np.ndarray   # (n_nodes, 2)
    n_streamlines: int
    n_points: int

    @property
    def n_nodes(self):
        return len(self.coords)


def build_graph(patch):
    """Build the streamline multigraph of a resampled patch."""
    p = patch.n_points
    if p == 0:
        raise ValidationError("build_graph needs streamlines resampled to a common length")
    n = len(patch)
    node = np.arange(n * p).reshape(n, p)
    edges = np.stack([node[:, :-1].ravel(), node[:, 1:].ravel()], axis=1)
    lo = np.empty((n, p), dtype=np.int64)
    hi = np.empty((n, p), dtype=np.int64)
    lo[:, 1:], lo[:, 0] = node[:, :-1], node[:, 1]
    hi[:, :-1], hi[:, -1] = node[:, 1:], node[:, -2]
    return StreamlineGraph(
        coords=patch.coords.copy(),
        edges=edges,
        membership=np.repeat(np.arange(n), p),
        neighbors=np.stack([lo.ravel(), hi.ravel()], axis=1),
        n_streamlines=n,
        n_points=p,
    )
