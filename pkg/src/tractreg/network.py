"""Graph-convolutional keypoint classifier and probabilistic keypoint head.

Forward chain for one streamline graph::

    coords -> feature block (linear, leaky ReLU, layer norm)
           -> L x edge convolution (max over along-streamline neighbors)
           -> linear head -> softmax(logits / t)      p(k | x_p), rows sum to 1
           -> column normalization                   p(x_p | k), columns sum to 1
           -> keypoints  x_k = sum_p p(x_p | k) x_p

Every stage has a ``*_forward`` returning ``(out, cache)`` and a matching
``*_backward`` taking the upstream gradient and that cache.
"""
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import ValidationError
from .streamlines import build_graph, sample_indices

NEG_SLOPE = 0.2
LN_EPS = 1e-5
_TINY = np.finfo(np.float64).tiny


@dataclass
class ModelParams:
    """Network weights plus the static architecture description.

    ``arrays`` maps parameter names to float64 arrays:
    ``feat.weight (3, H)``, ``feat.bias``, ``feat.gain``, ``feat.shift`` (H,),
    ``conv{l}.weight (2H, H)``, ``conv{l}.bias (H,)``,
    ``head.weight (H, K)``, ``head.bias (K,)``.
    """

    arrays: dict
    n_keypoints: int
    hidden: int
    layers: int
    temperature: float
    coord_scale: float = 100.0

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValidationError("temperature must be positive")
        expected = param_shapes(self.n_keypoints, self.hidden, self.layers)
        if set(expected) != set(self.arrays):
            raise ValidationError(f"parameter names mismatch: {sorted(set(expected) ^ set(self.arrays))}")
        for name, shape in expected.items():
            arr = np.asarray(self.arrays[name], dtype=np.float64)
            if arr.shape != shape:
                raise ValidationError(f"{name}: expected shape {shape}, got {arr.shape}")
            if not np.all(np.isfinite(arr)):
                raise ValidationError(f"{name} contains non-finite values")
            self.arrays[name] = arr

    @property
    def config(self):
        return {"K": self.n_keypoints, "H": self.hidden, "L": self.layers,
                "t": self.temperature, "coord_scale": self.coord_scale}

    def replace_arrays(self, arrays):
        return ModelParams(dict(arrays), self.n_keypoints, self.hidden, self.layers,
                           self.temperature, self.coord_scale)

    def copy(self):
        return self.replace_arrays({k: v.copy() for k, v in self.arrays.items()})


def param_shapes(n_keypoints, hidden, layers):
    shapes = {"feat.weight": (3, hidden), "feat.bias": (hidden,),
              "feat.gain": (hidden,), "feat.shift": (hidden,)}
    for l in range(layers):
        shapes[f"conv{l}.weight"] = (2 * hidden, hidden)
        shapes[f"conv{l}.bias"] = (hidden,)
    shapes["head.weight"] = (hidden, n_keypoints)
    shapes["head.bias"] = (n_keypoints,)
    return shapes


def init_params(n_keypoints=512, hidden=64, layers=3, temperature=0.6, seed=0,
                coord_scale=100.0):
    """He-style random initialization."""
    rng = np.random.default_rng(seed)
    arrays = {}
    for name, shape in param_shapes(n_keypoints, hidden, layers).items():
        if name == "feat.gain":
            arrays[name] = np.ones(shape)
        elif name.endswith("weight"):
            arrays[name] = rng.normal(0.0, np.sqrt(2.0 / shape[0]), size=shape)
        else:
            arrays[name] = np.zeros(shape)
    return ModelParams(arrays, n_keypoints, hidden, layers, temperature, coord_scale)


# -- activations ---------------------------------------------------------------

def leaky_relu(x):
    return np.where(x > 0, x, NEG_SLOPE * x)


def leaky_relu_grad(x):
    return np.where(x > 0, 1.0, NEG_SLOPE)


# -- feature block -------------------------------------------------------------

def feature_block_forward(coords, weight, bias, gain, shift, coord_scale=1.0):
    """Affine map, leaky ReLU, then per-point layer normalization over channels."""
    x = np.asarray(coords, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ValidationError(f"coords {x.shape} incompatible with weight {weight.shape}")
    xs = x / coord_scale
    z = xs @ weight + bias
    a = leaky_relu(z)
    mu = a.mean(axis=1, keepdims=True)
    c = a - mu
    inv = 1.0 / np.sqrt((c * c).mean(axis=1, keepdims=True) + LN_EPS)
    xhat = c * inv
    return xhat * gain + shift, (xs, z, xhat, inv, gain, weight, coord_scale)


def feature_block_backward(dout, cache):
    xs, z, xhat, inv, gain, weight, coord_scale = cache
    h = xhat.shape[1]
    grads = {"gain": (dout * xhat).sum(axis=0), "shift": dout.sum(axis=0)}
    dxhat = dout * gain
    da = inv / h * (h * dxhat - dxhat.sum(axis=1, keepdims=True)
                    - xhat * (dxhat * xhat).sum(axis=1, keepdims=True))
    dz = da * leaky_relu_grad(z)
    grads["weight"] = xs.T @ dz
    grads["bias"] = dz.sum(axis=0)
    dcoords = dz @ weight.T / coord_scale
    return dcoords, grads


# -- edge convolution ------------------------------------------------------------

def edge_conv_forward(neighbors, feats, weight, bias):
    """Max-aggregated edge MLP over the (at most two) streamline neighbors.

    ``out_i = max_j leaky_relu([f_i, f_j - f_i] @ weight + bias)`` with ties
    resolved toward the lower-index neighbor.
    """
    nb = np.asarray(neighbors)
    if nb.ndim != 2 or nb.shape[1] != 2 or len(nb) != len(feats):
        raise ValidationError("neighbor table does not match the feature rows")
    if np.any(nb < 0):
        raise ValidationError("isolated node: every node needs a streamline neighbor")
    h = feats.shape[1]
    w_self, w_diff = weight[:h], weight[h:]
    # [f_i, f_j - f_i] @ W = f_i @ (W_self - W_diff) + f_j @ W_diff
    own = feats @ (w_self - w_diff) + bias
    msg = feats @ w_diff
    pre_lo = own + msg[nb[:, 0]]
    pre_hi = own + msg[nb[:, 1]]
    take_hi = pre_hi > pre_lo
    pre = np.where(take_hi, pre_hi, pre_lo)
    return leaky_relu(pre), (feats, nb, take_hi, pre, w_self, w_diff)


def edge_conv_backward(dout, cache):
    feats, nb, take_hi, pre, w_self, w_diff = cache
    dpre = dout * leaky_relu_grad(pre)
    src = np.where(take_hi, nb[:, 1:2], nb[:, 0:1])  # chosen neighbor per channel
    n, h = dpre.shape
    flat = (src * h + np.arange(h)).ravel()
    dmsg = np.bincount(flat, weights=dpre.ravel(), minlength=n * h).reshape(n, h)
    # own term used (W_self - W_diff); message term used W_diff
    grads = {
        "weight": np.vstack([feats.T @ dpre, feats.T @ (dmsg - dpre)]),
        "bias": dpre.sum(axis=0),
    }
    dfeats = dpre @ (w_self - w_diff).T + dmsg @ w_diff.T
    return dfeats, grads


# -- head, softmax, bayes, expectation ------------------------------------------------

def linear_forward(x, weight, bias):
    return x @ weight + bias, (x, weight)


def linear_backward(dout, cache):
    x, weight = cache
    return dout @ weight.T, {"weight": x.T @ dout, "bias": dout.sum(axis=0)}


def generalized_softmax(logits, temperature):
    """Row-wise ``softmax(logits / t)`` stabilized by subtracting the row max.

    Exponentials that underflow are floored at the smallest normal double so
    every probability stays strictly positive.
    """
    if not temperature > 0:
        raise ValidationError(f"temperature must be positive, got {temperature}")
    z = np.asarray(logits, dtype=np.float64) / temperature
    z = z - z.max(axis=1, keepdims=True)
    e = np.maximum(np.exp(z), _TINY)
    return e / e.sum(axis=1, keepdims=True)


def softmax_backward(dprobs, probs, temperature):
    inner = (dprobs * probs).sum(axis=1, keepdims=True)
    return probs * (dprobs - inner) / temperature


def bayes_normalize(probs):
    """Turn ``p(k | x_p)`` into ``p(x_p | k)`` under a uniform point prior."""
    probs = np.asarray(probs, dtype=np.float64)
    colsum = probs.sum(axis=0)
    if np.any(colsum <= 0):
        raise ValidationError("a keypoint class has zero total probability")
    return probs / colsum


def bayes_normalize_backward(dp_xk, probs):
    colsum = probs.sum(axis=0)
    return (dp_xk - (dp_xk * probs).sum(axis=0) / colsum) / colsum


def keypoint_expectation(coords, p_xk, atol=1e-4):
    """Expected keypoint locations ``(K, 3)``: ``p_xk.T @ coords``."""
    p_xk = np.asarray(p_xk, dtype=np.float64)
    if np.any(np.abs(p_xk.sum(axis=0) - 1.0) > atol):
        raise ValidationError("p(x_p | k) columns must sum to 1")
    if np.any(p_xk < 0):
        raise ValidationError("p(x_p | k) must be nonnegative")
    return p_xk.T @ np.asarray(coords, dtype=np.float64)


def keypoint_expectation_backward(dkeypoints, coords, p_xk):
    """Returns ``(d p_xk, d coords)``."""
    return coords @ dkeypoints.T, p_xk @ dkeypoints


# -- full network ------------------------------------------------------------------

@dataclass
class ForwardCache:
    caches: list = field(default_factory=list)
    probs: np.ndarray = None
    p_xk: np.ndarray = None
    coords: np.ndarray = None


def forward_logits(params, coords, neighbors, keep_cache=True):
    a = params.arrays
    h, c = feature_block_forward(coords, a["feat.weight"], a["feat.bias"],
                                 a["feat.gain"], a["feat.shift"], params.coord_scale)
    caches = [c]
    for l in range(params.layers):
        h, c = edge_conv_forward(neighbors, h, a[f"conv{l}.weight"], a[f"conv{l}.bias"])
        caches.append(c)
    logits, c = linear_forward(h, a["head.weight"], a["head.bias"])
    caches.append(c)
    return logits, (caches if keep_cache else None)


def network_forward(params, graph):
    """Run the full chain on a graph; returns ``(keypoints (K, 3), cache)``."""
    logits, caches = forward_logits(params, graph.coords, graph.neighbors)
    probs = generalized_softmax(logits, params.temperature)
    p_xk = bayes_normalize(probs)
    keypoints = keypoint_expectation(graph.coords, p_xk)
    return keypoints, ForwardCache(caches, probs, p_xk, graph.coords)


def network_backward(params, cache, dkeypoints):
    """Reverse pass from a keypoint gradient; returns ``(param_grads, coord_grads)``."""
    if cache is None or cache.probs is None:
        raise ValidationError("network_backward needs the cache from network_forward")
    dp_xk, dcoords = keypoint_expectation_backward(dkeypoints, cache.coords, cache.p_xk)
    dprobs = bayes_normalize_backward(dp_xk, cache.probs)
    dlogits = softmax_backward(dprobs, cache.probs, params.temperature)
    grads = {}
    dh, g = linear_backward(dlogits, cache.caches[-1])
    grads["head.weight"], grads["head.bias"] = g["weight"], g["bias"]
    for l in reversed(range(params.layers)):
        dh, g = edge_conv_backward(dh, cache.caches[1 + l])
        grads[f"conv{l}.weight"], grads[f"conv{l}.bias"] = g["weight"], g["bias"]
    dx, g = feature_block_backward(dh, cache.caches[0])
    for k in ("weight", "bias", "gain", "shift"):
        grads[f"feat.{k}"] = g[k]
    return grads, dcoords + dx


def detect_keypoints(tractogram, params, chunk_streamlines=2048):
    """Expected keypoints of a resampled tractogram.

    Softmax is row-wise and edge convolution never crosses streamlines, so
    the column normalization can be accumulated over streamline chunks:
    ``x_k = sum_p s_pk x_p / sum_p s_pk``.
    """
    arr = tractogram.as_array()
    k = params.n_keypoints
    num = np.zeros((k, 3))
    den = np.zeros(k)
    for start in range(0, len(arr), chunk_streamlines):
        graph = build_graph(tractogram.subset(np.arange(start, min(start + chunk_streamlines, len(arr)))))
        logits, _ = forward_logits(params, graph.coords, graph.neighbors, keep_cache=False)
        probs = generalized_softmax(logits, params.temperature)
        num += probs.T @ graph.coords
        den += probs.sum(axis=0)
    return num / den[:, None]


def nn_baseline_keypoints(moving, fixed, n_keypoints, seed):
    """Random moving points matched to their nearest fixed points.

    Returns ``(moving_keypoints, fixed_keypoints)``, both ``(K, 3)``, row-paired.
    """
    if n_keypoints > len(moving.coords):
        raise ValidationError(f"cannot sample {n_keypoints} keypoints from {len(moving.coords)} points")
    idx = sample_indices(len(moving.coords), n_keypoints, seed)
    src = moving.coords[idx]
    _, nn = cKDTree(fixed.coords).query(src, k=1)
    return src.copy(), fixed.coords[nn].copy()
