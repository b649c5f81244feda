"""Unsupervised training: patch sampling, siamese keypoints, TPS, chamfer loss, Adam."""
import dataclasses
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, NumericalError, ValidationError
from .fileio import read_container, write_container
from .metrics import chamfer_loss_and_grad
from .network import ModelParams, init_params, network_backward, network_forward
from .streamlines import build_graph, sample_indices
from .tps import apply_transform_exact, sample_lambda, solve_tps, tps_backward, warp_backward

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"TRCK"
CHECKPOINT_VERSION = 1
LOG_HEADER = "iter,epoch,loss_mm,lr,lambda,seconds"


@dataclass
class TrainConfig:
    """Training and model hyperparameters with the default 512-keypoint setup."""

    # model
    n_keypoints: int = 512
    hidden: int = 64
    layers: int = 3
    temperature: float = 0.6
    coord_scale: float = 100.0
    # data
    n_points: int = 15
    patches: int = 4
    patch_size: int = 2200
    subset_size: int = 30000
    # optimizer
    lr: float = 1e-3
    decay: float = 0.5
    decay_every: int = 10
    epochs: int = 1000
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 10.0  # <= 0 disables clipping
    # tps
    lambda_min: float = 1e-3
    lambda_max: float = 10.0
    lambda_infer: float = 0.5
    # run
    seed: int = 0
    checkpoint_every: int = 10

    def validate(self):
        for name in ("n_keypoints", "hidden", "layers", "n_points", "patches", "patch_size",
                     "subset_size", "decay_every", "epochs", "checkpoint_every"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be positive")
        if self.n_points < 2:
            raise ValidationError("n_points must be >= 2")
        if not 0 < self.decay <= 1:
            raise ValidationError("decay must lie in (0, 1]")
        if not self.lr > 0 or not self.temperature > 0 or not self.coord_scale > 0:
            raise ValidationError("lr, temperature and coord_scale must be positive")
        if not 0 < self.lambda_min <= self.lambda_max:
            raise ValidationError("need 0 < lambda_min <= lambda_max")
        if self.lambda_infer < 0:
            raise ValidationError("lambda_infer must be >= 0")
        return self

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValidationError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d).validate()


SECTIONS = {
    "model": ("n_keypoints", "hidden", "layers", "temperature", "coord_scale"),
    "data": ("n_points", "patches", "patch_size", "subset_size"),
    "optim": ("lr", "decay", "decay_every", "epochs", "beta1", "beta2", "eps", "clip_norm"),
    "tps": ("lambda_min", "lambda_max", "lambda_infer"),
    "run": ("seed", "checkpoint_every"),
}


def _coerce(name, text):
    kind = {f.name: f.type for f in dataclasses.fields(TrainConfig)}[name]
    return int(text) if kind in (int, "int") else float(text)


def apply_overrides(config, items, source="<overrides>"):
    """Apply ``section.key=value`` (or bare ``key=value``) strings."""
    values = config.to_dict()
    for lineno, item in items:
        key, sep, val = item.partition("=")
        key, val = key.strip(), val.strip()
        if not sep or not key:
            raise FormatError(f"{source}: expected key=value", line=lineno)
        section, dot, name = key.rpartition(".")
        if dot and (section not in SECTIONS or name not in SECTIONS[section]):
            raise FormatError(f"{source}: unknown key {key!r}", line=lineno)
        if name not in values:
            raise FormatError(f"{source}: unknown key {key!r}", line=lineno)
        try:
            values[name] = _coerce(name, val)
        except ValueError:
            raise FormatError(f"{source}: bad value {val!r} for {key}", line=lineno) from None
    return TrainConfig(**values).validate()


def parse_config(text, base=None, source="<config>"):
    """Parse a flat ``section.key = value`` config; ``#`` starts a comment."""
    items = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if line:
            items.append((lineno, line))
    return apply_overrides(base or TrainConfig(), items, source)


def load_config(path, base=None):
    return parse_config(Path(path).read_text(), base, source=str(path))


def format_config(config):
    lines = []
    values = config.to_dict()
    for section, names in SECTIONS.items():
        lines += [f"{section}.{n} = {values[n]!r}" for n in names]
    return "\n".join(lines) + "\n"


# -- optimizer ---------------------------------------------------------------------

@dataclass
class OptimizerState:
    m: dict
    v: dict
    step: int = 0
    lr: float = 1e-3

    @classmethod
    def zeros_like(cls, arrays, lr=1e-3):
        return cls({k: np.zeros_like(a) for k, a in arrays.items()},
                   {k: np.zeros_like(a) for k, a in arrays.items()}, 0, lr)


def lr_schedule(epoch, lr=1e-3, decay=0.5, every=10):
    """Step decay: ``lr * decay ** (epoch // every)``."""
    if epoch < 0:
        raise ValidationError("epoch must be >= 0")
    return lr * decay ** (epoch // every)


def adam_step(arrays, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update; returns new ``(arrays, state)``."""
    if set(arrays) != set(grads):
        raise ValidationError("gradient names do not match parameters")
    t = state.step + 1
    new_arrays, m, v = {}, {}, {}
    for k, p in arrays.items():
        g = grads[k]
        if g.shape != p.shape:
            raise ValidationError(f"gradient shape {g.shape} != parameter shape {p.shape} for {k}")
        m[k] = beta1 * state.m[k] + (1.0 - beta1) * g
        v[k] = beta2 * state.v[k] + (1.0 - beta2) * g * g
        mhat = m[k] / (1.0 - beta1 ** t)
        vhat = v[k] / (1.0 - beta2 ** t)
        new_arrays[k] = p - lr * mhat / (np.sqrt(vhat) + eps)
    return new_arrays, OptimizerState(m, v, t, lr)


def global_norm(grads):
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


# -- one iteration -----------------------------------------------------------------

def patch_loss_and_grads(params, moving_patch, fixed_patch, lam):
    """Loss of one moving/fixed patch pair and its gradient w.r.t. all weights."""
    gm, gf = build_graph(moving_patch), build_graph(fixed_patch)
    kp_m, cache_m = network_forward(params, gm)
    kp_f, cache_f = network_forward(params, gf)
    transform, tcache = solve_tps(kp_m, kp_f, lam, return_cache=True)
    moved = apply_transform_exact(transform, gm.coords)
    shape = (gm.n_streamlines, gm.n_points, 3)
    loss, dmoved = chamfer_loss_and_grad(moved.reshape(shape), fixed_patch.as_array())
    d_affine, d_weights, d_controls = warp_backward(transform, gm.coords, dmoved.reshape(-1, 3))
    d_kp_m, d_kp_f = tps_backward(tcache, d_affine, d_weights)
    grads_m, _ = network_backward(params, cache_m, d_kp_m + d_controls)
    grads_f, _ = network_backward(params, cache_f, d_kp_f)
    return loss, {k: grads_m[k] + grads_f[k] for k in grads_m}


def train_iteration(moving, fixed, params, opt_state, config, rng, epoch=0):
    """Sample patches, evaluate the loss, backpropagate and take one Adam step.

    Returns ``(params, opt_state, loss, lam)``.

    Raises
    ------
    NumericalError
        On an ill-conditioned TPS system or a non-finite loss or gradient;
        parameters are left untouched in that case.
    """
    lam = sample_lambda(rng, config.lambda_min, config.lambda_max)
    seeds = rng.integers(0, 2**63 - 1, size=(config.patches, 2))
    total = {k: np.zeros_like(a) for k, a in params.arrays.items()}
    losses = []
    for seed_m, seed_f in seeds:
        pm = moving.subset(sample_indices(len(moving), min(config.patch_size, len(moving)), seed_m))
        pf = fixed.subset(sample_indices(len(fixed), min(config.patch_size, len(fixed)), seed_f))
        try:
            loss, grads = patch_loss_and_grads(params, pm, pf, lam)
        except NumericalError as exc:
            raise NumericalError(f"{exc} [lambda={lam:.4g}, patch seeds={seed_m},{seed_f}]") from None
        losses.append(loss)
        for k in total:
            total[k] += grads[k]
    n = len(seeds)
    grads = {k: g / n for k, g in total.items()}
    loss = float(np.mean(losses))
    norm = global_norm(grads)
    if not (np.isfinite(loss) and np.isfinite(norm)):
        per = {k: float(np.sqrt(np.sum(g * g))) for k, g in grads.items()}
        raise NumericalError(f"non-finite loss/gradient: loss={loss}, lambda={lam:.4g}, "
                             f"patch seeds={seeds.tolist()}, gradient norms={per}")
    if config.clip_norm > 0 and norm > config.clip_norm:
        grads = {k: g * (config.clip_norm / norm) for k, g in grads.items()}
    lr = lr_schedule(epoch, config.lr, config.decay, config.decay_every)
    arrays, opt_state = adam_step(params.arrays, grads, opt_state, lr,
                                  config.beta1, config.beta2, config.eps)
    return params.replace_arrays(arrays), opt_state, loss, lam


# -- checkpoints ---------------------------------------------------------------------

@dataclass
class TrainState:
    params: ModelParams
    opt_state: OptimizerState
    config: TrainConfig
    epoch: int = 0           # next epoch to run
    iteration: int = 0       # iterations completed
    rng_state: dict = None
    history: list = field(default_factory=list)


def checkpoint_bytes_meta(state):
    meta = {
        "config": state.config.to_dict(),
        "model": state.params.config,
        "epoch": state.epoch,
        "iteration": state.iteration,
        "adam_step": state.opt_state.step,
        "adam_lr": state.opt_state.lr,
        "rng_state": state.rng_state,
        "seed": state.config.seed,
    }
    arrays = {f"param/{k}": v for k, v in state.params.arrays.items()}
    arrays.update({f"adam_m/{k}": v for k, v in state.opt_state.m.items()})
    arrays.update({f"adam_v/{k}": v for k, v in state.opt_state.v.items()})
    return meta, arrays


def checkpoint_save(state, path):
    meta, arrays = checkpoint_bytes_meta(state)
    write_container(path, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, meta, arrays)


def checkpoint_load(path):
    """Read a checkpoint written by :func:`checkpoint_save`."""
    meta, arrays = read_container(path, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)
    try:
        model = meta["model"]
        config = TrainConfig.from_dict(meta["config"])
        group = lambda prefix: {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}
        params = ModelParams(group("param/"), model["K"], model["H"], model["L"], model["t"],
                             model["coord_scale"])
        opt = OptimizerState(group("adam_m/"), group("adam_v/"), meta["adam_step"], meta["adam_lr"])
        if set(opt.m) != set(params.arrays) or set(opt.v) != set(params.arrays):
            raise FormatError("optimizer moments do not match parameters")
        return TrainState(params, opt, config, meta["epoch"], meta["iteration"], meta["rng_state"])
    except (KeyError, TypeError, ValidationError) as exc:
        raise FormatError(f"incomplete or inconsistent checkpoint: {exc}") from None


def load_model(path):
    return checkpoint_load(path).params


# -- loop ------------------------------------------------------------------------------

def _pairs_for_epoch(n_subjects, pairs, rng):
    if pairs is not None:
        return [pairs[i] for i in rng.permutation(len(pairs))]
    out = []
    for _ in range(n_subjects):
        i, j = rng.choice(n_subjects, size=2, replace=False)
        out.append((int(i), int(j)))
    return out


def new_state(config):
    config.validate()
    params = init_params(config.n_keypoints, config.hidden, config.layers, config.temperature,
                         seed=config.seed, coord_scale=config.coord_scale)
    rng = np.random.default_rng(config.seed)
    return TrainState(params, OptimizerState.zeros_like(params.arrays, config.lr), config,
                      rng_state=rng.bit_generator.state)


def fit(subjects, config=None, state=None, pairs=None, epochs=None, log_path=None,
        checkpoint_dir=None, on_epoch=None):
    """Train on resampled subjects.

    Parameters
    ----------
    subjects : list of Tractogram
        Training tractograms, all resampled to ``config.n_points``.
    config : TrainConfig, optional
        Ignored when resuming from ``state``.
    state : TrainState, optional
        Resume point (e.g. from :func:`checkpoint_load`).
    pairs : list of (int, int), optional
        Explicit ordered (moving, fixed) index pairs visited once per epoch
        in shuffled order.  By default each epoch draws ``len(subjects)``
        random ordered pairs.
    epochs : int, optional
        Stop after this epoch count (defaults to ``config.epochs``).
    log_path : path, optional
        CSV training log, appended to when resuming.
    checkpoint_dir : path, optional
        Receives ``epoch_XXXX.ckpt`` every ``checkpoint_every`` epochs and
        ``last.ckpt`` at the end.
    """
    if len(subjects) < 2 and pairs is None:
        raise ValidationError("training needs at least two subjects")
    state = state or new_state(config or TrainConfig())
    config = state.config
    for s in subjects:
        if s.n_points != config.n_points:
            raise ValidationError(f"subjects must be resampled to {config.n_points} points")
    rng = np.random.default_rng()
    rng.bit_generator.state = state.rng_state
    end = config.epochs if epochs is None else epochs
    log = None
    if log_path is not None:
        fresh = not Path(log_path).exists() or state.iteration == 0
        log = open(log_path, "w" if fresh else "a")
        if fresh:
            log.write(LOG_HEADER + "\n")
    try:
        for epoch in range(state.epoch, end):
            for i, j in _pairs_for_epoch(len(subjects), pairs, rng):
                t0 = time.perf_counter()
                try:
                    params, opt, loss, lam = train_iteration(
                        subjects[i], subjects[j], state.params, state.opt_state, config, rng, epoch)
                except NumericalError as exc:
                    logger.warning("epoch %d: iteration skipped: %s", epoch, exc)
                    continue
                state.params, state.opt_state = params, opt
                state.iteration += 1
                row = (state.iteration, epoch, loss, opt.lr, lam, time.perf_counter() - t0)
                state.history.append(row[:5])
                if log:
                    log.write("{},{},{!r},{!r},{!r},{:.3f}\n".format(*row))
            state.epoch = epoch + 1
            state.rng_state = rng.bit_generator.state
            if log:
                log.flush()
            if checkpoint_dir is not None and state.epoch % config.checkpoint_every == 0:
                checkpoint_save(state, Path(checkpoint_dir) / f"epoch_{state.epoch:04d}.ckpt")
            if on_epoch is not None:
                on_epoch(state)
    finally:
        if log:
            log.close()
    state.rng_state = rng.bit_generator.state
    if checkpoint_dir is not None:
        checkpoint_save(state, Path(checkpoint_dir) / "last.ckpt")
    return state
