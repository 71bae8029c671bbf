"""Linear-transport flow matching: training objective, Euler sampler and reconstruction."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import conditioning as cond
from .nn import AdamState, NonFiniteError, ParamStore, VelocityNet, adam_step

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    lr: float = 2e-3
    epochs: int = 60
    seed: int = 0
    task: str = "a"

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 1 or not self.lr > 0:
            raise ValueError("need batch_size >= 1, epochs >= 1 and lr > 0")


@dataclass(frozen=True)
class InferenceConfig:
    steps: int = 10
    seed: int = 0
    hermitian_projection: bool = True
    psd_clip: bool = False

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")


@dataclass
class FlowSample:
    x0: np.ndarray
    x1: np.ndarray
    t: np.ndarray
    x_t: np.ndarray
    u_target: np.ndarray


def _check_same(a, b):
    if np.shape(a) != np.shape(b):
        raise ValueError(f"shape mismatch {np.shape(a)} vs {np.shape(b)}")


def _per_sample(t, x):
    # scalar or (B,) times broadcast over (B, ...)
    t = np.asarray(t, dtype=x.dtype)
    return t.reshape(t.shape + (1,) * (x.ndim - t.ndim)) if t.ndim else t


def sample_path(x0, x1, t):
    _check_same(x0, x1)
    x0 = np.asarray(x0)
    x1 = np.asarray(x1)
    if np.any((np.asarray(t) < 0) | (np.asarray(t) > 1)):
        raise ValueError("t must lie in [0, 1]")
    tt = _per_sample(t, x0)
    return (1 - tt) * x0 + tt * x1


def target_velocity(x0, x1):
    _check_same(x0, x1)
    return np.asarray(x1) - np.asarray(x0)


def gfm_loss(v_pred, u_target) -> float:
    """Mean squared velocity error over batch and elements."""
    _check_same(v_pred, u_target)
    diff = np.asarray(v_pred, dtype=np.float64) - np.asarray(u_target, dtype=np.float64)
    if not np.all(np.isfinite(diff)):
        raise NonFiniteError("non-finite values in loss inputs")
    return float(np.mean(diff * diff))


def draw_flow_sample(x1: np.ndarray, rng: np.random.Generator) -> FlowSample:
    x0 = rng.standard_normal(x1.shape).astype(x1.dtype)
    t = rng.uniform(0.0, 1.0, size=x1.shape[0])
    return FlowSample(x0, x1, t, sample_path(x0, x1, t).astype(x1.dtype), target_velocity(x0, x1))


# an objective maps (net, params, x1 batch, c batch, rng) -> (loss, flat grad)
Objective = Callable[[VelocityNet, ParamStore, np.ndarray, np.ndarray, np.random.Generator], tuple]


def gfm_objective(net, params, x1, c, rng):
    fs = draw_flow_sample(x1, rng)
    v, cache = net.forward(params, fs.x_t, fs.t, c)
    loss = gfm_loss(v, fs.u_target)
    grad_v = (2.0 / v.size) * (v - fs.u_target)
    grad, _ = net.backward(params, cache, grad_v)
    return loss, grad


@dataclass
class TrainResult:
    params: ParamStore
    best_params: ParamStore
    adam: AdamState
    losses: list[float] = field(default_factory=list)
    best_loss: float = float("inf")
    epochs_done: int = 0


def train(
    cond_train: np.ndarray,
    target_train: np.ndarray,
    net: VelocityNet,
    cfg: TrainConfig,
    params: ParamStore | None = None,
    adam: AdamState | None = None,
    start_epoch: int = 0,
    objective: Objective = gfm_objective,
    on_epoch: Callable[[int, float, TrainResult], None] | None = None,
) -> TrainResult:
    """Minibatch Adam on normalised (c, x1) pairs.

    Every epoch draws its permutation, noise and times from ``rng([seed, epoch])``,
    so resuming at ``start_epoch`` with the saved Adam state reproduces the
    uninterrupted run exactly.
    """
    n = target_train.shape[0]
    if cond_train.shape[0] != n:
        raise ValueError("condition and target counts differ")
    params = params if params is not None else net.init_params(cfg.seed)
    adam = adam if adam is not None else AdamState.zeros_like(params)
    result = TrainResult(params, params.copy(), adam, epochs_done=start_epoch)
    x_all = np.asarray(target_train, dtype=net.dtype)
    c_all = np.asarray(cond_train, dtype=net.dtype)
    for epoch in range(start_epoch, cfg.epochs):
        rng = np.random.default_rng([cfg.seed, epoch])
        order = rng.permutation(n)
        total, seen = 0.0, 0
        for b0 in range(0, n, cfg.batch_size):
            idx = order[b0 : b0 + cfg.batch_size]
            loss, grad = objective(net, params, x_all[idx], c_all[idx], rng)
            if not np.isfinite(loss):
                raise NonFiniteError(f"non-finite loss at epoch {epoch}, batch starting {b0}")
            adam_step(params, grad, adam, cfg.lr)
            total += loss * len(idx)
            seen += len(idx)
        mean = total / seen
        result.losses.append(mean)
        result.epochs_done = epoch + 1
        if mean < result.best_loss:
            result.best_loss = mean
            result.best_params = params.copy()
        log.info("epoch %d loss %.6f", epoch, mean)
        if on_epoch is not None:
            on_epoch(epoch, mean, result)
    return result


def euler_integrate(model, params, c, cfg: InferenceConfig, x0: np.ndarray | None = None) -> np.ndarray:
    """Fixed-grid Euler from t=0 to t=1 with t_i = i/N.

    ``model(params, x, t, c)`` is any velocity field; without ``x0`` the start
    state is drawn from N(0, I) with ``cfg.seed`` using the model's
    ``cfg.out_channels``.
    """
    c = np.asarray(c)
    if x0 is None:
        rng = np.random.default_rng(cfg.seed)
        out_ch = model.cfg.out_channels
        x0 = rng.standard_normal((c.shape[0], out_ch) + c.shape[2:])
    dtype = getattr(model, "dtype", np.asarray(x0).dtype)
    x = np.array(x0, dtype=dtype)
    dt = 1.0 / cfg.steps
    for i in range(cfg.steps):
        x = x + np.asarray(model(params, x, i / cfg.steps, c), dtype=dtype) * dt
        if not np.all(np.isfinite(x)):
            raise NonFiniteError(f"non-finite state after Euler step {i}")
    return x


def hermitian_project(R: np.ndarray) -> np.ndarray:
    R = np.asarray(R)
    if R.ndim < 2 or R.shape[-1] != R.shape[-2]:
        raise ValueError("hermitian_project needs square matrices")
    return 0.5 * (R + np.conj(np.swapaxes(R, -1, -2)))


def psd_clip(R: np.ndarray) -> np.ndarray:
    w, V = np.linalg.eigh(R)
    return hermitian_project((V * np.maximum(w, 0)[..., None, :]) @ np.conj(np.swapaxes(V, -1, -2)))


def planes_to_complex(x: np.ndarray) -> np.ndarray:
    """(..., 2, N, N) real/imaginary planes -> (..., N, N) complex."""
    x = np.asarray(x, dtype=np.float64)
    return x[..., 0, :, :] + 1j * x[..., 1, :, :]


def complex_to_planes(R: np.ndarray) -> np.ndarray:
    return np.stack([R.real, R.imag], axis=-3)


# ---------------------------------------------------------------------------
# normalisation shared by every learned method
# ---------------------------------------------------------------------------


@dataclass
class Normalizer:
    """Condition and target z-score statistics from the training split.

    Target channels reuse the statistics of the condition channel with the same
    meaning: the observed gain channel for task A, the pooled neighbour
    real/imaginary planes for task B.
    """

    task: str
    cond: cond.NormStats
    target: cond.NormStats

    @classmethod
    def fit(cls, task: str, cond_train: np.ndarray, k: int = 8) -> "Normalizer":
        if task == "a":
            cs = cond.compute_norm_stats(cond_train)
            ts = cond.NormStats(cs.mu[:1].copy(), cs.sigma[:1].copy())
        else:
            n, ch, h, w = cond_train.shape
            planes = np.asarray(cond_train).reshape(n * (ch // 2), 2, h, w)
            ts = cond.compute_norm_stats(planes)
            cs = cond.NormStats(np.tile(ts.mu, ch // 2), np.tile(ts.sigma, ch // 2))
        return cls(task, cs, ts)

    def to_dict(self) -> dict:
        return {"task": self.task, "cond": self.cond.to_dict(), "target": self.target.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "Normalizer":
        return cls(d["task"], cond.NormStats.from_dict(d["cond"]), cond.NormStats.from_dict(d["target"]))

    def norm_cond(self, c):
        return cond.normalize(c, self.cond)

    def norm_target(self, x):
        return cond.normalize(x, self.target)

    def denorm_target(self, x):
        return cond.denormalize(x, self.target)


# ---------------------------------------------------------------------------
# end-to-end reconstruction
# ---------------------------------------------------------------------------


def finish_task_b(x_hat: np.ndarray, cfg: InferenceConfig) -> np.ndarray:
    R = planes_to_complex(x_hat)
    if cfg.hermitian_projection:
        R = hermitian_project(R)
    if cfg.psd_clip:
        R = psd_clip(R)
    return R


def reconstruct(
    task: str,
    model: VelocityNet,
    params: ParamStore,
    observation,
    normalizer: Normalizer,
    cfg: InferenceConfig = InferenceConfig(),
    *,
    shape: tuple[int, int] | None = None,
    mask_mode: str = "estimated",
    tau_b: float = 8.0,
    oracle=None,
):
    """Condition -> normalise -> Euler -> denormalise (-> complex R, Hermitian).

    Task A: ``observation`` is the low-resolution (h, w) grid and ``shape`` the
    target (H, W); returns the unclamped (H, W) map in pixel units.
    Task B: ``observation`` is the K ring neighbours (CovarianceMaps, or an array
    (K, 2, N, N) already in compass order); returns the complex (N, N) matrix.
    """
    if task == "a":
        if shape is None:
            raise ValueError("task A reconstruction needs the target shape")
        c = cond.assemble_condition_a(observation, *shape, mask_mode=mask_mode, tau_b=tau_b, oracle=oracle)
    elif task == "b":
        if isinstance(observation, np.ndarray):
            c = cond.stack_neighbor_planes(observation.astype(np.float32))
        else:
            c = cond.assemble_condition_b(list(observation))
    else:
        raise ValueError(f"unknown task {task!r}")
    x = euler_integrate(model, params, normalizer.norm_cond(c[None]), cfg)
    x_hat = normalizer.denorm_target(x)[0]
    if task == "a":
        return x_hat[0]
    return finish_task_b(x_hat, cfg)

