"""Reference reconstructors: KNN, bilinear, bicubic, direct regression and a minimal DDPM."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import conditioning as cond
from .flow import TrainConfig, TrainResult, hermitian_project, train
from .nn import NonFiniteError, ParamStore, VelocityNet, VelocityNetConfig

# ---------------------------------------------------------------------------
# interpolators
# ---------------------------------------------------------------------------


def knn_reconstruct_a(y: np.ndarray, H: int, W: int, k: int = 4) -> np.ndarray:
    """Inverse-distance weighted mean of the k nearest observations.

    Observation (i, j) sits at full-resolution pixel (s_r*i, s_c*j). A pixel that
    coincides with an observation copies it. Ties in distance are broken by
    observation index (row-major), so the result is deterministic.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    y = np.asarray(y, dtype=np.float64)
    h, w = y.shape
    sr, sc = H // h, W // w
    k = min(k, y.size)
    orow, ocol = np.meshgrid(np.arange(h) * sr, np.arange(w) * sc, indexing="ij")
    prow, pcol = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    d = np.hypot(prow.reshape(-1, 1) - orow.reshape(1, -1), pcol.reshape(-1, 1) - ocol.reshape(1, -1))
    nearest = np.argsort(d, axis=1, kind="stable")[:, :k]
    dn = np.take_along_axis(d, nearest, axis=1)
    vals = y.reshape(-1)[nearest]
    hit = dn[:, 0] == 0
    with np.errstate(divide="ignore"):
        wts = np.where(dn > 0, 1.0 / dn, 0.0)
    out = np.empty(H * W)
    out[hit] = vals[hit, 0]
    miss = ~hit
    out[miss] = np.sum(wts[miss] * vals[miss], axis=1) / np.sum(wts[miss], axis=1)
    return out.reshape(H, W)


def knn_reconstruct_b(neighbors) -> np.ndarray:
    """Average of the neighbour matrices followed by Hermitian projection.

    ``neighbors`` is a sequence of complex (N, N) matrices or CovarianceMaps.
    """
    mats = [np.asarray(getattr(R, "matrix", R)) for R in neighbors]
    if not mats:
        raise ValueError("need at least one neighbour")
    return hermitian_project(np.mean(np.stack(mats), axis=0))


def bilinear_reconstruct(y: np.ndarray, H: int, W: int) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    h, w = y.shape
    return cond.linear_weights(h, H) @ y @ cond.linear_weights(w, W).T


def bicubic_reconstruct(y: np.ndarray, H: int, W: int) -> np.ndarray:
    return cond.upsample_bicubic(y, H, W)


# ---------------------------------------------------------------------------
# direct regression on the same backbone
# ---------------------------------------------------------------------------


def regression_net(n_cond: int, out_channels: int, base_width: int = 16, depth: int = 2, dtype=np.float32):
    """Backbone fed with c alone; the time input is held at 0."""
    return VelocityNet(VelocityNetConfig(n_cond, out_channels, base_width, depth), dtype=dtype)


def _empty_state(c: np.ndarray, dtype) -> np.ndarray:
    return np.zeros((c.shape[0], 0) + c.shape[2:], dtype=dtype)


def regression_objective(net, params, x1, c, rng):
    v, cache = net.forward(params, _empty_state(c, net.dtype), 0.0, c)
    diff = v.astype(np.float64) - x1
    loss = float(np.mean(diff * diff))
    grad, _ = net.backward(params, cache, (2.0 / v.size) * (v - x1))
    return loss, grad


def regression_train(cond_train, target_train, net: VelocityNet, cfg: TrainConfig, **kw) -> TrainResult:
    return train(cond_train, target_train, net, cfg, objective=regression_objective, **kw)


def regression_reconstruct(net: VelocityNet, params: ParamStore, c_norm: np.ndarray) -> np.ndarray:
    """Single forward pass on normalised conditions; output in normalised units."""
    c_norm = np.asarray(c_norm)
    return net(params, _empty_state(c_norm, net.dtype), 0.0, c_norm)


# ---------------------------------------------------------------------------
# DDPM with epsilon prediction
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DdpmConfig:
    """Linear beta schedule. The default range is the usual [1e-4, 0.02] for
    1000 steps rescaled by 1000/T, which keeps the terminal alpha-bar near zero
    at T=250."""

    T: int = 250
    beta_start: float = 4e-4
    beta_end: float = 0.08
    seed: int = 0

    def __post_init__(self):
        if self.T < 1:
            raise ValueError("T must be >= 1")
        if not 0 < self.beta_start < 1 or not 0 < self.beta_end < 1:
            raise ValueError("betas must lie in (0, 1)")
        if self.T > 1 and not self.beta_start < self.beta_end:
            raise ValueError("need beta_start < beta_end")


def ddpm_schedule(cfg: DdpmConfig) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return (beta, alpha, alpha_bar), each of length T, index t-1 for step t."""
    beta = np.linspace(cfg.beta_start, cfg.beta_end, cfg.T)
    alpha = 1.0 - beta
    return beta, alpha, np.cumprod(alpha)


def ddpm_objective_factory(cfg: DdpmConfig):
    _, _, abar = ddpm_schedule(cfg)

    def objective(net, params, x1, c, rng):
        B = x1.shape[0]
        t = rng.integers(1, cfg.T + 1, size=B)
        eps = rng.standard_normal(x1.shape)
        a = abar[t - 1].reshape(B, 1, 1, 1)
        x_t = (np.sqrt(a) * x1 + np.sqrt(1 - a) * eps).astype(net.dtype)
        pred, cache = net.forward(params, x_t, t / cfg.T, c)
        diff = pred.astype(np.float64) - eps
        loss = float(np.mean(diff * diff))
        grad, _ = net.backward(params, cache, ((2.0 / pred.size) * diff).astype(net.dtype))
        return loss, grad

    return objective


def ddpm_train(cond_train, target_train, net: VelocityNet, train_cfg: TrainConfig, cfg: DdpmConfig, **kw):
    return train(cond_train, target_train, net, train_cfg, objective=ddpm_objective_factory(cfg), **kw)


def ddpm_sample(net: VelocityNet, params: ParamStore, c_norm: np.ndarray, cfg: DdpmConfig) -> np.ndarray:
    """Ancestral sampling from t=T down to 1 with sigma_t^2 = beta_t (no noise at t=1)."""
    c_norm = np.asarray(c_norm)
    beta, alpha, abar = ddpm_schedule(cfg)
    rng = np.random.default_rng(cfg.seed)
    shape = (c_norm.shape[0], net.cfg.out_channels) + c_norm.shape[2:]
    x = rng.standard_normal(shape)
    for t in range(cfg.T, 0, -1):
        eps = net(params, x, t / cfg.T, c_norm).astype(np.float64)
        x = (x - beta[t - 1] / np.sqrt(1 - abar[t - 1]) * eps) / np.sqrt(alpha[t - 1])
        if t > 1:
            x = x + np.sqrt(beta[t - 1]) * rng.standard_normal(shape)
        if not np.all(np.isfinite(x)):
            raise NonFiniteError(f"non-finite DDPM state at step {t}")
    return x.astype(net.dtype)


METHODS = ("knn", "bilinear", "bicubic", "regression", "ddpm", "gfm")
