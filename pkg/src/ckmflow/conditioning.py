"""Condition tensors: degradation, bicubic alignment, mask/edge semantics, neighbour stacking."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.ndimage import maximum_filter, minimum_filter

from .scene import CovarianceMap, Scene

SIGMA_FLOOR = 1e-6


@dataclass(frozen=True)
class DegradationConfig:
    factor: int = 4
    noise_sigma: float = 30.0
    rng_seed: int = 0

    def __post_init__(self):
        if self.factor < 1:
            raise ValueError("factor must be >= 1")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")


def degrade(x: np.ndarray, cfg: DegradationConfig) -> np.ndarray:
    """Top-left block selection followed by additive Gaussian noise (unclamped)."""
    x = np.asarray(x, dtype=np.float64)
    s = cfg.factor
    H, W = x.shape
    if H % s or W % s:
        raise ValueError(f"factor {s} does not divide grid {H}x{W}")
    y = x[::s, ::s].copy()
    if cfg.noise_sigma > 0:
        rng = np.random.default_rng(cfg.rng_seed)
        y += rng.normal(0.0, cfg.noise_sigma, size=y.shape)
    return y


def cubic_kernel(d: np.ndarray, a: float = -0.5) -> np.ndarray:
    d = np.abs(d)
    return np.where(
        d <= 1,
        (a + 2) * d**3 - (a + 3) * d**2 + 1,
        np.where(d < 2, a * d**3 - 5 * a * d**2 + 8 * a * d - 4 * a, 0.0),
    )


def bicubic_weights(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) Catmull-Rom interpolation matrix, align-corners, edge clamped."""
    if n_in == 1:
        return np.ones((n_out, 1))
    src = np.arange(n_out) * ((n_in - 1) / (n_out - 1)) if n_out > 1 else np.zeros(1)
    base = np.floor(src).astype(int)
    frac = src - base
    M = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    for tap in (-1, 0, 1, 2):
        idx = np.clip(base + tap, 0, n_in - 1)
        np.add.at(M, (rows, idx), cubic_kernel(frac - tap))
    return M


def linear_weights(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) linear interpolation matrix, align-corners, edge clamped."""
    if n_in == 1:
        return np.ones((n_out, 1))
    src = np.arange(n_out) * ((n_in - 1) / (n_out - 1)) if n_out > 1 else np.zeros(1)
    base = np.clip(np.floor(src).astype(int), 0, n_in - 2)
    frac = src - base
    M = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    M[rows, base] += 1 - frac
    M[rows, base + 1] += frac
    return M


def upsample_bicubic(y: np.ndarray, H: int, W: int) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    h, w = y.shape
    if h == 1 and w == 1:
        return np.full((H, W), y[0, 0])
    return bicubic_weights(h, H) @ y @ bicubic_weights(w, W).T


def _closing3(m: np.ndarray) -> np.ndarray:
    # edge-replicated borders so the frame is not eroded away
    return minimum_filter(maximum_filter(m, size=3, mode="nearest"), size=3, mode="nearest")


def extract_mask(y_up: np.ndarray, tau_b: float = 8.0) -> np.ndarray:
    """Outdoor estimate: threshold then one 3x3 closing."""
    m = (np.asarray(y_up) > tau_b).astype(np.uint8)
    return _closing3(m)


def oracle_mask(scene: Scene) -> np.ndarray:
    return scene.outdoor_mask().astype(np.uint8)


def extract_edges(m: np.ndarray) -> np.ndarray:
    """Outdoor pixels with at least one in-building 4-neighbour."""
    m = np.asarray(m).astype(bool)
    padded = np.pad(m, 1, constant_values=True)
    blocked_nb = (
        ~padded[:-2, 1:-1] | ~padded[2:, 1:-1] | ~padded[1:-1, :-2] | ~padded[1:-1, 2:]
    )
    return (m & blocked_nb).astype(np.uint8)


def assemble_condition_a(
    y: np.ndarray,
    H: int,
    W: int,
    mask_mode: str = "estimated",
    tau_b: float = 8.0,
    oracle: np.ndarray | Scene | None = None,
) -> np.ndarray:
    """Stack [bicubic(y), m, e] into a (3, H, W) float32 tensor.

    ``mask_mode="oracle"`` takes m from ``oracle`` (a Scene or a stored outdoor
    mask) instead of thresholding the upsampled observation.
    """
    y_up = upsample_bicubic(y, H, W)
    if mask_mode == "estimated":
        m = extract_mask(y_up, tau_b)
    elif mask_mode == "oracle":
        if oracle is None:
            raise ValueError("oracle mask mode needs a scene or stored mask")
        m = oracle_mask(oracle) if isinstance(oracle, Scene) else (np.asarray(oracle) > 0.5).astype(np.uint8)
        if m.shape != (H, W):
            raise ValueError(f"oracle mask shape {m.shape} != {(H, W)}")
    else:
        raise ValueError(f"unknown mask_mode {mask_mode!r}")
    e = extract_edges(m)
    return np.stack([y_up, m, e]).astype(np.float32)


def _ring_index(offsets: np.ndarray) -> list[int]:
    # N, NE, E, SE, S, SW, W, NW
    order = {(-1, 0): 0, (-1, 1): 1, (0, 1): 2, (1, 1): 3, (1, 0): 4, (1, -1): 5, (0, -1): 6, (-1, -1): 7}
    return [order.get((int(np.sign(dr)), int(np.sign(dc))), -1) for dr, dc in offsets]


def assemble_condition_b(neighbors: Sequence[CovarianceMap], k: int = 8) -> np.ndarray:
    """Stack K neighbours as (2K, N_t, N_t): channel 2k real, 2k+1 imaginary.

    Neighbours are put in compass order from their locations relative to the
    ring centre, so the input order does not matter.
    """
    if len(neighbors) != k:
        raise ValueError(f"expected {k} neighbours, got {len(neighbors)}")
    n = neighbors[0].real.shape[0]
    for nb in neighbors:
        if nb.real.shape != (n, n) or nb.imag.shape != (n, n):
            raise ValueError("neighbour matrices must all be N_t x N_t")
    locs = np.array([nb.location for nb in neighbors], dtype=np.float64)
    slots = _ring_index(locs - locs.mean(axis=0))
    if k != 8 or sorted(slots) != list(range(8)):
        raise ValueError("neighbours do not form a compass ring around a common centre")
    out = np.empty((2 * k, n, n), dtype=np.float32)
    for nb, slot in zip(neighbors, slots):
        out[2 * slot] = nb.real
        out[2 * slot + 1] = nb.imag
    return out


def stack_neighbor_planes(neighbors: np.ndarray) -> np.ndarray:
    """(..., K, 2, N, N) neighbour planes already in compass order -> (..., 2K, N, N)."""
    shape = neighbors.shape
    return neighbors.reshape(*shape[:-4], shape[-4] * 2, *shape[-2:])


@dataclass
class NormStats:
    mu: np.ndarray
    sigma: np.ndarray

    def to_dict(self) -> dict:
        return {"mu": self.mu.tolist(), "sigma": self.sigma.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(np.asarray(d["mu"], dtype=np.float64), np.asarray(d["sigma"], dtype=np.float64))


def compute_norm_stats(tensors: np.ndarray) -> NormStats:
    """Per-channel mean/std of a (n, C, ...) stack, accumulated in record order."""
    x = np.asarray(tensors, dtype=np.float64)
    C = x.shape[1]
    per = x.reshape(x.shape[0], C, -1)
    count = per.shape[0] * per.shape[2]
    total = np.zeros(C)
    for rec in per:
        total += rec.sum(axis=1)
    mu = total / count
    sq = np.zeros(C)
    for rec in per:
        sq += ((rec - mu[:, None]) ** 2).sum(axis=1)
    sigma = np.sqrt(sq / count)
    low = sigma < SIGMA_FLOOR
    if low.any():
        warnings.warn(f"channels {np.flatnonzero(low).tolist()} have ~zero variance; sigma floored")
        sigma = np.where(low, SIGMA_FLOOR, sigma)
    return NormStats(mu, sigma)


def _bcast(v: np.ndarray) -> np.ndarray:
    # channel axis is -3 for (..., C, H, W)
    return np.asarray(v).reshape(-1, 1, 1)


def normalize(x: np.ndarray, stats: NormStats) -> np.ndarray:
    out = (np.asarray(x, dtype=np.float64) - _bcast(stats.mu)) / _bcast(stats.sigma)
    return out.astype(np.float32)


def denormalize(x: np.ndarray, stats: NormStats) -> np.ndarray:
    return np.asarray(x, dtype=np.float64) * _bcast(stats.sigma) + _bcast(stats.mu)
