"""Reconstruction metrics: NMSE family, PSNR, SSIM, FID on frozen random features, MSI."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.ndimage import correlate1d

from . import nn

FEATURE_SEED = 0xC0FFEE
CSV_COLUMNS = ["method", "task", "nmse", "psnr", "ssim", "fid", "msi", "time_ms_per_sample", "n_samples", "mse", "rmse", "errors"]


def mse(x, x_hat) -> float:
    d = np.abs(np.asarray(x, dtype=np.complex128 if np.iscomplexobj(x) else np.float64) - np.asarray(x_hat))
    return float(np.mean(d**2))


def rmse(x, x_hat) -> float:
    return math.sqrt(mse(x, x_hat))


def nmse(x, x_hat) -> float:
    x = np.asarray(x)
    ref = float(np.sum(np.abs(x) ** 2))
    if ref == 0:
        raise ValueError("NMSE undefined for an all-zero reference")
    return float(np.sum(np.abs(x - np.asarray(x_hat)) ** 2)) / ref


def psnr(x, x_hat, max_val: float = 255.0) -> float:
    err = mse(x, x_hat)
    if err == 0:
        return math.inf
    return 10.0 * math.log10(max_val**2 / err)


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    half = len(g) // 2
    out = correlate1d(correlate1d(img, g, axis=0, mode="constant"), g, axis=1, mode="constant")
    return out[half:-half, half:-half]


def ssim(x, x_hat, data_range: float = 255.0, k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean SSIM over all fully-inside 11x11 Gaussian (sigma 1.5) windows."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(x_hat, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError("shape mismatch")
    if min(x.shape) < 11:
        raise ValueError("SSIM needs images of at least 11x11")
    g = _gaussian_window()
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    mx, my = _filter_valid(x, g), _filter_valid(y, g)
    sxx = _filter_valid(x * x, g) - mx * mx
    syy = _filter_valid(y * y, g) - my * my
    sxy = _filter_valid(x * y, g) - mx * my
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


class FeatureExtractor:
    """Frozen random conv net standing in for an Inception backbone.

    Three (3x3 conv, SiLU, 2x2 average pool) stages, 1 -> 16 -> 32 -> 64
    channels, then a global average pool to a 64-d vector.
    """

    widths = (1, 16, 32, 64)

    def __init__(self, seed: int = FEATURE_SEED):
        rng = np.random.default_rng(seed)
        self._layers = []
        for cin, cout in zip(self.widths[:-1], self.widths[1:]):
            bound = np.sqrt(6.0 / (9 * cin))
            w = rng.uniform(-bound, bound, size=(cout, cin, 3, 3))
            b = rng.uniform(-0.1, 0.1, size=cout)
            w.setflags(write=False)
            b.setflags(write=False)
            self._layers.append((w, b))

    @staticmethod
    def _pool(x):
        B, H, W, C = x.shape
        H2, W2 = H // 2, W // 2
        if H2 == 0 or W2 == 0:
            return x
        return x[:, : 2 * H2, : 2 * W2].reshape(B, H2, 2, W2, 2, C).mean(axis=(2, 4))

    def __call__(self, images: np.ndarray) -> np.ndarray:
        """(n, H, W) images in [0, 1] -> (n, 64) features."""
        h = np.asarray(images, dtype=np.float64)[..., None]
        for w, b in self._layers:
            h = nn.silu_forward(nn.conv2d_forward(h, w, b)[0])[0]
            h = self._pool(h)
        return h.mean(axis=(1, 2))


def extract_features(images: np.ndarray) -> np.ndarray:
    return FeatureExtractor()(images)


@dataclass
class FidResult:
    value: float
    regularized: bool


def _sqrt_psd(S):
    w, V = np.linalg.eigh(S)
    return (V * np.sqrt(np.maximum(w, 0))) @ V.T


def fid_details(feats_real, feats_gen, ridge: float = 1e-6, cond_limit: float = 1e10) -> FidResult:
    """Frechet distance between Gaussian fits; 1/(n-1) covariances.

    The cross term uses tr sqrt(S_r^1/2 S_g S_r^1/2) via symmetric eigendecomposition
    with negative eigenvalues clamped. A ridge of ``ridge * I`` is added to both
    covariances when either is singular or ill-conditioned.
    """
    a = np.atleast_2d(np.asarray(feats_real, dtype=np.float64))
    b = np.atleast_2d(np.asarray(feats_gen, dtype=np.float64))
    if a.shape[0] < 2 or b.shape[0] < 2:
        raise ValueError("FID needs at least two samples per set")
    if a.shape[1] != b.shape[1]:
        raise ValueError("feature dimensions differ")
    mu_a, mu_b = a.mean(axis=0), b.mean(axis=0)
    Sa = np.atleast_2d(np.cov(a, rowvar=False))
    Sb = np.atleast_2d(np.cov(b, rowvar=False))
    regularized = False
    for S in (Sa, Sb):
        ev = np.linalg.eigvalsh(S)
        if ev[0] <= 0 or ev[-1] / ev[0] > cond_limit:
            regularized = True
    if regularized:
        eye = ridge * np.eye(Sa.shape[0])
        Sa, Sb = Sa + eye, Sb + eye
    ra = _sqrt_psd(Sa)
    inner = ra @ Sb @ ra
    inner = 0.5 * (inner + inner.T)
    tr_cross = float(np.sum(np.sqrt(np.maximum(np.linalg.eigvalsh(inner), 0))))
    value = float(np.sum((mu_a - mu_b) ** 2) + np.trace(Sa) + np.trace(Sb) - 2 * tr_cross)
    return FidResult(value, regularized)


def fid(feats_real, feats_gen) -> float:
    return fid_details(feats_real, feats_gen).value


def msi(R_set: Sequence[np.ndarray], R_hat_set: Sequence[np.ndarray]) -> float:
    """Mean |tr(R R_hat^H)| / (||R||_F ||R_hat||_F)."""
    if len(R_set) != len(R_hat_set) or len(R_set) == 0:
        raise ValueError("MSI needs matched, non-empty sets")
    vals = []
    for R, Rh in zip(R_set, R_hat_set):
        R = np.asarray(R)
        Rh = np.asarray(Rh)
        na, nb = np.linalg.norm(R), np.linalg.norm(Rh)
        if na == 0 or nb == 0:
            raise ValueError("MSI undefined for a zero matrix")
        # tr(R Rh^H) = sum_ij R_ij conj(Rh_ij)
        vals.append(abs(np.vdot(Rh, R)) / (na * nb))
    return float(min(np.mean(vals), 1.0))


def magnitude_image(R: np.ndarray) -> np.ndarray:
    """|R| on a fixed [0, 1] scale (ground-truth diagonals are exactly 1)."""
    return np.clip(np.abs(R), 0.0, 1.0)


@dataclass
class MetricsReport:
    method: str
    task: str
    per_sample: dict[str, list[float]] = field(default_factory=dict)
    aggregate: dict[str, float] = field(default_factory=dict)
    n_samples: int = 0
    fid_regularized: bool = False
    errors: list[str] = field(default_factory=list)

    def row(self) -> dict:
        row = {"method": self.method, "task": self.task.upper(), "n_samples": self.n_samples}
        for key in CSV_COLUMNS:
            if key in self.aggregate:
                row[key] = _fmt(self.aggregate[key])
        row["errors"] = ";".join(self.errors)
        return {k: row.get(k, "") for k in CSV_COLUMNS}


def _fmt(v: float) -> str:
    if math.isinf(v):
        return "inf"
    return f"{v:.6g}"


def evaluate(
    method: str,
    predictions: Sequence[np.ndarray],
    truths: Sequence[np.ndarray],
    task: str,
    times_ms: Sequence[float] | None = None,
) -> MetricsReport:
    """Task-applicable metrics: A -> nmse, psnr, ssim, fid; B -> nmse, msi, fid (plus mse/rmse)."""
    task = task.lower()
    if len(predictions) != len(truths):
        raise ValueError("prediction and ground-truth counts differ")
    rep = MetricsReport(method, task, n_samples=len(truths))
    ps = rep.per_sample
    ps["mse"] = [mse(x, y) for x, y in zip(truths, predictions)]
    ps["rmse"] = [math.sqrt(v) for v in ps["mse"]]
    ps["nmse"] = [nmse(x, y) for x, y in zip(truths, predictions)]
    fe = FeatureExtractor()
    if task == "a":
        ps["psnr"] = [psnr(x, y) for x, y in zip(truths, predictions)]
        ps["ssim"] = [ssim(x, y) for x, y in zip(truths, predictions)]
        real = fe(np.clip(np.stack(truths) / 255.0, 0, 1))
        gen = fe(np.clip(np.stack(predictions) / 255.0, 0, 1))
    elif task == "b":
        ps["msi"] = [msi([x], [y]) for x, y in zip(truths, predictions)]
        real = fe(np.stack([magnitude_image(x) for x in truths]))
        gen = fe(np.stack([magnitude_image(y) for y in predictions]))
    else:
        raise ValueError(f"unknown task {task!r}")
    for key, vals in ps.items():
        rep.aggregate[key] = float(np.mean(vals))
    if len(truths) >= 2:
        fr = fid_details(real, gen)
        rep.aggregate["fid"] = fr.value
        rep.fid_regularized = fr.regularized
    if times_ms is not None and len(times_ms):
        rep.aggregate["time_ms_per_sample"] = float(np.mean(times_ms))
    return rep


def write_report_csv(path: str | Path, reports: Sequence[MetricsReport]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_COLUMNS, lineterminator="\n")
        w.writeheader()
        for rep in reports:
            w.writerow(rep.row())


def format_table(reports: Sequence[MetricsReport]) -> str:
    cols = ["method", "nmse", "psnr", "ssim", "fid", "msi", "time_ms_per_sample"]
    rows = [[r.row()[c] for c in cols] for r in reports]
    widths = [max(len(c), *(len(str(row[i])) for row in rows)) for i, c in enumerate(cols)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(cols, widths))]
    lines += ["  ".join(str(v).ljust(w) for v, w in zip(row, widths)) for row in rows]
    lines.append("(FID uses a frozen random feature extractor; compare methods within a run only)")
    return "\n".join(lines)
