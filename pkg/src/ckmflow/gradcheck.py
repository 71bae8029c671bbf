"""Central finite-difference checks for the hand-written backward passes."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import nn


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_layer: dict[str, float] = field(default_factory=dict)
    n_checked: int = 0
    n_params: int = 0

    def passed(self, tol: float = 1e-3) -> bool:
        return self.max_rel_error < tol


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """|a - n| / max(|a|, |n|, floor); the floor keeps near-zero gradients from dominating."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def compare_gradients(
    loss_fn: Callable[[np.ndarray], float],
    analytic: np.ndarray,
    x: np.ndarray,
    coords: np.ndarray,
    eps: float = 1e-3,
) -> np.ndarray:
    """Relative errors of ``analytic`` at flat ``coords`` of ``x`` against central differences.

    Uses the symmetric five-point stencil with step ``eps`` (truncation error
    O(eps^4)), so tiny gradient entries are not swamped by curvature.
    ``x`` is perturbed in place and restored.
    """
    flat = x.reshape(-1)
    numeric = np.empty(len(coords))
    for i, j in enumerate(coords):
        old = flat[j]
        vals = []
        for step in (2 * eps, eps, -eps, -2 * eps):
            flat[j] = old + step
            vals.append(loss_fn(x))
        flat[j] = old
        numeric[i] = (-vals[0] + 8 * vals[1] - 8 * vals[2] + vals[3]) / (12 * eps)
    return relative_error(np.asarray(analytic).reshape(-1)[coords], numeric)


def _random_params(net: nn.VelocityNet, seed: int) -> nn.ParamStore:
    # nonzero head and biases so every layer actually receives gradient
    rng = np.random.default_rng([seed, 1])
    params = net.init_params(seed)
    params.values[...] += rng.normal(0, 0.1, size=params.values.shape)
    return params


def grad_check(
    cfg: nn.VelocityNetConfig,
    seed: int = 0,
    n_coords: int = 200,
    eps: float = 1e-3,
    spatial: int = 8,
    batch: int = 2,
    dtype=np.float64,
    corrupt: Callable[[np.ndarray], np.ndarray] | None = None,
) -> GradCheckReport:
    """Check the composed network's parameter gradient on ``n_coords`` sampled coordinates.

    The loss is ``sum(v * r)`` for a fixed random ``r``. ``corrupt`` lets a test
    tamper with the analytic gradient (negative control).
    """
    net = nn.VelocityNet(cfg, dtype=dtype)
    if net.n_params() > 50_000:
        raise ValueError("grad_check is meant for small configurations (<= 50k parameters)")
    rng = np.random.default_rng(seed)
    params = _random_params(net, seed)
    params.values = params.values.astype(dtype)
    n_c = cfg.in_channels - cfg.out_channels
    x_t = rng.standard_normal((batch, cfg.out_channels, spatial, spatial))
    c = rng.standard_normal((batch, n_c, spatial, spatial))
    t = rng.uniform(0, 1, size=batch)
    r = rng.standard_normal((batch, cfg.out_channels, spatial, spatial))

    v, cache = net.forward(params, x_t, t, c)
    grad, _ = net.backward(params, cache, r)
    if corrupt is not None:
        grad = corrupt(grad)

    def loss(vals):
        return float(np.sum(net(nn.ParamStore(vals, params.layout), x_t, t, c) * r))

    coords = np.sort(rng.choice(len(params), size=min(n_coords, len(params)), replace=False))
    errs = compare_gradients(loss, grad, params.values, coords, eps)
    owner = np.empty(len(params), dtype=object)
    for name, (off, shape) in params.layout.items():
        owner[off : off + int(np.prod(shape))] = name.rsplit(".", 1)[0]
    per_layer: dict[str, float] = {}
    for j, e in zip(coords, errs):
        per_layer[owner[j]] = max(per_layer.get(owner[j], 0.0), float(e))
    return GradCheckReport(float(errs.max()), per_layer, len(coords), len(params))


def grad_check_input(cfg: nn.VelocityNetConfig, seed: int = 0, eps: float = 1e-3, dtype=np.float64) -> float:
    """Max relative error of the gradient with respect to x_t."""
    net = nn.VelocityNet(cfg, dtype=dtype)
    rng = np.random.default_rng(seed)
    params = _random_params(net, seed)
    params.values = params.values.astype(dtype)
    x_t = rng.standard_normal((2, cfg.out_channels, 8, 8))
    c = rng.standard_normal((2, cfg.in_channels - cfg.out_channels, 8, 8))
    r = rng.standard_normal(x_t.shape)
    _, cache = net.forward(params, x_t, 0.3, c)
    _, gx = net.backward(params, cache, r)
    coords = np.arange(x_t.size)
    return float(
        compare_gradients(lambda x: float(np.sum(net(params, x, 0.3, c) * r)), gx, x_t, coords, eps).max()
    )


# ---------------------------------------------------------------------------
# layer-level checks
# ---------------------------------------------------------------------------


def _layer_case(kind: str, rng: np.random.Generator):
    """Return (inputs dict, forward fn(inputs) -> out, backward fn(inputs, dout) -> grads dict)."""
    if kind == "linear":
        ins = {"x": rng.standard_normal((3, 5)), "w": rng.standard_normal((4, 5)), "b": rng.standard_normal(4)}

        def fwd(d):
            return nn.linear_forward(d["x"], d["w"], d["b"])[0]

        def bwd(d, dout):
            dx, dw, db = nn.linear_backward(dout, d["x"], d["w"])
            return {"x": dx, "w": dw, "b": db}

    elif kind == "linear_stack":
        ins = {
            "x": rng.standard_normal((3, 5)),
            "w1": rng.standard_normal((6, 5)), "b1": rng.standard_normal(6),
            "w2": rng.standard_normal((4, 6)), "b2": rng.standard_normal(4),
        }

        def fwd(d):
            h = nn.linear_forward(d["x"], d["w1"], d["b1"])[0]
            return nn.linear_forward(h, d["w2"], d["b2"])[0]

        def bwd(d, dout):
            h, x1 = nn.linear_forward(d["x"], d["w1"], d["b1"])
            dh, dw2, db2 = nn.linear_backward(dout, h, d["w2"])
            dx, dw1, db1 = nn.linear_backward(dh, x1, d["w1"])
            return {"x": dx, "w1": dw1, "b1": db1, "w2": dw2, "b2": db2}

    elif kind in ("conv3x3", "conv3x3_stride2", "conv1x1"):
        k = 1 if kind == "conv1x1" else 3
        stride = 2 if kind.endswith("stride2") else 1
        ins = {
            "x": rng.standard_normal((2, 6, 6, 3)),
            "w": rng.standard_normal((4, 3, k, k)),
            "b": rng.standard_normal(4),
        }

        def fwd(d):
            return nn.conv2d_forward(d["x"], d["w"], d["b"], stride)[0]

        def bwd(d, dout):
            _, cache = nn.conv2d_forward(d["x"], d["w"], d["b"], stride)
            dx, dw, db = nn.conv2d_backward(dout, cache, d["w"])
            return {"x": dx, "w": dw, "b": db}

    elif kind == "silu":
        ins = {"x": rng.standard_normal((2, 3, 4, 4)) * 2}

        def fwd(d):
            return nn.silu_forward(d["x"])[0]

        def bwd(d, dout):
            return {"x": nn.silu_backward(dout, nn.silu_forward(d["x"])[1])}

    elif kind == "upsample":
        ins = {"x": rng.standard_normal((2, 3, 4, 3))}

        def fwd(d):
            return nn.upsample_forward(d["x"])

        def bwd(d, dout):
            return {"x": nn.upsample_backward(dout)}

    else:
        raise ValueError(f"unknown layer kind {kind!r}")
    return ins, fwd, bwd


LAYER_KINDS = ("linear", "linear_stack", "conv3x3", "conv3x3_stride2", "conv1x1", "silu", "upsample")


def check_layer(kind: str, seed: int = 0, eps: float = 1e-3) -> float:
    """Max relative error over every input and parameter of one layer type (float64)."""
    rng = np.random.default_rng(seed)
    ins, fwd, bwd = _layer_case(kind, rng)
    r = rng.standard_normal(fwd(ins).shape)
    grads = bwd(ins, r)
    worst = 0.0
    for name, arr in ins.items():
        errs = compare_gradients(lambda _: float(np.sum(fwd(ins) * r)), grads[name], arr, np.arange(arr.size), eps)
        worst = max(worst, float(errs.max()))
    return worst
