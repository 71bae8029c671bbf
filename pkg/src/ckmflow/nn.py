"""Velocity-field network with hand-written reverse-mode gradients.

Everything is plain numpy. Layers are functional: ``*_forward`` returns the
output plus whatever the matching ``*_backward`` needs. The network stores all
parameters in one flat vector (:class:`ParamStore`) so the optimizer, the
checkpoint writer and the finite-difference checker all see the same thing.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np


class StaleCacheError(RuntimeError):
    pass


class NonFiniteError(FloatingPointError):
    pass


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def _sigmoid(x):
    return 0.5 * (np.tanh(0.5 * x) + 1.0)


def silu_forward(x):
    s = _sigmoid(x)
    return x * s, (x, s)


def silu_backward(dout, cache):
    x, s = cache
    return dout * (s * (1.0 + x * (1.0 - s)))


def linear_forward(x, w, b):
    """x (B, in), w (out, in), b (out,)."""
    return x @ w.T + b, x


def linear_backward(dout, x, w):
    return dout @ w, dout.T @ x, dout.sum(axis=0)


def _im2col(x, k, stride):
    """x (B, H, W, C) -> cols (B*Ho*Wo, k*k*C), column order (ky, kx, c)."""
    B, H, W, C = x.shape
    p = k // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0))) if p else x
    Ho = (H - 1) // stride + 1
    Wo = (W - 1) // stride + 1
    cols = np.empty((B, Ho, Wo, k * k * C), dtype=x.dtype)
    for ky in range(k):
        for kx in range(k):
            j = (ky * k + kx) * C
            cols[..., j : j + C] = xp[:, ky : ky + stride * (Ho - 1) + 1 : stride, kx : kx + stride * (Wo - 1) + 1 : stride]
    return cols.reshape(B * Ho * Wo, k * k * C), Ho, Wo


def _wmat(w):
    # (Cout, Cin, k, k) -> (k*k*Cin, Cout) matching the im2col column order
    return w.transpose(2, 3, 1, 0).reshape(-1, w.shape[0])


def conv2d_forward(x, w, b, stride=1):
    """Zero-padded 'same' cross-correlation on NHWC input; w is (Cout, Cin, k, k)."""
    cout, cin, k, _ = w.shape
    B = x.shape[0]
    if x.shape[3] != cin:
        raise ValueError(f"conv expects {cin} input channels, got {x.shape[3]}")
    if k == 1 and stride == 1:
        Ho, Wo = x.shape[1:3]
        cols = x.reshape(-1, cin)
    else:
        cols, Ho, Wo = _im2col(x, k, stride)
    out = cols @ _wmat(w) + b
    return out.reshape(B, Ho, Wo, cout), (cols, x.shape, stride)


def conv2d_backward(dout, cache, w):
    cols, xshape, stride = cache
    cout, cin, k, _ = w.shape
    B, H, W, C = xshape
    Ho, Wo = dout.shape[1:3]
    d2 = dout.reshape(-1, cout)
    dw = (cols.T @ d2).reshape(k, k, cin, cout).transpose(3, 2, 0, 1)
    db = d2.sum(axis=0)
    dcols = d2 @ _wmat(w).T
    if k == 1 and stride == 1:
        return dcols.reshape(B, Ho, Wo, C), dw, db
    p = k // 2
    dcols = dcols.reshape(B, Ho, Wo, k * k * C)
    dxp = np.zeros((B, H + 2 * p, W + 2 * p, C), dtype=dout.dtype)
    for ky in range(k):
        for kx in range(k):
            j = (ky * k + kx) * C
            dxp[:, ky : ky + stride * (Ho - 1) + 1 : stride, kx : kx + stride * (Wo - 1) + 1 : stride] += dcols[..., j : j + C]
    return (dxp[:, p:-p, p:-p] if p else dxp), dw, db


def upsample_forward(x):
    """Nearest-neighbour x2 on NHWC."""
    return x.repeat(2, axis=1).repeat(2, axis=2)


def upsample_backward(dout):
    B, H, W, C = dout.shape
    return dout.reshape(B, H // 2, 2, W // 2, 2, C).sum(axis=(2, 4))


def time_embedding(t, dim: int) -> np.ndarray:
    """Sinusoidal embedding of 1000*t; interleaved (sin, cos) pairs.

    ``t`` may be a scalar or a (B,) vector; the result is (dim,) or (B, dim).
    """
    if dim % 2:
        raise ValueError("time embedding dim must be even")
    t_arr = np.asarray(t, dtype=np.float64)
    omega = 10000.0 ** (-2.0 * np.arange(dim // 2) / dim)
    phase = 1000.0 * t_arr[..., None] * omega
    emb = np.empty(t_arr.shape + (dim,))
    emb[..., 0::2] = np.sin(phase)
    emb[..., 1::2] = np.cos(phase)
    return emb


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


@dataclass
class ParamStore:
    values: np.ndarray
    layout: dict[str, tuple[int, tuple[int, ...]]]
    version: int = 0

    def __getitem__(self, name: str) -> np.ndarray:
        off, shape = self.layout[name]
        return self.values[off : off + int(np.prod(shape))].reshape(shape)

    def __len__(self) -> int:
        return self.values.size

    def names(self) -> list[str]:
        return list(self.layout)

    def copy(self) -> "ParamStore":
        return ParamStore(self.values.copy(), dict(self.layout), self.version)

    def view(self, flat: np.ndarray, name: str) -> np.ndarray:
        """Slice ``name`` out of any vector sharing this layout (e.g. a gradient)."""
        off, shape = self.layout[name]
        return flat[off : off + int(np.prod(shape))].reshape(shape)

    def bump(self) -> None:
        self.version += 1


def build_layout(specs: list[tuple[str, tuple[int, ...]]]) -> dict[str, tuple[int, tuple[int, ...]]]:
    layout, off = {}, 0
    for name, shape in specs:
        if name in layout:
            raise ValueError(f"duplicate parameter {name}")
        layout[name] = (off, tuple(shape))
        off += int(np.prod(shape))
    return layout


@dataclass(frozen=True)
class VelocityNetConfig:
    in_channels: int
    out_channels: int
    base_width: int = 16
    depth: int = 2
    time_embed_dim: int = 32

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.time_embed_dim % 2:
            raise ValueError("time_embed_dim must be even")
        if min(self.in_channels, self.out_channels, self.base_width) < 1:
            raise ValueError("channel counts must be positive")

    @property
    def widths(self) -> list[int]:
        return [self.base_width * 2**k for k in range(self.depth + 1)]


@dataclass
class _Cache:
    version: int
    input_shape: tuple
    data: dict = field(default_factory=dict)


class VelocityNet:
    """Small conditional encoder-decoder v(x_t, t, c).

    ``[x_t; c]`` -> stem conv -> ``depth`` x (conv, +time bias, SiLU, stride-2 conv)
    -> bottleneck (conv, +time bias, SiLU, conv, SiLU) -> ``depth`` x (upsample,
    conv, +time bias, concat skip, conv, SiLU) -> 1x1 head.
    """

    def __init__(self, cfg: VelocityNetConfig, dtype=np.float32):
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        self.layout = build_layout(self.param_specs())

    # -- structure ---------------------------------------------------------
    def param_specs(self) -> list[tuple[str, tuple[int, ...]]]:
        c = self.cfg
        w = c.widths
        T = c.time_embed_dim
        specs = [
            ("time.fc1.w", (T, T)), ("time.fc1.b", (T,)),
            ("time.fc2.w", (T, T)), ("time.fc2.b", (T,)),
            ("stem.w", (w[0], c.in_channels, 3, 3)), ("stem.b", (w[0],)),
        ]
        for k in range(1, c.depth + 1):
            specs += [
                (f"enc{k}.conv.w", (w[k], w[k - 1], 3, 3)), (f"enc{k}.conv.b", (w[k],)),
                (f"enc{k}.temb.w", (w[k], T)), (f"enc{k}.temb.b", (w[k],)),
                (f"enc{k}.down.w", (w[k], w[k], 3, 3)), (f"enc{k}.down.b", (w[k],)),
            ]
        d = w[c.depth]
        specs += [
            ("mid.conv1.w", (d, d, 3, 3)), ("mid.conv1.b", (d,)),
            ("mid.temb.w", (d, T)), ("mid.temb.b", (d,)),
            ("mid.conv2.w", (d, d, 3, 3)), ("mid.conv2.b", (d,)),
        ]
        for k in range(c.depth, 0, -1):
            specs += [
                (f"dec{k}.conv1.w", (w[k - 1], w[k], 3, 3)), (f"dec{k}.conv1.b", (w[k - 1],)),
                (f"dec{k}.temb.w", (w[k - 1], T)), (f"dec{k}.temb.b", (w[k - 1],)),
                (f"dec{k}.conv2.w", (w[k - 1], w[k - 1] + w[k], 3, 3)), (f"dec{k}.conv2.b", (w[k - 1],)),
            ]
        specs += [("head.w", (c.out_channels, w[0], 1, 1)), ("head.b", (c.out_channels,))]
        return specs

    def n_params(self) -> int:
        return sum(int(np.prod(s)) for _, s in self.param_specs())

    def init_params(self, seed: int = 0) -> ParamStore:
        """Kaiming-uniform (fan-in) weights, zero biases, zero head."""
        rng = np.random.default_rng(seed)
        total = self.n_params()
        store = ParamStore(np.zeros(total, dtype=self.dtype), dict(self.layout))
        for name, shape in self.param_specs():
            if name.endswith(".b") or name.startswith("head."):
                continue
            fan_in = int(np.prod(shape[1:]))
            bound = np.sqrt(6.0 / fan_in)
            store[name][...] = rng.uniform(-bound, bound, size=shape)
        return store

    # -- forward -----------------------------------------------------------
    def _check_inputs(self, x_t, c):
        cfg = self.cfg
        if x_t.ndim != 4 or c.ndim != 4 or x_t.shape[0] != c.shape[0] or x_t.shape[2:] != c.shape[2:]:
            raise ValueError(f"incompatible shapes x_t {x_t.shape} and c {c.shape}")
        if x_t.shape[1] + c.shape[1] != cfg.in_channels:
            raise ValueError(
                f"x_t ({x_t.shape[1]}) + c ({c.shape[1]}) channels != in_channels {cfg.in_channels}"
            )
        if x_t.shape[1] != cfg.out_channels and x_t.shape[1] != 0:
            raise ValueError("x_t channels must equal out_channels (or 0 for direct regression)")
        div = 2**cfg.depth
        if x_t.shape[2] % div or x_t.shape[3] % div:
            raise ValueError(f"spatial dims {x_t.shape[2:]} not divisible by 2**depth = {div}")
        if not (np.all(np.isfinite(x_t)) and np.all(np.isfinite(c))):
            raise NonFiniteError("non-finite network input")

    def forward(self, params: ParamStore, x_t, t, c):
        """Return ``(v, cache)``. ``t`` is a scalar or one value per batch element."""
        dt = self.dtype
        x_t = np.asarray(x_t, dtype=dt)
        c = np.asarray(c, dtype=dt)
        self._check_inputs(x_t, c)
        B = x_t.shape[0]
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (B,))
        if np.any((t < 0) | (t > 1)):
            raise ValueError("t must lie in [0, 1]")
        P = params
        cache = _Cache(P.version, x_t.shape)
        st = cache.data

        emb = time_embedding(t, self.cfg.time_embed_dim).astype(dt)
        a1, st["fc1"] = linear_forward(emb, P["time.fc1.w"], P["time.fc1.b"])
        h1, st["fc1.act"] = silu_forward(a1)
        temb, st["fc2"] = linear_forward(h1, P["time.fc2.w"], P["time.fc2.b"])
        s, st["temb.act"] = silu_forward(temb)

        def tbias(name):
            return linear_forward(s, P[f"{name}.temb.w"], P[f"{name}.temb.b"])[0]

        h = np.concatenate([x_t, c], axis=1).transpose(0, 2, 3, 1)
        h, st["stem"] = conv2d_forward(h, P["stem.w"], P["stem.b"])
        skips = []
        for k in range(1, self.cfg.depth + 1):
            a, st[f"enc{k}.conv"] = conv2d_forward(h, P[f"enc{k}.conv.w"], P[f"enc{k}.conv.b"])
            a = a + tbias(f"enc{k}")[:, None, None, :]
            a, st[f"enc{k}.act"] = silu_forward(a)
            skips.append(a)
            h, st[f"enc{k}.down"] = conv2d_forward(a, P[f"enc{k}.down.w"], P[f"enc{k}.down.b"], stride=2)

        a, st["mid.conv1"] = conv2d_forward(h, P["mid.conv1.w"], P["mid.conv1.b"])
        a = a + tbias("mid")[:, None, None, :]
        a, st["mid.act1"] = silu_forward(a)
        a, st["mid.conv2"] = conv2d_forward(a, P["mid.conv2.w"], P["mid.conv2.b"])
        h, st["mid.act2"] = silu_forward(a)

        for k in range(self.cfg.depth, 0, -1):
            u = upsample_forward(h)
            a, st[f"dec{k}.conv1"] = conv2d_forward(u, P[f"dec{k}.conv1.w"], P[f"dec{k}.conv1.b"])
            a = a + tbias(f"dec{k}")[:, None, None, :]
            st[f"dec{k}.split"] = a.shape[3]
            a = np.concatenate([a, skips[k - 1]], axis=3)
            a, st[f"dec{k}.conv2"] = conv2d_forward(a, P[f"dec{k}.conv2.w"], P[f"dec{k}.conv2.b"])
            h, st[f"dec{k}.act"] = silu_forward(a)

        v, st["head"] = conv2d_forward(h, P["head.w"], P["head.b"])
        return np.ascontiguousarray(v.transpose(0, 3, 1, 2)), cache

    def __call__(self, params: ParamStore, x_t, t, c) -> np.ndarray:
        return self.forward(params, x_t, t, c)[0]

    # -- backward ----------------------------------------------------------
    def backward(self, params: ParamStore, cache: _Cache, grad_v):
        """Exact gradients of ``sum(grad_v * v)``; returns (flat param grad, grad wrt x_t)."""
        if cache.version != params.version:
            raise StaleCacheError("forward cache was built with different parameter values")
        P = params
        st = cache.data
        grad = np.zeros(len(P), dtype=self.dtype)

        def g(name):
            return P.view(grad, name)

        dv = np.ascontiguousarray(np.asarray(grad_v, dtype=self.dtype).transpose(0, 2, 3, 1))
        dh, g("head.w")[...], g("head.b")[...] = conv2d_backward(dv, st["head"], P["head.w"])

        s = st["temb.act"][0] * st["temb.act"][1]
        ds = np.zeros_like(s)

        def tbias_back(name, dbias_map):
            nonlocal ds
            db = dbias_map.sum(axis=(1, 2))
            dsi, g(f"{name}.temb.w")[...], g(f"{name}.temb.b")[...] = linear_backward(db, s, P[f"{name}.temb.w"])
            ds = ds + dsi

        dskips = {}
        for k in range(1, self.cfg.depth + 1):
            da = silu_backward(dh, st[f"dec{k}.act"])
            da, g(f"dec{k}.conv2.w")[...], g(f"dec{k}.conv2.b")[...] = conv2d_backward(
                da, st[f"dec{k}.conv2"], P[f"dec{k}.conv2.w"]
            )
            split = st[f"dec{k}.split"]
            dskips[k] = da[..., split:]
            da = da[..., :split]
            tbias_back(f"dec{k}", da)
            du, g(f"dec{k}.conv1.w")[...], g(f"dec{k}.conv1.b")[...] = conv2d_backward(
                da, st[f"dec{k}.conv1"], P[f"dec{k}.conv1.w"]
            )
            dh = upsample_backward(du)

        da = silu_backward(dh, st["mid.act2"])
        da, g("mid.conv2.w")[...], g("mid.conv2.b")[...] = conv2d_backward(da, st["mid.conv2"], P["mid.conv2.w"])
        da = silu_backward(da, st["mid.act1"])
        tbias_back("mid", da)
        dh, g("mid.conv1.w")[...], g("mid.conv1.b")[...] = conv2d_backward(da, st["mid.conv1"], P["mid.conv1.w"])

        for k in range(self.cfg.depth, 0, -1):
            da, g(f"enc{k}.down.w")[...], g(f"enc{k}.down.b")[...] = conv2d_backward(
                dh, st[f"enc{k}.down"], P[f"enc{k}.down.w"]
            )
            da = da + dskips[k]
            da = silu_backward(da, st[f"enc{k}.act"])
            tbias_back(f"enc{k}", da)
            dh, g(f"enc{k}.conv.w")[...], g(f"enc{k}.conv.b")[...] = conv2d_backward(
                da, st[f"enc{k}.conv"], P[f"enc{k}.conv.w"]
            )

        dx, g("stem.w")[...], g("stem.b")[...] = conv2d_backward(dh, st["stem"], P["stem.w"])

        dtemb = silu_backward(ds, st["temb.act"])
        dh1, g("time.fc2.w")[...], g("time.fc2.b")[...] = linear_backward(dtemb, st["fc2"], P["time.fc2.w"])
        da1 = silu_backward(dh1, st["fc1.act"])
        _, g("time.fc1.w")[...], g("time.fc1.b")[...] = linear_backward(da1, st["fc1"], P["time.fc1.w"])

        n_x = cache.input_shape[1]
        return grad, np.ascontiguousarray(dx[..., :n_x].transpose(0, 3, 1, 2))


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros_like(cls, params: ParamStore) -> "AdamState":
        return cls(np.zeros_like(params.values), np.zeros_like(params.values), 0)


def adam_step(
    params: ParamStore,
    grads: np.ndarray,
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[ParamStore, AdamState]:
    """Bias-corrected Adam, applied in place to ``params`` and ``state``."""
    if grads.shape != params.values.shape or state.m.shape != params.values.shape:
        raise ValueError("parameter, gradient and moment vectors differ in length")
    if not np.all(np.isfinite(grads)):
        raise NonFiniteError("non-finite gradient; update rejected")
    state.step += 1
    state.m *= beta1
    state.m += (1 - beta1) * grads
    state.v *= beta2
    state.v += (1 - beta2) * grads * grads
    m_hat = state.m / (1 - beta1**state.step)
    v_hat = state.v / (1 - beta2**state.step)
    params.values -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(params.values.dtype)
    params.bump()
    return params, state


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CKPT_MAGIC = b"CKMW"
CKPT_VERSION = 1


def save_checkpoint(
    path: str | Path,
    net: VelocityNet,
    params: ParamStore,
    adam: AdamState | None = None,
    meta: dict | None = None,
) -> None:
    """``CKMW`` | version u32 | config JSON | slice table | f32 params | optional Adam state."""
    echo = json.dumps({"net": asdict(net.cfg), "meta": meta or {}}, sort_keys=True).encode()
    out = bytearray()
    out += CKPT_MAGIC + struct.pack("<I", CKPT_VERSION)
    out += struct.pack("<I", len(echo)) + echo
    out += struct.pack("<I", len(params.layout))
    for name, (off, shape) in params.layout.items():
        nb = name.encode()
        out += struct.pack("<H", len(nb)) + nb + struct.pack("<QB", off, len(shape))
        out += struct.pack(f"<{len(shape)}I", *shape)
    out += struct.pack("<Q", len(params)) + params.values.astype("<f4").tobytes()
    if adam is None:
        out += struct.pack("<B", 0)
    else:
        out += struct.pack("<BQ", 1, adam.step)
        out += adam.m.astype("<f4").tobytes() + adam.v.astype("<f4").tobytes()
    Path(path).write_bytes(bytes(out))


def load_checkpoint(path: str | Path) -> tuple[VelocityNet, ParamStore, AdamState | None, dict]:
    raw = Path(path).read_bytes()
    if raw[:4] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a CKMW checkpoint")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 8
    (n,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    echo = json.loads(raw[pos : pos + n])
    pos += n
    (n_slices,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    layout = {}
    for _ in range(n_slices):
        (ln,) = struct.unpack_from("<H", raw, pos)
        pos += 2
        name = raw[pos : pos + ln].decode()
        pos += ln
        off, nd = struct.unpack_from("<QB", raw, pos)
        pos += 9
        shape = struct.unpack_from(f"<{nd}I", raw, pos)
        pos += 4 * nd
        layout[name] = (off, tuple(shape))
    (count,) = struct.unpack_from("<Q", raw, pos)
    pos += 8
    values = np.frombuffer(raw, dtype="<f4", count=count, offset=pos).astype(np.float32)
    pos += 4 * count
    net = VelocityNet(VelocityNetConfig(**echo["net"]))
    if layout != net.layout:
        raise ValueError(f"{path}: slice table does not match the echoed network config")
    params = ParamStore(values, layout)
    adam = None
    if raw[pos]:
        (step,) = struct.unpack_from("<Q", raw, pos + 1)
        pos += 9
        m = np.frombuffer(raw, dtype="<f4", count=count, offset=pos).astype(np.float32)
        v = np.frombuffer(raw, dtype="<f4", count=count, offset=pos + 4 * count).astype(np.float32)
        adam = AdamState(m, v, int(step))
    return net, params, adam, echo["meta"]
