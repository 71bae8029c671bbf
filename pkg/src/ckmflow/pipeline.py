"""Dataset -> (condition, target) arrays, train/test split, and the per-method runners."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from . import baselines, flow
from . import conditioning as cond
from .dataset import Dataset
from .nn import ParamStore, VelocityNet, VelocityNetConfig


@dataclass(frozen=True)
class TaskAOptions:
    factor: int = 4
    noise_sigma: float = 30.0
    mask_mode: str = "oracle"
    tau_b: float = 8.0


def degradation_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index, 0xDE6]).generate_state(1, dtype=np.uint64)[0])


def observations_a(ds: Dataset, opts: TaskAOptions, seed: int) -> np.ndarray:
    """Low-resolution noisy observations, one per record; noise seeded by (seed, record index)."""
    maps = ds.gain_maps()
    return np.stack(
        [
            cond.degrade(maps[i], cond.DegradationConfig(opts.factor, opts.noise_sigma, degradation_seed(seed, i)))
            for i in range(len(ds))
        ]
    )


def task_a_arrays(ds: Dataset, opts: TaskAOptions, seed: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return (observations (n,h,w), conditions (n,3,H,W), targets (n,1,H,W)) in pixel units."""
    H, W = ds.dims
    obs = observations_a(ds, opts, seed)
    masks = ds.oracle_masks()
    c = np.stack(
        [
            cond.assemble_condition_a(obs[i], H, W, opts.mask_mode, opts.tau_b, oracle=masks[i])
            for i in range(len(ds))
        ]
    )
    return obs, c, ds.gain_maps()[:, None].astype(np.float32)


def task_b_arrays(ds: Dataset) -> tuple[np.ndarray, np.ndarray]:
    """Return (conditions (n,2K,N,N), targets (n,2,N,N))."""
    return cond.stack_neighbor_planes(ds.neighbors()), ds.targets().astype(np.float32)


def split_indices(n: int, test_fraction_pct: int = 10) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic split by hashing the record index (about 90/10)."""
    is_test = np.array(
        [hashlib.sha256(str(i).encode()).digest()[0] % 100 < test_fraction_pct for i in range(n)], dtype=bool
    )
    return np.flatnonzero(~is_test), np.flatnonzero(is_test)


# ---------------------------------------------------------------------------
# per-record inputs and method runners
# ---------------------------------------------------------------------------


@dataclass
class TaskInputs:
    """Everything a reconstructor may consume, one row per record, in natural units."""

    task: str
    cond: np.ndarray  # (n, C, H, W) raw conditions
    targets: np.ndarray  # (n, C_out, H, W)
    observations: np.ndarray | None = None  # task A low-resolution grids
    neighbors: np.ndarray | None = None  # task B (n, K, 2, N, N)

    def __len__(self) -> int:
        return self.cond.shape[0]

    def truth(self, i: int) -> np.ndarray:
        """Ground truth as reported to metrics: (H, W) map or complex (N, N)."""
        if self.task == "a":
            return self.targets[i, 0].astype(np.float64)
        return flow.planes_to_complex(self.targets[i])


def task_inputs(ds: Dataset, opts: TaskAOptions, seed: int) -> TaskInputs:
    if ds.task == "a":
        obs, c, x = task_a_arrays(ds, opts, seed)
        return TaskInputs("a", c, x, observations=obs)
    c, x = task_b_arrays(ds)
    return TaskInputs("b", c, x, neighbors=ds.neighbors())


@dataclass
class TrainedModel:
    method: str
    task: str
    net: VelocityNet
    params: ParamStore
    normalizer: flow.Normalizer
    meta: dict


LEARNED = ("gfm", "regression", "ddpm")
INTERPOLATORS = ("bilinear", "bicubic")


def check_applicable(method: str, task: str) -> None:
    if method not in baselines.METHODS:
        raise ValueError(f"unknown method {method!r}")
    if method in INTERPOLATORS and task != "a":
        raise ValueError(f"{method} applies to task A only")


def make_net(method: str, task: str, n_cond: int, n_out: int, base_width: int, depth: int, temb: int) -> VelocityNet:
    n_in = n_cond if method == "regression" else n_cond + n_out
    return VelocityNet(VelocityNetConfig(n_in, n_out, base_width, depth, temb))


def sample_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index, 0x5A]).generate_state(1, dtype=np.uint64)[0] >> 1)


def predict(
    method: str,
    inputs: TaskInputs,
    index: np.ndarray | list[int],
    model: TrainedModel | None = None,
    infer: flow.InferenceConfig = flow.InferenceConfig(),
    ddpm: baselines.DdpmConfig = baselines.DdpmConfig(),
    knn_k: int = 4,
) -> list[np.ndarray]:
    """Reconstruct the records in ``index`` as one batch.

    Returns (H, W) maps for task A and complex (N, N) matrices for task B. The
    generative samplers draw their start noise from ``infer.seed`` / ``ddpm.seed``.
    """
    task = inputs.task
    check_applicable(method, task)
    index = np.asarray(index, dtype=int)
    if method == "knn":
        if task == "a":
            H, W = inputs.cond.shape[2:]
            return [baselines.knn_reconstruct_a(inputs.observations[i], H, W, knn_k) for i in index]
        return [baselines.knn_reconstruct_b(flow.planes_to_complex(inputs.neighbors[i])) for i in index]
    if method in INTERPOLATORS:
        H, W = inputs.cond.shape[2:]
        fn = baselines.bilinear_reconstruct if method == "bilinear" else baselines.bicubic_reconstruct
        return [fn(inputs.observations[i], H, W) for i in index]

    if model is None:
        raise ValueError(f"method {method!r} needs a trained model")
    if model.task != task or model.method != method:
        raise ValueError(f"checkpoint is a task {model.task} {model.method} model")
    c = model.normalizer.norm_cond(inputs.cond[index])
    if method == "gfm":
        x = flow.euler_integrate(model.net, model.params, c, infer)
    elif method == "regression":
        x = baselines.regression_reconstruct(model.net, model.params, c)
    else:
        x = baselines.ddpm_sample(model.net, model.params, c, ddpm)
    x = model.normalizer.denorm_target(np.asarray(x, dtype=np.float64))
    if task == "a":
        return [m for m in x[:, 0]]
    return [R for R in flow.finish_task_b(x, infer)]


def train_method(
    method: str,
    cond_train: np.ndarray,
    target_train: np.ndarray,
    net: VelocityNet,
    cfg: flow.TrainConfig,
    ddpm: baselines.DdpmConfig = baselines.DdpmConfig(),
    **kw,
) -> flow.TrainResult:
    """Train ``method`` on normalised arrays; keyword arguments pass through to ``flow.train``."""
    if method == "gfm":
        return flow.train(cond_train, target_train, net, cfg, **kw)
    if method == "regression":
        return baselines.regression_train(cond_train, target_train, net, cfg, **kw)
    if method == "ddpm":
        return baselines.ddpm_train(cond_train, target_train, net, cfg, ddpm, **kw)
    raise ValueError(f"{method!r} is not a learned method")
