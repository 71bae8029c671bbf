"""Binary dataset files (``CKMF``) and the record generators that fill them.

Layout, little-endian::

    magic "CKMF" | version u32 = 1 | task u8 (0 = A, 1 = B) | count u64 |
    dims u32 x 2 (H, W for task A; N_t, K for task B) | count x record (f32)

A task A record is the quantized gain map followed by the oracle outdoor mask
(both H x W). A task B record is the target covariance (real then imaginary
plane) followed by its K ring neighbours in compass order N, NE, E, ..., NW.
"""

from __future__ import annotations

import hashlib
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .scene import (
    CovarianceMap,
    PropagationParams,
    SceneConfig,
    compute_gain_map,
    compute_scm,
    generate_scene,
)

MAGIC = b"CKMF"
VERSION = 1
TASKS = {"a": 0, "b": 1}
_HEADER = struct.Struct("<4sIBQII")

# (drow, dcol) unit offsets in the fixed neighbour order
RING_OFFSETS = ((-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1))
RING_NAMES = ("N", "NE", "E", "SE", "S", "SW", "W", "NW")


class DatasetFormatError(ValueError):
    pass


@dataclass
class Dataset:
    task: str
    dims: tuple[int, int]
    records: np.ndarray  # (count, record_len) float32

    def __len__(self) -> int:
        return self.records.shape[0]

    @property
    def record_len(self) -> int:
        return record_length(self.task, self.dims)

    # task A views
    def gain_maps(self) -> np.ndarray:
        H, W = self.dims
        self._expect("a")
        return self.records[:, : H * W].reshape(-1, H, W)

    def oracle_masks(self) -> np.ndarray:
        H, W = self.dims
        self._expect("a")
        return self.records[:, H * W :].reshape(-1, H, W)

    # task B views
    def targets(self) -> np.ndarray:
        """(count, 2, N_t, N_t) real/imaginary planes of the centre covariance."""
        n, _ = self.dims
        self._expect("b")
        return self.records[:, : 2 * n * n].reshape(-1, 2, n, n)

    def neighbors(self) -> np.ndarray:
        """(count, K, 2, N_t, N_t) ring neighbours in compass order."""
        n, k = self.dims
        self._expect("b")
        return self.records[:, 2 * n * n :].reshape(-1, k, 2, n, n)

    def subset(self, index: np.ndarray) -> "Dataset":
        return Dataset(self.task, self.dims, self.records[np.asarray(index)])

    def _expect(self, task: str) -> None:
        if self.task != task:
            raise DatasetFormatError(f"dataset holds task {self.task.upper()}, not {task.upper()}")


def record_length(task: str, dims: tuple[int, int]) -> int:
    if task == "a":
        return 2 * dims[0] * dims[1]
    n, k = dims
    return 2 * n * n * (k + 1)


def write_dataset(path: str | Path, ds: Dataset) -> None:
    recs = np.ascontiguousarray(ds.records, dtype="<f4")
    if recs.ndim != 2 or recs.shape[1] != ds.record_len:
        raise DatasetFormatError("record array does not match declared dims")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, TASKS[ds.task], recs.shape[0], *ds.dims))
        fh.write(recs.tobytes())


def read_dataset(path: str | Path) -> Dataset:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise DatasetFormatError(f"{path}: truncated header")
    magic, version, tag, count, d0, d1 = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise DatasetFormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise DatasetFormatError(f"{path}: unsupported version {version}")
    tasks = {v: k for k, v in TASKS.items()}
    if tag not in tasks:
        raise DatasetFormatError(f"{path}: unknown task tag {tag}")
    task = tasks[tag]
    rec_len = record_length(task, (d0, d1))
    payload = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size)
    if payload.size != count * rec_len:
        raise DatasetFormatError(f"{path}: expected {count} records of {rec_len} floats")
    return Dataset(task, (d0, d1), payload.reshape(count, rec_len).astype(np.float32))


def file_sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def record_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1, dtype=np.uint64)[0])


def ring_locations(center: tuple[int, int], spacing: int) -> list[tuple[int, int]]:
    return [(center[0] + spacing * dr, center[1] + spacing * dc) for dr, dc in RING_OFFSETS]


def make_record_a(seed: int, scene_cfg: SceneConfig, prop: PropagationParams) -> np.ndarray:
    scene = generate_scene(seed, scene_cfg)
    gm = compute_gain_map(scene, prop)
    return np.concatenate(
        [gm.quantized.ravel().astype(np.float32), scene.outdoor_mask().ravel().astype(np.float32)]
    )


def _valid_targets(scene, spacing: int) -> np.ndarray:
    outdoor = scene.outdoor_mask()
    H, W = outdoor.shape
    ok = outdoor.copy()
    ok[:spacing] = ok[H - spacing :] = False
    ok[:, :spacing] = ok[:, W - spacing :] = False
    for dr, dc in RING_OFFSETS:
        shifted = np.zeros_like(outdoor)
        # shifted[r, c] = outdoor[r + s*dr, c + s*dc] where in range
        rs, cs = spacing * dr, spacing * dc
        src = outdoor[max(rs, 0) : H + min(rs, 0), max(cs, 0) : W + min(cs, 0)]
        shifted[max(-rs, 0) : H + min(-rs, 0), max(-cs, 0) : W + min(-cs, 0)] = src
        ok &= shifted
    return ok


def sample_scm_site(
    seed: int, scene_cfg: SceneConfig, prop: PropagationParams, spacing: int = 2, max_scenes: int = 50
) -> tuple[CovarianceMap, list[CovarianceMap]]:
    """Pick an outdoor target whose whole neighbour ring is outdoor, then evaluate it.

    Indoor draws are skipped and redrawn; a scene with no admissible target is
    replaced by a fresh one (at most ``max_scenes`` times).
    """
    rng = np.random.default_rng([seed, 0xB])
    for attempt in range(max_scenes):
        scene = generate_scene(record_seed(seed, attempt), scene_cfg)
        ok = _valid_targets(scene, spacing)
        if not ok.any():
            continue
        for _ in range(4 * ok.size):
            r = int(rng.integers(0, ok.shape[0]))
            c = int(rng.integers(0, ok.shape[1]))
            if ok[r, c]:
                break
        else:
            continue
        target = compute_scm(scene, (r, c), prop)
        ring = [compute_scm(scene, loc, prop) for loc in ring_locations((r, c), spacing)]
        return target, ring
    raise RuntimeError(f"no admissible Task B site after {max_scenes} scenes (seed {seed})")


def make_record_b(
    seed: int, scene_cfg: SceneConfig, prop: PropagationParams, spacing: int = 2
) -> np.ndarray:
    target, ring = sample_scm_site(seed, scene_cfg, prop, spacing)
    parts = []
    for cm in [target, *ring]:
        parts.append(cm.real.astype(np.float32).ravel())
        parts.append(cm.imag.astype(np.float32).ravel())
    return np.concatenate(parts)


def _make_record(args) -> np.ndarray:
    task, seed, scene_cfg, prop, spacing = args
    if task == "a":
        return make_record_a(seed, scene_cfg, prop)
    return make_record_b(seed, scene_cfg, prop, spacing)


def generate_dataset(
    task: str,
    n_records: int,
    seed: int,
    scene_cfg: SceneConfig = SceneConfig(),
    prop: PropagationParams = PropagationParams(),
    ring_spacing: int = 2,
    jobs: int = 1,
    path: str | Path | None = None,
) -> Dataset:
    """Generate ``n_records`` records; each is a pure function of (seed, index).

    When ``path`` is given the dataset is also written there.
    """
    task = task.lower()
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}")
    if n_records < 1:
        raise ValueError("n_records must be >= 1")
    work = [(task, record_seed(seed, i), scene_cfg, prop, ring_spacing) for i in range(n_records)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_make_record, work, chunksize=max(1, n_records // (4 * jobs))))
    else:
        rows = [_make_record(w) for w in work]
    dims = (scene_cfg.height, scene_cfg.width) if task == "a" else (scene_cfg.n_antennas, 8)
    ds = Dataset(task, dims, np.stack(rows).astype(np.float32))
    if path is not None:
        write_dataset(path, ds)
    return ds


def write_pgm(path: str | Path, image: np.ndarray) -> None:
    """Binary greyscale PGM (P5, maxval 255); values are clipped and rounded."""
    img = np.clip(np.rint(np.asarray(image, dtype=np.float64)), 0, 255).astype(np.uint8)
    if img.ndim != 2:
        raise ValueError("PGM export needs a 2-D array")
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end : end + 1].isspace():
            end += 1
        tokens.append(raw[pos:end])
        pos = end
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 supported")
    pos += 1
    return np.frombuffer(raw, dtype=np.uint8, count=w * h, offset=pos).reshape(h, w)
