"""Synthetic ground truth: building layouts, channel gain maps and spatial covariance maps.

The generator is a deliberately simple stand-in for a ray tracer: log-distance
path loss, a fixed penetration loss per crossed building wall and a smoothed
Gaussian shadowing field for gain maps; LOS plus building-corner scatterers with
geometric path powers for covariance maps.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import uniform_filter


class PlacementError(RuntimeError):
    """Raised when a building cannot be placed without covering the base station."""


class IndoorLocationError(ValueError):
    """Raised when a covariance is requested at an in-building pixel."""


@dataclass(frozen=True)
class SceneConfig:
    height: int = 32
    width: int = 32
    cell_size: float = 5.0
    n_antennas: int = 8
    n_buildings: int = 5
    min_building: int = 3
    max_building: int = 8
    max_tries: int = 100

    def __post_init__(self):
        if self.height < 8 or self.width < 8:
            raise ValueError("grid must be at least 8x8")
        if self.n_antennas < 2:
            raise ValueError("n_antennas must be >= 2")
        if self.n_buildings < 0:
            raise ValueError("n_buildings must be >= 0")
        if not 1 <= self.min_building <= self.max_building:
            raise ValueError("need 1 <= min_building <= max_building")
        if self.max_tries < 1:
            raise ValueError("max_tries must be >= 1")


@dataclass(frozen=True)
class PropagationParams:
    pl0: float = 40.0
    ref_dist: float = 1.0
    exponent: float = 3.0
    wall_loss: float = 6.0
    shadow_sigma: float = 4.0
    shadow_corr_px: int = 6
    n_paths: int = 3
    path_decay: float = 0.5
    # dB range mapped onto the 8-bit scale; g_min doubles as the in-building floor
    g_min: float = -160.0
    g_max: float = -40.0

    def __post_init__(self):
        if not 1.5 <= self.exponent <= 5.0:
            raise ValueError("exponent must lie in [1.5, 5]")
        if self.wall_loss < 0:
            raise ValueError("wall_loss must be >= 0")
        if self.n_paths < 1:
            raise ValueError("n_paths must be >= 1")
        if self.ref_dist <= 0:
            raise ValueError("ref_dist must be positive")
        if self.shadow_sigma < 0 or self.shadow_corr_px < 1:
            raise ValueError("shadow_sigma must be >= 0 and shadow_corr_px >= 1")
        if not self.g_max > self.g_min:
            raise ValueError("g_max must exceed g_min")


@dataclass(frozen=True)
class Scene:
    height_px: int
    width_px: int
    cell_size: float
    bs_pos: tuple[int, int]
    n_antennas: int
    buildings: tuple[tuple[int, int, int, int], ...] = ()
    rng_seed: int = 0

    def __post_init__(self):
        if self.height_px < 8 or self.width_px < 8:
            raise ValueError("grid must be at least 8x8")
        if self.n_antennas < 2:
            raise ValueError("n_antennas must be >= 2")
        for r0, c0, r1, c1 in self.buildings:
            if not (0 <= r0 < r1 <= self.height_px and 0 <= c0 < c1 <= self.width_px):
                raise ValueError(f"building {(r0, c0, r1, c1)} out of bounds")
        if self.is_indoor(*self.bs_pos):
            raise ValueError("base station lies inside a building")

    def is_indoor(self, row: int, col: int) -> bool:
        return any(r0 <= row < r1 and c0 <= col < c1 for r0, c0, r1, c1 in self.buildings)

    def building_mask(self) -> np.ndarray:
        """Boolean H x W array, True on building pixels (rectangles are half-open)."""
        mask = np.zeros((self.height_px, self.width_px), dtype=bool)
        for r0, c0, r1, c1 in self.buildings:
            mask[r0:r1, c0:c1] = True
        return mask

    def outdoor_mask(self) -> np.ndarray:
        return ~self.building_mask()


@dataclass
class GainMap:
    values: np.ndarray
    g_min: float
    g_max: float
    quantized: np.ndarray = field(init=False)

    def __post_init__(self):
        self.quantized = quantize(self.values, self.g_min, self.g_max)


@dataclass
class CovarianceMap:
    real: np.ndarray
    imag: np.ndarray
    location: tuple[int, int]

    @property
    def matrix(self) -> np.ndarray:
        return self.real.astype(np.float64) + 1j * self.imag.astype(np.float64)

    @classmethod
    def from_matrix(cls, R: np.ndarray, location: tuple[int, int]) -> "CovarianceMap":
        return cls(np.ascontiguousarray(R.real), np.ascontiguousarray(R.imag), tuple(location))


def quantize(values: np.ndarray, g_min: float, g_max: float) -> np.ndarray:
    scaled = 255.0 * (np.asarray(values, dtype=np.float64) - g_min) / (g_max - g_min)
    return np.clip(np.rint(scaled), 0, 255).astype(np.uint8)


def dequantize(q: np.ndarray, g_min: float, g_max: float) -> np.ndarray:
    return g_min + np.asarray(q, dtype=np.float64) * (g_max - g_min) / 255.0


def generate_scene(seed: int, cfg: SceneConfig = SceneConfig()) -> Scene:
    """Draw a base station position and `cfg.n_buildings` rectangles.

    Rectangles may overlap each other but never cover the base station; each one
    is resampled at most ``cfg.max_tries`` times before giving up.
    """
    rng = np.random.default_rng(seed)
    H, W = cfg.height, cfg.width
    bs = (int(rng.integers(0, H)), int(rng.integers(0, W)))
    max_h = min(cfg.max_building, H)
    max_w = min(cfg.max_building, W)
    min_h = min(cfg.min_building, max_h)
    min_w = min(cfg.min_building, max_w)

    buildings = []
    for k in range(cfg.n_buildings):
        for _ in range(cfg.max_tries):
            h = int(rng.integers(min_h, max_h + 1))
            w = int(rng.integers(min_w, max_w + 1))
            r0 = int(rng.integers(0, H - h + 1))
            c0 = int(rng.integers(0, W - w + 1))
            if not (r0 <= bs[0] < r0 + h and c0 <= bs[1] < c0 + w):
                buildings.append((r0, c0, r0 + h, c0 + w))
                break
        else:
            raise PlacementError(
                f"building {k} covers the base station after {cfg.max_tries} tries"
            )
    return Scene(
        height_px=H,
        width_px=W,
        cell_size=float(cfg.cell_size),
        bs_pos=bs,
        n_antennas=cfg.n_antennas,
        buildings=tuple(buildings),
        rng_seed=int(seed),
    )


def _segment_crossings(
    p0: tuple[float, float], rows: np.ndarray, cols: np.ndarray, rect: tuple[int, int, int, int]
) -> np.ndarray:
    """Number of rectangle edges crossed by the segments p0 -> (rows, cols).

    Pixel centres sit at integer coordinates, so building ``(r0, c0, r1, c1)``
    occupies the closed box [r0 - 0.5, r1 - 0.5] x [c0 - 0.5, c1 - 0.5].
    Liang-Barsky clipping gives the entry/exit parameters; each one strictly
    inside (0, 1) is one wall.
    """
    r0, c0, r1, c1 = rect
    lo = (r0 - 0.5, c0 - 0.5)
    hi = (r1 - 0.5, c1 - 0.5)
    d = (rows - p0[0], cols - p0[1])
    t_in = np.zeros(rows.shape)
    t_out = np.ones(rows.shape)
    valid = np.ones(rows.shape, dtype=bool)
    with np.errstate(divide="ignore", invalid="ignore"):
        for axis in range(2):
            da = d[axis]
            start = p0[axis]
            parallel = da == 0
            inside = (start >= lo[axis]) & (start <= hi[axis])
            valid &= ~parallel | inside
            ta = (lo[axis] - start) / da
            tb = (hi[axis] - start) / da
            t_near = np.where(parallel, -np.inf, np.minimum(ta, tb))
            t_far = np.where(parallel, np.inf, np.maximum(ta, tb))
            t_in = np.maximum(t_in, t_near)
            t_out = np.minimum(t_out, t_far)
    hit = valid & (t_in < t_out)
    return (hit & (t_in > 0)).astype(np.int64) + (hit & (t_out < 1)).astype(np.int64)


def count_wall_crossings(scene: Scene, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    rows = np.asarray(rows, dtype=np.float64)
    cols = np.asarray(cols, dtype=np.float64)
    total = np.zeros(rows.shape, dtype=np.int64)
    p0 = (float(scene.bs_pos[0]), float(scene.bs_pos[1]))
    for rect in scene.buildings:
        total += _segment_crossings(p0, rows, cols, rect)
    return total


def path_loss_db(dist_m: np.ndarray, p: PropagationParams) -> np.ndarray:
    d = np.maximum(np.asarray(dist_m, dtype=np.float64), p.ref_dist)
    return p.pl0 + 10.0 * p.exponent * np.log10(d / p.ref_dist)


def shadowing_field(scene: Scene, p: PropagationParams) -> np.ndarray:
    H, W = scene.height_px, scene.width_px
    if p.shadow_sigma == 0:
        return np.zeros((H, W))
    rng = np.random.default_rng([scene.rng_seed, 0x5AD0])
    raw = uniform_filter(rng.standard_normal((H, W)), size=p.shadow_corr_px, mode="wrap")
    raw -= raw.mean()
    std = raw.std()
    if std == 0:
        return np.zeros((H, W))
    return raw * (p.shadow_sigma / std)


def compute_gain_map(scene: Scene, p: PropagationParams = PropagationParams()) -> GainMap:
    H, W = scene.height_px, scene.width_px
    rows, cols = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    dist = scene.cell_size * np.hypot(rows - scene.bs_pos[0], cols - scene.bs_pos[1])
    gain = -path_loss_db(dist, p)
    gain -= p.wall_loss * count_wall_crossings(scene, rows, cols)
    gain += shadowing_field(scene, p)
    gain = np.clip(gain, p.g_min, p.g_max)
    gain[scene.building_mask()] = p.g_min
    return GainMap(values=gain, g_min=p.g_min, g_max=p.g_max)


def steering_vector(theta: float, n_antennas: int) -> np.ndarray:
    """Half-wavelength ULA response exp(i*pi*n*sin(theta)), n = 0..N-1."""
    if n_antennas < 1:
        raise ValueError("n_antennas must be >= 1")
    n = np.arange(n_antennas)
    return np.exp(1j * np.pi * n * np.sin(theta))


def _angle(src: tuple[float, float], dst: tuple[float, float]) -> float:
    # broadside along +col, array axis along rows
    return float(np.arctan2(dst[0] - src[0], dst[1] - src[1]))


def building_corners(scene: Scene) -> list[tuple[int, int]]:
    corners = set()
    for r0, c0, r1, c1 in scene.buildings:
        corners.update({(r0, c0), (r0, c1 - 1), (r1 - 1, c0), (r1 - 1, c1 - 1)})
    return sorted(corners)


def scm_angles(scene: Scene, loc: tuple[int, int], n_paths: int) -> list[float]:
    theta0 = _angle(scene.bs_pos, loc)
    corners = building_corners(scene)
    # ties broken by (row, col) thanks to the sort key
    corners.sort(key=lambda rc: ((rc[0] - loc[0]) ** 2 + (rc[1] - loc[1]) ** 2, rc[0], rc[1]))
    angles = [theta0]
    for l in range(1, n_paths):
        if l - 1 < len(corners):
            angles.append(_angle(corners[l - 1], loc))
        else:
            angles.append(theta0 + 0.05 * l)
    return angles


def path_powers(n_paths: int, decay: float) -> np.ndarray:
    p = decay ** np.arange(n_paths, dtype=np.float64)
    return p / p.sum()


def compute_scm(
    scene: Scene, loc: tuple[int, int], p: PropagationParams = PropagationParams()
) -> CovarianceMap:
    """Expected covariance over independent uniform path phases.

    Phase averaging removes every cross term, leaving
    ``sum_l p_l a(theta_l) a(theta_l)^H`` with powers normalised to trace N_t.
    """
    row, col = int(loc[0]), int(loc[1])
    if not (0 <= row < scene.height_px and 0 <= col < scene.width_px):
        raise ValueError(f"location {loc} outside the grid")
    if scene.is_indoor(row, col):
        raise IndoorLocationError(f"location {loc} is inside a building")
    N = scene.n_antennas
    R = np.zeros((N, N), dtype=np.complex128)
    for power, theta in zip(path_powers(p.n_paths, p.path_decay), scm_angles(scene, (row, col), p.n_paths)):
        a = steering_vector(theta, N)
        R += power * np.outer(a, a.conj())
    # exact Hermitian symmetry in floating point
    R = 0.5 * (R + R.conj().T)
    return CovarianceMap.from_matrix(R, (row, col))
