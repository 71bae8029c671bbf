import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ckmflow import scene as sc


def flat_params(**kw):
    base = dict(shadow_sigma=0.0, g_min=-400.0, g_max=0.0)
    base.update(kw)
    return sc.PropagationParams(**base)


def test_no_buildings_gives_empty_list():
    s = sc.generate_scene(1, sc.SceneConfig(n_buildings=0))
    assert s.buildings == ()


def test_same_seed_same_scene():
    assert sc.generate_scene(42) == sc.generate_scene(42)


def test_seed7_buildings_in_bounds_and_bs_outdoors():
    cfg = sc.SceneConfig(height=64, width=64, n_buildings=5)
    s = sc.generate_scene(7, cfg)
    assert len(s.buildings) == 5
    br, bc = s.bs_pos
    for r0, c0, r1, c1 in s.buildings:
        assert 0 <= r0 < r1 <= 64 and 0 <= c0 < c1 <= 64
        assert not (r0 <= br < r1 and c0 <= bc < c1)


def test_placement_failure_when_grid_is_full():
    # a building always as large as the grid must cover the base station
    cfg = sc.SceneConfig(height=8, width=8, n_buildings=1, min_building=8, max_building=8, max_tries=5)
    with pytest.raises(sc.PlacementError):
        sc.generate_scene(0, cfg)


def test_free_space_exponent2_doubling_distance():
    p = flat_params(exponent=2.0)
    assert sc.path_loss_db(2 * p.ref_dist, p) == pytest.approx(p.pl0 + 6.0206, abs=1e-4)


def test_gain_at_reference_distance_is_minus_pl0():
    s = sc.Scene(16, 16, 1.0, (8, 8), 4)
    g = sc.compute_gain_map(s, flat_params(ref_dist=1.0))
    assert g.values[8, 9] == pytest.approx(-40.0, abs=1e-12)
    assert g.values[8, 8] == pytest.approx(-40.0, abs=1e-12)


def test_wall_penalty_difference():
    # BS at (2, 8); building rows 6..7, cols 6..9; pixel (12, 8) is shadowed, (2, 18) is not
    s = sc.Scene(20, 20, 1.0, (2, 8), 4, buildings=((6, 6, 8, 10),))
    p = flat_params(wall_loss=6.0)
    g = sc.compute_gain_map(s, p)
    blocked, free = (12, 8), (2, 18)
    assert math.hypot(12 - 2, 0) == math.hypot(0, 18 - 8)
    n_walls = int(sc.count_wall_crossings(s, np.array([12.0]), np.array([8.0]))[0])
    # entering and leaving the rectangle: two walls
    assert n_walls == 2
    assert g.values[free] - g.values[blocked] == pytest.approx(p.wall_loss * n_walls, abs=1e-9)


def test_gain_map_building_floor_and_quantization_invariant():
    s = sc.generate_scene(3)
    p = sc.PropagationParams()
    g = sc.compute_gain_map(s, p)
    assert np.all(g.values[s.building_mask()] == p.g_min)
    expected = np.rint(255 * (g.values - p.g_min) / (p.g_max - p.g_min))
    assert np.array_equal(g.quantized, expected.astype(np.uint8))


def test_free_space_gain_monotone_in_distance():
    s = sc.Scene(32, 32, 5.0, (0, 0), 4)
    g = sc.compute_gain_map(s, sc.PropagationParams(shadow_sigma=0.0, g_min=-400.0))
    rows, cols = np.meshgrid(np.arange(32), np.arange(32), indexing="ij")
    d = np.hypot(rows, cols).ravel()
    order = np.argsort(d, kind="stable")
    assert np.all(np.diff(g.values.ravel()[order]) <= 1e-12)


def test_shadowing_statistics():
    s = sc.generate_scene(5)
    p = sc.PropagationParams(shadow_sigma=4.0)
    f = sc.shadowing_field(s, p)
    assert abs(f.mean()) < 1e-9
    assert f.std() == pytest.approx(4.0, rel=1e-9)


@given(st.floats(-140, -40), st.floats(-140, -40))
def test_quantization_roundtrip(a, b):
    g = np.array([a, b])
    back = sc.dequantize(sc.quantize(g, -140.0, -40.0), -140.0, -40.0)
    assert np.all(np.abs(back - g) <= 100.0 / 510 + 1e-12)


def test_steering_vector_examples():
    assert np.allclose(sc.steering_vector(0.0, 6), np.ones(6))
    assert np.allclose(sc.steering_vector(np.pi / 2, 5), [(-1) ** n for n in range(5)])
    a = sc.steering_vector(0.37, 9)
    assert np.allclose(np.abs(a), 1.0)


def test_scm_single_path_rank_one():
    s = sc.generate_scene(2)
    loc = next((r, c) for r in range(32) for c in range(32) if not s.is_indoor(r, c) and (r, c) != s.bs_pos)
    R = sc.compute_scm(s, loc, sc.PropagationParams(n_paths=1)).matrix
    a = sc.steering_vector(sc._angle(s.bs_pos, loc), s.n_antennas)
    assert np.allclose(R, np.outer(a, a.conj()), atol=1e-12)
    assert np.trace(R).real == pytest.approx(s.n_antennas)
    assert np.linalg.matrix_rank(R, tol=1e-8) == 1


def test_scm_two_paths_eigen_structure():
    # one building; the nearest corner to loc is known by construction
    s = sc.Scene(16, 16, 1.0, (0, 0), 8, buildings=((6, 6, 9, 9),))
    loc = (12, 3)
    R = sc.compute_scm(s, loc, sc.PropagationParams(n_paths=2, path_decay=0.5)).matrix
    corners = [(6, 6), (6, 8), (8, 6), (8, 8)]
    nearest = min(corners, key=lambda rc: ((rc[0] - 12) ** 2 + (rc[1] - 3) ** 2, rc))
    assert nearest == (8, 6)
    th0 = math.atan2(12 - 0, 3 - 0)
    th1 = math.atan2(12 - 8, 3 - 6)
    a0, a1 = sc.steering_vector(th0, 8), sc.steering_vector(th1, 8)
    # powers 1 and 0.5 normalised to sum one
    p0, p1 = 2 / 3, 1 / 3
    # nonzero eigenvalues of p0 a0a0^H + p1 a1a1^H equal those of the 2x2 Gram form
    G = np.array([[p0 * (a0.conj() @ a0), np.sqrt(p0 * p1) * (a0.conj() @ a1)],
                  [np.sqrt(p0 * p1) * (a1.conj() @ a0), p1 * (a1.conj() @ a1)]])
    expected = np.sort(np.linalg.eigvals(G).real)
    got = np.sort(np.linalg.eigvalsh(R))[-2:]
    assert np.allclose(got, expected, atol=1e-10)
    assert np.allclose(np.sort(np.linalg.eigvalsh(R))[:-2], 0, atol=1e-10)


def test_scm_corner_shortage_reuses_los_angle():
    s = sc.Scene(12, 12, 1.0, (0, 0), 4)
    angles = sc.scm_angles(s, (5, 7), 3)
    th0 = math.atan2(5, 7)
    assert angles == pytest.approx([th0, th0 + 0.05, th0 + 0.10])


def test_scm_indoor_location_rejected():
    s = sc.Scene(12, 12, 1.0, (0, 0), 4, buildings=((4, 4, 6, 6),))
    with pytest.raises(sc.IndoorLocationError):
        sc.compute_scm(s, (5, 5))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32), st.integers(1, 5), st.floats(0.1, 0.9))
def test_scm_hermitian_psd_trace(seed, n_paths, decay):
    s = sc.generate_scene(seed)
    rng = np.random.default_rng(seed)
    out = np.argwhere(s.outdoor_mask())
    loc = tuple(out[rng.integers(len(out))])
    R = sc.compute_scm(s, loc, sc.PropagationParams(n_paths=n_paths, path_decay=decay)).matrix
    assert np.max(np.abs(R - R.conj().T)) == 0
    assert np.linalg.eigvalsh(R).min() >= -1e-6 * np.trace(R).real
    assert np.trace(R).real == pytest.approx(s.n_antennas)


def test_invalid_propagation_params():
    with pytest.raises(ValueError):
        sc.PropagationParams(exponent=6.0)
    with pytest.raises(ValueError):
        sc.PropagationParams(wall_loss=-1.0)
    with pytest.raises(ValueError):
        sc.PropagationParams(n_paths=0)
