import math
import time

import numpy as np
import pytest

from ckmflow import baselines as bl
from ckmflow import flow, nn


def test_knn_center_of_2x2_is_mean():
    y = np.array([[1.0, 2.0], [3.0, 10.0]])
    out = bl.knn_reconstruct_a(y, 4, 4, k=4)
    # pixel (1,1) is at distance sqrt(2) from all four observations at (0,0), (0,2), (2,0), (2,2)
    assert out[1, 1] == pytest.approx(np.mean(y), abs=1e-12)
    assert out[0, 0] == 1.0 and out[2, 2] == 10.0


def test_knn_constant_and_k1_blocks():
    assert np.allclose(bl.knn_reconstruct_a(np.full((4, 4), 7.0), 16, 16), 7.0)
    y = np.arange(16.0).reshape(4, 4)
    out = bl.knn_reconstruct_a(y, 16, 16, k=1)
    # brute-force nearest observation wherever it is unique
    for r in range(16):
        for c in range(16):
            d = [math.hypot(r - 4 * i, c - 4 * j) for i in range(4) for j in range(4)]
            best = min(d)
            if d.count(best) == 1:
                assert out[r, c] == pytest.approx(y.ravel()[d.index(best)], abs=1e-12)


def test_knn_k_clamped():
    y = np.array([[2.0, 4.0]])
    assert np.allclose(bl.knn_reconstruct_a(y, 2, 4, k=50), bl.knn_reconstruct_a(y, 2, 4, k=2))
    with pytest.raises(ValueError):
        bl.knn_reconstruct_a(y, 2, 4, k=0)


def test_knn_b_examples():
    rng = np.random.default_rng(0)
    A = rng.standard_normal((4, 4)) + 1j * rng.standard_normal((4, 4))
    R = A @ A.conj().T
    assert np.allclose(bl.knn_reconstruct_b([R] * 8), R)
    assert np.allclose(bl.knn_reconstruct_b([R, -R, R, -R]), 0)
    mats = []
    for _ in range(8):
        B = rng.standard_normal((4, 4)) + 1j * rng.standard_normal((4, 4))
        mats.append(B @ B.conj().T)
    out = bl.knn_reconstruct_b(mats)
    assert np.max(np.abs(out - out.conj().T)) == 0


def test_bilinear_examples():
    out = bl.bilinear_reconstruct(np.array([[0.0, 10.0]]), 1, 5)
    assert np.allclose(out, [[0, 2.5, 5, 7.5, 10]])
    assert np.allclose(bl.bilinear_reconstruct(np.full((3, 5), 4.0), 9, 13), 4.0)
    y = np.random.default_rng(1).normal(size=(6, 6))
    assert np.allclose(bl.bilinear_reconstruct(y, 6, 6), y)
    assert np.allclose(bl.bicubic_reconstruct(y, 6, 6), y)
    assert np.allclose(bl.bicubic_reconstruct(np.full((3, 3), -2.0), 12, 12), -2.0)


def test_regression_memorizes_one_pair():
    rng = np.random.default_rng(0)
    c = rng.standard_normal((1, 3, 8, 8)).astype(np.float32)
    x1 = rng.standard_normal((1, 1, 8, 8)).astype(np.float32)
    net = bl.regression_net(3, 1, base_width=8, depth=1)
    p0 = net.init_params(0)
    init = np.mean((bl.regression_reconstruct(net, p0, c) - x1) ** 2)
    res = bl.regression_train(c, x1, net, flow.TrainConfig(batch_size=1, lr=2e-3, epochs=300))
    final = np.mean((bl.regression_reconstruct(net, res.params, c) - x1) ** 2)
    assert final < 0.01 * init
    again = bl.regression_train(c, x1, net, flow.TrainConfig(batch_size=1, lr=2e-3, epochs=300))
    assert np.array_equal(bl.regression_reconstruct(net, again.params, c), bl.regression_reconstruct(net, res.params, c))


def test_regression_faster_than_flow():
    reg = bl.regression_net(3, 1, 16, 2)
    gfm = nn.VelocityNet(nn.VelocityNetConfig(4, 1, 16, 2))
    pr, pg = reg.init_params(0), gfm.init_params(0)
    c = np.random.default_rng(0).standard_normal((1, 3, 32, 32)).astype(np.float32)

    def best(fn):
        fn()
        times = []
        for _ in range(5):
            t0 = time.perf_counter()
            fn()
            times.append(time.perf_counter() - t0)
        return min(times)

    ratio = best(lambda: bl.regression_reconstruct(reg, pr, c)) / best(
        lambda: flow.euler_integrate(gfm, pg, c, flow.InferenceConfig(steps=10)))
    assert ratio < 0.25


def test_ddpm_schedule_values():
    cfg = bl.DdpmConfig(T=250, beta_start=1e-4, beta_end=0.02)
    beta, alpha, abar = bl.ddpm_schedule(cfg)
    prod = 1.0
    for i in range(250):
        prod *= 1 - (1e-4 + i * (0.02 - 1e-4) / 249)
    assert abar[-1] == pytest.approx(prod, rel=1e-12)
    assert abar[0] == 1 - beta[0]
    # the unscaled range leaves ~8% signal at T=250; the default rescaled range noises fully
    assert abar[-1] == pytest.approx(0.0797, abs=1e-3)
    assert bl.ddpm_schedule(bl.DdpmConfig())[2][-1] < 0.01


def test_ddpm_config_validation():
    with pytest.raises(ValueError):
        bl.DdpmConfig(T=0)
    with pytest.raises(ValueError):
        bl.DdpmConfig(beta_start=0.1, beta_end=0.01)
    bl.DdpmConfig(T=1, beta_start=0.02, beta_end=0.02)


def test_ddpm_initial_loss_is_unit():
    rng = np.random.default_rng(0)
    net = nn.VelocityNet(nn.VelocityNetConfig(2, 1, 8, 1, 16))
    x1 = rng.standard_normal((64, 1, 8, 8)).astype(np.float32)
    obj = bl.ddpm_objective_factory(bl.DdpmConfig())
    loss, _ = obj(net, net.init_params(0), x1, np.zeros_like(x1), rng)
    assert loss == pytest.approx(1.0, abs=0.03)


def test_ddpm_noising_variance_preserving():
    rng = np.random.default_rng(1)
    x = rng.standard_normal(200_000)
    for a in bl.ddpm_schedule(bl.DdpmConfig())[2][[0, 50, 150, 249]]:
        xt = np.sqrt(a) * x + np.sqrt(1 - a) * rng.standard_normal(x.size)
        assert xt.var() == pytest.approx(a * x.var() + (1 - a), rel=0.05)


def test_ddpm_sample_deterministic_and_t1():
    net = nn.VelocityNet(nn.VelocityNetConfig(2, 1, 8, 1, 16))
    p = net.init_params(0)
    p.values += np.random.default_rng(2).normal(0, 0.05, len(p)).astype(np.float32)
    c = np.random.default_rng(3).standard_normal((2, 1, 8, 8)).astype(np.float32)
    cfg = bl.DdpmConfig(T=20, seed=4)
    a, b = bl.ddpm_sample(net, p, c, cfg), bl.ddpm_sample(net, p, c, cfg)
    assert a.shape == (2, 1, 8, 8) and np.array_equal(a, b)
    one = bl.ddpm_sample(net, p, c, bl.DdpmConfig(T=1, beta_start=0.02, beta_end=0.02))
    assert np.all(np.isfinite(one))


def test_ddpm_sample_zero_eps_is_deterministic_scaling():
    # with eps = 0 and T = 1 the sampler returns x_T / sqrt(alpha_1)
    net = nn.VelocityNet(nn.VelocityNetConfig(2, 1, 8, 1, 16))
    cfg = bl.DdpmConfig(T=1, beta_start=0.02, beta_end=0.02, seed=5)
    c = np.zeros((1, 1, 8, 8), dtype=np.float32)
    x_T = np.random.default_rng(5).standard_normal((1, 1, 8, 8))
    out = bl.ddpm_sample(net, net.init_params(0), c, cfg)
    assert np.allclose(out, x_T / math.sqrt(0.98), atol=1e-6)
