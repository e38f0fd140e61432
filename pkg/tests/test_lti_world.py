import numpy as np
import pandas as pd
import pytest
from numpy.testing import assert_allclose

from src.errors import DimensionError, ValidationError
from src.lti_world import (
    BlockLtiSystem,
    MomentEstimate,
    make_chain_benchmark,
    make_scalar_benchmark,
    make_two_client_benchmark,
    observation_block,
    simulate,
    stream_moments,
    update_moments,
)
from src.matrix_kernels import BlockIndex


@pytest.fixture
def scalar_world():
    return make_scalar_benchmark()


def _diag_world(a, q, r):
    idx = BlockIndex.uniform(2, 1, 1)
    return BlockLtiSystem(A=np.diag(a), C=np.eye(2), Q=q * np.eye(2), R=r * np.eye(2), idx=idx)


def test_two_client_benchmark_structure():
    world = make_two_client_benchmark()
    assert world.idx.p_dims == [2, 2] and world.idx.d_dims == [8, 8]
    assert np.all(world.A_block(0, 1) == 0.0)
    assert np.linalg.norm(world.A_block(1, 0)) > 0.0
    assert world.rho < 1.0
    assert np.linalg.matrix_rank(world.C_block(0)) == 2


def test_chain_benchmark_matches_two_client_for_m2():
    assert_allclose(make_chain_benchmark(2).A, make_two_client_benchmark().A)
    chain = make_chain_benchmark(4, d_m=4)
    assert chain.idx.M == 4 and chain.rho < 1.0
    assert np.all(chain.A_block(0, 2) == 0.0)
    with pytest.raises(ValidationError):
        make_chain_benchmark(1)


def test_observation_block_scaling():
    assert observation_block(16).shape == (16, 2)
    base = observation_block(8)
    big = observation_block(16)
    assert_allclose(big.T @ big, base.T @ base)
    with pytest.raises(ValidationError):
        observation_block(1)


def test_non_block_diagonal_c_rejected():
    idx = BlockIndex.uniform(2, 1, 1)
    with pytest.raises(Exception):
        BlockLtiSystem(A=0.5 * np.eye(2), C=np.ones((2, 2)), Q=np.eye(2), R=np.eye(2), idx=idx)


def test_non_psd_noise_rejected():
    idx = BlockIndex.uniform(2, 1, 1)
    with pytest.raises(Exception):
        BlockLtiSystem(A=0.5 * np.eye(2), C=np.eye(2), Q=np.diag([1.0, -1.0]), R=np.eye(2), idx=idx)


def test_unstable_flagged_system_rejected():
    idx = BlockIndex.uniform(2, 1, 1)
    with pytest.raises(Exception):
        BlockLtiSystem(A=1.1 * np.eye(2), C=np.eye(2), Q=np.eye(2), R=np.eye(2), idx=idx)
    loose = BlockLtiSystem(A=1.1 * np.eye(2), C=np.eye(2), Q=np.eye(2), R=np.eye(2), idx=idx, stable=False)
    assert loose.rho == pytest.approx(1.1)


def test_simulate_is_deterministic(scalar_world):
    a = simulate(scalar_world, 50, seed=3)
    b = simulate(scalar_world, 50, seed=3)
    c = simulate(scalar_world, 50, seed=4)
    assert np.array_equal(a.y, b.y) and np.array_equal(a.h, b.h)
    assert not np.array_equal(a.y, c.y)
    assert a.T == 50 and a.y.shape == (51, 2)


def test_noiseless_zero_orbit():
    traj = simulate(_diag_world([0.5, 0.6], 0.0, 0.0), 100, seed=0)
    assert np.all(traj.y == 0.0)


def test_zero_process_noise_variance_converges_to_r():
    world = _diag_world([0.5, 0.6], 0.0, 0.04)
    traj = simulate(world, 50_000, seed=11)
    tail = traj.y[-25_000:]
    assert_allclose(np.var(tail, axis=0, ddof=1), [0.04, 0.04], rtol=0.05)


def test_stationary_state_covariance_lyapunov_oracle():
    world = _diag_world([0.9, 0.0], 1.0, 1.0)
    assert world.state_covariance()[0, 0] == pytest.approx(1.0 / (1.0 - 0.81))


def test_measurement_moments_match_long_run(scalar_world):
    mu, Sigma = scalar_world.measurement_moments()
    traj = simulate(scalar_world, 40_000, seed=5)
    assert_allclose(traj.y[1000:].mean(axis=0), mu, atol=0.02)
    assert_allclose(np.cov(traj.y[1000:].T), Sigma, rtol=0.1, atol=0.01)


def test_measurement_offset_shifts_the_mean():
    world = make_scalar_benchmark(offset=0.5)
    mu, _ = world.client_moments(1)
    assert_allclose(mu, [0.5])


def test_mean_shift_schedule_on_measurements(scalar_world):
    base = simulate(scalar_world, 20, seed=1)
    shifted = simulate(scalar_world, 20, seed=1, mean_shift_schedule=[(10, [1.0, -2.0])])
    assert_allclose(shifted.y[:10], base.y[:10])
    assert_allclose(shifted.y[10:] - base.y[10:], np.tile([1.0, -2.0], (11, 1)))
    assert_allclose(shifted.h, base.h)


def test_mean_shift_bad_shape(scalar_world):
    with pytest.raises(DimensionError):
        simulate(scalar_world, 5, seed=1, mean_shift_schedule=[(2, [1.0])])


def test_noise_scale_scales_sigma_y(scalar_world):
    _, S1 = scalar_world.measurement_moments()
    _, S2 = scalar_world.with_noise_scale(2.0).measurement_moments()
    assert_allclose(S2, 2.0 * S1)
    with pytest.raises(ValidationError):
        scalar_world.with_noise_scale(0.0)


def test_trajectory_csv_export(tmp_path, scalar_world):
    traj = simulate(scalar_world, 5, seed=2)
    path = tmp_path / "traj.csv"
    traj.to_csv(str(path))
    frame = pd.read_csv(path)
    assert list(frame.columns) == ["t", "y_1", "y_2"]
    assert len(frame) == 6
    assert_allclose(frame[["y_1", "y_2"]].to_numpy(), traj.y)


def test_ewma_full_forgetting():
    est = MomentEstimate.start(2, mode="ewma", lam=1.0)
    for x in ([1.0, 2.0], [3.0, -1.0], [0.5, 0.5]):
        est = update_moments(est, np.array(x))
        assert_allclose(est.mean, x)


def test_ewma_rejects_bad_lambda():
    with pytest.raises(Exception):
        MomentEstimate.start(1, mode="ewma", lam=0.0)
    with pytest.raises(Exception):
        MomentEstimate.start(1, mode="ewma", lam=1.5)


def test_constant_stream_has_zero_covariance():
    history = stream_moments(np.tile([2.0, -1.0], (50, 1)), mode="ewma", lam=0.1)
    assert_allclose(history[-1].mean, [2.0, -1.0])
    assert_allclose(history[-1].covariance, np.zeros((2, 2)), atol=1e-12)


def test_cumulative_mode_is_arithmetic_mean():
    rng = np.random.default_rng(0)
    X = rng.standard_normal((30, 3))
    est = stream_moments(X)[-1]
    assert_allclose(est.mean, X.mean(axis=0), atol=1e-12)
    assert_allclose(est.covariance, np.cov(X.T, ddof=0), atol=1e-12)


def test_update_dimension_mismatch():
    with pytest.raises(DimensionError):
        update_moments(MomentEstimate.start(2), np.zeros(3))


def test_ewma_drift_tracking_bound():
    """Steady lag of an EWMA on a linear drift scales like delta / lambda."""
    delta, n = 1e-3, 3000
    stream = (delta * np.arange(n)).reshape(-1, 1)

    def steady_error(lam):
        history = stream_moments(stream, mode="ewma", lam=lam)
        return abs(history[-1].mean[0] - stream[-1, 0])

    # constant fitted at lam = 0.1 with a 25% margin
    C = 1.25 * steady_error(0.1) * 0.1 / delta
    for lam in (0.01, 0.05):
        assert steady_error(lam) <= C * delta / lam
