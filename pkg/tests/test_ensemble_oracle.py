import numpy as np
import pytest
from numpy.testing import assert_allclose

from src.covariance_engine import Rates
from src.ensemble_oracle import (
    EnsembleConfig,
    empirical_cov,
    error_curves,
    replica_seeds,
    run_ensemble,
    run_ensemble_async,
)
from src.errors import ValidationError
from src.lti_world import make_scalar_benchmark


@pytest.fixture
def world():
    return make_scalar_benchmark(offset=0.5)


def _config(**kwargs):
    base = dict(N=8, T=12, rates=Rates(), prior_sigma_A=0.2, prior_sigma_theta=0.1, base_seed=3, data_seed=1, max_concurrency=4)
    base.update(kwargs)
    return EnsembleConfig(**base)


def test_replica_seeds_do_not_depend_on_ensemble_size():
    assert replica_seeds(7, 5)[:3] == replica_seeds(7, 3)
    seeds = replica_seeds(7, 4)
    assert len({s.prior for s in seeds}) == 4
    assert replica_seeds(7, 4, identical=True) == [seeds[0]] * 4


def test_config_rejects_small_ensembles():
    with pytest.raises(Exception):
        EnsembleConfig(N=1, T=10)
    with pytest.raises(Exception):
        EnsembleConfig(N=4, T=10, prior_sigma_A=-1.0)


def test_empirical_cov_matches_numpy():
    rng = np.random.default_rng(0)
    X, Y = rng.standard_normal((50, 3)), rng.standard_normal((50, 2))
    assert_allclose(empirical_cov(X), np.cov(X.T), atol=1e-12)
    assert_allclose(empirical_cov(X, Y), np.cov(X.T, Y.T)[:3, 3:], atol=1e-12)
    with pytest.raises(ValidationError):
        empirical_cov(X[:1])


def test_identical_replicas_on_shared_data_have_zero_covariance(world):
    moments = run_ensemble(world, _config(identical_seeds=True))
    last = moments.at(12)
    for S in list(last.Sigma_A.values()) + list(last.Sigma_theta.values()) + list(last.Var_g.values()):
        assert_allclose(S, 0.0, atol=1e-20)


def test_prior_spread_is_visible_at_round_zero(world):
    moments = run_ensemble(world, _config(N=400, T=1))
    start = moments.at(0)
    assert start.Sigma_A[(1, 0)][0, 0] == pytest.approx(0.2, rel=0.25)
    assert start.Sigma_theta[1][0, 0] == pytest.approx(0.1, rel=0.25)


def test_frame_rows_follow_stride(world):
    moments = run_ensemble(world, _config(T=20, stride=5))
    frame = moments.to_frame()
    assert list(frame["round"]) == [1, 6, 11, 16]
    assert frame.columns[1] == "tr_sigma_A_1_2"
    with pytest.raises(ValidationError):
        moments.at(2)


def test_reduction_does_not_depend_on_concurrency(world):
    a = run_ensemble(world, _config(max_concurrency=1)).to_frame()
    b = run_ensemble(world, _config(max_concurrency=8)).to_frame()
    assert a.equals(b)


def test_fresh_data_replicas_differ_from_shared(world):
    shared = run_ensemble(world, _config(data_mode="shared")).to_frame()
    fresh = run_ensemble(world, _config(data_mode="fresh")).to_frame()
    assert not shared.equals(fresh)
    assert np.isfinite(fresh.to_numpy()).all()


def test_client_gradients_decorrelate_under_independent_priors(world):
    """Shared data, independent priors: each client's (theta, Ahat) block evolves on its own."""
    moments = run_ensemble(world, _config(N=300, T=15, prior_sigma_A=0.5, prior_sigma_theta=0.5))
    last = moments.at(15)
    cov = last.cov_g[(0, 1)][0, 0]
    corr = cov / np.sqrt(last.Var_g[0][0, 0] * last.Var_g[1][0, 0])
    assert abs(corr) < 0.3


def test_client_parameters_stay_uncorrelated_under_independent_priors(world):
    """Each (theta_m, Ahat_m.) block evolves on its own under shared data, so Cov(theta_1, theta_2) stays at sampling noise."""
    moments = run_ensemble(world, _config(N=300, T=30, stride=10, prior_sigma_A=0.5, prior_sigma_theta=0.5))
    for t in (1, 11, 21):
        r = moments.at(t)
        corr = r.cov_theta[(0, 1)][0, 0] / np.sqrt(r.Sigma_theta[0][0, 0] * r.Sigma_theta[1][0, 0])
        assert abs(corr) < 0.3, t
        assert_allclose(r.cov_theta[(0, 1)], r.cov_theta[(1, 0)].T)


def test_error_curves_start_at_the_truth_norm(world):
    moments = run_ensemble(world, _config(prior_sigma_A=0.0, prior_sigma_theta=0.0, T=4))
    truth = {k: world.A_block(*k) for k in world.idx.pairs()}
    curves = error_curves(moments, truth)
    assert curves.loc[0, "round"] == 0
    assert curves.loc[0, "err_A_2_1"] == pytest.approx(0.3)
    assert curves.loc[0, "err_A_1_2"] == 0.0
    with pytest.raises(ValidationError):
        error_curves(moments, {(0, 1): truth[(0, 1)]})


@pytest.mark.asyncio
async def test_async_entry_point(world):
    moments = await run_ensemble_async(world, _config(N=4, T=3))
    assert moments.N == 4 and sorted(moments.rounds) == [0, 1, 2, 3]


def test_noise_scale_override_changes_the_data(world):
    base = run_ensemble(world, _config()).to_frame()
    scaled = run_ensemble(world, _config(sigma_y_scale=2.0)).to_frame()
    assert not base.equals(scaled)
