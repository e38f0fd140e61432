import numpy as np
import pytest
from numpy.testing import assert_allclose

from src.coordinator import (
    DownMessage,
    RoundRecord,
    ServerModel,
    UpMessage,
    apply_dp,
    augmented_targets,
    baseline_centralized,
    baseline_independent,
    run_federated,
    server_gradient,
    server_loss,
    server_prediction,
    server_update,
)
from src.covariance_engine import Rates
from src.errors import ConvergenceError, NumericalError, ProtocolError, ValidationError
from src.features.experiment_runner import build_clients
from src.features.privacy import DpPolicy, GaussianMechanism
from src.lti_world import make_scalar_benchmark, make_two_client_benchmark, simulate


@pytest.fixture
def rng():
    return np.random.default_rng(3)


@pytest.fixture
def world():
    return make_two_client_benchmark(d_m=4)


@pytest.fixture
def server(world, rng):
    A_hat0 = {k: 0.1 * rng.standard_normal((2, 2)) for k in world.idx.pairs()}
    return ServerModel.from_world(world, gamma=0.05, lambda_s=0.1, A_hat0=A_hat0)


@pytest.fixture
def ups(rng):
    return [UpMessage(m=m, h_c=rng.standard_normal(2), h_a=rng.standard_normal(2)) for m in range(2)]


def _loss(server, ups):
    H_s = server_prediction(server, [u.h_c for u in ups])
    return server_loss(server, augmented_targets(server, [u.h_a for u in ups]), H_s)


def test_server_prediction_uses_off_diagonal_estimates(server, ups):
    H_s = server_prediction(server, [u.h_c for u in ups])
    expected = server.A_diag[1] @ ups[1].h_c + server.A_hat[(1, 0)] @ ups[0].h_c
    assert_allclose(H_s[1], expected)


def test_server_gradient_matches_finite_differences(server, ups):
    step = 1e-6
    for m in range(2):
        g = server_gradient(server, ups, m).g
        fd = np.zeros(2)
        for i in range(2):
            e = np.zeros(2)
            e[i] = step
            plus = [u if u.m != m else UpMessage(m=m, h_c=u.h_c, h_a=u.h_a + e) for u in ups]
            minus = [u if u.m != m else UpMessage(m=m, h_c=u.h_c, h_a=u.h_a - e) for u in ups]
            fd[i] = (_loss(server, plus) - _loss(server, minus)) / (2 * step)
        assert_allclose(g, fd, rtol=1e-6, atol=1e-8)


def test_server_update_is_a_gradient_step(server, ups):
    """Ahat' = Ahat - gamma dL_s/dAhat, derivative taken by central differences."""
    updated = server_update(server, ups)
    step = 1e-6
    for key, Ahat in server.A_hat.items():
        fd = np.zeros_like(Ahat)
        for i in range(2):
            for j in range(2):
                E = np.zeros_like(Ahat)
                E[i, j] = step
                plus = server.model_copy(update={"A_hat": {**server.A_hat, key: Ahat + E}})
                minus = server.model_copy(update={"A_hat": {**server.A_hat, key: Ahat - E}})
                fd[i, j] = (_loss(plus, ups) - _loss(minus, ups)) / (2 * step)
        assert_allclose(updated.A_hat[key], Ahat - server.gamma * fd, atol=1e-8)


def test_zero_server_rate_is_identity(server, ups):
    frozen = server.model_copy(update={"gamma": 0.0})
    assert server_update(frozen, ups) is frozen


def test_approximate_update_agrees_for_two_clients(server, ups):
    """With M=2 each row has a single off-diagonal block, so both residual forms coincide."""
    exact = server_update(server, ups, exact=True)
    approx = server_update(server, ups, exact=False)
    for key in server.A_hat:
        assert_allclose(exact.A_hat[key], approx.A_hat[key], atol=1e-14)


def test_approximate_update_differs_for_three_clients(rng):
    from src.lti_world import make_chain_benchmark

    chain = make_chain_benchmark(3, d_m=4)
    A_hat0 = {k: 0.2 * rng.standard_normal((2, 2)) for k in chain.idx.pairs()}
    server = ServerModel.from_world(chain, gamma=0.1, A_hat0=A_hat0)
    msgs = [UpMessage(m=m, h_c=rng.standard_normal(2), h_a=rng.standard_normal(2)) for m in range(3)]
    exact = server_update(server, msgs, exact=True)
    approx = server_update(server, msgs, exact=False)
    assert not np.allclose(exact.A_hat[(0, 1)], approx.A_hat[(0, 1)])


def test_missing_up_message_is_protocol_error(server, ups):
    with pytest.raises(ProtocolError) as exc:
        server_gradient(server, [ups[0]], 0)
    assert exc.value.context["client"] == 1
    with pytest.raises(ProtocolError):
        server_update(server, [ups[0], None])


def test_malformed_up_message_is_protocol_error(server, ups):
    bad = UpMessage(m=1, h_c=np.zeros(3), h_a=np.zeros(3))
    with pytest.raises(ProtocolError):
        server_gradient(server, [ups[0], bad], 0)


def test_negative_server_rate_rejected(world):
    with pytest.raises(Exception):
        ServerModel.from_world(world, gamma=-0.1)


def test_dp_zero_sigma_returns_message_unchanged(ups):
    policy = DpPolicy(direction="both", sigma=0.0)
    mechanism = GaussianMechanism(0)
    assert apply_dp(policy, ups[0], mechanism) is ups[0]
    down = DownMessage(m=0, g=np.ones(2))
    assert apply_dp(policy, down, mechanism) is down


def test_dp_direction_selects_payloads(ups):
    mechanism = GaussianMechanism(0)
    down = DownMessage(m=0, g=np.ones(2))
    up_only = DpPolicy(direction="up", sigma=0.5)
    assert apply_dp(up_only, down, mechanism) is down
    noisy = apply_dp(up_only, ups[0], mechanism)
    assert not np.allclose(noisy.h_a, ups[0].h_a)
    with pytest.raises(ValidationError):
        apply_dp(up_only, "payload", mechanism)


def test_run_federated_rows_follow_stride(world):
    traj = simulate(world, 25, seed=1)
    rates = Rates()
    log = run_federated(world, traj, build_clients(world, rates), ServerModel.from_world(world), 25, stride=10)
    frame = log.to_frame()
    assert list(frame["round"]) == [1, 11, 21]
    assert list(frame.columns) == ["round", "err_A_1_2", "err_A_2_1", "loss_local_1", "loss_local_2", "loss_server"]
    assert log.rounds == 25


def test_run_federated_hooks_see_every_round(world):
    traj = simulate(world, 12, seed=1)
    seen = []

    def hook(record: RoundRecord):
        seen.append(record.t)

    run_federated(world, traj, build_clients(world, Rates()), ServerModel.from_world(world), 12, hooks=[hook])
    assert seen == list(range(1, 13))


def test_run_federated_server_gradient_uses_pre_update_estimate(world):
    traj = simulate(world, 5, seed=2)
    records = []
    run_federated(world, traj, build_clients(world, Rates()), ServerModel.from_world(world), 5, hooks=[records.append])
    for prev, cur in zip(records, records[1:]):
        for key in prev.A_hat_next:
            assert_allclose(cur.A_hat[key], prev.A_hat_next[key])
    first = records[0]
    server0 = ServerModel.from_world(world)
    for m in range(2):
        assert_allclose(first.g[m], server_gradient(server0, first.ups, m).g)


def test_run_federated_is_deterministic_and_zero_dp_is_a_no_op(world):
    traj = simulate(world, 40, seed=4)

    def run(dp):
        clients = build_clients(world, Rates())
        return run_federated(world, traj, clients, ServerModel.from_world(world), 40, dp=dp, dp_seed=9).to_frame()

    base = run(None)
    assert base.equals(run(None))
    assert base.equals(run(DpPolicy(direction="both", sigma=0.0)))
    assert not base.equals(run(DpPolicy(direction="both", sigma=0.1)))


def test_run_federated_validates_inputs(world):
    traj = simulate(world, 5, seed=0)
    server = ServerModel.from_world(world)
    with pytest.raises(ValidationError):
        run_federated(world, traj, build_clients(world, Rates()), server, 6)
    with pytest.raises(ProtocolError):
        run_federated(world, traj, build_clients(world, Rates())[:1], server, 5)
    with pytest.raises(ValidationError):
        run_federated(world, traj, build_clients(world, Rates()), server, 5, stride=0)


@pytest.mark.parametrize("error, expected", [
    (NumericalError("filter diverged"), NumericalError),
    (ConvergenceError("Riccati did not converge"), ConvergenceError),
    (RuntimeError("socket closed"), ProtocolError),
])
def test_client_failures_keep_their_category(world, monkeypatch, error, expected):
    clients = build_clients(world, Rates())

    def fail(y_t):
        raise error

    monkeypatch.setattr(clients[1], "begin_round", fail)
    with pytest.raises(expected) as exc:
        run_federated(world, simulate(world, 5, seed=0), clients, ServerModel.from_world(world), 5)
    if expected is not ProtocolError:
        assert exc.value is error
    else:
        assert exc.value.context["round"] == 1


def test_baseline_ordering_on_scalar_benchmark():
    """Centralized least squares beats FedGC, which beats clients learning alone."""
    world = make_scalar_benchmark()
    rates = Rates(gamma=0.05, eta1=0.01, eta2=0.01, lambda_s=0.0, lambda_c=0.0)
    T = 3000
    traj = simulate(world, T, seed=0)
    truth = world.A_block(1, 0)

    central = baseline_centralized(traj, world.idx)
    fed = run_federated(world, traj, build_clients(world, rates), ServerModel.from_world(world, gamma=rates.gamma), T)
    alone = baseline_independent(world, traj, build_clients(world, rates), ServerModel.from_world(world, gamma=rates.gamma), T)

    err = lambda A_hat: float(np.linalg.norm(A_hat[(1, 0)] - truth))
    assert err(alone.server.A_hat) == pytest.approx(0.3)
    assert err(central) < err(fed.server.A_hat) < err(alone.server.A_hat)
    assert all(c.model.eta2 == 0.0 for c in alone.clients)


def test_centralized_baseline_rank_deficiency():
    world = make_scalar_benchmark()
    traj = simulate(world, 1, seed=0)
    with pytest.raises(ValidationError):
        baseline_centralized(traj, world.idx)
