import numpy as np
import pytest

from src.features.privacy import DpPolicy, GaussianMechanism


@pytest.mark.parametrize(
    "direction,up,down",
    [("none", 0.0, 0.0), ("up", 0.3, 0.0), ("down", 0.0, 0.3), ("both", 0.3, 0.3)],
)
def test_policy_direction(direction, up, down):
    policy = DpPolicy(direction=direction, sigma=0.3)
    assert policy.up_sigma == up and policy.down_sigma == down
    assert policy.active == (direction != "none")


def test_policy_rejects_bad_sigma():
    with pytest.raises(Exception):
        DpPolicy(direction="up", sigma=-0.1)
    with pytest.raises(Exception):
        DpPolicy(direction="up", sigma=float("inf"))
    with pytest.raises(Exception):
        DpPolicy(direction="sideways", sigma=0.1)


def test_zero_sigma_is_identity():
    payload = np.arange(3.0)
    assert GaussianMechanism(0).perturb(payload, 0.0) is payload
    assert not DpPolicy(direction="both", sigma=0.0).active


def test_noise_is_seeded():
    a = GaussianMechanism(5).perturb(np.zeros(4), 1.0)
    b = GaussianMechanism(5).perturb(np.zeros(4), 1.0)
    c = GaussianMechanism(6).perturb(np.zeros(4), 1.0)
    assert np.array_equal(a, b) and not np.array_equal(a, c)


def test_noise_scale():
    noise = GaussianMechanism(1).perturb(np.zeros(100_000), 0.5)
    assert noise.std() == pytest.approx(0.5, rel=0.02)
    assert abs(noise.mean()) < 0.01
