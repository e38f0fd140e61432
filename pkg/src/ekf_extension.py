"""
Nonlinear clients: extended Kalman filtering with user-supplied smooth maps
and the Jacobian-substituted covariance recursion.

Each client linearises its local maps around the current filtered mean; no
iterated refinement. With affine f and g every piece reduces to the linear
pipeline.
"""
import logging
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, field_validator, model_validator
from scipy import linalg

from src.client_node import ClientModel, ClientNode, riccati_steady_state
from src.coordinator import ServerModel, server_prediction
from src.covariance_engine import CovarianceTracker, GainSet, Rates, gains, propagate_sigma_theta
from src.errors import DimensionError, NumericalError, ValidationError
from src.lti_world import BlockLtiSystem, Trajectory
from src.matrix_kernels import BlockIndex, block, is_psd, pair_label, psd_sqrt, spectral_radius, symmetrize

logger = logging.getLogger("EkfExtension")

Map = Callable[[np.ndarray], np.ndarray]

FD_STEP = 1e-6
JACOBIAN_REL_TOL = 1e-5
JACOBIAN_CHECK_POINTS = 10


def finite_difference_jacobian(fn: Map, x: np.ndarray, step: float = FD_STEP) -> np.ndarray:
    """Central differences, one column per input coordinate."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    cols = []
    for i in range(x.shape[0]):
        e = np.zeros_like(x)
        e[i] = step
        cols.append((np.atleast_1d(fn(x + e)) - np.atleast_1d(fn(x - e))) / (2.0 * step))
    return np.column_stack(cols)


class NonlinearSystem(BaseModel):
    """
    h^t = f(h^{t-1}) + w,  y^t = g(h^t) + v.
    Jacobians are checked against finite differences at construction.
    """
    model_config = ConfigDict(arbitrary_types_allowed=True)

    f: Map
    f_jac: Map
    g: Map
    g_jac: Map
    Q: np.ndarray
    R: np.ndarray
    p: int
    d: int
    name: str = "nonlinear"
    check_seed: int = 0

    @field_validator("Q", "R", mode="before")
    @classmethod
    def as_matrix(cls, v):
        return np.atleast_2d(np.asarray(v, dtype=float))

    @model_validator(mode="after")
    def validate_jacobians(self):
        if self.Q.shape != (self.p, self.p) or self.R.shape != (self.d, self.d):
            raise ValueError(f"Q {self.Q.shape} / R {self.R.shape} do not match p={self.p}, d={self.d}")
        if not (is_psd(self.Q) and is_psd(self.R)):
            raise ValueError("Q and R must be symmetric positive semidefinite")
        rng = np.random.default_rng(self.check_seed)
        for _ in range(JACOBIAN_CHECK_POINTS):
            x = rng.standard_normal(self.p)
            for label, fn, jac in (("f", self.f, self.f_jac), ("g", self.g, self.g_jac)):
                analytic = np.atleast_2d(jac(x))
                numeric = finite_difference_jacobian(fn, x)
                if analytic.shape != numeric.shape:
                    raise ValueError(f"{label}_jac returned shape {analytic.shape}, expected {numeric.shape}")
                err = np.linalg.norm(analytic - numeric) / max(np.linalg.norm(numeric), 1.0)
                if err >= JACOBIAN_REL_TOL:
                    raise ValueError(f"{label}_jac disagrees with finite differences (rel. error {err:.2e}) at {x}")
        return self

    def linearized(self, at: Optional[np.ndarray] = None) -> Tuple[np.ndarray, np.ndarray]:
        x = np.zeros(self.p) if at is None else np.asarray(at, dtype=float)
        return np.atleast_2d(self.f_jac(x)), np.atleast_2d(self.g_jac(x))

    @classmethod
    def affine(cls, A: np.ndarray, C: np.ndarray, Q: np.ndarray, R: np.ndarray, name: str = "affine") -> "NonlinearSystem":
        A, C = np.atleast_2d(A), np.atleast_2d(C)
        return cls(
            f=lambda h: A @ h, f_jac=lambda h: A,
            g=lambda h: C @ h, g_jac=lambda h: C,
            Q=Q, R=R, p=A.shape[0], d=C.shape[0], name=name,
        )


def ekf_step(sys: NonlinearSystem, h_prev: np.ndarray, P_prev: np.ndarray, y_t: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Predict through f and its Jacobian, correct through g and its Jacobian."""
    F = np.atleast_2d(sys.f_jac(h_prev))
    pred = np.atleast_1d(sys.f(h_prev))
    P_pred = F @ P_prev @ F.T + sys.Q
    J = np.atleast_2d(sys.g_jac(pred))
    S = J @ P_pred @ J.T + sys.R
    if not np.all(np.isfinite(S)) or np.linalg.cond(S) > 1e12:
        raise NumericalError("Innovation covariance is singular", {"cond": float(np.linalg.cond(S))})
    K = linalg.solve(S, J @ P_pred, assume_a="sym").T
    h = pred + K @ (np.asarray(y_t, dtype=float) - np.atleast_1d(sys.g(pred)))
    P = symmetrize((np.eye(sys.p) - K @ J) @ P_pred)
    return h, P


class NonlinearClientNode(ClientNode):
    """Client whose filter is an EKF and whose local prediction is g(f(h_a))."""

    def __init__(self, model: ClientModel, sys: NonlinearSystem, P0: Optional[np.ndarray] = None):
        super().__init__(model)
        if (sys.p, sys.d) != (model.p, model.d):
            raise DimensionError(f"Local system is {sys.p}x{sys.d}, client model is {model.p}x{model.d}")
        self.sys = sys
        self.P = np.eye(sys.p) if P0 is None else np.atleast_2d(P0)

    def filter(self, h_prev_c: np.ndarray, y_t: np.ndarray) -> np.ndarray:
        h, self.P = ekf_step(self.sys, h_prev_c, self.P, y_t)
        return h

    def measurement_jacobian(self, h_a: np.ndarray) -> np.ndarray:
        return np.atleast_2d(self.sys.g_jac(self.sys.f(h_a))) @ np.atleast_2d(self.sys.f_jac(h_a))

    def transition_jacobian(self, h: np.ndarray) -> np.ndarray:
        return np.atleast_2d(self.sys.f_jac(h))

    def _residual(self, h_c, y_prev, y_t):
        h_a = h_c + self.model.theta @ y_prev
        return h_a, y_t - np.atleast_1d(self.sys.g(self.sys.f(h_a)))

    def loss(self, h_c: np.ndarray, y_prev: np.ndarray, y_t: np.ndarray) -> float:
        _, r = self._residual(h_c, y_prev, y_t)
        return float(r @ r + self.model.lambda_c * np.sum(self.model.theta ** 2))

    def gradient(self, h_c: np.ndarray, y_prev: np.ndarray, y_t: np.ndarray) -> np.ndarray:
        h_a, r = self._residual(h_c, y_prev, y_t)
        J = self.measurement_jacobian(h_a)
        return -2.0 * np.outer(J.T @ r, y_prev) + 2.0 * self.model.lambda_c * self.model.theta


def steady_posterior(A: np.ndarray, C: np.ndarray, Q: np.ndarray, R: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """(K, P_post) of the steady linear filter; P_post seeds an EKF so its first gain is K."""
    K, P, _ = riccati_steady_state(A, C, Q, R)
    return K, symmetrize(P - K @ C @ P)


def build_nonlinear_client(
    m: int,
    sys: NonlinearSystem,
    rates: Rates,
    theta0: Optional[np.ndarray] = None,
    A_server: Optional[np.ndarray] = None,
    linearize_at: Optional[np.ndarray] = None,
) -> NonlinearClientNode:
    """
    The client model keeps the linearisation (A_mm, C_mm, K) for the server
    and the stability checks; filtering and the local loss use f and g.
    """
    A_lin, C_lin = sys.linearized(linearize_at)
    K, P_post = steady_posterior(A_lin, C_lin, sys.Q, sys.R)
    theta = np.zeros((sys.p, sys.d)) if theta0 is None else theta0
    model = ClientModel(
        m=m, A_mm=A_lin if A_server is None else A_server, C_mm=C_lin, K=K, theta=theta,
        eta1=rates.eta1, eta2=rates.eta2, lambda_c=rates.lambda_c,
    )
    return NonlinearClientNode(model, sys, P_post)


def simulate_nonlinear(
    sys: NonlinearSystem,
    idx: BlockIndex,
    T: int,
    seed: int,
    y_offset: Optional[np.ndarray] = None,
    h0: Optional[np.ndarray] = None,
) -> Trajectory:
    """Draws a trajectory of a full (all-client) nonlinear world."""
    if (sys.p, sys.d) != (idx.p, idx.d):
        raise DimensionError(f"System is {sys.p}x{sys.d}, block index is {idx.p}x{idx.d}")
    rng = np.random.default_rng(seed)
    W = rng.standard_normal((T + 1, sys.p)) @ psd_sqrt(sys.Q).T
    V = rng.standard_normal((T + 1, sys.d)) @ psd_sqrt(sys.R).T
    offset = np.zeros(sys.d) if y_offset is None else np.asarray(y_offset, dtype=float)
    h = np.zeros((T + 1, sys.p))
    if h0 is not None:
        h[0] = h0
    for t in range(1, T + 1):
        h[t] = np.atleast_1d(sys.f(h[t - 1])) + W[t]
    y = np.stack([np.atleast_1d(sys.g(x)) for x in h]) + V + offset
    if not np.all(np.isfinite(y)):
        raise NumericalError(f"Nonlinear world {sys.name} produced non-finite measurements")
    return Trajectory(h=h, y=y, seed=seed, idx=idx)


def nonlinear_gains(
    rates: Rates,
    y: Sequence[np.ndarray],
    h_c: Sequence[np.ndarray],
    h_a: Sequence[np.ndarray],
    clients: Sequence[ClientNode],
) -> GainSet:
    """Gains with C_mm A_mm replaced by J_g J_f evaluated at each client's h_a."""
    CA = [c.measurement_jacobian(h_a[m]) for m, c in enumerate(clients)]
    return gains(rates, y, h_c, [c.model.A_mm for c in clients], CA)


def propagate_sigma_theta_nl(
    Sigma_theta: np.ndarray,
    P_t: Optional[np.ndarray],
    Lambda: np.ndarray,
    Sigma_A: Dict,
    gains_nl: GainSet,
    m: int,
    Sigma_h: np.ndarray,
    Psi: Dict,
    Gamma: Dict,
    J: Optional[np.ndarray] = None,
    **sources,
) -> np.ndarray:
    """
    The linear recursion on Jacobian gains. P_t, when given with the client's
    J = J_g J_f, adds the filter-error source (G J) P_t (G J)^T.
    """
    out = propagate_sigma_theta(Sigma_theta, Sigma_h, Sigma_A, Lambda, Psi, Gamma, gains_nl, m, clamp=False, **sources)
    if P_t is not None:
        if J is None:
            raise ValidationError("The filter-error source needs the client's measurement Jacobian")
        GJ = gains_nl.G[m] @ J
        out = out + GJ @ np.atleast_2d(P_t) @ GJ.T
    return symmetrize(out)


class NonlinearCovarianceTracker(CovarianceTracker):
    """Realized-mode tracker whose gains are re-linearised at the run's h_a every round."""

    def __init__(self, clients: Sequence[ClientNode], *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.clients = list(clients)

    def round_gains(self, y, h_c) -> GainSet:
        if self.last_record is None:
            return super().round_gains(y, h_c)
        return nonlinear_gains(self.rates, y, h_c, self.last_record.h_a, self.clients)


def server_jacobian(server: ServerModel, h: Optional[np.ndarray] = None, step: float = FD_STEP) -> np.ndarray:
    """Finite-difference Jacobian of the learned server map h_c -> h_s."""
    idx = server.idx
    x = np.zeros(idx.p) if h is None else np.asarray(h, dtype=float)

    def server_map(z: np.ndarray) -> np.ndarray:
        parts = [z[idx.slice_of(m)] for m in range(idx.M)]
        return np.concatenate(server_prediction(server, parts))

    return finite_difference_jacobian(server_map, x, step)


def granger_readout(J: np.ndarray, idx: BlockIndex, threshold: float = 1e-3) -> Dict[str, dict]:
    """Per ordered pair: Frobenius norm of the off-diagonal Jacobian block and whether it clears threshold."""
    out = {}
    for (m, n) in idx.pairs():
        norm = float(np.linalg.norm(block(J, idx, m, n)))
        out[pair_label(m, n)] = {"norm": norm, "causal": norm > threshold}
    return out


def make_nonlinear_scalar_benchmark(
    coupling: float = 0.3,
    beta: float = 0.1,
    q: float = 0.1,
    r: float = 0.05,
) -> Tuple[NonlinearSystem, List[NonlinearSystem], BlockLtiSystem]:
    """
    Two scalar clients, h_m+ = a_m h_m + beta sin(h_m) (+ coupling h_1 for client 2),
    y = h + 0.1 tanh(h). Returns the full world, the local client models and the
    world linearised at 0 (the ground truth for error curves).
    """
    a = np.array([0.5, 0.6])
    idx = BlockIndex.uniform(2, 1, 1)

    def f(h):
        out = a * h + beta * np.sin(h)
        return out + np.array([0.0, coupling * h[0]])

    def f_jac(h):
        return np.diag(a + beta * np.cos(h)) + np.array([[0.0, 0.0], [coupling, 0.0]])

    def g(h):
        return h + 0.1 * np.tanh(h)

    def g_jac(h):
        return np.diag(1.0 + 0.1 / np.cosh(h) ** 2)

    world = NonlinearSystem(f=f, f_jac=f_jac, g=g, g_jac=g_jac, Q=q * np.eye(2), R=r * np.eye(2), p=2, d=2, name="nonlinear_scalar")
    locals_ = [
        NonlinearSystem(
            f=lambda h, am=am: am * h + beta * np.sin(h),
            f_jac=lambda h, am=am: np.atleast_2d(am + beta * np.cos(h)),
            g=lambda h: h + 0.1 * np.tanh(h),
            g_jac=lambda h: np.atleast_2d(1.0 + 0.1 / np.cosh(h) ** 2),
            Q=[[q]], R=[[r]], p=1, d=1, name=f"nonlinear_local_{m + 1}",
        )
        for m, am in enumerate(a)
    ]
    A_lin, C_lin = world.linearized()
    linear = BlockLtiSystem(A=A_lin, C=C_lin, Q=world.Q, R=world.R, idx=idx, stable=spectral_radius(A_lin) < 1.0, name="nonlinear_scalar_linearized")
    return world, locals_, linear


def make_logistic_system(rate: float = 2.5, q: float = 1e-3, r: float = 1e-2) -> NonlinearSystem:
    """1-D logistic map h+ = rate h (1 - h), observed directly."""
    return NonlinearSystem(
        f=lambda h: rate * h * (1.0 - h),
        f_jac=lambda h: np.atleast_2d(rate * (1.0 - 2.0 * h)),
        g=lambda h: h,
        g_jac=lambda h: np.eye(1),
        Q=[[q]], R=[[r]], p=1, d=1, name="logistic",
    )
