"""
One FedGC client: steady-state Kalman filter on its own blocks, the augmented
state h_a = h_c + theta y, and the two-rate update of theta.

Local loss (squared, ridge-regularised):
    (L_m)_a = ||y^t - C_mm A_mm (h_c^{t-1} + theta y^{t-1})||^2 + lambda_c ||theta||_F^2
"""
import logging
from typing import Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, field_validator
from scipy import linalg

from src.errors import ConvergenceError, DimensionError, ValidationError

logger = logging.getLogger("ClientNode")

RICCATI_TOL = 1e-12
RICCATI_MAX_ITER = 100_000


def riccati_steady_state(
    A_mm: np.ndarray,
    C_mm: np.ndarray,
    Q_mm: np.ndarray,
    R_mm: np.ndarray,
    tol: float = RICCATI_TOL,
    max_iter: int = RICCATI_MAX_ITER,
) -> Tuple[np.ndarray, np.ndarray, int]:
    """
    Iterates the filtering Riccati recursion on the predicted covariance
        P <- A (P - P C^T S^-1 C P) A^T + Q,   S = C P C^T + R
    and returns (K, P, iterations) with K = P C^T S^-1.
    """
    A_mm, C_mm = np.atleast_2d(A_mm), np.atleast_2d(C_mm)
    Q_mm, R_mm = np.atleast_2d(Q_mm), np.atleast_2d(R_mm)
    p, d = A_mm.shape[0], C_mm.shape[0]
    if A_mm.shape != (p, p) or C_mm.shape != (d, p) or Q_mm.shape != (p, p) or R_mm.shape != (d, d):
        raise DimensionError(
            f"Inconsistent filter blocks A{A_mm.shape} C{C_mm.shape} Q{Q_mm.shape} R{R_mm.shape}"
        )
    if np.linalg.eigvalsh(0.5 * (R_mm + R_mm.T)).min() <= 0:
        raise ValidationError("Measurement noise R_mm must be positive definite for the Kalman gain")

    P = np.eye(p)
    residual = np.inf
    for k in range(1, max_iter + 1):
        S = C_mm @ P @ C_mm.T + R_mm
        PCt = P @ C_mm.T
        P_post = P - PCt @ linalg.solve(S, PCt.T, assume_a="pos")
        P_next = A_mm @ P_post @ A_mm.T + Q_mm
        P_next = 0.5 * (P_next + P_next.T)
        residual = float(np.linalg.norm(P_next - P, "fro"))
        P = P_next
        if residual < tol:
            S = C_mm @ P @ C_mm.T + R_mm
            K = linalg.solve(S, C_mm @ P, assume_a="pos").T
            return K, P, k
    raise ConvergenceError(
        f"Riccati recursion did not converge in {max_iter} iterations (last residual {residual:.3e}); "
        "check detectability of (A_mm, C_mm)",
        {"residual": residual, "iterations": max_iter},
    )


def kalman_gain(A_mm: np.ndarray, C_mm: np.ndarray, Q_mm: np.ndarray, R_mm: np.ndarray) -> np.ndarray:
    K, _, iterations = riccati_steady_state(A_mm, C_mm, Q_mm, R_mm)
    logger.debug(f"Kalman gain converged in {iterations} Riccati iterations")
    return K


class ClientModel(BaseModel):
    """Parameters of client m. theta is p_m x d_m; v = vec(theta) in column-stacking order."""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    m: int
    A_mm: np.ndarray
    C_mm: np.ndarray
    K: np.ndarray
    theta: np.ndarray
    eta1: float = 0.01
    eta2: float = 0.01
    lambda_c: float = 0.0

    @field_validator("A_mm", "C_mm", "K", "theta", mode="before")
    @classmethod
    def as_matrix(cls, v):
        return np.atleast_2d(np.asarray(v, dtype=float))

    @field_validator("eta1", "eta2", "lambda_c")
    @classmethod
    def validate_rate(cls, v):
        if v < 0:
            raise ValueError(f"Rates and ridge coefficients must be non-negative, got {v}")
        return float(v)

    @property
    def p(self) -> int:
        return self.A_mm.shape[0]

    @property
    def d(self) -> int:
        return self.C_mm.shape[0]

    @property
    def CA(self) -> np.ndarray:
        return self.C_mm @ self.A_mm

    @property
    def v(self) -> np.ndarray:
        return self.theta.reshape(-1, order="F")


class ClientStep(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    h_c: np.ndarray
    h_a: np.ndarray
    y: np.ndarray


def local_filter_step(model: ClientModel, h_prev_c: np.ndarray, y_t: np.ndarray) -> np.ndarray:
    """Predict with A_mm, correct with K_m."""
    pred = model.A_mm @ h_prev_c
    return pred + model.K @ (y_t - model.C_mm @ pred)


def augment(model: ClientModel, h_c: np.ndarray, y: np.ndarray) -> np.ndarray:
    return h_c + model.theta @ y


def local_loss(model: ClientModel, h_c: np.ndarray, y_prev: np.ndarray, y_t: np.ndarray) -> float:
    r = y_t - model.CA @ augment(model, h_c, y_prev)
    return float(r @ r + model.lambda_c * np.sum(model.theta ** 2))


def local_gradient(model: ClientModel, h_c: np.ndarray, y_prev: np.ndarray, y_t: np.ndarray) -> np.ndarray:
    """Gradient of (L_m)_a with respect to theta (p_m x d_m)."""
    CA = model.CA
    r = y_t - CA @ (h_c + model.theta @ y_prev)
    return -2.0 * np.outer(CA.T @ r, y_prev) + 2.0 * model.lambda_c * model.theta


def server_chain(g: np.ndarray, y: np.ndarray) -> np.ndarray:
    """(dL_s/dh_a)(dh_a/dtheta): the server gradient pulled back to theta."""
    return np.outer(g, y)


def apply_update(model: ClientModel, g_local: np.ndarray, g_server_chain: np.ndarray) -> ClientModel:
    theta = model.theta - model.eta1 * g_local - model.eta2 * g_server_chain
    return model.model_copy(update={"theta": theta})


class ClientNode:
    """
    Runtime wrapper around a ClientModel. Round k applies the update pending
    from round k-1 (its local target is y^k), then filters and augments on y^k.
    """

    def __init__(self, model: ClientModel, h0: Optional[np.ndarray] = None):
        self.model = model
        self.h_c = np.zeros(model.p) if h0 is None else np.asarray(h0, dtype=float)
        self._last: Optional[ClientStep] = None
        self._g: Optional[np.ndarray] = None
        self.last_loss = 0.0

    @property
    def m(self) -> int:
        return self.model.m

    # Overridable model pieces; the nonlinear client swaps these.
    def filter(self, h_prev_c: np.ndarray, y_t: np.ndarray) -> np.ndarray:
        return local_filter_step(self.model, h_prev_c, y_t)

    def gradient(self, h_c: np.ndarray, y_prev: np.ndarray, y_t: np.ndarray) -> np.ndarray:
        return local_gradient(self.model, h_c, y_prev, y_t)

    def loss(self, h_c: np.ndarray, y_prev: np.ndarray, y_t: np.ndarray) -> float:
        return local_loss(self.model, h_c, y_prev, y_t)

    def measurement_jacobian(self, h_a: np.ndarray) -> np.ndarray:
        """d(predicted y)/d(h_a); C_mm A_mm for the linear client."""
        return self.model.CA

    def transition_jacobian(self, h: np.ndarray) -> np.ndarray:
        return self.model.A_mm

    def begin_round(self, y_t: np.ndarray) -> ClientStep:
        y_t = np.asarray(y_t, dtype=float)
        if y_t.shape != (self.model.d,):
            raise DimensionError(f"Client {self.m} expected y of length {self.model.d}, got {y_t.shape}")
        if self._last is None:
            # no previous step yet: score the prediction from the initial state, y^0 = 0
            self.last_loss = self.loss(self.h_c, np.zeros_like(y_t), y_t)
        else:
            last = self._last
            self.last_loss = self.loss(last.h_c, last.y, y_t)
            g_local = self.gradient(last.h_c, last.y, y_t)
            chain = server_chain(self._g, last.y) if self._g is not None else np.zeros_like(self.model.theta)
            self.model = apply_update(self.model, g_local, chain)
        self._g = None
        self.h_c = self.filter(self.h_c, y_t)
        step = ClientStep(h_c=self.h_c, h_a=augment(self.model, self.h_c, y_t), y=y_t)
        self._last = step
        return step

    def receive(self, g: np.ndarray):
        self._g = np.asarray(g, dtype=float)


def build_client(
    m: int,
    A_mm: np.ndarray,
    C_mm: np.ndarray,
    Q_mm: np.ndarray,
    R_mm: np.ndarray,
    theta0: Optional[np.ndarray] = None,
    eta1: float = 0.01,
    eta2: float = 0.01,
    lambda_c: float = 0.0,
    K: Optional[np.ndarray] = None,
) -> ClientNode:
    A_mm, C_mm = np.atleast_2d(A_mm), np.atleast_2d(C_mm)
    gain = kalman_gain(A_mm, C_mm, Q_mm, R_mm) if K is None else np.atleast_2d(K)
    theta = np.zeros((A_mm.shape[0], C_mm.shape[0])) if theta0 is None else theta0
    model = ClientModel(m=m, A_mm=A_mm, C_mm=C_mm, K=gain, theta=theta, eta1=eta1, eta2=eta2, lambda_c=lambda_c)
    return ClientNode(model)
