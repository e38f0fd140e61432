"""
Closed-form propagation of the second moments of the learned parameters.

State per client m: v_m = vec(theta_m), column stacking, length p_m d_m.
State per pair (m, n): a_mn = vec(Ahat_mn), length p_m p_n.
With the round's data and filtered states fixed, one round is affine:

    a_mn+ = D_n a_mn + 2 gamma B_mn h_{m,a} + const
    v_m+  = h_self v_m + F_m h_{m,a} - sum_n Ptilde_mn a_mn + G_m y_m^{next} + const

and every recursion below is the covariance of that map.
"""
import logging
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

from src.errors import DimensionError, ValidationError
from src.features.privacy import DpPolicy
from src.lti_world import MomentEstimate, update_moments
from src.matrix_kernels import (
    PSD_TRACE_TOL,
    BlockIndex,
    client_label,
    pair_label,
    psd_clamp,
    psd_project,
    require_finite,
    symmetrize,
    trace,
    unvec,
)

logger = logging.getLogger("CovarianceEngine")

Pair = Tuple[int, int]
ArrayOrList = Union[np.ndarray, Sequence[np.ndarray]]


class Rates(BaseModel):
    """Learning rates and ridge coefficients shared by every client and the server."""
    gamma: float = 0.05
    eta1: float = 0.01
    eta2: float = 0.01
    lambda_s: float = 0.1
    lambda_c: float = 0.1

    @field_validator("gamma", "eta1", "eta2", "lambda_s", "lambda_c")
    @classmethod
    def validate_non_negative(cls, v):
        if v < 0 or not np.isfinite(v):
            raise ValueError(f"Rates and ridges must be finite and non-negative, got {v}")
        return float(v)

    @property
    def h_self(self) -> float:
        return 1.0 - 2.0 * self.eta1 * self.lambda_c

    @property
    def shrink(self) -> float:
        return 1.0 - 2.0 * self.gamma * self.lambda_s


def data_lift(y: np.ndarray, p: int) -> np.ndarray:
    """(y kron I_p), so that theta y = (y^T kron I_p) vec(theta) = data_lift(y, p).T @ v."""
    return np.kron(np.asarray(y, dtype=float).reshape(-1, 1), np.eye(p))


def state_lift(h: np.ndarray, p_m: int) -> np.ndarray:
    """(h^T kron I_{p_m}): Ahat h = state_lift(h, p_m) @ vec(Ahat)."""
    return np.kron(np.asarray(h, dtype=float).reshape(1, -1), np.eye(p_m))


class GainSet(BaseModel):
    """
    Gain matrices of one round. Client gains are keyed by m, pair gains by (m, n).
    H is the full Jacobian dv+/dv through h_a, kept for stability checks.
    """
    model_config = ConfigDict(arbitrary_types_allowed=True)

    gamma: float
    eta2: float
    h_self: float
    y: Dict[int, np.ndarray]
    h_c: Dict[int, np.ndarray]
    G: Dict[int, np.ndarray]
    P: Dict[int, np.ndarray]
    PA: Dict[int, np.ndarray]
    F: Dict[int, np.ndarray]
    H: Dict[int, np.ndarray]
    D: Dict[Pair, np.ndarray]
    B: Dict[Pair, np.ndarray]
    P_tilde: Dict[Pair, np.ndarray]

    @property
    def M(self) -> int:
        return len(self.y)

    def pairs_of(self, m: int) -> List[Pair]:
        return [pair for pair in self.D if pair[0] == m]


def gains(
    rates: Rates,
    y: Sequence[np.ndarray],
    h_c: Sequence[np.ndarray],
    A_diag: Sequence[np.ndarray],
    CA: Optional[Sequence[np.ndarray]] = None,
) -> GainSet:
    """
    Evaluates every gain at the round inputs (y_m, h_{m,c}). CA is C_mm A_mm
    for linear clients; the nonlinear client passes J_g J_f here.
    """
    M = len(y)
    if len(h_c) != M or len(A_diag) != M:
        raise DimensionError(f"Gain inputs disagree on client count: {len(y)}, {len(h_c)}, {len(A_diag)}")
    if CA is None:
        raise ValidationError("gains() needs the per-client measurement maps CA")
    ys = {m: np.atleast_1d(np.asarray(y[m], dtype=float)) for m in range(M)}
    hs = {m: np.atleast_1d(np.asarray(h_c[m], dtype=float)) for m in range(M)}
    out = dict(G={}, P={}, PA={}, F={}, H={}, D={}, B={}, P_tilde={})

    for m in range(M):
        A_mm, CA_m = np.atleast_2d(A_diag[m]), np.atleast_2d(CA[m])
        p, d = A_mm.shape[0], ys[m].shape[0]
        if CA_m.shape != (d, p):
            raise DimensionError(f"Client {m}: CA has shape {CA_m.shape}, expected {(d, p)}")
        col = ys[m].reshape(-1, 1)
        G = 2.0 * rates.eta1 * np.kron(col, CA_m.T)
        P = -2.0 * rates.eta2 * np.kron(col, A_mm.T)
        F = G @ (-CA_m) + P @ A_mm
        out["G"][m], out["P"][m], out["PA"][m], out["F"][m] = G, P, P @ A_mm, F
        out["H"][m] = rates.h_self * np.eye(p * d) + F @ data_lift(ys[m], p).T
        for n in range(M):
            if n == m:
                continue
            h_n = hs[n]
            p_n = h_n.shape[0]
            out["D"][(m, n)] = np.kron(rates.shrink * np.eye(p_n) - 2.0 * rates.gamma * np.outer(h_n, h_n), np.eye(p))
            out["B"][(m, n)] = np.kron(h_n.reshape(-1, 1), A_mm)
            out["P_tilde"][(m, n)] = P @ state_lift(h_n, p)

    return GainSet(gamma=rates.gamma, eta2=rates.eta2, h_self=rates.h_self, y=ys, h_c=hs, **out)


def propagate_gamma(Gamma: np.ndarray, gains: GainSet, pair: Pair, Sigma_h: np.ndarray) -> np.ndarray:
    """Gamma+ = D Gamma + 2 gamma B Sigma_h."""
    return gains.D[pair] @ Gamma + 2.0 * gains.gamma * gains.B[pair] @ Sigma_h


def propagate_psi(
    Psi: np.ndarray,
    Gamma: np.ndarray,
    Sigma_A: np.ndarray,
    Lambda: np.ndarray,
    Sigma_h: np.ndarray,
    gains: GainSet,
    pair: Pair,
    up_var: float = 0.0,
) -> np.ndarray:
    """Cov(a_mn+, v_m+)."""
    m, _ = pair
    D, B, Pt, F = gains.D[pair], gains.B[pair], gains.P_tilde[pair], gains.F[m]
    h, g = gains.h_self, gains.gamma
    expected = (D.shape[0], F.shape[0])
    if Psi.shape != expected or Lambda.shape != (F.shape[0], F.shape[1]):
        raise DimensionError(
            f"Psi {Psi.shape} / Lambda {Lambda.shape} inconsistent with gains for pair {pair}",
            {"expected_psi": expected},
        )
    out = (
        h * D @ Psi
        + D @ Gamma @ F.T
        - D @ Sigma_A @ Pt.T
        + 2.0 * g * h * B @ Lambda.T
        + 2.0 * g * B @ Sigma_h @ F.T
        - 2.0 * g * B @ Gamma.T @ Pt.T
    )
    if up_var:
        out = out + 4.0 * g * up_var * B @ gains.PA[m].T
    return out


def propagate_sigma_A(
    Sigma_A: np.ndarray,
    Sigma_h: np.ndarray,
    Gamma: np.ndarray,
    gains: GainSet,
    pair: Pair,
    up_var: float = 0.0,
    clamp: bool = True,
) -> np.ndarray:
    D, B, g = gains.D[pair], gains.B[pair], gains.gamma
    cross = D @ Gamma @ B.T
    out = D @ Sigma_A @ D.T + 4.0 * g * g * B @ Sigma_h @ B.T + 2.0 * g * (cross + cross.T)
    if up_var:
        out = out + 8.0 * g * g * up_var * B @ B.T
    return psd_clamp(out, name=f"Sigma_A_{pair_label(*pair)}") if clamp else symmetrize(out)


def propagate_sigma_theta(
    Sigma_theta: np.ndarray,
    Sigma_h: np.ndarray,
    Sigma_A: Dict[Pair, np.ndarray],
    Lambda: np.ndarray,
    Psi: Dict[Pair, np.ndarray],
    Gamma: Dict[Pair, np.ndarray],
    gains: GainSet,
    m: int,
    Sigma_y: Optional[np.ndarray] = None,
    up_var: float = 0.0,
    down_var: float = 0.0,
    clamp: bool = True,
) -> np.ndarray:
    """
    Var(v_m+). Pair terms sum over n; covariances between different pairs are
    not tracked. Sigma_y adds the aleatoric source G Sigma_y G^T.
    """
    h, F = gains.h_self, gains.F[m]
    cross = Lambda @ F.T
    out = h * h * Sigma_theta + F @ Sigma_h @ F.T + h * (cross + cross.T)
    for pair in gains.pairs_of(m):
        Pt = gains.P_tilde[pair]
        t_psi = Pt @ Psi[pair]
        t_gamma = Pt @ Gamma[pair] @ F.T
        out = out + Pt @ Sigma_A[pair] @ Pt.T - h * (t_psi + t_psi.T) - (t_gamma + t_gamma.T)
    if Sigma_y is not None:
        G = gains.G[m]
        out = out + G @ Sigma_y @ G.T
    if up_var:
        PA = gains.PA[m]
        out = out + 2.0 * up_var * PA @ PA.T
    if down_var:
        p = gains.PA[m].shape[1]
        y = gains.y[m]
        out = out + gains.eta2 ** 2 * down_var * np.kron(np.outer(y, y), np.eye(p))
    return psd_clamp(out, name=f"Sigma_theta_{client_label(m)}") if clamp else symmetrize(out)


def sigma_h(
    Sigma_theta: np.ndarray,
    Omega: Optional[np.ndarray],
    mu_y: np.ndarray,
    Sigma_y: np.ndarray,
    mu_theta: Optional[np.ndarray] = None,
    clamp: bool = True,
) -> np.ndarray:
    """
    Var(theta y) for jointly Gaussian (vec theta, y). Omega = Cov(vec theta, y)
    in data layout ((p d) x d). The y-independent part is the block contraction
    sum_ij E[y_i y_j] Sigma_theta[i, j]; Omega and mu_theta add the Isserlis terms.
    """
    mu_y = np.atleast_1d(np.asarray(mu_y, dtype=float))
    Sigma_y = np.atleast_2d(np.asarray(Sigma_y, dtype=float))
    d = mu_y.shape[0]
    if Sigma_theta.shape[0] % d:
        raise DimensionError(f"Sigma_theta of size {Sigma_theta.shape[0]} is not a multiple of d={d}")
    p = Sigma_theta.shape[0] // d
    second = Sigma_y + np.outer(mu_y, mu_y)
    out = np.einsum("ij,ikjl->kl", second, Sigma_theta.reshape(d, p, d, p))
    if Omega is not None:
        if Omega.shape != (p * d, d):
            raise DimensionError(f"Omega has shape {Omega.shape}, expected {(p * d, d)}")
        O3 = Omega.reshape(d, p, d)
        out = out + np.einsum("ikj,jli->kl", O3, O3)
        if mu_theta is not None:
            Theta = unvec(mu_theta, p, d)
            mixed = np.einsum("ki,j,jli->kl", Theta, mu_y, O3)
            out = out + mixed + mixed.T
    if mu_theta is not None:
        Theta = unvec(mu_theta, p, d)
        out = out + Theta @ Sigma_y @ Theta.T
    return psd_clamp(out, name="Sigma_h") if clamp else symmetrize(out)


def steady_sigma_h(Sigma_theta: np.ndarray, mu_y: np.ndarray, Sigma_y: np.ndarray, clamp: bool = True) -> np.ndarray:
    """
    Sigma_h at stationary moments with the steady Omega = Sigma_theta (mu kron I):
    the contraction plus W + W^T, W = (mu^T kron I) Sigma_theta (mu kron I).
    Scalar case: Sigma_theta (kappa + 2 mu^2).
    """
    mu_y = np.atleast_1d(np.asarray(mu_y, dtype=float))
    p = Sigma_theta.shape[0] // mu_y.shape[0]
    L = data_lift(mu_y, p)
    W = L.T @ Sigma_theta @ L
    out = sigma_h(Sigma_theta, None, mu_y, Sigma_y, clamp=False) + W + W.T
    return psd_clamp(out, name="Sigma_h") if clamp else symmetrize(out)


def lambda_closed_form(
    Sigma_theta: np.ndarray,
    Omega: Optional[np.ndarray],
    mu_y: np.ndarray,
    mu_v: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Cov(v, h_a) = Sigma_theta (mu_y kron I) + Omega Theta_bar^T."""
    mu_y = np.atleast_1d(np.asarray(mu_y, dtype=float))
    d = mu_y.shape[0]
    p = Sigma_theta.shape[0] // d
    out = Sigma_theta @ data_lift(mu_y, p)
    if Omega is not None and mu_v is not None:
        out = out + np.atleast_2d(Omega).reshape(p * d, d) @ unvec(np.atleast_1d(mu_v), p, d).T
    return out


def _as_list(x) -> List[np.ndarray]:
    if isinstance(x, np.ndarray):
        return [x]
    return list(x)


def var_server_gradient(
    Sigma_h: np.ndarray,
    Sigma_A: ArrayOrList,
    Gamma: ArrayOrList,
    h_n: ArrayOrList,
    A_mm: np.ndarray,
    scale: float = 1.0,
) -> np.ndarray:
    """
    Var(scale A_mm^T r_m), r_m = A_mm h_a - sum_n (h_n^T kron I) a_mn. The
    federated gradient is 2 A_mm^T r_m, so the tracker passes scale=2.
    Several pairs may be passed as parallel lists.
    The result is symmetrised but not clamped; under the moment closure the
    three terms need not form a PSD sum.
    """
    A_mm = np.atleast_2d(A_mm)
    p = A_mm.shape[0]
    U = A_mm @ Sigma_h @ A_mm.T
    for S_A, G_, h in zip(_as_list(Sigma_A), _as_list(Gamma), _as_list(h_n)):
        L = state_lift(np.atleast_1d(h), p)
        mixed = A_mm @ np.atleast_2d(G_).T @ L.T
        U = U + L @ np.atleast_2d(S_A) @ L.T - mixed - mixed.T
    return symmetrize(scale * scale * A_mm.T @ U @ A_mm)


class OmegaInputs(BaseModel):
    """Round quantities entering the affine map from y^{t-1} to theta^t."""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    y_prev: np.ndarray
    y_t: np.ndarray
    h_c: np.ndarray
    theta: np.ndarray
    A_mm: np.ndarray
    C_mm: np.ndarray
    eta1: float
    eta2: float
    cross_prediction: np.ndarray


def omega_track(
    mode: str,
    inputs: Optional[OmegaInputs] = None,
    Sigma_y: Optional[np.ndarray] = None,
    Sigma_theta: Optional[np.ndarray] = None,
    mu_y: Optional[np.ndarray] = None,
    empirical: Optional[np.ndarray] = None,
) -> np.ndarray:
    """
    Cov(vec theta, y) by one of three routes:
      proof-affine  J Sigma_y D^T, J = d vec(theta+)/d y_prev at the round mean, D = C A theta
      steady        Sigma_theta (mu kron I), the stationary convention (state layout)
      ensemble      the empirical value, passed through
    """
    if mode == "proof-affine":
        if inputs is None or Sigma_y is None:
            raise ValidationError("proof-affine Omega needs round inputs and Sigma_y")
        A, C = np.atleast_2d(inputs.A_mm), np.atleast_2d(inputs.C_mm)
        CA, theta, u = C @ A, np.atleast_2d(inputs.theta), np.atleast_1d(inputs.y_prev)
        p, d = theta.shape
        K_bar = (
            2.0 * inputs.eta1 * CA.T @ (inputs.y_t - CA @ inputs.h_c - CA @ theta @ u)
            - 2.0 * inputs.eta2 * A.T @ (A @ theta @ u - inputs.cross_prediction)
        )
        curvature = (2.0 * inputs.eta1 * CA.T @ CA + 2.0 * inputs.eta2 * A.T @ A) @ theta
        J = np.kron(np.eye(d), K_bar.reshape(-1, 1)) - np.kron(u.reshape(-1, 1), curvature)
        D = CA @ theta
        return J @ np.atleast_2d(Sigma_y) @ D.T
    if mode == "steady":
        if Sigma_theta is None or mu_y is None:
            raise ValidationError("steady Omega needs Sigma_theta and mu_y")
        return lambda_closed_form(Sigma_theta, None, mu_y)
    if mode == "ensemble":
        if empirical is None:
            raise ValidationError("ensemble Omega needs the empirical covariance")
        return np.asarray(empirical, dtype=float)
    raise ValidationError(f"Unknown Omega mode '{mode}'", {"mode": mode})


class UncertaintyState(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    Sigma_theta: Dict[int, np.ndarray]
    Sigma_A: Dict[Pair, np.ndarray]
    Psi: Dict[Pair, np.ndarray]
    Gamma: Dict[Pair, np.ndarray] = Field(default_factory=dict)
    Sigma_h: Dict[int, np.ndarray] = Field(default_factory=dict)
    Lambda: Dict[int, np.ndarray] = Field(default_factory=dict)
    Omega: Dict[int, np.ndarray] = Field(default_factory=dict)
    Var_g: Dict[int, np.ndarray] = Field(default_factory=dict)

    @classmethod
    def from_priors(cls, idx: BlockIndex, prior_sigma_A: float = 0.0, prior_sigma_theta: float = 0.0) -> "UncertaintyState":
        """Independent isotropic priors: Sigma_A = s_A I, Sigma_theta = s_theta I, Psi = 0."""
        if prior_sigma_A < 0 or prior_sigma_theta < 0:
            raise ValidationError("Prior variances must be non-negative")
        P, d = idx.p_dims, idx.d_dims
        return cls(
            Sigma_theta={m: prior_sigma_theta * np.eye(P[m] * d[m]) for m in range(idx.M)},
            Sigma_A={(m, n): prior_sigma_A * np.eye(P[m] * P[n]) for (m, n) in idx.pairs()},
            Psi={(m, n): np.zeros((P[m] * P[n], P[m] * d[m])) for (m, n) in idx.pairs()},
            Gamma={(m, n): np.zeros((P[m] * P[n], P[m])) for (m, n) in idx.pairs()},
        )

    def trace_row(self) -> Dict[str, float]:
        row = {f"tr_sigma_A_{pair_label(*k)}": trace(v) for k, v in sorted(self.Sigma_A.items())}
        for m in sorted(self.Sigma_theta):
            row[f"tr_sigma_theta_{client_label(m)}"] = trace(self.Sigma_theta[m])
            row[f"tr_sigma_h_{client_label(m)}"] = trace(self.Sigma_h[m]) if m in self.Sigma_h else 0.0
            row[f"tr_var_g_{client_label(m)}"] = trace(self.Var_g[m]) if m in self.Var_g else 0.0
        return row

    def cross_row(self) -> Dict[str, float]:
        row = {}
        for k in sorted(self.Sigma_A):
            row[f"fro_gamma_{pair_label(*k)}"] = float(np.linalg.norm(self.Gamma[k])) if k in self.Gamma else 0.0
            row[f"fro_psi_{pair_label(*k)}"] = float(np.linalg.norm(self.Psi[k]))
        for m in sorted(self.Sigma_theta):
            row[f"fro_lambda_{client_label(m)}"] = float(np.linalg.norm(self.Lambda[m])) if m in self.Lambda else 0.0
            row[f"fro_omega_{client_label(m)}"] = float(np.linalg.norm(self.Omega[m])) if m in self.Omega else 0.0
        return row


class TrackerMode(str, Enum):
    REALIZED = "realized"    # data treated as given; exact against a shared-data ensemble
    MOMENT = "moment"        # data moments from the generator or an EWMA estimate
    LIMITING = "limiting"    # MOMENT with gains frozen at the limit point


class CovarianceTracker:
    """
    Round hook for run_federated. At round t it completes the round-t state
    (Sigma_h, Lambda, Gamma, Var_g, Omega), logs it, then propagates to t+1
    with the round-t gains.
    """

    def __init__(
        self,
        idx: BlockIndex,
        rates: Rates,
        A_diag: Sequence[np.ndarray],
        CA: Sequence[np.ndarray],
        mode: TrackerMode = TrackerMode.REALIZED,
        prior_sigma_A: float = 0.0,
        prior_sigma_theta: float = 0.0,
        dp: Optional[DpPolicy] = None,
        moments: Optional[Sequence[Tuple[np.ndarray, np.ndarray]]] = None,
        ewma_lam: Optional[float] = None,
        limit_states: Optional[Sequence[np.ndarray]] = None,
        initial_state: Optional[UncertaintyState] = None,
        stride: int = 1,
        keep_states: bool = False,
    ):
        self.idx = idx
        self.rates = rates
        self.A_diag = [np.atleast_2d(A) for A in A_diag]
        self.CA = [np.atleast_2d(X) for X in CA]
        self.mode = TrackerMode(mode)
        self.dp = dp or DpPolicy()
        self.stride = stride
        self.keep_states = keep_states
        self.state = initial_state or UncertaintyState.from_priors(idx, prior_sigma_A, prior_sigma_theta)
        self.rows: List[Dict[str, float]] = []
        self.cross_rows: List[Dict[str, float]] = []
        self.states: Dict[int, UncertaintyState] = {}
        self.gauge: Dict[int, float] = {}
        self.clamps: Dict[str, float] = {}
        self.last_record = None

        if self.mode != TrackerMode.REALIZED and moments is None and ewma_lam is None:
            raise ValidationError(f"{self.mode.value} mode needs per-client data moments")
        self.moments = [(np.atleast_1d(mu), np.atleast_2d(S)) for mu, S in moments] if moments else None
        self.ewma: Optional[List[MomentEstimate]] = None
        if ewma_lam is not None:
            if self.mode != TrackerMode.MOMENT:
                raise ValidationError("EWMA moments only apply in moment mode")
            self.ewma = [MomentEstimate.start(d_m, mode="ewma", lam=ewma_lam) for d_m in idx.d_dims]
        self.limit_states = None
        self._limit_gains: Optional[GainSet] = None
        if self.mode == TrackerMode.LIMITING:
            if limit_states is None:
                raise ValidationError("limiting mode needs the limit filtered states")
            self.limit_states = [np.atleast_1d(h) for h in limit_states]
            self._limit_gains = gains(rates, [mu for mu, _ in self.moments], self.limit_states, self.A_diag, self.CA)

    def __call__(self, record):
        self.last_record = record
        self.observe(record.t, record.y, record.h_c, record.delta_h_a)

    def round_gains(self, y: Sequence[np.ndarray], h_c: Sequence[np.ndarray]) -> GainSet:
        return gains(self.rates, y, h_c, self.A_diag, self.CA)

    def current_moments(self, m: int) -> Tuple[np.ndarray, np.ndarray]:
        if self.ewma is not None:
            est = self.ewma[m]
            return est.mean, est.covariance
        return self.moments[m]

    def _complete(self, y: Optional[Sequence[np.ndarray]], h_n: Sequence[np.ndarray]) -> UncertaintyState:
        st = self.state
        Sigma_h, Lambda, Omega, Var_g = {}, {}, {}, {}
        Gamma = dict(st.Gamma)
        for m in range(self.idx.M):
            p, d = self.idx.p_dims[m], self.idx.d_dims[m]
            if self.mode == TrackerMode.REALIZED:
                L = data_lift(y[m], p)
                Sigma_h[m] = psd_clamp(L.T @ st.Sigma_theta[m] @ L, name=f"Sigma_h_{client_label(m)}")
                Lambda[m] = st.Sigma_theta[m] @ L
                for pair in st.Psi:
                    if pair[0] == m:
                        Gamma[pair] = st.Psi[pair] @ L
                Omega[m] = np.zeros((p * d, d))
            else:
                mu, S_y = self.current_moments(m)
                Sigma_h[m] = self._project(steady_sigma_h(st.Sigma_theta[m], mu, S_y, clamp=False), f"Sigma_h_{client_label(m)}")
                Lambda[m] = lambda_closed_form(st.Sigma_theta[m], None, mu)
                Omega[m] = omega_track("steady", Sigma_theta=st.Sigma_theta[m], mu_y=mu)
            pairs = [pair for pair in st.Sigma_A if pair[0] == m]
            Var_g[m] = var_server_gradient(
                Sigma_h[m],
                [st.Sigma_A[k] for k in pairs],
                [Gamma[k] for k in pairs],
                [h_n[k[1]] for k in pairs],
                self.A_diag[m],
                scale=2.0,
            )
        return st.model_copy(update={"Sigma_h": Sigma_h, "Lambda": Lambda, "Gamma": Gamma, "Omega": Omega, "Var_g": Var_g})

    def _project(self, X: np.ndarray, name: str) -> np.ndarray:
        S, shift = psd_project(X, name=name)
        if shift > PSD_TRACE_TOL:
            self.clamps[name] = self.clamps.get(name, 0.0) + shift
            logger.warning(f"{self.mode.value} closure: clamped {name}, trace shift {shift:.3e}")
        return S

    def _settle(self, X: np.ndarray, name: str, tolerant: bool) -> np.ndarray:
        # realized mode keeps the strict clamp from the propagators
        return self._project(X, name) if tolerant else X

    def _propagate(self, st: UncertaintyState, g: GainSet) -> UncertaintyState:
        up_var, down_var = self.dp.up_sigma ** 2, self.dp.down_sigma ** 2
        aleatoric = self.mode != TrackerMode.REALIZED
        Sigma_A, Psi, Gamma, Sigma_theta = {}, {}, {}, {}
        for pair in st.Sigma_A:
            m = pair[0]
            Sigma_A[pair] = self._settle(
                propagate_sigma_A(st.Sigma_A[pair], st.Sigma_h[m], st.Gamma[pair], g, pair, up_var=up_var, clamp=not aleatoric),
                f"Sigma_A_{pair_label(*pair)}",
                aleatoric,
            )
            Psi[pair] = propagate_psi(
                st.Psi[pair], st.Gamma[pair], st.Sigma_A[pair], st.Lambda[m], st.Sigma_h[m], g, pair, up_var=up_var
            )
            if aleatoric:
                Gamma[pair] = propagate_gamma(st.Gamma[pair], g, pair, st.Sigma_h[m])
        for m in range(self.idx.M):
            Sigma_theta[m] = self._settle(
                propagate_sigma_theta(
                    st.Sigma_theta[m], st.Sigma_h[m], st.Sigma_A, st.Lambda[m], st.Psi, st.Gamma, g, m,
                    Sigma_y=self.current_moments(m)[1] if aleatoric else None,
                    up_var=up_var, down_var=down_var, clamp=not aleatoric,
                ),
                f"Sigma_theta_{client_label(m)}",
                aleatoric,
            )
        require_finite("covariance propagation", *Sigma_theta.values(), *Sigma_A.values(), *Psi.values())
        return UncertaintyState(Sigma_theta=Sigma_theta, Sigma_A=Sigma_A, Psi=Psi, Gamma=Gamma or dict(st.Gamma))

    def observe(
        self,
        t: int,
        y: Optional[Sequence[np.ndarray]] = None,
        h_c: Optional[Sequence[np.ndarray]] = None,
        delta_h_a: Optional[Sequence[float]] = None,
    ):
        if self.ewma is not None:
            self.ewma = [update_moments(est, y[m]) for m, est in enumerate(self.ewma)]
        if self.mode == TrackerMode.LIMITING:
            g = self._limit_gains
        else:
            if y is None or h_c is None:
                raise ValidationError(f"{self.mode.value} mode needs the round's y and h_c")
            g = self.round_gains(y, h_c)
        full = self._complete(list(g.y.values()), list(g.h_c.values()))

        if delta_h_a is not None:
            self.gauge[t] = float(max(delta_h_a))
            logger.debug(f"round {t}: max |dh_a| = {self.gauge[t]:.3e}")
        if (t - 1) % self.stride == 0:
            self.rows.append({"round": t, **full.trace_row()})
            self.cross_rows.append({"round": t, **full.cross_row()})
            if self.keep_states:
                self.states[t] = full
        self.state = self._propagate(full, g)

    def run_limiting(self, rounds: int, start: int = 1) -> UncertaintyState:
        """Iterates the limiting-gain recursion without a training run."""
        if self.mode != TrackerMode.LIMITING:
            raise ValidationError("run_limiting requires limiting mode")
        for t in range(start, start + rounds):
            self.observe(t)
        return self.state

    def final_state(self) -> UncertaintyState:
        """The propagated state completed at the tracker's current inputs (no logging)."""
        if self.mode == TrackerMode.LIMITING:
            g = self._limit_gains
            return self._complete(list(g.y.values()), list(g.h_c.values()))
        raise ValidationError("final_state is only defined for limiting mode")
