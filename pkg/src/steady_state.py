"""
Stationary limits of the covariance recursions.

With the round inputs frozen at (mu_y, h*) the recursions of the covariance
engine become a time-invariant affine system; this module solves for its
fixed point: Gamma and Psi by direct solves, Sigma_A by a Neumann series, and
Sigma_theta by alternating a vectorised linear solve with the Sigma_A series.
"""
import logging
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy import linalg
from scipy.sparse.linalg import LinearOperator, gmres

from src.client_node import ClientNode
from src.covariance_engine import (
    GainSet,
    Pair,
    Rates,
    data_lift,
    gains,
    propagate_psi,
    steady_sigma_h,
)
from src.errors import ConvergenceError, StabilityError, ValidationError
from src.features.privacy import DpPolicy
from src.lti_world import BlockLtiSystem
from src.matrix_kernels import BlockIndex, client_label, pair_label, psd_clamp, spectral_radius, symmetrize, trace

logger = logging.getLogger("SteadyState")

NEUMANN_TOL = 1e-12
NEUMANN_MAX_TERMS = 100_000
DENSE_SOLVE_LIMIT = 2500
DIVERGENCE_PATIENCE = 10


class SteadyInputs(BaseModel):
    """Stationary data moments, limit filtered states and model constants per client."""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    idx: BlockIndex
    mu_y: List[np.ndarray]
    Sigma_y: List[np.ndarray]
    h_limit: List[np.ndarray]
    A_diag: List[np.ndarray]
    CA: List[np.ndarray]
    rates: Rates
    dp: DpPolicy = Field(default_factory=DpPolicy)

    @classmethod
    def from_world(
        cls,
        world: BlockLtiSystem,
        clients: Sequence[ClientNode],
        rates: Rates,
        dp: Optional[DpPolicy] = None,
    ) -> "SteadyInputs":
        idx = world.idx
        mu_y, Sigma_y = zip(*(world.client_moments(m) for m in range(idx.M)))
        h_limit = [
            limit_filtered_state(c.model.A_mm, c.model.C_mm, c.model.K, mu_y[m])
            for m, c in enumerate(clients)
        ]
        return cls(
            idx=idx,
            mu_y=list(mu_y),
            Sigma_y=list(Sigma_y),
            h_limit=h_limit,
            A_diag=[c.model.A_mm for c in clients],
            CA=[c.measurement_jacobian(h_limit[m]) for m, c in enumerate(clients)],
            rates=rates,
            dp=dp or DpPolicy(),
        )


def limit_filtered_state(A_mm: np.ndarray, C_mm: np.ndarray, K: np.ndarray, mu_y: np.ndarray) -> np.ndarray:
    """Fixed point of h = (I - K C) A h + K mu_y."""
    p = A_mm.shape[0]
    M = np.eye(p) - (np.eye(p) - K @ C_mm) @ A_mm
    return np.linalg.solve(M, K @ mu_y)


class SteadySolution(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    Sigma_A: Dict[Pair, np.ndarray]
    Sigma_theta: Dict[int, np.ndarray]
    Gamma: Dict[Pair, np.ndarray]
    Psi: Dict[Pair, np.ndarray]
    Sigma_h: Dict[int, np.ndarray]
    Omega: Dict[int, np.ndarray]
    residual_A: float
    residual_theta: float
    iterations: int
    neumann_terms: Dict[Pair, int]
    rho_D: Dict[Pair, float]
    rho_H: Dict[int, float]

    def to_report(self) -> dict:
        """JSON-ready summary: traces, residuals, spectral radii, iteration counts."""
        return {
            "trace_sigma_A": {pair_label(*k): trace(v) for k, v in sorted(self.Sigma_A.items())},
            "trace_sigma_theta": {client_label(m): trace(v) for m, v in sorted(self.Sigma_theta.items())},
            "trace_sigma_h": {client_label(m): trace(v) for m, v in sorted(self.Sigma_h.items())},
            "residual_A": self.residual_A,
            "residual_theta": self.residual_theta,
            "iterations": self.iterations,
            "neumann_terms": {pair_label(*k): v for k, v in sorted(self.neumann_terms.items())},
            "rho_D": {pair_label(*k): v for k, v in sorted(self.rho_D.items())},
            "rho_H": {client_label(m): v for m, v in sorted(self.rho_H.items())},
        }


def limiting_gains(inputs: SteadyInputs) -> GainSet:
    g = gains(inputs.rates, inputs.mu_y, inputs.h_limit, inputs.A_diag, inputs.CA)
    for pair, D in g.D.items():
        rho = spectral_radius(D)
        if rho >= 1.0:
            raise StabilityError(
                f"rho(D) = {rho:.6f} >= 1 for pair {pair_label(*pair)}; "
                "use a larger server ridge lambda_s (required when p_n > 1) or a smaller gamma",
                {"pair": pair, "rho": rho},
            )
    for m, H in g.H.items():
        rho = spectral_radius(H)
        if rho >= 1.0:
            raise StabilityError(
                f"rho(H) = {rho:.6f} >= 1 for client {client_label(m)}; "
                "use a larger client ridge lambda_c or smaller eta1/eta2",
                {"client": m, "rho": rho},
            )
    return g


def _spectral_radii(g: GainSet) -> Tuple[Dict[Pair, float], Dict[int, float]]:
    return (
        {pair: spectral_radius(D) for pair, D in g.D.items()},
        {m: spectral_radius(H) for m, H in g.H.items()},
    )


def gamma_infinity(g: GainSet, pair: Pair, Sigma_h: np.ndarray) -> np.ndarray:
    D = g.D[pair]
    try:
        return linalg.solve(np.eye(D.shape[0]) - D, 2.0 * g.gamma * g.B[pair] @ Sigma_h)
    except linalg.LinAlgError as e:
        raise StabilityError(f"I - D is singular for pair {pair_label(*pair)}", {"pair": pair}) from e


def psi_infinity(
    g: GainSet,
    pair: Pair,
    Gamma: np.ndarray,
    Sigma_A: np.ndarray,
    Lambda: np.ndarray,
    Sigma_h: np.ndarray,
    up_var: float = 0.0,
) -> np.ndarray:
    """Solves Psi = h D Psi + rest, where rest holds the other recursion terms."""
    D = g.D[pair]
    zero = np.zeros((D.shape[0], Lambda.shape[0]))
    rest = propagate_psi(zero, Gamma, Sigma_A, Lambda, Sigma_h, g, pair, up_var=up_var)
    try:
        return linalg.solve(np.eye(D.shape[0]) - g.h_self * D, rest)
    except linalg.LinAlgError as e:
        raise StabilityError(f"I - h D is singular for pair {pair_label(*pair)}", {"pair": pair}) from e


def gamma_psi_infinity(
    inputs: SteadyInputs,
    Sigma_h: Dict[int, np.ndarray],
    Sigma_A: Dict[Pair, np.ndarray],
    Lambda: Optional[Dict[int, np.ndarray]] = None,
    g: Optional[GainSet] = None,
) -> Tuple[Dict[Pair, np.ndarray], Dict[Pair, np.ndarray]]:
    g = g or limiting_gains(inputs)
    if Lambda is None:
        Lambda = {m: np.zeros((g.F[m].shape[0], g.F[m].shape[1])) for m in g.F}
    up_var = inputs.dp.up_sigma ** 2
    Gamma = {pair: gamma_infinity(g, pair, Sigma_h[pair[0]]) for pair in g.D}
    Psi = {
        pair: psi_infinity(g, pair, Gamma[pair], Sigma_A[pair], Lambda[pair[0]], Sigma_h[pair[0]], up_var)
        for pair in g.D
    }
    return Gamma, Psi


def sigma_h_infinity(Sigma_theta: Dict[int, np.ndarray], inputs: SteadyInputs) -> Tuple[Dict[int, np.ndarray], Dict[int, np.ndarray]]:
    """Sigma_h at steady moments and the stationary Omega = Sigma_theta (mu kron I)."""
    Sigma_h, Omega = {}, {}
    for m, S in Sigma_theta.items():
        p = inputs.idx.p_dims[m]
        Sigma_h[m] = steady_sigma_h(S, inputs.mu_y[m], inputs.Sigma_y[m])
        Omega[m] = S @ data_lift(inputs.mu_y[m], p)
    return Sigma_h, Omega


def server_source(
    g: GainSet,
    pair: Pair,
    Sigma_h: np.ndarray,
    Gamma: Optional[np.ndarray] = None,
    include_cross: bool = True,
    up_var: float = 0.0,
) -> np.ndarray:
    """Q_mn: the Sigma_A source term; include_cross adds the 2 gamma (D Gamma B^T + ...) part."""
    B, D, gm = g.B[pair], g.D[pair], g.gamma
    Q = 4.0 * gm * gm * B @ Sigma_h @ B.T
    if include_cross and Gamma is not None:
        cross = D @ Gamma @ B.T
        Q = Q + 2.0 * gm * (cross + cross.T)
    if up_var:
        Q = Q + 8.0 * gm * gm * up_var * B @ B.T
    return symmetrize(Q)


def neumann_series(D: np.ndarray, Q: np.ndarray, tol: float = NEUMANN_TOL, k_max: int = NEUMANN_MAX_TERMS) -> Tuple[np.ndarray, int]:
    """sum_k D^k Q D^kT, stopping once a term's Frobenius norm drops below tol."""
    total = Q.copy()
    term = Q.copy()
    for k in range(1, k_max + 1):
        term = D @ term @ D.T
        total += term
        norm = float(np.linalg.norm(term))
        if norm < tol:
            return symmetrize(total), k
    rho = spectral_radius(D)
    raise ConvergenceError(
        f"Neumann series did not converge in {k_max} terms (last term {norm:.3e}, rho(D)={rho:.6f})",
        {"rho": rho, "residual": norm},
    )


def sigma_A_infinity(
    Sigma_theta: Dict[int, np.ndarray],
    inputs: SteadyInputs,
    tol: float = NEUMANN_TOL,
    k_max: int = NEUMANN_MAX_TERMS,
    include_cross: bool = True,
    g: Optional[GainSet] = None,
) -> Tuple[Dict[Pair, np.ndarray], Dict[Pair, int]]:
    g = g or limiting_gains(inputs)
    Sigma_h, _ = sigma_h_infinity(Sigma_theta, inputs)
    up_var = inputs.dp.up_sigma ** 2
    out, terms = {}, {}
    for pair, D in g.D.items():
        Gamma = gamma_infinity(g, pair, Sigma_h[pair[0]])
        Q = server_source(g, pair, Sigma_h[pair[0]], Gamma, include_cross, up_var)
        S, k = neumann_series(D, Q, tol, k_max)
        rho = spectral_radius(D)
        logger.debug(f"Sigma_A_{pair_label(*pair)}: {k} Neumann terms, truncation bound {rho ** (2 * k) * np.linalg.norm(Q):.3e}")
        out[pair], terms[pair] = psd_clamp(S, name=f"Sigma_A_inf_{pair_label(*pair)}"), k
    return out, terms


def _theta_operator(g: GainSet, inputs: SteadyInputs, m: int):
    """The Sigma_theta-linear part X -> h^2 X + F S_h(X) F^T + h (Lambda(X) F^T + F Lambda(X)^T)."""
    F, h = g.F[m], g.h_self
    lift = data_lift(inputs.mu_y[m], inputs.idx.p_dims[m])

    def apply(X: np.ndarray) -> np.ndarray:
        S_h = steady_sigma_h(X, inputs.mu_y[m], inputs.Sigma_y[m], clamp=False)
        cross = X @ lift @ F.T
        return h * h * X + F @ S_h @ F.T + h * (cross + cross.T)

    return apply


def _theta_source(
    g: GainSet,
    inputs: SteadyInputs,
    m: int,
    Sigma_A: Dict[Pair, np.ndarray],
    Psi: Dict[Pair, np.ndarray],
    Gamma: Dict[Pair, np.ndarray],
) -> np.ndarray:
    F, G, h = g.F[m], g.G[m], g.h_self
    E = G @ inputs.Sigma_y[m] @ G.T
    for pair in g.pairs_of(m):
        Pt = g.P_tilde[pair]
        t_psi = Pt @ Psi[pair]
        t_gamma = Pt @ Gamma[pair] @ F.T
        E = E + Pt @ Sigma_A[pair] @ Pt.T - h * (t_psi + t_psi.T) - (t_gamma + t_gamma.T)
    up_var, down_var = inputs.dp.up_sigma ** 2, inputs.dp.down_sigma ** 2
    if up_var:
        PA = g.PA[m]
        E = E + 2.0 * up_var * PA @ PA.T
    if down_var:
        y = g.y[m]
        E = E + g.eta2 ** 2 * down_var * np.kron(np.outer(y, y), np.eye(inputs.idx.p_dims[m]))
    return E


def solve_theta_equation(apply, E: np.ndarray) -> np.ndarray:
    """Solves X - apply(X) = E: dense vectorised solve for small systems, gmres otherwise."""
    n = E.shape[0]
    N = n * n
    if N <= DENSE_SOLVE_LIMIT:
        Lmat = np.empty((N, N))
        for j in range(N):
            basis = np.zeros(N)
            basis[j] = 1.0
            Lmat[:, j] = apply(basis.reshape(n, n, order="F")).reshape(-1, order="F")
        x = linalg.solve(np.eye(N) - Lmat, E.reshape(-1, order="F"))
    else:
        op = LinearOperator(
            (N, N),
            matvec=lambda x: x - apply(x.reshape(n, n, order="F")).reshape(-1, order="F"),
            dtype=float,
        )
        x, info = gmres(op, E.reshape(-1, order="F"), rtol=1e-12, atol=0.0, restart=200, maxiter=1000)
        if info != 0:
            raise ConvergenceError(f"gmres failed on the Sigma_theta equation (info={info})", {"info": info})
    return symmetrize(x.reshape(n, n, order="F"))


def _residuals(
    g: GainSet,
    inputs: SteadyInputs,
    Sigma_theta: Dict[int, np.ndarray],
    Sigma_A: Dict[Pair, np.ndarray],
) -> Tuple[float, float, Dict[Pair, np.ndarray], Dict[Pair, np.ndarray], Dict[int, np.ndarray]]:
    Sigma_h, _ = sigma_h_infinity(Sigma_theta, inputs)
    Lambda = {m: S @ data_lift(inputs.mu_y[m], inputs.idx.p_dims[m]) for m, S in Sigma_theta.items()}
    Gamma, Psi = gamma_psi_infinity(inputs, Sigma_h, Sigma_A, Lambda, g)
    up_var = inputs.dp.up_sigma ** 2
    res_A = 0.0
    for pair, D in g.D.items():
        Q = server_source(g, pair, Sigma_h[pair[0]], Gamma[pair], True, up_var)
        res_A = max(res_A, float(np.linalg.norm(D @ Sigma_A[pair] @ D.T + Q - Sigma_A[pair])))
    res_theta = 0.0
    for m, S in Sigma_theta.items():
        rhs = _theta_operator(g, inputs, m)(S) + _theta_source(g, inputs, m, Sigma_A, Psi, Gamma)
        res_theta = max(res_theta, float(np.linalg.norm(rhs - S)))
    return res_A, res_theta, Gamma, Psi, Sigma_h


def solve_joint(inputs: SteadyInputs, tol: float = 1e-10, max_iter: int = 500) -> SteadySolution:
    """
    Alternates Sigma_A = series(Sigma_theta) and Sigma_theta = solve(Sigma_A)
    until both fixed-point residuals fall below tol.
    """
    if tol <= 0:
        raise ValidationError(f"Tolerance must be positive, got {tol}")
    g = limiting_gains(inputs)
    rho_D, rho_H = _spectral_radii(g)
    M = inputs.idx.M
    Sigma_theta = {m: np.zeros((g.F[m].shape[0],) * 2) for m in range(M)}
    previous, growth = np.inf, 0
    terms: Dict[Pair, int] = {}

    for it in range(1, max_iter + 1):
        Sigma_A, terms = sigma_A_infinity(Sigma_theta, inputs, g=g)
        Sigma_h, _ = sigma_h_infinity(Sigma_theta, inputs)
        Lambda = {m: S @ data_lift(inputs.mu_y[m], inputs.idx.p_dims[m]) for m, S in Sigma_theta.items()}
        Gamma, Psi = gamma_psi_infinity(inputs, Sigma_h, Sigma_A, Lambda, g)
        Sigma_theta = {
            m: psd_clamp(
                solve_theta_equation(_theta_operator(g, inputs, m), _theta_source(g, inputs, m, Sigma_A, Psi, Gamma)),
                name=f"Sigma_theta_inf_{client_label(m)}",
            )
            for m in range(M)
        }
        Sigma_A, terms = sigma_A_infinity(Sigma_theta, inputs, g=g)
        res_A, res_theta, Gamma, Psi, Sigma_h = _residuals(g, inputs, Sigma_theta, Sigma_A)
        residual = max(res_A, res_theta)
        logger.debug(f"alternation {it}: residual_A={res_A:.3e} residual_theta={res_theta:.3e}")
        if residual < tol:
            _, Omega = sigma_h_infinity(Sigma_theta, inputs)
            logger.info(f"Joint steady state solved in {it} alternations (residual {residual:.3e})")
            return SteadySolution(
                Sigma_A=Sigma_A, Sigma_theta=Sigma_theta, Gamma=Gamma, Psi=Psi, Sigma_h=Sigma_h, Omega=Omega,
                residual_A=res_A, residual_theta=res_theta, iterations=it, neumann_terms=terms,
                rho_D=rho_D, rho_H=rho_H,
            )
        growth = growth + 1 if residual > previous else 0
        if growth >= DIVERGENCE_PATIENCE:
            raise ConvergenceError(
                f"Steady-state alternation diverged: residual grew {growth} consecutive steps (now {residual:.3e})",
                {"residual": residual, "iterations": it},
            )
        previous = residual

    raise ConvergenceError(
        f"Steady-state alternation hit {max_iter} iterations (residual {previous:.3e})",
        {"residual": previous, "iterations": max_iter},
    )
