"""
Ground-truth block LTI world.

    h^t = A h^{t-1} + w^t,   w ~ N(0, Q)
    y^t = C h^t + v^t + b,   v ~ N(0, R)

C is block-diagonal over clients and b is an optional constant measurement
offset (it gives the data a non-zero mean, which the steady-state gains need).
"""
import logging
import math
from typing import List, Literal, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, field_validator, model_validator
from scipy.linalg import solve_discrete_lyapunov

from src.errors import DimensionError, StabilityError, ValidationError
from src.matrix_kernels import BlockIndex, assemble_blocks, block, is_psd, psd_sqrt, spectral_radius

logger = logging.getLogger("LtiWorld")


class BlockLtiSystem(BaseModel):
    """
    Ground-truth world: block state matrix A, block-diagonal C, noise covariances Q, R.
    """
    model_config = ConfigDict(arbitrary_types_allowed=True)

    A: np.ndarray
    C: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    idx: BlockIndex
    y_offset: Optional[np.ndarray] = None
    stable: bool = True
    name: str = "custom"

    @field_validator("A", "C", "Q", "R", mode="before")
    @classmethod
    def as_matrix(cls, v):
        return np.atleast_2d(np.asarray(v, dtype=float))

    @field_validator("y_offset", mode="before")
    @classmethod
    def as_vector(cls, v):
        if v is None:
            return None
        return np.atleast_1d(np.asarray(v, dtype=float))

    @model_validator(mode="after")
    def validate_structure(self):
        p, d = self.idx.p, self.idx.d
        for label, mat, shape in (("A", self.A, (p, p)), ("C", self.C, (d, p)), ("Q", self.Q, (p, p)), ("R", self.R, (d, d))):
            if mat.shape != shape:
                raise ValueError(f"{label} has shape {mat.shape}, expected {shape}")
            if not np.all(np.isfinite(mat)):
                raise ValueError(f"{label} has non-finite entries")
        for m in range(self.idx.M):
            for n in range(self.idx.M):
                if m != n and np.any(block(self.C, self.idx, m, n, ("d", "p")) != 0.0):
                    raise ValueError(f"C must be block-diagonal; block ({m},{n}) is non-zero")
        if not is_psd(self.Q):
            raise ValueError("Q must be symmetric positive semidefinite")
        if not is_psd(self.R):
            raise ValueError("R must be symmetric positive semidefinite")
        if self.y_offset is not None and self.y_offset.shape != (d,):
            raise ValueError(f"y_offset has shape {self.y_offset.shape}, expected ({d},)")
        if self.stable and spectral_radius(self.A) >= 1.0:
            raise ValueError(f"A is flagged stable but has spectral radius {spectral_radius(self.A):.6f}")
        return self

    @property
    def rho(self) -> float:
        return spectral_radius(self.A)

    @property
    def offset(self) -> np.ndarray:
        return self.y_offset if self.y_offset is not None else np.zeros(self.idx.d)

    def A_block(self, m: int, n: int) -> np.ndarray:
        return block(self.A, self.idx, m, n)

    def C_block(self, m: int) -> np.ndarray:
        return block(self.C, self.idx, m, m, ("d", "p"))

    def Q_block(self, m: int) -> np.ndarray:
        return block(self.Q, self.idx, m, m)

    def R_block(self, m: int) -> np.ndarray:
        return block(self.R, self.idx, m, m, ("d", "d"))

    def state_covariance(self) -> np.ndarray:
        """Stationary Var(h) from the discrete Lyapunov equation."""
        if self.rho >= 1.0:
            raise StabilityError(f"No stationary state covariance: rho(A)={self.rho:.6f}")
        return solve_discrete_lyapunov(self.A, self.Q)

    def measurement_moments(self) -> Tuple[np.ndarray, np.ndarray]:
        """Stationary (mu_y, Sigma_y) of the full measurement vector."""
        Sigma_h = self.state_covariance()
        Sigma_y = self.C @ Sigma_h @ self.C.T + self.R
        return self.offset.copy(), 0.5 * (Sigma_y + Sigma_y.T)

    def client_moments(self, m: int) -> Tuple[np.ndarray, np.ndarray]:
        mu, Sigma = self.measurement_moments()
        sl = self.idx.slice_of(m, "d")
        return mu[sl].copy(), Sigma[sl, sl].copy()

    def with_noise_scale(self, scale: float) -> "BlockLtiSystem":
        """Scales Q and R together, so Sigma_y scales by the same factor."""
        if scale <= 0:
            raise ValidationError(f"Noise scale must be positive, got {scale}")
        return self.model_copy(update={"Q": self.Q * scale, "R": self.R * scale})


class Trajectory(BaseModel):
    """Latent states h^0..h^T and measurements y^0..y^T generated under one seed."""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    h: np.ndarray
    y: np.ndarray
    seed: int
    idx: BlockIndex

    @model_validator(mode="after")
    def validate_lengths(self):
        if self.h.shape[0] != self.y.shape[0]:
            raise ValueError("h and y must have the same number of time steps")
        return self

    @property
    def T(self) -> int:
        return self.h.shape[0] - 1

    def client_y(self, m: int) -> np.ndarray:
        return self.y[:, self.idx.slice_of(m, "d")]

    def client_h(self, m: int) -> np.ndarray:
        return self.h[:, self.idx.slice_of(m, "p")]

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(self.y, columns=[f"y_{i + 1}" for i in range(self.y.shape[1])])
        frame.insert(0, "t", np.arange(self.y.shape[0]))
        return frame

    def to_csv(self, path: str):
        self.to_frame().to_csv(path, index=False, float_format="%.17g")


def simulate(
    sys: BlockLtiSystem,
    T: int,
    seed: int,
    mean_shift_schedule: Optional[Sequence[Tuple[int, Sequence[float]]]] = None,
    shift_target: Literal["measurement", "latent"] = "measurement",
    h0: Optional[np.ndarray] = None,
) -> Trajectory:
    """
    Draws a trajectory of the world. Mean shifts accumulate: each (time, offset)
    adds its offset from that time onward, to y by default or to h when
    shift_target="latent".
    """
    if T < 0:
        raise ValidationError(f"Horizon must be non-negative, got {T}")
    p, d = sys.idx.p, sys.idx.d
    rng = np.random.default_rng(seed)
    W = rng.standard_normal((T + 1, p)) @ psd_sqrt(sys.Q).T
    V = rng.standard_normal((T + 1, d)) @ psd_sqrt(sys.R).T

    shift_dim = d if shift_target == "measurement" else p
    shifts = np.zeros((T + 1, shift_dim))
    for t0, offset in mean_shift_schedule or []:
        offset = np.asarray(offset, dtype=float)
        if offset.shape != (shift_dim,):
            raise DimensionError(f"Mean shift at t={t0} has shape {offset.shape}, expected ({shift_dim},)")
        if 0 <= t0 <= T:
            shifts[t0:] += offset

    h = np.zeros((T + 1, p))
    h[0] = np.zeros(p) if h0 is None else np.asarray(h0, dtype=float)
    if shift_target == "latent":
        h[0] = h[0] + shifts[0]
    for t in range(1, T + 1):
        h[t] = sys.A @ h[t - 1] + W[t]
        if shift_target == "latent":
            h[t] = h[t] + (shifts[t] - shifts[t - 1])

    y = h @ sys.C.T + V + sys.offset
    if shift_target == "measurement":
        y = y + shifts
    logger.debug(f"Simulated {sys.name} for T={T} (seed={seed})")
    return Trajectory(h=h, y=y, seed=seed, idx=sys.idx)


class MomentEstimate(BaseModel):
    """Streaming mean / covariance, either cumulative ("stationary") or EWMA(lam)."""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    mean: np.ndarray
    second: np.ndarray
    mode: Literal["stationary", "ewma"] = "stationary"
    lam: Optional[float] = None
    count: int = 0

    @model_validator(mode="after")
    def validate_mode(self):
        if self.mode == "ewma":
            if self.lam is None or not (0.0 < self.lam <= 1.0):
                raise ValueError(f"EWMA forgetting factor must lie in (0, 1], got {self.lam}")
        return self

    @classmethod
    def start(cls, dim: int, mode: str = "stationary", lam: Optional[float] = None) -> "MomentEstimate":
        return cls(mean=np.zeros(dim), second=np.zeros((dim, dim)), mode=mode, lam=lam, count=0)

    @property
    def covariance(self) -> np.ndarray:
        S = self.second - np.outer(self.mean, self.mean)
        return 0.5 * (S + S.T)


def update_moments(est: MomentEstimate, sample: np.ndarray) -> MomentEstimate:
    """
    EWMA: mu_t = (1 - lam) mu_{t-1} + lam x_t (same for the second moment).
    Cumulative: running arithmetic mean. The first sample initialises both.
    """
    x = np.atleast_1d(np.asarray(sample, dtype=float))
    if x.shape != est.mean.shape:
        raise DimensionError(f"Sample has shape {x.shape}, estimate tracks {est.mean.shape}")
    if est.mode == "ewma" and (est.lam is None or not 0.0 < est.lam <= 1.0):
        raise ValidationError(f"EWMA forgetting factor must lie in (0, 1], got {est.lam}")
    outer = np.outer(x, x)
    if est.count == 0:
        mean, second = x.copy(), outer
    elif est.mode == "ewma":
        mean = (1.0 - est.lam) * est.mean + est.lam * x
        second = (1.0 - est.lam) * est.second + est.lam * outer
    else:
        w = 1.0 / (est.count + 1)
        mean = est.mean + w * (x - est.mean)
        second = est.second + w * (outer - est.second)
    return est.model_copy(update={"mean": mean, "second": 0.5 * (second + second.T), "count": est.count + 1})


def stream_moments(samples: np.ndarray, mode: str = "stationary", lam: Optional[float] = None) -> List[MomentEstimate]:
    est = MomentEstimate.start(samples.shape[1], mode=mode, lam=lam)
    history = []
    for x in samples:
        est = update_moments(est, x)
        history.append(est)
    return history


# Canonical benchmark worlds

BENCHMARK_OBSERVATION = np.array([
    [1.0, 0.0],
    [0.0, 1.0],
    [0.5, 0.5],
    [0.5, -0.5],
    [1.0, 0.5],
    [0.5, 1.0],
    [0.25, 0.0],
    [0.0, 0.25],
])


def observation_block(d_m: int) -> np.ndarray:
    """
    d_m x 2 full-column-rank block. For d_m != 8 the base rows are tiled and
    rescaled by sqrt(8 / d_m) so C^T C is comparable across sizes.
    """
    if d_m < 2:
        raise ValidationError(f"Benchmark observation blocks need d_m >= 2, got {d_m}")
    if d_m == 8:
        return BENCHMARK_OBSERVATION.copy()
    reps = math.ceil(d_m / 8)
    return np.tile(BENCHMARK_OBSERVATION, (reps, 1))[:d_m] * math.sqrt(8.0 / d_m)


def make_two_client_benchmark(
    d_m: int = 8,
    q: float = 0.05,
    r: float = 0.01,
    offset: float = 0.0,
) -> BlockLtiSystem:
    """M=2, p_m=2: client 1 Granger-causes client 2 (A_12 = 0, A_21 != 0)."""
    idx = BlockIndex.uniform(2, 2, d_m)
    A = assemble_blocks({
        (0, 0): [[0.5, 0.1], [0.0, 0.4]],
        (1, 1): [[0.45, 0.0], [0.1, 0.35]],
        (1, 0): [[0.3, 0.0], [0.1, 0.2]],
    }, idx)
    Cm = observation_block(d_m)
    C = assemble_blocks({(0, 0): Cm, (1, 1): Cm}, idx, ("d", "p"))
    return BlockLtiSystem(
        A=A, C=C, Q=q * np.eye(idx.p), R=r * np.eye(idx.d), idx=idx,
        y_offset=offset * np.ones(idx.d), name="two_client_benchmark",
    )


def make_scalar_benchmark(
    coupling: float = 0.3,
    q: float = 0.1,
    r: float = 0.05,
    offset: float = 0.0,
) -> BlockLtiSystem:
    """M=2, p_m=d_m=1 variant for exact-formula checks."""
    idx = BlockIndex.uniform(2, 1, 1)
    A = np.array([[0.5, 0.0], [coupling, 0.6]])
    return BlockLtiSystem(
        A=A, C=np.eye(2), Q=q * np.eye(2), R=r * np.eye(2), idx=idx,
        y_offset=offset * np.ones(2), name="scalar_benchmark",
    )


def make_chain_benchmark(
    M: int,
    d_m: int = 8,
    q: float = 0.05,
    r: float = 0.01,
    offset: float = 0.0,
) -> BlockLtiSystem:
    """M clients in a causal chain: client m Granger-causes client m+1."""
    if M < 2:
        raise ValidationError(f"A chain needs at least two clients, got M={M}")
    idx = BlockIndex.uniform(M, 2, d_m)
    diagonals = ([[0.5, 0.1], [0.0, 0.4]], [[0.45, 0.0], [0.1, 0.35]])
    blocks = {(m, m): diagonals[m % 2] for m in range(M)}
    blocks.update({(m + 1, m): [[0.3, 0.0], [0.1, 0.2]] for m in range(M - 1)})
    A = assemble_blocks(blocks, idx)
    Cm = observation_block(d_m)
    C = assemble_blocks({(m, m): Cm for m in range(M)}, idx, ("d", "p"))
    return BlockLtiSystem(
        A=A, C=C, Q=q * np.eye(idx.p), R=r * np.eye(idx.d), idx=idx,
        y_offset=offset * np.ones(idx.d), name=f"chain_{M}",
    )
