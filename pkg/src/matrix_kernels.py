"""
Dense small-matrix primitives shared by the simulator and the covariance engine.

Vectorisation is column-stacking everywhere: vec(M)[i + j*rows] = M[i, j], so
vec(A X B) = (B^T kron A) vec(X). Every Kronecker gain downstream relies on it.
"""
import logging
from typing import List, Mapping, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, field_validator, model_validator

from src.errors import DimensionError, NumericalError, ValidationError

logger = logging.getLogger("MatrixKernels")

PSD_NEG_TOL = 1e-9
PSD_TRACE_TOL = 1e-6


class BlockIndex(BaseModel):
    """
    Per-client state (p_m) and measurement (d_m) dimensions with derived offsets.
    Client ids are 0-based; artifact labels use 1-based ids (see pair_label).
    """
    p_dims: List[int]
    d_dims: List[int]

    @field_validator("p_dims", "d_dims")
    @classmethod
    def validate_positive(cls, v):
        if not v:
            raise ValueError("At least one client is required.")
        if any(int(x) < 1 for x in v):
            raise ValueError(f"Block dimensions must be >= 1, got {v}")
        return [int(x) for x in v]

    @model_validator(mode="after")
    def validate_client_count(self):
        if len(self.p_dims) != len(self.d_dims):
            raise ValueError(
                f"p_dims has {len(self.p_dims)} clients but d_dims has {len(self.d_dims)}"
            )
        return self

    @property
    def M(self) -> int:
        return len(self.p_dims)

    @property
    def p(self) -> int:
        return sum(self.p_dims)

    @property
    def d(self) -> int:
        return sum(self.d_dims)

    @property
    def p_offsets(self) -> List[int]:
        return [0] + [int(x) for x in np.cumsum(self.p_dims)]

    @property
    def d_offsets(self) -> List[int]:
        return [0] + [int(x) for x in np.cumsum(self.d_dims)]

    def check_client(self, m: int):
        if not 0 <= m < self.M:
            raise ValidationError(f"Client index {m} out of range for M={self.M}", {"client": m})

    def slice_of(self, m: int, axis: str = "p") -> slice:
        self.check_client(m)
        offsets = self.p_offsets if axis == "p" else self.d_offsets
        return slice(int(offsets[m]), int(offsets[m + 1]))

    def pairs(self) -> List[Tuple[int, int]]:
        """All ordered off-diagonal pairs (m, n), m != n."""
        return [(m, n) for m in range(self.M) for n in range(self.M) if m != n]

    @classmethod
    def uniform(cls, M: int, p_m: int, d_m: int) -> "BlockIndex":
        return cls(p_dims=[p_m] * M, d_dims=[d_m] * M)


def pair_label(m: int, n: int) -> str:
    return f"{m + 1}_{n + 1}"


def client_label(m: int) -> str:
    return f"{m + 1}"


def vec(M: np.ndarray) -> np.ndarray:
    """Column-stacking vectorisation."""
    M = np.asarray(M, dtype=float)
    if M.ndim == 1:
        return M.copy()
    return M.reshape(-1, order="F")


def unvec(v: np.ndarray, rows: int, cols: int) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    if v.size != rows * cols:
        raise DimensionError(f"Cannot reshape vector of length {v.size} into {rows}x{cols}")
    return v.reshape((rows, cols), order="F")


def kron(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    return np.kron(np.atleast_2d(A), np.atleast_2d(B))


def spectral_radius(M: np.ndarray) -> float:
    """Largest eigenvalue magnitude via the full LAPACK eigensolver."""
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise DimensionError(f"spectral_radius needs a square matrix, got shape {M.shape}")
    if not np.all(np.isfinite(M)):
        raise NumericalError("spectral_radius received non-finite entries")
    return float(np.max(np.abs(np.linalg.eigvals(M))))


def block(M: np.ndarray, idx: BlockIndex, m: int, n: int, axes: Tuple[str, str] = ("p", "p")) -> np.ndarray:
    """Extracts block (m, n); axes picks state ("p") or measurement ("d") partitions."""
    rows = idx.slice_of(m, axes[0])
    cols = idx.slice_of(n, axes[1])
    expected = (idx.p if axes[0] == "p" else idx.d, idx.p if axes[1] == "p" else idx.d)
    if M.shape != expected:
        raise DimensionError(f"Matrix shape {M.shape} does not match block index {expected}")
    return M[rows, cols].copy()


def assemble_blocks(
    blocks: Mapping[Tuple[int, int], np.ndarray],
    idx: BlockIndex,
    axes: Tuple[str, str] = ("p", "p"),
) -> np.ndarray:
    """Inverse of block(); absent blocks are zero."""
    n_rows = idx.p if axes[0] == "p" else idx.d
    n_cols = idx.p if axes[1] == "p" else idx.d
    out = np.zeros((n_rows, n_cols))
    for (m, n), B in blocks.items():
        rows = idx.slice_of(m, axes[0])
        cols = idx.slice_of(n, axes[1])
        B = np.atleast_2d(np.asarray(B, dtype=float))
        if B.shape != (rows.stop - rows.start, cols.stop - cols.start):
            raise DimensionError(
                f"Block ({m},{n}) has shape {B.shape}, expected {(rows.stop - rows.start, cols.stop - cols.start)}"
            )
        out[rows, cols] = B
    return out


def block_diag(blocks: Sequence[np.ndarray], idx: BlockIndex, axes: Tuple[str, str] = ("p", "p")) -> np.ndarray:
    return assemble_blocks({(m, m): B for m, B in enumerate(blocks)}, idx, axes)


def trace(M: np.ndarray) -> float:
    return float(np.trace(np.atleast_2d(M)))


def symmetrize(X: np.ndarray) -> np.ndarray:
    return 0.5 * (X + X.T)


def psd_clamp(X: np.ndarray, neg_tol: float = PSD_NEG_TOL, trace_tol: float = PSD_TRACE_TOL, name: str = "matrix") -> np.ndarray:
    """
    Symmetrises X and zeroes negative eigenvalues.
    Raises NumericalError when the clamp moves the trace by more than trace_tol.
    """
    S, shift, min_eig = _project(X, neg_tol, name)
    if shift > trace_tol:
        raise NumericalError(
            f"PSD clamp on {name} moved the trace by {shift:.3e}",
            {"name": name, "trace_shift": shift, "min_eig": min_eig},
        )
    if shift:
        logger.debug(f"Clamped {name}: min eigenvalue {min_eig:.3e}")
    return S


def psd_project(X: np.ndarray, neg_tol: float = PSD_NEG_TOL, name: str = "matrix") -> Tuple[np.ndarray, float]:
    """
    Nearest PSD matrix to sym(X) and the trace it added. Never raises on
    indefiniteness; the caller decides what a large shift means.
    """
    S, shift, _ = _project(X, neg_tol, name)
    return S, shift


def _project(X: np.ndarray, neg_tol: float, name: str) -> Tuple[np.ndarray, float, float]:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if not np.all(np.isfinite(X)):
        raise NumericalError(f"{name} has non-finite entries", {"name": name})
    S = symmetrize(X)
    w, V = np.linalg.eigh(S)
    if w.size == 0 or w.min() >= -neg_tol:
        return S, 0.0, float(w.min()) if w.size else 0.0
    shift = float(-w[w < 0].sum())
    w_clipped = np.clip(w, 0.0, None)
    return symmetrize((V * w_clipped) @ V.T), shift, float(w.min())


def psd_sqrt(S: np.ndarray) -> np.ndarray:
    """Factor L with L L^T = S; semidefinite inputs are clamped at 0."""
    S = symmetrize(np.atleast_2d(np.asarray(S, dtype=float)))
    w, V = np.linalg.eigh(S)
    return V * np.sqrt(np.clip(w, 0.0, None))


def is_psd(S: np.ndarray, tol: float = 1e-10) -> bool:
    S = np.atleast_2d(np.asarray(S, dtype=float))
    if S.shape[0] != S.shape[1] or not np.allclose(S, S.T, atol=1e-12, rtol=1e-10):
        return False
    return bool(np.linalg.eigvalsh(S).min() >= -tol)


def require_finite(name: str, *arrays: np.ndarray):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NumericalError(f"{name} produced non-finite values", {"name": name})
