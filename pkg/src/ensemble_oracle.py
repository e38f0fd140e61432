"""
Monte-Carlo referee for the covariance engine: N independent replicas of
federated training, each with sampled initial parameters, and the
cross-replica moments of every tracked quantity.
"""
import asyncio
import logging
from typing import Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, field_validator

from src.client_node import ClientNode, build_client, kalman_gain
from src.coordinator import RoundRecord, ServerModel, run_federated
from src.covariance_engine import Rates
from src.errors import NumericalError, ProtocolError, ValidationError
from src.features.privacy import DpPolicy
from src.lti_world import BlockLtiSystem, Trajectory, simulate
from src.matrix_kernels import BlockIndex, client_label, pair_label, symmetrize, trace, vec

logger = logging.getLogger("EnsembleOracle")

Pair = Tuple[int, int]


class EnsembleConfig(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    N: int
    T: int
    rates: Rates = Field(default_factory=Rates)
    prior_sigma_A: float = 0.0
    prior_sigma_theta: float = 0.0
    base_seed: int = 0
    data_seed: int = 0
    stride: int = 1
    data_mode: Literal["shared", "fresh"] = "shared"
    sigma_y_scale: Optional[float] = None
    dp: DpPolicy = Field(default_factory=DpPolicy)
    exact: bool = True
    identical_seeds: bool = False
    max_concurrency: int = 8

    @field_validator("N")
    @classmethod
    def validate_n(cls, v):
        if v < 2:
            raise ValueError(f"An ensemble needs at least 2 replicas, got {v}")
        return v

    @field_validator("prior_sigma_A", "prior_sigma_theta")
    @classmethod
    def validate_prior(cls, v):
        if v < 0:
            raise ValueError(f"Prior variances must be non-negative, got {v}")
        return float(v)

    @field_validator("T", "stride", "max_concurrency")
    @classmethod
    def validate_counts(cls, v):
        if v < 0:
            raise ValueError(f"Counts must be non-negative, got {v}")
        return v


class ReplicaSeeds(BaseModel):
    prior: int
    dp: int
    data: int


def replica_seeds(base_seed: int, N: int, identical: bool = False) -> List[ReplicaSeeds]:
    """Child i of SeedSequence(base_seed) does not depend on N."""
    children = np.random.SeedSequence(base_seed).spawn(N)
    seeds = [ReplicaSeeds(**dict(zip(("prior", "dp", "data"), (int(x) for x in c.generate_state(3))))) for c in children]
    if identical:
        seeds = [seeds[0]] * N
    return seeds


class RoundMoments(BaseModel):
    """Cross-replica moments at one logged round (unbiased N-1 estimator)."""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    Sigma_A: Dict[Pair, np.ndarray] = Field(default_factory=dict)
    mu_A: Dict[Pair, np.ndarray] = Field(default_factory=dict)
    Psi: Dict[Pair, np.ndarray] = Field(default_factory=dict)
    Gamma: Dict[Pair, np.ndarray] = Field(default_factory=dict)
    Gamma_shift: Dict[Pair, np.ndarray] = Field(default_factory=dict)
    Sigma_theta: Dict[int, np.ndarray] = Field(default_factory=dict)
    Sigma_h: Dict[int, np.ndarray] = Field(default_factory=dict)
    Lambda: Dict[int, np.ndarray] = Field(default_factory=dict)
    Omega: Dict[int, np.ndarray] = Field(default_factory=dict)
    Var_g: Dict[int, np.ndarray] = Field(default_factory=dict)
    cov_g: Dict[Pair, np.ndarray] = Field(default_factory=dict)
    cov_theta: Dict[Pair, np.ndarray] = Field(default_factory=dict)


class EmpiricalMoments(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    N: int
    rounds: Dict[int, RoundMoments]
    seeds: List[ReplicaSeeds]

    def at(self, t: int) -> RoundMoments:
        if t not in self.rounds:
            raise ValidationError(f"Round {t} was not logged", {"round": t})
        return self.rounds[t]

    def to_frame(self) -> pd.DataFrame:
        """Trace columns in the covariance-engine schema, one row per logged round >= 1."""
        rows = []
        for t in sorted(self.rounds):
            if t == 0:
                continue
            r = self.rounds[t]
            row = {"round": t}
            row.update({f"tr_sigma_A_{pair_label(*k)}": trace(v) for k, v in sorted(r.Sigma_A.items())})
            for m in sorted(r.Sigma_theta):
                row[f"tr_sigma_theta_{client_label(m)}"] = trace(r.Sigma_theta[m])
                row[f"tr_sigma_h_{client_label(m)}"] = trace(r.Sigma_h[m])
                row[f"tr_var_g_{client_label(m)}"] = trace(r.Var_g[m])
            rows.append(row)
        return pd.DataFrame(rows)

    def cross_frame(self) -> pd.DataFrame:
        """Frobenius norms of Gamma, Psi, Lambda, Omega in the tracker's cross-row schema."""
        rows = []
        for t in sorted(self.rounds):
            if t == 0:
                continue
            r = self.rounds[t]
            row = {"round": t}
            for k in sorted(r.Sigma_A):
                row[f"fro_gamma_{pair_label(*k)}"] = float(np.linalg.norm(r.Gamma[k]))
                row[f"fro_psi_{pair_label(*k)}"] = float(np.linalg.norm(r.Psi[k]))
            for m in sorted(r.Sigma_theta):
                row[f"fro_lambda_{client_label(m)}"] = float(np.linalg.norm(r.Lambda[m]))
                row[f"fro_omega_{client_label(m)}"] = float(np.linalg.norm(r.Omega[m]))
            rows.append(row)
        return pd.DataFrame(rows)


def empirical_cov(X: np.ndarray, Y: Optional[np.ndarray] = None) -> np.ndarray:
    """Cross-covariance of row samples X (N x a) and Y (N x b) with the N-1 estimator."""
    X = np.asarray(X, dtype=float)
    N = X.shape[0]
    if N < 2:
        raise ValidationError("Empirical covariance needs at least two samples")
    Xc = X - X.mean(axis=0)
    if Y is None:
        return symmetrize(Xc.T @ Xc / (N - 1))
    Yc = np.asarray(Y, dtype=float) - np.asarray(Y).mean(axis=0)
    return Xc.T @ Yc / (N - 1)


class _Snapshot(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    v: Dict[int, np.ndarray]
    a: Dict[Pair, np.ndarray]
    a_next: Dict[Pair, np.ndarray] = Field(default_factory=dict)
    h_a: Dict[int, np.ndarray] = Field(default_factory=dict)
    y: Dict[int, np.ndarray] = Field(default_factory=dict)
    g: Dict[int, np.ndarray] = Field(default_factory=dict)


class _Recorder:
    def __init__(self, stride: int):
        self.stride = stride
        self.snapshots: Dict[int, _Snapshot] = {}

    def __call__(self, record: RoundRecord):
        if (record.t - 1) % self.stride:
            return
        self.snapshots[record.t] = _Snapshot(
            v={m: vec(th) for m, th in enumerate(record.theta)},
            a={k: vec(A) for k, A in record.A_hat.items()},
            a_next={k: vec(A) for k, A in record.A_hat_next.items()},
            h_a=dict(enumerate(record.h_a)),
            y=dict(enumerate(record.y)),
            g=dict(enumerate(record.g)),
        )


def _sample_priors(idx: BlockIndex, config: EnsembleConfig, seed: int):
    rng = np.random.default_rng(seed)
    thetas = [
        np.sqrt(config.prior_sigma_theta) * rng.standard_normal((idx.p_dims[m], idx.d_dims[m]))
        for m in range(idx.M)
    ]
    A_hat0 = {
        (m, n): np.sqrt(config.prior_sigma_A) * rng.standard_normal((idx.p_dims[m], idx.p_dims[n]))
        for (m, n) in idx.pairs()
    }
    return thetas, A_hat0


def run_replica(
    world: BlockLtiSystem,
    config: EnsembleConfig,
    seeds: ReplicaSeeds,
    gains_K: Sequence[np.ndarray],
    trajectory: Optional[Trajectory] = None,
) -> Dict[int, _Snapshot]:
    idx = world.idx
    rates = config.rates
    thetas, A_hat0 = _sample_priors(idx, config, seeds.prior)
    clients: List[ClientNode] = [
        build_client(
            m, world.A_block(m, m), world.C_block(m), world.Q_block(m), world.R_block(m),
            theta0=thetas[m], eta1=rates.eta1, eta2=rates.eta2, lambda_c=rates.lambda_c, K=gains_K[m],
        )
        for m in range(idx.M)
    ]
    server = ServerModel.from_world(world, gamma=rates.gamma, lambda_s=rates.lambda_s, A_hat0=A_hat0)
    if trajectory is None:
        trajectory = simulate(world, config.T, seeds.data)
    recorder = _Recorder(config.stride)
    recorder.snapshots[0] = _Snapshot(v={m: vec(th) for m, th in enumerate(thetas)}, a={k: vec(A) for k, A in A_hat0.items()})
    try:
        run_federated(
            world, trajectory, clients, server, config.T, dp=config.dp, hooks=[recorder],
            dp_seed=seeds.dp, exact=config.exact, stride=config.stride,
        )
    except ProtocolError as e:
        raise NumericalError(f"Replica with prior seed {seeds.prior} diverged: {e.message}", {"seed": seeds.prior}) from e
    return recorder.snapshots


def _stack(snapshots: Sequence[Dict[int, _Snapshot]], t: int, field: str, key) -> np.ndarray:
    return np.stack([getattr(s[t], field)[key] for s in snapshots])


def aggregate(snapshots: Sequence[Dict[int, _Snapshot]], idx: BlockIndex) -> Dict[int, RoundMoments]:
    """Deterministic reduction over replicas in index order."""
    rounds = {}
    for t in sorted(snapshots[0]):
        S = lambda field, key: _stack(snapshots, t, field, key)
        r = RoundMoments()
        for k in idx.pairs():
            a = S("a", k)
            r.Sigma_A[k] = empirical_cov(a)
            r.mu_A[k] = a.mean(axis=0).reshape((idx.p_dims[k[0]], idx.p_dims[k[1]]), order="F")
            r.Psi[k] = empirical_cov(a, S("v", k[0]))
            r.cov_theta[k] = empirical_cov(S("v", k[0]), S("v", k[1]))
        for m in range(idx.M):
            r.Sigma_theta[m] = empirical_cov(S("v", m))
        if t > 0:
            for k in idx.pairs():
                a, h = S("a", k), S("h_a", k[0])
                r.Gamma[k] = empirical_cov(a, h)
                r.Gamma_shift[k] = empirical_cov(S("a_next", k), h)
                r.cov_g[k] = empirical_cov(S("g", k[0]), S("g", k[1]))
            for m in range(idx.M):
                v, h, y = S("v", m), S("h_a", m), S("y", m)
                r.Sigma_h[m] = empirical_cov(h)
                r.Lambda[m] = empirical_cov(v, h)
                r.Omega[m] = empirical_cov(v, y)
                r.Var_g[m] = empirical_cov(S("g", m))
        rounds[t] = r
    return rounds


async def run_ensemble_async(world: BlockLtiSystem, config: EnsembleConfig) -> EmpiricalMoments:
    if config.sigma_y_scale is not None:
        world = world.with_noise_scale(config.sigma_y_scale)
    idx = world.idx
    seeds = replica_seeds(config.base_seed, config.N, config.identical_seeds)
    gains_K = [kalman_gain(world.A_block(m, m), world.C_block(m), world.Q_block(m), world.R_block(m)) for m in range(idx.M)]
    shared = simulate(world, config.T, config.data_seed) if config.data_mode == "shared" else None
    semaphore = asyncio.Semaphore(max(1, config.max_concurrency))

    async def one(s: ReplicaSeeds):
        async with semaphore:
            return await asyncio.to_thread(run_replica, world, config, s, gains_K, shared)

    logger.info(f"Running {config.N} replicas ({config.data_mode} data, T={config.T})")
    snapshots = await asyncio.gather(*(one(s) for s in seeds))
    return EmpiricalMoments(N=config.N, rounds=aggregate(snapshots, idx), seeds=seeds)


def run_ensemble(world: BlockLtiSystem, config: EnsembleConfig) -> EmpiricalMoments:
    return asyncio.run(run_ensemble_async(world, config))


def error_curves(moments: EmpiricalMoments, truth_A: Dict[Pair, np.ndarray]) -> pd.DataFrame:
    """||mu_hat_A_mn - A_mn|| (Frobenius) per logged round, one column per pair."""
    rows = []
    for t in sorted(moments.rounds):
        r = moments.rounds[t]
        row = {"round": t}
        for k, mu in sorted(r.mu_A.items()):
            if k not in truth_A:
                raise ValidationError(f"No ground truth for pair {pair_label(*k)}")
            row[f"err_A_{pair_label(*k)}"] = float(np.linalg.norm(mu - np.atleast_2d(truth_A[k])))
        rows.append(row)
    return pd.DataFrame(rows)
