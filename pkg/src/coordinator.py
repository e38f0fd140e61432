"""
FedGC server model, message protocol and the federated training loop.

Server residual for client m (same-round states):
    r_m = A_mm h_{m,a} - (A_mm h_{m,c} + sum_n Ahat_mn h_{n,c})
Server loss L_s = sum_m ||r_m||^2 + lambda_s sum ||Ahat_mn||_F^2, so
    g_m = dL_s/dh_{m,a} = 2 A_mm^T r_m
    Ahat_mn <- (1 - 2 gamma lambda_s) Ahat_mn + 2 gamma r_m h_{n,c}^T
"""
import logging
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, field_validator

from src.client_node import ClientNode
from src.errors import NUMERICAL_ERRORS, ProtocolError, ValidationError
from src.features.privacy import DpPolicy, GaussianMechanism
from src.lti_world import BlockLtiSystem, Trajectory
from src.matrix_kernels import BlockIndex, client_label, pair_label

logger = logging.getLogger("Coordinator")

Pair = Tuple[int, int]


class ServerModel(BaseModel):
    """Estimated off-diagonal blocks Ahat_mn plus the known diagonal blocks A_mm."""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    idx: BlockIndex
    A_diag: List[np.ndarray]
    A_hat: Dict[Pair, np.ndarray]
    gamma: float = 0.05
    lambda_s: float = 0.0

    @field_validator("gamma", "lambda_s")
    @classmethod
    def validate_rate(cls, v):
        if v < 0:
            raise ValueError(f"Server rate and ridge must be non-negative, got {v}")
        return float(v)

    @classmethod
    def from_world(
        cls,
        world: BlockLtiSystem,
        gamma: float = 0.05,
        lambda_s: float = 0.0,
        A_hat0: Optional[Dict[Pair, np.ndarray]] = None,
    ) -> "ServerModel":
        idx = world.idx
        A_hat = {
            (m, n): np.zeros((idx.p_dims[m], idx.p_dims[n])) for (m, n) in idx.pairs()
        }
        if A_hat0:
            A_hat.update({k: np.atleast_2d(np.asarray(v, dtype=float)) for k, v in A_hat0.items()})
        return cls(
            idx=idx,
            A_diag=[world.A_block(m, m) for m in range(idx.M)],
            A_hat=A_hat,
            gamma=gamma,
            lambda_s=lambda_s,
        )


class UpMessage(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    m: int
    h_c: np.ndarray
    h_a: np.ndarray


class DownMessage(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    m: int
    g: np.ndarray


def _by_client(server: ServerModel, messages: Sequence[Optional[UpMessage]], t: Optional[int] = None) -> List[UpMessage]:
    present = {msg.m: msg for msg in messages if msg is not None}
    for m in range(server.idx.M):
        if m not in present:
            raise ProtocolError(f"Missing up-message from client {m}", {"client": m, "round": t})
        p_m = server.idx.p_dims[m]
        msg = present[m]
        if msg.h_c.shape != (p_m,) or msg.h_a.shape != (p_m,):
            raise ProtocolError(
                f"Client {m} sent states of shape {msg.h_c.shape}/{msg.h_a.shape}, expected ({p_m},)",
                {"client": m, "round": t},
            )
    return [present[m] for m in range(server.idx.M)]


def server_prediction(server: ServerModel, H_c: Sequence[Optional[np.ndarray]]) -> List[np.ndarray]:
    """h_{m,s} = A_mm h_{m,c} + sum_n Ahat_mn h_{n,c}."""
    for m in range(server.idx.M):
        if m >= len(H_c) or H_c[m] is None:
            raise ProtocolError(f"Missing filtered state from client {m}", {"client": m})
    out = []
    for m in range(server.idx.M):
        h = server.A_diag[m] @ H_c[m]
        for n in range(server.idx.M):
            if n != m:
                h = h + server.A_hat[(m, n)] @ H_c[n]
        out.append(h)
    return out


def augmented_targets(server: ServerModel, H_a: Sequence[np.ndarray]) -> List[np.ndarray]:
    """A_mm h_{m,a}: the augmented one-step propagation the server prediction is scored against."""
    return [server.A_diag[m] @ H_a[m] for m in range(server.idx.M)]


def server_loss(server: ServerModel, H_a: Sequence[np.ndarray], H_s: Sequence[np.ndarray]) -> float:
    if len(H_a) != len(H_s):
        raise ValidationError(f"Loss inputs disagree: {len(H_a)} targets vs {len(H_s)} predictions")
    loss = 0.0
    for a, s in zip(H_a, H_s):
        r = np.asarray(a) - np.asarray(s)
        loss += float(r @ r)
    loss += server.lambda_s * sum(float(np.sum(B ** 2)) for B in server.A_hat.values())
    return loss


def _residuals(server: ServerModel, ups: List[UpMessage]) -> List[np.ndarray]:
    H_c = [u.h_c for u in ups]
    H_s = server_prediction(server, H_c)
    targets = augmented_targets(server, [u.h_a for u in ups])
    return [targets[m] - H_s[m] for m in range(server.idx.M)]


def server_gradient(server: ServerModel, up_messages: Sequence[UpMessage], m: int) -> DownMessage:
    ups = _by_client(server, up_messages)
    r = _residuals(server, ups)[m]
    return DownMessage(m=m, g=2.0 * server.A_diag[m].T @ r)


def server_update(server: ServerModel, up_messages: Sequence[UpMessage], exact: bool = True) -> ServerModel:
    """
    One gradient step on every Ahat_mn. With exact=False the cross-block terms
    Ahat_mp h_{p,c} (p != n) are dropped from the residual for pair (m, n).
    """
    ups = _by_client(server, up_messages)
    gamma, shrink = server.gamma, 1.0 - 2.0 * server.gamma * server.lambda_s
    if gamma == 0.0:
        return server
    residuals = _residuals(server, ups) if exact else None
    A_hat = {}
    for (m, n), Ahat in server.A_hat.items():
        if exact:
            r = residuals[m]
        else:
            r = server.A_diag[m] @ (ups[m].h_a - ups[m].h_c) - Ahat @ ups[n].h_c
        A_hat[(m, n)] = shrink * Ahat + 2.0 * gamma * np.outer(r, ups[n].h_c)
    return server.model_copy(update={"A_hat": A_hat})


def apply_dp(policy: DpPolicy, message, mechanism: GaussianMechanism):
    """Adds N(0, sigma^2) noise to the payload when the policy covers the message direction."""
    if isinstance(message, UpMessage):
        sigma = policy.up_sigma
        if sigma == 0.0:
            return message
        return UpMessage(m=message.m, h_c=mechanism.perturb(message.h_c, sigma), h_a=mechanism.perturb(message.h_a, sigma))
    if isinstance(message, DownMessage):
        sigma = policy.down_sigma
        if sigma == 0.0:
            return message
        return DownMessage(m=message.m, g=mechanism.perturb(message.g, sigma))
    raise ValidationError(f"apply_dp cannot handle {type(message).__name__}")


class RoundRecord(BaseModel):
    """Every intermediate quantity of one round, handed to hooks."""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    t: int
    y: List[np.ndarray]
    h_c: List[np.ndarray]
    h_a: List[np.ndarray]
    ups: List[UpMessage]
    theta: List[np.ndarray]
    A_hat: Dict[Pair, np.ndarray]
    A_hat_next: Dict[Pair, np.ndarray]
    g: List[np.ndarray]
    g_sent: List[np.ndarray]
    loss_local: List[float]
    loss_server: float
    delta_h_a: List[float]


Hook = Callable[[RoundRecord], None]


class RunLog(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    rows: List[Dict[str, float]] = Field(default_factory=list)
    clients: List[ClientNode] = Field(default_factory=list)
    server: Optional[ServerModel] = None
    rounds: int = 0

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows)


def error_row(server: ServerModel, world: BlockLtiSystem, A_hat: Optional[Dict[Pair, np.ndarray]] = None) -> Dict[str, float]:
    A_hat = A_hat if A_hat is not None else server.A_hat
    return {
        f"err_A_{pair_label(m, n)}": float(np.linalg.norm(A_hat[(m, n)] - world.A_block(m, n)))
        for (m, n) in server.idx.pairs()
    }


def run_federated(
    world: BlockLtiSystem,
    trajectory: Trajectory,
    clients: Sequence[ClientNode],
    server: ServerModel,
    T: int,
    dp: Optional[DpPolicy] = None,
    hooks: Sequence[Hook] = (),
    dp_seed: int = 0,
    exact: bool = True,
    server_enabled: bool = True,
    stride: int = 1,
) -> RunLog:
    """
    Round k = 1..T consumes y^k: clients update/filter/augment and send, the
    server answers with gradients computed on its pre-update blocks and then
    updates. Rows are logged on rounds k with (k - 1) % stride == 0.
    """
    idx = world.idx
    if len(clients) != idx.M:
        raise ProtocolError(f"Expected {idx.M} clients, got {len(clients)}")
    if T > trajectory.T:
        raise ValidationError(f"Trajectory holds {trajectory.T} rounds, {T} requested")
    if stride < 1:
        raise ValidationError(f"Logging stride must be >= 1, got {stride}")
    policy = dp or DpPolicy()
    mechanism = GaussianMechanism(dp_seed)
    log = RunLog(clients=list(clients), server=server)
    prev_h_a = [np.zeros(p_m) for p_m in idx.p_dims]

    for t in range(1, T + 1):
        ys = [trajectory.y[t, idx.slice_of(m, "d")] for m in range(idx.M)]
        try:
            steps = [clients[m].begin_round(ys[m]) for m in range(idx.M)]
        except NUMERICAL_ERRORS:
            raise
        except Exception as e:
            raise ProtocolError(f"Client step failed at round {t}: {e}", {"round": t}) from e
        ups = [apply_dp(policy, UpMessage(m=m, h_c=s.h_c, h_a=s.h_a), mechanism) for m, s in enumerate(steps)]
        ups = _by_client(server, ups, t)

        H_s = server_prediction(server, [u.h_c for u in ups])
        loss_s = server_loss(server, augmented_targets(server, [u.h_a for u in ups]), H_s)
        downs = [server_gradient(server, ups, m) for m in range(idx.M)]
        A_hat_now = server.A_hat
        if server_enabled:
            server = server_update(server, ups, exact=exact)
        sent = [apply_dp(policy, d, mechanism) for d in downs]
        for m in range(idx.M):
            if server_enabled:
                clients[m].receive(sent[m].g)

        delta = [float(np.linalg.norm(steps[m].h_a - prev_h_a[m])) for m in range(idx.M)]
        prev_h_a = [s.h_a for s in steps]
        logger.debug(f"round {t}: |dh_a| = {', '.join(f'{x:.3e}' for x in delta)}")

        if hooks:
            record = RoundRecord(
                t=t,
                y=ys,
                h_c=[s.h_c for s in steps],
                h_a=[s.h_a for s in steps],
                ups=ups,
                theta=[c.model.theta for c in clients],
                A_hat=A_hat_now,
                A_hat_next=server.A_hat,
                g=[d.g for d in downs],
                g_sent=[d.g for d in sent],
                loss_local=[c.last_loss for c in clients],
                loss_server=loss_s,
                delta_h_a=delta,
            )
            for hook in hooks:
                hook(record)

        if (t - 1) % stride == 0:
            row = {"round": t}
            row.update(error_row(server, world, A_hat_now))
            for m in range(idx.M):
                row[f"loss_local_{client_label(m)}"] = clients[m].last_loss
            row["loss_server"] = loss_s
            log.rows.append(row)

        if not all(np.all(np.isfinite(c.model.theta)) for c in clients):
            raise ProtocolError(f"Client parameters diverged at round {t}", {"round": t})

    log.server = server
    log.rounds = T
    return log


def baseline_centralized(trajectory: Trajectory, idx: BlockIndex) -> Dict[Pair, np.ndarray]:
    """Least-squares fit of h^t ~ A h^{t-1} on pooled latent states; returns the off-diagonal blocks."""
    X, Y = trajectory.h[:-1], trajectory.h[1:]
    if X.shape[0] < idx.p or np.linalg.matrix_rank(X) < idx.p:
        raise ValidationError(
            f"Centralized regressor is rank deficient ({X.shape[0]} samples for p={idx.p})",
            {"samples": X.shape[0], "p": idx.p},
        )
    At, *_ = np.linalg.lstsq(X, Y, rcond=None)
    A_est = At.T
    return {
        (m, n): A_est[idx.slice_of(m), idx.slice_of(n)].copy() for (m, n) in idx.pairs()
    }


def baseline_independent(
    world: BlockLtiSystem,
    trajectory: Trajectory,
    clients: Sequence[ClientNode],
    server: ServerModel,
    T: int,
    hooks: Sequence[Hook] = (),
    stride: int = 1,
) -> RunLog:
    """Clients learn alone: eta2 is forced to 0 and no server update is consumed."""
    for c in clients:
        c.model = c.model.model_copy(update={"eta2": 0.0})
    return run_federated(world, trajectory, clients, server, T, hooks=hooks, server_enabled=False, stride=stride)
