import asyncio
import enum
import json
import logging
import os
import sys
import time
from typing import Any, Dict, List, Optional, Set

import numpy as np
import pandas as pd
import pydantic
import scipy
from pydantic import BaseModel, ConfigDict, Field, ValidationError as PydanticValidationError

from src.client_node import ClientNode, build_client
from src.coordinator import (
    RoundRecord,
    RunLog,
    ServerModel,
    baseline_centralized,
    baseline_independent,
    run_federated,
)
from src.covariance_engine import CovarianceTracker, Rates, TrackerMode
from src.ensemble_oracle import EmpiricalMoments, EnsembleConfig, error_curves, run_ensemble_async
from src.errors import (
    ConvergenceError,
    DimensionError,
    EXIT_NUMERICAL,
    EXIT_OK,
    EXIT_VALIDATION,
    FedGCError,
    NumericalError,
    ProtocolError,
    StabilityError,
    StateError,
    ValidationError,
)
from src.features.artifact_store import run_log_columns, write_csv, write_json
from src.features.experiment_config import (
    CALIBRATED_DEFAULTS,
    ExperimentConfig,
    SweepPoint,
    SystemSpec,
    canonical_json,
    config_hash,
    sweep_points,
)
from src.features.privacy import DpPolicy
from src.lti_world import (
    BlockLtiSystem,
    Trajectory,
    make_chain_benchmark,
    make_scalar_benchmark,
    make_two_client_benchmark,
    simulate,
)
from src.matrix_kernels import BlockIndex, pair_label
from src.steady_state import SteadyInputs, SteadySolution, solve_joint

logging.basicConfig(
    level=logging.INFO,
    format='%(asctime)s [%(levelname)s] %(name)s: %(message)s',
    handlers=[logging.StreamHandler(sys.stdout)]
)
logger = logging.getLogger("ExperimentRunner")


class PointState(enum.Enum):
    """Lifecycle of one sweep point."""
    IDLE = "IDLE"
    VALIDATING = "VALIDATING"
    SIMULATING = "SIMULATING"
    TRAINING = "TRAINING"
    PROPAGATING = "PROPAGATING"
    ENSEMBLE = "ENSEMBLE"
    STEADY_SOLVE = "STEADY_SOLVE"
    WRITING = "WRITING"
    COMPLETED = "COMPLETED"
    FAILED = "FAILED"


VALID_TRANSITIONS: Dict[PointState, Set[PointState]] = {
    PointState.IDLE: {PointState.VALIDATING, PointState.FAILED},
    PointState.VALIDATING: {PointState.SIMULATING, PointState.FAILED},
    PointState.SIMULATING: {PointState.TRAINING, PointState.FAILED},
    # the centralized baseline has nothing to propagate
    PointState.TRAINING: {PointState.PROPAGATING, PointState.WRITING, PointState.FAILED},
    PointState.PROPAGATING: {PointState.ENSEMBLE, PointState.STEADY_SOLVE, PointState.WRITING, PointState.FAILED},
    PointState.ENSEMBLE: {PointState.STEADY_SOLVE, PointState.WRITING, PointState.FAILED},
    PointState.STEADY_SOLVE: {PointState.WRITING, PointState.FAILED},
    PointState.WRITING: {PointState.COMPLETED, PointState.FAILED},
    PointState.COMPLETED: set(),
    PointState.FAILED: set(),
}

DATA_SEED_OFFSET = 0
ENSEMBLE_SEED_OFFSET = 1
DP_SEED_OFFSET = 2


class PerformanceMetrics(BaseModel):
    """Wall-clock per phase. Logged only; never written to artifacts."""
    validation_ms: float = 0.0
    simulation_ms: float = 0.0
    training_ms: float = 0.0
    propagation_ms: float = 0.0
    ensemble_ms: float = 0.0
    steady_ms: float = 0.0
    writing_ms: float = 0.0
    total_duration_ms: float = 0.0


class PointContext(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    point: SweepPoint
    config: ExperimentConfig
    directory: str
    state: PointState = PointState.IDLE
    method: str = "federated"
    metrics: PerformanceMetrics = Field(default_factory=PerformanceMetrics)
    error_trace: List[Dict[str, Any]] = Field(default_factory=list)
    steady_status: str = "skipped"
    artifacts: List[str] = Field(default_factory=list)

    world: Optional[BlockLtiSystem] = None
    trajectory: Optional[Trajectory] = None
    clients: List[ClientNode] = Field(default_factory=list)
    records: List[RoundRecord] = Field(default_factory=list)
    train_log: Optional[RunLog] = None
    tracker: Optional[CovarianceTracker] = None
    ensemble: Optional[EmpiricalMoments] = None
    steady: Optional[SteadySolution] = None
    baseline_errors: Dict[str, float] = Field(default_factory=dict)

    @property
    def label(self) -> str:
        return self.point.label

    def status_row(self) -> Dict[str, Any]:
        return {
            "label": self.label,
            "axis": self.point.axis,
            "value": self.point.value,
            "state": self.state.name,
            "steady_status": self.steady_status,
            "artifacts": sorted(self.artifacts),
            "errors": [{"type": e["type"], "message": e["message"]} for e in self.error_trace],
        }


class ExperimentResult(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    directory: str
    config: ExperimentConfig
    points: List[PointContext]
    manifest: Dict[str, Any]

    @property
    def exit_code(self) -> int:
        failed = [p for p in self.points if p.state == PointState.FAILED]
        if not failed:
            return EXIT_OK
        kinds = {e["type"] for p in failed for e in p.error_trace}
        if kinds <= {"ValidationError", "DimensionError"}:
            return EXIT_VALIDATION
        return EXIT_NUMERICAL


def resolve_point(config: ExperimentConfig, point: SweepPoint) -> ExperimentConfig:
    """The experiment config with the sweep axis pinned to this point's value."""
    axis, value = point.axis, point.value
    if axis in ("d_m", "M"):
        return config.model_copy(update={"system": config.system.model_copy(update={axis: int(value)})})
    if axis == "baseline":
        return config
    return config.model_copy(update={axis: float(value)})


def build_world(system: SystemSpec, sigma_y_scale: float = 1.0) -> BlockLtiSystem:
    noise = {k: v for k, v in (("q", system.q), ("r", system.r)) if v is not None}
    try:
        if system.kind == "scalar_benchmark":
            world = make_scalar_benchmark(coupling=system.coupling, offset=system.offset, **noise)
        elif system.kind == "chain_benchmark" or system.M != 2:
            if system.kind not in ("chain_benchmark", "two_client_benchmark"):
                raise ValidationError(f"M={system.M} is only supported for benchmark systems")
            world = make_chain_benchmark(system.M, d_m=system.d_m, offset=system.offset, **noise)
        elif system.kind == "two_client_benchmark":
            world = make_two_client_benchmark(d_m=system.d_m, offset=system.offset, **noise)
        else:
            idx = BlockIndex(p_dims=system.p_dims, d_dims=system.d_dims)
            world = BlockLtiSystem(
                A=system.A, C=system.C, Q=system.Q, R=system.R, idx=idx,
                y_offset=system.offset * np.ones(idx.d),
            )
    except PydanticValidationError as e:
        raise ValidationError(f"Invalid system: {e}", {"kind": system.kind}) from e
    if sigma_y_scale != 1.0:
        world = world.with_noise_scale(sigma_y_scale)
    return world


def build_clients(world: BlockLtiSystem, rates: Rates) -> List[ClientNode]:
    return [
        build_client(
            m, world.A_block(m, m), world.C_block(m), world.Q_block(m), world.R_block(m),
            eta1=rates.eta1, eta2=rates.eta2, lambda_c=rates.lambda_c,
        )
        for m in range(world.idx.M)
    ]


def dp_policy(config: ExperimentConfig) -> DpPolicy:
    return DpPolicy(direction=config.dp_direction, sigma=config.dp_sigma)


class ExperimentRunner:
    """
    Runs every sweep point of an ExperimentConfig through the point pipeline,
    concurrently up to `threads`, and writes the artifact tree plus manifest.
    """

    def __init__(self, config: ExperimentConfig, out: Optional[str] = None, threads: int = 4):
        try:
            if threads < 1:
                raise ValidationError(f"threads must be >= 1, got {threads}")
            self.config = config
            self.threads = threads
            self.directory = os.path.join(out or config.output_dir, config.name)
            logger.info(f"ExperimentRunner ready: '{config.name}' sweeping {config.sweep.axis} over {len(config.sweep.values)} point(s)")
        except FedGCError:
            raise
        except Exception as e:
            logger.critical(f"Runner Bootstrap Failed: {e}")
            raise ValidationError("Failed to initialize ExperimentRunner.", {"original_error": str(e)})

    def _update_state(self, ctx: PointContext, target: PointState):
        if target not in VALID_TRANSITIONS.get(ctx.state, set()):
            msg = f"Illegal transition attempted: {ctx.state.name} -> {target.name}"
            logger.error(f"[{ctx.label}] {msg}")
            raise StateError(msg, {"current_state": ctx.state.name, "target_state": target.name})
        logger.debug(f"[{ctx.label}] State Transition: {ctx.state.name} -> {target.name}")
        ctx.state = target

    async def run(self) -> ExperimentResult:
        t_start = time.perf_counter()
        points = sweep_points(self.config)
        semaphore = asyncio.Semaphore(self.threads)

        async def guarded(point: SweepPoint) -> PointContext:
            async with semaphore:
                return await self.run_point(point)

        contexts = await asyncio.gather(*(guarded(p) for p in points))
        manifest = self.manifest(contexts)
        write_json(os.path.join(self.directory, "manifest.json"), manifest)
        failed = sum(c.state == PointState.FAILED for c in contexts)
        logger.info(
            f"Experiment '{self.config.name}' finished in {(time.perf_counter() - t_start) * 1000:.2f}ms: "
            f"{len(contexts) - failed} completed, {failed} failed"
        )
        return ExperimentResult(directory=self.directory, config=self.config, points=list(contexts), manifest=manifest)

    async def run_point(self, point: SweepPoint) -> PointContext:
        t_start = time.perf_counter()
        ctx = PointContext(
            point=point,
            config=self.config,
            directory=os.path.join(self.directory, "points", point.label),
            method=str(point.value) if point.axis == "baseline" else "federated",
        )
        try:
            self._update_state(ctx, PointState.VALIDATING)
            t0 = time.perf_counter()
            ctx.config = resolve_point(self.config, point)
            ctx.world = build_world(ctx.config.system, ctx.config.sigma_y_scale)
            ctx.metrics.validation_ms = (time.perf_counter() - t0) * 1000

            self._update_state(ctx, PointState.SIMULATING)
            t0 = time.perf_counter()
            ctx.trajectory = await asyncio.to_thread(simulate, ctx.world, ctx.config.T, ctx.config.seed + DATA_SEED_OFFSET)
            ctx.metrics.simulation_ms = (time.perf_counter() - t0) * 1000

            self._update_state(ctx, PointState.TRAINING)
            t0 = time.perf_counter()
            await asyncio.to_thread(self._train, ctx)
            ctx.metrics.training_ms = (time.perf_counter() - t0) * 1000

            if ctx.method != "centralized":
                self._update_state(ctx, PointState.PROPAGATING)
                t0 = time.perf_counter()
                await asyncio.to_thread(self._propagate, ctx)
                ctx.metrics.propagation_ms = (time.perf_counter() - t0) * 1000

                if ctx.config.ensemble.N > 0 and ctx.method == "federated":
                    self._update_state(ctx, PointState.ENSEMBLE)
                    t0 = time.perf_counter()
                    ctx.ensemble = await run_ensemble_async(ctx.world, self._ensemble_config(ctx.config))
                    ctx.metrics.ensemble_ms = (time.perf_counter() - t0) * 1000

                if ctx.config.steady and ctx.method == "federated":
                    self._update_state(ctx, PointState.STEADY_SOLVE)
                    t0 = time.perf_counter()
                    await asyncio.to_thread(self._solve_steady, ctx)
                    ctx.metrics.steady_ms = (time.perf_counter() - t0) * 1000

            self._update_state(ctx, PointState.WRITING)
            t0 = time.perf_counter()
            await asyncio.to_thread(self._write_artifacts, ctx)
            ctx.metrics.writing_ms = (time.perf_counter() - t0) * 1000

            self._update_state(ctx, PointState.COMPLETED)
        except (ValidationError, DimensionError, ProtocolError, NumericalError, StabilityError, ConvergenceError, StateError) as e:
            self._handle_failure(ctx, e)
        except Exception as e:
            logger.exception(f"[{ctx.label}] Unhandled pipeline exception")
            self._handle_failure(ctx, NumericalError(f"Internal failure: {e}"))
        finally:
            ctx.metrics.total_duration_ms = (time.perf_counter() - t_start) * 1000
            ctx.records = []
            logger.info(f"[{ctx.label}] Point finished in {ctx.metrics.total_duration_ms:.2f}ms with state: {ctx.state.name}")
        return ctx

    def _train(self, ctx: PointContext):
        cfg, world = ctx.config, ctx.world
        if ctx.method == "centralized":
            estimate = baseline_centralized(ctx.trajectory, world.idx)
            ctx.baseline_errors = {
                f"err_A_{pair_label(*k)}": float(np.linalg.norm(A - world.A_block(*k))) for k, A in sorted(estimate.items())
            }
            return
        ctx.clients = build_clients(world, cfg.rates)
        server = ServerModel.from_world(world, gamma=cfg.rates.gamma, lambda_s=cfg.rates.lambda_s)
        hooks = [ctx.records.append] if cfg.tracker_mode != TrackerMode.LIMITING.value else []
        if ctx.method == "independent":
            ctx.train_log = baseline_independent(world, ctx.trajectory, ctx.clients, server, cfg.T, hooks=hooks, stride=cfg.stride)
        else:
            ctx.train_log = run_federated(
                world, ctx.trajectory, ctx.clients, server, cfg.T, dp=dp_policy(cfg), hooks=hooks,
                dp_seed=cfg.seed + DP_SEED_OFFSET, exact=cfg.exact_server, stride=cfg.stride,
            )
        last = ctx.train_log.rows[-1] if ctx.train_log.rows else {}
        ctx.baseline_errors = {k: v for k, v in last.items() if k.startswith("err_A_")}

    def _tracker_rates(self, ctx: PointContext) -> Rates:
        if ctx.method == "independent":
            return ctx.config.rates.model_copy(update={"gamma": 0.0, "eta2": 0.0})
        return ctx.config.rates

    def _propagate(self, ctx: PointContext):
        cfg, world = ctx.config, ctx.world
        mode = TrackerMode(cfg.tracker_mode)
        rates = self._tracker_rates(ctx)
        dp = dp_policy(cfg) if ctx.method == "federated" else DpPolicy()
        kwargs: Dict[str, Any] = {}
        if mode != TrackerMode.REALIZED:
            if cfg.ewma_lam is not None and mode == TrackerMode.MOMENT:
                kwargs["ewma_lam"] = cfg.ewma_lam
            else:
                kwargs["moments"] = [world.client_moments(m) for m in range(world.idx.M)]
        if mode == TrackerMode.LIMITING:
            kwargs["limit_states"] = SteadyInputs.from_world(world, ctx.clients, rates, dp).h_limit
        tracker = CovarianceTracker(
            world.idx, rates,
            A_diag=[c.model.A_mm for c in ctx.clients],
            CA=[c.model.CA for c in ctx.clients],
            mode=mode,
            prior_sigma_A=cfg.prior_sigma_A,
            prior_sigma_theta=cfg.prior_sigma_theta,
            dp=dp,
            stride=cfg.stride,
            **kwargs,
        )
        if mode == TrackerMode.LIMITING:
            tracker.run_limiting(cfg.T)
        else:
            for record in ctx.records:
                tracker(record)
        ctx.tracker = tracker

    def _ensemble_config(self, cfg: ExperimentConfig) -> EnsembleConfig:
        return EnsembleConfig(
            N=cfg.ensemble.N,
            T=cfg.T,
            rates=cfg.rates,
            prior_sigma_A=cfg.prior_sigma_A,
            prior_sigma_theta=cfg.prior_sigma_theta,
            base_seed=cfg.seed + ENSEMBLE_SEED_OFFSET,
            data_seed=cfg.seed + DATA_SEED_OFFSET,
            stride=cfg.stride,
            data_mode=cfg.ensemble.data_mode,
            dp=dp_policy(cfg),
            exact=cfg.exact_server,
            max_concurrency=cfg.ensemble.max_concurrency,
        )

    def _solve_steady(self, ctx: PointContext):
        inputs = SteadyInputs.from_world(ctx.world, ctx.clients, ctx.config.rates, dp_policy(ctx.config))
        try:
            ctx.steady = solve_joint(inputs)
            ctx.steady_status = "ok"
            logger.info(f"[{ctx.label}] Steady state solved in {ctx.steady.iterations} iteration(s)")
        except (StabilityError, ConvergenceError) as e:
            ctx.steady_status = "failed"
            ctx.error_trace.append({
                "step": "steady_solve",
                "type": e.__class__.__name__,
                "message": str(e),
                "severity": "WARNING",
            })
            logger.warning(f"[{ctx.label}] Steady solve failed, continuing: {e}")

    def run_log_frame(self, ctx: PointContext) -> pd.DataFrame:
        train = ctx.train_log.to_frame()
        tracked = pd.DataFrame(ctx.tracker.rows)
        frame = train.merge(tracked, on="round", how="inner", validate="one_to_one")
        return frame[run_log_columns(ctx.world.idx.M, ctx.world.idx.pairs())]

    def _write_artifacts(self, ctx: PointContext):
        def emit(name: str, writer, payload):
            writer(os.path.join(ctx.directory, name), payload)
            ctx.artifacts.append(name)

        if ctx.point.axis == "baseline":
            summary: Dict[str, Any] = {"method": ctx.method, "err_A": dict(ctx.baseline_errors)}
            if ctx.tracker is not None and ctx.tracker.rows:
                summary["tr_sigma_A"] = {k: v for k, v in ctx.tracker.rows[-1].items() if k.startswith("tr_sigma_A_")}
            emit("baseline.json", write_json, summary)
        if ctx.method == "centralized":
            return
        emit("run_log.csv", write_csv, self.run_log_frame(ctx))
        emit("cross_covariance.csv", write_csv, pd.DataFrame(ctx.tracker.cross_rows))
        if ctx.ensemble is not None:
            traces = ctx.ensemble.to_frame().merge(ctx.ensemble.cross_frame(), on="round", validate="one_to_one")
            truth = {k: ctx.world.A_block(*k) for k in ctx.world.idx.pairs()}
            emit("ensemble_log.csv", write_csv, traces.merge(error_curves(ctx.ensemble, truth), on="round", how="inner"))
        if ctx.steady_status == "ok":
            emit("steady.json", write_json, {"status": "ok", **ctx.steady.to_report()})
        elif ctx.steady_status == "failed":
            emit("steady.json", write_json, {"status": "failed", "errors": ctx.status_row()["errors"]})

    def manifest(self, contexts: List[PointContext]) -> Dict[str, Any]:
        cfg = self.config
        return {
            "schema_version": cfg.schema_version,
            "name": cfg.name,
            "config_sha256": config_hash(cfg),
            "config": config_document(cfg),
            "seeds": {
                "seed": cfg.seed,
                "data_seed": cfg.seed + DATA_SEED_OFFSET,
                "ensemble_base_seed": cfg.seed + ENSEMBLE_SEED_OFFSET,
                "dp_seed": cfg.seed + DP_SEED_OFFSET,
            },
            "versions": {
                "numpy": np.__version__,
                "scipy": scipy.__version__,
                "pandas": pd.__version__,
                "pydantic": pydantic.VERSION,
            },
            "defaults": dict(CALIBRATED_DEFAULTS),
            "points": [c.status_row() for c in sorted(contexts, key=lambda c: c.point.index)],
        }

    def _handle_failure(self, ctx: PointContext, error: Exception):
        """Records the failure on the context. Never raises."""
        try:
            ctx.state = PointState.FAILED
            err_info = {
                "step": "pipeline",
                "type": error.__class__.__name__,
                "message": str(error),
                "context": {k: str(v) for k, v in getattr(error, "context", {}).items()},
            }
            ctx.error_trace.append(err_info)
            logger.error(f"[{ctx.label}] Point Failure: {err_info['message']}")
        except Exception as e:
            logger.critical(f"Failure handler crashed: {e}")


def config_document(config: ExperimentConfig) -> Dict[str, Any]:
    return json.loads(canonical_json(config))


async def run_experiment_async(config: ExperimentConfig, out: Optional[str] = None, threads: int = 4) -> ExperimentResult:
    return await ExperimentRunner(config, out=out, threads=threads).run()


def run_experiment(config: ExperimentConfig, out: Optional[str] = None, threads: int = 4) -> ExperimentResult:
    return asyncio.run(run_experiment_async(config, out=out, threads=threads))


def dp_sweep_frame(result: ExperimentResult) -> pd.DataFrame:
    """Final tracked and steady tr(Sigma_A), plus final error, per DP sigma."""
    rows = []
    for ctx in sorted(result.points, key=lambda c: c.point.index):
        if ctx.state != PointState.COMPLETED:
            raise NumericalError(f"DP sweep point {ctx.label} did not complete", {"point": ctx.label})
        row: Dict[str, Any] = {"sigma": float(ctx.point.value), "direction": ctx.config.dp_direction}
        row.update({k: v for k, v in ctx.tracker.rows[-1].items() if k.startswith("tr_sigma_A_")})
        if ctx.steady is not None:
            row.update({f"steady_tr_sigma_A_{k}": v for k, v in ctx.steady.to_report()["trace_sigma_A"].items()})
        row.update(ctx.baseline_errors)
        rows.append(row)
    return pd.DataFrame(rows)


def dp_sweep(config: ExperimentConfig, out: Optional[str] = None, threads: int = 4) -> str:
    """Runs a dp_sigma sweep and writes dp_sweep.csv next to the manifest."""
    if config.sweep.axis != "dp_sigma":
        raise ValidationError(f"dp_sweep needs a dp_sigma sweep, got '{config.sweep.axis}'")
    result = run_experiment(config, out=out, threads=threads)
    path = os.path.join(result.directory, "dp_sweep.csv")
    write_csv(path, dp_sweep_frame(result))
    return path
