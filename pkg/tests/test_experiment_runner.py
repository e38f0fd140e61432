import math
import os

import pandas as pd
import pytest

import src.features.experiment_runner as runner_module
from src.errors import EXIT_NUMERICAL, EXIT_OK, EXIT_VALIDATION, NumericalError, StabilityError, StateError, ValidationError
from src.features.artifact_store import read_json, run_log_columns
from src.features.experiment_config import load_config, parse_config, sweep_points
from src.features.report_builder import report
from src.features.experiment_runner import (
    ExperimentRunner,
    PointContext,
    PointState,
    dp_sweep,
    resolve_point,
    run_experiment_async,
)

CONFIG_DIR = os.path.join(os.path.dirname(__file__), "..", "configs")


def _config(**overrides):
    data = {
        "name": "unit",
        "system": {"kind": "two_client_benchmark", "d_m": 4},
        "T": 40,
        "stride": 10,
        "seed": 3,
        "prior_sigma_A": 0.01,
        "prior_sigma_theta": 0.01,
        "ensemble": {"N": 4, "max_concurrency": 2},
        "sweep": {"axis": "sigma_y_scale", "values": [0.5, 1.0]},
    }
    data.update(overrides)
    return parse_config(data)


def _tree(root):
    files = {}
    for base, _, names in os.walk(root):
        for name in names:
            path = os.path.join(base, name)
            with open(path, "rb") as f:
                files[os.path.relpath(path, root)] = f.read()
    return files


@pytest.mark.asyncio
async def test_points_complete_and_write_artifacts(tmp_path):
    result = await run_experiment_async(_config(), out=str(tmp_path))
    assert result.exit_code == EXIT_OK
    assert [p.state for p in result.points] == [PointState.COMPLETED] * 2
    point_dir = os.path.join(result.directory, "points", "000_sigma_y_scale_0.5")
    for name in ("run_log.csv", "cross_covariance.csv", "ensemble_log.csv", "steady.json"):
        assert os.path.exists(os.path.join(point_dir, name)), name

    run_log = pd.read_csv(os.path.join(point_dir, "run_log.csv"))
    assert len(run_log) == math.ceil(40 / 10)
    assert list(run_log.columns) == run_log_columns(2, [(0, 1), (1, 0)])
    assert list(run_log["round"]) == [1, 11, 21, 31]
    assert len(pd.read_csv(os.path.join(point_dir, "ensemble_log.csv"))) == 4

    manifest = read_json(os.path.join(result.directory, "manifest.json"))
    assert manifest["seeds"] == {"seed": 3, "data_seed": 3, "ensemble_base_seed": 4, "dp_seed": 5}
    assert [p["state"] for p in manifest["points"]] == ["COMPLETED", "COMPLETED"]
    assert "duration" not in str(manifest)


@pytest.mark.asyncio
async def test_rerun_is_byte_identical(tmp_path):
    cfg = _config()
    await run_experiment_async(cfg, out=str(tmp_path / "a"))
    await run_experiment_async(cfg, out=str(tmp_path / "b"), threads=1)
    a, b = _tree(tmp_path / "a"), _tree(tmp_path / "b")
    assert a.keys() == b.keys()
    assert all(a[k] == b[k] for k in a)


@pytest.mark.asyncio
async def test_sweep_points_are_isolated(tmp_path):
    await run_experiment_async(_config(), out=str(tmp_path / "a"))
    await run_experiment_async(_config(sweep={"axis": "sigma_y_scale", "values": [0.5, 2.0]}), out=str(tmp_path / "b"))
    prefix = os.path.join("points", "000_sigma_y_scale_0.5")
    a = {k: v for k, v in _tree(tmp_path / "a").items() if k.startswith(prefix)}
    b = {k: v for k, v in _tree(tmp_path / "b").items() if k.startswith(prefix)}
    assert a and a == b


@pytest.mark.asyncio
async def test_steady_failure_is_recorded_not_fatal(tmp_path, monkeypatch):
    def unstable(inputs):
        raise StabilityError("rho(D) = 1.2 >= 1", {"rho": 1.2})

    monkeypatch.setattr(runner_module, "solve_joint", unstable)
    result = await run_experiment_async(_config(ensemble={"N": 0}), out=str(tmp_path))
    assert result.exit_code == EXIT_OK
    ctx = result.points[0]
    assert ctx.state == PointState.COMPLETED and ctx.steady_status == "failed"
    assert ctx.error_trace[0]["severity"] == "WARNING"
    steady = read_json(os.path.join(ctx.directory, "steady.json"))
    assert steady["status"] == "failed" and steady["errors"][0]["type"] == "StabilityError"


@pytest.mark.asyncio
async def test_invalid_system_fails_with_validation_exit(tmp_path):
    result = await run_experiment_async(
        _config(system={"kind": "scalar_benchmark", "q": -1.0}, ensemble={"N": 0}), out=str(tmp_path),
    )
    assert all(p.state == PointState.FAILED for p in result.points)
    assert result.exit_code == EXIT_VALIDATION
    manifest = read_json(os.path.join(result.directory, "manifest.json"))
    assert manifest["points"][0]["errors"][0]["type"] == "ValidationError"


@pytest.mark.asyncio
async def test_numerical_failure_exit_code(tmp_path, monkeypatch):
    def broken(*args, **kwargs):
        raise NumericalError("non-finite trajectory")

    monkeypatch.setattr(runner_module, "simulate", broken)
    result = await run_experiment_async(_config(ensemble={"N": 0}, steady=False), out=str(tmp_path))
    assert result.exit_code == EXIT_NUMERICAL
    assert result.points[0].error_trace[0]["type"] == "NumericalError"


def test_illegal_transition_raises():
    cfg = _config()
    runner = ExperimentRunner(cfg, out="unused")
    ctx = PointContext(point=sweep_points(cfg)[0], config=cfg, directory="unused")
    with pytest.raises(StateError) as exc:
        runner._update_state(ctx, PointState.COMPLETED)
    assert exc.value.context == {"current_state": "IDLE", "target_state": "COMPLETED"}


def test_runner_rejects_bad_thread_count():
    with pytest.raises(ValidationError):
        ExperimentRunner(_config(), threads=0)


def test_resolve_point_pins_the_axis():
    cfg = _config(sweep={"axis": "d_m", "values": [4, 6]})
    pinned = resolve_point(cfg, sweep_points(cfg)[1])
    assert pinned.system.d_m == 6 and cfg.system.d_m == 4
    prior = _config(sweep={"axis": "prior_sigma_A", "values": [0.5]})
    assert resolve_point(prior, sweep_points(prior)[0]).prior_sigma_A == 0.5


@pytest.mark.asyncio
async def test_limiting_mode_and_chain_systems(tmp_path):
    cfg = _config(
        tracker_mode="limiting", ensemble={"N": 0}, system={"kind": "chain_benchmark", "d_m": 2},
        sweep={"axis": "M", "values": [3]},
    )
    result = await run_experiment_async(cfg, out=str(tmp_path))
    assert result.exit_code == EXIT_OK
    run_log = pd.read_csv(os.path.join(result.points[0].directory, "run_log.csv"))
    assert "tr_sigma_A_3_2" in run_log.columns and len(run_log) == 4


@pytest.mark.asyncio
async def test_baseline_sweep_writes_method_summaries(tmp_path):
    cfg = _config(
        system={"kind": "scalar_benchmark", "offset": 0.0}, rates={"lambda_s": 0.0, "lambda_c": 0.0},
        T=200, tracker_mode="realized", ensemble={"N": 0}, steady=False,
        sweep={"axis": "baseline", "values": ["centralized", "federated", "independent"]},
    )
    result = await run_experiment_async(cfg, out=str(tmp_path))
    assert result.exit_code == EXIT_OK
    central, federated, alone = result.points
    assert central.artifacts == ["baseline.json"]
    assert "run_log.csv" in federated.artifacts
    summary = read_json(os.path.join(alone.directory, "baseline.json"))
    assert summary["method"] == "independent"
    assert summary["err_A"]["err_A_2_1"] == pytest.approx(0.3)


def test_dp_sweep_zero_sigma_matches_plain_run(tmp_path):
    common = dict(tracker_mode="realized", ensemble={"N": 0}, steady=False, dp_direction="both")
    path = dp_sweep(_config(sweep={"axis": "dp_sigma", "values": [0.0, 0.01, 0.1]}, **common), out=str(tmp_path / "dp"))
    frame = pd.read_csv(path)
    assert list(frame["sigma"]) == [0.0, 0.01, 0.1]
    assert list(frame["direction"]) == ["both"] * 3
    for col in ("tr_sigma_A_1_2", "tr_sigma_A_2_1"):
        assert frame[col].is_monotonic_increasing

    plain = runner_module.run_experiment(_config(sweep={"axis": "sigma_y_scale", "values": [1.0]}, **common), out=str(tmp_path / "plain"))
    final = plain.points[0].tracker.rows[-1]
    assert frame.loc[0, "tr_sigma_A_2_1"] == pytest.approx(final["tr_sigma_A_2_1"], rel=1e-15)


def test_dp_sweep_needs_dp_axis(tmp_path):
    with pytest.raises(ValidationError):
        dp_sweep(_config(), out=str(tmp_path))


def test_epistemic_sweep_forgets_the_server_prior(tmp_path):
    data = load_config(os.path.join(CONFIG_DIR, "epistemic.json")).model_dump(mode="json")
    data.update(T=1000, stride=100, steady=False, ensemble={"N": 0})
    cfg = parse_config(data)
    result = runner_module.run_experiment(cfg, out=str(tmp_path))
    assert result.exit_code == EXIT_OK
    finals = []
    for point in result.points:
        run_log = pd.read_csv(os.path.join(point.directory, "run_log.csv"))
        assert run_log["round"].iloc[-1] == 901
        finals.append(run_log["tr_sigma_A_2_1"].iloc[-1])
    assert len(finals) == 4 and min(finals) > 0.0
    assert (max(finals) - min(finals)) / (sum(finals) / len(finals)) <= 0.10

    summary = report(result.directory, out=str(tmp_path / "report"))
    check = next(c for c in summary["checks"] if c["check"] == "prior_independence")
    assert check["status"] == "pass"


@pytest.mark.parametrize("prior, band", [(1.0, (0.1, 10.0)), (1e-6, (0.0, 1e-3))], ids=["order_one", "small"])
def test_scalability_traces_keep_their_order_of_magnitude(tmp_path, prior, band):
    data = load_config(os.path.join(CONFIG_DIR, "scalability.json")).model_dump(mode="json")
    data.update(prior_sigma_A=prior, prior_sigma_theta=prior, sweep={"axis": "d_m", "values": [16, 32]})
    result = runner_module.run_experiment(parse_config(data), out=str(tmp_path))
    assert result.exit_code == EXIT_OK
    for point in result.points:
        final = pd.read_csv(os.path.join(point.directory, "run_log.csv")).iloc[-1]
        for col in ("tr_sigma_A_1_2", "tr_sigma_A_2_1"):
            assert band[0] <= final[col] <= band[1], (point.label, col, final[col])
    summary = report(result.directory, out=str(tmp_path / "report"))
    check = next(c for c in summary["checks"] if c["check"] == "scalability_order")
    assert check["status"] == "pass"
