"""
Turns a finished experiment directory into plot-data files and a summary.

Every curve becomes a two-column CSV (x, y) under plots/. summary.json holds
the final values per point and a pass/fail table of the study checks.
"""
import logging
import math
import os
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
import regex as re

from src.errors import ReportError
from src.features.artifact_store import read_json, write_csv, write_json

logger = logging.getLogger("ReportBuilder")

PAIR_COLUMN = re.compile(r"^(?P<quantity>tr_sigma_A|err_A)_(?P<m>\d+)_(?P<n>\d+)$")
CLIENT_COLUMN = re.compile(r"^(?P<quantity>tr_sigma_theta|tr_sigma_h|tr_var_g|loss_local)_(?P<m>\d+)$")

PRIOR_SPREAD_TOL = 0.10
SCALABILITY_BAND = (0.1, 10.0)
SMALL_PRIOR_CEILING = 1e-3
MONOTONE_RTOL = 1e-9
ORACLE_RTOL = 0.25
ORACLE_BURN_IN = 200
ORACLE_FLOOR = 1e-12
ORACLE_COLUMN = re.compile(r"^(tr_sigma_A|tr_sigma_theta|tr_sigma_h|tr_var_g|fro_gamma|fro_psi|fro_lambda|fro_omega)_")


def curve_columns(columns: List[str]) -> List[str]:
    """Columns that form a per-round curve, in file order."""
    keep = []
    for col in columns:
        if col == "loss_server" or PAIR_COLUMN.match(col) or CLIENT_COLUMN.match(col):
            keep.append(col)
    return keep


def pair_columns(columns: List[str], quantity: str) -> List[str]:
    return [c for c in columns if (m := PAIR_COLUMN.match(c)) and m.group("quantity") == quantity]


def expected_files(point: Dict[str, Any], ensemble_N: int) -> List[str]:
    if point["axis"] == "baseline" and point["value"] == "centralized":
        return ["baseline.json"]
    files = ["run_log.csv", "cross_covariance.csv"]
    if point["axis"] == "baseline":
        files.append("baseline.json")
    elif ensemble_N > 0:
        files.append("ensemble_log.csv")
    if point["steady_status"] != "skipped":
        files.append("steady.json")
    return files


def _check(name: str, status: str, detail: str) -> Dict[str, str]:
    return {"check": name, "status": status, "detail": detail}


def _finals(frames: Dict[str, pd.DataFrame], quantity: str) -> Dict[str, Dict[str, float]]:
    return {
        label: {c: float(df[c].iloc[-1]) for c in pair_columns(list(df.columns), quantity)}
        for label, df in frames.items()
    }


def check_row_counts(frames: Dict[str, pd.DataFrame], T: int, stride: int) -> Dict[str, str]:
    expected = math.ceil(T / stride)
    bad = {label: len(df) for label, df in frames.items() if len(df) != expected}
    if bad:
        return _check("row_counts", "fail", f"expected {expected} rows, got {bad}")
    return _check("row_counts", "pass", f"{len(frames)} run log(s) with {expected} rows")


def check_finite(frames: Dict[str, pd.DataFrame]) -> Dict[str, str]:
    bad = [
        label for label, df in frames.items()
        if not np.all(np.isfinite(df.select_dtypes(include=[np.number]).to_numpy(dtype=float)))
    ]
    if bad:
        return _check("finite_outputs", "fail", f"non-finite values in {bad}")
    return _check("finite_outputs", "pass", "all run logs finite")


def check_prior_independence(finals: Dict[str, Dict[str, float]]) -> Dict[str, str]:
    worst = 0.0
    for col in sorted(next(iter(finals.values()))):
        values = np.array([f[col] for f in finals.values()])
        spread = float((values.max() - values.min()) / abs(values.mean())) if values.mean() else 0.0
        worst = max(worst, spread)
    status = "pass" if worst <= PRIOR_SPREAD_TOL else "fail"
    return _check("prior_independence", status, f"largest relative spread {worst:.3e} (limit {PRIOR_SPREAD_TOL})")


def check_scalability(finals: Dict[str, Dict[str, float]], prior_sigma_A: float) -> Dict[str, str]:
    values = [v for f in finals.values() for v in f.values()]
    if prior_sigma_A >= SCALABILITY_BAND[0]:
        ok = all(SCALABILITY_BAND[0] <= v <= SCALABILITY_BAND[1] for v in values)
        detail = f"traces {min(values):.3e}..{max(values):.3e} within {SCALABILITY_BAND}"
    else:
        ok = all(v <= SMALL_PRIOR_CEILING for v in values)
        detail = f"largest trace {max(values):.3e} <= {SMALL_PRIOR_CEILING}"
    return _check("scalability_order", "pass" if ok else "fail", detail)


def check_dp_monotone(finals: Dict[str, Dict[str, float]], sigmas: Dict[str, float]) -> Dict[str, str]:
    order = sorted(finals, key=lambda label: sigmas[label])
    for col in sorted(finals[order[0]]):
        series = [finals[label][col] for label in order]
        for a, b in zip(series, series[1:]):
            if b < a - MONOTONE_RTOL * abs(a):
                return _check("dp_monotone", "fail", f"{col} decreases from {a:.6e} to {b:.6e}")
    return _check("dp_monotone", "pass", f"traces non-decreasing over {len(order)} sigma values")


def oracle_errors(predicted: pd.DataFrame, empirical: pd.DataFrame, burn_in: int = ORACLE_BURN_IN) -> Dict[str, float]:
    """
    Relative error of the closed-form curve against the ensemble curve, per shared
    column, on the mean over rounds after burn_in. Empty when no round is past it.
    """
    joined = predicted.merge(empirical, on="round", suffixes=("_pred", "_emp"))
    joined = joined[joined["round"] > burn_in]
    if joined.empty:
        return {}
    errors = {}
    for col in predicted.columns:
        if not ORACLE_COLUMN.match(col) or col not in empirical.columns:
            continue
        p, e = joined[f"{col}_pred"].mean(), joined[f"{col}_emp"].mean()
        errors[col] = float(abs(p - e) / max(abs(e), ORACLE_FLOOR))
    return errors


def check_oracle_agreement(
    predicted: Dict[str, pd.DataFrame],
    empirical: Dict[str, pd.DataFrame],
    burn_in: int = ORACLE_BURN_IN,
) -> Dict[str, str]:
    worst, where = 0.0, "-"
    compared = 0
    for label in sorted(set(predicted) & set(empirical)):
        errors = oracle_errors(predicted[label], empirical[label], burn_in)
        compared += bool(errors)
        for col, err in errors.items():
            if err > worst:
                worst, where = err, f"{label}:{col}"
    if not compared:
        return _check("oracle_agreement", "skipped", f"no logged round past the {burn_in}-round burn-in")
    status = "pass" if worst <= ORACLE_RTOL else "fail"
    return _check("oracle_agreement", status, f"largest relative error {worst:.3e} at {where} (limit {ORACLE_RTOL})")


def check_baseline_ordering(errors: Dict[str, Dict[str, float]]) -> Dict[str, str]:
    missing = [m for m in ("centralized", "federated", "independent") if m not in errors]
    if missing:
        return _check("baseline_ordering", "skipped", f"methods not run: {missing}")
    # pairs with a non-zero true block: independent clients never move Ahat off zero
    pairs = [k for k, v in errors["independent"].items() if v > 0.0]
    for k in pairs:
        c, f, i = errors["centralized"][k], errors["federated"][k], errors["independent"][k]
        if not c <= f < i:
            return _check("baseline_ordering", "fail", f"{k}: centralized {c:.4e}, federated {f:.4e}, independent {i:.4e}")
    return _check("baseline_ordering", "pass", f"centralized <= federated < independent on {pairs}")


def _write_curves(frame: pd.DataFrame, x: str, directory: str, prefix: str = "") -> List[str]:
    written = []
    for col in curve_columns(list(frame.columns)):
        name = f"{prefix}{col}.csv"
        write_csv(os.path.join(directory, name), frame[[x, col]])
        written.append(name)
    return written


def report(artifact_dir: str, out: Optional[str] = None) -> Dict[str, Any]:
    """
    Reads manifest.json and every point's artifacts under artifact_dir and
    writes plots/ plus summary.json (into `out`, default artifact_dir).
    """
    if not os.path.isdir(artifact_dir) or not os.listdir(artifact_dir):
        raise ReportError(f"Artifact directory is missing or empty: {artifact_dir}", {"missing": ["manifest.json"]})
    manifest_path = os.path.join(artifact_dir, "manifest.json")
    if not os.path.exists(manifest_path):
        raise ReportError(f"No manifest.json in {artifact_dir}", {"missing": ["manifest.json"]})
    manifest = read_json(manifest_path)
    config = manifest["config"]
    out = out or artifact_dir
    ensemble_N = config["ensemble"]["N"]
    axis = config["sweep"]["axis"]

    completed = [p for p in manifest["points"] if p["state"] == "COMPLETED"]
    missing = [
        os.path.join("points", p["label"], name)
        for p in completed
        for name in expected_files(p, ensemble_N)
        if not os.path.exists(os.path.join(artifact_dir, "points", p["label"], name))
    ]
    if missing:
        raise ReportError(f"Missing artifacts: {missing}", {"missing": missing})

    frames: Dict[str, pd.DataFrame] = {}
    predicted: Dict[str, pd.DataFrame] = {}
    ensembles: Dict[str, pd.DataFrame] = {}
    values: Dict[str, Any] = {}
    baselines: Dict[str, Dict[str, float]] = {}
    steady: Dict[str, Dict[str, Any]] = {}
    for p in completed:
        label, directory = p["label"], os.path.join(artifact_dir, "points", p["label"])
        values[label] = p["value"]
        run_log = os.path.join(directory, "run_log.csv")
        if os.path.exists(run_log):
            frames[label] = pd.read_csv(run_log)
            cross = os.path.join(directory, "cross_covariance.csv")
            if os.path.exists(cross):
                predicted[label] = frames[label].merge(pd.read_csv(cross), on="round")
        ens = os.path.join(directory, "ensemble_log.csv")
        if os.path.exists(ens):
            ensembles[label] = pd.read_csv(ens)
        if os.path.exists(os.path.join(directory, "baseline.json")):
            b = read_json(os.path.join(directory, "baseline.json"))
            baselines[b["method"]] = b["err_A"]
        if os.path.exists(os.path.join(directory, "steady.json")):
            steady[label] = read_json(os.path.join(directory, "steady.json"))

    plot_files: Dict[str, List[str]] = {}
    for label, df in frames.items():
        plot_dir = os.path.join(out, "plots", label)
        plot_files[label] = _write_curves(df, "round", plot_dir)
        if label in ensembles:
            plot_files[label] += _write_curves(ensembles[label], "round", plot_dir, prefix="ensemble_")

    finals = _finals(frames, "tr_sigma_A")
    numeric_axis = axis != "baseline"
    if numeric_axis and finals:
        sweep_dir = os.path.join(out, "plots", "sweep")
        for col in sorted(next(iter(finals.values()))):
            curve = pd.DataFrame(
                [(float(values[label]), finals[label][col]) for label in sorted(finals, key=lambda l: float(values[l]))],
                columns=[axis, f"final_{col}"],
            )
            write_csv(os.path.join(sweep_dir, f"final_{col}.csv"), curve)

    checks = []
    if frames:
        checks.append(check_row_counts(frames, config["T"], config["stride"]))
        checks.append(check_finite(frames))
    if ensembles:
        checks.append(check_oracle_agreement(predicted, ensembles))
    if axis == "prior_sigma_A" and len(finals) > 1:
        checks.append(check_prior_independence(finals))
    if axis == "d_m" and finals:
        checks.append(check_scalability(finals, config["prior_sigma_A"]))
    if axis == "dp_sigma" and len(finals) > 1:
        checks.append(check_dp_monotone(finals, {k: float(v) for k, v in values.items()}))
    if axis == "baseline":
        checks.append(check_baseline_ordering(baselines))
    failed_points = [p["label"] for p in manifest["points"] if p["state"] != "COMPLETED"]
    checks.append(_check(
        "points_completed", "fail" if failed_points else "pass",
        f"failed: {failed_points}" if failed_points else f"{len(completed)} point(s) completed",
    ))
    unsolved = [p["label"] for p in completed if p["steady_status"] == "failed"]
    if any(p["steady_status"] != "skipped" for p in completed):
        checks.append(_check(
            "steady_solved", "fail" if unsolved else "pass",
            f"unstable or unconverged: {unsolved}" if unsolved else "all steady solves converged",
        ))

    summary = {
        "name": manifest["name"],
        "config_sha256": manifest["config_sha256"],
        "axis": axis,
        "points": {
            label: {
                "value": values[label],
                "final_tr_sigma_A": finals.get(label, {}),
                "final_err_A": _finals({label: frames[label]}, "err_A")[label] if label in frames else {},
                "steady_trace_sigma_A": steady.get(label, {}).get("trace_sigma_A", {}),
                "plots": plot_files.get(label, []),
            }
            for label in sorted(values)
        },
        "baselines": baselines,
        "checks": checks,
        "passed": all(c["status"] != "fail" for c in checks),
    }
    write_json(os.path.join(out, "summary.json"), summary)
    logger.info(f"Report for '{manifest['name']}': {sum(c['status'] == 'pass' for c in checks)}/{len(checks)} checks passed")
    return summary


def summary_table(summary: Dict[str, Any]) -> List[Tuple[str, str, str]]:
    return [(c["check"], c["status"], c["detail"]) for c in summary["checks"]]
