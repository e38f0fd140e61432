import numpy as np
import pandas as pd
import pytest

from src.errors import NumericalError
from src.features.artifact_store import read_json, run_log_columns, write_csv, write_json


def test_json_is_sorted_and_numpy_aware(tmp_path):
    path = tmp_path / "nested" / "out.json"
    write_json(str(path), {"b": np.float64(0.5), "a": np.arange(2), (1, 0): 3})
    text = path.read_text(encoding="utf-8")
    assert text.index('"a"') < text.index('"b"')
    assert read_json(str(path)) == {"a": [0, 1], "b": 0.5, "(1, 0)": 3}


def test_non_finite_values_are_refused(tmp_path):
    with pytest.raises(NumericalError):
        write_json(str(tmp_path / "x.json"), {"x": float("nan")})
    with pytest.raises(NumericalError) as exc:
        write_csv(str(tmp_path / "x.csv"), pd.DataFrame({"round": [1], "loss": [np.inf]}))
    assert exc.value.context["columns"] == ["loss"]
    assert not (tmp_path / "x.csv").exists()


def test_csv_floats_round_trip_exactly(tmp_path):
    values = [0.1, 1.0 / 3.0, 2.0 ** -40]
    path = tmp_path / "f.csv"
    write_csv(str(path), pd.DataFrame({"round": [1, 2, 3], "v": values}))
    assert list(pd.read_csv(path, float_precision="round_trip")["v"]) == values
    assert path.read_text(encoding="utf-8").startswith("round,v\n")


def test_run_log_column_order():
    assert run_log_columns(2, [(0, 1), (1, 0)]) == [
        "round",
        "tr_sigma_A_1_2", "err_A_1_2",
        "tr_sigma_A_2_1", "err_A_2_1",
        "tr_sigma_theta_1", "tr_sigma_h_1", "tr_var_g_1", "loss_local_1",
        "tr_sigma_theta_2", "tr_sigma_h_2", "tr_var_g_2", "loss_local_2",
        "loss_server",
    ]
