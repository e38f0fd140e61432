import json
import logging
import os
import tempfile
from typing import Any, List, Sequence

import numpy as np
import pandas as pd
from tenacity import (
    before_sleep_log,
    retry,
    retry_if_exception_type,
    stop_after_attempt,
    wait_exponential,
)

from src.errors import NumericalError
from src.matrix_kernels import client_label, pair_label

logger = logging.getLogger("ArtifactStore")

FLOAT_FORMAT = "%.17g"


def _get_retry_decorator():
    return retry(
        reraise=True,
        stop=stop_after_attempt(3),
        wait=wait_exponential(multiplier=1, min=2, max=10),
        retry=retry_if_exception_type(OSError),
        before_sleep=before_sleep_log(logger, logging.WARNING),
    )


@_get_retry_decorator()
def atomic_write_bytes(path: str, data: bytes):
    """Writes through a temporary file in the target directory, then os.replace."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


def atomic_write_text(path: str, text: str):
    atomic_write_bytes(path, text.encode("utf-8"))


def _plain(obj: Any) -> Any:
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def dumps_json(obj: Any) -> str:
    return json.dumps(_plain(obj), sort_keys=True, indent=2, allow_nan=False) + "\n"


def write_json(path: str, obj: Any):
    try:
        text = dumps_json(obj)
    except ValueError as e:
        raise NumericalError(f"Refusing to write non-finite values to {path}", {"path": path}) from e
    atomic_write_text(path, text)


def frame_to_csv(df: pd.DataFrame) -> str:
    return df.to_csv(index=False, float_format=FLOAT_FORMAT, lineterminator="\n")


def write_csv(path: str, df: pd.DataFrame):
    numeric = df.select_dtypes(include=[np.number])
    if not np.all(np.isfinite(numeric.to_numpy(dtype=float))):
        bad = [c for c in numeric.columns if not np.all(np.isfinite(numeric[c].to_numpy(dtype=float)))]
        raise NumericalError(f"Non-finite values in {os.path.basename(path)}: {bad}", {"path": path, "columns": bad})
    atomic_write_text(path, frame_to_csv(df))


def read_json(path: str) -> Any:
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def run_log_columns(M: int, pairs: Sequence) -> List[str]:
    """round, per pair (tr_sigma_A, err_A), per client (tr_sigma_theta, tr_sigma_h, tr_var_g, loss_local), loss_server."""
    cols = ["round"]
    for m, n in pairs:
        cols += [f"tr_sigma_A_{pair_label(m, n)}", f"err_A_{pair_label(m, n)}"]
    for m in range(M):
        c = client_label(m)
        cols += [f"tr_sigma_theta_{c}", f"tr_sigma_h_{c}", f"tr_var_g_{c}", f"loss_local_{c}"]
    cols.append("loss_server")
    return cols
