import hashlib
import json
import logging
import os
from typing import Any, Dict, List, Literal, Optional, Union

from dotenv import load_dotenv
from pydantic import BaseModel, Field, ValidationError as PydanticValidationError, field_validator, model_validator

from src.covariance_engine import Rates
from src.errors import ValidationError

logger = logging.getLogger("ExperimentConfig")

SCHEMA_VERSION = 1
SEED_ENV_VAR = "FEDGC_SEED"

SweepAxis = Literal["sigma_y_scale", "prior_sigma_A", "prior_sigma_theta", "d_m", "M", "dp_sigma", "baseline"]
BASELINE_METHODS = ("centralized", "federated", "independent")

# Calibration defaults; recorded in every manifest.
CALIBRATED_DEFAULTS: Dict[str, float] = {
    "gamma": 0.05,
    "eta1": 0.01,
    "eta2": 0.01,
    "lambda_s": 0.1,
    "lambda_c": 0.1,
    "stride": 1,
    "offset": 0.5,
}


class SystemSpec(BaseModel):
    kind: Literal["two_client_benchmark", "scalar_benchmark", "chain_benchmark", "custom"] = "two_client_benchmark"
    d_m: int = 8
    M: int = 2
    q: Optional[float] = None
    r: Optional[float] = None
    offset: float = CALIBRATED_DEFAULTS["offset"]
    coupling: float = 0.3
    # custom systems only
    A: Optional[List[List[float]]] = None
    C: Optional[List[List[float]]] = None
    Q: Optional[List[List[float]]] = None
    R: Optional[List[List[float]]] = None
    p_dims: Optional[List[int]] = None
    d_dims: Optional[List[int]] = None

    @model_validator(mode="after")
    def validate_custom(self):
        if self.kind == "custom":
            missing = [k for k in ("A", "C", "Q", "R", "p_dims", "d_dims") if getattr(self, k) is None]
            if missing:
                raise ValueError(f"custom system is missing {missing}")
        if self.kind in ("two_client_benchmark", "chain_benchmark") and self.d_m < 2:
            raise ValueError(f"d_m must be >= 2, got {self.d_m}")
        if self.M < 2:
            raise ValueError(f"M must be >= 2, got {self.M}")
        return self


class SweepSpec(BaseModel):
    axis: SweepAxis
    values: List[Union[float, str]]

    @model_validator(mode="after")
    def validate_values(self):
        if not self.values:
            raise ValueError(f"Sweep over '{self.axis}' has no values")
        if self.axis == "baseline":
            bad = [v for v in self.values if v not in BASELINE_METHODS]
            if bad:
                raise ValueError(f"Unknown baseline methods {bad}; choose from {list(BASELINE_METHODS)}")
            return self
        if any(isinstance(v, str) for v in self.values):
            raise ValueError(f"Sweep over '{self.axis}' needs numeric values")
        if self.axis in ("d_m", "M"):
            low = 2
            if any(float(v) != int(v) or int(v) < low for v in self.values):
                raise ValueError(f"{self.axis} values must be integers >= {low}, got {self.values}")
            self.values = [int(v) for v in self.values]
        elif self.axis == "dp_sigma":
            if any(v < 0 for v in self.values):
                raise ValueError(f"dp_sigma values must be >= 0, got {self.values}")
        elif any(v <= 0 for v in self.values):
            raise ValueError(f"{self.axis} values must be positive, got {self.values}")
        return self


class EnsembleSpec(BaseModel):
    N: int = 0
    data_mode: Literal["shared", "fresh"] = "shared"
    max_concurrency: int = 8

    @field_validator("N")
    @classmethod
    def validate_n(cls, v):
        if v != 0 and v < 2:
            raise ValueError(f"Ensemble N must be 0 (disabled) or >= 2, got {v}")
        return v


class ExperimentConfig(BaseModel):
    """One experiment: a system, training constants and exactly one sweep axis."""
    schema_version: int = SCHEMA_VERSION
    name: str = "experiment"
    system: SystemSpec = Field(default_factory=SystemSpec)
    rates: Rates = Field(default_factory=Rates)
    T: int = 1000
    stride: int = int(CALIBRATED_DEFAULTS["stride"])
    seed: int = 0
    prior_sigma_A: float = 0.0
    prior_sigma_theta: float = 0.0
    sigma_y_scale: float = 1.0
    tracker_mode: Literal["realized", "moment", "limiting"] = "moment"
    ewma_lam: Optional[float] = None
    dp_direction: Literal["up", "down", "both"] = "both"
    dp_sigma: float = 0.0
    exact_server: bool = True
    ensemble: EnsembleSpec = Field(default_factory=EnsembleSpec)
    steady: bool = True
    sweep: SweepSpec
    output_dir: str = "results"

    @field_validator("schema_version")
    @classmethod
    def validate_schema(cls, v):
        if v != SCHEMA_VERSION:
            raise ValueError(f"Unsupported schema_version {v}; expected {SCHEMA_VERSION}")
        return v

    @field_validator("T", "stride")
    @classmethod
    def validate_positive_int(cls, v):
        if v < 1:
            raise ValueError(f"must be >= 1, got {v}")
        return v

    @field_validator("prior_sigma_A", "prior_sigma_theta", "dp_sigma")
    @classmethod
    def validate_non_negative(cls, v):
        if v < 0:
            raise ValueError(f"must be >= 0, got {v}")
        return v

    @field_validator("sigma_y_scale")
    @classmethod
    def validate_scale(cls, v):
        if v <= 0:
            raise ValueError(f"must be > 0, got {v}")
        return v

    @field_validator("ewma_lam")
    @classmethod
    def validate_lam(cls, v):
        if v is not None and not 0.0 < v <= 1.0:
            raise ValueError(f"EWMA forgetting factor must lie in (0, 1], got {v}")
        return v


class SweepPoint(BaseModel):
    index: int
    axis: str
    value: Union[float, int, str]

    @property
    def label(self) -> str:
        value = self.value if isinstance(self.value, str) else format(self.value, "g")
        return f"{self.index:03d}_{self.axis}_{value}"


def sweep_points(config: ExperimentConfig) -> List[SweepPoint]:
    return [SweepPoint(index=i, axis=config.sweep.axis, value=v) for i, v in enumerate(config.sweep.values)]


def format_violations(err: PydanticValidationError) -> List[str]:
    return [f"{'.'.join(str(p) for p in e['loc']) or '<root>'}: {e['msg']}" for e in err.errors()]


def parse_config(data: Dict[str, Any]) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(data)
    except PydanticValidationError as e:
        violations = format_violations(e)
        raise ValidationError(
            f"Invalid experiment config ({len(violations)} violation(s)): " + "; ".join(violations),
            {"violations": violations},
        ) from e


def load_config(path: str, seed_override: Optional[int] = None) -> ExperimentConfig:
    """
    Reads a UTF-8 JSON config. FEDGC_SEED (environment or .env) overrides the
    file's seed, and seed_override beats both.
    """
    load_dotenv()
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except FileNotFoundError as e:
        raise ValidationError(f"Config file not found: {path}", {"path": path}) from e
    except json.JSONDecodeError as e:
        raise ValidationError(f"Config is not valid JSON: {e}", {"path": path}) from e
    if not isinstance(data, dict):
        raise ValidationError("Config root must be a JSON object", {"path": path})

    env_seed = os.getenv(SEED_ENV_VAR)
    if env_seed is not None:
        try:
            data["seed"] = int(env_seed)
        except ValueError as e:
            raise ValidationError(f"{SEED_ENV_VAR}={env_seed!r} is not an integer") from e
        logger.info(f"Seed overridden by {SEED_ENV_VAR}: {data['seed']}")
    if seed_override is not None:
        data["seed"] = seed_override
    return parse_config(data)


def canonical_json(config: ExperimentConfig) -> str:
    return json.dumps(config.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))


def config_hash(config: ExperimentConfig) -> str:
    return hashlib.sha256(canonical_json(config).encode("utf-8")).hexdigest()


PRESETS: Dict[str, Dict[str, Any]] = {
    "aleatoric": {
        "name": "aleatoric",
        "T": 2000,
        "stride": 10,
        "ensemble": {"N": 100},
        "sweep": {"axis": "sigma_y_scale", "values": [0.25, 0.5, 1.0, 2.0, 4.0]},
    },
    "epistemic": {
        "name": "epistemic",
        "T": 4000,
        "stride": 20,
        "tracker_mode": "limiting",
        "prior_sigma_theta": 1e-4,
        "sweep": {"axis": "prior_sigma_A", "values": [1e-6, 1e-4, 1e-2, 1.0]},
    },
    "scalability": {
        "name": "scalability",
        "T": 200,
        "stride": 10,
        "tracker_mode": "realized",
        "prior_sigma_A": 1.0,
        "prior_sigma_theta": 1.0,
        "steady": False,
        "rates": {"lambda_s": 0.0},
        "sweep": {"axis": "d_m", "values": [16, 32, 64, 128]},
    },
    "dp": {
        "name": "dp",
        "T": 1000,
        "stride": 10,
        "tracker_mode": "realized",
        "prior_sigma_A": 1e-2,
        "prior_sigma_theta": 1e-2,
        "dp_direction": "both",
        "steady": False,
        "sweep": {"axis": "dp_sigma", "values": [0.0, 1e-6, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1]},
    },
    "baseline": {
        "name": "baseline",
        "system": {"kind": "scalar_benchmark", "offset": 0.0},
        "rates": {"lambda_s": 0.0, "lambda_c": 0.0},
        "T": 3000,
        "stride": 10,
        "tracker_mode": "realized",
        "prior_sigma_A": 1e-2,
        "steady": False,
        "sweep": {"axis": "baseline", "values": list(BASELINE_METHODS)},
    },
}


def preset(name: str, **overrides) -> ExperimentConfig:
    if name not in PRESETS:
        raise ValidationError(f"Unknown preset '{name}'; choose from {sorted(PRESETS)}")
    data = json.loads(json.dumps(PRESETS[name]))
    data.update(overrides)
    return parse_config(data)
