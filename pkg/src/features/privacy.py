import logging
from typing import Literal

import numpy as np
from pydantic import BaseModel, field_validator

logger = logging.getLogger("Privacy")

Direction = Literal["none", "up", "down", "both"]


class DpPolicy(BaseModel):
    """Where Gaussian noise is injected and how large it is."""
    direction: Direction = "none"
    sigma: float = 0.0

    @field_validator("sigma")
    @classmethod
    def validate_sigma(cls, v):
        if v < 0 or not np.isfinite(v):
            raise ValueError(f"DP noise standard deviation must be finite and >= 0, got {v}")
        return float(v)

    @property
    def up_sigma(self) -> float:
        return self.sigma if self.direction in ("up", "both") else 0.0

    @property
    def down_sigma(self) -> float:
        return self.sigma if self.direction in ("down", "both") else 0.0

    @property
    def active(self) -> bool:
        return self.direction != "none" and self.sigma > 0.0


class GaussianMechanism:
    """
    Seeded Gaussian noise injector for transmitted payloads.
    sigma == 0 returns the payload object unchanged.
    """
    def __init__(self, seed: int = 42):
        self.seed = seed
        self.rng = np.random.default_rng(seed)

    def perturb(self, payload: np.ndarray, sigma: float) -> np.ndarray:
        if sigma == 0.0:
            return payload
        return payload + sigma * self.rng.standard_normal(payload.shape)
