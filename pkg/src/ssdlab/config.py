"""Validated experiment configurations for the command-line runner.

Every subcommand has one model. Unknown keys are rejected and every field
is checked before any computation starts.
"""

from __future__ import annotations

from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

__all__ = [
    "BaseRunConfig",
    "SpectrumConfig",
    "Score2DConfig",
    "ShapesGenConfig",
    "TrainConfig",
    "SampleConfig",
    "EvalSpatialConfig",
    "EvalMemorizationConfig",
    "SensitivityConfig",
    "ReproConfig",
    "CONFIGS",
]

STRICT = ConfigDict(extra="forbid", frozen=True)


class BaseRunConfig(BaseModel):
    model_config = STRICT

    seed: int = Field(0, ge=0, lt=2**64)
    threads: int = Field(1, ge=1, le=256)


class SpectrumConfig(BaseRunConfig):
    rho: float = Field(0.7, gt=-1.0, lt=1.0)
    eta: float = Field(0.5, ge=0.0, lt=1.0)
    cov_file: Optional[str] = None
    method: Literal["auto", "jacobi", "lapack"] = "auto"


class Score2DConfig(BaseRunConfig):
    rho: float = Field(0.7, gt=-1.0, lt=1.0)
    t: float = Field(0.1, gt=0.0)
    n_points: int = Field(10, ge=1)
    eta: float = Field(0.5, ge=0.0, lt=1.0)
    n_masks: int = Field(64, ge=1)
    resolution: int = Field(30, ge=2)
    lo: float = -3.0
    hi: float = 3.0
    error_norm: Literal["l2", "l1"] = "l2"
    mask_mode: Literal["shared", "per_point"] = "shared"

    @model_validator(mode="after")
    def _range(self):
        if not self.lo < self.hi:
            raise ValueError("lo must be below hi")
        return self


class ShapesGenConfig(BaseRunConfig):
    n: int = Field(500, ge=1)
    height: int = Field(16, ge=1)
    width: int = Field(16, ge=1)
    tri_side: int = Field(5, ge=1)
    sq_side: int = Field(4, ge=1)

    @model_validator(mode="after")
    def _fits(self):
        if max(self.tri_side, self.sq_side) > min(self.height, self.width):
            raise ValueError("shapes do not fit the canvas")
        return self


class _ModelFields(BaseModel):
    model_config = STRICT

    hidden: list[int] = Field(default_factory=lambda: [256, 256], min_length=1)
    time_freqs: int = Field(8, ge=0)
    skip: bool = False
    precondition: bool = False
    local_hidden: int = Field(0, ge=0)

    @field_validator("hidden")
    @classmethod
    def _positive(cls, v):
        if any(h < 1 for h in v):
            raise ValueError("hidden sizes must be positive")
        return v


class _OptimFields(BaseModel):
    model_config = STRICT

    epochs: int = Field(100, ge=1)
    batch_size: int = Field(64, ge=1)
    lr: float = Field(1e-4, ge=0.0)
    beta1: float = Field(0.9, ge=0.0, lt=1.0)
    beta2: float = Field(0.95, ge=0.0, lt=1.0)
    epsilon: float = Field(1e-8, gt=0.0)
    normalize_by_unmasked: bool = True


class TrainConfig(BaseRunConfig, _ModelFields, _OptimFields):
    data: str
    eta: float = Field(0.0, ge=0.0, lt=1.0)


class SampleConfig(BaseRunConfig):
    model: str
    n: int = Field(64, ge=1)
    intervals: int = Field(25, ge=1)
    method: Literal["heun", "euler"] = "heun"
    final_euler: bool = False
    snapshot_times: list[float] = Field(default_factory=list)
    height: Optional[int] = Field(None, ge=1)
    width: Optional[int] = Field(None, ge=1)
    preview: int = Field(256, ge=0)
    chunk: int = Field(256, ge=1)


class EvalSpatialConfig(BaseRunConfig):
    samples: str
    threshold: float = Field(0.5, gt=0.0, lt=1.0)
    min_area: int = Field(15, ge=1)


class EvalMemorizationConfig(BaseRunConfig):
    samples: str
    data: str


class SensitivityConfig(BaseRunConfig):
    data: str
    model: Optional[str] = None
    analytic: bool = False
    t: float = Field(0.789, gt=0.0, lt=1.0)
    pixel: Optional[tuple[int, int]] = None
    n_images: Optional[int] = Field(None, ge=1)
    n_noise: int = Field(64, ge=1)
    eta: float = Field(0.5, ge=0.0, lt=1.0)
    snr_power: int = Field(2, ge=1)
    bins: int = Field(50, ge=1)

    @model_validator(mode="after")
    def _needs_model(self):
        if not self.analytic and self.model is None:
            raise ValueError("model is required unless analytic is set")
        return self


class ReproConfig(BaseRunConfig, _ModelFields, _OptimFields):
    """End-to-end comparison; model and optimizer defaults are the desk-scale
    settings that fit both trainings in well under half an hour."""

    precondition: bool = True
    local_hidden: int = Field(32, ge=0)
    lr: float = Field(1e-3, ge=0.0)
    epochs: int = Field(2000, ge=1)
    n_train: int = Field(500, ge=1)
    n_samples: int = Field(2000, ge=1)
    eta: float = Field(0.5, gt=0.0, lt=1.0)
    intervals: int = Field(25, ge=1)
    threshold: float = Field(0.5, gt=0.0, lt=1.0)
    sensitivity_images: int = Field(100, ge=1)
    n_noise: int = Field(64, ge=1)
    t: float = Field(0.789, gt=0.0, lt=1.0)


CONFIGS: dict[str, type[BaseRunConfig]] = {
    "spectrum": SpectrumConfig,
    "score2d": Score2DConfig,
    "shapes-gen": ShapesGenConfig,
    "train": TrainConfig,
    "sample": SampleConfig,
    "eval-spatial": EvalSpatialConfig,
    "eval-memorization": EvalMemorizationConfig,
    "sensitivity": SensitivityConfig,
    "repro": ReproConfig,
}
