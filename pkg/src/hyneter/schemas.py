"""Request and response bodies for the HTTP service.

Every request model rejects unknown fields so client typos surface as 422
responses instead of silently ignored options.  Architecture, training,
and task settings travel as one raw config object validated by the config
parser, keeping a single source of truth for key checking.
"""
from __future__ import annotations

from typing import Any, Optional

from pydantic import BaseModel, ConfigDict, Field


class _Request(BaseModel):
    model_config = ConfigDict(extra="forbid", protected_namespaces=())


class _Response(BaseModel):
    model_config = ConfigDict(protected_namespaces=())


class BuildRequest(_Request):
    """Build (or restore) a model and register it under a name."""

    name: Optional[str] = None
    config: dict[str, Any] = Field(default_factory=dict)
    seed: int = 0
    checkpoint_b64: Optional[str] = None


class BuildResponse(_Response):
    name: str
    param_count: int
    config: dict[str, Any]


class ModelListResponse(_Response):
    models: list[str]


class ForwardRequest(_Request):
    """Run a forward pass on stored images (base64 float64) or on a
    deterministic random batch."""

    images_b64: Optional[str] = None
    images_shape: Optional[list[int]] = None
    image_seed: int = 0
    batch: int = 2


class ForwardResponse(_Response):
    stage_shapes: list[list[int]]
    logits: list[list[float]]
    audit_passed: bool


class GradcheckRequest(_Request):
    samples: int = 120
    seed: int = 0
    tolerance: float = 1e-3


class GradcheckResponse(_Response):
    worst_rel_err: float
    checked: int
    worst_path: str
    passed: bool


class MetricsBody(_Response):
    acc_total: float
    acc_small: Optional[float] = None
    acc_medium: Optional[float] = None
    acc_large: Optional[float] = None
    ratio: Optional[float] = None


class TrainRequest(_Request):
    """Train a registered model; train/task sections come from config."""

    config: dict[str, Any] = Field(default_factory=dict)
    eval_every: int = 0
    return_checkpoint: bool = False


class TrainResponse(_Response):
    steps_run: int
    losses: list[float]
    evals: list[tuple[int, MetricsBody]]
    final_metrics: Optional[MetricsBody]
    aborted: bool
    checkpoint_b64: Optional[str] = None


class SweepRequest(_Request):
    factor: str
    values: list[float]
    config: dict[str, Any] = Field(default_factory=dict)


class SweepRecordBody(_Response):
    factor: str
    value: float
    param_count: int
    final_loss: float
    acc_total: float
    acc_small: Optional[float] = None
    acc_medium: Optional[float] = None
    acc_large: Optional[float] = None
    ratio: Optional[float] = None


class SweepResponse(_Response):
    records: list[SweepRecordBody]
    csv_text: str
    error: Optional[str] = None


class VariantCount(_Response):
    total: int
    backbone: int


class ParamsResponse(_Response):
    counts: dict[str, VariantCount]
    ratios: dict[str, float]


class HealthResponse(_Response):
    status: str
    version: str
