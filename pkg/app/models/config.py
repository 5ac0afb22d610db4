"""Model and training configuration.

A run is described by one flat JSON object whose keys are the field names of
``ModelConfig`` and ``TrainingConfig``. Validation happens here, before any
array is allocated.
"""

import hashlib
import json
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Tuple

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator
from pydantic_core import PydanticCustomError

from app.exceptions import ConfigError, SelectionError

NUM_STAGES = 4
PATCH_SIZE = 4


class CttMode(str, Enum):
    """How the CLS pathway reaches each selected patch set."""
    GLOBAL_POOL = "global_pool"
    SIMPLE_ATTACH = "simple_attach"
    CTT_1MLP = "ctt_1mlp"
    CTT_2MLP = "ctt_2mlp"


class ModelConfig(BaseModel):
    """Architecture and loss hyperparameters."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    input_size: int = Field(448, gt=0)
    in_channels: int = Field(3, gt=0)
    stage_channels: Tuple[int, int, int, int] = (96, 192, 384, 768)
    stage_depths: Tuple[int, int, int, int] = (1, 1, 1, 1)
    stage_heads: Tuple[int, int, int, int] = (1, 2, 4, 8)
    merge_factor: int = Field(2, ge=1)
    k_schedule: Tuple[int, int, int, int] = (162, 54, 18, 6)
    attention_dim: int = Field(768, gt=0)
    msca_heads: int = Field(8, gt=0)
    num_classes: int = Field(200, ge=2)
    alpha_schedule: Tuple[float, float, float, float, float] = (0.6, 0.7, 0.8, 0.9, 1.0)
    seed: int = Field(0, ge=0, lt=2**64)
    msps_stages: Tuple[int, ...] = (1, 2, 3, 4)
    ctt_mode: CttMode = CttMode.CTT_2MLP
    cca_enabled: bool = True
    sca_enabled: bool = True
    num_msca_blocks: int = Field(1, ge=1)
    mlp_ratio: int = Field(4, ge=1)

    @field_validator("stage_depths")
    @classmethod
    def validate_depths(cls, v: Tuple[int, ...]) -> Tuple[int, ...]:
        if any(d < 0 for d in v):
            raise PydanticCustomError("config", "stage depths must be non-negative, got {v}", {"v": v})
        return v

    @field_validator("msps_stages")
    @classmethod
    def validate_msps_stages(cls, v: Tuple[int, ...]) -> Tuple[int, ...]:
        if any(s not in range(1, NUM_STAGES + 1) for s in v):
            raise PydanticCustomError("config", "msps_stages must be a subset of 1..4, got {v}", {"v": v})
        return tuple(sorted(set(v)))

    @field_validator("alpha_schedule")
    @classmethod
    def validate_alpha(cls, v: Tuple[float, ...]) -> Tuple[float, ...]:
        if any(a < 0.0 or a > 1.0 for a in v):
            raise PydanticCustomError("config", "alpha values must lie in [0, 1], got {v}", {"v": v})
        if any(b < a for a, b in zip(v, v[1:])):
            raise PydanticCustomError("config", "alpha schedule must be non-decreasing, got {v}", {"v": v})
        return v

    @model_validator(mode="after")
    def validate_geometry(self) -> "ModelConfig":
        if self.input_size % 32 != 0:
            raise PydanticCustomError(
                "config", "input_size must be divisible by 32, got {n}", {"n": self.input_size}
            )
        c = self.stage_channels
        if c[0] <= 0 or any(c[i + 1] != 2 * c[i] for i in range(NUM_STAGES - 1)):
            raise PydanticCustomError("config", "stage channels must double per stage, got {c}", {"c": c})
        for i, (ch, heads) in enumerate(zip(c, self.stage_heads), start=1):
            if heads <= 0 or ch % heads != 0:
                raise PydanticCustomError(
                    "config", "stage {i}: {ch} channels not divisible by {h} heads",
                    {"i": i, "ch": ch, "h": heads},
                )
        if self.attention_dim % self.msca_heads != 0:
            raise PydanticCustomError(
                "config", "attention_dim {d} not divisible by msca_heads {h}",
                {"d": self.attention_dim, "h": self.msca_heads},
            )
        r = self.merge_factor
        for stage in self.msps_stages:
            side = self.resolution(stage)
            if side % r != 0:
                raise PydanticCustomError(
                    "config", "stage {i}: grid side {s} not divisible by merge factor {r}",
                    {"i": stage, "s": side, "r": r},
                )
            k = self.k_schedule[stage - 1]
            l_hat = self.merged_count(stage)
            if k < 1 or k > l_hat:
                raise PydanticCustomError(
                    "selection", "stage {i}: k={k} infeasible with {l} merged patches",
                    {"i": stage, "k": k, "l": l_hat},
                )
        if self.msps_stages and self.cca_enabled and self.concat_width % 2 != 0:
            raise PydanticCustomError(
                "config", "joint channel width {c} must be even for the CCA bottleneck",
                {"c": self.concat_width},
            )
        return self

    def resolution(self, stage: int) -> int:
        """Grid side h_i of stage ``stage`` (1-based)."""
        return self.input_size // (PATCH_SIZE * 2 ** (stage - 1))

    def channels(self, stage: int) -> int:
        return self.stage_channels[stage - 1]

    def merged_count(self, stage: int) -> int:
        side = self.resolution(stage)
        return (side * side) // (self.merge_factor ** 2)

    @property
    def concat_width(self) -> int:
        """Width of the joint CCA descriptor and of the concatenated head."""
        return sum(self.channels(s) for s in self.msps_stages)

    @property
    def uses_cls(self) -> bool:
        return self.ctt_mode != CttMode.GLOBAL_POOL

    def rows(self, stage: int) -> int:
        """Rows of P̃_i: k_i plus one when a CLS row is attached."""
        return self.k_schedule[stage - 1] + (1 if self.uses_cls else 0)


class TrainingConfig(BaseModel):
    """Optimizer and loop settings."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    batch_size: int = Field(8, ge=2)
    learning_rate: float = Field(0.03, gt=0.0)
    momentum: float = Field(0.9, ge=0.0, lt=1.0)
    weight_decay: float = Field(0.0, ge=0.0)
    steps: int = Field(2000, ge=1)
    warmup_steps: int = Field(0, ge=0)
    eval_interval: int = Field(200, ge=1)


def _raise_from(exc: ValidationError) -> None:
    kinds = {err["type"] for err in exc.errors()}
    message = "; ".join(err["msg"] for err in exc.errors())
    if "selection" in kinds:
        raise SelectionError(message) from exc
    raise ConfigError(message) from exc


def build_model_config(data: Dict[str, Any]) -> ModelConfig:
    """Validate a mapping into a ModelConfig, raising ConfigError/SelectionError."""
    try:
        return ModelConfig.model_validate(data)
    except ValidationError as exc:
        _raise_from(exc)


def build_training_config(data: Dict[str, Any]) -> TrainingConfig:
    try:
        return TrainingConfig.model_validate(data)
    except ValidationError as exc:
        _raise_from(exc)


def split_run_config(data: Dict[str, Any]) -> Tuple[ModelConfig, TrainingConfig]:
    """Split a flat run mapping into its model and training halves."""
    model_keys = set(ModelConfig.model_fields)
    training_keys = set(TrainingConfig.model_fields)
    unknown = sorted(set(data) - model_keys - training_keys)
    if unknown:
        raise ConfigError(f"Unknown config keys: {unknown}")
    model = build_model_config({k: v for k, v in data.items() if k in model_keys})
    training = build_training_config({k: v for k, v in data.items() if k in training_keys})
    return model, training


def load_run_config(path: Path) -> Tuple[ModelConfig, TrainingConfig]:
    """Read a flat JSON run config from disk."""
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"Cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"Config {path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"Config {path} must be a flat JSON object")
    return split_run_config(data)


def dump_run_config(model: ModelConfig, training: TrainingConfig) -> Dict[str, Any]:
    """Flatten both halves back into a single JSON-ready mapping."""
    flat = model.model_dump(mode="json")
    flat.update(training.model_dump(mode="json"))
    return flat


def canonical_json(model: ModelConfig) -> str:
    return json.dumps(model.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))


def config_hash(model: ModelConfig) -> str:
    """Stable SHA-256 of the model config; identical across reruns and platforms."""
    return hashlib.sha256(canonical_json(model).encode("utf-8")).hexdigest()


def with_overrides(model: ModelConfig, **changes: Any) -> ModelConfig:
    """Return a re-validated copy of ``model`` with ``changes`` applied."""
    data = model.model_dump(mode="json")
    data.update({k: list(v) if isinstance(v, (tuple, set, frozenset)) else v for k, v in changes.items()})
    return build_model_config(data)


