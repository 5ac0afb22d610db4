"""Model presets and ablation tables.

Three scales are provided:
- full scale: 448 input, channels 96/192/384/768 (geometry checks)
- toy: 128 input, channels 16/32/64/128 (desk-scale training)
- micro: 64 input, channels 8/16/32/64 (gradient checks)
"""

from dataclasses import dataclass, field
from typing import Any, Dict, List

from app.exceptions import ConfigError


@dataclass
class AblationVariant:
    """One row of an ablation table: a label and the config fields it changes."""
    name: str
    overrides: Dict[str, Any] = field(default_factory=dict)


FULL_SCALE: Dict[str, Any] = {
    "input_size": 448,
    "stage_channels": [96, 192, 384, 768],
    "stage_depths": [1, 1, 1, 1],
    "stage_heads": [1, 2, 4, 8],
    "k_schedule": [162, 54, 18, 6],
    "attention_dim": 768,
    "msca_heads": 8,
    "num_classes": 200,
}

TOY: Dict[str, Any] = {
    "input_size": 128,
    "stage_channels": [16, 32, 64, 128],
    "stage_depths": [1, 1, 1, 1],
    "stage_heads": [1, 2, 4, 8],
    "k_schedule": [32, 16, 8, 2],
    "attention_dim": 128,
    "msca_heads": 2,
    "num_classes": 4,
}

TOY_TRAINING: Dict[str, Any] = {
    "batch_size": 8,
    "learning_rate": 0.03,
    "momentum": 0.9,
    "weight_decay": 0.0,
    "steps": 2000,
    "warmup_steps": 100,
    "eval_interval": 200,
}

MICRO: Dict[str, Any] = {
    "input_size": 64,
    "stage_channels": [8, 16, 32, 64],
    "stage_depths": [1, 1, 1, 1],
    "stage_heads": [1, 2, 2, 4],
    "k_schedule": [4, 3, 2, 1],
    "attention_dim": 16,
    "msca_heads": 2,
    "num_classes": 4,
    "mlp_ratio": 2,
}

# Selected-patch counts, stage 1 first. The toy rows keep the same shape of
# the schedule within the toy grid (at most 256/64/16/4 merged patches).
K_SCHEDULES: Dict[str, List[List[int]]] = {
    "full": [[12, 10, 8, 6], [48, 24, 12, 6], [162, 54, 18, 6], [448, 112, 28, 7]],
    "toy": [[8, 6, 4, 2], [16, 8, 4, 2], [32, 16, 8, 2], [64, 32, 12, 3]],
    "micro": [[2, 2, 1, 1], [4, 3, 2, 1]],
}

PRESETS: Dict[str, Dict[str, Any]] = {"full": FULL_SCALE, "toy": TOY, "micro": MICRO}

ABLATION_SWITCHES = ("modules", "msps_stages", "ctt_mode", "cca", "sca", "num_msca_blocks", "k_schedule")


class ModelPresets:
    """Lookup for presets and ablation variants."""

    @staticmethod
    def get(scale: str) -> Dict[str, Any]:
        if scale not in PRESETS:
            raise ConfigError(f"Unknown preset {scale!r}; expected one of {sorted(PRESETS)}")
        return dict(PRESETS[scale])

    @staticmethod
    def get_module_variants() -> List[AblationVariant]:
        """Adding MSPS, CTT, CCA and SCA one at a time."""
        return [
            AblationVariant("(a) backbone", {"msps_stages": []}),
            AblationVariant("(b) msps", {"ctt_mode": "simple_attach", "cca_enabled": False, "sca_enabled": False}),
            AblationVariant("(c) msps+ctt", {"ctt_mode": "ctt_2mlp", "cca_enabled": False, "sca_enabled": False}),
            AblationVariant("(d) msps+ctt+cca", {"ctt_mode": "ctt_2mlp", "cca_enabled": True, "sca_enabled": False}),
            AblationVariant("(e) msps+ctt+sca", {"ctt_mode": "ctt_2mlp", "cca_enabled": False, "sca_enabled": True}),
            AblationVariant("(f) full", {"ctt_mode": "ctt_2mlp", "cca_enabled": True, "sca_enabled": True}),
        ]

    @staticmethod
    def get_stage_variants() -> List[AblationVariant]:
        """Selection on none, the last, and progressively earlier stages."""
        return [
            AblationVariant("none", {"msps_stages": []}),
            AblationVariant("4", {"msps_stages": [4]}),
            AblationVariant("3,4", {"msps_stages": [3, 4]}),
            AblationVariant("2,3,4", {"msps_stages": [2, 3, 4]}),
            AblationVariant("full", {"msps_stages": [1, 2, 3, 4]}),
        ]

    @staticmethod
    def get_variants(switch: str, scale: str = "toy") -> List[AblationVariant]:
        if switch == "modules":
            return ModelPresets.get_module_variants()
        if switch == "msps_stages":
            return ModelPresets.get_stage_variants()
        if switch == "ctt_mode":
            return [AblationVariant(m, {"ctt_mode": m}) for m in ("global_pool", "simple_attach", "ctt_1mlp", "ctt_2mlp")]
        if switch == "cca":
            return [AblationVariant("cca off", {"cca_enabled": False}), AblationVariant("cca on", {"cca_enabled": True})]
        if switch == "sca":
            return [AblationVariant("sca off", {"sca_enabled": False}), AblationVariant("sca on", {"sca_enabled": True})]
        if switch == "num_msca_blocks":
            return [AblationVariant(str(n), {"num_msca_blocks": n}) for n in (1, 2, 3, 4)]
        if switch == "k_schedule":
            if scale not in K_SCHEDULES:
                raise ConfigError(f"No k-schedule table for scale {scale!r}")
            return [AblationVariant(",".join(map(str, k)), {"k_schedule": k}) for k in K_SCHEDULES[scale]]
        raise ConfigError(f"Unknown ablation switch {switch!r}; expected one of {list(ABLATION_SWITCHES)}")
