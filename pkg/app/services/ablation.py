"""Train-and-evaluate sweeps over one ablation switch."""

import json
import logging
import re
from pathlib import Path
from typing import List, Optional

import numpy as np

from app.exceptions import ConfigError
from app.knowledge_base.presets import ModelPresets
from app.models.config import ModelConfig, TrainingConfig, with_overrides
from app.models.results import AblationRow
from app.services.dataset import Dataset
from app.services.model import bare_backbone_parameter_count, parameter_count
from app.services.training import Trainer

logger = logging.getLogger(__name__)


def _slug(name: str) -> str:
    return re.sub(r"[^a-z0-9]+", "_", name.lower()).strip("_") or "variant"


def run_ablation(
    base: ModelConfig,
    training: TrainingConfig,
    switch: str,
    train_data: Dataset,
    eval_data: Optional[Dataset] = None,
    out_dir: Optional[Path] = None,
    scale: str = "toy",
    dtype=np.float32,
) -> List[AblationRow]:
    """One row per variant of ``switch``.

    Every variant config is validated before the first one trains, so an
    infeasible k-schedule fails fast.
    """
    variants = ModelPresets.get_variants(switch, scale)
    configs = [(v, with_overrides(base, **v.overrides)) for v in variants]
    rows: List[AblationRow] = []
    for variant, config in configs:
        logger.info(f"Ablation {switch}: training variant {variant.name}")
        run_dir = Path(out_dir) / _slug(variant.name) if out_dir else None
        result = Trainer(config, training, dtype=dtype, out_dir=run_dir).train(train_data, eval_data)
        final = [m for m in result.metrics if m.split == ("eval" if eval_data is not None else "train")][-1]
        rows.append(AblationRow(
            switch=switch,
            variant=variant.name,
            overrides=variant.overrides,
            parameter_count=parameter_count(config),
            bare_backbone_parameter_count=bare_backbone_parameter_count(config),
            final_loss=result.final_loss,
            aggregate_accuracy=final.aggregate_accuracy,
            head_accuracy=final.head_accuracy,
            bucket_accuracy=final.bucket_accuracy,
        ))
    if out_dir:
        write_table(Path(out_dir), rows)
    return rows


def check_structure(rows: List[AblationRow]) -> None:
    """A variant without selection stages must be exactly the bare backbone."""
    for row in rows:
        if row.overrides.get("msps_stages") == [] and row.parameter_count != row.bare_backbone_parameter_count:
            raise ConfigError(
                f"variant {row.variant}: {row.parameter_count} parameters, "
                f"bare backbone has {row.bare_backbone_parameter_count}"
            )


def format_table(rows: List[AblationRow]) -> str:
    def pct(value: Optional[float]) -> str:
        return "-" if value is None else f"{100 * value:.1f}"

    lines = [f"{'variant':<20} {'params':>10} {'loss':>8} {'acc':>6} {'ob_l':>6} {'ob_m':>6} {'ob_s':>6}"]
    for r in rows:
        b = r.bucket_accuracy
        loss = "-" if r.final_loss is None else f"{r.final_loss:.4f}"
        lines.append(
            f"{r.variant:<20} {r.parameter_count:>10} {loss:>8} {pct(r.aggregate_accuracy):>6} "
            f"{pct(b.get('large')):>6} {pct(b.get('medium')):>6} {pct(b.get('small')):>6}"
        )
    return "\n".join(lines)


def write_table(out_dir: Path, rows: List[AblationRow]) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "ablation.jsonl", "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row.model_dump(mode="json"), sort_keys=True) + "\n")
    (out_dir / "ablation.txt").write_text(format_table(rows) + "\n", encoding="utf-8")
