import json

import pytest

from app.exceptions import ConfigError, SelectionError
from app.knowledge_base.presets import ABLATION_SWITCHES, K_SCHEDULES, PRESETS, ModelPresets
from app.models.config import build_model_config, with_overrides
from app.models.results import AblationRow
from app.services.ablation import check_structure, format_table, run_ablation
from app.services.model import MultiScaleModel, bare_backbone_parameter_count, parameter_count


class TestPresets:
    def test_every_preset_validates(self):
        for name in PRESETS:
            build_model_config(ModelPresets.get(name))

    def test_unknown_preset(self):
        with pytest.raises(ConfigError):
            ModelPresets.get("huge")

    def test_module_table_starts_from_backbone(self):
        variants = ModelPresets.get_module_variants()
        assert len(variants) == 6
        assert variants[0].overrides == {"msps_stages": []}

    def test_stage_table(self):
        assert [v.name for v in ModelPresets.get_stage_variants()] == ["none", "4", "3,4", "2,3,4", "full"]

    @pytest.mark.parametrize("scale", ["full", "toy", "micro"])
    def test_k_schedules_are_feasible(self, scale):
        base = build_model_config(ModelPresets.get(scale))
        for variant in ModelPresets.get_variants("k_schedule", scale):
            with_overrides(base, **variant.overrides)

    def test_full_scale_k_rows(self):
        assert K_SCHEDULES["full"][2] == [162, 54, 18, 6]

    def test_every_switch_has_variants(self, micro):
        for switch in ABLATION_SWITCHES:
            variants = ModelPresets.get_variants(switch, "micro")
            assert variants
            for v in variants:
                with_overrides(micro, **v.overrides)

    def test_unknown_switch(self):
        with pytest.raises(ConfigError):
            ModelPresets.get_variants("dropout")


class TestStructure:
    def test_no_selection_is_bare_backbone(self, micro):
        bare = with_overrides(micro, msps_stages=[])
        params, _ = MultiScaleModel(bare).init_params()
        assert not any(name.startswith(("transfer.", "msca.")) for name in params)
        assert parameter_count(bare) == bare_backbone_parameter_count(micro)

    def test_full_model_is_larger(self, micro):
        assert parameter_count(micro) > bare_backbone_parameter_count(micro)

    def test_check_structure_flags_mismatch(self):
        row = AblationRow(switch="modules", variant="(a)", overrides={"msps_stages": []},
                          parameter_count=10, bare_backbone_parameter_count=9)
        with pytest.raises(ConfigError):
            check_structure([row])

    def test_infeasible_k_fails_before_training(self, micro, short_training, splits):
        train, _ = splits
        with pytest.raises(SelectionError):
            # toy-scale k rows ask for more stage-4 patches than a 64 px input has
            run_ablation(micro, short_training, "k_schedule", train, scale="toy")


def test_stage_sweep_end_to_end(micro, short_training, splits, tmp_path):
    train, held_out = splits
    base = with_overrides(micro, k_schedule=[4, 3, 2, 1])
    rows = run_ablation(base, short_training, "msps_stages", train, held_out, tmp_path, scale="micro")
    assert [r.variant for r in rows] == ["none", "4", "3,4", "2,3,4", "full"]
    check_structure(rows)
    assert rows[0].parameter_count == rows[0].bare_backbone_parameter_count
    assert set(rows[1].head_accuracy) == {"stage4", "concat"}
    lines = (tmp_path / "ablation.jsonl").read_text().splitlines()
    assert json.loads(lines[1])["overrides"] == {"msps_stages": [4]}
    assert (tmp_path / "none" / "metrics.jsonl").exists()
    assert format_table(rows).splitlines()[0].startswith("variant")
