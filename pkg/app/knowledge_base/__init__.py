"""Fixed model presets and ablation tables."""

from .presets import ModelPresets, PRESETS, K_SCHEDULES, ABLATION_SWITCHES

__all__ = ['ModelPresets', 'PRESETS', 'K_SCHEDULES', 'ABLATION_SWITCHES']
