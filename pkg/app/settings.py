"""Process-level settings read from the environment or a ``.env`` file."""

from typing import Literal

from pydantic_settings import BaseSettings, SettingsConfigDict


class AppSettings(BaseSettings):
    """Runtime knobs that are not part of a model or training config.

    CLI flags take precedence; these only supply defaults.
    """

    model_config = SettingsConfigDict(
        env_prefix="MSF_",
        env_file=".env",
        env_file_encoding="utf-8",
        extra="ignore",
    )

    precision: Literal["f32", "f64"] = "f32"
    deterministic: bool = True
    log_level: str = "INFO"
    out_dir: str = "runs"
    grad_check_workers: int = 4


def get_settings() -> AppSettings:
    """Load settings fresh so tests can patch the environment."""
    return AppSettings()
