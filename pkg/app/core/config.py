from functools import lru_cache
from pathlib import Path
from typing import Literal

from pydantic import Field, field_validator
from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    output_root: Path = Path("runs")
    threads: int = Field(1, ge=1)

    log_level: str = "INFO"
    log_format: Literal["json", "console"] = "json"
    log_every: int = Field(1000, ge=1)

    # numerical safeguards
    pivot_tolerance: float = 1e-14
    residual_tolerance: float = 1e-10
    oracle_tolerance: float = 1e-3

    label_cache_size: int = 4096

    @field_validator("log_level")
    @classmethod
    def validate_log_level(cls, v: str) -> str:
        level = v.upper()
        if level not in {"DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"}:
            raise ValueError(f"Unknown log level: {v}")
        return level

    model_config = SettingsConfigDict(
        env_prefix="MINRES_",
        env_file=".env",
        case_sensitive=False,
        extra="ignore",
    )


@lru_cache()
def get_settings() -> Settings:
    return Settings()
