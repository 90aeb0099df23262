"""Process configuration via environment variables."""

from functools import lru_cache
from pathlib import Path
from typing import Optional

from pydantic_settings import BaseSettings

from abreu_lab import __version__


class Settings(BaseSettings):
    # App
    app_name: str = "abreu-lab"
    app_version: str = __version__
    debug: bool = False
    log_level: str = "INFO"

    # Worker pool; None lets the executor pick
    threads: Optional[int] = None

    # Numerical floors
    det_floor: float = 1e-12
    vertex_tol: float = 1e-12
    boundary_tol: float = 1e-12
    defect_rel_tol: float = 1e-6

    # Collar width (in cells) of the log-singular quadrature correction
    collar_kappa: float = 1.0

    model_config = {
        "env_prefix": "ABREU_LAB_",
        "env_file": ".env",
        "env_file_encoding": "utf-8",
        "case_sensitive": False,
    }


@lru_cache()
def get_settings() -> Settings:
    return Settings()


BASE_DIR = Path(__file__).resolve().parent
TEMPLATES_DIR = BASE_DIR / "templates"
