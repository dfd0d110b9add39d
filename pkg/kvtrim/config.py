import logging
from multiprocessing import cpu_count
from os import environ

from pydantic import BaseSettings, ValidationError, validator

from kvtrim.exceptions import ConfigException


KVTRIM_OUTPUT_DIR = environ.get("KVTRIM_OUTPUT_DIR", "./kvtrim-out")
KVTRIM_SNAPSHOT_FILE_NAME = "cache.kvtr"
KVTRIM_RUN_REPORT_FILE_NAME = "run_report.json"
KVTRIM_MEMORY_REPORT_FILE_NAME = "memory_report.json"
KVTRIM_ENERGY_FILE_NAME = "energy.csv"


class Settings(BaseSettings):
    threads: int = cpu_count()
    log_level: str = "INFO"
    output_dir: str = KVTRIM_OUTPUT_DIR

    class Config:
        env_prefix = "kvtrim_"
        case_sensitive = False

    @validator("threads")
    def validate_threads(cls, v):
        if v < 1:
            raise ValueError(f"KVTRIM_THREADS must be at least 1, got {v}")
        return v

    @validator("log_level")
    def validate_log_level(cls, v):
        level = v.upper()
        if not isinstance(logging.getLevelName(level), int):
            raise ValueError(f"KVTRIM_LOG_LEVEL must name a logging level, got {v}")
        return level


def get_settings() -> Settings:
    """
    Reads the settings from the environment. A new object is built on every call so a changed
    environment is always picked up.
    """
    try:
        return Settings()
    except ValidationError as e:
        problems = "; ".join(
            f"{'.'.join(str(part) for part in error['loc'])}: {error['msg']}" for error in e.errors()
        )
        raise ConfigException(f"Invalid environment: {problems}") from e
