import logging
from typing import Any

from dotenv import load_dotenv
from pydantic.v1 import BaseSettings, Field, validator

logger = logging.getLogger("config")


class Settings(BaseSettings):
    """
    Process-wide defaults for the BHIP toolkit.

    Values come from (in order of precedence):
      1) Environment variables
      2) A local .env file
      3) The defaults defined below

    Command-line flags override all of these for a single invocation.
    """

    # --- Logging / general ---
    log_level: str = Field("INFO", env="LOG_LEVEL")

    # --- Reproducibility ---
    # Seed used by every command that is not given --seed explicitly.
    default_seed: int = Field(0, env="BHIP_SEED")

    # --- Execution ---
    threads: int = Field(1, env="BHIP_THREADS")
    output_dir: str = Field("out", env="BHIP_OUTPUT_DIR")

    # --- ICP baseline ---
    # 2^D subsets are tested, so D is capped.
    icp_max_predictors: int = Field(20, env="BHIP_ICP_MAX_PREDICTORS")

    # ---------- Validators ----------

    @validator("default_seed", "threads", "icp_max_predictors", pre=True)
    def parse_int(cls, v: Any, field) -> Any:
        """
        Env vars arrive as strings and are sometimes padded; an empty value
        falls back to the default.
        """
        if isinstance(v, str):
            v = v.strip()
            if v == "":
                return field.default
        return v

    @validator("threads")
    def check_threads(cls, v: int) -> int:
        if v < 1:
            raise ValueError("BHIP_THREADS must be >= 1")
        return v

    @validator("icp_max_predictors")
    def check_icp_cap(cls, v: int) -> int:
        if v < 1:
            raise ValueError("BHIP_ICP_MAX_PREDICTORS must be >= 1")
        return v

    @validator("log_level", pre=True)
    def parse_log_level(cls, v: Any) -> str:
        if v is None or str(v).strip() == "":
            return "INFO"
        return str(v).strip().upper()

    class Config:
        env_prefix = ""
        case_sensitive = False


def load_settings() -> Settings:
    """
    Entry point used by cli.py to get a fully-populated Settings object.
    """
    # Local dev: load .env if present.
    load_dotenv()

    settings = Settings()

    logger.info(
        "Config loaded | log_level=%s | default_seed=%s | threads=%s | "
        "icp_max_predictors=%s | output_dir=%s",
        settings.log_level,
        settings.default_seed,
        settings.threads,
        settings.icp_max_predictors,
        settings.output_dir,
    )
    return settings
