from pydantic_settings import BaseSettings, SettingsConfigDict
from typing import Optional


class Settings(BaseSettings):
    model_config = SettingsConfigDict(
        env_file=".env",
        env_prefix="DOSEPOOL_",
        case_sensitive=False,
        extra="ignore",
    )

    app_name: str = "dosepool"
    app_version: str = "1.0.0"
    debug: bool = False

    # Logging
    log_level: str = "INFO"
    log_file: Optional[str] = None

    # Input Settings
    max_file_size: int = 50 * 1024 * 1024  # 50MB
    allowed_extensions: list[str] = [".csv", ".xlsx", ".json", ".toml"]

    # Schedules
    schedule_intervals: dict[str, float] = {
        "weekly": 168.0,
        "biweekly": 336.0,
        "monthly": 672.0,
    }
    reference_schedule: str = "biweekly"

    # Sampler Settings
    chains: int = 3
    iterations: int = 4000
    warmup: int = 2000
    target_accept: float = 0.8
    max_tree_depth: int = 10
    divergence_threshold: float = 1000.0
    parallel_chains: bool = False

    # Prior Settings
    e0_prior_sd: float = 100.0
    emax_prior_sd: float = 100.0
    sigma_prior_scale: float = 100.0
    tau_ed50_prior_scale: float = 1.0
    tau_emax_prior_scale: float = 10.0
    ed50_prior_mu_log: float = -2.5
    ed50_prior_sd_log: float = 1.8
    ed50_upper_ratio: float = 1.5

    # Reporting
    curve_points: int = 30
    density_points: int = 256
    rhat_threshold: float = 1.05
    pareto_k_threshold: float = 0.7


settings = Settings()
