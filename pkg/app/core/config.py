from functools import lru_cache

from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    model_config = SettingsConfigDict(env_file=".env", env_prefix="ESDRL_")

    # Application
    tool_version: str = "0.1.0"
    log_level: str = "INFO"
    output_dir: str = "./runs"

    # Checkpoints
    checkpoint_format: str = "esdrl-checkpoint"
    checkpoint_version: int = 1

    # Training budget (desk scale; 10^6 replay buffer via --paper-scale)
    replay_capacity: int = 200_000
    paper_replay_capacity: int = 1_000_000
    epochs: int = 150
    episodes_per_epoch: int = 100
    warmup_transitions: int = 1_000
    train_horizon: int = 50
    success_ema_weight: float = 0.9

    # Evaluation
    eval_seed_count: int = 20
    scenario_jitter: float = 0.02

    # Simulator
    nominal_friction: float = 0.5
    stiction_scale: float = 0.004


@lru_cache()
def get_settings() -> Settings:
    return Settings()
