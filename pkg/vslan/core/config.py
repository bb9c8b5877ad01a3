# vslan/core/config.py
import json
from pathlib import Path
from typing import Dict, List, Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator
from pydantic_settings import BaseSettings

from vslan.core.exceptions import ConfigError


class Settings(BaseSettings):
    # Logging
    DEBUG: bool = False
    LOG_LEVEL: Optional[str] = None

    # Numeric validation: NaN/Inf checks on every tensor
    DEBUG_VALIDATION: bool = False

    # Mock entailment scorer
    SCORER_HOST: str = "127.0.0.1"
    SCORER_PORT: int = 8765

    # Entailment reward client
    SCORER_TIMEOUT_S: float = 5.0
    SCORER_RETRIES: int = 1

    # Experiment-scale tests
    RUN_SLOW_TESTS: bool = False

    model_config = {
        "env_file": ".env",
        "case_sensitive": True,
        "extra": "ignore"
    }

    @property
    def log_level(self) -> str:
        """Effective log level name."""
        if self.LOG_LEVEL:
            return self.LOG_LEVEL.upper()
        return "DEBUG" if self.DEBUG else "INFO"


settings = Settings()


class ModelDims(BaseModel):
    """Layer widths shared by every block of the network."""
    model_config = ConfigDict(extra="forbid", frozen=True)

    z: int = Field(..., gt=0, description="Unified attention size")
    z_prime: int = Field(..., gt=0, description="Inner width of the attention score projection")
    x: int = Field(..., gt=0, description="Squeeze width of the global gate")
    y: int = Field(..., gt=0, description="Bilinear width inside the aggregation block")
    delta: int = Field(..., gt=0, description="Latent POS dimension")
    d_h: int = Field(..., gt=0, description="LSTM hidden size")
    word_embed: int = Field(..., gt=0)
    pos_embed: int = Field(..., gt=0)

    @model_validator(mode="after")
    def _squeeze_smaller(self) -> "ModelDims":
        if self.x >= self.z:
            raise ValueError(f"squeeze width x={self.x} must be smaller than z={self.z}")
        return self


PROFILES: Dict[str, ModelDims] = {
    "paper": ModelDims(z=1024, z_prime=512, x=256, y=512, delta=64, d_h=1024, word_embed=300, pos_embed=64),
    "desk": ModelDims(z=64, z_prime=32, x=16, y=32, delta=16, d_h=64, word_embed=32, pos_embed=16),
}


class TrainConfig(BaseModel):
    """Hyperparameters of the warm-up -> XE -> shared-loss schedule."""
    model_config = ConfigDict(extra="forbid")

    eta: float = Field(0.3, ge=0.0, le=1.0, description="Weight of the XE term in the shared loss")
    lr: float = Field(1e-4, gt=0.0)
    shared_lr: Optional[float] = Field(None, gt=0.0, description="Learning rate of the shared-loss phase; lr if unset")
    batch_size: int = Field(64, ge=1)
    clip_norm: float = Field(10.0, gt=0.0)
    xe_pretrain_epochs: int = Field(10, ge=0)
    vapen_warmup_epochs: int = Field(50, ge=0)
    shared_epochs: int = Field(40, ge=0)
    beam_width: int = Field(5, ge=1)
    max_len: int = Field(25, ge=1)
    n_diverse_samples: int = Field(10, ge=1)
    kl_anneal: bool = True
    elbo_weight: float = Field(1.0, ge=0.0)
    use_vapen: bool = True
    decoder_lan: bool = True
    encoder: Literal["stacked", "concat"] = Field(
        "stacked", description="concat joins the streams per clip and skips stream aggregation"
    )
    eval_videos: int = Field(64, ge=1)
    profile: Literal["paper", "desk"] = "paper"
    dims: Dict[str, int] = Field(default_factory=dict, description="Per-field override of the profile dims")

    @field_validator("dims")
    @classmethod
    def _known_dims(cls, value: Dict[str, int]) -> Dict[str, int]:
        unknown = set(value) - set(ModelDims.model_fields)
        if unknown:
            raise ValueError(f"unknown dims: {sorted(unknown)}")
        return value

    @model_validator(mode="after")
    def _dims_resolve(self) -> "TrainConfig":
        self.resolved_dims()
        return self

    def resolved_dims(self) -> ModelDims:
        """Profile dims with the overrides applied."""
        merged = PROFILES[self.profile].model_dump()
        merged.update(self.dims)
        return ModelDims(**merged)

    @property
    def total_epochs(self) -> int:
        warmup = self.vapen_warmup_epochs if self.use_vapen else 0
        return warmup + self.xe_pretrain_epochs + self.shared_epochs


class RewardConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    kind: Literal["builtin-cider", "remote-entailment"] = "builtin-cider"
    endpoint: Optional[str] = None

    @model_validator(mode="after")
    def _endpoint_for_remote(self) -> "RewardConfig":
        if self.kind == "remote-entailment" and not self.endpoint:
            raise ValueError("reward.endpoint is required for remote-entailment")
        return self


class PathsConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    data_dir: str = "data"
    out_dir: str = "runs"
    checkpoint: Optional[str] = None


class SyntheticConfig(BaseModel):
    """Size of the generated scene corpus."""
    model_config = ConfigDict(extra="forbid")

    n_videos: int = Field(200, ge=1)
    n_clips: int = Field(8, ge=1)
    stream_dims: List[int] = Field(default_factory=lambda: [24, 16, 20], min_length=1)
    n_captions_per_video: int = Field(4, ge=1)
    noise_sigma: float = Field(0.1, ge=0.0)
    seed: int = 0

    @field_validator("stream_dims")
    @classmethod
    def _positive_dims(cls, value: List[int]) -> List[int]:
        if any(d <= 0 for d in value):
            raise ValueError("stream dims must be positive")
        return value


class RunConfig(TrainConfig):
    """Full experiment document accepted by the CLI."""

    seed: int = 0
    paths: PathsConfig = Field(default_factory=PathsConfig)
    reward: RewardConfig = Field(default_factory=RewardConfig)
    synthetic: SyntheticConfig = Field(default_factory=SyntheticConfig)


def load_run_config(source: Union[str, Path, dict]) -> RunConfig:
    """Parse and validate a run configuration from a path or a mapping."""
    try:
        if isinstance(source, dict):
            return RunConfig.model_validate(source)
        text = Path(source).read_text(encoding="utf-8")
        return RunConfig.model_validate_json(text)
    except FileNotFoundError as e:
        raise ConfigError(f"config file not found: {source}") from e
    except ValidationError as e:
        raise ConfigError(f"invalid run config: {e}") from e


def run_config_schema() -> str:
    """The published JSON schema of the run configuration."""
    return json.dumps(RunConfig.model_json_schema(), indent=2, sort_keys=True)
