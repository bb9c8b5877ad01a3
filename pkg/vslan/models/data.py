# vslan/models/data.py
from dataclasses import dataclass, field
from typing import Dict, List, Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from vslan.core.config import ModelDims


class StreamSpec(BaseModel):
    """One feature extractor's place in the stack."""
    model_config = ConfigDict(extra="forbid")

    stream_id: int = Field(..., ge=0)
    name: str
    dim: int = Field(..., gt=0)
    order_index: int = Field(..., ge=0)


# Real-data ingestion order: coarse action streams first, object detector last
DEFAULT_STREAM_NAMES = ("resnext101", "c3d", "vgg16", "faster_rcnn")


@dataclass
class FeatureStream:
    spec: StreamSpec
    clips: np.ndarray  # [N, dim]

    @property
    def n_clips(self) -> int:
        return self.clips.shape[0]


class SceneProgram(BaseModel):
    """Latent content of one synthetic video."""
    subject_id: int = Field(..., ge=0)
    verb_id: int = Field(..., ge=0)
    object_id: int = Field(..., ge=0)
    location_id: int = Field(..., ge=0)
    n_clips: int = Field(..., ge=1)


@dataclass
class VideoExample:
    video_id: str
    streams: List[FeatureStream]
    captions: List[List[int]]   # BOS ... EOS
    pos: List[List[int]]        # aligned 1:1 with captions
    texts: List[str] = field(default_factory=list)

    @property
    def n_clips(self) -> int:
        return self.streams[0].n_clips


class CaptionRecord(BaseModel):
    """One line of captions.jsonl."""
    video_id: str
    caption: str
    pos: List[str]


class ManifestEntry(BaseModel):
    streams: List[str]
    captions: int = Field(..., ge=0)


class PredictionRecord(BaseModel):
    """One line of a predictions file consumed by ``evaluate``."""
    video_id: str
    captions: List[str] = Field(..., min_length=1)
    references: List[str] = Field(..., min_length=1)


class ModelSpec(BaseModel):
    """Everything needed to rebuild a network's parameter layout."""
    model_config = ConfigDict(extra="forbid")

    dims: ModelDims
    streams: List[StreamSpec]
    vocab_size: int = Field(..., gt=4)
    pos_vocab_size: int = Field(..., gt=3)
    use_vapen: bool = True
    decoder_lan: bool = True
    encoder: Literal["stacked", "concat"] = "stacked"


class EpochLog(BaseModel):
    """One JSON line of the training log."""
    epoch: int
    phase: str
    loss_xe: Optional[float] = None
    loss_rl: Optional[float] = None
    loss_elbo: Optional[float] = None
    kl: Optional[float] = None
    val_token_acc: float
    val_cider: float
    wall_s: float


class CheckpointMeta(BaseModel):
    """Header document stored in a checkpoint after the magic and version."""
    config: Dict
    model: ModelSpec
    epoch: int = Field(..., ge=0)
    adam_step: int = Field(0, ge=0)
