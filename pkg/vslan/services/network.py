# vslan/services/network.py
"""Parameter layout of a whole captioner and the encode -> G_bar plumbing shared by training and inference."""
import logging
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from vslan.core.diffcore import ParameterStore, Tensor
from vslan.core.exceptions import ConfigError
from vslan.models.data import ModelSpec
from vslan.models.state import EncoderOutput
from vslan.services.decoder import DecoderParams, make_decoder_params
from vslan.services.fan import EncoderParams, encode_video, make_encoder_params
from vslan.services.vapen import (
    NoVapenParams,
    VapenParams,
    deterministic_g_bar,
    make_no_vapen_params,
    make_vapen_params,
    sample_rollout,
)

logger = logging.getLogger(__name__)


@dataclass
class VslanModel:
    spec: ModelSpec
    store: ParameterStore
    encoder: EncoderParams
    decoder: DecoderParams
    vapen: Optional[VapenParams] = None
    no_vapen: Optional[NoVapenParams] = None

    @property
    def g_tilde_dim(self) -> int:
        return self.encoder.n_globals * self.spec.dims.z

    def require_vapen(self) -> VapenParams:
        if self.vapen is None:
            raise ConfigError("this model was built without the variational POS encoder")
        return self.vapen


def build_model(spec: ModelSpec, seed: int = 0) -> VslanModel:
    """Create every parameter in a fixed order so equal (spec, seed) give equal weights."""
    store = ParameterStore(seed)
    dims = spec.dims
    encoder = make_encoder_params(store, spec.streams, dims, variant=spec.encoder)
    g_tilde_dim = encoder.n_globals * dims.z
    vapen = make_vapen_params(store, dims, g_tilde_dim, spec.pos_vocab_size) if spec.use_vapen else None
    no_vapen = None if spec.use_vapen else make_no_vapen_params(store, dims, g_tilde_dim)
    decoder = make_decoder_params(store, dims, spec.vocab_size, use_lan=spec.decoder_lan)
    logger.debug(f"built model with {len(store)} parameter tensors")
    return VslanModel(spec=spec, store=store, encoder=encoder, decoder=decoder, vapen=vapen, no_vapen=no_vapen)


def encode(model: VslanModel, streams: Sequence[Union[np.ndarray, Tensor]]) -> EncoderOutput:
    return encode_video(streams, model.encoder)


def inference_g_bar(model: VslanModel, g_tilde: Tensor, seed: int, max_len: int) -> Tensor:
    """G_bar for one encoded video: a prior rollout, or the linear map when the latent path is disabled."""
    if model.vapen is None:
        return deterministic_g_bar(g_tilde, model.no_vapen)
    return sample_rollout(g_tilde, model.vapen, seed, max_len).g_bar
