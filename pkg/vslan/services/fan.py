# vslan/services/fan.py
"""
Feature aggregation: the stacked LAN + FAN encoder over M feature streams.

Stream m is projected to the unified width z, the running aggregate is
summarized by a self-attentive LAN block into its global feature, and the
projected stream is folded into the aggregate through bilinear pooling
against that global feature with a LayerNorm residual. Block 0 folds stream
0 against itself.
"""
import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Union

import numpy as np

from vslan.core.config import ModelDims
from vslan.core.diffcore import (
    Parameter,
    ParameterStore,
    Tensor,
    as_tensor,
    concat,
    elu,
    expand_dims,
    layer_norm,
    linear,
    relu,
)
from vslan.core.exceptions import ClipCountMismatchError, ShapeError
from vslan.models.data import FeatureStream, StreamSpec
from vslan.models.state import EncoderOutput, LanOutput
from vslan.services.lan import LanWeights, lan_forward, make_lan_weights

logger = logging.getLogger(__name__)

StreamInput = Union[FeatureStream, np.ndarray, Tensor]
ENCODER_VARIANTS = ("stacked", "concat")


@dataclass
class FanWeights:
    W_G: Parameter    # [y, z]
    b_G: Parameter
    W_L: Parameter    # [y, z]
    b_L: Parameter
    W_Lp: Parameter   # [z, y]
    b_Lp: Parameter
    ln_gain: Parameter
    ln_bias: Parameter


@dataclass
class StreamProjection:
    W_in: Parameter   # [z, v_m]
    b_in: Parameter


@dataclass
class EncoderParams:
    streams: List[StreamSpec]
    variant: str = "stacked"
    projections: List[StreamProjection] = field(default_factory=list)
    lans: List[LanWeights] = field(default_factory=list)
    fans: List[FanWeights] = field(default_factory=list)

    @property
    def n_streams(self) -> int:
        return len(self.streams)

    @property
    def n_globals(self) -> int:
        """Global features concatenated into g_tilde."""
        return 1 if self.variant == "concat" else self.n_streams


def make_fan_weights(store: ParameterStore, prefix: str, dims: ModelDims) -> FanWeights:
    z, y = dims.z, dims.y
    return FanWeights(
        W_G=store.matrix(f"{prefix}.W_G", y, z),
        b_G=store.vector(f"{prefix}.b_G", y),
        W_L=store.matrix(f"{prefix}.W_L", y, z),
        b_L=store.vector(f"{prefix}.b_L", y),
        W_Lp=store.matrix(f"{prefix}.W_Lp", z, y),
        b_Lp=store.vector(f"{prefix}.b_Lp", z),
        ln_gain=store.vector(f"{prefix}.ln_gain", z, fill=1.0),
        ln_bias=store.vector(f"{prefix}.ln_bias", z),
    )


def make_encoder_params(
    store: ParameterStore,
    streams: Sequence[StreamSpec],
    dims: ModelDims,
    variant: str = "stacked",
) -> EncoderParams:
    """
    Stacked: one input projection, one LAN block and one FAN block per stream,
    in stack order. Concat: a single projection of the joined streams and one
    LAN block.
    """
    ordered = sorted(streams, key=lambda s: s.order_index)
    if not ordered:
        raise ShapeError("the encoder needs at least one feature stream")
    if [s.order_index for s in ordered] != list(range(len(ordered))):
        raise ShapeError(f"stream order indices must be 0..{len(ordered) - 1}, got {[s.order_index for s in ordered]}")
    if variant not in ENCODER_VARIANTS:
        raise ValueError(f"unknown encoder variant {variant!r}")
    params = EncoderParams(streams=ordered, variant=variant)
    if variant == "concat":
        joined = sum(s.dim for s in ordered)
        params.projections.append(StreamProjection(
            W_in=store.matrix("enc.concat.W", dims.z, joined),
            b_in=store.vector("enc.concat.b", dims.z),
        ))
        params.lans.append(make_lan_weights(store, "enc.lan0", dims.z, dims.z, dims.z, dims))
        return params
    for m, spec in enumerate(ordered):
        params.projections.append(StreamProjection(
            W_in=store.matrix(f"enc.in{m}.W", dims.z, spec.dim),
            b_in=store.vector(f"enc.in{m}.b", dims.z),
        ))
        params.lans.append(make_lan_weights(store, f"enc.lan{m}", dims.z, dims.z, dims.z, dims))
        params.fans.append(make_fan_weights(store, f"enc.fan{m}", dims))
    return params


def project_stream(L: Tensor, W_in: Parameter, b_in: Optional[Parameter] = None) -> Tensor:
    """Per-clip projection [..., N, v_m] -> [..., N, z]."""
    return linear(as_tensor(L), W_in, b_in)


def encoder_lan(L_prev: Tensor, w: LanWeights) -> LanOutput:
    """Self-attentive LAN over the aggregate, queried by its mean over clips."""
    query = L_prev.mean(axis=-2)
    return lan_forward(query, L_prev, L_prev, w)


def fan_fold(G_hat: Tensor, L_new: Tensor, L_prev: Tensor, w: FanWeights) -> Tensor:
    if L_new.shape[-2:] != L_prev.shape[-2:]:
        raise ShapeError(f"fan_fold: new stream {L_new.shape} and aggregate {L_prev.shape} differ")
    pooled = expand_dims(elu(linear(G_hat, w.W_G, w.b_G)), -2) * elu(linear(L_new, w.W_L, w.b_L))
    update = relu(linear(pooled, w.W_Lp, w.b_Lp))
    return layer_norm(update + L_prev, w.ln_gain, w.ln_bias)


def _stream_tensor(stream: StreamInput) -> Tensor:
    if isinstance(stream, FeatureStream):
        return Tensor(stream.clips)
    return as_tensor(stream)


def encode_video(streams: Sequence[StreamInput], params: EncoderParams) -> EncoderOutput:
    """
    Run the encoder over the streams of one video (or a batch of
    videos with equal clip counts, as [B, N, v_m] arrays).

    Returns the final aggregate, every block's global feature in stack order,
    their concatenation and every block's LAN output. The concat variant has
    a single block.
    """
    if len(streams) != params.n_streams:
        raise ShapeError(f"encoder built for {params.n_streams} streams, got {len(streams)}")
    tensors = [_stream_tensor(s) for s in streams]
    clip_counts = [t.shape[-2] if t.ndim >= 2 else None for t in tensors]
    if len(set(clip_counts)) != 1:
        named = ", ".join(f"{spec.name}={n}" for spec, n in zip(params.streams, clip_counts))
        raise ClipCountMismatchError(f"streams disagree on clip count: {named}")
    for spec, t in zip(params.streams, tensors):
        if t.shape[-1] != spec.dim:
            raise ShapeError(f"stream {spec.name} expects dim {spec.dim}, got shape {t.shape}")

    if params.variant == "concat":
        return _encode_concat(tensors, params)

    blocks: List[LanOutput] = []
    globals_: List[Tensor] = []
    aggregate: Optional[Tensor] = None
    for m, t in enumerate(tensors):
        projected = project_stream(t, params.projections[m].W_in, params.projections[m].b_in)
        # block 0: L_prev = L_new = projected stream 0
        current = projected if aggregate is None else aggregate
        block = encoder_lan(current, params.lans[m])
        aggregate = fan_fold(block.global_feat, projected, current, params.fans[m])
        blocks.append(block)
        globals_.append(block.global_feat)

    return EncoderOutput(
        local_final=aggregate,
        globals=globals_,
        g_tilde=concat(globals_, axis=-1),
        blocks=blocks,
    )


def _encode_concat(tensors: Sequence[Tensor], params: EncoderParams) -> EncoderOutput:
    """Streams joined per clip, projected once and summarized by one LAN block; no aggregation."""
    projection = params.projections[0]
    joined = project_stream(concat(tensors, axis=-1), projection.W_in, projection.b_in)
    block = encoder_lan(joined, params.lans[0])
    return EncoderOutput(
        local_final=joined,
        globals=[block.global_feat],
        g_tilde=block.global_feat,
        blocks=[block],
    )
