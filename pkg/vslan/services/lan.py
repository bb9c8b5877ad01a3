# vslan/services/lan.py
"""
Local attention block: low-rank bilinear pooling of one query against clip
keys and values, a softmax over clips, a squeeze/excite gate on the pooled
local feature and the gated global feature.

All functions accept arbitrary leading batch dimensions: Q is [..., q],
K is [..., N, k], V is [..., N, v]. A single query can also attend over a
shared clip set (Q [B, q] with K [N, k]) through broadcasting.
"""
import logging
from dataclasses import dataclass

from vslan.core.config import ModelDims
from vslan.core.diffcore import (
    Parameter,
    ParameterStore,
    Tensor,
    elu,
    expand_dims,
    linear,
    relu,
    sigmoid,
    softmax,
)
from vslan.core.exceptions import ShapeError
from vslan.models.state import LanOutput

logger = logging.getLogger(__name__)


@dataclass
class LanWeights:
    W_Q_K: Parameter
    b_Q_K: Parameter
    W_K: Parameter
    b_K: Parameter
    W_Q_V: Parameter
    b_Q_V: Parameter
    W_V: Parameter
    b_V: Parameter
    W_bk: Parameter   # [z', z]
    b_bk: Parameter
    w_bs: Parameter   # [1, z'], no bias: softmax ignores a shared offset
    W_bl1: Parameter  # [x, z] squeeze
    b_bl1: Parameter
    W_bl2: Parameter  # [z, x] excite
    b_bl2: Parameter

    @property
    def z(self) -> int:
        return self.W_K.shape[0]


def make_lan_weights(store: ParameterStore, prefix: str, q: int, k: int, v: int, dims: ModelDims) -> LanWeights:
    z, zp, x = dims.z, dims.z_prime, dims.x
    if x >= z:
        raise ShapeError(f"{prefix}: squeeze width {x} must be smaller than z={z}")
    return LanWeights(
        W_Q_K=store.matrix(f"{prefix}.W_Q_K", z, q),
        b_Q_K=store.vector(f"{prefix}.b_Q_K", z),
        W_K=store.matrix(f"{prefix}.W_K", z, k),
        b_K=store.vector(f"{prefix}.b_K", z),
        W_Q_V=store.matrix(f"{prefix}.W_Q_V", z, q),
        b_Q_V=store.vector(f"{prefix}.b_Q_V", z),
        W_V=store.matrix(f"{prefix}.W_V", z, v),
        b_V=store.vector(f"{prefix}.b_V", z),
        W_bk=store.matrix(f"{prefix}.W_bk", zp, z),
        b_bk=store.vector(f"{prefix}.b_bk", zp),
        w_bs=store.matrix(f"{prefix}.w_bs", 1, zp),
        W_bl1=store.matrix(f"{prefix}.W_bl1", x, z),
        b_bl1=store.vector(f"{prefix}.b_bl1", x),
        W_bl2=store.matrix(f"{prefix}.W_bl2", z, x),
        b_bl2=store.vector(f"{prefix}.b_bl2", z),
    )


def _bilinear_pool(Q: Tensor, clips: Tensor, W_q, b_q, W_c, b_c) -> Tensor:
    if clips.ndim < 2 or clips.shape[-2] < 1:
        raise ShapeError(f"expected at least one clip, got clip tensor of shape {clips.shape}")
    query = elu(linear(Q, W_q, b_q))
    per_clip = elu(linear(clips, W_c, b_c))
    return expand_dims(query, -2) * per_clip


def pool_keys(Q: Tensor, K: Tensor, w: LanWeights) -> Tensor:
    """beta_i^K = ELU(W_Q^K Q) * ELU(W_K k_i) -> [..., N, z]."""
    return _bilinear_pool(Q, K, w.W_Q_K, w.b_Q_K, w.W_K, w.b_K)


def pool_values(Q: Tensor, V: Tensor, w: LanWeights) -> Tensor:
    """beta_i^V = ELU(W_Q^V Q) * ELU(W_V v_i) -> [..., N, z]."""
    return _bilinear_pool(Q, V, w.W_Q_V, w.b_Q_V, w.W_V, w.b_V)


def local_attention(pooled_keys: Tensor, w: LanWeights) -> Tensor:
    """Clip scores w_bs . ReLU(W_bk beta_i^K), normalized over clips."""
    scores = linear(relu(linear(pooled_keys, w.W_bk, w.b_bk)), w.w_bs)
    return softmax(scores.reshape(scores.shape[:-1]), axis=-1)


def lan_forward(Q: Tensor, K: Tensor, V: Tensor, w: LanWeights) -> LanOutput:
    pooled_keys = pool_keys(Q, K, w)
    pooled_values = pool_values(Q, V, w)
    attn = local_attention(pooled_keys, w)
    weights = expand_dims(attn, -1)
    local = (weights * pooled_values).sum(axis=-2)
    gate = sigmoid(linear(linear(local, w.W_bl1, w.b_bl1), w.W_bl2, w.b_bl2))
    global_feat = (weights * (expand_dims(gate, -2) * pooled_keys)).sum(axis=-2)
    return LanOutput(
        attn=attn,
        local=local,
        gate=gate,
        global_feat=global_feat,
        pooled_keys=pooled_keys,
        pooled_values=pooled_values,
    )
