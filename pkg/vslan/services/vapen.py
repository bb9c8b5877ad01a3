# vslan/services/vapen.py
"""
Variational POS encoder: a recurrent latent-variable model over part-of-speech
sequences, conditioned on the encoder's concatenated global vector.

Training runs the posterior over gold tags and minimizes the negated ELBO.
Inference samples from the prior; the final hidden state of a rollout is
projected to the decoder's global feature.
"""
import logging
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple, Union

import numpy as np

from vslan.core.config import ModelDims
from vslan.core.diffcore import (
    LstmParams,
    Parameter,
    ParameterStore,
    Tensor,
    as_tensor,
    concat,
    gaussian_sample,
    index_select,
    kl_diag_gaussian,
    linear,
    log_softmax,
    lstm_cell,
    make_lstm,
    no_grad,
    relu,
    tanh,
)
from vslan.core.exceptions import SequenceError, TokenError
from vslan.models.state import LatentState, VapenRollout
from vslan.models.vocab import POS_BOS, POS_EOS, POS_PAD

logger = logging.getLogger(__name__)


@dataclass
class GaussianHead:
    """One-hidden-layer ReLU MLP producing (mu, log_var)."""
    W_h: Parameter
    b_h: Parameter
    W_mu: Parameter
    b_mu: Parameter
    W_lv: Parameter
    b_lv: Parameter

    def __call__(self, x: Tensor) -> Tuple[Tensor, Tensor]:
        hidden = relu(linear(x, self.W_h, self.b_h))
        return linear(hidden, self.W_mu, self.b_mu), linear(hidden, self.W_lv, self.b_lv)


@dataclass
class VapenParams:
    E_pos: Parameter      # [pos_vocab, pos_embed]
    W_init: Parameter     # [d_h, M*z]
    b_init: Parameter
    prior: GaussianHead
    posterior: GaussianHead
    W_e1: Parameter       # [d_h, delta + d_h]
    b_e1: Parameter
    W_e2: Parameter       # [pos_vocab, d_h]
    b_e2: Parameter
    lstm: LstmParams
    W_g: Parameter        # [z, d_h]

    @property
    def pos_vocab_size(self) -> int:
        return self.E_pos.shape[0]

    @property
    def delta(self) -> int:
        return self.W_e1.shape[1] - self.lstm.hidden


@dataclass
class NoVapenParams:
    """Linear stand-in for the latent path: G_bar = W_nv g_tilde + b."""
    W_nv: Parameter
    b_nv: Parameter


@dataclass
class ElboResult:
    loss: Tensor          # kl_weight * kl + recon, averaged over sequences
    kl: Tensor
    recon: Tensor
    final_hidden: Tensor
    g_bar: Tensor


def _gaussian_head(store: ParameterStore, prefix: str, in_dim: int, hidden: int, out_dim: int) -> GaussianHead:
    return GaussianHead(
        W_h=store.matrix(f"{prefix}.W_h", hidden, in_dim),
        b_h=store.vector(f"{prefix}.b_h", hidden),
        W_mu=store.matrix(f"{prefix}.W_mu", out_dim, hidden),
        b_mu=store.vector(f"{prefix}.b_mu", out_dim),
        W_lv=store.matrix(f"{prefix}.W_lv", out_dim, hidden),
        b_lv=store.vector(f"{prefix}.b_lv", out_dim),
    )


def make_vapen_params(store: ParameterStore, dims: ModelDims, g_tilde_dim: int, pos_vocab_size: int) -> VapenParams:
    d_h, delta, e_p = dims.d_h, dims.delta, dims.pos_embed
    return VapenParams(
        E_pos=store.matrix("vapen.E_pos", pos_vocab_size, e_p),
        W_init=store.matrix("vapen.W_init", d_h, g_tilde_dim),
        b_init=store.vector("vapen.b_init", d_h),
        prior=_gaussian_head(store, "vapen.prior", d_h, d_h, delta),
        posterior=_gaussian_head(store, "vapen.posterior", e_p + d_h, d_h, delta),
        W_e1=store.matrix("vapen.emit.W_h", d_h, delta + d_h),
        b_e1=store.vector("vapen.emit.b_h", d_h),
        W_e2=store.matrix("vapen.emit.W_out", pos_vocab_size, d_h),
        b_e2=store.vector("vapen.emit.b_out", pos_vocab_size),
        lstm=make_lstm(store, "vapen.lstm", e_p + delta, d_h),
        W_g=store.matrix("vapen.W_g", dims.z, d_h),
    )


def make_no_vapen_params(store: ParameterStore, dims: ModelDims, g_tilde_dim: int) -> NoVapenParams:
    return NoVapenParams(
        W_nv=store.matrix("novapen.W", dims.z, g_tilde_dim),
        b_nv=store.vector("novapen.b", dims.z),
    )


def deterministic_g_bar(g_tilde: Tensor, params: NoVapenParams) -> Tensor:
    return linear(g_tilde, params.W_nv, params.b_nv)


def initial_state(g_tilde: Tensor, params: VapenParams) -> Tuple[Tensor, Tensor]:
    """s_0 = tanh(W_init g_tilde + b), c_0 = 0."""
    s0 = tanh(linear(as_tensor(g_tilde), params.W_init, params.b_init))
    return s0, Tensor(np.zeros(s0.shape))


def prior_step(s_prev: Tensor, params: VapenParams) -> Tuple[Tensor, Tensor]:
    return params.prior(s_prev)


def posterior_step(pos_embedding: Tensor, s_prev: Tensor, params: VapenParams) -> Tuple[Tensor, Tensor]:
    return params.posterior(concat([pos_embedding, s_prev], axis=-1))


def emit_pos(delta: Tensor, s_prev: Tensor, params: VapenParams) -> Tensor:
    """Categorical logits over the POS tagset."""
    hidden = relu(linear(concat([delta, s_prev], axis=-1), params.W_e1, params.b_e1))
    return linear(hidden, params.W_e2, params.b_e2)


def embed_pos(tags, params: VapenParams) -> Tensor:
    tags = np.asarray(tags, dtype=np.int64)
    if tags.size and (tags.min() < 0 or tags.max() >= params.pos_vocab_size):
        raise TokenError(f"POS index out of range [0, {params.pos_vocab_size}): {tags.tolist()}")
    return index_select(params.E_pos, int(tags) if tags.ndim == 0 else tags)


def elbo(
    pos_gt: Union[Sequence[int], np.ndarray],
    g_tilde: Tensor,
    params: VapenParams,
    noise: np.ndarray,
    kl_weight: float = 1.0,
) -> ElboResult:
    """
    Teacher-forced posterior rollout over gold tags.

    ``pos_gt`` is [T+1] or [B, T+1] starting with BOS; PAD targets are masked
    and freeze the recurrent state. ``noise`` is [T, delta] or [B, T, delta].
    Totals are summed over steps and averaged over sequences.
    """
    pos = np.asarray(pos_gt, dtype=np.int64)
    single = pos.ndim == 1
    if single:
        pos = pos[None, :]
        g_tilde = as_tensor(g_tilde).reshape(1, -1)
        noise = np.asarray(noise)[None, ...]
    batch, steps = pos.shape[0], pos.shape[1] - 1
    if steps < 1:
        raise SequenceError("elbo needs at least one POS target after BOS")
    valid = (pos[:, 1:] != POS_PAD).astype(np.float64)
    if np.any(valid.sum(axis=1) == 0):
        raise SequenceError("elbo got a POS sequence with no targets")
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != (batch, steps, params.delta):
        raise SequenceError(f"noise shape {noise.shape} does not match ({batch}, {steps}, {params.delta})")

    s, c = initial_state(g_tilde, params)
    kl_total: Optional[Tensor] = None
    recon_total: Optional[Tensor] = None
    rows = np.arange(batch)
    for t in range(steps):
        target = pos[:, t + 1]
        mask = valid[:, t]
        e_p = embed_pos(target, params)
        mu_p, lv_p = prior_step(s, params)
        mu_q, lv_q = posterior_step(e_p, s, params)
        delta = gaussian_sample(mu_q, lv_q, noise[:, t, :])
        logits = emit_pos(delta, s, params)
        nll = -index_select(log_softmax(logits, axis=-1), (rows, target))
        kl_t = kl_diag_gaussian(mu_q, lv_q, mu_p, lv_p)
        step_kl = (kl_t * mask).sum()
        step_recon = (nll * mask).sum()
        kl_total = step_kl if kl_total is None else kl_total + step_kl
        recon_total = step_recon if recon_total is None else recon_total + step_recon

        s_new, c_new = lstm_cell(concat([e_p, delta], axis=-1), s, c, params.lstm)
        keep = Tensor(mask[:, None])
        s = s_new * keep + s * (1.0 - keep)
        c = c_new * keep + c * (1.0 - keep)

    kl = kl_total * (1.0 / batch)
    recon = recon_total * (1.0 / batch)
    g_bar = linear(s, params.W_g)
    if single:
        s, g_bar = s[0], g_bar[0]
    return ElboResult(loss=kl * kl_weight + recon, kl=kl, recon=recon, final_hidden=s, g_bar=g_bar)


def sample_rollout(g_tilde: Tensor, params: VapenParams, rng_seed: int, max_len: int) -> VapenRollout:
    """
    Generative rollout from the prior for one video.

    Draws delta_t from the prior, samples a tag from the emission (PAD and BOS
    excluded), and stops after EOS or ``max_len`` tags.
    """
    if max_len < 1:
        raise SequenceError("max_len must be at least 1")
    rng = np.random.default_rng(rng_seed)
    states = []
    tags = [POS_BOS]
    with no_grad():
        s, c = initial_state(g_tilde, params)
        for _ in range(max_len):
            mu_p, lv_p = prior_step(s, params)
            delta = gaussian_sample(mu_p, lv_p, rng.standard_normal(mu_p.shape))
            logits = emit_pos(delta, s, params).data.copy()
            logits[[POS_PAD, POS_BOS]] = -np.inf
            probs = np.exp(logits - logits.max())
            probs /= probs.sum()
            tag = int(rng.choice(len(probs), p=probs))
            states.append(LatentState(mu=mu_p, log_var=lv_p, delta=delta))
            tags.append(tag)
            s, c = lstm_cell(concat([embed_pos(tag, params), delta], axis=-1), s, c, params.lstm)
            if tag == POS_EOS:
                break
        g_bar = linear(s, params.W_g)
    return VapenRollout(states=states, pos=tags, final_hidden=s, g_bar=g_bar)
