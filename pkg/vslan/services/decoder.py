# vslan/services/decoder.py
"""
Caption decoder and generation.

One step: h_t, c_t = LSTM([E w_t ; Theta_{t-1} + G_bar]); the shared decoder
LAN attends over the encoder's local features with h_t as the query;
Theta_t = W_A [G_dec ; h_t]; logits = W_v ELU(Theta_t).

Every step function works on a batch of rows. Generation for a single video
tiles that video's local features across the rows (beam entries or samples).
"""
import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from vslan.core.config import ModelDims
from vslan.core.diffcore import (
    LstmParams,
    Parameter,
    ParameterStore,
    Tensor,
    as_tensor,
    concat,
    elu,
    index_select,
    linear,
    log_softmax,
    lstm_cell,
    make_lstm,
    no_grad,
    stack,
)
from vslan.core.exceptions import SequenceError, TokenError
from vslan.models.state import DecoderState, EncoderOutput, Hypothesis
from vslan.models.vocab import BOS, EOS, PAD
from vslan.services.lan import LanWeights, lan_forward, make_lan_weights
from vslan.services.vapen import VapenParams, sample_rollout

logger = logging.getLogger(__name__)

# Never generated: PAD fills finished rows, BOS only starts a sequence
BLOCKED_TOKENS = (PAD, BOS)

Tokens = Union[int, Sequence[int], np.ndarray]


@dataclass
class DecoderParams:
    E_word: Parameter     # [vocab, word_embed]
    lstm: LstmParams      # input word_embed + z, hidden d_h
    lan: Optional[LanWeights]
    W_A: Parameter        # [z, z + d_h]
    b_A: Parameter
    W_v: Parameter        # [vocab, z]
    b_v: Parameter

    @property
    def vocab_size(self) -> int:
        return self.E_word.shape[0]

    @property
    def hidden(self) -> int:
        return self.lstm.hidden

    @property
    def z(self) -> int:
        return self.W_A.shape[0]


def make_decoder_params(store: ParameterStore, dims: ModelDims, vocab_size: int, use_lan: bool = True) -> DecoderParams:
    z, d_h = dims.z, dims.d_h
    return DecoderParams(
        E_word=store.matrix("dec.E_word", vocab_size, dims.word_embed),
        lstm=make_lstm(store, "dec.lstm", dims.word_embed + z, d_h),
        lan=make_lan_weights(store, "dec.lan", d_h, z, z, dims) if use_lan else None,
        W_A=store.matrix("dec.W_A", z, z + d_h),
        b_A=store.vector("dec.b_A", z),
        W_v=store.matrix("dec.W_v", vocab_size, z),
        b_v=store.vector("dec.b_v", vocab_size),
    )


def init_state(params: DecoderParams, batch: Optional[int] = None) -> DecoderState:
    """h = c = 0 and Theta_0 = 0."""
    lead = () if batch is None else (batch,)
    return DecoderState(
        h=Tensor(np.zeros(lead + (params.hidden,))),
        c=Tensor(np.zeros(lead + (params.hidden,))),
        theta_prev=Tensor(np.zeros(lead + (params.z,))),
    )


def _check_tokens(tokens: np.ndarray, vocab_size: int) -> None:
    if tokens.size and (tokens.min() < 0 or tokens.max() >= vocab_size):
        raise TokenError(f"token index out of range [0, {vocab_size}): {tokens.tolist()}")


def decode_step(
    w_t: Tokens,
    state: DecoderState,
    g_bar: Tensor,
    local_feats: Tensor,
    params: DecoderParams,
) -> Tuple[Tensor, DecoderState]:
    tokens = np.asarray(w_t, dtype=np.int64)
    _check_tokens(tokens, params.vocab_size)
    embedded = index_select(params.E_word, int(tokens) if tokens.ndim == 0 else tokens)
    x = concat([embedded, state.theta_prev + g_bar], axis=-1)
    h, c = lstm_cell(x, state.h, state.c, params.lstm)
    local_feats = as_tensor(local_feats)
    if params.lan is not None:
        attended = lan_forward(h, local_feats, local_feats, params.lan).global_feat
    else:
        attended = local_feats.mean(axis=-2)
    theta = linear(concat([attended, h], axis=-1), params.W_A, params.b_A)
    logits = linear(elu(theta), params.W_v, params.b_v)
    return logits, DecoderState(h=h, c=c, theta_prev=theta)


def teacher_forced_logits(tokens: np.ndarray, g_bar: Tensor, local_feats: Tensor, params: DecoderParams) -> Tensor:
    """
    Logits for every target position of padded captions.

    ``tokens`` is [B, T+1] (BOS ... EOS PAD*); the result is [B, T, vocab]
    aligned with ``tokens[:, 1:]``.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 2 or tokens.shape[1] < 2:
        raise SequenceError(f"teacher forcing needs [batch, length >= 2] tokens, got shape {tokens.shape}")
    state = init_state(params, tokens.shape[0])
    steps = []
    for t in range(tokens.shape[1] - 1):
        logits, state = decode_step(tokens[:, t], state, g_bar, local_feats, params)
        steps.append(logits)
    return stack(steps, axis=1)


def sequence_log_prob(tokens: np.ndarray, g_bar: Tensor, local_feats: Tensor, params: DecoderParams) -> Tensor:
    """Summed log-probability of each caption in [B, T+1] (PAD targets excluded) -> [B]."""
    tokens = np.asarray(tokens, dtype=np.int64)
    logp = log_softmax(teacher_forced_logits(tokens, g_bar, local_feats, params), axis=-1)
    targets = tokens[:, 1:]
    rows, cols = np.indices(targets.shape)
    picked = index_select(logp, (rows, cols, targets))
    return (picked * (targets != PAD).astype(np.float64)).sum(axis=-1)


def _tile(t: Tensor, rows: int) -> Tensor:
    data = as_tensor(t).data
    return Tensor(np.broadcast_to(data, (rows,) + data.shape).copy())


def _step_log_probs(logits: Tensor) -> np.ndarray:
    logp = log_softmax(logits, axis=-1).data.copy()
    logp[..., list(BLOCKED_TOKENS)] = -np.inf
    return logp


def greedy_decode_batch(local_feats: Tensor, g_bar: Tensor, params: DecoderParams, max_len: int) -> List[List[int]]:
    """Argmax decoding of a batch ([B, N, z] features, [B, z] G_bar); each row stops at EOS."""
    if max_len < 1:
        raise SequenceError("max_len must be at least 1")
    batch = g_bar.shape[0]
    outputs: List[List[int]] = [[] for _ in range(batch)]
    done = np.zeros(batch, dtype=bool)
    with no_grad():
        state = init_state(params, batch)
        current = np.full(batch, BOS, dtype=np.int64)
        for _ in range(max_len):
            logits, state = decode_step(current, state, g_bar, local_feats, params)
            current = np.argmax(_step_log_probs(logits), axis=-1)
            for row in np.flatnonzero(~done):
                outputs[row].append(int(current[row]))
            done |= current == EOS
            if done.all():
                break
    return outputs


def greedy_decode(enc: EncoderOutput, g_bar: Tensor, params: DecoderParams, max_len: int = 25) -> List[int]:
    """Argmax tokens for one video, up to and including EOS."""
    return greedy_decode_batch(_tile(enc.local_final, 1), _tile(g_bar, 1), params, max_len)[0]


def _stack_states(hyps: Sequence[Hypothesis]) -> DecoderState:
    return DecoderState(
        h=Tensor(np.stack([hyp.state.h.data for hyp in hyps])),
        c=Tensor(np.stack([hyp.state.c.data for hyp in hyps])),
        theta_prev=Tensor(np.stack([hyp.state.theta_prev.data for hyp in hyps])),
    )


def _row_state(state: DecoderState, row: int) -> DecoderState:
    return DecoderState(
        h=Tensor(state.h.data[row]),
        c=Tensor(state.c.data[row]),
        theta_prev=Tensor(state.theta_prev.data[row]),
    )


def beam_decode(
    enc: EncoderOutput,
    g_bar: Tensor,
    params: DecoderParams,
    width: int = 5,
    max_len: int = 25,
) -> List[Hypothesis]:
    """
    Beam search for one video.

    Each step keeps the ``width`` best continuations by summed log-probability
    (ties go to the earlier beam entry, then the lower token id); continuations
    ending in EOS are retired. Hypotheses still open at ``max_len`` are kept
    as unfinished. Returns everything ranked by log_prob / length.
    """
    if width < 1:
        raise SequenceError("beam width must be at least 1")
    if max_len < 1:
        raise SequenceError("max_len must be at least 1")
    beam = [Hypothesis(tokens=[], log_prob=0.0, state=init_state(params))]
    retired: List[Hypothesis] = []
    with no_grad():
        for _ in range(max_len):
            if not beam:
                break
            rows = len(beam)
            current = np.array([hyp.tokens[-1] if hyp.tokens else BOS for hyp in beam], dtype=np.int64)
            logits, state = decode_step(
                current, _stack_states(beam), _tile(g_bar, rows), _tile(enc.local_final, rows), params
            )
            logp = _step_log_probs(logits)
            candidates = []
            for i, hyp in enumerate(beam):
                k = min(width, int(np.isfinite(logp[i]).sum()))
                best = np.lexsort((np.arange(logp.shape[1]), -logp[i]))[:k]
                candidates.extend((hyp.log_prob + float(logp[i, tok]), i, int(tok)) for tok in best)
            candidates.sort(key=lambda c: (-c[0], c[1], c[2]))

            previous = beam
            beam = []
            for total, i, tok in candidates[:width]:
                hyp = Hypothesis(
                    tokens=previous[i].tokens + [tok],
                    log_prob=total,
                    state=_row_state(state, i),
                    finished=tok == EOS,
                )
                (retired if hyp.finished else beam).append(hyp)
    return sorted(retired + beam, key=lambda hyp: -hyp.score)


def sample_decode(
    local_feats: Tensor,
    g_bar: Tensor,
    params: DecoderParams,
    rng: np.random.Generator,
    max_len: int = 25,
) -> Tuple[List[List[int]], Tensor]:
    """
    Multinomial sampling for a batch, recording the graph.

    Returns the sampled tokens per row (up to and including EOS) and the
    differentiable summed log-probability of each row's sample, shape [B].
    """
    batch = g_bar.shape[0]
    outputs: List[List[int]] = [[] for _ in range(batch)]
    active = np.ones(batch, dtype=bool)
    state = init_state(params, batch)
    current = np.full(batch, BOS, dtype=np.int64)
    rows = np.arange(batch)
    total: Optional[Tensor] = None
    for _ in range(max_len):
        logits, state = decode_step(current, state, g_bar, local_feats, params)
        logp = log_softmax(logits, axis=-1)
        probs = np.exp(_step_log_probs(logits))
        probs /= probs.sum(axis=-1, keepdims=True)
        drawn = np.array([rng.choice(probs.shape[1], p=probs[r]) for r in rows], dtype=np.int64)
        drawn[~active] = PAD
        step = index_select(logp, (rows, drawn)) * active.astype(np.float64)
        total = step if total is None else total + step
        for r in np.flatnonzero(active):
            outputs[r].append(int(drawn[r]))
        active &= drawn != EOS
        current = np.where(active, drawn, EOS)
        if not active.any():
            break
    return outputs, total


def diverse_decode(
    enc: EncoderOutput,
    params: DecoderParams,
    vapen: VapenParams,
    n_samples: int = 10,
    seed: int = 0,
    width: int = 5,
    max_len: int = 25,
) -> List[Tuple[List[int], List[int]]]:
    """One prior rollout per seed in seed..seed+n-1, each beam-decoded once; returns (tokens, POS) pairs."""
    if n_samples < 1:
        raise SequenceError("n_samples must be at least 1")
    results = []
    for k in range(n_samples):
        rollout = sample_rollout(enc.g_tilde, vapen, seed + k, max_len)
        best = beam_decode(enc, rollout.g_bar, params, width=width, max_len=max_len)[0]
        results.append((best.tokens, rollout.pos))
    logger.debug(f"diverse_decode drew {n_samples} rollouts from seed {seed}")
    return results
