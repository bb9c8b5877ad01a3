# vslan/models/state.py
from dataclasses import dataclass, field
from typing import List

from vslan.core.diffcore import Tensor


@dataclass
class LanOutput:
    """Everything one local attention block computes, for a single query or a batch."""
    attn: Tensor           # [..., N]
    local: Tensor          # [..., z]
    gate: Tensor           # [..., z]
    global_feat: Tensor    # [..., z]
    pooled_keys: Tensor    # [..., N, z]
    pooled_values: Tensor  # [..., N, z]


@dataclass
class EncoderOutput:
    local_final: Tensor            # [..., N, z]
    globals: List[Tensor]          # M x [..., z]
    g_tilde: Tensor                # [..., M*z]
    blocks: List[LanOutput] = field(default_factory=list)


@dataclass
class LatentState:
    mu: Tensor
    log_var: Tensor
    delta: Tensor


@dataclass
class VapenRollout:
    states: List[LatentState]
    pos: List[int]          # starts with BOS
    final_hidden: Tensor    # s_T
    g_bar: Tensor


@dataclass
class DecoderState:
    h: Tensor
    c: Tensor
    theta_prev: Tensor


@dataclass
class Hypothesis:
    tokens: List[int]
    log_prob: float
    state: DecoderState
    finished: bool = False

    @property
    def score(self) -> float:
        """Length-normalized log probability used for the final ranking."""
        return self.log_prob / max(len(self.tokens), 1)
