# vslan/core/workflow.py
from dataclasses import dataclass
from enum import Enum
from typing import List, Optional

from vslan.core.config import TrainConfig


class Phase(str, Enum):
    WARMUP = "warmup"
    XE = "xe"
    SHARED = "shared"


@dataclass(frozen=True)
class EpochPlan:
    """What one epoch optimizes."""
    epoch: int
    phase: Phase
    kl_weight: float
    elbo_weight: float
    lr: float
    eta: Optional[float] = None

    @property
    def trains_captioner(self) -> bool:
        return self.phase is not Phase.WARMUP

    @property
    def uses_reward(self) -> bool:
        return self.phase is Phase.SHARED and self.eta is not None and self.eta < 1.0


def phase_for_epoch(epoch: int, config: TrainConfig) -> Phase:
    """Epochs are numbered from 1: warm-up, then XE pretraining, then the shared loss."""
    if epoch < 1 or epoch > config.total_epochs:
        raise ValueError(f"epoch {epoch} outside 1..{config.total_epochs}")
    warmup = config.vapen_warmup_epochs if config.use_vapen else 0
    if epoch <= warmup:
        return Phase.WARMUP
    if epoch <= warmup + config.xe_pretrain_epochs:
        return Phase.XE
    return Phase.SHARED


def plan_epoch(epoch: int, config: TrainConfig) -> EpochPlan:
    phase = phase_for_epoch(epoch, config)
    shared = phase is Phase.SHARED
    eta = config.eta if shared else None
    lr = config.shared_lr if shared and config.shared_lr is not None else config.lr
    if not config.use_vapen:
        return EpochPlan(epoch, phase, kl_weight=0.0, elbo_weight=0.0, lr=lr, eta=eta)
    if phase is Phase.WARMUP:
        # linear KL ramp over the warm-up
        kl = epoch / config.vapen_warmup_epochs if config.kl_anneal else 1.0
        return EpochPlan(epoch, phase, kl_weight=kl, elbo_weight=1.0, lr=lr)
    return EpochPlan(epoch, phase, kl_weight=1.0, elbo_weight=config.elbo_weight, lr=lr, eta=eta)


def create_schedule(config: TrainConfig) -> List[EpochPlan]:
    return [plan_epoch(e, config) for e in range(1, config.total_epochs + 1)]
