# vslan/services/trainer.py
"""
Training loop: VaPEn warm-up, XE pretraining, then the shared XE + SCST loss.

Randomness of epoch e comes only from default_rng([seed, e]), so a run resumed
from the checkpoint of epoch e - 1 repeats epoch e exactly.
"""
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from vslan.core.config import RunConfig
from vslan.core.diffcore import AdamState, Tensor, adam_step, backward, no_grad
from vslan.core.exceptions import ConfigError, NumericAbortError
from vslan.core.workflow import EpochPlan, create_schedule
from vslan.models.data import EpochLog, ModelSpec, VideoExample
from vslan.models.vocab import PAD
from vslan.services.checkpoint import restore_model, save_checkpoint
from vslan.services.dataset import Batch, Dataset, batch_iter, make_batch
from vslan.services.decoder import greedy_decode_batch, sample_decode, teacher_forced_logits
from vslan.services.losses import scst_loss, shared_loss, xe_loss
from vslan.services.metrics import CorpusStats, cider
from vslan.services.network import VslanModel, build_model, encode, inference_g_bar
from vslan.services.rewards import RewardProvider, build_reward_provider
from vslan.services.vapen import ElboResult, deterministic_g_bar, elbo

logger = logging.getLogger(__name__)

EPOCH_LOG_FILE = "epochs.jsonl"
LATEST_CHECKPOINT = "latest.vsln"


@dataclass
class TrainResult:
    model: VslanModel
    logs: List[EpochLog] = field(default_factory=list)
    checkpoint: Optional[Path] = None


def checkpoint_name(epoch: int) -> str:
    return f"ckpt_epoch{epoch:03d}.vsln"


def model_spec_for(config: RunConfig, dataset: Dataset) -> ModelSpec:
    return ModelSpec(
        dims=config.resolved_dims(),
        streams=dataset.streams,
        vocab_size=len(dataset.vocab),
        pos_vocab_size=len(dataset.tagset),
        use_vapen=config.use_vapen,
        decoder_lan=config.decoder_lan,
        encoder=config.encoder,
    )


def _finite(value: Tensor, component: str, epoch: int, step: int) -> float:
    scalar = float(value.data)
    if not math.isfinite(scalar):
        raise NumericAbortError(component, epoch, step)
    return scalar


class Trainer:
    def __init__(
        self,
        config: RunConfig,
        dataset: Dataset,
        out_dir: Optional[Path] = None,
        reward: Optional[RewardProvider] = None,
    ):
        self.config = config
        self.dataset = dataset
        self.out_dir = Path(out_dir or config.paths.out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.schedule = create_schedule(config)
        spec = model_spec_for(config, dataset)
        if config.paths.checkpoint:
            self.model, ckpt = restore_model(config.paths.checkpoint)
            if self.model.spec != spec:
                raise ConfigError(f"checkpoint {config.paths.checkpoint} was trained with a different model spec")
            self.adam = ckpt.adam
            self.start_epoch = ckpt.meta.epoch + 1
            logger.info(f"resuming from {config.paths.checkpoint} at epoch {self.start_epoch}")
        else:
            self.model = build_model(spec, seed=config.seed)
            self.adam = AdamState()
            self.start_epoch = 1
        self._reward = reward
        self.eval_videos = dataset.videos[:config.eval_videos]
        self.eval_stats = CorpusStats.from_references([v.texts for v in self.eval_videos])

    @property
    def reward(self) -> RewardProvider:
        if self._reward is None:
            self._reward = build_reward_provider(self.config.reward, [v.texts for v in self.dataset.videos])
        return self._reward

    # ------------------------------------------------------------------ steps

    def _posterior(self, batch: Batch, g_tilde: Tensor, plan: EpochPlan, rng: np.random.Generator) -> ElboResult:
        vapen = self.model.require_vapen()
        noise = rng.standard_normal((batch.size, batch.pos.shape[1] - 1, vapen.delta))
        return elbo(batch.pos, g_tilde, vapen, noise, kl_weight=plan.kl_weight)

    def _rl_loss(self, batch: Batch, enc_local: Tensor, g_bar: Tensor, rng: np.random.Generator) -> Tensor:
        vocab = self.dataset.vocab
        samples, sample_log_prob = sample_decode(enc_local, g_bar, self.model.decoder, rng, self.config.max_len)
        greedy = greedy_decode_batch(Tensor(enc_local.data), Tensor(g_bar.data), self.model.decoder,
                                     self.config.max_len)
        r_sample = self.reward.score([vocab.decode(s) for s in samples], batch.references, rng)
        r_greedy = self.reward.score([vocab.decode(g) for g in greedy], batch.references, rng)
        return scst_loss(sample_log_prob, r_sample, r_greedy)

    def train_step(self, batch: Batch, plan: EpochPlan, rng: np.random.Generator, step: int) -> Dict[str, float]:
        """Forward, NaN check, backward and one Adam update; returns the loss components."""
        model, epoch = self.model, plan.epoch
        enc = encode(model, batch.streams)
        components: Dict[str, float] = {}
        total: Optional[Tensor] = None

        posterior = None
        if model.vapen is not None:
            posterior = self._posterior(batch, enc.g_tilde, plan, rng)
            components["loss_elbo"] = _finite(posterior.loss, "loss_elbo", epoch, step)
            components["kl"] = _finite(posterior.kl, "kl", epoch, step)
            total = posterior.loss * plan.elbo_weight

        if plan.trains_captioner:
            g_bar = posterior.g_bar if posterior is not None else deterministic_g_bar(enc.g_tilde, model.no_vapen)
            logits = teacher_forced_logits(batch.tokens, g_bar, enc.local_final, model.decoder)
            xe = xe_loss(logits, batch.tokens[:, 1:])
            components["loss_xe"] = _finite(xe, "loss_xe", epoch, step)
            caption_loss = xe
            if plan.uses_reward:
                rl = self._rl_loss(batch, enc.local_final, g_bar, rng)
                components["loss_rl"] = _finite(rl, "loss_rl", epoch, step)
                caption_loss = shared_loss(xe, rl, plan.eta)
            total = caption_loss if total is None else total + caption_loss

        _finite(total, "total_loss", epoch, step)
        backward(total)
        adam_step(model.store, self.adam, lr=plan.lr, clip_norm=self.config.clip_norm)
        model.store.zero_grad()
        return components

    # ------------------------------------------------------------- validation

    def _eval_batches(self, videos: Sequence[VideoExample]) -> List[Batch]:
        by_clips: Dict[int, List[VideoExample]] = {}
        for v in videos:
            by_clips.setdefault(v.n_clips, []).append(v)
        size = self.config.batch_size
        batches = []
        for n_clips in sorted(by_clips):
            group = by_clips[n_clips]
            batches.extend(make_batch(group[i:i + size], [0] * len(group[i:i + size]))
                           for i in range(0, len(group), size))
        return batches

    def validate(self) -> Tuple[float, float]:
        """
        Teacher-forced token accuracy on each evaluation video's first caption
        (posterior G_bar at zero noise) and greedy CIDEr with inference G_bar.
        """
        model, config = self.model, self.config
        correct = counted = 0
        scores = []
        with no_grad():
            for batch in self._eval_batches([v for v in self.eval_videos if v.captions]):
                enc = encode(model, batch.streams)
                if model.vapen is not None:
                    zero = np.zeros((batch.size, batch.pos.shape[1] - 1, model.vapen.delta))
                    g_bar = elbo(batch.pos, enc.g_tilde, model.vapen, zero).g_bar
                else:
                    g_bar = deterministic_g_bar(enc.g_tilde, model.no_vapen)
                logits = teacher_forced_logits(batch.tokens, g_bar, enc.local_final, model.decoder)
                targets = batch.tokens[:, 1:]
                mask = targets != PAD
                correct += int(((np.argmax(logits.data, axis=-1) == targets) & mask).sum())
                counted += int(mask.sum())

                inference = [
                    inference_g_bar(model, Tensor(enc.g_tilde.data[i]), config.seed, config.max_len)
                    for i in range(batch.size)
                ]
                g_inf = Tensor(np.stack([g.data for g in inference]))
                captions = greedy_decode_batch(enc.local_final, g_inf, model.decoder, config.max_len)
                for video, tokens in zip(batch.videos, captions):
                    scores.append(cider(self.dataset.vocab.decode(tokens), video.texts, self.eval_stats))
        token_acc = correct / counted if counted else 0.0
        return token_acc, (sum(scores) / len(scores) if scores else 0.0)

    # ------------------------------------------------------------------ epochs

    def train_epoch(self, plan: EpochPlan) -> EpochLog:
        started = time.perf_counter()
        rng = np.random.default_rng([self.config.seed, plan.epoch])
        order_seed = int(rng.integers(2 ** 32))
        sums: Dict[str, float] = {}
        steps = 0
        for steps, batch in enumerate(batch_iter(self.dataset.videos, self.config.batch_size, order_seed), 1):
            for key, value in self.train_step(batch, plan, rng, steps).items():
                sums[key] = sums.get(key, 0.0) + value
        means = {key: value / steps for key, value in sums.items()} if steps else {}
        token_acc, val_cider = self.validate()
        return EpochLog(
            epoch=plan.epoch,
            phase=plan.phase.value,
            loss_xe=means.get("loss_xe"),
            loss_rl=means.get("loss_rl"),
            loss_elbo=means.get("loss_elbo"),
            kl=means.get("kl"),
            val_token_acc=token_acc,
            val_cider=val_cider,
            wall_s=time.perf_counter() - started,
        )

    def run(self) -> TrainResult:
        result = TrainResult(model=self.model)
        config_echo = self.config.model_dump(mode="json")
        (self.out_dir / "config.json").write_text(json.dumps(config_echo, indent=2, sort_keys=True) + "\n",
                                                  encoding="utf-8")
        log_path = self.out_dir / EPOCH_LOG_FILE
        if self.start_epoch == 1 and log_path.exists():
            log_path.unlink()
        for plan in self.schedule[self.start_epoch - 1:]:
            log = self.train_epoch(plan)
            with open(log_path, "a", encoding="utf-8") as fh:
                fh.write(log.model_dump_json() + "\n")
            path = save_checkpoint(self.out_dir / checkpoint_name(plan.epoch), self.model, self.adam,
                                   plan.epoch, config_echo)
            save_checkpoint(self.out_dir / LATEST_CHECKPOINT, self.model, self.adam, plan.epoch, config_echo)
            result.logs.append(log)
            result.checkpoint = path
            logger.info(
                f"epoch {plan.epoch} [{plan.phase.value}] xe={log.loss_xe} rl={log.loss_rl} "
                f"elbo={log.loss_elbo} kl={log.kl} acc={log.val_token_acc:.4f} cider={log.val_cider:.4f}"
            )
        return result


def train(dataset: Dataset, config: RunConfig, out_dir: Optional[Path] = None,
          reward: Optional[RewardProvider] = None) -> TrainResult:
    return Trainer(config, dataset, out_dir=out_dir, reward=reward).run()
