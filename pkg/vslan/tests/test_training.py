# vslan/tests/test_training.py
"""Test the losses, the epoch schedule, checkpoints and the training loop."""
import json
import math

import numpy as np
import pytest

from vslan.core.config import TrainConfig, load_run_config, settings
from vslan.core.diffcore import AdamState, Tensor, backward
from vslan.core.exceptions import CheckpointError, NumericAbortError, SequenceError
from vslan.core.workflow import Phase, create_schedule, phase_for_epoch, plan_epoch
from vslan.models.vocab import PAD
from vslan.services.checkpoint import CHECKPOINT_MAGIC, load_checkpoint, restore_model, save_checkpoint
from vslan.services.dataset import load_dataset, make_batch
from vslan.services.decoder import sample_decode
from vslan.services.losses import scst_loss, shared_loss, xe_loss
from vslan.services.synthetic import gen_synthetic
from vslan.services.trainer import LATEST_CHECKPOINT, Trainer, checkpoint_name, train
from vslan.tests.oracles import random_input


class TestLosses:
    """Cross-entropy, self-critical and shared losses."""

    def test_xe_uniform_logits(self):
        loss = xe_loss(Tensor(np.zeros((2, 3, 10))), np.array([[4, 5, 6], [7, 8, PAD]]))
        assert loss.item() == pytest.approx(math.log(10), abs=1e-12)

    def test_xe_confident_prediction(self):
        logits = np.full((2, 6), -50.0)
        logits[0, 4] = logits[1, 5] = 50.0
        assert xe_loss(Tensor(logits), [4, 5]).item() < 1e-12

    def test_xe_ignores_padded_positions(self, rng):
        logits = rng.standard_normal((1, 3, 6))
        other = logits.copy()
        other[0, 2] = rng.standard_normal(6) * 10
        a = xe_loss(Tensor(logits), [[4, 5, PAD]]).item()
        b = xe_loss(Tensor(other), [[4, 5, PAD]]).item()
        assert a == b

    def test_xe_batch_order_does_not_matter(self, rng):
        logits = rng.standard_normal((4, 3, 7))
        targets = np.array([[4, 5, 6], [4, PAD, PAD], [6, 5, PAD], [1, 2, 3]])
        order = np.array([2, 0, 3, 1])
        a = xe_loss(Tensor(logits), targets).item()
        b = xe_loss(Tensor(logits[order]), targets[order]).item()
        assert a == pytest.approx(b, abs=1e-12)

    def test_xe_gradient_is_softmax_minus_target(self, rng):
        logits = random_input(rng, 2, 5)
        backward(xe_loss(logits, [1, 3]))
        probs = np.exp(logits.data) / np.exp(logits.data).sum(axis=-1, keepdims=True)
        probs[[0, 1], [1, 3]] -= 1.0
        np.testing.assert_allclose(logits.grad, probs / 2, atol=1e-12)

    def test_xe_rejects_bad_targets(self):
        with pytest.raises(SequenceError):
            xe_loss(Tensor(np.zeros((1, 2, 5))), [[PAD, PAD]])
        with pytest.raises(SequenceError):
            xe_loss(Tensor(np.zeros((1, 2, 5))), [[1, 2, 3]])

    def test_scst_tie_gives_zero_gradient(self, rng):
        log_prob = random_input(rng, 3)
        loss = scst_loss(log_prob, [0.2, 0.5, 1.0], [0.2, 0.5, 1.0])
        backward(loss)
        assert loss.item() == 0.0
        np.testing.assert_array_equal(log_prob.grad, 0.0)

    def test_scst_tie_zeroes_every_parameter_gradient(self, rng, tiny_model):
        """Equal sample and greedy rewards leave the decoder parameters untouched."""
        z = tiny_model.spec.dims.z
        local = Tensor(rng.standard_normal((3, 4, z)))
        g_bar = Tensor(rng.standard_normal((3, z)))
        _, log_prob = sample_decode(local, g_bar, tiny_model.decoder, np.random.default_rng(1), max_len=5)
        rewards = [0.4, 1.5, 0.0]
        backward(scst_loss(log_prob, rewards, rewards))

        reached = [p for p in tiny_model.store if p.grad is not None]
        assert any(p.name == "dec.W_v" for p in reached)
        for p in reached:
            assert np.max(np.abs(p.grad)) < 1e-12, p.name

    def test_scst_pushes_up_better_samples(self, rng):
        log_prob = random_input(rng, 2)
        backward(scst_loss(log_prob, [1.0, 0.0], [0.5, 0.5]))
        np.testing.assert_allclose(log_prob.grad, [-0.25, 0.25], atol=1e-15)

    def test_scst_scalar_sample(self):
        log_prob = Tensor(-2.0, requires_grad=True)
        loss = scst_loss(log_prob, 0.7, 0.2)
        assert loss.item() == pytest.approx(1.0)

    def test_shared_loss(self):
        assert shared_loss(2.0, 4.0, 0.3) == pytest.approx(3.4)
        xe, rl = Tensor(2.0), Tensor(4.0)
        assert shared_loss(xe, rl, 1.0) is xe
        assert shared_loss(xe, rl, 0.0) is rl
        with pytest.raises(ValueError):
            shared_loss(xe, rl, 1.5)


class TestSchedule:
    """Phases and weights per epoch."""

    def test_phases_and_kl_ramp(self):
        config = TrainConfig(profile="desk", vapen_warmup_epochs=2, xe_pretrain_epochs=1, shared_epochs=2, eta=0.4)
        schedule = create_schedule(config)
        assert [p.phase for p in schedule] == [Phase.WARMUP, Phase.WARMUP, Phase.XE, Phase.SHARED, Phase.SHARED]
        assert [p.kl_weight for p in schedule] == [0.5, 1.0, 1.0, 1.0, 1.0]
        assert [p.eta for p in schedule] == [None, None, None, 0.4, 0.4]
        assert [p.trains_captioner for p in schedule] == [False, False, True, True, True]
        assert [p.uses_reward for p in schedule] == [False, False, False, True, True]

    def test_shared_phase_learning_rate(self):
        config = TrainConfig(profile="desk", lr=1e-3, shared_lr=1e-4, vapen_warmup_epochs=1, xe_pretrain_epochs=1,
                             shared_epochs=1)
        assert [p.lr for p in create_schedule(config)] == [1e-3, 1e-3, 1e-4]
        unset = TrainConfig(profile="desk", lr=1e-3, vapen_warmup_epochs=1, xe_pretrain_epochs=1, shared_epochs=1)
        assert [p.lr for p in create_schedule(unset)] == [1e-3, 1e-3, 1e-3]

    def test_without_annealing(self):
        config = TrainConfig(profile="desk", vapen_warmup_epochs=4, kl_anneal=False)
        assert plan_epoch(1, config).kl_weight == 1.0

    def test_without_latent_path(self):
        config = TrainConfig(profile="desk", use_vapen=False, vapen_warmup_epochs=5, xe_pretrain_epochs=1,
                             shared_epochs=1)
        assert config.total_epochs == 2
        schedule = create_schedule(config)
        assert [p.phase for p in schedule] == [Phase.XE, Phase.SHARED]
        assert all(p.elbo_weight == 0.0 for p in schedule)

    def test_xe_only_shared_phase_skips_reward(self):
        config = TrainConfig(profile="desk", vapen_warmup_epochs=0, xe_pretrain_epochs=0, shared_epochs=1, eta=1.0)
        assert not plan_epoch(1, config).uses_reward

    def test_epoch_range(self):
        config = TrainConfig(profile="desk", vapen_warmup_epochs=1, xe_pretrain_epochs=1, shared_epochs=1)
        for epoch in (0, 4):
            with pytest.raises(ValueError):
                phase_for_epoch(epoch, config)


class TestCheckpoint:
    """Binary checkpoint files."""

    def _saved(self, tmp_path, tiny_model):
        adam = AdamState(step=3)
        for p in list(tiny_model.store)[:4]:
            adam.m[p.name] = np.full(p.shape, 0.25)
            adam.v[p.name] = np.full(p.shape, 0.5)
        path = save_checkpoint(tmp_path / "model.vsln", tiny_model, adam, epoch=2, config={"seed": 1})
        return path, adam

    def test_round_trip(self, tmp_path, tiny_model):
        path, adam = self._saved(tmp_path, tiny_model)
        assert path.read_bytes()[:4] == CHECKPOINT_MAGIC
        ckpt = load_checkpoint(path)
        assert ckpt.meta.epoch == 2
        assert ckpt.meta.config == {"seed": 1}
        assert ckpt.meta.model == tiny_model.spec
        assert ckpt.adam.step == 3
        assert set(ckpt.adam.m) == set(adam.m)
        for name, values in tiny_model.store.state_dict().items():
            np.testing.assert_array_equal(ckpt.params[name], values)

    def test_restore_model(self, tmp_path, tiny_model):
        path, _ = self._saved(tmp_path, tiny_model)
        model, _ = restore_model(path)
        assert model.store.names() == tiny_model.store.names()
        for p in model.store:
            np.testing.assert_array_equal(p.data, tiny_model.store[p.name].data)

    @pytest.mark.parametrize("damage", ["magic", "version", "truncated", "trailing"])
    def test_damaged_files(self, tmp_path, tiny_model, damage):
        path, _ = self._saved(tmp_path, tiny_model)
        raw = bytearray(path.read_bytes())
        if damage == "magic":
            raw[:4] = b"NOPE"
        elif damage == "version":
            raw[4:8] = (9).to_bytes(4, "little")
        elif damage == "truncated":
            raw = raw[:-5]
        else:
            raw += b"\x00"
        path.write_bytes(bytes(raw))
        with pytest.raises(CheckpointError) as e:
            load_checkpoint(path)
        assert e.value.exit_code == 3

    def test_missing_file(self, tmp_path):
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "absent.vsln")


def _without_wall(log):
    return log.model_dump(exclude={"wall_s"})


class TestTrainer:
    """End-to-end training on the tiny synthetic corpus."""

    def test_one_epoch_per_phase(self, tmp_path, synthetic_dataset, run_config):
        out = tmp_path / "run"
        result = train(synthetic_dataset, run_config, out_dir=out)
        assert [log.phase for log in result.logs] == ["warmup", "xe", "shared"]
        warmup, xe, shared = result.logs
        assert warmup.loss_xe is None and warmup.loss_elbo is not None
        assert xe.loss_rl is None and xe.loss_xe is not None
        assert shared.loss_rl is not None
        for log in result.logs:
            assert 0.0 <= log.val_token_acc <= 1.0
            assert log.kl >= 0.0

        assert json.loads((out / "config.json").read_text())["seed"] == run_config.seed
        lines = (out / "epochs.jsonl").read_text().splitlines()
        assert [json.loads(line)["epoch"] for line in lines] == [1, 2, 3]
        for epoch in (1, 2, 3):
            assert (out / checkpoint_name(epoch)).exists()
        assert result.checkpoint == out / checkpoint_name(3)
        assert load_checkpoint(out / LATEST_CHECKPOINT).meta.epoch == 3

    def test_resume_repeats_the_epoch_exactly(self, tmp_path, synthetic_dataset, run_config, run_config_dict):
        full = train(synthetic_dataset, run_config, out_dir=tmp_path / "full")
        paths = dict(run_config_dict["paths"], checkpoint=str(tmp_path / "full" / checkpoint_name(2)))
        resumed_config = load_run_config(dict(run_config_dict, paths=paths))
        resumed = train(synthetic_dataset, resumed_config, out_dir=tmp_path / "resumed")

        assert [log.epoch for log in resumed.logs] == [3]
        assert _without_wall(resumed.logs[0]) == _without_wall(full.logs[-1])
        for name, values in full.model.store.state_dict().items():
            np.testing.assert_array_equal(resumed.model.store[name].data, values)

    def test_same_seed_same_run(self, tmp_path, synthetic_dataset, run_config):
        a = train(synthetic_dataset, run_config, out_dir=tmp_path / "a")
        b = train(synthetic_dataset, run_config, out_dir=tmp_path / "b")
        assert [_without_wall(x) for x in a.logs] == [_without_wall(x) for x in b.logs]
        for epoch in (1, 2, 3):
            name = checkpoint_name(epoch)
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
        assert (tmp_path / "a" / LATEST_CHECKPOINT).read_bytes() == (tmp_path / "b" / LATEST_CHECKPOINT).read_bytes()

    def test_without_latent_path(self, tmp_path, synthetic_dataset, run_config_dict):
        config = load_run_config(dict(run_config_dict, use_vapen=False))
        result = train(synthetic_dataset, config, out_dir=tmp_path / "novapen")
        assert result.model.vapen is None
        assert [log.phase for log in result.logs] == ["xe", "shared"]
        assert all(log.loss_elbo is None for log in result.logs)

    def test_without_decoder_lan(self, tmp_path, synthetic_dataset, run_config_dict):
        config = load_run_config(dict(run_config_dict, decoder_lan=False, shared_epochs=0))
        result = train(synthetic_dataset, config, out_dir=tmp_path / "nolan")
        assert result.model.decoder.lan is None
        assert len(result.logs) == 2

    def test_concatenated_streams(self, tmp_path, synthetic_dataset, run_config_dict):
        config = load_run_config(dict(run_config_dict, encoder="concat"))
        result = train(synthetic_dataset, config, out_dir=tmp_path / "concat")
        assert result.model.spec.encoder == "concat"
        assert result.model.g_tilde_dim == result.model.spec.dims.z
        assert not any(name.startswith("enc.fan") for name in result.model.store.names())
        model, _ = restore_model(result.checkpoint)
        assert model.encoder.variant == "concat"

    def test_non_finite_loss_aborts(self, tmp_path, synthetic_dataset, run_config):
        trainer = Trainer(run_config, synthetic_dataset, out_dir=tmp_path / "nan")
        trainer.model.decoder.b_v.data[...] = np.nan
        batch = make_batch(synthetic_dataset.videos[:2], [0, 0])
        with np.errstate(invalid="ignore"):
            with pytest.raises(NumericAbortError) as e:
                trainer.train_step(batch, trainer.schedule[1], np.random.default_rng(0), step=7)
        assert e.value.component == "loss_xe"
        assert (e.value.epoch, e.value.step) == (2, 7)
        assert e.value.exit_code == 4

    def test_train_step_moves_parameters(self, tmp_path, synthetic_dataset, run_config):
        trainer = Trainer(run_config, synthetic_dataset, out_dir=tmp_path / "step")
        before = trainer.model.store.state_dict()
        batch = make_batch(synthetic_dataset.videos[:3], [0, 1, 0])
        components = trainer.train_step(batch, trainer.schedule[1], np.random.default_rng(0), step=1)
        assert set(components) == {"loss_elbo", "kl", "loss_xe"}
        assert trainer.adam.step == 1
        changed = [name for name, values in before.items() if not np.array_equal(values, trainer.model.store[name].data)]
        assert "dec.W_v" in changed
        assert "vapen.W_init" in changed

    @pytest.mark.skipif(not settings.RUN_SLOW_TESTS, reason="set RUN_SLOW_TESTS=true for experiment-scale runs")
    def test_training_improves_token_accuracy(self, tmp_path, run_config_dict, synthetic_config):
        data_dir = tmp_path / "bigger"
        gen_synthetic(synthetic_config.model_copy(update={"n_videos": 60, "n_clips": 4}), data_dir)
        config = load_run_config(dict(run_config_dict, dims={}, batch_size=8, vapen_warmup_epochs=2,
                                      xe_pretrain_epochs=8, shared_epochs=0, eval_videos=16))
        result = train(load_dataset(data_dir), config, out_dir=tmp_path / "slow")
        assert result.logs[-1].val_token_acc > result.logs[2].val_token_acc
