import dataclasses

import numpy as np
import pytest

from autodiff.layers import Linear
from autodiff.optim import OptimizerState, sgd_step
from byol import ByolConfig, build_pair, ema_update, init_pair, represent, train_step
from data import synth_generate
from encoder import Encoder, EncoderConfig, TokenizerConfig
from errors import CollapseError, ConfigError
from losses import byol_loss, cross_entropy_with_logits
from metrics import effective_rank
from model import JointModel
from pairing import build_pair_batches

from conftest import TINY_BYOL, TINY_ENCODER, TINY_TOKENIZER


def _moved(before, params):
    return any(not np.array_equal(v, p.data) for v, p in zip(before, params))


def _snapshot(params):
    return [p.data.copy() for p in params]


class TestInitPair:
    def test_target_is_frozen_copy(self, tiny_pair):
        assert all(p.frozen for p in tiny_pair.target.parameters())
        for online, target in tiny_pair.matched_parameters():
            np.testing.assert_array_equal(online.data, target.data)

    def test_target_has_no_predictor(self, tiny_pair):
        assert not any("predictor" in p.name for p in tiny_pair.target.parameters())
        assert any("predictor" in p.name for p in tiny_pair.online.parameters())

    def test_online_encoder_keeps_frozen_flags(self, tiny_encoder):
        tiny_encoder.embedding.freeze()
        pair = init_pair(tiny_encoder, TINY_BYOL, seed=3)
        assert pair.online.encoder.embedding.table.frozen
        assert not pair.online.encoder.layers[-1].linear.weight.frozen

    def test_deterministic(self, tiny_encoder):
        first = init_pair(tiny_encoder, TINY_BYOL, seed=11)
        second = init_pair(tiny_encoder, TINY_BYOL, seed=11)
        for a, b in zip(first.parameters(), second.parameters()):
            np.testing.assert_array_equal(a.data, b.data)


class TestBuildPair:
    def test_wraps_encoder_and_copies_it(self, rng):
        encoder = Encoder(TINY_ENCODER, TINY_TOKENIZER, rng, name="online.encoder")
        pair = build_pair(encoder, TINY_BYOL, rng)
        assert pair.online.encoder is encoder
        assert all(p.frozen for p in pair.target.parameters())
        for online, target in pair.matched_parameters():
            np.testing.assert_array_equal(online.data, target.data)

    def test_predictor_frozen_without_predictor(self, rng):
        encoder = Encoder(TINY_ENCODER, TINY_TOKENIZER, rng, name="online.encoder")
        pair = build_pair(encoder, dataclasses.replace(TINY_BYOL, use_predictor=False), rng)
        assert all(p.frozen for p in pair.online.predictor.parameters())
        assert not any(p.frozen for p in pair.online.projector.parameters())

    def test_predictor_trainable_by_default(self, tiny_pair):
        assert not any(p.frozen for p in tiny_pair.online.predictor.parameters())

    @pytest.mark.parametrize("use_predictor", [True, False])
    def test_joint_model_builds_the_same_pair(self, small_cfg, small_data, use_predictor):
        cfg = small_cfg.with_overrides({"byol.use_predictor": use_predictor})
        split, labels = small_data
        model = JointModel(cfg, split, labels, seed=0)
        assert model.pair.online.encoder is model.encoder
        for online, target in model.pair.matched_parameters():
            np.testing.assert_array_equal(online.data, target.data)
        assert all(p.frozen != use_predictor for p in model.pair.online.predictor.parameters())
        model.step()
        assert len(model.history()) == 1


class TestEmaUpdate:
    def _perturb_online(self, pair, rng):
        for parameter in pair.online.parameters():
            parameter.data[...] += rng.normal(size=parameter.shape)

    def test_delta_one_is_fixpoint(self, tiny_encoder, rng):
        pair = init_pair(tiny_encoder, dataclasses.replace(TINY_BYOL, delta=1.0), seed=0)
        before = _snapshot(pair.target.parameters())
        self._perturb_online(pair, rng)
        ema_update(pair)
        for value, parameter in zip(before, pair.target.parameters()):
            np.testing.assert_array_equal(parameter.data, value)

    def test_delta_zero_copies(self, tiny_encoder, rng):
        pair = init_pair(tiny_encoder, dataclasses.replace(TINY_BYOL, delta=0.0), seed=0)
        self._perturb_online(pair, rng)
        ema_update(pair)
        for online, target in pair.matched_parameters():
            np.testing.assert_array_equal(target.data, online.data)

    def test_geometric_decay(self, tiny_encoder, rng):
        delta = 0.9
        pair = init_pair(tiny_encoder, dataclasses.replace(TINY_BYOL, delta=delta), seed=0)
        self._perturb_online(pair, rng)
        initial = [np.linalg.norm(t.data - o.data) for o, t in pair.matched_parameters()]
        for step in range(1, 6):
            ema_update(pair)
            for gap, (online, target) in zip(initial, pair.matched_parameters()):
                assert np.linalg.norm(target.data - online.data) == pytest.approx(delta**step * gap, rel=1e-9, abs=1e-15)

    def test_equal_weights_stay_bit_identical(self, tiny_encoder, rng):
        pair = init_pair(tiny_encoder, dataclasses.replace(TINY_BYOL, delta=0.99), seed=0)
        for online, target in pair.matched_parameters():
            online.data[...] = rng.normal(size=online.shape)
            target.data[...] = online.data
        before = _snapshot(pair.target.parameters())
        for _ in range(50):
            ema_update(pair)
        for value, parameter in zip(before, pair.target.parameters()):
            np.testing.assert_array_equal(parameter.data, value)

    def test_invalid_delta(self):
        with pytest.raises(ConfigError):
            ByolConfig(delta=1.5)


class TestTrainStep:
    def test_only_online_side_moves_by_gradient(self, tiny_encoder, sentences):
        pair = init_pair(tiny_encoder, dataclasses.replace(TINY_BYOL, delta=1.0), seed=0)
        target_before = _snapshot(pair.target.parameters())
        online_before = _snapshot(pair.online.parameters())
        batch = build_pair_batches(sentences, batch_size=4, seed=0)[0]
        train_step(pair, batch, OptimizerState(learning_rate=0.1))
        for value, parameter in zip(target_before, pair.target.parameters()):
            np.testing.assert_array_equal(parameter.data, value)
        assert any(not np.array_equal(v, p.data) for v, p in zip(online_before, pair.online.parameters()))
        assert all(p.grad is None for p in pair.parameters())

    def test_returns_loss_before_update(self, tiny_pair, sentences):
        batch = build_pair_batches(sentences, batch_size=4, seed=0)[0]
        expected = byol_loss(batch.batch_a, batch.batch_b, tiny_pair).item()
        tiny_pair.online.zero_grad()
        assert train_step(tiny_pair, batch, OptimizerState(learning_rate=0.1)) == expected

    def test_target_equals_ema_replay(self, tiny_pair, sentences):
        """The target trajectory is a pure function of the online trajectory."""
        replay = _snapshot(tiny_pair.target.parameters())
        state = OptimizerState(learning_rate=0.2)
        delta = tiny_pair.delta
        for epoch in range(3):
            for batch in build_pair_batches(sentences, batch_size=4, seed=epoch):
                train_step(tiny_pair, batch, state)
                online = {o.name.split(".", 1)[1]: o.data for o, _ in tiny_pair.matched_parameters()}
                for i, target in enumerate(tiny_pair.target.parameters()):
                    replay[i] = replay[i] + (1.0 - delta) * (online[target.name.split(".", 1)[1]] - replay[i])
                    np.testing.assert_array_equal(target.data, replay[i])

    def test_zero_learning_rate_moves_nothing(self, tiny_pair, sentences):
        online_before = _snapshot(tiny_pair.online.parameters())
        state = OptimizerState(learning_rate=0.0)
        for epoch in range(2):
            for batch in build_pair_batches(sentences, batch_size=4, seed=epoch):
                train_step(tiny_pair, batch, state)
        for value, parameter in zip(online_before, tiny_pair.online.parameters()):
            np.testing.assert_array_equal(parameter.data, value)
        for online, target in tiny_pair.matched_parameters():
            np.testing.assert_array_equal(target.data, online.data)

    def test_degenerate_representation_aborts(self, tiny_pair, sentences):
        for parameter in tiny_pair.online.predictor.parameters():
            parameter.data[...] = 0.0
        batch = build_pair_batches(sentences, batch_size=4, seed=0)[0]
        with pytest.raises(CollapseError):
            train_step(tiny_pair, batch, OptimizerState(learning_rate=0.1))


class TestAblations:
    def test_without_stop_gradient_online_gets_both_paths(self, tiny_encoder, sentences):
        pair = init_pair(tiny_encoder, dataclasses.replace(TINY_BYOL, stop_gradient=False), seed=0)
        projection = pair.project_target(sentences[:2])
        assert projection.requires_grad

    def test_without_predictor(self, tiny_encoder, sentences):
        pair = init_pair(tiny_encoder, dataclasses.replace(TINY_BYOL, use_predictor=False), seed=0)
        np.testing.assert_array_equal(
            pair.predict_online(sentences[:2]).data,
            pair.online.project([s.text for s in sentences[:2]]).data,
        )

    @pytest.mark.parametrize(
        "overrides",
        [{"use_predictor": False}, {"use_predictor": False, "stop_gradient": False}, {"stop_gradient": False}],
    )
    def test_ablated_pair_trains(self, tiny_encoder, sentences, overrides):
        pair = init_pair(tiny_encoder, dataclasses.replace(TINY_BYOL, **overrides), seed=0)
        predictor_before = _snapshot(pair.online.predictor.parameters())
        projector_before = _snapshot(pair.online.projector.parameters())
        target_before = _snapshot(pair.target.parameters())
        state = OptimizerState(learning_rate=0.1)
        for batch in build_pair_batches(sentences, batch_size=4, seed=0):
            train_step(pair, batch, state)

        assert _moved(projector_before, pair.online.projector.parameters())
        assert _moved(target_before, pair.target.parameters())
        assert _moved(predictor_before, pair.online.predictor.parameters()) == pair.cfg.use_predictor
        assert all(p.grad is None for p in pair.parameters())


class TestRepresent:
    def test_projector_tap(self, tiny_pair, sentences):
        reps = represent(tiny_pair, sentences)
        assert reps.shape == (len(sentences), TINY_BYOL.projector_out)
        assert not reps.requires_grad

    def test_encoder_tap(self, tiny_encoder, sentences):
        pair = init_pair(tiny_encoder, dataclasses.replace(TINY_BYOL, tap="encoder"), seed=0)
        assert represent(pair, sentences).shape == (len(sentences), tiny_encoder.output_dim)

    def test_frozen_pair_survives_classifier_training(self, tiny_pair, sentences, rng):
        tiny_pair.freeze()
        pair_before = _snapshot(tiny_pair.parameters())
        reps_before = represent(tiny_pair, sentences).data.copy()
        head = Linear("classifier", TINY_BYOL.projector_out, 2, rng)
        labels = [s.predicate for s in sentences]
        state = OptimizerState(learning_rate=0.5)
        for _ in range(20):
            cross_entropy_with_logits(head(represent(tiny_pair, sentences)), labels).backward()
            sgd_step(tiny_pair.parameters() + head.parameters(), state)

        for value, parameter in zip(pair_before, tiny_pair.parameters()):
            np.testing.assert_array_equal(parameter.data, value)
        np.testing.assert_array_equal(represent(tiny_pair, sentences).data, reps_before)


@pytest.mark.slow
def test_positive_pairs_align_without_collapse(rng):
    dataset = synth_generate(num_classes=4, per_class=25, seed=7)
    encoder = Encoder(EncoderConfig(embed_dim=16, num_layers=2, hidden_dim=16), TokenizerConfig(vocab_size=512), rng)
    pair = init_pair(encoder, ByolConfig(projector_hidden=32, projector_out=16, predictor_hidden=32), seed=0)
    state = OptimizerState(learning_rate=0.1)
    losses = []
    epoch = 0
    while len(losses) < 200:
        for batch in build_pair_batches(dataset, batch_size=16, seed=epoch):
            losses.append(train_step(pair, batch, state))
        epoch += 1

    assert np.mean(losses[-20:]) < -0.8
    assert np.mean(losses[-20:]) < np.mean(losses[:20])
    assert effective_rank(represent(pair, dataset)) > 2.0
