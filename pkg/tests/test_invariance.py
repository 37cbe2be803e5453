#!/usr/bin/env python3
"""
Tests for the invariance model: variants, components, losses, the minimax
schedule, inference and checkpoints
"""

import json
import os
import sys

import numpy as np
import pytest

# Add src directory to path
sys.path.insert(0, os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), 'src'))

from encoders import FeaturePipeline
from errors import ConfigError, DataError, DimensionError, ParseError, TrainingError, VariantError, VersionError
from invariance import (P1_GROUPS, P2_GROUPS, LossWeights, TrainSchedule, TrainingBatch, WindowDataset,
                        _set_phase, build_model, compute_terms, discriminate, dropout_mask, encode_split,
                        estimate_state, export_embeddings, latent_codes, load_checkpoint, loss_full, loss_nuis,
                        p1_objective, p2_objective, predict, predict_proba, reconstruct, save_checkpoint,
                        train_minimax)
from numerics import Adam, AdamHyper, ParamGroup, Tensor, backward, grad_check


F, S, K, L, HID, T = 5, 3, 2, 3, 4, 4


def model(kind='full', mode='causal', seed=0, **kwargs):
    return build_model(kind, F, S, K if kind == 'full' else 0, L, HID, T, mode, seed=seed, **kwargs)


def batch(seed=0, size=6, techniques=True):
    rng = np.random.default_rng(seed)
    return TrainingBatch(rng.normal(size=(size, T, F)), rng.integers(0, S, size=size),
                         rng.integers(0, K, size=size) if techniques else None)


def block_features(n_trials=2, length=30, seed=0):
    """Per-frame features that carry the state as a noisy one-hot plus a technique offset"""
    rng = np.random.default_rng(seed)
    ids, features, states = [], [], []
    for i in range(n_trials):
        labels = np.repeat(np.arange(S), length // S)
        H = np.zeros((len(labels), F))
        H[np.arange(len(labels)), labels] = 1.0
        H[:, S:] = i % K
        features.append(H + 0.05 * rng.normal(size=H.shape))
        states.append(labels)
        ids.append(f'{i:04d}')
    return ids, features, states


def window_dataset(stride=1, **kwargs):
    ids, features, states = block_features(**kwargs)
    return WindowDataset(ids, features, states, T, 'causal', [i % K for i in range(len(ids))], stride=stride)


class TestVariants:
    def test_groups_per_kind(self):
        assert set(model('na').groups) == {'estimator'}
        assert set(model('no').groups) == {'encoder', 'estimator', 'reconstructor', 'disentangler1',
                                           'disentangler2'}
        assert set(model('full').groups) == set(P1_GROUPS) | set(P2_GROUPS)

    def test_na_estimator_reads_features(self):
        assert model('na').groups['estimator']['fwd_weight'].shape == (F + HID, 4 * HID)
        assert model('full').groups['estimator']['fwd_weight'].shape == (L + HID, 4 * HID)

    def test_noncausal_has_backward_recurrence(self):
        groups = model('no', mode='noncausal').groups['estimator']
        assert 'bwd_weight' in groups.tensors
        assert groups['out_weight'].shape == (2 * HID, S)

    def test_weights_per_kind(self):
        w = LossWeights(1.0, 0.5, 0.1, 0.1)
        assert w.for_kind('na') == LossWeights(1.0, 0.0, 0.0, 0.0, w.dropout)
        assert w.for_kind('no').delta == 0.0 and w.for_kind('no').gamma == 0.1
        assert w.for_kind('full') == w

    def test_full_needs_two_techniques(self):
        with pytest.raises(ConfigError):
            build_model('full', F, S, 1)

    def test_unknown_kind(self):
        with pytest.raises(VariantError):
            build_model('partial', F, S)

    def test_invalid_weights(self):
        with pytest.raises(ConfigError):
            model('no', weights=LossWeights(dropout=1.0))

    def test_seeded_initialisation(self):
        assert model(seed=3).snapshot() == model(seed=3).snapshot()
        assert model(seed=3).snapshot() != model(seed=4).snapshot()


class TestComponents:
    def test_codes_are_bounded(self):
        split = encode_split(Tensor(np.random.default_rng(0).normal(scale=50.0, size=(7, F))),
                             model().groups['encoder'])
        assert split.e1.shape == (7, L) and split.e2.shape == (7, L)
        assert np.all(np.abs(split.e1.data) <= 1.0)

    def test_estimate_is_a_distribution(self):
        m = model('na')
        probs = estimate_state(np.random.default_rng(0).normal(size=(T, F)), m.groups['estimator']).data
        assert probs.shape == (S,) and abs(probs.sum() - 1.0) < 1e-12

    def test_window_length_checked(self):
        m = model('na')
        with pytest.raises(DimensionError):
            estimate_state(np.zeros((T + 1, F)), m.groups['estimator'], t_obs=T)

    def test_causal_estimator_cannot_run_noncausal(self):
        m = model('na')
        with pytest.raises(ConfigError):
            estimate_state(np.zeros((T, F)), m.groups['estimator'], mode='noncausal')

    def test_noncausal_uses_frames_after_centre(self):
        m = model('na', mode='noncausal')
        rng = np.random.default_rng(1)
        window = rng.normal(size=(T, F))
        changed = window.copy()
        changed[-1] += 5.0
        a = estimate_state(window, m.groups['estimator'], 'noncausal').data
        b = estimate_state(changed, m.groups['estimator'], 'noncausal').data
        assert not np.allclose(a, b)

    def test_batch_matches_single_window(self):
        m = model('na', mode='noncausal')
        windows = np.random.default_rng(2).normal(size=(3, T, F))
        batch_probs = estimate_state(windows, m.groups['estimator'], 'noncausal').data
        single = estimate_state(windows[1], m.groups['estimator'], 'noncausal').data
        assert np.allclose(batch_probs[1], single)

    def test_dropout_only_while_training(self):
        m = model()
        rng = np.random.default_rng(0)
        e1, e2 = Tensor(rng.normal(size=(4, L))), Tensor(rng.normal(size=(4, L)))
        params = m.groups['reconstructor']
        clean = reconstruct(e2, e1, 0.0, params).data
        assert np.array_equal(reconstruct(e2, e1, 0.9, params, seed=1, training=False).data, clean)
        noisy = reconstruct(e2, e1, 0.9, params, seed=1).data
        assert not np.allclose(noisy, clean)
        assert np.array_equal(noisy, reconstruct(e2, e1, 0.9, params, seed=1).data)

    def test_dropout_does_not_rescale(self):
        group = ParamGroup('r', {'weight': np.vstack([np.zeros((L, L)), np.eye(L)]), 'bias': np.zeros(L)})
        e1 = Tensor(np.ones((50, L)))
        out = reconstruct(Tensor(np.zeros((50, L))), e1, 0.5, group, seed=3).data
        assert set(np.unique(out)) <= {0.0, 1.0}

    def test_dropout_rate_range(self):
        m = model()
        with pytest.raises(ConfigError):
            reconstruct(np.zeros(L), np.zeros(L), 1.0, m.groups['reconstructor'])

    def test_dropout_zeroes_the_configured_share(self):
        mask = dropout_mask((10000,), 0.4, np.random.default_rng(0))
        assert set(np.unique(mask)) <= {0.0, 1.0}
        assert 0.37 <= 1.0 - mask.mean() <= 0.43

    def test_untrained_discriminator_is_at_chance(self):
        m = model()
        rng = np.random.default_rng(4)
        e1 = encode_split(Tensor(rng.normal(size=(1000, F))), m.groups['encoder']).e1
        labels = rng.integers(0, K, size=1000)
        accuracy = np.mean(np.argmax(discriminate(e1, m).data, axis=1) == labels)
        assert abs(accuracy - 1.0 / K) <= 0.1


class TestLosses:
    def test_terms_per_kind(self):
        assert set(compute_terms(model('na'), batch())) == {'state'}
        assert set(compute_terms(model('no'), batch())) == {'state', 'reconstruction', 'disentangle1',
                                                             'disentangle2'}
        assert set(compute_terms(model('full'), batch())) == {'state', 'reconstruction', 'disentangle1',
                                                               'disentangle2', 'discriminator'}
        assert set(compute_terms(model('full'), batch(), phase='p2')) == {'disentangle1', 'disentangle2',
                                                                           'discriminator'}

    def test_composites(self):
        m = model()
        b = batch()
        terms = compute_terms(m, b, np.random.default_rng(0))
        raw = {name: t.item() for name, t in terms.items()}
        nuis = raw['state'] + 0.5 * raw['reconstruction'] + 0.1 * (raw['disentangle1'] + raw['disentangle2'])
        assert loss_nuis(m, b, terms=terms)[0].item() == pytest.approx(nuis)
        assert loss_full(m, b, terms=terms)[0].item() == pytest.approx(nuis + 0.1 * raw['discriminator'])
        p1 = raw['state'] + 0.5 * raw['reconstruction'] - 0.1 * (raw['disentangle1'] + raw['disentangle2']) \
            - 0.1 * raw['discriminator']
        assert p1_objective(m, terms)[0].item() == pytest.approx(p1)
        assert p2_objective(terms).item() == pytest.approx(
            raw['disentangle1'] + raw['disentangle2'] + raw['discriminator'])

    def test_without_reconstruction_or_disentanglers_only_supervision_remains(self):
        for alpha in (1.0, 2.5):
            m = model('no', weights=LossWeights(alpha, 0.0, 0.0, 0.0))
            b = batch()
            terms = compute_terms(m, b, np.random.default_rng(0))
            total, breakdown = loss_nuis(m, b, terms=terms)
            assert total.item() == alpha * terms['state'].item()
            assert breakdown.weighted()['reconstruction'] == 0.0

    def test_full_loss_needs_discriminator(self):
        with pytest.raises(VariantError):
            loss_full(model('no'), batch())

    def test_missing_technique_labels(self):
        with pytest.raises(DataError):
            compute_terms(model('full'), batch(techniques=False))

    def test_technique_out_of_range(self):
        b = batch()
        b.techniques = np.full(b.size, K)
        with pytest.raises(DataError):
            compute_terms(model('full'), b)

    def test_feature_size_checked(self):
        b = batch()
        b.windows = b.windows[:, :, :-1]
        with pytest.raises(DimensionError):
            compute_terms(model('full'), b)

    @pytest.mark.parametrize('mode', ['causal', 'noncausal'])
    def test_full_loss_gradients(self, mode):
        m = build_model('full', F, S, K, L, 2, T, mode)
        b = batch(size=2)
        report = grad_check(lambda: loss_full(m, b, np.random.default_rng(5))[0], m.all_groups())
        assert report.passed, report.failures

    def test_p2_gradients_leave_p1_groups_alone(self):
        m = model()
        _set_phase(m, 'p2')
        records = backward(p2_objective(compute_terms(m, batch(), phase='p2')), m.all_groups())
        assert set(records) == set(P2_GROUPS)
        _set_phase(m, 'p1')
        records = backward(p1_objective(m, compute_terms(m, batch()))[0], m.all_groups())
        assert set(records) == set(P1_GROUPS)


class TestWindowDataset:
    def test_stride_and_batches(self):
        data = window_dataset(stride=3)
        assert data.size == 2 * 10
        b = data.batch([0, 5, 12])
        assert b.windows.shape == (3, T, F)
        assert list(b.techniques) == [0, 0, 1]
        assert set(data.sample_trial_ids()) == {'0000', '0001'}

    def test_counts_must_agree(self):
        with pytest.raises(DataError):
            WindowDataset(['a'], [np.zeros((3, F))], [], T, 'causal')


class TestTraining:
    schedule = TrainSchedule(epochs=3, batch_size=16, seed=0, hyper=AdamHyper(rate=0.02))

    def test_deterministic(self):
        a, _ = train_minimax(model(), window_dataset(), self.schedule)
        b, _ = train_minimax(model(), window_dataset(), self.schedule)
        assert a.snapshot() == b.snapshot()

    def test_trace_and_unfreeze(self):
        m, trace = train_minimax(model(), window_dataset(), self.schedule)
        assert len(trace.p1) == len(trace.p2) == len(trace.terms) == 3
        assert set(trace.terms[0]) == {'state', 'reconstruction', 'disentangle1', 'disentangle2', 'discriminator'}
        assert all(group.trainable for group in m.groups.values())

    def test_supervised_variant_learns(self):
        m, trace = train_minimax(model('na'), window_dataset(),
                                 TrainSchedule(epochs=15, batch_size=16, hyper=AdamHyper(rate=0.05)))
        assert trace.p1[-1] < trace.p1[0]
        assert trace.p2 == [0.0] * 15

    def test_every_group_moves(self):
        before = model().snapshot()
        m, _ = train_minimax(model(), window_dataset(), self.schedule)
        after = m.snapshot()
        for name in before:
            assert before[name] != after[name], name

    def test_step_leaves_frozen_groups_byte_identical(self):
        m = model()
        optimizer = Adam(AdamHyper(rate=0.05))
        for phase, active in (('p1', P1_GROUPS), ('p2', P2_GROUPS)):
            _set_phase(m, phase)
            before = m.snapshot()
            terms = compute_terms(m, batch(), np.random.default_rng(0), phase=phase)
            objective = p1_objective(m, terms)[0] if phase == 'p1' else p2_objective(terms)
            optimizer.apply(m.all_groups(), backward(objective, m.all_groups()))
            after = m.snapshot()
            for name in m.groups:
                if name in active:
                    assert after[name] != before[name], (phase, name)
                else:
                    assert after[name] == before[name], (phase, name)

    def test_training_never_moves_a_frozen_group(self, monkeypatch):
        m = model()
        original = Adam.apply
        checked = []

        def apply(optimizer, groups, records):
            frozen = {g.name: g.snapshot() for g in m.all_groups() if not g.trainable}
            original(optimizer, groups, records)
            for name, snapshot in frozen.items():
                assert m.groups[name].snapshot() == snapshot, name
            checked.append(len(frozen))
        monkeypatch.setattr(Adam, 'apply', apply)
        train_minimax(m, window_dataset(), self.schedule)
        assert checked and all(count == 3 for count in checked)

    def test_divergence_is_reported(self):
        with pytest.raises(TrainingError) as info:
            train_minimax(model(), window_dataset(), TrainSchedule(epochs=2, divergence_limit=1e-9))
        assert info.value.epoch == 0

    def test_full_needs_labelled_dataset(self):
        ids, features, states = block_features()
        with pytest.raises(DataError):
            train_minimax(model(), WindowDataset(ids, features, states, T, 'causal'), self.schedule)

    def test_schedule_validation(self):
        with pytest.raises(ConfigError):
            train_minimax(model(), window_dataset(), TrainSchedule(p2_batches=0))


class TestInference:
    def test_probabilities(self):
        windows = np.random.default_rng(0).normal(size=(7, T, F))
        probs = predict_proba(model(), windows, batch_size=3)
        assert probs.shape == (7, S) and np.allclose(probs.sum(axis=1), 1.0)
        assert np.array_equal(predict(model(), windows), np.argmax(probs, axis=1))

    def test_latent_codes_need_an_encoder(self):
        with pytest.raises(VariantError):
            latent_codes(model('na'), np.zeros((3, F)))

    def test_embeddings_per_instance(self):
        ids, features, states = block_features()
        records = export_embeddings(model(), ids, features, states)
        assert len(records) == 2 * S
        assert (records[1].state, records[1].start, records[1].stop) == (1, 10, 20)
        assert records[0].e1.shape == (L,)
        assert list(records[0].to_dict()) == ['trial_id', 'state', 'start', 'stop', 'e1', 'e2']


class TestCheckpoints:
    def pipeline(self):
        return FeaturePipeline.create(np.random.default_rng(0), {'vis': 3, 'kin': 3, 'evt': 2}, (2, 2, 1), S, T, 2)

    def test_round_trip_is_bit_exact(self, tmp_path):
        m, pipe = model(mode='noncausal'), self.pipeline()
        path = str(tmp_path / 'model.npz')
        save_checkpoint(path, m, pipe, {'seed': 0})
        loaded, loaded_pipe, config = load_checkpoint(path)
        assert loaded.snapshot() == m.snapshot()
        assert loaded.describe() == m.describe()
        assert {n: g.snapshot() for n, g in loaded_pipe.groups.items()} == \
            {n: g.snapshot() for n, g in pipe.groups.items()}
        assert config == {'seed': 0}

    def test_without_pipeline(self, tmp_path):
        path = str(tmp_path / 'model.npz')
        save_checkpoint(path, model('na'))
        _, pipe, _ = load_checkpoint(path)
        assert pipe is None

    def test_missing(self, tmp_path):
        with pytest.raises(DataError):
            load_checkpoint(str(tmp_path / 'none.npz'))

    def test_garbage(self, tmp_path):
        path = tmp_path / 'model.npz'
        path.write_bytes(b'definitely not an archive')
        with pytest.raises(ParseError):
            load_checkpoint(str(path))

    def test_version_mismatch(self, tmp_path):
        path = str(tmp_path / 'model.npz')
        save_checkpoint(path, model())
        with np.load(path) as archive:
            arrays = {key: archive[key] for key in archive.files}
        meta = json.loads(str(arrays['__meta__']))
        meta['version'] = 7
        arrays['__meta__'] = np.array(json.dumps(meta))
        np.savez(path, **arrays)
        with pytest.raises(VersionError):
            load_checkpoint(path)


if __name__ == '__main__':
    pytest.main([__file__, '-v'])
