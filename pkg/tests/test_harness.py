#!/usr/bin/env python3
"""
Tests for evaluation, experiment reports, the technique probe and report output
"""

import json
import os
import re
import sys
import time

import numpy as np
import pytest

# Add src directory to path
sys.path.insert(0, os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), 'src'))

import harness
from conftest import make_trial
from encoders import FeaturePipeline
from errors import ConfigError, DataError, DimensionError, ParseError, VariantError
from harness import (FoldAudit, TrainedEstimator, archive_report, disentanglement_report, dumps, evaluate,
                     framewise_accuracy, gradcheck_suite, k_selection_report, list_archives, probe_features,
                     read_report, render_text, run_ablation, run_experiment, technique_probe, train_estimator,
                     write_report)
from invariance import build_model


@pytest.fixture(scope='module')
def full_run(trials, settings):
    return train_estimator(trials, settings, 'full', seed=0)


def constant_estimator(trials, state=0, mode='causal'):
    """An NA estimator whose output bias swamps everything else"""
    pipeline = FeaturePipeline.create(np.random.default_rng(0), trials[0].dims(), (4, 4, 2), 3, 4, 3)
    model = build_model('na', pipeline.feature_size, 3, 0, 3, 4, 4, mode)
    bias = np.zeros(3)
    bias[state] = 50.0
    model.groups['estimator']['out_bias'].data[...] = bias
    return TrainedEstimator(pipeline, model)


class TestAccuracy:
    def test_examples(self):
        assert framewise_accuracy([0, 1, 2], [0, 1, 2]) == 100.0
        assert framewise_accuracy([1, 1], [0, 0]) == 0.0
        assert framewise_accuracy([0, 1], [0, 0]) == 50.0

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            framewise_accuracy([0, 1], [0, 1, 2])
        with pytest.raises(DimensionError):
            framewise_accuracy([], [])


class TestEvaluate:
    def test_constant_estimator(self, trials):
        report = evaluate(constant_estimator(trials), trials)
        labels = np.concatenate([t.states for t in trials])
        assert report.mean_accuracy == pytest.approx(100.0 * np.mean(labels == 0))
        confusion = report.confusion
        assert np.all(confusion[:, 1:] == 0)
        assert list(confusion.sum(axis=1)) == [int(np.sum(labels == s)) for s in range(3)]

    def test_accuracy_follows_confusion(self, trials, full_run):
        report = evaluate(full_run.estimator, trials)
        confusion = report.confusion
        assert report.folds[0].frames == sum(t.length for t in trials)
        assert report.mean_accuracy == pytest.approx(100.0 * np.trace(confusion) / confusion.sum())
        predicted = np.concatenate([full_run.estimator.predict_trial(t) for t in trials])
        truth = np.concatenate([t.states for t in trials])
        assert report.mean_accuracy == pytest.approx(framewise_accuracy(predicted, truth))

    def test_mode_mismatch(self, trials):
        with pytest.raises(ConfigError):
            evaluate(constant_estimator(trials), trials, mode='noncausal')

    def test_state_count_mismatch(self, trials):
        odd = make_trial('odd', [0, 1, 2, 3] * 5, n_states=4)
        with pytest.raises(ConfigError):
            evaluate(constant_estimator(trials), [odd])

    def test_causal_estimates_ignore_later_frames(self, full_run):
        trial = make_trial('p', [0] * 15 + [1] * 15 + [2] * 10, seed=3)
        before = full_run.estimator.predict_trial(trial)
        trial.kin = trial.kin.copy()
        trial.vis = trial.vis.copy()
        trial.kin[25:] += 10.0
        trial.vis[25:] -= 10.0
        after = full_run.estimator.predict_trial(trial)
        assert np.array_equal(before[:25], after[:25])

    def test_runtime_stays_out_of_the_bytes(self, trials):
        report = evaluate(constant_estimator(trials), trials)
        assert 'runtime' not in report.to_dict()
        assert 'runtime' in report.to_dict(include_runtime=True)


class TestTraining:
    def test_full_run_records_its_inputs(self, trials, full_run):
        ids = {t.trial_id for t in trials}
        assert set(full_run.clustering_ids) == ids
        assert set(full_run.window_ids) == ids
        assert full_run.technique_labels.k >= 2
        assert len(full_run.trace.p1) == 1

    def test_na_run_skips_clustering(self, trials, settings):
        run = train_estimator(trials, settings, 'na', seed=0)
        assert run.technique_labels is None and run.clustering_ids == []

    def test_unknown_variant(self, trials, settings):
        with pytest.raises(ConfigError):
            train_estimator(trials, settings, 'half')


class TestExperiments:
    def test_kfold_is_deterministic(self, trials, settings):
        a = run_experiment(trials, settings, 'kfold', 'no', folds=2, seed=1)
        b = run_experiment(trials, settings, 'kfold', 'no', folds=2, seed=1)
        assert len(a.folds) == 2
        assert dumps(a.to_dict()) == dumps(b.to_dict())
        tested = sorted(i for fold in a.folds for i in fold.audit.test_ids)
        assert tested == sorted(t.trial_id for t in trials)

    def test_louo_audits_every_fold(self, trials, settings):
        report = run_experiment(trials, settings, 'louo', 'na', seed=0)
        assert [f.name for f in report.folds] == ['user-0', 'user-1']
        for fold in report.folds:
            assert not set(fold.audit.train_ids) & set(fold.audit.test_ids)
            assert set(fold.audit.window_ids) <= set(fold.audit.train_ids)

    def test_ablation_shares_folds(self, trials, settings):
        report = run_ablation(trials, settings, 'kfold', folds=2, seed=0)
        names = {v: [f.name for f in r.folds] for v, r in report.reports.items()}
        assert set(names) == {'na', 'no', 'full'}
        assert names['na'] == names['no'] == names['full']
        data = report.to_dict()
        assert data['format'] == 'ablation-report'
        acc = {v: data['variants'][v]['mean_accuracy'] for v in ('na', 'no', 'full')}
        assert data['deltas']['full_minus_na'] == pytest.approx(acc['full'] - acc['na'])
        assert data['deltas']['full_minus_no'] == pytest.approx(acc['full'] - acc['no'])
        for fold in report.reports['full'].folds:
            assert not set(fold.audit.clustering_ids) & set(fold.audit.test_ids)

    def test_unknown_split(self, trials, settings):
        with pytest.raises(ConfigError):
            run_experiment(trials, settings, 'random')

    def test_leak_names_the_fold(self):
        audit = FoldAudit('user-3', ['a', 'b'], ['c'], clustering_ids=['a', 'c'])
        with pytest.raises(DataError) as info:
            audit.check()
        assert info.value.fold == 'user-3'
        assert 'clustering' in str(info.value) and '[fold user-3]' in str(info.value)


class TestEmbeddings:
    def test_silhouettes_are_bounded(self, trials, full_run):
        report = disentanglement_report(full_run.estimator, trials)
        assert -1.0 <= report.silhouette_e1 <= 1.0
        assert -1.0 <= report.silhouette_e2 <= 1.0
        assert report.separation is not None
        assert set(report.counts) <= {0, 1, 2}
        assert list(report.to_dict()['instances']) == sorted(str(s) for s in report.counts)

    def test_needs_two_states(self, full_run):
        with pytest.raises(ConfigError):
            disentanglement_report(full_run.estimator, [make_trial('one', [1] * 20)])

    def test_needs_an_encoder(self, trials):
        with pytest.raises(VariantError):
            disentanglement_report(constant_estimator(trials), trials)

    def test_probe_feature_sources(self, trials, full_run, settings):
        e1 = probe_features(full_run.estimator, trials[:1])
        h = probe_features(full_run.estimator, trials[:1], 'h')
        assert e1[0].shape == (trials[0].length, settings.model.latent_size)
        assert h[0].shape == (trials[0].length, full_run.estimator.pipeline.feature_size)
        with pytest.raises(ConfigError):
            probe_features(full_run.estimator, trials[:1], 'e2')


def test_k_selection_report(trials, settings):
    report = k_selection_report(trials, settings, seed=0)
    data = report.to_dict()
    assert data['ks'] == [2, 3]
    assert max(data['normalized_inertia']) == 1.0
    assert data['inertia'][1] <= data['inertia'][0]
    assert data['chosen_k'] in data['ks']
    assert -1.0 <= data['ari'] <= 1.0
    assert set(data['labels']) == {t.trial_id for t in trials}


class TestProbe:
    def blocks(self, rng, label, n=3):
        return [rng.normal(loc=2.0 * label - 1.0, scale=0.2, size=(20, 3)) for _ in range(n)]

    def test_separable_techniques(self):
        rng = np.random.default_rng(0)
        train = self.blocks(rng, 0) + self.blocks(rng, 1)
        test = self.blocks(rng, 0, 1) + self.blocks(rng, 1, 1)
        result = technique_probe(train, [0] * 3 + [1] * 3, test, [0, 1], k=2, epochs=30, learning_rate=0.05)
        assert result.accuracy == 1.0
        assert result.chance == 0.5
        assert result.losses[-1] < result.losses[0]

    def test_validation(self):
        blocks = [np.zeros((4, 2))]
        with pytest.raises(ConfigError):
            technique_probe(blocks, [0], blocks, [0], k=1)
        with pytest.raises(DataError):
            technique_probe(blocks, [2], blocks, [0], k=2)
        with pytest.raises(DimensionError):
            technique_probe(blocks, [0], [np.zeros((4, 3))], [0], k=2)


def test_gradcheck_suite_passes():
    started = time.perf_counter()
    checks = gradcheck_suite(seed=0)
    assert time.perf_counter() - started < 60.0
    assert [name for name, _ in checks] == ['linear', 'lstm cell', 'attention encoder', 'full loss (causal)',
                                            'full loss (noncausal)']
    for name, report in checks:
        assert report.passed, (name, report.failures)


class TestOutput:
    def test_text_uses_six_significant_digits(self):
        text = render_text({'a': 1.23456789, 'b': [0.1234567, 2], 'c': {'d': None}, 'e': [[1.0, 2.5]]})
        assert text.splitlines() == ['a: 1.23457', 'b: 0.123457 2', 'c:', '  d: None', 'e:', '  1 2.5']

    def test_json_uses_six_significant_digits(self, tmp_path):
        text = dumps({'mean_accuracy': 100 / 3, 'deltas': {'full_minus_na': np.float64(2 / 3)},
                      'accuracies': [1 / 7, 50.0], 'k': 3, 'ok': True})
        assert '"mean_accuracy": 33.3333' in text
        assert '33.33333' not in text
        data = json.loads(text)
        assert data['deltas']['full_minus_na'] == 0.666667
        assert data['accuracies'] == [0.142857, 50.0]
        assert data['k'] == 3 and data['ok'] is True
        path = write_report({'format': 'eval-report', 'std_accuracy': 2 / 3}, str(tmp_path / 'r.json'))
        assert read_report(path)['std_accuracy'] == 0.666667

    def test_archive_naming_and_round_trip(self, tmp_path):
        report = {'format': 'eval-report', 'version': harness.REPORT_VERSION, 'mean_accuracy': 81.5}
        path = archive_report(report, 'eval', str(tmp_path))
        assert re.fullmatch(r'eval_\d{8}_\d{6}\.json', os.path.basename(path))
        assert read_report(path) == report
        assert list_archives(str(tmp_path)) == [path]
        assert list_archives(str(tmp_path / 'none')) == []

    def test_key_order_is_preserved(self, tmp_path):
        path = write_report({'format': 'x', 'z': 1, 'a': 2}, str(tmp_path / 'r.json'))
        with open(path) as f:
            assert list(json.load(f)) == ['format', 'z', 'a']

    def test_read_errors(self, tmp_path):
        with pytest.raises(DataError):
            read_report(str(tmp_path / 'missing.json'))
        broken = tmp_path / 'broken.json'
        broken.write_text('{\n  "format": ')
        with pytest.raises(ParseError):
            read_report(str(broken))
        foreign = tmp_path / 'foreign.json'
        foreign.write_text('[1, 2]')
        with pytest.raises(DataError):
            read_report(str(foreign))


if __name__ == '__main__':
    pytest.main([__file__, '-v'])
