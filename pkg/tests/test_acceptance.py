#!/usr/bin/env python3
"""
Desk-scale experiments on synthetic data: learnability, the invariance
benefit of the adversaries, disentanglement, adversarial pressure on e1 and
technique-count recovery.

These take minutes; run them with `pytest -m slow`.
"""

import os
import sys
import time

import numpy as np
import pytest

# Add src directory to path
sys.path.insert(0, os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), 'src'))

from conftest import tiny_settings
from dataset import generate_from_settings, select, split_kfold
from harness import (disentanglement_report, evaluate, k_selection_report, probe_features, run_ablation,
                     technique_probe, train_estimator)

pytestmark = pytest.mark.slow

SEEDS = range(5)


def experiment_settings(**values):
    base = dict(
        n_states=4, n_techniques=3, n_users=3, n_trials=12, segments_per_trial=6,
        kin_channels=4, vis_raw_dim=4, evt_channels=2,
        n_vis=6, n_kin=6, n_evt=2, attention_size=4, latent_size=6, estimator_hidden=12, t_obs=8,
        epochs=12, batch_size=32, pretrain_epochs=3, bptt_length=25, train_stride=2, learning_rate=5e-3,
        k_min=2, k_max=5, restarts=5, technique_strength=1.5, loss_delta=0.5,
    )
    base.update(values)
    return tiny_settings(**base)


def test_noise_free_task_is_learnable():
    settings = experiment_settings(
        n_techniques=1, n_users=2, n_trials=6, noise_sigma=0.0, offset_range=0.0, gain_range=0.0, drift=0.0,
        event_dropout=0.0, epochs=30, pretrain_epochs=10, train_stride=1, learning_rate=1e-2)
    started = time.perf_counter()
    trials = generate_from_settings(settings.data, seed=0)
    run = train_estimator(trials[:4], settings, 'full', 'causal', seed=0)
    report = evaluate(run.estimator, trials[4:])
    assert report.mean_accuracy >= 95.0
    assert time.perf_counter() - started < 180.0


def test_adversaries_help_on_unseen_techniques():
    gains, ordered, runtime = [], 0, 0.0
    for seed in SEEDS:
        settings = experiment_settings(seed=seed)
        trials = generate_from_settings(settings.data, seed=seed)
        report = run_ablation(trials, settings, 'loto', seed=seed)
        runtime += report.reports['full'].runtime
        acc = {v: r.mean_accuracy for v, r in report.reports.items()}
        gains.append(acc['full'] - acc['na'])
        ordered += acc['na'] <= acc['no'] <= acc['full']
    assert np.mean(gains) >= 3.0
    assert ordered >= 3
    assert runtime <= 600.0


def test_e1_clusters_by_state_better_than_e2():
    wins = 0
    for seed in SEEDS:
        settings = experiment_settings(seed=seed)
        trials = generate_from_settings(settings.data, seed=seed)
        run = train_estimator(trials, settings, 'full', seed=seed)
        report = disentanglement_report(run.estimator, trials)
        wins += report.silhouette_e1 > report.silhouette_e2
    assert wins >= 4


def test_e1_hides_the_technique():
    e1_scores, h_scores = [], []
    for seed in SEEDS:
        settings = experiment_settings(seed=seed)
        trials = generate_from_settings(settings.data, seed=seed)
        fold = split_kfold(trials, 3, seed)[0]
        train, test = select(trials, fold.train_ids), select(trials, fold.test_ids)
        run = train_estimator(train, settings, 'full', seed=seed)
        train_labels = [t.technique_id for t in train]
        test_labels = [t.technique_id for t in test]
        k = settings.data.n_techniques
        for source, scores in (('e1', e1_scores), ('h', h_scores)):
            result = technique_probe(probe_features(run.estimator, train, source), train_labels,
                                     probe_features(run.estimator, test, source), test_labels, k, seed=seed)
            scores.append(result.accuracy)
    chance = 1.0 / settings.data.n_techniques
    assert np.mean(e1_scores) <= chance + 0.15
    assert np.mean(h_scores) >= chance + 0.25


def test_planted_technique_count_is_recovered():
    hits, aris, runtime = 0, [], 0.0
    for seed in range(10):
        settings = experiment_settings(n_trials=15, technique_strength=3.0, noise_sigma=0.02, restarts=10)
        trials = generate_from_settings(settings.data, seed=seed)
        started = time.perf_counter()
        report = k_selection_report(trials, settings, seed=seed)
        runtime = max(runtime, time.perf_counter() - started)
        hits += report.selection.chosen_k == 3
        aris.append(report.ari)
    assert hits >= 8
    assert np.mean(aris) >= 0.8
    assert runtime < 120.0


if __name__ == '__main__':
    pytest.main([__file__, '-v', '-m', 'slow'])
