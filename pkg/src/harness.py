"""
Experiment Harness

Trains estimators per fold, evaluates them frame by frame and assembles the
reports: evaluation, NA/NO/FULL ablation, embedding disentanglement,
k selection and the technique probe. Reports are plain dicts with a
format/version header and a stable key order, so identical runs give
identical bytes.
"""

import json
import os
import time
from dataclasses import dataclass, field
from datetime import datetime
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from sklearn.metrics import confusion_matrix

from clustering import (KSelection, TechniqueLabels, TrialSeries, adjusted_rand_index, euclidean_matrix,
                        label_techniques, pairwise_dtw, select_k, silhouette_mean)
from dataset import (Fold, MultiStreamTrial, select, split_kfold, split_leave_one_technique_out, split_louo,
                     window_indices)
from encoders import (AttentionParams, FeaturePipeline, LinearParams, LstmParams, StreamState, encode_stream,
                      linear, lstm_step)
from errors import ConfigError, DataError, DimensionError, EstimatorError, ParseError
from invariance import (LossTrace, LossWeights, ModelVariant, TrainSchedule, TrainingBatch, WindowDataset,
                        build_model, export_embeddings, latent_codes, loss_full, predict, train_minimax)
from numerics import (Adam, AdamHyper, GradCheckReport, ParamGroup, Tensor, backward, cross_entropy,
                      grad_check, mse, softmax)
from settings import VARIANTS, Settings


REPORT_VERSION = 1
SPLITS = ('louo', 'kfold', 'loto')


def framewise_accuracy(predicted: Sequence[int], truth: Sequence[int]) -> float:
    """Percentage of frames whose predicted state matches the label"""
    predicted, truth = np.asarray(predicted), np.asarray(truth)
    if predicted.shape != truth.shape or predicted.ndim != 1:
        raise DimensionError(f'framewise_accuracy: {list(predicted.shape)} predictions for {list(truth.shape)} labels')
    if predicted.size == 0:
        raise DimensionError('framewise_accuracy: no frames')
    return 100.0 * float(np.sum(predicted == truth)) / predicted.size


def _accuracy_from_confusion(confusion: np.ndarray) -> float:
    return 100.0 * float(np.trace(confusion)) / float(confusion.sum())


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

@dataclass
class FoldAudit:
    """Trial ids that went into each stage of one fold"""
    fold: str
    train_ids: List[str]
    test_ids: List[str]
    clustering_ids: List[str] = field(default_factory=list)
    window_ids: List[str] = field(default_factory=list)

    def check(self) -> 'FoldAudit':
        held_out = set(self.test_ids)
        for stage, ids in (('training', self.train_ids), ('clustering', self.clustering_ids),
                           ('window', self.window_ids)):
            leaked = sorted(held_out & set(ids))
            if leaked:
                raise DataError(f'test trials {leaked} leaked into {stage} inputs', fold=self.fold)
        return self

    def to_dict(self) -> Dict:
        return {
            'train_ids': sorted(set(self.train_ids)),
            'test_ids': sorted(set(self.test_ids)),
            'clustering_ids': sorted(set(self.clustering_ids)),
            'window_ids': sorted(set(self.window_ids)),
        }


@dataclass
class FoldResult:
    name: str
    confusion: np.ndarray
    audit: Optional[FoldAudit] = None

    @property
    def frames(self) -> int:
        return int(self.confusion.sum())

    @property
    def accuracy(self) -> float:
        return _accuracy_from_confusion(self.confusion)

    def to_dict(self) -> Dict:
        entry = {'name': self.name, 'accuracy': self.accuracy, 'frames': self.frames,
                 'confusion': self.confusion.tolist()}
        if self.audit is not None:
            entry['audit'] = self.audit.to_dict()
        return entry


@dataclass
class EvalReport:
    variant: str
    mode: str
    seed: int
    folds: List[FoldResult]
    config: Dict = field(default_factory=dict)
    split: Optional[str] = None
    runtime: float = 0.0

    @property
    def accuracies(self) -> List[float]:
        return [f.accuracy for f in self.folds]

    @property
    def mean_accuracy(self) -> float:
        return float(np.mean(self.accuracies))

    @property
    def std_accuracy(self) -> float:
        return float(np.std(self.accuracies))

    @property
    def confusion(self) -> np.ndarray:
        return np.sum([f.confusion for f in self.folds], axis=0)

    def to_dict(self, include_runtime: bool = False, include_config: bool = True) -> Dict:
        """Runtime is left out by default so equal runs serialize to equal bytes"""
        data = {'format': 'eval-report', 'version': REPORT_VERSION, 'variant': self.variant,
                'mode': self.mode, 'seed': self.seed, 'split': self.split}
        if include_config:
            data['config'] = self.config
        data.update({
            'folds': [f.to_dict() for f in self.folds],
            'mean_accuracy': self.mean_accuracy,
            'std_accuracy': self.std_accuracy,
            'frames': int(self.confusion.sum()),
            'confusion': self.confusion.tolist(),
        })
        if include_runtime:
            data['runtime'] = self.runtime
        return data


@dataclass
class AblationReport:
    mode: str
    seed: int
    split: str
    folds: List[Fold]
    reports: Dict[str, EvalReport]
    config: Dict = field(default_factory=dict)

    @property
    def deltas(self) -> Dict[str, float]:
        acc = {v: r.mean_accuracy for v, r in self.reports.items()}
        return {
            'no_minus_na': acc['no'] - acc['na'],
            'full_minus_na': acc['full'] - acc['na'],
            'full_minus_no': acc['full'] - acc['no'],
        }

    def to_dict(self) -> Dict:
        return {
            'format': 'ablation-report',
            'version': REPORT_VERSION,
            'mode': self.mode,
            'seed': self.seed,
            'split': self.split,
            'config': self.config,
            'folds': [{'name': f.name, 'train_ids': list(f.train_ids), 'test_ids': list(f.test_ids)}
                      for f in self.folds],
            'variants': {v: self.reports[v].to_dict(include_config=False) for v in VARIANTS},
            'deltas': self.deltas,
        }


@dataclass
class DisentanglementReport:
    silhouette_e1: float
    silhouette_e2: float
    counts: Dict[int, int]
    separation: Optional[float] = None

    def to_dict(self) -> Dict:
        return {
            'format': 'disentanglement-report',
            'version': REPORT_VERSION,
            'silhouette_e1': self.silhouette_e1,
            'silhouette_e2': self.silhouette_e2,
            'separation': self.separation,
            'instances': {str(s): n for s, n in sorted(self.counts.items())},
        }


@dataclass
class KSelectionReport:
    selection: KSelection
    trial_ids: List[str]
    ari: Optional[float] = None

    def to_dict(self) -> Dict:
        s = self.selection
        return {
            'format': 'k-selection-report',
            'version': REPORT_VERSION,
            'ks': list(s.ks),
            'inertia': list(s.inertias),
            'normalized_inertia': s.normalized_inertias,
            'silhouette': list(s.silhouettes),
            'chosen_k': s.chosen_k,
            'elbow_k': s.elbow_k,
            'ari': self.ari,
            'labels': s.assignments[s.chosen_k].by_trial(),
        }


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass
class TrainedEstimator:
    pipeline: FeaturePipeline
    model: ModelVariant

    @property
    def mode(self) -> str:
        return self.model.mode

    @property
    def t_obs(self) -> int:
        return self.model.t_obs

    def features(self, trial: MultiStreamTrial) -> np.ndarray:
        return self.pipeline.transform(trial)

    def predict_trial(self, trial: MultiStreamTrial, features: np.ndarray = None) -> np.ndarray:
        """Per-frame state estimates over a whole trial"""
        H = self.features(trial) if features is None else features
        return predict(self.model, H[window_indices(len(H), self.t_obs, self.mode)])


@dataclass
class TrainingRun:
    estimator: TrainedEstimator
    trace: LossTrace
    technique_labels: Optional[TechniqueLabels] = None
    selection: Optional[KSelection] = None
    clustering_ids: List[str] = field(default_factory=list)
    window_ids: List[str] = field(default_factory=list)


def _hyper(settings: Settings) -> AdamHyper:
    t = settings.train
    return AdamHyper(t.learning_rate, t.adam_beta1, t.adam_beta2, t.adam_eps)


def _state_count(trials: Sequence[MultiStreamTrial]) -> int:
    counts = {t.n_states for t in trials}
    if len(counts) != 1:
        raise DataError(f'trials disagree on the number of states: {sorted(counts)}')
    return counts.pop()


def pretrain_pipeline(trials: Sequence[MultiStreamTrial], settings: Settings, seed: int = None,
                      verbose: bool = False) -> Tuple[FeaturePipeline, List[float]]:
    """Create and pretrain the stream encoders on training trials, then freeze them"""
    if not trials:
        raise DataError('no training trials')
    seed = settings.seed if seed is None else seed
    m = settings.model
    rng = np.random.default_rng(seed)
    pipeline = FeaturePipeline.create(rng, trials[0].dims(), (m.n_vis, m.n_kin, m.n_evt), _state_count(trials),
                                      m.t_obs, m.attention_size)
    losses = []
    if settings.train.pretrain_epochs > 0:
        losses = pipeline.fit(trials, settings.train.pretrain_epochs, settings.train.bptt_length,
                              _hyper(settings), rng, verbose)
    pipeline.freeze()
    return pipeline, losses


def cluster_techniques(trials: Sequence[MultiStreamTrial], settings: Settings, seed: int = None
                       ) -> Tuple[TechniqueLabels, Optional[KSelection]]:
    """Technique labels from DTW k-medoids over the kinematic streams of `trials`"""
    seed = settings.seed if seed is None else seed
    c = settings.cluster
    labels, _, selection = label_techniques([TrialSeries(t.trial_id, t.kin) for t in trials], c.k_min, c.k_max,
                                            c.restarts, seed, c.dtw_band, c.workers, c.fixed_k)
    return labels, selection


def train_estimator(trials: Sequence[MultiStreamTrial], settings: Settings, variant: str = None,
                    mode: str = None, seed: int = None, technique_labels: TechniqueLabels = None,
                    pipeline: FeaturePipeline = None, verbose: bool = False) -> TrainingRun:
    """
    Pretrain the feature pipeline (unless one is passed in), cluster the
    techniques of `trials` for the FULL variant (unless labels are passed
    in) and train the variant with the minimax schedule.
    """
    variant = variant or settings.variant
    mode = mode or settings.mode
    seed = settings.seed if seed is None else seed
    if variant not in VARIANTS:
        raise ConfigError(f'unknown variant {variant!r}, expected one of {VARIANTS}')
    if not trials:
        raise DataError('no training trials')
    n_states = _state_count(trials)
    m, t = settings.model, settings.train

    if pipeline is None:
        pipeline, _ = pretrain_pipeline(trials, settings, seed, verbose)
    features = [pipeline.transform(trial) for trial in trials]
    ids = [trial.trial_id for trial in trials]

    selection = None
    techniques = None
    if variant == 'full':
        if technique_labels is None:
            technique_labels, selection = cluster_techniques(trials, settings, seed)
        missing = [i for i in ids if i not in technique_labels.labels]
        if missing:
            raise DataError(f'no technique label for training trials {missing}')
        techniques = [technique_labels.labels[i] for i in ids]

    model = build_model(variant, pipeline.feature_size, n_states,
                        technique_labels.k if variant == 'full' else 0,
                        m.latent_size, m.estimator_hidden, m.t_obs, mode,
                        LossWeights(m.alpha, m.beta, m.gamma, m.delta, m.dropout_rate), seed)
    dataset = WindowDataset(ids, features, [trial.states for trial in trials], m.t_obs, mode, techniques,
                            stride=t.train_stride)
    schedule = TrainSchedule(t.p1_batches, t.p2_batches, t.epochs, t.batch_size, seed, t.divergence_limit,
                             _hyper(settings))
    model, trace = train_minimax(model, dataset, schedule, verbose)

    return TrainingRun(
        estimator=TrainedEstimator(pipeline, model),
        trace=trace,
        technique_labels=technique_labels if variant == 'full' else None,
        selection=selection,
        clustering_ids=list(technique_labels.labels) if variant == 'full' else [],
        window_ids=sorted(set(dataset.sample_trial_ids())),
    )


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

def _evaluate_fold(estimator: TrainedEstimator, trials: Sequence[MultiStreamTrial], name: str,
                   audit: FoldAudit = None) -> FoldResult:
    if not trials:
        raise DataError('no test trials')
    n_states = estimator.model.n_states
    for trial in trials:
        if trial.n_states != n_states:
            raise ConfigError(f'trial {trial.trial_id} has {trial.n_states} states, model estimates {n_states}')
    predicted = np.concatenate([estimator.predict_trial(trial) for trial in trials])
    truth = np.concatenate([trial.states for trial in trials])
    confusion = confusion_matrix(truth, predicted, labels=np.arange(n_states)).astype(np.int64)
    return FoldResult(name, confusion, audit)


def evaluate(estimator: TrainedEstimator, trials: Sequence[MultiStreamTrial], mode: str = None,
             seed: int = 0, config: Dict = None) -> EvalReport:
    """Frame-wise evaluation of a trained estimator on whole trials"""
    if mode is not None and mode != estimator.mode:
        raise ConfigError(f'estimator was trained for {estimator.mode} mode, cannot evaluate {mode}')
    started = time.perf_counter()
    result = _evaluate_fold(estimator, trials, 'test')
    return EvalReport(estimator.model.kind, estimator.mode, seed, [result], config or {},
                      runtime=time.perf_counter() - started)


def make_folds(trials: Sequence[MultiStreamTrial], split: str, folds: int = 5, seed: int = 0) -> List[Fold]:
    if split == 'louo':
        return split_louo(trials)
    if split == 'kfold':
        return split_kfold(trials, folds, seed)
    if split == 'loto':
        return split_leave_one_technique_out(trials)
    raise ConfigError(f'unknown split {split!r}, expected one of {SPLITS}')


def _run_folds(trials: Sequence[MultiStreamTrial], folds: Sequence[Fold], settings: Settings,
               variants: Sequence[str], mode: str, seed: int, verbose: bool) -> Dict[str, List[FoldResult]]:
    """
    Every variant sees the same folds, the same pretrained pipeline and (for
    FULL) technique labels clustered from that fold's training trials only.
    """
    results = {v: [] for v in variants}
    for number, fold in enumerate(folds):
        if verbose:
            print(f'\nFold {number + 1}/{len(folds)}: {fold.name} '
                  f'({len(fold.train_ids)} train, {len(fold.test_ids)} test)')
        try:
            train, test = select(trials, fold.train_ids), select(trials, fold.test_ids)
            pipeline, _ = pretrain_pipeline(train, settings, seed, verbose)
            labels = None
            for variant in variants:
                run = train_estimator(train, settings, variant, mode, seed, labels, pipeline, verbose)
                labels = run.technique_labels or labels
                audit = FoldAudit(fold.name, list(fold.train_ids), list(fold.test_ids), run.clustering_ids,
                                  run.window_ids).check()
                result = _evaluate_fold(run.estimator, test, fold.name, audit)
                results[variant].append(result)
                if verbose:
                    print(f'  {variant.upper():4s} accuracy {result.accuracy:.2f}%')
        except EstimatorError as e:
            raise e.with_fold(fold.name)
    return results


def run_experiment(trials: Sequence[MultiStreamTrial], settings: Settings, split: str = 'louo',
                   variant: str = None, mode: str = None, folds: int = 5, seed: int = None,
                   verbose: bool = False) -> EvalReport:
    variant = variant or settings.variant
    mode = mode or settings.mode
    seed = settings.seed if seed is None else seed
    started = time.perf_counter()
    fold_defs = make_folds(trials, split, folds, seed)
    results = _run_folds(trials, fold_defs, settings, [variant], mode, seed, verbose)
    return EvalReport(variant, mode, seed, results[variant], settings.echo(), split,
                      time.perf_counter() - started)


def run_ablation(trials: Sequence[MultiStreamTrial], settings: Settings, split: str = 'louo',
                 mode: str = None, folds: int = 5, seed: int = None, verbose: bool = False) -> AblationReport:
    """NA, NO and FULL on identical folds and seeds"""
    mode = mode or settings.mode
    seed = settings.seed if seed is None else seed
    started = time.perf_counter()
    fold_defs = make_folds(trials, split, folds, seed)
    results = _run_folds(trials, fold_defs, settings, VARIANTS, mode, seed, verbose)
    runtime = time.perf_counter() - started
    reports = {v: EvalReport(v, mode, seed, results[v], settings.echo(), split, runtime) for v in VARIANTS}
    return AblationReport(mode, seed, split, list(fold_defs), reports, settings.echo())


# ---------------------------------------------------------------------------
# Embeddings and techniques
# ---------------------------------------------------------------------------

def disentanglement_report(estimator: TrainedEstimator, trials: Sequence[MultiStreamTrial],
                           features: Sequence[np.ndarray] = None) -> DisentanglementReport:
    """
    Silhouettes of the state-instance mean e1 and e2 embeddings, grouped by
    state label, over Euclidean distances.
    """
    model = estimator.model
    model.require('encoder')
    if features is None:
        features = [estimator.features(t) for t in trials]
    records = export_embeddings(model, [t.trial_id for t in trials], features, [t.states for t in trials])
    states = [r.state for r in records]
    if len(set(states)) < 2:
        raise ConfigError(f'disentanglement report needs at least 2 states, got {len(set(states))}')
    ids = [f'{r.trial_id}:{r.start}' for r in records]
    e1 = np.stack([r.e1 for r in records])
    e2 = np.stack([r.e2 for r in records])
    s1, _ = silhouette_mean(euclidean_matrix(e1, ids), states)
    s2, _ = silhouette_mean(euclidean_matrix(e2, ids), states)

    separation = None
    if e1.shape[1] == e2.shape[1]:
        both = np.concatenate([e1, e2])
        separation, _ = silhouette_mean(euclidean_matrix(both, [f'e1:{i}' for i in ids] + [f'e2:{i}' for i in ids]),
                                        [0] * len(ids) + [1] * len(ids))
    counts: Dict[int, int] = {}
    for s in states:
        counts[s] = counts.get(s, 0) + 1
    return DisentanglementReport(s1, s2, counts, separation)


def k_selection_report(trials: Sequence[MultiStreamTrial], settings: Settings, seed: int = None,
                       k_min: int = None, k_max: int = None) -> KSelectionReport:
    """Inertia and mean silhouette per k, with the adjusted Rand index against the generating techniques"""
    seed = settings.seed if seed is None else seed
    c = settings.cluster
    dm = pairwise_dtw([TrialSeries(t.trial_id, t.kin) for t in trials], c.dtw_band, c.workers)
    k_min = c.k_min if k_min is None else k_min
    k_max = min(c.k_max if k_max is None else k_max, dm.n)
    selection = select_k(dm, k_min, k_max, c.restarts, seed)
    truth = [t.technique_id for t in trials]
    ari = None
    if all(label is not None and label >= 0 for label in truth):
        ari = adjusted_rand_index(truth, selection.assignments[selection.chosen_k].labels)
    return KSelectionReport(selection, list(dm.trial_ids), ari)


@dataclass
class ProbeResult:
    accuracy: float
    chance: float
    k: int
    losses: List[float] = field(default_factory=list)

    def to_dict(self) -> Dict:
        return {'format': 'probe-report', 'version': REPORT_VERSION, 'k': self.k,
                'accuracy': self.accuracy, 'chance': self.chance, 'losses': self.losses}


def _frames(blocks: Sequence[np.ndarray], labels: Sequence[int]) -> Tuple[np.ndarray, np.ndarray]:
    X = np.concatenate([np.asarray(b, dtype=np.float64) for b in blocks])
    y = np.concatenate([np.full(len(b), int(l), dtype=np.int64) for b, l in zip(blocks, labels)])
    return X, y


def technique_probe(train_features: Sequence[np.ndarray], train_labels: Sequence[int],
                    test_features: Sequence[np.ndarray], test_labels: Sequence[int], k: int,
                    epochs: int = 20, batch_size: int = 256, learning_rate: float = 1e-2,
                    seed: int = 0) -> ProbeResult:
    """
    Fit a fresh affine+softmax technique classifier on frozen per-frame
    features (one block per trial) and report its held-out frame accuracy
    as a fraction.
    """
    if k < 2:
        raise ConfigError(f'technique probe needs at least 2 techniques, got {k}')
    if not train_features or not test_features:
        raise DataError('technique probe needs training and test trials')
    X, y = _frames(train_features, train_labels)
    X_test, y_test = _frames(test_features, test_labels)
    if X.shape[1] != X_test.shape[1]:
        raise DimensionError(f'probe features: {X.shape[1]} training vs {X_test.shape[1]} test columns')
    if np.any(y < 0) or np.any(y >= k) or np.any(y_test < 0) or np.any(y_test >= k):
        raise DataError(f'technique label outside [0, {k})')

    rng = np.random.default_rng(seed)
    group = ParamGroup('probe', LinearParams.initial(rng, X.shape[1], k))
    optimizer = Adam(AdamHyper(rate=learning_rate))
    losses = []
    for _ in range(epochs):
        order = rng.permutation(len(X))
        total = 0.0
        for start in range(0, len(X), batch_size):
            rows = order[start:start + batch_size]
            loss = cross_entropy(softmax(linear(Tensor(X[rows]), LinearParams.bind(group)), axis=-1), y[rows])
            optimizer.apply([group], backward(loss, [group]))
            total += loss.item() * len(rows)
        losses.append(total / len(X))

    scores = X_test @ group['weight'].data + group['bias'].data
    accuracy = float(np.mean(np.argmax(scores, axis=1) == y_test))
    return ProbeResult(accuracy, 1.0 / k, k, losses)


def probe_features(estimator: TrainedEstimator, trials: Sequence[MultiStreamTrial],
                   source: str = 'e1') -> List[np.ndarray]:
    """Frozen per-frame e1 codes or raw H features for every trial"""
    blocks = [estimator.features(t) for t in trials]
    if source == 'h':
        return blocks
    if source != 'e1':
        raise ConfigError(f'probe source must be e1 or h, got {source!r}')
    return [latent_codes(estimator.model, H).e1.data for H in blocks]


# ---------------------------------------------------------------------------
# Gradient checks
# ---------------------------------------------------------------------------

def gradcheck_suite(seed: int = 0, tolerance: float = 1e-4) -> List[Tuple[str, GradCheckReport]]:
    """Finite-difference checks of every layer type and the full composite loss at desk dims"""
    rng = np.random.default_rng(seed)
    checks = []

    affine = ParamGroup('linear', LinearParams.initial(rng, 4, 3))
    x = rng.normal(size=(5, 4))
    y = rng.integers(0, 3, size=5)
    checks.append(('linear', grad_check(
        lambda: cross_entropy(softmax(linear(Tensor(x), LinearParams.bind(affine)), axis=-1), y),
        [affine], tolerance)))

    cell = ParamGroup('lstm', LstmParams.initial(rng, 3, 2))
    steps = rng.normal(size=(3, 3))
    target = Tensor(rng.normal(size=2))

    def lstm_fragment():
        params = LstmParams.bind(cell)
        state = StreamState.zeros(2)
        for row in steps:
            state = lstm_step(Tensor(row), state, params)
        return mse(state.h, target)
    checks.append(('lstm cell', grad_check(lstm_fragment, [cell], tolerance)))

    encoder = ParamGroup('kin_encoder', {**LstmParams.initial(rng, 3, 2), **AttentionParams.initial(rng, 2, 4, 3)})
    frames = rng.normal(size=(6, 3))

    def attention_fragment():
        states = encode_stream(frames, LstmParams.bind(encoder), AttentionParams.bind(encoder), 'kin')
        return mse(states[-1].h, target)
    checks.append(('attention encoder', grad_check(attention_fragment, [encoder], tolerance)))

    for mode in ('causal', 'noncausal'):
        model = build_model('full', feature_size=4, n_states=3, n_techniques=2, latent_size=3, hidden_size=2,
                            t_obs=3, mode=mode, seed=seed)
        batch = TrainingBatch(rng.normal(size=(2, 3, 4)), rng.integers(0, 3, size=2), rng.integers(0, 2, size=2))
        checks.append((f'full loss ({mode})', grad_check(
            lambda: loss_full(model, batch, np.random.default_rng(seed))[0], model.all_groups(), tolerance)))
    return checks


# ---------------------------------------------------------------------------
# Output
# ---------------------------------------------------------------------------

def _fmt(value) -> str:
    if isinstance(value, bool) or value is None:
        return str(value)
    if isinstance(value, (float, np.floating)):
        return f'{float(value):.6g}'
    return str(value)


def render_text(report: Dict, indent: int = 0) -> str:
    """Human-readable rendering; every float at 6 significant digits"""
    pad = '  ' * indent
    lines = []
    for key, value in report.items():
        if isinstance(value, dict):
            if not value:
                lines.append(f'{pad}{key}: -')
                continue
            lines.append(f'{pad}{key}:')
            lines.append(render_text(value, indent + 1))
        elif isinstance(value, list) and value and isinstance(value[0], dict):
            lines.append(f'{pad}{key}:')
            for i, item in enumerate(value):
                lines.append(f'{pad}  [{i}]')
                lines.append(render_text(item, indent + 2))
        elif isinstance(value, list) and value and isinstance(value[0], list):
            lines.append(f'{pad}{key}:')
            for row in value:
                lines.append(f'{pad}  ' + ' '.join(_fmt(v) for v in row))
        elif isinstance(value, list):
            lines.append(f'{pad}{key}: ' + ' '.join(_fmt(v) for v in value))
        else:
            lines.append(f'{pad}{key}: {_fmt(value)}')
    return '\n'.join(lines)


def _rounded(value):
    """Floats at 6 significant digits, throughout nested dicts and lists"""
    if isinstance(value, bool):
        return value
    if isinstance(value, (float, np.floating)):
        return float(f'{float(value):.6g}')
    if isinstance(value, dict):
        return {key: _rounded(item) for key, item in value.items()}
    if isinstance(value, (list, tuple)):
        return [_rounded(item) for item in value]
    return value


def dumps(report: Dict) -> str:
    return json.dumps(_rounded(report), indent=2) + '\n'


def write_report(report: Dict, path: str) -> str:
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, 'w', encoding='utf-8') as f:
        f.write(dumps(report))
    return path


def archive_report(report: Dict, kind: str, archives_dir: str = 'archives') -> str:
    """Save under archives/<kind>_<timestamp>.json; the timestamp is only in the name"""
    timestamp = datetime.now().strftime('%Y%m%d_%H%M%S')
    return write_report(report, os.path.join(archives_dir, f'{kind}_{timestamp}.json'))


def read_report(path: str) -> Dict:
    if not os.path.exists(path):
        raise DataError(f'report not found: {path}')
    with open(path, 'r', encoding='utf-8') as f:
        try:
            data = json.load(f)
        except json.JSONDecodeError as e:
            raise ParseError(f'malformed report: {e.msg}', path=path, line=e.lineno, offset=e.pos)
    if not isinstance(data, dict) or 'format' not in data:
        raise DataError(f'{path}: not a report file')
    return data


def list_archives(archives_dir: str = 'archives') -> List[str]:
    if not os.path.isdir(archives_dir):
        return []
    return sorted(os.path.join(archives_dir, name) for name in os.listdir(archives_dir) if name.endswith('.json'))
