"""
Invariance Model

Encoder E splits each per-frame feature vector H into e1 (what the state
estimate needs) and e2 (everything else). Estimator M reads a window of e1
and outputs state probabilities. Reconstructor R rebuilds H from e2 and a
dropout-corrupted e1. Disentanglers f1 and f2 try to predict each code from
the other, and discriminator D tries to recover the technique cluster from
e1. Training alternates two phases:

  P1 updates {E, M, R}:  alpha*L_M + beta*L_R - gamma*(L_f1 + L_f2) - delta*L_D
  P2 updates {f1, f2, D}: L_f1 + L_f2 (+ L_D)

Three variants share this module: NA (M directly on H, no adversaries),
NO (no discriminator) and FULL.
"""

import json
import os
import zipfile
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from dataset import instances, window_indices
from encoders import FeaturePipeline, LinearParams, LstmParams, StreamState, linear, lstm_step
from errors import (ConfigError, DataError, DimensionError, ParseError, TrainingError, VariantError,
                    VersionError)
from numerics import (Adam, AdamHyper, ParamGroup, Tensor, as_tensor, backward, concat,
                      cross_entropy, mse, mul, no_grad, reshape, softmax, tanh)


KINDS = ('na', 'no', 'full')
P1_GROUPS = ('encoder', 'estimator', 'reconstructor')
P2_GROUPS = ('disentangler1', 'disentangler2', 'discriminator')
CHECKPOINT_VERSION = 1


@dataclass
class LatentSplit:
    e1: Tensor
    e2: Tensor


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0
    beta: float = 0.5
    gamma: float = 0.1
    delta: float = 0.1
    dropout: float = 0.4

    def validate(self) -> 'LossWeights':
        if self.alpha <= 0 or min(self.beta, self.gamma, self.delta) < 0:
            raise ConfigError('loss weights must be non-negative with alpha > 0')
        if not 0 <= self.dropout < 1:
            raise ConfigError(f'dropout rate must lie in [0, 1), got {self.dropout}')
        return self

    def for_kind(self, kind: str) -> 'LossWeights':
        if kind == 'na':
            return LossWeights(self.alpha, 0.0, 0.0, 0.0, self.dropout)
        if kind == 'no':
            return LossWeights(self.alpha, self.beta, self.gamma, 0.0, self.dropout)
        return self


@dataclass(frozen=True)
class TrainSchedule:
    p1_batches: int = 1
    p2_batches: int = 5
    epochs: int = 30
    batch_size: int = 32
    seed: int = 0
    divergence_limit: float = 1e6
    hyper: AdamHyper = field(default_factory=AdamHyper)

    def validate(self, kind: str) -> 'TrainSchedule':
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError('epochs and batch size must be positive')
        if kind != 'na' and (self.p1_batches < 1 or self.p2_batches < 1):
            raise ConfigError('adversarial schedules need at least one P1 and one P2 batch')
        return self


@dataclass
class ModelVariant:
    kind: str
    groups: Dict[str, ParamGroup]
    weights: LossWeights
    n_states: int
    n_techniques: int
    feature_size: int
    latent_size: int
    hidden_size: int
    t_obs: int
    mode: str

    def p1_groups(self) -> List[ParamGroup]:
        return [self.groups[name] for name in P1_GROUPS if name in self.groups]

    def p2_groups(self) -> List[ParamGroup]:
        return [self.groups[name] for name in P2_GROUPS if name in self.groups]

    def all_groups(self) -> List[ParamGroup]:
        return list(self.groups.values())

    def require(self, name: str) -> ParamGroup:
        if name not in self.groups:
            raise VariantError(f'{self.kind.upper()} variant has no {name}')
        return self.groups[name]

    def snapshot(self) -> Dict[str, Dict[str, bytes]]:
        return {name: group.snapshot() for name, group in self.groups.items()}

    def describe(self) -> Dict:
        return {
            'kind': self.kind, 'mode': self.mode, 'n_states': self.n_states,
            'n_techniques': self.n_techniques, 'feature_size': self.feature_size,
            'latent_size': self.latent_size, 'hidden_size': self.hidden_size, 't_obs': self.t_obs,
            'weights': asdict(self.weights),
        }


def build_model(kind: str, feature_size: int, n_states: int, n_techniques: int = 0,
                latent_size: int = 16, hidden_size: int = 32, t_obs: int = 20, mode: str = 'causal',
                weights: LossWeights = None, seed: int = 0) -> ModelVariant:
    """Allocate exactly the parameter groups of one variant"""
    if kind not in KINDS:
        raise VariantError(f'unknown variant {kind!r}, expected one of {KINDS}')
    if mode not in ('causal', 'noncausal'):
        raise ConfigError(f'unknown mode {mode!r}')
    if kind == 'full' and n_techniques < 2:
        raise ConfigError(f'FULL variant needs at least 2 technique clusters, got {n_techniques}')
    weights = (weights or LossWeights()).validate().for_kind(kind)
    rng = np.random.default_rng(seed)

    estimator_input = feature_size if kind == 'na' else latent_size
    estimator = LstmParams.initial(rng, estimator_input, hidden_size, 'fwd_')
    summary_size = hidden_size
    if mode == 'noncausal':
        estimator.update(LstmParams.initial(rng, estimator_input, hidden_size, 'bwd_'))
        summary_size = 2 * hidden_size
    estimator.update(LinearParams.initial(rng, summary_size, n_states, 'out_'))

    groups = {}
    if kind != 'na':
        groups['encoder'] = ParamGroup('encoder', {
            **LinearParams.initial(rng, feature_size, latent_size, 'e1_'),
            **LinearParams.initial(rng, feature_size, latent_size, 'e2_')})
    groups['estimator'] = ParamGroup('estimator', estimator)
    if kind != 'na':
        groups['reconstructor'] = ParamGroup('reconstructor',
                                             LinearParams.initial(rng, 2 * latent_size, feature_size))
        groups['disentangler1'] = ParamGroup('disentangler1', LinearParams.initial(rng, latent_size, latent_size))
        groups['disentangler2'] = ParamGroup('disentangler2', LinearParams.initial(rng, latent_size, latent_size))
    if kind == 'full':
        groups['discriminator'] = ParamGroup('discriminator', LinearParams.initial(rng, latent_size, n_techniques))

    return ModelVariant(kind, groups, weights, n_states, n_techniques if kind == 'full' else 0,
                        feature_size, latent_size, hidden_size, t_obs, mode)


# ---------------------------------------------------------------------------
# Batches
# ---------------------------------------------------------------------------

@dataclass
class TrainingBatch:
    windows: np.ndarray                    # B × T_obs × |H|
    states: Optional[np.ndarray]           # B
    techniques: Optional[np.ndarray] = None  # B
    trial_ids: List[str] = field(default_factory=list)

    @property
    def size(self) -> int:
        return self.windows.shape[0]


class WindowDataset:
    """Every T_obs window of a set of H matrices, one per frame (every `stride`-th frame)"""

    def __init__(self, trial_ids: Sequence[str], features: Sequence[np.ndarray], states: Sequence[np.ndarray],
                 t_obs: int, mode: str, techniques: Sequence[int] = None, stride: int = 1):
        if not (len(trial_ids) == len(features) == len(states)):
            raise DataError('window dataset: ids, features and states disagree in count')
        self.trial_ids = list(trial_ids)
        self.features = [np.asarray(f, dtype=np.float64) for f in features]
        self.states = [np.asarray(s, dtype=np.int64) for s in states]
        self.techniques = None if techniques is None else np.asarray(techniques, dtype=np.int64)
        self.t_obs = t_obs
        self.mode = mode
        self._indices = [window_indices(len(f), t_obs, mode) for f in self.features]
        rows = [(i, t) for i, f in enumerate(self.features) for t in range(0, len(f), stride)]
        self._samples = np.asarray(rows, dtype=np.int64).reshape(-1, 2)

    @property
    def size(self) -> int:
        return len(self._samples)

    @property
    def feature_size(self) -> int:
        return self.features[0].shape[1] if self.features else 0

    def batch(self, selection: Sequence[int]) -> TrainingBatch:
        pairs = self._samples[np.asarray(selection, dtype=np.int64)]
        windows = np.stack([self.features[i][self._indices[i][t]] for i, t in pairs])
        states = np.asarray([self.states[i][t] for i, t in pairs], dtype=np.int64)
        techniques = None if self.techniques is None else self.techniques[pairs[:, 0]]
        return TrainingBatch(windows, states, techniques, [self.trial_ids[i] for i in pairs[:, 0]])

    def sample_trial_ids(self) -> List[str]:
        return [self.trial_ids[i] for i in self._samples[:, 0]]


# ---------------------------------------------------------------------------
# Components
# ---------------------------------------------------------------------------

def encode_split(H, params: ParamGroup) -> LatentSplit:
    """e1 = tanh(H W1 + b1), e2 = tanh(H W2 + b2)"""
    H = as_tensor(H)
    return LatentSplit(tanh(linear(H, LinearParams.bind(params, 'e1_'))),
                       tanh(linear(H, LinearParams.bind(params, 'e2_'))))


def _final_state(window: Tensor, params: LstmParams, steps: Sequence[int]) -> Tensor:
    state = StreamState.zeros(params.hidden_size, 'estimator', batch=window.shape[0])
    for s in steps:
        state = lstm_step(window[:, s, :], state, params)
    return state.h


def estimate_state(window, params: ParamGroup, mode: str = 'causal', t_obs: int = None) -> Tensor:
    """
    State probabilities from a window (T_obs × n, or a batch B × T_obs × n).
    Causal: one recurrence over the whole window, which ends at t.
    Non-causal: a forward recurrence up to the centre frame and a backward
    one from the last frame down to it, classified from both final states.
    The window keeps T_obs frames, so for even T_obs the backward pass
    starts at t+T_obs/2-1.
    """
    window = as_tensor(window)
    single = window.ndim == 2
    if single:
        window = reshape(window, (1,) + window.shape)
    if window.ndim != 3:
        raise DimensionError(f'estimate_state: expected a window or batch of windows, got {list(window.shape)}')
    length = window.shape[1]
    if t_obs is not None and length != t_obs:
        raise DimensionError(f'estimate_state: window has {length} frames, expected T_obs = {t_obs}')
    forward = LstmParams.bind(params, 'fwd_')
    if window.shape[2] != forward.input_size:
        raise DimensionError(
            f'estimate_state: window features {window.shape[2]} do not match estimator input {forward.input_size}')

    if mode == 'causal':
        summary = _final_state(window, forward, range(length))
    elif mode == 'noncausal':
        if 'bwd_weight' not in params.tensors:
            raise ConfigError('estimate_state: estimator was built for causal mode')
        centre = length // 2
        summary = concat([_final_state(window, forward, range(centre + 1)),
                          _final_state(window, LstmParams.bind(params, 'bwd_'), range(length - 1, centre - 1, -1))],
                         axis=1)
    else:
        raise ConfigError(f'unknown mode {mode!r}')
    probs = softmax(linear(summary, LinearParams.bind(params, 'out_')), axis=-1)
    return reshape(probs, (probs.shape[1],)) if single else probs


def dropout_mask(shape: Tuple[int, ...], rate: float, rng: np.random.Generator) -> np.ndarray:
    if not 0 <= rate < 1:
        raise ConfigError(f'dropout rate must lie in [0, 1), got {rate}')
    return (rng.uniform(size=shape) >= rate).astype(np.float64)


def reconstruct(e2, e1, rate: float, params: ParamGroup, seed=None, training: bool = True) -> Tensor:
    """
    R([e2, psi(e1)]). psi zeroes each e1 coordinate with probability `rate`
    while training, without rescaling, and is the identity otherwise.
    `seed` is an int or a Generator.
    """
    e1, e2 = as_tensor(e1), as_tensor(e2)
    if not 0 <= rate < 1:
        raise ConfigError(f'dropout rate must lie in [0, 1), got {rate}')
    if training and rate > 0:
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        e1 = mul(e1, Tensor(dropout_mask(e1.shape, rate, rng)))
    return linear(concat([e2, e1], axis=-1), LinearParams.bind(params))


def disentangle(source, params: ParamGroup) -> Tensor:
    """Affine prediction of the opposite code"""
    return linear(as_tensor(source), LinearParams.bind(params))


def discriminate(e1, model: ModelVariant) -> Tensor:
    """Technique probabilities from e1 (FULL variant only)"""
    params = model.require('discriminator')
    return softmax(linear(as_tensor(e1), LinearParams.bind(params)), axis=-1)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

TERMS = ('state', 'reconstruction', 'disentangle1', 'disentangle2', 'discriminator')


@dataclass
class LossBreakdown:
    """Raw sub-losses as graph tensors plus the weights they enter the total with"""
    terms: Dict[str, Tensor]
    factors: Dict[str, float]

    def raw(self) -> Dict[str, float]:
        return {name: self.terms[name].item() for name in TERMS if name in self.terms}

    def weighted(self) -> Dict[str, float]:
        return {name: self.factors[name] * self.terms[name].item() for name in TERMS if name in self.terms}

    def combine(self) -> Tensor:
        total = None
        for name in TERMS:
            if name in self.terms and self.factors[name] != 0.0:
                part = self.terms[name] * self.factors[name]
                total = part if total is None else total + part
        return total if total is not None else Tensor(0.0)


def _flat(windows: Tensor) -> Tensor:
    b, t, f = windows.shape
    return reshape(windows, (b * t, f))


def compute_terms(model: ModelVariant, batch: TrainingBatch, rng: np.random.Generator = None,
                  phase: str = 'all', training: bool = True) -> Dict[str, Tensor]:
    """
    Sub-losses over one batch. Reconstruction, disentanglement and
    discrimination cover every frame of every window; the state loss uses
    the label at t. Phase 'p2' skips M and R.
    """
    if batch.states is None:
        raise DataError('batch has no state labels')
    windows = Tensor(batch.windows)
    if windows.ndim != 3 or windows.shape[2] != model.feature_size:
        raise DimensionError(f'batch windows {list(windows.shape)} do not match feature size {model.feature_size}')
    terms: Dict[str, Tensor] = {}

    if model.kind == 'na':
        probs = estimate_state(windows, model.groups['estimator'], model.mode, model.t_obs)
        terms['state'] = cross_entropy(probs, batch.states)
        return terms

    b, t, _ = windows.shape
    H = _flat(windows)
    split = encode_split(H, model.groups['encoder'])
    if phase != 'p2':
        e1_windows = reshape(split.e1, (b, t, model.latent_size))
        probs = estimate_state(e1_windows, model.groups['estimator'], model.mode, model.t_obs)
        terms['state'] = cross_entropy(probs, batch.states)
        rebuilt = reconstruct(split.e2, split.e1, model.weights.dropout, model.groups['reconstructor'],
                              rng if rng is not None else 0, training)
        terms['reconstruction'] = mse(rebuilt, H)
    terms['disentangle1'] = mse(disentangle(split.e1, model.groups['disentangler1']), split.e2)
    terms['disentangle2'] = mse(disentangle(split.e2, model.groups['disentangler2']), split.e1)
    if model.kind == 'full':
        if batch.techniques is None:
            raise DataError('FULL variant batch has no technique labels')
        labels = np.asarray(batch.techniques, dtype=np.int64)
        if np.any(labels < 0) or np.any(labels >= model.n_techniques):
            raise DataError(f'technique label outside [0, {model.n_techniques})')
        terms['discriminator'] = cross_entropy(discriminate(split.e1, model), np.repeat(labels, t))
    return terms


def _breakdown(model: ModelVariant, terms: Dict[str, Tensor], adversary_sign: float) -> LossBreakdown:
    w = model.weights
    factors = {'state': w.alpha, 'reconstruction': w.beta,
               'disentangle1': adversary_sign * w.gamma, 'disentangle2': adversary_sign * w.gamma,
               'discriminator': adversary_sign * w.delta}
    return LossBreakdown(terms, factors)


def loss_nuis(model: ModelVariant, batch: TrainingBatch, rng: np.random.Generator = None,
              terms: Dict[str, Tensor] = None) -> Tuple[Tensor, LossBreakdown]:
    """alpha*L_M + beta*L_R + gamma*(L_f1 + L_f2)"""
    terms = dict(terms if terms is not None else compute_terms(model, batch, rng))
    terms.pop('discriminator', None)
    breakdown = _breakdown(model, terms, 1.0)
    return breakdown.combine(), breakdown


def loss_full(model: ModelVariant, batch: TrainingBatch, rng: np.random.Generator = None,
              terms: Dict[str, Tensor] = None) -> Tuple[Tensor, LossBreakdown]:
    """loss_nuis + delta*L_D"""
    model.require('discriminator')
    if batch.techniques is None:
        raise DataError('loss_full needs technique labels')
    terms = terms if terms is not None else compute_terms(model, batch, rng)
    breakdown = _breakdown(model, terms, 1.0)
    return breakdown.combine(), breakdown


def p1_objective(model: ModelVariant, terms: Dict[str, Tensor]) -> Tuple[Tensor, LossBreakdown]:
    """What {E, M, R} minimize: adversary losses enter negated"""
    breakdown = _breakdown(model, terms, -1.0)
    return breakdown.combine(), breakdown


def p2_objective(terms: Dict[str, Tensor]) -> Tensor:
    """What {f1, f2, D} minimize: their own prediction losses"""
    total = terms['disentangle1'] + terms['disentangle2']
    if 'discriminator' in terms:
        total = total + terms['discriminator']
    return total


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass
class LossTrace:
    p1: List[float] = field(default_factory=list)
    p2: List[float] = field(default_factory=list)
    terms: List[Dict[str, float]] = field(default_factory=list)

    def to_dict(self) -> Dict:
        return {'p1': self.p1, 'p2': self.p2, 'terms': self.terms}


def _guard(value: float, limit: float, epoch: int, phase: str):
    if not np.isfinite(value) or abs(value) > limit:
        raise TrainingError(f'{phase} loss diverged to {value}', epoch=epoch)


def _set_phase(model: ModelVariant, phase: str):
    active = P1_GROUPS if phase == 'p1' else P2_GROUPS
    for name, group in model.groups.items():
        if name in active:
            group.unfreeze()
        else:
            group.freeze()


def train_minimax(model: ModelVariant, dataset: WindowDataset, schedule: TrainSchedule = None,
                  verbose: bool = False) -> Tuple[ModelVariant, LossTrace]:
    """
    Alternate P1 and P2 phases: after every `p1_batches` P1 batches (a pass
    over the shuffled data per epoch) run `p2_batches` P2 batches drawn at
    random. The NA variant trains M on plain supervised batches.
    """
    schedule = (schedule or TrainSchedule()).validate(model.kind)
    if dataset.size == 0:
        raise DataError('training dataset is empty')
    if model.kind == 'full' and dataset.techniques is None:
        raise DataError('FULL variant needs technique labels for every training trial')

    adversarial = model.kind != 'na'
    per_round = schedule.p1_batches if adversarial else 1
    rng = np.random.default_rng(schedule.seed)
    optimizer = Adam(schedule.hyper)
    trace = LossTrace()
    step = 0

    def dropout_rng():
        return np.random.default_rng([schedule.seed, step])

    def draw():
        return rng.choice(dataset.size, size=min(schedule.batch_size, dataset.size), replace=False)

    for epoch in range(schedule.epochs):
        order = rng.permutation(dataset.size)
        batches = [order[i:i + schedule.batch_size] for i in range(0, dataset.size, schedule.batch_size)]
        p1_values, p2_values, sums = [], [], {}
        progress = tqdm(total=len(batches), desc=f'{model.kind} epoch {epoch + 1}/{schedule.epochs}',
                        disable=not verbose, leave=False)

        for start in range(0, len(batches), per_round):
            for selection in batches[start:start + per_round]:
                step += 1
                if adversarial:
                    _set_phase(model, 'p1')
                terms = compute_terms(model, dataset.batch(selection), dropout_rng())
                objective, breakdown = p1_objective(model, terms)
                value = objective.item()
                _guard(value, schedule.divergence_limit, epoch, 'P1')
                optimizer.apply(model.p1_groups(), backward(objective, model.p1_groups()))
                p1_values.append(value)
                for name, raw in breakdown.raw().items():
                    sums[name] = sums.get(name, 0.0) + raw
                progress.update(1)

            if not adversarial:
                continue
            _set_phase(model, 'p2')
            for _ in range(schedule.p2_batches):
                step += 1
                terms = compute_terms(model, dataset.batch(draw()), dropout_rng(), phase='p2')
                objective = p2_objective(terms)
                value = objective.item()
                _guard(value, schedule.divergence_limit, epoch, 'P2')
                optimizer.apply(model.p2_groups(), backward(objective, model.p2_groups()))
                p2_values.append(value)
        progress.close()

        trace.p1.append(float(np.mean(p1_values)))
        trace.p2.append(float(np.mean(p2_values)) if p2_values else 0.0)
        trace.terms.append({name: total / len(p1_values) for name, total in sums.items()})
        if verbose:
            print(f'  epoch {epoch + 1}: P1 {trace.p1[-1]:.4f}  P2 {trace.p2[-1]:.4f}')

    for group in model.groups.values():
        group.unfreeze()
    return model, trace


# ---------------------------------------------------------------------------
# Inference
# ---------------------------------------------------------------------------

def predict_proba(model: ModelVariant, windows: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """State probabilities for B × T_obs × |H| windows"""
    outputs = []
    with no_grad():
        for start in range(0, len(windows), batch_size):
            chunk = Tensor(windows[start:start + batch_size])
            if model.kind == 'na':
                source = chunk
            else:
                b, t, _ = chunk.shape
                source = reshape(encode_split(_flat(chunk), model.groups['encoder']).e1, (b, t, model.latent_size))
            outputs.append(estimate_state(source, model.groups['estimator'], model.mode, model.t_obs).data)
    return np.concatenate(outputs, axis=0) if outputs else np.zeros((0, model.n_states))


def predict(model: ModelVariant, windows: np.ndarray, batch_size: int = 256) -> np.ndarray:
    return np.argmax(predict_proba(model, windows, batch_size), axis=1)


def latent_codes(model: ModelVariant, features: np.ndarray) -> LatentSplit:
    """Per-frame e1 and e2 for a T × |H| matrix"""
    encoder = model.require('encoder')
    with no_grad():
        return encode_split(Tensor(features), encoder)


@dataclass
class EmbeddingRecord:
    trial_id: str
    state: int
    start: int
    stop: int
    e1: np.ndarray
    e2: np.ndarray

    def to_dict(self) -> Dict:
        return {'trial_id': self.trial_id, 'state': self.state, 'start': self.start, 'stop': self.stop,
                'e1': self.e1.tolist(), 'e2': self.e2.tolist()}


def export_embeddings(model: ModelVariant, trial_ids: Sequence[str], features: Sequence[np.ndarray],
                      states: Sequence[np.ndarray]) -> List[EmbeddingRecord]:
    """One record per state instance with the instance-mean e1 and e2"""
    records = []
    for trial_id, H, labels in zip(trial_ids, features, states):
        split = latent_codes(model, H)
        for state, start, stop in instances(labels):
            records.append(EmbeddingRecord(trial_id, state, start, stop,
                                           split.e1.data[start:stop].mean(axis=0),
                                           split.e2.data[start:stop].mean(axis=0)))
    return records


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path: str, model: ModelVariant, pipeline: FeaturePipeline = None, config: Dict = None):
    arrays = {}
    for name, group in model.groups.items():
        for key, tensor in group:
            arrays[f'{name}/{key}'] = tensor.data
    if pipeline is not None:
        for name, group in pipeline.groups.items():
            for key, tensor in group:
                arrays[f'{name}/{key}'] = tensor.data
    meta = {
        'version': CHECKPOINT_VERSION,
        'model': model.describe(),
        'model_groups': list(model.groups),
        'pipeline_groups': list(pipeline.groups) if pipeline is not None else [],
        'pipeline_t_obs': pipeline.t_obs if pipeline is not None else None,
        'config': config or {},
    }
    arrays['__meta__'] = np.array(json.dumps(meta))
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, 'wb') as f:
        np.savez(f, **arrays)


def load_checkpoint(path: str) -> Tuple[ModelVariant, Optional[FeaturePipeline], Dict]:
    """Returns the model, the feature pipeline (if saved) and the config echo"""
    if not os.path.exists(path):
        raise DataError(f'checkpoint not found: {path}')
    try:
        with np.load(path, allow_pickle=False) as archive:
            arrays = {key: archive[key] for key in archive.files}
    except (zipfile.BadZipFile, ValueError, OSError) as e:
        raise ParseError(f'unreadable checkpoint: {e}', path=path)
    if '__meta__' not in arrays:
        raise ParseError('checkpoint has no metadata', path=path)
    meta = json.loads(str(arrays.pop('__meta__')))
    if meta.get('version') != CHECKPOINT_VERSION:
        raise VersionError(f'{path}: checkpoint version {meta.get("version")}, expected {CHECKPOINT_VERSION}')

    def group(name: str) -> ParamGroup:
        prefix = f'{name}/'
        tensors = {key[len(prefix):]: value for key, value in arrays.items() if key.startswith(prefix)}
        if not tensors:
            raise DataError(f'{path}: checkpoint has no tensors for group {name}')
        return ParamGroup(name, tensors)

    info = meta['model']
    model = ModelVariant(info['kind'], {name: group(name) for name in meta['model_groups']},
                         LossWeights(**info['weights']), info['n_states'], info['n_techniques'],
                         info['feature_size'], info['latent_size'], info['hidden_size'], info['t_obs'],
                         info['mode'])
    pipeline = None
    if meta['pipeline_groups']:
        pipeline = FeaturePipeline({name: group(name) for name in meta['pipeline_groups']}, meta['pipeline_t_obs'])
        pipeline.freeze()
    return model, pipeline, meta['config']
