"""
Synthetic Multi-Stream Trials

Generates trials of a task modelled as a finite state machine. Every trial
walks the FSM under one technique (which biases the state ordering and the
motion style) and one set of nuisance draws (gain, offset, noise, drift,
event dropout), emitting synchronized kinematics, vision-feature and event
streams at 10 Hz together with per-frame state labels.

Also holds the dataset directory format, resampling to 10 Hz, windowing and
the cross-validation splitters.
"""

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from errors import ConfigError, DataError, ParseError, VersionError


DATASET_FORMAT = 'multistream-dataset'
DATASET_VERSION = 1
TARGET_RATE = 10.0
STREAM_NAMES = ('vis', 'kin', 'evt')
POSTURE_SPACING = 1.5


@dataclass
class TaskFsm:
    durations: np.ndarray      # S, mean seconds per state
    jitter: float              # relative half-width of the uniform duration draw
    transitions: np.ndarray    # S × S base transition matrix
    kin_level: np.ndarray      # S × C
    kin_amplitude: np.ndarray  # S × C
    kin_frequency: np.ndarray  # S × C, Hz
    kin_phase: np.ndarray      # S × C
    vis_mean: np.ndarray       # S × D_vis
    evt_pattern: np.ndarray    # S × E, binary

    @property
    def n_states(self) -> int:
        return len(self.durations)

    def validate(self) -> 'TaskFsm':
        n = self.n_states
        if n < 2:
            raise ConfigError(f'task FSM needs at least 2 states, got {n}')
        if np.any(self.durations <= 0):
            raise ConfigError('task FSM durations must be positive')
        check_stochastic(self.transitions, 'task FSM transitions')
        for name in ('kin_level', 'kin_amplitude', 'kin_frequency', 'kin_phase', 'vis_mean', 'evt_pattern'):
            if getattr(self, name).shape[0] != n:
                raise ConfigError(f'task FSM {name} must have one row per state')
        return self


@dataclass
class TechniqueSpec:
    technique_id: int
    transitions: np.ndarray   # S × S
    speed: np.ndarray         # C, multiplies kinematics frequencies
    amplitude: np.ndarray     # C, multiplies kinematics amplitudes
    ordering_bias: float
    style_shift: np.ndarray   # S × C, added to kinematics levels
    posture: np.ndarray = None  # C, added to kinematics in every state

    def validate(self, n_states: int) -> 'TechniqueSpec':
        if self.transitions.shape != (n_states, n_states):
            raise ConfigError(f'technique {self.technique_id}: transitions must be {n_states}x{n_states}')
        if self.posture is None:
            self.posture = np.zeros(self.style_shift.shape[1])
        if self.posture.shape != (self.style_shift.shape[1],):
            raise ConfigError(f'technique {self.technique_id}: posture must have one entry per kinematics channel')
        check_stochastic(self.transitions, f'technique {self.technique_id} transitions')
        if np.any(self.speed <= 0) or np.any(self.amplitude <= 0):
            raise ConfigError(f'technique {self.technique_id}: multipliers must be positive')
        return self


@dataclass(frozen=True)
class NuisanceSpec:
    offset_range: float = 0.5
    gain_range: float = 0.2
    noise_sigma: float = 0.05
    drift: float = 0.1
    event_dropout: float = 0.05

    @classmethod
    def identity(cls) -> 'NuisanceSpec':
        return cls(0.0, 0.0, 0.0, 0.0, 0.0)


@dataclass
class MultiStreamTrial:
    trial_id: str
    user_id: int
    technique_id: int
    n_states: int
    kin: np.ndarray            # T × C_kin
    vis: np.ndarray            # T × D_vis
    evt: np.ndarray            # T × E, values in {0, 1}
    states: np.ndarray         # T, int
    rate: float = TARGET_RATE

    @property
    def length(self) -> int:
        return len(self.states)

    def stream(self, name: str) -> np.ndarray:
        if name not in STREAM_NAMES:
            raise DataError(f'unknown stream {name!r}')
        return getattr(self, name)

    def dims(self) -> Dict[str, int]:
        return {name: self.stream(name).shape[1] for name in STREAM_NAMES}

    def validate(self) -> 'MultiStreamTrial':
        lengths = {len(self.states), *(self.stream(name).shape[0] for name in STREAM_NAMES)}
        if len(lengths) != 1:
            raise DataError(f'trial {self.trial_id}: stream lengths differ {sorted(lengths)}')
        if self.length == 0:
            raise DataError(f'trial {self.trial_id}: empty trial')
        if np.any(self.states < 0) or np.any(self.states >= self.n_states):
            raise DataError(f'trial {self.trial_id}: state label outside [0, {self.n_states})')
        if not np.all(np.isin(self.evt, (0.0, 1.0))):
            raise DataError(f'trial {self.trial_id}: event stream is not binary')
        return self


@dataclass
class WindowedSample:
    trial_id: str
    t: int
    mode: str
    window: np.ndarray
    state: int
    technique: Optional[int] = None


@dataclass
class Fold:
    name: str
    train_ids: List[str] = field(default_factory=list)
    test_ids: List[str] = field(default_factory=list)


def check_stochastic(matrix: np.ndarray, label: str):
    if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
        raise ConfigError(f'{label}: expected a square matrix, got shape {list(matrix.shape)}')
    if np.any(matrix < 0) or not np.allclose(matrix.sum(axis=1), 1.0, atol=1e-9):
        raise ConfigError(f'{label}: rows must be non-negative and sum to 1')


# ---------------------------------------------------------------------------
# Task and technique builders
# ---------------------------------------------------------------------------

def _successor_transitions(n_states: int, order: np.ndarray, stay_on_path: float = 0.7) -> np.ndarray:
    """Mostly follow `order` cyclically, otherwise jump uniformly; never self-loop"""
    matrix = np.zeros((n_states, n_states))
    position = np.empty(n_states, dtype=int)
    position[order] = np.arange(n_states)
    for s in range(n_states):
        nxt = order[(position[s] + 1) % n_states]
        others = [j for j in range(n_states) if j != s]
        matrix[s, others] = (1.0 - stay_on_path) / len(others)
        matrix[s, nxt] += stay_on_path
    return matrix


def default_task_fsm(durations: Sequence[float], kin_channels: int, vis_dim: int, evt_channels: int,
                     jitter: float, rng: np.random.Generator) -> TaskFsm:
    n = len(durations)
    return TaskFsm(
        durations=np.asarray(durations, dtype=np.float64),
        jitter=jitter,
        transitions=_successor_transitions(n, np.arange(n)),
        kin_level=rng.normal(0.0, 1.0, size=(n, kin_channels)),
        kin_amplitude=rng.uniform(0.3, 1.0, size=(n, kin_channels)),
        kin_frequency=rng.uniform(0.1, 0.8, size=(n, kin_channels)),
        kin_phase=rng.uniform(0.0, 2 * np.pi, size=(n, kin_channels)),
        vis_mean=rng.normal(0.0, 1.0, size=(n, vis_dim)),
        evt_pattern=(rng.uniform(size=(n, evt_channels)) < 0.4).astype(np.float64),
    ).validate()


def default_techniques(fsm: TaskFsm, n_techniques: int, strength: float, ordering_bias: float,
                       rng: np.random.Generator, axis: np.ndarray = None) -> List[TechniqueSpec]:
    """
    Technique j mixes the base transitions with its own preferred ordering,
    (1-b)·P_base + b·P_order, and reshapes the motion style per channel.

    Techniques also hold the instruments in different postures: technique j
    sits at POSTURE_SPACING·strength·(j − (n−1)/2) along the unit `axis`,
    an offset shared by all of its states.
    """
    n, channels = fsm.kin_level.shape
    if axis is None:
        axis = np.zeros(channels)
    axis = np.asarray(axis, dtype=np.float64)
    if axis.shape != (channels,):
        raise ConfigError(f'posture axis must have {channels} entries, got shape {list(axis.shape)}')
    techniques = []
    for j in range(n_techniques):
        preferred = _successor_transitions(n, rng.permutation(n), stay_on_path=1.0)
        techniques.append(TechniqueSpec(
            technique_id=j,
            transitions=(1.0 - ordering_bias) * fsm.transitions + ordering_bias * preferred,
            speed=np.exp(0.4 * strength * rng.normal(size=channels)),
            amplitude=np.exp(0.4 * strength * rng.normal(size=channels)),
            ordering_bias=ordering_bias,
            style_shift=0.8 * strength * rng.normal(size=(n, channels)),
            posture=POSTURE_SPACING * strength * (j - (n_techniques - 1) / 2.0) * axis,
        ).validate(n))
    return techniques


def posture_axis(channels: int, seed: int) -> np.ndarray:
    """Unit direction in kinematics space along which technique postures differ"""
    axis = np.random.default_rng(np.random.SeedSequence([seed, 2])).normal(size=channels)
    norm = np.linalg.norm(axis)
    return axis / norm if norm > 0 else axis


def build_task(data_settings, seed: int) -> Tuple[TaskFsm, List[TechniqueSpec], NuisanceSpec]:
    """FSM, techniques and nuisance spec for DataSettings, seeded separately from the trials"""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0]))
    fsm = default_task_fsm(data_settings.durations(), data_settings.kin_channels, data_settings.vis_raw_dim,
                           data_settings.evt_channels, data_settings.duration_jitter, rng)
    techniques = default_techniques(fsm, data_settings.n_techniques, data_settings.technique_strength,
                                    data_settings.ordering_bias, rng,
                                    posture_axis(data_settings.kin_channels, seed))
    nuisance = NuisanceSpec(data_settings.offset_range, data_settings.gain_range,
                            data_settings.noise_sigma, data_settings.drift, data_settings.event_dropout)
    return fsm, techniques, nuisance


# ---------------------------------------------------------------------------
# Generation
# ---------------------------------------------------------------------------

def _walk(fsm: TaskFsm, technique: TechniqueSpec, segments: int, rate: float,
          rng: np.random.Generator) -> np.ndarray:
    labels = []
    state = 0
    for segment in range(segments):
        if segment:
            state = int(rng.choice(fsm.n_states, p=technique.transitions[state]))
        seconds = fsm.durations[state] * (1.0 + fsm.jitter * rng.uniform(-1.0, 1.0))
        labels.extend([state] * max(1, int(round(seconds * rate))))
    return np.asarray(labels, dtype=np.int64)


def _elapsed(states: np.ndarray) -> np.ndarray:
    """Frames since the current state instance began"""
    starts = np.r_[0, np.flatnonzero(np.diff(states)) + 1]
    run_lengths = np.diff(np.r_[starts, len(states)])
    return np.arange(len(states)) - np.repeat(starts, run_lengths)


def _generate_one(index: int, user: int, technique: TechniqueSpec, fsm: TaskFsm, nuisance: NuisanceSpec,
                  segments: int, rate: float, seed_seq: np.random.SeedSequence) -> MultiStreamTrial:
    rng = np.random.default_rng(seed_seq)
    states = _walk(fsm, technique, segments, rate, rng)
    tau = _elapsed(states)[:, None] / rate
    length = len(states)

    kin = (fsm.kin_level[states] + technique.style_shift[states] + technique.posture
           + fsm.kin_amplitude[states] * technique.amplitude
           * np.sin(2 * np.pi * fsm.kin_frequency[states] * technique.speed * tau + fsm.kin_phase[states]))
    vis = fsm.vis_mean[states].copy()

    time = np.arange(length)[:, None] / rate
    streams = {'kin': kin, 'vis': vis}
    for name, clean in streams.items():
        width = clean.shape[1]
        gain = 1.0 + nuisance.gain_range * rng.uniform(-1.0, 1.0, size=width)
        offset = nuisance.offset_range * rng.uniform(-1.0, 1.0, size=width)
        period = rng.uniform(20.0, 60.0, size=width)
        drift = nuisance.drift * np.sin(2 * np.pi * time / period + rng.uniform(0, 2 * np.pi, size=width))
        noise = nuisance.noise_sigma * rng.normal(size=clean.shape)
        streams[name] = gain * clean + offset + drift + noise

    evt = fsm.evt_pattern[states].copy()
    dropped = rng.uniform(size=evt.shape) < nuisance.event_dropout
    evt[dropped] = 0.0

    return MultiStreamTrial(
        trial_id=f'{index:04d}', user_id=int(user), technique_id=technique.technique_id,
        n_states=fsm.n_states, kin=streams['kin'], vis=streams['vis'], evt=evt, states=states, rate=rate,
    ).validate()


def generate(fsm: TaskFsm, techniques: Sequence[TechniqueSpec], nuisance: NuisanceSpec, n_trials: int,
             n_users: int, seed: int, segments_per_trial: int = 8, rate: float = TARGET_RATE,
             workers: int = 1) -> List[MultiStreamTrial]:
    """
    Users and techniques are drawn independently for every trial, each from
    a shuffled pool that holds every user (and every technique) equally
    often, so all of them appear and neither determines the other. Each
    trial then draws from its own RNG substream, so the result does not
    depend on `workers`.
    """
    if not n_trials >= n_users >= 1:
        raise ConfigError(f'need n_trials >= n_users >= 1, got {n_trials} trials and {n_users} users')
    if not techniques:
        raise ConfigError('need at least one technique')
    fsm.validate()
    for technique in techniques:
        technique.validate(fsm.n_states)

    draws = np.random.default_rng(np.random.SeedSequence([seed, 3]))
    users = draws.permutation(np.arange(n_trials) % n_users)
    assigned = draws.permutation(np.arange(n_trials) % len(techniques))
    children = np.random.SeedSequence([seed, 1]).spawn(n_trials)

    def make(i):
        return _generate_one(i, users[i], techniques[assigned[i]], fsm, nuisance, segments_per_trial, rate,
                             children[i])

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            return list(executor.map(make, range(n_trials)))
    return [make(i) for i in range(n_trials)]


def generate_from_settings(data_settings, seed: int, workers: int = 1) -> List[MultiStreamTrial]:
    fsm, techniques, nuisance = build_task(data_settings, seed)
    return generate(fsm, techniques, nuisance, data_settings.n_trials, data_settings.n_users, seed,
                    data_settings.segments_per_trial, TARGET_RATE, workers)


# ---------------------------------------------------------------------------
# Dataset directory
# ---------------------------------------------------------------------------

def _trial_record(trial: MultiStreamTrial) -> Dict:
    return {
        'trial_id': trial.trial_id,
        'user_id': int(trial.user_id),
        'technique_id': int(trial.technique_id),
        'rate': float(trial.rate),
        'n_states': int(trial.n_states),
        'length': trial.length,
        'dims': trial.dims(),
        'states': [int(s) for s in trial.states],
        # columnar: one list per channel
        'kin': trial.kin.T.tolist(),
        'vis': trial.vis.T.tolist(),
        'evt': trial.evt.T.astype(np.int64).tolist(),
    }


def _read_json(path: str) -> Dict:
    if not os.path.exists(path):
        raise DataError(f'missing dataset file {path}')
    with open(path, 'r', encoding='utf-8') as f:
        text = f.read()
    try:
        return json.loads(text)
    except json.JSONDecodeError as e:
        raise ParseError(f'malformed dataset file: {e.msg}', path=path, line=e.lineno, offset=e.pos)


def _columns(record: Dict, name: str, length: int, width: int, path: str) -> np.ndarray:
    block = np.asarray(record[name], dtype=np.float64)
    if width == 0:
        return np.zeros((length, 0))
    if block.shape != (width, length):
        raise DataError(f'{path}: {name} block has shape {list(block.shape)}, expected {[width, length]}')
    return block.T.copy()


def save(trials: Sequence[MultiStreamTrial], path: str, config: Dict = None, seed: int = None):
    os.makedirs(path, exist_ok=True)
    manifest = {
        'format': DATASET_FORMAT,
        'version': DATASET_VERSION,
        'seed': seed,
        'n_trials': len(trials),
        'trial_ids': [t.trial_id for t in trials],
        'config': config or {},
    }
    with open(os.path.join(path, 'manifest.json'), 'w', encoding='utf-8') as f:
        json.dump(manifest, f, indent=2)
    for trial in trials:
        with open(os.path.join(path, f'trial_{trial.trial_id}.json'), 'w', encoding='utf-8') as f:
            json.dump(_trial_record(trial), f, indent=2)


def load_manifest(path: str) -> Dict:
    manifest_path = os.path.join(path, 'manifest.json')
    manifest = _read_json(manifest_path)
    if manifest.get('format') != DATASET_FORMAT:
        raise DataError(f'{manifest_path}: not a {DATASET_FORMAT} manifest')
    if manifest.get('version') != DATASET_VERSION:
        raise VersionError(f'{manifest_path}: dataset version {manifest.get("version")}, '
                           f'this build reads version {DATASET_VERSION}')
    return manifest


def load(path: str) -> List[MultiStreamTrial]:
    manifest = load_manifest(path)
    trials = []
    for trial_id in manifest['trial_ids']:
        trial_path = os.path.join(path, f'trial_{trial_id}.json')
        record = _read_json(trial_path)
        try:
            length, dims = record['length'], record['dims']
            trial = MultiStreamTrial(
                trial_id=record['trial_id'],
                user_id=record['user_id'],
                technique_id=record['technique_id'],
                n_states=record['n_states'],
                kin=_columns(record, 'kin', length, dims['kin'], trial_path),
                vis=_columns(record, 'vis', length, dims['vis'], trial_path),
                evt=_columns(record, 'evt', length, dims['evt'], trial_path),
                states=np.asarray(record['states'], dtype=np.int64),
                rate=record['rate'],
            )
        except (KeyError, TypeError, ValueError) as e:
            raise DataError(f'{trial_path}: incomplete trial record ({e})')
        trials.append(trial.validate())
    return trials


# ---------------------------------------------------------------------------
# Synchronization
# ---------------------------------------------------------------------------

def _nearest(source_times: np.ndarray, target_times: np.ndarray) -> np.ndarray:
    right = np.clip(np.searchsorted(source_times, target_times), 1, len(source_times) - 1)
    left = right - 1
    pick_right = np.abs(source_times[right] - target_times) < np.abs(target_times - source_times[left])
    return np.where(pick_right, right, left)


def resample(trial: MultiStreamTrial, source_rate: float, timestamps: np.ndarray = None,
             target_rate: float = TARGET_RATE) -> MultiStreamTrial:
    """
    Bring a trial to the target rate: linear interpolation for kinematics and
    vision features, nearest sample for events and state labels.
    """
    if source_rate <= 0:
        raise ConfigError(f'source rate must be positive, got {source_rate}')
    if trial.length == 0:
        raise DataError(f'trial {trial.trial_id}: empty trial')
    times = np.arange(trial.length) / source_rate if timestamps is None else np.asarray(timestamps, float)
    if len(times) != trial.length:
        raise DataError(f'trial {trial.trial_id}: {len(times)} timestamps for {trial.length} frames')
    if np.any(np.diff(times) <= 0):
        raise DataError(f'trial {trial.trial_id}: timestamps are not strictly increasing')

    count = int(np.floor((times[-1] - times[0]) * target_rate + 1e-9)) + 1
    target = times[0] + np.arange(count) / target_rate
    if trial.length == 1:
        picks = np.zeros(count, dtype=int)
    else:
        picks = _nearest(times, target)

    def interpolate(block: np.ndarray) -> np.ndarray:
        return np.stack([np.interp(target, times, block[:, c]) for c in range(block.shape[1])], axis=1) \
            if block.shape[1] else np.zeros((count, 0))

    return MultiStreamTrial(
        trial_id=trial.trial_id, user_id=trial.user_id, technique_id=trial.technique_id,
        n_states=trial.n_states, kin=interpolate(trial.kin), vis=interpolate(trial.vis),
        evt=trial.evt[picks].copy(), states=trial.states[picks].copy(), rate=target_rate,
    )


# ---------------------------------------------------------------------------
# Windows and state instances
# ---------------------------------------------------------------------------

def window_indices(length: int, t_obs: int, mode: str) -> np.ndarray:
    """
    length × t_obs frame indices, one row per frame. Causal rows cover
    [t-t_obs+1, t]; non-causal rows are centred on t. Every row holds
    exactly t_obs frames, so an even t_obs covers [t-t_obs/2, t+t_obs/2-1].
    Out-of-range indices repeat the nearest end frame.
    """
    if t_obs < 1:
        raise ConfigError(f'T_obs must be at least 1, got {t_obs}')
    if length < 1:
        raise DataError('cannot window an empty trial')
    if mode == 'causal':
        offsets = np.arange(-t_obs + 1, 1)
    elif mode == 'noncausal':
        offsets = np.arange(t_obs) - t_obs // 2
    else:
        raise ConfigError(f'unknown mode {mode!r}')
    return np.clip(np.arange(length)[:, None] + offsets[None, :], 0, length - 1)


def center_index(t_obs: int, mode: str) -> int:
    """Position of frame t inside its window"""
    return t_obs - 1 if mode == 'causal' else t_obs // 2


def window(trial: MultiStreamTrial, t_obs: int, mode: str, features: np.ndarray = None,
           technique: int = None) -> List[WindowedSample]:
    """
    One sample per frame. `features` (T × F) defaults to the raw streams
    side by side (vis, kin, evt).
    """
    if trial.length == 0:
        raise DataError(f'trial {trial.trial_id}: empty trial')
    if features is None:
        features = np.concatenate([trial.vis, trial.kin, trial.evt], axis=1)
    if len(features) != trial.length:
        raise DataError(f'trial {trial.trial_id}: {len(features)} feature rows for {trial.length} frames')
    idx = window_indices(trial.length, t_obs, mode)
    return [WindowedSample(trial.trial_id, t, mode, features[idx[t]], int(trial.states[t]), technique)
            for t in range(trial.length)]


def instances(states: Sequence[int]) -> List[Tuple[int, int, int]]:
    """Maximal runs of constant state as (state, start, stop)"""
    states = np.asarray(states)
    if states.size == 0:
        return []
    starts = np.r_[0, np.flatnonzero(np.diff(states)) + 1]
    stops = np.r_[starts[1:], len(states)]
    return [(int(states[a]), int(a), int(b)) for a, b in zip(starts, stops)]


# ---------------------------------------------------------------------------
# Splitters
# ---------------------------------------------------------------------------

def _grouped_folds(trials: Sequence[MultiStreamTrial], key, prefix: str) -> List[Fold]:
    groups = sorted({key(t) for t in trials})
    return [Fold(name=f'{prefix}-{g}',
                 train_ids=[t.trial_id for t in trials if key(t) != g],
                 test_ids=[t.trial_id for t in trials if key(t) == g]) for g in groups]


def split_louo(trials: Sequence[MultiStreamTrial]) -> List[Fold]:
    users = {t.user_id for t in trials}
    if len(users) < 2:
        raise ConfigError('leave-one-user-out needs at least 2 users; use k-fold splitting instead')
    return _grouped_folds(trials, lambda t: t.user_id, 'user')


def split_kfold(trials: Sequence[MultiStreamTrial], k: int, seed: int) -> List[Fold]:
    n = len(trials)
    if k < 2 or k > n:
        raise ConfigError(f'k-fold needs 2 <= k <= {n} trials, got k={k}')
    order = np.random.default_rng(seed).permutation(n)
    ids = [trials[i].trial_id for i in order]
    folds = []
    for i, part in enumerate(np.array_split(np.arange(n), k)):
        test = [ids[j] for j in part]
        held = set(test)
        folds.append(Fold(name=f'fold-{i}', train_ids=[t.trial_id for t in trials if t.trial_id not in held],
                          test_ids=test))
    return folds


def split_leave_one_technique_out(trials: Sequence[MultiStreamTrial]) -> List[Fold]:
    if len({t.technique_id for t in trials}) < 2:
        raise ConfigError('leave-one-technique-out needs at least 2 techniques')
    return _grouped_folds(trials, lambda t: t.technique_id, 'technique')


def select(trials: Sequence[MultiStreamTrial], ids: Sequence[str]) -> List[MultiStreamTrial]:
    by_id = {t.trial_id: t for t in trials}
    missing = [i for i in ids if i not in by_id]
    if missing:
        raise DataError(f'unknown trial ids {missing}')
    return [by_id[i] for i in ids]
