"""
Configuration

Settings come from a dotenv-format file (KEY=value lines), the process
environment and command-line flags, in increasing order of precedence.
"""

import os
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Dict, Optional, Tuple

from dotenv import dotenv_values

from errors import ConfigError


MODES = ('causal', 'noncausal')
VARIANTS = ('na', 'no', 'full')

# Mean state durations (seconds) of the three benchmark tasks
PRESET_DURATIONS = {
    'rious': (6.3, 7.6, 3.1, 1.1, 2.4, 2.3, 5.1, 1.7),
    'jigsaws': (2.2, 3.4, 9.0, 4.5, 3.0, 4.8, 7.7, 3.1, 7.3),
    'hernia': (3.9, 3.3, 4.2, 3.6, 3.7, 6.6, 5.8, 4.8, 4.6, 4.3, 3.8),
}


@dataclass(frozen=True)
class DataSettings:
    preset: str = 'rious'
    n_states: int = 8
    n_techniques: int = 3
    n_users: int = 5
    n_trials: int = 30
    segments_per_trial: int = 8
    rate: float = 10.0
    kin_channels: int = 8
    vis_raw_dim: int = 12
    evt_channels: int = 4
    noise_sigma: float = 0.05
    offset_range: float = 0.5
    gain_range: float = 0.2
    drift: float = 0.1
    event_dropout: float = 0.05
    duration_jitter: float = 0.3
    technique_strength: float = 1.0
    ordering_bias: float = 0.5

    def durations(self) -> Tuple[float, ...]:
        base = PRESET_DURATIONS[self.preset]
        return tuple(base[i % len(base)] for i in range(self.n_states))


@dataclass(frozen=True)
class ModelSettings:
    n_vis: int = 40
    n_kin: int = 40
    n_evt: int = 4
    attention_size: int = 8
    latent_size: int = 16
    estimator_hidden: int = 32
    t_obs: int = 20
    dropout_rate: float = 0.4
    alpha: float = 1.0
    beta: float = 0.5
    gamma: float = 0.1
    delta: float = 0.1


@dataclass(frozen=True)
class TrainSettings:
    epochs: int = 30
    batch_size: int = 32
    p1_batches: int = 1
    p2_batches: int = 5
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    pretrain_epochs: int = 2
    bptt_length: int = 50
    train_stride: int = 4
    divergence_limit: float = 1e6


@dataclass(frozen=True)
class ClusterSettings:
    k_min: int = 2
    k_max: int = 8
    restarts: int = 10
    dtw_band: Optional[int] = None
    fixed_k: Optional[int] = None
    workers: int = 1


@dataclass(frozen=True)
class Settings:
    seed: int = 0
    mode: str = 'causal'
    variant: str = 'full'
    archives_dir: str = 'archives'
    data: DataSettings = field(default_factory=DataSettings)
    model: ModelSettings = field(default_factory=ModelSettings)
    train: TrainSettings = field(default_factory=TrainSettings)
    cluster: ClusterSettings = field(default_factory=ClusterSettings)

    def echo(self) -> Dict:
        """Plain, ordered view of every setting (used as the config echo)"""
        return asdict(self)

    def with_values(self, **values) -> 'Settings':
        """Return a copy with KEY=value overrides applied (same keys as the config file)"""
        return _apply(self, {key.upper(): str(value) for key, value in values.items()})

    def validate(self) -> 'Settings':
        d, m, t, c = self.data, self.model, self.train, self.cluster
        if self.mode not in MODES:
            raise ConfigError(f'MODE must be one of {MODES}, got {self.mode!r}')
        if self.variant not in VARIANTS:
            raise ConfigError(f'VARIANT must be one of {VARIANTS}, got {self.variant!r}')
        if d.preset not in PRESET_DURATIONS:
            raise ConfigError(f'PRESET must be one of {tuple(PRESET_DURATIONS)}, got {d.preset!r}')
        if d.n_states < 2:
            raise ConfigError('N_STATES must be at least 2')
        if d.n_techniques < 1 or d.n_users < 1 or d.n_trials < d.n_users:
            raise ConfigError('need N_TRIALS >= N_USERS >= 1 and N_TECHNIQUES >= 1')
        if d.rate <= 0:
            raise ConfigError('RATE must be positive')
        if d.noise_sigma < 0 or d.drift < 0 or d.offset_range < 0 or not 0 <= d.gain_range < 1:
            raise ConfigError('nuisance magnitudes must be non-negative and GAIN_RANGE < 1')
        if not 0 <= d.event_dropout <= 1 or not 0 <= d.ordering_bias <= 1:
            raise ConfigError('EVENT_DROPOUT and ORDERING_BIAS must lie in [0, 1]')
        if not 0 <= m.dropout_rate < 1:
            raise ConfigError(f'DROPOUT_RATE must lie in [0, 1), got {m.dropout_rate}')
        if min(m.alpha, m.beta, m.gamma, m.delta) < 0 or m.alpha <= 0:
            raise ConfigError('loss weights must be non-negative with LOSS_ALPHA > 0')
        if min(m.t_obs, m.latent_size, m.estimator_hidden, m.attention_size, m.n_vis, m.n_kin, m.n_evt) < 1:
            raise ConfigError('T_OBS, layer sizes and stream feature sizes must be positive')
        if t.epochs < 1 or t.batch_size < 1 or t.p1_batches < 1 or t.p2_batches < 1:
            raise ConfigError('EPOCHS, BATCH_SIZE, P1_BATCHES and P2_BATCHES must be positive')
        if t.bptt_length < 1 or t.train_stride < 1 or t.pretrain_epochs < 0:
            raise ConfigError('BPTT_LENGTH and TRAIN_STRIDE must be positive')
        if c.k_min < 2 or c.k_max < c.k_min or c.restarts < 1:
            raise ConfigError('cluster range needs 2 <= K_MIN <= K_MAX and RESTARTS >= 1')
        return self


def _optional_int(text: str) -> Optional[int]:
    if text.strip().lower() in ('', 'none', 'null'):
        return None
    return int(text)


# config key -> (section, attribute, parser)
_FIELDS: Dict[str, Tuple[str, str, Callable]] = {
    'SEED': ('', 'seed', int),
    'MODE': ('', 'mode', str),
    'VARIANT': ('', 'variant', str),
    'ARCHIVES_DIR': ('', 'archives_dir', str),
    'PRESET': ('data', 'preset', str),
    'N_STATES': ('data', 'n_states', int),
    'N_TECHNIQUES': ('data', 'n_techniques', int),
    'N_USERS': ('data', 'n_users', int),
    'N_TRIALS': ('data', 'n_trials', int),
    'SEGMENTS_PER_TRIAL': ('data', 'segments_per_trial', int),
    'RATE': ('data', 'rate', float),
    'KIN_CHANNELS': ('data', 'kin_channels', int),
    'VIS_RAW_DIM': ('data', 'vis_raw_dim', int),
    'EVT_CHANNELS': ('data', 'evt_channels', int),
    'NOISE_SIGMA': ('data', 'noise_sigma', float),
    'OFFSET_RANGE': ('data', 'offset_range', float),
    'GAIN_RANGE': ('data', 'gain_range', float),
    'DRIFT': ('data', 'drift', float),
    'EVENT_DROPOUT': ('data', 'event_dropout', float),
    'DURATION_JITTER': ('data', 'duration_jitter', float),
    'TECHNIQUE_STRENGTH': ('data', 'technique_strength', float),
    'ORDERING_BIAS': ('data', 'ordering_bias', float),
    'N_VIS': ('model', 'n_vis', int),
    'N_KIN': ('model', 'n_kin', int),
    'N_EVT': ('model', 'n_evt', int),
    'ATTENTION_SIZE': ('model', 'attention_size', int),
    'LATENT_SIZE': ('model', 'latent_size', int),
    'ESTIMATOR_HIDDEN': ('model', 'estimator_hidden', int),
    'T_OBS': ('model', 't_obs', int),
    'DROPOUT_RATE': ('model', 'dropout_rate', float),
    'LOSS_ALPHA': ('model', 'alpha', float),
    'LOSS_BETA': ('model', 'beta', float),
    'LOSS_GAMMA': ('model', 'gamma', float),
    'LOSS_DELTA': ('model', 'delta', float),
    'EPOCHS': ('train', 'epochs', int),
    'BATCH_SIZE': ('train', 'batch_size', int),
    'P1_BATCHES': ('train', 'p1_batches', int),
    'P2_BATCHES': ('train', 'p2_batches', int),
    'LEARNING_RATE': ('train', 'learning_rate', float),
    'ADAM_BETA1': ('train', 'adam_beta1', float),
    'ADAM_BETA2': ('train', 'adam_beta2', float),
    'ADAM_EPS': ('train', 'adam_eps', float),
    'PRETRAIN_EPOCHS': ('train', 'pretrain_epochs', int),
    'BPTT_LENGTH': ('train', 'bptt_length', int),
    'TRAIN_STRIDE': ('train', 'train_stride', int),
    'DIVERGENCE_LIMIT': ('train', 'divergence_limit', float),
    'K_MIN': ('cluster', 'k_min', int),
    'K_MAX': ('cluster', 'k_max', int),
    'RESTARTS': ('cluster', 'restarts', int),
    'DTW_BAND': ('cluster', 'dtw_band', _optional_int),
    'FIXED_K': ('cluster', 'fixed_k', _optional_int),
    'WORKERS': ('cluster', 'workers', int),
}


def config_keys() -> Tuple[str, ...]:
    return tuple(_FIELDS)


def _apply(settings: Settings, values: Dict[str, str]) -> Settings:
    sections = {name: getattr(settings, name) for name in ('data', 'model', 'train', 'cluster')}
    top = {}
    for key, raw in values.items():
        if key not in _FIELDS:
            raise ConfigError(f'unknown configuration key {key}')
        section, attr, parse = _FIELDS[key]
        try:
            value = parse(raw.strip()) if isinstance(raw, str) else raw
        except ValueError:
            raise ConfigError(f'{key}: cannot parse {raw!r}')
        if section:
            sections[section] = replace(sections[section], **{attr: value})
        else:
            top[attr] = value
    return replace(settings, **top, **sections).validate()


def load_settings(config_path: str = None, overrides: Dict[str, object] = None,
                  environ: Dict[str, str] = None) -> Settings:
    """
    Build Settings from defaults, a dotenv file, the environment and
    explicit overrides (CLI flags), later sources winning.
    """
    values: Dict[str, str] = {}
    if config_path is not None:
        if not os.path.exists(config_path):
            raise ConfigError(f'config file not found: {config_path}')
        file_values = dotenv_values(config_path)
    elif os.path.exists('.env'):
        file_values = dotenv_values('.env')
    else:
        file_values = {}
    for key, value in file_values.items():
        if value is not None:
            values[key.upper()] = value

    env = os.environ if environ is None else environ
    for key in _FIELDS:
        if key in env:
            values[key] = env[key]

    for key, value in (overrides or {}).items():
        if value is not None:
            values[key.upper()] = str(value)

    return _apply(Settings(), values)
