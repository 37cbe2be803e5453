"""
Stream Encoders

LSTM encoders for the three synchronized streams. The vision stream runs a
plain LSTM over precomputed feature vectors. Kinematics and events run an
attention-weighted LSTM: at every frame a softmax over channels, scored from
the previous state and the trailing observation window, reweights the raw
input before the cell update. The three hidden states are fused into the
per-frame feature bundle H.
"""

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np
from tqdm import tqdm

from errors import DataError, DimensionError, DomainError
from numerics import (Adam, AdamHyper, ParamGroup, Tensor, as_tensor, backward, concat,
                      cross_entropy, glorot, matmul, mul, no_grad, reshape, sigmoid,
                      softmax, swapaxes, tanh)


STREAMS = ('vis', 'kin', 'evt')
FORGET_BIAS = 1.0


# ---------------------------------------------------------------------------
# Affine layer
# ---------------------------------------------------------------------------

@dataclass
class LinearParams:
    weight: Tensor
    bias: Tensor

    @property
    def input_size(self) -> int:
        return self.weight.shape[0]

    @property
    def output_size(self) -> int:
        return self.weight.shape[1]

    @staticmethod
    def initial(rng: np.random.Generator, n_in: int, n_out: int, prefix: str = '') -> Dict[str, np.ndarray]:
        return {f'{prefix}weight': glorot(rng, n_in, n_out), f'{prefix}bias': np.zeros(n_out)}

    @classmethod
    def bind(cls, group: ParamGroup, prefix: str = '') -> 'LinearParams':
        return cls(group[f'{prefix}weight'], group[f'{prefix}bias'])


def _as_rows(x: Tensor) -> Tensor:
    return reshape(x, (1, x.shape[0])) if x.ndim == 1 else x


def linear(x: Tensor, params: LinearParams) -> Tensor:
    """x @ W + b for one vector or a batch of row vectors"""
    x = as_tensor(x)
    if x.shape[-1] != params.input_size:
        raise DimensionError(
            f'linear: input shape {list(x.shape)} does not match weight shape {list(params.weight.shape)}')
    out = matmul(_as_rows(x), params.weight) + params.bias
    return reshape(out, (params.output_size,)) if x.ndim == 1 else out


# ---------------------------------------------------------------------------
# LSTM cell
# ---------------------------------------------------------------------------

@dataclass
class LstmParams:
    """Stacked gate weights, columns ordered input, forget, output, candidate"""
    weight: Tensor  # (input + hidden) × 4·hidden
    bias: Tensor    # 4·hidden

    @property
    def hidden_size(self) -> int:
        return self.weight.shape[1] // 4

    @property
    def input_size(self) -> int:
        return self.weight.shape[0] - self.hidden_size

    def parameter_count(self) -> int:
        return self.weight.size + self.bias.size

    @staticmethod
    def initial(rng: np.random.Generator, n_in: int, n_hidden: int, prefix: str = '') -> Dict[str, np.ndarray]:
        bias = np.zeros(4 * n_hidden)
        bias[n_hidden:2 * n_hidden] = FORGET_BIAS
        return {f'{prefix}weight': glorot(rng, n_in + n_hidden, 4 * n_hidden), f'{prefix}bias': bias}

    @classmethod
    def bind(cls, group: ParamGroup, prefix: str = '') -> 'LstmParams':
        return cls(group[f'{prefix}weight'], group[f'{prefix}bias'])


@dataclass
class StreamState:
    h: Tensor
    c: Tensor
    stream: str = 'vis'

    @classmethod
    def zeros(cls, hidden_size: int, stream: str = 'vis', batch: int = None) -> 'StreamState':
        shape = (hidden_size,) if batch is None else (batch, hidden_size)
        return cls(Tensor(np.zeros(shape)), Tensor(np.zeros(shape)), stream)

    def detached(self) -> 'StreamState':
        return StreamState(Tensor(self.h.data), Tensor(self.c.data), self.stream)


def lstm_step(x: Tensor, state: StreamState, params: LstmParams) -> StreamState:
    """One LSTM cell update for a single vector or a batch of rows"""
    x = as_tensor(x)
    n = params.hidden_size
    if x.shape[-1] != params.input_size:
        raise DimensionError(
            f'lstm_step: input shape {list(x.shape)} does not match cell input size {params.input_size}')
    if state.h.shape[-1] != n or state.c.shape[-1] != n:
        raise DimensionError(
            f'lstm_step: state shapes {list(state.h.shape)}/{list(state.c.shape)} do not match hidden size {n}')

    single = x.ndim == 1
    z = matmul(concat([_as_rows(x), _as_rows(state.h)], axis=1), params.weight) + params.bias
    i = sigmoid(z[:, :n])
    f = sigmoid(z[:, n:2 * n])
    o = sigmoid(z[:, 2 * n:3 * n])
    g = tanh(z[:, 3 * n:])
    c = mul(f, _as_rows(state.c)) + mul(i, g)
    h = mul(o, tanh(c))
    if single:
        h, c = reshape(h, (n,)), reshape(c, (n,))
    return StreamState(h, c, state.stream)


# ---------------------------------------------------------------------------
# Channel attention
# ---------------------------------------------------------------------------

@dataclass
class AttentionParams:
    u: Tensor  # a
    W: Tensor  # 2·hidden × a
    V: Tensor  # T_obs × a

    @property
    def window(self) -> int:
        return self.V.shape[0]

    @staticmethod
    def initial(rng: np.random.Generator, n_hidden: int, t_obs: int, size: int,
                prefix: str = 'att_') -> Dict[str, np.ndarray]:
        return {
            f'{prefix}u': glorot(rng, size, 1).reshape(size),
            f'{prefix}W': glorot(rng, 2 * n_hidden, size),
            f'{prefix}V': glorot(rng, t_obs, size),
        }

    @classmethod
    def bind(cls, group: ParamGroup, prefix: str = 'att_') -> 'AttentionParams':
        return cls(group[f'{prefix}u'], group[f'{prefix}W'], group[f'{prefix}V'])


def attention_weights(window, state: StreamState, params: AttentionParams) -> Tensor:
    """
    Channel weights alpha_t = softmax_k(u . tanh(W[h;c] + V^T x^k)), where
    x^k is channel k over the T_obs-frame window (rows are frames).
    """
    window = as_tensor(window)
    if window.size == 0:
        raise DomainError('attention_weights: empty window')
    if window.ndim != 2 or window.shape[0] != params.window:
        raise DimensionError(
            f'attention_weights: window shape {list(window.shape)} does not match V shape {list(params.V.shape)}')
    memory = concat([_as_rows(state.h), _as_rows(state.c)], axis=1)
    projected = matmul(memory, params.W)                                   # 1 × a
    channels = matmul(swapaxes(window, 0, 1), params.V)                    # C × a
    hidden = tanh(channels + projected)
    scores = matmul(hidden, reshape(params.u, (params.u.shape[0], 1)))     # C × 1
    return softmax(reshape(scores, (window.shape[1],)))


def trailing_window(frames: np.ndarray, t: int, length: int) -> np.ndarray:
    """Frames [t-length+1, t] with the first frame repeated before the start"""
    rows = np.arange(t - length + 1, t + 1)
    return frames[np.clip(rows, 0, None)]


# ---------------------------------------------------------------------------
# Stream encoding
# ---------------------------------------------------------------------------

def encode_stream(frames, params: LstmParams, attention: Optional[AttentionParams] = None,
                  stream: str = 'vis', state: StreamState = None, start: int = 0) -> List[StreamState]:
    """
    Run the recurrence left to right over time-major frames (T × channels),
    starting from zero state. Chunked callers pass the carried `state` and
    the first frame to encode as `start`; attention windows still see the
    frames before it.
    """
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 2 or frames.shape[0] == 0:
        raise DataError(f'encode_stream: {stream} stream needs at least one frame, got shape {list(frames.shape)}')
    bad = np.flatnonzero(~np.all(np.isfinite(frames), axis=1))
    if bad.size:
        raise DataError(f'encode_stream: non-finite {stream} input at frame {int(bad[0])}')
    if frames.shape[1] != params.input_size:
        raise DimensionError(
            f'encode_stream: {stream} frames have {frames.shape[1]} channels, encoder expects {params.input_size}')

    if state is None:
        state = StreamState.zeros(params.hidden_size, stream)
    states = []
    for t in range(start, frames.shape[0]):
        x = Tensor(frames[t])
        if attention is not None:
            alpha = attention_weights(trailing_window(frames, t, attention.window), state, attention)
            x = mul(alpha, x)
        state = lstm_step(x, state, params)
        states.append(state)
    return states


@dataclass
class FeatureBundle:
    h_vis: Tensor
    h_kin: Tensor
    h_evt: Tensor

    @property
    def sizes(self) -> tuple:
        return self.h_vis.shape[-1], self.h_kin.shape[-1], self.h_evt.shape[-1]

    @property
    def H(self) -> Tensor:
        return concat([self.h_vis, self.h_kin, self.h_evt], axis=-1)


def fuse(h_vis, h_kin, h_evt, sizes: Sequence[int] = None) -> FeatureBundle:
    """Bundle the three stream features; H concatenates them as vis, kin, evt"""
    parts = [as_tensor(h_vis), as_tensor(h_kin), as_tensor(h_evt)]
    if sizes is not None:
        for name, part, expected in zip(STREAMS, parts, sizes):
            if part.shape[-1] != expected:
                raise DimensionError(f'fuse: h_{name} has size {part.shape[-1]}, expected {expected}')
    leading = {part.shape[:-1] for part in parts}
    if len(leading) != 1:
        raise DimensionError(f'fuse: stream shapes disagree: {[list(p.shape) for p in parts]}')
    return FeatureBundle(*parts)


# ---------------------------------------------------------------------------
# Feature pipeline
# ---------------------------------------------------------------------------

class FeaturePipeline:
    """
    Owns the three stream encoders plus a per-frame state head used to
    pretrain them. After `fit` the encoders are frozen and `transform`
    turns a trial's raw streams into its H matrix (T × |H|).
    """

    GROUPS = ('vis_encoder', 'kin_encoder', 'evt_encoder', 'state_head')

    def __init__(self, groups: Dict[str, ParamGroup], t_obs: int):
        self.groups = groups
        self.t_obs = t_obs

    @classmethod
    def create(cls, rng: np.random.Generator, dims: Dict[str, int], sizes: Sequence[int],
               n_states: int, t_obs: int, attention_size: int) -> 'FeaturePipeline':
        """`dims` gives raw channel counts per stream; `sizes` the n_vis/n_kin/n_evt hidden sizes"""
        n_vis, n_kin, n_evt = sizes
        groups = {
            'vis_encoder': ParamGroup('vis_encoder', LstmParams.initial(rng, dims['vis'], n_vis)),
            'kin_encoder': ParamGroup('kin_encoder', {
                **LstmParams.initial(rng, dims['kin'], n_kin),
                **AttentionParams.initial(rng, n_kin, t_obs, attention_size)}),
            'evt_encoder': ParamGroup('evt_encoder', {
                **LstmParams.initial(rng, dims['evt'], n_evt),
                **AttentionParams.initial(rng, n_evt, t_obs, attention_size)}),
            'state_head': ParamGroup('state_head', LinearParams.initial(rng, n_vis + n_kin + n_evt, n_states)),
        }
        return cls(groups, t_obs)

    @property
    def feature_size(self) -> int:
        return sum(LstmParams.bind(self.groups[f'{s}_encoder']).hidden_size for s in STREAMS)

    def _zero_states(self) -> Dict[str, StreamState]:
        return {s: StreamState.zeros(LstmParams.bind(self.groups[f'{s}_encoder']).hidden_size, s) for s in STREAMS}

    def _encoder(self, stream: str):
        group = self.groups[f'{stream}_encoder']
        attention = AttentionParams.bind(group) if stream != 'vis' else None
        return LstmParams.bind(group), attention

    def _encode(self, trial, start: int, stop: int, states: Dict[str, StreamState]) -> List[Tensor]:
        """Encoded bundle rows for frames [start, stop); attention windows may look back before start"""
        outputs = {}
        for stream in STREAMS:
            params, attention = self._encoder(stream)
            encoded = encode_stream(trial.stream(stream)[:stop], params, attention, stream,
                                    state=states[stream], start=start)
            states[stream] = encoded[-1]
            outputs[stream] = [s.h for s in encoded]
        return [fuse(v, k, e).H for v, k, e in zip(outputs['vis'], outputs['kin'], outputs['evt'])]

    def fit(self, trials: Sequence, epochs: int, bptt: int, hyper: AdamHyper = None,
            rng: np.random.Generator = None, verbose: bool = False) -> List[float]:
        """
        Supervised pretraining with truncated back-propagation through time.
        Returns the mean per-frame loss of every epoch.
        """
        if not trials:
            raise DataError('feature pipeline: no training trials')
        rng = rng or np.random.default_rng(0)
        optimizer = Adam(hyper)
        head = LinearParams.bind(self.groups['state_head'])
        for group in self.groups.values():
            group.unfreeze()

        trace = []
        for epoch in range(epochs):
            order = rng.permutation(len(trials))
            losses, frames_seen = 0.0, 0
            progress = tqdm(order, desc=f'pretrain {epoch + 1}/{epochs}', disable=not verbose, leave=False)
            for i in progress:
                trial = trials[i]
                states = self._zero_states()
                for start in range(0, trial.length, bptt):
                    stop = min(start + bptt, trial.length)
                    rows = self._encode(trial, start, stop, states)
                    H = concat([reshape(r, (1, r.shape[0])) for r in rows], axis=0)
                    loss = cross_entropy(softmax(linear(H, head)), trial.states[start:stop])
                    optimizer.apply(self.groups.values(), backward(loss, self.groups.values()))
                    states = {s: st.detached() for s, st in states.items()}
                    losses += loss.item() * (stop - start)
                    frames_seen += stop - start
            trace.append(losses / frames_seen)
        self.freeze()
        return trace

    def freeze(self):
        for group in self.groups.values():
            group.freeze()

    def transform(self, trial) -> np.ndarray:
        """Per-frame H for one trial, T × |H|"""
        with no_grad():
            states = self._zero_states()
            rows = self._encode(trial, 0, trial.length, states)
        return np.stack([r.data for r in rows])
