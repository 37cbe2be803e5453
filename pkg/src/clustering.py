"""
Technique Clustering

Trials are compared by multivariate dynamic time warping over their
z-normalized kinematics and grouped with k-medoids, whose centres are real
trials. The number of groups is the k with the highest mean silhouette; the
inertia elbow is reported alongside it.
"""

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from sklearn.metrics import adjusted_rand_score, pairwise_distances

from errors import ConfigError, DataError, DimensionError, ParseError, VersionError


LABELS_FORMAT = 'technique-labels'
LABELS_VERSION = 1
MAX_ITERATIONS = 100


@dataclass
class TrialSeries:
    trial_id: str
    frames: np.ndarray  # T × channels

    @property
    def channels(self) -> int:
        return self.frames.shape[1]


@dataclass
class DistanceMatrix:
    values: np.ndarray
    trial_ids: List[str]

    @property
    def n(self) -> int:
        return len(self.trial_ids)

    def validate(self) -> 'DistanceMatrix':
        d = self.values
        if d.shape != (self.n, self.n):
            raise DimensionError(f'distance matrix shape {list(d.shape)} does not match {self.n} ids')
        if np.any(np.diag(d) != 0) or np.any(d < 0) or not np.allclose(d, d.T, atol=1e-9, rtol=0):
            raise DataError('distance matrix must be symmetric, non-negative with zero diagonal')
        return self


@dataclass
class SilhouetteTerms:
    a: np.ndarray
    b: np.ndarray
    d: np.ndarray


@dataclass
class ClusterAssignment:
    k: int
    labels: np.ndarray
    medoids: np.ndarray
    trial_ids: List[str]
    inertia: float
    silhouette: Optional[float] = None

    @property
    def medoid_ids(self) -> List[str]:
        return [self.trial_ids[m] for m in self.medoids]

    def by_trial(self) -> Dict[str, int]:
        return {tid: int(label) for tid, label in zip(self.trial_ids, self.labels)}


@dataclass
class KSelection:
    ks: List[int]
    inertias: List[float]
    silhouettes: List[float]
    chosen_k: int
    elbow_k: int
    assignments: Dict[int, ClusterAssignment] = field(default_factory=dict)

    @property
    def normalized_inertias(self) -> List[float]:
        top = max(self.inertias)
        return [i / top if top > 0 else 0.0 for i in self.inertias]


# ---------------------------------------------------------------------------
# DTW
# ---------------------------------------------------------------------------

def znormalize(frames: np.ndarray) -> np.ndarray:
    """Zero mean, unit variance per channel; constant channels become zeros"""
    frames = np.asarray(frames, dtype=np.float64)
    std = frames.std(axis=0)
    centred = frames - frames.mean(axis=0)
    return np.divide(centred, std, out=np.zeros_like(centred), where=std > 0)


def dtw_distance(a, b, band: int = None) -> float:
    """
    Minimal cumulative Euclidean frame cost over monotone alignments with
    steps (1,0), (0,1), (1,1), not normalized by path length. `band`
    restricts |i - j| (widened to the length difference when narrower).
    """
    a = a.frames if isinstance(a, TrialSeries) else np.asarray(a, dtype=np.float64)
    b = b.frames if isinstance(b, TrialSeries) else np.asarray(b, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if b.ndim == 1:
        b = b[:, None]
    if a.shape[1] != b.shape[1]:
        raise DimensionError(f'dtw_distance: channel mismatch {list(a.shape)} vs {list(b.shape)}')
    n, m = len(a), len(b)
    if n == 0 or m == 0:
        raise DataError('dtw_distance: empty series')

    cost = np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=2))
    if band is not None:
        width = max(band, abs(n - m))
        rows, cols = np.indices((n, m))
        cost = np.where(np.abs(rows - cols) > width, np.inf, cost)

    acc = np.full((n + 1, m + 1), np.inf)
    acc[0, 0] = 0.0
    # cells on one anti-diagonal i + j = s depend only on earlier diagonals
    for s in range(2, n + m + 1):
        i = np.arange(max(1, s - m), min(n, s - 1) + 1)
        j = s - i
        best = np.minimum(np.minimum(acc[i - 1, j], acc[i, j - 1]), acc[i - 1, j - 1])
        acc[i, j] = cost[i - 1, j - 1] + best
    return float(acc[n, m])


def pairwise_dtw(trials: Sequence[TrialSeries], band: int = None, workers: int = 1,
                 normalize: bool = True) -> DistanceMatrix:
    if len(trials) < 2:
        raise ConfigError(f'pairwise_dtw needs at least 2 trials, got {len(trials)}')
    channels = {t.channels for t in trials}
    if len(channels) != 1:
        raise DimensionError(f'pairwise_dtw: trials disagree on channel count {sorted(channels)}')
    for t in trials:
        if len(t.frames) < 2:
            raise DataError(f'trial {t.trial_id}: need at least 2 frames for DTW')

    frames = [znormalize(t.frames) if normalize else t.frames for t in trials]
    n = len(trials)
    pairs = [(i, j) for i in range(n) for j in range(i + 1, n)]

    def entry(pair):
        i, j = pair
        return dtw_distance(frames[i], frames[j], band)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            values = list(executor.map(entry, pairs))
    else:
        values = [entry(p) for p in pairs]

    matrix = np.zeros((n, n))
    for (i, j), value in zip(pairs, values):
        matrix[i, j] = matrix[j, i] = value
    return DistanceMatrix(matrix, [t.trial_id for t in trials])


def euclidean_matrix(vectors: np.ndarray, ids: Sequence[str]) -> DistanceMatrix:
    """Euclidean distances between row vectors (embedding silhouettes)"""
    values = pairwise_distances(np.asarray(vectors, dtype=np.float64), metric='euclidean')
    values = 0.5 * (values + values.T)
    np.fill_diagonal(values, 0.0)
    return DistanceMatrix(values, list(ids))


# ---------------------------------------------------------------------------
# k-medoids
# ---------------------------------------------------------------------------

def _assign(d: np.ndarray, medoids: np.ndarray) -> np.ndarray:
    labels = np.argmin(d[:, medoids], axis=1)
    labels[medoids] = np.arange(len(medoids))
    return labels


def _inertia(d: np.ndarray, labels: np.ndarray, medoids: np.ndarray) -> float:
    return float(np.sum(d[np.arange(len(labels)), medoids[labels]] ** 2))


def _farthest(d: np.ndarray, medoids: Sequence[int]) -> int:
    """The point farthest from its nearest medoid (lowest index on ties)"""
    nearest = d[:, list(medoids)].min(axis=1)
    nearest[list(medoids)] = -1.0
    return int(np.argmax(nearest))


def _repair(d: np.ndarray, medoids: Sequence[int]) -> np.ndarray:
    """Replace duplicate medoids by farthest points"""
    kept: List[int] = []
    for m in medoids:
        kept.append(int(m) if int(m) not in kept else _farthest(d, kept))
    return np.asarray(kept, dtype=np.int64)


def _score(d: np.ndarray, medoids: np.ndarray) -> Tuple[float, np.ndarray, np.ndarray]:
    labels = _assign(d, medoids)
    return _inertia(d, labels, medoids), labels, medoids


def _run(d: np.ndarray, medoids: np.ndarray) -> Tuple[float, np.ndarray, np.ndarray]:
    """Alternate assignment and medoid update until the medoids stop changing"""
    for _ in range(MAX_ITERATIONS):
        labels = _assign(d, medoids)
        updated = medoids.copy()
        for c in range(len(medoids)):
            members = np.flatnonzero(labels == c)
            if members.size == 0:
                updated[c] = _farthest(d, np.delete(updated, c))
                continue
            updated[c] = members[np.argmin(d[np.ix_(members, members)].sum(axis=1))]
        updated = _repair(d, updated)
        if np.array_equal(updated, medoids):
            break
        medoids = updated
    return _score(d, medoids)


def cluster(dm: DistanceMatrix, k: int, restarts: int = 10, seed: int = 0,
            candidates: Sequence[Sequence[int]] = ()) -> ClusterAssignment:
    """
    Best of `restarts` seeded k-medoids runs by inertia (first run wins ties).
    `candidates` are extra medoid sets that compete as given, without
    iterating.
    """
    n = dm.n
    if k < 1 or k > n:
        raise ConfigError(f'cluster: need 1 <= k <= {n} trials, got k={k}')
    if restarts < 1:
        raise ConfigError('cluster: restarts must be at least 1')
    d = dm.values
    rng = np.random.default_rng(seed)
    results = [_run(d, rng.choice(n, size=k, replace=False)) for _ in range(restarts)]
    for medoids in candidates:
        if len(medoids) != k:
            raise ConfigError(f'cluster: candidate medoid set has {len(medoids)} entries, expected {k}')
        results.append(_score(d, _repair(d, np.asarray(medoids, dtype=np.int64))))

    best = results[0]
    for result in results[1:]:
        if result[0] < best[0]:
            best = result
    score, labels, medoids = best
    assignment = ClusterAssignment(k, labels, medoids, list(dm.trial_ids), score)
    if k >= 2:
        assignment.silhouette = silhouette_mean(dm, assignment)[0]
    return assignment


def inertia(dm: DistanceMatrix, assignment: ClusterAssignment) -> float:
    """Sum of squared member-to-medoid distances"""
    return _inertia(dm.values, np.asarray(assignment.labels), np.asarray(assignment.medoids))


def silhouette_terms(dm: DistanceMatrix, labels: Sequence[int]) -> SilhouetteTerms:
    d = dm.values
    labels = np.asarray(labels)
    groups = np.unique(labels)
    if len(groups) < 2:
        raise ConfigError(f'silhouette needs at least 2 clusters, got {len(groups)}')
    n = len(labels)
    a = np.zeros(n)
    b = np.full(n, np.inf)
    singleton = np.zeros(n, dtype=bool)
    for g in groups:
        members = labels == g
        count = members.sum()
        sums = d[:, members].sum(axis=1)
        inside = members
        if count > 1:
            a[inside] = sums[inside] / (count - 1)
        else:
            singleton[inside] = True
        outside = ~members
        b[outside] = np.minimum(b[outside], sums[outside] / count)
    top = np.maximum(a, b)
    s = np.divide(b - a, top, out=np.zeros(n), where=top > 0)
    s[singleton] = 0.0
    return SilhouetteTerms(a, b, s)


def silhouette_mean(dm: DistanceMatrix, assignment) -> Tuple[float, SilhouetteTerms]:
    labels = assignment.labels if isinstance(assignment, ClusterAssignment) else assignment
    terms = silhouette_terms(dm, labels)
    return float(terms.d.mean()), terms


def elbow_k(ks: Sequence[int], inertias: Sequence[float]) -> int:
    """Knee of the normalized inertia curve: farthest point from the end-to-end chord"""
    ks = np.asarray(ks, dtype=np.float64)
    y = np.asarray(inertias, dtype=np.float64)
    if len(ks) < 3 or y.max() <= 0:
        return int(ks[0])
    x = (ks - ks[0]) / (ks[-1] - ks[0])
    y = y / y.max()
    dx, dy = x[-1] - x[0], y[-1] - y[0]
    distance = np.abs(dy * (x - x[0]) - dx * (y - y[0])) / np.hypot(dx, dy)
    return int(ks[int(np.argmax(distance))])


def select_k(dm: DistanceMatrix, k_min: int = 2, k_max: int = 8, restarts: int = 10,
             seed: int = 0) -> KSelection:
    """
    Cluster for every k in [k_min, k_max]; the chosen k has the highest mean
    silhouette (smallest k on ties). Each k also starts from the previous
    medoids plus the farthest point, so inertia never rises with k.
    """
    if k_min < 2 or k_max < k_min:
        raise ConfigError(f'select_k: degenerate range [{k_min}, {k_max}]')
    if k_max > dm.n:
        raise ConfigError(f'select_k: k_max {k_max} exceeds {dm.n} trials')

    ks, inertias, silhouettes, assignments = [], [], [], {}
    previous = None
    for k in range(k_min, k_max + 1):
        grown = []
        if previous is not None:
            grown.append(list(previous.medoids) + [_farthest(dm.values, previous.medoids)])
        assignment = cluster(dm, k, restarts, seed + k, candidates=grown)
        ks.append(k)
        inertias.append(assignment.inertia)
        silhouettes.append(assignment.silhouette)
        assignments[k] = assignment
        previous = assignment

    chosen = ks[int(np.argmax(silhouettes))]
    return KSelection(ks, inertias, silhouettes, chosen, elbow_k(ks, inertias), assignments)


def adjusted_rand_index(truth: Sequence[int], labels: Sequence[int]) -> float:
    return float(adjusted_rand_score(truth, labels))


# ---------------------------------------------------------------------------
# Technique labels
# ---------------------------------------------------------------------------

@dataclass
class TechniqueLabels:
    k: int
    labels: Dict[str, int]
    silhouette: Optional[float]
    inertia: float
    medoid_ids: List[str] = field(default_factory=list)

    @classmethod
    def from_assignment(cls, assignment: ClusterAssignment) -> 'TechniqueLabels':
        return cls(assignment.k, assignment.by_trial(), assignment.silhouette, assignment.inertia,
                   assignment.medoid_ids)

    def to_dict(self) -> Dict:
        return {
            'format': LABELS_FORMAT,
            'version': LABELS_VERSION,
            'k': self.k,
            'silhouette': self.silhouette,
            'inertia': self.inertia,
            'medoids': list(self.medoid_ids),
            'records': [{'trial_id': tid, 'l': label, 'k': self.k, 'silhouette': self.silhouette,
                         'inertia': self.inertia} for tid, label in self.labels.items()],
        }

    def save(self, path: str):
        directory = os.path.dirname(path)
        if directory:
            os.makedirs(directory, exist_ok=True)
        with open(path, 'w', encoding='utf-8') as f:
            json.dump(self.to_dict(), f, indent=2)

    @classmethod
    def load(cls, path: str) -> 'TechniqueLabels':
        if not os.path.exists(path):
            raise DataError(f'technique label file not found: {path}')
        with open(path, 'r', encoding='utf-8') as f:
            try:
                data = json.load(f)
            except json.JSONDecodeError as e:
                raise ParseError(f'malformed technique label file: {e.msg}', path=path, line=e.lineno, offset=e.pos)
        if data.get('format') != LABELS_FORMAT:
            raise DataError(f'{path}: not a technique label file')
        if data.get('version') != LABELS_VERSION:
            raise VersionError(f'{path}: technique label version {data.get("version")} is not supported')
        labels = {r['trial_id']: int(r['l']) for r in data['records']}
        if any(not 0 <= label < data['k'] for label in labels.values()):
            raise DataError(f'{path}: technique label outside [0, {data["k"]})')
        return cls(data['k'], labels, data['silhouette'], data['inertia'], data.get('medoids', []))


def label_techniques(series: Sequence[TrialSeries], k_min: int = 2, k_max: int = 8, restarts: int = 10,
                     seed: int = 0, band: int = None, workers: int = 1, fixed_k: int = None
                     ) -> Tuple[TechniqueLabels, DistanceMatrix, Optional[KSelection]]:
    """DTW matrix, k selection (unless `fixed_k`) and the resulting trial labels"""
    dm = pairwise_dtw(series, band=band, workers=workers)
    if fixed_k is not None:
        return TechniqueLabels.from_assignment(cluster(dm, fixed_k, restarts, seed)), dm, None
    selection = select_k(dm, k_min, min(k_max, dm.n), restarts, seed)
    return TechniqueLabels.from_assignment(selection.assignments[selection.chosen_k]), dm, selection
