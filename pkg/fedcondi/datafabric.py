#!/usr/bin/env python
# -*- coding: utf-8 -*-
# @Filename:    datafabric.py

"""Multimodal samples and everything that happens to them before training:
synthetic generation with coupled modalities, CSV ingestion and export,
resampling, missingness simulation under the (p_s, p_w) protocol, the global
train/test split and the non-IID split across clients.

Attributes:
    LOGGER (logging): The logger (from logging) to handle debugging
    MASK_MODES (tuple): ('cell', 'timestep') within-modality masking modes
    MAX_PARTITION_DRAWS (int): Dirichlet re-draws before giving up on a
        partition with an empty client
    SIGMA_FLOOR (float): lower bound on feature standard deviations when
        normalizing
"""

from dataclasses import dataclass, field
from logging import getLogger
from pathlib import Path
from re import search
from typing import Dict, List, Optional, Sequence, Tuple, Union
# non-system, pip installs
import numpy as np
import pandas as pd
from .errors import ConfigError, ParseError, PartitionError, ShapeError, \
     UnsatisfiableMaskError

MASK_MODES = ('cell', 'timestep')
MAX_PARTITION_DRAWS = 100
SIGMA_FLOOR = 1e-8

LOGGER = getLogger(__name__)

Schema = Sequence[Sequence[str]]


###############################################################################
#                                Sample types                                 #
###############################################################################

@dataclass
class MultimodalSample:
    """One sample: M time-aligned modality matrices (L_ts x L_f each).

    Missing cells are stored as 0 in modalities with R = 0 flagging them.

    Attributes:
        id (int): sample id, unique in a dataset
        modalities (list): M arrays, L_ts x L_f^(m)
        label (int): class index
        r (ndarray): modality indicator, r[m] = 0 iff modality m is fully
            missing
        R (list): M binary observation masks shaped like modalities
        truth (list): unmasked values, set by apply_missingness and only read
            by evaluation; None while nothing has been masked
    """
    id: int
    modalities: List[np.ndarray]
    label: int
    r: np.ndarray = None
    R: List[np.ndarray] = None
    truth: Optional[List[np.ndarray]] = None

    def __post_init__(self):
        self.modalities = [np.array(x, dtype=np.float64)
                           for x in self.modalities]
        lengths = {x.shape[0] for x in self.modalities}
        if any(x.ndim != 2 for x in self.modalities) or len(lengths) != 1:
            raise ShapeError(f'sample {self.id}: modalities must be 2-D with '
                             f'a common length, got '
                             f'{[x.shape for x in self.modalities]}')
        if self.R is None:
            self.R = [np.ones_like(x) for x in self.modalities]
        else:
            self.R = [np.array(mask, dtype=np.float64) for mask in self.R]
        if [mask.shape for mask in self.R] != self.shapes():
            raise ShapeError(f'sample {self.id}: masks do not match '
                             f'modality shapes')
        if self.r is None:
            self.r = np.array([1.0 if mask.any() else 0.0 for mask in self.R])
        self.r = np.asarray(self.r, dtype=np.float64)

    def shapes(self) -> List[Tuple[int, int]]:
        return [x.shape for x in self.modalities]

    @property
    def num_modalities(self) -> int:
        return len(self.modalities)

    @property
    def length(self) -> int:
        return self.modalities[0].shape[0]

    @property
    def widths(self) -> List[int]:
        """Feature count L_f of each modality"""
        return [x.shape[1] for x in self.modalities]

    def observed(self) -> List[np.ndarray]:
        """x^(m,O) = R ⊙ x for each modality"""
        return [mask * x for mask, x in zip(self.R, self.modalities)]

    def unobserved(self) -> List[np.ndarray]:
        """x^(m,U) = (1 - R) ⊙ x for each modality"""
        return [(1.0 - mask) * x for mask, x in zip(self.R, self.modalities)]

    def stacked(self) -> np.ndarray:
        """Modalities concatenated along the feature axis, L_ts x ΣL_f"""
        return np.concatenate(self.modalities, axis=1)

    def stacked_mask(self) -> np.ndarray:
        return np.concatenate(self.R, axis=1)

    def stacked_truth(self) -> np.ndarray:
        if self.truth is None:
            return self.stacked()
        return np.concatenate(self.truth, axis=1)

    def with_values(self, stacked: np.ndarray) -> 'MultimodalSample':
        """Copy of this sample whose modalities are taken from a stacked
        L_ts x ΣL_f array; masks and truth are kept."""
        bounds = np.cumsum(self.widths)[:-1]
        new = self.copy()
        new.modalities = [np.array(part) for part in
                          np.split(np.asarray(stacked, dtype=np.float64),
                                   bounds, axis=1)]
        return new

    def clean(self) -> 'MultimodalSample':
        """Fully observed copy built from the ground truth"""
        values = self.truth if self.truth is not None else self.modalities
        return MultimodalSample(self.id, [x.copy() for x in values],
                                self.label)

    def copy(self) -> 'MultimodalSample':
        return MultimodalSample(
            self.id, [x.copy() for x in self.modalities], self.label,
            self.r.copy(), [mask.copy() for mask in self.R],
            None if self.truth is None else [x.copy() for x in self.truth])


@dataclass(frozen=True)
class MissingnessConfig:
    """(p_s, p_w) missingness protocol.

    Attributes:
        p_s (float): fraction of samples with one affected modality
        p_w (float): within-modality drop probability (cell mode) or drop
            fraction of time steps (timestep mode)
        seed (int): seed of the masking stream
        mode (str): 'cell' or 'timestep'
    """
    p_s: float
    p_w: float
    seed: int = 0
    mode: str = 'cell'

    def __post_init__(self):
        for name in ('p_s', 'p_w'):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ConfigError(f'{name} must lie in [0, 1], got {value}')
        if self.mode not in MASK_MODES:
            raise ConfigError(f'unknown masking mode {self.mode!r}, expected '
                              f'one of {MASK_MODES}')


@dataclass
class FederatedPartition:
    """Client id -> sample ids. A sample may sit on two clients.

    Attributes:
        assignments (dict): client id k -> sorted list of sample ids
    """
    assignments: Dict[int, List[int]] = field(default_factory=dict)

    @property
    def sizes(self) -> Dict[int, int]:
        """n_k per client"""
        return {k: len(ids) for k, ids in sorted(self.assignments.items())}

    @property
    def num_clients(self) -> int:
        return len(self.assignments)

    def total(self) -> int:
        return sum(self.sizes.values())

    def select(self, k: int, dataset: Sequence[MultimodalSample]
               ) -> List[MultimodalSample]:
        """Samples of client k, in assignment order"""
        by_id = {sample.id: sample for sample in dataset}
        return [by_id[i] for i in self.assignments[k]]


###############################################################################
#                              Synthetic data                                 #
###############################################################################

def _squash(values: np.ndarray) -> np.ndarray:
    return values / (1.0 + np.abs(values))


# Per-modality pointwise nonlinearities, cycled for m = 1, 2, ...
COUPLINGS = (np.tanh, np.sin, _squash)


def coupling_transform(x0: np.ndarray, m: int) -> np.ndarray:
    """Deterministic map from modality 0 to modality m > 0: a lag of m steps
    (first value held at the left edge), a fixed scale of alternating sign and
    a pointwise nonlinearity."""
    if m < 1:
        raise ValueError('coupling_transform is defined for m >= 1')
    lag = min(m, x0.shape[0] - 1)
    shifted = np.concatenate([np.repeat(x0[:1], lag, axis=0),
                              x0[:x0.shape[0] - lag]], axis=0)
    scale = (-1.0) ** m * (1.0 + 0.5 * (m - 1))
    return scale * COUPLINGS[(m - 1) % len(COUPLINGS)](shifted)


def generate_synthetic(n: int, M: int, L_ts: int, L_f: int, classes: int,
                       seed: int, noise: float = 0.1,
                       class_offset: float = 1.0) -> List[MultimodalSample]:
    """Coupled multimodal time series with a known cross-modal structure.

    Modality 0 of a class-c sample is c * class_offset plus two sinusoids per
    feature whose integer frequencies depend on c and the feature index, with
    random phases, plus N(0, noise^2). Frequencies are whole periods over the
    window, so the time-average of the sinusoids is zero. Modality m > 0 is
    coupling_transform(modality 0, m) plus fresh N(0, noise^2).

    Args:
        n (int): number of samples
        M (int): modalities, at least 2
        L_ts (int): time steps, at least 2
        L_f (int): features per modality
        classes (int): number of classes, at least 2
        seed (int): generator seed
        noise (float, optional): Gaussian noise standard deviation
        class_offset (float, optional): mean shift between adjacent classes

    Returns:
        list: n MultimodalSamples with ids 0..n-1, fully observed
    """
    if M < 2 or classes < 2:
        raise ConfigError(f'need M >= 2 and classes >= 2, got M={M}, '
                          f'classes={classes}')
    if n < 1 or L_ts < 2 or L_f < 1 or noise < 0:
        raise ConfigError(f'invalid synthetic shape n={n}, L_ts={L_ts}, '
                          f'L_f={L_f}, noise={noise}')
    rng = np.random.default_rng(seed)
    time = np.arange(L_ts)[:, None] / L_ts
    features = np.arange(L_f)[None, :]
    samples = []
    for i in range(n):
        label = int(rng.integers(classes))
        x0 = np.full((L_ts, L_f), label * class_offset)
        for k in (1, 2):
            freq = 1 + (label + k + features) % (L_ts - 1)
            phase = rng.uniform(0.0, 2.0 * np.pi, size=(1, L_f))
            x0 = x0 + np.sin(2.0 * np.pi * freq * time + phase) / k
        x0 = x0 + noise * rng.standard_normal((L_ts, L_f))
        modalities = [x0]
        for m in range(1, M):
            modalities.append(coupling_transform(x0, m)
                              + noise * rng.standard_normal((L_ts, L_f)))
        samples.append(MultimodalSample(i, modalities, label))
    LOGGER.debug('Generated %d synthetic samples (M=%d, L_ts=%d, L_f=%d)',
                 n, M, L_ts, L_f)
    return samples


###############################################################################
#                              Missingness                                    #
###############################################################################

def apply_missingness(dataset: Sequence[MultimodalSample],
                      cfg: MissingnessConfig) -> List[MultimodalSample]:
    """Simulates the (p_s, p_w) protocol on copies of the samples.

    floor(p_s * n + 0.5) samples, chosen uniformly, get exactly one affected
    modality (uniform over M). Inside it, 'cell' mode zeroes each cell of R
    with probability p_w; 'timestep' mode zeroes round(p_w * L_ts) whole rows.
    Existing masks (e.g. empty CSV fields) are kept and combined with the new
    ones. Masked values are zeroed in modalities and kept in truth.

    Raises:
        UnsatisfiableMaskError: M == 1 with affected samples, or a sample left
            without any observed modality
    """
    rng = np.random.default_rng(cfg.seed)
    samples = [sample.copy() for sample in dataset]
    count = int(np.floor(cfg.p_s * len(samples) + 0.5))
    if count and any(sample.num_modalities < 2 for sample in samples):
        raise UnsatisfiableMaskError(
            'p_s > 0 needs at least two modalities per sample so one stays '
            'observed')
    affected = np.sort(rng.choice(len(samples), size=count, replace=False))
    for index in affected:
        sample = samples[index]
        m = int(rng.integers(sample.num_modalities))
        if cfg.mode == 'cell':
            dropped = rng.random(sample.R[m].shape) < cfg.p_w
        else:
            rows = rng.choice(sample.length,
                              size=int(np.floor(cfg.p_w * sample.length + 0.5)),
                              replace=False)
            dropped = np.zeros(sample.R[m].shape, dtype=bool)
            dropped[rows, :] = True
        sample.R[m] = np.where(dropped, 0.0, sample.R[m])
    for sample in samples:
        _settle_masks(sample)
    LOGGER.info('Applied missingness p_s=%s p_w=%s (%s mode): %d of %d '
                'samples affected', cfg.p_s, cfg.p_w, cfg.mode, count,
                len(samples))
    return samples


def _settle_masks(sample: MultimodalSample):
    """Zero-fills masked cells, keeps ground truth and recomputes r"""
    if sample.truth is None:
        sample.truth = [x.copy() for x in sample.modalities]
    sample.modalities = [mask * x for mask, x in zip(sample.R,
                                                     sample.modalities)]
    sample.r = np.array([1.0 if mask.any() else 0.0 for mask in sample.R])
    if not sample.r.any():
        raise UnsatisfiableMaskError(f'sample {sample.id} has no observed '
                                     f'modality left')


###############################################################################
#                           Splits and partitions                             #
###############################################################################

def train_test_split(dataset: Sequence[MultimodalSample],
                     test_fraction: float = 0.2, seed: int = 0
                     ) -> Tuple[List[MultimodalSample], List[MultimodalSample]]:
    """Stratified hold-out split. Each class contributes
    floor(test_fraction * n_c + 0.5) samples to the test side; both sides keep
    the input order."""
    if not 0.0 < test_fraction < 1.0:
        raise ConfigError(f'test_fraction must lie in (0, 1), got '
                          f'{test_fraction}')
    rng = np.random.default_rng(seed)
    labels = np.array([sample.label for sample in dataset])
    test_index = set()
    for label in np.unique(labels):
        members = np.flatnonzero(labels == label)
        take = int(np.floor(test_fraction * members.size + 0.5))
        test_index.update(rng.permutation(members)[:take].tolist())
    train = [s for i, s in enumerate(dataset) if i not in test_index]
    test = [s for i, s in enumerate(dataset) if i in test_index]
    return train, test


def _dirichlet_split(labels: np.ndarray, clients: int, alpha: float,
                     rng: np.random.Generator) -> List[List[int]]:
    """Per class, split the shuffled positions by Dirichlet(alpha)
    proportions, rounding remainders to the largest fractional parts."""
    split = [[] for _ in range(clients)]
    for label in np.unique(labels):
        members = rng.permutation(np.flatnonzero(labels == label))
        proportions = rng.dirichlet([alpha] * clients)
        counts = np.floor(proportions * members.size).astype(int)
        remainder = members.size - counts.sum()
        if remainder > 0:
            order = np.argsort(-(proportions * members.size - counts),
                               kind='stable')
            counts[order[:remainder]] += 1
        start = 0
        for k in range(clients):
            split[k].extend(members[start:start + counts[k]].tolist())
            start += counts[k]
    return split


def partition(dataset: Sequence[MultimodalSample], K: int,
              non_iid_alpha: float = 0.5, overlap_ratio: float = 0.0,
              seed: int = 0) -> FederatedPartition:
    """Non-IID split of a dataset across K clients by Dirichlet label skew.

    A floor(overlap_ratio * N + 0.5) subset of samples is additionally placed
    on one other, uniformly chosen, client.

    Args:
        dataset (Sequence[MultimodalSample]): samples to distribute
        K (int): number of clients
        non_iid_alpha (float, optional): Dirichlet concentration, small means
            skewed
        overlap_ratio (float, optional): fraction of samples held twice
        seed (int, optional): partition seed

    Returns:
        FederatedPartition: client id -> sorted sample ids

    Raises:
        ConfigError: K < 1, alpha <= 0 or overlap outside [0, 1]
        PartitionError: an empty client after MAX_PARTITION_DRAWS draws
    """
    if K < 1:
        raise ConfigError(f'need at least one client, got K={K}')
    if non_iid_alpha <= 0:
        raise ConfigError(f'Dirichlet alpha must be positive, got '
                          f'{non_iid_alpha}')
    if not 0.0 <= overlap_ratio <= 1.0:
        raise ConfigError(f'overlap_ratio must lie in [0, 1], got '
                          f'{overlap_ratio}')
    rng = np.random.default_rng(seed)
    labels = np.array([sample.label for sample in dataset])
    for attempt in range(MAX_PARTITION_DRAWS):
        split = _dirichlet_split(labels, K, non_iid_alpha, rng)
        if all(split):
            break
        LOGGER.debug('Partition draw %d left a client empty, redrawing',
                     attempt)
    else:
        raise PartitionError(f'no partition of {len(labels)} samples over {K} '
                             f'clients without an empty client after '
                             f'{MAX_PARTITION_DRAWS} draws')
    extra = int(np.floor(overlap_ratio * len(labels) + 0.5))
    if extra and K == 1:
        LOGGER.warning('overlap_ratio ignored with a single client')
    elif extra:
        owner = {position: k for k, members in enumerate(split)
                 for position in members}
        for position in np.sort(rng.choice(len(labels), size=extra,
                                           replace=False)):
            others = [k for k in range(K) if k != owner[position]]
            split[others[int(rng.integers(len(others)))]].append(int(position))
    ids = [sample.id for sample in dataset]
    result = FederatedPartition({k: sorted(ids[p] for p in members)
                                 for k, members in enumerate(split)})
    LOGGER.info('Partitioned %d samples over %d clients: %s', len(ids), K,
                result.sizes)
    return result


###############################################################################
#                           Resampling and CSV                                #
###############################################################################

def resample_to_length(x: np.ndarray, L_ts: int) -> np.ndarray:
    """Linear interpolation of every feature column onto L_ts uniformly
    spaced points; both endpoints are preserved.

    Raises:
        ShapeError: fewer than 2 input steps or L_ts < 2
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[0] < 2 or L_ts < 2:
        raise ShapeError(f'resampling needs at least 2 steps on both sides, '
                         f'got {x.shape[0]} -> {L_ts}')
    if x.shape[0] == L_ts:
        return x.copy()
    source = np.linspace(0.0, 1.0, x.shape[0])
    target = np.linspace(0.0, 1.0, L_ts)
    return np.column_stack([np.interp(target, source, column)
                            for column in x.T])


def _columns(schema: Schema) -> List[str]:
    return ['sample_id', 'time'] + [name for group in schema
                                    for name in group] + ['label']


def _parse_int(frame: pd.DataFrame, column: str) -> np.ndarray:
    parsed = pd.to_numeric(frame[column].str.strip(), errors='coerce')
    bad = parsed.isna() | (parsed != parsed.round()) | (parsed < 0)
    if bad.any():
        row = int(np.flatnonzero(bad.to_numpy())[0])
        raise ParseError(f'{column} must be a non-negative integer, got '
                         f'{frame[column].iloc[row]!r}', line=row + 2)
    return parsed.astype(np.int64).to_numpy()


def load_csv(path: Union[str, Path], schema: Schema,
             train_ids: Sequence[int] = None, normalize: bool = True,
             L_ts: int = None) -> List[MultimodalSample]:
    """Reads `sample_id,time,<modality columns...>,label` rows, one per
    (sample, time step). Empty fields are missing cells (R = 0).

    Args:
        path (Union[str, Path]): CSV file
        schema (Schema): one list of column names per modality
        train_ids (Sequence[int], optional): ids whose observed cells give
            the z-score statistics, all samples when None
        normalize (bool, optional): z-score every feature column (sigma
            guarded at SIGMA_FLOOR)
        L_ts (int, optional): resample every fully observed sample to this
            length; without it all samples must share one length

    Returns:
        list: MultimodalSamples in order of first appearance

    Raises:
        ParseError: header mismatch, ragged rows, non-numeric cells,
            inconsistent labels or time steps, unknown train ids
    """
    path = Path(path)
    expected = _columns(schema)
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False,
                            na_filter=False, skipinitialspace=True)
    except pd.errors.ParserError as error:
        found = search(r'line (\d+)', str(error))
        raise ParseError(f'{path}: ragged row ({error})',
                         line=int(found.group(1)) if found else None)
    except pd.errors.EmptyDataError:
        raise ParseError(f'{path}: empty file', line=1)
    if list(frame.columns) != expected:
        raise ParseError(f'{path}: header {list(frame.columns)} does not '
                         f'match schema {expected}', line=1)
    short = frame.isna().any(axis=1).to_numpy()
    if short.any():
        raise ParseError(f'{path}: ragged row (too few fields)',
                         line=int(np.flatnonzero(short)[0]) + 2)
    ids = _parse_int(frame, 'sample_id')
    times = _parse_int(frame, 'time')
    labels = _parse_int(frame, 'label')
    features = expected[2:-1]
    raw = frame[features].apply(lambda column: column.str.strip())
    empty = raw.eq('').to_numpy()
    values = raw.apply(pd.to_numeric, errors='coerce').to_numpy(dtype=float)
    bad = ~empty & ~np.isfinite(values)
    if bad.any():
        row, col = np.argwhere(bad)[0]
        raise ParseError(f'non-numeric value {raw.iat[row, col]!r} in column '
                         f'{features[col]}', line=int(row) + 2)
    values = np.where(empty, 0.0, values)
    observed = (~empty).astype(np.float64)
    rows_of: Dict[int, List[int]] = {}
    for row, sample_id in enumerate(ids):
        rows_of.setdefault(int(sample_id), []).append(row)
    if train_ids is not None:
        unknown = sorted(set(train_ids) - set(rows_of))
        if unknown:
            raise ParseError(f'{path}: unknown sample ids {unknown}')
    bounds = np.cumsum([len(group) for group in schema])[:-1]
    samples = []
    for sample_id, rows in rows_of.items():
        rows = np.array(rows)
        if np.unique(labels[rows]).size != 1:
            raise ParseError(f'sample {sample_id} has conflicting labels',
                             line=int(rows[0]) + 2)
        order = np.argsort(times[rows], kind='stable')
        if not np.array_equal(times[rows][order], np.arange(rows.size)):
            raise ParseError(f'sample {sample_id} time steps are not '
                             f'0..{rows.size - 1}', line=int(rows[0]) + 2)
        rows = rows[order]
        modalities = np.split(values[rows], bounds, axis=1)
        masks = np.split(observed[rows], bounds, axis=1)
        if L_ts is not None and rows.size != L_ts:
            if not all(mask.all() for mask in masks):
                raise ParseError(f'sample {sample_id} needs resampling but has '
                                 f'missing cells', line=int(rows[0]) + 2)
            modalities = [resample_to_length(x, L_ts) for x in modalities]
            masks = [np.ones_like(x) for x in modalities]
        samples.append(MultimodalSample(sample_id, modalities,
                                        int(labels[rows[0]]), R=masks))
    if len({sample.length for sample in samples}) > 1:
        raise ParseError(f'{path}: samples have different lengths, pass L_ts '
                         f'to resample')
    if normalize and samples:
        normalize_features(samples, set(rows_of) if train_ids is None
                           else set(train_ids))
    LOGGER.info('Loaded %d samples from %s', len(samples), path)
    return samples


def normalize_features(samples: List[MultimodalSample], train_ids: set):
    """Per-feature z-scores from the observed cells of train samples"""
    train = [s for s in samples if s.id in train_ids]
    values = np.concatenate([s.stacked() for s in train], axis=0)
    masks = np.concatenate([s.stacked_mask() for s in train], axis=0)
    counts = np.maximum(masks.sum(axis=0), 1.0)
    mean = (values * masks).sum(axis=0) / counts
    std = np.sqrt((((values - mean) * masks) ** 2).sum(axis=0) / counts)
    std = np.maximum(std, SIGMA_FLOOR)
    for sample in samples:
        scaled = (sample.stacked() - mean) / std * sample.stacked_mask()
        sample.modalities = sample.with_values(scaled).modalities


def write_csv(samples: Sequence[MultimodalSample], path: Union[str, Path],
              schema: Schema):
    """Inverse of load_csv (with normalize=False): unobserved cells are
    written as empty fields."""
    path = Path(path)
    features = _columns(schema)[2:-1]
    records = []
    for sample in samples:
        if sum(sample.widths) != len(features):
            raise ShapeError(f'sample {sample.id} has {sum(sample.widths)} '
                             f'features, schema names {len(features)}')
        values = np.where(sample.stacked_mask() > 0, sample.stacked(), np.nan)
        block = pd.DataFrame(values, columns=features)
        block.insert(0, 'time', np.arange(sample.length))
        block.insert(0, 'sample_id', sample.id)
        block['label'] = sample.label
        records.append(block)
    frame = pd.concat(records, ignore_index=True) if records else \
        pd.DataFrame(columns=_columns(schema))
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, na_rep='', float_format='%.17g')
    LOGGER.debug('Wrote %d samples to %s', len(samples), path)
