#!/usr/bin/env python
# -*- coding: utf-8 -*-
# @Filename:    evaluation.py

"""Classification metrics, the feature-reconstruction analysis (how close the
classifier input gets to its clean-data value with and without imputation)
and the report files.

Attributes:
    DISTANCE_COLUMNS (list): header of feature_distances.csv
    LOGGER (logging): The logger (from logging) to handle debugging
    METRICS_FILE (str): 'metrics.json'
    DISTANCES_FILE (str): 'feature_distances.csv'
"""

from dataclasses import asdict, dataclass
from json import dumps
from logging import getLogger
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union
# non-system, pip installs
import numpy as np
import pandas as pd
from scipy.stats import rankdata
from .autodiff import Graph
from .datafabric import MissingnessConfig, MultimodalSample, \
     apply_missingness
from .diffusion import DiffusionSchedule, impute_all
from .errors import ShapeError, UntrainedModelError
from .model import ModelBundle
from .taskhead import fused_features, predict

DISTANCE_COLUMNS = ['sample_id', 'd_zero_l2', 'd_imp_l2', 'd_zero_cos',
                    'd_imp_cos']
METRICS_FILE = 'metrics.json'
DISTANCES_FILE = 'feature_distances.csv'

LOGGER = getLogger(__name__)


###############################################################################
#                                  Metrics                                    #
###############################################################################

@dataclass
class MetricsSummary:
    """Scores of one configuration.

    Attributes:
        accuracy (float): fraction of correct predictions
        macro_f1 (float): unweighted mean of per-class F1
        f1 (float): positive-class F1, binary tasks only
        auroc (float): rank-statistic AUROC, None for single-class labels
        frac_l2 (float): P(d_imp_l2 < d_zero_l2) over analysed samples
        frac_cos (float): P(d_imp_cos < d_zero_cos)
        round_losses (list): per-round (Phase A, Phase B) mean losses
    """
    accuracy: float
    macro_f1: float
    f1: Optional[float] = None
    auroc: Optional[float] = None
    frac_l2: Optional[float] = None
    frac_cos: Optional[float] = None
    round_losses: Optional[List[Tuple[Optional[float], Optional[float]]]] = None

    def to_dict(self) -> dict:
        return asdict(self)


def _f1(predictions: np.ndarray, labels: np.ndarray, positive: int) -> float:
    true_pos = np.sum((predictions == positive) & (labels == positive))
    false_pos = np.sum((predictions == positive) & (labels != positive))
    false_neg = np.sum((predictions != positive) & (labels == positive))
    denominator = 2 * true_pos + false_pos + false_neg
    return float(2 * true_pos / denominator) if denominator else 0.0


def auroc(scores: Sequence[float], positives: Sequence[bool]
          ) -> Optional[float]:
    """Mann-Whitney AUROC with average ranks for ties; None when only one
    class is present"""
    scores = np.asarray(scores, dtype=np.float64)
    positives = np.asarray(positives, dtype=bool)
    n_pos = int(positives.sum())
    n_neg = positives.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(scores)
    return float((ranks[positives].sum() - n_pos * (n_pos + 1) / 2.0)
                 / (n_pos * n_neg))


def compute_metrics(predictions: Sequence[int], labels: Sequence[int],
                    probabilities: np.ndarray = None) -> MetricsSummary:
    """Accuracy, macro-F1, positive-class F1 and AUROC.

    Args:
        predictions (Sequence[int]): predicted classes
        labels (Sequence[int]): true classes
        probabilities (np.ndarray, optional): N x C class probabilities, or
            the class-1 probability (length N) for a binary task

    Returns:
        MetricsSummary: with auroc None when labels hold a single class or no
            probabilities are given; multi-class AUROC is the one-vs-rest
            mean over classes present in labels

    Raises:
        ShapeError: misaligned inputs or probabilities outside [0, 1]
    """
    predictions = np.asarray(predictions, dtype=int)
    labels = np.asarray(labels, dtype=int)
    if predictions.shape != labels.shape or labels.ndim != 1 or not labels.size:
        raise ShapeError(f'predictions {predictions.shape} vs labels '
                         f'{labels.shape}')
    classes = np.union1d(labels, predictions)
    binary = False
    if probabilities is not None:
        probabilities = np.asarray(probabilities, dtype=np.float64)
        if probabilities.ndim == 1:
            probabilities = np.column_stack([1.0 - probabilities,
                                             probabilities])
        if probabilities.shape[0] != labels.size:
            raise ShapeError(f'probabilities {probabilities.shape} vs labels '
                             f'{labels.shape}')
        if np.any(probabilities < 0) or np.any(probabilities > 1):
            raise ShapeError('probabilities must lie in [0, 1]')
        binary = probabilities.shape[1] == 2
    binary = binary or set(classes.tolist()) <= {0, 1}
    summary = MetricsSummary(
        accuracy=float(np.mean(predictions == labels)),
        macro_f1=float(np.mean([_f1(predictions, labels, c)
                                for c in classes])),
        f1=_f1(predictions, labels, 1) if binary else None)
    if probabilities is not None:
        if probabilities.shape[1] == 2:
            summary.auroc = auroc(probabilities[:, 1], labels == 1)
        else:
            scores = [auroc(probabilities[:, c], labels == c)
                      for c in np.unique(labels)]
            scores = [score for score in scores if score is not None]
            summary.auroc = float(np.mean(scores)) if scores else None
    return summary


def evaluate_bundle(bundle: ModelBundle, test_set: Sequence[MultimodalSample],
                    sched: DiffusionSchedule, no_imputation: bool = False,
                    no_cond: bool = False, n_realizations: int = 1,
                    seed: int = 0, workers: int = 1
                    ) -> Dict[str, MetricsSummary]:
    """Held-out scores through every input path: 'zero_fill', 'clean' and,
    unless no_imputation, 'imputed'"""
    labels = [sample.label for sample in test_set]
    inputs = {'zero_fill': list(test_set), 'clean': list(test_set)}
    if not no_imputation:
        inputs['imputed'] = impute_all(test_set, bundle.params, sched,
                                       bundle.dims, n_realizations, seed,
                                       no_cond, workers)
    results = {}
    for path, samples in inputs.items():
        predictions, probabilities = predict(bundle.params, samples,
                                             bundle.dims, path, no_cond)
        results[path] = compute_metrics(predictions, labels, probabilities)
        LOGGER.info('Test accuracy through %s inputs: %.4f', path,
                    results[path].accuracy)
    return results


###############################################################################
#                       Feature reconstruction analysis                       #
###############################################################################

@dataclass(frozen=True)
class FeatureDistanceRecord:
    """Distances of one sample's classifier input to its clean value.

    Attributes:
        sample_id (int): sample id
        d_zero_l2 (float): L2, zero-filled vs clean
        d_imp_l2 (float): L2, imputed vs clean
        d_zero_cos (float): cosine distance, zero-filled vs clean
        d_imp_cos (float): cosine distance, imputed vs clean
        degenerate (bool): a zero vector was met, its cosine distance set to 1
    """
    sample_id: int
    d_zero_l2: float
    d_imp_l2: float
    d_zero_cos: float
    d_imp_cos: float
    degenerate: bool = False


def cosine_distance(first: np.ndarray, second: np.ndarray
                    ) -> Tuple[float, bool]:
    """(1 - cosine similarity, degenerate). Zero vectors give (1.0, True)."""
    norms = np.linalg.norm(first) * np.linalg.norm(second)
    if norms == 0:
        return 1.0, True
    similarity = float(np.dot(first, second) / norms)
    return float(np.clip(1.0 - similarity, 0.0, 2.0)), False


def feature_reconstruction_analysis(test_set: Sequence[MultimodalSample],
                                    bundle: ModelBundle,
                                    sched: DiffusionSchedule,
                                    mask_cfg: MissingnessConfig = None,
                                    n_realizations: int = 1,
                                    no_cond: bool = False, workers: int = 1
                                    ) -> List[FeatureDistanceRecord]:
    """Masks the clean test samples (by default 20 % of the time steps of one
    modality in every sample), then compares the fused classifier input of
    the zero-filled and of the imputed samples against that of the clean
    samples.

    Raises:
        UntrainedModelError: bundle has no completed round
    """
    if bundle.rounds < 1:
        raise UntrainedModelError('feature reconstruction needs a trained '
                                  'bundle')
    if mask_cfg is None:
        mask_cfg = MissingnessConfig(p_s=1.0, p_w=0.2, mode='timestep')
    masked = apply_missingness([sample.clean() for sample in test_set],
                               mask_cfg)
    imputed = impute_all(masked, bundle.params, sched, bundle.dims,
                         n_realizations, mask_cfg.seed, no_cond, workers)
    records = []
    for index, sample in enumerate(masked):
        features = {}
        for path, source in (('clean', sample), ('zero_fill', sample),
                             ('imputed', imputed[index])):
            graph = Graph(bundle.params)
            features[path] = fused_features(graph, [source], bundle.dims,
                                            path, no_cond).value[0]
        zero_cos, zero_flag = cosine_distance(features['zero_fill'],
                                              features['clean'])
        imp_cos, imp_flag = cosine_distance(features['imputed'],
                                            features['clean'])
        records.append(FeatureDistanceRecord(
            sample.id,
            float(np.linalg.norm(features['zero_fill'] - features['clean'])),
            float(np.linalg.norm(features['imputed'] - features['clean'])),
            zero_cos, imp_cos, zero_flag or imp_flag))
    frac_l2, frac_cos = improvement_fractions(records)
    LOGGER.info('Feature reconstruction over %d samples: frac_l2=%s '
                'frac_cos=%s', len(records), frac_l2, frac_cos)
    return records


def improvement_fractions(records: Sequence[FeatureDistanceRecord]
                          ) -> Tuple[Optional[float], Optional[float]]:
    """Fractions of records where imputation is strictly closer to clean"""
    if not records:
        return None, None
    l2 = np.mean([r.d_imp_l2 < r.d_zero_l2 for r in records])
    cos = np.mean([r.d_imp_cos < r.d_zero_cos for r in records])
    return float(l2), float(cos)


###############################################################################
#                                  Reports                                    #
###############################################################################

def emit_reports(summaries: Dict[str, MetricsSummary],
                 records: Sequence[FeatureDistanceRecord],
                 path: Union[str, Path]) -> Tuple[Path, Path]:
    """Writes metrics.json (one summary per configuration, sorted keys) and
    feature_distances.csv (one row per record, round-trip float format)
    into the folder path. The CSV has no degenerate column; ids of records
    that hit the zero-vector cosine guard are logged instead."""
    folder = Path(path)
    metrics_path = folder / METRICS_FILE
    distances_path = folder / DISTANCES_FILE
    try:
        folder.mkdir(parents=True, exist_ok=True)
        payload = {name: summary.to_dict()
                   for name, summary in summaries.items()}
        metrics_path.write_text(dumps(payload, indent=2, sort_keys=True)
                                + '\n')
        frame = pd.DataFrame([[getattr(r, column) for column in
                               DISTANCE_COLUMNS] for r in records],
                             columns=DISTANCE_COLUMNS)
        frame.to_csv(distances_path, index=False, float_format='%.17g')
    except OSError as error:
        LOGGER.error('Could not write reports to %s: %s', folder, error)
        raise
    degenerate = [r.sample_id for r in records if r.degenerate]
    if degenerate:
        LOGGER.warning('Zero feature vectors, cosine distance set to 1, for '
                       'samples %s', degenerate)
    LOGGER.info('Reports written to %s', folder)
    return metrics_path, distances_path


def read_feature_distances(path: Union[str, Path]
                           ) -> List[FeatureDistanceRecord]:
    """Parses a feature_distances.csv back into records"""
    frame = pd.read_csv(path)
    return [FeatureDistanceRecord(int(row.sample_id), float(row.d_zero_l2),
                                  float(row.d_imp_l2), float(row.d_zero_cos),
                                  float(row.d_imp_cos))
            for row in frame.itertuples(index=False)]
