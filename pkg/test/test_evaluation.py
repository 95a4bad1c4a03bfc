#!/usr/bin/env python
# -*- coding: utf-8 -*-
# @Filename:    test_evaluation.py

"""Metrics, feature-reconstruction analysis and report files"""

from json import loads
# non-system, pip installs
import numpy as np
import pytest
from fedcondi.datafabric import MissingnessConfig, apply_missingness
from fedcondi.errors import ShapeError, UntrainedModelError
from fedcondi.evaluation import FeatureDistanceRecord, MetricsSummary, \
     auroc, compute_metrics, cosine_distance, emit_reports, evaluate_bundle, \
     feature_reconstruction_analysis, improvement_fractions, \
     read_feature_distances
from fedcondi.model import ModelBundle


@pytest.fixture
def bundle(dims, params):
    return ModelBundle(dims, params, rounds=1)


###############################################################################
#                                  Metrics                                    #
###############################################################################

def test_perfect_predictions():
    summary = compute_metrics([0, 1, 1, 0], [0, 1, 1, 0],
                              [0.1, 0.9, 0.8, 0.3])
    assert summary.accuracy == 1.0
    assert summary.macro_f1 == 1.0
    assert summary.f1 == 1.0
    assert summary.auroc == 1.0


def test_hand_ranked_auroc():
    assert auroc([0.9, 0.1, 0.8, 0.4], [True, False, True, False]) == 1.0
    summary = compute_metrics([1, 0, 1, 0], [1, 0, 1, 0],
                              [0.9, 0.1, 0.8, 0.4])
    assert summary.auroc == 1.0


def test_ties_count_half():
    assert auroc([0.5, 0.5], [True, False]) == 0.5


def test_uninformative_scores(rng):
    labels = rng.integers(2, size=20000)
    assert auroc(rng.random(20000), labels == 1) == pytest.approx(0.5,
                                                                  abs=0.02)


def test_single_class_has_no_auroc():
    assert auroc([0.2, 0.7], [True, True]) is None
    assert compute_metrics([1, 1], [1, 1], [0.6, 0.9]).auroc is None


def test_auroc_ignores_monotone_transforms(rng):
    scores, labels = rng.normal(size=50), rng.random(50) < 0.4
    assert auroc(scores, labels) == auroc(3.0 * np.exp(scores) + 1.0, labels)


def test_macro_f1_by_hand():
    summary = compute_metrics([0, 0, 1, 1], [0, 1, 1, 1])
    assert summary.accuracy == 0.75
    assert summary.macro_f1 == pytest.approx((2 / 3 + 4 / 5) / 2, rel=1e-12)
    assert summary.f1 == pytest.approx(0.8, rel=1e-12)
    assert summary.auroc is None


def test_multiclass_auroc_is_one_vs_rest_mean():
    probs = np.array([[0.8, 0.1, 0.1], [0.1, 0.8, 0.1], [0.1, 0.1, 0.8],
                      [0.6, 0.3, 0.1]])
    summary = compute_metrics([0, 1, 2, 0], [0, 1, 2, 0], probs)
    assert summary.auroc == 1.0
    assert summary.f1 is None


@pytest.mark.parametrize('predictions, labels, probs', [
    ([0, 1], [0, 1, 1], None),
    ([], [], None),
    ([0, 1], [0, 1], [0.5, 1.5]),
    ([0, 1], [0, 1], [[0.5, 0.5]]),
])
def test_metric_shape_errors(predictions, labels, probs):
    with pytest.raises(ShapeError):
        compute_metrics(predictions, labels, probs)


###############################################################################
#                       Feature reconstruction analysis                       #
###############################################################################

def test_cosine_distance_cases(rng):
    vector = rng.normal(size=6)
    assert cosine_distance(vector, vector)[0] == pytest.approx(0.0, abs=1e-12)
    assert cosine_distance(vector, -vector)[0] == pytest.approx(2.0, abs=1e-12)
    assert cosine_distance(np.zeros(6), vector) == (1.0, True)


def test_analysis_needs_a_trained_bundle(samples, dims, params, schedule):
    with pytest.raises(UntrainedModelError):
        feature_reconstruction_analysis(samples, ModelBundle(dims, params),
                                        schedule)


def test_nothing_masked_means_no_distance(samples, bundle, schedule):
    records = feature_reconstruction_analysis(
        samples, bundle, schedule, MissingnessConfig(0.0, 0.2))
    assert [r.sample_id for r in records] == [s.id for s in samples]
    for record in records:
        assert record.d_zero_l2 == 0.0 and record.d_imp_l2 == 0.0
        assert record.d_zero_cos == pytest.approx(0.0, abs=1e-12)
    assert improvement_fractions(records) == (0.0, 0.0)


def test_analysis_is_deterministic(samples, bundle, schedule):
    runs = [feature_reconstruction_analysis(samples, bundle, schedule)
            for _ in range(2)]
    assert runs[0] == runs[1]
    assert all(r.d_zero_l2 > 0 for r in runs[0])


def test_analysis_ignores_existing_masks(samples, bundle, schedule):
    masked = apply_missingness(samples, MissingnessConfig(1.0, 0.5, seed=3))
    assert feature_reconstruction_analysis(masked, bundle, schedule) == \
        feature_reconstruction_analysis(samples, bundle, schedule)


def test_improvement_fractions():
    records = [FeatureDistanceRecord(0, 2.0, 1.0, 0.5, 0.6),
               FeatureDistanceRecord(1, 1.0, 1.0, 0.5, 0.1)]
    assert improvement_fractions(records) == (0.5, 0.5)
    assert improvement_fractions([]) == (None, None)


def test_evaluation_paths(samples, bundle, schedule):
    masked = apply_missingness(samples, MissingnessConfig(0.5, 0.5, seed=2))
    results = evaluate_bundle(bundle, masked, schedule)
    assert set(results) == {'zero_fill', 'clean', 'imputed'}
    assert all(0.0 <= r.accuracy <= 1.0 for r in results.values())
    assert set(evaluate_bundle(bundle, masked, schedule,
                               no_imputation=True)) == {'zero_fill', 'clean'}


###############################################################################
#                                  Reports                                    #
###############################################################################

def test_empty_distances_write_a_header(tmp_path):
    metrics, distances = emit_reports({}, [], tmp_path / 'out')
    assert loads(metrics.read_text()) == {}
    assert distances.read_text().strip() == \
        'sample_id,d_zero_l2,d_imp_l2,d_zero_cos,d_imp_cos'


def test_reports_round_trip(tmp_path):
    records = [FeatureDistanceRecord(3, 0.1, 1 / 3, 2 / 7, np.pi / 10),
               FeatureDistanceRecord(9, 1e-300, 5.0, 0.0, 1.0)]
    summary = MetricsSummary(0.75, 0.5, f1=0.6, auroc=None,
                             round_losses=[(1.5, None)])
    metrics, distances = emit_reports({'test': summary}, records, tmp_path)
    assert read_feature_distances(distances) == records
    payload = loads(metrics.read_text())
    assert payload['test']['accuracy'] == 0.75
    assert payload['test']['auroc'] is None
    assert payload['test']['round_losses'] == [[1.5, None]]


def test_degenerate_records_are_logged(tmp_path, caplog):
    records = [FeatureDistanceRecord(4, 0.0, 0.0, 1.0, 1.0, degenerate=True),
               FeatureDistanceRecord(5, 0.2, 0.1, 0.3, 0.2)]
    with caplog.at_level('WARNING', logger='fedcondi.evaluation'):
        _, distances = emit_reports({}, records, tmp_path)
    assert 'samples [4]' in caplog.text
    assert [r.degenerate for r in read_feature_distances(distances)] == \
        [False, False]
