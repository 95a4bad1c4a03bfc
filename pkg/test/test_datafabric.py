#!/usr/bin/env python
# -*- coding: utf-8 -*-
# @Filename:    test_datafabric.py

"""Samples, missingness protocol, synthetic data, partitions and CSV I/O"""

# non-system, pip installs
import numpy as np
import pytest
from scipy.stats import chisquare
from fedcondi.datafabric import MissingnessConfig, MultimodalSample, \
     apply_missingness, coupling_transform, generate_synthetic, load_csv, \
     normalize_features, partition, resample_to_length, train_test_split, \
     write_csv
from fedcondi.errors import ConfigError, ParseError, PartitionError, \
     ShapeError, UnsatisfiableMaskError


def ones_dataset(n: int, M: int = 2, L_ts: int = 4, L_f: int = 1):
    return [MultimodalSample(i, [np.ones((L_ts, L_f)) for _ in range(M)],
                             i % 2) for i in range(n)]


###############################################################################
#                                  Samples                                    #
###############################################################################

def test_mask_algebra_partitions_every_modality(rng):
    values = [rng.normal(size=(5, 2)), rng.normal(size=(5, 3))]
    masks = [rng.random((5, 2)) < 0.5, rng.random((5, 3)) < 0.5]
    masks[1][0, 0] = True
    sample = MultimodalSample(0, values, 1, R=masks)
    for observed, unobserved, x in zip(sample.observed(), sample.unobserved(),
                                       sample.modalities):
        np.testing.assert_array_equal(observed + unobserved, x)


def test_sample_shapes_are_validated():
    with pytest.raises(ShapeError):
        MultimodalSample(0, [np.ones((4, 1)), np.ones((5, 1))], 0)
    with pytest.raises(ShapeError):
        MultimodalSample(0, [np.ones((4, 1))], 0, R=[np.ones((4, 2))])


def test_missingness_config_ranges():
    with pytest.raises(ConfigError):
        MissingnessConfig(p_s=1.5, p_w=0.2)
    with pytest.raises(ConfigError):
        MissingnessConfig(p_s=0.2, p_w=0.2, mode='row')


###############################################################################
#                                Missingness                                  #
###############################################################################

def test_no_affected_samples_keeps_everything_observed():
    masked = apply_missingness(ones_dataset(20), MissingnessConfig(0.0, 0.8))
    for sample in masked:
        assert all(mask.all() for mask in sample.R)
        np.testing.assert_array_equal(sample.r, [1.0, 1.0])


def test_full_drop_removes_exactly_one_modality():
    masked = apply_missingness(ones_dataset(50), MissingnessConfig(1.0, 1.0,
                                                                    seed=3))
    for sample in masked:
        assert sorted(sample.r.tolist()) == [0.0, 1.0]
        missing = int(np.flatnonzero(sample.r == 0)[0])
        assert not sample.R[missing].any()
        assert not sample.modalities[missing].any()
        assert sample.R[1 - missing].all()


def test_affected_fraction_and_drop_rate():
    n = 10000
    masked = apply_missingness(ones_dataset(n),
                               MissingnessConfig(0.8, 0.2, seed=1))
    dropped = sum(float((1.0 - mask).sum()) for s in masked for mask in s.R)
    count = int(np.floor(0.8 * n + 0.5))
    assert dropped / (count * 4) == pytest.approx(0.2, abs=0.01)
    full = apply_missingness(ones_dataset(n), MissingnessConfig(0.8, 1.0,
                                                                 seed=1))
    assert sum(1 for s in full if s.r.min() == 0) == count


def test_affected_modality_is_uniform():
    masked = apply_missingness(ones_dataset(10000, M=3),
                               MissingnessConfig(1.0, 1.0, seed=5))
    counts = np.bincount([int(np.flatnonzero(s.r == 0)[0]) for s in masked],
                         minlength=3)
    assert chisquare(counts).pvalue > 0.001


def test_single_modality_cannot_be_masked():
    with pytest.raises(UnsatisfiableMaskError):
        apply_missingness(ones_dataset(4, M=1), MissingnessConfig(1.0, 0.5))


def test_timestep_mode_drops_whole_rows():
    masked = apply_missingness(ones_dataset(30, L_ts=8, L_f=3),
                               MissingnessConfig(1.0, 0.25, seed=2,
                                                 mode='timestep'))
    for sample in masked:
        affected = [mask for mask in sample.R if not mask.all()]
        assert len(affected) == 1
        rows = (affected[0] == 0).all(axis=1)
        assert rows.sum() == 2
        assert affected[0][~rows].all()


def test_ground_truth_is_kept_and_inputs_untouched():
    dataset = generate_synthetic(10, 2, 5, 2, 2, seed=4)
    masked = apply_missingness(dataset, MissingnessConfig(1.0, 0.5, seed=9))
    for original, sample in zip(dataset, masked):
        np.testing.assert_array_equal(sample.stacked_truth(),
                                      original.stacked())
        np.testing.assert_array_equal(
            sample.stacked(), original.stacked() * sample.stacked_mask())
        assert original.truth is None
        np.testing.assert_array_equal(sample.clean().stacked(),
                                      original.stacked())


def test_masking_is_deterministic():
    cfg = MissingnessConfig(0.5, 0.5, seed=8)
    first = apply_missingness(ones_dataset(40), cfg)
    second = apply_missingness(ones_dataset(40), cfg)
    for a, b in zip(first, second):
        np.testing.assert_array_equal(a.stacked_mask(), b.stacked_mask())


def test_existing_masks_are_kept():
    sample = MultimodalSample(0, [np.ones((4, 1)), np.ones((4, 1))], 0,
                              R=[np.array([[1.0], [0.0], [1.0], [1.0]]),
                                 np.ones((4, 1))])
    masked = apply_missingness([sample], MissingnessConfig(0.0, 0.0))[0]
    assert masked.R[0][1, 0] == 0.0
    assert masked.modalities[0][1, 0] == 0.0


###############################################################################
#                               Synthetic data                                #
###############################################################################

def test_generation_is_deterministic():
    first = generate_synthetic(20, 3, 8, 2, 3, seed=12)
    second = generate_synthetic(20, 3, 8, 2, 3, seed=12)
    for a, b in zip(first, second):
        assert a.label == b.label
        np.testing.assert_array_equal(a.stacked(), b.stacked())


def test_noiseless_coupling_is_exact():
    for sample in generate_synthetic(5, 4, 10, 2, 2, seed=0, noise=0.0):
        for m in range(1, 4):
            np.testing.assert_array_equal(
                sample.modalities[m],
                coupling_transform(sample.modalities[0], m))


def test_class_means_differ_by_the_offset():
    dataset = generate_synthetic(400, 2, 8, 1, 2, seed=21, noise=0.1,
                                 class_offset=1.0)
    means = {label: np.mean([s.modalities[0].mean() for s in dataset
                             if s.label == label]) for label in (0, 1)}
    smallest = min(sum(1 for s in dataset if s.label == label)
                   for label in (0, 1))
    assert abs(means[1] - means[0] - 1.0) < 3 * 0.1 / np.sqrt(smallest)


def test_generator_arguments_are_validated():
    with pytest.raises(ConfigError):
        generate_synthetic(10, 1, 8, 1, 2, seed=0)
    with pytest.raises(ConfigError):
        generate_synthetic(10, 2, 8, 1, 1, seed=0)


###############################################################################
#                                 Partitions                                  #
###############################################################################

def test_single_client_holds_everything():
    dataset = generate_synthetic(30, 2, 4, 1, 2, seed=0)
    result = partition(dataset, 1)
    assert result.assignments == {0: list(range(30))}
    assert result.sizes == {0: 30}


def test_no_overlap_means_disjoint_cover():
    dataset = generate_synthetic(120, 2, 4, 1, 3, seed=1)
    result = partition(dataset, 6, 0.5, 0.0, seed=2)
    assert result.total() == 120
    ids = sorted(i for members in result.assignments.values()
                 for i in members)
    assert ids == list(range(120))
    assert all(result.sizes.values())


def test_overlap_adds_second_copies():
    dataset = generate_synthetic(100, 2, 4, 1, 2, seed=1)
    result = partition(dataset, 4, 0.5, 0.3, seed=3)
    assert result.total() == 130
    held = [i for members in result.assignments.values() for i in members]
    assert set(held) == set(range(100))
    assert max(np.bincount(held)) == 2
    for members in result.assignments.values():
        assert len(set(members)) == len(members)


def test_label_skew_grows_as_alpha_shrinks():
    dataset = generate_synthetic(600, 2, 4, 1, 4, seed=6)
    labels = np.array([s.label for s in dataset])
    overall = np.bincount(labels, minlength=4) / labels.size

    def deviation(alpha):
        result = partition(dataset, 6, alpha, 0.0, seed=7)
        worst = 0.0
        for members in result.assignments.values():
            local = np.bincount(labels[members], minlength=4) / len(members)
            worst = max(worst, np.abs(local - overall).max())
        return worst
    assert deviation(0.1) > deviation(100.0)


def test_partition_gives_up_on_empty_clients():
    with pytest.raises(PartitionError):
        partition(generate_synthetic(3, 2, 4, 1, 2, seed=0), 5)


def test_partition_select_returns_samples():
    dataset = generate_synthetic(12, 2, 4, 1, 2, seed=0)
    result = partition(dataset, 2, seed=1)
    for k, members in result.assignments.items():
        assert [s.id for s in result.select(k, dataset)] == members


def test_split_is_stratified():
    dataset = generate_synthetic(200, 2, 4, 1, 2, seed=3)
    train, test = train_test_split(dataset, 0.2, seed=0)
    assert len(train) + len(test) == 200
    assert not {s.id for s in train} & {s.id for s in test}
    for label in (0, 1):
        n_c = sum(1 for s in dataset if s.label == label)
        assert sum(1 for s in test if s.label == label) == \
            int(np.floor(0.2 * n_c + 0.5))


###############################################################################
#                                 Resampling                                  #
###############################################################################

def test_resample_same_length_is_identity(rng):
    x = rng.normal(size=(6, 2))
    np.testing.assert_array_equal(resample_to_length(x, 6), x)


def test_resample_ramp():
    out = resample_to_length(np.arange(4.0)[:, None], 7)
    np.testing.assert_allclose(out[:, 0], [0, 0.5, 1, 1.5, 2, 2.5, 3],
                               atol=1e-12)


def test_resample_error_is_bounded_by_curvature():
    t = np.linspace(0.0, 1.0, 101)
    x = np.sin(2 * np.pi * t)[:, None]
    back = resample_to_length(resample_to_length(x, 26), 101)
    bound = (2 * np.pi) ** 2 * (1.0 / 25) ** 2 / 8
    assert np.abs(back - x).max() <= bound + 1e-12


def test_resample_needs_two_steps():
    with pytest.raises(ShapeError):
        resample_to_length(np.ones((1, 2)), 5)


###############################################################################
#                                     CSV                                     #
###############################################################################

SCHEMA = [['a'], ['b']]


def write_text(tmp_path, text: str):
    path = tmp_path / 'data.csv'
    path.write_text(text)
    return path


def test_csv_round_trip(tmp_path):
    samples = [MultimodalSample(0, [[[1.5], [-2.0]], [[0.25], [3.0]]], 1),
               MultimodalSample(1, [[[7.0], [8.5]], [[1e-3], [-4.0]]], 0)]
    write_csv(samples, tmp_path / 'out.csv', SCHEMA)
    loaded = load_csv(tmp_path / 'out.csv', SCHEMA, normalize=False)
    for original, sample in zip(samples, loaded):
        assert sample.id == original.id and sample.label == original.label
        np.testing.assert_array_equal(sample.stacked(), original.stacked())


def test_csv_empty_field_is_a_missing_cell(tmp_path):
    path = write_text(tmp_path, 'sample_id,time,a,b,label\n'
                                '0,0,1.0,2.0,1\n0,1,,3.0,1\n'
                                '1,0,4.0,5.0,0\n1,1,6.0,7.0,0\n')
    first = load_csv(path, SCHEMA, normalize=False)[0]
    assert first.R[0][1, 0] == 0.0
    assert first.R[0][0, 0] == 1.0
    np.testing.assert_array_equal(first.r, [1.0, 1.0])


def test_csv_constant_column_normalizes_to_zero(tmp_path):
    path = write_text(tmp_path, 'sample_id,time,a,b,label\n'
                                '0,0,5.0,1.0,0\n0,1,5.0,2.0,0\n'
                                '1,0,5.0,3.0,1\n1,1,5.0,4.0,1\n')
    for sample in load_csv(path, SCHEMA):
        np.testing.assert_array_equal(sample.modalities[0], np.zeros((2, 1)))


def test_normalization_uses_train_statistics(tmp_path):
    path = write_text(tmp_path, 'sample_id,time,a,b,label\n'
                                '0,0,0.0,1.0,0\n0,1,2.0,1.0,0\n'
                                '1,0,10.0,1.0,1\n1,1,30.0,1.0,1\n')
    samples = load_csv(path, SCHEMA, normalize=False)
    normalize_features(samples, {0})
    np.testing.assert_allclose(samples[0].modalities[0][:, 0], [-1.0, 1.0])
    np.testing.assert_allclose(samples[1].modalities[0][:, 0], [9.0, 29.0])


@pytest.mark.parametrize('text, line', [
    ('sample_id,time,a,c,label\n0,0,1,2,0\n', 1),
    ('sample_id,time,a,b,label\n0,0,1,2,0\n0,1,x,2,0\n', 3),
    ('sample_id,time,a,b,label\n0,0,1,2,0\n0,one,1,2,0\n', 3),
    ('sample_id,time,a,b,label\n0,0,1,2,0\n0,1,1,2,1\n', 2),
])
def test_csv_parse_errors_carry_line_numbers(tmp_path, text, line):
    with pytest.raises(ParseError) as caught:
        load_csv(write_text(tmp_path, text), SCHEMA)
    assert caught.value.line == line


def test_csv_ragged_row(tmp_path):
    path = write_text(tmp_path, 'sample_id,time,a,b,label\n0,0,1,2,0\n'
                                '0,1,1,2,0,9\n')
    with pytest.raises(ParseError):
        load_csv(path, SCHEMA)


def test_csv_unknown_train_ids(tmp_path):
    path = write_text(tmp_path, 'sample_id,time,a,b,label\n0,0,1,2,0\n'
                                '0,1,1,2,0\n')
    with pytest.raises(ParseError):
        load_csv(path, SCHEMA, train_ids=[0, 42])
