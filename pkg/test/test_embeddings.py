#!/usr/bin/env python
# -*- coding: utf-8 -*-
# @Filename:    test_embeddings.py

"""Condition routing and three-way fusion"""

from itertools import product
# non-system, pip installs
import numpy as np
import pytest
from fedcondi.autodiff import Graph, ParamMap
from fedcondi.embeddings import COND_TABLE, MOD_TABLE, CondEmbedding, \
     condition_batch, fuse, fuse_batch, route_batch, route_condition, \
     routing_weights, sample_condition_vector
from fedcondi.errors import RoutingError, ShapeError


def brute_route(table, r, m):
    """Straight-line routing: diagonal when observed, otherwise the running
    sum over observed sources in index order divided by their count"""
    if r[m] == 1:
        return table[m, m]
    total, count = None, 0
    for i in range(len(r)):
        if r[i] == 1:
            total = table[i, m].copy() if total is None else total + table[i, m]
            count += 1
    return total / count


###############################################################################
#                                  Routing                                    #
###############################################################################

def test_fully_observed_uses_the_diagonal(rng):
    table = rng.normal(size=(3, 3, 4))
    for m in range(3):
        np.testing.assert_array_equal(route_condition(table, [1, 1, 1], m),
                                      table[m, m])


def test_single_source_is_itself(rng):
    table = rng.normal(size=(2, 2, 3))
    np.testing.assert_array_equal(route_condition(table, [1, 0], 1),
                                  table[0, 1])


def test_two_source_average():
    table = np.zeros((3, 3, 2))
    table[0, 2] = [2.0, 4.0]
    table[1, 2] = [0.0, 2.0]
    np.testing.assert_array_equal(route_condition(table, [1, 1, 0], 2),
                                  [1.0, 3.0])


@pytest.mark.parametrize('M', [1, 2, 3, 4])
def test_every_pattern_matches_brute_force(M):
    rng = np.random.default_rng(M)
    table = rng.normal(size=(M, M, 3))
    for r in product((0, 1), repeat=M):
        if not any(r):
            continue
        for m in range(M):
            assert np.array_equal(route_condition(CondEmbedding(table), r, m),
                                  brute_route(table, r, m))


def test_routing_scales_with_the_table(rng):
    table = rng.normal(size=(4, 4, 3))
    r = [1, 0, 1, 0]
    for m in range(4):
        assert np.array_equal(route_condition(2.0 * table, r, m),
                              2.0 * route_condition(table, r, m))


def test_routing_errors(rng):
    table = rng.normal(size=(2, 2, 3))
    with pytest.raises(RoutingError):
        route_condition(table, [0, 0], 1)
    with pytest.raises(ShapeError):
        route_condition(table, [1, 0, 1], 0)
    with pytest.raises(ShapeError):
        route_condition(table, [1, 0], 2)
    with pytest.raises(ShapeError):
        route_condition(rng.normal(size=(2, 3, 3)), [1, 1], 0)


def test_routing_weights_reproduce_the_route(rng):
    table = rng.normal(size=(3, 3, 2))
    weights = routing_weights([0, 1, 1])
    np.testing.assert_allclose(weights.sum(axis=1), 1.0)
    expected = np.einsum('mi,imd->md', weights, table)
    for m in range(3):
        np.testing.assert_allclose(route_condition(table, [0, 1, 1], m),
                                   expected[m], rtol=1e-15)


def test_condition_vector_single_modality():
    table = np.array([[[0.5, -1.0]]])
    np.testing.assert_array_equal(sample_condition_vector(table, [1]),
                                  [0.5, -1.0])
    rows = sample_condition_vector(table, [1], length=4)
    assert rows.shape == (4, 2)
    assert (rows == rows[0]).all()


def test_condition_vector_is_the_diagonal_when_observed(rng):
    table = rng.normal(size=(2, 2, 3))
    np.testing.assert_array_equal(sample_condition_vector(table, [1, 1]),
                                  np.concatenate([table[0, 0], table[1, 1]]))


###############################################################################
#                                  Fusion                                     #
###############################################################################

def test_fuse_scalar_blocks():
    fused = fuse([[5.0]], [[7.0]], [[[9.0]]], [1])
    np.testing.assert_array_equal(fused.vector, [5.0, 7.0, 9.0])


def test_fuse_zero_embeddings():
    fused = fuse(np.zeros((3, 2)), np.zeros((3, 2)), np.zeros((3, 3, 2)),
                 [1, 0, 1])
    np.testing.assert_array_equal(fused.vector, np.zeros(18))


def test_fuse_segment_layout(rng):
    omega, mod = rng.normal(size=(2, 2)), rng.normal(size=(2, 2))
    table = rng.normal(size=(2, 2, 2))
    fused = fuse(omega, mod, table, [1, 0])
    assert fused.vector.shape == (12,)
    for m in range(2):
        np.testing.assert_array_equal(fused.instance(m), omega[m])
        np.testing.assert_array_equal(fused.modality(m), mod[m])
        np.testing.assert_array_equal(fused.condition(m),
                                      route_condition(table, [1, 0], m))


def test_fuse_without_conditions(rng):
    fused = fuse(rng.normal(size=(2, 3)), rng.normal(size=(2, 3)),
                 rng.normal(size=(2, 2, 3)), [1, 1], no_cond=True)
    for m in range(2):
        np.testing.assert_array_equal(fused.condition(m), np.zeros(3))


def test_fuse_dimension_mismatch(rng):
    with pytest.raises(ShapeError):
        fuse(rng.normal(size=(2, 4)), rng.normal(size=(2, 3)),
             rng.normal(size=(2, 2, 3)), [1, 1])


###############################################################################
#                             Graph counterparts                              #
###############################################################################

def test_unselected_condition_rows_get_no_gradient(rng):
    params = ParamMap({COND_TABLE: rng.normal(size=(3, 3, 2))})
    r_batch = np.array([[1, 0, 1], [1, 0, 0]])
    graph = Graph(params)
    routed = route_batch(graph, graph.param(COND_TABLE), r_batch)
    for b, r in enumerate(r_batch):
        for m in range(3):
            np.testing.assert_array_equal(
                routed.value[b, m], route_condition(params[COND_TABLE], r, m))
    graph.backward(graph.sum(graph.mul(
        routed, graph.constant(rng.normal(size=(2, 3, 2)) + 5.0))))
    selected = {(0, 0), (0, 1), (2, 1), (2, 2), (0, 2)}
    grad = params.grad(COND_TABLE)
    for i, m in product(range(3), repeat=2):
        assert bool(np.any(grad[i, m] != 0)) == ((i, m) in selected)


def test_no_cond_batch_is_zero(rng):
    params = ParamMap({COND_TABLE: rng.normal(size=(2, 2, 3))})
    graph = Graph(params)
    out = condition_batch(graph, np.ones((4, 2)), no_cond=True)
    np.testing.assert_array_equal(out.value, np.zeros((4, 2, 3)))


def test_fusion_routes_gradients_unchanged(rng):
    B, M, D = 3, 2, 2
    params = ParamMap({MOD_TABLE: rng.normal(size=(M, D))})
    graph = Graph(params)
    omega = graph.input('omega', rng.normal(size=(B, M, D)))
    conditions = graph.input('conditions', rng.normal(size=(B, M, D)))
    fused = fuse_batch(graph, omega, conditions)
    assert fused.shape == (B, 3 * D * M)
    upstream = rng.normal(size=(B, 3 * D * M))
    graph.backward(fused, upstream)
    blocks = upstream.reshape(B, M, 3 * D)
    np.testing.assert_array_equal(graph.grad(omega), blocks[..., :D])
    np.testing.assert_array_equal(graph.grad(conditions), blocks[..., 2 * D:])
    np.testing.assert_allclose(params.grad(MOD_TABLE),
                               blocks[..., D:2 * D].sum(axis=0), rtol=1e-15)
