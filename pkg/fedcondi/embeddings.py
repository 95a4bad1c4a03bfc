#!/usr/bin/env python
# -*- coding: utf-8 -*-
# @Filename:    embeddings.py

"""Prompt embeddings shared across clients: the modality profile table W_mod
(M x D), the source -> target condition table W_cond (M x M x D), condition
routing and the three-way fusion [instance | modality | condition] that feeds
the classifier.

Both tables live in the ParamMap (under COND_TABLE and MOD_TABLE) so they are
trained, serialized and averaged like every other weight.

Attributes:
    COND_TABLE (str): ParamMap name of W_cond
    LOGGER (logging): The logger (from logging) to handle debugging
    MOD_TABLE (str): ParamMap name of W_mod
"""

from dataclasses import dataclass
from logging import getLogger
from typing import Sequence, Union
# non-system, pip installs
import numpy as np
from .autodiff import Graph, ParamMap, Var, embedding_normal
from .errors import RoutingError, ShapeError

COND_TABLE = 'w_cond.table'
MOD_TABLE = 'w_mod.table'

LOGGER = getLogger(__name__)


###############################################################################
#                              Embedding tables                               #
###############################################################################

@dataclass(frozen=True)
class CondEmbedding:
    """W_cond; table[i, m] is the contribution of source i to target m"""
    table: np.ndarray

    def __post_init__(self):
        table = np.asarray(self.table, dtype=np.float64)
        if table.ndim != 3 or table.shape[0] != table.shape[1]:
            raise ShapeError(f'W_cond must be M x M x D, got {table.shape}')
        object.__setattr__(self, 'table', table)

    @classmethod
    def from_params(cls, params: ParamMap) -> 'CondEmbedding':
        return cls(params[COND_TABLE])

    @property
    def modalities(self) -> int:
        return self.table.shape[0]

    @property
    def dim(self) -> int:
        return self.table.shape[2]


@dataclass(frozen=True)
class ModEmbedding:
    """W_mod; row m is the profile of modality m"""
    table: np.ndarray

    def __post_init__(self):
        table = np.asarray(self.table, dtype=np.float64)
        if table.ndim != 2:
            raise ShapeError(f'W_mod must be M x D, got {table.shape}')
        object.__setattr__(self, 'table', table)

    @classmethod
    def from_params(cls, params: ParamMap) -> 'ModEmbedding':
        return cls(params[MOD_TABLE])


@dataclass(frozen=True)
class FusedRepresentation:
    """Sample-level fused vector, M blocks of [instance | modality |
    condition], each segment D wide.

    Attributes:
        vector (ndarray): length 3DM
        modalities (int): M
        dim (int): D
    """
    vector: np.ndarray
    modalities: int
    dim: int

    def block(self, m: int) -> np.ndarray:
        """The 3D-long block of modality m"""
        width = 3 * self.dim
        return self.vector[m * width:(m + 1) * width]

    def instance(self, m: int) -> np.ndarray:
        return self.block(m)[:self.dim]

    def modality(self, m: int) -> np.ndarray:
        return self.block(m)[self.dim:2 * self.dim]

    def condition(self, m: int) -> np.ndarray:
        return self.block(m)[2 * self.dim:]


def init_embeddings(params: ParamMap, M: int, D: int,
                    rng: np.random.Generator):
    """Adds W_cond and W_mod, drawn from N(0, 0.02^2)"""
    params[COND_TABLE] = embedding_normal(rng, (M, M, D))
    params[MOD_TABLE] = embedding_normal(rng, (M, D))


def _table(w_cond: Union[CondEmbedding, np.ndarray]) -> np.ndarray:
    if isinstance(w_cond, CondEmbedding):
        return w_cond.table
    return CondEmbedding(w_cond).table


###############################################################################
#                              Condition routing                              #
###############################################################################

def route_condition(w_cond: Union[CondEmbedding, np.ndarray],
                    r: Sequence[float], m: int) -> np.ndarray:
    """Condition vector of target modality m under the availability pattern r.

    An observed target uses its self-condition W_cond[m, m]. A missing target
    averages the contributions of every observed source: the rows W_cond[i, m]
    for i in O = {i : r[i] = 1} are summed in index order, then divided by
    |O|.

    Raises:
        RoutingError: no observed modality
        ShapeError: r does not have M entries, or m out of range
    """
    table = _table(w_cond)
    r = np.asarray(r, dtype=np.float64)
    if r.shape != (table.shape[0],) or not 0 <= m < table.shape[0]:
        raise ShapeError(f'route_condition: r {r.shape}, target {m} for '
                         f'W_cond {table.shape}')
    if r[m] > 0.5:
        return table[m, m].copy()
    sources = np.flatnonzero(r > 0.5)
    if sources.size == 0:
        raise RoutingError('cannot route a condition with no observed '
                           'modality')
    total = table[sources[0], m].copy()
    for i in sources[1:]:
        total = total + table[i, m]
    return total / sources.size


def routing_weights(r: Sequence[float]) -> np.ndarray:
    """A[m, i] such that route_condition(W, r, m) = Σ_i A[m, i] W[i, m]"""
    r = np.asarray(r, dtype=np.float64)
    sources = np.flatnonzero(r > 0.5)
    if sources.size == 0:
        raise RoutingError('cannot route a condition with no observed '
                           'modality')
    weights = np.zeros((r.size, r.size))
    for m in range(r.size):
        if r[m] > 0.5:
            weights[m, m] = 1.0
        else:
            weights[m, sources] = 1.0 / sources.size
    return weights


def sample_condition_vector(w_cond: Union[CondEmbedding, np.ndarray],
                            r: Sequence[float], length: int = None
                            ) -> np.ndarray:
    """Concatenation of route_condition over m = 0..M-1 (length MD), or that
    vector repeated on `length` rows (length x MD) when length is given."""
    table = _table(w_cond)
    vector = np.concatenate([route_condition(table, r, m)
                             for m in range(table.shape[0])])
    if length is None:
        return vector
    return np.tile(vector, (length, 1))


def fuse(omega_ins: np.ndarray, w_mod: Union[ModEmbedding, np.ndarray],
         w_cond: Union[CondEmbedding, np.ndarray], r: Sequence[float],
         no_cond: bool = False) -> FusedRepresentation:
    """Three-way fusion of one sample.

    Args:
        omega_ins (np.ndarray): instance features, M x D
        w_mod (Union[ModEmbedding, np.ndarray]): W_mod, M x D
        w_cond (Union[CondEmbedding, np.ndarray]): W_cond, M x M x D
        r (Sequence[float]): modality indicator
        no_cond (bool, optional): replace routed conditions by zeros

    Returns:
        FusedRepresentation: blocks [ω_ins[m] | W_mod[m] | ω_cond[m]]
    """
    omega_ins = np.asarray(omega_ins, dtype=np.float64)
    mod = w_mod.table if isinstance(w_mod, ModEmbedding) else \
        ModEmbedding(w_mod).table
    table = _table(w_cond)
    M, D = mod.shape
    if omega_ins.shape != (M, D) or table.shape != (M, M, D):
        raise ShapeError(f'fuse: instance {omega_ins.shape}, W_mod '
                         f'{mod.shape}, W_cond {table.shape} disagree')
    blocks = []
    for m in range(M):
        cond = np.zeros(D) if no_cond else route_condition(table, r, m)
        blocks.extend([omega_ins[m], mod[m], cond])
    return FusedRepresentation(np.concatenate(blocks), M, D)


###############################################################################
#                             Graph counterparts                              #
###############################################################################

def route_batch(graph: Graph, table: Var, r_batch: np.ndarray) -> Var:
    """Routed conditions of a batch, B x M x D. The forward values come from
    route_condition itself; the backward pass spreads each output gradient
    over the rows that were selected, so rows never selected get an exact
    zero gradient."""
    r_batch = np.atleast_2d(np.asarray(r_batch, dtype=np.float64))
    M = table.shape[0]
    if r_batch.shape[1] != M:
        raise ShapeError(f'route_batch: r {r_batch.shape} vs W_cond '
                         f'{table.shape}')
    value = np.stack([np.stack([route_condition(table.value, r, m)
                                for m in range(M)]) for r in r_batch])
    weights = np.stack([routing_weights(r) for r in r_batch])

    def backward(grad):
        # grad[b, m, :] flows to table[i, m, :] with weight A_b[m, i]
        return (np.einsum('bmi,bmd->imd', weights, grad),)
    return graph.record('route_condition', [table], value, backward)


def condition_batch(graph: Graph, r_batch: np.ndarray, no_cond: bool = False
                    ) -> Var:
    """Routed W_cond for a batch (B x M x D), zeros under no_cond"""
    table = graph.param(COND_TABLE)
    if no_cond:
        r_batch = np.atleast_2d(r_batch)
        return graph.constant(np.zeros((r_batch.shape[0],) + table.shape[1:]))
    return route_batch(graph, table, r_batch)


def fuse_batch(graph: Graph, omega_ins: Var, conditions: Var) -> Var:
    """Fused vectors B x 3DM from instance features (B x M x D), W_mod and
    routed conditions (B x M x D)"""
    mod = graph.param(MOD_TABLE)
    batch = omega_ins.shape[0]
    if omega_ins.shape[1:] != mod.shape or conditions.shape != omega_ins.shape:
        raise ShapeError(f'fuse: instance {omega_ins.shape}, W_mod '
                         f'{mod.shape}, conditions {conditions.shape}')
    M, D = mod.shape
    profile = graph.broadcast_to(graph.reshape(mod, (1, M, D)), (batch, M, D))
    blocks = graph.concat([omega_ins, profile, conditions], axis=2)
    return graph.reshape(blocks, (batch, 3 * D * M))
