#!/usr/bin/env python
# -*- coding: utf-8 -*-
# @Filename:    taskhead.py

"""Phase B: instance encoder, fusion with the prompt embeddings and the
classifier.

Training always reads the zero-filled observations x ⊙ R with R as the mask
channel. At inference the same encoder reads either the imputed x̂ (mask of
ones), the zero-filled input, or the clean ground truth; see INPUT_PATHS.

Attributes:
    INPUT_PATHS (tuple): 'imputed', 'zero_fill', 'clean'
    LOGGER (logging): The logger (from logging) to handle debugging
"""

from logging import getLogger
from typing import Sequence, Tuple
# non-system, pip installs
import numpy as np
from scipy.special import softmax
from .autodiff import Graph, ParamMap, Var
from .datafabric import MultimodalSample
from .embeddings import condition_batch, fuse_batch
from .errors import ShapeError
from .model import ModelDims

INPUT_PATHS = ('imputed', 'zero_fill', 'clean')

LOGGER = getLogger(__name__)


def encode_instance(graph: Graph, x_input: np.ndarray, masks: np.ndarray,
                    modalities: int) -> Var:
    """f_ins: conv1d over [x | mask] (ReLU, mean over time) shared by all
    modalities, then one linear head per modality.

    Args:
        graph (Graph): graph bound to the ParamMap holding f_ins.*
        x_input (np.ndarray): stacked values, B x L x F
        masks (np.ndarray): mask channel, B x L x F
        modalities (int): M

    Returns:
        Var: ω_ins, B x M x D
    """
    x_input = np.asarray(x_input, dtype=np.float64)
    masks = np.asarray(masks, dtype=np.float64)
    if x_input.shape != masks.shape or x_input.ndim != 3:
        raise ShapeError(f'encode_instance: input {x_input.shape} vs mask '
                         f'{masks.shape}')
    inputs = graph.constant(np.concatenate([x_input, masks], axis=2))
    hidden = graph.relu(graph.conv1d(inputs, graph.param('f_ins.conv.w'),
                                     graph.param('f_ins.conv.b')))
    pooled = graph.mean(hidden, axis=1)
    heads = []
    for m in range(modalities):
        head = graph.linear(pooled, graph.param(f'f_ins.head.{m}.w'),
                            graph.param(f'f_ins.head.{m}.b'))
        heads.append(graph.reshape(head, (head.shape[0], 1, head.shape[1])))
    return graph.concat(heads, axis=1)


def classify(graph: Graph, fused: Var) -> Var:
    """Two-layer head, B x 3DM -> B x C logits"""
    weight = graph.param('classifier.hidden.w')
    if fused.value.ndim != 2 or fused.shape[1] != weight.shape[0]:
        raise ShapeError(f'classify: fused {fused.shape} vs classifier input '
                         f'{weight.shape[0]}')
    hidden = graph.relu(graph.linear(fused, weight,
                                     graph.param('classifier.hidden.b')))
    return graph.linear(hidden, graph.param('classifier.out.w'),
                        graph.param('classifier.out.b'))


def _inputs(samples: Sequence[MultimodalSample], path: str
            ) -> Tuple[np.ndarray, np.ndarray]:
    if path not in INPUT_PATHS:
        raise ValueError(f'unknown input path {path!r}, expected one of '
                         f'{INPUT_PATHS}')
    if path == 'zero_fill':
        values = [s.stacked() * s.stacked_mask() for s in samples]
        masks = [s.stacked_mask() for s in samples]
    elif path == 'clean':
        values = [s.stacked_truth() for s in samples]
        masks = [np.ones_like(v) for v in values]
    else:
        values = [s.stacked() for s in samples]
        masks = [np.ones_like(v) for v in values]
    return np.stack(values), np.stack(masks)


def fused_features(graph: Graph, samples: Sequence[MultimodalSample],
                   dims: ModelDims, path: str = 'zero_fill',
                   no_cond: bool = False) -> Var:
    """Classifier inputs (B x 3DM) of a batch read through one input path.
    'imputed' expects samples whose values are already x̂. The clean path
    routes with every modality observed."""
    values, masks = _inputs(samples, path)
    indicators = np.stack([np.ones(dims.modalities) if path == 'clean'
                           else s.r for s in samples])
    omega_ins = encode_instance(graph, values, masks, dims.modalities)
    return fuse_batch(graph, omega_ins,
                      condition_batch(graph, indicators, no_cond))


def phase_b_step(params: ParamMap, batch: Sequence[MultimodalSample],
                 dims: ModelDims, no_cond: bool = False) -> float:
    """Cross-entropy of one batch on the zero-filled observations. Gradients
    (f_ins, classifier, W_mod, routed W_cond entries) are accumulated into
    params; the optimizer applies them.

    Returns:
        float: batch loss

    Raises:
        ShapeError: empty batch
    """
    if not batch:
        raise ShapeError('phase_b_step: empty batch')
    graph = Graph(params)
    logits = classify(graph, fused_features(graph, batch, dims, 'zero_fill',
                                            no_cond))
    loss = graph.cross_entropy(logits, [s.label for s in batch])
    graph.backward(loss)
    return float(loss.value)


def predict(params: ParamMap, samples: Sequence[MultimodalSample],
            dims: ModelDims, path: str = 'imputed', no_cond: bool = False,
            batch_size: int = 256) -> Tuple[np.ndarray, np.ndarray]:
    """Class predictions and probabilities (N x C) through an input path"""
    predictions, probabilities = [], []
    for start in range(0, len(samples), batch_size):
        batch = samples[start:start + batch_size]
        graph = Graph(params)
        logits = classify(graph, fused_features(graph, batch, dims, path,
                                                no_cond)).value
        probabilities.append(softmax(logits, axis=1))
        predictions.append(np.argmax(logits, axis=1))
    if not predictions:
        return np.zeros(0, dtype=int), np.zeros((0, dims.classes))
    return np.concatenate(predictions), np.concatenate(probabilities)
