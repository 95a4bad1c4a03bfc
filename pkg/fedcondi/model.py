#!/usr/bin/env python
# -*- coding: utf-8 -*-
# @Filename:    model.py

"""Model dimensions, the parameter layout of every trainable block and the
ModelBundle that a run checkpoints and `analyze` reloads.

Parameter names (all in one ParamMap):

    moe.gate.{w,b}                    gating network of the context encoder
    moe.expert.<e>.{w1,b1,w2,b2}      context experts
    denoiser.in.{w,b}                 input projection of ε_θ
    denoiser.time.{w,b}               timestep embedding projection
    denoiser.block.<j>.*              residual blocks
    denoiser.out.{w,b}                output projection
    f_ins.conv.{w,b}                  instance encoder backbone
    f_ins.head.<m>.{w,b}              per-modality instance heads
    classifier.{hidden,out}.{w,b}     task head
    w_cond.table, w_mod.table         prompt embeddings

Attributes:
    BUNDLE_PARAMS (str): file name of the parameters inside a bundle folder
    BUNDLE_META (str): file name of the dims/rounds sidecar
    LOGGER (logging): The logger (from logging) to handle debugging
"""

from dataclasses import asdict, dataclass
from logging import getLogger
from pathlib import Path
from typing import Union
# non-system, pip installs
import numpy as np
import tomli_w
from .autodiff import ParamMap, glorot_uniform
from .embeddings import init_embeddings
from .errors import ConfigError

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

BUNDLE_PARAMS = 'params.bin'
BUNDLE_META = 'bundle.toml'

LOGGER = getLogger(__name__)


@dataclass(frozen=True)
class ModelDims:
    """Sizes of every block.

    Attributes:
        modalities (int): M
        features (int): ΣL_f, width of the stacked modalities
        classes (int): number of classes
        embed_dim (int): D, width of every prompt embedding segment
        context_dim (int): width of the observed-context features c_O
        hidden (int): denoiser and expert width
        blocks (int): residual blocks of the denoiser
        kernel (int): denoiser convolution kernel (odd)
        time_dim (int): sinusoidal timestep embedding width (even)
        experts (int): E
        top_k (int): experts mixed per time step
        encoder_hidden (int): instance encoder width
        encoder_kernel (int): instance encoder kernel (odd)
        classifier_hidden (int): hidden width of the classifier
    """
    modalities: int
    features: int
    classes: int
    embed_dim: int = 16
    context_dim: int = 16
    hidden: int = 64
    blocks: int = 4
    kernel: int = 5
    time_dim: int = 32
    experts: int = 4
    top_k: int = 2
    encoder_hidden: int = 64
    encoder_kernel: int = 5
    classifier_hidden: int = 64

    def __post_init__(self):
        for name, value in asdict(self).items():
            if value < 1:
                raise ConfigError(f'{name} must be positive, got {value}')
        if self.kernel % 2 == 0 or self.encoder_kernel % 2 == 0:
            raise ConfigError('convolution kernels must have odd width')
        if self.time_dim % 2:
            raise ConfigError('time_dim must be even')
        if self.top_k > self.experts:
            raise ConfigError(f'top_k={self.top_k} exceeds experts='
                              f'{self.experts}')
        if self.classes < 2:
            raise ConfigError('need at least two classes')

    @property
    def fused_dim(self) -> int:
        """3DM, the classifier input width"""
        return 3 * self.embed_dim * self.modalities


def _dense(params: ParamMap, prefix: str, rng: np.random.Generator,
           fan_in: int, fan_out: int, weight: str = 'w', bias: str = 'b'):
    params[f'{prefix}.{weight}'] = glorot_uniform(rng, (fan_in, fan_out),
                                                  fan_in, fan_out)
    params[f'{prefix}.{bias}'] = np.zeros(fan_out)


def _conv(params: ParamMap, prefix: str, rng: np.random.Generator,
          kernel: int, c_in: int, c_out: int):
    params[f'{prefix}.w'] = glorot_uniform(rng, (kernel, c_in, c_out),
                                           kernel * c_in, kernel * c_out)
    params[f'{prefix}.b'] = np.zeros(c_out)


def init_params(dims: ModelDims, seed: int = 0) -> ParamMap:
    """Fresh parameters: Glorot-uniform weights, zero biases, unit layer-norm
    gains and N(0, 0.02^2) embeddings, drawn block by block from one seeded
    stream."""
    rng = np.random.default_rng(seed)
    params = ParamMap()
    features, hidden = dims.features, dims.hidden
    # observed-context encoder
    _dense(params, 'moe.gate', rng, 2 * features, dims.experts)
    for e in range(dims.experts):
        prefix = f'moe.expert.{e}'
        _dense(params, prefix, rng, 2 * features, hidden, 'w1', 'b1')
        _dense(params, prefix, rng, hidden, dims.context_dim, 'w2', 'b2')
    # denoiser
    width = 3 * features + dims.context_dim + dims.modalities * dims.embed_dim
    _dense(params, 'denoiser.in', rng, width, hidden)
    _dense(params, 'denoiser.time', rng, dims.time_dim, hidden)
    for j in range(dims.blocks):
        prefix = f'denoiser.block.{j}'
        params[f'{prefix}.norm.gamma'] = np.ones(hidden)
        params[f'{prefix}.norm.beta'] = np.zeros(hidden)
        _conv(params, f'{prefix}.conv1', rng, dims.kernel, hidden, hidden)
        _dense(params, f'{prefix}.time', rng, hidden, hidden)
        _conv(params, f'{prefix}.conv2', rng, dims.kernel, hidden, hidden)
    _dense(params, 'denoiser.out', rng, hidden, features)
    # instance encoder
    _conv(params, 'f_ins.conv', rng, dims.encoder_kernel, 2 * features,
          dims.encoder_hidden)
    for m in range(dims.modalities):
        _dense(params, f'f_ins.head.{m}', rng, dims.encoder_hidden,
               dims.embed_dim)
    # task head
    _dense(params, 'classifier.hidden', rng, dims.fused_dim,
           dims.classifier_hidden)
    _dense(params, 'classifier.out', rng, dims.classifier_hidden, dims.classes)
    init_embeddings(params, dims.modalities, dims.embed_dim, rng)
    LOGGER.debug('Initialized %s', params)
    return params


class ModelBundle:
    """Everything needed to run inference: dims, parameters and the number of
    completed federated rounds.

    Attributes:
        dims (ModelDims): block sizes
        params (ParamMap): trained (or initial) parameters
        rounds (int): completed communication rounds
    """

    def __init__(self, dims: ModelDims, params: ParamMap, rounds: int = 0):
        self.dims = dims
        self.params = params
        self.rounds = rounds

    def __repr__(self) -> str:
        return f'ModelBundle({self.dims}, {self.params}, rounds={self.rounds})'

    @classmethod
    def fresh(cls, dims: ModelDims, seed: int = 0) -> 'ModelBundle':
        return cls(dims, init_params(dims, seed), 0)

    def save(self, folder: Union[str, Path]):
        """Writes params.bin and bundle.toml into folder"""
        folder = Path(folder)
        folder.mkdir(parents=True, exist_ok=True)
        self.params.save(folder / BUNDLE_PARAMS)
        meta = {'rounds': self.rounds, 'dims': asdict(self.dims)}
        (folder / BUNDLE_META).write_text(tomli_w.dumps(meta))
        LOGGER.info('Saved model bundle (%d rounds) to %s', self.rounds, folder)

    @classmethod
    def load(cls, folder: Union[str, Path]) -> 'ModelBundle':
        folder = Path(folder)
        meta = tomllib.loads((folder / BUNDLE_META).read_text())
        dims = ModelDims(**meta['dims'])
        params = ParamMap.load(folder / BUNDLE_PARAMS)
        if params.schema() != init_params(dims).schema():
            raise ConfigError(f'{folder}: parameters do not match the '
                              f'recorded dims')
        return cls(dims, params, int(meta['rounds']))
