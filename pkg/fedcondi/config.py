#!/usr/bin/env python
# -*- coding: utf-8 -*-
# @Filename:    config.py

"""Experiment configuration: TOML files parsed into frozen dataclasses.

    seed = 0
    output_dir = "runs/default"

    [data]            synthetic generator settings or a CSV path
    [data.schema]     CSV only: modality name -> list of column names
    [missingness]     p_s, p_w, mode
    [federation]      clients, participation, rounds, local optimization
    [model]           block sizes and diffusion hyperparameters
    [ablation]        no_imputation, no_cond

Every section is optional and falls back to the defaults below; unknown keys
and out-of-range values raise ConfigError.

Attributes:
    LOGGER (logging): The logger (from logging) to handle debugging
"""

from dataclasses import asdict, dataclass, field, fields, replace
from logging import getLogger
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Type, TypeVar, Union
# non-system, pip installs
import tomli_w
from .datafabric import MASK_MODES, MissingnessConfig
from .diffusion import DiffusionSchedule, build_schedule
from .errors import ConfigError
from .model import ModelDims

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

LOGGER = getLogger(__name__)

Section = TypeVar('Section')


def _check(condition: bool, message: str):
    if not condition:
        raise ConfigError(message)


@dataclass(frozen=True)
class DataConfig:
    """[data]: synthetic generator settings, or a CSV file plus schema"""
    source: str = 'synthetic'
    csv_path: Optional[str] = None
    schema: Dict[str, Tuple[str, ...]] = field(default_factory=dict)
    n_samples: int = 2000
    modalities: int = 3
    length: int = 24
    features: int = 2
    classes: int = 2
    noise: float = 0.1
    class_offset: float = 1.0
    test_fraction: float = 0.2
    normalize: bool = True

    def __post_init__(self):
        _check(self.source in ('synthetic', 'csv'),
               f'data.source must be "synthetic" or "csv", got {self.source!r}')
        object.__setattr__(self, 'schema', {
            str(name): tuple(columns) for name, columns in self.schema.items()})
        if self.source == 'csv':
            _check(self.csv_path is not None, 'data.csv_path is required for '
                                              'CSV data')
            _check(len(self.schema) >= 1 and all(self.schema.values()),
                   'data.schema must name the columns of every modality')
        _check(self.n_samples >= 2, 'data.n_samples must be at least 2')
        _check(self.modalities >= 2, 'data.modalities must be at least 2')
        _check(self.length >= 2, 'data.length must be at least 2')
        _check(self.features >= 1, 'data.features must be positive')
        _check(self.classes >= 2, 'data.classes must be at least 2')
        _check(self.noise >= 0, 'data.noise must be non-negative')
        _check(0 < self.test_fraction < 1,
               'data.test_fraction must lie in (0, 1)')


@dataclass(frozen=True)
class MissingnessSection:
    """[missingness]"""
    p_s: float = 0.2
    p_w: float = 0.2
    mode: str = 'cell'

    def __post_init__(self):
        _check(0 <= self.p_s <= 1, f'missingness.p_s={self.p_s} not in [0, 1]')
        _check(0 <= self.p_w <= 1, f'missingness.p_w={self.p_w} not in [0, 1]')
        _check(self.mode in MASK_MODES,
               f'missingness.mode must be one of {MASK_MODES}')


@dataclass(frozen=True)
class FederationConfig:
    """[federation]"""
    clients: int = 6
    participation: float = 0.5
    rounds: int = 70
    overlap_ratio: float = 0.0
    alpha: float = 0.5
    local_epochs: int = 1
    batch_size: int = 32
    lr: float = 1e-3
    workers: int = 1
    checkpoint_every: int = 10

    def __post_init__(self):
        _check(self.clients >= 1, 'federation.clients must be positive')
        _check(0 < self.participation <= 1,
               'federation.participation must lie in (0, 1]')
        _check(self.participation * self.clients >= 0.5,
               'federation.participation selects no client')
        _check(self.rounds >= 0, 'federation.rounds must be non-negative')
        _check(0 <= self.overlap_ratio <= 1,
               'federation.overlap_ratio must lie in [0, 1]')
        _check(self.alpha > 0, 'federation.alpha must be positive')
        _check(self.local_epochs >= 0,
               'federation.local_epochs must be non-negative')
        _check(self.batch_size >= 1, 'federation.batch_size must be positive')
        _check(self.lr > 0, 'federation.lr must be positive')
        _check(self.workers >= 0, 'federation.workers must be non-negative')
        _check(self.checkpoint_every >= 0,
               'federation.checkpoint_every must be non-negative')


@dataclass(frozen=True)
class ModelConfig:
    """[model]"""
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
    diffusion_steps: int = 50
    beta_min: float = 1e-4
    beta_max: float = 0.2
    mask_ratio_range: Tuple[float, float] = (0.1, 0.9)
    n_realizations: int = 1

    def __post_init__(self):
        bounds = self.mask_ratio_range
        _check(isinstance(bounds, (list, tuple)) and len(bounds) == 2
               and all(isinstance(v, (int, float))
                       and not isinstance(v, bool) for v in bounds),
               'model.mask_ratio_range must be two numbers [low, high]')
        object.__setattr__(self, 'mask_ratio_range',
                           tuple(float(v) for v in bounds))
        low, high = self.mask_ratio_range
        _check(0 <= low <= high <= 1,
               'model.mask_ratio_range must be [low, high] inside [0, 1]')
        for name in ('embed_dim', 'context_dim', 'hidden', 'blocks', 'kernel',
                     'time_dim', 'experts', 'top_k', 'encoder_hidden',
                     'encoder_kernel', 'classifier_hidden'):
            _check(getattr(self, name) >= 1, f'model.{name} must be positive')
        _check(self.kernel % 2 == 1 and self.encoder_kernel % 2 == 1,
               'model.kernel and model.encoder_kernel must be odd')
        _check(self.time_dim % 2 == 0, 'model.time_dim must be even')
        _check(self.diffusion_steps >= 1,
               'model.diffusion_steps must be positive')
        _check(0 < self.beta_min < self.beta_max < 1,
               'model needs 0 < beta_min < beta_max < 1')
        _check(self.n_realizations >= 1,
               'model.n_realizations must be positive')
        _check(1 <= self.top_k <= self.experts,
               'model.top_k must lie in [1, experts]')

    def dims(self, modalities: int, features: int, classes: int) -> ModelDims:
        return ModelDims(modalities=modalities, features=features,
                         classes=classes, embed_dim=self.embed_dim,
                         context_dim=self.context_dim, hidden=self.hidden,
                         blocks=self.blocks, kernel=self.kernel,
                         time_dim=self.time_dim, experts=self.experts,
                         top_k=self.top_k, encoder_hidden=self.encoder_hidden,
                         encoder_kernel=self.encoder_kernel,
                         classifier_hidden=self.classifier_hidden)

    def schedule(self) -> DiffusionSchedule:
        return build_schedule(self.diffusion_steps, self.beta_min,
                              self.beta_max)


@dataclass(frozen=True)
class AblationConfig:
    """[ablation]"""
    no_imputation: bool = False
    no_cond: bool = False

    @property
    def label(self) -> str:
        """'full', 'no_imputation', 'no_cond' or 'no_imputation+no_cond'"""
        flags = [name for name in ('no_imputation', 'no_cond')
                 if getattr(self, name)]
        return '+'.join(flags) if flags else 'full'


@dataclass(frozen=True)
class ExperimentConfig:
    """A whole experiment"""
    seed: int = 0
    output_dir: str = 'runs/default'
    data: DataConfig = field(default_factory=DataConfig)
    missingness: MissingnessSection = field(default_factory=MissingnessSection)
    federation: FederationConfig = field(default_factory=FederationConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)

    def __post_init__(self):
        _check(self.seed >= 0, 'seed must be non-negative')

    def missingness_config(self, seed: int = None) -> MissingnessConfig:
        return MissingnessConfig(self.missingness.p_s, self.missingness.p_w,
                                 self.seed if seed is None else seed,
                                 self.missingness.mode)

    def with_overrides(self, seed: int = None, output_dir: str = None,
                       p_s: float = None, p_w: float = None,
                       no_imputation: bool = None, no_cond: bool = None
                       ) -> 'ExperimentConfig':
        """Copy with the given values replaced (None keeps the current one)"""
        missingness = replace(
            self.missingness,
            p_s=self.missingness.p_s if p_s is None else p_s,
            p_w=self.missingness.p_w if p_w is None else p_w)
        ablation = replace(
            self.ablation,
            no_imputation=(self.ablation.no_imputation if no_imputation is None
                           else no_imputation),
            no_cond=self.ablation.no_cond if no_cond is None else no_cond)
        return replace(self, seed=self.seed if seed is None else seed,
                       output_dir=(self.output_dir if output_dir is None
                                   else str(output_dir)),
                       missingness=missingness, ablation=ablation)


SECTIONS = {'data': DataConfig, 'missingness': MissingnessSection,
            'federation': FederationConfig, 'model': ModelConfig,
            'ablation': AblationConfig}


def _build(cls: Type[Section], values: Dict[str, Any], where: str) -> Section:
    if not isinstance(values, dict):
        raise ConfigError(f'[{where}] must be a table')
    known = {item.name: item for item in fields(cls)}
    unknown = sorted(set(values) - set(known))
    if unknown:
        raise ConfigError(f'unknown key(s) in [{where}]: {", ".join(unknown)}')
    for name, value in values.items():
        expected = known[name].type
        if expected in ('int', int) and (isinstance(value, bool)
                                          or not isinstance(value, int)):
            raise ConfigError(f'{where}.{name} must be an integer')
        if expected in ('float', float) and (isinstance(value, bool) or
                                              not isinstance(value,
                                                             (int, float))):
            raise ConfigError(f'{where}.{name} must be a number')
        if expected in ('bool', bool) and not isinstance(value, bool):
            raise ConfigError(f'{where}.{name} must be true or false')
    converted = {name: float(value) if known[name].type in ('float', float)
                 else value for name, value in values.items()}
    return cls(**converted)


def loads_config(text: str) -> ExperimentConfig:
    """Parses TOML text.

    Raises:
        ConfigError: TOML syntax errors, unknown keys, bad values
    """
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as error:
        raise ConfigError(f'invalid TOML: {error}')
    top = {key: value for key, value in raw.items() if key not in SECTIONS}
    sections = {name: _build(cls, raw.get(name, {}), name)
                for name, cls in SECTIONS.items()}
    return _top_level(top, sections)


def _top_level(top: Dict[str, Any], sections: Dict[str, Any]
               ) -> ExperimentConfig:
    unknown = sorted(set(top) - {'seed', 'output_dir'})
    if unknown:
        raise ConfigError(f'unknown top-level key(s): {", ".join(unknown)}')
    if 'seed' in top and (isinstance(top['seed'], bool)
                          or not isinstance(top['seed'], int)):
        raise ConfigError('seed must be an integer')
    if 'output_dir' in top and not isinstance(top['output_dir'], str):
        raise ConfigError('output_dir must be a string')
    return ExperimentConfig(**top, **sections)


def load_config(path: Union[str, Path]) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding='utf-8')
    except OSError as error:
        raise ConfigError(f'cannot read config {path}: {error}')
    config = loads_config(text)
    LOGGER.debug('Loaded config from %s: %s', path, config)
    return config


def _strip_none(value: Any) -> Any:
    if isinstance(value, dict):
        return {key: _strip_none(item) for key, item in value.items()
                if item is not None}
    if isinstance(value, tuple):
        return [_strip_none(item) for item in value]
    return value


def dump_config(config: ExperimentConfig) -> str:
    """TOML text that loads_config turns back into an equal config"""
    return tomli_w.dumps(_strip_none(asdict(config)))
