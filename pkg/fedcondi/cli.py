#!/usr/bin/env python
# -*- coding: utf-8 -*-
# @Filename:    cli.py

"""Command line entry point and experiment orchestration.

    fedcondi run     --config exp.toml [--seed N] [--out DIR] [--ablate A,B]
    fedcondi grid    --config exp.toml --p-s 0.2,0.8 --p-w 0.2,0.8 [...]
    fedcondi analyze --config exp.toml [--checkpoint DIR_OR_BIN]

`analyze` writes its reports to <out>/analysis so the run's own metrics.json
is kept.

Exit codes: 0 success, 1 configuration error, 2 numeric or other runtime
error (a checkpoint of the last good round is written first).

Attributes:
    ABLATION_FLAGS (tuple): flags accepted by --ablate
    ENV_OUT (str): 'FEDCONDI_OUT', environment override of the output folder
    GRID_SEED_STRIDE (int): prime spacing of derived grid-cell seeds
    LOGGER (logging): The logger (from logging) to handle debugging
    LOG_FORMAT (str): format handed to logging.basicConfig
    SUMMARY_COLUMNS (list): header of the grid summary.csv
"""

from argparse import ArgumentParser, ArgumentTypeError, Namespace
from dataclasses import dataclass, field
from datetime import datetime
from itertools import combinations
from logging import basicConfig, getLogger, DEBUG, INFO
from os import environ
from pathlib import Path
from re import fullmatch
from sys import argv as system_argument_list
from typing import Dict, List, Optional, Sequence, Tuple, Union
# non-system, pip installs
import pandas as pd
from dateutil.relativedelta import relativedelta
from psutil import Process
from .autodiff import ParamMap
from .config import ExperimentConfig, dump_config, load_config
from .datafabric import MissingnessConfig, MultimodalSample, \
     apply_missingness, generate_synthetic, load_csv, normalize_features, \
     partition, train_test_split
from .errors import ConfigError, FedCondiError, NumericOverflowError
from .evaluation import FeatureDistanceRecord, MetricsSummary, \
     emit_reports, evaluate_bundle, feature_reconstruction_analysis, \
     improvement_fractions
from .federation import ClientRegistry, LocalSettings, ServerState, \
     train_federated
from .model import ModelBundle, ModelDims, init_params

ABLATION_FLAGS = ('no_imputation', 'no_cond')
ENV_OUT = 'FEDCONDI_OUT'
GRID_SEED_STRIDE = 7919
LOG_FORMAT = '%(asctime)s [%(levelname)s] %(name)s - %(message)s'
SUMMARY_COLUMNS = ['p_s', 'p_w', 'ablation', 'seed', 'accuracy', 'macro_f1',
                   'f1', 'auroc', 'frac_l2', 'frac_cos']

LOGGER = getLogger(__name__)


###############################################################################
#                               Experiment run                                #
###############################################################################

@dataclass
class ExperimentResult:
    """What one configuration produced.

    Attributes:
        config (ExperimentConfig): the configuration that ran
        bundle (ModelBundle): trained model
        summaries (dict): configuration name -> MetricsSummary
        records (list): FeatureDistanceRecords of the held-out split
    """
    config: ExperimentConfig
    bundle: ModelBundle
    summaries: Dict[str, MetricsSummary] = field(default_factory=dict)
    records: List[FeatureDistanceRecord] = field(default_factory=list)

    @property
    def headline(self) -> MetricsSummary:
        return self.summaries['test']


def build_dataset(config: ExperimentConfig
                  ) -> Tuple[List[MultimodalSample], List[MultimodalSample]]:
    """Loads or generates the data, masks it and splits it; returns
    (train, test). CSV features are z-scored with train-split statistics
    before masking."""
    data = config.data
    if data.source == 'csv':
        samples = load_csv(data.csv_path, list(data.schema.values()),
                           normalize=False, L_ts=data.length)
    else:
        samples = generate_synthetic(data.n_samples, data.modalities,
                                     data.length, data.features, data.classes,
                                     config.seed, data.noise,
                                     data.class_offset)
    train, _ = train_test_split(samples, data.test_fraction, config.seed)
    train_ids = {sample.id for sample in train}
    if data.source == 'csv' and data.normalize:
        normalize_features(samples, train_ids)
    samples = apply_missingness(samples, config.missingness_config())
    return ([sample for sample in samples if sample.id in train_ids],
            [sample for sample in samples if sample.id not in train_ids])


def model_dims(config: ExperimentConfig,
               samples: Sequence[MultimodalSample]) -> ModelDims:
    """Block sizes for the data at hand; classes grows to cover every label"""
    first = samples[0]
    classes = max(config.data.classes,
                  max(sample.label for sample in samples) + 1)
    return config.model.dims(first.num_modalities, sum(first.widths), classes)


def analysis_masking(config: ExperimentConfig) -> MissingnessConfig:
    """20 % of the time steps of one modality in every held-out sample"""
    return MissingnessConfig(p_s=1.0, p_w=0.2, seed=config.seed,
                             mode='timestep')


def run_experiment(config: ExperimentConfig, out_dir: Union[str, Path]
                   ) -> ExperimentResult:
    """Dataset -> missingness -> partition -> federated rounds -> held-out
    evaluation -> reports in out_dir"""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / 'config.toml').write_text(dump_config(config))
    train, test = build_dataset(config)
    fed = config.federation
    clients = ClientRegistry.from_partition(
        partition(train, fed.clients, fed.alpha, fed.overlap_ratio,
                  config.seed), train)
    dims = model_dims(config, train + test)
    schedule = config.model.schedule()
    settings = LocalSettings(dims, schedule, fed.lr, fed.local_epochs,
                             fed.batch_size, config.model.mask_ratio_range,
                             config.seed, fed.workers)
    server = ServerState(init_params(dims, config.seed), 0, config.seed)
    server, reports = train_federated(
        server, clients, settings, fed.rounds, fed.participation,
        config.ablation.no_imputation, config.ablation.no_cond, out_dir,
        fed.checkpoint_every)
    bundle = ModelBundle(dims, server.params, server.round)
    bundle.save(out_dir / 'model')
    ablation = config.ablation
    by_path = evaluate_bundle(bundle, test, schedule, ablation.no_imputation,
                              ablation.no_cond, config.model.n_realizations,
                              config.seed, settings.thread_count())
    headline = by_path['zero_fill' if ablation.no_imputation else 'imputed']
    headline.round_losses = [(r.mean_phase_a, r.mean_phase_b)
                             for r in reports]
    result = ExperimentResult(config, bundle)
    if not ablation.no_imputation and bundle.rounds:
        result.records = feature_reconstruction_analysis(
            test, bundle, schedule, analysis_masking(config),
            config.model.n_realizations, ablation.no_cond,
            settings.thread_count())
        headline.frac_l2, headline.frac_cos = \
            improvement_fractions(result.records)
    result.summaries = {'test': headline}
    result.summaries.update({f'test_{path}': summary
                             for path, summary in by_path.items()
                             if summary is not headline})
    emit_reports(result.summaries, result.records, out_dir)
    return result


def ablation_combos(flags: Sequence[str]) -> List[Tuple[str, ...]]:
    """() first, then every non-empty subset of flags in order"""
    flags = tuple(dict.fromkeys(flags))
    combos = [()]
    for size in range(1, len(flags) + 1):
        combos.extend(combinations(flags, size))
    return combos


def run_ablations(config: ExperimentConfig, out_dir: Union[str, Path],
                  flags: Sequence[str] = ()) -> List[ExperimentResult]:
    """The base configuration plus one run per ablation combination, each in
    its own sub-folder (named after AblationConfig.label) when flags are
    given"""
    if not flags:
        return [run_experiment(config, out_dir)]
    results = []
    for combo in ablation_combos(flags):
        variant = config.with_overrides(
            no_imputation=config.ablation.no_imputation
            or 'no_imputation' in combo,
            no_cond=config.ablation.no_cond or 'no_cond' in combo)
        LOGGER.info('Running ablation %s', variant.ablation.label)
        results.append(run_experiment(variant, Path(out_dir)
                                      / variant.ablation.label))
    return results


def grid_seed(base: int, i: int, j: int, columns: int) -> int:
    """Seed of grid cell (i, j); distinct for every cell of the grid"""
    return base + GRID_SEED_STRIDE * (i * columns + j + 1)


def run_grid(config: ExperimentConfig, p_s_values: Sequence[float],
             p_w_values: Sequence[float], out_dir: Union[str, Path],
             flags: Sequence[str] = ()) -> pd.DataFrame:
    """Every (p_s, p_w) cell with a derived seed, each in
    out_dir/ps<p_s>_pw<p_w>, plus summary.csv with one row per cell and
    ablation combination.

    Raises:
        ConfigError: an empty list
    """
    if not p_s_values or not p_w_values:
        raise ConfigError('grid needs at least one p_s and one p_w value')
    out_dir = Path(out_dir)
    rows = []
    for i, p_s in enumerate(p_s_values):
        for j, p_w in enumerate(p_w_values):
            seed = grid_seed(config.seed, i, j, len(p_w_values))
            cell = config.with_overrides(seed=seed, p_s=p_s, p_w=p_w)
            LOGGER.info('Grid cell p_s=%s p_w=%s (seed %d)', p_s, p_w, seed)
            for result in run_ablations(cell, out_dir / f'ps{p_s}_pw{p_w}',
                                        flags):
                summary = result.headline
                rows.append([p_s, p_w, result.config.ablation.label, seed,
                             summary.accuracy, summary.macro_f1, summary.f1,
                             summary.auroc, summary.frac_l2,
                             summary.frac_cos])
    table = pd.DataFrame(rows, columns=SUMMARY_COLUMNS)
    out_dir.mkdir(parents=True, exist_ok=True)
    table.to_csv(out_dir / 'summary.csv', index=False, float_format='%.17g')
    LOGGER.info('Grid summary with %d rows written to %s', len(table),
                out_dir / 'summary.csv')
    return table


def analyze(config: ExperimentConfig, checkpoint: Union[str, Path],
            out_dir: Union[str, Path]) -> List[FeatureDistanceRecord]:
    """Feature reconstruction only, from a saved bundle folder or a
    ckpt/round_<t>.bin file"""
    checkpoint = Path(checkpoint)
    if not checkpoint.exists():
        raise ConfigError(f'no checkpoint at {checkpoint}')
    train, test = build_dataset(config)
    if checkpoint.is_dir():
        bundle = ModelBundle.load(checkpoint)
    else:
        found = fullmatch(r'round_(\d+)', checkpoint.stem)
        if found is None:
            raise ConfigError(f'{checkpoint} is neither a bundle folder nor a '
                              f'round_<t>.bin checkpoint')
        dims = model_dims(config, train + test)
        params = ParamMap.load(checkpoint)
        if params.schema() != init_params(dims).schema():
            raise ConfigError(f'{checkpoint} does not match the configured '
                              f'model sizes')
        bundle = ModelBundle(dims, params, int(found.group(1)))
    records = feature_reconstruction_analysis(
        test, bundle, config.model.schedule(),
        analysis_masking(config),
        config.model.n_realizations, config.ablation.no_cond)
    frac_l2, frac_cos = improvement_fractions(records)
    summary = MetricsSummary(accuracy=None, macro_f1=None,
                             frac_l2=frac_l2, frac_cos=frac_cos)
    emit_reports({'analysis': summary}, records, out_dir)
    return records


###############################################################################
#                             Argument handling                               #
###############################################################################

def valid_ratio(string: str) -> float:
    """argparse type checking/conversion for ratios in [0, 1]

    Raises:
        ArgumentTypeError: not a number in [0, 1]
    """
    try:
        value = float(string)
    except ValueError:
        raise ArgumentTypeError(f'{string} is not a number')
    if not 0.0 <= value <= 1.0:
        raise ArgumentTypeError(f'{string} is not in [0, 1]')
    return value


def valid_ratio_list(string: str) -> List[float]:
    """Comma separated ratios, e.g. '0.2,0.8'"""
    parts = [part.strip() for part in string.split(',') if part.strip()]
    if not parts:
        raise ArgumentTypeError('expected at least one ratio')
    return [valid_ratio(part) for part in parts]


def valid_ablations(string: str) -> Tuple[str, ...]:
    """Comma separated ablation flags"""
    flags = tuple(part.strip() for part in string.split(',') if part.strip())
    unknown = [flag for flag in flags if flag not in ABLATION_FLAGS]
    if unknown or not flags:
        raise ArgumentTypeError(f'unknown ablation(s) {unknown}, expected '
                                f'names from {ABLATION_FLAGS}')
    return flags


def valid_seed(string: str) -> int:
    try:
        seed = int(string)
    except ValueError:
        raise ArgumentTypeError(f'{string} is not an integer seed')
    if seed < 0:
        raise ArgumentTypeError(f'{seed} is negative')
    return seed


def build_parser() -> ArgumentParser:
    parser = ArgumentParser(prog='fedcondi',
                            description='Federated conditional-diffusion '
                                        'imputation experiments.')
    commands = parser.add_subparsers(dest='command', required=True)
    for name, text in (('run', 'run one experiment'),
                       ('grid', 'run a (p_s, p_w) grid'),
                       ('analyze', 'feature reconstruction from a '
                                   'checkpoint')):
        command = commands.add_parser(name, help=text)
        command.add_argument('-c', '--config', type=Path, required=True,
                             help='experiment TOML file')
        command.add_argument('-s', '--seed', type=valid_seed,
                             help='override the configured seed')
        command.add_argument('-o', '--out', type=Path,
                             help=f'output folder (beats ${ENV_OUT} and the '
                                  f'config)')
        command.add_argument('-d', '--debug', action='store_true',
                             help='whether or not to log debug messages')
        if name in ('run', 'grid'):
            command.add_argument('-a', '--ablate', type=valid_ablations,
                                 default=(), help='comma separated ablations '
                                 f'out of {",".join(ABLATION_FLAGS)}')
        if name == 'grid':
            command.add_argument('--p-s', type=valid_ratio_list, required=True,
                                 help='comma separated p_s values')
            command.add_argument('--p-w', type=valid_ratio_list, required=True,
                                 help='comma separated p_w values')
        if name == 'analyze':
            command.add_argument('--checkpoint', type=Path,
                                 help='bundle folder or ckpt/round_<t>.bin, '
                                      'defaults to <out>/model')
    return parser


def resolve_config(args: Namespace) -> ExperimentConfig:
    """Config file plus --seed and the output folder precedence
    --out > $FEDCONDI_OUT > output_dir"""
    config = load_config(args.config)
    out = args.out if args.out is not None else environ.get(ENV_OUT)
    return config.with_overrides(seed=args.seed, output_dir=out)


###############################################################################
#                                   Main                                      #
###############################################################################

class Session:
    """One CLI invocation: logging setup, dispatch and uptime reporting.

    Attributes:
        debug (bool): DEBUG instead of INFO on the package loggers
        starttime (datetime): when the session started
    """

    def __init__(self, debug: bool = False):
        self.debug = debug
        self.starttime = datetime.now()
        basicConfig(format=LOG_FORMAT, level=DEBUG if debug else INFO)
        getLogger('fedcondi').setLevel(DEBUG if debug else INFO)

    def uptime(self) -> str:
        """Time since start as '(years months days hours minutes seconds)'"""
        time_list = ['years', 'months', 'days', 'hours', 'minutes', 'seconds']
        diff = relativedelta(datetime.now(), self.starttime)
        time_diffs = [getattr(diff, time_period) for time_period in time_list]
        return f'({" ".join(map(str, time_diffs))})'

    def dispatch(self, args: Namespace) -> int:
        config = resolve_config(args)
        out_dir = Path(config.output_dir)
        if args.command == 'run':
            run_ablations(config, out_dir, args.ablate)
        elif args.command == 'grid':
            run_grid(config, args.p_s, args.p_w, out_dir, args.ablate)
        else:
            analyze(config, args.checkpoint or out_dir / 'model',
                    out_dir / 'analysis')
        return 0

    def __call__(self, args: Namespace) -> int:
        try:
            return self.dispatch(args)
        except ConfigError as error:
            LOGGER.error('Configuration error: %s', error)
            return 1
        except NumericOverflowError as error:
            LOGGER.error('Numeric failure, last good round checkpointed: %s',
                         error)
            return 2
        except FedCondiError as error:
            LOGGER.error('%s: %s', type(error).__name__, error)
            return 2
        except OSError as error:
            LOGGER.error('Could not read or write %s: %s', error.filename,
                         error.strerror or error)
            return 2
        finally:
            LOGGER.info('Finished %s after %s', args.command, self.uptime())
            LOGGER.debug('Peak resident memory %.1f MiB',
                         Process().memory_info().rss / 2 ** 20)


def main(argv: Optional[List[str]] = None) -> int:
    """Console entry point; argv excludes the program name"""
    if argv is None:
        argv = system_argument_list[1:]
    args = build_parser().parse_args(argv)
    return Session(args.debug)(args)
