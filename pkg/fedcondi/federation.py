#!/usr/bin/env python
# -*- coding: utf-8 -*-
# @Filename:    federation.py

"""In-process federated training. Every round the server samples clients,
broadcasts a copy of the global ParamMap, lets each selected client run
Phase A (diffusion) then Phase B (classification) on its local data, and
replaces the global parameters by the FedAvg of the uploads.

Clients of a round may run on a thread pool. Each one works on its own
ParamMap copy with its own random stream seeded by (seed, round, client id),
and aggregation sums in client-id order, so a round gives bit-identical
results whatever the number of workers.

Attributes:
    CHECKPOINT_DIR (str): sub-folder of the output directory for checkpoints
    LOGGER (logging): The logger (from logging) to handle debugging
    REPORTS_FILE (str): round report log, relative to the output directory
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from json import dumps
from logging import getLogger
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union
# non-system, pip installs
import numpy as np
from psutil import cpu_count
from .autodiff import Adam, Graph, ParamMap
from .datafabric import FederatedPartition, MultimodalSample
from .diffusion import DiffusionSchedule, diffusion_loss
from .errors import ConfigError, NumericOverflowError, ProtocolError
from .model import ModelDims
from .taskhead import phase_b_step

CHECKPOINT_DIR = 'ckpt'
REPORTS_FILE = 'reports/rounds.jsonl'

LOGGER = getLogger(__name__)


###############################################################################
#                                   State                                     #
###############################################################################

@dataclass
class ClientState:
    """One client.

    Attributes:
        id (int): client id k
        samples (list): local MultimodalSamples
        params (ParamMap): local copy, set on broadcast
    """
    id: int
    samples: List[MultimodalSample]
    params: Optional[ParamMap] = None

    def __post_init__(self):
        if not self.samples:
            raise ConfigError(f'client {self.id} has no samples')

    @property
    def n_samples(self) -> int:
        return len(self.samples)


class ClientRegistry(dict):
    """Extension of dict mapping client id -> ClientState"""

    @classmethod
    def from_partition(cls, partition: FederatedPartition,
                       dataset: Sequence[MultimodalSample]
                       ) -> 'ClientRegistry':
        registry = cls()
        for k in sorted(partition.assignments):
            registry.add_client(k, partition.select(k, dataset))
        return registry

    def add_client(self, client_id: int, samples: List[MultimodalSample]):
        """Registers a new client

        Args:
            client_id (int): id k, must be new
            samples (List[MultimodalSample]): local dataset
        """
        if client_id in self:
            raise ValueError(f'client {client_id} already registered')
        self[client_id] = ClientState(client_id, samples)

    def broadcast(self, params: ParamMap, client_ids: Sequence[int]):
        """Gives each listed client a private copy of params"""
        for client_id in client_ids:
            self[client_id].params = params.copy()

    def sizes(self) -> Dict[int, int]:
        return {k: self[k].n_samples for k in sorted(self)}


@dataclass
class ServerState:
    """Global parameters and round counter.

    Attributes:
        params (ParamMap): global parameters (Θ and the prompt embeddings)
        round (int): completed rounds
        seed (int): seed of the client-sampling streams
    """
    params: ParamMap
    round: int = 0
    seed: int = 0

    @property
    def schema(self):
        return self.params.schema()


@dataclass(frozen=True)
class RoundPlan:
    """What one round does.

    Attributes:
        selected (tuple): participating client ids
        run_phase_a (bool): train the diffusion imputer
        run_phase_b (bool): train encoder, embeddings and classifier
        no_imputation (bool): ablation, inference skips imputation
        no_cond (bool): ablation, routed conditions replaced by zeros
    """
    selected: Tuple[int, ...]
    run_phase_a: bool = True
    run_phase_b: bool = True
    no_imputation: bool = False
    no_cond: bool = False

    def __post_init__(self):
        if not self.selected:
            raise ConfigError('a round needs at least one selected client')
        object.__setattr__(self, 'selected', tuple(sorted(self.selected)))


@dataclass(frozen=True)
class LocalSettings:
    """Local optimization settings shared by all clients.

    Attributes:
        dims (ModelDims): block sizes
        schedule (DiffusionSchedule): diffusion schedule
        lr (float): Adam learning rate of both phases
        local_epochs (int): passes over the local data per phase and round
        batch_size (int): samples per optimizer step
        mask_ratio_range (tuple): self-mask ratio range of Phase A
        seed (int): base seed of the client training streams
        workers (int): client threads, 0 for one per physical core
    """
    dims: ModelDims
    schedule: DiffusionSchedule
    lr: float = 1e-3
    local_epochs: int = 1
    batch_size: int = 32
    mask_ratio_range: Tuple[float, float] = (0.1, 0.9)
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError(f'learning rate must be positive, got {self.lr}')
        if self.local_epochs < 0 or self.batch_size < 1 or self.workers < 0:
            raise ConfigError('local_epochs >= 0, batch_size >= 1 and '
                              'workers >= 0 required')

    def thread_count(self) -> int:
        if self.workers == 0:
            return cpu_count(logical=False) or 1
        return self.workers


@dataclass
class Upload:
    """What a client sends back: its local ParamMap (None if training blew
    up) and n_k."""
    client_id: int
    params: Optional[ParamMap]
    n_samples: int
    phase_a_loss: Optional[float] = None
    phase_b_loss: Optional[float] = None

    @property
    def usable(self) -> bool:
        return self.params is not None and self.params.is_finite()


@dataclass
class RoundReport:
    """Per-round log record, one JSON line in reports/rounds.jsonl.

    Attributes:
        round (int): 1-based round number
        selected (list): participating client ids
        excluded (list): clients dropped from aggregation (non-finite upload)
        n_samples (dict): client id -> n_k
        phase_a_loss (dict): client id -> mean diffusion loss, None if no step
        phase_b_loss (dict): client id -> mean classification loss
        mean_phase_a (float): mean over clients with a Phase A loss
        mean_phase_b (float): mean over clients with a Phase B loss
    """
    round: int
    selected: List[int]
    excluded: List[int] = field(default_factory=list)
    n_samples: Dict[int, int] = field(default_factory=dict)
    phase_a_loss: Dict[int, Optional[float]] = field(default_factory=dict)
    phase_b_loss: Dict[int, Optional[float]] = field(default_factory=dict)
    mean_phase_a: Optional[float] = None
    mean_phase_b: Optional[float] = None

    def to_json(self) -> str:
        record = asdict(self)
        for key in ('n_samples', 'phase_a_loss', 'phase_b_loss'):
            record[key] = {str(k): v for k, v in record[key].items()}
        return dumps(record, sort_keys=True)


###############################################################################
#                                Aggregation                                  #
###############################################################################

def aggregation_weights(uploads: Sequence[Upload]) -> List[float]:
    """n_k / Σ n_i over the given uploads"""
    total = sum(upload.n_samples for upload in uploads)
    return [upload.n_samples / total for upload in uploads]


def fedavg(uploads: Sequence[Upload]) -> ParamMap:
    """Sample-count weighted average of the uploads.

    Uploads are sorted by client id and combined as
    W_1 + Σ_k w_k (W_k - W_1), which equals Σ_k w_k W_k and returns W_1 bit
    for bit when all uploads agree. Non-finite uploads are dropped with a
    warning and the weights renormalized over the rest.

    Raises:
        ProtocolError: no uploads, duplicate client ids or differing schemas
        NumericOverflowError: every upload is non-finite
    """
    if not uploads:
        raise ProtocolError('fedavg needs at least one upload')
    ordered = sorted(uploads, key=lambda upload: upload.client_id)
    ids = [upload.client_id for upload in ordered]
    if len(set(ids)) != len(ids):
        raise ProtocolError(f'duplicate client ids in uploads: {ids}')
    usable = [upload for upload in ordered if upload.usable]
    for upload in ordered:
        if not upload.usable:
            LOGGER.warning('Excluding client %d from aggregation: non-finite '
                           'parameters', upload.client_id)
    if not usable:
        raise NumericOverflowError('every upload is non-finite')
    schema = usable[0].params.schema()
    for upload in usable[1:]:
        if upload.params.schema() != schema:
            raise ProtocolError(f'client {upload.client_id} uploaded a '
                                f'different parameter schema')
    weights = aggregation_weights(usable)
    base = usable[0].params
    result = ParamMap()
    for name in base.names():
        total = base[name]
        for upload, weight in zip(usable, weights):
            total = total + weight * (upload.params[name] - base[name])
        result[name] = total
    return result


def sample_clients(K: int, participation: float, seed: int,
                   round_index: int) -> Tuple[int, ...]:
    """floor(participation * K + 0.5) distinct clients drawn uniformly from
    the stream seeded by (seed, round_index)

    Raises:
        ConfigError: participation outside (0, 1] or an empty selection
    """
    if not 0.0 < participation <= 1.0:
        raise ConfigError(f'participation must lie in (0, 1], got '
                          f'{participation}')
    size = int(np.floor(participation * K + 0.5))
    if size < 1:
        raise ConfigError(f'participation {participation} selects no client '
                          f'out of {K}')
    rng = np.random.default_rng([seed, round_index])
    return tuple(sorted(int(k) for k in rng.choice(K, size=size,
                                                   replace=False)))


###############################################################################
#                              Local training                                 #
###############################################################################

def _batches(rng: np.random.Generator, samples: List[MultimodalSample],
             size: int) -> List[List[MultimodalSample]]:
    order = rng.permutation(len(samples))
    return [[samples[i] for i in order[start:start + size]]
            for start in range(0, len(order), size)]


def local_update(client: ClientState, plan: RoundPlan,
                 settings: LocalSettings, round_index: int) -> Upload:
    """Two-phase local training on the client's broadcast copy. A client
    whose training overflows uploads nothing usable."""
    params = client.params
    params.zero_grad()
    rng = np.random.default_rng([settings.seed, round_index, client.id])
    phase_a, phase_b = [], []
    try:
        if plan.run_phase_a:
            optimizer = Adam(settings.lr)
            for _ in range(settings.local_epochs):
                for batch in _batches(rng, client.samples,
                                      settings.batch_size):
                    graph = Graph(params)
                    loss = diffusion_loss(graph, batch, settings.schedule,
                                          settings.dims, rng,
                                          settings.mask_ratio_range,
                                          plan.no_cond)
                    if loss is None:
                        continue
                    graph.backward(loss)
                    optimizer.step(params)
                    phase_a.append(float(loss.value))
        if plan.run_phase_b:
            optimizer = Adam(settings.lr)
            for _ in range(settings.local_epochs):
                for batch in _batches(rng, client.samples,
                                      settings.batch_size):
                    phase_b.append(phase_b_step(params, batch, settings.dims,
                                                plan.no_cond))
                    optimizer.step(params)
    except NumericOverflowError as error:
        LOGGER.warning('Client %d diverged in round %d: %s', client.id,
                       round_index, error)
        return Upload(client.id, None, client.n_samples)
    LOGGER.debug('Client %d finished round %d: %d Phase A and %d Phase B '
                 'steps', client.id, round_index, len(phase_a), len(phase_b))
    return Upload(client.id, params, client.n_samples,
                  float(np.mean(phase_a)) if phase_a else None,
                  float(np.mean(phase_b)) if phase_b else None)


def _mean(values: Sequence[Optional[float]]) -> Optional[float]:
    present = [value for value in values if value is not None]
    return float(np.mean(present)) if present else None


def run_round(server: ServerState, clients: ClientRegistry, plan: RoundPlan,
              settings: LocalSettings) -> Tuple[ServerState, RoundReport]:
    """Broadcast, local two-phase training, upload and FedAvg.

    Args:
        server (ServerState): current global state
        clients (ClientRegistry): every client; only plan.selected train
        plan (RoundPlan): selection and phase / ablation switches
        settings (LocalSettings): local optimization settings

    Returns:
        Tuple[ServerState, RoundReport]: next global state and the round log

    Raises:
        ProtocolError: unknown client or a client whose parameters have
            another schema
    """
    round_index = server.round + 1
    for client_id in plan.selected:
        if client_id not in clients:
            raise ProtocolError(f'client {client_id} is not registered')
        local = clients[client_id].params
        if local is not None and local.schema() != server.schema:
            raise ProtocolError(f'client {client_id} schema diverged from '
                                f'the server')
    LOGGER.info('Round %d: clients %s', round_index, list(plan.selected))
    clients.broadcast(server.params, plan.selected)
    selected = [clients[client_id] for client_id in plan.selected]
    workers = min(settings.thread_count(), len(selected))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            uploads = list(executor.map(
                lambda client: local_update(client, plan, settings,
                                            round_index), selected))
    else:
        uploads = [local_update(client, plan, settings, round_index)
                   for client in selected]
    params = fedavg(uploads)
    report = RoundReport(
        round=round_index, selected=list(plan.selected),
        excluded=[u.client_id for u in uploads if not u.usable],
        n_samples={u.client_id: u.n_samples for u in uploads},
        phase_a_loss={u.client_id: u.phase_a_loss for u in uploads},
        phase_b_loss={u.client_id: u.phase_b_loss for u in uploads},
        mean_phase_a=_mean([u.phase_a_loss for u in uploads]),
        mean_phase_b=_mean([u.phase_b_loss for u in uploads]))
    LOGGER.info('Round %d aggregated: Phase A loss %s, Phase B loss %s',
                round_index, report.mean_phase_a, report.mean_phase_b)
    return replace(server, params=params, round=round_index), report


###############################################################################
#                               Run persistence                               #
###############################################################################

def checkpoint_path(out_dir: Union[str, Path], round_index: int) -> Path:
    return Path(out_dir) / CHECKPOINT_DIR / f'round_{round_index}.bin'


def write_checkpoint(params: ParamMap, out_dir: Union[str, Path],
                     round_index: int) -> Path:
    path = checkpoint_path(out_dir, round_index)
    params.save(path)
    LOGGER.info('Checkpoint written to %s', path)
    return path


def append_report(report: RoundReport, out_dir: Union[str, Path]) -> Path:
    path = Path(out_dir) / REPORTS_FILE
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open('a', encoding='utf-8') as stream:
        stream.write(report.to_json() + '\n')
    return path


def train_federated(server: ServerState, clients: ClientRegistry,
                    settings: LocalSettings, rounds: int,
                    participation: float, no_imputation: bool = False,
                    no_cond: bool = False, out_dir: Union[str, Path] = None,
                    checkpoint_every: int = 0
                    ) -> Tuple[ServerState, List[RoundReport]]:
    """Runs `rounds` rounds on top of server. Phase A is skipped under
    no_imputation since nothing would consume the imputer.

    When out_dir is given every report is appended to reports/rounds.jsonl
    (started afresh when training begins at round 0) and the global parameters are checkpointed every checkpoint_every rounds
    and after the last one. A round that fails numerically leaves a
    checkpoint of the last good global state before the error propagates.
    """
    reports = []
    if out_dir is not None and server.round == 0:
        fresh = Path(out_dir) / REPORTS_FILE
        if fresh.exists():
            LOGGER.info('Replacing round reports in %s', fresh)
            fresh.unlink()
    K = len(clients)
    client_ids = sorted(clients)
    for _ in range(rounds):
        positions = sample_clients(K, participation, server.seed,
                                   server.round + 1)
        plan = RoundPlan(tuple(client_ids[p] for p in positions),
                         run_phase_a=not no_imputation,
                         no_imputation=no_imputation, no_cond=no_cond)
        try:
            server, report = run_round(server, clients, plan, settings)
        except NumericOverflowError:
            if out_dir is not None:
                write_checkpoint(server.params, out_dir, server.round)
            raise
        reports.append(report)
        if out_dir is None:
            continue
        append_report(report, out_dir)
        if checkpoint_every and server.round % checkpoint_every == 0:
            write_checkpoint(server.params, out_dir, server.round)
    if out_dir is not None and rounds and not (
            checkpoint_every and server.round % checkpoint_every == 0):
        write_checkpoint(server.params, out_dir, server.round)
    return server, reports
