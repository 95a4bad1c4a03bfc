# -*- coding: utf-8 -*-

"""Federated multimodal classification under missing modalities: a
conditional diffusion imputer trained across clients, prompt-style modality
and condition embeddings, and the experiment driver around them."""

__version__ = '1.0'

from .autodiff import Adam, Graph, ParamMap
from .config import ExperimentConfig, load_config, loads_config
from .datafabric import FederatedPartition, MissingnessConfig, \
      MultimodalSample, apply_missingness, generate_synthetic, load_csv, \
      partition
from .diffusion import DiffusionSchedule, build_schedule, impute
from .embeddings import fuse, route_condition
from .errors import FedCondiError
from .evaluation import compute_metrics, feature_reconstruction_analysis
from .federation import fedavg, train_federated
from .model import ModelBundle, ModelDims
from .taskhead import predict

__authors__ = "FedCondi developers"
__license__ = "BSD-3-Clause"  # https://opensource.org/licenses/BSD-3-Clause
__status__ = "Prototype"
