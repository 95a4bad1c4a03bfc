#!/usr/bin/env python
# -*- coding: utf-8 -*-
# @Filename:    diffusion.py

"""Phase A: conditional denoising diffusion over the unobserved cells.

A sample enters as its stacked L_ts x ΣL_f values x with observation mask R.
Training hides a random part of the observed cells (make_self_mask), noises
everything outside the conditioning cells (q_sample) and regresses the noise
with ε_θ on the hidden cells only (diffusion_loss). ε_θ is a residual 1-D
convolution network conditioned on

    c = [c_O | c_cond]

where c_O is the per-time-step output of a top-k mixture of experts over the
conditioning values and c_cond is the routed W_cond of the sample repeated
along time. Imputation (impute) runs the reverse chain from pure noise with
the observed cells clamped at every step.

Attributes:
    LOGGER (logging): The logger (from logging) to handle debugging
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from logging import getLogger
from typing import List, Optional, Sequence, Tuple, Union
# non-system, pip installs
import numpy as np
from .autodiff import Graph, ParamMap, Var
from .datafabric import MultimodalSample
from .embeddings import condition_batch
from .errors import ConfigError, NumericOverflowError, ShapeError, \
     UnsatisfiableMaskError
from .model import ModelDims

LOGGER = getLogger(__name__)

Seed = Union[int, np.random.Generator, np.random.SeedSequence]


###############################################################################
#                                  Schedule                                   #
###############################################################################

@dataclass(frozen=True)
class DiffusionSchedule:
    """β_1..β_T with derived α_t and ᾱ_t. Arrays are indexed by t, so index 0
    of alphas and betas is unused and alpha_bars[0] = 1.

    Attributes:
        betas (ndarray): length T + 1, betas[t] = β_t
        alphas (ndarray): length T + 1, 1 - β_t
        alpha_bars (ndarray): length T + 1, cumulative products of alphas
    """
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    @classmethod
    def from_betas(cls, betas: Sequence[float]) -> 'DiffusionSchedule':
        betas = np.asarray(betas, dtype=np.float64)
        if betas.ndim != 1 or betas.size < 1:
            raise ConfigError('a schedule needs at least one step')
        if not np.all((betas > 0) & (betas < 1)) or np.any(np.diff(betas) <= 0):
            raise ConfigError('betas must be strictly increasing inside (0, 1)')
        padded = np.concatenate([[0.0], betas])
        alphas = 1.0 - padded
        return cls(padded, alphas, np.cumprod(alphas))

    @property
    def steps(self) -> int:
        """T_diff"""
        return self.betas.size - 1

    def posterior_variance(self, t: int) -> float:
        """β̃_t = (1 - ᾱ_{t-1}) / (1 - ᾱ_t) β_t"""
        return float((1.0 - self.alpha_bars[t - 1])
                     / (1.0 - self.alpha_bars[t]) * self.betas[t])


def build_schedule(T_diff: int = 50, beta_min: float = 1e-4,
                   beta_max: float = 0.2) -> DiffusionSchedule:
    """Linear β schedule from beta_min to beta_max over T_diff steps (a
    single step uses beta_min).

    Raises:
        ConfigError: T_diff < 1 or not 0 < beta_min < beta_max < 1
    """
    if T_diff < 1:
        raise ConfigError(f'T_diff must be at least 1, got {T_diff}')
    if not 0.0 < beta_min < beta_max < 1.0:
        raise ConfigError(f'need 0 < beta_min < beta_max < 1, got '
                          f'{beta_min}, {beta_max}')
    return DiffusionSchedule.from_betas(np.linspace(beta_min, beta_max,
                                                    T_diff))


def q_sample(z_0: np.ndarray, t: Union[int, np.ndarray], eps: np.ndarray,
             sched: DiffusionSchedule, noise_mask: np.ndarray = None
             ) -> np.ndarray:
    """z_t = sqrt(ᾱ_t) z_0 + sqrt(1 - ᾱ_t) ε.

    Args:
        z_0 (np.ndarray): clean values
        t (Union[int, np.ndarray]): step in 0..T, or one step per leading
            (batch) entry of z_0
        eps (np.ndarray): noise, shaped like z_0
        sched (DiffusionSchedule): schedule
        noise_mask (np.ndarray, optional): cells to noise; the others keep
            z_0 unchanged

    Raises:
        ConfigError: t outside 0..T
        ShapeError: eps or noise_mask shape differs from z_0
    """
    z_0 = np.asarray(z_0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != z_0.shape:
        raise ShapeError(f'q_sample: noise {eps.shape} vs data {z_0.shape}')
    t = np.asarray(t)
    if np.any(t < 0) or np.any(t > sched.steps):
        raise ConfigError(f'diffusion step {t} outside 0..{sched.steps}')
    alpha_bar = sched.alpha_bars[t].reshape(t.shape + (1,) * (z_0.ndim - t.ndim))
    z_t = np.sqrt(alpha_bar) * z_0 + np.sqrt(1.0 - alpha_bar) * eps
    if noise_mask is None:
        return z_t
    if np.shape(noise_mask) != z_0.shape:
        raise ShapeError(f'q_sample: mask {np.shape(noise_mask)} vs data '
                         f'{z_0.shape}')
    return np.where(np.asarray(noise_mask) > 0, z_t, z_0)


def p_sample_step(z_t: np.ndarray, t: int, eps_pred: np.ndarray,
                  sched: DiffusionSchedule, noise: np.ndarray = None
                  ) -> np.ndarray:
    """One reverse transition z_t -> z_{t-1}: the ε-parameterized posterior
    mean plus sqrt(β̃_t) noise (no noise on the last step, t = 1)."""
    mean = (z_t - sched.betas[t] / np.sqrt(1.0 - sched.alpha_bars[t])
            * eps_pred) / np.sqrt(sched.alphas[t])
    if t > 1 and noise is not None:
        return mean + np.sqrt(sched.posterior_variance(t)) * noise
    return mean


###############################################################################
#                           Self-supervised masking                           #
###############################################################################

@dataclass(frozen=True)
class SelfMaskPlan:
    """Split of the observed cells into pseudo-targets and conditioning"""
    target_mask: np.ndarray
    conditioning_mask: np.ndarray

    def __post_init__(self):
        assert not np.any((self.target_mask > 0)
                          & (self.conditioning_mask > 0))


def make_self_mask(R_observed: np.ndarray,
                   ratio_range: Tuple[float, float] = (0.1, 0.9),
                   seed: Seed = None) -> SelfMaskPlan:
    """Hides floor(u * n + 0.5) of the n observed cells, u drawn uniformly
    from ratio_range; the count is kept within [1, n - 1] so neither side is
    empty.

    Raises:
        ConfigError: ratio_range not inside [0, 1] or reversed
        UnsatisfiableMaskError: fewer than 2 observed cells
    """
    low, high = ratio_range
    if not 0.0 <= low <= high <= 1.0:
        raise ConfigError(f'invalid mask ratio range {ratio_range}')
    observed = np.asarray(R_observed) > 0
    cells = np.flatnonzero(observed)
    if cells.size < 2:
        raise UnsatisfiableMaskError(f'{cells.size} observed cells, need 2 '
                                     f'for self-supervised masking')
    rng = np.random.default_rng(seed)
    ratio = rng.uniform(low, high)
    count = min(max(int(np.floor(ratio * cells.size + 0.5)), 1),
                cells.size - 1)
    target = np.zeros(observed.size)
    target[rng.choice(cells, size=count, replace=False)] = 1.0
    target = target.reshape(observed.shape)
    return SelfMaskPlan(target, observed.astype(np.float64) - target)


###############################################################################
#                          Context encoder and ε_θ                            #
###############################################################################

def _const(graph: Graph, value: Union[Var, np.ndarray]) -> Var:
    return value if isinstance(value, Var) else graph.constant(value)


def encode_observed_context(graph: Graph, x_obs: np.ndarray,
                            cond_mask: np.ndarray, top_k: int = 2) -> Var:
    """Top-k mixture of experts applied to every time step.

    Each step's input [x ⊙ mask | mask] (2ΣL_f wide) is scored by the gate;
    the top_k logits are renormalized with a softmax, the rest get weight 0.
    Experts nobody selected are not evaluated at all.

    Args:
        graph (Graph): graph bound to the ParamMap holding moe.*
        x_obs (np.ndarray): values, B x L x F
        cond_mask (np.ndarray): conditioning mask, B x L x F
        top_k (int, optional): experts mixed per step

    Returns:
        Var: c_O, B x L x context_dim
    """
    x_obs = np.asarray(x_obs, dtype=np.float64)
    cond_mask = np.asarray(cond_mask, dtype=np.float64)
    if x_obs.shape != cond_mask.shape or x_obs.ndim != 3:
        raise ShapeError(f'encode_observed_context: values {x_obs.shape} vs '
                         f'mask {cond_mask.shape}')
    inputs = graph.constant(np.concatenate([x_obs * cond_mask, cond_mask],
                                           axis=2))
    logits = graph.linear(inputs, graph.param('moe.gate.w'),
                          graph.param('moe.gate.b'))
    experts = logits.shape[-1]
    top_k = min(top_k, experts)
    ranked = np.argsort(-logits.value, axis=-1, kind='stable')[..., :top_k]
    keep = np.zeros(logits.shape, dtype=bool)
    np.put_along_axis(keep, ranked, True, axis=-1)
    gates = graph.masked_softmax(logits, keep)
    context = None
    for e in range(experts):
        if not keep[..., e].any():
            continue
        prefix = f'moe.expert.{e}'
        hidden = graph.silu(graph.linear(inputs, graph.param(f'{prefix}.w1'),
                                         graph.param(f'{prefix}.b1')))
        output = graph.linear(hidden, graph.param(f'{prefix}.w2'),
                              graph.param(f'{prefix}.b2'))
        weighted = graph.mul(graph.index(gates, (Ellipsis, slice(e, e + 1))),
                             output)
        context = weighted if context is None else graph.add(context, weighted)
    return context


def timestep_embedding(t: np.ndarray, dim: int) -> np.ndarray:
    """Sinusoidal embedding, B x dim: sines then cosines over dim/2
    geometrically spaced frequencies"""
    t = np.asarray(t, dtype=np.float64).reshape(-1, 1)
    half = dim // 2
    frequencies = np.exp(-np.log(10000.0) * np.arange(half) / half)
    return np.concatenate([np.sin(t * frequencies), np.cos(t * frequencies)],
                          axis=1)


def denoise(graph: Graph, noisy: Var, cond_values: np.ndarray,
            cond_mask: np.ndarray, context: Var, conditions: Var,
            t: np.ndarray, dims: ModelDims) -> Var:
    """ε_θ(z_t, t | c).

    Args:
        graph (Graph): graph bound to the ParamMap holding denoiser.*
        noisy (Var): noisy values outside the conditioning cells, B x L x F
        cond_values (np.ndarray): conditioning values, B x L x F
        cond_mask (np.ndarray): conditioning mask, B x L x F
        context (Var): c_O, B x L x context_dim
        conditions (Var): routed W_cond, B x M x D
        t (np.ndarray): diffusion step per sample, B
        dims (ModelDims): block sizes

    Returns:
        Var: predicted noise, B x L x F
    """
    batch, length, _ = noisy.shape
    width = dims.modalities * dims.embed_dim
    c_cond = graph.broadcast_to(graph.reshape(conditions, (batch, 1, width)),
                                (batch, length, width))
    inputs = graph.concat([graph.constant(cond_values), noisy,
                           graph.constant(cond_mask), context, c_cond], axis=2)
    hidden = graph.linear(inputs, graph.param('denoiser.in.w'),
                          graph.param('denoiser.in.b'))
    step = graph.silu(graph.linear(
        graph.constant(timestep_embedding(t, dims.time_dim)),
        graph.param('denoiser.time.w'), graph.param('denoiser.time.b')))
    hidden = graph.add(hidden, graph.reshape(step, (batch, 1, dims.hidden)))
    for j in range(dims.blocks):
        prefix = f'denoiser.block.{j}'
        update = graph.layer_norm(hidden, graph.param(f'{prefix}.norm.gamma'),
                                  graph.param(f'{prefix}.norm.beta'))
        update = graph.silu(graph.conv1d(update,
                                         graph.param(f'{prefix}.conv1.w'),
                                         graph.param(f'{prefix}.conv1.b')))
        shift = graph.linear(step, graph.param(f'{prefix}.time.w'),
                             graph.param(f'{prefix}.time.b'))
        update = graph.add(update, graph.reshape(shift,
                                                 (batch, 1, dims.hidden)))
        update = graph.conv1d(update, graph.param(f'{prefix}.conv2.w'),
                              graph.param(f'{prefix}.conv2.b'))
        hidden = graph.add(hidden, update)
    return graph.linear(graph.silu(hidden), graph.param('denoiser.out.w'),
                        graph.param('denoiser.out.b'))


###############################################################################
#                                    Loss                                     #
###############################################################################

def target_mse(graph: Graph, prediction: Var, eps: np.ndarray,
               target_mask: np.ndarray) -> Var:
    """Σ (ε - ε̂)^2 over target cells divided by the number of target cells"""
    count = float(np.sum(target_mask))
    if count == 0:
        raise UnsatisfiableMaskError('no target cells')
    residual = graph.mul(graph.sub(prediction, graph.constant(eps)),
                         graph.constant(target_mask))
    return graph.scale(graph.sum_of_squares(residual), 1.0 / count)


def diffusion_loss(graph: Graph, batch: Sequence[MultimodalSample],
                   sched: DiffusionSchedule, dims: ModelDims,
                   rng: np.random.Generator,
                   ratio_range: Tuple[float, float] = (0.1, 0.9),
                   no_cond: bool = False) -> Optional[Var]:
    """Self-supervised denoising loss of a batch.

    Per sample (in batch order) the rng draws the self-mask, t ~ U{1..T} and
    ε ~ N(0, I). Samples with fewer than 2 observed cells are skipped with a
    warning.

    Args:
        graph (Graph): fresh graph bound to the client's ParamMap
        batch (Sequence[MultimodalSample]): zero-filled samples with masks
        sched (DiffusionSchedule): schedule
        dims (ModelDims): block sizes
        rng (np.random.Generator): client training stream
        ratio_range (Tuple[float, float], optional): self-mask ratio range
        no_cond (bool, optional): zero the routed conditions

    Returns:
        Optional[Var]: scalar loss, None when every sample was skipped
    """
    values, cond_masks, target_masks, noises, steps, indicators = \
        [], [], [], [], [], []
    for sample in batch:
        try:
            plan = make_self_mask(sample.stacked_mask(), ratio_range, rng)
        except UnsatisfiableMaskError as error:
            LOGGER.warning('Skipping sample %s in diffusion loss: %s',
                           sample.id, error)
            continue
        values.append(sample.stacked())
        cond_masks.append(plan.conditioning_mask)
        target_masks.append(plan.target_mask)
        steps.append(int(rng.integers(1, sched.steps + 1)))
        noises.append(rng.standard_normal(values[-1].shape))
        indicators.append(sample.r)
    if not values:
        return None
    x_0, cond_mask = np.stack(values), np.stack(cond_masks)
    eps, t = np.stack(noises), np.array(steps)
    z_t = q_sample(x_0, t, eps, sched, noise_mask=1.0 - cond_mask)
    context = encode_observed_context(graph, x_0, cond_mask, dims.top_k)
    conditions = condition_batch(graph, np.stack(indicators), no_cond)
    prediction = denoise(graph, graph.constant((1.0 - cond_mask) * z_t),
                         x_0 * cond_mask, cond_mask, context, conditions, t,
                         dims)
    return target_mse(graph, prediction, eps, np.stack(target_masks))


###############################################################################
#                                 Imputation                                  #
###############################################################################

def impute(sample: MultimodalSample, params: ParamMap,
           sched: DiffusionSchedule, dims: ModelDims, n_realizations: int = 1,
           seed: Seed = 0, no_cond: bool = False) -> MultimodalSample:
    """Ancestral sampling of the unobserved cells.

    Starts from z_T ~ N(0, I), clamps observed cells to their values before
    every denoiser call and returns R ⊙ x + (1 - R) ⊙ z_0, z_0 averaged over
    n_realizations chains. Fully observed samples come back unchanged.

    Raises:
        NumericOverflowError: non-finite parameters
    """
    if n_realizations < 1:
        raise ConfigError(f'n_realizations must be positive, got '
                          f'{n_realizations}')
    x, observed = sample.stacked(), sample.stacked_mask()
    if observed.all():
        return sample.copy()
    if not params.is_finite():
        raise NumericOverflowError('cannot impute with non-finite parameters')
    rng = np.random.default_rng(seed)
    keep = observed > 0
    x_b, mask_b = x[None], observed[None]
    graph = Graph(params)
    context = encode_observed_context(graph, x_b, mask_b, dims.top_k)
    conditions = condition_batch(graph, sample.r[None], no_cond)
    chains = []
    for _ in range(n_realizations):
        z = rng.standard_normal(x.shape)
        for t in range(sched.steps, 0, -1):
            z = np.where(keep, x, z)
            step_graph = Graph(params)
            eps_pred = denoise(step_graph,
                               step_graph.constant((1.0 - mask_b) * z[None]),
                               x_b * mask_b, mask_b,
                               step_graph.constant(context.value),
                               step_graph.constant(conditions.value),
                               np.array([t]), dims).value[0]
            noise = rng.standard_normal(x.shape) if t > 1 else None
            z = p_sample_step(z, t, eps_pred, sched, noise)
        chains.append(np.where(keep, x, z))
    estimate = chains[0] if n_realizations == 1 else np.mean(chains, axis=0)
    return sample.with_values(np.where(keep, x, estimate))


def impute_all(samples: Sequence[MultimodalSample], params: ParamMap,
               sched: DiffusionSchedule, dims: ModelDims,
               n_realizations: int = 1, seed: int = 0, no_cond: bool = False,
               workers: int = 1) -> List[MultimodalSample]:
    """impute over a dataset. Sample i uses the stream seeded by
    (seed, sample id), so results do not depend on workers."""
    def run(sample):
        return impute(sample, params, sched, dims, n_realizations,
                      np.random.SeedSequence([seed, sample.id]), no_cond)
    if workers <= 1:
        return [run(sample) for sample in samples]
    with ThreadPoolExecutor(max_workers=workers) as executor:
        return list(executor.map(run, samples))
