#!/usr/bin/env python
# -*- coding: utf-8 -*-
# @Filename:    autodiff.py

"""Dense float64 tensors with reverse-mode automatic differentiation. Just
enough machinery to train the small networks of the imputation and task
models: a parameter store (ParamMap) that doubles as the unit of federated
aggregation, a define-by-run tape (Graph), and an Adam optimizer.

Attributes:
    ADAM_EPSILON (float): denominator guard of the Adam update
    FORMAT_VERSION (int): version written in the ParamMap binary header
    LOGGER (logging): The logger (from logging) to handle debugging
    MAGIC (bytes): b'FCND', first four bytes of a serialized ParamMap
"""

from dataclasses import dataclass
from logging import getLogger
from pathlib import Path
from struct import pack, unpack_from, calcsize
from typing import Any, Callable, Dict, Iterator, List, Optional, Sequence, \
     Tuple, Union
# non-system, pip installs
import numpy as np
from scipy.special import expit, log_softmax, softmax
from .errors import ConfigError, GraphStateError, NumericOverflowError, \
     ParseError, ShapeError

MAGIC = b'FCND'
FORMAT_VERSION = 1
ADAM_EPSILON = 1e-8

LOGGER = getLogger(__name__)

Array = np.ndarray
BackwardFn = Callable[[Array], Sequence[Optional[Array]]]


###############################################################################
#                              Parameter store                                #
###############################################################################

class ParamMap:
    """Named parameters and their gradient accumulators. Iteration order is
    lexicographic by name so that aggregation and serialization never depend
    on insertion order.

    Attributes:
        _values (dict): name -> parameter array (float64)
        _grads (dict): name -> gradient accumulator, same shape as the value
    """

    def __init__(self, values: Dict[str, Any] = None):
        self._values: Dict[str, Array] = {}
        self._grads: Dict[str, Array] = {}
        for name, value in (values or {}).items():
            self[name] = value

    def __setitem__(self, name: str, value: Any):
        if not isinstance(name, str) or not name:
            raise ValueError('parameter names must be non-empty strings')
        array = np.array(value, dtype=np.float64)
        self._values[name] = array
        self._grads[name] = np.zeros_like(array)

    def __getitem__(self, name: str) -> Array:
        return self._values[name]

    def __contains__(self, name: str) -> bool:
        return name in self._values

    def __len__(self) -> int:
        return len(self._values)

    def __iter__(self) -> Iterator[str]:
        return iter(self.names())

    def __repr__(self) -> str:
        return f'ParamMap({len(self)} entries, {self.size()} values)'

    def names(self) -> List[str]:
        """Parameter names in lexicographic order"""
        return sorted(self._values)

    def items(self) -> List[Tuple[str, Array]]:
        """(name, value) pairs in lexicographic order"""
        return [(name, self._values[name]) for name in self.names()]

    def size(self) -> int:
        """Total number of scalar parameters"""
        return int(sum(value.size for value in self._values.values()))

    def grad(self, name: str) -> Array:
        """Gradient accumulator of the named parameter"""
        return self._grads[name]

    def accumulate_grad(self, name: str, grad: Array):
        """Adds grad into the accumulator of name.

        Raises:
            ShapeError: if grad does not have the parameter's shape
        """
        grad = np.asarray(grad, dtype=np.float64)
        if grad.shape != self._values[name].shape:
            raise ShapeError(f'gradient for {name} has shape {grad.shape}, '
                             f'parameter has {self._values[name].shape}')
        self._grads[name] = self._grads[name] + grad

    def zero_grad(self):
        for name in self._grads:
            self._grads[name] = np.zeros_like(self._values[name])

    def assign(self, name: str, value: Any):
        """Replaces the value of an existing parameter, keeping its gradient.

        Raises:
            ShapeError: on shape change
        """
        value = np.array(value, dtype=np.float64)
        if value.shape != self._values[name].shape:
            raise ShapeError(f'cannot assign shape {value.shape} to {name} '
                             f'of shape {self._values[name].shape}')
        self._values[name] = value

    def copy(self) -> 'ParamMap':
        """Deep copy, values and gradients"""
        new = ParamMap()
        new._values = {name: value.copy()
                       for name, value in self._values.items()}
        new._grads = {name: grad.copy() for name, grad in self._grads.items()}
        return new

    def schema(self) -> Tuple[Tuple[str, Tuple[int, ...]], ...]:
        """((name, shape), ...) in lexicographic order"""
        return tuple((name, self._values[name].shape) for name in self.names())

    def is_finite(self) -> bool:
        return all(np.isfinite(value).all() for value in self._values.values())

    def equals(self, other: 'ParamMap') -> bool:
        """Bit-exact equality of schema and values"""
        if self.schema() != other.schema():
            return False
        return all(value.tobytes() == other[name].tobytes()
                   for name, value in self.items())

    def subset(self, prefix: str) -> List[str]:
        """Names starting with prefix"""
        return [name for name in self.names() if name.startswith(prefix)]

    # SERIALIZATION:

    def to_bytes(self) -> bytes:
        """Flat binary form: magic, u32 version, then per entry the name
        length, UTF-8 name, rank, dims and little-endian f64 payload."""
        chunks = [MAGIC, pack('<I', FORMAT_VERSION)]
        for name, value in self.items():
            encoded = name.encode('utf-8')
            chunks.append(pack('<I', len(encoded)))
            chunks.append(encoded)
            chunks.append(pack('<I', value.ndim))
            chunks.append(pack(f'<{value.ndim}I', *value.shape))
            chunks.append(value.astype('<f8').tobytes())
        return b''.join(chunks)

    @classmethod
    def from_bytes(cls, blob: bytes) -> 'ParamMap':
        """Inverse of to_bytes.

        Raises:
            ParseError: bad magic, unknown version or truncated payload
        """
        if blob[:4] != MAGIC:
            raise ParseError('not a ParamMap blob (bad magic)')
        try:
            version, = unpack_from('<I', blob, 4)
            if version != FORMAT_VERSION:
                raise ParseError(f'unsupported ParamMap version {version}')
            offset = 8
            params = cls()
            while offset < len(blob):
                name_len, = unpack_from('<I', blob, offset)
                offset += 4
                name = blob[offset:offset + name_len].decode('utf-8')
                offset += name_len
                rank, = unpack_from('<I', blob, offset)
                offset += 4
                shape = unpack_from(f'<{rank}I', blob, offset)
                offset += calcsize(f'<{rank}I')
                count = int(np.prod(shape, dtype=np.int64))
                if offset + 8 * count > len(blob):
                    raise ParseError(f'truncated payload for {name}')
                value = np.frombuffer(blob, dtype='<f8', count=count,
                                      offset=offset).reshape(shape)
                offset += 8 * count
                params[name] = value
        except ParseError:
            raise
        except Exception as error:  # struct.error, UnicodeDecodeError
            raise ParseError(f'corrupt ParamMap blob: {error}')
        return params

    def save(self, path: Union[str, Path]):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(self.to_bytes())
        LOGGER.debug('Saved %s to %s', self, path)

    @classmethod
    def load(cls, path: Union[str, Path]) -> 'ParamMap':
        return cls.from_bytes(Path(path).read_bytes())


###############################################################################
#                         Define-by-run gradient tape                         #
###############################################################################

@dataclass
class Node:
    """One recorded operation.

    Attributes:
        op (str): operation kind, used in error messages
        inputs (tuple): indices of the input nodes
        value (ndarray): cached output
        backward (callable): maps output gradient to per-input gradients,
            None for leaves
        param (str): ParamMap name for parameter leaves
    """
    op: str
    inputs: Tuple[int, ...]
    value: Array
    backward: Optional[BackwardFn] = None
    param: Optional[str] = None


@dataclass(frozen=True)
class Var:
    """Handle on a node of a Graph"""
    graph: 'Graph'
    index: int

    @property
    def value(self) -> Array:
        return self.graph.nodes[self.index].value

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    def __add__(self, other: 'Var') -> 'Var':
        return self.graph.add(self, other)

    def __sub__(self, other: 'Var') -> 'Var':
        return self.graph.sub(self, other)

    def __mul__(self, other: 'Var') -> 'Var':
        return self.graph.mul(self, other)


def unbroadcast(grad: Array, shape: Tuple[int, ...]) -> Array:
    """Sums grad over the axes that broadcasting expanded to reach shape"""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# pylint: disable=too-many-public-methods
class Graph:
    """Tape of operations. Calling an operation computes its output right
    away (the forward pass) and records it; backward walks the tape in
    reverse, which is a reverse topological order by construction.

    Single-threaded per instance. Separate graphs share nothing but the
    ParamMap they read, which is only written by backward.

    Attributes:
        nodes (list): recorded Nodes in execution order
        params (ParamMap): parameter store read by param() and written by
            backward()
    """

    def __init__(self, params: ParamMap = None):
        self.params = params
        self.nodes: List[Node] = []
        self._param_nodes: Dict[str, Var] = {}
        self._grads: Optional[Dict[int, Array]] = None

    def record(self, op: str, inputs: Sequence[Var], value: Any,
               backward: BackwardFn = None, param: str = None) -> Var:
        """Appends a node. Exposed so that modules can add their own
        operations (condition routing, for instance).

        Raises:
            NumericOverflowError: value contains NaN or Inf
        """
        for var in inputs:
            self._own(var, op)
        value = np.asarray(value, dtype=np.float64)
        if not np.all(np.isfinite(value)):
            raise NumericOverflowError(f'{op}: non-finite output')
        self.nodes.append(Node(op, tuple(var.index for var in inputs), value,
                               backward, param))
        return Var(self, len(self.nodes) - 1)

    def _own(self, var: Var, op: str):
        if not isinstance(var, Var) or var.graph is not self:
            raise GraphStateError(f'{op}: operand does not belong to this '
                                  f'graph')

    def forward(self, function: Callable[..., Any],
                inputs: Dict[str, Any]) -> Any:
        """Binds the named inputs and runs function(graph, **inputs). The
        return value of function is passed through untouched."""
        bound = {name: self.input(name, inputs[name]) for name in sorted(inputs)}
        return function(self, **bound)

    def backward(self, output: Var, output_grad: Any = None):
        """Propagates output_grad (ones by default) back through the tape
        and accumulates parameter gradients into the ParamMap.

        Raises:
            GraphStateError: nothing recorded yet, or backward already ran
            ShapeError: output_grad shape differs from the output
        """
        if not self.nodes:
            raise GraphStateError('backward called before forward')
        if self._grads is not None:
            raise GraphStateError('backward already ran on this graph')
        self._own(output, 'backward')
        if output_grad is None:
            output_grad = np.ones_like(output.value)
        output_grad = np.asarray(output_grad, dtype=np.float64)
        if output_grad.shape != output.shape:
            raise ShapeError(f'backward: output gradient {output_grad.shape} '
                             f'vs output {output.shape}')
        grads: Dict[int, Array] = {output.index: output_grad}
        for index in range(output.index, -1, -1):
            grad = grads.get(index)
            if grad is None:
                continue
            node = self.nodes[index]
            if node.param is not None:
                self.params.accumulate_grad(node.param, grad)
            if node.backward is None:
                continue
            for source, source_grad in zip(node.inputs, node.backward(grad)):
                if source_grad is None:
                    continue
                if source in grads:
                    grads[source] = grads[source] + source_grad
                else:
                    grads[source] = source_grad
        self._grads = grads

    def grad(self, var: Var) -> Array:
        """Gradient of the backward output w.r.t. var (inputs included)"""
        if self._grads is None:
            raise GraphStateError('grad requested before backward')
        self._own(var, 'grad')
        return self._grads.get(var.index, np.zeros_like(var.value))

    # LEAVES:

    def input(self, name: str, value: Any) -> Var:
        return self.record(f'input:{name}', [], np.array(value, dtype=float))

    def constant(self, value: Any) -> Var:
        return self.record('constant', [], np.array(value, dtype=float))

    def param(self, name: str) -> Var:
        """Leaf bound to a ParamMap entry, recorded once per graph"""
        if self.params is None:
            raise GraphStateError('graph has no ParamMap bound')
        if name not in self._param_nodes:
            self._param_nodes[name] = self.record(
                f'param:{name}', [], self.params[name], param=name)
        return self._param_nodes[name]

    # ELEMENTWISE:

    @staticmethod
    def _broadcast(op: str, left: Var, right: Var) -> Tuple[int, ...]:
        try:
            return np.broadcast_shapes(left.shape, right.shape)
        except ValueError:
            raise ShapeError(f'{op}: cannot broadcast {left.shape} with '
                             f'{right.shape}')

    def add(self, left: Var, right: Var) -> Var:
        self._broadcast('add', left, right)
        return self.record(
            'add', [left, right], left.value + right.value,
            lambda g: (unbroadcast(g, left.shape), unbroadcast(g, right.shape)))

    def sub(self, left: Var, right: Var) -> Var:
        self._broadcast('sub', left, right)
        return self.record(
            'sub', [left, right], left.value - right.value,
            lambda g: (unbroadcast(g, left.shape),
                       unbroadcast(-g, right.shape)))

    def mul(self, left: Var, right: Var) -> Var:
        """Hadamard product with broadcasting"""
        self._broadcast('mul', left, right)
        a, b = left.value, right.value
        return self.record(
            'mul', [left, right], a * b,
            lambda g: (unbroadcast(g * b, left.shape),
                       unbroadcast(g * a, right.shape)))

    def scale(self, var: Var, factor: float) -> Var:
        return self.record('scale', [var], var.value * factor,
                           lambda g: (g * factor,))

    def relu(self, var: Var) -> Var:
        x = var.value
        return self.record('relu', [var], np.maximum(x, 0.0),
                           lambda g: (g * (x > 0.0),))

    def silu(self, var: Var) -> Var:
        x = var.value
        sig = expit(x)
        return self.record('silu', [var], x * sig,
                           lambda g: (g * sig * (1.0 + x * (1.0 - sig)),))

    # LAYERS:

    def linear(self, x: Var, weight: Var, bias: Var = None) -> Var:
        """y = x @ W + b over the last axis; W is (in, out)"""
        if weight.value.ndim != 2 or x.shape[-1] != weight.shape[0]:
            raise ShapeError(f'linear: input {x.shape} vs weight '
                             f'{weight.shape}')
        if bias is not None and bias.shape != (weight.shape[1],):
            raise ShapeError(f'linear: bias {bias.shape} vs weight '
                             f'{weight.shape}')
        xv, wv = x.value, weight.value
        out = xv @ wv
        if bias is not None:
            out = out + bias.value

        def backward(g):
            g2 = g.reshape(-1, wv.shape[1])
            grads = [g @ wv.T, xv.reshape(-1, wv.shape[0]).T @ g2]
            if bias is not None:
                grads.append(g2.sum(axis=0))
            return grads
        inputs = [x, weight] + ([bias] if bias is not None else [])
        return self.record('linear', inputs, out, backward)

    def conv1d(self, x: Var, weight: Var, bias: Var = None) -> Var:
        """'same' 1-D convolution along time. x is (B, L, C_in), weight is
        (K, C_in, C_out) with K odd."""
        if x.value.ndim != 3 or weight.value.ndim != 3 \
                or x.shape[2] != weight.shape[1] or weight.shape[0] % 2 == 0:
            raise ShapeError(f'conv1d: input {x.shape} vs kernel '
                             f'{weight.shape}')
        if bias is not None and bias.shape != (weight.shape[2],):
            raise ShapeError(f'conv1d: bias {bias.shape} vs kernel '
                             f'{weight.shape}')
        batch, length, c_in = x.shape
        kernel, _, c_out = weight.shape
        pad = kernel // 2
        padded = np.pad(x.value, ((0, 0), (pad, pad), (0, 0)))
        cols = np.stack([padded[:, k:k + length, :] for k in range(kernel)],
                        axis=2).reshape(batch * length, kernel * c_in)
        w2 = weight.value.reshape(kernel * c_in, c_out)
        out = (cols @ w2).reshape(batch, length, c_out)
        if bias is not None:
            out = out + bias.value

        def backward(g):
            g2 = g.reshape(batch * length, c_out)
            grad_w = (cols.T @ g2).reshape(kernel, c_in, c_out)
            grad_cols = (g2 @ w2.T).reshape(batch, length, kernel, c_in)
            grad_padded = np.zeros((batch, length + 2 * pad, c_in))
            for k in range(kernel):
                grad_padded[:, k:k + length, :] += grad_cols[:, :, k, :]
            grads = [grad_padded[:, pad:pad + length, :], grad_w]
            if bias is not None:
                grads.append(g2.sum(axis=0))
            return grads
        inputs = [x, weight] + ([bias] if bias is not None else [])
        return self.record('conv1d', inputs, out, backward)

    def layer_norm(self, x: Var, gamma: Var, beta: Var,
                   epsilon: float = 1e-5) -> Var:
        width = x.shape[-1]
        if gamma.shape != (width,) or beta.shape != (width,):
            raise ShapeError(f'layer_norm: input {x.shape} vs gain '
                             f'{gamma.shape} / shift {beta.shape}')
        xv = x.value
        centred = xv - xv.mean(axis=-1, keepdims=True)
        inv_std = 1.0 / np.sqrt((centred ** 2).mean(axis=-1, keepdims=True)
                                + epsilon)
        x_hat = centred * inv_std

        def backward(g):
            d_hat = g * gamma.value
            grad_x = inv_std / width * (
                width * d_hat - d_hat.sum(axis=-1, keepdims=True)
                - x_hat * (d_hat * x_hat).sum(axis=-1, keepdims=True))
            return (grad_x, (g * x_hat).reshape(-1, width).sum(axis=0),
                    g.reshape(-1, width).sum(axis=0))
        return self.record('layer_norm', [x, gamma, beta],
                           x_hat * gamma.value + beta.value, backward)

    def softmax(self, var: Var, axis: int = -1) -> Var:
        out = softmax(var.value, axis=axis)
        return self.record(
            'softmax', [var], out,
            lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),))

    def masked_softmax(self, var: Var, keep: Array) -> Var:
        """Softmax over the last axis restricted to entries where keep is
        True; the others get exactly zero weight and zero gradient."""
        keep = np.asarray(keep, dtype=bool)
        if keep.shape != var.shape or not keep.any(axis=-1).all():
            raise ShapeError(f'masked_softmax: mask {keep.shape} vs input '
                             f'{var.shape} (every row needs one entry)')
        out = softmax(np.where(keep, var.value, -np.inf), axis=-1)
        return self.record(
            'masked_softmax', [var], out,
            lambda g: (out * (g - (g * out).sum(axis=-1, keepdims=True)),))

    # STRUCTURE:

    def concat(self, parts: Sequence[Var], axis: int = -1) -> Var:
        try:
            out = np.concatenate([part.value for part in parts], axis=axis)
        except ValueError:
            raise ShapeError(f'concat: incompatible shapes '
                             f'{[part.shape for part in parts]}')
        bounds = np.cumsum([part.shape[axis] for part in parts])[:-1]
        return self.record('concat', parts, out,
                           lambda g: np.split(g, bounds, axis=axis))

    def index(self, var: Var, key: Any) -> Var:
        """Slicing / gathering, var[key]"""
        try:
            out = np.array(var.value[key])
        except IndexError as error:
            raise ShapeError(f'index: {error} for shape {var.shape}')

        parts = key if isinstance(key, tuple) else (key,)
        basic = all(isinstance(part, (int, slice, type(Ellipsis)))
                    for part in parts)

        def backward(g):
            grad = np.zeros_like(var.value)
            if basic:
                grad[key] += g
            else:
                np.add.at(grad, key, g)
            return (grad,)
        return self.record('index', [var], out, backward)

    def reshape(self, var: Var, shape: Tuple[int, ...]) -> Var:
        try:
            out = var.value.reshape(shape)
        except ValueError:
            raise ShapeError(f'reshape: {var.shape} to {shape}')
        return self.record('reshape', [var], out,
                           lambda g: (g.reshape(var.shape),))

    def broadcast_to(self, var: Var, shape: Tuple[int, ...]) -> Var:
        try:
            out = np.broadcast_to(var.value, shape).copy()
        except ValueError:
            raise ShapeError(f'broadcast_to: {var.shape} to {shape}')
        return self.record('broadcast_to', [var], out,
                           lambda g: (unbroadcast(g, var.shape),))

    # REDUCTIONS AND LOSSES:

    def sum(self, var: Var, axis: Optional[int] = None) -> Var:
        out = var.value.sum(axis=axis)

        def backward(g):
            if axis is not None:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, var.shape).copy(),)
        return self.record('sum', [var], out, backward)

    def mean(self, var: Var, axis: Optional[int] = None) -> Var:
        count = var.value.size if axis is None else var.shape[axis]
        return self.scale(self.sum(var, axis), 1.0 / count)

    def sum_of_squares(self, var: Var) -> Var:
        xv = var.value
        return self.record('sum_of_squares', [var], np.sum(xv * xv),
                           lambda g: (2.0 * g * xv,))

    def cross_entropy(self, logits: Var, labels: Any) -> Var:
        """Mean negative log-likelihood of integer labels, logits (B, C)"""
        labels = np.asarray(labels, dtype=int)
        if logits.value.ndim != 2 or labels.shape != (logits.shape[0],):
            raise ShapeError(f'cross_entropy: logits {logits.shape} vs '
                             f'labels {labels.shape}')
        if labels.size == 0:
            raise ShapeError('cross_entropy: empty batch')
        rows = np.arange(labels.size)
        log_probs = log_softmax(logits.value, axis=1)
        loss = -log_probs[rows, labels].mean()

        def backward(g):
            grad = np.exp(log_probs)
            grad[rows, labels] -= 1.0
            return (grad * (g / labels.size),)
        return self.record('cross_entropy', [logits], loss, backward)


###############################################################################
#                                  Optimizer                                  #
###############################################################################

class Adam:
    """Adaptive moment estimation with bias-corrected moments.

    Attributes:
        beta1 (float): decay of the first moment
        beta2 (float): decay of the second moment
        epsilon (float): denominator guard
        lr (float): default learning rate
        step_count (int): number of steps taken so far
    """

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, epsilon: float = ADAM_EPSILON):
        if lr <= 0:
            raise ConfigError(f'learning rate must be positive, got {lr}')
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.step_count = 0
        self._first: Dict[str, Array] = {}
        self._second: Dict[str, Array] = {}

    def step(self, params: ParamMap, lr: float = None):
        """Applies one update from the accumulated gradients, then zeroes
        them.

        Raises:
            ConfigError: lr <= 0
        """
        lr = self.lr if lr is None else lr
        if lr <= 0:
            raise ConfigError(f'learning rate must be positive, got {lr}')
        self.step_count += 1
        first_fix = 1.0 - self.beta1 ** self.step_count
        second_fix = 1.0 - self.beta2 ** self.step_count
        for name in params.names():
            grad = params.grad(name)
            first = self._first.get(name, np.zeros_like(grad))
            second = self._second.get(name, np.zeros_like(grad))
            first = self.beta1 * first + (1.0 - self.beta1) * grad
            second = self.beta2 * second + (1.0 - self.beta2) * grad * grad
            self._first[name], self._second[name] = first, second
            update = lr * (first / first_fix) / (np.sqrt(second / second_fix)
                                                 + self.epsilon)
            params.assign(name, params[name] - update)
        params.zero_grad()


def optimizer_step(params: ParamMap, state: Adam, lr: float = None):
    """Functional spelling of Adam.step"""
    state.step(params, lr)


###############################################################################
#                          Initialization & checking                          #
###############################################################################

def glorot_uniform(rng: np.random.Generator, shape: Tuple[int, ...],
                   fan_in: int, fan_out: int) -> Array:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def embedding_normal(rng: np.random.Generator, shape: Tuple[int, ...],
                     std: float = 0.02) -> Array:
    return rng.normal(0.0, std, size=shape)


def gradient_check(loss_fn: Callable[[Graph], Var], params: ParamMap,
                   rng: np.random.Generator, probes: int = 100,
                   names: Sequence[str] = None, step: float = 1e-5,
                   floor: float = 1e-5) -> float:
    """Compares backward() against central finite differences on randomly
    chosen parameter entries.

    Args:
        loss_fn (Callable[[Graph], Var]): builds a scalar loss on the graph
            it is given, must be deterministic
        params (ParamMap): parameters the graph reads, perturbed in place and
            restored afterwards
        rng (np.random.Generator): picks the probed entries
        probes (int, optional): number of entries to probe (all if fewer)
        names (Sequence[str], optional): restrict probing to these names
        step (float, optional): finite-difference step h
        floor (float, optional): lower bound on the relative-error
            denominator, keeps near-zero gradients from dominating

    Returns:
        float: max over probes of |analytic - numeric| / max(|a|, |n|, floor)
    """
    params.zero_grad()
    graph = Graph(params)
    graph.backward(loss_fn(graph))
    names = list(names) if names is not None else params.names()
    analytic = {name: params.grad(name).copy() for name in names}
    params.zero_grad()
    entries = [(name, i) for name in names for i in range(params[name].size)]
    if len(entries) > probes:
        chosen = rng.choice(len(entries), size=probes, replace=False)
        entries = [entries[i] for i in sorted(chosen)]
    worst = 0.0
    for name, i in entries:
        value = params[name]
        original = value.flat[i]
        value.flat[i] = original + step
        plus = float(loss_fn(Graph(params)).value)
        value.flat[i] = original - step
        minus = float(loss_fn(Graph(params)).value)
        value.flat[i] = original
        numeric = (plus - minus) / (2.0 * step)
        exact = analytic[name].flat[i]
        error = abs(exact - numeric) / max(abs(exact), abs(numeric), floor)
        worst = max(worst, error)
    LOGGER.debug('gradient check over %d entries, worst relative error %.3g',
                 len(entries), worst)
    return worst
