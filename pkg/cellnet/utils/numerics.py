from dataclasses import dataclass
from typing import Callable, Tuple
import logging

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from cellnet.errors import ShapeMismatchError

logger = logging.getLogger(__name__)

ACTIVATION_SCALE = 1.7159
ACTIVATION_SLOPE = 2.0 / 3.0


@dataclass(frozen=True)
class PoolTrace:
    '''Argmax positions chosen by max-pooling, one (row, col) per output cell'''
    rows: np.ndarray
    cols: np.ndarray
    input_shape: Tuple[int, int, int]
    region: int


def as_stack(x, name: str = 'input') -> np.ndarray:
    stack = np.asarray(x, dtype=np.float64)
    if stack.ndim == 2:
        stack = stack[np.newaxis]
    if stack.ndim != 3 or min(stack.shape) < 1:
        raise ShapeMismatchError(f'{name} must be a non-empty (maps, height, width) stack, got shape {stack.shape}', axis='maps')
    return stack


# ============= CONVOLUTION =============

def convolve_valid(stack: np.ndarray, filters: np.ndarray, biases: np.ndarray) -> np.ndarray:
    '''
    Valid, stride-1 convolution summed over input maps plus a per-map bias.

    output[j] = sum_i stack[i] (*) filters[i, j] + biases[j], where (*) slides
    the k x k filter over every position where it fits entirely. Stacks are
    (maps, height, width); filters are (I, J, k, k).
    '''
    stack = as_stack(stack)
    filters = np.asarray(filters, dtype=np.float64)
    biases = np.asarray(biases, dtype=np.float64)
    _check_conv_shapes(stack, filters, biases)

    k = filters.shape[2]
    windows = sliding_window_view(stack, (k, k), axis=(1, 2))
    out = np.einsum('ihwab,ijab->jhw', windows, filters, optimize=True)
    return out + biases[:, np.newaxis, np.newaxis]


def backward_convolve(upstream: np.ndarray, stack: np.ndarray, filters: np.ndarray):
    '''Gradients of convolve_valid w.r.t. (input stack, filters, biases)'''
    stack = as_stack(stack)
    upstream = as_stack(upstream, 'upstream gradient')
    filters = np.asarray(filters, dtype=np.float64)
    n_in, n_out, k, _ = filters.shape
    out_h, out_w = stack.shape[1] - k + 1, stack.shape[2] - k + 1
    if upstream.shape != (n_out, out_h, out_w):
        raise ShapeMismatchError(
            f'Upstream gradient shape {upstream.shape} does not match forward output {(n_out, out_h, out_w)}',
            axis='output')

    windows = sliding_window_view(stack, (k, k), axis=(1, 2))
    d_filters = np.einsum('ihwab,jhw->ijab', windows, upstream, optimize=True)
    d_biases = upstream.sum(axis=(1, 2))

    # full correlation of the upstream gradient with the flipped filters
    padded = np.pad(upstream, ((0, 0), (k - 1, k - 1), (k - 1, k - 1)))
    up_windows = sliding_window_view(padded, (k, k), axis=(1, 2))
    flipped = filters[:, :, ::-1, ::-1]
    d_input = np.einsum('jhwab,ijab->ihw', up_windows, flipped, optimize=True)
    return d_input, d_filters, d_biases


def _check_conv_shapes(stack, filters, biases):
    if filters.ndim != 4 or filters.shape[2] != filters.shape[3]:
        raise ShapeMismatchError(f'Filters must be (inputs, outputs, k, k), got {filters.shape}', axis='filter')
    n_in, n_out, k, _ = filters.shape
    if n_in != stack.shape[0]:
        raise ShapeMismatchError(f'Filter matrix has {n_in} input rows but the stack has {stack.shape[0]} maps', axis='input_maps')
    if biases.shape != (n_out,):
        raise ShapeMismatchError(f'Expected {n_out} biases, got shape {biases.shape}', axis='output_maps')
    if k > stack.shape[1] or k > stack.shape[2]:
        raise ShapeMismatchError(f'Filter size {k} exceeds map size {stack.shape[1:]}', axis='filter')


# ============= POOLING =============

def maxpool(stack: np.ndarray, region: int) -> Tuple[np.ndarray, PoolTrace]:
    '''
    Non-overlapping r x r max-pooling. Trailing rows/columns that do not fill a
    whole region are dropped. Ties go to the first element in row-major order.
    '''
    stack = as_stack(stack)
    n, h, w = stack.shape
    r = int(region)
    if r < 1 or r > h or r > w:
        raise ShapeMismatchError(f'Pooling region {r} does not fit map size {(h, w)}', axis='region')
    out_h, out_w = h // r, w // r
    if out_h * r != h or out_w * r != w:
        logger.debug(f'maxpool truncating {(h, w)} to {(out_h * r, out_w * r)}')

    blocks = stack[:, :out_h * r, :out_w * r].reshape(n, out_h, r, out_w, r)
    blocks = blocks.transpose(0, 1, 3, 2, 4).reshape(n, out_h, out_w, r * r)
    flat_idx = blocks.argmax(axis=-1)
    pooled = np.take_along_axis(blocks, flat_idx[..., np.newaxis], axis=-1)[..., 0]

    rows = np.arange(out_h)[np.newaxis, :, np.newaxis] * r + flat_idx // r
    cols = np.arange(out_w)[np.newaxis, np.newaxis, :] * r + flat_idx % r
    return pooled, PoolTrace(rows=rows, cols=cols, input_shape=stack.shape, region=r)


def backward_maxpool(upstream: np.ndarray, trace: PoolTrace) -> np.ndarray:
    '''Route each upstream gradient to the input cell that won its pooling region'''
    upstream = as_stack(upstream, 'upstream gradient')
    if upstream.shape != trace.rows.shape:
        raise ShapeMismatchError(
            f'Upstream gradient shape {upstream.shape} does not match pool trace {trace.rows.shape}', axis='output')
    d_input = np.zeros(trace.input_shape)
    maps = np.arange(upstream.shape[0])[:, np.newaxis, np.newaxis]
    d_input[maps, trace.rows, trace.cols] = upstream
    return d_input


# ============= ACTIVATION / OUTPUT =============

def activation(x):
    '''phi(x) = 1.7159 tanh(2x/3)'''
    return ACTIVATION_SCALE * np.tanh(ACTIVATION_SLOPE * np.asarray(x, dtype=np.float64))


def activation_derivative(x):
    t = np.tanh(ACTIVATION_SLOPE * np.asarray(x, dtype=np.float64))
    return ACTIVATION_SCALE * ACTIVATION_SLOPE * (1.0 - t * t)


def backward_activation(upstream: np.ndarray, pre_activation: np.ndarray) -> np.ndarray:
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != np.shape(pre_activation):
        raise ShapeMismatchError(
            f'Upstream gradient shape {upstream.shape} does not match activation input {np.shape(pre_activation)}',
            axis='activation')
    return upstream * activation_derivative(pre_activation)


def softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    shifted = np.exp(z - z.max())
    return shifted / shifted.sum()


def dense(x: np.ndarray, weights: np.ndarray, biases: np.ndarray) -> np.ndarray:
    '''Fully-connected layer: weights are (outputs, inputs)'''
    x = np.asarray(x, dtype=np.float64)
    if weights.shape[1] != x.shape[0]:
        raise ShapeMismatchError(f'Dense layer expects {weights.shape[1]} inputs, got {x.shape[0]}', axis='inputs')
    return weights @ x + biases


def backward_dense(upstream: np.ndarray, x: np.ndarray, weights: np.ndarray):
    '''Gradients of dense w.r.t. (input vector, weights, biases)'''
    if upstream.shape != (weights.shape[0],):
        raise ShapeMismatchError(f'Upstream gradient has {upstream.shape} entries, layer has {weights.shape[0]} outputs', axis='outputs')
    return weights.T @ upstream, np.outer(upstream, x), upstream.copy()


# ============= GRADIENT CHECKING =============

def central_difference(func: Callable[[np.ndarray], float], x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    '''Numerical gradient of a scalar function; x is perturbed in place and restored'''
    grad = np.zeros_like(x, dtype=np.float64)
    flat_x = x.reshape(-1)
    flat_g = grad.reshape(-1)
    for idx in range(flat_x.size):
        original = flat_x[idx]
        flat_x[idx] = original + eps
        plus = func(x)
        flat_x[idx] = original - eps
        minus = func(x)
        flat_x[idx] = original
        flat_g[idx] = (plus - minus) / (2.0 * eps)
    return grad


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.abs(analytic) + np.abs(numeric), floor)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0
