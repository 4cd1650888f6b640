'''
The layered network: parameter storage, initialization, forward pass with a
full trace, backward pass, and the versioned binary model format.

Parameters live in memory in double precision and on disk in single
precision. h^6 is flattened map-major, then row, then column.
'''
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple, Union
import json
import logging
import os
import struct

import numpy as np
import pandas as pd

from cellnet.errors import ShapeMismatchError, SpecError, ModelFormatError, ConfigError
from cellnet.models.run_config import NetworkSpec
from cellnet.utils import numerics
from cellnet.utils.imageproc import save_image

logger = logging.getLogger(__name__)

MODEL_MAGIC = b'CNET'
MODEL_VERSION = 1
_HEADER = struct.Struct('<4sHI')


# ============= PARAMETER CONTAINERS =============

@dataclass
class LayerParams:
    weights: np.ndarray
    biases: np.ndarray


@dataclass
class NetworkParams:
    '''Weights and biases of every trainable layer, in spec order'''
    layers: List[LayerParams]

    def copy(self) -> 'NetworkParams':
        return NetworkParams([LayerParams(p.weights.copy(), p.biases.copy()) for p in self.layers])

    def zeros_like(self) -> 'NetworkParams':
        return NetworkParams([LayerParams(np.zeros_like(p.weights), np.zeros_like(p.biases)) for p in self.layers])

    def add_(self, other: 'NetworkParams') -> 'NetworkParams':
        for mine, theirs in zip(self.layers, other.layers):
            mine.weights += theirs.weights
            mine.biases += theirs.biases
        return self

    def scale_(self, factor: float) -> 'NetworkParams':
        for p in self.layers:
            p.weights *= factor
            p.biases *= factor
        return self

    def scalar_count(self) -> int:
        return sum(p.weights.size + p.biases.size for p in self.layers)

    def all_finite(self) -> bool:
        return all(np.isfinite(p.weights).all() and np.isfinite(p.biases).all() for p in self.layers)

    def flat(self) -> np.ndarray:
        return np.concatenate([np.concatenate([p.weights.ravel(), p.biases.ravel()]) for p in self.layers])


@dataclass(frozen=True)
class DropoutConfig:
    '''Dropout on the first fully-connected hidden layer; ratio 0 disables it'''
    ratio: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.ratio < 1.0:
            raise ConfigError(f'Dropout ratio must lie in [0, 1), got {self.ratio}')


@dataclass
class StageTrace:
    kind: str
    input: np.ndarray
    output: np.ndarray
    pre_activation: Optional[np.ndarray] = None
    pool_trace: Optional[numerics.PoolTrace] = None
    dropout_mask: Optional[np.ndarray] = None


@dataclass
class ForwardTrace:
    '''Everything backward needs, plus the named vectors of the architecture'''
    stages: List[StageTrace]
    flat: np.ndarray
    hidden: Optional[np.ndarray]
    logits: np.ndarray
    probabilities: np.ndarray
    mode: str = 'eval'

    def output_shapes(self) -> List[Tuple[int, ...]]:
        return [stage.output.shape for stage in self.stages]


# ============= ARCHITECTURE =============

def describe_chain(spec: NetworkSpec) -> List[Tuple[int, ...]]:
    '''
    Output shape of every layer for the spec's input size: (maps, h, w) for
    spatial layers, (units,) for fully-connected and output layers.
    '''
    maps, h, w = spec.input_channels, spec.input_size, spec.input_size
    shapes = []
    for idx, layer in enumerate(spec.layers):
        if layer.kind == 'convolution':
            k = layer.filter_size
            if k > h or k > w:
                raise SpecError(f'Layer {idx}: filter {k}x{k} larger than its {h}x{w} input', layer=idx)
            maps, h, w = layer.output_maps, h - k + 1, w - k + 1
            shapes.append((maps, h, w))
        elif layer.kind == 'maxpool':
            r = layer.region
            if r > h or r > w:
                raise SpecError(f'Layer {idx}: pooling region {r} larger than its {h}x{w} input', layer=idx)
            if h % r or w % r:
                if spec.strict_pooling:
                    raise SpecError(f'Layer {idx}: pooling region {r} does not divide {h}x{w} (non-integer size {h / r:g})', layer=idx)
                logger.warning(f'Layer {idx}: pooling {h}x{w} by {r} truncates the remainder')
            h, w = h // r, w // r
            shapes.append((maps, h, w))
        else:
            units = layer.neurons if layer.kind == 'fully_connected' else layer.classes
            shapes.append((units,))
    return shapes


def param_shapes(spec: NetworkSpec) -> List[Tuple[Tuple[int, ...], Tuple[int, ...]]]:
    chain = describe_chain(spec)
    shapes = []
    prev = (spec.input_channels, spec.input_size, spec.input_size)
    for layer, out in zip(spec.layers, chain):
        if layer.kind == 'convolution':
            shapes.append(((prev[0], layer.output_maps, layer.filter_size, layer.filter_size), (layer.output_maps,)))
        elif layer.trainable:
            fan_in = int(np.prod(prev))
            shapes.append(((out[0], fan_in), (out[0],)))
        prev = out
    return shapes


def param_count(spec: NetworkSpec) -> int:
    return sum(int(np.prod(w)) + int(np.prod(b)) for w, b in param_shapes(spec))


def init_params(spec: NetworkSpec, seed: int) -> NetworkParams:
    '''Weights ~ U[-1/sqrt(fan_in), 1/sqrt(fan_in)], biases 0'''
    rng = np.random.default_rng(seed)
    layers = []
    for w_shape, b_shape in param_shapes(spec):
        # conv weights are (inputs, outputs, k, k): a unit sees inputs*k*k values
        fan_in = w_shape[0] * w_shape[2] * w_shape[3] if len(w_shape) == 4 else w_shape[1]
        bound = 1.0 / np.sqrt(fan_in)
        layers.append(LayerParams(rng.uniform(-bound, bound, size=w_shape), np.zeros(b_shape)))
    logger.info(f'Initialized {param_count(spec)} parameters with seed {seed}')
    return NetworkParams(layers)


def _check_params(params: NetworkParams, spec: NetworkSpec):
    expected = param_shapes(spec)
    if len(expected) != len(params.layers):
        raise ShapeMismatchError(f'Spec has {len(expected)} trainable layers, params have {len(params.layers)}', axis='layers')
    for idx, ((w_shape, b_shape), p) in enumerate(zip(expected, params.layers)):
        if p.weights.shape != w_shape or p.biases.shape != b_shape:
            raise ShapeMismatchError(
                f'Trainable layer {idx}: expected {w_shape}/{b_shape}, got {p.weights.shape}/{p.biases.shape}', axis='layers')


# ============= FORWARD / BACKWARD =============

def forward(params: NetworkParams, spec: NetworkSpec, image: np.ndarray,
            dropout: Union[DropoutConfig, float, None] = None, mode: str = 'eval',
            rng: Optional[np.random.Generator] = None) -> ForwardTrace:
    '''Run one image through the network, recording every intermediate'''
    if mode not in ('train', 'eval'):
        raise ConfigError(f'Unknown forward mode {mode!r}')
    if not isinstance(dropout, DropoutConfig):
        dropout = DropoutConfig(float(dropout or 0.0))
    x = np.asarray(image, dtype=np.float64)
    if x.ndim == 2:
        x = x[np.newaxis]
    expected = (spec.input_channels, spec.input_size, spec.input_size)
    if x.shape != expected:
        raise ShapeMismatchError(f'Input shape {x.shape} does not match network input {expected}', axis='input')
    use_dropout = mode == 'train' and dropout.ratio > 0
    if use_dropout and rng is None:
        raise ConfigError('Train-mode dropout needs an rng')

    stages: List[StageTrace] = []
    param_iter = iter(params.layers)
    flat, hidden, logits = None, None, None
    dropout_done = False
    for layer in spec.layers:
        if layer.kind == 'convolution':
            p = next(param_iter)
            z = numerics.convolve_valid(x, p.weights, p.biases)
            out = numerics.activation(z)
            stages.append(StageTrace(layer.kind, x, out, pre_activation=z))
        elif layer.kind == 'maxpool':
            out, trace = numerics.maxpool(x, layer.region)
            stages.append(StageTrace(layer.kind, x, out, pool_trace=trace))
        else:
            if flat is None:
                flat = x.reshape(-1)
                x = flat
            p = next(param_iter)
            z = numerics.dense(x, p.weights, p.biases)
            if layer.kind == 'fully_connected':
                out = numerics.activation(z)
                mask = None
                if use_dropout and not dropout_done:
                    mask = (rng.random(out.shape) >= dropout.ratio) / (1.0 - dropout.ratio)
                    out = out * mask
                dropout_done = True
                hidden = out
                stages.append(StageTrace(layer.kind, x, out, pre_activation=z, dropout_mask=mask))
            else:
                logits = z
                out = numerics.softmax(z)
                stages.append(StageTrace(layer.kind, x, out, pre_activation=z))
        x = out

    return ForwardTrace(stages=stages, flat=flat, hidden=hidden, logits=logits, probabilities=x, mode=mode)


def one_hot(label: int, n_classes: int) -> np.ndarray:
    if not 0 <= label < n_classes:
        raise ShapeMismatchError(f'Label {label} outside [0, {n_classes})', axis='label')
    y = np.zeros(n_classes)
    y[label] = 1.0
    return y


def validate_one_hot(label, n_classes: int) -> np.ndarray:
    y = np.asarray(label, dtype=np.float64)
    if y.shape != (n_classes,):
        raise ShapeMismatchError(f'Label vector has shape {y.shape}, network has {n_classes} classes', axis='label')
    if not (np.isin(y, (0.0, 1.0)).all() and y.sum() == 1.0):
        raise ShapeMismatchError('Label vector is not one-hot', axis='label')
    return y


def backward(trace: ForwardTrace, params: NetworkParams, spec: NetworkSpec, label) -> NetworkParams:
    '''dE/dW and dE/db of the cross-entropy loss for every trainable layer'''
    y = validate_one_hot(label, spec.num_classes)
    if trace.probabilities.shape != y.shape:
        raise ShapeMismatchError(f'Trace has {trace.probabilities.shape[0]} outputs, label has {y.shape[0]}', axis='label')

    grads: List[LayerParams] = []
    param_idx = len(params.layers) - 1
    # softmax + cross-entropy
    upstream = trace.probabilities - y
    for layer, stage in zip(reversed(spec.layers), reversed(trace.stages)):
        if layer.kind == 'softmax_output':
            p = params.layers[param_idx]
            d_x, d_w, d_b = numerics.backward_dense(upstream, stage.input, p.weights)
            grads.append(LayerParams(d_w, d_b))
            param_idx -= 1
        elif layer.kind == 'fully_connected':
            p = params.layers[param_idx]
            if stage.dropout_mask is not None:
                upstream = upstream * stage.dropout_mask
            d_z = numerics.backward_activation(upstream, stage.pre_activation)
            d_x, d_w, d_b = numerics.backward_dense(d_z, stage.input, p.weights)
            grads.append(LayerParams(d_w, d_b))
            param_idx -= 1
        elif layer.kind == 'maxpool':
            if upstream.ndim == 1:
                upstream = upstream.reshape(stage.output.shape)
            d_x = numerics.backward_maxpool(upstream, stage.pool_trace)
        else:
            if upstream.ndim == 1:
                upstream = upstream.reshape(stage.output.shape)
            p = params.layers[param_idx]
            d_z = numerics.backward_activation(upstream, stage.pre_activation)
            d_x, d_w, d_b = numerics.backward_convolve(d_z, stage.input, p.weights)
            grads.append(LayerParams(d_w, d_b))
            param_idx -= 1
        upstream = d_x
    grads.reverse()
    return NetworkParams(grads)


def predict_probabilities(params: NetworkParams, spec: NetworkSpec, image: np.ndarray) -> np.ndarray:
    return forward(params, spec, image, mode='eval').probabilities


# ============= SERIALIZATION =============

@dataclass
class ModelFile:
    params: NetworkParams
    spec: NetworkSpec
    metadata: Dict[str, Any] = field(default_factory=dict)


def serialize(params: NetworkParams, spec: NetworkSpec, metadata: Optional[Dict[str, Any]] = None) -> bytes:
    '''
    Layout: magic b'CNET' | uint16 version | uint32 header length | UTF-8 JSON
    header {"meta", "spec"} | per trainable layer: weights then biases as
    little-endian float32 in C order. All integers little-endian.
    '''
    _check_params(params, spec)
    header = json.dumps({'spec': spec.model_dump(mode='json'), 'meta': metadata or {}},
                        sort_keys=True, separators=(',', ':')).encode('utf-8')
    chunks = [_HEADER.pack(MODEL_MAGIC, MODEL_VERSION, len(header)), header]
    for p in params.layers:
        chunks.append(np.ascontiguousarray(p.weights, dtype='<f4').tobytes())
        chunks.append(np.ascontiguousarray(p.biases, dtype='<f4').tobytes())
    return b''.join(chunks)


def read_model(data: bytes) -> ModelFile:
    if len(data) < _HEADER.size:
        raise ModelFormatError('Model stream truncated before the header')
    magic, version, header_len = _HEADER.unpack_from(data, 0)
    if magic != MODEL_MAGIC:
        raise ModelFormatError(f'Bad magic {magic!r}, not a cellnet model')
    if version != MODEL_VERSION:
        raise ModelFormatError(f'Unsupported model format version {version}')
    start = _HEADER.size
    if len(data) < start + header_len:
        raise ModelFormatError('Model stream truncated inside the header')
    try:
        header = json.loads(data[start:start + header_len].decode('utf-8'))
        spec = NetworkSpec.model_validate(header['spec'])
    except (ValueError, KeyError) as e:
        raise ModelFormatError(f'Corrupt model header: {e}')

    offset = start + header_len
    layers = []
    for w_shape, b_shape in param_shapes(spec):
        arrays = []
        for shape in (w_shape, b_shape):
            count = int(np.prod(shape))
            end = offset + 4 * count
            if end > len(data):
                raise ModelFormatError('Model stream truncated inside the weights')
            arrays.append(np.frombuffer(data, dtype='<f4', count=count, offset=offset).astype(np.float64).reshape(shape))
            offset = end
        layers.append(LayerParams(*arrays))
    if offset != len(data):
        raise ModelFormatError(f'{len(data) - offset} unexpected trailing bytes in model stream')
    return ModelFile(NetworkParams(layers), spec, header.get('meta', {}))


def deserialize(data: bytes) -> Tuple[NetworkParams, NetworkSpec]:
    model = read_model(data)
    return model.params, model.spec


def save_model(path: str, params: NetworkParams, spec: NetworkSpec, metadata: Optional[Dict[str, Any]] = None) -> str:
    with open(path, 'wb') as f:
        f.write(serialize(params, spec, metadata))
    return path


def load_model(path: str) -> ModelFile:
    try:
        with open(path, 'rb') as f:
            return read_model(f.read())
    except OSError as e:
        raise ModelFormatError(f'Cannot read model file {path}: {e}')


# ============= FILTER EXPORT =============

def export_filters(params: NetworkParams, spec: NetworkSpec, conv_number: int, out_dir: str) -> List[str]:
    '''
    Write every filter of the conv_number-th convolution (1-based) as a
    min-max scaled 8-bit PNG, plus all raw weights as filters.csv.
    '''
    conv_layers = [i for i, layer in enumerate(spec.layers) if layer.kind == 'convolution']
    if not 1 <= conv_number <= len(conv_layers):
        raise SpecError(f'Network has {len(conv_layers)} convolution layers, asked for number {conv_number}')
    trainable_index = [i for i, layer in enumerate(spec.layers) if layer.trainable].index(conv_layers[conv_number - 1])
    weights = params.layers[trainable_index].weights

    os.makedirs(out_dir, exist_ok=True)
    paths, rows = [], []
    for i in range(weights.shape[0]):
        for j in range(weights.shape[1]):
            kernel = weights[i, j]
            span = kernel.max() - kernel.min()
            scaled = (kernel - kernel.min()) / span if span > 0 else np.zeros_like(kernel)
            path = os.path.join(out_dir, f'conv{conv_number}_in{i}_out{j}.png')
            save_image(path, scaled)
            paths.append(path)
            for (r, c), value in np.ndenumerate(kernel):
                rows.append({'input_map': i, 'output_map': j, 'row': r, 'col': c, 'weight': float(value)})
    csv_path = os.path.join(out_dir, f'conv{conv_number}_filters.csv')
    pd.DataFrame(rows).to_csv(csv_path, index=False)
    paths.append(csv_path)
    logger.info(f'Exported {weights.shape[0] * weights.shape[1]} filters of convolution {conv_number} to {out_dir}')
    return paths
