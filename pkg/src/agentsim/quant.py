"""Symmetric int8 quantization and reference float/int8 inference.

Tensors are NCHW numpy arrays. The float reference runs in float32. Integer
MACs are evaluated with float BLAS on int8-valued operands, in float32 when
every partial sum stays below 2**24 and float64 otherwise, so the result
always equals an exact integer accumulation.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .exceptions import EmptyDataset, ShapeMismatch
from .graph import LayerKind, ModelGraph, infer_shapes

QMIN, QMAX = -128, 127
ACC_LIMIT = 2**31
DEFAULT_EPSILON = 1e-8


@dataclass(frozen=True)
class QuantParams:
    scale: float
    zero_point: int = 0

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError("scale must be > 0")
        if not QMIN <= self.zero_point <= QMAX:
            raise ValueError("zero_point must lie in [-128, 127]")


@dataclass(frozen=True)
class QuantTensor:
    data: np.ndarray
    params: QuantParams

    def __post_init__(self):
        if self.data.dtype != np.int8:
            raise TypeError("QuantTensor data must be int8")

    @property
    def shape(self):
        return self.data.shape


@dataclass(frozen=True)
class EvalResult:
    top1_accuracy: float
    num_samples: int


def calibrate(values, epsilon=DEFAULT_EPSILON) -> QuantParams:
    """Symmetric min-max scale so the largest magnitude maps to 127."""
    values = np.asarray(values)
    if values.size == 0:
        raise ValueError("cannot calibrate on an empty tensor")
    peak = float(np.max(np.abs(values)))
    return QuantParams(max(peak / 127.0, epsilon), 0)


def quantize(values, params: QuantParams) -> QuantTensor:
    q = np.rint(np.asarray(values, dtype=np.float64) / params.scale) + params.zero_point
    return QuantTensor(np.clip(q, QMIN, QMAX).astype(np.int8), params)


def dequantize(q: QuantTensor) -> np.ndarray:
    return q.params.scale * (q.data.astype(np.float64) - q.params.zero_point)


def _requantize(real, scale):
    return np.clip(np.rint(real / scale), QMIN, QMAX).astype(np.int8)


# -- operators ---------------------------------------------------------------
# Internally activations are NHWC so each kernel tap is one (N*Ho*Wo, C) @ (C, O)
# matmul.

def _pad_nhwc(x, padding):
    if not padding:
        return x
    return np.pad(x, ((0, 0), (padding, padding), (padding, padding), (0, 0)))


def _out_size(size, k, stride, padding):
    return (size + 2 * padding - k) // stride + 1


def _conv_nhwc(x, w, stride, padding, dtype=np.float32):
    """Convolution of NHWC ``x`` with (O,C,kh,kw) ``w`` as one im2col matmul in ``dtype``."""
    n, h, wd, c = x.shape
    o, _, kh, kw = w.shape
    ho, wo = _out_size(h, kh, stride, padding), _out_size(wd, kw, stride, padding)
    xp = _pad_nhwc(x, padding)
    cols = np.empty((n, ho, wo, kh, kw, c), dtype=dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j, :] = xp[:, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride, :]
    wm = w.transpose(2, 3, 1, 0).reshape(-1, o).astype(dtype)
    return (cols.reshape(-1, kh * kw * c) @ wm).reshape(n, ho, wo, o)


def _pool_sum_nhwc(x, kh, kw, stride, padding):
    n, h, wd, c = x.shape
    ho, wo = _out_size(h, kh, stride, padding), _out_size(wd, kw, stride, padding)
    xp = _pad_nhwc(x, padding)
    out = np.zeros((n, ho, wo, c), dtype=np.result_type(x.dtype, np.int64) if x.dtype.kind in "iu" else x.dtype)
    for i in range(kh):
        for j in range(kw):
            out += xp[:, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride, :]
    return out


def conv2d(x, w, stride=1, padding=0):
    """Direct NCHW convolution; ``x`` (N,C,H,W), ``w`` (O,C,kh,kw)."""
    y = _conv_nhwc(np.asarray(x).transpose(0, 2, 3, 1), np.asarray(w), stride, padding, np.float64)
    return np.ascontiguousarray(y.transpose(0, 3, 1, 2))


def _check_weight(layer, w):
    if layer.kind is LayerKind.CONV2D:
        want = (layer.out_channels, layer.in_channels, layer.kernel_h, layer.kernel_w)
    else:
        want = (layer.out_channels, layer.in_channels)
    if w is None or tuple(w.shape) != want:
        got = None if w is None else tuple(w.shape)
        raise ShapeMismatch(f"weight shape {got}, expected {want}", layer.id)


def _check_input(graph, x):
    s = graph.input_shape
    if x.ndim != 4 or x.shape[1:] != (s.channels, s.height, s.width):
        raise ShapeMismatch(
            f"input shape {x.shape[1:]} does not match graph input "
            f"{(s.channels, s.height, s.width)}"
        )


def _bias(biases, layer):
    if not biases or layer.id not in biases:
        return None
    b = np.asarray(biases[layer.id], dtype=np.float64)
    if b.shape != (layer.out_channels,):
        raise ShapeMismatch(f"bias shape {b.shape}, expected ({layer.out_channels},)", layer.id)
    return b


def float_forward(graph: ModelGraph, weights, x, biases=None, return_activations=False):
    """Full-precision forward pass; returns logits of shape (N, classes).

    With ``return_activations`` also returns every layer's output (NHWC).
    """
    x = np.asarray(x, dtype=np.float32)
    _check_input(graph, x)
    x = x.transpose(0, 2, 3, 1)
    acts = {}
    for layer in graph.layers:
        src = acts[layer.predecessors[0]] if layer.predecessors else x
        k = layer.kind
        if k in (LayerKind.CONV2D, LayerKind.FULLY_CONNECTED):
            w = weights.get(layer.id)
            _check_weight(layer, w)
            w = np.asarray(w, dtype=np.float32)
            if k is LayerKind.CONV2D:
                y = _conv_nhwc(src, w, layer.stride, layer.padding)
            else:
                y = (src.reshape(src.shape[0], -1) @ w.T)[:, None, None, :]
            b = _bias(biases, layer)
            if b is not None:
                y = y + b.astype(np.float32)
        elif k is LayerKind.POOL2D:
            y = _pool_sum_nhwc(src, layer.kernel_h, layer.kernel_w, layer.stride, layer.padding)
            y = y / np.float32(layer.kernel_h * layer.kernel_w)
        elif k is LayerKind.ACTIVATION:
            y = np.maximum(src, np.float32(0))
        else:
            y = src + acts[layer.predecessors[1]]
        acts[layer.id] = y
    logits = acts[graph.layers[-1].id].reshape(x.shape[0], -1)
    return (logits, acts) if return_activations else logits


def calibrate_activations(graph, weights, x_calib, biases=None, epsilon=DEFAULT_EPSILON):
    """Per-layer output QuantParams (plus key ``"input"``) from a float pass."""
    x_calib = np.asarray(x_calib, dtype=np.float64)
    if len(x_calib) == 0:
        raise EmptyDataset("calibration batch is empty")
    _, acts = float_forward(graph, weights, x_calib, biases, return_activations=True)
    params = {"input": calibrate(x_calib, epsilon)}
    for lid, a in acts.items():
        params[lid] = calibrate(a, epsilon)
    return params


def quantize_weights(weights, epsilon=DEFAULT_EPSILON):
    return {lid: quantize(w, calibrate(w, epsilon)) for lid, w in weights.items()}


def _acc_dtype(fan_in):
    # float32 sums of int8 products stay exact below 2**24
    return np.float32 if fan_in * 128 * 128 < 2**24 else np.float64


def int8_forward(graph: ModelGraph, qweights, x_q: QuantTensor, act_params, biases=None,
                 check_overflow=False, return_activations=False):
    """Integer-domain forward pass; returns dequantized logits.

    Conv/FC layers accumulate int8 x int8 products (plus a bias rounded to the
    accumulator scale), then requantize to the layer's calibrated output
    scale. Pooling and adds requantize to their own calibrated scale; ReLU
    keeps its input scale. The final layer's accumulator is dequantized
    directly. ``return_activations`` also returns every layer's dequantized
    output (NHWC).
    """
    _check_input(graph, x_q.data)
    last = graph.layers[-1].id
    vals = {}
    scales = {}
    n = x_q.data.shape[0]
    x = x_q.data.transpose(0, 2, 3, 1)
    for layer in graph.layers:
        if layer.predecessors:
            src, s_in = vals[layer.predecessors[0]], scales[layer.predecessors[0]]
        else:
            src, s_in = x, x_q.params.scale
        k = layer.kind
        if k in (LayerKind.CONV2D, LayerKind.FULLY_CONNECTED):
            qw = qweights.get(layer.id)
            _check_weight(layer, None if qw is None else qw.data)
            fan_in = int(np.prod(qw.data.shape[1:]))
            dt = _acc_dtype(fan_in)
            if k is LayerKind.CONV2D:
                acc = _conv_nhwc(src, qw.data, layer.stride, layer.padding, dtype=dt)
            else:
                acc = (src.reshape(n, -1).astype(dt) @ qw.data.T.astype(dt))[:, None, None, :]
            acc = acc.astype(np.float64)
            acc_scale = s_in * qw.params.scale
            b = _bias(biases, layer)
            if b is not None:
                acc = acc + np.rint(b / acc_scale)
            if check_overflow and np.max(np.abs(acc), initial=0) >= ACC_LIMIT:
                raise OverflowError(f"layer {layer.id}: accumulator exceeds 32 bits")
            if layer.id == last:
                logits = (acc * acc_scale).reshape(n, -1)
                return _finish(logits, vals, scales, return_activations)
            s_out = act_params[layer.id].scale
            y = _requantize(acc * acc_scale, s_out)
        elif k is LayerKind.POOL2D:
            total = _pool_sum_nhwc(src.astype(np.int64), layer.kernel_h, layer.kernel_w,
                                   layer.stride, layer.padding)
            s_out = act_params[layer.id].scale
            y = _requantize(total * (s_in / (layer.kernel_h * layer.kernel_w)), s_out)
        elif k is LayerKind.ACTIVATION:
            y = np.maximum(src, 0).astype(np.int8)
            s_out = s_in
        else:
            other = layer.predecessors[1]
            s_out = act_params[layer.id].scale
            real = src.astype(np.float64) * s_in + vals[other].astype(np.float64) * scales[other]
            y = _requantize(real, s_out)
        vals[layer.id] = y
        scales[layer.id] = s_out
        if layer.id == last:
            return _finish((y.astype(np.float64) * s_out).reshape(n, -1), vals, scales, return_activations)
    raise AssertionError("unreachable")


def _finish(logits, vals, scales, return_activations):
    if not return_activations:
        return logits
    return logits, {lid: v.astype(np.float64) * scales[lid] for lid, v in vals.items()}


# -- weights, datasets ---------------------------------------------------------

def init_weights(graph: ModelGraph, seed=0):
    """He-normal weights; convs feeding a residual add are scaled by 1/sqrt(2)."""
    rng = np.random.default_rng(seed)
    feeds_add = {
        p for layer in graph.layers if layer.kind is LayerKind.ELEMENTWISE_ADD
        for p in layer.predecessors
    }
    weights = {}
    for layer in graph.layers:
        if layer.kind is LayerKind.CONV2D:
            shape = (layer.out_channels, layer.in_channels, layer.kernel_h, layer.kernel_w)
        elif layer.kind is LayerKind.FULLY_CONNECTED:
            shape = (layer.out_channels, layer.in_channels)
        else:
            continue
        fan_in = int(np.prod(shape[1:]))
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
        if layer.id in feeds_add:
            w /= np.sqrt(2.0)
        weights[layer.id] = w.astype(np.float32)
    return weights


def fit_readout(graph: ModelGraph, weights, X, y, biases=None, shrinkage=1.0):
    """Closed-form classifier head over the frozen random features.

    Diagonal linear discriminant: class means and per-feature variances of the
    pooled features give the last layer's weights and bias. Variances are
    shrunk toward their mean by ``shrinkage`` so no feature gets an outsized
    weight. Nothing upstream is trained. Returns ``(weights, biases)``.
    """
    head = graph.layers[-1]
    if head.kind is not LayerKind.FULLY_CONNECTED:
        raise ValueError("last layer must be FullyConnected")
    y = np.asarray(y)
    _, acts = float_forward(graph, weights, X, biases, return_activations=True)
    feats = acts[head.predecessors[0]].reshape(len(X), -1).astype(np.float64)
    mu = feats.mean(axis=0)
    var = feats.var(axis=0)
    var = var + shrinkage * var.mean() + 1e-12
    w = np.zeros((head.out_channels, head.in_channels))
    b = np.zeros(head.out_channels)
    for k in range(head.out_channels):
        sel = feats[y == k]
        if len(sel):
            d = sel.mean(axis=0) - mu
            w[k] = d / var
            b[k] = -w[k] @ mu - 0.5 * np.sum(d * d / var)
    norm = np.max(np.abs(w)) or 1.0
    new_w, new_b = dict(weights), dict(biases or {})
    new_w[head.id] = (w / norm).astype(np.float32)
    new_b[head.id] = (b / norm).astype(np.float32)
    return new_w, new_b


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray

    def __len__(self):
        return len(self.y)

    def subset(self, start, stop):
        return Dataset(self.X[start:stop], self.y[start:stop])

    def save(self, directory):
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        X = np.ascontiguousarray(self.X, dtype="<f4")
        (d / "images.bin").write_bytes(X.tobytes())
        (d / "labels.txt").write_text("".join(f"{int(v)}\n" for v in self.y))
        meta = {"count": int(X.shape[0]), "shape": list(X.shape[1:]), "dtype": "float32"}
        (d / "manifest.json").write_text(json.dumps(meta, indent=2) + "\n")

    @classmethod
    def load(cls, directory):
        d = Path(directory)
        meta = json.loads((d / "manifest.json").read_text())
        X = np.frombuffer((d / "images.bin").read_bytes(), dtype="<f4")
        X = X.reshape([meta["count"], *meta["shape"]]).astype(np.float32)
        y = np.array([int(v) for v in (d / "labels.txt").read_text().split()], dtype=np.int64)
        if len(y) != len(X):
            raise ValueError(f"{d}: {len(X)} images but {len(y)} labels")
        return cls(X, y)


def make_synthetic_dataset(n, num_classes=10, shape=(3, 32, 32), seed=0, noise=1.0,
                           offset_scale=3.0, pattern_seed=1234):
    """Seeded labeled images: a per-class pattern plus white noise.

    Each class pattern is a coarse 4x4 grid upsampled to full size plus a
    per-channel offset of size ``offset_scale``; the offsets survive global
    pooling, which keeps the classes separable for random conv features.
    ``pattern_seed`` fixes the class patterns so that datasets drawn with
    different ``seed`` values share one labeling task.
    """
    c, h, w = shape
    prng = np.random.default_rng(pattern_seed)
    coarse = prng.normal(size=(num_classes, c, 4, 4))
    offset = offset_scale * prng.normal(size=(num_classes, c, 1, 1))
    reps = (-(-h // 4), -(-w // 4))
    patterns = np.kron(coarse, np.ones(reps))[:, :, :h, :w] + offset
    rng = np.random.default_rng(seed)
    y = rng.integers(0, num_classes, size=n)
    gain = rng.uniform(0.8, 1.2, size=(n, 1, 1, 1))
    X = gain * patterns[y] + noise * rng.normal(size=(n, c, h, w))
    return Dataset(X.astype(np.float32), y.astype(np.int64))


def save_weights(directory, weights, biases=None):
    """Write one raw little-endian file per tensor plus a text manifest.

    ``weights`` maps layer id to float arrays or :class:`QuantTensor`;
    ``biases`` maps layer id to float vectors.
    """
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    lines = ["# agentsim weights v1", "# layer role file dtype shape scale"]
    entries = [(lid, "weight", w) for lid, w in weights.items()]
    entries += [(lid, "bias", b) for lid, b in (biases or {}).items()]
    for lid, role, w in sorted(entries, key=lambda e: (e[0], e[1] == "bias")):
        if isinstance(w, QuantTensor):
            arr, dtype, scale = w.data, "int8", repr(w.params.scale)
        else:
            arr, dtype, scale = np.asarray(w, dtype="<f4"), "float32", "-"
        fname = f"layer_{lid}_{role}.bin"
        (d / fname).write_bytes(np.ascontiguousarray(arr).tobytes())
        dims = "x".join(str(s) for s in arr.shape)
        lines.append(f"{lid} {role} {fname} {dtype} {dims} {scale}")
    (d / "manifest.txt").write_text("\n".join(lines) + "\n")


def load_weights(directory):
    """Inverse of :func:`save_weights`; returns ``(weights, biases)``."""
    d = Path(directory)
    weights, biases = {}, {}
    for line in (d / "manifest.txt").read_text().splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        lid, role, fname, dtype, dims, scale = line.split()
        shape = tuple(int(s) for s in dims.split("x"))
        raw = (d / fname).read_bytes()
        if dtype == "int8":
            arr = np.frombuffer(raw, dtype=np.int8).reshape(shape).copy()
            value = QuantTensor(arr, QuantParams(float(scale)))
        else:
            value = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)
        (biases if role == "bias" else weights)[int(lid)] = value
    return weights, biases


# -- evaluation ----------------------------------------------------------------

def _batched_logits(fn, X, batch_size):
    return np.concatenate([fn(X[i:i + batch_size]) for i in range(0, len(X), batch_size)])


def eval_accuracy(graph, weights, dataset: Dataset, mode="int8", act_params=None,
                  biases=None, calibration_size=128, batch_size=256) -> EvalResult:
    """Top-1 accuracy in percent.

    In int8 mode without ``act_params`` the first ``calibration_size``
    samples of ``dataset`` calibrate the activation scales.
    """
    if len(dataset) == 0:
        raise EmptyDataset("dataset has no samples")
    clf = QuantizedClassifier(graph, weights, biases=biases, mode=mode,
                              calibration_size=calibration_size, batch_size=batch_size)
    clf.fit(dataset.X, act_params=act_params)
    pred = clf.predict(dataset.X)
    correct = int(np.sum(pred == dataset.y))
    return EvalResult(100.0 * correct / len(dataset), len(dataset))


class QuantizedClassifier(ClassifierMixin, BaseEstimator):
    """Image classifier running a :class:`ModelGraph` in float or int8 mode.

    ``fit`` only calibrates activation scales on the first
    ``calibration_size`` rows of ``X``; weights are fixed.
    """

    def __init__(self, graph=None, weights=None, biases=None, mode="int8", calibration_size=128,
                 batch_size=256, epsilon=DEFAULT_EPSILON):
        self.graph = graph
        self.weights = weights
        self.biases = biases
        self.mode = mode
        self.calibration_size = calibration_size
        self.batch_size = batch_size
        self.epsilon = epsilon

    def fit(self, X, y=None, act_params=None):
        if self.mode not in ("float", "int8"):
            raise ValueError(f"mode must be 'float' or 'int8', got {self.mode!r}")
        X = np.asarray(X)
        if len(X) == 0:
            raise EmptyDataset("no samples to fit on")
        infer_shapes(self.graph)
        self.classes_ = np.arange(self.graph.layers[-1].out_channels)
        if self.mode == "int8":
            if act_params is None:
                act_params = calibrate_activations(
                    self.graph, self.weights, X[: self.calibration_size], self.biases, self.epsilon
                )
            self.act_params_ = act_params
            self.qweights_ = quantize_weights(self.weights, self.epsilon)
        else:
            self.act_params_ = None
        return self

    def decision_function(self, X):
        check_is_fitted(self, "classes_")
        X = np.asarray(X, dtype=np.float64)
        if self.mode == "float":
            fn = lambda xb: float_forward(self.graph, self.weights, xb, self.biases)  # noqa: E731
        else:
            fn = lambda xb: int8_forward(  # noqa: E731
                self.graph, self.qweights_, quantize(xb, self.act_params_["input"]),
                self.act_params_, self.biases,
            )
        return _batched_logits(fn, X, self.batch_size)

    def predict(self, X):
        return self.classes_[np.argmax(self.decision_function(X), axis=1)]


__all__ = [
    "QuantParams", "QuantTensor", "EvalResult", "Dataset", "QuantizedClassifier",
    "calibrate", "quantize", "dequantize", "float_forward", "int8_forward",
    "calibrate_activations", "quantize_weights", "init_weights", "fit_readout",
    "eval_accuracy", "make_synthetic_dataset", "save_weights", "load_weights",
]
