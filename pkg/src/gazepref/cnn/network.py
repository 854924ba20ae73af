"""Network state, forward/backward passes, SGD update and prediction."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import layers as L
from .spec import Conv, Dropout, Fc, MaxPool, NetworkSpec, Relu, SoftmaxOut, param_shapes


@dataclass
class LayerParams:
    w: np.ndarray
    b: np.ndarray


@dataclass
class NetworkState:
    spec: NetworkSpec
    params: list[LayerParams | None]
    velocity: list[LayerParams | None]
    seed: int = 0

    @property
    def dtype(self):
        for p in self.params:
            if p is not None:
                return p.w.dtype
        return np.dtype(np.float32)

    def learnable(self) -> list[tuple[int, str, np.ndarray]]:
        """(layer index, 'w'|'b', array) for every learnable tensor."""
        out = []
        for i, p in enumerate(self.params):
            if p is not None:
                out += [(i, "w", p.w), (i, "b", p.b)]
        return out

    def astype(self, dtype) -> NetworkState:
        def cast(ps):
            return [None if p is None else LayerParams(p.w.astype(dtype), p.b.astype(dtype))
                    for p in ps]
        return NetworkState(self.spec, cast(self.params), cast(self.velocity), self.seed)

    def copy(self) -> NetworkState:
        return self.astype(self.dtype)


def _zeros_like(params):
    return [None if p is None else LayerParams(np.zeros_like(p.w), np.zeros_like(p.b))
            for p in params]


def init_state(spec: NetworkSpec, seed: int = 0, dtype=np.float32) -> NetworkState:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng([seed, 0])
    params: list[LayerParams | None] = []
    for layer, shapes in zip(spec.layers, param_shapes(spec)):
        if shapes is None:
            params.append(None)
            continue
        wshape, bshape = shapes
        if isinstance(layer, Conv):
            k2 = wshape[2] * wshape[3]
            fan_in, fan_out = wshape[1] * k2, wshape[0] * k2
        else:
            fan_in, fan_out = wshape[1], wshape[0]
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-limit, limit, wshape).astype(dtype)
        params.append(LayerParams(w, np.zeros(bshape, dtype=dtype)))
    return NetworkState(spec, params, _zeros_like(params), seed)


def zero_state(spec: NetworkSpec, dtype=np.float32) -> NetworkState:
    params = [None if s is None else LayerParams(np.zeros(s[0], dtype), np.zeros(s[1], dtype))
              for s in param_shapes(spec)]
    return NetworkState(spec, params, _zeros_like(params))


@dataclass
class ForwardCache:
    state: NetworkState
    entries: list = field(default_factory=list)
    probs: np.ndarray | None = None
    mode: str = "infer"


def forward(state: NetworkState, batch: np.ndarray, mode: str = "infer",
            rng: np.random.Generator | None = None):
    """Return (class probabilities of shape (N, classes), cache for backward)."""
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    spec = state.spec
    x = np.asarray(batch, dtype=state.dtype)
    if x.ndim == 3 and len(spec.input_shape) == 3:
        x = x[:, None]
    if x.shape[1:] != tuple(spec.input_shape):
        raise ValueError(f"batch shape {x.shape[1:]} does not match {spec.input_shape}")
    if x.ndim == 4:
        x = np.ascontiguousarray(x.transpose(1, 0, 2, 3))  # layers work channel-major
    cache = ForwardCache(state, mode=mode)
    for layer, p in zip(spec.layers, state.params):
        if isinstance(layer, Conv):
            x, c = L.conv_forward(x, p.w, p.b, layer.stride)
        elif isinstance(layer, MaxPool):
            x, c = L.maxpool_forward(x, layer.size, layer.stride)
        elif isinstance(layer, Relu):
            x, c = L.relu_forward(x)
        elif isinstance(layer, Dropout):
            if mode == "train" and layer.p > 0:
                if rng is None:
                    raise ValueError("train-mode dropout needs an rng")
                x, c = L.dropout_forward(x, layer.p, rng)
            else:
                c = None
        elif isinstance(layer, (Fc, SoftmaxOut)):
            x, c = L.fc_forward(x, p.w, p.b)
        cache.entries.append(c)
    probs = L.softmax(x)
    cache.probs = probs
    return probs, cache


def backward(cache: ForwardCache, labels) -> list[LayerParams | None]:
    """Gradients of the mean cross-entropy loss for every learnable layer."""
    state, probs = cache.state, cache.probs
    labels = np.asarray(labels)
    n, classes = probs.shape
    if labels.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {labels.shape}")
    if labels.min() < 0 or labels.max() >= classes:
        raise ValueError(f"labels must lie in [0, {classes})")
    d = probs.copy()
    d[np.arange(n), labels] -= 1
    d /= n

    grads: list[LayerParams | None] = [None] * len(state.params)
    layers = state.spec.layers
    for i in range(len(layers) - 1, -1, -1):
        layer, c, p = layers[i], cache.entries[i], state.params[i]
        if isinstance(layer, (Fc, SoftmaxOut)):
            d, dw, db = L.fc_backward(d, c, p.w)
            grads[i] = LayerParams(dw, db)
        elif isinstance(layer, Conv):
            d, dw, db = L.conv_backward(d, c, p.w, need_dx=i > 0)
            grads[i] = LayerParams(dw, db)
        elif isinstance(layer, MaxPool):
            d = L.maxpool_backward(d, c)
        elif isinstance(layer, Relu):
            d = L.relu_backward(d, c)
        elif isinstance(layer, Dropout):
            if c is not None:
                d = d * c
    return grads


def loss(probs: np.ndarray, labels) -> float:
    return L.cross_entropy(probs, np.asarray(labels))


def sgd_step(state: NetworkState, grads, lr: float, momentum: float) -> NetworkState:
    """In-place momentum update: v <- momentum*v - lr*g; w <- w + v."""
    dt = state.dtype.type
    lr, momentum = dt(lr), dt(momentum)
    for p, v, g in zip(state.params, state.velocity, grads):
        if p is None:
            continue
        for name in ("w", "b"):
            vel = getattr(v, name)
            vel *= momentum
            vel -= lr * getattr(g, name)
            getattr(p, name)[...] += vel
    return state


def scale_inputs(images: np.ndarray) -> np.ndarray:
    """uint8 pixels -> float32 in [0, 1], shape (N, 1, H, W)."""
    x = np.asarray(images, dtype=np.float32) / np.float32(255.0)
    return x[:, None] if x.ndim == 3 else x


def predict_batch(state: NetworkState, images: np.ndarray, chunk: int = 500):
    """(classes, probabilities) for a stack of uint8 images."""
    probs = []
    for start in range(0, len(images), chunk):
        p, _ = forward(state, scale_inputs(images[start:start + chunk]), "infer")
        probs.append(p)
    probs = np.concatenate(probs) if probs else np.zeros((0, state.spec.classes), state.dtype)
    return probs.argmax(axis=1), probs


def predict(state: NetworkState, img) -> tuple[int, np.ndarray]:
    """Class (argmax, ties to the lower index) and probabilities for one image."""
    pixels = getattr(img, "pixels", img)
    classes, probs = predict_batch(state, np.asarray(pixels)[None])
    return int(classes[0]), probs[0]
