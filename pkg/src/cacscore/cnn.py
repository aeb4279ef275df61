"""A small convolutional classifier written directly against numpy.

Activations use a channels-first, batch-second layout ``(C, N, H, W)``.
A single tensor ``(C, H, W)`` is accepted by the layer functions and
treated as a batch of one. Convolutions are cross-correlations (no
kernel flip) in valid mode with 3x3 kernels.

The default :class:`Network` is the pixel classifier: seven valid 3x3
convolutions (16 kernels each, 32 in the last) with ReLU, 2x2 max-pooling
after the first two, a 64-unit ReLU dense layer with dropout, and a
two-way softmax head over (non-CAC, CAC). A 51x51 input reaches the dense
layer as a 32x1x1 feature map.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

DEFAULT_CONV_CHANNELS = (16, 16, 16, 16, 16, 16, 32)
DEFAULT_POOL_AFTER = (0, 1)
DEFAULT_INPUT_SIZE = 51
DEFAULT_DENSE_UNITS = 64
CAC = 1


class NonFiniteError(FloatingPointError):
    """NaN or Inf showed up in an activation or loss."""


def _as_batch(x: np.ndarray) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        return x[:, None], True
    if x.ndim == 4:
        return x, False
    raise ValueError(f"expected a (C, H, W) or (C, N, H, W) tensor, got shape {x.shape}")


def _check_finite(name: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values in {name}")


# -- layer primitives -------------------------------------------------------------


def _im2col(x: np.ndarray) -> np.ndarray:
    """(C, N, H, W) -> (C*9, N*(H-2)*(W-2)), rows ordered (c, u, v)."""
    C, N, H, W = x.shape
    Ho, Wo = H - 2, W - 2
    cols = np.empty((C, 3, 3, N, Ho, Wo))
    for u in range(3):
        for v in range(3):
            cols[:, u, v] = x[:, :, u : u + Ho, v : v + Wo]
    return cols.reshape(C * 9, N * Ho * Wo)


def _col2im(dcols: np.ndarray, shape) -> np.ndarray:
    C, N, H, W = shape
    Ho, Wo = H - 2, W - 2
    dcols = dcols.reshape(C, 3, 3, N, Ho, Wo)
    dx = np.zeros(shape)
    for u in range(3):
        for v in range(3):
            dx[:, :, u : u + Ho, v : v + Wo] += dcols[:, u, v]
    return dx


def _conv_forward(x: np.ndarray, kernels: np.ndarray, biases: np.ndarray):
    C, N, H, W = x.shape
    K = kernels.shape[0]
    if kernels.shape[1:] != (C, 3, 3) or biases.shape != (K,):
        raise ValueError(
            f"kernel shape {kernels.shape} / bias shape {biases.shape} do not fit input channels {C}"
        )
    if H < 3 or W < 3:
        raise ValueError(f"valid 3x3 convolution needs H, W >= 3, got {H}x{W}")
    cols = _im2col(x)
    out = kernels.reshape(K, -1) @ cols
    out += biases[:, None]
    return out.reshape(K, N, H - 2, W - 2), cols


def _to_phases(x: np.ndarray) -> np.ndarray:
    """(C, N, H, W) -> (C, 2, 2, N, ceil(H/2), ceil(W/2)) split by row/column parity."""
    C, N, H, W = x.shape
    Hp, Wp = -(-H // 2), -(-W // 2)
    ph = np.zeros((C, 2, 2, N, Hp, Wp))
    for pr in range(2):
        for pc in range(2):
            part = x[:, :, pr::2, pc::2]
            ph[:, pr, pc, :, : part.shape[2], : part.shape[3]] = part
    return ph


def _from_phases(ph: np.ndarray, shape) -> np.ndarray:
    out = np.empty(shape)
    for pr in range(2):
        for pc in range(2):
            part = out[:, :, pr::2, pc::2]
            part[...] = ph[:, pr, pc, :, : part.shape[2], : part.shape[3]]
    return out


def _im2col_pooled(x: np.ndarray) -> np.ndarray:
    """Columns for a valid 3x3 conv evaluated only where 2x2 pooling reads.

    Rows are ordered (c, u, v); columns (window position, n, i, j) so the
    product reshapes to ``(K, 4, N, H2, W2)`` with window position in
    row-major order. The trailing odd row/column that pooling drops is
    never computed.
    """
    C, N, H, W = x.shape
    H2, W2 = (H - 2) // 2, (W - 2) // 2
    ph = _to_phases(x)
    cols = np.empty((C, 3, 3, 2, 2, N, H2, W2))
    for u in range(3):
        for v in range(3):
            for pu in range(2):
                for pv in range(2):
                    # input row 2i + u + pu lives in phase (r % 2) at row i + r // 2
                    r, c = u + pu, v + pv
                    cols[:, u, v, pu, pv] = ph[:, r % 2, c % 2, :, r // 2 : r // 2 + H2, c // 2 : c // 2 + W2]
    return cols.reshape(C * 9, 4 * N * H2 * W2)


def _col2im_pooled(dcols: np.ndarray, shape) -> np.ndarray:
    C, N, H, W = shape
    H2, W2 = (H - 2) // 2, (W - 2) // 2
    dcols = dcols.reshape(C, 3, 3, 2, 2, N, H2, W2)
    ph = np.zeros((C, 2, 2, N, -(-H // 2), -(-W // 2)))
    for u in range(3):
        for v in range(3):
            for pu in range(2):
                for pv in range(2):
                    r, c = u + pu, v + pv
                    ph[:, r % 2, c % 2, :, r // 2 : r // 2 + H2, c // 2 : c // 2 + W2] += dcols[:, u, v, pu, pv]
    return _from_phases(ph, shape)


def _conv_pool_forward(x: np.ndarray, kernels: np.ndarray, biases: np.ndarray, with_argmax: bool):
    """maxpool2x2(conv2d_valid(x)) computed in one pass."""
    C, N, H, W = x.shape
    K = kernels.shape[0]
    if kernels.shape[1:] != (C, 3, 3) or biases.shape != (K,):
        raise ValueError(
            f"kernel shape {kernels.shape} / bias shape {biases.shape} do not fit input channels {C}"
        )
    if H < 4 or W < 4:
        raise ValueError(f"conv + 2x2 pooling needs H, W >= 4, got {H}x{W}")
    cols = _im2col_pooled(x)
    z = kernels.reshape(K, -1) @ cols
    z += biases[:, None]
    z = z.reshape(K, 4, N, (H - 2) // 2, (W - 2) // 2)
    top = np.maximum(z[:, 0], z[:, 1])
    bottom = np.maximum(z[:, 2], z[:, 3])
    out = np.maximum(top, bottom)
    arg = None
    if with_argmax:
        # strict comparisons keep ties on the earlier window position
        arg = np.where(bottom > top, 2 + (z[:, 3] > z[:, 2]), (z[:, 1] > z[:, 0])).astype(np.int8)
    return out, arg, cols


def _unpool_pooled(dout: np.ndarray, arg: np.ndarray) -> np.ndarray:
    """Route pooled gradients back to the (K, 4, N, H2, W2) conv layout."""
    K, N, H2, W2 = dout.shape
    dz = np.empty((K, 4, N, H2, W2))
    for k in range(4):
        np.multiply(dout, arg == k, out=dz[:, k])
    return dz


def conv2d_valid(x: np.ndarray, kernels: np.ndarray, biases: np.ndarray) -> np.ndarray:
    """``out[k, i, j] = b[k] + sum_{c,u,v} x[c, i+u, j+v] * w[k, c, u, v]``."""
    xb, single = _as_batch(x)
    out, _ = _conv_forward(xb, np.asarray(kernels, dtype=np.float64), np.asarray(biases, dtype=np.float64))
    return out[:, 0] if single else out


def conv2d_valid_backward(dout, x, kernels, need_input_grad=True):
    """Gradients of :func:`conv2d_valid` w.r.t. (input, kernels, biases)."""
    xb, single = _as_batch(x)
    db_, _ = _as_batch(dout)
    K = kernels.shape[0]
    cols = _im2col(xb)
    d2 = db_.reshape(K, -1)
    dk = (d2 @ cols.T).reshape(kernels.shape)
    dbias = d2.sum(axis=1)
    dx = None
    if need_input_grad:
        dx = _col2im(kernels.reshape(K, -1).T @ d2, xb.shape)
        if single:
            dx = dx[:, 0]
    return dx, dk, dbias


def _pool_views(x: np.ndarray, H2: int, W2: int):
    # the four members of each window, in row-major window order
    return [x[:, :, u : 2 * H2 : 2, v : 2 * W2 : 2] for u in (0, 1) for v in (0, 1)]


def _pool_forward(x: np.ndarray, with_argmax: bool = True):
    C, N, H, W = x.shape
    if H < 2 or W < 2:
        raise ValueError(f"2x2 pooling needs H, W >= 2, got {H}x{W}")
    a, b, c, d = _pool_views(x, H // 2, W // 2)
    top = np.maximum(a, b)
    bottom = np.maximum(c, d)
    out = np.maximum(top, bottom)
    if not with_argmax:
        return out, None
    # strict comparisons keep ties on the earlier element in window order
    arg = np.where(bottom > top, 2 + (d > c), (b > a).astype(np.int8)).astype(np.int8)
    return out, arg


def _pool_backward(dout: np.ndarray, arg: np.ndarray, in_shape) -> np.ndarray:
    C, N, H, W = in_shape
    dx = np.zeros(in_shape)
    for k, view in enumerate(_pool_views(dx, H // 2, W // 2)):
        view[...] = np.where(arg == k, dout, 0.0)
    return dx


def maxpool2x2(x: np.ndarray):
    """Non-overlapping 2x2 max-pooling, stride 2, trailing odd row/column dropped.

    Returns ``(pooled, argmax)`` where argmax indexes the window in row-major
    order (0 top-left .. 3 bottom-right).
    """
    xb, single = _as_batch(x)
    out, arg = _pool_forward(xb)
    if single:
        return out[:, 0], arg[:, 0]
    return out, arg


def maxpool2x2_backward(dout, argmax, in_shape) -> np.ndarray:
    db_, single = _as_batch(dout)
    arg = argmax[:, None] if single else argmax
    shape = tuple(in_shape)
    if single:
        shape = (shape[0], 1) + shape[1:]
    dx = _pool_backward(db_, arg, shape)
    return dx[:, 0] if single else dx


def relu(t: np.ndarray) -> np.ndarray:
    return np.maximum(t, 0.0)


def relu_backward(dout: np.ndarray, x: np.ndarray) -> np.ndarray:
    return dout * (x > 0)


def dropout_apply(activations: np.ndarray, rate: float, rng: np.random.Generator):
    """Inverted dropout.

    Returns ``(masked, mask)`` where ``mask`` holds the per-unit multiplier:
    0 for dropped units and ``1 / (1 - rate)`` for survivors.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    activations = np.asarray(activations, dtype=np.float64)
    if rate == 0.0:
        mask = np.ones_like(activations)
    else:
        keep = rng.random(activations.shape) >= rate
        mask = keep / (1.0 - rate)
    return activations * mask, mask


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return shifted / shifted.sum(axis=-1, keepdims=True)


# -- network ----------------------------------------------------------------------


class Network:
    """Conv stack + dense layer + softmax head, parameters held in ``params``.

    Parameter order (also the checkpoint order): ``conv1.weight``,
    ``conv1.bias``, ..., ``dense.weight`` (units x features),
    ``dense.bias``, ``head.weight`` (2 x units), ``head.bias``.
    Features entering the dense layer are flattened in (C, H, W) order.
    """

    def __init__(
        self,
        conv_channels=DEFAULT_CONV_CHANNELS,
        pool_after=DEFAULT_POOL_AFTER,
        input_size: int = DEFAULT_INPUT_SIZE,
        in_channels: int = 1,
        dense_units: int = DEFAULT_DENSE_UNITS,
        activation: bool = True,
        n_classes: int = 2,
    ):
        self.conv_channels = tuple(int(k) for k in conv_channels)
        self.pool_after = tuple(sorted(int(i) for i in pool_after))
        self.input_size = int(input_size)
        self.in_channels = int(in_channels)
        self.dense_units = int(dense_units)
        self.activation = bool(activation)
        self.n_classes = int(n_classes)
        if not self.conv_channels:
            raise ValueError("network needs at least one convolution")
        if any(i >= len(self.conv_channels) or i < 0 for i in self.pool_after):
            raise ValueError(f"pool_after {self.pool_after} refers to missing conv layers")
        self._trace = self._shape_trace()
        self.params: dict[str, np.ndarray] = {
            name: np.zeros(shape) for name, shape in self.param_shapes().items()
        }

    @classmethod
    def pixel_classifier(cls) -> "Network":
        return cls()

    def _shape_trace(self) -> list[tuple[str, tuple[int, int, int]]]:
        c, s = self.in_channels, self.input_size
        trace = [("input", (c, s, s))]
        for i, k in enumerate(self.conv_channels):
            if s < 3:
                raise ValueError(f"conv{i + 1} receives {s}x{s}; valid 3x3 needs >= 3")
            c, s = k, s - 2
            trace.append((f"conv{i + 1}", (c, s, s)))
            if i in self.pool_after:
                if s < 2:
                    raise ValueError(f"pool after conv{i + 1} receives {s}x{s}")
                s //= 2
                trace.append((f"pool{i + 1}", (c, s, s)))
        return trace

    def shape_trace(self) -> list[tuple[str, tuple[int, int, int]]]:
        """Per-layer activation shapes (C, H, W) for one input."""
        return list(self._trace)

    @property
    def feature_shape(self) -> tuple[int, int, int]:
        """Shape of the feature map entering the dense layer."""
        return self._trace[-1][1]

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes: dict[str, tuple[int, ...]] = {}
        c = self.in_channels
        for i, k in enumerate(self.conv_channels):
            shapes[f"conv{i + 1}.weight"] = (k, c, 3, 3)
            shapes[f"conv{i + 1}.bias"] = (k,)
            c = k
        features = int(np.prod(self.feature_shape))
        shapes["dense.weight"] = (self.dense_units, features)
        shapes["dense.bias"] = (self.dense_units,)
        shapes["head.weight"] = (self.n_classes, self.dense_units)
        shapes["head.bias"] = (self.n_classes,)
        return shapes

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def architecture(self) -> dict:
        return {
            "conv_channels": list(self.conv_channels),
            "pool_after": list(self.pool_after),
            "input_size": self.input_size,
            "in_channels": self.in_channels,
            "dense_units": self.dense_units,
            "activation": self.activation,
            "n_classes": self.n_classes,
        }

    @classmethod
    def from_architecture(cls, arch: Mapping) -> "Network":
        return cls(**arch)

    def copy(self) -> "Network":
        return copy.deepcopy(self)

    def flat_params(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params.values()])

    def set_flat_params(self, flat: np.ndarray) -> None:
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != self.n_params:
            raise ValueError(f"expected {self.n_params} parameters, got {flat.size}")
        pos = 0
        for name, p in self.params.items():
            self.params[name] = flat[pos : pos + p.size].reshape(p.shape).copy()
            pos += p.size

    def predict_proba(self, patches: np.ndarray, batch_size: int = 256) -> np.ndarray:
        """pCAC for a stack of normalized patches ``(N, H, W)``; no dropout."""
        patches = np.asarray(patches, dtype=np.float64)
        if patches.ndim == 2:
            patches = patches[None]
        out = np.empty(len(patches))
        for start in range(0, len(patches), batch_size):
            logits, _ = _forward(self, patches[start : start + batch_size])
            _check_finite("logits", logits)
            out[start : start + batch_size] = softmax(logits)[:, CAC]
        return out


@dataclass
class _Cache:
    conv: list = field(default_factory=list)
    features: np.ndarray | None = None
    feature_map_shape: tuple | None = None
    dense_pre: np.ndarray | None = None
    dense_out: np.ndarray | None = None
    dropout_mask: np.ndarray | None = None


def _input_batch(net: Network, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    s = net.input_size
    if net.in_channels == 1 and x.ndim == 3 and x.shape[1:] == (s, s):
        return x[None]
    if x.ndim == 4 and x.shape[0] == net.in_channels and x.shape[2:] == (s, s):
        return x
    raise ValueError(f"input shape {x.shape} does not fit network input {net.in_channels}x{s}x{s}")


def _forward(net: Network, x: np.ndarray, dropout_mask=None, keep_cache=False, check=False):
    h = _input_batch(net, x)
    N = h.shape[1]
    p = net.params
    cache = _Cache() if keep_cache else None
    for i in range(len(net.conv_channels)):
        W, b = p[f"conv{i + 1}.weight"], p[f"conv{i + 1}.bias"]
        arg = None
        if i in net.pool_after:
            # relu and max commute, so pool the pre-activation
            z, arg, cols = _conv_pool_forward(h, W, b, with_argmax=keep_cache)
        else:
            z, cols = _conv_forward(h, W, b)
        a = relu(z) if net.activation else z
        if check:
            _check_finite(f"conv{i + 1}", a)
        if keep_cache:
            cache.conv.append((h.shape, cols, z, arg))
        h = a
    C, _, Hf, Wf = h.shape
    if (C, Hf, Wf) != net.feature_shape:
        raise AssertionError(f"feature map {(C, Hf, Wf)} != traced {net.feature_shape}")
    feats = h.transpose(1, 0, 2, 3).reshape(N, -1)
    dense_pre = feats @ p["dense.weight"].T + p["dense.bias"]
    dense_out = relu(dense_pre) if net.activation else dense_pre
    if dropout_mask is not None:
        dense_out = dense_out * dropout_mask
    logits = dense_out @ p["head.weight"].T + p["head.bias"]
    if check:
        _check_finite("dense", dense_out)
        _check_finite("logits", logits)
    if keep_cache:
        cache.features = feats
        cache.feature_map_shape = h.shape
        cache.dense_pre = dense_pre
        cache.dense_out = dense_out
        cache.dropout_mask = dropout_mask
    return logits, cache


def predict_logits(model: Network, patches: np.ndarray) -> np.ndarray:
    """Head logits ``(N, 2)`` in inference mode."""
    logits, _ = _forward(model, patches)
    return logits


def forward(model: Network, patch: np.ndarray) -> float:
    """pCAC for one normalized patch (inference mode)."""
    logits, _ = _forward(model, np.asarray(patch)[None] if np.ndim(patch) == 2 else patch)
    _check_finite("logits", logits)
    return float(softmax(logits)[0, CAC])


def _cross_entropy(logits: np.ndarray, labels: np.ndarray) -> float:
    logp = log_softmax(logits)
    return float(-logp[np.arange(len(labels)), labels].mean())


def loss(model: Network, patches, labels, dropout_mask=None) -> float:
    labels = np.asarray(labels, dtype=np.int64)
    logits, _ = _forward(model, patches, dropout_mask=dropout_mask)
    return _cross_entropy(logits, labels)


def loss_and_backward(model: Network, patches, labels, dropout_mask=None):
    """Mean cross-entropy over the batch and its gradient for every parameter.

    ``labels`` are class indices (1 = CAC). ``dropout_mask`` is the
    multiplier returned by :func:`dropout_apply` for the dense layer
    output, shape ``(N, dense_units)``; None disables dropout.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise ValueError("empty batch")
    logits, cache = _forward(model, patches, dropout_mask=dropout_mask, keep_cache=True)
    N = len(labels)
    logp = log_softmax(logits)
    value = float(-logp[np.arange(N), labels].mean())
    if not math.isfinite(value):
        raise NonFiniteError("non-finite loss")

    p = model.params
    grads: dict[str, np.ndarray] = {}
    dlogits = np.exp(logp)
    dlogits[np.arange(N), labels] -= 1.0
    dlogits /= N
    grads["head.weight"] = dlogits.T @ cache.dense_out
    grads["head.bias"] = dlogits.sum(axis=0)
    d = dlogits @ p["head.weight"]
    if cache.dropout_mask is not None:
        d = d * cache.dropout_mask
    if model.activation:
        d = relu_backward(d, cache.dense_pre)
    grads["dense.weight"] = d.T @ cache.features
    grads["dense.bias"] = d.sum(axis=0)
    C, _, Hf, Wf = cache.feature_map_shape
    d = (d @ p["dense.weight"]).reshape(N, C, Hf, Wf).transpose(1, 0, 2, 3)

    for i in reversed(range(len(model.conv_channels))):
        in_shape, cols, z, arg = cache.conv[i]
        if model.activation:
            d = relu_backward(d, z)
        if arg is not None:
            d = _unpool_pooled(d, arg)
        W = p[f"conv{i + 1}.weight"]
        K = W.shape[0]
        d2 = d.reshape(K, -1)
        grads[f"conv{i + 1}.weight"] = (d2 @ cols.T).reshape(W.shape)
        grads[f"conv{i + 1}.bias"] = d2.sum(axis=1)
        if i > 0:
            dcols = W.reshape(K, -1).T @ d2
            d = _col2im_pooled(dcols, in_shape) if arg is not None else _col2im(dcols, in_shape)

    return value, {name: grads[name] for name in p}


def he_init(model: Network, seed) -> Network:
    """Fresh copy of ``model`` with He-uniform weights and zero biases.

    Weights are drawn from U(-sqrt(6 / fan_in), +sqrt(6 / fan_in)) with
    fan_in = C*3*3 for convolutions and the input width for dense layers,
    in parameter order.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    out = model.copy()
    for name, shape in out.param_shapes().items():
        if name.endswith(".bias"):
            out.params[name] = np.zeros(shape)
            continue
        fan_in = int(np.prod(shape[1:]))
        bound = math.sqrt(6.0 / fan_in)
        out.params[name] = rng.uniform(-bound, bound, size=shape)
    return out


# -- optimisation -----------------------------------------------------------------


@dataclass
class OptimizerState:
    """Adagrad accumulators of squared gradients, one per parameter."""

    accumulators: dict[str, np.ndarray]
    learning_rate: float = 0.001
    epsilon: float = 1e-8

    @classmethod
    def zeros_like(cls, model: Network, learning_rate: float = 0.001, epsilon: float = 1e-8):
        return cls({k: np.zeros_like(v) for k, v in model.params.items()}, learning_rate, epsilon)

    def copy(self) -> "OptimizerState":
        return copy.deepcopy(self)


def adagrad_step(model: Network, grads: Mapping[str, np.ndarray], state: OptimizerState):
    """``acc += g**2; theta -= lr * g / (sqrt(acc) + eps)``, in place."""
    for name, theta in model.params.items():
        g = grads[name]
        acc = state.accumulators[name]
        if g.shape != theta.shape or acc.shape != theta.shape:
            raise ValueError(f"{name}: gradient {g.shape} / accumulator {acc.shape} vs parameter {theta.shape}")
        acc += g * g
        theta -= state.learning_rate * g / (np.sqrt(acc) + state.epsilon)
    return model, state


# -- verification -----------------------------------------------------------------


def gradient_check(
    model: Network,
    patches,
    labels,
    h: float = 1e-5,
    dropout_mask=None,
    backward: Callable | None = None,
    max_params: int | None = None,
    seed: int = 0,
    stencil: int = 3,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    The error per parameter is ``|a - n| / max(|a|, |n|, 1e-8)``. Runs in
    64-bit with whatever dropout mask is given (None for inference mode).
    ``backward`` swaps in another gradient routine with the signature of
    :func:`loss_and_backward`; ``max_params`` checks a random subset.

    ``stencil=3`` is the usual ``(f(+h) - f(-h)) / 2h``. ``stencil=5``
    adds the ``±2h`` points, cutting truncation error from O(h^2) to
    O(h^4) so a larger ``h`` can be used and rounding noise shrinks; it
    is what resolves errors well below 1e-8.
    """
    if stencil not in (3, 5):
        raise ValueError(f"stencil must be 3 or 5, got {stencil}")
    backward = backward or loss_and_backward
    work = model.copy()
    _, analytic = backward(work, patches, labels, dropout_mask)
    # forward-only evaluations validate every layer boundary
    _forward(work, patches, dropout_mask=dropout_mask, check=True)

    index = [(name, i) for name, p in work.params.items() for i in range(p.size)]
    if max_params is not None and max_params < len(index):
        pick = np.random.default_rng(seed).choice(len(index), size=max_params, replace=False)
        index = [index[i] for i in sorted(pick)]

    worst = 0.0
    for name, i in index:
        flat = work.params[name].reshape(-1)
        orig = flat[i]

        def at(offset):
            flat[i] = orig + offset
            return loss(work, patches, labels, dropout_mask)

        if stencil == 3:
            num = (at(h) - at(-h)) / (2.0 * h)
        else:
            num = (8.0 * (at(h) - at(-h)) - (at(2 * h) - at(-2 * h))) / (12.0 * h)
        flat[i] = orig
        ana = float(analytic[name].reshape(-1)[i])
        err = abs(ana - num) / max(abs(ana), abs(num), 1e-8)
        worst = max(worst, err)
    return worst


def shrunken_network(activation: bool = True) -> Network:
    """11x11 conv-pool-conv-dense-softmax net used for gradient checks."""
    return Network(
        conv_channels=(4, 6), pool_after=(0,), input_size=11, dense_units=8, activation=activation
    )
