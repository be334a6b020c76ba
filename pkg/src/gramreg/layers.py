"""Layers with hand-derived forward and backward passes.

Activations carry views folded into the batch axis, ``(B * V, ...)``, until a
view-aggregation layer (max pool, mean, LSTM) turns them into ``(B, ...)``.
Every layer caches what its backward pass needs during ``forward``.
"""

import numpy as np

from . import _kernels
from .errors import DimensionError, DomainError, StateError
from .gram import LayerWeights
from .tensor import sigmoid


class Layer:
    learnable = False

    def __init__(self, name):
        self.name = name
        self.params = {}
        self.grads = {}
        self._cache = None

    def forward(self, x, views):
        raise NotImplementedError

    def backward(self, dy):
        raise NotImplementedError

    def layer_weights(self):
        """LayerWeights views over this layer's kernels, paired with the parameter name."""
        return []

    def zero_grad(self):
        for k, v in self.params.items():
            self.grads[k] = np.zeros_like(v)

    def _need_cache(self):
        if self._cache is None:
            raise StateError(f"{self.name}: backward called before forward")
        return self._cache


class Dense(Layer):
    learnable = True

    def __init__(self, name, n_in, n_out, dtype=np.float64):
        super().__init__(name)
        self.n_in, self.n_out = n_in, n_out
        self.params = {
            f"{name}.weight": np.zeros((n_out, n_in), dtype),
            f"{name}.bias": np.zeros(n_out, dtype),
        }
        self.zero_grad()

    @property
    def weight(self):
        return self.params[f"{self.name}.weight"]

    @property
    def bias(self):
        return self.params[f"{self.name}.bias"]

    def init(self, rng):
        self.weight[...] = rng.standard_normal(self.weight.shape) * np.sqrt(2.0 / self.n_in)
        self.bias[...] = 0

    def forward(self, x, views=1):
        in_shape = x.shape
        x2 = x.reshape(x.shape[0], -1)
        if x2.shape[1] != self.n_in:
            raise DimensionError(f"{self.name}: expected {self.n_in} inputs, got {x2.shape[1]}")
        self._cache = (x2, in_shape)
        return x2 @ self.weight.T + self.bias

    def backward(self, dy):
        x2, in_shape = self._need_cache()
        self.grads[f"{self.name}.weight"] += dy.T @ x2
        self.grads[f"{self.name}.bias"] += dy.sum(axis=0)
        return (dy @ self.weight).reshape(in_shape)

    def layer_weights(self):
        lw = LayerWeights.from_matrix(self.weight, self.bias, "fully_connected", self.name)
        return [(lw, f"{self.name}.weight")]


class Conv2D(Layer):
    """Valid (unpadded) cross-correlation via im2col."""

    learnable = True

    def __init__(self, name, c_in, n_out, kernel, stride=1, dtype=np.float64):
        super().__init__(name)
        self.c_in, self.n_out, self.kernel, self.stride = c_in, n_out, kernel, stride
        self.params = {
            f"{name}.weight": np.zeros((n_out, c_in, kernel, kernel), dtype),
            f"{name}.bias": np.zeros(n_out, dtype),
        }
        self.zero_grad()

    @property
    def weight(self):
        return self.params[f"{self.name}.weight"]

    @property
    def bias(self):
        return self.params[f"{self.name}.bias"]

    def init(self, rng):
        fan_in = self.c_in * self.kernel * self.kernel
        self.weight[...] = rng.standard_normal(self.weight.shape) * np.sqrt(2.0 / fan_in)
        self.bias[...] = 0

    def output_size(self, h, w):
        k, s = self.kernel, self.stride
        if h < k or w < k or (h - k) % s or (w - k) % s:
            raise DimensionError(
                f"{self.name}: {k}x{k} kernel with stride {s} does not tile a {h}x{w} input"
            )
        return (h - k) // s + 1, (w - k) // s + 1

    def forward(self, x, views=1):
        if x.ndim != 4 or x.shape[1] != self.c_in:
            raise DimensionError(f"{self.name}: expected (B, {self.c_in}, H, W), got {x.shape}")
        b, _, h, w = x.shape
        oh, ow = self.output_size(h, w)
        cols = _kernels.im2col(x, self.kernel, self.kernel, self.stride)
        cols = cols.reshape(b, -1, oh * ow)
        wmat = self.weight.reshape(self.n_out, -1)
        y = np.matmul(wmat, cols) + self.bias[:, None]
        self._cache = (cols, (h, w))
        return y.reshape(b, self.n_out, oh, ow)

    def backward(self, dy):
        cols, (h, w) = self._need_cache()
        b = dy.shape[0]
        dy2 = dy.reshape(b, self.n_out, -1)
        wmat = self.weight.reshape(self.n_out, -1)
        self.grads[f"{self.name}.weight"] += np.tensordot(dy2, cols, axes=([0, 2], [0, 2])).reshape(
            self.weight.shape
        )
        self.grads[f"{self.name}.bias"] += dy2.sum(axis=(0, 2))
        dcols = np.matmul(wmat.T, dy2)
        oh, ow = dy.shape[2], dy.shape[3]
        dcols = dcols.reshape(b, self.c_in, self.kernel, self.kernel, oh, ow)
        return _kernels.col2im(dcols, h, w, self.stride)

    def layer_weights(self):
        return [(LayerWeights.from_conv(self.weight, self.bias, self.name), f"{self.name}.weight")]


class ReLU(Layer):
    def forward(self, x, views=1):
        mask = x > 0
        self._cache = mask
        return x * mask

    def backward(self, dy):
        return dy * self._need_cache()


def _split_views(x, views):
    if views < 1:
        raise DomainError("view pooling needs at least one view")
    if x.shape[0] % views:
        raise DomainError(f"batch of {x.shape[0]} view items is not a multiple of V = {views}")
    return x.reshape(x.shape[0] // views, views, *x.shape[1:])


class ViewMaxPool(Layer):
    """Element-wise max over the views of each shape; ties go to the lowest view index."""

    def forward(self, x, views):
        xv = _split_views(x, views)
        arg = xv.argmax(axis=1)
        self._cache = (arg, xv.shape)
        return np.take_along_axis(xv, arg[:, None], axis=1)[:, 0]

    def backward(self, dy):
        arg, shape = self._need_cache()
        dx = np.zeros(shape, dtype=dy.dtype)
        np.put_along_axis(dx, arg[:, None], dy[:, None], axis=1)
        return dx.reshape(shape[0] * shape[1], *shape[2:])


class ViewMean(Layer):
    def forward(self, x, views):
        xv = _split_views(x, views)
        self._cache = xv.shape
        return xv.mean(axis=1)

    def backward(self, dy):
        shape = self._need_cache()
        dx = np.broadcast_to(dy[:, None] / shape[1], shape)
        return np.ascontiguousarray(dx).reshape(shape[0] * shape[1], *shape[2:])


GATES = ("g", "i", "f", "o")


class LSTMCell(Layer):
    """LSTM unrolled over the views of each shape; emits the final hidden state.

    Gates: g = tanh(.), i, f, o = sigmoid(.), each from ``W_*x x + W_*h h + b_*``;
    ``s = g*i + s_prev*f`` and ``h = tanh(s)*o``.
    """

    learnable = True

    def __init__(self, name, n_in, hidden, dtype=np.float64):
        super().__init__(name)
        self.n_in, self.hidden = n_in, hidden
        for g in GATES:
            self.params[f"{name}.W_{g}x"] = np.zeros((hidden, n_in), dtype)
            self.params[f"{name}.W_{g}h"] = np.zeros((hidden, hidden), dtype)
            self.params[f"{name}.b_{g}"] = np.zeros(hidden, dtype)
        self.zero_grad()

    def p(self, key):
        return self.params[f"{self.name}.{key}"]

    def init(self, rng):
        bound = 1.0 / np.sqrt(self.hidden)
        for g in GATES:
            for key in (f"W_{g}x", f"W_{g}h"):
                w = self.p(key)
                w[...] = rng.uniform(-bound, bound, w.shape)
            self.p(f"b_{g}")[...] = 0

    def step(self, x, h_prev, s_prev):
        """One recurrence step; returns ``(h, s, gates)``."""
        pre = {g: x @ self.p(f"W_{g}x").T + h_prev @ self.p(f"W_{g}h").T + self.p(f"b_{g}") for g in GATES}
        gates = {
            "g": np.tanh(pre["g"]),
            "i": sigmoid(pre["i"]),
            "f": sigmoid(pre["f"]),
            "o": sigmoid(pre["o"]),
        }
        s = gates["g"] * gates["i"] + s_prev * gates["f"]
        h = np.tanh(s) * gates["o"]
        return h, s, gates

    def forward(self, x, views):
        xv = _split_views(x, views)
        if xv.ndim != 3 or xv.shape[2] != self.n_in:
            raise DimensionError(f"{self.name}: expected sequences of {self.n_in}-vectors, got {xv.shape}")
        b = xv.shape[0]
        h = np.zeros((b, self.hidden), x.dtype)
        s = np.zeros((b, self.hidden), x.dtype)
        steps = []
        for t in range(views):
            h_new, s_new, gates = self.step(xv[:, t], h, s)
            steps.append((xv[:, t], h, s, s_new, gates))
            h, s = h_new, s_new
        self._cache = (steps, xv.shape)
        return h

    def backward(self, dh):
        steps, shape = self._need_cache()
        dx = np.zeros(shape, dtype=dh.dtype)
        ds = np.zeros_like(dh)
        for t in range(len(steps) - 1, -1, -1):
            x, h_prev, s_prev, s, gt = steps[t]
            ts = np.tanh(s)
            ds = ds + dh * gt["o"] * (1 - ts * ts)
            da = {
                "o": dh * ts * gt["o"] * (1 - gt["o"]),
                "g": ds * gt["i"] * (1 - gt["g"] * gt["g"]),
                "i": ds * gt["g"] * gt["i"] * (1 - gt["i"]),
                "f": ds * s_prev * gt["f"] * (1 - gt["f"]),
            }
            dh = np.zeros_like(dh)
            for g in GATES:
                a = da[g]
                self.grads[f"{self.name}.W_{g}x"] += a.T @ x
                self.grads[f"{self.name}.W_{g}h"] += a.T @ h_prev
                self.grads[f"{self.name}.b_{g}"] += a.sum(axis=0)
                dx[:, t] += a @ self.p(f"W_{g}x")
                dh += a @ self.p(f"W_{g}h")
            ds = ds * gt["f"]
        return dx.reshape(shape[0] * shape[1], shape[2])

    def layer_weights(self):
        out = []
        for g in GATES:
            for src in ("x", "h"):
                key = f"{self.name}.W_{g}{src}"
                bias = self.p(f"b_{g}") if src == "x" else None
                out.append((LayerWeights.from_matrix(self.params[key], bias, "lstm_gate", key), key))
        return out


def softmax_ce(logits, labels):
    """Mean cross-entropy and its gradient with respect to the logits."""
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    b, n = logits.shape
    if labels.shape != (b,):
        raise DimensionError(f"expected {b} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= n):
        raise DomainError(f"labels must lie in [0, {n})")
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    logp = z - logsum[:, None]
    rows = np.arange(b)
    loss = -logp[rows, labels].mean()
    grad = np.exp(logp)
    grad[rows, labels] -= 1
    return float(loss), grad / b
