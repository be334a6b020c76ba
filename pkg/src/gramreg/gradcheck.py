"""Finite-difference checks of every hand-derived gradient.

The Gram checks difference a naive loop evaluation of the regularizer whose
terms are summed exactly (``math.fsum``), so terms untouched by the
perturbation cancel exactly and the central difference is not swamped by
rounding in the loss total.  Layer and network checks use central
differences of the double-precision forward pass, differencing the loss
summands before adding them.
"""

import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from . import gram
from .gram import LayerWeights, RegConfig
from .layers import Conv2D, Dense, LSTMCell, softmax_ce
from .network import LayerSpec, Network, NetworkSpec

FD_STEP = 1e-6
GRAM_TOL = 1e-6
LAYER_TOL = 1e-6
CHAIN_TOL = 1e-5

# (N, C, S) shapes exercised per layout
GRAM_SHAPES = {
    "fc": ((8, 6, 1), "fully_connected"),
    "conv": ((4, 3, 9), "conv2d"),
    "lstm": ((5, 9, 1), "lstm_gate"),
}


def rel_error(analytic, numeric, floor=1e-12):
    return np.abs(analytic - numeric) / (np.abs(numeric) + floor)


@dataclass
class CheckResult:
    """Worst error of one suite.

    ``worst`` is the figure compared with ``tol``.  For layer and network
    suites it uses a denominator floor of 1% of the largest FD magnitude,
    since central differences carry ~1e-9 x scale of rounding noise that
    swamps near-zero elements; ``strict`` is the same error with the bare
    1e-12 floor.
    """

    name: str
    worst: float
    tol: float
    where: Optional[Tuple] = None
    strict: Optional[float] = None

    @property
    def ok(self):
        return bool(self.worst < self.tol)


# --- naive Gram regularizer ---------------------------------------------------

def naive_gram_terms(kernels, lambda1, lambda2):
    """Every summand of the regularizer, from an explicit loop over (s, i, j)."""
    n, c, s = kernels.shape
    w = kernels.tolist()
    terms = []
    for sp in range(s):
        for i in range(n):
            for j in range(n):
                d = math.fsum(w[i][ch][sp] * w[j][ch][sp] for ch in range(c))
                if i == j:
                    terms.append(lambda2 * d)
                elif d > 0:
                    terms.append(lambda1 * d)
    return terms


def naive_gram_loss(layers, lambda1, lambda2):
    terms = []
    for layer in layers:
        terms.extend(naive_gram_terms(layer.kernels, lambda1, lambda2))
    return math.fsum(terms)


def fd_gram_grad(kernels, lambda1, lambda2, h=FD_STEP):
    """Central differences of the naive regularizer, differenced term-by-term."""
    w = np.array(kernels, dtype=np.float64)
    grad = np.zeros_like(w)
    for idx in np.ndindex(w.shape):
        orig = w[idx]
        w[idx] = orig + h
        plus = naive_gram_terms(w, lambda1, lambda2)
        hi = w[idx]
        w[idx] = orig - h
        minus = naive_gram_terms(w, lambda1, lambda2)
        lo = w[idx]
        w[idx] = orig
        grad[idx] = math.fsum(plus + [-t for t in minus]) / (hi - lo)
    return grad


def printed_gram_grad(layer, cfg):
    """Cross-term gradient without the ordered-pair factor 2 (regression guard only)."""
    return gram.gram_grad(layer, cfg) - cfg.lambda1 * 0.5 * gram._kernels.gram_cross_grad(layer.kernels)


def check_gram(layout, trials=20, seed=0, lambda1=1.0, lambda2=1.0, grad_fn=None):
    """Worst per-element relative error of ``grad_fn`` against finite differences."""
    grad_fn = grad_fn or gram.gram_grad
    shape, tag = GRAM_SHAPES[layout]
    rng = np.random.default_rng(seed)
    cfg = RegConfig(lambda1, lambda2)
    worst, where = 0.0, None
    for t in range(trials):
        layer = LayerWeights(rng.standard_normal(shape), layout=tag, name=f"{layout}[{t}]")
        err = rel_error(grad_fn(layer, cfg), fd_gram_grad(layer.kernels, lambda1, lambda2))
        k = np.unravel_index(np.argmax(err), err.shape)
        if err[k] > worst:
            worst, where = float(err[k]), (t,) + tuple(int(i) for i in k)
    return CheckResult(f"gram/{layout}", worst, GRAM_TOL, where)


# --- layer backward passes ----------------------------------------------------

def _fd_params(loss_fn, params, h=FD_STEP):
    """Central differences; ``loss_fn`` returns the loss as an array of summands."""
    out = {}
    for name, p in params.items():
        g = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            orig = p[idx]
            p[idx] = orig + h
            lp = np.asarray(loss_fn(), dtype=np.float64)
            hi = p[idx]
            p[idx] = orig - h
            lm = np.asarray(loss_fn(), dtype=np.float64)
            lo = p[idx]
            p[idx] = orig
            g[idx] = math.fsum((lp - lm).ravel()) / (hi - lo)
        out[name] = g
    return out


def _fd_input(loss_fn, x, h=FD_STEP):
    return _fd_params(loss_fn, {"x": x}, h)["x"]


SCALE_FLOOR = 1e-2


def _compare(name, analytic, numeric, tol):
    scale = max(float(np.abs(v).max()) for v in numeric.values())
    floor = max(SCALE_FLOOR * scale, 1e-12)
    worst, where, strict = 0.0, None, 0.0
    for key in numeric:
        strict = max(strict, float(rel_error(analytic[key], numeric[key]).max()))
        err = rel_error(analytic[key], numeric[key], floor)
        k = np.unravel_index(np.argmax(err), err.shape)
        if err[k] > worst:
            worst, where = float(err[k]), (key,) + tuple(int(i) for i in k)
    return CheckResult(name, worst, tol, where, strict)


def _worst(results):
    top = max(results, key=lambda r: r.worst)
    return CheckResult(top.name, top.worst, top.tol, top.where, max(r.strict for r in results))


def _layer_check(name, layer, x, views, tol, rng):
    out = layer.forward(x, views)
    proj = rng.standard_normal(out.shape)

    def loss():
        return layer.forward(x, views) * proj

    layer.forward(x, views)
    layer.zero_grad()
    dx = layer.backward(proj)
    analytic = dict(layer.grads, x=dx)
    numeric = _fd_params(loss, layer.params)
    numeric["x"] = _fd_input(loss, x)
    return _compare(name, analytic, numeric, tol)


def check_layer(layout, trials=5, seed=0):
    rng = np.random.default_rng(seed)
    results = []
    for _ in range(trials):
        if layout == "fc":
            layer = Dense("fc", 6, 8)
            layer.init(rng)
            layer.bias[...] = rng.standard_normal(8)
            r = _layer_check("dense", layer, rng.standard_normal((3, 6)), 1, LAYER_TOL, rng)
        elif layout == "conv":
            layer = Conv2D("conv", 3, 4, 3, stride=2)
            layer.init(rng)
            layer.bias[...] = rng.standard_normal(4)
            r = _layer_check("conv2d", layer, rng.standard_normal((2, 3, 7, 7)), 1, LAYER_TOL, rng)
        elif layout == "lstm":
            layer = LSTMCell("lstm", 9, 5)
            layer.init(rng)
            for g in "gifo":
                layer.p(f"b_{g}")[...] = 0.3 * rng.standard_normal(5)
            r = _layer_check("lstm", layer, rng.standard_normal((2 * 4, 9)), 4, CHAIN_TOL, rng)
        else:
            raise ValueError(f"no layer check for layout {layout!r}")
        results.append(r)
    return _worst(results)


# --- whole network ------------------------------------------------------------

def tiny_spec():
    """2 conv kernels, fc(4) and a 2-class classifier on 6x6 single views."""
    layers = [
        LayerSpec("conv2d", "conv1", 2, 3, 1),
        LayerSpec("relu", "relu1"),
        LayerSpec("fully_connected", "fc1", 4),
        LayerSpec("relu", "relu2"),
        LayerSpec("view_mean", "view_mean"),
        LayerSpec("fully_connected", "fc_cls", 2),
    ]
    return NetworkSpec("view_cnn", layers, num_classes=2, views=1, image_size=6)


def total_loss(net, x, labels, reg):
    """Softmax loss plus regularizer, returned as ``([softmax, gram], dlogits)``."""
    logits = net.forward(x)
    ce, dlogits = softmax_ce(logits, labels)
    g = gram.gram_loss(net.regularized_weights(reg), reg)
    return np.array([ce, g.total]), dlogits


def check_network(trials=5, seed=0, lambda1=1e-1, lambda2=1e-2, spec=None, grad_fn=None):
    """Whole-network gradient of softmax loss plus Gram regularizer vs central differences."""
    rng = np.random.default_rng(seed)
    spec = spec or tiny_spec()
    reg = RegConfig(lambda1, lambda2)
    results = []
    for _ in range(trials):
        net = Network(spec)
        net.init(rng)
        # nonzero biases keep pre-activations off the ReLU kink
        for name, p in net.named_params().items():
            if name.endswith(".bias"):
                p[...] = 0.1 * rng.standard_normal(p.shape)
        x = rng.uniform(0, 1, (2, spec.views, spec.image_size, spec.image_size))
        labels = rng.integers(0, spec.num_classes, 2)
        _, dlogits = total_loss(net, x, labels, reg)
        net.zero_grad()
        net.backward(dlogits)
        if grad_fn is None:
            net.add_gram_grads(reg)
        else:
            grads = net.named_grads()
            for lw, pname in net.layer_weights():
                if net.default_filter()(lw):
                    grads[pname] += grad_fn(lw, reg).reshape(grads[pname].shape)
        analytic = {k: v.copy() for k, v in net.named_grads().items()}
        numeric = _fd_params(lambda: total_loss(net, x, labels, reg)[0], net.named_params())
        results.append(_compare("network", analytic, numeric, CHAIN_TOL))
    return _worst(results)


def run(layout, trials=20, seed=0, cross_factor=2.0):
    """All checks for one CLI layout.  ``cross_factor`` != 2 reproduces the printed-gradient bug."""
    grad_fn = None
    if cross_factor != 2.0:
        def grad_fn(layer, cfg):
            return gram.gram_grad(layer, cfg) + cfg.lambda1 * (cross_factor / 2 - 1) * gram._kernels.gram_cross_grad(
                layer.kernels
            )
    if layout == "network":
        return [check_network(trials=min(trials, 5), seed=seed, grad_fn=grad_fn)]
    return [
        check_gram(layout, trials=trials, seed=seed, grad_fn=grad_fn),
        check_layer(layout, trials=min(trials, 5), seed=seed),
    ]
