"""The three view-based architectures built on the hand-written layers.

* ``view_cnn``: every view is an independent sample; a shape's feature is
  the mean of its view features.
* ``mvcnn``: views share the convolutional trunk and are merged by an
  element-wise max right after the last convolution.
* ``cnn_lstm``: the ordered per-view features run through an LSTM whose final
  hidden state is the shape feature.

The backbone is conv(8, 4x4, /2) - relu - conv(16, 3x3, /2) - relu -
fc(64) - relu - fc(32) - fc(classes) on 32x32 single-channel views.
"""

from dataclasses import asdict, dataclass, field
from typing import List, Optional

import numpy as np

from .errors import ConfigError, DimensionError, DomainError, StateError
from .gram import gram_grad
from .layers import Conv2D, Dense, LSTMCell, ReLU, ViewMaxPool, ViewMean

ARCHITECTURES = ("view_cnn", "mvcnn", "cnn_lstm")
LAYER_KINDS = ("conv2d", "fully_connected", "relu", "view_max_pool", "view_mean", "lstm_cell")
_AGGREGATORS = ("view_max_pool", "view_mean", "lstm_cell")


@dataclass
class LayerSpec:
    kind: str
    name: str = ""
    out: int = 0  # kernels, units or hidden size
    kernel: int = 0
    stride: int = 1

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ConfigError(f"unknown layer kind {self.kind!r}")
        if self.kind in ("conv2d", "fully_connected", "lstm_cell") and self.out < 1:
            raise ConfigError(f"{self.name or self.kind}: size must be positive")
        if self.kind == "conv2d" and (self.kernel < 1 or self.stride < 1):
            raise ConfigError(f"{self.name}: kernel and stride must be positive")


@dataclass
class NetworkSpec:
    architecture: str
    layers: List[LayerSpec]
    num_classes: int
    views: int = 8
    image_size: int = 32
    in_channels: int = 1

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ConfigError(f"unknown architecture {self.architecture!r}")
        kinds = [l.kind for l in self.layers]
        if not kinds or kinds[-1] != "fully_connected":
            raise ConfigError("the last layer must be the fully connected classifier")
        if self.layers[-1].out != self.num_classes:
            raise ConfigError("classifier width must equal num_classes")
        aggs = [k for k in kinds if k in _AGGREGATORS]
        if len(aggs) != 1:
            raise ConfigError("exactly one view aggregation layer is required")
        expected = {"view_cnn": "view_mean", "mvcnn": "view_max_pool", "cnn_lstm": "lstm_cell"}
        if aggs[0] != expected[self.architecture]:
            raise ConfigError(f"{self.architecture} needs a {expected[self.architecture]} layer")
        if self.views < 1:
            raise ConfigError("views must be >= 1")
        names = [l.name for l in self.layers]
        if len(set(names)) != len(names):
            raise ConfigError("layer names must be unique")

    @property
    def view_pool_position(self):
        return next(i for i, l in enumerate(self.layers) if l.kind in _AGGREGATORS)

    @property
    def feature_layer(self):
        """Index of the layer whose output is the retrieval feature (classifier input)."""
        return len(self.layers) - 2

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["layers"] = [LayerSpec(**l) for l in d["layers"]]
        return cls(**d)


def _trunk(conv_channels=(8, 16), conv_kernels=(4, 3), hidden=64, feature=32):
    return [
        LayerSpec("conv2d", "conv1", conv_channels[0], conv_kernels[0], 2),
        LayerSpec("relu", "relu1"),
        LayerSpec("conv2d", "conv2", conv_channels[1], conv_kernels[1], 2),
        LayerSpec("relu", "relu2"),
    ], [
        LayerSpec("fully_connected", "fc1", hidden),
        LayerSpec("relu", "relu3"),
        LayerSpec("fully_connected", "fc2", feature),
    ]


def build_spec(architecture, num_classes, views=8, image_size=32, feature=32):
    """Default desk-scale spec for one of the three architectures."""
    convs, fcs = _trunk(feature=feature)
    cls = LayerSpec("fully_connected", "fc_cls", num_classes)
    if architecture == "view_cnn":
        layers = convs + fcs + [LayerSpec("view_mean", "view_mean"), cls]
    elif architecture == "mvcnn":
        layers = convs + [LayerSpec("view_max_pool", "view_pool")] + fcs + [cls]
    elif architecture == "cnn_lstm":
        layers = convs + fcs + [LayerSpec("lstm_cell", "lstm", feature), cls]
    else:
        raise ConfigError(f"unknown architecture {architecture!r}")
    return NetworkSpec(architecture, layers, num_classes, views, image_size)


def not_classifier(classifier_name):
    """Default regularizer filter: every learnable layer except the classifier."""
    return lambda lw: lw.name != classifier_name and not lw.name.startswith(classifier_name + ".")


class Network:
    def __init__(self, spec, dtype=np.float64):
        self.spec = spec
        self.dtype = np.dtype(dtype)
        self.layers = []
        c, h, w = spec.in_channels, spec.image_size, spec.image_size
        flat = None
        for ls in spec.layers:
            if ls.kind == "conv2d":
                layer = Conv2D(ls.name, c, ls.out, ls.kernel, ls.stride, self.dtype)
                h, w = layer.output_size(h, w)
                c = ls.out
                flat = c * h * w
            elif ls.kind == "fully_connected":
                n_in = flat if flat is not None else c * h * w
                layer = Dense(ls.name, n_in, ls.out, self.dtype)
                flat = ls.out
            elif ls.kind == "lstm_cell":
                layer = LSTMCell(ls.name, flat, ls.out, self.dtype)
                flat = ls.out
            elif ls.kind == "relu":
                layer = ReLU(ls.name)
            elif ls.kind == "view_max_pool":
                layer = ViewMaxPool(ls.name)
            else:
                layer = ViewMean(ls.name)
            self.layers.append(layer)
        self.classifier = self.layers[-1]
        self.feature_dim = self.classifier.n_in
        self.features = None
        self._forwarded = False

    # parameters -------------------------------------------------------------

    def init(self, rng):
        for layer in self.layers:
            if layer.learnable:
                layer.init(rng)

    def named_params(self):
        out = {}
        for layer in self.layers:
            out.update(layer.params)
        return out

    def named_grads(self):
        out = {}
        for layer in self.layers:
            out.update(layer.grads)
        return out

    def zero_grad(self):
        for layer in self.layers:
            layer.zero_grad()

    def layer_weights(self):
        """All (LayerWeights, param name) pairs, classifier included."""
        out = []
        for layer in self.layers:
            out.extend(layer.layer_weights())
        return out

    def default_filter(self):
        return not_classifier(self.classifier.name)

    def regularized_weights(self, cfg):
        filt = cfg.layer_filter or self.default_filter()
        return [lw for lw, _ in self.layer_weights() if filt(lw)]

    # passes -----------------------------------------------------------------

    def forward(self, x):
        """``x``: (B, V, H, W) or (B, V, C, H, W) views.  Returns logits (B, classes).

        The classifier input is kept in ``self.features``.
        """
        spec = self.spec
        if x.ndim == 4:
            x = x[:, :, None]
        if x.ndim != 5:
            raise DimensionError(f"expected (B, V, [C,] H, W) views, got shape {x.shape}")
        b, v = x.shape[:2]
        if x.shape[2:] != (spec.in_channels, spec.image_size, spec.image_size):
            raise DimensionError(
                f"views must be {spec.in_channels}x{spec.image_size}x{spec.image_size}, got {x.shape[2:]}"
            )
        if spec.architecture != "view_cnn" and v != spec.views:
            raise DomainError(f"{spec.architecture} expects {spec.views} views per shape, got {v}")
        out = np.ascontiguousarray(x, dtype=self.dtype).reshape(b * v, *x.shape[2:])
        for layer in self.layers:
            if layer is self.classifier:
                self.features = out
            out = layer.forward(out, v)
        self._forwarded = True
        return out

    def backward(self, dlogits, reg=None):
        """Accumulate data-loss gradients, plus Gram gradients when ``reg`` is given."""
        if not self._forwarded:
            raise StateError("network backward called before forward")
        d = dlogits
        for layer in reversed(self.layers):
            d = layer.backward(d)
        if reg is not None:
            self.add_gram_grads(reg)
        return d

    def add_gram_grads(self, reg):
        filt = reg.layer_filter or self.default_filter()
        grads = self.named_grads()
        for lw, pname in self.layer_weights():
            if filt(lw):
                grads[pname] += gram_grad(lw, reg).reshape(grads[pname].shape)

    def embed(self, x, batch_size=64):
        """Shape features (classifier inputs) for ``x`` in chunks of ``batch_size`` shapes."""
        chunks = []
        for start in range(0, x.shape[0], batch_size):
            self.forward(x[start:start + batch_size])
            chunks.append(self.features.copy())
        return np.concatenate(chunks, axis=0)


def network_forward(net, views):
    """Logits and penultimate-layer features for a batch of views."""
    logits = net.forward(views)
    return logits, net.features


def network_backward(net, dlogits, reg=None):
    net.backward(dlogits, reg)
    return net.named_grads()
