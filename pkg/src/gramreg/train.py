"""SGD training of softmax loss plus Gram regularizer.

One epoch visits the training split in an order drawn from the run's own
RNG.  View-CNN batches are single views; MVCNN and CNN-LSTM batches are
whole shapes with all their views.  The loss curve gets one row per epoch
with the mean softmax loss over the epoch's batches and the regularizer
terms evaluated on the parameters at the end of the epoch.
"""

import csv
import io
import math
from dataclasses import dataclass, fields
from typing import Optional, Tuple

import numpy as np

from .errors import ConfigError, FormatError, TrainingError
from .gram import RegConfig, gram_loss
from .layers import softmax_ce
from .network import Network, NetworkSpec
from .tensor import dtype_of

LOSS_HEADER = ("epoch", "step", "lr", "softmax", "gram_cross", "gram_l2", "total")

# base learning rate per architecture when none is configured
DEFAULT_LRS = {"view_cnn": 1e-2, "mvcnn": 1e-3, "cnn_lstm": 1e-2}


@dataclass
class TrainConfig:
    architecture: str = "mvcnn"
    base_lr: Optional[float] = None
    lr_drop_epoch: int = 40
    lr_drop_factor: float = 10.0
    total_epochs: int = 60
    batch_size: int = 16
    momentum: float = 0.9
    lambda1: float = 1e-3
    lambda2: float = 1e-4
    seed: int = 0
    precision: str = "double"
    # multi-step CNN-LSTM schedule: base lr and epochs per step
    step_lrs: Tuple[float, float, float] = (1e-2, 1e-2, 1e-3)
    step_epochs: Optional[Tuple[int, int, int]] = None

    def __post_init__(self):
        if self.architecture not in DEFAULT_LRS:
            raise ConfigError(f"unknown architecture {self.architecture!r}")
        if self.base_lr is None:
            self.base_lr = DEFAULT_LRS[self.architecture]
        if not self.base_lr > 0:
            raise ConfigError("base_lr must be > 0")
        if self.total_epochs < 1:
            raise ConfigError("total_epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.lr_drop_factor <= 0:
            raise ConfigError("lr_drop_factor must be > 0")
        if len(self.step_lrs) != 3 or min(self.step_lrs) <= 0:
            raise ConfigError("step_lrs needs three positive learning rates")
        if self.step_epochs is not None and (len(self.step_epochs) != 3 or min(self.step_epochs) < 1):
            raise ConfigError("step_epochs needs three positive epoch counts")
        dtype_of(self.precision)
        RegConfig(self.lambda1, self.lambda2)

    @property
    def reg(self):
        return RegConfig(self.lambda1, self.lambda2)

    def epochs_for_step(self, step):
        return self.total_epochs if self.step_epochs is None else self.step_epochs[step - 1]

    # key = value files ------------------------------------------------------

    def to_lines(self):
        out = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(repr(x) for x in v)
            elif v is None:
                v = ""
            elif isinstance(v, float):
                v = repr(v)
            out.append(f"{f.name} = {v}")
        return out

    @classmethod
    def from_mapping(cls, kv, base=None):
        """Build a config from string values, overriding ``base`` field by field."""
        types = {f.name: f for f in fields(cls)}
        values = {} if base is None else {f: getattr(base, f) for f in types}
        for key, raw in kv.items():
            if key not in types:
                raise ConfigError(f"unknown config key {key!r}")
            values[key] = _coerce(key, raw)
        return cls(**values)


_INT_KEYS = {"lr_drop_epoch", "total_epochs", "batch_size", "seed"}


def _coerce(key, raw):
    if not isinstance(raw, str):
        return raw
    try:
        if key in ("precision", "architecture"):
            return raw
        if key == "base_lr" and not raw:
            return None
        if key == "step_lrs":
            return tuple(float(x) for x in raw.split(","))
        if key == "step_epochs":
            return tuple(int(x) for x in raw.split(",")) if raw else None
        if key in _INT_KEYS:
            return int(raw)
        return float(raw)
    except ValueError:
        raise ConfigError(f"bad value {raw!r} for {key}") from None


def lr_at(cfg, epoch, base_lr=None):
    base = cfg.base_lr if base_lr is None else base_lr
    return base / cfg.lr_drop_factor if epoch >= cfg.lr_drop_epoch else base


class NetworkState:
    """Parameters, momentum buffers, epoch counter and RNG of one training run."""

    def __init__(self, net, rng, epoch=0):
        self.net = net
        self.rng = rng
        self.epoch = epoch
        self.velocity = {k: np.zeros_like(v) for k, v in net.named_params().items()}

    @classmethod
    def create(cls, spec, seed=0, precision="double"):
        rng = np.random.default_rng(seed)
        net = Network(spec, dtype_of(precision))
        net.init(rng)
        return cls(net, rng)

    def meta(self):
        return {
            "spec": self.net.spec.to_dict(),
            "epoch": self.epoch,
            "rng": self.rng.bit_generator.state,
        }

    @classmethod
    def from_parts(cls, precision, meta, params, momentum, path="<checkpoint>"):
        try:
            spec = NetworkSpec.from_dict(meta["spec"])
        except (KeyError, TypeError) as e:
            raise FormatError(f"{path}: bad network spec in meta ({e})") from None
        net = Network(spec, dtype_of(precision))
        own = net.named_params()
        if set(own) != set(params) or set(own) != set(momentum):
            raise FormatError(f"{path}: parameter blocks do not match the stored spec")
        for k, v in params.items():
            if own[k].shape != v.shape:
                raise FormatError(f"{path}: {k} has shape {v.shape}, spec needs {own[k].shape}")
            own[k][...] = v
        rng = np.random.default_rng()
        rng.bit_generator.state = meta["rng"]
        state = cls(net, rng, int(meta["epoch"]))
        for k, v in momentum.items():
            state.velocity[k][...] = v
        return state

    def copy_params_from(self, other, names):
        src = other.net.named_params()
        dst = self.net.named_params()
        for k in names:
            dst[k][...] = src[k]


def states_equal(a, b):
    """Bitwise equality of parameters, momentum, epoch and RNG state."""
    pa, pb = a.net.named_params(), b.net.named_params()
    if a.net.dtype != b.net.dtype or pa.keys() != pb.keys() or a.velocity.keys() != b.velocity.keys():
        return False
    same = lambda x, y: x.shape == y.shape and x.tobytes() == y.tobytes()  # noqa: E731
    return (
        all(same(pa[k], pb[k]) for k in pa)
        and all(same(a.velocity[k], b.velocity[k]) for k in a.velocity)
        and a.epoch == b.epoch
        and a.rng.bit_generator.state == b.rng.bit_generator.state
        and a.net.spec == b.net.spec
    )


def sgd_step(state, grads, cfg, epoch, lr=None, frozen=()):
    """Momentum SGD: ``v = m*v + g; w -= lr*v``.  Names in ``frozen`` are left untouched."""
    lr = lr_at(cfg, epoch) if lr is None else lr
    params = state.net.named_params()
    for name, g in grads.items():
        if name in frozen:
            continue
        if g.shape != params[name].shape:
            raise TrainingError(f"gradient for {name} has shape {g.shape}, expected {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient in {name}", epoch=epoch, layer=name)
        v = state.velocity[name]
        v *= cfg.momentum
        v += g
        params[name] -= lr * v
    return state


def _batches(state, n_items, batch_size):
    order = state.rng.permutation(n_items)
    return [order[i:i + batch_size] for i in range(0, n_items, batch_size)]


def train_epoch(state, views, labels, cfg, epoch, lr, frozen=()):
    """One pass over the data; returns the mean softmax loss."""
    net = state.net
    reg = cfg.reg
    if net.spec.architecture == "view_cnn":
        n, v = views.shape[:2]
        items = views.reshape(n * v, 1, *views.shape[2:])
        item_labels = np.repeat(labels, v)
    else:
        items, item_labels = views, labels
    total, count = 0.0, 0
    for idx in _batches(state, len(items), cfg.batch_size):
        logits = net.forward(items[idx])
        loss, dlogits = softmax_ce(logits, item_labels[idx])
        if not math.isfinite(loss):
            raise TrainingError(f"softmax loss is {loss} at epoch {epoch}", epoch=epoch)
        net.zero_grad()
        net.backward(dlogits, reg if (reg.lambda1 or reg.lambda2) else None)
        sgd_step(state, net.named_grads(), cfg, epoch, lr, frozen)
        total += loss * len(idx)
        count += len(idx)
    return total / count


def regularizer_terms(net, reg):
    g = gram_loss(net.regularized_weights(reg), reg)
    return g.cross, g.l2


def train(state, dataset, cfg, step=1, base_lr=None, epochs=None, frozen=(), on_epoch_end=None):
    """Train ``state`` in place on the dataset's training split; returns loss-curve rows.

    Each row is ``(epoch, step, lr, softmax, gram_cross, gram_l2, total)``
    where the gram terms already include their lambda weights.
    """
    views, labels, _ = dataset.split("train")
    if len(labels) == 0:
        raise ConfigError("training split is empty")
    spec = state.net.spec
    if views.shape[2:] != (spec.image_size, spec.image_size):
        raise ConfigError(f"dataset views are {views.shape[2:]}, network expects {spec.image_size}")
    if spec.architecture != "view_cnn" and views.shape[1] != spec.views:
        raise ConfigError(f"dataset has {views.shape[1]} views, network expects {spec.views}")
    views = views.astype(state.net.dtype)
    epochs = cfg.total_epochs if epochs is None else epochs
    reg = cfg.reg
    rows = []
    for epoch in range(epochs):
        lr = lr_at(cfg, epoch, base_lr)
        try:
            softmax = train_epoch(state, views, labels, cfg, epoch, lr, frozen)
        except TrainingError as e:
            e.epoch = epoch if e.epoch is None else e.epoch
            raise
        cross, l2 = regularizer_terms(state.net, reg)
        total = softmax + cross + l2
        if not math.isfinite(total):
            raise TrainingError(f"loss diverged at epoch {epoch}", epoch=epoch)
        state.epoch += 1
        rows.append((epoch, step, lr, softmax, cross, l2, total))
        if on_epoch_end is not None:
            on_epoch_end(state, rows[-1])
    return rows


def cnn_param_names(net):
    """Parameters of the convolutional/fully connected trunk (everything before the LSTM)."""
    names = []
    for layer in net.layers:
        if layer.name == "lstm" or layer is net.classifier:
            break
        names.extend(layer.params)
    return names


def train_cnn_lstm_multistep(spec, dataset, cfg, view_cnn_state=None, on_step_end=None):
    """Three-step CNN-LSTM schedule.

    1. train a View-CNN (skipped when ``view_cnn_state`` is given);
    2. copy its trunk into the CNN-LSTM, freeze it, train LSTM and classifier;
    3. train everything jointly.

    Returns ``(state, rows, view_cnn_state)``.
    """
    from .network import build_spec

    if spec.architecture != "cnn_lstm":
        raise ConfigError(f"multi-step training needs a cnn_lstm spec, got {spec.architecture}")
    rows = []
    if view_cnn_state is None:
        vspec = build_spec("view_cnn", spec.num_classes, spec.views, spec.image_size)
        view_cnn_state = NetworkState.create(vspec, cfg.seed, cfg.precision)
        rows += train(view_cnn_state, dataset, cfg, step=1, base_lr=cfg.step_lrs[0], epochs=cfg.epochs_for_step(1))
        if on_step_end:
            on_step_end(1, view_cnn_state)
    state = NetworkState.create(spec, cfg.seed, cfg.precision)
    trunk = cnn_param_names(state.net)
    state.copy_params_from(view_cnn_state, trunk)
    rows += train(state, dataset, cfg, step=2, base_lr=cfg.step_lrs[1], epochs=cfg.epochs_for_step(2), frozen=set(trunk))
    if on_step_end:
        on_step_end(2, state)
    rows += train(state, dataset, cfg, step=3, base_lr=cfg.step_lrs[2], epochs=cfg.epochs_for_step(3))
    if on_step_end:
        on_step_end(3, state)
    return state, rows, view_cnn_state


def fit(spec, dataset, cfg):
    """Train any architecture with its standard schedule; returns ``(state, rows)``."""
    if spec.architecture == "cnn_lstm":
        state, rows, _ = train_cnn_lstm_multistep(spec, dataset, cfg)
        return state, rows
    state = NetworkState.create(spec, cfg.seed, cfg.precision)
    return state, train(state, dataset, cfg)


def format_loss_csv(rows):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(LOSS_HEADER)
    for epoch, step, lr, softmax, cross, l2, total in rows:
        writer.writerow([epoch, step, repr(float(lr)), repr(float(softmax)), repr(float(cross)), repr(float(l2)), repr(float(total))])
    return buf.getvalue()


def write_loss_csv(rows, path):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(format_loss_csv(rows))
