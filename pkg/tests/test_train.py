import math

import numpy as np
import pytest

from gramreg.checkpoint import MAGIC, dumps, load_checkpoint, parse, save_checkpoint
from gramreg.errors import ConfigError, FormatError, TrainingError
from gramreg.gram import gram_loss
from gramreg.network import build_spec
from gramreg.train import (
    NetworkState,
    TrainConfig,
    cnn_param_names,
    format_loss_csv,
    lr_at,
    sgd_step,
    states_equal,
    train,
    train_cnn_lstm_multistep,
)


def small_cfg(**kw):
    base = dict(total_epochs=2, batch_size=6, seed=0)
    base.update(kw)
    return TrainConfig(**base)


def make_state(ds, arch="mvcnn", seed=0, precision="double"):
    return NetworkState.create(build_spec(arch, ds.num_classes, ds.manifest.views), seed, precision)


class Scalar:
    """Single-parameter stand-in for a network."""

    def __init__(self, w):
        self.p = {"w": np.array([w])}

    def named_params(self):
        return self.p


def scalar_state(w):
    st = NetworkState.__new__(NetworkState)
    st.net = Scalar(w)
    st.velocity = {"w": np.zeros(1)}
    return st


def test_sgd_examples():
    st = scalar_state(0.5)
    sgd_step(st, {"w": np.array([1.0])}, TrainConfig(momentum=0.0), 0, lr=0.1)
    assert st.net.p["w"][0] == pytest.approx(0.4, abs=1e-15)
    st = scalar_state(0.5)
    sgd_step(st, {"w": np.array([0.0])}, TrainConfig(), 0, lr=0.1)
    assert st.net.p["w"][0] == 0.5


def test_sgd_momentum_accumulates():
    st = scalar_state(0.0)
    cfg = TrainConfig(momentum=0.9)
    sgd_step(st, {"w": np.array([1.0])}, cfg, 0, lr=1.0)
    sgd_step(st, {"w": np.array([1.0])}, cfg, 0, lr=1.0)
    assert st.net.p["w"][0] == pytest.approx(-(1 + 1.9))


def test_sgd_rejects_non_finite():
    st = scalar_state(0.0)
    with pytest.raises(TrainingError, match="w") as e:
        sgd_step(st, {"w": np.array([np.nan])}, TrainConfig(), 3, lr=1.0)
    assert e.value.layer == "w" and e.value.epoch == 3


def test_lr_schedule():
    cfg = TrainConfig(base_lr=1e-2)
    assert lr_at(cfg, 39) == 1e-2
    assert lr_at(cfg, 40) == pytest.approx(1e-3, rel=1e-15)


def test_config_defaults_and_validation():
    assert TrainConfig().base_lr == 1e-3
    assert TrainConfig(architecture="view_cnn").base_lr == 1e-2
    with pytest.raises(ConfigError):
        TrainConfig(momentum=1.0)
    with pytest.raises(ConfigError):
        TrainConfig(architecture="vgg")
    cfg = TrainConfig(lambda1=0.0, step_epochs=(1, 2, 3))
    kv = dict(line.split(" = ", 1) for line in cfg.to_lines())
    assert TrainConfig.from_mapping(kv) == cfg


def test_zero_lambdas_log_zero_terms(tiny_dataset):
    rows = train(make_state(tiny_dataset), tiny_dataset, small_cfg(lambda1=0.0, lambda2=0.0))
    assert all(r[4] == 0 and r[5] == 0 for r in rows)
    assert all(r[6] == r[3] for r in rows)


def test_training_is_deterministic(tiny_dataset):
    a, b = make_state(tiny_dataset), make_state(tiny_dataset)
    ra = train(a, tiny_dataset, small_cfg())
    rb = train(b, tiny_dataset, small_cfg())
    assert format_loss_csv(ra) == format_loss_csv(rb)
    assert states_equal(a, b)


def test_logged_terms_match_checkpointed_weights(tiny_dataset, tmp_path):
    cfg = small_cfg(total_epochs=3)
    saved = []

    def snap(state, row):
        path = tmp_path / f"e{row[0]}.bin"
        save_checkpoint(state, path)
        saved.append((path, row))

    train(make_state(tiny_dataset), tiny_dataset, cfg, on_epoch_end=snap)
    assert len(saved) == 3
    for path, (_, _, _, softmax, cross, l2, total) in saved:
        net = load_checkpoint(path).net
        g = gram_loss(net.regularized_weights(cfg.reg), cfg.reg)
        assert cross == pytest.approx(g.cross, rel=1e-10, abs=1e-300)
        assert l2 == pytest.approx(g.l2, rel=1e-10, abs=1e-300)
        assert total == pytest.approx(softmax + cross + l2, rel=1e-12)


def test_training_reduces_loss(tiny_dataset):
    rows = train(make_state(tiny_dataset), tiny_dataset, small_cfg(total_epochs=6, base_lr=1e-2))
    assert rows[-1][3] < rows[0][3]


def test_view_count_mismatch(tiny_dataset):
    state = NetworkState.create(build_spec("mvcnn", 3, 8), 0)
    with pytest.raises(ConfigError):
        train(state, tiny_dataset, small_cfg())


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_reports_epoch(tiny_dataset):
    state = make_state(tiny_dataset)
    with pytest.raises(TrainingError) as e:
        train(state, tiny_dataset, small_cfg(base_lr=1e6, total_epochs=5))
    assert e.value.epoch is not None


def test_multistep_freeze_contract(tiny_dataset):
    spec = build_spec("cnn_lstm", 3, 4)
    cfg = small_cfg(architecture="cnn_lstm", step_epochs=(1, 1, 1))
    snapshots = {}

    def on_step(step, state):
        snapshots[step] = {k: v.copy() for k, v in state.net.named_params().items()}

    state, rows, vstate = train_cnn_lstm_multistep(spec, tiny_dataset, cfg, on_step_end=on_step)
    trunk = cnn_param_names(state.net)
    assert trunk == ["conv1.weight", "conv1.bias", "conv2.weight", "conv2.bias", "fc1.weight", "fc1.bias", "fc2.weight", "fc2.bias"]
    for k in trunk:
        assert snapshots[2][k].tobytes() == snapshots[1][k].tobytes()
    assert any(snapshots[3][k].tobytes() != snapshots[2][k].tobytes() for k in trunk)
    assert any(snapshots[2][k].tobytes() != snapshots[1].get(k, np.zeros(0)).tobytes() for k in snapshots[2] if k.startswith("lstm"))
    assert [r[1] for r in rows] == [1, 2, 3]
    assert [r[0] for r in rows] == [0, 0, 0]


def test_multistep_rejects_other_arch(tiny_dataset):
    with pytest.raises(ConfigError):
        train_cnn_lstm_multistep(build_spec("mvcnn", 3, 4), tiny_dataset, small_cfg())


# --- checkpoints -------------------------------------------------------------------

def test_checkpoint_round_trip(tiny_dataset, tmp_path):
    state = make_state(tiny_dataset)
    train(state, tiny_dataset, small_cfg(total_epochs=1))
    save_checkpoint(state, tmp_path / "c.bin")
    back = load_checkpoint(tmp_path / "c.bin")
    assert states_equal(state, back)
    assert dumps(back) == dumps(state)
    # resuming both gives identical trajectories
    train(state, tiny_dataset, small_cfg(total_epochs=1))
    train(back, tiny_dataset, small_cfg(total_epochs=1))
    assert states_equal(state, back)


def test_checkpoint_single_precision(tiny_dataset, tmp_path):
    state = make_state(tiny_dataset, precision="single")
    save_checkpoint(state, tmp_path / "s.bin")
    assert load_checkpoint(tmp_path / "s.bin", precision="single").net.dtype == np.float32
    with pytest.raises(FormatError, match="precision"):
        load_checkpoint(tmp_path / "s.bin", precision="double")


def test_checkpoint_corruption(tiny_dataset, tmp_path):
    data = dumps(make_state(tiny_dataset))
    assert data.startswith(MAGIC)
    with pytest.raises(FormatError, match="magic"):
        parse(b"NOTACKPT" + data[8:])
    with pytest.raises(FormatError, match="truncated"):
        parse(data[:-5])
    with pytest.raises(FormatError, match="trailing"):
        parse(data + b"\0")
    bad_version = data[:8] + bytes([9]) + data[9:]
    with pytest.raises(FormatError, match="version"):
        parse(bad_version)
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "missing.bin")
