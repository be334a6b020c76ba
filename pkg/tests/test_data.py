import filecmp
import os

import numpy as np
import pytest

from gramreg.data import (
    DatasetManifest,
    generate,
    load,
    quantize,
    read_pgm,
    render,
    render_shape,
    split_counts,
    write_pgm,
)
from gramreg.errors import ConfigError, FormatError

SMALL = dict(classes=["sphere", "torus"], train_per_class=2, test_per_class=1, views=3, size=16)


def tree_equal(a, b):
    cmp = filecmp.dircmp(a, b)
    if cmp.left_only or cmp.right_only or cmp.diff_files or cmp.funny_files:
        return False
    _, mismatch, errors = filecmp.cmpfiles(a, b, cmp.common_files, shallow=False)
    return not mismatch and not errors and all(tree_equal(os.path.join(a, d), os.path.join(b, d)) for d in cmp.common_dirs)


def test_default_counts():
    m = DatasetManifest()
    entries = m.entries()
    train = sum(1 for e in entries if e[2] == "train")
    test = sum(1 for e in entries if e[2] == "test")
    assert train * m.views == 1920
    assert test * m.views == 480


def test_split_counts():
    assert split_counts(50) == (40, 10)
    with pytest.raises(ConfigError):
        split_counts(1, 1.0)


def test_train_test_disjoint(tiny_dataset):
    _, _, train_ids = tiny_dataset.split("train")
    _, _, test_ids = tiny_dataset.split("test")
    assert not set(train_ids) & set(test_ids)
    assert len(train_ids) == 18 and len(test_ids) == 9


def test_render_is_deterministic_and_seed_sensitive():
    a = render_shape("cube", 3, 4, 32, seed=0)
    b = render_shape("cube", 3, 4, 32, seed=0)
    c = render_shape("cube", 3, 4, 32, seed=1)
    assert a.tobytes() == b.tobytes()
    assert a.tobytes() != c.tobytes()
    assert a.shape == (4, 32, 32) and a.min() >= 0 and a.max() <= 1


def test_views_differ_and_objects_are_visible():
    v = render_shape("pyramid", 0, 8, 32, seed=0)
    assert all(v[k].max() > 0 for k in range(8))
    assert not np.array_equal(v[0], v[1])


def test_classes_are_distinguishable(tiny_dataset):
    views, labels, _ = tiny_dataset.split("train")
    means = [views[labels == c].mean(axis=0) for c in range(3)]
    assert min(np.abs(means[i] - means[j]).mean() for i in range(3) for j in range(i + 1, 3)) > 0.01


def test_quantize_rounding():
    np.testing.assert_array_equal(quantize(np.array([0.0, 1.0, 0.5 / 255, 2.0, -1.0])), [0, 255, 1, 255, 0])


def test_generate_is_byte_deterministic(tmp_path):
    m = DatasetManifest(**SMALL)
    generate(m, tmp_path / "a")
    generate(m, tmp_path / "b")
    assert tree_equal(tmp_path / "a", tmp_path / "b")


def test_round_trip(tmp_path):
    m = DatasetManifest(**SMALL)
    ds = generate(m, tmp_path / "d")
    back = load(tmp_path / "d")
    assert back.manifest == m
    assert len(back.samples) == len(ds.samples)
    for s, t in zip(ds.samples, back.samples):
        assert (s.shape_id, s.class_id, s.split) == (t.shape_id, t.class_id, t.split)
        assert s.views.tobytes() == t.views.tobytes()


def test_single_view_round_trip(tmp_path):
    m = DatasetManifest(**dict(SMALL, views=1))
    ds = generate(m, tmp_path / "d")
    back = load(tmp_path / "d")
    assert back.split("train")[0].shape == (4, 1, 16, 16)
    assert back.split("test")[0].tobytes() == ds.split("test")[0].tobytes()


def test_missing_image_is_named(tmp_path):
    generate(DatasetManifest(**SMALL), tmp_path / "d")
    victim = tmp_path / "d" / "torus" / "4_1.pgm"
    victim.unlink()
    with pytest.raises(FormatError, match="4_1.pgm"):
        load(tmp_path / "d")


def test_wrong_image_size(tmp_path):
    generate(DatasetManifest(**SMALL), tmp_path / "d")
    write_pgm(tmp_path / "d" / "sphere" / "0_0.pgm", np.zeros((8, 8)))
    with pytest.raises(FormatError, match="0_0.pgm"):
        load(tmp_path / "d")


def test_count_mismatch(tmp_path):
    generate(DatasetManifest(**SMALL), tmp_path / "d")
    lines = (tmp_path / "d" / "manifest.csv").read_text().splitlines()
    (tmp_path / "d" / "manifest.csv").write_text("\n".join(lines[:-1]) + "\n")
    with pytest.raises(FormatError, match="manifest.csv"):
        load(tmp_path / "d")


def test_corrupt_header(tmp_path):
    p = tmp_path / "x.pgm"
    p.write_bytes(b"P2\n2 2\n255\n0000")
    with pytest.raises(FormatError, match="x.pgm"):
        read_pgm(p)
    p.write_bytes(b"P5\n2 2\n255\n000")
    with pytest.raises(FormatError):
        read_pgm(p)


def test_pgm_round_trip(tmp_path, rng):
    img = rng.integers(0, 256, (5, 7)).astype(np.uint8)
    write_pgm(tmp_path / "i.pgm", img)
    np.testing.assert_array_equal(read_pgm(tmp_path / "i.pgm"), img)


def test_manifest_validation():
    with pytest.raises(ConfigError):
        DatasetManifest(classes=["sphere"])
    with pytest.raises(ConfigError):
        DatasetManifest(classes=["sphere", "teapot"])


def test_in_memory_render_matches_manifest():
    ds = render(DatasetManifest(**SMALL))
    assert [s.shape_id for s in ds.samples] == [0, 1, 2, 3, 4, 5]
    assert [s.split for s in ds.samples] == ["train", "train", "test"] * 2
