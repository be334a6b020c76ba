"""Deterministic synthetic multi-view shape dataset.

Each shape is a jittered solid from a small class library, rendered as an
orthographic depth image (nearer is brighter, background 0) from ``V``
cameras at azimuths ``2*pi*k/V`` around the vertical axis, 25 degrees above
the horizon.  All randomness for a shape comes from a generator seeded with
``(seed, shape_id)``, so any subset of shapes renders identically in any
order.

On disk a dataset directory holds::

    dataset.cfg                      key = value lines (classes, counts, V, size, seed)
    manifest.csv                     shape_id,class_id,split,view_0,...,view_{V-1}
    <class>/<shape_id>_<view>.pgm    8-bit binary PGM (P5) views
"""

import csv
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import List

import numpy as np

from .errors import ConfigError, FormatError

DEFAULT_CLASSES = ("sphere", "cube", "pyramid", "torus", "cylinder", "cross")
ELEVATION = np.deg2rad(25.0)
DEPTH_SAMPLES = 48
EXTENT = 1.25


def _sphere(x, y, z):
    return x * x + y * y + z * z <= 1.0


def _cube(x, y, z):
    return np.maximum(np.maximum(np.abs(x), np.abs(y)), np.abs(z)) <= 0.8


def _pyramid(x, y, z):
    half = 0.9 * (0.8 - y) / 1.6
    return (np.abs(y) <= 0.8) & (np.abs(x) <= half) & (np.abs(z) <= half)


def _torus(x, y, z):
    r = np.sqrt(x * x + z * z) - 0.65
    return r * r + y * y <= 0.3 ** 2


def _cylinder(x, y, z):
    return (x * x + z * z <= 0.36) & (np.abs(y) <= 0.9)


def _cross(x, y, z):
    bar = 0.25
    thin = np.abs(z) <= bar
    return thin & (
        ((np.abs(x) <= 0.9) & (np.abs(y) <= bar)) | ((np.abs(y) <= 0.9) & (np.abs(x) <= bar))
    )


SOLIDS = {
    "sphere": _sphere,
    "cube": _cube,
    "pyramid": _pyramid,
    "torus": _torus,
    "cylinder": _cylinder,
    "cross": _cross,
}


@dataclass
class DatasetManifest:
    classes: List[str] = field(default_factory=lambda: list(DEFAULT_CLASSES))
    train_per_class: int = 40
    test_per_class: int = 10
    views: int = 8
    size: int = 32
    seed: int = 0

    def __post_init__(self):
        self.classes = list(self.classes)
        if len(self.classes) < 2:
            raise ConfigError("need at least two classes")
        unknown = [c for c in self.classes if c not in SOLIDS]
        if unknown:
            raise ConfigError(f"unknown classes {unknown}; available: {sorted(SOLIDS)}")
        if len(set(self.classes)) != len(self.classes):
            raise ConfigError("class names must be unique")
        if self.train_per_class < 1 or self.test_per_class < 0:
            raise ConfigError("train_per_class must be >= 1 and test_per_class >= 0")
        if self.views < 1 or self.size < 4:
            raise ConfigError("views must be >= 1 and size >= 4")

    @property
    def shapes_per_class(self):
        return self.train_per_class + self.test_per_class

    def entries(self):
        """(shape_id, class_id, split) for every shape, in shape_id order."""
        out = []
        for c in range(len(self.classes)):
            for k in range(self.shapes_per_class):
                split = "train" if k < self.train_per_class else "test"
                out.append((c * self.shapes_per_class + k, c, split))
        return out

    def to_lines(self):
        return [
            f"classes = {','.join(self.classes)}",
            f"train_per_class = {self.train_per_class}",
            f"test_per_class = {self.test_per_class}",
            f"views = {self.views}",
            f"size = {self.size}",
            f"seed = {self.seed}",
        ]

    @classmethod
    def from_file(cls, path):
        kv = read_kv(path)
        try:
            return cls(
                classes=kv["classes"].split(","),
                train_per_class=int(kv["train_per_class"]),
                test_per_class=int(kv["test_per_class"]),
                views=int(kv["views"]),
                size=int(kv["size"]),
                seed=int(kv["seed"]),
            )
        except (KeyError, ValueError) as e:
            raise FormatError(f"{path}: bad dataset config ({e})") from None


def read_kv(path):
    """Parse UTF-8 ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise FormatError(f"{path}:{n}: expected 'key = value'")
            k, v = line.split("=", 1)
            out[k.strip()] = v.strip()
    return out


@dataclass
class ViewSample:
    shape_id: int
    class_id: int
    split: str
    views: np.ndarray  # (V, H, W) float64 in [0, 1]


@dataclass
class Dataset:
    manifest: DatasetManifest
    samples: List[ViewSample]

    def split(self, name):
        """Stacked ``(views (n, V, H, W), labels, shape_ids)`` for one split."""
        chosen = [s for s in self.samples if s.split == name]
        if not chosen:
            m = self.manifest
            empty = np.zeros((0, m.views, m.size, m.size))
            return empty, np.zeros(0, np.int64), np.zeros(0, np.int64)
        views = np.stack([s.views for s in chosen])
        labels = np.array([s.class_id for s in chosen], dtype=np.int64)
        ids = np.array([s.shape_id for s in chosen], dtype=np.int64)
        return views, labels, ids

    @property
    def num_classes(self):
        return len(self.manifest.classes)


def quantize(img):
    """Map [0, 1] floats to 8-bit levels, rounding half away from zero."""
    return np.floor(np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def _rotation(axis, angle):
    c, s = np.cos(angle), np.sin(angle)
    if axis == "x":
        return np.array([[1, 0, 0], [0, c, -s], [0, s, c]])
    return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])


def render_shape(class_name, shape_id, views, size, seed):
    """Render one shape's views as quantized depth images, shape (V, size, size) in [0, 1]."""
    rng = np.random.default_rng([seed, shape_id])
    scale = rng.uniform(0.7, 0.95) * rng.uniform(0.8, 1.2, 3)
    yaw = rng.uniform(0, 2 * np.pi)
    tilt = rng.uniform(-0.25, 0.25)
    # world -> object frame
    rot = _rotation("x", tilt) @ _rotation("y", yaw)
    solid = SOLIDS[class_name]

    grid = np.linspace(-EXTENT, EXTENT, size)
    a, b = np.meshgrid(grid, -grid)  # image row 0 is the top
    depth_t = np.linspace(1.5, -1.5, DEPTH_SAMPLES)
    out = np.zeros((views, size, size))
    ce, se = np.cos(ELEVATION), np.sin(ELEVATION)
    for k in range(views):
        theta = 2 * np.pi * k / views
        cam = np.array([ce * np.sin(theta), se, ce * np.cos(theta)])
        right = np.array([np.cos(theta), 0.0, -np.sin(theta)])
        up = np.cross(cam, right)
        pts = (
            a[None, :, :, None] * right
            + b[None, :, :, None] * up
            + depth_t[:, None, None, None] * cam
        )  # (T, H, W, 3)
        obj = (pts @ rot.T) / scale
        hit = solid(obj[..., 0], obj[..., 1], obj[..., 2])
        first = hit.argmax(axis=0)
        any_hit = hit.any(axis=0)
        nearness = 1.0 - first / (DEPTH_SAMPLES - 1)
        out[k] = np.where(any_hit, 0.2 + 0.8 * nearness, 0.0)
    return quantize(out) / 255.0


def render(manifest):
    """Build the dataset in memory without touching the disk."""
    samples = []
    for sid, cid, split in manifest.entries():
        views = render_shape(manifest.classes[cid], sid, manifest.views, manifest.size, manifest.seed)
        samples.append(ViewSample(sid, cid, split, views))
    return Dataset(manifest, samples)


def view_path(manifest, shape_id, class_id, view):
    return f"{manifest.classes[class_id]}/{shape_id}_{view}.pgm"


def write_pgm(path, img):
    img = np.asarray(img, dtype=np.uint8)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def read_pgm(path):
    """Read an 8-bit binary PGM; raises FormatError naming ``path`` on any defect."""
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise FormatError(f"{path}: cannot read image ({e.strerror})") from None
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated PGM header")
        tokens.append(data[start:pos])
    if tokens[0] != b"P5":
        raise FormatError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise FormatError(f"{path}: corrupt PGM header") from None
    if maxval != 255:
        raise FormatError(f"{path}: expected maxval 255, got {maxval}")
    pixels = data[pos + 1:]
    if len(pixels) != w * h:
        raise FormatError(f"{path}: expected {w * h} pixel bytes, found {len(pixels)}")
    return np.frombuffer(pixels, dtype=np.uint8).reshape(h, w)


def generate(manifest, out_dir):
    """Render the dataset and write it under ``out_dir``; returns the in-memory dataset."""
    out_dir = Path(out_dir)
    dataset = render(manifest)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        for name in manifest.classes:
            (out_dir / name).mkdir(exist_ok=True)
        (out_dir / "dataset.cfg").write_text("\n".join(manifest.to_lines()) + "\n", encoding="utf-8")
        with open(out_dir / "manifest.csv", "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["shape_id", "class_id", "split"] + [f"view_{k}" for k in range(manifest.views)])
            for s in dataset.samples:
                paths = [view_path(manifest, s.shape_id, s.class_id, k) for k in range(manifest.views)]
                writer.writerow([s.shape_id, s.class_id, s.split] + paths)
                for k, rel in enumerate(paths):
                    write_pgm(out_dir / rel, quantize(s.views[k]))
    except OSError as e:
        raise OSError(f"cannot write dataset to {out_dir}: {e.strerror}") from e
    return dataset


def load(path):
    """Load a dataset from its directory (or its ``manifest.csv``)."""
    path = Path(path)
    root = path.parent if path.name == "manifest.csv" else path
    cfg_path, csv_path = root / "dataset.cfg", root / "manifest.csv"
    for p in (cfg_path, csv_path):
        if not p.exists():
            raise FormatError(f"{p}: missing")
    manifest = DatasetManifest.from_file(cfg_path)
    expected = manifest.entries()
    samples = []
    with open(csv_path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    header = ["shape_id", "class_id", "split"] + [f"view_{k}" for k in range(manifest.views)]
    if not rows or rows[0] != header:
        raise FormatError(f"{csv_path}: header does not match {manifest.views} views")
    if len(rows) - 1 != len(expected):
        raise FormatError(f"{csv_path}: expected {len(expected)} shapes, found {len(rows) - 1}")
    for n, (row, exp) in enumerate(zip(rows[1:], expected), 2):
        if len(row) != len(header):
            raise FormatError(f"{csv_path}:{n}: expected {len(header)} fields")
        try:
            sid, cid = int(row[0]), int(row[1])
        except ValueError:
            raise FormatError(f"{csv_path}:{n}: bad shape or class id") from None
        if (sid, cid, row[2]) != exp:
            raise FormatError(f"{csv_path}:{n}: entry {row[:3]} does not match the dataset config")
        views = np.empty((manifest.views, manifest.size, manifest.size))
        for k, rel in enumerate(row[3:]):
            img = read_pgm(root / rel)
            if img.shape != (manifest.size, manifest.size):
                raise FormatError(f"{root / rel}: image is {img.shape[1]}x{img.shape[0]}, expected {manifest.size}x{manifest.size}")
            views[k] = img / 255.0
        samples.append(ViewSample(sid, cid, row[2], views))
    return Dataset(manifest, samples)


def split_counts(shapes_per_class, test_fraction=0.2):
    """Train/test shapes per class for a total per class (default 80/20)."""
    test = int(round(shapes_per_class * test_fraction))
    train = shapes_per_class - test
    if train < 1:
        raise ConfigError("need at least one training shape per class")
    return train, test
