"""Episodic few-shot task generation.

Three task families are provided:

* Gaussian clusters: N-way classification, one isotropic Gaussian per class
  with centers drawn uniformly from ``[-scale, scale]^dim``.
* Sinusoids: regression on ``y = A sin(x + phase)``.
* Folder datasets: one directory per class holding binary (P5) PGM images.

Sampling is a pure function of ``(family, counts, seed)``.  Labels are always
episode-local (``0 .. n_way - 1``).
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class TaskError(ValueError):
    pass


class DatasetIOError(TaskError, OSError):
    """A dataset file or directory could not be read."""


@dataclass(frozen=True)
class TaskMeta:
    n_way: int
    k_shot: int
    q_query: int
    family: str
    seed: int


@dataclass(frozen=True)
class Split:
    x: np.ndarray
    y: np.ndarray

    def __len__(self):
        return self.x.shape[0]


@dataclass(frozen=True, eq=False)
class Task:
    """One episode.  ``*_y`` holds int labels or ``(rows, 1)`` real targets."""

    support_x: np.ndarray
    support_y: np.ndarray
    query_x: np.ndarray
    query_y: np.ndarray
    meta: TaskMeta
    info: dict = field(default_factory=dict)

    @property
    def support(self):
        return Split(self.support_x, self.support_y)

    @property
    def query(self):
        return Split(self.query_x, self.query_y)

    @property
    def is_regression(self):
        return self.support_y.dtype.kind == "f"


def _check_counts(n_way, k_shot, q_query, min_way=2):
    if int(n_way) < min_way:
        raise TaskError(f"n_way must be >= {min_way}, got {n_way}")
    if int(k_shot) < 1:
        raise TaskError(f"k_shot must be >= 1, got {k_shot}")
    if int(q_query) < 1:
        raise TaskError(f"q_query must be >= 1, got {q_query}")


def _labels(n_way, per_class):
    return np.repeat(np.arange(n_way), per_class)


# --------------------------------------------------------------------------
# Gaussian clusters


@dataclass(frozen=True)
class GaussianFamily:
    dim: int = 16
    scale: float = 3.0
    spread: float = 0.5
    name: str = "gaussian"
    kind: str = field(default="gaussian-clusters", init=False)

    def __post_init__(self):
        if self.dim < 2:
            raise TaskError(f"gaussian family needs dim >= 2, got {self.dim}")
        if not self.scale > 0:
            raise TaskError(f"class-center scale must be > 0, got {self.scale}")
        if not self.spread >= 0:
            raise TaskError(f"cluster spread must be >= 0, got {self.spread}")

    @property
    def input_dim(self):
        return self.dim

    def sample(self, n_way, k_shot, q_query, seed, split="train"):
        return sample_gaussian_task(self, n_way, k_shot, q_query, seed)


def sample_gaussian_task(family, n_way, k_shot, q_query, seed):
    _check_counts(n_way, k_shot, q_query)
    rng = np.random.default_rng(seed)
    centers = rng.uniform(-family.scale, family.scale, size=(n_way, family.dim))
    sx = np.repeat(centers, k_shot, axis=0)
    sx = sx + family.spread * rng.standard_normal(sx.shape)
    qx = np.repeat(centers, q_query, axis=0)
    qx = qx + family.spread * rng.standard_normal(qx.shape)
    meta = TaskMeta(n_way, k_shot, q_query, family.name, int(seed))
    return Task(sx, _labels(n_way, k_shot), qx, _labels(n_way, q_query), meta)


# --------------------------------------------------------------------------
# sinusoids


@dataclass(frozen=True)
class SinusoidFamily:
    amplitude: tuple = (0.1, 5.0)
    phase: tuple = (0.0, math.pi)
    x_range: tuple = (-5.0, 5.0)
    name: str = "sinusoid"
    kind: str = field(default="sinusoid", init=False)

    @property
    def input_dim(self):
        return 1

    def sample(self, n_way, k_shot, q_query, seed, split="train"):
        return sample_sinusoid_task(self, k_shot, q_query, seed)


def sample_sinusoid_task(family, k_shot, q_query, seed):
    """Regression episode; ``meta.n_way`` is 1."""
    _check_counts(2, k_shot, q_query)
    rng = np.random.default_rng(seed)
    amp = rng.uniform(*family.amplitude)
    phase = rng.uniform(*family.phase)
    sx = rng.uniform(*family.x_range, size=(k_shot, 1))
    qx = rng.uniform(*family.x_range, size=(q_query, 1))
    meta = TaskMeta(1, k_shot, q_query, family.name, int(seed))
    return Task(sx, amp * np.sin(sx + phase), qx, amp * np.sin(qx + phase), meta,
                info={"amplitude": amp, "phase": phase})


# --------------------------------------------------------------------------
# PGM folders

_PGM_TOKEN = re.compile(rb"(?:\s+|#[^\n]*\n?)*([^\s#]+)")


def read_pgm(path):
    """Read a binary (P5) PGM file; returns ``(pixels in [0, 1], maxval)``."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise DatasetIOError(f"cannot read image {path}: {exc}") from exc
    pos = 0
    tokens = []
    for _ in range(4):
        m = _PGM_TOKEN.match(data, pos)
        if m is None:
            raise TaskError(f"{path}: truncated PGM header")
        tokens.append(m.group(1))
        pos = m.end()
    if tokens[0] != b"P5":
        raise TaskError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise TaskError(f"{path}: malformed PGM header") from None
    if width < 1 or height < 1 or not 0 < maxval < 65536:
        raise TaskError(f"{path}: invalid PGM header values")
    pos += 1  # single whitespace byte after maxval
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype(np.uint8)
    count = width * height
    raw = data[pos:pos + count * dtype.itemsize]
    if len(raw) != count * dtype.itemsize:
        raise TaskError(f"{path}: pixel data truncated")
    pixels = np.frombuffer(raw, dtype=dtype).reshape(height, width)
    return pixels.astype(np.float64) / maxval, maxval


def write_pgm(path, pixels, maxval=255):
    """Write integer pixel values as a binary PGM."""
    pixels = np.asarray(pixels)
    height, width = pixels.shape
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype(np.uint8)
    header = f"P5\n{width} {height}\n{maxval}\n".encode("ascii")
    Path(path).write_bytes(header + pixels.astype(dtype).tobytes())


@dataclass(frozen=True, eq=False)
class FolderFamily:
    root: Path
    classes: tuple  # lexicographic
    images: dict  # class name -> (count, features) array
    train_classes: tuple
    test_classes: tuple
    image_shape: tuple
    name: str = "folder"
    kind: str = field(default="folder-dataset", init=False)

    @property
    def input_dim(self):
        return int(np.prod(self.image_shape))

    def split_classes(self, split):
        if split == "train":
            return self.train_classes
        if split == "test":
            return self.test_classes
        if split == "all":
            return self.classes
        raise TaskError(f"unknown split {split!r}")

    def sample(self, n_way, k_shot, q_query, seed, split="train"):
        return sample_folder_task(self, n_way, k_shot, q_query, seed, split=split)


def _parse_split(split_spec, classes):
    if split_spec is None:
        return classes, ()
    if isinstance(split_spec, (int, float)) and not isinstance(split_spec, bool):
        frac = float(split_spec)
        if not 0.0 <= frac <= 1.0:
            raise TaskError(f"split fraction must be in [0, 1], got {frac}")
        cut = int(round(frac * len(classes)))
        return classes[:cut], classes[cut:]
    listing = Path(split_spec)
    try:
        lines = listing.read_text().splitlines()
    except OSError as exc:
        raise DatasetIOError(f"cannot read class list {listing}: {exc}") from exc
    wanted = {ln.strip() for ln in lines if ln.strip()}
    unknown = sorted(wanted - set(classes))
    if unknown:
        raise TaskError(f"class list names unknown classes: {', '.join(unknown)}")
    train = tuple(c for c in classes if c in wanted)
    test = tuple(c for c in classes if c not in wanted)
    return train, test


def load_folder_dataset(path, split_spec=0.5, name=None):
    """Index a directory with one sub-directory of PGM images per class.

    ``split_spec`` is either a fraction (the first ``round(f * C)`` classes in
    lexicographic order go to meta-train, the rest to meta-test) or the path
    of a file listing meta-train class names, one per line.
    """
    root = Path(path)
    if not root.is_dir():
        raise DatasetIOError(f"dataset directory {root} does not exist")
    classes = tuple(sorted(p.name for p in root.iterdir() if p.is_dir()))
    if not classes:
        raise TaskError(f"{root} has no class sub-directories")
    images = {}
    shape = None
    for cls in classes:
        files = sorted(p for p in (root / cls).iterdir() if p.is_file())
        arrays = []
        for f in files:
            pixels, _ = read_pgm(f)
            if shape is None:
                shape = pixels.shape
            elif pixels.shape != shape:
                raise TaskError(
                    f"class {cls!r}: image {f.name} is {pixels.shape}, expected {shape}"
                )
            arrays.append(pixels.ravel())
        if not arrays:
            raise TaskError(f"class {cls!r} has no images")
        feats = np.stack(arrays)
        feats.setflags(write=False)
        images[cls] = feats
    train, test = _parse_split(split_spec, classes)
    return FolderFamily(
        root=root,
        classes=classes,
        images=images,
        train_classes=tuple(train),
        test_classes=tuple(test),
        image_shape=shape,
        name=name or root.name,
    )


def sample_folder_task(family, n_way, k_shot, q_query, seed, split="train"):
    _check_counts(n_way, k_shot, q_query)
    pool = family.split_classes(split)
    if len(pool) < n_way:
        raise TaskError(
            f"split {split!r} of {family.name} has {len(pool)} classes, need {n_way}"
        )
    rng = np.random.default_rng(seed)
    chosen = rng.choice(len(pool), size=n_way, replace=False)
    sx, qx = [], []
    need = k_shot + q_query
    for idx in chosen:
        cls = pool[idx]
        feats = family.images[cls]
        if feats.shape[0] < need:
            raise TaskError(
                f"class {cls!r} has {feats.shape[0]} images, need {need} (k_shot + q_query)"
            )
        order = rng.permutation(feats.shape[0])[:need]
        sx.append(feats[order[:k_shot]])
        qx.append(feats[order[k_shot:]])
    meta = TaskMeta(n_way, k_shot, q_query, family.name, int(seed))
    return Task(np.concatenate(sx), _labels(n_way, k_shot),
                np.concatenate(qx), _labels(n_way, q_query), meta,
                info={"classes": tuple(pool[i] for i in chosen)})
