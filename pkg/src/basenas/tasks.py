"""Image corpora, task sampling and few-shot episodes.

The synthetic corpus plants two task families. In family A the class is the
peak intensity of a soft blob at a random position, a statistic that survives
any amount of spatial averaging. In family B the class is the orientation of
a sinusoidal grating at fixed contrast, which only oriented filters see.

On disk a corpus is a JSON manifest plus one binary blob: the magic ``BNC1``,
a little-endian u32 format version, then u8 pixels, row-major, class-major.
"""
import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import (ConfigError, CorruptHeader, FormatError, ManifestMismatch,
                     TruncatedFile, VersionMismatch)
from .rng import stream

MAGIC = b"BNC1"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sI")


@dataclass
class Corpus:
    """Class-major images in [0, 1]; ``images[offsets[c]:offsets[c + 1]]`` is class c."""
    images: np.ndarray
    counts: tuple
    provenance: str = "synthetic"
    families: tuple = None
    class_names: tuple = None

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.counts = tuple(int(c) for c in self.counts)
        if self.images.ndim != 4:
            raise ConfigError("corpus images must be (N, C, H, W)")
        if any(c < 1 for c in self.counts):
            raise ConfigError("every class needs at least one image")
        if sum(self.counts) != self.images.shape[0]:
            raise ConfigError("per-class counts do not add up to the image count")
        self.offsets = np.concatenate([[0], np.cumsum(self.counts)]).astype(np.int64)
        self.labels = np.repeat(np.arange(len(self.counts)), self.counts)

    @property
    def n_classes(self):
        return len(self.counts)

    @property
    def shape(self):
        return self.images.shape[1:]

    @property
    def resolution(self):
        return self.images.shape[2]

    def class_indices(self, c):
        return np.arange(self.offsets[c], self.offsets[c + 1])

    def family_classes(self, family):
        if family is None:
            return list(range(self.n_classes))
        if self.families is None:
            raise ConfigError("corpus has no family tags")
        out = [c for c, f in enumerate(self.families) if f == family]
        if not out:
            raise ConfigError(f"no classes in family {family!r}")
        return out


def quantize(images):
    return np.round(np.clip(images, 0.0, 1.0) * 255.0) / 255.0


# --------------------------------------------------------------------------
# synthetic generation


@dataclass
class SyntheticParams:
    classes: int = 16
    per_class: int = 40
    size: int = 32
    noise: float = 0.05
    blob_levels: tuple = (0.3, 0.9)
    grating_period: float = 8.0
    grating_contrast: float = 0.35


def _blob(rng, size, amp):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cy, cx = rng.uniform(size * 0.25, size * 0.75, size=2)
    sig = size / 5.0
    return 0.1 + amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sig * sig))


def _grating(rng, size, angle, period, contrast):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    phase = rng.uniform(0, 2 * np.pi)
    u = xx * np.cos(angle) + yy * np.sin(angle)
    return 0.5 + contrast * np.sin(2 * np.pi * u / period + phase)


def generate_synthetic_corpus(seed, params=None, **overrides):
    """Deterministic two-family corpus; the first half of the classes is family A."""
    p = params or SyntheticParams()
    if overrides:
        p = SyntheticParams(**{**p.__dict__, **overrides})
    if p.classes < 4 or p.classes % 2:
        raise ConfigError("need an even class count >= 4 (two families of >= 2 classes)")
    if p.size < 8:
        raise ConfigError("image size must be >= 8")
    if p.per_class < 1:
        raise ConfigError("per_class must be >= 1")
    half = p.classes // 2
    levels = np.linspace(p.blob_levels[0], p.blob_levels[1], half)
    angles = np.arange(half) * np.pi / half
    out = np.empty((p.classes * p.per_class, 1, p.size, p.size))
    i = 0
    for c in range(p.classes):
        rng = stream(seed, "corpus", c)
        for _ in range(p.per_class):
            if c < half:
                img = _blob(rng, p.size, levels[c])
            else:
                img = _grating(rng, p.size, angles[c - half], p.grating_period,
                               p.grating_contrast)
            out[i, 0] = img + p.noise * rng.standard_normal((p.size, p.size))
            i += 1
    fams = tuple("A" if c < half else "B" for c in range(p.classes))
    names = tuple(f"blob{c}" if c < half else f"grating{c - half}" for c in range(p.classes))
    return Corpus(quantize(out), (p.per_class,) * p.classes, "synthetic", fams, names)


def corpus_from_arrays(per_class, names=None, provenance="ingested"):
    """Build a corpus from a list of per-class image arrays with values in [0, 1]."""
    arrays = []
    for c, a in enumerate(per_class):
        a = np.asarray(a, dtype=np.float64)
        if a.ndim == 3:
            a = a[:, None]
        if a.ndim != 4:
            raise ConfigError(f"class {c}: expected (n, H, W) or (n, C, H, W)")
        arrays.append(a)
    if len({a.shape[1:] for a in arrays}) != 1:
        raise ConfigError("all images must share one shape")
    return Corpus(np.concatenate(arrays), [len(a) for a in arrays], provenance, None,
                  tuple(names) if names else None)


# --------------------------------------------------------------------------
# on-disk format


def save_corpus(corpus, path):
    """Write ``<path>.json`` and ``<path>.bin``; returns the manifest path."""
    base = str(path)
    if base.endswith(".json"):
        base = base[:-5]
    pixels = np.round(corpus.images * 255.0)
    if np.any(np.abs(pixels - corpus.images * 255.0) > 1e-6):
        raise FormatError("images are not u8-quantized; call quantize() first")
    blob_path = base + ".bin"
    with open(blob_path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, FORMAT_VERSION))
        f.write(pixels.astype(np.uint8).tobytes())
    manifest = {
        "format": "BNC1",
        "version": FORMAT_VERSION,
        "classes": corpus.n_classes,
        "shape": list(corpus.shape),
        "dtype": "u8",
        "counts": list(corpus.counts),
        "provenance": corpus.provenance,
        "families": list(corpus.families) if corpus.families else None,
        "class_names": list(corpus.class_names) if corpus.class_names else None,
        "blob": os.path.basename(blob_path),
    }
    with open(base + ".json", "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
        f.write("\n")
    return base + ".json"


def _read_manifest(path):
    try:
        with open(path) as f:
            m = json.load(f)
    except json.JSONDecodeError as e:
        raise FormatError(f"malformed manifest {path}: {e}") from None
    need = ("classes", "shape", "dtype", "counts")
    missing = [k for k in need if k not in m]
    if missing:
        raise FormatError(f"manifest missing fields {missing}")
    if m["dtype"] != "u8":
        raise FormatError(f"unsupported dtype {m['dtype']!r}")
    if len(m["counts"]) != m["classes"]:
        raise ManifestMismatch(f"manifest lists {len(m['counts'])} counts "
                               f"for {m['classes']} classes")
    if len(m["shape"]) != 3 or any(int(s) < 1 for s in m["shape"]):
        raise ManifestMismatch(f"bad image shape {m['shape']}")
    return m


def load_corpus(path, manifest=None):
    """Read a corpus written by :func:`save_corpus` (or hand-made in that format).

    ``path`` is the manifest or the blob; ``manifest`` may override the
    manifest path.
    """
    path = str(path)
    base = path[:-5] if path.endswith(".json") else path[:-4] if path.endswith(".bin") else path
    m = _read_manifest(manifest or base + ".json")
    blob_name = m.get("blob") or os.path.basename(base) + ".bin"
    blob = os.path.join(os.path.dirname(base + ".json"), blob_name)
    with open(blob, "rb") as f:
        raw = f.read()
    if len(raw) < _HEADER.size:
        raise TruncatedFile("corpus header", _HEADER.size, len(raw))
    magic, version = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise CorruptHeader(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"corpus format version {version}, "
                              f"this reader handles {FORMAT_VERSION}")
    shape = tuple(int(s) for s in m["shape"])
    n = int(sum(m["counts"]))
    expected = n * int(np.prod(shape))
    body = len(raw) - _HEADER.size
    if body < expected:
        raise TruncatedFile("corpus pixels", expected, body)
    if body > expected:
        raise ManifestMismatch(f"blob holds {body} pixel bytes, manifest implies {expected}")
    pixels = np.frombuffer(raw, dtype=np.uint8, offset=_HEADER.size).reshape((n,) + shape)
    fams = m.get("families")
    names = m.get("class_names")
    return Corpus(pixels.astype(np.float64) / 255.0, m["counts"], m.get("provenance", "ingested"),
                  tuple(fams) if fams else None, tuple(names) if names else None)


# --------------------------------------------------------------------------
# resampling


def _interp_matrix(n_out, n_in):
    # half-pixel-centre bilinear weights, edge-clamped
    R = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for o in range(n_out):
        s = (o + 0.5) * scale - 0.5
        s = min(max(s, 0.0), n_in - 1.0)
        i0 = int(np.floor(s))
        i1 = min(i0 + 1, n_in - 1)
        t = s - i0
        R[o, i0] += 1.0 - t
        R[o, i1] += t
    return R


def resample(images, size):
    """Bilinear resample of ``(N, C, H, W)`` images to ``size x size``."""
    images = np.asarray(images, dtype=np.float64)
    H, W = images.shape[-2:]
    if (H, W) == (size, size):
        return images.copy()
    Ry = _interp_matrix(size, H)
    Rx = _interp_matrix(size, W)
    out = np.einsum("oh,nchw,pw->ncop", Ry, images, Rx)
    return np.clip(out, 0.0, 1.0)


# --------------------------------------------------------------------------
# tasks


@dataclass
class TaskSpec:
    class_ids: tuple
    resolution: int
    train_idx: np.ndarray
    val_idx: np.ndarray
    seed: int
    family: str = None


@dataclass
class TaskData:
    """Resampled arrays for one task; labels are 0..n-1 in ``class_ids`` order."""
    spec: TaskSpec
    x_train: np.ndarray
    y_train: np.ndarray
    x_val: np.ndarray
    y_val: np.ndarray

    @property
    def resolution(self):
        return self.spec.resolution

    @property
    def n_classes(self):
        return len(self.spec.class_ids)

    @property
    def n_train(self):
        return len(self.y_train)

    def batch(self, rng, batch_size):
        """A training minibatch drawn without replacement."""
        n = len(self.y_train)
        idx = rng.choice(n, size=min(batch_size, n), replace=False)
        return self.x_train[idx], self.y_train[idx], self.resolution

    def epoch_batches(self, rng, batch_size):
        order = rng.permutation(len(self.y_train))
        for i in range(0, len(order), batch_size):
            idx = order[i:i + batch_size]
            yield self.x_train[idx], self.y_train[idx], self.resolution

    def steps_per_epoch(self, batch_size):
        return -(-len(self.y_train) // batch_size)


def sample_task(corpus, n_classes, resolution, rng, family=None, train_frac=0.8, seed=0):
    """Uniform class subset, stratified train/validation split."""
    pool = corpus.family_classes(family)
    if n_classes > len(pool):
        raise ConfigError(f"task wants {n_classes} classes, only {len(pool)} available")
    if n_classes < 2:
        raise ConfigError("a task needs at least 2 classes")
    classes = tuple(sorted(int(c) for c in rng.choice(pool, size=n_classes, replace=False)))
    train, val = [], []
    for c in classes:
        idx = rng.permutation(corpus.class_indices(c))
        k = int(round(train_frac * len(idx)))
        if len(idx) > 1:
            k = min(max(k, 1), len(idx) - 1)
        train.append(idx[:k])
        val.append(idx[k:])
    return TaskSpec(classes, int(resolution), np.concatenate(train), np.concatenate(val),
                    int(seed), family)


def _resampled(corpus, size):
    # corpora are immutable, so resampled copies are cached on the instance
    cache = corpus.__dict__.setdefault("_resampled", {})
    if size not in cache:
        cache[size] = resample(corpus.images, size)
    return cache[size]


def task_data(corpus, spec):
    images = _resampled(corpus, spec.resolution)
    remap = {c: i for i, c in enumerate(spec.class_ids)}
    ytr = np.array([remap[int(corpus.labels[i])] for i in spec.train_idx], dtype=np.int64)
    yva = np.array([remap[int(corpus.labels[i])] for i in spec.val_idx], dtype=np.int64)
    return TaskData(spec, images[spec.train_idx], ytr, images[spec.val_idx], yva)


@dataclass
class TaskSource:
    """Deterministic task stream: task ``(epoch, index)`` depends only on its keys.

    Resolutions cycle with the task index; families (if given) cycle with the
    index divided by the number of resolutions, so each (family, resolution)
    pair gets an equal share.
    """
    corpus: Corpus
    n_classes: int = 10
    resolutions: tuple = (16, 32)
    families: tuple = None
    seed: int = 0
    train_frac: float = 0.8

    def spec(self, epoch, index):
        res = self.resolutions[index % len(self.resolutions)]
        fam = None
        if self.families:
            fam = self.families[(index // len(self.resolutions)) % len(self.families)]
        rng = stream(self.seed, "task", epoch, index)
        return sample_task(self.corpus, self.n_classes, res, rng, fam, self.train_frac,
                           seed=self.seed)

    def task(self, epoch, index):
        return task_data(self.corpus, self.spec(epoch, index))


# --------------------------------------------------------------------------
# episodes


@dataclass
class Episode:
    n_way: int
    k_shot: int
    support_x: np.ndarray
    support_y: np.ndarray
    query_x: np.ndarray
    query_y: np.ndarray
    class_ids: tuple
    support_idx: np.ndarray = field(repr=False, default=None)
    query_idx: np.ndarray = field(repr=False, default=None)
    resolution: int = None


def split_classes(corpus, n_test, rng, family=None):
    """Disjoint (train, test) class lists drawn from ``family``."""
    pool = list(corpus.family_classes(family))
    if not 0 < n_test < len(pool):
        raise ConfigError(f"cannot hold out {n_test} of {len(pool)} classes")
    perm = [pool[i] for i in rng.permutation(len(pool))]
    return tuple(sorted(perm[n_test:])), tuple(sorted(perm[:n_test]))


def sample_episode(corpus, n_way, k_shot, query_per_way, rng, classes=None, resolution=None,
                   shuffle_labels=False):
    """N-way K-shot episode; labels are remapped to 0..n_way-1."""
    pool = list(range(corpus.n_classes)) if classes is None else list(classes)
    if n_way > len(pool):
        raise ConfigError(f"{n_way}-way episode needs {n_way} classes, pool has {len(pool)}")
    chosen = [int(pool[i]) for i in rng.choice(len(pool), size=n_way, replace=False)]
    need = k_shot + query_per_way
    sup, qry = [], []
    for c in chosen:
        idx = corpus.class_indices(c)
        if len(idx) < need:
            raise ConfigError(f"class {c} has {len(idx)} images, episode needs {need}")
        pick = rng.choice(idx, size=need, replace=False)
        sup.append(pick[:k_shot])
        qry.append(pick[k_shot:])
    s_idx = np.concatenate(sup)
    q_idx = np.concatenate(qry)
    s_y = np.repeat(np.arange(n_way), k_shot)
    q_y = np.repeat(np.arange(n_way), query_per_way)
    if shuffle_labels:
        s_y = rng.permutation(s_y)
        q_y = rng.integers(0, n_way, size=len(q_y))
    res = resolution or corpus.resolution
    images = _resampled(corpus, res)
    return Episode(n_way, k_shot, images[s_idx], s_y, images[q_idx], q_y, tuple(chosen),
                   s_idx, q_idx, res)
