"""Datasets, IDX I/O and non-IID client partitioning."""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaincinv

from .numkit import ParameterError, UsageError, make_rng

logger = logging.getLogger(__name__)


@dataclass
class Dataset:
    images: np.ndarray  # (n, H, W, C) in [0, 1]
    labels: np.ndarray  # (n,) int64
    n_classes: int

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim == 3:
            self.images = self.images[..., None]
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images vs {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ValueError(f"labels outside [0, {self.n_classes})")

    def __len__(self):
        return len(self.labels)

    @property
    def image_shape(self):
        return self.images.shape[1:]

    def subset(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.images[idx], self.labels[idx], self.n_classes)

    def class_counts(self):
        return np.bincount(self.labels, minlength=self.n_classes)


@dataclass
class ClientShard:
    client_id: int
    labeled_idx: np.ndarray
    unlabeled_idx: np.ndarray
    source: Dataset = field(repr=False)
    class_share: np.ndarray = field(default=None, repr=False)  # this client's Dirichlet weight per class

    @property
    def labeled_images(self):
        return self.source.images[self.labeled_idx]

    @property
    def labels(self):
        return self.source.labels[self.labeled_idx]

    @property
    def unlabeled_images(self):
        return self.source.images[self.unlabeled_idx]

    @property
    def all_idx(self):
        return np.concatenate([self.labeled_idx, self.unlabeled_idx])

    @property
    def all_images(self):
        return self.source.images[self.all_idx]

    @property
    def n_labeled(self):
        return len(self.labeled_idx)

    @property
    def n_unlabeled(self):
        return len(self.unlabeled_idx)

    def __len__(self):
        return self.n_labeled + self.n_unlabeled

    def class_counts(self):
        """Per-class sample counts over the whole shard (simulator-side truth)."""
        return np.bincount(self.source.labels[self.all_idx], minlength=self.source.n_classes)

    def class_distribution(self):
        c = self.class_counts().astype(np.float64)
        return c / c.sum() if c.sum() else c


@dataclass(frozen=True)
class PartitionSpec:
    clients: int = 10
    eta: float = 0.5
    gamma: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.clients < 1:
            raise ParameterError(f"need at least one client, got {self.clients}")
        if not self.eta > 0:
            raise ParameterError(f"eta must be positive, got {self.eta}")
        if not 0 < self.gamma <= 1:
            raise ParameterError(f"gamma must be in (0, 1], got {self.gamma}")


def largest_remainder(weights, total):
    """Integer counts summing to ``total``, proportional to ``weights``."""
    weights = np.asarray(weights, dtype=np.float64)
    raw = weights / weights.sum() * total
    counts = np.floor(raw).astype(np.int64)
    short = int(total - counts.sum())
    if short:
        frac = raw - counts
        order = np.argsort(-frac, kind="stable")
        counts[order[:short]] += 1
    return counts


def n_labeled_for(size, gamma):
    if size == 0:
        return 0
    return max(1, int(np.floor(gamma * size + 1e-9)))


def dirichlet_shares(eta, uniforms):
    """Rows of Dirichlet(eta, ..., eta) draws by inverse-CDF gamma sampling.

    Using explicit uniforms couples draws across ``eta``: the same uniforms
    give more concentrated rows as ``eta`` shrinks.
    """
    g = np.maximum(gammaincinv(eta, uniforms), 1e-300)
    return g / g.sum(axis=-1, keepdims=True)


def partition_dirichlet(ds: Dataset, spec: PartitionSpec, max_redraws=1000):
    """Split ``ds`` over ``spec.clients`` shards with Dirichlet(eta) class skew.

    Each class is dealt out by its own Dirichlet draw (largest-remainder
    rounding). Allocations that leave a client empty are redrawn. Inside each
    shard a random ``gamma`` fraction keeps its labels.
    """
    if len(ds) == 0:
        raise UsageError("cannot partition an empty dataset")
    K = spec.clients
    if K > len(ds):
        raise UsageError(f"{K} clients but only {len(ds)} samples")
    rng = make_rng(spec.seed, 0x5EED)
    by_class = [rng.permutation(np.flatnonzero(ds.labels == c)) for c in range(ds.n_classes)]
    for attempt in range(max_redraws):
        shares = dirichlet_shares(spec.eta, make_rng(spec.seed, 0xD112, attempt).random((ds.n_classes, K)))
        owned = [[] for _ in range(K)]
        for c, idx in enumerate(by_class):
            if len(idx) == 0:
                continue
            counts = largest_remainder(shares[c], len(idx))
            bounds = np.cumsum(counts)[:-1]
            for k, part in enumerate(np.split(idx, bounds)):
                owned[k].append(part)
        sizes = [sum(len(p) for p in parts) for parts in owned]
        if min(sizes) > 0:
            break
        logger.debug("partition attempt %d left a client empty; redrawing", attempt)
    else:
        raise UsageError(f"no non-empty partition found in {max_redraws} draws")
    shards = []
    for k in range(K):
        mine = rng.permutation(np.sort(np.concatenate(owned[k])))
        n_lab = n_labeled_for(len(mine), spec.gamma)
        shards.append(ClientShard(k, np.sort(mine[:n_lab]), np.sort(mine[n_lab:]), ds, shares[:, k].copy()))
    return shards


def partition_manifest(shards):
    return [{
        "client": int(s.client_id),
        "labeled": int(s.n_labeled),
        "unlabeled": int(s.n_unlabeled),
        "class_counts": [int(c) for c in s.class_counts()],
        "labeled_idx": [int(i) for i in s.labeled_idx],
        "unlabeled_idx": [int(i) for i in s.unlabeled_idx],
    } for s in shards]


def shards_from_manifest(manifest, ds: Dataset):
    """Rebuild shards over ``ds`` from a manifest written by :func:`write_manifest`."""
    entries = manifest["clients"] if isinstance(manifest, dict) else manifest
    out = []
    for e in entries:
        lab = np.asarray(e["labeled_idx"], dtype=np.int64)
        unl = np.asarray(e["unlabeled_idx"], dtype=np.int64)
        if len(lab) + len(unl) and max(lab.max(initial=-1), unl.max(initial=-1)) >= len(ds):
            raise UsageError(f"client {e['client']} references samples beyond the dataset")
        out.append(ClientShard(int(e["client"]), lab, unl, ds))
    return out


def write_manifest(path, shards):
    with open(path, "w") as fh:
        json.dump({"clients": partition_manifest(shards)}, fh, indent=2)
        fh.write("\n")


# ---------------------------------------------------------------------------
# IDX files


class IdxFormatError(ValueError):
    pass


class BadMagicError(IdxFormatError):
    pass


class TruncatedFileError(IdxFormatError):
    pass


class CountMismatchError(IdxFormatError):
    pass


IMAGES_MAGIC = 0x00000803
IMAGES4_MAGIC = 0x00000804
LABELS_MAGIC = 0x00000801


def _read_idx(path, expected):
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < 4:
        raise TruncatedFileError(f"{path}: missing header")
    (magic,) = struct.unpack(">I", buf[:4])
    if magic not in expected:
        raise BadMagicError(f"{path}: magic 0x{magic:08x}, expected one of "
                            + ", ".join(f"0x{m:08x}" for m in expected))
    ndim = magic & 0xFF
    if len(buf) < 4 + 4 * ndim:
        raise TruncatedFileError(f"{path}: header too short")
    dims = struct.unpack(f">{ndim}I", buf[4:4 + 4 * ndim])
    n = int(np.prod(dims))
    body = buf[4 + 4 * ndim:]
    if len(body) < n:
        raise TruncatedFileError(f"{path}: expected {n} bytes of data, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8, count=n).reshape(dims)


def load_idx(images_path, labels_path, n_classes=None):
    """Read an IDX image/label pair; pixels scaled to [0, 1]."""
    raw = _read_idx(images_path, (IMAGES_MAGIC, IMAGES4_MAGIC))
    labels = _read_idx(labels_path, (LABELS_MAGIC,)).astype(np.int64)
    if raw.shape[0] != labels.shape[0]:
        raise CountMismatchError(f"{raw.shape[0]} images vs {labels.shape[0]} labels")
    images = raw.astype(np.float64) / 255.0
    if images.ndim == 3:
        images = images[..., None]
    if n_classes is None:
        n_classes = int(labels.max()) + 1 if len(labels) else 1
    return Dataset(images, labels, n_classes)


def write_idx(ds: Dataset, images_path, labels_path):
    """Write ``ds`` as IDX; pixels are quantised to 8 bits."""
    q = np.clip(np.rint(ds.images * 255.0), 0, 255).astype(np.uint8)
    n, H, W, C = q.shape
    if C == 1:
        header = struct.pack(">IIII", IMAGES_MAGIC, n, H, W)
        q = q[..., 0]
    else:
        header = struct.pack(">IIIII", IMAGES4_MAGIC, n, H, W, C)
    with open(images_path, "wb") as fh:
        fh.write(header + q.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", LABELS_MAGIC, n) + ds.labels.astype(np.uint8).tobytes())


# ---------------------------------------------------------------------------
# synthetic shapes


def _shape_mask(kind, H, W, cy, cx, t, r):
    yy, xx = np.mgrid[0:H, 0:W]
    dy, dx = yy - cy, xx - cx
    if kind == 0:  # horizontal bar
        return np.abs(dy) <= t
    if kind == 1:  # vertical bar
        return np.abs(dx) <= t
    if kind == 2:  # plus
        return ((np.abs(dy) <= t) & (np.abs(dx) <= r)) | ((np.abs(dx) <= t) & (np.abs(dy) <= r))
    if kind == 3:  # filled square
        return (np.abs(dy) <= r * 0.6) & (np.abs(dx) <= r * 0.6)
    if kind == 4:  # ring
        d = np.hypot(dy, dx)
        return np.abs(d - r) <= t + 0.5
    if kind == 5:  # diagonal
        return np.abs(dy - dx) <= t + 0.5
    if kind == 6:  # anti-diagonal
        return np.abs(dy + dx) <= t + 0.5
    if kind == 7:  # X
        return (np.abs(dy - dx) <= t) | (np.abs(dy + dx) <= t)
    if kind == 8:  # frame
        m = (np.abs(dy) <= r) & (np.abs(dx) <= r)
        inner = (np.abs(dy) <= r - t - 1) & (np.abs(dx) <= r - t - 1)
        return m & ~inner
    # two dots
    return (np.hypot(dy - r * 0.6, dx - r * 0.6) <= t + 1) | (np.hypot(dy + r * 0.6, dx + r * 0.6) <= t + 1)


def synth_shapes(n, n_classes, height=16, width=16, seed=0, channels=1, noise=0.1):
    """Class-conditional line/blob images with Gaussian pixel noise.

    Pixels are clipped to [0, 1] and quantised to 8-bit levels so an IDX
    round trip is lossless.
    """
    if not 2 <= n_classes <= 10:
        raise ParameterError(f"n_classes must be in 2..10, got {n_classes}")
    if height < 8 or width < 8:
        raise ParameterError("synthetic images need H, W >= 8")
    rng = make_rng(seed, 0x5A)
    labels = rng.integers(0, n_classes, size=n)
    images = np.zeros((n, height, width, channels))
    for i, c in enumerate(labels):
        cy = height / 2 - 0.5 + rng.integers(-1, 2)
        cx = width / 2 - 0.5 + rng.integers(-1, 2)
        t = 1
        r = min(height, width) * rng.uniform(0.3, 0.4)
        mask = _shape_mask(int(c), height, width, cy, cx, t, r)
        level = rng.uniform(0.7, 1.0, size=channels)
        img = mask[..., None] * level
        img = img + noise * rng.standard_normal(img.shape)
        images[i] = img
    images = np.rint(np.clip(images, 0.0, 1.0) * 255.0) / 255.0
    return Dataset(images, labels, n_classes)
