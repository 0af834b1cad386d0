"""Datasets: synthetic flame/no-flame generation, PGM ingestion, ratio-driven
partitioning, and deterministic batch iteration."""

import os
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, ValidationError
from .rng import SplitMix64, mix64
from .tensor import Tensor

IMAGE_SHAPE = (1, 64, 64)

NAMED_PLANS = {
    "equal": (1.0, 1.0, 1.0),
    "setup": (7.0, 2.0, 1.0),
    "imbalanced": (8.0, 1.0, 1.0),
}


@dataclass(frozen=True)
class PartitionPlan:
    ratios: tuple
    seed: int = 0

    def __post_init__(self):
        if not self.ratios:
            raise ValidationError("partition plan needs at least one client")
        if any(r <= 0 for r in self.ratios):
            raise ValidationError(f"ratios must be positive, got {self.ratios}")
        total = float(sum(self.ratios))
        object.__setattr__(self, "ratios", tuple(float(r) / total for r in self.ratios))

    @classmethod
    def named(cls, name, seed=0):
        if name not in NAMED_PLANS:
            raise ValidationError(f"unknown plan {name!r}; know {sorted(NAMED_PLANS)}")
        return cls(NAMED_PLANS[name], seed)


class Dataset:
    """Immutable store of (image [1,64,64] in [0,1], binary label) samples."""

    def __init__(self, images, labels):
        images = np.ascontiguousarray(images, dtype=np.float32)
        labels = np.ascontiguousarray(labels, dtype=np.float32)
        if images.ndim != 4 or images.shape[1:] != IMAGE_SHAPE:
            raise DimensionError(
                f"images must be [n,1,64,64], got {list(images.shape)}"
            )
        if labels.shape != (images.shape[0],):
            raise DimensionError("labels must be one per image")
        if not np.isin(labels, (0.0, 1.0)).all():
            raise ValidationError("labels must be 0 or 1")
        if images.min() < 0.0 or images.max() > 1.0:
            raise ValidationError("pixel values must lie in [0, 1]")
        self.images = images
        self.labels = labels
        self.images.setflags(write=False)
        self.labels.setflags(write=False)

    def __len__(self):
        return self.images.shape[0]

    @property
    def class_counts(self):
        pos = int(self.labels.sum())
        return {0: len(self) - pos, 1: pos}

    def sample(self, i):
        return Tensor(self.images[i]), int(self.labels[i])

    def batch(self, indices):
        """(images [n,1,64,64], labels [n,1]) tensors for the given indices."""
        idx = np.asarray(indices, dtype=np.int64)
        return Tensor(self.images[idx]), Tensor(self.labels[idx].reshape(-1, 1))


def largest_remainder(total, weights, caps=None, min_one=False):
    """Apportion total into integer counts proportional to weights.

    Floor counts first, leftovers to the largest fractional remainders with
    ties to the lower index. Optional per-slot caps and a minimum of one per
    slot (min_one requires total >= len(weights))."""
    weights = [float(w) for w in weights]
    if any(w < 0 for w in weights) or sum(weights) <= 0:
        raise ValidationError(f"weights must be non-negative with positive sum")
    n = len(weights)
    caps = [total] * n if caps is None else list(caps)
    if sum(caps) < total:
        raise ValidationError(f"caps {caps} cannot absorb total {total}")
    if min_one and total < sum(1 for c in caps if c > 0):
        raise ValidationError(f"total {total} too small for one each")
    wsum = sum(weights)
    exact = [total * w / wsum for w in weights]
    counts = [min(int(e), caps[i]) for i, e in enumerate(exact)]
    if min_one:
        counts = [max(c, 1) if caps[i] > 0 else 0 for i, c in enumerate(counts)]
    # distribute the leftover by remainder rank; withdraw overshoot the same way
    def rank(i):
        return (-(exact[i] - counts[i]), i)

    while sum(counts) < total:
        order = sorted((i for i in range(n) if counts[i] < caps[i]), key=rank)
        counts[order[0]] += 1
    while sum(counts) > total:
        floor = 1 if min_one else 0
        order = sorted(
            (i for i in range(n) if counts[i] > floor or (not min_one and counts[i] > 0)),
            key=rank, reverse=True,
        )
        counts[order[0]] -= 1
    return counts


def partition(n_samples, plan):
    """Disjoint, exhaustive, seed-deterministic index sets per client."""
    if isinstance(n_samples, Dataset):
        n_samples = len(n_samples)
    if n_samples < 1:
        raise ValidationError("cannot partition an empty dataset")
    if n_samples < len(plan.ratios):
        raise ValidationError(
            f"{len(plan.ratios)} clients but only {n_samples} samples"
        )
    sizes = largest_remainder(n_samples, plan.ratios)
    indices = np.arange(n_samples, dtype=np.int64)
    SplitMix64(mix64(plan.seed, 0x9A27)).shuffle(indices)
    out = []
    start = 0
    for s in sizes:
        out.append(np.sort(indices[start : start + s]))
        start += s
    return out


def synth_dataset(n, class_balance, seed):
    """Desk-scale synthetic corpus: positives are noise plus 1-3 bright
    Gaussian blobs (peak >= 0.8); negatives are noise only (max <= 0.6)."""
    if n < 2:
        raise ValidationError("need at least 2 samples")
    if not 0.0 < class_balance < 1.0:
        raise ValidationError("class_balance must be in (0, 1)")
    n_pos = int(round(n * class_balance))
    rng = np.random.default_rng(mix64(seed, 0x5D5))
    labels = np.zeros(n, dtype=np.float32)
    labels[:n_pos] = 1.0
    labels = labels[rng.permutation(n)]
    images = rng.uniform(0.02, 0.45, size=(n, 1, 64, 64)).astype(np.float32)
    yy, xx = np.mgrid[0:64, 0:64].astype(np.float32)
    for i in np.flatnonzero(labels == 1.0):
        n_blobs = int(rng.integers(1, 4))
        for b in range(n_blobs):
            cy, cx = rng.integers(8, 56, size=2)
            sig = float(rng.uniform(3.0, 6.0))
            amp = float(rng.uniform(0.85, 1.0))
            blob = amp * np.exp(-(((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sig * sig)))
            images[i, 0] = np.maximum(images[i, 0], blob.astype(np.float32))
    np.clip(images, 0.0, 1.0, out=images)
    return Dataset(images, labels)


def train_test_split(dataset, test_fraction=0.2, seed=0):
    """Stratified, seeded 80/20 split; returns (train_idx, test_idx)."""
    if not 0.0 < test_fraction < 1.0:
        raise ValidationError("test_fraction must be in (0, 1)")
    train, test = [], []
    for label in (0.0, 1.0):
        idx = np.flatnonzero(dataset.labels == label)
        SplitMix64(mix64(seed, 0x7E57, int(label))).shuffle(idx)
        n_test = int(round(len(idx) * test_fraction))
        test.append(idx[:n_test])
        train.append(idx[n_test:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(test))


def batch_iter(indices, batch_quota, epoch_seed):
    """Seeded per-epoch reshuffle, then fixed-size batches; the final short
    batch is emitted, never dropped."""
    if batch_quota < 1:
        raise ValidationError("batch quota must be >= 1")
    order = np.array(indices, dtype=np.int64)
    SplitMix64(epoch_seed).shuffle(order)
    return [order[i : i + batch_quota] for i in range(0, len(order), batch_quota)]


def epoch_order(indices, seed, client_id, epoch):
    """Canonical per-client per-epoch shuffle shared by every experiment arm."""
    order = np.array(indices, dtype=np.int64)
    SplitMix64(mix64(seed, 0xE19C, client_id, epoch)).shuffle(order)
    return order


# --- PGM (P5) ingestion -------------------------------------------------------


def read_pgm(path):
    """Read a binary 8-bit PGM; returns a float32 [H,W] array scaled to [0,1]."""
    with open(path, "rb") as fh:
        data = fh.read()
    pos = 0

    def token():
        nonlocal pos
        while pos < len(data):
            if data[pos : pos + 1].isspace():
                pos += 1
            elif data[pos : pos + 1] == b"#":
                while pos < len(data) and data[pos : pos + 1] != b"\n":
                    pos += 1
            else:
                break
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValidationError(f"{path}: truncated PGM header")
        return data[start:pos]

    if token() != b"P5":
        raise ValidationError(f"{path}: not a binary (P5) PGM file")
    width, height, maxval = int(token()), int(token()), int(token())
    if maxval != 255:
        raise ValidationError(f"{path}: maxval must be 255, got {maxval}")
    pos += 1  # single whitespace byte after maxval
    raster = data[pos : pos + width * height]
    if len(raster) != width * height:
        raise ValidationError(f"{path}: raster truncated")
    img = np.frombuffer(raster, dtype=np.uint8).reshape(height, width)
    return img.astype(np.float32) / 255.0


def write_pgm(path, image):
    """Write a float [H,W] array in [0,1] as a binary 8-bit PGM."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim != 2:
        raise DimensionError(f"PGM image must be 2-d, got shape {list(arr.shape)}")
    pixels = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{arr.shape[1]} {arr.shape[0]}\n255\n".encode())
        fh.write(pixels.tobytes())


def load_image_dir(manifest_path):
    """Load samples listed in a `relative_path,label` manifest of 64x64 P5
    PGMs; aborts on the first bad file, naming it."""
    base = os.path.dirname(os.path.abspath(manifest_path))
    images, labels = [], []
    with open(manifest_path, encoding="utf-8") as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines:
        raise ValidationError(f"{manifest_path}: empty manifest")
    for ln in lines:
        try:
            rel, label_s = ln.rsplit(",", 1)
        except ValueError:
            raise ValidationError(f"{manifest_path}: bad manifest line {ln!r}") from None
        if label_s.strip() not in ("0", "1"):
            raise ValidationError(f"{manifest_path}: unknown label {label_s!r} for {rel}")
        path = os.path.join(base, rel.strip())
        img = read_pgm(path)
        if img.shape != (64, 64):
            raise DimensionError(
                f"{path}: expected 64x64 image, got {img.shape[1]}x{img.shape[0]}"
            )
        images.append(img[None, :, :])
        labels.append(float(label_s))
    return Dataset(np.stack(images), np.array(labels, dtype=np.float32))
