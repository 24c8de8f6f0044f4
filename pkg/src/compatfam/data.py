"""Item sets, the modular class-shift relation, and pair sampling."""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field

import numpy as np

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801
NOISE_SIGMA = 0.05


class DataError(ValueError):
    """Malformed or inconsistent dataset input."""


@dataclass
class ItemSet:
    images: np.ndarray  # (n, H, W) in [0, 1]
    labels: np.ndarray  # (n,) int
    ids: np.ndarray  # (n,) int, unique

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.ids = np.asarray(self.ids, dtype=np.int64)
        n = len(self.images)
        if len(self.labels) != n or len(self.ids) != n:
            raise DataError("images, labels and ids must have equal length")
        if len(np.unique(self.ids)) != n:
            raise DataError("item ids must be unique")

    def __len__(self):
        return len(self.ids)

    @property
    def image_shape(self):
        return self.images.shape[1:]

    def flat(self):
        return self.images.reshape(len(self), -1)

    def subset(self, mask_or_index):
        return ItemSet(self.images[mask_or_index], self.labels[mask_or_index],
                       self.ids[mask_or_index])

    def lookup(self, ids):
        """Row indices of the given item ids."""
        order = np.argsort(self.ids)
        pos = np.searchsorted(self.ids[order], ids)
        pos = np.clip(pos, 0, len(order) - 1)
        rows = order[pos]
        if not np.array_equal(self.ids[rows], np.asarray(ids)):
            missing = sorted(set(np.asarray(ids).tolist()) - set(self.ids.tolist()))
            raise DataError(f"unknown item ids: {missing[:5]}")
        return rows


@dataclass(frozen=True)
class RelationSpec:
    num_classes: int = 10
    positive_shifts: frozenset = field(default_factory=lambda: frozenset({1, 2}))

    def __post_init__(self):
        object.__setattr__(self, "positive_shifts", frozenset(int(s) for s in self.positive_shifts))
        if not self.positive_shifts:
            raise ValueError("positive_shifts must be nonempty")
        for s in self.positive_shifts:
            if not 1 <= s <= self.num_classes - 1:
                raise ValueError(f"shift {s} outside 1..{self.num_classes - 1}")

    def compatible(self, cx, cy):
        """True when (x, y) is a positive pair, i.e. C_y = C_x + s (mod C)."""
        diff = (np.asarray(cy) - np.asarray(cx)) % self.num_classes
        return np.isin(diff, sorted(self.positive_shifts))

    def positive_classes(self, c):
        return sorted((c + s) % self.num_classes for s in self.positive_shifts)

    def negative_classes(self, c):
        pos = set(self.positive_classes(c))
        return [k for k in range(self.num_classes) if k not in pos]

    def truth_table(self):
        c = np.arange(self.num_classes)
        return self.compatible(c[:, None], c[None, :])


@dataclass
class PairSet:
    query_ids: np.ndarray
    candidate_ids: np.ndarray
    labels: np.ndarray  # +1 / -1
    split: str = "train"

    def __post_init__(self):
        self.query_ids = np.asarray(self.query_ids, dtype=np.int64)
        self.candidate_ids = np.asarray(self.candidate_ids, dtype=np.int64)
        self.labels = np.asarray(self.labels, dtype=np.int64)

    def __len__(self):
        return len(self.labels)

    @property
    def triples(self):
        return list(zip(self.query_ids.tolist(), self.candidate_ids.tolist(), self.labels.tolist()))

    def item_ids(self):
        return set(self.query_ids.tolist()) | set(self.candidate_ids.tolist())


# -- procedural glyphs -------------------------------------------------------

def _glyph(c, size):
    img = np.zeros((size, size))
    mid = size // 2
    t = max(1, size // 8)
    lo, hi = size // 4, size - size // 4
    eye = np.eye(size, dtype=bool)
    if c == 0:
        img[mid - t:mid + t, 1:-1] = 1
    elif c == 1:
        img[1:-1, mid - t:mid + t] = 1
    elif c == 2:
        img[eye] = 1
    elif c == 3:
        img[eye[::-1]] = 1
    elif c == 4:
        img[lo:hi, lo:hi] = 1
        img[lo + t:hi - t, lo + t:hi - t] = 0
    elif c == 5:
        img[lo:hi, lo:hi] = 1
    elif c == 6:
        img[1:1 + 2 * t, 1:-1] = 1
        img[1:-1, 1:1 + 2 * t] = 1
    elif c == 7:
        img[mid - t:mid + t, lo:hi] = 1
        img[lo:hi, mid - t:mid + t] = 1
    elif c == 8:
        img[eye | eye[::-1]] = 1
    elif c == 9:
        img[1:1 + t, 1:-1] = 1
        img[-1 - t:-1, 1:-1] = 1
    else:
        raise ValueError(f"no glyph for class {c}")
    return img


def gen_procedural_items(per_class, spec=None, image_size=16, seed=0):
    """Render ``per_class`` noisy copies of one fixed glyph per class."""
    spec = spec or RelationSpec()
    if image_size < 8:
        raise DataError("image_size must be at least 8")
    if per_class < 1:
        raise ValueError("per_class must be >= 1")
    if spec.num_classes > 10:
        raise ValueError("at most 10 procedural classes")
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(spec.num_classes), per_class)
    glyphs = np.stack([_glyph(c, image_size) for c in range(spec.num_classes)])
    images = glyphs[labels] + NOISE_SIGMA * rng.standard_normal((len(labels), image_size, image_size))
    images = np.clip(images, 0.0, 1.0)
    return ItemSet(images, labels, np.arange(len(labels)))


# -- IDX files ----------------------------------------------------------------

def _read(path):
    with open(path, "rb") as fh:
        return fh.read()


def load_idx(images_path, labels_path, first_id=0):
    img_bytes, lab_bytes = _read(images_path), _read(labels_path)
    if len(img_bytes) < 16 or len(lab_bytes) < 8:
        raise DataError("truncated file")
    magic, n, rows, cols = struct.unpack(">IIII", img_bytes[:16])
    if magic != IMAGES_MAGIC:
        raise DataError(f"bad magic 0x{magic:08x} in {images_path}")
    lmagic, ln = struct.unpack(">II", lab_bytes[:8])
    if lmagic != LABELS_MAGIC:
        raise DataError(f"bad magic 0x{lmagic:08x} in {labels_path}")
    if n != ln:
        raise DataError(f"count mismatch: {n} images vs {ln} labels")
    if len(img_bytes) < 16 + n * rows * cols or len(lab_bytes) < 8 + n:
        raise DataError("truncated file")
    pixels = np.frombuffer(img_bytes, dtype=np.uint8, count=n * rows * cols, offset=16)
    labels = np.frombuffer(lab_bytes, dtype=np.uint8, count=n, offset=8)
    images = pixels.reshape(n, rows, cols).astype(np.float64) / 255.0
    return ItemSet(images, labels.astype(np.int64), np.arange(first_id, first_id + n))


def to_uint8(images):
    return np.round(np.clip(images, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_idx(items, images_path, labels_path):
    n, rows, cols = items.images.shape
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IMAGES_MAGIC, n, rows, cols))
        fh.write(to_uint8(items.images).tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", LABELS_MAGIC, n))
        fh.write(items.labels.astype(np.uint8).tobytes())


# -- splits and pairs -----------------------------------------------------------

def _allocate(n, ratios):
    raw = np.asarray(ratios) * n
    counts = np.floor(raw).astype(int)
    rest = n - counts.sum()
    for i in np.argsort(-(raw - counts), kind="stable")[:rest]:
        counts[i] += 1
    # every split gets at least one item of the class
    for i in range(len(counts)):
        while counts[i] == 0:
            counts[np.argmax(counts)] -= 1
            counts[i] += 1
    return counts


def split_items(items, ratios=(0.6, 0.2, 0.2), seed=0):
    """Stratified, disjoint train/val/test partition of an ItemSet."""
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or min(ratios) <= 0 or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError("ratios must be three positive numbers summing to 1")
    rng = np.random.default_rng(seed)
    parts = [[], [], []]
    for c in np.unique(items.labels):
        rows = np.flatnonzero(items.labels == c)
        if len(rows) < 3:
            raise DataError(f"class {c} has fewer than 3 items")
        rows = rng.permutation(rows)
        bounds = np.cumsum(_allocate(len(rows), ratios))
        for k, chunk in enumerate(np.split(rows, bounds[:-1])):
            parts[k].append(chunk)
    return tuple(items.subset(np.sort(np.concatenate(p))) for p in parts)


def build_pairs(items, spec, pairs_per_item=1, seed=0, positive_ratio=0.5, split="train"):
    """One coin flip per (query, repeat): draw a compatible or an incompatible candidate.

    Candidates come from the same item pool, never the query itself.
    Duplicate pairs are kept.
    """
    if len(items) == 0:
        raise DataError("empty item set")
    rng = np.random.default_rng(seed)
    by_class = {c: np.flatnonzero(items.labels == c) for c in range(spec.num_classes)}
    pools = {}
    for c in np.unique(items.labels):
        pos = np.concatenate([by_class[k] for k in spec.positive_classes(int(c))])
        neg = np.concatenate([by_class[k] for k in spec.negative_classes(int(c))])
        if len(pos) == 0:
            raise DataError(f"class {c} has no positive candidates")
        if len(neg) == 0:
            raise DataError(f"class {c} has no negative candidates")
        pools[int(c)] = (pos, neg)
    queries, cands = [], []
    for row in range(len(items)):
        pos, neg = pools[int(items.labels[row])]
        for _ in range(pairs_per_item):
            pool = pos if rng.random() < positive_ratio else neg
            pick = pool[rng.integers(len(pool))]
            while pick == row and len(pool) > 1:
                pick = pool[rng.integers(len(pool))]
            queries.append(row)
            cands.append(pick)
    queries, cands = np.asarray(queries), np.asarray(cands)
    labels = np.where(spec.compatible(items.labels[queries], items.labels[cands]), 1, -1)
    return PairSet(items.ids[queries], items.ids[cands], labels, split)


def read_pairs_csv(path, split="train"):
    try:
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames != ["query_id", "candidate_id", "label"]:
                raise DataError(f"{path}: unexpected header {reader.fieldnames}")
            rows = [(int(r["query_id"]), int(r["candidate_id"]), int(r["label"])) for r in reader]
    except (ValueError, TypeError, KeyError) as exc:
        if isinstance(exc, DataError):
            raise
        raise DataError(f"{path}: {exc}") from exc
    arr = np.asarray(rows, dtype=np.int64).reshape(-1, 3)
    if not np.isin(arr[:, 2], (-1, 1)).all():
        raise DataError(f"{path}: labels must be +1 or -1")
    return PairSet(arr[:, 0], arr[:, 1], arr[:, 2], split)


def write_pairs_csv(pairs, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["query_id", "candidate_id", "label"])
        w.writerows(pairs.triples)


# -- 2-D Gaussian mixture toy ---------------------------------------------------

def gaussian_mixture_items(per_class, num_classes=4, radius=3.0, sigma=0.3, seed=0):
    """Points on a ring of ``num_classes`` isotropic Gaussian clusters.

    Returns (points (n, 2), labels, ids). The clusters play the part of item
    classes for the generator toy problem.
    """
    rng = np.random.default_rng(seed)
    angles = 2 * np.pi * np.arange(num_classes) / num_classes
    centers = radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    labels = np.repeat(np.arange(num_classes), per_class)
    points = centers[labels] + sigma * rng.standard_normal((len(labels), 2))
    return points, labels, np.arange(len(labels))
