"""Synthetic ID/OOD generators, vector CSV I/O and the labeled/unlabeled split protocol."""

from __future__ import annotations

import contextlib
import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError, DataError, FormatError

_training_depth = 0


@contextlib.contextmanager
def training_guard():
    """While active, reading the hidden truth of an :class:`UnlabeledSet` raises."""
    global _training_depth
    _training_depth += 1
    try:
        yield
    finally:
        _training_depth -= 1


@dataclass
class LabeledSet:
    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if len(self.x) != len(self.y):
            raise DataError(f"{len(self.x)} inputs but {len(self.y)} labels")
        if not np.all(np.isfinite(self.x)):
            raise DataError("non-finite feature values")

    def __len__(self):
        return len(self.y)

    def subset(self, idx):
        return LabeledSet(self.x[idx], self.y[idx])


class UnlabeledSet:
    """Features visible to training; the ID/OOD truth is kept aside for evaluation only."""

    def __init__(self, x, is_ood=None, y=None):
        self.x = np.asarray(x, dtype=np.float64)
        self._is_ood = None if is_ood is None else np.asarray(is_ood, dtype=bool)
        self._y = None if y is None else np.asarray(y, dtype=np.int64)

    def __len__(self):
        return len(self.x)

    @property
    def has_truth(self):
        return self._is_ood is not None

    def reveal_truth(self):
        """Return ``(is_ood, y)``; y is -1 for OOD samples."""
        if _training_depth:
            raise ContractError("hidden truth of the unlabeled set was read during training")
        if self._is_ood is None:
            raise DataError("this unlabeled set carries no ground truth")
        return self._is_ood, self._y


@dataclass
class EvalSet:
    """Labeled ID/OOD samples; ``y`` is the class for ID samples and -1 for OOD."""

    x: np.ndarray
    y: np.ndarray
    is_ood: np.ndarray

    def __len__(self):
        return len(self.is_ood)

    @property
    def id_part(self):
        keep = ~self.is_ood
        return LabeledSet(self.x[keep], self.y[keep])


@dataclass
class DatasetSplit:
    train_labeled: LabeledSet
    unlabeled: UnlabeledSet
    validation: EvalSet
    test: EvalSet
    manifest: dict = field(default_factory=dict)


# -- generators ----------------------------------------------------------------


def default_centers(k, radius=2.0 * math.sqrt(2.0)):
    if k == 4:
        return np.array([[2.0, 2.0], [-2.0, 2.0], [-2.0, -2.0], [2.0, -2.0]])
    angles = math.pi / 4 + 2 * math.pi * np.arange(k) / k
    return radius * np.c_[np.cos(angles), np.sin(angles)]


def gen_gaussian_blobs(k=4, n_per_class=250, centers=None, sigma=0.5, seed=0):
    """Isotropic 2-D Gaussian clusters, one per class, shuffled."""
    if k < 2:
        raise ConfigError(f"need at least 2 classes, got {k}")
    if sigma <= 0:
        raise ConfigError(f"sigma must be positive, got {sigma}")
    centers = default_centers(k) if centers is None else np.asarray(centers, dtype=np.float64)
    if centers.shape != (k, 2):
        raise ConfigError(f"expected {k} centers in R^2, got shape {centers.shape}")
    if len(np.unique(centers, axis=0)) != k:
        raise ConfigError("blob centers must be distinct")
    rng = np.random.default_rng(seed)
    y = np.repeat(np.arange(k), n_per_class)
    x = centers[y] + sigma * rng.standard_normal((len(y), 2))
    order = rng.permutation(len(y))
    return LabeledSet(x[order], y[order])


def gen_ring_ood(n, radius=6.0, width=0.5, seed=0):
    """Points uniform in angle with radius uniform in ``[radius - width, radius + width]``."""
    if width < 0 or radius - width <= 0:
        raise ConfigError(f"ring needs 0 <= width < radius, got radius={radius}, width={width}")
    rng = np.random.default_rng(seed)
    theta = rng.uniform(0.0, 2 * math.pi, n)
    r = radius + rng.uniform(-width, width, n) if width > 0 else np.full(n, float(radius))
    return np.c_[r * np.cos(theta), r * np.sin(theta)]


def shifted_centers(k=4, radius=4.5):
    """The ID layout rotated by half a class spacing and pushed out to ``radius``."""
    base = default_centers(k)
    angles = np.arctan2(base[:, 1], base[:, 0]) + math.pi / k
    return radius * np.c_[np.cos(angles), np.sin(angles)]


def gen_shifted_blobs_ood(n, k=4, radius=4.5, sigma=0.5, seed=0):
    """OOD blobs placed between the ID clusters, outside their support."""
    centers = shifted_centers(k, radius)
    rng = np.random.default_rng(seed)
    which = rng.integers(0, k, n)
    return centers[which] + sigma * rng.standard_normal((n, 2))


# -- CSV -----------------------------------------------------------------------


def write_vector_csv(path, x, y=None):
    """Header ``x0,...,x{d-1},label``; the label cell is empty for unlabeled rows."""
    x = np.asarray(x, dtype=np.float64)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{i}" for i in range(x.shape[1])] + ["label"])
        for i, row in enumerate(x):
            label = "" if y is None or y[i] < 0 else int(y[i])
            w.writerow([repr(float(v)) for v in row] + [label])


def read_vector_csv(path):
    """Return ``(x, y)``; ``y`` holds -1 where the label cell is empty."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise FormatError(f"{path}: empty CSV")
    header = rows[0]
    d = len(header) - 1
    if d < 1 or header[-1] != "label" or header[:-1] != [f"x{i}" for i in range(d)]:
        raise FormatError(f"{path}: header must be x0,...,x{{d-1}},label, got {','.join(header)}")
    x = np.empty((len(rows) - 1, d))
    y = np.full(len(rows) - 1, -1, dtype=np.int64)
    for i, row in enumerate(rows[1:]):
        if len(row) != d + 1:
            raise FormatError(f"{path}: line {i + 2} has {len(row)} fields, expected {d + 1}")
        try:
            x[i] = [float(v) for v in row[:d]]
            if row[d].strip():
                y[i] = int(row[d])
        except ValueError as exc:
            raise FormatError(f"{path}: line {i + 2}: {exc}") from None
    if not np.all(np.isfinite(x)):
        raise FormatError(f"{path}: non-finite feature values")
    return x, y


# -- split protocol --------------------------------------------------------------


def _take(perm, start, count, available, what):
    if start + count > available:
        raise DataError(f"{what}: need {start + count} samples, pool has {available}")
    return perm[start:start + count]


def make_split(train, id_pool, ood_pool, n_ul_id, n_ul_ood, seed, val_fraction=0.10,
               disjoint_test=False, n_test_id=None, n_test_ood=None, test_ood_pool=None):
    """Build labeled train / unlabeled / validation / test parts.

    ``id_pool`` is a labeled ID evaluation pool, ``ood_pool`` an array of
    OOD features. Validation holds ``val_fraction`` of each class's
    evaluation count (at least one sample per class). By default the test
    set is the unlabeled set itself with its truth revealed; with
    ``disjoint_test`` it is a separate draw never seen in training, and
    ``test_ood_pool`` may then supply OOD samples of a different kind.
    """
    if not 0 < val_fraction < 1:
        raise ConfigError(f"val_fraction must be in (0, 1), got {val_fraction}")
    if n_ul_id < 0 or n_ul_ood < 0 or n_ul_id + n_ul_ood == 0:
        raise ConfigError(f"unlabeled counts must be non-negative and not both zero, got {n_ul_id}/{n_ul_ood}")
    if test_ood_pool is not None and not disjoint_test:
        raise ConfigError("a separate test OOD pool requires disjoint_test")
    if disjoint_test:
        n_test_id = n_ul_id if n_test_id is None else n_test_id
        n_test_ood = n_ul_ood if n_test_ood is None else n_test_ood
    else:
        n_test_id, n_test_ood = n_ul_id, n_ul_ood
    if n_test_id < 1 or n_test_ood < 1:
        raise DataError(
            f"test set needs both classes, got {n_test_id} ID / {n_test_ood} OOD"
            + ("" if disjoint_test else " (an X_ul without OOD needs disjoint_test)"))
    n_val_id = max(1, round(val_fraction * n_test_id))
    n_val_ood = max(1, round(val_fraction * n_test_ood))

    ood_pool = np.asarray(ood_pool, dtype=np.float64)
    rng = np.random.default_rng(seed)
    perm_id = rng.permutation(len(id_pool))
    perm_ood = rng.permutation(len(ood_pool))

    val_id = _take(perm_id, 0, n_val_id, len(id_pool), "ID pool")
    ul_id = _take(perm_id, n_val_id, n_ul_id, len(id_pool), "ID pool")
    val_ood = _take(perm_ood, 0, n_val_ood, len(ood_pool), "OOD pool")
    ul_ood = _take(perm_ood, n_val_ood, n_ul_ood, len(ood_pool), "OOD pool")

    def assemble(id_idx, ood_x, shuffle):
        x = np.concatenate([id_pool.x[id_idx], ood_x])
        y = np.concatenate([id_pool.y[id_idx], np.full(len(ood_x), -1)])
        is_ood = np.r_[np.zeros(len(id_idx), bool), np.ones(len(ood_x), bool)]
        if shuffle:
            order = rng.permutation(len(y))
            x, y, is_ood = x[order], y[order], is_ood[order]
        return EvalSet(x, y, is_ood)

    validation = assemble(val_id, ood_pool[val_ood], shuffle=True)
    ul = assemble(ul_id, ood_pool[ul_ood], shuffle=True)
    unlabeled = UnlabeledSet(ul.x, ul.is_ood, ul.y)
    if disjoint_test:
        test_id = _take(perm_id, n_val_id + n_ul_id, n_test_id, len(id_pool), "ID pool")
        if test_ood_pool is None:
            test_ood = ood_pool[_take(perm_ood, n_val_ood + n_ul_ood, n_test_ood, len(ood_pool), "OOD pool")]
        else:
            test_ood_pool = np.asarray(test_ood_pool, dtype=np.float64)
            pick = rng.permutation(len(test_ood_pool))
            test_ood = test_ood_pool[_take(pick, 0, n_test_ood, len(test_ood_pool), "test OOD pool")]
        test = assemble(test_id, test_ood, shuffle=True)
    else:
        test = ul

    manifest = {
        "seed": int(seed),
        "val_fraction": val_fraction,
        "disjoint_test": bool(disjoint_test),
        "counts": {
            "train_labeled": len(train),
            "unlabeled_id": int(n_ul_id),
            "unlabeled_ood": int(n_ul_ood),
            "validation_id": int(n_val_id),
            "validation_ood": int(n_val_ood),
            "test_id": int(n_test_id),
            "test_ood": int(n_test_ood),
        },
    }
    return DatasetSplit(train, unlabeled, validation, test, manifest)
