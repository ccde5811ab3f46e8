"""Synthetic datasets with closed-form label rules, one per modality family.

Each generator is a pure function of its arguments and a seed; the label
of every sample is recoverable from the raw sample by a documented rule,
so an independent oracle can re-derive and cross-check them:

  grid      noise plus a bright vertical band of columns; the band index
            is the class, per-patch band overlap is the dense target
  sequence  background symbols from [1, vocab) with one run of the reserved
            symbol 0; the band holding the run is the class, run positions
            are the dense target
  set       points on a sphere, cube, or plane surface, randomly rotated
            and jittered; the template is the class
  table     numeric fields around one of `classes` separated centers plus
            a uniform categorical field; the center is the class

Splits are a fixed prefix/suffix cut: the first train_count samples
train, the rest test. Iteration is epoch-shuffled without replacement.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .tokenizers import table_stats
from .util import rng_from, round_half_up


@dataclass
class Dataset:
    modality: str
    family: str
    samples: np.ndarray | tuple
    labels: dict[str, np.ndarray]
    train_count: int
    seed: int
    stats: tuple | None = None  # table family: (mean, sd) of train numerics

    @property
    def size(self) -> int:
        if self.family == "table":
            return self.samples[0].shape[0]
        return self.samples.shape[0]

    def split_indices(self, split: str) -> np.ndarray:
        if split == "train":
            return np.arange(self.train_count)
        if split == "test":
            return np.arange(self.train_count, self.size)
        raise DataError(f"unknown split {split!r}, want train or test")

    def take(self, idx: np.ndarray):
        if self.family == "table":
            num, cat = self.samples
            return num[idx], cat[idx]
        return self.samples[idx]


def _train_count(n: int, train_fraction: float) -> int:
    count = round_half_up(train_fraction * n)
    if not 0 < count < n:
        raise DataError(
            f"train fraction {train_fraction} leaves no usable split of {n}")
    return count


def gen_grid_dataset(n: int, height: int, width: int, channels: int,
                     classes: int, seed: int, *, patch: int,
                     noise: float = 0.25, amplitude: float = 2.0,
                     train_fraction: float = 0.875,
                     name: str = "grid") -> Dataset:
    if classes < 2:
        raise DataError(f"grid dataset needs >= 2 classes, got {classes}")
    if min(height, width, channels) < 1 or width % classes:
        raise DataError(
            f"degenerate grid dims {height}x{width}x{channels} / {classes} classes")
    band = width // classes
    if height % patch or width % patch or band % patch:
        raise DataError(
            f"patch {patch} must divide {height}, {width} and the band width {band}")
    rng = rng_from(seed, "data", name)
    labels = rng.integers(0, classes, n).astype(np.int64)
    arr = rng.normal(0.0, noise, (n, height, width, channels))
    col_of_class = np.zeros((classes, width), dtype=np.float64)
    for k in range(classes):
        col_of_class[k, k * band:(k + 1) * band] = 1.0
    arr += amplitude * col_of_class[labels][:, None, :, None]
    rows, cols = height // patch, width // patch
    occ_of_class = np.zeros((classes, rows * cols), dtype=np.float32)
    for k in range(classes):
        cstart, cstop = k * band // patch, (k + 1) * band // patch
        occ = np.zeros((rows, cols), dtype=np.float32)
        occ[:, cstart:cstop] = 1.0
        occ_of_class[k] = occ.reshape(-1)
    return Dataset(name, "grid", arr.astype(np.float32),
                   {"cls": labels, "occupancy": occ_of_class[labels].copy()},
                   _train_count(n, train_fraction), seed)


def gen_sequence_dataset(n: int, length: int, vocab: int, classes: int,
                         seed: int, *, motif: int = 3,
                         train_fraction: float = 0.875,
                         name: str = "sequence") -> Dataset:
    # the class is the band holding the motif run, not the run's symbol, so a
    # position-blind read of the tokens says nothing about the label; symbol 0
    # is reserved for the motif and never appears in the background
    if vocab < 2:
        raise DataError(f"vocab {vocab} leaves no background symbols")
    if length % classes != 0:
        raise DataError(f"length {length} must split into {classes} equal bands")
    band = length // classes
    if not 1 <= motif <= band:
        raise DataError(f"motif length {motif} outside [1, {band}]")
    rng = rng_from(seed, "data", name)
    labels = rng.integers(0, classes, n).astype(np.int64)
    seqs = rng.integers(1, vocab, (n, length)).astype(np.int64)
    offsets = rng.integers(0, band - motif + 1, n)
    indicator = np.zeros((n, length), dtype=np.float32)
    for s in range(n):
        start = labels[s] * band + offsets[s]
        seqs[s, start:start + motif] = 0
        indicator[s, start:start + motif] = 1.0
    return Dataset(name, "sequence", seqs,
                   {"cls": labels, "motif": indicator},
                   _train_count(n, train_fraction), seed)


def _rotation(rng) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(0.0, 1.0, (3, 3)))
    q *= np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def gen_set_dataset(n: int, points: int, classes: int, seed: int, *,
                    jitter: float = 0.02, train_fraction: float = 0.875,
                    name: str = "set") -> Dataset:
    if not 2 <= classes <= 3:
        raise DataError(f"set dataset carries 3 shape templates, got classes={classes}")
    rng = rng_from(seed, "data", name)
    labels = rng.integers(0, classes, n).astype(np.int64)
    clouds = np.empty((n, points, 3), dtype=np.float64)
    for s in range(n):
        k = labels[s]
        if k == 0:  # sphere surface
            v = rng.normal(0.0, 1.0, (points, 3))
            pts = v / (np.linalg.norm(v, axis=1, keepdims=True) + 1e-12)
        elif k == 1:  # cube surface
            pts = rng.uniform(-1.0, 1.0, (points, 3))
            face = rng.integers(0, 6, points)
            pts[np.arange(points), face // 2] = (face % 2) * 2.0 - 1.0
        else:  # plane patch
            pts = rng.uniform(-1.0, 1.0, (points, 3))
            pts[:, 2] = 0.0
        pts = pts @ _rotation(rng).T
        pts += rng.normal(0.0, jitter, (points, 3))
        clouds[s] = pts
    return Dataset(name, "set", clouds.astype(np.float32), {"cls": labels},
                   _train_count(n, train_fraction), seed)


def gen_table_dataset(n: int, num_fields: int, cat_cards: tuple[int, ...],
                      classes: int, seed: int, *, margin: float = 3.0,
                      noise: float = 1.0, train_fraction: float = 0.875,
                      name: str = "table") -> Dataset:
    if classes < 2 or num_fields < 1:
        raise DataError(
            f"table dataset needs >= 2 classes and >= 1 numeric field, "
            f"got {classes}/{num_fields}")
    rng = rng_from(seed, "data", name)
    labels = rng.integers(0, classes, n).astype(np.int64)
    centers = rng.normal(0.0, 1.0, (classes, num_fields))
    centers *= margin / np.linalg.norm(centers, axis=1, keepdims=True)
    num = (centers[labels] + rng.normal(0.0, noise, (n, num_fields))).astype(np.float32)
    cat = np.concatenate(
        [rng.integers(0, card, (n, 1)) for card in cat_cards], axis=1).astype(np.int64) \
        if cat_cards else np.zeros((n, 0), dtype=np.int64)
    train_count = _train_count(n, train_fraction)
    return Dataset(name, "table", (num, cat), {"cls": labels}, train_count, seed,
                   stats=table_stats(num, train_count))


def build_datasets(cfg) -> dict[str, Dataset]:
    """One Dataset per configured modality, derived from (cfg.seed, name)."""
    out = {}
    for name in sorted(cfg.modalities):
        spec = cfg.modalities[name]
        fam = spec["family"]
        frac = spec.get("train_fraction", 0.875)
        if fam == "grid":
            out[name] = gen_grid_dataset(
                spec["samples"], spec["height"], spec["width"], spec["channels"],
                spec["classes"], cfg.seed, patch=spec["patch"],
                noise=spec.get("noise", 0.25), amplitude=spec.get("amplitude", 2.0),
                train_fraction=frac, name=name)
        elif fam == "sequence":
            out[name] = gen_sequence_dataset(
                spec["samples"], spec["length"], spec["vocab"], spec["classes"],
                cfg.seed, motif=spec.get("motif", 3), train_fraction=frac, name=name)
        elif fam == "set":
            out[name] = gen_set_dataset(
                spec["samples"], spec["points"], spec["classes"], cfg.seed,
                jitter=spec.get("jitter", 0.02), train_fraction=frac, name=name)
        elif fam == "table":
            out[name] = gen_table_dataset(
                spec["samples"], spec["num_fields"], tuple(spec.get("cat_cards", ())),
                spec["classes"], cfg.seed, margin=spec.get("margin", 3.0),
                noise=spec.get("noise", 1.0), train_fraction=frac, name=name)
        else:
            raise DataError(f"modalities.{name}.family: unknown family {fam!r}")
    return out


def iterate(dataset: Dataset, split: str, batch_size: int, rng):
    """Epoch-shuffled batches of indices, each sample exactly once."""
    idx = dataset.split_indices(split)
    if batch_size < 1 or batch_size > idx.size:
        raise DataError(
            f"batch size {batch_size} unusable for {split} split of {idx.size}")
    perm = idx[rng.permutation(idx.size)]
    for start in range(0, perm.size, batch_size):
        yield perm[start:start + batch_size]


class SampleCursor:
    """Without-replacement draws that reshuffle on exhaustion.

    The permutation for epoch e comes from (seed, "cursor", key, e), so a
    cursor restored from its (epoch, pos) pair replays identical draws.
    """

    def __init__(self, key: str, size: int, seed: int, epoch: int = 0,
                 pos: int = 0):
        if size < 1:
            raise DataError(f"cursor {key!r} over an empty index range")
        self.key = key
        self.size = size
        self.seed = seed
        self.epoch = epoch
        self.pos = pos
        self._perm = self._permutation(epoch)

    def _permutation(self, epoch: int) -> np.ndarray:
        return rng_from(self.seed, "cursor", self.key, epoch).permutation(self.size)

    def draw(self, count: int) -> np.ndarray:
        out = []
        remaining = count
        while remaining > 0:
            take = min(remaining, self.size - self.pos)
            out.append(self._perm[self.pos:self.pos + take])
            self.pos += take
            remaining -= take
            if self.pos == self.size:
                self.epoch += 1
                self.pos = 0
                self._perm = self._permutation(self.epoch)
        return np.concatenate(out)

    def state(self) -> np.ndarray:
        return np.asarray([float(self.epoch), float(self.pos)], dtype=np.float32)

    def load_state(self, arr: np.ndarray) -> None:
        vals = np.asarray(arr).reshape(-1)
        self.epoch, self.pos = int(round(float(vals[0]))), int(round(float(vals[1])))
        self._perm = self._permutation(self.epoch)
