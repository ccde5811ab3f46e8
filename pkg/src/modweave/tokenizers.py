"""Modality tokenizers: raw samples to aligned token sequences.

Every family maps a sample to n tokens of the shared width d_tok plus
additive position encodings of the same width, so downstream modules
never branch on modality. Reconstruction targets (the pre-projection
patch vectors, or symbol ids) ride along for masked pretraining.

Families:
  grid      H x W x C arrays, non-overlapping p x p patches, 2-d sin/cos positions
  sequence  symbol ids through an embedding table, or real series through
            length-w window projections, 1-d sin/cos positions
  set       unordered points, farthest-point-sampled centroids with k-NN
            groups recentred on the centroid, positions projected from
            centroid coordinates
  table     one token per field, numerics z-scored with train-split stats,
            categoricals embedded, 1-d sin/cos positions
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import ConfigError, DataError, ShapeError
from .tensor import Tensor, add, concat, embedding, matmul, mul, tensor

TOKEN_MAGIC = b"OWTK"
TOKEN_VERSION = 1


@dataclass
class TokenSequence:
    """One sample's tokens: (n, d_tok) with matching positions."""
    tokens: Tensor
    positions: Tensor
    modality: str
    targets: np.ndarray | None = None  # (n, w) float targets or (n,) symbol ids

    @property
    def count(self) -> int:
        return self.tokens.shape[0]


@dataclass
class TokenBatch:
    """A stacked batch of same-modality samples: (B, n, d_tok)."""
    tokens: Tensor
    positions: Tensor
    modality: str
    targets: np.ndarray | None = None  # (B, n, w) float or (B, n) symbol ids

    @property
    def count(self) -> int:
        return self.tokens.shape[1]


def sincos_1d(n: int, d: int) -> np.ndarray:
    """Interleaved sin/cos position table, rows are positions."""
    if d % 2 != 0:
        raise ConfigError(f"sin/cos positions need an even width, got {d}")
    pos = np.arange(n, dtype=np.float64)[:, None]
    idx = np.arange(d // 2, dtype=np.float64)[None, :]
    ang = pos / np.power(10000.0, 2.0 * idx / d)
    out = np.empty((n, d), dtype=np.float64)
    out[:, 0::2] = np.sin(ang)
    out[:, 1::2] = np.cos(ang)
    return out


def sincos_2d(rows: int, cols: int, d: int) -> np.ndarray:
    """Row-major grid positions; first half encodes row, second half column."""
    if d % 4 != 0:
        raise ConfigError(f"2-d sin/cos positions need width divisible by 4, got {d}")
    half = d // 2
    r = sincos_1d(rows, half)
    c = sincos_1d(cols, half)
    out = np.empty((rows * cols, d), dtype=np.float64)
    out[:, :half] = np.repeat(r, cols, axis=0)
    out[:, half:] = np.tile(c, (rows, 1))
    return out


def _init_weight(rng, shape, std=None):
    # fan-in scaling so projected tokens sit at the same scale as positions
    if std is None:
        std = shape[0] ** -0.5
    return tensor(rng.normal(0.0, std, shape), requires_grad=True)


class GridTokenizer:
    family = "grid"

    def __init__(self, name: str, d_tok: int, height: int, width: int,
                 channels: int, patch: int, rng):
        if height % patch or width % patch:
            raise ConfigError(
                f"modalities.{name}.patch: {patch} does not divide {height}x{width}")
        if d_tok % 4:
            raise ConfigError(f"dims.d_tok: grid positions need d_tok % 4 == 0, got {d_tok}")
        self.name = name
        self.d_tok = d_tok
        self.height, self.width, self.channels, self.patch = height, width, channels, patch
        self.rows, self.cols = height // patch, width // patch
        self.patch_width = patch * patch * channels
        self.proj_w = _init_weight(rng, (self.patch_width, d_tok))
        self.proj_b = tensor(np.zeros(d_tok), requires_grad=True)
        self._pos = sincos_2d(self.rows, self.cols, d_tok)

    @property
    def token_count(self) -> int:
        return self.rows * self.cols

    @property
    def target_width(self) -> int:
        return self.patch_width

    def named_params(self, prefix: str):
        return [(f"{prefix}.proj.w", self.proj_w), (f"{prefix}.proj.b", self.proj_b)]

    def tokenize_batch(self, samples: np.ndarray) -> TokenBatch:
        arr = np.asarray(samples, dtype=np.float64)
        if arr.ndim != 4 or arr.shape[1:] != (self.height, self.width, self.channels):
            raise ShapeError(
                f"grid batch shape {arr.shape} does not match "
                f"(B, {self.height}, {self.width}, {self.channels})")
        b = arr.shape[0]
        mu = arr.mean(axis=(1, 2, 3), keepdims=True)
        sd = arr.std(axis=(1, 2, 3), keepdims=True)
        arr = (arr - mu) / (sd + 1e-6)
        p = self.patch
        patches = arr.reshape(b, self.rows, p, self.cols, p, self.channels)
        patches = patches.transpose(0, 1, 3, 2, 4, 5).reshape(b, self.token_count, -1)
        toks = add(matmul(tensor(patches), self.proj_w), self.proj_b)
        pos = tensor(np.broadcast_to(self._pos, (b, self.token_count, self.d_tok)))
        targets = patches.astype(np.float32)
        return TokenBatch(toks, pos, self.name, targets)

    def tokenize(self, sample: np.ndarray) -> TokenSequence:
        return _squeeze(self.tokenize_batch(np.asarray(sample)[None]))


class SequenceTokenizer:
    family = "sequence"

    def __init__(self, name: str, d_tok: int, length: int, rng,
                 kind: str = "symbol", vocab: int = 0, window: int = 0):
        if kind not in ("symbol", "real"):
            raise ConfigError(f"modalities.{name}.kind: unknown sequence kind {kind!r}")
        self.name = name
        self.d_tok = d_tok
        self.length = length
        self.kind = kind
        if kind == "symbol":
            if vocab < 2:
                raise ConfigError(f"modalities.{name}.vocab: need at least 2 symbols")
            self.vocab = vocab
            self.table = _init_weight(rng, (vocab, d_tok), std=1.0)
            self._n = length
        else:
            if window < 1 or length % window:
                raise ConfigError(
                    f"modalities.{name}.window: {window} does not divide length {length}")
            self.window = window
            self.proj_w = _init_weight(rng, (window, d_tok))
            self.proj_b = tensor(np.zeros(d_tok), requires_grad=True)
            self._n = length // window
        self._pos = sincos_1d(self._n, d_tok)

    @property
    def token_count(self) -> int:
        return self._n

    @property
    def target_width(self) -> int:
        return self.vocab if self.kind == "symbol" else self.window

    def named_params(self, prefix: str):
        if self.kind == "symbol":
            return [(f"{prefix}.table", self.table)]
        return [(f"{prefix}.proj.w", self.proj_w), (f"{prefix}.proj.b", self.proj_b)]

    def tokenize_batch(self, samples: np.ndarray) -> TokenBatch:
        b = np.asarray(samples).shape[0]
        if self.kind == "symbol":
            ids = np.asarray(samples)
            if ids.shape != (b, self.length):
                raise ShapeError(f"symbol batch shape {ids.shape} != (B, {self.length})")
            toks = embedding(self.table, ids.astype(np.int64))
            targets = ids.astype(np.int64)
        else:
            arr = np.asarray(samples, dtype=np.float64)
            if arr.shape != (b, self.length):
                raise ShapeError(f"series batch shape {arr.shape} != (B, {self.length})")
            windows = arr.reshape(b, self._n, self.window)
            toks = add(matmul(tensor(windows), self.proj_w), self.proj_b)
            targets = windows.astype(np.float32)
        pos = tensor(np.broadcast_to(self._pos, (b, self._n, self.d_tok)))
        return TokenBatch(toks, pos, self.name, targets)

    def tokenize(self, sample) -> TokenSequence:
        return _squeeze(self.tokenize_batch(np.asarray(sample)[None]))


class SetTokenizer:
    family = "set"

    def __init__(self, name: str, d_tok: int, points: int, groups: int,
                 group_size: int, rng, extra_features: int = 0):
        if points < groups * group_size:
            raise ConfigError(
                f"modalities.{name}.points: {points} < groups*group_size "
                f"({groups}*{group_size})")
        self.name = name
        self.d_tok = d_tok
        self.points = points
        self.groups = groups
        self.group_size = group_size
        self.extra = extra_features
        self.group_width = group_size * (3 + extra_features)
        self.proj_w = _init_weight(rng, (self.group_width, d_tok))
        self.proj_b = tensor(np.zeros(d_tok), requires_grad=True)
        self.pos_w = _init_weight(rng, (3, d_tok))
        self.pos_b = tensor(np.zeros(d_tok), requires_grad=True)

    @property
    def token_count(self) -> int:
        return self.groups

    @property
    def target_width(self) -> int:
        return self.group_width

    def named_params(self, prefix: str):
        return [(f"{prefix}.proj.w", self.proj_w), (f"{prefix}.proj.b", self.proj_b),
                (f"{prefix}.pos.w", self.pos_w), (f"{prefix}.pos.b", self.pos_b)]

    def tokenize_batch(self, samples: np.ndarray) -> TokenBatch:
        pts = np.asarray(samples, dtype=np.float32)
        if pts.ndim != 3 or pts.shape[1] != self.points or pts.shape[2] != 3 + self.extra:
            raise ShapeError(
                f"set batch shape {pts.shape} != (B, {self.points}, {3 + self.extra})")
        b = pts.shape[0]
        flat = np.empty((b, self.groups, self.group_width), dtype=np.float32)
        cents = np.empty((b, self.groups, 3), dtype=np.float32)
        for s in range(b):
            coords = np.ascontiguousarray(pts[s, :, :3])
            cidx = kernels.fps(coords, self.groups)
            cents[s] = coords[cidx]
            # k nearest points per centroid, stable ties, coordinates recentred
            d2 = ((coords[None, :, :] - cents[s][:, None, :]) ** 2).sum(axis=2)
            near = np.argsort(d2, axis=1, kind="stable")[:, :self.group_size]
            grp = pts[s][near]  # (g, k, 3+F)
            grp = grp.copy()
            grp[:, :, :3] -= cents[s][:, None, :]
            flat[s] = grp.reshape(self.groups, self.group_width)
        toks = add(matmul(tensor(flat), self.proj_w), self.proj_b)
        pos = add(matmul(tensor(cents), self.pos_w), self.pos_b)
        return TokenBatch(toks, pos, self.name, flat.copy())

    def tokenize(self, sample: np.ndarray) -> TokenSequence:
        return _squeeze(self.tokenize_batch(np.asarray(sample)[None]))


class TableTokenizer:
    family = "table"

    def __init__(self, name: str, d_tok: int, num_fields: int, rng,
                 cat_cards: tuple[int, ...] = ()):
        if num_fields < 1:
            raise ConfigError(f"modalities.{name}.num_fields: need at least 1")
        self.name = name
        self.d_tok = d_tok
        self.num_fields = num_fields
        self.cat_cards = tuple(cat_cards)
        self.fields = num_fields + len(self.cat_cards)
        self.num_w = _init_weight(rng, (num_fields, d_tok), std=1.0)
        self.num_b = tensor(np.zeros((num_fields, d_tok)), requires_grad=True)
        self.cat_tables = [_init_weight(rng, (card, d_tok), std=1.0)
                           for card in self.cat_cards]
        self._pos = sincos_1d(self.fields, d_tok)

    @property
    def token_count(self) -> int:
        return self.fields

    @property
    def target_width(self) -> int:
        return 1

    def named_params(self, prefix: str):
        out = [(f"{prefix}.num.w", self.num_w), (f"{prefix}.num.b", self.num_b)]
        for i, t in enumerate(self.cat_tables):
            out.append((f"{prefix}.cat{i}.table", t))
        return out

    def tokenize_batch(self, samples, stats) -> TokenBatch:
        """samples: (num (B, F_num) floats, cat (B, F_cat) ints); stats: (mu, sd)."""
        num, cat = samples
        num = np.asarray(num, dtype=np.float64)
        b = num.shape[0]
        if num.shape != (b, self.num_fields):
            raise ShapeError(f"table numerics {num.shape} != (B, {self.num_fields})")
        mu, sd = stats
        z = (num - np.asarray(mu)) / (np.asarray(sd) + 1e-6)
        toks = add(mul(tensor(z[:, :, None]), self.num_w), self.num_b)
        targets = [z[:, :, None].astype(np.float32)]
        if self.cat_cards:
            cat = np.asarray(cat, dtype=np.int64)
            if cat.shape != (b, len(self.cat_cards)):
                raise ShapeError(f"table categoricals {cat.shape} != (B, {len(self.cat_cards)})")
            parts = [toks]
            for i, table in enumerate(self.cat_tables):
                parts.append(embedding(table, cat[:, i][:, None]))
                targets.append((cat[:, i][:, None, None] / float(self.cat_cards[i]))
                               .astype(np.float32))
            toks = concat(parts, axis=1)
        pos = tensor(np.broadcast_to(self._pos, (b, self.fields, self.d_tok)))
        return TokenBatch(toks, pos, self.name, np.concatenate(targets, axis=1))

    def tokenize(self, sample, stats) -> TokenSequence:
        num, cat = sample
        batch = (np.asarray(num)[None], np.asarray(cat)[None])
        return _squeeze(self.tokenize_batch(batch, stats))


def table_stats(num: np.ndarray, train_count: int):
    """Train-split mean and standard deviation per numeric field."""
    train = np.asarray(num[:train_count], dtype=np.float64)
    return train.mean(axis=0), train.std(axis=0)


def _squeeze(batch: TokenBatch) -> TokenSequence:
    from .tensor import narrow, reshape
    n = batch.tokens.shape[1]
    d = batch.tokens.shape[2]
    toks = reshape(narrow(batch.tokens, 0, 0, 1), (n, d))
    pos = reshape(narrow(batch.positions, 0, 0, 1), (n, d))
    targets = None if batch.targets is None else batch.targets[0]
    return TokenSequence(toks, pos, batch.modality, targets)


# -- token dumps -------------------------------------------------------------

def dump_tokens(seq: TokenSequence | TokenBatch, path) -> None:
    """Little-endian token dump for golden-file comparisons."""
    arr = seq.tokens.data
    if arr.ndim == 3:
        arr = arr.reshape(-1, arr.shape[-1])
    n, d = arr.shape
    with open(path, "wb") as fh:
        fh.write(TOKEN_MAGIC)
        fh.write(struct.pack("<III", TOKEN_VERSION, n, d))
        fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_tokens(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != TOKEN_MAGIC:
            raise DataError(f"bad token dump magic {magic!r}")
        version, n, d = struct.unpack("<III", fh.read(12))
        if version != TOKEN_VERSION:
            raise DataError(f"unsupported token dump version {version}")
        data = np.frombuffer(fh.read(n * d * 4), dtype="<f4")
        if data.size != n * d:
            raise DataError("truncated token dump")
        return data.reshape(n, d).copy()
