"""Tokenizer tests against independently coded oracles.

Each family's token math is recomputed here with plain loops (no shared
helpers with the implementation) and compared elementwise.
"""

import math

import numpy as np
import pytest

from modweave.errors import ConfigError, DataError, ShapeError
from modweave.tokenizers import (GridTokenizer, SequenceTokenizer, SetTokenizer,
                                 TableTokenizer, dump_tokens, load_tokens,
                                 sincos_1d, sincos_2d, table_stats)


# -- position encodings ------------------------------------------------------

def _sincos_oracle(n, d):
    out = np.zeros((n, d))
    for p in range(n):
        for i in range(d // 2):
            ang = p / (10000.0 ** (2.0 * i / d))
            out[p, 2 * i] = math.sin(ang)
            out[p, 2 * i + 1] = math.cos(ang)
    return out


def test_sincos_1d_matches_formula():
    got = sincos_1d(7, 10)
    np.testing.assert_allclose(got, _sincos_oracle(7, 10), atol=1e-12)


def test_sincos_1d_position_zero_alternates():
    row = sincos_1d(4, 6)[0]
    np.testing.assert_allclose(row, [0, 1, 0, 1, 0, 1], atol=0)


def test_sincos_1d_odd_width_rejected():
    with pytest.raises(ConfigError):
        sincos_1d(4, 5)


def test_sincos_2d_row_col_split():
    rows, cols, d = 3, 4, 8
    got = sincos_2d(rows, cols, d)
    r = _sincos_oracle(rows, d // 2)
    c = _sincos_oracle(cols, d // 2)
    assert got.shape == (rows * cols, d)
    for i in range(rows):
        for j in range(cols):
            np.testing.assert_allclose(got[i * cols + j, :d // 2], r[i], atol=1e-12)
            np.testing.assert_allclose(got[i * cols + j, d // 2:], c[j], atol=1e-12)


def test_sincos_2d_width_must_divide_by_four():
    with pytest.raises(ConfigError):
        sincos_2d(2, 2, 6)


# -- grid ---------------------------------------------------------------------

def _grid_patch_oracle(arr, patch):
    """Per-sample normalize, then row-major p x p patch vectors."""
    arr = np.asarray(arr, dtype=np.float64)
    b, h, w, c = arr.shape
    rows, cols = h // patch, w // patch
    out = np.zeros((b, rows * cols, patch * patch * c))
    for s in range(b):
        x = arr[s]
        x = (x - x.mean()) / (x.std() + 1e-6)
        k = 0
        for pr in range(rows):
            for pc in range(cols):
                block = x[pr * patch:(pr + 1) * patch, pc * patch:(pc + 1) * patch, :]
                out[s, k] = block.reshape(-1)
                k += 1
    return out


def test_grid_token_count_and_widths():
    tok = GridTokenizer("grid", 16, 32, 24, 2, 8, np.random.default_rng(0))
    assert tok.token_count == 4 * 3
    assert tok.target_width == 8 * 8 * 2


def test_grid_tokens_match_patch_oracle():
    rng = np.random.default_rng(1)
    tok = GridTokenizer("grid", 8, 12, 12, 1, 4, np.random.default_rng(2))
    arr = rng.normal(0, 3, (5, 12, 12, 1))
    batch = tok.tokenize_batch(arr)
    patches = _grid_patch_oracle(arr, 4)
    want = patches @ tok.proj_w.data + tok.proj_b.data
    np.testing.assert_allclose(batch.tokens.data, want, atol=1e-5)
    np.testing.assert_allclose(batch.targets, patches, atol=1e-5)


def test_grid_positions_are_shared_2d_table():
    tok = GridTokenizer("grid", 8, 8, 8, 1, 4, np.random.default_rng(3))
    batch = tok.tokenize_batch(np.zeros((2, 8, 8, 1)))
    want = sincos_2d(2, 2, 8)
    np.testing.assert_allclose(batch.positions.data[0], want, atol=1e-6)
    np.testing.assert_allclose(batch.positions.data[1], want, atol=1e-6)


def test_grid_single_sample_matches_batch_row():
    rng = np.random.default_rng(4)
    tok = GridTokenizer("grid", 8, 8, 8, 1, 4, np.random.default_rng(5))
    arr = rng.normal(0, 1, (3, 8, 8, 1))
    batch = tok.tokenize_batch(arr)
    one = tok.tokenize(arr[1])
    np.testing.assert_array_equal(one.tokens.data, batch.tokens.data[1])
    np.testing.assert_array_equal(one.targets, batch.targets[1])


def test_grid_shape_validation():
    tok = GridTokenizer("grid", 8, 8, 8, 1, 4, np.random.default_rng(6))
    with pytest.raises(ShapeError):
        tok.tokenize_batch(np.zeros((2, 8, 9, 1)))
    with pytest.raises(ConfigError):
        GridTokenizer("grid", 8, 8, 8, 1, 3, np.random.default_rng(7))
    with pytest.raises(ConfigError):
        GridTokenizer("grid", 6, 8, 8, 1, 4, np.random.default_rng(8))


# -- sequence -----------------------------------------------------------------

def test_symbol_tokens_are_table_rows():
    tok = SequenceTokenizer("seq", 8, 5, np.random.default_rng(9), vocab=7)
    ids = np.array([[0, 3, 6, 3, 1], [2, 2, 4, 5, 0]])
    batch = tok.tokenize_batch(ids)
    np.testing.assert_array_equal(batch.tokens.data, tok.table.data[ids])
    np.testing.assert_array_equal(batch.targets, ids)
    assert tok.target_width == 7
    assert tok.token_count == 5


def test_real_sequence_windows():
    tok = SequenceTokenizer("ser", 6, 8, np.random.default_rng(10),
                            kind="real", window=4)
    arr = np.arange(16, dtype=float).reshape(2, 8)
    batch = tok.tokenize_batch(arr)
    windows = arr.reshape(2, 2, 4)
    want = windows @ tok.proj_w.data + tok.proj_b.data
    np.testing.assert_allclose(batch.tokens.data, want, atol=1e-6)
    np.testing.assert_allclose(batch.targets, windows, atol=0)
    assert tok.token_count == 2
    assert tok.target_width == 4


def test_sequence_validation():
    rng = np.random.default_rng(11)
    with pytest.raises(ConfigError):
        SequenceTokenizer("s", 8, 5, rng, vocab=1)
    with pytest.raises(ConfigError):
        SequenceTokenizer("s", 8, 8, rng, kind="real", window=3)
    with pytest.raises(ConfigError):
        SequenceTokenizer("s", 8, 8, rng, kind="fourier")
    tok = SequenceTokenizer("s", 8, 5, rng, vocab=4)
    with pytest.raises(ShapeError):
        tok.tokenize_batch(np.zeros((2, 6), dtype=np.int64))


# -- set ----------------------------------------------------------------------

def _maximin_picks(coords, m):
    picks = [0]
    d = ((coords - coords[0]) ** 2).sum(axis=1)
    for _ in range(m - 1):
        nxt = int(np.argmax(d))
        picks.append(nxt)
        d = np.minimum(d, ((coords - coords[nxt]) ** 2).sum(axis=1))
    return picks


def _set_group_oracle(pts, groups, size):
    """Farthest-point centers, stable k-nearest, coords recentred."""
    n, width = pts.shape
    cents = np.zeros((groups, 3), dtype=np.float32)
    flat = np.zeros((groups, size * width), dtype=np.float32)
    coords = pts[:, :3]
    picks = _maximin_picks(coords.astype(np.float64), groups)
    for g, c in enumerate(picks):
        cents[g] = coords[c]
        d2 = ((coords - cents[g]) ** 2).sum(axis=1)
        order = sorted(range(n), key=lambda i: (d2[i], i))[:size]
        grp = pts[order].copy()
        grp[:, :3] -= cents[g]
        flat[g] = grp.reshape(-1)
    return cents, flat


def test_set_tokens_match_grouping_oracle():
    rng = np.random.default_rng(12)
    tok = SetTokenizer("pts", 8, 20, 4, 5, np.random.default_rng(13),
                       extra_features=1)
    pts = rng.normal(0, 1, (3, 20, 4)).astype(np.float32)
    batch = tok.tokenize_batch(pts)
    for s in range(3):
        cents, flat = _set_group_oracle(pts[s], 4, 5)
        want_tok = flat @ tok.proj_w.data + tok.proj_b.data
        want_pos = cents @ tok.pos_w.data + tok.pos_b.data
        np.testing.assert_allclose(batch.tokens.data[s], want_tok, atol=1e-4)
        np.testing.assert_allclose(batch.positions.data[s], want_pos, atol=1e-4)
        np.testing.assert_allclose(batch.targets[s], flat, atol=1e-6)


def test_set_counts_and_validation():
    tok = SetTokenizer("pts", 8, 12, 3, 4, np.random.default_rng(14))
    assert tok.token_count == 3
    assert tok.target_width == 4 * 3
    with pytest.raises(ConfigError):
        SetTokenizer("pts", 8, 11, 3, 4, np.random.default_rng(15))
    with pytest.raises(ShapeError):
        tok.tokenize_batch(np.zeros((1, 12, 4), dtype=np.float32))


# -- table --------------------------------------------------------------------

def test_table_tokens_match_zscore_oracle():
    tok = TableTokenizer("tab", 8, 3, np.random.default_rng(16), cat_cards=(4, 2))
    num = np.array([[1.0, -2.0, 0.5], [3.0, 0.0, -1.5]])
    cat = np.array([[2, 0], [3, 1]])
    mu = np.array([0.5, -1.0, 0.0])
    sd = np.array([1.0, 2.0, 0.5])
    batch = tok.tokenize_batch((num, cat), (mu, sd))
    z = (num - mu) / (sd + 1e-6)
    for s in range(2):
        for f in range(3):
            want = z[s, f] * tok.num_w.data[f] + tok.num_b.data[f]
            np.testing.assert_allclose(batch.tokens.data[s, f], want, atol=1e-6)
        np.testing.assert_allclose(batch.tokens.data[s, 3],
                                   tok.cat_tables[0].data[cat[s, 0]], atol=0)
        np.testing.assert_allclose(batch.tokens.data[s, 4],
                                   tok.cat_tables[1].data[cat[s, 1]], atol=0)
        np.testing.assert_allclose(batch.targets[s, :3, 0], z[s], atol=1e-6)
        assert batch.targets[s, 3, 0] == pytest.approx(cat[s, 0] / 4.0)
        assert batch.targets[s, 4, 0] == pytest.approx(cat[s, 1] / 2.0)
    assert tok.token_count == 5
    assert tok.target_width == 1
    np.testing.assert_allclose(batch.positions.data[0], sincos_1d(5, 8), atol=1e-6)


def test_table_stats_use_train_slice_only():
    num = np.array([[0.0], [2.0], [100.0]])
    mu, sd = table_stats(num, 2)
    assert mu[0] == pytest.approx(1.0)
    assert sd[0] == pytest.approx(1.0)


def test_table_validation():
    tok = TableTokenizer("tab", 8, 2, np.random.default_rng(17))
    with pytest.raises(ShapeError):
        tok.tokenize_batch((np.zeros((2, 3)), np.zeros((2, 0))),
                           (np.zeros(3), np.ones(3)))
    with pytest.raises(ConfigError):
        TableTokenizer("tab", 8, 0, np.random.default_rng(18))


# -- token dumps --------------------------------------------------------------

def test_token_dump_round_trip(tmp_path):
    tok = SequenceTokenizer("seq", 8, 4, np.random.default_rng(19), vocab=5)
    seq = tok.tokenize(np.array([1, 4, 0, 2]))
    path = tmp_path / "t.bin"
    dump_tokens(seq, path)
    back = load_tokens(path)
    np.testing.assert_allclose(back, seq.tokens.data.astype(np.float32), atol=0)


def test_token_dump_flattens_batches(tmp_path):
    tok = SequenceTokenizer("seq", 8, 4, np.random.default_rng(20), vocab=5)
    batch = tok.tokenize_batch(np.array([[1, 2, 3, 0], [4, 4, 1, 2]]))
    path = tmp_path / "b.bin"
    dump_tokens(batch, path)
    back = load_tokens(path)
    assert back.shape == (8, 8)
    np.testing.assert_allclose(
        back, batch.tokens.data.reshape(8, 8).astype(np.float32), atol=0)


def test_token_dump_rejects_bad_magic(tmp_path):
    path = tmp_path / "bad.bin"
    path.write_bytes(b"XXXX" + b"\x00" * 16)
    with pytest.raises(DataError, match="magic"):
        load_tokens(path)


def test_token_dump_rejects_truncation(tmp_path):
    tok = SequenceTokenizer("seq", 8, 4, np.random.default_rng(21), vocab=5)
    seq = tok.tokenize(np.array([1, 4, 0, 2]))
    path = tmp_path / "cut.bin"
    dump_tokens(seq, path)
    blob = path.read_bytes()
    path.write_bytes(blob[:-8])
    with pytest.raises(DataError, match="truncated"):
        load_tokens(path)
