"""Masked-pretraining tests: mask plans, slot corruption, stage isolation."""

import numpy as np
import pytest

from modweave.config import mini_config
from modweave.data import build_datasets
from modweave.errors import ConfigError, DataError
from modweave.model import build_bundle
from modweave.optim import make_optimizer
from modweave.pretrain import (KEEP, MASK, RANDOM, MaskPlan, mask_family,
                               plan_mask, slot_content, stage1_loop,
                               stage1_step, stage2_loop, stage2_step)
from modweave.tokenizers import SequenceTokenizer
from modweave.util import rng_from


# -- mask plans -----------------------------------------------------------------

@pytest.mark.parametrize("n,ratio,want", [
    (100, 0.95, 95),
    (20, 0.90, 18),
    (10, 0.99, 9),    # clamp to n - 1
    (4, 0.10, 1),     # clamp up to 1
    (8, 0.50, 4),
    (7, 0.50, 4),     # round half up of 3.5
])
def test_plan_mask_counts(n, ratio, want):
    for trial in range(50):
        plan = plan_mask(n, ratio, "grid", np.random.default_rng(trial))
        assert plan.masked.size == want
        assert plan.visible.size == n - want
        np.testing.assert_array_equal(np.sort(np.concatenate(
            [plan.masked, plan.visible])), np.arange(n))
        assert np.all(np.diff(plan.masked) > 0)
        assert np.all(np.diff(plan.visible) > 0)


def test_plan_mask_zero_ratio_hides_nothing():
    plan = plan_mask(5, 0.0, "grid", np.random.default_rng(0))
    assert plan.masked.size == 0
    np.testing.assert_array_equal(plan.visible, np.arange(5))


def test_plan_mask_validation():
    rng = np.random.default_rng(0)
    with pytest.raises(DataError):
        plan_mask(10, 1.0, "grid", rng)
    with pytest.raises(DataError):
        plan_mask(10, -0.1, "grid", rng)
    with pytest.raises(DataError):
        plan_mask(0, 0.5, "grid", rng)
    with pytest.raises(DataError):
        plan_mask(1, 0.5, "grid", rng)


def test_prediction_slots_split_8_1_1():
    plan = plan_mask(1000, 0.5, "sequence", np.random.default_rng(1),
                     predict_fraction=0.1)
    assert plan.predict.size == 100
    assert set(plan.predict) <= set(plan.masked)
    assert np.all(np.diff(plan.predict) > 0)
    counts = np.bincount(plan.labels, minlength=3)
    assert counts[MASK] == 80 and counts[RANDOM] == 10 and counts[KEEP] == 10


@pytest.mark.parametrize("p,want", [
    (10, (8, 1, 1)),
    (7, (5, 1, 1)),    # remainder stays with the mask label
    (20, (16, 2, 2)),
])
def test_prediction_label_rounding(p, want):
    plan = plan_mask(100, 0.9, "sequence", np.random.default_rng(2),
                     predict_fraction=p / 100)
    counts = np.bincount(plan.labels, minlength=3)
    assert tuple(counts[[MASK, RANDOM, KEEP]]) == want


def test_non_symbol_families_get_no_prediction_slots():
    for fam in ("grid", "set", "table", "series"):
        plan = plan_mask(20, 0.5, fam, np.random.default_rng(3),
                         predict_fraction=0.2)
        assert plan.predict is None and plan.labels is None


def test_mask_family_tags():
    rng = np.random.default_rng(4)
    sym = SequenceTokenizer("s", 8, 6, rng, vocab=5)
    ser = SequenceTokenizer("s", 8, 8, rng, kind="real", window=4)
    assert mask_family(sym) == "sequence"
    assert mask_family(ser) == "series"

    class Stub:
        family = "grid"
    assert mask_family(Stub()) == "grid"


# -- slot corruption ---------------------------------------------------------------

def test_slot_content_maps_labels_to_slots():
    masked = np.array([1, 3, 5, 8], dtype=np.int64)
    plan = MaskPlan(10, masked, np.setdiff1d(np.arange(10), masked),
                    predict=np.array([3, 5, 8], dtype=np.int64),
                    labels=np.array([MASK, RANDOM, KEEP], dtype=np.int64))
    ids = np.arange(100, 110, dtype=np.int64)[None, :]
    kind, content = slot_content([plan], ids, vocab=7,
                                 rng=np.random.default_rng(5))
    np.testing.assert_array_equal(kind[0], [MASK, MASK, RANDOM, KEEP])
    assert 0 <= content[0, 2] < 7
    assert content[0, 3] == 108  # original symbol at position 8
    assert content[0, 0] == 0 and content[0, 1] == 0


def test_slot_content_skips_plans_without_predictions():
    masked = np.array([0, 2], dtype=np.int64)
    plan = MaskPlan(4, masked, np.array([1, 3], dtype=np.int64))
    kind, content = slot_content([plan], np.zeros((1, 4), dtype=np.int64),
                                 vocab=5, rng=np.random.default_rng(6))
    assert not kind.any() and not content.any()


# -- stage steps ---------------------------------------------------------------------

def _snapshot(bundle):
    return {n: p.data.copy() for n, p in bundle.named_parameters(True)}


def _changed(bundle, before):
    return {n for n, p in bundle.named_parameters(True)
            if not np.array_equal(p.data, before[n])}


def test_stage1_step_touches_only_encoder_and_its_decoder():
    cfg = mini_config()
    bundle = build_bundle(cfg)
    sets = build_datasets(cfg)
    before = _snapshot(bundle)
    opts = (make_optimizer(bundle.f.encoder_params("f"), cfg.optimizer, 1e-3),
            make_optimizer(bundle.decoders1["grid"].named_params("dec1.grid"),
                           cfg.optimizer, 1e-3))
    loss = stage1_step(sets["grid"].samples[:4], bundle, bundle.decoders1["grid"],
                       opts, modality="grid", ratio=0.75,
                       rng=rng_from(0, "t"), predict_fraction=0.05)
    assert np.isfinite(loss)
    changed = _changed(bundle, before)
    assert changed
    assert all(n.startswith(("f.enc.", "dec1.grid.")) for n in changed)
    assert any(n.startswith("f.enc.") for n in changed)
    assert any(n.startswith("dec1.grid.") for n in changed)


def test_stage2_step_trains_trunk_and_pair_decoders():
    cfg = mini_config()
    bundle = build_bundle(cfg)
    sets = build_datasets(cfg)
    before = _snapshot(bundle)
    opts = (make_optimizer(bundle.trunk_params(), cfg.optimizer, 1e-3),
            make_optimizer(bundle.decoders2["grid"].named_params("dec2.grid"),
                           cfg.optimizer, 1e-3),
            make_optimizer(bundle.decoders2["set"].named_params("dec2.set"),
                           cfg.optimizer, 1e-3))
    loss = stage2_step(sets["grid"].samples[:4], sets["set"].samples[:4],
                       bundle, opts, mod_i="grid", mod_j="set",
                       ratios=cfg.masking.ratios, rng=rng_from(1, "t"))
    assert np.isfinite(loss)
    changed = _changed(bundle, before)
    allowed = ("f.", "amid.", "aout.", "g.", "dec2.grid.", "dec2.set.")
    assert all(n.startswith(allowed) for n in changed)
    for prefix in ("f.", "g.", "dec2.grid.", "dec2.set."):
        assert any(n.startswith(prefix) for n in changed)
    # heads, tokenizers, and unimodal decoders stay frozen through stage 2
    assert not any(n.startswith(("head.", "tok.", "dec1.")) for n in changed)


def test_stage2_step_rejects_same_modality_pair():
    cfg = mini_config()
    bundle = build_bundle(cfg)
    sets = build_datasets(cfg)
    with pytest.raises(DataError):
        stage2_step(sets["grid"].samples[:2], sets["grid"].samples[:2],
                    bundle, (), mod_i="grid", mod_j="grid",
                    ratios=cfg.masking.ratios, rng=rng_from(2, "t"))


def test_stage1_step_requires_known_modality():
    cfg = mini_config()
    bundle = build_bundle(cfg)
    with pytest.raises(ConfigError):
        stage1_step(np.zeros((2, 8, 8, 1)), bundle, bundle.decoders1["grid"],
                    (), modality="video", ratio=0.5, rng=rng_from(3, "t"))


# -- loops -----------------------------------------------------------------------

def test_stage1_loop_round_robin_history():
    cfg = mini_config()
    bundle = build_bundle(cfg)
    sets = build_datasets(cfg)
    history = stage1_loop(bundle, sets, sorted(sets), epochs=1, batch_size=4,
                          ratios=cfg.masking.ratios,
                          predict_fraction=cfg.masking.predict_fraction,
                          seed=cfg.seed, optimizer_cfg=cfg.optimizer, lr=1e-3)
    # 14 train samples per modality in batches of 4 -> 4 batches each
    assert len(history) == 12
    assert [h["modality"] for h in history[:4]] == ["grid"] * 4
    assert all(np.isfinite(h["loss"]) for h in history)
    assert [h["step"] for h in history] == list(range(12))
    with pytest.raises(ConfigError):
        stage1_loop(bundle, sets, [], epochs=1, batch_size=4,
                    ratios=cfg.masking.ratios, predict_fraction=0.05,
                    seed=0, optimizer_cfg=cfg.optimizer, lr=1e-3)


def test_stage2_loop_draws_pairs():
    cfg = mini_config()
    bundle = build_bundle(cfg)
    sets = build_datasets(cfg)
    history = stage2_loop(bundle, sets, sorted(sets), steps=6, batch_size=4,
                          ratios=cfg.masking.ratios,
                          predict_fraction=cfg.masking.predict_fraction,
                          seed=cfg.seed, optimizer_cfg=cfg.optimizer, lr=1e-3)
    assert len(history) == 6
    valid = {"grid+sequence", "grid+set", "sequence+set"}
    assert all(h["pair"] in valid for h in history)
    assert all(np.isfinite(h["loss"]) for h in history)
    with pytest.raises(ConfigError):
        stage2_loop(bundle, sets, ["grid"], steps=2, batch_size=4,
                    ratios=cfg.masking.ratios, predict_fraction=0.05,
                    seed=0, optimizer_cfg=cfg.optimizer, lr=1e-3)
