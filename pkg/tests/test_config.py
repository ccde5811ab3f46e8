"""Config merge and validation coverage, one case per rejection branch."""

import pytest

from modweave.config import default_config, from_dict, mini_config, validate
from modweave.errors import ConfigError


def test_defaults_validate():
    assert validate(default_config()) is not None
    assert validate(mini_config()) is not None


def test_to_dict_round_trip():
    cfg = default_config()
    cfg.stage3.steps = 123
    cfg.modalities["grid"]["noise"] = 0.5
    again = from_dict(cfg.to_dict())
    assert again == cfg


def test_overlay_touches_only_named_fields():
    cfg = from_dict({"stage3": {"steps": 50}, "seed": 3})
    want = default_config()
    assert cfg.stage3.steps == 50
    assert cfg.seed == 3
    assert cfg.stage3.lr == want.stage3.lr
    assert cfg.dims == want.dims


def test_overlay_accepts_integral_floats():
    cfg = from_dict({"stage3": {"steps": 50.0}})
    assert cfg.stage3.steps == 50
    assert isinstance(cfg.stage3.steps, int)


def test_overlay_replaces_plain_dicts_whole():
    mods = {"solo": {"family": "set", "points": 16, "groups": 4,
                     "group_size": 4, "classes": 2, "samples": 32,
                     "tasks": [{"name": "cls", "kind": "classification",
                                "classes": 2}]}}
    cfg = from_dict({"modalities": mods})
    assert sorted(cfg.modalities) == ["solo"]
    validate(cfg)


@pytest.mark.parametrize("data,match", [
    (17, "config root"),
    ({"stage3": {"stepz": 5}}, "stage3.stepz: unknown config key"),
    ({"bogus": 1}, "bogus: unknown config key"),
    ({"seed": "abc"}, "seed: expected an integer"),
    ({"seed": True}, "seed: expected an integer"),
    ({"stage3": {"steps": 50.5}}, "expected an integer"),
    ({"stage3": {"lr": "fast"}}, "stage3.lr: expected a number"),
    ({"stage1": 5}, "stage1: expected a nested object"),
    ({"modalities": 5}, "modalities: expected a nested object"),
    ({"paths": {"metrics": 7}}, "paths.metrics: expected a string"),
])
def test_merge_rejections(data, match):
    with pytest.raises(ConfigError, match=match):
        from_dict(data)


def _mutate(fn):
    cfg = default_config()
    fn(cfg)
    return cfg


@pytest.mark.parametrize("fn,match", [
    (lambda c: setattr(c.dims, "d_tok", 0), "dims.d_tok"),
    (lambda c: setattr(c.dims, "heads", 5), "dims.heads"),
    (lambda c: setattr(c, "seed", -1), "seed"),
    (lambda c: setattr(c, "modalities", {}), "at least one modality"),
    (lambda c: c.modalities["grid"].update(family="video"), "unknown family"),
    (lambda c: c.modalities["grid"].update(samples=0), "positive integer"),
    (lambda c: c.modalities["grid"].update(patch=5), "does not divide"),
    (lambda c: c.modalities["grid"].update(classes=5), "bands do not tile"),
    (lambda c: c.modalities["grid"].update(width=48, height=32, patch=16,
                                           classes=6), "band width"),
    (lambda c: c.modalities["grid"].update(train_fraction=1.0), "train_fraction"),
    (lambda c: c.modalities["sequence"].update(vocab=1), "vocab"),
    (lambda c: c.modalities["sequence"].update(length=25), "bands do not tile"),
    (lambda c: c.modalities["sequence"].update(motif=9), "motif"),
    (lambda c: c.modalities["sequence"].update(kind="fourier"), "sequence kind"),
    (lambda c: c.modalities["sequence"].update(kind="real", window=5), "window"),
    (lambda c: c.modalities["set"].update(points=60), "groups\\*group_size"),
    (lambda c: c.modalities["set"].update(classes=4), "shape templates"),
    (lambda c: c.modalities["table"].update(cat_cards=[1]), "cat_cards"),
    (lambda c: c.modalities["set"]["tasks"].append(
        {"name": "x", "kind": "ranking"}), "unknown kind"),
    (lambda c: c.modalities["set"]["tasks"].append(
        {"name": "cls", "kind": "classification", "classes": 3}), "duplicate"),
    (lambda c: c.modalities["set"]["tasks"].append(
        {"name": "x", "kind": "classification", "classes": 1}), "2 classes"),
    (lambda c: c.modalities["set"]["tasks"].append(
        {"name": "x", "kind": "dense", "out_width": 0}), "out_width"),
    (lambda c: c.modalities["set"]["tasks"].append({"kind": "dense"}),
     "needs a name"),
    (lambda c: setattr(c.stage1, "epochs", -1), "stage1.epochs"),
    (lambda c: setattr(c.stage1, "batch_size", 0), "stage1.batch_size"),
    (lambda c: setattr(c.stage2, "lr", 0.0), "stage2.lr"),
    (lambda c: setattr(c.stage3, "batch_size", 5), "even size"),
    (lambda c: setattr(c.stage3, "label_fraction", 0.0), "label_fraction"),
    (lambda c: c.masking.ratios.update(grid=1.0), "masking.ratios"),
    (lambda c: setattr(c.masking, "predict_fraction", 0.0), "predict_fraction"),
    (lambda c: setattr(c.balancer, "floor", 0.0), "balancer"),
    (lambda c: setattr(c.balancer, "cap", 1.2), "balancer"),
    (lambda c: setattr(c.balancer, "interval", 0), "balancer.interval"),
    (lambda c: setattr(c.balancer, "gamma", -1.0), "balancer.gamma"),
    (lambda c: setattr(c.optimizer, "kind", "rmsprop"), "optimizer.kind"),
    (lambda c: setattr(c.optimizer, "beta1", 1.5), "betas"),
    (lambda c: setattr(c.adapt, "fraction", 0.0), "adapt.fraction"),
    (lambda c: setattr(c.adapt, "steps", 0), "adapt"),
])
def test_validation_rejections(fn, match):
    with pytest.raises(ConfigError, match=match):
        validate(_mutate(fn))


def test_mini_config_is_small_but_complete():
    cfg = mini_config()
    assert cfg.dims.d_tok <= 16
    assert sorted(cfg.modalities) == ["grid", "sequence", "set"]
    assert cfg.stage3.steps <= 16
    assert cfg.seed == 11
