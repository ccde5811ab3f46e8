"""Run configuration: defaults, JSON merge, and validation.

One RunConfig drives everything: modality registry (tokenizer and
dataset parameters plus task lists), model dims, per-stage budgets,
masking ratios, balancer knobs, optimizer settings, seed, and paths.
Loading merges a JSON file over the defaults; unknown keys fail with
their dotted path, and a config round-trips losslessly through to_dict.
"""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field, is_dataclass

from .errors import ConfigError


@dataclass
class DimsConfig:
    d_tok: int = 48
    d_red: int = 24
    layers: int = 2
    heads: int = 4
    head_layers: int = 2
    dec_layers: int = 2


@dataclass
class Stage1Config:
    epochs: int = 3
    batch_size: int = 16
    lr: float = 1e-3


@dataclass
class Stage2Config:
    steps: int = 400
    batch_size: int = 16
    lr: float = 1e-3


@dataclass
class Stage3Config:
    steps: int = 2000
    batch_size: int = 16
    lr: float = 1e-3
    label_fraction: float = 1.0


@dataclass
class MaskingConfig:
    ratios: dict = field(default_factory=lambda: {
        "grid": 0.95, "sequence": 0.95, "set": 0.90, "table": 0.90})
    predict_fraction: float = 0.05


@dataclass
class BalancerConfig:
    # interval-mean loss ratios are noisy at B=16; a long window and a tight
    # clamp keep the weights from oscillating across the whole allowed range
    gamma: float = 1.0
    floor: float = 0.5
    cap: float = 2.0
    interval: int = 200


@dataclass
class OptimizerConfig:
    kind: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    momentum: float = 0.9


@dataclass
class AdaptConfig:
    fraction: float = 0.10
    steps: int = 1000
    lr: float = 1e-2
    hidden: int = 32
    batch_size: int = 16


@dataclass
class PathsConfig:
    metrics: str = "metrics.jsonl"
    checkpoint: str = "model.owck"


@dataclass
class RunConfig:
    seed: int = 7
    dims: DimsConfig = field(default_factory=DimsConfig)
    modalities: dict = field(default_factory=dict)
    stage1: Stage1Config = field(default_factory=Stage1Config)
    stage2: Stage2Config = field(default_factory=Stage2Config)
    stage3: Stage3Config = field(default_factory=Stage3Config)
    masking: MaskingConfig = field(default_factory=MaskingConfig)
    balancer: BalancerConfig = field(default_factory=BalancerConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    adapt: AdaptConfig = field(default_factory=AdaptConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def to_dict(self) -> dict:
        return asdict(self)


def default_config() -> RunConfig:
    """The desk-scale suite: 3 task-bearing modalities, 5 tasks, plus a
    table modality kept aside for frozen adaptation."""
    cfg = RunConfig()
    cfg.modalities = {
        "grid": {
            "family": "grid", "height": 32, "width": 32, "channels": 1,
            "patch": 8, "classes": 4, "samples": 512,
            "noise": 0.25, "amplitude": 2.0,
            "tasks": [
                {"name": "cls", "kind": "classification", "classes": 4},
                {"name": "occupancy", "kind": "dense", "out_width": 1},
            ],
        },
        "sequence": {
            "family": "sequence", "kind": "symbol", "length": 24, "vocab": 12,
            "classes": 4, "samples": 512, "motif": 3,
            "tasks": [
                {"name": "cls", "kind": "classification", "classes": 4},
                {"name": "motif", "kind": "dense", "out_width": 1},
            ],
        },
        "set": {
            "family": "set", "points": 64, "groups": 8, "group_size": 8,
            "classes": 3, "samples": 512, "jitter": 0.02,
            "tasks": [
                {"name": "cls", "kind": "classification", "classes": 3},
            ],
        },
        "table": {
            # wide margin on purpose: frozen-trunk embeddings of this dataset
            # must stay linearly separable for the adaptation probe
            "family": "table", "num_fields": 6, "cat_cards": [8], "classes": 3,
            "samples": 512, "margin": 6.0, "noise": 0.5,
            "tasks": [],
        },
    }
    return cfg


def mini_config(seed: int = 11) -> RunConfig:
    """Tiny model and suite for finite-difference checks and fast tests."""
    cfg = default_config()
    cfg.seed = seed
    cfg.dims = DimsConfig(d_tok=16, d_red=8, layers=1, heads=2,
                          head_layers=1, dec_layers=1)
    cfg.modalities = {
        "grid": {
            "family": "grid", "height": 8, "width": 8, "channels": 1,
            "patch": 4, "classes": 2, "samples": 16,
            "noise": 0.25, "amplitude": 2.0,
            "tasks": [
                {"name": "cls", "kind": "classification", "classes": 2},
                {"name": "occupancy", "kind": "dense", "out_width": 1},
            ],
        },
        "sequence": {
            "family": "sequence", "kind": "symbol", "length": 6, "vocab": 5,
            "classes": 2, "samples": 16, "motif": 2,
            "tasks": [
                {"name": "cls", "kind": "classification", "classes": 2},
            ],
        },
        "set": {
            "family": "set", "points": 12, "groups": 3, "group_size": 4,
            "classes": 2, "samples": 16, "jitter": 0.02,
            "tasks": [
                {"name": "cls", "kind": "classification", "classes": 2},
            ],
        },
    }
    cfg.stage1 = Stage1Config(epochs=1, batch_size=4)
    cfg.stage2 = Stage2Config(steps=8, batch_size=4)
    cfg.stage3 = Stage3Config(steps=12, batch_size=4)
    cfg.balancer = BalancerConfig(interval=4)
    return cfg


# -- merge ---------------------------------------------------------------------

def _merge_into(obj, data: dict, path: str) -> None:
    for key, value in data.items():
        full = f"{path}{key}"
        if not hasattr(obj, key):
            raise ConfigError(f"{full}: unknown config key")
        current = getattr(obj, key)
        if is_dataclass(current):
            if not isinstance(value, dict):
                raise ConfigError(f"{full}: expected a nested object")
            _merge_into(current, value, full + ".")
        elif isinstance(current, dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{full}: expected a nested object")
            setattr(obj, key, copy.deepcopy(value))
        elif isinstance(current, bool):
            if not isinstance(value, bool):
                raise ConfigError(f"{full}: expected a boolean")
            setattr(obj, key, value)
        elif isinstance(current, int) and not isinstance(current, bool):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"{full}: expected an integer")
            if isinstance(value, float) and not value.is_integer():
                raise ConfigError(f"{full}: expected an integer, got {value}")
            setattr(obj, key, int(value))
        elif isinstance(current, float):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"{full}: expected a number")
            setattr(obj, key, float(value))
        elif isinstance(current, str):
            if not isinstance(value, str):
                raise ConfigError(f"{full}: expected a string")
            setattr(obj, key, value)
        else:
            raise ConfigError(f"{full}: unsupported config field")


def from_dict(data: dict) -> RunConfig:
    """Defaults overlaid with `data`; unknown keys fail by dotted path."""
    if not isinstance(data, dict):
        raise ConfigError("config root must be an object")
    cfg = default_config()
    _merge_into(cfg, data, "")
    return cfg


# -- validation ------------------------------------------------------------------

_FAMILY_KEYS = {
    "grid": ("height", "width", "channels", "patch", "classes", "samples"),
    "sequence": ("length", "classes", "samples"),
    "set": ("points", "groups", "group_size", "classes", "samples"),
    "table": ("num_fields", "classes", "samples"),
}


def _require_positive_int(spec: dict, name: str, key: str) -> int:
    val = spec.get(key)
    if not isinstance(val, int) or isinstance(val, bool) or val < 1:
        raise ConfigError(f"modalities.{name}.{key}: need a positive integer, got {val!r}")
    return val


def _validate_tasks(name: str, spec: dict) -> None:
    seen = set()
    for i, t in enumerate(spec.get("tasks", [])):
        where = f"modalities.{name}.tasks[{i}]"
        if not isinstance(t, dict) or not t.get("name"):
            raise ConfigError(f"{where}: task needs a name")
        if t["name"] in seen:
            raise ConfigError(f"{where}: duplicate task name {t['name']!r}")
        seen.add(t["name"])
        kind = t.get("kind")
        if kind == "classification":
            if t.get("classes", 0) < 2:
                raise ConfigError(f"{where}: classification needs >= 2 classes")
        elif kind == "dense":
            if t.get("out_width", 0) < 1:
                raise ConfigError(f"{where}: dense needs out_width >= 1")
        else:
            raise ConfigError(f"{where}: unknown kind {kind!r}")


def _validate_modality(name: str, spec: dict, dims: DimsConfig) -> None:
    fam = spec.get("family")
    if fam not in _FAMILY_KEYS:
        raise ConfigError(f"modalities.{name}.family: unknown family {fam!r}")
    for key in _FAMILY_KEYS[fam]:
        _require_positive_int(spec, name, key)
    frac = spec.get("train_fraction", 0.875)
    if not 0.0 < frac < 1.0:
        raise ConfigError(f"modalities.{name}.train_fraction: need (0, 1), got {frac}")
    if fam == "grid":
        h, w, p, k = spec["height"], spec["width"], spec["patch"], spec["classes"]
        if h % p or w % p:
            raise ConfigError(f"modalities.{name}.patch: {p} does not divide {h}x{w}")
        if w % k:
            raise ConfigError(f"modalities.{name}.classes: {k} bands do not tile width {w}")
        if (w // k) % p:
            raise ConfigError(
                f"modalities.{name}.classes: band width {w // k} is not a multiple "
                f"of patch {p}, occupancy targets would be fractional")
        if dims.d_tok % 4:
            raise ConfigError(f"dims.d_tok: grid positions need a multiple of 4, "
                              f"got {dims.d_tok}")
    elif fam == "sequence":
        kind = spec.get("kind", "symbol")
        if kind == "symbol":
            if spec.get("vocab", 0) < 2:
                raise ConfigError(
                    f"modalities.{name}.vocab: need >= 2 so background symbols "
                    f"exist, got {spec.get('vocab')}")
            if spec["length"] % spec["classes"]:
                raise ConfigError(
                    f"modalities.{name}.classes: {spec['classes']} bands do not "
                    f"tile length {spec['length']}")
            motif = spec.get("motif", 3)
            band = spec["length"] // spec["classes"]
            if not 1 <= motif <= band:
                raise ConfigError(f"modalities.{name}.motif: {motif} outside "
                                  f"[1, {band}] (one band)")
        elif kind == "real":
            window = spec.get("window", 0)
            if window < 1 or spec["length"] % window:
                raise ConfigError(
                    f"modalities.{name}.window: {window} does not divide "
                    f"length {spec['length']}")
        else:
            raise ConfigError(f"modalities.{name}.kind: unknown sequence kind {kind!r}")
    elif fam == "set":
        if spec["points"] < spec["groups"] * spec["group_size"]:
            raise ConfigError(
                f"modalities.{name}.points: {spec['points']} < groups*group_size")
        if not 2 <= spec["classes"] <= 3:
            raise ConfigError(
                f"modalities.{name}.classes: set datasets carry 3 shape templates, "
                f"got {spec['classes']}")
    elif fam == "table":
        for card in spec.get("cat_cards", []):
            if not isinstance(card, int) or card < 2:
                raise ConfigError(
                    f"modalities.{name}.cat_cards: cardinalities must be >= 2")
    _validate_tasks(name, spec)


def validate(cfg: RunConfig) -> RunConfig:
    d = cfg.dims
    for key in ("d_tok", "d_red", "layers", "heads", "head_layers", "dec_layers"):
        if getattr(d, key) < 1:
            raise ConfigError(f"dims.{key}: need a positive integer, got {getattr(d, key)}")
    if d.d_tok % d.heads or d.d_red % d.heads:
        raise ConfigError(
            f"dims.heads: {d.heads} must divide d_tok={d.d_tok} and d_red={d.d_red}")
    if not isinstance(cfg.seed, int) or cfg.seed < 0:
        raise ConfigError(f"seed: need a non-negative integer, got {cfg.seed!r}")
    if not cfg.modalities:
        raise ConfigError("modalities: at least one modality required")
    for name in sorted(cfg.modalities):
        _validate_modality(name, cfg.modalities[name], d)
    for stage, fieldname in (("stage1", "epochs"), ("stage2", "steps"),
                             ("stage3", "steps")):
        block = getattr(cfg, stage)
        if getattr(block, fieldname) < 0:
            raise ConfigError(f"{stage}.{fieldname}: cannot be negative")
        if block.batch_size < 1:
            raise ConfigError(f"{stage}.batch_size: need >= 1")
        if block.lr <= 0:
            raise ConfigError(f"{stage}.lr: need > 0")
    if cfg.stage3.batch_size % 2 or cfg.stage3.batch_size < 2:
        raise ConfigError(
            f"stage3.batch_size: half/half pair batches need an even size >= 2, "
            f"got {cfg.stage3.batch_size}")
    if not 0.0 < cfg.stage3.label_fraction <= 1.0:
        raise ConfigError(f"stage3.label_fraction: need (0, 1], got "
                          f"{cfg.stage3.label_fraction}")
    for fam, ratio in cfg.masking.ratios.items():
        if not 0.0 <= ratio < 1.0:
            raise ConfigError(f"masking.ratios.{fam}: need [0, 1), got {ratio}")
    if not 0.0 < cfg.masking.predict_fraction < 1.0:
        raise ConfigError(f"masking.predict_fraction: need (0, 1), got "
                          f"{cfg.masking.predict_fraction}")
    b = cfg.balancer
    if not 0.0 < b.floor <= 1.0 <= b.cap or b.cap < 2.0 - b.floor:
        raise ConfigError(
            f"balancer: need 0 < floor <= 1 <= cap and cap >= 2 - floor, "
            f"got [{b.floor}, {b.cap}]")
    if b.interval < 1:
        raise ConfigError(f"balancer.interval: need >= 1, got {b.interval}")
    if b.gamma < 0:
        raise ConfigError(f"balancer.gamma: need >= 0, got {b.gamma}")
    o = cfg.optimizer
    if o.kind not in ("adam", "sgd"):
        raise ConfigError(f"optimizer.kind: unknown kind {o.kind!r}")
    if not (0.0 < o.beta1 < 1.0 and 0.0 < o.beta2 < 1.0 and o.eps > 0.0):
        raise ConfigError("optimizer: betas need (0, 1) and eps > 0")
    a = cfg.adapt
    if not 0.0 < a.fraction <= 1.0:
        raise ConfigError(f"adapt.fraction: need (0, 1], got {a.fraction}")
    if a.steps < 1 or a.hidden < 1 or a.batch_size < 1 or a.lr <= 0:
        raise ConfigError("adapt: steps, hidden, batch_size, lr must be positive")
    return cfg
