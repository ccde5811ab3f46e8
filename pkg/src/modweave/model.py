"""Shared backbone and task heads.

Two transformers carry every modality: f encodes tokenized input at
width d_tok and reduces it per token to d_red through three fully
connected layers with ReLU between them; g mixes at width d_red. Two
cross-attention modules fuse a pair of streams: the mid fusion attends
one stream's reduced tokens over the other's, the out fusion attends
backbone outputs over the stream's own raw tokens before its head. Both
are shared across modalities and carry a residual to the query, with
zero-initialized output projections so they start as identities.

Training runs pairs through `forward_pair`; inference drops the fusion
modules entirely: `forward_inference` is head(g(f(x))) on one stream
with the very same parameters.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError
from .tensor import (Tensor, add, concat, dropout, gelu, layer_norm, matmul,
                     mul, narrow, relu, reshape, softmax, tensor, transpose)
from .tokenizers import (GridTokenizer, SequenceTokenizer, SetTokenizer,
                         TableTokenizer, TokenBatch, TokenSequence)
from .util import rng_from


class Linear:
    def __init__(self, rng, din: int, dout: int, std: float | None = None,
                 zero: bool = False):
        # fan-in scaling keeps activations O(1) at these small widths, so
        # content tokens are not drowned out by the unit-scale positions
        if zero:
            w = np.zeros((din, dout))
        else:
            w = rng.normal(0.0, din ** -0.5 if std is None else std, (din, dout))
        self.w = tensor(w, requires_grad=True)
        self.b = tensor(np.zeros(dout), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return add(matmul(x, self.w), self.b)

    def named_params(self, prefix: str):
        return [(f"{prefix}.w", self.w), (f"{prefix}.b", self.b)]


class LayerNorm:
    def __init__(self, d: int):
        self.gain = tensor(np.ones(d), requires_grad=True)
        self.bias = tensor(np.zeros(d), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain, self.bias)

    def named_params(self, prefix: str):
        return [(f"{prefix}.gain", self.gain), (f"{prefix}.bias", self.bias)]


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, n, d = x.shape
    return transpose(reshape(x, (b, n, heads, d // heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, h, n, hd = x.shape
    return reshape(transpose(x, (0, 2, 1, 3)), (b, n, h * hd))


class SelfAttention:
    def __init__(self, rng, d: int, heads: int):
        if d % heads:
            raise ConfigError(f"width {d} not divisible by {heads} heads")
        self.heads = heads
        self.scale = (d // heads) ** -0.5
        self.wq = Linear(rng, d, d)
        self.wk = Linear(rng, d, d)
        self.wv = Linear(rng, d, d)
        self.wo = Linear(rng, d, d)

    def __call__(self, x: Tensor) -> Tensor:
        q = _split_heads(self.wq(x), self.heads)
        k = _split_heads(self.wk(x), self.heads)
        v = _split_heads(self.wv(x), self.heads)
        scores = mul(matmul(q, transpose(k, (0, 1, 3, 2))), self.scale)
        ctx = matmul(softmax(scores, axis=-1), v)
        return self.wo(_merge_heads(ctx))

    def named_params(self, prefix: str):
        out = []
        for tag, lin in (("q", self.wq), ("k", self.wk), ("v", self.wv), ("o", self.wo)):
            out += lin.named_params(f"{prefix}.w{tag}")
        return out


class Block:
    """Pre-norm residual block: attention then a GeLU MLP."""

    def __init__(self, rng, d: int, heads: int):
        self.ln1 = LayerNorm(d)
        self.attn = SelfAttention(rng, d, heads)
        self.ln2 = LayerNorm(d)
        self.fc1 = Linear(rng, d, 4 * d)
        self.fc2 = Linear(rng, 4 * d, d)

    def __call__(self, x: Tensor, rng=None, rate: float = 0.0) -> Tensor:
        x = add(x, dropout(self.attn(self.ln1(x)), rate, rng))
        return add(x, dropout(self.fc2(gelu(self.fc1(self.ln2(x)))), rate, rng))

    def named_params(self, prefix: str):
        return (self.ln1.named_params(f"{prefix}.ln1")
                + self.attn.named_params(f"{prefix}.attn")
                + self.ln2.named_params(f"{prefix}.ln2")
                + self.fc1.named_params(f"{prefix}.fc1")
                + self.fc2.named_params(f"{prefix}.fc2"))


class TransformerStack:
    def __init__(self, rng, d: int, layers: int, heads: int):
        self.width = d
        self.blocks = [Block(rng, d, heads) for _ in range(layers)]
        self.ln = LayerNorm(d)

    def __call__(self, x: Tensor, rng=None, rate: float = 0.0) -> Tensor:
        for blk in self.blocks:
            x = blk(x, rng, rate)
        return self.ln(x)

    def named_params(self, prefix: str):
        out = []
        for i, blk in enumerate(self.blocks):
            out += blk.named_params(f"{prefix}.b{i}")
        return out + self.ln.named_params(f"{prefix}.ln")


class CrossAttention:
    """Queries from the first stream, keys/values from the second.

    Output keeps the query shape and adds back to the query, so zeroed
    value/output projections collapse the module to identity.
    """

    def __init__(self, rng, d_q: int, d_kv: int, heads: int):
        if d_q % heads:
            raise ConfigError(f"query width {d_q} not divisible by {heads} heads")
        self.heads = heads
        self.scale = (d_q // heads) ** -0.5
        self.wq = Linear(rng, d_q, d_q)
        self.wk = Linear(rng, d_kv, d_q)
        self.wv = Linear(rng, d_kv, d_q)
        self.wo = Linear(rng, d_q, d_q, zero=True)

    def __call__(self, q_in: Tensor, kv: Tensor, return_weights: bool = False):
        if q_in.ndim != 3 or kv.ndim != 3:
            raise ShapeError(
                f"cross attention wants (B, n, d) streams, got {q_in.shape} and {kv.shape}")
        q = _split_heads(self.wq(q_in), self.heads)
        k = _split_heads(self.wk(kv), self.heads)
        v = _split_heads(self.wv(kv), self.heads)
        weights = softmax(mul(matmul(q, transpose(k, (0, 1, 3, 2))), self.scale), axis=-1)
        out = add(q_in, self.wo(_merge_heads(matmul(weights, v))))
        if return_weights:
            return out, weights.data
        return out

    def named_params(self, prefix: str):
        out = []
        for tag, lin in (("q", self.wq), ("k", self.wk), ("v", self.wv), ("o", self.wo)):
            out += lin.named_params(f"{prefix}.w{tag}")
        return out


class FeatureTransform:
    """f: transformer at d_tok, then per-token 3-layer FC down to d_red."""

    def __init__(self, rng, d_tok: int, d_red: int, layers: int, heads: int):
        self.d_tok, self.d_red = d_tok, d_red
        self.enc = TransformerStack(rng, d_tok, layers, heads)
        self.fc1 = Linear(rng, d_tok, d_tok)
        self.fc2 = Linear(rng, d_tok, d_red)
        self.fc3 = Linear(rng, d_red, d_red)

    def encode(self, x: Tensor, rng=None, rate: float = 0.0) -> Tensor:
        return self.enc(x, rng, rate)

    def reduce(self, h: Tensor) -> Tensor:
        return self.fc3(relu(self.fc2(relu(self.fc1(h)))))

    def __call__(self, x: Tensor, rng=None, rate: float = 0.0) -> Tensor:
        return self.reduce(self.encode(x, rng, rate))

    def named_params(self, prefix: str):
        return (self.enc.named_params(f"{prefix}.enc")
                + self.fc1.named_params(f"{prefix}.fc1")
                + self.fc2.named_params(f"{prefix}.fc2")
                + self.fc3.named_params(f"{prefix}.fc3"))

    def encoder_params(self, prefix: str):
        return self.enc.named_params(f"{prefix}.enc")


@dataclass(frozen=True)
class TaskSpec:
    modality: str
    task: str
    kind: str  # "classification" | "dense"
    classes: int = 0
    out_width: int = 0

    def __post_init__(self):
        if self.kind not in ("classification", "dense"):
            raise ConfigError(f"tasks.{self.key}: unknown kind {self.kind!r}")
        if self.kind == "classification" and self.classes < 2:
            raise ConfigError(f"tasks.{self.key}: classification needs >= 2 classes")
        if self.kind == "dense" and self.out_width < 1:
            raise ConfigError(f"tasks.{self.key}: dense needs out_width >= 1")

    @property
    def key(self) -> str:
        return f"{self.modality}/{self.task}"

    @property
    def loss(self) -> str:
        return "ce" if self.kind == "classification" else "l2"


class Head:
    """Small transformer over backbone features, then a task projection.

    Classification heads mean-pool tokens into logits; dense heads project
    every token. Heads add no positions of their own.
    """

    def __init__(self, rng, spec: TaskSpec, d_red: int, layers: int, heads: int):
        self.spec = spec
        self.stack = TransformerStack(rng, d_red, layers, heads)
        out_dim = spec.classes if spec.kind == "classification" else spec.out_width
        self.out = Linear(rng, d_red, out_dim)

    def __call__(self, feats: Tensor, rng=None, rate: float = 0.0) -> Tensor:
        h = self.stack(feats, rng, rate)
        if self.spec.kind == "classification":
            return self.out(h.mean(axis=1))
        return self.out(h)

    def named_params(self, prefix: str):
        return self.stack.named_params(f"{prefix}.stack") + self.out.named_params(f"{prefix}.out")


class ModelBundle:
    """Everything stage training touches, with stable parameter names."""

    def __init__(self, tokenizers: dict, f: FeatureTransform, a_mid: CrossAttention,
                 a_out: CrossAttention, g: TransformerStack, heads: dict,
                 decoders1: dict, decoders2: dict, dims):
        self.tokenizers = tokenizers
        self.f = f
        self.a_mid = a_mid
        self.a_out = a_out
        self.g = g
        self.heads = heads
        self.decoders1 = decoders1
        self.decoders2 = decoders2
        self.dims = dims

    def named_parameters(self, include_decoders: bool = True):
        out = []
        for name in sorted(self.tokenizers):
            out += self.tokenizers[name].named_params(f"tok.{name}")
        out += self.f.named_params("f")
        out += self.a_mid.named_params("amid")
        out += self.a_out.named_params("aout")
        out += self.g.named_params("g")
        for key in sorted(self.heads):
            out += self.heads[key].named_params(f"head.{key}")
        if include_decoders:
            for name in sorted(self.decoders1):
                out += self.decoders1[name].named_params(f"dec1.{name}")
            for name in sorted(self.decoders2):
                out += self.decoders2[name].named_params(f"dec2.{name}")
        return out

    def trunk_params(self):
        return (self.f.named_params("f") + self.a_mid.named_params("amid")
                + self.a_out.named_params("aout") + self.g.named_params("g"))

    def zero_grads(self) -> None:
        for _, p in self.named_parameters():
            p.grad = None

    def checksum(self, include_decoders: bool = False) -> str:
        """Digest over persistent parameters; proves freezing."""
        h = hashlib.sha256()
        for name, p in self.named_parameters(include_decoders=include_decoders):
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
        return h.hexdigest()


# -- construction -------------------------------------------------------------

def make_tokenizer(name: str, spec: dict, d_tok: int, rng):
    fam = spec["family"]
    if fam == "grid":
        return GridTokenizer(name, d_tok, spec["height"], spec["width"],
                             spec["channels"], spec["patch"], rng)
    if fam == "sequence":
        return SequenceTokenizer(name, d_tok, spec["length"], rng,
                                 kind=spec.get("kind", "symbol"),
                                 vocab=spec.get("vocab", 0),
                                 window=spec.get("window", 0))
    if fam == "set":
        return SetTokenizer(name, d_tok, spec["points"], spec["groups"],
                            spec["group_size"], rng,
                            extra_features=spec.get("extra_features", 0))
    if fam == "table":
        return TableTokenizer(name, d_tok, spec["num_fields"], rng,
                              cat_cards=tuple(spec.get("cat_cards", ())))
    raise ConfigError(f"modalities.{name}.family: unknown family {fam!r}")


def build_registry(cfg) -> dict[str, list[TaskSpec]]:
    """Task-bearing modalities only, tasks sorted by name within each."""
    registry = {}
    for name in sorted(cfg.modalities):
        specs = [TaskSpec(name, t["name"], t["kind"],
                          t.get("classes", 0), t.get("out_width", 0))
                 for t in cfg.modalities[name].get("tasks", [])]
        if specs:
            registry[name] = sorted(specs, key=lambda s: s.task)
    return registry


def build_bundle(cfg) -> ModelBundle:
    """Construct every component from one init stream, in a fixed order.

    The order below is part of the persistence contract: rebuilding with
    the same config and seed reproduces the same initial parameters, so
    checkpoints only need to store trained values.
    """
    from .pretrain import Decoder  # decoders are built of this module's stacks

    rng = rng_from(cfg.seed, "init")
    dims = cfg.dims
    tokenizers = {name: make_tokenizer(name, cfg.modalities[name], dims.d_tok, rng)
                  for name in sorted(cfg.modalities)}
    f = FeatureTransform(rng, dims.d_tok, dims.d_red, dims.layers, dims.heads)
    a_mid = CrossAttention(rng, dims.d_red, dims.d_red, dims.heads)
    a_out = CrossAttention(rng, dims.d_red, dims.d_tok, dims.heads)
    g = TransformerStack(rng, dims.d_red, dims.layers, dims.heads)
    registry = build_registry(cfg)
    heads = {spec.key: Head(rng, spec, dims.d_red, dims.head_layers, dims.heads)
             for mod in sorted(registry) for spec in registry[mod]}
    decoders1 = {name: Decoder(rng, dims.d_tok, tokenizers[name].target_width,
                               dims.d_tok, dims.dec_layers, dims.heads)
                 for name in sorted(tokenizers)}
    decoders2 = {name: Decoder(rng, dims.d_red, tokenizers[name].target_width,
                               dims.d_tok, dims.dec_layers, dims.heads)
                 for name in sorted(tokenizers)}
    return ModelBundle(tokenizers, f, a_mid, a_out, g, heads,
                       decoders1, decoders2, dims)


# -- functional forward paths -------------------------------------------------

def _as_batch(x: TokenBatch | TokenSequence) -> TokenBatch:
    if isinstance(x, TokenBatch):
        return x
    n, d = x.tokens.shape
    return TokenBatch(reshape(x.tokens, (1, n, d)), reshape(x.positions, (1, n, d)),
                      x.modality, None if x.targets is None else x.targets[None])


def f_transform(x: TokenBatch | TokenSequence, bundle: ModelBundle) -> Tensor:
    """Per-token backbone features u = f(tokens + positions)."""
    batch = _as_batch(x)
    u = bundle.f(add(batch.tokens, batch.positions))
    if isinstance(x, TokenSequence):
        n = batch.tokens.shape[1]
        return reshape(u, (n, bundle.f.d_red))
    return u


def cross_attend(query: Tensor, kv: Tensor, params: CrossAttention,
                 return_weights: bool = False):
    """Functional entry for a cross-attention module; accepts 2-d or 3-d."""
    squeeze = query.ndim == 2
    if squeeze:
        query = reshape(query, (1,) + query.shape)
        kv = reshape(kv, (1,) + kv.shape)
    out = params(query, kv, return_weights=return_weights)
    if return_weights:
        out, w = out
    if squeeze:
        out = reshape(out, out.shape[1:])
    return (out, w) if return_weights else out


def pair_features(batch_i: TokenBatch, batch_j: TokenBatch, bundle: ModelBundle,
                  rng=None, rate: float = 0.0):
    """Two-stream trunk: f both streams, mid fusion, g, split, out fusion.

    Returns (head_in_i, head_in_j, xhat_i, xhat_j); head inputs attend the
    backbone tokens over each stream's raw tokens.
    """
    u_i = bundle.f(add(batch_i.tokens, batch_i.positions), rng, rate)
    u_j = bundle.f(add(batch_j.tokens, batch_j.positions), rng, rate)
    fused = concat([bundle.a_mid(u_i, u_j), bundle.a_mid(u_j, u_i)], axis=1)
    xhat = bundle.g(fused, rng, rate)
    n_i = batch_i.tokens.shape[1]
    n_j = batch_j.tokens.shape[1]
    xhat_i = narrow(xhat, 1, 0, n_i)
    xhat_j = narrow(xhat, 1, n_i, n_j)
    head_in_i = bundle.a_out(xhat_i, batch_i.tokens)
    head_in_j = bundle.a_out(xhat_j, batch_j.tokens)
    return head_in_i, head_in_j, xhat_i, xhat_j


def head_forward(head: Head, feats: Tensor) -> Tensor:
    return head(feats)


def forward_pair(batch_i: TokenBatch, batch_j: TokenBatch, q: TaskSpec, r: TaskSpec,
                 bundle: ModelBundle, rng=None, rate: float = 0.0):
    """Paired training forward: predictions for task q on stream i, r on j."""
    if batch_i.modality != q.modality or batch_j.modality != r.modality:
        raise ShapeError(
            f"stream/task mismatch: {batch_i.modality}/{q.key} and "
            f"{batch_j.modality}/{r.key}")
    head_in_i, head_in_j, _, _ = pair_features(batch_i, batch_j, bundle, rng, rate)
    return bundle.heads[q.key](head_in_i), bundle.heads[r.key](head_in_j)


def forward_inference(x: TokenBatch | TokenSequence, t: TaskSpec,
                      bundle: ModelBundle) -> Tensor:
    """Single-stream path with the fusion modules removed: head(g(f(x)))."""
    batch = _as_batch(x)
    feats = bundle.g(f_transform(batch, bundle))
    pred = bundle.heads[t.key](feats)
    if isinstance(x, TokenSequence):
        return reshape(pred, pred.shape[1:])
    return pred
