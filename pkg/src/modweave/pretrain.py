"""Masked pretraining: stage 1 (unimodal) and stage 2 (pairwise).

Both stages hide most tokens and reconstruct them. The encoder side only
ever sees visible tokens plus positions; a per-modality decoder gets the
encoded tokens scattered back among learnable mask tokens (plus projected
positions) and predicts the original patch vectors, or symbol ids scored
by cross-entropy. Stage 1 trains f's transformer alone; stage 2 masks two
modalities at once and runs the full pair trunk (f, mid fusion, g, out
fusion) into per-modality decoders. Decoders are throwaway: built with
the bundle, excluded from checkpoints.

Symbol sequences compose two ideas: the mask set is removed from the
encoder exactly like patches, and a prediction subset of it (fraction f
of the sequence) gets the 8:1:1 mask/random/keep treatment deciding what
the decoder sees in those slots; cross-entropy is scored on the
prediction subset only.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations

import numpy as np

from .data import SampleCursor, iterate
from .errors import ConfigError, DataError, NumericError
from .model import Linear, TransformerStack
from .optim import make_optimizer
from .tensor import (add, concat, cross_entropy, embedding, gather_rows,
                     l2_loss, mul, narrow, reshape, scatter_rows, tensor)
from .tokenizers import TokenBatch, table_stats
from .util import rng_from, round_half_up

MASK, RANDOM, KEEP = 0, 1, 2


@dataclass
class MaskPlan:
    """Which token indices are hidden, and how prediction slots are filled."""
    total: int
    masked: np.ndarray    # sorted, int64
    visible: np.ndarray   # sorted complement
    predict: np.ndarray | None = None  # symbol family: scored subset of masked
    labels: np.ndarray | None = None   # per predict entry: MASK/RANDOM/KEEP
    targets: np.ndarray | None = None  # optionally attached by the caller


def plan_mask(n: int, ratio: float, family: str, rng,
              predict_fraction: float = 0.0) -> MaskPlan:
    """Uniform mask of round(ratio*n) tokens, clamped to [1, n-1].

    For the sequence family a prediction subset of round(predict_fraction*n)
    tokens is drawn from the masked set and split 8:1:1 into mask/random/keep
    slot labels (rounded, remainder to mask).
    """
    if not 0.0 <= ratio < 1.0:
        raise DataError(f"mask ratio {ratio} outside [0, 1)")
    if n < 1:
        raise DataError(f"cannot mask an empty sequence (n={n})")
    if ratio == 0.0:
        return MaskPlan(n, np.empty(0, dtype=np.int64),
                        np.arange(n, dtype=np.int64))
    if n < 2:
        raise DataError("masking with ratio > 0 needs at least 2 tokens")
    m = min(max(round_half_up(ratio * n), 1), n - 1)
    perm = rng.permutation(n)
    masked = np.sort(perm[:m]).astype(np.int64)
    visible = np.sort(perm[m:]).astype(np.int64)
    predict = labels = None
    if family == "sequence" and predict_fraction > 0.0:
        p = min(max(round_half_up(predict_fraction * n), 1), m)
        predict = np.sort(masked[rng.permutation(m)[:p]])
        n_rand = round_half_up(0.1 * p)
        n_keep = round_half_up(0.1 * p)
        labels = np.full(p, MASK, dtype=np.int64)
        order = rng.permutation(p)
        labels[order[:n_rand]] = RANDOM
        labels[order[n_rand:n_rand + n_keep]] = KEEP
    return MaskPlan(n, masked, visible, predict, labels)


def mask_family(tokenizer) -> str:
    """Family tag for plan_mask; only symbol sequences get 8:1:1 slots."""
    if tokenizer.family == "sequence":
        return "sequence" if tokenizer.kind == "symbol" else "series"
    return tokenizer.family


def tokenize_any(tokenizer, samples, stats=None) -> TokenBatch:
    if tokenizer.family == "table":
        return tokenizer.tokenize_batch(samples, stats)
    return tokenizer.tokenize_batch(samples)


def slot_content(plans, ids: np.ndarray, vocab: int, rng):
    """Decoder slot plan over masked positions: (kind, symbol id) arrays.

    kind 0 keeps the mask token, 1 substitutes a random symbol's embedding,
    2 restores the original symbol's embedding. Random draws happen here,
    once per step, so a loss closure rebuilt from the result is pure.
    """
    b, m = len(plans), plans[0].masked.size
    kind = np.zeros((b, m), dtype=np.int64)
    content = np.zeros((b, m), dtype=np.int64)
    for s, plan in enumerate(plans):
        if plan.predict is None:
            continue
        slot_of = {int(v): k for k, v in enumerate(plan.masked)}
        for k, j in enumerate(plan.predict):
            lab = int(plan.labels[k])
            if lab == RANDOM:
                kind[s, slot_of[int(j)]] = RANDOM
                content[s, slot_of[int(j)]] = int(rng.integers(vocab))
            elif lab == KEEP:
                kind[s, slot_of[int(j)]] = KEEP
                content[s, slot_of[int(j)]] = int(ids[s, int(j)])
    return kind, content


class Decoder:
    """Reconstruction stack for one modality, discarded after its stage.

    Incoming features are scattered to their original slots among mask
    tokens, every slot receives a projection of the token's position
    encoding, and a light transformer plus a linear layer maps back to
    the reconstruction target width (or vocabulary size).
    """

    def __init__(self, rng, width: int, out_width: int, d_pos: int,
                 layers: int = 2, heads: int = 4):
        self.width = width
        self.out_width = out_width
        self.mask_token = tensor(rng.normal(0.0, 0.02, (width,)), requires_grad=True)
        self.pos = Linear(rng, d_pos, width)
        self.stack = TransformerStack(rng, width, layers, heads)
        self.out = Linear(rng, width, out_width)

    def named_params(self, prefix: str):
        return ([(f"{prefix}.mask", self.mask_token)]
                + self.pos.named_params(f"{prefix}.pos")
                + self.stack.named_params(f"{prefix}.stack")
                + self.out.named_params(f"{prefix}.out"))

    def reconstruct(self, feats, positions, vis_idx: np.ndarray,
                    mask_idx: np.ndarray, slots=None):
        """feats (B, n_vis, width) -> predictions (B, n, out_width)."""
        b, n = positions.shape[0], positions.shape[1]
        if slots is None:
            ones = tensor(np.ones((b, mask_idx.shape[1], 1)))
            slots = mul(ones, reshape(self.mask_token, (1, 1, self.width)))
        full = add(scatter_rows(feats, vis_idx, n), scatter_rows(slots, mask_idx, n))
        full = add(full, self.pos(positions))
        return self.out(self.stack(full))


def _reconstruction_loss(pred, batch: TokenBatch, plans, mask_idx: np.ndarray):
    """l2 on masked slots, or cross-entropy on prediction slots for symbols."""
    if mask_idx.shape[1] == 0:
        raise DataError("mask plan left nothing to reconstruct")
    if batch.targets.ndim == 2:  # symbol ids
        idx = np.stack([p.predict if p.predict is not None else p.masked
                        for p in plans])
        logits = reshape(gather_rows(pred, idx), (-1, pred.shape[-1]))
        labels = np.take_along_axis(batch.targets, idx, axis=1).reshape(-1)
        return cross_entropy(logits, labels)
    tgt = np.take_along_axis(batch.targets, mask_idx[:, :, None], axis=1)
    return l2_loss(gather_rows(pred, mask_idx), tensor(tgt))


# -- stage 1 ------------------------------------------------------------------

def stage1_loss(batch: TokenBatch, plans, bundle, decoder, tokenizer,
                corruption=None):
    """Visible tokens through f's transformer, decoder fills the rest."""
    vis_idx = np.stack([p.visible for p in plans])
    mask_idx = np.stack([p.masked for p in plans])
    enc = bundle.f.encode(gather_rows(add(batch.tokens, batch.positions), vis_idx))
    slots = None
    if corruption is not None:
        kind, content = corruption
        hidden = (kind == MASK).astype(np.float64)[:, :, None]
        token = reshape(decoder.mask_token, (1, 1, decoder.width))
        slots = add(mul(tensor(hidden), token),
                    mul(tensor(1.0 - hidden), embedding(tokenizer.table, content)))
    pred = decoder.reconstruct(enc, batch.positions, vis_idx, mask_idx, slots)
    return _reconstruction_loss(pred, batch, plans, mask_idx)


def stage1_step(samples, bundle, decoder, opts, *, modality: str, ratio: float,
                rng, predict_fraction: float = 0.05, stats=None) -> float:
    tok = bundle.tokenizers.get(modality)
    if tok is None:
        raise ConfigError(f"modalities.{modality}: no tokenizer registered")
    batch = tokenize_any(tok, samples, stats)
    fam = mask_family(tok)
    plans = [plan_mask(batch.count, ratio, fam, rng, predict_fraction)
             for _ in range(batch.tokens.shape[0])]
    corruption = None
    if fam == "sequence" and plans[0].predict is not None:
        corruption = slot_content(plans, batch.targets, tok.vocab, rng)
    loss = stage1_loss(batch, plans, bundle, decoder, tok, corruption)
    val = loss.item()
    if not np.isfinite(val):
        raise NumericError(f"stage 1 loss diverged on {modality}: {val}")
    loss.backward()
    for opt in opts:
        opt.step()
    bundle.zero_grads()
    return val


def stage1_loop(bundle, datasets, modalities, *, epochs: int, batch_size: int,
                ratios: dict, predict_fraction: float, seed: int,
                optimizer_cfg, lr: float, metrics=None):
    """Round-robin unimodal pretraining; trains f's transformer + decoders."""
    if not modalities:
        raise ConfigError("stage 1 needs at least one modality")
    enc_opt = make_optimizer(bundle.f.encoder_params("f"), optimizer_cfg, lr)
    dec_opts = {m: make_optimizer(bundle.decoders1[m].named_params(f"dec1.{m}"),
                                  optimizer_cfg, lr) for m in modalities}
    history = []
    step = 0
    for epoch in range(epochs):
        for mod in modalities:
            ds = datasets[mod]
            order_rng = rng_from(seed, "s1", mod, epoch)
            for idx in iterate(ds, "train", batch_size, order_rng):
                loss = stage1_step(
                    ds.take(idx), bundle, bundle.decoders1[mod],
                    (enc_opt, dec_opts[mod]), modality=mod,
                    ratio=ratios[bundle.tokenizers[mod].family],
                    rng=rng_from(seed, "s1", step),
                    predict_fraction=predict_fraction, stats=ds.stats)
                row = {"stage": 1, "step": step, "modality": mod, "loss": loss}
                if metrics is not None:
                    metrics.write(row)
                history.append(row)
                step += 1
    return history


# -- stage 2 ------------------------------------------------------------------

def stage2_loss(batch_i: TokenBatch, batch_j: TokenBatch, plans_i, plans_j,
                bundle):
    """Masked pair trunk into both decoders; unweighted sum of the losses."""
    vis_i = np.stack([p.visible for p in plans_i])
    vis_j = np.stack([p.visible for p in plans_j])
    mask_i = np.stack([p.masked for p in plans_i])
    mask_j = np.stack([p.masked for p in plans_j])
    u_i = bundle.f(gather_rows(add(batch_i.tokens, batch_i.positions), vis_i))
    u_j = bundle.f(gather_rows(add(batch_j.tokens, batch_j.positions), vis_j))
    fused = concat([bundle.a_mid(u_i, u_j), bundle.a_mid(u_j, u_i)], axis=1)
    xhat = bundle.g(fused)
    n_vi, n_vj = vis_i.shape[1], vis_j.shape[1]
    h_i = bundle.a_out(narrow(xhat, 1, 0, n_vi), gather_rows(batch_i.tokens, vis_i))
    h_j = bundle.a_out(narrow(xhat, 1, n_vi, n_vj), gather_rows(batch_j.tokens, vis_j))
    dec_i = bundle.decoders2[batch_i.modality]
    dec_j = bundle.decoders2[batch_j.modality]
    pred_i = dec_i.reconstruct(h_i, batch_i.positions, vis_i, mask_i)
    pred_j = dec_j.reconstruct(h_j, batch_j.positions, vis_j, mask_j)
    loss_i = _reconstruction_loss(pred_i, batch_i, plans_i, mask_i)
    loss_j = _reconstruction_loss(pred_j, batch_j, plans_j, mask_j)
    return add(loss_i, loss_j), loss_i.item(), loss_j.item()


def stage2_step(samples_i, samples_j, bundle, opts, *, mod_i: str, mod_j: str,
                ratios: dict, rng, predict_fraction: float = 0.05,
                stats_i=None, stats_j=None) -> float:
    if mod_i == mod_j:
        raise DataError(f"stage 2 pairs two distinct modalities, got {mod_i} twice")
    tok_i, tok_j = bundle.tokenizers[mod_i], bundle.tokenizers[mod_j]
    batch_i = tokenize_any(tok_i, samples_i, stats_i)
    batch_j = tokenize_any(tok_j, samples_j, stats_j)
    plans_i = [plan_mask(batch_i.count, ratios[tok_i.family], mask_family(tok_i),
                         rng, predict_fraction)
               for _ in range(batch_i.tokens.shape[0])]
    plans_j = [plan_mask(batch_j.count, ratios[tok_j.family], mask_family(tok_j),
                         rng, predict_fraction)
               for _ in range(batch_j.tokens.shape[0])]
    total, _, _ = stage2_loss(batch_i, batch_j, plans_i, plans_j, bundle)
    val = total.item()
    if not np.isfinite(val):
        raise NumericError(f"stage 2 loss diverged on {mod_i}+{mod_j}: {val}")
    total.backward()
    for opt in opts:
        opt.step()
    bundle.zero_grads()
    return val


def stage2_loop(bundle, datasets, modalities, *, steps: int, batch_size: int,
                ratios: dict, predict_fraction: float, seed: int,
                optimizer_cfg, lr: float, metrics=None):
    """Random unordered pairs, unpaired samples, full trunk + decoders."""
    if len(modalities) < 2:
        raise ConfigError("stage 2 needs at least 2 modalities")
    pairs = list(combinations(modalities, 2))
    trunk_opt = make_optimizer(bundle.trunk_params(), optimizer_cfg, lr)
    dec_opts = {m: make_optimizer(bundle.decoders2[m].named_params(f"dec2.{m}"),
                                  optimizer_cfg, lr) for m in modalities}
    cursors = {m: SampleCursor(f"s2.{m}", datasets[m].train_count, seed)
               for m in modalities}
    history = []
    for step in range(steps):
        rng = rng_from(seed, "s2", step)
        mod_i, mod_j = pairs[int(rng.integers(len(pairs)))]
        ds_i, ds_j = datasets[mod_i], datasets[mod_j]
        loss = stage2_step(
            ds_i.take(cursors[mod_i].draw(batch_size)),
            ds_j.take(cursors[mod_j].draw(batch_size)),
            bundle, (trunk_opt, dec_opts[mod_i], dec_opts[mod_j]),
            mod_i=mod_i, mod_j=mod_j, ratios=ratios, rng=rng,
            predict_fraction=predict_fraction,
            stats_i=ds_i.stats, stats_j=ds_j.stats)
        row = {"stage": 2, "step": step, "pair": f"{mod_i}+{mod_j}", "loss": loss}
        if metrics is not None:
            metrics.write(row)
        history.append(row)
    return history
