"""Supervised multitask training over modality pairs, plus eval/adapt.

Every step samples an unordered modality pair and one task per side,
builds a half/half batch, and minimizes w_q*loss_q + w_r*loss_r through
the shared pair trunk. The weights come from each task's convergence
rate: the ratio of its last two interval-mean losses, raised to gamma,
clipped, and renormalized so the active pair always sums to 2. gamma=0
reduces the whole thing to the plain unweighted sum.

Stage3Trainer owns the step counter, per-task draw cursors, the balancer,
and the optimizers, and can serialize all of it into checkpoint records;
restoring them replays the exact step sequence (draws derive from
(seed, purpose, counter) streams, never from shared global state).
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations

import numpy as np

from .data import Dataset, SampleCursor
from .errors import ConfigError, DataError, NumericError
from .model import Linear, TaskSpec, build_registry, forward_pair
from .optim import make_optimizer
from .pretrain import tokenize_any
from .tensor import add, cross_entropy, l2_loss, mul, relu, tensor
from .tokenizers import TokenBatch
from .util import rng_from, round_half_up


# -- pair and batch sampling ---------------------------------------------------

def sample_pair(rng, registry: dict) -> tuple[TaskSpec, TaskSpec]:
    """Uniform unordered modality pair, then a uniform task per side."""
    mods = sorted(registry)
    if len(mods) < 2:
        raise ConfigError("pair sampling needs at least 2 modalities with tasks")
    pairs = list(combinations(mods, 2))
    mod_i, mod_j = pairs[int(rng.integers(len(pairs)))]
    q = registry[mod_i][int(rng.integers(len(registry[mod_i])))]
    r = registry[mod_j][int(rng.integers(len(registry[mod_j])))]
    return q, r


@dataclass
class PairBatch:
    batch_i: TokenBatch
    labels_i: np.ndarray
    q: TaskSpec
    batch_j: TokenBatch
    labels_j: np.ndarray
    r: TaskSpec


def compose_batch(q: TaskSpec, r: TaskSpec, datasets: dict, batch_size: int,
                  cursors: dict, subsets: dict, tokenizers: dict) -> PairBatch:
    """Half/half batch: B/2 labeled samples per task, cursor-drawn."""
    if batch_size < 2 or batch_size % 2:
        raise ConfigError(f"stage3.batch_size: need an even size >= 2, got {batch_size}")
    if q.modality == r.modality:
        raise DataError(f"pair batch needs two modalities, got {q.modality} twice")
    half = batch_size // 2

    def side(spec: TaskSpec):
        ds: Dataset = datasets[spec.modality]
        idx = subsets[spec.key][cursors[spec.key].draw(half)]
        batch = tokenize_any(tokenizers[spec.modality], ds.take(idx), ds.stats)
        return batch, ds.labels[spec.task][idx]

    batch_i, labels_i = side(q)
    batch_j, labels_j = side(r)
    return PairBatch(batch_i, labels_i, q, batch_j, labels_j, r)


def task_loss(pred, labels: np.ndarray, spec: TaskSpec):
    if spec.kind == "classification":
        return cross_entropy(pred, labels)
    return l2_loss(pred, tensor(labels[..., None]))


# -- convergence-rate balancing -------------------------------------------------

class BalancerState:
    """Per-task loss history and the weighting knobs.

    Interval means are accumulated in float32 so the whole state
    round-trips through float32 checkpoint records without drift.
    """

    def __init__(self, keys, gamma: float = 1.0, floor: float = 0.2,
                 cap: float = 5.0, interval: int = 50):
        if not 0.0 < floor <= 1.0 <= cap:
            raise ConfigError(f"balancer bounds need 0 < floor <= 1 <= cap, "
                              f"got [{floor}, {cap}]")
        if cap < 2.0 - floor:
            raise ConfigError(f"balancer cap {cap} cannot hold the partner of a "
                              f"floor-clamped weight ({2.0 - floor})")
        if interval < 1:
            raise ConfigError(f"balancer.interval: need >= 1, got {interval}")
        self.gamma = float(gamma)
        self.floor = float(floor)
        self.cap = float(cap)
        self.interval = int(interval)
        self.hist: dict[str, list] = {k: [] for k in keys}
        self.sums: dict[str, np.float32] = {k: np.float32(0.0) for k in keys}
        self.counts: dict[str, int] = {k: 0 for k in keys}

    def record(self, key: str, value: float) -> None:
        self.sums[key] = np.float32(self.sums[key] + value)
        self.counts[key] += 1

    def roll(self) -> None:
        """Fold the running interval means into the 2-deep history."""
        for key in self.hist:
            if self.counts[key]:
                mean = np.float32(self.sums[key] / np.float32(self.counts[key]))
                self.hist[key] = (self.hist[key] + [mean])[-2:]
                self.sums[key] = np.float32(0.0)
                self.counts[key] = 0

    def ratio(self, key: str) -> float:
        h = self.hist[key]
        if len(h) < 2:
            return 1.0
        last, prev = float(h[-1]), float(h[-2])
        if last <= 0.0 or prev <= 0.0:
            raise NumericError(f"balancer history for {key!r} is corrupt: "
                               f"non-positive loss mean {min(last, prev)}")
        return last / prev

    # -- persistence -----------------------------------------------------
    def state_records(self):
        recs = []
        for key in sorted(self.hist):
            recs.append((f"state.bal.hist.{key}",
                         np.asarray(self.hist[key], dtype=np.float32)))
            recs.append((f"state.bal.sum.{key}",
                         np.asarray([self.sums[key], float(self.counts[key])],
                                    dtype=np.float32)))
        return recs

    def load_state(self, records: dict) -> None:
        for key in self.hist:
            hist = records.get(f"state.bal.hist.{key}")
            if hist is not None:
                self.hist[key] = [np.float32(v) for v in hist.reshape(-1)]
            acc = records.get(f"state.bal.sum.{key}")
            if acc is not None:
                flat = acc.reshape(-1)
                self.sums[key] = np.float32(flat[0])
                self.counts[key] = int(round(float(flat[1])))


def balance_weights(state: BalancerState, key_q: str, key_r: str):
    """Pair weights from convergence ratios; slower task gets more."""
    raw_q = min(max(state.ratio(key_q) ** state.gamma, state.floor), state.cap)
    raw_r = min(max(state.ratio(key_r) ** state.gamma, state.floor), state.cap)
    w_q = 2.0 * raw_q / (raw_q + raw_r)
    w_q = min(max(w_q, state.floor), 2.0 - state.floor)
    return w_q, 2.0 - w_q


# -- the training step -----------------------------------------------------------

def train_step(batch: PairBatch, bundle, balancer: BalancerState, opts):
    """One weighted pair update; returns (loss_q, loss_r, w_q, w_r)."""
    pred_q, pred_r = forward_pair(batch.batch_i, batch.batch_j, batch.q, batch.r,
                                  bundle)
    loss_q = task_loss(pred_q, batch.labels_i, batch.q)
    loss_r = task_loss(pred_r, batch.labels_j, batch.r)
    v_q, v_r = loss_q.item(), loss_r.item()
    if not (np.isfinite(v_q) and np.isfinite(v_r)):
        raise NumericError(
            f"stage 3 loss diverged: {batch.q.key}={v_q}, {batch.r.key}={v_r}")
    w_q, w_r = balance_weights(balancer, batch.q.key, batch.r.key)
    total = add(mul(loss_q, w_q), mul(loss_r, w_r))
    total.backward()
    for opt in opts:
        opt.step()
    bundle.zero_grads()
    balancer.record(batch.q.key, v_q)
    balancer.record(batch.r.key, v_r)
    return v_q, v_r, w_q, w_r


class Stage3Trainer:
    """Owner of the supervised loop: sampling state, balancer, optimizers."""

    def __init__(self, bundle, datasets: dict, cfg, label_fraction: float | None = None):
        self.bundle = bundle
        self.datasets = datasets
        self.seed = cfg.seed
        self.batch_size = cfg.stage3.batch_size
        self.registry = build_registry(cfg)
        if len(self.registry) < 2:
            raise ConfigError("stage 3 needs tasks on at least 2 modalities")
        self.tasks = {spec.key: spec
                      for mod in sorted(self.registry) for spec in self.registry[mod]}
        frac = cfg.stage3.label_fraction if label_fraction is None else label_fraction
        if not 0.0 < frac <= 1.0:
            raise ConfigError(f"stage3.label_fraction: need (0, 1], got {frac}")
        self.subsets = {}
        self.cursors = {}
        for key, spec in self.tasks.items():
            train_count = datasets[spec.modality].train_count
            if frac >= 1.0:
                sub = np.arange(train_count)
            else:
                keep = max(1, round_half_up(frac * train_count))
                sub = np.sort(rng_from(self.seed, "labels", key)
                              .permutation(train_count)[:keep])
            self.subsets[key] = sub
            self.cursors[key] = SampleCursor(f"s3.{key}", sub.size, self.seed)
        bal = cfg.balancer
        self.balancer = BalancerState(sorted(self.tasks), gamma=bal.gamma,
                                      floor=bal.floor, cap=bal.cap,
                                      interval=bal.interval)
        opt_cfg, lr = cfg.optimizer, cfg.stage3.lr
        self.opt_trunk = make_optimizer(bundle.trunk_params(), opt_cfg, lr)
        self.opt_tok = {m: make_optimizer(
            bundle.tokenizers[m].named_params(f"tok.{m}"), opt_cfg, lr)
            for m in sorted(self.registry)}
        self.opt_head = {k: make_optimizer(
            bundle.heads[k].named_params(f"head.{k}"), opt_cfg, lr)
            for k in sorted(self.tasks)}
        self.step = 0

    def _opts_for(self, q: TaskSpec, r: TaskSpec):
        return (self.opt_trunk, self.opt_tok[q.modality], self.opt_tok[r.modality],
                self.opt_head[q.key], self.opt_head[r.key])

    def run(self, total_steps: int, metrics=None):
        """Advance to total_steps (absolute), returning this call's rows."""
        history = []
        while self.step < total_steps:
            rng = rng_from(self.seed, "s3", self.step)
            q, r = sample_pair(rng, self.registry)
            batch = compose_batch(q, r, self.datasets, self.batch_size,
                                  self.cursors, self.subsets, self.bundle.tokenizers)
            v_q, v_r, w_q, w_r = train_step(batch, self.bundle, self.balancer,
                                            self._opts_for(q, r))
            row = {"stage": 3, "step": self.step, "mod_i": q.modality,
                   "task_q": q.key, "mod_j": r.modality, "task_r": r.key,
                   "loss_q": v_q, "loss_r": v_r, "w_q": w_q, "w_r": w_r,
                   "total": w_q * v_q + w_r * v_r}
            if metrics is not None:
                metrics.write(row)
            history.append(row)
            self.step += 1
            if self.step % self.balancer.interval == 0:
                self.balancer.roll()
        return history

    # -- persistence -----------------------------------------------------
    def state_records(self):
        recs = [("state.step", np.asarray([float(self.step)], dtype=np.float32))]
        for key in sorted(self.cursors):
            recs.append((f"state.cursor.{self.cursors[key].key}",
                         self.cursors[key].state()))
        recs.extend(self.balancer.state_records())
        recs.extend(self.opt_trunk.state_records("opt.trunk"))
        for m in sorted(self.opt_tok):
            recs.extend(self.opt_tok[m].state_records(f"opt.tok.{m}"))
        for k in sorted(self.opt_head):
            recs.extend(self.opt_head[k].state_records(f"opt.head.{k}"))
        return recs

    def load_state(self, records: dict) -> None:
        step = records.get("state.step")
        if step is not None:
            self.step = int(round(float(step.reshape(-1)[0])))
        for key in self.cursors:
            arr = records.get(f"state.cursor.{self.cursors[key].key}")
            if arr is not None:
                self.cursors[key].load_state(arr)
        self.balancer.load_state(records)
        self.opt_trunk.load_state_records("opt.trunk", records)
        for m in self.opt_tok:
            self.opt_tok[m].load_state_records(f"opt.tok.{m}", records)
        for k in self.opt_head:
            self.opt_head[k].load_state_records(f"opt.head.{k}", records)


# -- evaluation ------------------------------------------------------------------

def evaluate(bundle, task: TaskSpec, dataset: Dataset, split: str = "test",
             batch_size: int = 64) -> dict:
    """Inference-path metrics: top-1 for classification, l2 (+mIoU) dense."""
    idx = dataset.split_indices(split)
    if idx.size == 0:
        raise DataError(f"empty {split} split for {task.key}")
    tok = bundle.tokenizers[task.modality]
    head = bundle.heads[task.key]
    correct = 0
    sq_err = 0.0
    n_tokens = 0
    inter = np.zeros(2, dtype=np.float64)
    union = np.zeros(2, dtype=np.float64)
    for start in range(0, idx.size, batch_size):
        chunk = idx[start:start + batch_size]
        batch = tokenize_any(tok, dataset.take(chunk), dataset.stats)
        feats = bundle.g(bundle.f(add(batch.tokens, batch.positions)))
        pred = head(feats).data
        labels = dataset.labels[task.task][chunk]
        if task.kind == "classification":
            correct += int((pred.argmax(axis=1) == labels).sum())
        else:
            target = labels[..., None]
            sq_err += float(((pred - target) ** 2).sum())
            n_tokens += target.size
            hard = pred[..., 0] >= 0.5
            truth = labels >= 0.5
            for c, (hp, tp) in enumerate(((~hard, ~truth), (hard, truth))):
                inter[c] += float((hp & tp).sum())
                union[c] += float((hp | tp).sum())
    if task.kind == "classification":
        return {"task": task.key, "metric": "top1",
                "value": correct / idx.size, "n": int(idx.size)}
    iou = np.where(union > 0, inter / np.maximum(union, 1.0), 1.0)
    return {"task": task.key, "metric": "l2", "value": sq_err / n_tokens,
            "n": int(idx.size), "miou": float(iou.mean())}


def evaluate_all(bundle, registry: dict, datasets: dict, split: str = "test"):
    return [evaluate(bundle, spec, datasets[spec.modality], split)
            for mod in sorted(registry) for spec in registry[mod]]


# -- frozen-embedding adaptation ---------------------------------------------------

class Adapter:
    """Two fully connected layers over frozen mean-pooled embeddings."""

    def __init__(self, rng, d_in: int, hidden: int, classes: int):
        self.fc1 = Linear(rng, d_in, hidden)
        self.fc2 = Linear(rng, hidden, classes)

    def __call__(self, x):
        return self.fc2(relu(self.fc1(x)))

    def named_params(self, prefix: str = "adapter"):
        return self.fc1.named_params(f"{prefix}.fc1") + \
            self.fc2.named_params(f"{prefix}.fc2")


def _embed(bundle, tok, dataset: Dataset, idx: np.ndarray,
           batch_size: int = 64) -> np.ndarray:
    out = []
    for start in range(0, idx.size, batch_size):
        chunk = idx[start:start + batch_size]
        batch = tokenize_any(tok, dataset.take(chunk), dataset.stats)
        feats = bundle.g(bundle.f(add(batch.tokens, batch.positions)))
        out.append(feats.mean(axis=1).data)
    return np.concatenate(out, axis=0)


def adapt_unseen(bundle, dataset: Dataset, task: TaskSpec, fraction: float = 0.10,
                 *, seed: int, optimizer_cfg, steps: int = 300, lr: float = 1e-2,
                 hidden: int = 32, batch_size: int = 16):
    """Train only a 2-layer adapter on frozen embeddings of a new dataset."""
    if not 0.0 < fraction <= 1.0:
        raise ConfigError(f"adapt.fraction: need (0, 1], got {fraction}")
    tok = bundle.tokenizers.get(task.modality)
    if tok is None:
        raise ConfigError(
            f"modalities.{task.modality}: no tokenizer for adaptation dataset")
    keep = max(1, round_half_up(fraction * dataset.train_count))
    pick = np.sort(rng_from(seed, "adapt", task.key)
                   .permutation(dataset.train_count)[:keep])
    emb_train = _embed(bundle, tok, dataset, pick)
    lab_train = dataset.labels[task.task][pick]
    test_idx = dataset.split_indices("test")
    emb_test = _embed(bundle, tok, dataset, test_idx)
    lab_test = dataset.labels[task.task][test_idx]

    adapter = Adapter(rng_from(seed, "adapt", "init"), emb_train.shape[1],
                      hidden, task.classes)
    opt = make_optimizer(adapter.named_params(), optimizer_cfg, lr)
    done = 0
    epoch = 0
    while done < steps:
        order = rng_from(seed, "adapt", "order", epoch).permutation(keep)
        for start in range(0, keep, batch_size):
            if done == steps:
                break
            sel = order[start:start + batch_size]
            loss = cross_entropy(adapter(tensor(emb_train[sel])), lab_train[sel])
            if not np.isfinite(loss.item()):
                raise NumericError(f"adapter loss diverged at step {done}")
            loss.backward()
            opt.step()
            done += 1
        epoch += 1

    def accuracy(emb, lab):
        pred = adapter(tensor(emb)).data.argmax(axis=1)
        return float((pred == lab).mean())

    report = {"task": task.key, "metric": "top1",
              "value": accuracy(emb_train, lab_train),
              "test_value": accuracy(emb_test, lab_test),
              "n": int(keep), "fraction": float(fraction)}
    return adapter, report
