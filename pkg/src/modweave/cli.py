"""Command line entry points.

Subcommands mirror the pipeline: pretrain1 -> pretrain2 -> train ->
eval / adapt, plus gradcheck (finite-difference audit of all three
stage losses on a tiny model) and defaults (print the default config).

Exit codes: 0 ok, 1 config or data problem, 2 numeric failure,
3 checkpoint problem.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from .checkpoint import (bundle_records, check_config_compatible, read_checkpoint,
                         restore_bundle, write_checkpoint)
from .config import RunConfig, default_config, from_dict, mini_config, validate
from .data import build_datasets
from .errors import CheckpointError, ConfigError, DataError, NumericError
from .gradcheck import check_gradients
from .metrics import MetricsWriter
from .model import TaskSpec, build_bundle, build_registry, forward_pair
from .pretrain import (mask_family, plan_mask, slot_content, stage1_loop,
                       stage1_loss, stage2_loop, stage2_loss, tokenize_any)
from .tensor import add, default_dtype, set_default_dtype
from .trainer import Stage3Trainer, adapt_unseen, evaluate_all, task_loss
from .util import rng_from


def _load_config(args) -> RunConfig:
    if getattr(args, "config", None):
        try:
            with open(args.config, "r", encoding="utf-8") as fh:
                data = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"--config {args.config}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"--config {args.config}: invalid JSON: {exc}") from exc
        cfg = from_dict(data)
    else:
        cfg = default_config()
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    return validate(cfg)


def _metrics_path(args, cfg: RunConfig):
    return args.metrics if args.metrics is not None else cfg.paths.metrics


def _out_path(args, cfg: RunConfig):
    return args.out if args.out is not None else cfg.paths.checkpoint


# -- gradient audit ---------------------------------------------------------------

def stage_checks(cfg: RunConfig, bundle, datasets):
    """(name, loss_fn, named_params) triples covering the three stage losses.

    Parameter groups are exactly what each stage trains. Stage 1 and 2
    batches are tokenized once outside the closure (tokenizers are frozen
    there); the stage 3 closure re-tokenizes so tokenizer gradients flow.
    """
    registry = build_registry(cfg)
    mods = sorted(registry)
    ratios, pfrac = cfg.masking.ratios, cfg.masking.predict_fraction
    checks = []

    def plans_for(batch, tok, rng):
        fam = mask_family(tok)
        return [plan_mask(batch.count, ratios[tok.family], fam, rng, pfrac)
                for _ in range(batch.tokens.shape[0])], fam

    def fixed_batch(mod):
        ds = datasets[mod]
        idx = ds.split_indices("train")[:min(2, ds.train_count)]
        return ds, tokenize_any(bundle.tokenizers[mod], ds.take(idx), ds.stats)

    for mod in mods:
        _, batch = fixed_batch(mod)
        tok = bundle.tokenizers[mod]
        rng = rng_from(cfg.seed, "gradcheck", "s1", mod)
        plans, fam = plans_for(batch, tok, rng)
        corruption = None
        if fam == "sequence" and plans[0].predict is not None:
            corruption = slot_content(plans, batch.targets, tok.vocab, rng)
        dec = bundle.decoders1[mod]

        def loss1(batch=batch, plans=plans, dec=dec, tok=tok, corr=corruption):
            return stage1_loss(batch, plans, bundle, dec, tok, corr)

        params = bundle.f.encoder_params("f") + dec.named_params(f"dec1.{mod}")
        checks.append((f"stage1/{mod}", loss1, params))

    if len(mods) >= 2:
        mod_i, mod_j = mods[0], mods[1]
        _, batch_i = fixed_batch(mod_i)
        _, batch_j = fixed_batch(mod_j)
        rng = rng_from(cfg.seed, "gradcheck", "s2")
        plans_i, _ = plans_for(batch_i, bundle.tokenizers[mod_i], rng)
        plans_j, _ = plans_for(batch_j, bundle.tokenizers[mod_j], rng)

        def loss2(bi=batch_i, bj=batch_j, pi=plans_i, pj=plans_j):
            total, _, _ = stage2_loss(bi, bj, pi, pj, bundle)
            return total

        params = (bundle.trunk_params()
                  + bundle.decoders2[mod_i].named_params(f"dec2.{mod_i}")
                  + bundle.decoders2[mod_j].named_params(f"dec2.{mod_j}"))
        checks.append((f"stage2/{mod_i}+{mod_j}", loss2, params))

        q = next((t for t in registry[mod_i] if t.kind == "dense"),
                 registry[mod_i][0])
        r = registry[mod_j][0]
        ds_q, ds_r = datasets[q.modality], datasets[r.modality]
        idx_q = ds_q.split_indices("train")[:2]
        idx_r = ds_r.split_indices("train")[:2]
        samples_q, samples_r = ds_q.take(idx_q), ds_r.take(idx_r)
        labels_q = ds_q.labels[q.task][idx_q]
        labels_r = ds_r.labels[r.task][idx_r]
        tok_q, tok_r = bundle.tokenizers[q.modality], bundle.tokenizers[r.modality]

        def loss3():
            bq = tokenize_any(tok_q, samples_q, ds_q.stats)
            br = tokenize_any(tok_r, samples_r, ds_r.stats)
            pred_q, pred_r = forward_pair(bq, br, q, r, bundle)
            return add(task_loss(pred_q, labels_q, q),
                       task_loss(pred_r, labels_r, r))

        params = (tok_q.named_params(f"tok.{q.modality}")
                  + tok_r.named_params(f"tok.{r.modality}")
                  + bundle.trunk_params()
                  + bundle.heads[q.key].named_params(f"head.{q.key}")
                  + bundle.heads[r.key].named_params(f"head.{r.key}"))
        checks.append((f"stage3/{q.key}+{r.key}", loss3, params))
    return checks


def run_gradcheck(cfg: RunConfig, max_coords: int = 48, h: float = 1e-6):
    """Audit every stage loss in float64. Returns ({name: reports}, worst)."""
    prev = default_dtype()
    set_default_dtype(np.float64)
    try:
        bundle = build_bundle(cfg)
        datasets = build_datasets(cfg)
        results = {}
        worst = 0.0
        for name, loss_fn, params in stage_checks(cfg, bundle, datasets):
            reports = check_gradients(loss_fn, params, h=h, max_coords=max_coords)
            results[name] = reports
            worst = max(worst, max(r.max_rel_err for r in reports))
            bundle.zero_grads()
        return results, worst
    finally:
        set_default_dtype(prev)


# -- subcommands ----------------------------------------------------------------

def cmd_pretrain1(args) -> int:
    cfg = _load_config(args)
    bundle = build_bundle(cfg)
    datasets = build_datasets(cfg)
    mods = sorted(build_registry(cfg))
    with MetricsWriter(_metrics_path(args, cfg)) as mw:
        history = stage1_loop(
            bundle, datasets, mods, epochs=cfg.stage1.epochs,
            batch_size=cfg.stage1.batch_size, ratios=cfg.masking.ratios,
            predict_fraction=cfg.masking.predict_fraction, seed=cfg.seed,
            optimizer_cfg=cfg.optimizer, lr=cfg.stage1.lr, metrics=mw)
    out = _out_path(args, cfg)
    write_checkpoint(out, 1, cfg.to_dict(), bundle_records(bundle))
    last = history[-1]["loss"] if history else float("nan")
    print(f"stage 1 done: {len(history)} steps, last loss {last:.4f}, wrote {out}")
    return 0


def cmd_pretrain2(args) -> int:
    cfg = _load_config(args)
    stage, saved_cfg, records = read_checkpoint(args.checkpoint)
    if stage != 1:
        raise CheckpointError(
            f"pairwise pretraining resumes a stage-1 checkpoint, got stage {stage}")
    check_config_compatible(saved_cfg, cfg.to_dict())
    bundle = build_bundle(cfg)
    restore_bundle(bundle, records)
    datasets = build_datasets(cfg)
    mods = sorted(build_registry(cfg))
    with MetricsWriter(_metrics_path(args, cfg)) as mw:
        history = stage2_loop(
            bundle, datasets, mods, steps=cfg.stage2.steps,
            batch_size=cfg.stage2.batch_size, ratios=cfg.masking.ratios,
            predict_fraction=cfg.masking.predict_fraction, seed=cfg.seed,
            optimizer_cfg=cfg.optimizer, lr=cfg.stage2.lr, metrics=mw)
    out = _out_path(args, cfg)
    write_checkpoint(out, 2, cfg.to_dict(), bundle_records(bundle))
    last = history[-1]["loss"] if history else float("nan")
    print(f"stage 2 done: {len(history)} steps, last loss {last:.4f}, wrote {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args)
    bundle = build_bundle(cfg)
    datasets = build_datasets(cfg)
    trainer = Stage3Trainer(bundle, datasets, cfg)
    if not args.cold_start:
        if not args.checkpoint:
            raise ConfigError("train needs --checkpoint (or --cold-start)")
        # stage-1 input is legitimate: it is the pretraining-ablation arm
        # that skips pairwise pretraining entirely
        stage, saved_cfg, records = read_checkpoint(args.checkpoint)
        check_config_compatible(saved_cfg, cfg.to_dict())
        restore_bundle(bundle, records)
        if stage == 3:
            trainer.load_state(records)
    with MetricsWriter(_metrics_path(args, cfg)) as mw:
        trainer.run(cfg.stage3.steps, metrics=mw)
    out = _out_path(args, cfg)
    write_checkpoint(out, 3, cfg.to_dict(),
                     bundle_records(bundle) + trainer.state_records())
    report = {"step": trainer.step, "checkpoint": out,
              "tasks": evaluate_all(bundle, trainer.registry, datasets)}
    print(json.dumps(report, sort_keys=True))
    return 0


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    _, saved_cfg, records = read_checkpoint(args.checkpoint)
    check_config_compatible(saved_cfg, cfg.to_dict())
    bundle = build_bundle(cfg)
    restore_bundle(bundle, records)
    datasets = build_datasets(cfg)
    report = evaluate_all(bundle, build_registry(cfg), datasets, split=args.split)
    print(json.dumps({"split": args.split, "tasks": report}, sort_keys=True))
    return 0


def cmd_adapt(args) -> int:
    cfg = _load_config(args)
    _, saved_cfg, records = read_checkpoint(args.checkpoint)
    check_config_compatible(saved_cfg, cfg.to_dict())
    bundle = build_bundle(cfg)
    restore_bundle(bundle, records)
    if args.modality:
        name = args.modality
        if name not in cfg.modalities:
            raise ConfigError(f"--modality {name}: not in the config")
    else:
        spare = [m for m in sorted(cfg.modalities)
                 if not cfg.modalities[m].get("tasks")]
        if len(spare) != 1:
            raise ConfigError("pass --modality; config has no single task-free "
                              "modality to adapt on")
        name = spare[0]
    dataset = build_datasets(cfg)[name]
    task = TaskSpec(name, "cls", "classification",
                    classes=cfg.modalities[name]["classes"])
    before = bundle.checksum()
    _, report = adapt_unseen(
        bundle, dataset, task, cfg.adapt.fraction, seed=cfg.seed,
        optimizer_cfg=cfg.optimizer, steps=cfg.adapt.steps, lr=cfg.adapt.lr,
        hidden=cfg.adapt.hidden, batch_size=cfg.adapt.batch_size)
    report["checksum_before"] = before
    report["checksum_after"] = bundle.checksum()
    print(json.dumps(report, sort_keys=True))
    return 0


def cmd_gradcheck(args) -> int:
    if getattr(args, "config", None):
        cfg = _load_config(args)
    else:
        cfg = mini_config()
        if args.seed is not None:
            cfg.seed = args.seed
        validate(cfg)
    results, worst = run_gradcheck(cfg, max_coords=args.max_coords, h=args.h)
    for name, reports in results.items():
        peak = max(reports, key=lambda r: r.max_rel_err)
        coords = sum(r.checked for r in reports)
        print(f"{name}: {len(reports)} groups, {coords} coords, "
              f"max rel err {peak.max_rel_err:.3e} ({peak.name})")
        for r in reports:
            if r.max_rel_err > args.tol:
                print(f"  FAIL {r.name}: {r.max_rel_err:.3e}")
    if worst > args.tol:
        raise NumericError(
            f"gradient check failed: worst relative error {worst:.3e} "
            f"exceeds {args.tol:g}")
    print(f"gradcheck: worst relative error {worst:.3e} within {args.tol:g}")
    return 0


def cmd_defaults(args) -> int:
    print(json.dumps(default_config().to_dict(), indent=2, sort_keys=True))
    return 0


# -- parser ---------------------------------------------------------------------

def _common(sub, checkpoint=False, out=False):
    sub.add_argument("--config", help="JSON config merged over the defaults")
    sub.add_argument("--seed", type=int, default=None, help="override config seed")
    sub.add_argument("--f64", action="store_true",
                     help="run in float64 instead of float32")
    if checkpoint:
        sub.add_argument("--checkpoint", required=checkpoint == "required",
                         help="checkpoint file to start from")
    if out:
        sub.add_argument("--out", default=None, help="checkpoint file to write")
        sub.add_argument("--metrics", default=None,
                         help="JSONL metrics path ('' disables)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="modweave",
        description="multimodal multitask transformer on a numpy autodiff core")
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("pretrain1", help="unimodal masked pretraining")
    _common(p, out=True)
    p.set_defaults(func=cmd_pretrain1)

    p = subs.add_parser("pretrain2", help="pairwise masked pretraining")
    _common(p, checkpoint="required", out=True)
    p.set_defaults(func=cmd_pretrain2)

    p = subs.add_parser("train", help="supervised multitask training")
    _common(p, checkpoint=True, out=True)
    p.add_argument("--cold-start", action="store_true",
                   help="train from fresh weights, no checkpoint")
    p.set_defaults(func=cmd_train)

    p = subs.add_parser("eval", help="evaluate every task from a checkpoint")
    _common(p, checkpoint="required")
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.set_defaults(func=cmd_eval)

    p = subs.add_parser("adapt", help="fit a small probe on frozen embeddings")
    _common(p, checkpoint="required")
    p.add_argument("--modality", default=None,
                   help="modality to adapt on (default: the task-free one)")
    p.set_defaults(func=cmd_adapt)

    p = subs.add_parser("gradcheck",
                        help="finite-difference audit of the stage losses")
    _common(p)
    p.add_argument("--max-coords", type=int, default=48,
                   help="coordinates sampled per parameter")
    p.add_argument("--h", type=float, default=1e-6, help="difference step")
    p.add_argument("--tol", type=float, default=1e-3,
                   help="relative error tolerance")
    p.set_defaults(func=cmd_gradcheck)

    p = subs.add_parser("defaults", help="print the default config as JSON")
    p.set_defaults(func=cmd_defaults)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "f64", False):
        set_default_dtype(np.float64)
    try:
        return args.func(args)
    except (ConfigError, DataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 2
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return 3
    finally:
        if getattr(args, "f64", False):
            set_default_dtype(np.float32)


if __name__ == "__main__":
    sys.exit(main())
