"""Command-line entry points: synth, train, eval, embed.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 non-finite loss.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import torch

from .config import ConfigError, RunConfig, load_config, write_snapshot
from .data import ImageLoadError, ManifestError, filter_pairable, item_refs, load_manifest
from .evalkit import evaluate, export_embeddings, load_fitb, load_outfits
from .netcore import CheckpointError, init_model, load_checkpoint, save_checkpoint
from .synth import generate_synthetic_dataset, write_synthetic_dataset
from .trainer import NonFiniteLossError, make_optimizers, train

log = logging.getLogger("streetcompat")

EXIT_CONFIG, EXIT_DATA, EXIT_RUNTIME = 2, 3, 4


def _setup_torch():
    torch.use_deterministic_algorithms(True)


def cmd_synth(cfg: RunConfig) -> Path:
    ds = generate_synthetic_dataset(cfg.synth, cfg.seed)
    out = write_synthetic_dataset(ds, cfg.paths.data_dir)
    write_snapshot(cfg, out)
    log.info("wrote %d source and %d catalog images to %s", len(ds.source),
             len(ds.target) + len(ds.target_valid) + len(ds.target_test), out)
    return out


def _eval_data(cfg: RunConfig, split: str):
    p = cfg.paths
    manifest = load_manifest(p.resolve(f"{split}_manifest"))
    outfits = load_outfits(p.resolve(f"{split}_outfits"))
    questions = load_fitb(p.resolve(f"{split}_fitb"))
    return item_refs(manifest), outfits, questions


def cmd_train(cfg: RunConfig, resume=None) -> Path:
    out = Path(cfg.paths.out_dir)
    source = load_manifest(cfg.paths.resolve("source_manifest"))
    target = load_manifest(cfg.paths.resolve("target_manifest"))
    if source.domain != "source" or target.domain != "target":
        raise ManifestError("source_manifest must be a source manifest and target_manifest a target one")
    pool = filter_pairable(source)

    evaluate_fn = None
    if cfg.paths.resolve("valid_manifest").is_file():
        items, outfits, questions = _eval_data(cfg, "valid")
        n = cfg.train.eval_n_patches

        def evaluate_fn(state):
            return evaluate(state, outfits, questions, n, cfg.seed, items)

    write_snapshot(cfg, out)
    if resume:
        state, opt_states, _ = load_checkpoint(resume)
        if state.config != cfg.model:
            raise ConfigError("model config differs from the checkpoint being resumed")
        optim = make_optimizers(state, cfg.train)
        optim.load(opt_states)
        log.info("resuming from %s at step %d", resume, state.step)
    else:
        state = init_model(cfg.model, cfg.seed)
        optim = make_optimizers(state, cfg.train)
        (out / "train_log.jsonl").write_text("")

    result = train(pool, list(target.entries), evaluate_fn, cfg.train, cfg.loss, state, optim,
                   log_path=out / "train_log.jsonl", checkpoint_dir=out / "checkpoints")
    rng_state = {"seed": cfg.seed, "step": result.last_state.step}
    save_checkpoint(out / "last.pt", result.last_state, optim.as_dict(), rng_state)
    save_checkpoint(out / "best.pt", result.state, optim.as_dict(),
                    {"seed": cfg.seed, "step": result.state.step})
    log.info("finished at step %d; best validation comp_auc %s", result.last_state.step, result.best_score)
    return out


def cmd_eval(cfg: RunConfig, checkpoint) -> dict:
    out = Path(cfg.paths.out_dir)
    state, _, _ = load_checkpoint(checkpoint)
    items, outfits, questions = _eval_data(cfg, cfg.eval.split)
    metrics = evaluate(state, outfits, questions, cfg.eval.n_patches, cfg.eval_seed, items)
    metrics.update(n_patches=cfg.eval.n_patches, seed=cfg.eval_seed, split=cfg.eval.split,
                   checkpoint_id=f"{Path(checkpoint).name}:step{state.step}:{state.fingerprint()}")
    write_snapshot(cfg, out)
    (out / "metrics.json").write_text(json.dumps(metrics, indent=1, sort_keys=True) + "\n")
    log.info("comp_auc %.4f  fitb_acc %.4f", metrics["comp_auc"], metrics["fitb_acc"])
    return metrics


def cmd_embed(cfg: RunConfig, checkpoint) -> Path:
    out = Path(cfg.paths.out_dir)
    state, _, _ = load_checkpoint(checkpoint)
    manifest = load_manifest(cfg.paths.resolve(f"{cfg.eval.split}_manifest"))
    items = item_refs(manifest)
    labels = None
    labels_path = cfg.paths.resolve("labels")
    if labels_path.is_file():
        style_of = json.loads(labels_path.read_text()).get("style_of", {})
        labels = {ref: style_of[ref.split("#")[0]] for ref in items if ref.split("#")[0] in style_of}
    metadata = {ref: {"image_id": img.image_id, "person_id": getattr(img, "person_id", None)}
                for ref, (img, _) in items.items()}
    write_snapshot(cfg, out)
    path = export_embeddings(state, items, list(items), cfg.eval.n_patches, out / "embeddings.jsonl",
                             seed=cfg.eval_seed, labels=labels, metadata=metadata)
    log.info("wrote %d embeddings to %s", len(items), path)
    return path


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="streetcompat", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", type=Path, help="JSON run configuration")
        p.add_argument("--seed", type=int, help="override the configured seed")
        p.add_argument("--out", help="output directory (data directory for synth)")
        p.add_argument("-v", "--verbose", action="store_true")
        return p

    common(sub.add_parser("synth", help="write a synthetic dataset"))
    p = common(sub.add_parser("train", help="train a model"))
    p.add_argument("--resume", type=Path, metavar="CKPT")
    p.add_argument("--max-steps", type=int, help="override train.max_steps")
    for name in ("eval", "embed"):
        p = common(sub.add_parser(name, help=f"{name} a checkpoint"))
        p.add_argument("--checkpoint", type=Path, required=True, metavar="CKPT")
        p.add_argument("--n-patches", type=int)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    _setup_torch()
    try:
        cfg = load_config(args.config, seed=args.seed)
        if args.out is not None:
            if args.command == "synth":
                cfg.paths.data_dir = args.out
            else:
                cfg.paths.out_dir = args.out
        if getattr(args, "max_steps", None) is not None:
            if args.max_steps < 0:
                raise ConfigError("--max-steps must be >= 0")
            cfg.train.max_steps = args.max_steps
        if getattr(args, "n_patches", None) is not None:
            if args.n_patches < 1:
                raise ConfigError("--n-patches must be >= 1")
            cfg.eval.n_patches = args.n_patches

        if args.command == "synth":
            cmd_synth(cfg)
        elif args.command == "train":
            cmd_train(cfg, resume=args.resume)
        elif args.command == "eval":
            cmd_eval(cfg, args.checkpoint)
        else:
            cmd_embed(cfg, args.checkpoint)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ManifestError, ImageLoadError, FileNotFoundError, CheckpointError, KeyError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NonFiniteLossError as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return 0


if __name__ == "__main__":
    sys.exit(main())
