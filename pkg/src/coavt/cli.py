"""Operator-facing command line: corpus generation, pre-training,
fine-tuning, evaluation, gradient verification, and the ablation grids.

Exit codes: 0 ok, 1 usage, 2 contract violation, 3 I/O.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import __version__
from . import dataio, evaluation, gradcheck, reporting, trainer
from .config import ConfigError, apply_objective_preset, load_configs
from .trainer import TrainState

EXIT_OK, EXIT_USAGE, EXIT_CONTRACT, EXIT_IO = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class RunManifest:
    """One manifest per run directory; written incomplete first, then final."""

    def __init__(self, out_dir, command, config_values, seed):
        self.path = Path(out_dir) / "manifest.json"
        self.doc = {
            "artifact_version": __version__,
            "command": command,
            "config": config_values,
            "seed": seed,
            "corpus_checksums": {},
            "checkpoints": [],
            "metrics": [],
            "figures": [],
            "timings": {},
            "complete": False,
        }
        self._t0 = time.perf_counter()
        self.write()

    def write(self):
        with open(self.path, "w") as fh:
            json.dump(self.doc, fh, indent=2, sort_keys=True)
            fh.write("\n")

    def finish(self):
        self.doc["timings"]["wall_seconds"] = round(time.perf_counter() - self._t0, 3)
        self.doc["complete"] = True
        self.write()


def _prepare_out_dir(path):
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-probe"
        probe.write_text("")
        probe.unlink()
    except OSError as e:
        raise IOError(f"cannot write to output directory {out}: {e}") from e
    return out


def _load_split(corpus_dir, split):
    path = Path(corpus_dir) / f"{split}.corpus"
    if not path.exists():
        raise IOError(f"missing corpus file {path}")
    return dataio.load_corpus(path), path


def _restore_state(ckpt_path, config_path, overrides=None):
    corpus_cfg, model_cfg, train_cfg = load_configs(config_path, overrides)
    state = TrainState.fresh(model_cfg, seed=train_cfg.seed)
    step, opt = trainer.load_checkpoint(ckpt_path, state, cfg=train_cfg)
    return state, step, opt, (corpus_cfg, model_cfg, train_cfg)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen_corpus(args):
    corpus_cfg, _, _ = load_configs(args.config)
    if args.seed is not None:
        corpus_cfg = replace(corpus_cfg, seed=args.seed)
    out = _prepare_out_dir(args.out)
    manifest = RunManifest(out, "gen-corpus", asdict(corpus_cfg), corpus_cfg.seed)
    train, test = dataio.generate_corpus(corpus_cfg)
    for split, items in (("train", train), ("test", test)):
        path = out / f"{split}.corpus"
        dataio.save_corpus(items, path)
        manifest.doc["corpus_checksums"][split] = sha256_file(path)
    sanity = dataio.nearest_centroid_accuracy(train, test)
    manifest.doc["nearest_centroid_accuracy"] = sanity
    chance = 1.0 / corpus_cfg.n_classes
    if sanity <= chance:
        print(f"error: generated corpus fails the nearest-centroid sanity oracle "
              f"({sanity:.3f} <= chance {chance:.3f})", file=sys.stderr)
        return EXIT_CONTRACT
    manifest.finish()
    print(f"wrote {len(train)} train / {len(test)} test items to {out} "
          f"(nearest-centroid sanity {sanity:.3f})")
    return EXIT_OK


def cmd_pretrain(args):
    overrides = {"seed": args.seed} if args.seed is not None else None
    corpus_cfg, model_cfg, train_cfg = load_configs(args.config, overrides)
    train_cfg = apply_objective_preset(train_cfg, args.preset)
    if args.epochs is not None:
        train_cfg = replace(train_cfg, epochs=args.epochs)
    train_items, train_path = _load_split(args.corpus, "train")
    out = _prepare_out_dir(args.out)
    manifest = RunManifest(out, "pretrain", asdict(train_cfg), train_cfg.seed)
    manifest.doc["corpus_checksums"]["train"] = sha256_file(train_path)
    manifest.doc["preset"] = args.preset

    state = TrainState.fresh(model_cfg, seed=train_cfg.seed)
    start_step, opt = 0, None
    if args.resume:
        start_step, opt = trainer.load_checkpoint(args.resume, state, cfg=train_cfg)
    metrics_path = out / "metrics.jsonl"
    mode = "a" if args.resume else "w"
    with open(metrics_path, mode) as fh:
        trainer.pretrain(state, train_items, train_cfg, out_dir=str(out),
                         start_step=start_step, opt=opt, metrics_fh=fh)
    final = out / "final.ckpt"
    steps_per_epoch = len(train_items) // train_cfg.batch_size
    trainer.save_checkpoint(final, state, None, train_cfg.epochs * steps_per_epoch)
    fig = reporting.loss_curves(metrics_path, out / "loss_curve.png")
    manifest.doc["metrics"].append(str(metrics_path))
    manifest.doc["figures"].append(str(fig))
    manifest.doc["checkpoints"] = sorted(str(p) for p in out.glob("*.ckpt"))
    manifest.finish()
    print(f"pretrained {train_cfg.epochs} epochs -> {final}")
    return EXIT_OK


def cmd_finetune(args):
    overrides = {"seed": args.seed} if args.seed is not None else None
    state, _, _, (corpus_cfg, model_cfg, train_cfg) = _restore_state(
        args.checkpoint, args.config, overrides)
    if args.epochs is not None:
        train_cfg = replace(train_cfg, epochs=args.epochs)
    train_items, train_path = _load_split(args.corpus, "train")
    out = _prepare_out_dir(args.out)
    manifest = RunManifest(out, f"finetune-{args.task}", asdict(train_cfg), train_cfg.seed)
    manifest.doc["corpus_checksums"]["train"] = sha256_file(train_path)
    metrics_path = out / "metrics.jsonl"
    with open(metrics_path, "w") as fh:
        trainer.finetune(state, train_items, args.task, train_cfg,
                         modality=args.modality, out_dir=str(out), metrics_fh=fh)
    final = out / "final.ckpt"
    trainer.save_checkpoint(final, state)
    manifest.doc["metrics"].append(str(metrics_path))
    manifest.doc["checkpoints"] = sorted(str(p) for p in out.glob("*.ckpt"))
    if args.task == "retrieval":
        fig = reporting.loss_curves(metrics_path, out / "loss_curve.png")
        manifest.doc["figures"].append(str(fig))
    manifest.finish()
    print(f"fine-tuned ({args.task}, {args.modality}) -> {final}")
    return EXIT_OK


def cmd_eval(args):
    state, _, _, (corpus_cfg, model_cfg, train_cfg) = _restore_state(
        args.checkpoint, args.config)
    test_items, test_path = _load_split(args.corpus, "test")
    if args.task == "retrieval":
        metrics = evaluation.text_to_x_retrieval(
            state.model, state.heads, test_items, args.modality,
            k=args.k, rerank=not args.no_rerank)
    elif args.task == "classification":
        if state.cls_head is None:
            print("error: checkpoint has no classification head; "
                  "run finetune --task classification first", file=sys.stderr)
            return EXIT_CONTRACT
        metrics = evaluation.evaluate_classification(
            state.model, state.cls_head, test_items, args.modality)
    else:  # argparse choices should prevent this
        raise ConfigError(f"unknown task {args.task!r}")
    metrics.update({"task": args.task, "modality": args.modality,
                    "seed": train_cfg.seed, "checkpoint": str(args.checkpoint),
                    "corpus_checksum": sha256_file(test_path)})
    payload = json.dumps(metrics, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(payload + "\n")
    print(payload)
    return EXIT_OK


def cmd_av_eval(args):
    state, _, _, _ = _restore_state(args.checkpoint, args.config)
    test_items, test_path = _load_split(args.corpus, "test")
    reps = evaluation.av_representations(state.model, test_items)
    out = {"task": "av-retrieval", "checkpoint": str(args.checkpoint),
           "corpus_checksum": sha256_file(test_path)}
    for direction in ("a2v", "v2a"):
        out[direction] = evaluation.av_retrieval(state.model, test_items,
                                                 direction=direction, k=args.k, reps=reps)
    payload = json.dumps(out, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(payload + "\n")
    print(payload)
    return EXIT_OK


def cmd_gradcheck(args):
    t0 = time.perf_counter()
    report = gradcheck.run_suite(eps=args.eps, seed=args.seed)
    for line in report["lines"]:
        print(line)
    dt = time.perf_counter() - t0
    print(f"{'PASS' if report['ok'] else 'FAIL'}  gradient suite "
          f"(tolerance {report['tolerance']:.1e}, {dt:.1f}s)")
    return EXIT_OK if report["ok"] else EXIT_CONTRACT


def _ablate_cells(grid, train_cfg):
    if grid == "queries":
        # paper-style query sweep runs the AV-only objective set
        base = apply_objective_preset(train_cfg, "vanilla")
        return [(f"queries={n}", base, {"n_queries": n}) for n in (8, 16, 32)]
    if grid == "masking":
        cells = [("no mask", replace(train_cfg, disable_masking=True), {})]
        for ma, mv in ((0.75, 0.75), (0.75, 0.5), (0.5, 0.75)):
            cells.append((f"ma={ma}/mv={mv}",
                          replace(train_cfg, mask_ratio_audio=ma, mask_ratio_visual=mv), {}))
        return cells
    if grid == "objectives":
        return [("full", train_cfg, {}),
                ("-L_V", replace(train_cfg, disable_pair_v=True), {}),
                ("-L_V-L_A", replace(train_cfg, disable_pair_v=True, disable_pair_a=True), {})]
    raise ConfigError(f"ablate: unknown grid {grid!r}")


def cmd_ablate(args):
    overrides = {"seed": args.seed} if args.seed is not None else None
    corpus_cfg, model_cfg, train_cfg = load_configs(args.config, overrides)
    if args.epochs is not None:
        train_cfg = replace(train_cfg, epochs=args.epochs)
    train_items, train_path = _load_split(args.corpus, "train")
    test_items, _ = _load_split(args.corpus, "test")
    out = _prepare_out_dir(args.out)
    manifest = RunManifest(out, f"ablate-{args.grid}", asdict(train_cfg), train_cfg.seed)
    manifest.doc["corpus_checksums"]["train"] = sha256_file(train_path)

    cells = _ablate_cells(args.grid, train_cfg)
    rows = []
    for name, cfg, model_over in cells:
        cell_model_cfg = replace(model_cfg, **model_over)
        state = TrainState.fresh(cell_model_cfg, seed=cfg.seed)
        trainer.pretrain(state, train_items, cfg)
        row = {"cell": name}
        for modality in ("a", "av"):
            metrics = evaluation.text_to_x_retrieval(
                state.model, state.heads, test_items, modality, k=args.k)
            for kk in ("R@1", "R@5", "R@10"):
                row[f"{modality.upper()} {kk}"] = metrics[kk]
        rows.append(row)
        print(f"cell {name}: " + ", ".join(f"{k}={v:.2f}" for k, v in row.items()
                                           if k != "cell"))

    metric_keys = [k for k in rows[0] if k != "cell"]
    (out / "ablation.json").write_text(json.dumps(rows, indent=2) + "\n")
    (out / "ablation.md").write_text(reporting.ablation_markdown(rows, metric_keys))
    fig = reporting.ablation_bars(rows, metric_keys, out / "ablation.png",
                                  title=f"{args.grid} grid")
    manifest.doc["metrics"] += [str(out / "ablation.json"), str(out / "ablation.md")]
    manifest.doc["figures"].append(str(fig))
    manifest.finish()
    print(f"ablation table ({len(rows)} rows) -> {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument wiring
# ---------------------------------------------------------------------------

def build_parser():
    parser = _Parser(prog="coavt", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, **kw):
        p = sub.add_parser(name, **kw)
        p.set_defaults(fn=fn)
        return p

    p = add("gen-corpus", cmd_gen_corpus, help="generate a synthetic triplet corpus")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)

    p = add("pretrain", cmd_pretrain, help="run the multi-task pre-training loop")
    p.add_argument("--config", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--preset", default="full", choices=("full", "vanilla", "baseline"))
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--resume", help="checkpoint to continue from")

    p = add("finetune", cmd_finetune, help="fine-tune for retrieval or classification")
    p.add_argument("--config", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--task", required=True, choices=("retrieval", "classification"))
    p.add_argument("--modality", default="av", choices=("a", "v", "av"))
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)

    p = add("eval", cmd_eval, help="evaluate a checkpoint (zero-shot needs no fine-tune)")
    p.add_argument("--config", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--task", default="retrieval", choices=("retrieval", "classification"))
    p.add_argument("--modality", default="av", choices=("a", "v", "av"))
    p.add_argument("--k", type=int, default=128)
    p.add_argument("--no-rerank", action="store_true")
    p.add_argument("--out")

    p = add("av-eval", cmd_av_eval, help="audio<->visual retrieval in both directions")
    p.add_argument("--config", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--k", type=int)
    p.add_argument("--out")

    p = add("gradcheck", cmd_gradcheck, help="finite-difference verification suite")
    p.add_argument("--eps", type=float, default=gradcheck.EPS)
    p.add_argument("--seed", type=int, default=0)

    p = add("ablate", cmd_ablate, help="run an ablation grid and emit a table")
    p.add_argument("--config", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--grid", default="objectives", choices=("queries", "masking", "objectives"))
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--k", type=int, default=128)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, ValueError, KeyError, trainer.CheckpointError,
            dataio.CorpusFormatError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONTRACT
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
