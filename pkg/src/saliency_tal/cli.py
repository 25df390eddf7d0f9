"""Command line entry point: gen-data, train, infer, eval, gradcheck, bench.

Exit codes: 0 success, 1 invalid input or config, 2 numerical failure, 3 file system error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from collections import Counter
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import bench as bench_mod
from . import config as config_mod
from . import gradcheck as gradcheck_mod
from . import model as mdl
from . import plotting
from . import training
from .attention import AttentionConfig
from .config import ConfigError, RunConfig
from .evaluation import evaluate
from .synth import (
    DatasetManifest, generate_dataset, load_manifest, read_predictions, write_dataset, write_predictions,
)

DATA_ENV = "SALIENCY_TAL_DATA"
EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL, EXIT_IO = 0, 1, 2, 3

log = logging.getLogger("saliency_tal")


class CommandError(Exception):
    def __init__(self, message: str, code: int = EXIT_INVALID):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------- helpers


def _load_config(args, data_dir: Path | None = None) -> RunConfig:
    """``--config`` if given, else the config echoed next to the dataset, else defaults."""
    path = args.config
    if path is None and data_dir is not None and (data_dir / "config.json").exists():
        path = data_dir / "config.json"
    return config_mod.load(path, args.set)


def _check_against_manifest(cfg: RunConfig, manifest: DatasetManifest) -> None:
    if not manifest.clips:
        raise CommandError("manifest lists no clips")
    m = cfg.model
    if m.num_classes != manifest.num_classes:
        raise CommandError(f"config has {m.num_classes} classes but the dataset has {manifest.num_classes}")
    if m.d_in != manifest.clips[0].D:
        raise CommandError(f"config expects {m.d_in}-dim features but the dataset has {manifest.clips[0].D}")


def _data_dir(args) -> Path:
    root = args.data or os.environ.get(DATA_ENV)
    if not root:
        raise CommandError(f"no dataset given: pass --data or set {DATA_ENV}")
    return Path(root)


def _echo_config(cfg: RunConfig, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    config_mod.dump(cfg, out / "config.json")


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------- commands


def cmd_gen_data(args) -> int:
    out = Path(args.out or os.environ.get(DATA_ENV) or "")
    if not str(out):
        raise CommandError(f"no output directory: pass --out or set {DATA_ENV}")
    overrides = list(args.set)
    if args.seed is not None:
        overrides.append(f"data.seed={args.seed}")
    if args.classes is not None:
        overrides.append(f"data.num_classes={args.classes}")
    cfg = config_mod.load(args.config, overrides)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise CommandError(f"{out} is not empty (use --force to overwrite)")
    manifest, feats = generate_dataset(cfg.data)
    write_dataset(out, manifest, feats)
    _echo_config(cfg, out)

    counts = {s: Counter() for s in ("train", "test")}
    clips = {s: 0 for s in counts}
    for c in manifest.clips:
        clips[c.split] += 1
        counts[c.split].update(a.label for a in c.annotations)
    print(f"wrote {len(manifest.clips)} clips to {out}")
    print(f"{'class':<28} {'train':>6} {'test':>6}")
    for k, name in enumerate(manifest.label_names):
        print(f"{name:<28} {counts['train'][k]:>6} {counts['test'][k]:>6}")
    print(f"{'clips':<28} {clips['train']:>6} {clips['test']:>6}")
    n_aug = {s: sum(c.augmented for c in manifest.split(s)) for s in clips}
    print(f"{'  of which augmented':<28} {n_aug['train']:>6} {n_aug['test']:>6}")
    return EXIT_OK


def cmd_train(args) -> int:
    root = _data_dir(args)
    manifest = load_manifest(root)
    cfg = _load_config(args, root)
    _check_against_manifest(cfg, manifest)
    out = Path(args.out)
    resume = None
    if args.resume:
        resume = training.load_checkpoint(Path(args.resume))
        if resume.config_hash != cfg.model_hash():
            raise CommandError("checkpoint model config differs from --config; refusing to resume")
    _echo_config(cfg, out)
    result = training.train(root, manifest, cfg, out_dir=out, resume=resume)
    for h in result.history:
        extra = f"  test mAP {h['test_mAP']:.4f}" if "test_mAP" in h else ""
        print(f"epoch {h['epoch']:>3}  loss {h['loss']:.4f}  cls {h['cls_loss']:.4f}  reg {h['reg_loss']:.4f}{extra}")
    if result.history:
        plotting.training_curves(result.history, out / "training.png")
    print(f"checkpoint: {out / 'last.ckpt'}")
    return EXIT_OK


def cmd_infer(args) -> int:
    root = _data_dir(args)
    manifest = load_manifest(root)
    cfg = _load_config(args, root)
    _check_against_manifest(cfg, manifest)
    ck = training.load_checkpoint(Path(args.ckpt))
    if ck.config_hash != cfg.model_hash():
        if not args.allow_mismatch:
            raise CommandError("checkpoint was trained with a different model config "
                               "(pass --allow-mismatch to run anyway)")
        log.warning("checkpoint config hash differs from the given config")
    params = training.params_from_checkpoint(ck)
    expected = mdl.init_params(cfg.model_config())
    if {k: v.shape for k, v in expected.items()} != {k: v.shape for k, v in params.items()}:
        raise CommandError("checkpoint parameters do not fit the configured model")
    clips, feats = training.load_split(root, manifest, args.split)
    if not clips:
        raise CommandError(f"dataset has no {args.split!r} clips")
    dets = training.infer_clips(params, clips, feats, cfg)
    out = Path(args.out)
    _echo_config(cfg, out)
    write_predictions(out / "preds.jsonl", dets)
    print(f"{len(dets)} detections on {len(clips)} {args.split} clips -> {out / 'preds.jsonl'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    root = _data_dir(args)
    manifest = load_manifest(root, check_files=False)
    cfg = _load_config(args, root)
    preds = read_predictions(Path(args.preds), manifest.num_classes)
    clips = manifest.split(args.split)
    subsets = {"full": clips,
               "non-aug": [c for c in clips if not c.augmented],
               "aug": [c for c in clips if c.augmented]}
    reports, text = {}, []
    for name, subset in subsets.items():
        gts = manifest.ground_truth(subset)
        if not any(gts.values()):
            continue
        rep = evaluate(preds, gts, manifest.num_classes, cfg.eval.thresholds, manifest.label_names)
        reports[name] = rep
        text.append(rep.table(f"[{name}] {len(subset)} clips"))
    if not reports:
        raise CommandError(f"no ground truth in the {args.split!r} split")
    summary = "  ".join(f"{k} {r.mean_ap * 100:.2f}" for k, r in reports.items())
    text.append(f"average mAP (%): {summary}")
    out = Path(args.out)
    _echo_config(cfg, out)
    _write_json(out / "report.json", {"split": args.split, "subsets": {k: r.to_dict() for k, r in reports.items()}})
    (out / "report.txt").write_text("\n\n".join(text) + "\n")
    plotting.map_vs_threshold(reports, out / "map_vs_threshold.png")
    plotting.per_class_ap(reports["full"] if "full" in reports else next(iter(reports.values())),
                          out / "per_class_ap.png")
    print("\n\n".join(text))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = config_mod.load(args.config, args.set)
    m = cfg.model
    results = gradcheck_mod.run_all(seed=args.seed, variant=m.variant, window=m.window,
                                    keep_ratio=m.keep_ratio, only=args.only)
    for r in results:
        print(r.line())
    failed = [r.component for r in results if not r.passed]
    if failed:
        print(f"FAILED: {', '.join(failed)}")
        return EXIT_NUMERICAL
    print(f"all {len(results)} components pass")
    return EXIT_OK


def cmd_bench(args) -> int:
    cfg = config_mod.load(args.config, args.set)
    m = cfg.model
    try:
        lengths = [int(t) for t in args.lengths.split(",")]
    except ValueError:
        raise CommandError(f"--lengths must be comma-separated integers, got {args.lengths!r}") from None
    att = AttentionConfig(d_model=m.d_model, heads=m.heads, window=m.window, keep_ratio=m.keep_ratio,
                          variant=m.variant, qkv_conv_width=m.qkv_conv_width)
    result = bench_mod.run(att, lengths, repeats=args.repeats, warmup=args.warmup, seed=args.seed)
    table = bench_mod.format_table(result)
    print(table)
    if args.out:
        out = Path(args.out)
        _echo_config(cfg, out)
        _write_json(out / "bench.json", result)
        (out / "bench.txt").write_text(table + "\n")
        plotting.attention_scaling(result, out / "bench.png")
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run config JSON (unknown keys are rejected)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config leaf, e.g. --set nms.sigma=0.3 (repeatable)")
    common.add_argument("--threads", type=int, default=1,
                        help="BLAS/OpenMP threads; 1 gives bit-identical reruns (default 1)")
    common.add_argument("-q", "--quiet", action="store_true", help="only warnings on stderr")

    p = argparse.ArgumentParser(prog="saliency-tal", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", parents=[common], help="generate a synthetic dataset")
    g.add_argument("--out", help=f"dataset directory (default ${DATA_ENV})")
    g.add_argument("--seed", type=int, help="shorthand for --set data.seed=N")
    g.add_argument("--classes", type=int, help="shorthand for --set data.num_classes=N")
    g.add_argument("--force", action="store_true", help="write into a non-empty directory")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", parents=[common], help="train a model on the train split")
    t.add_argument("--data", help=f"dataset directory (default ${DATA_ENV})")
    t.add_argument("--out", required=True, help="run directory for checkpoint and metrics")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", parents=[common], help="write post-NMS detections for a split")
    i.add_argument("--data", help=f"dataset directory (default ${DATA_ENV})")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--out", required=True)
    i.add_argument("--split", default="test", choices=["train", "test"])
    i.add_argument("--allow-mismatch", action="store_true", help="run even if the config hash differs")
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", parents=[common], help="score detections: per-class AP and mAP")
    e.add_argument("--data", help=f"dataset directory (default ${DATA_ENV})")
    e.add_argument("--preds", required=True, help="preds.jsonl from infer")
    e.add_argument("--out", required=True)
    e.add_argument("--split", default="test", choices=["train", "test"])
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of every component")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--only", nargs="+", choices=sorted(gradcheck_mod.TOLERANCES), help="subset of components")
    c.set_defaults(func=cmd_gradcheck)

    b = sub.add_parser("bench", parents=[common], help="time pruned local vs full attention")
    b.add_argument("--lengths", default="256,512,1024,2048", help="ascending comma-separated T values")
    b.add_argument("--repeats", type=int, default=10)
    b.add_argument("--warmup", type=int, default=2)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out", help="directory for bench.json, bench.txt and bench.png")
    b.set_defaults(func=cmd_bench)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        with threadpool_limits(limits=args.threads):
            return args.func(args)
    except CommandError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (training.NumericalError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, ValueError, KeyError, TypeError) as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
