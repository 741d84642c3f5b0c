"""Command-line entry points.

Subcommands mirror the pipeline stages:

    gen-phantoms   synthesize a phantom dataset and write it to disk
    gen-proxy      synthesize the out-of-domain transfer-proxy dataset
    pretrain       contrastive pretraining, checkpoint out
    finetune       supervised fine-tuning from an optional checkpoint
    evaluate       test-split metrics for a fine-tuned model
    experiment     the full pretrain x input grid with all artifacts
    report         re-emit tables/plot from an experiment output directory

Global flags: --config (JSON), --seed, --out, --threads.  --threads only
caps numpy's thread pool; it never changes results.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .classify import FinetuneConfig, finetune, init_classifier, macro_auc, predict_proba_batch
from .contrastive import load_checkpoint, pretrain, save_checkpoint
from .encoder import clone_params
from .errors import CineclrError, UsageError
from .experiment import (
    ExperimentConfig, config_hash, config_to_dict, dump_config,
    emit_convergence_plot, emit_tables, generate_transfer_proxy_dataset,
    parse_config, read_report_csv, run_experiment, _pretrain_images,
)
from .phantom import generate_dataset, read_dataset, write_dataset
from .raster import write_raster


def _load_config(args) -> ExperimentConfig:
    cfg = parse_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = replace(cfg,
                      dataset=replace(cfg.dataset, seed=args.seed),
                      proxy=replace(cfg.proxy, seed=args.seed),
                      grid=replace(cfg.grid, base_seed=args.seed))
    cfg.validate()
    return cfg


def _out_dir(args, default: str) -> Path:
    out = Path(args.out) if args.out else Path(default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_gen_phantoms(args) -> int:
    cfg = _load_config(args)
    ds = generate_dataset(cfg.dataset)
    out = _out_dir(args, "phantoms")
    write_dataset(ds, out)
    print(f"wrote {len(ds.cases)} cases to {out}")
    return 0


def cmd_gen_proxy(args) -> int:
    cfg = _load_config(args)
    images = generate_transfer_proxy_dataset(cfg.proxy)
    out = _out_dir(args, "proxy")
    for i, img in enumerate(images):
        write_raster(out / f"proxy_{i:04d}.cmrt", img)
    print(f"wrote {len(images)} proxy images to {out}")
    return 0


def cmd_pretrain(args) -> int:
    cfg = _load_config(args)
    ds = read_dataset(args.dataset) if args.dataset else generate_dataset(cfg.dataset)
    pcfg = replace(cfg.pretrain, input_mode=args.input_mode,
                   seed=cfg.grid.base_seed)
    train, val = _pretrain_images(ds, pcfg.input_mode, cfg.finetune.mask_dilate_px)
    result = pretrain(train, val, cfg.encoder, pcfg, cfg.ntxent, cfg.augment)
    out = _out_dir(args, ".")
    path = out / f"{pcfg.input_mode}-sscl.clrw"
    save_checkpoint(path, result.params, pcfg)
    print(f"pretrained {len(result.val_curve)} epochs "
          f"(best {result.best_epoch}, val loss "
          f"{result.val_curve[result.best_epoch - 1]:.4f}); checkpoint {path}")
    return 0


def _build_classifier(args, cfg: ExperimentConfig, class_names):
    params = None
    if args.checkpoint:
        params, _ = load_checkpoint(args.checkpoint)
    return init_classifier(
        cfg.encoder, class_names, np.random.default_rng(cfg.grid.base_seed),
        ed_params=clone_params(params) if params else None,
        es_params=clone_params(params) if params else None,
        trainable=cfg.finetune.trainable)


def cmd_finetune(args) -> int:
    cfg = _load_config(args)
    ds = read_dataset(args.dataset) if args.dataset else generate_dataset(cfg.dataset)
    clf = _build_classifier(args, cfg, ds.class_names)
    fcfg = replace(cfg.finetune, input_mode=args.input_mode, seed=cfg.grid.base_seed)
    curve = finetune(clf, ds, fcfg)
    out = _out_dir(args, ".")
    path = out / "classifier.clrw"
    params = {**{f"ed.{k}": v for k, v in clf.ed_params.items()},
              **{f"es.{k}": v for k, v in clf.es_params.items()},
              "out.w": clf.out_w, "out.b": clf.out_b}
    save_checkpoint(path, params, replace(cfg.pretrain, input_mode=fcfg.input_mode))
    best = max(curve.val_macro_auc)
    print(f"fine-tuned {len(curve.val_macro_auc)} epochs, best val macro AUC "
          f"{best:.4f}; checkpoint {path}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = _load_config(args)
    ds = read_dataset(args.dataset) if args.dataset else generate_dataset(cfg.dataset)
    params, _ = load_checkpoint(args.checkpoint)
    ed = {k[3:]: v for k, v in params.items() if k.startswith("ed.")}
    es = {k[3:]: v for k, v in params.items() if k.startswith("es.")}
    if not ed or "out.w" not in params:
        raise UsageError(f"{args.checkpoint}: not a classifier checkpoint")
    clf = init_classifier(cfg.encoder, ds.class_names,
                          np.random.default_rng(0), ed_params=ed, es_params=es)
    clf.out_w, clf.out_b = params["out.w"], params["out.b"]
    test = [c for c in ds.cases if ds.split[c.case_id] == "test"]
    idx = {c: i for i, c in enumerate(ds.class_names)}
    y = np.array([idx[c.class_label] for c in test])
    probas = predict_proba_batch(clf, test, args.input_mode,
                                 cfg.finetune.mask_dilate_px)
    print(f"test macro AUC ({args.input_mode} input): {macro_auc(probas, y):.6f}")
    return 0


def cmd_experiment(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args, "experiment")
    dump_config(cfg, out / "config.json")
    report = run_experiment(cfg, out)
    for imode in cfg.grid.input_modes:
        for pmode in cfg.grid.pretrain_modes:
            print(f"{pmode:>16} / {imode:<9}  mean macro AUC "
                  f"{report.mean_macro_auc(pmode, imode):.6f}")
    print(f"artifacts in {out} (config hash {report.config_hash})")
    return 0


def cmd_report(args) -> int:
    cfg = _load_config(args)
    out = Path(args.out) if args.out else Path("experiment")
    expected = config_hash(cfg) if args.config else None
    rows = read_report_csv(out / "report.csv", expected)
    print(f"report.csv: {len(rows)} cells verified"
          + (f" against config hash {expected}" if expected else ""))
    return 0


def _defaults_epilog() -> str:
    return ("default configuration (JSON):\n"
            + json.dumps(config_to_dict(ExperimentConfig()), indent=2, sort_keys=True))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cineclr",
        description="Anatomy-prior contrastive pretraining on cardiac-MR phantoms.",
        epilog=_defaults_epilog(),
        formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="version", version=f"cineclr {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_text, **extra):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON experiment configuration")
        p.add_argument("--seed", type=int, help="override every base seed")
        p.add_argument("--out", help="output directory")
        p.add_argument("--threads", type=int,
                       help="cap numpy threads (affects speed only, never results)")
        for flag, kw in extra.items():
            p.add_argument(flag, **kw)
        p.set_defaults(fn=fn)

    dataset_arg = {"help": "phantom dataset directory (generated from config if omitted)"}
    input_arg = {"choices": ("full", "segmented"), "default": "full",
                 "help": "image input mode"}
    add("gen-phantoms", cmd_gen_phantoms, "generate the phantom dataset")
    add("gen-proxy", cmd_gen_proxy, "generate the transfer-proxy dataset")
    add("pretrain", cmd_pretrain, "contrastive pretraining",
        **{"--dataset": dataset_arg, "--input-mode": input_arg})
    add("finetune", cmd_finetune, "supervised fine-tuning",
        **{"--dataset": dataset_arg, "--input-mode": input_arg,
           "--checkpoint": {"help": "pretrained encoder checkpoint (.clrw)"}})
    add("evaluate", cmd_evaluate, "test-split evaluation",
        **{"--dataset": dataset_arg, "--input-mode": input_arg,
           "--checkpoint": {"help": "classifier checkpoint (.clrw)", "required": True}})
    add("experiment", cmd_experiment, "run the full pretrain x input grid")
    add("report", cmd_report, "validate an emitted report against its config")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads:
        import os
        os.environ["OMP_NUM_THREADS"] = str(args.threads)
        os.environ["OPENBLAS_NUM_THREADS"] = str(args.threads)
    try:
        return args.fn(args)
    except CineclrError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
