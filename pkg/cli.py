"""Command-line entry point.

    python cli.py synth --preset default --seed 1 --out runs/cohort
    python cli.py train --cohort runs/cohort/cohort.jsonl --vocab runs/cohort/vocab.json --arch gru --out runs/gru
    python cli.py evaluate --checkpoint runs/gru/model.ckpt --cohort runs/cohort/cohort.jsonl --out runs/gru/eval
    python cli.py predict --checkpoint runs/gru/model.ckpt --cohort runs/cohort/cohort.jsonl --out preds.csv
    python cli.py benchmark --cohort ... --vocab ... --models gru,lstm,rnn,tle,logreg,random --out runs/bench
    python cli.py gradcheck --arch all

Exit codes: 0 success, 2 validation error, 3 gradient check failure, 4 I/O error.
"""
import argparse
import dataclasses
import itertools
import json
import logging
import sys
from pathlib import Path

import numpy as np
import pandas as pd
from tqdm import tqdm

from checkpoint import load_model, save_model
from data import (TARGET_LABELS, TARGET_TITLES, GenConfig, Preprocessor, cohort_summary, generate_cohort, load_cohort,
                  load_vocab, save_cohort, save_vocab, split_patients)
from metrics import aggregate_splits, evaluation_report, pr_curve, roc_curve, render_table, UndefinedMetric
from model import ARCH_LABELS, ARCHS, Architecture, Dims
from numerics import Rng, finite_diff_errors
from train import TrainConfig, bce_grad, bce_loss, default_grid, fit, grid_search, pooled_arrays, predict
from utils import (CheckpointError, ConfigError, RunManifest, SdrnnError, _cast, config_to_text, get_log_level,
                   ids_digest, read_config_file, resolve_config)

logger = logging.getLogger("sdrnn")

EXIT_OK, EXIT_VALIDATION, EXIT_GRADCHECK, EXIT_IO = 0, 2, 3, 4
GRADCHECK_ARCHS = ("rnn", "lstm", "gru", "tle", "logreg", "static")
GRADCHECK_THRESHOLD = 1e-4


def _out_dir(path):
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _train_config(args, **extra):
    overrides = {"seed": args.seed, **extra}
    return resolve_config(TrainConfig, args.config, overrides)


def _label_titles(prep):
    if prep.task == "endpoint":
        return dict(zip(TARGET_LABELS, TARGET_TITLES))
    return {}


def prepare_split(records, vocab, split_seed, degraded=False, imputation="mean", task="endpoint"):
    """Split at patient level, fit preprocessing on the training part, encode all three parts."""
    train, valid, test = split_patients(records, rng=Rng(split_seed).substream("split"))
    prep = Preprocessor.fit(train, vocab, degraded=degraded, imputation=imputation, task=task)
    encoded = [prep.encode_all(part) for part in (train, valid, test)]
    digests = {name: ids_digest(r.patient_id for r in part)
               for name, part in zip(("train", "valid", "test"), (train, valid, test))}
    dims = Dims(vocab.static_width, prep.dynamic_width, len(prep.output_labels))
    return prep, encoded, digests, dims


def _prepare(records, vocab, split_seed, args):
    return prepare_split(records, vocab, split_seed, args.degraded_preprocessing, args.imputation, args.task)


def run_split(arch, records, vocab, split_seed, grid, **preprocessing):
    """Fit ``arch`` on one split (grid search when ``grid`` has several points) and score the test part.

    Returns (test report, split digests, grid scores or None, label titles).
    """
    prep, (train, valid, test), digests, dims = prepare_split(records, vocab, split_seed, **preprocessing)
    scores = None
    if len(grid) > 1 and arch != "random":
        cfg, scores, params = grid_search(arch, dims, train, valid, grid)
    else:
        cfg = grid[0]
        params, _ = fit(Architecture.from_config(arch, dims, cfg), train, valid, cfg)
    model = Architecture.from_config(arch, dims, cfg)
    s, l, m = pooled_arrays(test, predict(model, params, test, cfg.batch))
    return evaluation_report(s, l, m, prep.output_labels), digests, scores, _label_titles(prep)


# ----------------------
# synth
# ----------------------
def cmd_synth(args):
    base = GenConfig.preset(args.preset)
    cfg = resolve_config(GenConfig, args.config, base=base)
    out = _out_dir(args.out)
    manifest = RunManifest("synth", dataclasses.asdict(cfg), [args.seed], [args.config] if args.config else [])

    print(f"Generating {cfg.patients} patients (preset {args.preset}, seed {args.seed})...")
    records, vocab = generate_cohort(cfg, args.seed)
    save_cohort(records, out / "cohort.jsonl")
    save_vocab(vocab, out / "vocab.json")
    (out / "generator.cfg").write_text(config_to_text(cfg), encoding="utf-8")
    manifest.mark("generate")

    summary = cohort_summary(records)
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    manifest.write(out)
    print(f"✅ {summary['patients']} patients, {summary['visits']} visits, "
          f"target density {summary['target_density']:.3f}, "
          f"patients with an endpoint {summary['endpoint_patient_fraction']:.3f}")
    return EXIT_OK


# ----------------------
# train
# ----------------------
def cmd_train(args):
    cfg = _train_config(args)
    records = load_cohort(args.cohort)
    vocab = load_vocab(args.vocab)
    out = _out_dir(args.out)
    manifest = RunManifest("train", {"arch": args.arch, "task": args.task, "degraded": args.degraded_preprocessing,
                                     **dataclasses.asdict(cfg)}, [args.seed],
                           [args.cohort, args.vocab] + ([args.config] if args.config else []))

    print("Splitting and preprocessing...")
    prep, (train, valid, test), digests, dims = _prepare(records, vocab, args.seed, args)
    manifest.mark("preprocess")

    print(f"Training {ARCH_LABELS[args.arch]} on {len(train)} patients...")
    if args.grid_search and args.arch != "random":
        cfg, scores, _ = grid_search(args.arch, dims, train, valid, default_grid(cfg, args.arch))
        scores.to_csv(out / "grid.csv", index=False)
    model = Architecture.from_config(args.arch, dims, cfg)
    params, history = fit(model, train, valid, cfg)
    manifest.mark("fit")

    best = history.best_score if np.isfinite(history.best_score) else None
    save_model(out / "model.ckpt", model, params, cfg,
               extra_meta={"split_seed": args.seed, "split_digests": digests, "preprocessing": prep.to_meta(),
                           "best_valid_auprc": best, "best_epoch": history.best_epoch,
                           "bptt": "full", "batching": "whole patients, summed loss"},
               extra_arrays=prep.to_arrays())
    history.to_frame().to_csv(out / "history.csv", index=False)
    manifest.write(out)
    print(f"✅ Best validation AUPRC {best} at epoch {history.best_epoch}; checkpoint in {out / 'model.ckpt'}")
    return EXIT_OK


# ----------------------
# evaluate / predict
# ----------------------
def _load_for_data(checkpoint_path):
    model, params, cfg, meta, arrays = load_model(checkpoint_path)
    prep = Preprocessor.from_checkpoint(meta["preprocessing"], arrays)
    expected = Dims(prep.vocab.static_width, prep.dynamic_width, len(prep.output_labels))
    if expected != model.dims:
        raise CheckpointError(f"{checkpoint_path}: model dims {model.dims} disagree with its vocabulary {expected}")
    return model, params, cfg, meta, prep


def _check_vocab(prep, vocab_path):
    if vocab_path is None:
        return
    vocab = load_vocab(vocab_path)
    if vocab.to_dict() != prep.vocab.to_dict():
        raise CheckpointError(f"vocabulary {vocab_path} differs from the checkpoint's vocabulary "
                              f"(dynamic width {vocab.dynamic_width} vs {prep.vocab.dynamic_width})")


def cmd_evaluate(args):
    model, params, cfg, meta, prep = _load_for_data(args.checkpoint)
    _check_vocab(prep, args.vocab)
    split_seed = meta.get("split_seed", 0) if args.seed is None else args.seed
    records = load_cohort(args.cohort)
    out = _out_dir(args.out)
    manifest = RunManifest("evaluate", {"arch": model.arch, "split_seed": split_seed}, [split_seed],
                           [args.checkpoint, args.cohort])

    _, _, test = split_patients(records, rng=Rng(split_seed).substream("split"))
    encoded = prep.encode_all(test)
    scores, labels, mask = pooled_arrays(encoded, predict(model, params, encoded, cfg.batch))
    labels_names = prep.output_labels
    report = evaluation_report(scores, labels, mask, labels_names)
    report.rename(index=_label_titles(prep)).to_csv(out / "report.csv")

    curves = _out_dir(out / "curves")
    keep = mask > 0.5
    groups = [("pooled", scores[keep], labels[keep])]
    if prep.task == "endpoint":
        groups += [(name, scores[keep[:, j], j], labels[keep[:, j], j]) for j, name in enumerate(labels_names)]
    for name, s, l in groups:
        if s.size:
            pr_curve(s, l).to_csv(curves / f"pr_{name}.csv", index=False)
            roc_curve(s, l).to_csv(curves / f"roc_{name}.csv", index=False)
    manifest.write(out)
    pooled = report.loc["pooled"]
    print(f"✅ {ARCH_LABELS[model.arch]} on {len(test)} test patients: "
          f"AUPRC {pooled['auprc']:.3f}, AUROC {pooled['auroc']:.3f}")
    return EXIT_OK


def cmd_predict(args):
    model, params, cfg, meta, prep = _load_for_data(args.checkpoint)
    _check_vocab(prep, args.vocab)
    records = load_cohort(args.cohort)
    encoded = prep.encode_all(records)
    preds = predict(model, params, encoded, cfg.batch)
    rows = []
    for patient, yhat in zip(encoded, preds):
        for t, row in enumerate(yhat):
            rows.append([patient.patient_id, t] + row.tolist())
    frame = pd.DataFrame(rows, columns=["patient_id", "visit_index"] + list(prep.output_labels))
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(args.out, index=False)
    print(f"✅ Wrote {len(frame)} rows to {args.out}")
    return EXIT_OK


# ----------------------
# benchmark
# ----------------------
def read_grid(path, base):
    """key=value file whose values are comma-separated candidate lists; returns the product."""
    fields = {f.name: f for f in dataclasses.fields(TrainConfig)}
    axes = {}
    for key, raw in read_config_file(path).items():
        if key not in fields:
            raise ConfigError(f"unknown config key '{key}' in {path}")
        axes[key] = [_cast(fields[key], v) for v in raw.split(",") if v.strip()]
    keys = list(axes)
    try:
        return [dataclasses.replace(base, **dict(zip(keys, combo))) for combo in itertools.product(*axes.values())]
    except ValueError as e:
        raise ConfigError(str(e)) from None


def cmd_benchmark(args):
    models = [m.strip() for m in args.models.split(",") if m.strip()]
    unknown = [m for m in models if m not in ARCHS]
    if unknown or not models:
        raise ConfigError(f"unknown models: {', '.join(unknown) or '(none given)'}")
    if len(models) < 2:
        logger.warning("benchmark with a single model: %s", models[0])
    if args.splits < 2:
        raise ConfigError("benchmark needs at least 2 splits")

    base = _train_config(args)
    grid = read_grid(args.grid, base) if args.grid else [base]
    records = load_cohort(args.cohort)
    vocab = load_vocab(args.vocab)
    out = _out_dir(args.out)
    per_split = _out_dir(out / "splits")
    manifest = RunManifest("benchmark", {"models": models, "splits": args.splits, "grid_points": len(grid),
                                         "task": args.task, "degraded": args.degraded_preprocessing,
                                         **dataclasses.asdict(base)},
                           [args.seed + j for j in range(args.splits)],
                           [args.cohort, args.vocab] + [p for p in (args.config, args.grid) if p])

    reports = {m: [] for m in models}
    digest_rows = []
    titles = {}
    progress = tqdm(total=args.splits * len(models), desc="benchmark", unit="fit")
    try:
        for j in range(args.splits):
            split_seed = args.seed + j
            reference = None
            for arch in models:
                report, digests, scores, titles = run_split(arch, records, vocab, split_seed, grid,
                                                            degraded=args.degraded_preprocessing,
                                                            imputation=args.imputation, task=args.task)
                if reference is None:
                    reference = digests
                elif digests != reference:
                    raise SdrnnError(f"split {j} differs between models ({arch})")
                digest_rows.append({"split": j, "seed": split_seed, "model": arch, **digests})
                if scores is not None:
                    scores.to_csv(per_split / f"grid_{arch}_{j}.csv", index=False)
                report.to_csv(per_split / f"{arch}_{j}.csv")
                reports[arch].append(report)
                progress.update(1)
                manifest.mark(f"split{j}/{arch}")
    finally:
        progress.close()
        pd.DataFrame(digest_rows).to_csv(out / "split_digests.csv", index=False)
        _write_comparison(out, models, reports, titles)
        manifest.write(out)
    print(render_table(_pooled_rows(models, reports)).to_string())
    print(f"✅ Benchmark tables in {out}")
    return EXIT_OK


def _pooled_rows(models, reports):
    rows = []
    for arch in models:
        if len(reports[arch]) >= 2:
            agg = aggregate_splits(reports[arch])
            rows.append(agg.loc[["pooled"]].rename(index={"pooled": ARCH_LABELS[arch]}))
    return pd.concat(rows) if rows else pd.DataFrame(columns=["auprc_mean", "auprc_se", "auroc_mean", "auroc_se"])


def _write_comparison(out, models, reports, titles):
    pooled = _pooled_rows(models, reports)
    pooled.to_csv(out / "comparison_full.csv")
    render_table(pooled).to_csv(out / "comparison.csv")
    for arch in models:
        if len(reports[arch]) >= 2:
            agg = aggregate_splits(reports[arch])
            agg.to_csv(out / f"endpoints_{arch}_full.csv")
            render_table(agg.drop(index="pooled"), titles).to_csv(out / f"endpoints_{arch}.csv")


# ----------------------
# gradcheck
# ----------------------
def run_gradcheck(arch, dims, rank=3, hidden=4, steps=6, batch=2, seed=0, window=3):
    """Per-tensor max relative error of the analytic BCE gradient against central differences."""
    rng = Rng(seed).substream(f"gradcheck/{arch}")
    model = Architecture(arch, dims, rank=rank, hidden=hidden, window=window)
    params = {name: rng.substream(name).normal(0.0, 0.5, size=shape) for name, shape in model.param_shapes().items()}
    static = rng.normal(0.0, 1.0, size=(batch, dims.static))
    visits = (rng.random((batch, steps, dims.dynamic)) < 0.4).astype(np.float64)
    targets = (rng.random((batch, steps, dims.outputs)) < 0.3).astype(np.float64)

    def objective(p):
        yhat, _ = model.forward(p, static, visits)
        return bce_loss(yhat, targets)

    yhat, trace = model.forward(params, static, visits)
    grads = model.backward(params, trace, bce_grad(yhat, targets))
    errors = finite_diff_errors(objective, params, grads)
    return pd.DataFrame({"tensor": list(errors), "max_rel_error": list(errors.values())}).assign(arch=arch)


def cmd_gradcheck(args):
    archs = GRADCHECK_ARCHS if args.arch == "all" else (args.arch,)
    dims = Dims(args.static, args.dynamic, args.outputs)
    frames = [run_gradcheck(a, dims, args.rank, args.hidden, args.steps, args.batch, args.seed, args.window)
              for a in archs]
    report = pd.concat(frames, ignore_index=True)[["arch", "tensor", "max_rel_error"]]
    print(report.to_string(index=False))
    worst = float(report["max_rel_error"].max())
    if worst >= args.threshold:
        print(f"❌ Gradient check failed: max relative error {worst:.3e} >= {args.threshold:g}", file=sys.stderr)
        return EXIT_GRADCHECK
    print(f"✅ All gradients match (max relative error {worst:.3e})")
    return EXIT_OK


# ----------------------
# Argument parsing
# ----------------------
def _data_flags(p):
    p.add_argument("--degraded-preprocessing", action="store_true",
                   help="standardized raw lab values with imputation instead of High/Normal/Low events")
    p.add_argument("--imputation", choices=("mean", "median"), default="mean")
    p.add_argument("--task", choices=("endpoint", "next-visit"), default="endpoint")


def build_parser():
    parser = argparse.ArgumentParser(prog="sdrnn", description="Static + dynamic recurrent endpoint prediction")
    parser.add_argument("--log-level", default=None, help="logging level (default: SDRNN_LOG_LEVEL or INFO)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic cohort")
    p.add_argument("--preset", default="default", help="default | motif | recency | extremes")
    p.add_argument("--config", help="generator key=value file")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="split, preprocess and fit one model")
    p.add_argument("--cohort", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--arch", choices=ARCHS, default="gru")
    p.add_argument("--config", help="training key=value file")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--grid-search", action="store_true")
    p.add_argument("--out", required=True)
    _data_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score a checkpoint on the test split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--cohort", required=True)
    p.add_argument("--vocab")
    p.add_argument("--seed", type=int, default=None, help="split seed (default: the one used for training)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("predict", help="per-visit probabilities for every patient of a cohort")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--cohort", required=True)
    p.add_argument("--vocab")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("benchmark", help="every model on the same repeated splits")
    p.add_argument("--cohort", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--models", default="gru,lstm,rnn,tle,logreg,random")
    p.add_argument("--config", help="base training key=value file")
    p.add_argument("--grid", help="key=value file with comma-separated candidates")
    p.add_argument("--splits", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    _data_flags(p)
    p.set_defaults(func=cmd_benchmark)

    p = sub.add_parser("gradcheck", help="compare analytic gradients with finite differences")
    p.add_argument("--arch", choices=GRADCHECK_ARCHS + ("all",), default="all")
    p.add_argument("--static", type=int, default=5)
    p.add_argument("--dynamic", type=int, default=9)
    p.add_argument("--outputs", type=int, default=6)
    p.add_argument("--rank", type=int, default=3)
    p.add_argument("--hidden", type=int, default=4)
    p.add_argument("--steps", type=int, default=6)
    p.add_argument("--window", type=int, default=3, help="TLE window length")
    p.add_argument("--batch", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threshold", type=float, default=GRADCHECK_THRESHOLD)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=(args.log_level or get_log_level()).upper(),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, UndefinedMetric) as e:
        print(f"❌ {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except CheckpointError as e:
        print(f"❌ {e}", file=sys.stderr)
        return EXIT_IO
    except SdrnnError as e:
        print(f"❌ {e}", file=sys.stderr)
        return e.exit_code if e.exit_code in (EXIT_VALIDATION, EXIT_GRADCHECK, EXIT_IO) else EXIT_VALIDATION
    except OSError as e:
        print(f"❌ {e}", file=sys.stderr)
        return EXIT_IO
    except ValueError as e:
        print(f"❌ {e}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
