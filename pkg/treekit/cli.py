"""treekit command line - thin argparse wrapper around the library."""

from __future__ import annotations

import argparse
import logging
import shlex
import sys
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from . import FORMAT_VERSION, __version__
from . import autodiff as ad
from .analysis import (
    DEFAULT_NOISE_RATES,
    DEFAULT_SIZES,
    EvalReport,
    bias_variance,
    dataset_blocks,
    evaluate,
    layer_probe_study,
    make_algorithm,
    preference_study,
    rank_table,
    xor_sweep,
)
from .config import (
    MODEL_PRESETS,
    SCHEDULE_PRESETS,
    ModelConfig,
    Settings,
    TrainSchedule,
    parse_bool,
    read_config_file,
    split_config_values,
)
from .corpus import gen_corpus, load_corpus, save_corpus
from .data import DEFAULT_BLOCK_COLS, DEFAULT_BLOCK_ROWS, export_csv, load_csv, load_dataset_dir, sample_block
from .errors import ContractViolation, NumericAbort, TreekitError, format_error_line
from .generation import generate_tree
from .gradcheck import model_loss_check, primitive_checks
from .model import SplitTransformer
from .optimal import DEFAULT_LAMBDA
from .trees import save_tree
from .training import train
from .xor import XorSpec, spec_to_text, xor_dataset

logger = logging.getLogger("treekit")

GRAD_TOLERANCE = 1e-4

HELP_SECTIONS = {
    "Data": [
        "gen-xor --level 1 --noise 0.15 --count 100 --out data/xor",
    ],
    "Teachers and training": [
        "build-corpus --datasets data/xor --per-dataset 100 --out corpus",
        "train --corpus corpus --preset desk --out runs/desk",
        "train --corpus corpus --resume runs/desk/ckpt-00005000.tkc --out runs/desk",
    ],
    "Trees": [
        "gen-tree --model runs/desk/model.tkc --data data/xor/xor-000.csv --depth 2 --emit-dot",
    ],
    "Analyses": [
        "eval --algos greedy-gini,optimal-d2,learned --datasets data/xor --model runs/desk/model.tkc",
        "rank --report eval.csv",
        "bias-variance --algo greedy-gini --dataset data/xor/xor-000.csv --reps 100",
        "prefer --model runs/desk/model.tkc --datasets data/real --out prefer",
        "probe --model runs/desk/model.tkc --datasets data/real",
        "xor-sweep --algo greedy-gini --levels 1,2",
        "grad-check --preset desk-tiny",
    ],
}


def generate_help_text() -> str:
    lines = ["examples:"]
    for section, commands in HELP_SECTIONS.items():
        lines.append(f"  {section}:")
        lines.extend(f"    treekit {command}" for command in commands)
    lines.append("")
    lines.append("Exit codes: 0 success, 2 usage, 3 data error, 4 numeric abort.")
    return "\n".join(lines)


# ----------------------------------------------------------------------------
# Argument parsing helpers


def _int_list(text: str) -> List[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def _float_list(text: str) -> List[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def _on_off(text: str) -> bool:
    try:
        return parse_bool(text)
    except ContractViolation as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc


def _header_lines(kind: str, command: str) -> List[str]:
    return [f"treekit {kind} format {FORMAT_VERSION}", f"command: {command}"]


def _write_table(frame: pd.DataFrame, path: Path, kind: str, command: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as handle:
        for line in _header_lines(kind, command):
            handle.write(f"# {line}\n")
        frame.to_csv(handle, index=False)
    return path


def _load_model(path: Optional[str]) -> Optional[SplitTransformer]:
    return SplitTransformer.load(path) if path else None


def _algorithm(name: str, args: argparse.Namespace):
    model = _load_model(getattr(args, "model", None)) if name == "learned" else None
    return make_algorithm(name, model, getattr(args, "lam", DEFAULT_LAMBDA))


# ----------------------------------------------------------------------------
# Subcommands


def cmd_gen_xor(args: argparse.Namespace, command: str) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seeds = np.random.SeedSequence(args.seed).spawn(args.count)
    for k, child in enumerate(seeds):
        spec = XorSpec(args.level, args.noise, args.noise_dims, int(child.generate_state(1)[0]))
        dataset, spec = xor_dataset(spec, args.n, name=f"xor-{k:03d}")
        header = "\n".join(_header_lines("xor dataset", command))
        export_csv(dataset, out / f"xor-{k:03d}.csv", comment=header)
        spec_text = "".join(f"# {line}\n" for line in _header_lines("xor spec", command)) + spec_to_text(spec)
        (out / f"xor-{k:03d}.spec").write_text(spec_text, encoding="utf-8")
    print(f"Wrote {args.count} XOR level-{args.level} datasets ({args.n} rows, noise {args.noise}) to {out}")
    return 0


def cmd_build_corpus(args: argparse.Namespace, command: str) -> int:
    datasets = load_dataset_dir(args.datasets, args.label_column)
    corpus = gen_corpus(datasets, args.per_dataset, seed=args.seed, lam=args.lam, workers=args.workers,
                        n=args.block_rows, m=args.block_cols)
    corpus.command = command
    root = save_corpus(corpus, args.out)
    print(f"Corpus: {len(corpus)} examples from {len(datasets)} datasets -> {root}")
    for name, entry in corpus.manifest.items():
        for note in entry["notes"]:
            print(f"  {name}: {note}")
    return 0


def _train_settings(args: argparse.Namespace, settings: Settings):
    file_values: Dict[str, str] = read_config_file(args.config) if args.config else {}
    model_values, schedule_values, rest = split_config_values(file_values)
    unknown = sorted(set(rest) - {"preset"})
    if unknown:
        raise ContractViolation(f"Unknown train config keys: {unknown}")
    preset = rest.get("preset") or args.preset
    schedule_preset = preset if preset in SCHEDULE_PRESETS else "desk"

    config = ModelConfig.preset(preset)
    if settings.dtype:
        config = config.replace(dtype=settings.dtype)
    config = ModelConfig.from_mapping({**config.__dict__, **model_values})
    overrides = {
        "sigma": args.sigma,
        "positional_bias": args.positional_bias,
        "dtype": args.dtype,
    }
    config = config.replace(**{k: v for k, v in overrides.items() if v is not None})

    schedule = TrainSchedule.preset(schedule_preset, workers=settings.workers)
    schedule = TrainSchedule.from_mapping({**schedule.__dict__, **schedule_values})
    overrides = {
        "phase1_steps": args.phase1_steps,
        "phase2_steps": args.phase2_steps,
        "batch": args.batch,
        "lr": args.lr,
        "warmup": args.warmup,
        "seed": args.seed,
        "workers": args.workers,
        "checkpoint_every": args.checkpoint_every,
        "log_every": args.log_every,
        "single_phase": True if args.single_phase else None,
        "relabel": True if args.relabel else None,
    }
    schedule = schedule.replace(**{k: v for k, v in overrides.items() if v is not None})
    return config, schedule


def cmd_train(args: argparse.Namespace, command: str, settings: Settings) -> int:
    config, schedule = _train_settings(args, settings)
    corpus = load_corpus(args.corpus)
    logger.info("Training %s on %d examples for %d steps", config, len(corpus), schedule.total_steps)
    try:
        result = train(corpus, config, schedule, out_dir=args.out, resume=args.resume, command=command)
    except NumericAbort as exc:
        logger.error("Training aborted at step %s; last good checkpoint: %s", exc.step, exc.last_checkpoint)
        raise
    final = result.losses[-1] if result.losses else float("nan")
    print(f"Trained {result.model.n_parameters} parameters for {result.state.step} steps; final loss {final:.5f}")
    print(f"Model: {result.last_checkpoint}")
    return 0


def cmd_gen_tree(args: argparse.Namespace, command: str) -> int:
    model = SplitTransformer.load(args.model)
    dataset = load_csv(args.data, label_column=args.label_column)
    block = sample_block(dataset, model.config.n_max, model.config.m_max, args.seed)
    tree = generate_tree(model, block, args.depth, seed=args.seed, exit_layer=args.exit_layer)
    tree = tree.remap_features(block.source_cols)
    out = Path(args.out) if args.out else Path(f"{dataset.name}.tree")
    out.parent.mkdir(parents=True, exist_ok=True)
    save_tree(tree, out, [f"command: {command}", f"data: {args.data}", f"model calls: {tree.info['model_calls']}"])
    print(f"Tree with {tree.n_splits} splits, depth {tree.realized_depth} -> {out}")
    if args.emit_dot:
        dot = out.with_suffix(".dot")
        header = "".join(f"// {line}\n" for line in _header_lines("tree dot", command))
        dot.write_text(header + tree.to_dot(dataset.feature_names, dataset.class_names), encoding="utf-8")
        print(f"DOT -> {dot}")
    return 0


def cmd_eval(args: argparse.Namespace, command: str) -> int:
    algorithms = [_algorithm(name.strip(), args) for name in args.algos.split(",") if name.strip()]
    datasets = load_dataset_dir(args.datasets, args.label_column)
    report = evaluate(algorithms, datasets, args.sizes, depth=args.depth, runs=args.runs, seed=args.seed,
                      workers=args.workers)
    out = Path(args.out)
    report.to_csv(out, _header_lines("eval report", command))
    summary = report.summary()
    largest = summary[summary["size"] == max(args.sizes)]
    print(f"Evaluated {len(algorithms)} algorithms on {len(datasets)} datasets -> {out}")
    for _, row in largest.iterrows():
        print(f"  {row['algorithm']:<18} {row['dataset']:<24} size {int(row['size']):>3}  "
              f"accuracy {row['mean_accuracy']:.4f}")
    return 0


def cmd_rank(args: argparse.Namespace, command: str) -> int:
    table = rank_table(EvalReport.from_csv(args.report))
    out = Path(args.out) if args.out else Path(args.report).with_name("rank.csv")
    _write_table(table, out, "rank table", command)
    print(f"{'Size':<6} {'Algorithm':<18} {'Mean rank':>10} {'Std':>8} {'Champions':>10}")
    print("-" * 56)
    for _, row in table.iterrows():
        print(f"{int(row['size']):<6} {row['algorithm']:<18} {row['mean_rank']:>10.3f} {row['std_rank']:>8.3f} "
              f"{int(row['champions']):>10}")
    return 0


def cmd_bias_variance(args: argparse.Namespace, command: str) -> int:
    algorithm = _algorithm(args.algo, args)
    dataset = load_csv(args.dataset, label_column=args.label_column)
    result = bias_variance(algorithm, dataset, args.reps, seed=args.seed, depth=args.depth, workers=args.workers)
    frame = pd.DataFrame([{
        "algorithm": algorithm.name,
        "dataset": dataset.name,
        "repetitions": args.reps,
        "depth": args.depth,
        "bias": result.bias,
        "variance": result.variance,
    }])
    if args.out:
        _write_table(frame, Path(args.out), "bias-variance", command)
    print(f"{algorithm.name} on {dataset.name}: bias {result.bias:.6f}, variance {result.variance:.6f}")
    return 0


def cmd_prefer(args: argparse.Namespace, command: str) -> int:
    model = SplitTransformer.load(args.model)
    datasets = load_dataset_dir(args.datasets, args.label_column)
    study = preference_study(
        model, datasets, args.blocks_per, seed=args.seed, edges=tuple(args.bucket_edges),
        corr_threshold=args.corr_threshold, gap_threshold=args.gap_threshold,
    )
    out = Path(args.out)
    _write_table(study.records, out / "records.csv", "preference records", command)
    _write_table(study.buckets, out / "buckets.csv", "preference buckets", command)
    print(f"Preference study: {len(study.records)} blocks, {int(study.records['kept'].sum()) if len(study.records) else 0}"
          f" kept, {study.retained} in regression, pearson {study.pearson:.4f}")
    print(f"Bucket edges |corr|: {study.edges[0]:.3f} / {study.edges[1]:.3f} -> {out}")
    return 0


def cmd_probe(args: argparse.Namespace, command: str) -> int:
    model = SplitTransformer.load(args.model)
    datasets = load_dataset_dir(args.datasets, args.label_column)
    blocks = dataset_blocks(datasets, args.blocks_per, seed=args.seed,
                            n=model.config.n_max, m=model.config.m_max)
    table = layer_probe_study(model, blocks)
    if args.out:
        _write_table(table, Path(args.out), "layer probe", command)
    for _, row in table.iterrows():
        print(f"layer {int(row['layer']):>2}: mean corr {row['mean_corr']:.4f} (std {row['std_corr']:.4f})")
    return 0


def cmd_grad_check(args: argparse.Namespace, command: str) -> int:
    config = ModelConfig.preset(args.preset)
    if args.config:
        model_values, _, _ = split_config_values(read_config_file(args.config))
        config = ModelConfig.from_mapping({**config.__dict__, **model_values})
    results = primitive_checks(args.seed)
    report = model_loss_check(config, seed=args.seed, max_coords=args.max_coords)
    results["model-loss"] = report.max_relative_error
    for name, value in results.items():
        status = "ok" if value < args.tolerance else "FAIL"
        print(f"{name:<16} {value:.3e}  {status}")
    worst = max(results.values())
    print(f"max relative error {worst:.3e} (tolerance {args.tolerance:g})")
    if worst >= args.tolerance:
        raise NumericAbort(f"Gradient check failed: max relative error {worst:.3e}")
    return 0


def cmd_xor_sweep(args: argparse.Namespace, command: str) -> int:
    algorithm = _algorithm(args.algo, args)
    table = xor_sweep(algorithm, args.levels, args.noise, datasets=args.count, seed=args.seed, depth=args.depth,
                      n_train=args.n, n_test=args.n_test, extra_noise_dims=args.noise_dims, workers=args.workers)
    if args.out:
        _write_table(table, Path(args.out), "xor sweep", command)
    for _, row in table.iterrows():
        print(f"L{int(row['level'])} noise {row['noise']:.2f}: accuracy {row['mean_accuracy']:.4f}, "
              f"relative error {100 * row['relative_error']:.2f} pts")
    return 0


# ----------------------------------------------------------------------------
# Parser


def build_parser(settings: Optional[Settings] = None) -> argparse.ArgumentParser:
    settings = settings or Settings()
    parser = argparse.ArgumentParser(
        prog="treekit",
        description="Classical and learned decision-tree induction",
        epilog=generate_help_text(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("--version", action="version", version=f"treekit {__version__}")
    parser.add_argument("--log-level", default=None, help="Logging level (default: TREEKIT_LOG_LEVEL or INFO)")
    parser.add_argument("--env-file", default=None, help="Load environment variables from this .env file")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    def add(name: str, help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", default=None, help="key = value file; flags override its values")
        return p

    def label_column(p):
        p.add_argument("--label-column", default="label", help="Label column name or index (default: label)")

    def workers(p):
        p.add_argument("--workers", type=int, default=settings.workers,
                       help=f"Worker threads (default: {settings.workers})")

    p = add("gen-xor", "Write synthetic XOR datasets and their generating specs")
    p.add_argument("--level", type=int, choices=[1, 2], default=1)
    p.add_argument("--noise", type=float, default=0.0, help="Label flip rate in [0, 0.5)")
    p.add_argument("--n", type=int, default=256, help="Rows per dataset (default: 256)")
    p.add_argument("--noise-dims", type=int, default=8, help="Uninformative features (default: 8)")
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--out", default="xor")
    p.add_argument("--seed", type=int, default=0)

    p = add("build-corpus", "Fit teacher trees on sampled blocks and save the corpus")
    p.add_argument("--datasets", required=True, help="Directory of CSV files or comma-separated file list")
    p.add_argument("--per-dataset", type=int, default=100)
    p.add_argument("--block-rows", type=int, default=DEFAULT_BLOCK_ROWS,
                   help=f"Rows per sampled block (default: {DEFAULT_BLOCK_ROWS}; must fit the model)")
    p.add_argument("--block-cols", type=int, default=DEFAULT_BLOCK_COLS,
                   help=f"Columns per sampled block (default: {DEFAULT_BLOCK_COLS})")
    p.add_argument("--lambda", dest="lam", type=float, default=DEFAULT_LAMBDA)
    p.add_argument("--out", default="corpus")
    p.add_argument("--seed", type=int, default=0)
    workers(p)
    label_column(p)

    p = add("train", "Train the split model with the two-phase curriculum")
    p.add_argument("--corpus", required=True)
    p.add_argument("--preset", choices=sorted(MODEL_PRESETS), default="desk")
    p.add_argument("--phase1-steps", type=int, default=None)
    p.add_argument("--phase2-steps", type=int, default=None)
    p.add_argument("--batch", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--warmup", type=int, default=None)
    p.add_argument("--sigma", type=float, default=None, help="Target smoothing width")
    p.add_argument("--positional-bias", type=_on_off, default=None, metavar="on|off")
    p.add_argument("--dtype", choices=["float32", "float64"], default=None)
    p.add_argument("--single-phase", action="store_true", help="Train on the mixed stream for every step")
    p.add_argument("--relabel", action="store_true", help="Replace block labels by teacher predictions")
    p.add_argument("--checkpoint-every", type=int, default=None)
    p.add_argument("--log-every", type=int, default=None)
    p.add_argument("--out", default="run")
    p.add_argument("--resume", default=None, help="Checkpoint to continue from")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--workers", type=int, default=None)

    p = add("gen-tree", "Generate one tree from a sampled block of a CSV dataset")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--depth", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    p.add_argument("--emit-dot", action="store_true")
    p.add_argument("--exit-layer", type=int, default=None, help="Read splits from this layer's probe")
    label_column(p)

    p = add("eval", "Ensemble accuracy of several algorithms on paired blocks")
    p.add_argument("--algos", default="greedy-gini,optimal-d2")
    p.add_argument("--datasets", required=True)
    p.add_argument("--sizes", type=_int_list, default=list(DEFAULT_SIZES))
    p.add_argument("--depth", type=int, default=2)
    p.add_argument("--runs", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lambda", dest="lam", type=float, default=DEFAULT_LAMBDA)
    p.add_argument("--model", default=None)
    p.add_argument("--out", default="eval.csv")
    workers(p)
    label_column(p)

    p = add("rank", "Average rank and champion counts from an eval report")
    p.add_argument("--report", required=True)
    p.add_argument("--out", default=None)

    p = add("bias-variance", "Empirical bias and variance of one algorithm")
    p.add_argument("--algo", default="greedy-gini")
    p.add_argument("--dataset", required=True)
    p.add_argument("--reps", type=int, default=100)
    p.add_argument("--depth", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lambda", dest="lam", type=float, default=DEFAULT_LAMBDA)
    p.add_argument("--model", default=None)
    p.add_argument("--out", default=None)
    workers(p)
    label_column(p)

    p = add("prefer", "Split-preference study of a trained model against both teachers")
    p.add_argument("--model", required=True)
    p.add_argument("--datasets", required=True)
    p.add_argument("--blocks-per", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--corr-threshold", type=float, default=0.7)
    p.add_argument("--gap-threshold", type=float, default=0.08)
    p.add_argument("--bucket-edges", type=_float_list, default=[1 / 3, 2 / 3])
    p.add_argument("--out", default="prefer")
    label_column(p)

    p = add("probe", "Per-layer split correlation with the final layer")
    p.add_argument("--model", required=True)
    p.add_argument("--datasets", required=True)
    p.add_argument("--blocks-per", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    label_column(p)

    p = add("grad-check", "Finite-difference check of every primitive and of the full model loss")
    p.add_argument("--preset", choices=sorted(MODEL_PRESETS), default="desk-tiny")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-coords", type=int, default=200)
    p.add_argument("--tolerance", type=float, default=GRAD_TOLERANCE)

    p = add("xor-sweep", "Accuracy and relative error over XOR levels and noise rates")
    p.add_argument("--algo", default="greedy-gini")
    p.add_argument("--model", default=None)
    p.add_argument("--levels", type=_int_list, default=[1, 2])
    p.add_argument("--noise", type=_float_list, default=list(DEFAULT_NOISE_RATES))
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--n", type=int, default=256)
    p.add_argument("--n-test", type=int, default=1000)
    p.add_argument("--noise-dims", type=int, default=8)
    p.add_argument("--depth", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lambda", dest="lam", type=float, default=DEFAULT_LAMBDA)
    p.add_argument("--out", default=None)
    workers(p)
    return parser


COMMANDS: Dict[str, Callable] = {
    "gen-xor": cmd_gen_xor,
    "build-corpus": cmd_build_corpus,
    "gen-tree": cmd_gen_tree,
    "eval": cmd_eval,
    "rank": cmd_rank,
    "bias-variance": cmd_bias_variance,
    "prefer": cmd_prefer,
    "probe": cmd_probe,
    "grad-check": cmd_grad_check,
    "xor-sweep": cmd_xor_sweep,
}


def _apply_config_defaults(parser: argparse.ArgumentParser, argv: Sequence[str]) -> None:
    """File values become subcommand defaults, so explicit flags still win."""
    known, _ = parser.parse_known_args(argv)
    path = getattr(known, "config", None)
    if not path or known.command in ("train", "grad-check"):
        return
    subparsers = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    sub = subparsers.choices[known.command]
    dests = {a.dest: a for a in sub._actions}
    defaults = {}
    for key, value in read_config_file(path).items():
        dest = key.strip().replace("-", "_")
        if dest == "lambda":
            dest = "lam"
        if dest not in dests:
            raise ContractViolation(f"Config key {key!r} is not an option of {known.command}")
        action = dests[dest]
        defaults[dest] = action.type(value) if action.type is not None else value
    sub.set_defaults(**defaults)


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    command = "treekit " + " ".join(shlex.quote(a) for a in argv)
    try:
        pre = argparse.ArgumentParser(add_help=False)
        pre.add_argument("--env-file", default=None)
        early, _ = pre.parse_known_args(argv)
        settings = Settings.from_env(early.env_file)
        parser = build_parser(settings)
        _apply_config_defaults(parser, argv)
        args = parser.parse_args(argv)

        logging.basicConfig(
            level=(args.log_level or settings.log_level).upper(),
            format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        )
        ad.set_debug_numerics(settings.debug_numerics)
        if args.command == "train":
            return cmd_train(args, command, settings)
        return COMMANDS[args.command](args, command)
    except TreekitError as exc:
        print(format_error_line(exc), file=sys.stderr)
        return exc.exit_code
    except argparse.ArgumentTypeError as exc:
        print(f"treekit-error[2]: ContractViolation: {exc}", file=sys.stderr)
        return 2
    except SystemExit as exc:
        return int(exc.code or 0) if not isinstance(exc.code, str) else 2


if __name__ == "__main__":
    sys.exit(main())
