"""Command-line entry point: ``tactnet <command> [options]``.

Every command writes ``manifest.json`` into ``--out`` before computing
anything, then its artifacts and figures next to it, and prints a
tab-delimited summary on stdout. ``--config`` takes a JSON object of option
values (or a previous run's manifest) that overrides the command line.

Exit codes: 0 success, 1 invalid input or usage, 2 failure while running.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .classifiers import HEAD_CONFIG, export_features, finetune_head, import_features, train_svm
from .dataset import (
    Dataset, DatasetFormatError, load_dataset, make_splits, read_frame_csv, save_dataset,
    synthesize_dataset, write_frame_csv,
)
from .experiments import (
    CnnProtocol, SUBSETS, benchmark, degrade_dataset, evaluate, gradient_check, layer_suite,
    prepare_subsets, public, repeated_trials, resolution_sweep, time_inference, to_source_input,
    train_model, write_history, write_json,
)
from .image_ops import RESOLUTION_LADDER, TactileFrame, bicubic_resize, parse_level
from .models import (
    VARIANTS, CheckpointError, build_tactnet, extract_features, load_checkpoint, parameter_count,
    save_checkpoint,
)
from .training import DivergenceError, TrainConfig

EXIT_OK, EXIT_INVALID, EXIT_FAILED = 0, 1, 2
LEVELS = [str(k) for k in sorted(RESOLUTION_LADDER)]
# options that describe where a run goes rather than what it computes
_NOT_CONFIG = {"out", "config", "command", "action", "func", "parallel"}


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _emit(rows):
    for row in rows:
        print("\t".join(str(v) for v in row))


def _fmt(v):
    return f"{v:.6f}" if isinstance(v, float) else v


# -- shared option groups ------------------------------------------------------------------------

def _common():
    p = Parser(add_help=False)
    g = p.add_argument_group("global options")
    g.add_argument("--seed", type=int, default=0, help="base random seed")
    g.add_argument("--config", type=Path, default=None, help="JSON overrides or a previous manifest.json")
    g.add_argument("--out", type=Path, default=Path("out"), help="output directory")
    return p


def _training_options(p, defaults=TrainConfig()):
    g = p.add_argument_group("training")
    g.add_argument("--epochs", type=int, default=defaults.max_epochs, help="maximum epochs")
    g.add_argument("--lr", type=float, default=defaults.lr, help="initial learning rate")
    g.add_argument("--momentum", type=float, default=defaults.momentum, help="SGD momentum")
    g.add_argument("--weight-decay", type=float, default=defaults.weight_decay, help="L2 weight decay")
    g.add_argument("--batch-size", type=int, default=defaults.batch_size, help="minibatch size")
    g.add_argument("--lr-drop-epoch", type=int, default=defaults.lr_drop_epoch,
                   help="epoch at which the learning rate is multiplied by 0.1 (0 disables)")
    g.add_argument("--patience", type=int, default=defaults.patience, help="early-stopping patience in epochs")


def _train_config(args, seed=None) -> TrainConfig:
    return TrainConfig(lr=args.lr, momentum=args.momentum, weight_decay=args.weight_decay,
                       batch_size=args.batch_size, max_epochs=args.epochs, lr_drop_epoch=args.lr_drop_epoch,
                       patience=args.patience, seed=args.seed if seed is None else seed)


def _data_option(p, required=True):
    p.add_argument("--data", type=Path, required=required, default=None, help="TDAT dataset file")
    p.add_argument("--level", default="1", choices=LEVELS, help="software resolution level")
    p.add_argument("--no-augment", dest="augment", action="store_false", help="skip the x6 subset expansion")


def _load_data(args) -> Dataset:
    ds = load_dataset(args.data)
    level = parse_level(args.level)
    return degrade_dataset(ds, level) if level != 1 else ds


# -- commands ----------------------------------------------------------------------------------------

def cmd_synth(args, out):
    ds = synthesize_dataset(args.n_per_class, args.seed)
    path = out / "synth.tdat"
    save_dataset(ds, path)
    if args.figures:
        _gallery(ds, out / "synth_gallery.png")
    _emit([("frames", len(ds)), ("classes", len(ds.class_names)), ("checksum", ds.checksum()), ("path", path)])


def _gallery(ds, path):
    from .plotting import STYLE, _save, plt
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(4, 6, figsize=(9, 3.6))
        for ax in axes.flat:
            ax.axis("off")
        for k, ax in zip(range(len(ds.class_names)), axes.flat):
            first = next((f for f in ds.frames if f.label == k), None)
            if first is not None:
                ax.imshow(first.values, cmap="inferno", vmin=0, vmax=1)
                ax.set_title(ds.class_names[k], fontsize=7)
        _save(fig, path)


def cmd_train(args, out):
    ds = _load_data(args)
    plan = make_splits(ds, args.seed)
    subsets = prepare_subsets(ds, plan, args.augment)
    graph = build_tactnet(args.variant, *ds.shape, seed=args.seed)
    config = _train_config(args)
    result = train_model(graph, subsets["train"], subsets["val"], config, out / "history.csv", out / "model.tnet")
    echo = {"variant": args.variant, "level": args.level, "augment": args.augment, "config": config.to_dict(),
            "best_epoch": result.best_epoch}
    reports = {name: evaluate(graph, subsets[name].x, subsets[name].y, echo, args.seed) for name in SUBSETS}
    write_json(out / "report.json", {k: r.to_dict() for k, r in reports.items()})
    write_json(out / "timing.json", time_inference(graph.predict, subsets["test"].x[0], args.timing_samples))
    if args.figures:
        from .plotting import confusion_heatmap, learning_curves
        learning_curves({args.variant: result.history}, out / "learning_curve.png")
        confusion_heatmap(reports["test"].confusion, ds.class_names, out / "confusion_test.png", args.variant)
    _emit([("subset", "accuracy", "n")] + [(k, _fmt(r.accuracy), r.n) for k, r in reports.items()]
          + [("best_epoch", result.best_epoch, ""), ("parameters", parameter_count(graph), "")])


def cmd_eval(args, out):
    graph = load_checkpoint(args.model)
    ds = _load_data(args)
    if args.all:
        x, y = ds.values(), ds.labels
    else:
        sub = prepare_subsets(ds, make_splits(ds, args.seed), args.augment)[args.subset]
        x, y = sub.x, sub.y
    x = _fit_input(graph, x)
    report = evaluate(graph, x, y, {"model": str(args.model), "subset": "all" if args.all else args.subset},
                      args.seed, args.timing_samples)
    write_json(out / "report.json", report.to_dict())
    write_json(out / "timing.json", report.timing)
    if args.figures:
        from .plotting import confusion_heatmap
        confusion_heatmap(report.confusion, ds.class_names, out / "confusion.png", graph.variant)
    _emit([("accuracy", _fmt(report.accuracy)), ("n", report.n), ("mean_ms", _fmt(report.timing["mean_ms"]))])


def _fit_input(graph, x):
    """Resize and replicate frames for a 3-channel network; pass others through."""
    if len(graph.input_shape) == 3 and graph.input_shape[-1] == 3:
        return to_source_input([TactileFrame(v) for v in x], graph.input_shape[:2])
    if tuple(graph.input_shape[:2]) != tuple(np.shape(x)[1:3]):
        raise ValueError(f"model expects {graph.input_shape[0]}x{graph.input_shape[1]} frames, "
                         f"data has {np.shape(x)[1]}x{np.shape(x)[2]}")
    return x


def _seeds(args):
    if args.n < 2:
        raise ValueError("--n must be at least 2")
    return list(range(args.seed, args.seed + args.n))


def cmd_trials(args, out):
    ds = _load_data(args)
    protocol = CnnProtocol(args.variant, _train_config(args), args.augment, args.timing_samples)
    summary = repeated_trials(protocol, ds, _seeds(args), out, args.parallel)
    if args.figures:
        from .plotting import accuracy_bars, learning_curves
        accuracy_bars({args.variant: summary["summary"]}, out / "accuracy_bars.png")
        first_ok = next((r for r in summary["_records"] if r["status"] == "ok"), None)
        if first_ok is not None:
            hist = _read_history(out / f"trial_{first_ok['seed']:04d}" / "history.csv")
            learning_curves({f"{args.variant} seed {first_ok['seed']}": hist}, out / "learning_curve.png")
    rows = [("subset", "mean", "std", "n")]
    rows += [(k, _fmt(v["mean"]), _fmt(v["std"]), v["n"]) for k, v in summary["summary"].items()]
    rows.append(("failed", len(summary["failed"]), "", ""))
    _emit(rows)
    if len(summary["failed"]) == len(summary["seeds"]):
        raise RuntimeError("every trial failed")


def _read_history(path):
    import csv
    with open(path, encoding="utf-8") as fh:
        return [{"epoch": int(r["epoch"]), "train_acc": float(r["train_acc"]), "val_acc": float(r["val_acc"]),
                 "loss": float(r["loss"])} for r in csv.DictReader(fh)]


def cmd_sweep(args, out):
    ds = load_dataset(args.data)
    levels = args.levels or LEVELS
    report = resolution_sweep(ds, args.variant, levels, _seeds(args), _train_config(args), args.augment,
                              out, args.parallel, args.timing_samples)
    if args.figures:
        from .plotting import sweep_plot
        sweep_plot(report, out / "sweep.png", report["_timing"])
    rows = [("level", "grid", "tactels", "test_mean", "test_std", "mean_ms")]
    for e in report["levels"]:
        if e["status"] != "ok":
            rows.append((e["level"], "x".join(map(str, e["grid"])), e["tactels"], e["status"], "", ""))
            continue
        t = report["_timing"].get(e["level"], {})
        rows.append((e["level"], "x".join(map(str, e["grid"])), e["tactels"], _fmt(e["summary"]["test"]["mean"]),
                     _fmt(e["summary"]["test"]["std"]), _fmt(t.get("mean_ms", float("nan")))))
    _emit(rows)


def cmd_features(args, out):
    if args.action == "import":
        fs = import_features(args.input)
        write_json(out / "features.json", {"path": str(args.input), "n": len(fs), "dim": fs.dim,
                                           "class_counts": np.bincount(fs.labels, minlength=22).tolist()})
        _emit([("n", len(fs)), ("dim", fs.dim)])
        return
    if args.model is None or args.data is None:
        raise ValueError("features extract needs --model and --data")
    graph = load_checkpoint(args.model)
    ds = _load_data(args)
    plan = make_splits(ds, args.seed)
    subsets = prepare_subsets(ds, plan, args.augment)
    rows = [("subset", "n", "dim", "path")]
    for name in SUBSETS:
        x = _fit_input(graph, subsets[name].x)
        fs = extract_features(graph, x, subsets[name].y)
        path = out / f"features_{name}.csv"
        export_features(fs, path)
        rows.append((name, len(fs), fs.dim, path))
    _emit(rows)


def _feature_splits(args):
    train = import_features(args.train)
    val = import_features(args.val) if args.val else None
    test = import_features(args.test) if args.test else None
    return train, val, test


def cmd_svm(args, out):
    train, val, test = _feature_splits(args)
    model = train_svm(train, val, args.lam, args.svm_epochs, args.seed)
    parts = {"train": train, "val": val, "test": test}
    reports = {k: evaluate(model, fs.features, fs.labels, {"lambda": args.lam, "epochs": args.svm_epochs}, args.seed)
               for k, fs in parts.items() if fs is not None}
    write_json(out / "report.json", {k: r.to_dict() for k, r in reports.items()})
    write_json(out / "svm_model.json", {"weights": model.weights.tolist(), "biases": model.biases.tolist(),
                                        "mean": model.mean.tolist(), "std": model.std.tolist(),
                                        "lambda": model.lam, "epochs": model.epochs, "seed": model.seed,
                                        "objective": model.objective})
    _emit([("subset", "accuracy", "n")] + [(k, _fmt(r.accuracy), r.n) for k, r in reports.items()])


def cmd_head(args, out):
    train, val, test = _feature_splits(args)
    if val is None:
        raise ValueError("head needs --val for early stopping")
    config = HEAD_CONFIG.replace(lr=args.lr, max_epochs=args.epochs, patience=args.patience,
                                 batch_size=args.batch_size, seed=args.seed)
    model = finetune_head(train, val, config)
    parts = {"train": train, "val": val, "test": test}
    reports = {k: evaluate(model, fs.features, fs.labels, config.to_dict(), args.seed)
               for k, fs in parts.items() if fs is not None}
    write_json(out / "report.json", {k: r.to_dict() for k, r in reports.items()})
    save_checkpoint(model.graph, out / "head.tnet")
    write_json(out / "head_standardizer.json", {"mean": model.mean.tolist(), "std": model.std.tolist()})
    write_history(model.history, out / "history.csv")
    _emit([("subset", "accuracy", "n")] + [(k, _fmt(r.accuracy), r.n) for k, r in reports.items()]
          + [("best_epoch", model.best_epoch, "")])


def cmd_bench(args, out):
    variants = VARIANTS if args.variant == "all" else [args.variant]
    result = benchmark(variants, args.rows, args.cols, args.n, seed=args.seed)
    write_json(out / "bench.json", result)
    _emit([("variant", "parameters", "mean_ms", "std_ms", "n")]
          + [(v, r["parameter_count"], _fmt(r["mean_ms"]), _fmt(r["std_ms"]), r["n"]) for v, r in result.items()])


def cmd_gradcheck(args, out):
    rows = [("graph", "layer", "kind", "max_rel_error", "passed")]
    results = {}
    if args.suite in ("layers", "all"):
        for name, graph, x, y in layer_suite(args.seed):
            results[name] = gradient_check(graph, x, y, tolerance=1e-4, seed=args.seed)
    if args.suite in ("full", "all"):
        rng = np.random.default_rng(args.seed)
        for variant in VARIANTS:
            graph = build_tactnet(variant, seed=args.seed, dtype=np.float64)
            x = rng.random((2, 28, 50))
            results[variant] = gradient_check(graph, x, rng.integers(0, 22, 2), tolerance=1e-3,
                                              samples=args.samples, seed=args.seed)
    write_json(out / "gradcheck.json", results)
    for name, rep in results.items():
        for layer, info in rep["layers"].items():
            rows.append((name, layer, info["kind"], f"{info['max_rel_error']:.3e}", info["passed"]))
    _emit(rows)
    if not all(r["passed"] for r in results.values()):
        raise RuntimeError("gradient check failed")


def cmd_resize(args, out):
    values = np.loadtxt(args.input, delimiter=",", ndmin=2)
    frame = TactileFrame(values, None, args.input.stem)
    resized = bicubic_resize(frame, args.rows, args.cols)
    path = out / f"{args.input.stem}_{args.rows}x{args.cols}.csv"
    write_frame_csv(resized.values, path)
    _emit([("rows", args.rows), ("cols", args.cols), ("path", path)])


# -- parser --------------------------------------------------------------------------------------------

def build_parser() -> Parser:
    common = _common()
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = Parser(prog="tactnet", description="Tactile pressure-image classification toolkit.", formatter_class=fmt)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=Parser)
    sub.required = True

    def add(name, func, help_text):
        p = sub.add_parser(name, parents=[common], help=help_text, description=help_text, formatter_class=fmt)
        p.set_defaults(func=func)
        return p

    def figures(p):
        p.add_argument("--no-figures", dest="figures", action="store_false", help="skip rendering figures")

    def timing(p, default=200):
        p.add_argument("--timing-samples", type=int, default=default, help="single-image inferences to time")

    p = add("synth", cmd_synth, "generate the procedural 22-class dataset")
    p.add_argument("--n-per-class", type=int, default=50, help="frames per class")
    figures(p)

    p = add("train", cmd_train, "train one TactNet variant on one split")
    p.add_argument("--variant", choices=VARIANTS, default="tactnet6", help="network variant")
    _data_option(p)
    _training_options(p)
    timing(p)
    figures(p)

    p = add("eval", cmd_eval, "evaluate a checkpoint on a dataset split")
    p.add_argument("--model", type=Path, required=True, help="TNET checkpoint")
    _data_option(p)
    p.add_argument("--subset", choices=SUBSETS, default="test", help="split subset to evaluate")
    p.add_argument("--all", action="store_true", help="evaluate every frame instead of a split subset")
    timing(p)
    figures(p)

    for name, func, text in (("trials", cmd_trials, "repeated randomized trials of one variant"),
                             ("sweep", cmd_sweep, "resolution sweep over the tactel ladder")):
        p = add(name, func, text)
        p.add_argument("--variant", choices=VARIANTS, default="tactnet6", help="network variant")
        p.add_argument("--n", type=int, default=20 if name == "trials" else 5, help="number of trial seeds")
        if name == "trials":
            _data_option(p)
        else:
            p.add_argument("--data", type=Path, required=True, help="TDAT dataset file")
            p.add_argument("--levels", nargs="+", choices=LEVELS, default=None, help="ladder levels (default: all)")
            p.add_argument("--no-augment", dest="augment", action="store_false", help="skip the x6 subset expansion")
        p.add_argument("--parallel", type=int, default=1, help="worker processes")
        _training_options(p)
        timing(p, 200 if name == "sweep" else 0)
        figures(p)

    p = add("features", cmd_features, "extract or import feature vectors")
    p.add_argument("action", choices=("extract", "import"), help="extract from a checkpoint or import a CSV")
    p.add_argument("--model", type=Path, help="TNET checkpoint (extract)")
    _data_option(p, required=False)
    p.add_argument("--in", dest="input", type=Path, help="feature CSV (import)")

    for name, func, text in (("svm", cmd_svm, "one-vs-rest linear SVM over feature CSVs"),
                             ("head", cmd_head, "fine-tune a softmax head over feature CSVs")):
        p = add(name, func, text)
        p.add_argument("--train", type=Path, required=True, help="training feature CSV")
        p.add_argument("--val", type=Path, default=None, help="validation feature CSV")
        p.add_argument("--test", type=Path, default=None, help="test feature CSV")
        if name == "svm":
            p.add_argument("--lambda", dest="lam", type=float, default=1e-4, help="regularization strength")
            p.add_argument("--svm-epochs", type=int, default=20, help="passes over the training set")
        else:
            p.add_argument("--epochs", type=int, default=HEAD_CONFIG.max_epochs, help="maximum epochs")
            p.add_argument("--lr", type=float, default=HEAD_CONFIG.lr, help="learning rate")
            p.add_argument("--batch-size", type=int, default=HEAD_CONFIG.batch_size, help="minibatch size")
            p.add_argument("--patience", type=int, default=HEAD_CONFIG.patience, help="early-stopping patience")

    p = add("bench", cmd_bench, "single-image inference timing")
    p.add_argument("--variant", choices=VARIANTS + ("all",), default="all", help="network variant")
    p.add_argument("--rows", type=int, default=28, help="input rows")
    p.add_argument("--cols", type=int, default=50, help="input columns")
    p.add_argument("--n", type=int, default=200, help="timed inferences after 10 warmup calls")

    p = add("gradcheck", cmd_gradcheck, "finite-difference gradient verification")
    p.add_argument("--suite", choices=("layers", "full", "all"), default="all", help="what to check")
    p.add_argument("--samples", type=int, default=6, help="sampled entries per tensor for full graphs")

    p = add("resize", cmd_resize, "bicubic resize of one frame CSV")
    p.add_argument("--in", dest="input", type=Path, required=True, help="frame CSV (values in [0, 1])")
    p.add_argument("--rows", type=int, required=True, help="target rows")
    p.add_argument("--cols", type=int, required=True, help="target columns")

    # required options may come from --config, so they are checked after merging
    parser.required_options = {}
    for name, p in sub.choices.items():
        for action in p._actions:
            if action.required and action.option_strings:
                action.required = False
                parser.required_options.setdefault(name, []).append((action.dest, action.option_strings[0]))
    return parser


def _check_required(args, parser):
    missing = [flag for dest, flag in parser.required_options.get(args.command, ()) if getattr(args, dest) is None]
    if missing:
        raise UsageError(f"tactnet {args.command}: error: the following arguments are required: {', '.join(missing)}")


# -- dispatch -------------------------------------------------------------------------------------------

def _apply_config(args, parser):
    if args.config is None:
        return args
    try:
        data = json.loads(Path(args.config).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ValueError(f"cannot read config {args.config}: {exc}") from None
    if not isinstance(data, dict):
        raise ValueError("config must be a JSON object")
    if "command" in data and "config" in data:
        if data["command"] != args.command:
            raise ValueError(f"manifest is for {data['command']!r}, not {args.command!r}")
        data = data["config"]
    known = set(vars(args)) - _NOT_CONFIG
    unknown = set(data) - known
    if unknown:
        raise ValueError(f"unknown config keys: {', '.join(sorted(unknown))}")
    for key, value in data.items():
        current = getattr(args, key)
        if isinstance(current, Path) or (current is None and key in {"data", "model", "input", "train", "val", "test"}):
            value = Path(value) if value is not None else None
        setattr(args, key, value)
    return args


def _resolved(args) -> dict:
    out = {}
    for key, value in sorted(vars(args).items()):
        if key in _NOT_CONFIG:
            continue
        out[key] = str(value) if isinstance(value, Path) else value
    return out


def _checksum_of(args):
    path = getattr(args, "data", None)
    if path is None:
        return None
    return load_dataset(path).checksum()


def write_manifest(args, out: Path) -> dict:
    resolved = _resolved(args)
    seeds = list(range(args.seed, args.seed + args.n)) if args.command in ("trials", "sweep") else [args.seed]
    manifest = {"command": args.command, "config": resolved, "dataset_checksum": _checksum_of(args), "seeds": seeds,
                "version": __version__, "out": str(out)}
    write_json(out / "manifest.json", manifest)
    return manifest


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        args = _apply_config(args, parser)
        _check_required(args, parser)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_manifest(args, out)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INVALID
    except SystemExit as exc:  # --help and --version
        return int(exc.code or 0)
    except (ValueError, OSError, DatasetFormatError, CheckpointError) as exc:
        print(f"tactnet: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    try:
        with np.errstate(over="ignore", invalid="ignore"):
            args.func(args, out)
    except (DatasetFormatError, CheckpointError, FileNotFoundError) as exc:
        print(f"tactnet: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except ValueError as exc:
        print(f"tactnet: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (DivergenceError, RuntimeError, FloatingPointError, MemoryError, OSError) as exc:
        print(f"tactnet: failed: {exc}", file=sys.stderr)
        return EXIT_FAILED
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
