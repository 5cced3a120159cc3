"""Training loop, evaluation, repeated trials, timing, sweeps and gradient checks.

Report JSON is a pure function of (seed, configuration, dataset). Wall-clock
measurements live in separate ``timing.json`` sidecars so that repeating a
run reproduces the report bytes exactly.
"""

from __future__ import annotations

import csv
import gc
import json
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor_core as tc
from .classifiers import HEAD_CONFIG, finetune_head, train_svm
from .dataset import Dataset, make_splits
from .image_ops import (
    N_CLASSES, RESOLUTION_LADDER, TactileFrame, bicubic_resize, degrade_resolution,
    expand_set, parse_level, replicate_channels,
)
from .models import (
    BatchNorm, Conv, Dense, Flatten, MaxPool, ModelGraph, ReLU, Residual, build_tactnet, extract_features, parameter_count, save_checkpoint,
)
from .training import DivergenceError, TrainConfig, sgd_epoch

SUBSETS = ("train", "val", "test")
TIMING_WARMUP = 10
TIMING_SAMPLES = 200


def write_json(path, payload) -> None:
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _subset_seed(trial_seed: int, k: int) -> int:
    return int(np.random.SeedSequence([int(trial_seed), k]).generate_state(1)[0])


# -- data preparation -------------------------------------------------------------------

@dataclass
class SubsetArrays:
    x: np.ndarray
    y: np.ndarray
    origins: list

    def __len__(self):
        return len(self.y)


def _arrays(frames) -> SubsetArrays:
    x = np.stack([f.values for f in frames]).astype(np.float32) if frames else np.zeros((0, 1, 1), np.float32)
    return SubsetArrays(x, np.array([f.label for f in frames], dtype=np.int64), [f.origin for f in frames])


def prepare_subsets(dataset: Dataset, plan, augment: bool = True) -> dict:
    """Split, then (optionally) expand each subset x6 with independent seeded transforms."""
    out = {}
    for k, name in enumerate(SUBSETS):
        frames = [dataset.frames[i] for i in getattr(plan, name)]
        if augment:
            frames = expand_set(frames, rng_seed=_subset_seed(plan.seed, k))
        out[name] = _arrays(frames)
    return out


# -- training -----------------------------------------------------------------------------

@dataclass
class TrainResult:
    graph: ModelGraph
    history: list
    best_epoch: int
    best_val: float


def train_model(graph: ModelGraph, train: SubsetArrays, val: SubsetArrays, config: TrainConfig,
                history_path=None, checkpoint_path=None) -> TrainResult:
    """Momentum SGD with a step learning-rate drop, early stopping and best-val selection.

    ``graph`` is trained in place and finally holds the best-validation
    parameters and running statistics.
    """
    if len(train) < 2:
        raise ValueError("training needs at least two frames")
    if config.batch_size > len(train):
        raise ValueError(f"batch size {config.batch_size} exceeds the {len(train)} training frames")
    if len(val) == 0:
        raise ValueError("training needs a non-empty validation set")
    rng = np.random.default_rng(config.seed)
    velocity: dict = {}
    history = []
    best_val, best_epoch, best = -1.0, 0, None
    for epoch in range(config.max_epochs):
        loss, train_acc = sgd_epoch(graph, train.x, train.y, config, rng, velocity, epoch)
        val_acc = float(np.mean(graph.predict(val.x) == val.y))
        history.append({"epoch": epoch + 1, "train_acc": train_acc, "val_acc": val_acc, "loss": loss})
        if val_acc > best_val:
            best_val, best_epoch = val_acc, epoch + 1
            best = ({k: v.copy() for k, v in graph.params.items()}, {k: v.copy() for k, v in graph.state.items()})
        elif epoch + 1 - best_epoch >= config.patience:
            break
    if best is not None:
        graph.params, graph.state = best
    if history_path is not None:
        write_history(history, history_path)
    if checkpoint_path is not None:
        save_checkpoint(graph, checkpoint_path)
    return TrainResult(graph, history, best_epoch, best_val)


def write_history(history, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "train_acc", "val_acc", "loss"])
        for row in history:
            writer.writerow([row["epoch"], repr(row["train_acc"]), repr(row["val_acc"]), repr(row["loss"])])


# -- evaluation ------------------------------------------------------------------------------

@dataclass
class EvalReport:
    accuracy: float
    confusion: np.ndarray
    precision: list
    recall: list
    n: int
    parameter_count: int
    config: dict = field(default_factory=dict)
    seed: int = 0
    timing: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        """Deterministic fields only; timing goes to a separate sidecar."""
        return {"accuracy": self.accuracy, "confusion": self.confusion.tolist(),
                "precision": self.precision, "recall": self.recall, "n": self.n,
                "parameter_count": self.parameter_count, "config": self.config, "seed": self.seed}


def confusion_matrix(y_true, y_pred, k=N_CLASSES) -> np.ndarray:
    """Rows are true classes, columns predicted classes."""
    return np.bincount(np.asarray(y_true) * k + np.asarray(y_pred), minlength=k * k).reshape(k, k)


def _time_samples(predict, sample, n, warmup) -> np.ndarray:
    if n < 2:
        raise ValueError("timing needs at least two measured inferences")
    sample = np.asarray(sample)[None]
    for _ in range(warmup):
        predict(sample)
    times = np.empty(n)
    enabled = gc.isenabled()
    gc.disable()
    try:
        for i in range(n):
            t0 = time.perf_counter()
            predict(sample)
            times[i] = time.perf_counter() - t0
    finally:
        if enabled:
            gc.enable()
    return times * 1e3


def _timing_stats(ms, warmup, **extra) -> dict:
    return {"mean_ms": float(ms.mean()), "std_ms": float(ms.std(ddof=1)), "median_ms": float(np.median(ms)),
            "n": int(ms.size), "warmup": int(warmup), **extra}


def time_inference(predict, sample, n=TIMING_SAMPLES, warmup=TIMING_WARMUP) -> dict:
    """Single-image wall-clock statistics in milliseconds, warmup calls excluded."""
    return _timing_stats(_time_samples(predict, sample, n, warmup), warmup)


def interleaved_timing(cases: dict, n=TIMING_SAMPLES, rounds=5, warmup=TIMING_WARMUP) -> dict:
    """Time several ``(model, sample)`` cases in alternating rounds.

    Each case gets ``n`` measured single-image inferences split over
    ``rounds`` passes; statistics are pooled over all of them.
    """
    per_round = max(2, -(-n // rounds))
    samples = {k: [] for k in cases}
    for _ in range(rounds):
        for key, (model, sample) in cases.items():
            samples[key].append(_time_samples(model.predict, sample, per_round, warmup))
    return {k: _timing_stats(np.concatenate(v), warmup, rounds=int(rounds)) for k, v in samples.items()}


def evaluate(model, x, y, config=None, seed=0, timing_samples=0, n_params=None) -> EvalReport:
    """Accuracy, confusion and per-class precision/recall for anything with ``predict``.

    Precision of a class that is never predicted is reported as 0.
    """
    y = np.asarray(y)
    if len(y) == 0:
        raise ValueError("cannot evaluate on an empty test set")
    pred = np.asarray(model.predict(x))
    cm = confusion_matrix(y, pred)
    tp = np.diag(cm).astype(np.float64)
    col, row = cm.sum(axis=0), cm.sum(axis=1)
    precision = np.divide(tp, col, out=np.zeros_like(tp), where=col > 0)
    recall = np.divide(tp, row, out=np.zeros_like(tp), where=row > 0)
    if n_params is None:
        n_params = parameter_count(model) if isinstance(model, ModelGraph) else int(model.parameter_count())
    timing = time_inference(model.predict, np.asarray(x)[0], timing_samples) if timing_samples else {}
    return EvalReport(float(np.trace(cm) / cm.sum()), cm, precision.tolist(), recall.tolist(), int(len(y)),
                      int(n_params), dict(config or {}), int(seed), timing)


# -- trial protocols --------------------------------------------------------------------------

@dataclass
class TrialOutcome:
    seed: int
    reports: dict                  # subset -> EvalReport
    history: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)


@dataclass
class CnnProtocol:
    """Train one TactNet variant per trial seed and evaluate every subset."""

    variant: str
    config: TrainConfig = TrainConfig()
    augment: bool = True
    timing_samples: int = 0

    def describe(self) -> dict:
        return {"kind": "cnn", "variant": self.variant, "augment": self.augment, "config": self.config.to_dict()}

    def run(self, dataset: Dataset, seed: int, out_dir=None) -> TrialOutcome:
        plan = make_splits(dataset, seed)
        subsets = prepare_subsets(dataset, plan, self.augment)
        rows, cols = dataset.shape
        graph = build_tactnet(self.variant, rows, cols, seed=seed)
        config = self.config.replace(seed=seed)
        out = Path(out_dir) if out_dir else None
        result = train_model(graph, subsets["train"], subsets["val"], config,
                             out / "history.csv" if out else None, out / "model.tnet" if out else None)
        echo = {**self.describe(), "config": config.to_dict(), "input_shape": [rows, cols],
                "best_epoch": result.best_epoch}
        reports = {name: evaluate(graph, subsets[name].x, subsets[name].y, echo, seed,
                                  self.timing_samples if name == "test" else 0)
                   for name in SUBSETS}
        return TrialOutcome(seed, reports, result.history)


def run_protocol_trial(protocol, dataset, seed, out_dir=None) -> dict:
    """Run one trial, persist its artifacts, and return a JSON-ready record.

    Failures are captured into the record rather than raised.
    """
    out = Path(out_dir) / f"trial_{seed:04d}" if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    try:
        outcome = protocol.run(dataset, seed, out)
    except Exception as exc:  # a failing trial must not take the others down
        record = {"seed": seed, "status": "failed", "error": f"{type(exc).__name__}: {exc}"}
        if out:
            (out / "error.txt").write_text(traceback.format_exc(), encoding="utf-8")
            write_json(out / "report.json", record)
        return record
    record = {"seed": seed, "status": "ok",
              "reports": {k: r.to_dict() for k, r in outcome.reports.items()}, **outcome.extra}
    timing = {k: r.timing for k, r in outcome.reports.items() if r.timing}
    if out:
        write_json(out / "report.json", record)
        if timing:
            write_json(out / "timing.json", timing)
    record["_timing"] = timing
    return record


def _trial_job(args):
    return run_protocol_trial(*args)


def summarize(records, subsets=None) -> dict:
    """Mean-of-accuracies and sample std (ddof=1) per subset over successful trials."""
    ok = [r for r in records if r["status"] == "ok"]
    names = subsets or (sorted(ok[0]["reports"]) if ok else [])
    summary = {}
    for name in names:
        acc = np.array([r["reports"][name]["accuracy"] for r in ok])
        summary[name] = {"mean": float(acc.mean()) if acc.size else None,
                         "std": float(acc.std(ddof=1)) if acc.size > 1 else 0.0,
                         "n": int(acc.size), "accuracies": acc.tolist()}
    return summary


def repeated_trials(protocol, dataset: Dataset, seeds, out_dir=None, parallel: int = 1) -> dict:
    """Run ``protocol`` once per seed and aggregate; results are ordered by seed."""
    seeds = sorted(int(s) for s in seeds)
    if len(seeds) < 2:
        raise ValueError("repeated trials need at least two seeds")
    jobs = [(protocol, dataset, s, out_dir) for s in seeds]
    if parallel > 1:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            records = list(pool.map(_trial_job, jobs))
    else:
        records = [_trial_job(j) for j in jobs]
    timing = {r["seed"]: r.pop("_timing", {}) for r in records}
    summary = {"protocol": protocol.describe(), "dataset_checksum": dataset.checksum(), "seeds": seeds,
               "aggregation": "mean of per-trial accuracies",
               "trials": [{"seed": r["seed"], "status": r["status"],
                           **({"accuracy": {k: v["accuracy"] for k, v in r["reports"].items()}}
                              if r["status"] == "ok" else {"error": r["error"]})} for r in records],
               "failed": [r["seed"] for r in records if r["status"] != "ok"],
               "summary": summarize(records)}
    if out_dir:
        write_json(Path(out_dir) / "summary.json", summary)
        timing_rows = {str(k): v for k, v in timing.items() if v}
        if timing_rows:
            write_json(Path(out_dir) / "timing.json", timing_rows)
    summary["_records"] = records
    summary["_timing"] = timing
    return summary


def public(summary) -> dict:
    """Drop in-memory extras (keys starting with an underscore)."""
    return {k: v for k, v in summary.items() if not k.startswith("_")}


# -- resolution sweep --------------------------------------------------------------------------

def degrade_dataset(dataset: Dataset, level) -> Dataset:
    frames = [degrade_resolution(f, level) for f in dataset.frames]
    for f in frames:
        f.values = f.values.astype(np.float32)
    return Dataset(frames, dataset.class_names)


def resolution_sweep(dataset: Dataset, variant: str, levels, seeds, config: TrainConfig = TrainConfig(),
                     augment: bool = True, out_dir=None, parallel: int = 1,
                     timing_samples: int = TIMING_SAMPLES) -> dict:
    """Full trial protocol at each ladder level with the variant rebuilt for that grid.

    Inference time is measured once all levels have trained, interleaved
    across levels so that machine drift affects every level alike.
    """
    rows_out, timed = [], {}
    for level in levels:
        frac = parse_level(level)
        grid = RESOLUTION_LADDER[frac]
        entry = {"level": str(frac), "grid": list(grid), "tactels": grid[0] * grid[1]}
        sub = Path(out_dir) / f"level_{str(frac).replace('/', '-')}" if out_dir else None
        try:
            graph = build_tactnet(variant, *grid)
        except tc.ShapeError as exc:
            rows_out.append({**entry, "status": "incompatible", "error": str(exc)})
            continue
        degraded = degrade_dataset(dataset, frac)
        result = repeated_trials(CnnProtocol(variant, config, augment), degraded, seeds, sub, parallel)
        entry.update({"status": "ok", "input_shape": list(graph.input_shape), "summary": result["summary"],
                      "failed": result["failed"]})
        rows_out.append(entry)
        timed[entry["level"]] = (graph, degraded.frames[0].values)
    if timing_samples:
        for level, stats in interleaved_timing(timed, timing_samples).items():
            next(e for e in rows_out if e["level"] == level)["_timing"] = stats
    report = {"variant": variant, "seeds": sorted(int(s) for s in seeds), "config": config.to_dict(),
              "dataset_checksum": dataset.checksum(), "levels": [public(e) for e in rows_out]}
    if out_dir:
        write_json(Path(out_dir) / "sweep.json", report)
        write_json(Path(out_dir) / "timing.json", {e["level"]: e["_timing"] for e in rows_out if "_timing" in e})
    report["_timing"] = {e["level"]: e["_timing"] for e in rows_out if "_timing" in e}
    return report


# -- timing benchmark ---------------------------------------------------------------------------

def benchmark(variants, rows=28, cols=50, n=TIMING_SAMPLES, warmup=TIMING_WARMUP, seed=0) -> dict:
    """Single-image inference timing per variant on freshly built graphs, interleaved."""
    sample = np.random.default_rng(seed).random((rows, cols)).astype(np.float32)
    graphs = {v: build_tactnet(v, rows, cols, seed=seed) for v in variants}
    timing = interleaved_timing({v: (g, sample) for v, g in graphs.items()}, n, warmup=warmup)
    return {v: {"parameter_count": parameter_count(g), **timing[v]} for v, g in graphs.items()}


# -- gradient check ------------------------------------------------------------------------------

GRADCHECK_H = 1e-5
GRADCHECK_FLOOR = 1e-5
KINK_ATOL = 1e-6


def _rel(a, b, floor):
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor))) if np.size(a) else 0.0


def gradient_check(graph: ModelGraph, x, y, tolerance: float = 1e-4, samples: int | None = None,
                   h: float = GRADCHECK_H, seed: int = 0, mode: str = "train", floor: float = GRADCHECK_FLOOR) -> dict:
    """Compare backprop against central differences of the cross-entropy loss.

    Runs on a 64-bit copy of ``graph``. For every top-level layer the
    gradient w.r.t. its input activation and each of its parameters is
    checked, on all entries or on ``samples`` random entries per tensor.
    The relative error uses ``max(|a|, |n|, floor)`` as denominator so
    exactly-zero gradients (e.g. a bias ahead of batch norm) are compared
    against the finite-difference noise floor rather than against zero.
    Entries at a non-differentiable point, where the left and right slopes
    disagree, are counted as ``skipped`` instead of compared.
    """
    g = graph.copy(np.float64)
    x = g._check_batch(np.asarray(x, dtype=np.float64))
    y = np.asarray(y)
    rng = np.random.default_rng(seed)

    logits, tape = g.run(x, mode, record=True)
    _, dlogits, _ = tc.softmax_cross_entropy(logits, y)
    entering = {}
    _, grads = g.backward(dlogits, tape, collect=entering)

    acts = [x]
    for i in range(len(g.layers) - 1):
        acts.append(g.run(acts[-1], mode, stop=i + 1, start=i)[0])

    def loss_from(i, a):
        return tc.softmax_cross_entropy(g.run(a, mode, start=i)[0], y)[0]

    def pick(arr):
        if samples is None or samples >= arr.size:
            return range(arr.size)
        return rng.choice(arr.size, size=samples, replace=False)

    def slopes(arr, i, f, f0, step):
        old = arr[i]
        arr[i] = old + step
        fp = f()
        arr[i] = old - step
        fm = f()
        arr[i] = old
        right, left = (fp - f0) / step, (f0 - fm) / step
        return (fp - fm) / (2 * step), abs(right - left) > max(tolerance * max(abs(right), abs(left)), KINK_ATOL)

    def numeric(arr, f, flats):
        """Central differences plus a mask of entries sitting on a kink.

        Where left and right slopes disagree the step is cut to ``h/10`` and
        ``h/100``: curvature and a nearby kink stop showing, a ReLU zero or
        a tied max-pool window at the point itself does not.
        """
        out, kink = [], []
        f0 = f()
        for flat in flats:
            i = np.unravel_index(flat, arr.shape)
            for step in (h, h / 10, h / 100):
                d, suspect = slopes(arr, i, f, f0, step)
                if not suspect:
                    break
            out.append(d)
            kink.append(suspect)
        return np.array(out), np.array(kink, dtype=bool)

    rows = []
    for i, layer in enumerate(g.layers):
        a = acts[i].copy()
        targets = [("input", a, lambda: loss_from(i, a), entering[i])]
        for name in layer.param_shapes():
            targets.append((name, g.params[name], lambda: loss_from(i, acts[i]), grads[name]))
        for tensor, arr, f, analytic in targets:
            flats = np.asarray(list(pick(arr)), dtype=np.int64)
            num, kink = numeric(arr, f, flats)
            ana = analytic.reshape(-1)[flats]
            err = _rel(ana[~kink], num[~kink], floor)
            rows.append({"layer": layer.name, "kind": layer.kind, "tensor": tensor, "max_rel_error": err,
                         "checked": int((~kink).sum()), "skipped": int(kink.sum()), "passed": bool(err < tolerance)})
    layers = {}
    for r in rows:
        entry = layers.setdefault(r["layer"], {"kind": r["kind"], "max_rel_error": 0.0, "passed": True})
        entry["max_rel_error"] = max(entry["max_rel_error"], r["max_rel_error"])
        entry["passed"] &= r["passed"]
    return {"variant": graph.variant, "tolerance": tolerance, "h": h, "mode": mode, "samples": samples,
            "passed": all(r["passed"] for r in rows), "max_rel_error": max(r["max_rel_error"] for r in rows),
            "layers": layers, "tensors": rows}


def layer_suite(seed: int = 0) -> list:
    """Small 64-bit graphs that together cover every layer type.

    Returns ``(name, graph, x, y)`` tuples sized for exhaustive checking.
    """
    rng = np.random.default_rng(seed)
    k = 5

    def case(name, layers, shape, batch=3):
        graph = ModelGraph(layers, shape, k, name, seed=seed, dtype=np.float64)
        return name, graph, rng.random((batch, *shape)), rng.integers(0, k, batch)

    return [
        # pool ahead of ReLU so no window holds tied zeros (a kink of max)
        case("conv-bn-pool-relu", [Conv("conv1", 3, 2, 3), BatchNorm("bn1", 3), MaxPool("pool1"),
                                   ReLU("relu1"), Flatten("flatten"), Dense("fc", 36, k)], (6, 7, 2)),
        case("conv-stride2", [Conv("conv1", 3, 1, 2, stride=2), Flatten("flatten"), Dense("fc", 18, k)], (5, 6, 1)),
        case("residual-projection", [Residual("res1", 2, 3, stride=2), Flatten("flatten"), Dense("fc", 27, k)],
             (6, 6, 2)),
        case("residual-identity", [Residual("res1", 3, 3), Flatten("flatten"), Dense("fc", 48, k)], (4, 4, 3)),
        case("fc", [Dense("fc", 8, k)], (8,)),
    ]


# -- transfer analogue ----------------------------------------------------------------------------

SOURCE_SHAPE = (32, 56)
SOURCE_VARIANT = "tactnet6"


def to_source_input(frames, shape=SOURCE_SHAPE) -> np.ndarray:
    """Bicubic resize to the source grid, then replicate into three channels."""
    if not frames:
        return np.zeros((0, *shape, 3), np.float32)
    return np.stack([replicate_channels(bicubic_resize(f, *shape)) for f in frames]).astype(np.float32)


def _source_frames(frames, channel_gain):
    # colour-like variation: each channel gets its own gain, as RGB sources would
    x = to_source_input(frames)
    return np.clip(x * channel_gain, 0.0, 1.0).astype(np.float32)


def train_source_network(source: Dataset, config: TrainConfig, seed: int = 0, out_dir=None) -> TrainResult:
    """Train the 3-channel source network on a separate corpus (the pretraining analogue)."""
    plan = make_splits(source, seed)
    rng = np.random.default_rng(seed)
    subsets = {}
    for k, name in enumerate(("train", "val")):
        frames = expand_set([source.frames[i] for i in getattr(plan, name)], rng_seed=_subset_seed(seed, k))
        gains = rng.uniform(0.7, 1.0, size=(len(frames), 1, 1, 3)).astype(np.float32)
        subsets[name] = SubsetArrays(_source_frames(frames, gains), np.array([f.label for f in frames]),
                                     [f.origin for f in frames])
    graph = build_tactnet(SOURCE_VARIANT, *SOURCE_SHAPE, in_channels=3, seed=seed)
    out = Path(out_dir) if out_dir else None
    return train_model(graph, subsets["train"], subsets["val"], config.replace(seed=seed),
                       out / "source_history.csv" if out else None, out / "source.tnet" if out else None)


class _FeaturePredictor:
    """Adapter giving a feature-space classifier a frame-space ``predict``."""

    def __init__(self, extractor, classifier):
        self.extractor, self.classifier = extractor, classifier

    def predict(self, x):
        frames = [TactileFrame(v) for v in np.asarray(x)]
        return self.classifier.predict(extract_features(self.extractor, to_source_input(frames)).features)

    def parameter_count(self):
        return self.classifier.parameter_count()


@dataclass
class TransferProtocol:
    """Frozen source features with SVM and fine-tuned softmax heads, per trial seed."""

    extractor: ModelGraph
    head_config: TrainConfig = HEAD_CONFIG
    svm_lambda: float = 1e-4
    svm_epochs: int = 20
    augment: bool = True
    timing_samples: int = 0

    def describe(self) -> dict:
        return {"kind": "transfer", "extractor": self.extractor.variant,
                "extractor_checksum": self.extractor.checksum(), "source_shape": list(SOURCE_SHAPE),
                "svm": {"lambda": self.svm_lambda, "epochs": self.svm_epochs},
                "head_config": self.head_config.to_dict(), "augment": self.augment}

    def run(self, dataset: Dataset, seed: int, out_dir=None) -> TrialOutcome:
        before = self.extractor.checksum()
        plan = make_splits(dataset, seed)
        feats = {}
        for k, name in enumerate(SUBSETS):
            frames = [dataset.frames[i] for i in getattr(plan, name)]
            if self.augment:
                frames = expand_set(frames, rng_seed=_subset_seed(seed, k))
            feats[name] = extract_features(self.extractor, to_source_input(frames), [f.label for f in frames])
        svm = train_svm(feats["train"], feats["val"], self.svm_lambda, self.svm_epochs, seed)
        head = finetune_head(feats["train"], feats["val"], self.head_config.replace(seed=seed))
        after = self.extractor.checksum()
        if before != after:
            raise RuntimeError("feature extractor parameters changed during classifier training")
        echo = self.describe()
        reports = {}
        for cname, clf in (("svm", svm), ("head", head)):
            for name in SUBSETS:
                reports[f"{cname}_{name}"] = evaluate(clf, feats[name].features, feats[name].labels,
                                                      {**echo, "classifier": cname}, seed)
            if self.timing_samples:
                x_test = np.stack([dataset.frames[i].values for i in plan.test[:1]])
                reports[f"{cname}_test"].timing = time_inference(
                    _FeaturePredictor(self.extractor, clf).predict, x_test[0], self.timing_samples)
        return TrialOutcome(seed, reports, head.history,
                            {"svm_objective": svm.objective, "head_best_epoch": head.best_epoch,
                             "extractor_checksum": after})
