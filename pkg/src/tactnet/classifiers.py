"""Classifier replacement over frozen features: a linear OVR SVM and a softmax head.

Both models standardize features with per-dimension statistics taken from
their training split only and keep those statistics with the model.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .image_ops import N_CLASSES
from .models import FeatureSet, build_linear, parameter_count
from .training import TrainConfig, sgd_epoch

SVM_LAMBDA = 1e-4
SVM_EPOCHS = 20
HEAD_PATIENCE = 5
_STD_FLOOR = 1e-8


def _standardizer(x):
    x = np.asarray(x, dtype=np.float64)
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    std[std < _STD_FLOOR] = 1.0
    return mean, std


def _check_dim(model_dim, fs):
    if fs.dim != model_dim:
        raise ValueError(f"features have dimension {fs.dim}, model expects {model_dim}")


# -- one-vs-rest linear SVM ------------------------------------------------------------

@dataclass
class SvmModel:
    weights: np.ndarray            # K x D, in standardized feature space
    biases: np.ndarray             # K
    mean: np.ndarray
    std: np.ndarray
    lam: float = SVM_LAMBDA
    epochs: int = SVM_EPOCHS
    seed: int = 0
    objective: list = field(default_factory=list)

    @property
    def dim(self) -> int:
        return self.weights.shape[1]

    def scores(self, features) -> np.ndarray:
        z = (np.asarray(features, dtype=np.float64) - self.mean) / self.std
        return z @ self.weights.T + self.biases

    def predict(self, features) -> np.ndarray:
        return svm_predict(self, features)[0]

    def parameter_count(self) -> int:
        return int(self.weights.size + self.biases.size)


def _ovr_targets(labels, k):
    y = -np.ones((len(labels), k))
    y[np.arange(len(labels)), labels] = 1.0
    return y


def svm_objective(w_aug, z_aug, y, lam) -> float:
    """Sum over classes of ``lam/2 |w|^2 + mean hinge``, bias included in ``w``."""
    margins = y * (z_aug @ w_aug.T)
    hinge = np.maximum(0.0, 1.0 - margins).mean(axis=0)
    return float(np.sum(0.5 * lam * np.sum(w_aug * w_aug, axis=1) + hinge))


def train_svm(train: FeatureSet, val: FeatureSet | None = None, lam: float = SVM_LAMBDA,
              epochs: int = SVM_EPOCHS, seed: int = 0, n_classes: int = N_CLASSES) -> SvmModel:
    """Pegasos-style stochastic subgradient descent, all classes in lock-step.

    Step ``1/(lam*t)`` with no projection; the returned weights are the
    average of the iterates weighted by ``t``, which forgets the large
    early steps much faster than a uniform average. The bias is an appended constant
    feature and is regularized with the weights.
    ``val`` is accepted for interface symmetry; the solver does not use it.
    """
    if lam <= 0:
        raise ValueError("lambda must be positive")
    if len(np.unique(train.labels)) < 2:
        raise ValueError("SVM training needs at least two classes in the training set")
    if val is not None:
        _check_dim(train.dim, val)
    mean, std = _standardizer(train.features)
    z = (np.asarray(train.features, dtype=np.float64) - mean) / std
    z_aug = np.hstack([z, np.ones((len(z), 1))])
    y = _ovr_targets(train.labels, n_classes)
    w = np.zeros((n_classes, z_aug.shape[1]))
    w_avg = np.zeros_like(w)
    rng = np.random.default_rng(seed)
    history = []
    t = 0
    for _ in range(epochs):
        for i in rng.permutation(len(z_aug)):
            t += 1
            eta = 1.0 / (lam * t)
            xi, yi = z_aug[i], y[i]
            active = (yi * (w @ xi)) < 1.0
            w *= 1.0 - eta * lam
            if active.any():
                w[active] += eta * np.outer(yi[active], xi)
            w_avg += 2.0 / (t + 1) * (w - w_avg)
        history.append(svm_objective(w_avg, z_aug, y, lam))
    return SvmModel(w_avg[:, :-1].copy(), w_avg[:, -1].copy(), mean, std, lam, epochs, seed, history)


def svm_predict(model: SvmModel, features):
    """``(class index, per-class scores)``; ties go to the lowest class index."""
    features = np.atleast_2d(np.asarray(features))
    if features.shape[1] != model.dim:
        raise ValueError(f"features have dimension {features.shape[1]}, model expects {model.dim}")
    scores = model.scores(features)
    return scores.argmax(axis=1), scores


# -- fine-tuned softmax head -------------------------------------------------------------

@dataclass
class HeadModel:
    graph: object                  # single fully connected layer over standardized features
    mean: np.ndarray
    std: np.ndarray
    config: TrainConfig
    history: list = field(default_factory=list)
    best_epoch: int = 0

    @property
    def dim(self) -> int:
        return len(self.mean)

    def logits(self, features) -> np.ndarray:
        features = np.atleast_2d(np.asarray(features))
        if features.shape[1] != self.dim:
            raise ValueError(f"features have dimension {features.shape[1]}, model expects {self.dim}")
        return self.graph.predict_logits(((features - self.mean) / self.std).astype(np.float32))

    def predict(self, features) -> np.ndarray:
        return self.logits(features).argmax(axis=1)

    def parameter_count(self) -> int:
        return parameter_count(self.graph)


HEAD_CONFIG = TrainConfig(lr=0.01, max_epochs=60, lr_drop_epoch=0, patience=HEAD_PATIENCE)


def finetune_head(train: FeatureSet, val: FeatureSet, config: TrainConfig = HEAD_CONFIG) -> HeadModel:
    """Train a fully connected softmax layer on frozen features.

    Stops once validation accuracy has not improved for ``config.patience``
    epochs and returns the parameters of the best validation epoch (epoch 0
    is the initialization).
    """
    if len(val) == 0:
        raise ValueError("fine-tuning needs a non-empty validation set")
    _check_dim(train.dim, val)
    mean, std = _standardizer(train.features)
    x = ((train.features - mean) / std).astype(np.float32)
    xv = ((val.features - mean) / std).astype(np.float32)
    graph = build_linear(train.dim, seed=config.seed)
    rng = np.random.default_rng(config.seed)
    velocity: dict = {}

    def val_acc():
        return float(np.mean(graph.predict(xv) == val.labels))

    best_acc, best_epoch = val_acc(), 0
    best = {k: v.copy() for k, v in graph.params.items()}
    history = [{"epoch": 0, "train_acc": float(np.mean(graph.predict(x) == train.labels)),
                "val_acc": best_acc, "loss": float("nan")}]
    for epoch in range(config.max_epochs):
        loss, acc = sgd_epoch(graph, x, train.labels, config, rng, velocity, epoch)
        va = val_acc()
        history.append({"epoch": epoch + 1, "train_acc": acc, "val_acc": va, "loss": loss})
        if va > best_acc:
            best_acc, best_epoch = va, epoch + 1
            best = {k: v.copy() for k, v in graph.params.items()}
        elif epoch + 1 - best_epoch >= config.patience:
            break
    graph.params = best
    return HeadModel(graph, mean, std, config, history, best_epoch)


# -- feature CSV ------------------------------------------------------------------------

def export_features(fs: FeatureSet, path) -> None:
    """Write ``label,f0,...,f{D-1}`` then one sample per line (UTF-8, LF)."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["label"] + [f"f{i}" for i in range(fs.dim)])
        for label, row in zip(fs.labels, fs.features):
            writer.writerow([int(label)] + [repr(float(v)) for v in row])


def import_features(path) -> FeatureSet:
    path = Path(path)
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}:1: empty feature file") from None
        d = len(header) - 1
        if d < 1 or header != ["label"] + [f"f{i}" for i in range(d)]:
            raise ValueError(f"{path}:1: header must be label,f0,...,f{{D-1}}")
        labels, rows = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != d + 1:
                raise ValueError(f"{path}:{lineno}: expected {d} feature values, got {len(row) - 1}")
            try:
                label = int(row[0])
                values = [float(v) for v in row[1:]]
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
            if not 0 <= label < N_CLASSES:
                raise ValueError(f"{path}:{lineno}: unknown label {label}")
            labels.append(label)
            rows.append(values)
    feats = np.array(rows, dtype=np.float64).reshape(len(rows), d)
    return FeatureSet(feats, np.array(labels, dtype=np.int64), f"external({path})")
