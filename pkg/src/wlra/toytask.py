"""Desk-scale compression experiments on a softmax-regression toy task.

A single linear layer ``logits = x W + b`` is trained on synthetic Gaussian
class clusters. Planted "rare" features are zero for most examples and decide
the label for a small subset, which gives their weights large magnitude but
low importance, which is the situation where plain truncated SVD spends its rank on
the wrong rows.
"""

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DivergenceError, EmptyFilterError, InputError, ShapeError
from .importance import fisher_from_gradients, phi_metric, taylor_importance, uniform_importance
from .linalg import FactorPair, as_matrix, read_matrix, write_matrix
from .objective import WeightedProblem
from .planner import params_factorized
from .solvers import SolverConfig, solve, solve_fwsvd, solve_svd

log = logging.getLogger(__name__)

FILTERS = ("all", "correct_only", "incorrect_only")
METHODS = ("svd", "fwsvd", "tfwsvd", "tvd")
RARE_RATE = 0.02
RARE_CAP = 0.9
RARE_VALUE = 1.0
SEPARATION = 4.0
DEFAULT_CLASSES = 8


@dataclass(frozen=True)
class ToyDataset:
    features: np.ndarray
    labels: np.ndarray
    classes: int
    seed: int = 0
    heterogeneity: float = 0.0

    def __post_init__(self):
        x = as_matrix(self.features, "features")
        y = np.asarray(self.labels)
        if y.ndim != 1 or y.shape[0] != x.shape[0]:
            raise InputError("labels must be a vector with one entry per example")
        if not np.issubdtype(y.dtype, np.integer):
            if not np.all(y == np.round(y)):
                raise InputError("labels must be integers")
            y = y.astype(np.int64)
        if y.min() < 0 or y.max() >= self.classes:
            raise InputError(f"labels must lie in [0, {self.classes})")
        if np.unique(y).size < 2:
            raise InputError("need at least two classes present")
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y.astype(np.int64))

    @property
    def size(self):
        return self.features.shape[0]

    @property
    def in_dim(self):
        return self.features.shape[1]

    def onehot(self):
        out = np.zeros((self.size, self.classes))
        out[np.arange(self.size), self.labels] = 1.0
        return out


@dataclass
class ToyModel:
    w: np.ndarray  # in_dim x classes
    bias: np.ndarray

    def logits(self, x):
        return x @ self.w + self.bias

    def copy(self):
        return ToyModel(self.w.copy(), self.bias.copy())


@dataclass
class CellRecord:
    method: str
    rank_ratio: float
    rank: int
    params_after: int
    accuracy_no_ft: float = float("nan")
    loss_no_ft: float = float("nan")
    accuracy_ft: float | None = None
    loss_ft: float | None = None
    phi_of_importance: float = float("nan")
    error: str | None = None


def _finite_or_none(v):
    if isinstance(v, float) and not math.isfinite(v):
        return None
    return v


@dataclass
class CompressionExperimentReport:
    seed: int
    baseline_accuracy: float
    baseline_loss: float
    records: list = field(default_factory=list)

    def to_dict(self):
        return {
            "seed": self.seed,
            "baseline_accuracy": self.baseline_accuracy,
            "baseline_loss": self.baseline_loss,
            "records": [{k: _finite_or_none(v) for k, v in vars(r).items()} for r in self.records],
        }

    def cell(self, method, ratio):
        for r in self.records:
            if r.method == method and r.rank_ratio == ratio:
                return r
        raise KeyError((method, ratio))


# ---------------------------------------------------------------------------
# data


def generate_task(seed=42, examples=2000, in_dim=64, classes=8, heterogeneity=0.0):
    if classes < 2 or examples < 10 * classes or in_dim < classes:
        raise InputError(
            "need classes >= 2, examples >= 10*classes and in_dim >= classes",
            examples=examples,
            in_dim=in_dim,
            classes=classes,
        )
    if not 0.0 <= heterogeneity <= 1.0:
        raise InputError(f"heterogeneity must be in [0, 1], got {heterogeneity}")
    rng = np.random.default_rng(seed)
    n_rare = int(round(heterogeneity * in_dim))
    n_rare = min(n_rare, in_dim - 1)
    perm = rng.permutation(in_dim)
    rare, common = np.sort(perm[:n_rare]), np.sort(perm[n_rare:])

    labels = rng.integers(0, classes, examples)
    # class means sit on a circle inside a random 2-d subspace of the common features
    basis, _ = np.linalg.qr(rng.standard_normal((common.size, 2)))
    theta = 2.0 * np.pi * np.arange(classes) / classes + rng.uniform(0, 2.0 * np.pi)
    means = SEPARATION * np.stack([np.cos(theta), np.sin(theta)], axis=1) @ basis.T
    x = np.zeros((examples, in_dim))
    x[:, common] = means[labels] + rng.standard_normal((examples, common.size))

    if n_rare:
        # each rare feature fires on about RARE_RATE of the examples and alone decides
        # their label; the cluster part of those examples is pure noise
        owner = np.arange(n_rare) % classes
        covered = np.unique(owner)
        subset = rng.random(examples) < min(RARE_RATE * n_rare, RARE_CAP)
        idx = np.flatnonzero(subset)
        labels[idx] = rng.choice(covered, idx.size)
        x[np.ix_(idx, common)] = rng.standard_normal((idx.size, common.size))
        for c in covered:
            hit = idx[labels[idx] == c]
            x[hit, rng.choice(rare[owner == c], hit.size)] = RARE_VALUE
    return ToyDataset(x, labels, classes, seed, heterogeneity)


# ---------------------------------------------------------------------------
# model


def softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(logits, labels):
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return float(-np.mean(logp[np.arange(labels.size), labels]))


def evaluate(logits, labels):
    """(accuracy, mean cross-entropy)."""
    acc = float(np.mean(np.argmax(logits, axis=1) == labels))
    return acc, cross_entropy(logits, labels)


def loss_gradients(model, dataset):
    """Full-batch gradients of mean cross-entropy: (dL/dW, dL/db)."""
    p = softmax(model.logits(dataset.features))
    delta = (p - dataset.onehot()) / dataset.size
    return dataset.features.T @ delta, delta.sum(axis=0)


def train(dataset, epochs=300, lr=0.5, model=None):
    """Full-batch gradient descent on softmax cross-entropy from zero weights."""
    if model is None:
        model = ToyModel(np.zeros((dataset.in_dim, dataset.classes)), np.zeros(dataset.classes))
    else:
        model = model.copy()
    for epoch in range(epochs):
        gw, gb = loss_gradients(model, dataset)
        model.w -= lr * gw
        model.bias -= lr * gb
        if not (np.all(np.isfinite(model.w)) and np.all(np.isfinite(model.bias))):
            raise DivergenceError(f"training diverged at epoch {epoch + 1}", step=epoch + 1)
    return model


def _filter_mask(model, dataset, filter):
    if filter not in FILTERS:
        raise InputError(f"filter must be one of {FILTERS}, got {filter!r}")
    pred = np.argmax(model.logits(dataset.features), axis=1)
    correct = pred == dataset.labels
    if filter == "all":
        return np.ones(dataset.size, dtype=bool)
    mask = correct if filter == "correct_only" else ~correct
    if not mask.any():
        raise EmptyFilterError(f"no examples match filter {filter!r}", filter=filter)
    return mask


def per_example_grads(model, dataset, filter="all"):
    """Per-example cross-entropy gradients wrt W, shape (examples, in_dim, classes)."""
    mask = _filter_mask(model, dataset, filter)
    x = dataset.features[mask]
    p = softmax(model.logits(x))
    delta = p - dataset.onehot()[mask]
    return np.einsum("di,dc->dic", x, delta)


def fisher_information(model, dataset, filter="all", fallback=True):
    """Empirical Fisher of W; falls back to ``all`` when the filter is empty."""
    try:
        grads = per_example_grads(model, dataset, filter)
    except EmptyFilterError:
        if not fallback:
            raise
        log.warning("filter %r matched no examples; using all examples", filter)
        grads = per_example_grads(model, dataset, "all")
    return fisher_from_gradients(grads)


def taylor_weights(model, dataset):
    """Per-element mean of |g * w| over the dataset."""
    grads = per_example_grads(model, dataset, "all")
    return taylor_importance(model.w, np.mean(np.abs(grads), axis=0))


# ---------------------------------------------------------------------------
# compression


def rank_for(ratio, model):
    full = min(model.w.shape)
    return int(min(max(math.floor(ratio * full + 0.5), 1), full))


def _normalized(imp):
    mean = float(imp.mean())
    return imp / mean if mean > 0 else uniform_importance(*imp.shape)


def compress_weights(method, model, dataset, rank, solver_cfg=None, importances=None):
    """Factorize ``model.w`` with one of the toy methods; returns (FactorPair, importance)."""
    importances = importances if importances is not None else {}
    if method == "svd":
        imp = uniform_importance(*model.w.shape)
        return solve_svd(WeightedProblem(model.w, imp, rank)), imp
    if method in ("fwsvd", "tfwsvd"):
        imp = importances.get("fisher")
        if imp is None:
            imp = fisher_information(model, dataset)
    elif method == "tvd":
        imp = importances.get("taylor")
        if imp is None:
            imp = taylor_weights(model, dataset)
    else:
        raise InputError(f"unknown method {method!r}", choices=list(METHODS))
    problem = WeightedProblem(model.w, _normalized(imp), rank)
    if method == "fwsvd":
        return solve_fwsvd(problem)[0], imp
    cfg = solver_cfg or default_solver_config()
    return solve(problem, cfg).final, imp


def default_solver_config(seed=42):
    return SolverConfig(method="adam_sgd", eta=1e-2, max_steps=5000, seed=seed)


def factored_logits(f, bias, x):
    return (x @ f.a) @ f.b + bias


def fine_tune(f, bias, dataset, epochs, lr=0.5):
    """Gradient descent on the two stacked layers (A, B) and the bias."""
    a, b, bias = f.a.copy(), f.b.copy(), bias.copy()
    x = dataset.features
    y = dataset.onehot()
    for epoch in range(epochs):
        hidden = x @ a
        delta = (softmax(hidden @ b + bias) - y) / dataset.size
        gb_mat = hidden.T @ delta
        ga = x.T @ (delta @ b.T)
        a -= lr * ga
        b -= lr * gb_mat
        bias -= lr * delta.sum(axis=0)
        if not np.all(np.isfinite(a)) or not np.all(np.isfinite(b)):
            raise DivergenceError(f"fine-tuning diverged at epoch {epoch + 1}", step=epoch + 1)
    return FactorPair(a, b), bias


def run_compression_experiment(
    model,
    dataset,
    methods=METHODS,
    rank_ratios=(0.2,),
    fine_tune_epochs=0,
    fine_tune_lr=0.5,
    solver_cfg=None,
    seed=42,
):
    base_acc, base_loss = evaluate(model.logits(dataset.features), dataset.labels)
    report = CompressionExperimentReport(seed=seed, baseline_accuracy=base_acc, baseline_loss=base_loss)
    importances = {}
    if any(m in ("fwsvd", "tfwsvd") for m in methods):
        importances["fisher"] = fisher_information(model, dataset)
    if "tvd" in methods:
        importances["taylor"] = taylor_weights(model, dataset)
    n, m = model.w.shape
    cfg = solver_cfg or default_solver_config(seed)
    for ratio in rank_ratios:
        r = rank_for(ratio, model)
        for method in methods:
            cell = CellRecord(method, float(ratio), r, params_factorized(n, m, r, True))
            try:
                f, imp = compress_weights(method, model, dataset, r, cfg, importances)
                cell.phi_of_importance = phi_metric(imp).phi
                logits = factored_logits(f, model.bias, dataset.features)
                cell.accuracy_no_ft, cell.loss_no_ft = evaluate(logits, dataset.labels)
                if fine_tune_epochs:
                    ft, bias = fine_tune(f, model.bias, dataset, fine_tune_epochs, fine_tune_lr)
                    logits = factored_logits(ft, bias, dataset.features)
                    cell.accuracy_ft, cell.loss_ft = evaluate(logits, dataset.labels)
            except Exception as exc:  # recorded per cell, the report survives
                log.warning("cell %s@%s failed: %s", method, ratio, exc)
                cell.error = f"{type(exc).__name__}: {exc}"
            report.records.append(cell)
    return report


def phi_vs_svd_drop_suite(
    seeds, heterogeneity_levels, rank_ratio=0.25, examples=2000, in_dim=64, classes=8, epochs=300, lr=0.5
):
    """For each (seed, level): phi of the trained model's Fisher and the
    accuracy lost by truncated SVD at ``rank_ratio``."""
    levels = list(heterogeneity_levels)
    if len(levels) < 5:
        raise InputError("need at least 5 heterogeneity levels")
    rows = []
    for seed in seeds:
        for h in levels:
            data = generate_task(seed, examples, in_dim, classes, h)
            model = train(data, epochs, lr)
            acc, _ = evaluate(model.logits(data.features), data.labels)
            phi = phi_metric(fisher_information(model, data)).phi
            f = solve_svd(WeightedProblem(model.w, uniform_importance(*model.w.shape), rank_for(rank_ratio, model)))
            svd_acc, _ = evaluate(factored_logits(f, model.bias, data.features), data.labels)
            rows.append({"seed": seed, "heterogeneity": h, "phi": phi, "svd_accuracy_drop": acc - svd_acc})
    return rows


# ---------------------------------------------------------------------------
# persistence


def save_dataset(dataset, path):
    """CSV: one column per feature plus a final integer ``label`` column."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"x{k}" for k in range(dataset.in_dim)] + ["label"])
        for row, label in zip(dataset.features, dataset.labels):
            writer.writerow([repr(float(v)) for v in row] + [int(label)])


def load_dataset(path, classes=None):
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise InputError(f"cannot read dataset {path}: {exc.strerror}", path=str(path)) from None
    if len(rows) < 2:
        raise InputError("dataset CSV needs a header and at least one row", path=str(path))
    body = rows[1:] if rows[0] and rows[0][-1] == "label" else rows
    try:
        data = np.array([[float(v) for v in r] for r in body])
    except ValueError as exc:
        raise InputError(f"dataset CSV has a non-numeric cell: {exc}", path=str(path)) from None
    if data.ndim != 2 or data.shape[1] < 2:
        raise InputError("dataset CSV rows must have equal length >= 2", path=str(path))
    labels = data[:, -1]
    if classes is None:
        classes = int(labels.max()) + 1
    return ToyDataset(data[:, :-1], labels, classes)


def save_model(model, w_path, bias_path):
    write_matrix(model.w, w_path)
    write_matrix(model.bias[None, :], bias_path)


def load_model(w_path, bias_path):
    w = read_matrix(w_path)
    bias = read_matrix(bias_path)
    if bias.shape != (1, w.shape[1]):
        raise ShapeError(f"bias shape {bias.shape} does not match (1, {w.shape[1]})")
    return ToyModel(w, bias[0].copy())


REPORT_COLUMNS = (
    "method",
    "rank_ratio",
    "rank",
    "params_after",
    "accuracy_no_ft",
    "loss_no_ft",
    "accuracy_ft",
    "loss_ft",
    "phi_of_importance",
    "error",
)


def report_rows(report):
    return [[getattr(r, c) for c in REPORT_COLUMNS] for r in report.records]
