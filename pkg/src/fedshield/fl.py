"""Logistic-regression training substrate for federated sessions.

Parameter vectors are dense float64 arrays of length d+1 with the bias
last. All reductions run in a fixed order (aggregation sums in client-id
order, batch order comes from the seed), so identical inputs produce
bit-identical parameter hashes across runs.

Dataset files are UTF-8 CSV with a header row, d feature columns and one
trailing 0/1 label column. Parameter vectors serialize as
``u32 BE dimension | IEEE-754 binary64 BE entries``.
"""

from __future__ import annotations

import csv
import io
import struct
from dataclasses import dataclass, field

import numpy as np

from .encoding import sha256
from .errors import InvalidInputError, NumericalDivergenceError


@dataclass(frozen=True)
class Dataset:
    """Feature matrix (n, d) with 0/1 labels (n,)."""

    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if self.features.ndim != 2 or self.labels.ndim != 1:
            raise InvalidInputError("features must be (n, d), labels (n,)")
        if self.features.shape[0] != self.labels.shape[0]:
            raise InvalidInputError("feature/label row counts differ")
        if self.features.shape[0] < 1:
            raise InvalidInputError("dataset must contain at least one row")
        if not np.all(np.isin(self.labels, (0.0, 1.0))):
            raise InvalidInputError("labels must be 0 or 1")

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


@dataclass(frozen=True)
class ModelUpdate:
    """One client's trained parameters for a round."""

    client_id: str
    round_index: int
    params: np.ndarray
    num_examples: int
    params_hash: bytes

    def __post_init__(self):
        if self.num_examples < 1:
            raise InvalidInputError("num_examples must be >= 1")


@dataclass
class GlobalModel:
    """Committed global parameters plus the per-round metrics history."""

    round_index: int
    params: np.ndarray
    history: list[tuple[int, float, float]] = field(default_factory=list)


def serialize_params(params: np.ndarray) -> bytes:
    vec = np.asarray(params, dtype=np.float64)
    if vec.ndim != 1:
        raise InvalidInputError("parameter vector must be one-dimensional")
    return struct.pack(">I", vec.size) + struct.pack(f">{vec.size}d", *vec.tolist())


def deserialize_params(data: bytes) -> np.ndarray:
    if len(data) < 4:
        raise InvalidInputError("parameter serialization too short")
    (dim,) = struct.unpack(">I", data[:4])
    if len(data) != 4 + 8 * dim:
        raise InvalidInputError("parameter serialization length mismatch")
    return np.array(struct.unpack(f">{dim}d", data[4:]), dtype=np.float64)


def params_hash(params: np.ndarray) -> bytes:
    return sha256(serialize_params(params))


def make_update(client_id: str, round_index: int, params: np.ndarray,
                num_examples: int) -> ModelUpdate:
    params = np.asarray(params, dtype=np.float64)
    return ModelUpdate(client_id, round_index, params, num_examples, params_hash(params))


def sigmoid(z: np.ndarray) -> np.ndarray:
    """Numerically stable logistic function (branch form, never overflows)."""
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _scores(params: np.ndarray, features: np.ndarray) -> np.ndarray:
    if features.shape[1] + 1 != params.shape[0]:
        raise InvalidInputError(
            f"parameter dimension {params.shape[0]} does not match "
            f"feature dimension {features.shape[1]}+1")
    return features @ params[:-1] + params[-1]


def logistic_loss(params: np.ndarray, features: np.ndarray,
                  labels: np.ndarray) -> float:
    """Mean logistic loss in log-sum-exp form: mean(softplus(z) - y*z)."""
    z = _scores(params, features)
    return float(np.mean(np.logaddexp(0.0, z) - labels * z))


def gradient(params: np.ndarray, features: np.ndarray,
             labels: np.ndarray) -> np.ndarray:
    """Analytic gradient of the mean logistic loss, bias component last."""
    z = _scores(params, features)
    resid = sigmoid(z) - labels
    n = features.shape[0]
    grad_w = features.T @ resid / n
    grad_b = float(np.mean(resid))
    return np.append(grad_w, grad_b)


def predict(params: np.ndarray, features: np.ndarray) -> np.ndarray:
    """Class decisions; the tie sigma(z) = 0.5 predicts class 1."""
    return (_scores(params, features) >= 0.0).astype(np.float64)


def evaluate(params: np.ndarray, dataset: Dataset) -> tuple[float, float]:
    """(accuracy, mean logistic loss) of params on a dataset."""
    if dataset.n < 1:
        raise InvalidInputError("cannot evaluate on an empty dataset")
    params = np.asarray(params, dtype=np.float64)
    preds = predict(params, dataset.features)
    accuracy = float(np.mean(preds == dataset.labels))
    loss = logistic_loss(params, dataset.features, dataset.labels)
    return accuracy, loss


def local_train(start: np.ndarray, data: Dataset, cfg, seed: int,
                *, client_id: str = "", round_index: int = 0) -> ModelUpdate:
    """Mini-batch SGD on the logistic loss.

    Runs ``cfg.local_epochs`` epochs with batch order drawn from ``seed``;
    deterministic given (start, data, cfg, seed). ``cfg`` needs
    ``learning_rate``, ``local_epochs`` and ``batch_size`` attributes.
    """
    params = np.array(start, dtype=np.float64)
    if params.shape != (data.dim + 1,):
        raise InvalidInputError("start vector dimension does not match data")
    if cfg.learning_rate < 0:
        raise InvalidInputError("learning_rate must be >= 0")
    batch_size = min(max(int(cfg.batch_size), 1), data.n)
    rng = np.random.default_rng(seed)
    # overflow to inf is detected by the finiteness check, not warned about
    with np.errstate(over="ignore", invalid="ignore"):
        for _ in range(cfg.local_epochs):
            order = rng.permutation(data.n)
            for lo in range(0, data.n, batch_size):
                batch = order[lo:lo + batch_size]
                g = gradient(params, data.features[batch], data.labels[batch])
                params -= cfg.learning_rate * g
                if not np.all(np.isfinite(params)):
                    raise NumericalDivergenceError(
                        "weights became non-finite during training")
    return make_update(client_id, round_index, params, data.n)


def aggregate(updates: list[ModelUpdate]) -> np.ndarray:
    """Example-count-weighted mean of client parameters.

    Summation runs in client-id-sorted order, so any permutation of the
    input list yields bit-identical output.
    """
    if not updates:
        raise InvalidInputError("cannot aggregate an empty update list")
    ordered = sorted(updates, key=lambda u: u.client_id)
    dim = ordered[0].params.shape[0]
    round_index = ordered[0].round_index
    for u in ordered:
        if u.params.shape != (dim,):
            raise InvalidInputError("update dimensions differ")
        if u.round_index != round_index:
            raise InvalidInputError("updates are from different rounds")
    total = 0
    acc = np.zeros(dim, dtype=np.float64)
    for u in ordered:
        acc += float(u.num_examples) * u.params
        total += u.num_examples
    return acc / float(total)


def converged(history: list[tuple[int, float, float]], cfg) -> bool:
    """Session stop rule.

    True when the latest accuracy meets ``cfg.target_accuracy``, or the last
    ``cfg.patience`` consecutive loss deltas are all below
    ``cfg.convergence_epsilon`` in magnitude, or the round index has reached
    ``cfg.max_rounds``.
    """
    if not history:
        return False
    round_index, accuracy, _ = history[-1]
    if accuracy >= cfg.target_accuracy:
        return True
    if len(history) >= cfg.patience + 1:
        tail = [loss for _, _, loss in history[-(cfg.patience + 1):]]
        deltas = [tail[i + 1] - tail[i] for i in range(len(tail) - 1)]
        if all(abs(d) < cfg.convergence_epsilon for d in deltas):
            return True
    return round_index >= cfg.max_rounds


def dataset_to_csv_bytes(dataset: Dataset) -> bytes:
    """Deterministic CSV serialization; the bytes are the dataset identity."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow([f"x{i}" for i in range(dataset.dim)] + ["y"])
    for row, label in zip(dataset.features, dataset.labels):
        writer.writerow([repr(float(v)) for v in row] + [str(int(label))])
    return buf.getvalue().encode("utf-8")


def dataset_from_csv_bytes(data: bytes) -> Dataset:
    text = data.decode("utf-8")
    rows = list(csv.reader(io.StringIO(text)))
    if len(rows) < 2:
        raise InvalidInputError("CSV must have a header row and at least one data row")
    body = rows[1:]
    width = len(rows[0])
    features, labels = [], []
    for i, row in enumerate(body):
        if len(row) != width:
            raise InvalidInputError(f"CSV row {i + 2} has {len(row)} columns, expected {width}")
        try:
            values = [float(v) for v in row]
        except ValueError as exc:
            raise InvalidInputError(f"CSV row {i + 2}: {exc}") from exc
        if values[-1] not in (0.0, 1.0):
            raise InvalidInputError(f"CSV row {i + 2}: label must be 0 or 1")
        features.append(values[:-1])
        labels.append(values[-1])
    return Dataset(np.array(features, dtype=np.float64),
                   np.array(labels, dtype=np.float64))


def load_dataset_csv(path) -> Dataset:
    with open(path, "rb") as fh:
        return dataset_from_csv_bytes(fh.read())


def save_dataset_csv(dataset: Dataset, path) -> bytes:
    data = dataset_to_csv_bytes(dataset)
    with open(path, "wb") as fh:
        fh.write(data)
    return data


def synthetic_dataset(n: int, dim: int, seed: int,
                      separation: float = 2.0) -> Dataset:
    """Two-class Gaussian mixture with class-mean distance ``separation``."""
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 2, size=n).astype(np.float64)
    offset = np.full(dim, separation / (2.0 * np.sqrt(dim)))
    means = np.where(labels[:, None] == 1.0, offset, -offset)
    features = means + rng.standard_normal((n, dim))
    return Dataset(features, labels)
