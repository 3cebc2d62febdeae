"""Clusterability indices, k-means, linear probing and embedding export."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DataError, DimensionError, DomainError
from .trainer import AdamWConfig, Moments, adamw_step

log = logging.getLogger(__name__)


# ---------------------------------------------------------------- k-means


@dataclass
class KMeansResult:
    assignments: np.ndarray
    centroids: np.ndarray
    inertia: float
    n_iter: int
    inertia_trace: list[float] = field(default_factory=list)


def _sq_dists(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    d = (X * X).sum(1)[:, None] - 2.0 * X @ C.T + (C * C).sum(1)[None, :]
    return np.maximum(d, 0.0)


def _kmeans_pp(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = X.shape[0]
    chosen = [int(rng.integers(n))]
    closest = ((X - X[chosen[0]]) ** 2).sum(1)
    for _ in range(1, k):
        total = closest.sum()
        if total > 0:
            nxt = int(rng.choice(n, p=closest / total))
        else:
            # all remaining points coincide with a centroid
            rest = np.setdiff1d(np.arange(n), chosen)
            nxt = int(rng.choice(rest))
        chosen.append(nxt)
        closest = np.minimum(closest, ((X - X[nxt]) ** 2).sum(1))
    return X[chosen].copy()


def kmeans(X: np.ndarray, k: int, seed: int = 0, max_iters: int = 300) -> KMeansResult:
    """k-means++ seeding followed by Lloyd iterations until assignments stop changing.

    An empty cluster is re-seeded at the point farthest from its current
    centroid, taken from a cluster with at least two members. Ties in the
    assignment step keep a point where it is.
    """
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    if k < 2 or n < k:
        raise DomainError(f"kmeans needs n >= k >= 2, got n={n}, k={k}")
    rng = np.random.default_rng(seed)
    C = _kmeans_pp(X, k, rng)
    assign = _sq_dists(X, C).argmin(1)
    trace = []
    it = 0
    for it in range(1, max_iters + 1):
        for j in range(k):
            members = assign == j
            if members.any():
                C[j] = X[members].mean(0)
        d = _sq_dists(X, C)
        for j in range(k):
            if not (assign == j).any():
                # take the worst-fitting point from a cluster that can spare one
                sizes = np.bincount(assign, minlength=k)
                own = d[np.arange(n), assign]
                own[sizes[assign] < 2] = -np.inf
                far = int(own.argmax())
                C[j] = X[far]
                assign[far] = j
                d = _sq_dists(X, C)
        trace.append(float(d[np.arange(n), assign].sum()))
        new = d.argmin(1)
        # on ties keep the current cluster so coincident centroids stay populated
        current = d[np.arange(n), assign]
        new = np.where(d[np.arange(n), new] < current, new, assign)
        if np.array_equal(new, assign):
            break
        assign = new
    inertia = float(_sq_dists(X, C)[np.arange(n), assign].sum())
    return KMeansResult(assign, C, inertia, it, trace)


# ---------------------------------------------------------------- validity indices


def _clusters(X: np.ndarray, assignments: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    X = np.asarray(X, dtype=np.float64)
    a = np.asarray(assignments)
    if a.shape != (X.shape[0],):
        raise DimensionError(f"{a.shape[0] if a.ndim else 0} assignments for {X.shape[0]} points")
    ids, codes = np.unique(a, return_inverse=True)
    if len(ids) < 2:
        raise DomainError("at least two non-empty clusters are required")
    return X, codes


def davies_bouldin(X: np.ndarray, assignments: np.ndarray) -> float:
    """Mean over clusters of max_j (S_i + S_j) / ||c_i - c_j||; lower is better."""
    X, codes = _clusters(X, assignments)
    k = codes.max() + 1
    # exactly rounded sums: nearly coincident centroids make the ratio ill-conditioned
    groups = [X[codes == j] for j in range(k)]
    cents = np.array([[math.fsum(col) / len(g) for col in g.T] for g in groups])
    scatter = np.array([math.fsum(np.linalg.norm(g - c, axis=1)) / len(g) for g, c in zip(groups, cents)])
    sep = np.linalg.norm(cents[:, None, :] - cents[None, :, :], axis=2)
    np.fill_diagonal(sep, np.inf)
    if (sep == 0).any():
        log.warning("davies_bouldin: coincident centroids, returning inf")
        return float("inf")
    ratio = (scatter[:, None] + scatter[None, :]) / sep
    return float(ratio.max(1).mean())


def silhouette(X: np.ndarray, assignments: np.ndarray) -> float:
    """Mean silhouette coefficient with Euclidean distances.

    Points in singleton clusters score 0.
    """
    X, codes = _clusters(X, assignments)
    n = X.shape[0]
    k = codes.max() + 1
    sizes = np.bincount(codes, minlength=k).astype(np.float64)
    onehot = np.zeros((n, k))
    onehot[np.arange(n), codes] = 1.0
    scores = np.empty(n)
    # bound the n x chunk x d difference tensor to ~16M floats
    chunk = max(1, 16_000_000 // max(1, n * X.shape[1]))
    for s in range(0, n, chunk):
        rows = slice(s, min(s + chunk, n))
        d = np.linalg.norm(X[rows, None, :] - X[None, :, :], axis=2)
        sums = d @ onehot
        own = codes[rows]
        own_size = sizes[own]
        with np.errstate(invalid="ignore", divide="ignore"):
            a = sums[np.arange(len(own)), own] / (own_size - 1)
        means = sums / sizes[None, :]
        means[np.arange(len(own)), own] = np.inf
        b = means.min(1)
        denom = np.maximum(a, b)
        with np.errstate(invalid="ignore", divide="ignore"):
            sc = np.where(denom > 0, (b - a) / denom, 0.0)
        scores[rows] = np.where(own_size > 1, sc, 0.0)
    return float(scores.mean())


@dataclass
class ClusterReport:
    dbi: float
    silhouette: float
    k: int
    assignment_source: str
    seed: int


def cluster_report(Z: np.ndarray, labels: np.ndarray, k: int, source: str = "kmeans", seed: int = 0) -> ClusterReport:
    if source == "kmeans":
        assign = kmeans(Z, k, seed).assignments
    elif source == "labels":
        assign = np.asarray(labels)
    else:
        raise ConfigError(f"unknown assignment source {source!r}")
    return ClusterReport(davies_bouldin(Z, assign), silhouette(Z, assign), k, source, seed)


# ---------------------------------------------------------------- linear probe


@dataclass(frozen=True)
class ProbeConfig:
    lr: float = 0.01
    epochs: int = 500
    weight_decay: float = 0.01


@dataclass
class LinearProbe:
    weight: np.ndarray
    bias: np.ndarray
    classes: np.ndarray
    config: ProbeConfig
    loss_trace: list[float] = field(default_factory=list)

    def logits(self, Z: np.ndarray) -> np.ndarray:
        return np.asarray(Z, dtype=np.float64) @ self.weight + self.bias

    def predict(self, Z: np.ndarray) -> np.ndarray:
        return self.classes[self.logits(Z).argmax(1)]


def _cross_entropy(Z: Tensor, W: Tensor, b: Tensor, y: np.ndarray) -> Tensor:
    n = Z.shape[0]
    ones = Tensor(np.ones((n, 1)))
    logits = ad.matmul(Z, W) + ad.matmul(ones, ad.reshape(b, (1, -1)))
    picked = ad.index(logits, (np.arange(n), y))
    return ad.mean(ad.log_sum_exp(logits, axis=1) - picked)


def fit_probe(Z_train: np.ndarray, labels: np.ndarray, config: ProbeConfig | None = None) -> LinearProbe:
    """Multinomial logistic regression on frozen embeddings, full-batch AdamW."""
    config = config or ProbeConfig()
    Z = np.asarray(Z_train, dtype=np.float64)
    labels = np.asarray(labels)
    if Z.ndim != 2 or Z.shape[0] != labels.shape[0]:
        raise DimensionError(f"fit_probe: {Z.shape} embeddings for {labels.shape} labels")
    classes, y = np.unique(labels, return_inverse=True)
    if len(classes) < 2:
        raise DomainError("fit_probe needs at least two classes")
    d, K = Z.shape[1], len(classes)
    params = {"weight": np.zeros((d, K)), "bias": np.zeros(K)}
    moments = Moments()
    opt = AdamWConfig(lr=config.lr, weight_decay=config.weight_decay)
    Zt = Tensor(Z)
    trace = []
    for step in range(1, config.epochs + 1):
        W = Tensor(params["weight"], requires_grad=True)
        b = Tensor(params["bias"], requires_grad=True)
        with ad.Graph():
            loss = _cross_entropy(Zt, W, b, y)
            trace.append(loss.item())
            grads = ad.backward(loss)
        params, moments = adamw_step(params, {"weight": grads[W], "bias": grads[b]}, moments, step, opt)
    with ad.no_grad():
        trace.append(_cross_entropy(Zt, Tensor(params["weight"]), Tensor(params["bias"]), y).item())
    return LinearProbe(params["weight"], params["bias"], classes, config, trace)


# ---------------------------------------------------------------- classification metrics


@dataclass
class ProbeReport:
    accuracy: float
    f1_macro: float
    f1_weighted: float
    precision_macro: float
    precision_weighted: float
    recall_macro: float
    recall_weighted: float
    mode: str
    per_class: dict[int, dict[str, float]]

    @property
    def f1(self) -> float:
        return getattr(self, f"f1_{self.mode}")

    @property
    def precision(self) -> float:
        return getattr(self, f"precision_{self.mode}")

    @property
    def recall(self) -> float:
        return getattr(self, f"recall_{self.mode}")


def _ratio(num: float, den: float) -> float:
    return num / den if den > 0 else 0.0


def classification_metrics(pred, truth, mode: str = "macro") -> ProbeReport:
    """Accuracy plus per-class, macro and support-weighted precision/recall/F1.

    Undefined ratios (0/0) count as 0. Classes are the union of predicted and
    true labels.
    """
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise DimensionError(f"{pred.shape[0]} predictions for {truth.shape[0]} labels")
    if truth.size == 0:
        raise DataError("classification_metrics: no samples")
    if mode not in ("macro", "weighted"):
        raise ConfigError(f"unknown averaging mode {mode!r}")
    per_class = {}
    for c in np.union1d(pred, truth):
        tp = float(np.sum((pred == c) & (truth == c)))
        p = _ratio(tp, float(np.sum(pred == c)))
        r = _ratio(tp, float(np.sum(truth == c)))
        per_class[int(c)] = {
            "precision": p,
            "recall": r,
            "f1": _ratio(2 * p * r, p + r),
            "support": int(np.sum(truth == c)),
        }
    support = np.array([v["support"] for v in per_class.values()], dtype=np.float64)
    weights = support / support.sum()

    def agg(key):
        vals = np.array([v[key] for v in per_class.values()])
        return float(vals.mean()), float((vals * weights).sum())

    f1m, f1w = agg("f1")
    pm, pw = agg("precision")
    rm, rw = agg("recall")
    return ProbeReport(float(np.mean(pred == truth)), f1m, f1w, pm, pw, rm, rw, mode, per_class)


# ---------------------------------------------------------------- export


def export_embeddings(Z: np.ndarray, labels: np.ndarray | None, path: str | Path, meta: dict | None = None) -> None:
    """Write one CSV row per timestep: ``seq_id,t,label,dim_0..dim_{d-1}``.

    ``meta["seq_ids"]`` overrides the default 0-based sequence ids.
    """
    Z = np.asarray(Z, dtype=np.float64)
    if Z.ndim != 3:
        raise DimensionError(f"expected B x T x d embeddings, got {Z.shape}")
    B, T, d = Z.shape
    seq_ids = (meta or {}).get("seq_ids", list(range(B)))
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["seq_id", "t", "label"] + [f"dim_{j}" for j in range(d)])
        for b in range(B):
            for t in range(T):
                lab = "" if labels is None else str(int(labels[b][t]))
                w.writerow([seq_ids[b], t, lab] + [format(v, ".17g") for v in Z[b, t]])


def load_embeddings(path: str | Path) -> tuple[list[tuple[str, int, int | None]], np.ndarray]:
    """Read an export back as (row keys, n x d array)."""
    keys, rows = [], []
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        next(reader)
        for row in reader:
            keys.append((row[0], int(row[1]), int(row[2]) if row[2] else None))
            rows.append([float(v) for v in row[3:]])
    return keys, np.array(rows, dtype=np.float64)


# ---------------------------------------------------------------- end-to-end report

METRIC_FIELDS = (
    "dbi",
    "silhouette",
    "accuracy",
    "f1_macro",
    "f1_weighted",
    "precision_macro",
    "precision_weighted",
    "recall_macro",
    "recall_weighted",
)
REPORT_FIELDS = ("dataset", "seed", "loss_kind") + METRIC_FIELDS + ("config_digest",)


def subset_counts(labels: np.ndarray, per_class: int) -> dict[int, int]:
    """``per_class`` of every class, capped at the rarest class's count."""
    classes, counts = np.unique(np.asarray(labels).reshape(-1), return_counts=True)
    n = min(per_class, int(counts.min()))
    return {int(c): n for c in classes}


def evaluate_embeddings(
    Z_train: np.ndarray,
    y_train: np.ndarray,
    Z_test: np.ndarray,
    y_test: np.ndarray,
    counts: dict[int, int],
    seed: int,
    assignment: str = "kmeans",
    k: int | None = None,
    probe: ProbeConfig | None = None,
) -> dict:
    """Clusterability on a balanced test subset plus a linear probe (train -> test).

    All embedding arrays are flattened to ``n x d``.
    """
    from .signals import balanced_subset

    idx = balanced_subset(y_test, counts, seed)
    n_classes = len(counts)
    if k is not None and k != n_classes:
        raise ConfigError(f"k={k} does not match the {n_classes} classes in the evaluation subset")
    clusters = cluster_report(Z_test[idx], np.asarray(y_test)[idx], n_classes, assignment, seed)
    fitted = fit_probe(Z_train, y_train, probe)
    scores = classification_metrics(fitted.predict(Z_test), y_test)
    return {
        "dbi": clusters.dbi,
        "silhouette": clusters.silhouette,
        "accuracy": scores.accuracy,
        "f1_macro": scores.f1_macro,
        "f1_weighted": scores.f1_weighted,
        "precision_macro": scores.precision_macro,
        "precision_weighted": scores.precision_weighted,
        "recall_macro": scores.recall_macro,
        "recall_weighted": scores.recall_weighted,
        "assignment": assignment,
        "k": n_classes,
        "n_eval": int(len(idx)),
    }
