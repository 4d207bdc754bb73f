"""Latent-process inference: mixture metric, posterior, argmax and evaluation metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .cqi_core import SensingTask, TaskType
from .feature_pca import PcaModel, reconstruct

KNN_EPS = 1e-9
LOG_2PI = math.log(2.0 * math.pi)


class NoEvidenceError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class FeatureBatch:
    """Evidence ``X``: one feature vector (or per-device dict) per gateway."""

    task_id: str
    timestamp_ms: int
    gateways: dict[str, object]

    def __post_init__(self):
        if not self.gateways:
            raise ValueError("a feature batch needs at least one gateway")
        for gw, x in self.gateways.items():
            vals = x.values() if isinstance(x, Mapping) else [x]
            for v in vals:
                if not np.all(np.isfinite(np.asarray(v, dtype=float))):
                    raise ValueError(f"non-finite features from gateway {gw}")

    @property
    def gw_ids(self) -> list[str]:
        return list(self.gateways)


@dataclass(frozen=True, eq=False)
class LatentEstimate:
    task_id: str
    labels: tuple[str, ...]
    posteriors: np.ndarray
    estimate: int
    log_components: np.ndarray  # (K, E)
    timestamp_ms: int
    gw_ids: tuple[str, ...]
    seq: int | None = None
    meta: dict = field(default_factory=dict)

    @property
    def label(self) -> str:
        return self.labels[self.estimate]

    def to_json(self) -> dict:
        out = {
            "task_id": self.task_id,
            "gw_ids": list(self.gw_ids),
            "timestamp_ms": int(self.timestamp_ms),
            "estimate": self.label,
            "posteriors": {lab: float(p) for lab, p in zip(self.labels, self.posteriors)},
        }
        if self.seq is not None:
            out["seq"] = self.seq
        out.update(self.meta)
        return out


# ---------------------------------------------------------------------------
# mixture components


def gaussian_component(model: PcaModel, x: np.ndarray, label: str) -> float:
    """Diagonal-Gaussian log-likelihood of the reconstructed CQI under class ``label``."""
    stats = model.stats_for(label)
    s_hat = reconstruct(model, x)
    r = s_hat - stats.mu
    return float(-0.5 * np.sum(r * r / stats.var + np.log(2.0 * np.pi * stats.var)))


def gaussian_components(
    models: Mapping[str, PcaModel], features: Mapping[str, np.ndarray], labels: Sequence[str]
) -> np.ndarray:
    """Per-label log-likelihood of one gateway's evidence, summed over its devices."""
    out = np.zeros(len(labels))
    for dev, x in features.items():
        if dev not in models:
            raise KeyError(f"no model for device {dev!r}")
        model = models[dev]
        s_hat = reconstruct(model, x)
        for i, lab in enumerate(labels):
            st = model.stats_for(lab)
            r = s_hat - st.mu
            out[i] += -0.5 * np.sum(r * r / st.var + np.log(2.0 * np.pi * st.var))
    return out


@dataclass(frozen=True, eq=False)
class KnnClassifier:
    """Majority-vote KNN on min-max normalised features.

    Query values are clipped to [-0.5, 1.5] after scaling.  Distance ties
    resolve to the earlier training example.
    """

    features: np.ndarray  # (n, d) raw training features
    labels: tuple[str, ...]  # per example
    classes: tuple[str, ...]  # class order
    k: int = 6
    lo: np.ndarray = field(default=None)
    hi: np.ndarray = field(default=None)

    def __post_init__(self):
        X = np.atleast_2d(np.asarray(self.features, dtype=float))
        if X.shape[0] != len(self.labels):
            raise ValueError("features and labels length mismatch")
        if not 1 <= self.k <= X.shape[0]:
            raise ValueError(f"k must be in [1, {X.shape[0]}]")
        if not np.all(np.isfinite(X)):
            raise ValueError("training features must be finite")
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "labels", tuple(str(x) for x in self.labels))
        missing = set(self.labels) - set(self.classes)
        if missing:
            raise ValueError(f"labels {sorted(missing)} not among classes")
        if self.lo is None:
            object.__setattr__(self, "lo", X.min(axis=0))
            object.__setattr__(self, "hi", X.max(axis=0))
        object.__setattr__(self, "_scaled", self.scale(X, clip=False))
        object.__setattr__(self, "_label_idx", np.array([self.classes.index(y) for y in self.labels]))

    @classmethod
    def fit(cls, X, y, k: int = 6, classes: Sequence[str] | None = None) -> "KnnClassifier":
        y = [str(v) for v in y]
        if classes is None:
            classes = tuple(dict.fromkeys(sorted(set(y))))
        return cls(np.asarray(X, dtype=float), tuple(y), tuple(str(c) for c in classes), k)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def scale(self, X: np.ndarray, clip: bool = True) -> np.ndarray:
        span = self.hi - self.lo
        span = np.where(span > 0, span, 1.0)
        Z = (np.asarray(X, dtype=float) - self.lo) / span
        return np.clip(Z, -0.5, 1.5) if clip else Z

    def neighbors(self, x: np.ndarray) -> np.ndarray:
        """Indices of the k nearest training examples, nearest first."""
        x = np.asarray(x, dtype=float)
        if x.shape != (self.dim,):
            raise ValueError(f"dimension mismatch: got {x.shape}, expected ({self.dim},)")
        z = self.scale(x)
        d2 = np.sum((self._scaled - z) ** 2, axis=1)
        return np.argsort(d2, kind="stable")[: self.k]

    def votes(self, x: np.ndarray) -> np.ndarray:
        return np.bincount(self._label_idx[self.neighbors(x)], minlength=len(self.classes))

    def predict(self, x: np.ndarray) -> str:
        return self.classes[int(np.argmax(self.votes(x)))]

    def to_json(self) -> dict:
        return {
            "k": self.k,
            "classes": list(self.classes),
            "features": self.features.tolist(),
            "labels": list(self.labels),
            "lo": self.lo.tolist(),
            "hi": self.hi.tolist(),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "KnnClassifier":
        return cls(
            features=np.asarray(obj["features"], dtype=float),
            labels=tuple(obj["labels"]),
            classes=tuple(obj["classes"]),
            k=int(obj.get("k", 6)),
            lo=np.asarray(obj["lo"], dtype=float) if "lo" in obj else None,
            hi=np.asarray(obj["hi"], dtype=float) if "hi" in obj else None,
        )


def knn_components(clf: KnnClassifier | None, x: np.ndarray) -> np.ndarray:
    """Smoothed log vote fraction for every class, in ``clf.classes`` order."""
    if clf is None:
        raise ValueError("untrained classifier")
    n = clf.votes(x).astype(float)
    C = len(clf.classes)
    return np.log((n + KNN_EPS) / (clf.k + C * KNN_EPS))


def knn_component(clf: KnnClassifier | None, x: np.ndarray, label: str) -> float:
    if clf is None:
        raise ValueError("untrained classifier")
    return float(knn_components(clf, x)[clf.classes.index(label)])


# ---------------------------------------------------------------------------
# posterior


def _logsumexp(a: np.ndarray, axis: int) -> np.ndarray:
    m = np.max(a, axis=axis, keepdims=True)
    m_safe = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(a - m_safe), axis=axis, keepdims=True)) + m_safe
    return np.squeeze(out, axis=axis)


def posterior(priors: Sequence[float], components: np.ndarray, combine: str = "sum") -> np.ndarray:
    """Posterior over K labels from log components ``G`` of shape (K, E).

    ``combine='sum'`` mixes gateway likelihoods additively; ``'product'``
    multiplies them.
    """
    G = np.atleast_2d(np.asarray(components, dtype=float))
    alpha = np.asarray(priors, dtype=float)
    if G.shape[0] != alpha.size:
        raise ValueError(f"components have {G.shape[0]} rows, expected K={alpha.size}")
    if np.any(np.isnan(G)) or np.any(G == np.inf):
        raise ValueError("components must be finite log values or -inf")
    per_k = _logsumexp(G, axis=1) if combine == "sum" else np.sum(G, axis=1)
    with np.errstate(divide="ignore"):
        logw = np.log(alpha) + per_k
    total = _logsumexp(logw, axis=0)
    if not np.isfinite(total):
        raise NoEvidenceError("no evidence: every mixture component underflows")
    post = np.exp(logw - total)
    return post / post.sum()


def infer(
    task: SensingTask,
    batch: FeatureBatch,
    components: np.ndarray,
    combine: str | None = None,
    seq: int | None = None,
) -> LatentEstimate:
    G = np.atleast_2d(np.asarray(components, dtype=float))
    if G.shape != (task.K, len(batch.gateways)):
        raise ValueError(f"components shape {G.shape} != (K={task.K}, E={len(batch.gateways)})")
    post = posterior(task.priors, G, combine or task.gateway_combine)
    return LatentEstimate(
        task_id=task.task_id,
        labels=task.latent_labels,
        posteriors=post,
        estimate=int(np.argmax(post)),
        log_components=G,
        timestamp_ms=batch.timestamp_ms,
        gw_ids=tuple(batch.gw_ids),
        seq=seq,
    )


def detect_occupancy(task: SensingTask, batch: FeatureBatch, components: np.ndarray) -> tuple[str, LatentEstimate]:
    """Binary detection; latent label 0 is 'empty', 1 is 'occupied'."""
    if task.task_type is not TaskType.DETECTION or task.K != 2:
        raise ValueError("detect_occupancy needs a detection task with K=2")
    est = infer(task, batch, components)
    return ("occupied" if est.estimate == 1 else "empty"), est


# ---------------------------------------------------------------------------
# metrics


def detection_metrics(decisions: Sequence[int], truth: Sequence[int]) -> dict[str, float | None]:
    """Sensitivity, FPR, accuracy and specificity; undefined ratios are None."""
    if len(decisions) != len(truth):
        raise ValueError("decisions and truth lengths differ")
    if len(truth) == 0:
        raise ValueError("need at least one decision")
    d = np.asarray(decisions, dtype=int)
    t = np.asarray(truth, dtype=int)
    if not set(np.unique(np.concatenate([d, t]))) <= {0, 1}:
        raise ValueError("labels must be binary 0/1")
    tp = int(np.sum((d == 1) & (t == 1)))
    tn = int(np.sum((d == 0) & (t == 0)))
    fp = int(np.sum((d == 1) & (t == 0)))
    fn = int(np.sum((d == 0) & (t == 1)))

    def ratio(a, b):
        return a / b if b else None

    return {
        "sensitivity": ratio(tp, tp + fn),
        "fpr": ratio(fp, fp + tn),
        "accuracy": (tp + tn) / len(t),
        "specificity": ratio(tn, tn + fp),
    }


def localization_rmse(
    estimates: Sequence[str], truth: Sequence[str], cell_positions: Mapping[str, tuple[float, float]]
) -> float:
    if len(estimates) != len(truth):
        raise ValueError("estimates and truth lengths differ")
    if not estimates:
        raise ValueError("need at least one estimate")
    sq = 0.0
    for e, t in zip(estimates, truth):
        for lab in (e, t):
            if lab not in cell_positions:
                raise KeyError(f"unknown cell label {lab!r}")
        ex, ey = cell_positions[e]
        tx, ty = cell_positions[t]
        sq += (ex - tx) ** 2 + (ey - ty) ** 2
    return math.sqrt(sq / len(estimates))


@dataclass(frozen=True, eq=False)
class CrossValidationResult:
    labels: tuple[str, ...]
    confusion: np.ndarray  # rows truth, cols predicted
    accuracy: float
    predictions: np.ndarray


def stratified_folds(y: Sequence[str], folds: int, seed: int = 42) -> np.ndarray:
    """Fold index per example; each class is shuffled and dealt round-robin."""
    y = np.asarray([str(v) for v in y])
    rng = np.random.default_rng(seed)
    fold_of = np.empty(y.size, dtype=int)
    for lab in sorted(set(y.tolist())):
        idx = np.flatnonzero(y == lab)
        if idx.size < folds:
            raise ValueError(f"class {lab!r} has {idx.size} examples, fewer than {folds} folds")
        idx = idx[rng.permutation(idx.size)]
        fold_of[idx] = np.arange(idx.size) % folds
    return fold_of


def cross_validate(
    X: np.ndarray, y: Sequence[str], folds: int = 10, k: int = 6, seed: int = 42, classes: Sequence[str] | None = None
) -> CrossValidationResult:
    """Stratified k-fold evaluation of the KNN mixture component under uniform priors."""
    if folds < 2:
        raise ValueError("folds must be >= 2")
    X = np.asarray(X, dtype=float)
    y = [str(v) for v in y]
    labels = tuple(classes) if classes is not None else tuple(sorted(set(y)))
    fold_of = stratified_folds(y, folds, seed)
    pos = {lab: i for i, lab in enumerate(labels)}
    conf = np.zeros((len(labels), len(labels)), dtype=int)
    preds = np.empty(len(y), dtype=object)
    uniform = np.full(len(labels), 1.0 / len(labels))
    for f in range(folds):
        train = fold_of != f
        clf = KnnClassifier.fit(X[train], [y[i] for i in np.flatnonzero(train)], k=k, classes=labels)
        for i in np.flatnonzero(~train):
            post = posterior(uniform, knn_components(clf, X[i])[:, None])
            p = labels[int(np.argmax(post))]
            preds[i] = p
            conf[pos[y[i]], pos[p]] += 1
    return CrossValidationResult(labels, conf, float(np.trace(conf) / conf.sum()), preds)
