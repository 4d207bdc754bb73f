"""Marginalized-covariance PCA: training, projection and reconstruction.

The covariance pools per-class sample covariances weighted by the class
priors, about the prior-weighted global mean.  Complex CQI vectors are
stacked as ``[real, imag]`` before any of this, so everything downstream
is real-valued.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .cqi_core import Layout

JACOBI_TOL = 1e-12
JACOBI_MAX_SWEEPS = 100


def _round_robin(n: int) -> list[list[tuple[int, int]]]:
    """Rounds of disjoint index pairs covering every pair exactly once."""
    m = n + (n % 2)
    players = list(range(m))
    rounds = []
    for _ in range(m - 1):
        pairs = []
        for i in range(m // 2):
            p, q = players[i], players[m - 1 - i]
            if p < n and q < n:
                pairs.append((min(p, q), max(p, q)))
        rounds.append(pairs)
        players = [players[0], players[-1]] + players[1:-1]
    return rounds


def _fix_signs(vecs: np.ndarray) -> np.ndarray:
    """Make the largest-magnitude entry of each column positive (first index on ties)."""
    idx = np.argmax(np.abs(vecs), axis=0)
    signs = np.sign(vecs[idx, np.arange(vecs.shape[1])])
    signs[signs == 0] = 1.0
    return vecs * signs


def jacobi_eigh(
    matrix: np.ndarray, tol: float = JACOBI_TOL, max_sweeps: int = JACOBI_MAX_SWEEPS
) -> tuple[np.ndarray, np.ndarray]:
    """Eigendecomposition of a real symmetric matrix by cyclic Jacobi rotations.

    Pairs are visited in round-robin order so each round rotates a set of
    disjoint planes at once.  Iteration stops when the off-diagonal
    Frobenius norm drops below ``tol`` times the matrix norm.

    Returns:
        ``(eigenvalues, eigenvectors)`` with eigenvalues in descending order
        and eigenvectors as columns, sign-normalised.
    """
    A = np.array(matrix, dtype=float, copy=True)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError("matrix must be square")
    n = A.shape[0]
    A = 0.5 * (A + A.T)
    V = np.eye(n)
    norm = np.linalg.norm(A)
    if n > 1 and norm > 0:
        rounds = _round_robin(n)
        target = tol * norm
        offdiag = ~np.eye(n, dtype=bool)
        for _ in range(max_sweeps):
            off = np.linalg.norm(A[offdiag])
            if off <= target:
                break
            for pairs in rounds:
                P = np.array([p for p, _ in pairs])
                Q = np.array([q for _, q in pairs])
                apq = A[P, Q]
                active = np.abs(apq) > 1e-300
                if not active.any():
                    continue
                P, Q, apq = P[active], Q[active], apq[active]
                app, aqq = A[P, P], A[Q, Q]
                tau = (aqq - app) / (2.0 * apq)
                big = np.abs(tau) > 1e150
                tau_s = np.where(big, 1.0, tau)
                t = np.where(tau >= 0, 1.0, -1.0) / (np.abs(tau_s) + np.sqrt(1.0 + tau_s * tau_s))
                t = np.where(big, 0.5 / np.where(big, tau, 1.0), t)
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = t * c
                colP, colQ = A[:, P].copy(), A[:, Q]
                A[:, P] = c * colP - s * colQ
                A[:, Q] = s * colP + c * colQ
                rowP, rowQ = A[P, :].copy(), A[Q, :]
                A[P, :] = c[:, None] * rowP - s[:, None] * rowQ
                A[Q, :] = s[:, None] * rowP + c[:, None] * rowQ
                A[P, Q] = 0.0
                A[Q, P] = 0.0
                vP, vQ = V[:, P].copy(), V[:, Q]
                V[:, P] = c * vP - s * vQ
                V[:, Q] = s * vP + c * vQ
        else:
            warnings.warn("Jacobi eigensolver did not converge", RuntimeWarning)
    vals = np.diag(A).copy()
    order = np.argsort(-vals, kind="stable")
    return vals[order], _fix_signs(V[:, order])


def as_real(vectors: np.ndarray) -> np.ndarray:
    """Stack complex vectors as ``[real, imag]`` along the last axis."""
    arr = np.asarray(vectors)
    if np.iscomplexobj(arr):
        return np.concatenate([arr.real, arr.imag], axis=-1)
    return arr.astype(float)


@dataclass(frozen=True, eq=False)
class TrainingSet:
    task_id: str
    classes: dict[str, np.ndarray]  # label -> (D_k, V)
    layout: Layout
    device_id: str = ""

    def __post_init__(self):
        if not self.classes:
            raise ValueError("training set has no classes")
        V = None
        fixed = {}
        for label, rows in self.classes.items():
            arr = np.atleast_2d(np.asarray(rows))
            if arr.size == 0 or arr.shape[0] == 0:
                raise ValueError(f"class {label!r} is empty")
            if V is None:
                V = arr.shape[1]
            elif arr.shape[1] != V:
                raise ValueError(f"class {label!r} vectors have length {arr.shape[1]}, expected {V}")
            fixed[str(label)] = arr
        if V != self.layout.V:
            raise ValueError(f"vectors have length {V} but layout implies V={self.layout.V}")
        object.__setattr__(self, "classes", fixed)

    @property
    def labels(self) -> list[str]:
        return list(self.classes)

    @property
    def V(self) -> int:
        return self.layout.V

    def to_json(self) -> dict:
        def enc(arr):
            if np.iscomplexobj(arr):
                return {"re": arr.real.tolist(), "im": arr.imag.tolist()}
            return arr.tolist()

        out = {
            "task_id": self.task_id,
            "layout": self.layout.to_json(),
            "classes": {k: enc(v) for k, v in self.classes.items()},
        }
        if self.device_id:
            out["device_id"] = self.device_id
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "TrainingSet":
        classes = {}
        for label, rows in obj["classes"].items():
            if isinstance(rows, dict):
                classes[label] = np.asarray(rows["re"], dtype=float) + 1j * np.asarray(rows["im"], dtype=float)
            else:
                if len(rows) == 0:
                    raise ValueError(f"class {label!r} is empty")
                classes[label] = np.asarray(rows, dtype=float)
        return cls(
            task_id=obj["task_id"],
            classes=classes,
            layout=Layout.from_json(obj["layout"]),
            device_id=obj.get("device_id", ""),
        )


@dataclass(frozen=True)
class ClassStats:
    label: str
    mu: np.ndarray
    var: np.ndarray


@dataclass(frozen=True, eq=False)
class PcaModel:
    task_id: str
    subspace: np.ndarray  # (V, P) orthonormal columns
    eigenvalues: np.ndarray  # (P,) descending
    spectrum: np.ndarray  # (V,) all eigenvalues, descending
    covariance: np.ndarray  # (V, V)
    mean_vector: np.ndarray  # (V,)
    class_stats: tuple[ClassStats, ...]
    threshold_used: float | None = None
    threshold_fallback: bool = False
    complex_input: bool = False
    device_id: str = ""
    layout: Layout | None = None
    labels: tuple[str, ...] = field(default=())

    def __post_init__(self):
        if not self.labels:
            object.__setattr__(self, "labels", tuple(c.label for c in self.class_stats))

    @property
    def V(self) -> int:
        return self.subspace.shape[0]

    @property
    def P(self) -> int:
        return self.subspace.shape[1]

    def stats_for(self, label: str) -> ClassStats:
        for c in self.class_stats:
            if c.label == label:
                return c
        raise KeyError(f"no class statistics for label {label!r}")

    def to_json(self) -> dict:
        out = {
            "task_id": self.task_id,
            "V": self.V,
            "P": self.P,
            "h": self.threshold_used,
            "mean": self.mean_vector.tolist(),
            "eigenvalues": self.eigenvalues.tolist(),
            "U": self.subspace.tolist(),
            "class_stats": [{"label": c.label, "mu": c.mu.tolist(), "var": c.var.tolist()} for c in self.class_stats],
            "spectrum": self.spectrum.tolist(),
            "covariance": self.covariance.tolist(),
            "threshold_fallback": self.threshold_fallback,
            "complex_input": self.complex_input,
            "device_id": self.device_id,
        }
        if self.layout is not None:
            out["layout"] = self.layout.to_json()
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "PcaModel":
        V, P = int(obj["V"]), int(obj["P"])
        U = np.asarray(obj["U"], dtype=float).reshape(V, P)
        mean = np.asarray(obj["mean"], dtype=float)
        if mean.shape != (V,):
            raise ValueError(f"mean has length {mean.size}, expected {V}")
        stats = tuple(
            ClassStats(str(c["label"]), np.asarray(c["mu"], dtype=float), np.asarray(c["var"], dtype=float))
            for c in obj["class_stats"]
        )
        for c in stats:
            if c.mu.shape != (V,) or c.var.shape != (V,):
                raise ValueError(f"class_stats for {c.label!r} must have length {V}")
        cov = obj.get("covariance")
        spectrum = obj.get("spectrum", obj["eigenvalues"])
        return cls(
            task_id=obj["task_id"],
            subspace=U,
            eigenvalues=np.asarray(obj["eigenvalues"], dtype=float),
            spectrum=np.asarray(spectrum, dtype=float),
            covariance=np.asarray(cov, dtype=float) if cov is not None else np.zeros((0, 0)),
            mean_vector=mean,
            class_stats=stats,
            threshold_used=obj.get("h"),
            threshold_fallback=bool(obj.get("threshold_fallback", False)),
            complex_input=bool(obj.get("complex_input", False)),
            device_id=obj.get("device_id", ""),
            layout=Layout.from_json(obj["layout"]) if "layout" in obj else None,
        )


def marginalized_covariance(
    classes: Sequence[np.ndarray], priors: Sequence[float]
) -> tuple[np.ndarray, np.ndarray]:
    """Prior-weighted pooled covariance and the prior-weighted mean it is taken about."""
    priors = np.asarray(priors, dtype=float)
    mean = sum(a * X.mean(axis=0) for a, X in zip(priors, classes))
    V = classes[0].shape[1]
    C = np.zeros((V, V))
    for a, X in zip(priors, classes):
        Xc = X - mean
        C += a * (Xc.T @ Xc) / X.shape[0]
    return 0.5 * (C + C.T), mean


def train_pca(
    training: TrainingSet,
    priors: Sequence[float] | Mapping[str, float] | None = None,
    *,
    threshold: float | None = None,
    num_components: int | None = None,
) -> PcaModel:
    """Fit the subspace and the per-class reconstruction statistics.

    Exactly one of ``threshold`` (keep eigenvalues >= h, at least one) and
    ``num_components`` must be given.  If the threshold exceeds every
    eigenvalue the model keeps one component and sets ``threshold_fallback``.
    """
    if (threshold is None) == (num_components is None):
        raise ValueError("give exactly one of threshold or num_components")
    labels = training.labels
    if priors is None:
        pri = np.full(len(labels), 1.0 / len(labels))
    elif isinstance(priors, Mapping):
        pri = np.array([float(priors[k]) for k in labels])
    else:
        pri = np.asarray(priors, dtype=float)
    if pri.size != len(labels):
        raise ValueError(f"priors length {pri.size} does not match {len(labels)} classes")
    if abs(pri.sum() - 1.0) > 1e-9 or np.any(pri < 0):
        raise ValueError("priors must be non-negative and sum to 1")

    complex_input = any(np.iscomplexobj(training.classes[k]) for k in labels)
    classes = [as_real(training.classes[k]) for k in labels]
    C, mean = marginalized_covariance(classes, pri)
    V = C.shape[0]
    spectrum, vecs = jacobi_eigh(C)

    fallback = False
    if threshold is not None:
        P = int(np.sum(spectrum >= threshold))
        if P == 0:
            warnings.warn(f"threshold h={threshold} exceeds the largest eigenvalue; keeping P=1", RuntimeWarning)
            P, fallback = 1, True
    else:
        P = int(num_components)
        if not 1 <= P <= V:
            raise ValueError(f"num_components must be in [1, {V}]")
    U = vecs[:, :P]

    floor = max(1e-6 * float(np.trace(C)) / V, 1e-12)
    stats = []
    for label, X in zip(labels, classes):
        recon = (X - mean) @ U @ U.T + mean
        stats.append(ClassStats(label, recon.mean(axis=0), np.maximum(recon.var(axis=0), floor)))

    return PcaModel(
        task_id=training.task_id,
        subspace=U,
        eigenvalues=spectrum[:P].copy(),
        spectrum=spectrum,
        covariance=C,
        mean_vector=mean,
        class_stats=tuple(stats),
        threshold_used=threshold,
        threshold_fallback=fallback,
        complex_input=complex_input,
        device_id=training.device_id,
        layout=training.layout,
    )


def _prepare(model: PcaModel, s: np.ndarray) -> np.ndarray:
    s = np.asarray(s)
    if np.iscomplexobj(s) or (model.complex_input and s.shape[-1] * 2 == model.V):
        s = as_real(s)
    if s.shape[-1] != model.V:
        raise ValueError(f"dimension mismatch: got length {s.shape[-1]}, model V={model.V}")
    return s.astype(float, copy=False)


def project(model: PcaModel, s: np.ndarray) -> np.ndarray:
    """Features ``U_P^T (s - mean)``; accepts a vector or a stack of vectors."""
    return (_prepare(model, s) - model.mean_vector) @ model.subspace


project_batch = project


def reconstruct(model: PcaModel, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != model.P:
        raise ValueError(f"dimension mismatch: got {x.shape[-1]} features, model P={model.P}")
    return x @ model.subspace.T + model.mean_vector


def explained_variance(model: PcaModel) -> np.ndarray:
    total = float(np.sum(model.spectrum))
    if total <= 0:
        return np.zeros_like(model.spectrum)
    return model.spectrum / total


def save_models(path: str | Path, models: Mapping[str, PcaModel], task_id: str) -> Path:
    """Write a per-device model bundle ``{"task_id", "models": [...]}``."""
    path = Path(path)
    doc = {"task_id": task_id, "models": [models[d].to_json() for d in sorted(models)]}
    path.write_text(json.dumps(doc, sort_keys=True), encoding="utf-8")
    return path


def load_models(path: str | Path) -> dict[str, PcaModel]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    return models_from_json(doc)


def models_from_json(doc: dict) -> dict[str, PcaModel]:
    docs = doc["models"] if "models" in doc else [doc]
    out = {}
    for m in docs:
        model = PcaModel.from_json(m)
        out[model.device_id] = model
    return out
