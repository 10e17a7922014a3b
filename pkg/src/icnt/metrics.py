"""Evaluation artifacts: confusion matrix, P/R/F1, one-vs-rest ROC/AUC and 3-D PCA."""
from __future__ import annotations

import csv
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

log = logging.getLogger(__name__)


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # rows = true class, columns = predicted class
    class_names: list[str]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def accuracy(self) -> float:
        return float(np.trace(self.counts)) / self.total if self.total else 0.0


def confusion_matrix(preds, labels, k: int, class_names: Sequence[str] | None = None) -> ConfusionMatrix:
    preds = np.asarray(preds, dtype=np.int64).reshape(-1)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if preds.shape != labels.shape:
        raise ValueError(f"{preds.size} predictions vs {labels.size} labels")
    for what, arr in (("prediction", preds), ("label", labels)):
        bad = arr[(arr < 0) | (arr >= k)]
        if bad.size:
            raise ValueError(f"{what} {int(bad[0])} out of range [0, {k})")
    counts = np.zeros((k, k), dtype=np.int64)
    np.add.at(counts, (labels, preds), 1)
    names = list(class_names) if class_names is not None else [str(i) for i in range(k)]
    return ConfusionMatrix(counts, names)


@dataclass
class ClassMetrics:
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    support: np.ndarray
    accuracy: float
    macro: dict[str, float]
    weighted: dict[str, float]
    undefined_precision: list[int] = field(default_factory=list)
    undefined_recall: list[int] = field(default_factory=list)


def _safe_div(num: np.ndarray, den: np.ndarray) -> tuple[np.ndarray, list[int]]:
    out = np.zeros(num.shape, dtype=np.float64)
    ok = den > 0
    out[ok] = num[ok] / den[ok]
    return out, [int(i) for i in np.where(~ok)[0]]


def precision_recall_f1(cm: ConfusionMatrix) -> ClassMetrics:
    """Per-class P/R/F1 plus macro and support-weighted averages; 0/0 gives 0 and is flagged."""
    c = cm.counts.astype(np.float64)
    if c.size == 0:
        raise ValueError("empty confusion matrix")
    tp = np.diag(c)
    precision, no_pred = _safe_div(tp, c.sum(axis=0))
    recall, no_true = _safe_div(tp, c.sum(axis=1))
    f1, _ = _safe_div(2 * precision * recall, precision + recall)
    support = cm.counts.sum(axis=1)
    w = support / support.sum() if support.sum() else np.zeros_like(precision)
    macro = {"precision": float(precision.mean()), "recall": float(recall.mean()), "f1": float(f1.mean())}
    weighted = {"precision": float(w @ precision), "recall": float(w @ recall), "f1": float(w @ f1)}
    return ClassMetrics(precision, recall, f1, support, cm.accuracy, macro, weighted, no_pred, no_true)


@dataclass
class RocCurve:
    class_index: int
    thresholds: np.ndarray
    fpr: np.ndarray
    tpr: np.ndarray
    auc: float


def roc_curve(scores, positive) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(thresholds, fpr, tpr) with tied scores collapsed into one step; starts at (0, 0)."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(positive, dtype=bool)
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    last_of_group = np.r_[np.where(np.diff(s) != 0)[0], s.size - 1]
    tps = np.cumsum(y)[last_of_group]
    fps = last_of_group + 1 - tps
    tpr = np.r_[0.0, tps / max(int(y.sum()), 1)]
    fpr = np.r_[0.0, fps / max(int((~y).sum()), 1)]
    return np.r_[np.inf, s[last_of_group]], fpr, tpr


def roc_auc(scores, labels, class_names: Sequence[str] | None = None) -> list[RocCurve | None]:
    """One-vs-rest ROC per class; None where a class lacks positives or negatives."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if scores.ndim != 2 or scores.shape[0] != labels.shape[0]:
        raise ValueError(f"scores {scores.shape} do not match {labels.shape[0]} labels")
    row_sums = scores.sum(axis=1)
    if not np.allclose(row_sums, 1.0, rtol=0, atol=1e-5):
        raise ValueError("score rows must be probabilities summing to 1 (within 1e-5)")
    curves: list[RocCurve | None] = []
    for c in range(scores.shape[1]):
        pos = labels == c
        if pos.all() or not pos.any():
            name = class_names[c] if class_names else str(c)
            log.warning("AUC undefined for class %s: %d positives, %d negatives", name, pos.sum(), (~pos).sum())
            curves.append(None)
            continue
        thr, fpr, tpr = roc_curve(scores[:, c], pos)
        curves.append(RocCurve(c, thr, fpr, tpr, float(np.trapezoid(tpr, fpr))))
    return curves


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


# --------------------------------------------------------------------------
# PCA
# --------------------------------------------------------------------------

@dataclass
class PcaProjection:
    coords: np.ndarray  # N x k
    explained_ratio: np.ndarray  # k
    components: np.ndarray  # D x k, orthonormal columns
    eigenvalues: np.ndarray
    mean: np.ndarray
    rank_deficient: bool = False


def top_eigenpairs(
    cov: np.ndarray, k: int, tol: float = 1e-9, max_iter: int = 20000, seed: int = 0
) -> tuple[np.ndarray, np.ndarray]:
    """Leading k eigenpairs of a symmetric PSD matrix by block power iteration.

    A few extra vectors ride along to speed convergence; each sweep does a
    QR re-orthonormalization and a Rayleigh-Ritz rotation. Stops once every
    residual ||A v - lambda v|| is below ``tol`` times the largest eigenvalue.
    """
    d = cov.shape[0]
    k = min(k, d)
    p = min(d, k + 5)
    q, _ = np.linalg.qr(np.random.default_rng(seed).standard_normal((d, p)))
    vals = np.zeros(p)
    for _ in range(max_iter):
        q, _ = np.linalg.qr(cov @ q)
        small = q.T @ cov @ q
        vals, rot = np.linalg.eigh((small + small.T) / 2)
        order = np.argsort(vals)[::-1]
        vals, q = vals[order], q @ rot[:, order]
        resid = np.linalg.norm(cov @ q[:, :k] - q[:, :k] * vals[:k], axis=0)
        if resid.max() <= tol * max(vals[0], np.finfo(float).tiny):
            break
    else:
        log.warning("eigen-solver hit %d iterations (residual %.3g)", max_iter, resid.max())
    return vals[:k], q[:, :k]


def pca3(features, tol: float = 1e-9) -> PcaProjection:
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 4 or x.shape[1] < 3:
        raise ValueError(f"pca3 needs N >= 4 and D >= 3, got shape {x.shape}")
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / (x.shape[0] - 1)
    trace = float(np.trace(cov))
    vals, vecs = top_eigenpairs(cov, 3, tol)
    keep = vals > 1e-12 * max(trace, 0.0) if trace > 0 else np.zeros(vals.shape, bool)
    rank_deficient = not keep.all()
    if rank_deficient:
        log.warning("feature covariance has rank < 3; returning %d component(s)", int(keep.sum()))
    vals, vecs = vals[keep], vecs[:, keep]
    # deterministic sign: largest-magnitude loading positive
    flip = np.sign(vecs[np.abs(vecs).argmax(axis=0), np.arange(vecs.shape[1])])
    vecs = vecs * np.where(flip == 0, 1, flip)
    ratio = vals / trace if trace > 0 else np.zeros_like(vals)
    return PcaProjection(xc @ vecs, ratio, vecs, vals, mean, rank_deficient)


def intra_class_variance(features, labels) -> float:
    """Mean over classes of the mean squared distance to the class centroid."""
    f = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    per_class = [((f[labels == c] - f[labels == c].mean(axis=0)) ** 2).sum(axis=1).mean() for c in np.unique(labels)]
    return float(np.mean(per_class))


# --------------------------------------------------------------------------
# CSV output
# --------------------------------------------------------------------------

def _f(x: float) -> str:
    return f"{x:.6f}"


def _slug(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]+", "_", name)


def emit_reports(
    cm: ConfusionMatrix,
    metrics: ClassMetrics,
    rocs: Sequence[RocCurve | None],
    pca: PcaProjection,
    labels,
    out_dir,
    paths: Sequence[str] | None = None,
) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    names = cm.class_names
    written: list[Path] = []

    def write(fname: str, header: list[str], rows: list[list]) -> None:
        path = out / fname
        try:
            with open(path, "w", newline="", encoding="utf-8") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(header)
                w.writerows(rows)
        except OSError as exc:
            raise OSError(f"cannot write {path}: {exc}") from exc
        written.append(path)

    write("confusion.csv", ["true\\pred", *names], [[n, *map(int, row)] for n, row in zip(names, cm.counts)])

    rows = [
        [n, _f(p), _f(r), _f(f), int(s)]
        for n, p, r, f, s in zip(names, metrics.precision, metrics.recall, metrics.f1, metrics.support)
    ]
    total = int(metrics.support.sum())
    for agg in ("macro", "weighted"):
        d = getattr(metrics, agg)
        rows.append([agg, _f(d["precision"]), _f(d["recall"]), _f(d["f1"]), total])
    rows.append(["accuracy", "", "", _f(metrics.accuracy), total])
    write("metrics.csv", ["class", "precision", "recall", "f1", "support"], rows)

    labels = np.asarray(labels)
    auc_rows = []
    for c, name in enumerate(names):
        roc = rocs[c] if c < len(rocs) else None
        n_pos = int((labels == c).sum())
        auc_rows.append([name, "" if roc is None else _f(roc.auc), n_pos, int(labels.size - n_pos)])
        if roc is not None:
            write(
                f"roc_{_slug(name)}.csv",
                ["threshold", "fpr", "tpr"],
                [["inf" if np.isinf(t) else _f(t), _f(a), _f(b)] for t, a, b in zip(roc.thresholds, roc.fpr, roc.tpr)],
            )
    write("auc.csv", ["class", "auc", "positives", "negatives"], auc_rows)

    k = pca.coords.shape[1]
    paths = list(paths) if paths is not None else [""] * len(labels)
    write(
        "pca.csv",
        ["pc1", "pc2", "pc3", "label", "path"],
        [[*(_f(v) for v in row), *([""] * (3 - k)), int(lab), p] for row, lab, p in zip(pca.coords, labels, paths)],
    )
    write(
        "pca_variance.csv",
        ["component", "eigenvalue", "explained_ratio"],
        [[f"pc{i + 1}", _f(v), _f(r)] for i, (v, r) in enumerate(zip(pca.eigenvalues, pca.explained_ratio))],
    )
    return written


def read_confusion_csv(path) -> tuple[list[str], np.ndarray]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    names = rows[0][1:]
    return names, np.array([[int(v) for v in r[1:]] for r in rows[1:]], dtype=np.int64)
