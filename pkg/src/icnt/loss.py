"""Cross-entropy, the within-batch feature smoothing loss, and their weighted sum."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .tensor import Tensor, emit

DEFAULT_LAMBDA_FS = 0.05


@dataclass
class LossConfig:
    lambda_fs: float = DEFAULT_LAMBDA_FS
    n_class: int = 4

    def __post_init__(self) -> None:
        if self.lambda_fs < 0:
            raise ValueError(f"lambda_fs must be >= 0, got {self.lambda_fs}")


def _check_labels(labels, n: int, n_class: int | None = None) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape[0] != n:
        raise ValueError(f"{labels.shape[0]} labels for a batch of {n}")
    if n < 1:
        raise ValueError("empty batch")
    if labels.min() < 0 or (n_class is not None and labels.max() >= n_class):
        bad = labels[(labels < 0) | (labels >= (n_class or np.inf))]
        raise ValueError(f"label {int(bad[0])} out of range [0, {n_class})")
    return labels


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Batch-mean negative log softmax probability of the true class."""
    if logits.ndim != 2:
        raise ValueError(f"cross_entropy expects N x K logits, got {logits.shape}")
    n, k = logits.shape
    labels = _check_labels(labels, n, k)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1))
    logp_true = z[np.arange(n), labels] - logsumexp
    value = np.asarray(-logp_true.mean(), dtype=logits.dtype)

    def backward(g, needs):
        probs = np.exp(z - logsumexp[:, None])
        probs[np.arange(n), labels] -= 1
        return (probs * (g / n),)

    return emit(value, (logits,), backward, "cross_entropy")


def class_centers(features, labels) -> dict[int, np.ndarray]:
    """Mean feature vector of every class present in the batch."""
    f = features.data if isinstance(features, Tensor) else np.asarray(features)
    labels = _check_labels(labels, f.shape[0])
    return {int(c): f[labels == c].mean(axis=0) for c in np.unique(labels)}


def _fsl_parts(f: np.ndarray, labels: np.ndarray):
    classes, inverse, counts = np.unique(labels, return_inverse=True, return_counts=True)
    sums = np.zeros((classes.size, f.shape[1]), dtype=f.dtype)
    np.add.at(sums, inverse, f)
    centers = sums / counts[:, None].astype(f.dtype)
    diff = f - centers[inverse]
    weights = 1.0 / (classes.size * counts[inverse])
    return diff, weights


def feature_smoothing_loss(features: Tensor, labels) -> Tensor:
    """Mean over present classes of the mean squared distance to the class center.

    Centers are recomputed from the batch itself. The gradient
    2 (f - center) / (C_present N_c) is exact even though the centers depend
    on the features, since within-class deviations sum to zero.
    """
    if features.ndim != 2:
        raise ValueError(f"feature_smoothing_loss expects N x D features, got {features.shape}")
    labels = _check_labels(labels, features.shape[0])
    diff, weights = _fsl_parts(features.data, labels)
    value = np.asarray((weights * (diff * diff).sum(axis=1)).sum(), dtype=features.dtype)

    def backward(g, needs):
        return ((2 * g) * weights[:, None].astype(diff.dtype) * diff,)

    return emit(value, (features,), backward, "feature_smoothing_loss")


def feature_smoothing_grad(features: np.ndarray, labels) -> np.ndarray:
    """Closed-form gradient of the feature smoothing loss with centers held fixed."""
    labels = _check_labels(labels, features.shape[0])
    diff, weights = _fsl_parts(np.asarray(features), labels)
    return 2 * weights[:, None] * diff


def feature_smoothing_loss_composed(features: Tensor, labels) -> Tensor:
    """Same loss assembled from primitive ops, so gradients also flow through the centers.

    Used to verify the fused op; too slow to be the training path.
    """
    labels = _check_labels(labels, features.shape[0])
    classes, inverse, counts = np.unique(labels, return_inverse=True, return_counts=True)
    n, dt = features.shape[0], features.dtype
    averaging = np.zeros((classes.size, n), dtype=dt)
    averaging[inverse, np.arange(n)] = 1.0 / counts[inverse]
    assign = np.zeros((n, classes.size), dtype=dt)
    assign[np.arange(n), inverse] = 1.0
    centers = ops.matmul(Tensor(averaging), features)
    diff = ops.sub(features, ops.matmul(Tensor(assign), centers))
    per_sample = ops.sum_rows(ops.mul(diff, diff))
    weights = Tensor((1.0 / (classes.size * counts[inverse])).astype(dt))
    return ops.sum_all(ops.mul(per_sample, weights))


def total_loss(
    logits: Tensor,
    features: Tensor,
    labels,
    config: LossConfig | float = DEFAULT_LAMBDA_FS,
) -> tuple[Tensor, Tensor, Tensor]:
    """Return (L_CE + lambda_fs * L_fs, L_CE, L_fs)."""
    lam = config.lambda_fs if isinstance(config, LossConfig) else float(config)
    if lam < 0:
        raise ValueError(f"lambda_fs must be >= 0, got {lam}")
    ce = cross_entropy(logits, labels)
    if lam == 0:
        fs = Tensor(np.asarray(feature_smoothing_loss(Tensor(features.data), labels).data))
        return ce, ce, fs
    fs = feature_smoothing_loss(features, labels)
    return ops.add(ce, ops.scale(fs, lam)), ce, fs
