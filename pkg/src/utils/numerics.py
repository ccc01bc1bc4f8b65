"""
Dense tensor helpers shared by every loss: channel statistics, cosine
similarity, softmax cross-entropy and finite-difference gradient checking.

Tensors are plain float64 numpy arrays. Every public function is pure.
"""

import logging
from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Tuple

import numpy as np
from scipy.special import logsumexp, softmax

logger = logging.getLogger(__name__)

Tensor = np.ndarray


@dataclass(frozen=True)
class ChannelStats:
    """Per-channel mean and population variance"""
    mean: np.ndarray
    var: np.ndarray

    def __post_init__(self):
        if self.mean.shape != self.var.shape:
            raise ValueError(f"mean/var length mismatch: {self.mean.shape} vs {self.var.shape}")
        if np.any(self.var < 0):
            raise ValueError("channel variance must be non-negative")

    @property
    def num_channels(self) -> int:
        return int(self.mean.shape[0])

    def as_vector(self) -> np.ndarray:
        """Concatenated (mean, var) vector used for pseudo-grouping"""
        return np.concatenate([self.mean, self.var])


@dataclass(frozen=True)
class GradCheckReport:
    """Outcome of comparing an analytic gradient to central differences"""
    max_rel_error: float
    per_parameter_errors: np.ndarray
    max_abs_error: float = 0.0
    abs_tolerance: float = float('inf')

    def passed(self, tolerance: float = 1e-4) -> bool:
        return self.max_rel_error < tolerance and self.max_abs_error <= self.abs_tolerance


def ensure_finite(x: Tensor, name: str = "tensor") -> Tensor:
    """Raise if the tensor holds NaN or Inf"""
    if not np.all(np.isfinite(x)):
        raise FloatingPointError(f"non-finite values in {name}")
    return x


def channel_stats(x: Tensor) -> ChannelStats:
    """Channel-wise mean and population variance of a [C,H,W] tensor"""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3 or x.size == 0:
        raise ValueError(f"degenerate input: expected non-empty [C,H,W], got shape {x.shape}")
    flat = x.reshape(x.shape[0], -1)
    mean = flat.mean(axis=1)
    # Population variance (divide by H*W) to match the re-normalization convention
    var = np.maximum(flat.var(axis=1), 0.0)
    return ChannelStats(mean=mean, var=var)


def pooled_channel_stats(images: Tensor) -> ChannelStats:
    """Channel statistics pooled over every pixel of every image in a [N,C,H,W] stack"""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4 or images.size == 0:
        raise ValueError(f"degenerate input: expected non-empty [N,C,H,W], got shape {images.shape}")
    per_channel = np.moveaxis(images, 1, 0).reshape(images.shape[1], -1)
    return ChannelStats(mean=per_channel.mean(axis=1), var=np.maximum(per_channel.var(axis=1), 0.0))


def cosine_similarity(a: Tensor, b: Tensor) -> float:
    """Cosine similarity between two vectors"""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    norm_a = np.linalg.norm(a)
    norm_b = np.linalg.norm(b)
    if norm_a == 0 or norm_b == 0:
        raise ValueError("zero-norm vector")
    return float(np.clip(a @ b / (norm_a * norm_b), -1.0, 1.0))


def l2_normalize(x: Tensor, axis: int = -1) -> Tuple[np.ndarray, np.ndarray]:
    """Normalize along an axis; returns (unit vectors, norms)"""
    norms = np.linalg.norm(x, axis=axis, keepdims=True)
    if np.any(norms == 0):
        raise ValueError("zero-norm vector")
    return x / norms, norms


def cosine_matrix(a: Tensor, b: Tensor) -> np.ndarray:
    """Pairwise cosine similarities between rows of a [N,D] and b [M,D]"""
    a_hat, _ = l2_normalize(np.atleast_2d(np.asarray(a, dtype=np.float64)))
    b_hat, _ = l2_normalize(np.atleast_2d(np.asarray(b, dtype=np.float64)))
    return np.clip(a_hat @ b_hat.T, -1.0, 1.0)


def cosine_matrix_backward(a: Tensor, b_hat: Tensor, grad_sim: Tensor) -> np.ndarray:
    """Gradient w.r.t. the raw rows of a given dL/dS for S = normalize(a) @ b_hat.T

    b_hat must already be unit-norm (treated as constant).
    """
    a_hat, norms = l2_normalize(a)
    sims = a_hat @ b_hat.T
    projected = grad_sim @ b_hat - np.sum(grad_sim * sims, axis=1, keepdims=True) * a_hat
    return projected / norms


def softmax_cross_entropy(logits: Tensor, target_index: int) -> float:
    """Negative log-probability of the target class"""
    loss, _ = softmax_cross_entropy_grad(logits, target_index)
    return loss


def softmax_cross_entropy_grad(logits: Tensor, target_index: int) -> Tuple[float, np.ndarray]:
    """Cross-entropy and its gradient w.r.t. the logits"""
    logits = np.asarray(logits, dtype=np.float64).ravel()
    n = logits.shape[0]
    if not 0 <= target_index < n:
        raise ValueError(f"target index {target_index} out of range for {n} classes")
    ensure_finite(logits, "logits")
    # logsumexp subtracts the max internally
    loss = float(logsumexp(logits) - logits[target_index])
    grad = softmax(logits)
    grad[target_index] -= 1.0
    return max(loss, 0.0), grad


def batch_cross_entropy(logits: Tensor, targets: Sequence[int]) -> Tuple[float, np.ndarray]:
    """Mean row-wise cross-entropy of a [B,N] logit matrix and its gradient"""
    logits = np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.int64)
    batch, n = logits.shape
    if np.any(targets < 0) or np.any(targets >= n):
        raise ValueError(f"target index out of range for {n} classes")
    ensure_finite(logits, "logits")
    lse = logsumexp(logits, axis=1)
    rows = np.arange(batch)
    loss = float(np.mean(lse - logits[rows, targets]))
    grad = softmax(logits, axis=1)
    grad[rows, targets] -= 1.0
    return max(loss, 0.0), grad / batch


def central_differences(f: Callable[[np.ndarray], Tuple[float, np.ndarray]],
                        point: Tensor,
                        epsilon: float = 1e-5,
                        indices: Optional[Sequence[int]] = None) -> np.ndarray:
    """Central finite-difference partials of f at point, for the given coordinates"""
    point = np.array(point, dtype=np.float64).ravel()
    coords = np.arange(point.size) if indices is None else np.asarray(indices, dtype=np.int64)
    numeric = np.empty(coords.shape[0])
    for slot, i in enumerate(coords):
        shifted = point.copy()
        shifted[i] = point[i] + epsilon
        f_plus, _ = f(shifted)
        shifted[i] = point[i] - epsilon
        f_minus, _ = f(shifted)
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise FloatingPointError(f"non-finite function value near coordinate {i}")
        numeric[slot] = (f_plus - f_minus) / (2.0 * epsilon)
    return numeric


def grad_check(f: Callable[[np.ndarray], Tuple[float, np.ndarray]],
               point: Tensor,
               epsilon: float = 1e-5,
               indices: Optional[Sequence[int]] = None,
               abs_indices: Optional[Sequence[int]] = None,
               abs_tolerance: float = float('inf')) -> GradCheckReport:
    """Compare the analytic gradient of f against central finite differences.

    Args:
        f: maps a flat parameter vector to (value, analytic gradient)
        point: parameter vector to check at
        epsilon: finite-difference step
        indices: optional subset of coordinates to check relatively (all by default)
        abs_indices: coordinates checked by absolute error instead
        abs_tolerance: bound on the absolute error over abs_indices

    Returns:
        GradCheckReport with per-coordinate relative errors
    """
    point = np.array(point, dtype=np.float64).ravel()
    value, analytic = f(point.copy())
    if not np.isfinite(value):
        raise FloatingPointError("non-finite function value at check point")
    analytic = np.asarray(analytic, dtype=np.float64).ravel()
    if analytic.shape != point.shape:
        raise ValueError(f"gradient shape {analytic.shape} does not match point {point.shape}")

    coords = np.arange(point.size) if indices is None else np.asarray(indices, dtype=np.int64)
    numeric = central_differences(f, point, epsilon, coords)
    errors = np.abs(analytic[coords] - numeric) / np.maximum(1e-8, np.abs(analytic[coords]) + np.abs(numeric))

    max_abs = 0.0
    if abs_indices is not None and len(abs_indices):
        quiet = np.asarray(abs_indices, dtype=np.int64)
        max_abs = float(np.max(np.abs(analytic[quiet] - central_differences(f, point, epsilon, quiet))))

    max_error = float(errors.max()) if errors.size else 0.0
    logger.debug(f"grad_check over {errors.size} coordinates: max rel error {max_error:.3e}, "
                 f"max abs error {max_abs:.3e}")
    return GradCheckReport(max_rel_error=max_error, per_parameter_errors=errors,
                           max_abs_error=max_abs, abs_tolerance=abs_tolerance)
