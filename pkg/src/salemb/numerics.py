"""Small numerical kernels used throughout training and evaluation.

Everything runs in float64. Functions that participate in training come
in forward/backward pairs; the backward halves are exercised against
central finite differences in the test suite.
"""

from __future__ import annotations

from collections.abc import Callable

import numpy as np

EPS_CLAMP = 1e-8
EPS_NORM = 1e-12


def make_rng(seed: int) -> np.random.Generator:
    """Single source of randomness: PCG64 behaves identically everywhere."""
    return np.random.Generator(np.random.PCG64(seed))


def softmax(x: np.ndarray, tau: float = 1.0, axis: int = -1) -> np.ndarray:
    """Temperature softmax with max-shift stabilization."""
    if tau <= 0.0:
        raise ValueError("softmax temperature must be positive")
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("softmax input must be finite")
    scaled = x / tau
    shifted = scaled - np.max(scaled, axis=axis, keepdims=True)
    exp = np.exp(shifted)
    return exp / np.sum(exp, axis=axis, keepdims=True)


def softmax_backward(y: np.ndarray, dy: np.ndarray, axis: int = -1) -> np.ndarray:
    """Jacobian-vector product given the softmax output ``y``."""
    inner = np.sum(dy * y, axis=axis, keepdims=True)
    return y * (dy - inner)


def normalize_distribution(v: np.ndarray) -> np.ndarray:
    """Rescale a non-negative vector to sum to one."""
    total = np.sum(v)
    if total <= 0.0:
        raise ValueError("cannot normalize a vector with non-positive mass")
    return v / total


def normalize_distribution_backward(v: np.ndarray, p: np.ndarray, dp: np.ndarray) -> np.ndarray:
    total = np.sum(v)
    return (dp - np.sum(dp * p)) / total


def _clamp_renorm(v: np.ndarray, eps: float) -> tuple[np.ndarray, float]:
    clamped = np.maximum(v, eps)
    total = float(np.sum(clamped))
    return clamped / total, total


def kl_divergence(p: np.ndarray, q: np.ndarray, eps: float = EPS_CLAMP) -> float:
    """KL(p || q) with both inputs clamped at ``eps`` and renormalized."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {q.shape}")
    p_n, _ = _clamp_renorm(p, eps)
    q_n, _ = _clamp_renorm(q, eps)
    return float(np.sum(p_n * np.log(p_n / q_n)))


def kl_divergence_with_grad(
    p: np.ndarray, q: np.ndarray, eps: float = EPS_CLAMP
) -> tuple[float, np.ndarray, np.ndarray]:
    """KL(p || q) plus gradients with respect to the raw inputs.

    The clamp passes gradient through only where the input sits above
    ``eps``; the renormalization is differentiated exactly.
    """
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {q.shape}")
    p_n, z_p = _clamp_renorm(p, eps)
    q_n, z_q = _clamp_renorm(q, eps)
    log_ratio = np.log(p_n / q_n)
    value = float(np.sum(p_n * log_ratio))
    dp = np.where(p > eps, (log_ratio - value) / z_p, 0.0)
    dq = np.where(q > eps, (1.0 - p_n / q_n) / z_q, 0.0)
    return value, dp, dq


def gaussian_kernel(sigma: float) -> np.ndarray:
    """Normalized square Gaussian kernel with side ``2*ceil(3*sigma)+1``."""
    if sigma <= 0.0:
        raise ValueError("sigma must be positive")
    radius = int(np.ceil(3.0 * sigma))
    coords = np.arange(-radius, radius + 1, dtype=np.float64)
    one_d = np.exp(-(coords**2) / (2.0 * sigma**2))
    kernel = np.outer(one_d, one_d)
    return kernel / np.sum(kernel)


def convolve2d(image: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Same-size 2-D correlation with reflect padding.

    The kernels we use are symmetric, so correlation and convolution
    coincide; correlation keeps the index arithmetic straightforward.
    Reflect padding makes constant grids fixed points of smoothing.
    """
    image = np.asarray(image, dtype=np.float64)
    kh, kw = kernel.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError("kernel sides must be odd")
    ry, rx = kh // 2, kw // 2
    padded = np.pad(image, ((ry, ry), (rx, rx)), mode="reflect")
    # Gather all kernel-sized windows as strided views, one GEMV per call.
    windows = np.lib.stride_tricks.sliding_window_view(padded, (kh, kw))
    return np.einsum("ijkl,kl->ij", windows, kernel)


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    na, nb = float(np.linalg.norm(a)), float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine similarity undefined for zero-norm input")
    return float(np.dot(a, b) / (na * nb))


def l2_normalize(x: np.ndarray, axis: int = -1, eps: float = EPS_NORM) -> np.ndarray:
    norm = np.maximum(np.linalg.norm(x, axis=axis, keepdims=True), eps)
    return x / norm


def l2_normalize_backward(x: np.ndarray, dy: np.ndarray, axis: int = -1, eps: float = EPS_NORM) -> np.ndarray:
    """Backward of ``y = x / max(|x|, eps)`` for the usual non-tiny case."""
    norm = np.maximum(np.linalg.norm(x, axis=axis, keepdims=True), eps)
    y = x / norm
    inner = np.sum(dy * y, axis=axis, keepdims=True)
    return (dy - inner * y) / norm


def finite_diff_gradient(
    fn: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5
) -> np.ndarray:
    """Central-difference gradient of a scalar function, one entry at a time."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = grad.ravel()
    base = x.copy()
    flat_x = base.ravel()
    for i in range(flat_x.size):
        orig = flat_x[i]
        flat_x[i] = orig + h
        up = fn(base)
        flat_x[i] = orig - h
        down = fn(base)
        flat_x[i] = orig
        if not (np.isfinite(up) and np.isfinite(down)):
            raise ValueError(f"non-finite function value at coordinate {i}")
        flat[i] = (up - down) / (2.0 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Max elementwise relative error with a denominator floor."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))
