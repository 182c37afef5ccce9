"""Saliency-driven feature regeneration and embedding fusion.

The model's own final-layer attention over visual tokens picks which
visual features matter; a sharp temperature softmax over the top-k
entries re-aggregates those features into a single vector that gets
fused with the pooled last-token embedding. ``base`` fusion ignores the
regenerated vector, ``add`` sums the two, ``concat_project`` learns a
linear map from the concatenation back to model width.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import softmax, softmax_backward

FUSION_MODES = ("base", "add", "concat_project")
APPLY_CHOICES = ("query", "both")


@dataclass(frozen=True)
class SdrConfig:
    tau_sdr: float = 0.01
    fusion_mode: str = "add"
    top_k: int | str = "all"
    apply_to: str = "both"

    def validate(self) -> None:
        if self.tau_sdr <= 0:
            raise ValueError("tau_sdr must be positive")
        if self.fusion_mode not in FUSION_MODES:
            raise ValueError(f"fusion_mode must be one of {FUSION_MODES}")
        if isinstance(self.top_k, str):
            if self.top_k != "all":
                raise ValueError("top_k must be a positive integer or 'all'")
        elif self.top_k < 1:
            raise ValueError("top_k must be at least 1")
        if self.apply_to not in APPLY_CHOICES:
            raise ValueError(f"apply_to must be one of {APPLY_CHOICES}")


def init_fusion_params(d_model: int, rng: np.random.Generator, scale: float = 0.02) -> dict[str, np.ndarray]:
    """Weights for concat_project fusion; present in every checkpoint."""
    return {
        "fusion.w": rng.normal(0.0, scale, (2 * d_model, d_model)),
        "fusion.b": np.zeros(d_model),
    }


def flatten_saliency(q_map: np.ndarray) -> np.ndarray:
    """Row-major flattening of a patch-grid map; index i matches f_visual row i."""
    return np.asarray(q_map, dtype=np.float64).reshape(-1)


def resolve_top_k(top_k: int | str, n: int) -> int:
    if n < 1:
        raise ValueError("no visual tokens to regenerate from")
    if isinstance(top_k, str):
        if top_k != "all":
            raise ValueError(f"bad top_k {top_k!r}")
        return n
    if not 1 <= top_k <= n:
        raise ValueError(f"top_k {top_k} out of range for {n} visual tokens")
    return int(top_k)


def select_top_k(q_hat: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest entries, ties broken by lower index.

    Returned in ascending index order so the aggregation below touches
    rows in a fixed order regardless of k.
    """
    order = np.argsort(-q_hat, kind="stable")[:k]
    return np.sort(order)


def regenerate(q_hat: np.ndarray, f_visual: np.ndarray, tau_sdr: float, top_k: int | str = "all") -> np.ndarray:
    """Temperature-softmax aggregation of visual features for one sample."""
    q_hat = np.asarray(q_hat, dtype=np.float64)
    f_visual = np.asarray(f_visual, dtype=np.float64)
    if q_hat.shape[0] != f_visual.shape[0]:
        raise ValueError("saliency vector and feature rows disagree in length")
    k = resolve_top_k(top_k, q_hat.shape[0])
    idx = select_top_k(q_hat, k)
    weights = softmax(q_hat[idx], tau=tau_sdr)
    return weights @ f_visual[idx]


def regenerate_batch(
    q_hat: np.ndarray, f_visual: np.ndarray, tau_sdr: float, top_k: int | str = "all"
) -> tuple[np.ndarray, dict]:
    """Batched regeneration with a cache for the backward pass.

    ``q_hat`` is (B, N), ``f_visual`` is (B, N, D); top-k indices are
    chosen per sample.
    """
    q_hat = np.asarray(q_hat, dtype=np.float64)
    f_visual = np.asarray(f_visual, dtype=np.float64)
    batch, n = q_hat.shape
    k = resolve_top_k(top_k, n)
    idx = np.empty((batch, k), dtype=np.int64)
    for b in range(batch):
        idx[b] = select_top_k(q_hat[b], k)
    rows = np.arange(batch)[:, None]
    selected = q_hat[rows, idx] / tau_sdr
    shifted = selected - np.max(selected, axis=1, keepdims=True)
    exp = np.exp(shifted)
    weights = exp / np.sum(exp, axis=1, keepdims=True)
    f_sel = f_visual[rows, idx]
    f_hat = np.einsum("bk,bkd->bd", weights, f_sel)
    cache = dict(idx=idx, weights=weights, f_sel=f_sel, tau=tau_sdr, n=n, shape=f_visual.shape)
    return f_hat, cache


def regenerate_batch_backward(cache: dict, d_f_hat: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Gradients w.r.t. the flat saliency vector and the visual features."""
    idx, weights, f_sel = cache["idx"], cache["weights"], cache["f_sel"]
    batch, k = idx.shape
    rows = np.arange(batch)[:, None]
    d_weights = np.einsum("bd,bkd->bk", d_f_hat, f_sel)
    d_f_sel = weights[:, :, None] * d_f_hat[:, None, :]
    d_selected = softmax_backward(weights, d_weights, axis=1) / cache["tau"]
    d_q_hat = np.zeros((batch, cache["n"]))
    d_q_hat[rows, idx] = d_selected
    d_f_visual = np.zeros(cache["shape"])
    d_f_visual[rows, idx] = d_f_sel
    return d_q_hat, d_f_visual


def fuse(
    f_last: np.ndarray,
    f_hat: np.ndarray | None,
    mode: str,
    params: dict[str, np.ndarray] | None = None,
) -> np.ndarray:
    """Combine the pooled embedding with the regenerated visual vector."""
    f_last = np.asarray(f_last, dtype=np.float64)
    if mode == "base":
        return f_last.copy()
    if f_hat is None:
        raise ValueError(f"fusion mode {mode!r} needs a regenerated vector")
    f_hat = np.asarray(f_hat, dtype=np.float64)
    if f_hat.shape != f_last.shape:
        raise ValueError(f"shape mismatch: {f_last.shape} vs {f_hat.shape}")
    if mode == "add":
        return f_last + f_hat
    if mode == "concat_project":
        if params is None:
            raise ValueError("concat_project fusion needs projection weights")
        concat = np.concatenate([f_last, f_hat], axis=-1)
        return concat @ params["fusion.w"] + params["fusion.b"]
    raise ValueError(f"unknown fusion mode {mode!r}")


def fuse_batch_backward(
    f_last: np.ndarray,
    f_hat: np.ndarray | None,
    mode: str,
    params: dict[str, np.ndarray] | None,
    d_emb: np.ndarray,
    grads: dict[str, np.ndarray] | None = None,
) -> tuple[np.ndarray, np.ndarray | None]:
    """Backward of ``fuse`` on a (B, D) batch; accumulates fusion weight grads."""
    if mode == "base":
        return d_emb.copy(), None
    if mode == "add":
        return d_emb.copy(), d_emb.copy()
    if mode == "concat_project":
        d = f_last.shape[-1]
        concat = np.concatenate([f_last, f_hat], axis=-1)
        if grads is not None:
            grads["fusion.w"] += concat.T @ d_emb
            grads["fusion.b"] += np.sum(d_emb, axis=0)
        d_concat = d_emb @ params["fusion.w"].T
        return d_concat[:, :d], d_concat[:, d:]
    raise ValueError(f"unknown fusion mode {mode!r}")
