"""Retrieval evaluation, modality-balance analysis, and visualization.

Queries are ranked against their candidate pools by cosine similarity.
Beyond precision@1 the evaluation reports how well the model's final
attention matches the stored saliency targets (mean KL and the attention
mass landing on the referenced object's patches) and how evenly the
last-token attention splits between visual and textual positions.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import RunConfig, sdr_active
from .datagen import Corpus, footprint_patches, referenced_label
from .numerics import kl_divergence
from .train import embed_groups, group_entries


@dataclass(frozen=True)
class RetrievalIndex:
    ids: tuple[str, ...]
    matrix: np.ndarray            # unit-normalized rows, one per candidate

    def position(self, cid: str) -> int:
        return self._pos[cid]

    def __post_init__(self):
        object.__setattr__(self, "_pos", {cid: i for i, cid in enumerate(self.ids)})

    def to_bytes(self) -> bytes:
        from .fileio import tensor_to_bytes

        header = json.dumps(list(self.ids)).encode("utf-8")
        return len(header).to_bytes(4, "little") + header + tensor_to_bytes(self.matrix)


def build_index(ids: list[str], embeddings: np.ndarray) -> RetrievalIndex:
    if len(ids) == 0:
        raise ValueError("cannot build an index from zero candidates")
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate candidate id")
    embeddings = np.asarray(embeddings, dtype=np.float64)
    if embeddings.shape[0] != len(ids):
        raise ValueError("id count and embedding rows disagree")
    norms = np.linalg.norm(embeddings, axis=1)
    if np.any(norms == 0.0):
        raise ValueError("zero-norm candidate embedding")
    return RetrievalIndex(ids=tuple(ids), matrix=embeddings / norms[:, None])


def rank(query: np.ndarray, index: RetrievalIndex, k: int | None = None) -> list[str]:
    """Candidate ids by descending cosine similarity, ties by ascending id."""
    query = np.asarray(query, dtype=np.float64)
    norm = float(np.linalg.norm(query))
    if norm == 0.0:
        raise ValueError("zero-norm query embedding")
    sims = index.matrix @ (query / norm)
    order = np.lexsort((np.array(index.ids), -sims))
    if k is None:
        k = len(index.ids)
    return [index.ids[i] for i in order[:k]]


def subindex(index: RetrievalIndex, ids: list[str]) -> RetrievalIndex:
    rows = [index.position(cid) for cid in ids]
    return RetrievalIndex(ids=tuple(ids), matrix=index.matrix[rows])


def precision_at_1(rankings: dict[str, list[str]], truth: dict[str, str]) -> float:
    if not rankings:
        raise ValueError("no rankings to score")
    hits = 0
    for qid, ordered in rankings.items():
        if qid not in truth:
            raise KeyError(f"no ground truth for query {qid!r}")
        hits += int(ordered[0] == truth[qid])
    return hits / len(rankings)


@dataclass(frozen=True)
class BalanceReport:
    mu_img: float
    mu_text: float
    distance: float


def balance_report(row: np.ndarray, n_visual: int, eol_index: int) -> BalanceReport:
    """Mean end-of-line attention per modality, from the raw full row.

    Text here means every non-visual position before the end-of-line
    token, instruction tokens included.
    """
    if n_visual < 1 or eol_index <= n_visual:
        raise ValueError("balance needs both visual and text positions")
    mu_img = float(np.mean(row[:n_visual]))
    mu_text = float(np.mean(row[n_visual:eol_index]))
    return BalanceReport(mu_img=mu_img, mu_text=mu_text, distance=abs(mu_img - mu_text))


def aggregate_balance(reports: list[BalanceReport]) -> BalanceReport:
    if not reports:
        raise ValueError("no balance reports to aggregate")
    return BalanceReport(
        mu_img=float(np.mean([r.mu_img for r in reports])),
        mu_text=float(np.mean([r.mu_text for r in reports])),
        distance=float(np.mean([r.distance for r in reports])),
    )


def balance_improvement(baseline_distance: float, ours_distance: float) -> float:
    """Relative reduction of the modality-balance distance."""
    if baseline_distance == 0.0:
        raise ValueError("baseline distance is zero; improvement undefined")
    return (baseline_distance - ours_distance) / baseline_distance


def heatmap_image(grid: np.ndarray, factor: int) -> np.ndarray:
    """Nearest-neighbor upscale, linearly mapped so the maximum hits 255."""
    if factor < 1:
        raise ValueError("upscale factor must be at least 1")
    grid = np.asarray(grid, dtype=np.float64)
    peak = float(np.max(grid))
    scaled = np.zeros_like(grid) if peak <= 0 else grid / peak * 255.0
    img = np.round(scaled).astype(np.uint8)
    return np.repeat(np.repeat(img, factor, axis=0), factor, axis=1)


def saliency_stats(grids: list[np.ndarray]) -> dict[str, np.ndarray]:
    """Cell-wise mean over valid targets plus the top-decile hotspot mask."""
    if not grids:
        raise ValueError("no valid targets")
    shapes = {g.shape for g in grids}
    if len(shapes) > 1:
        raise ValueError(f"target grids differ in shape: {sorted(shapes)}")
    mean = np.mean(np.stack(grids), axis=0)
    threshold = float(np.quantile(mean, 0.9))
    return {"mean_heatmap": mean, "hotspot_mask": mean >= threshold}


def mask_mass(q_map: np.ndarray, footprint: np.ndarray) -> float:
    """Attention mass landing on the footprint's patches."""
    q_map = np.asarray(q_map, dtype=np.float64).reshape(-1)
    footprint = np.asarray(footprint, dtype=bool).reshape(-1)
    if q_map.shape != footprint.shape:
        raise ValueError("saliency map and footprint sizes differ")
    if not footprint.any():
        raise ValueError("empty footprint")
    return float(np.sum(q_map[footprint]))


@dataclass
class EmbedResult:
    emb: np.ndarray               # (D,)
    q_map: np.ndarray | None      # (N,) final-layer visual attention, or None
    row: np.ndarray               # (T,) final-layer head-averaged full row
    n_visual: int
    eol_index: int


def embed_entries(
    params: dict[str, np.ndarray],
    cfg: RunConfig,
    entries: list[tuple[str, list[int], np.ndarray | None]],
    apply_sdr: bool,
) -> dict[str, EmbedResult]:
    """Embed (id, tokens, image) triples; grouped forwards, no gradients."""
    from .model import attention_query_distribution

    groups = group_entries([(tokens, image) for _, tokens, image in entries])
    emb = embed_groups(params, cfg, groups, apply_sdr=apply_sdr, want_grads=False)
    final_layer = cfg.model.n_layers - 1
    results: dict[str, EmbedResult] = {}
    for group in groups:
        out = group.out
        q_maps = attention_query_distribution(out, final_layer) if out.n_visual else None
        rows = np.mean(out.attn_rows[final_layer], axis=1)
        for pos, batch_pos in enumerate(group.indices):
            entry_id = entries[batch_pos][0]
            results[entry_id] = EmbedResult(
                emb=emb[batch_pos],
                q_map=q_maps[pos] if q_maps is not None else None,
                row=rows[pos],
                n_visual=out.n_visual,
                eol_index=out.eol_index,
            )
    return results


def evaluate_checkpoint(
    params: dict[str, np.ndarray],
    cfg: RunConfig,
    corpus: Corpus,
    split: str = "eval",
) -> dict:
    """Score one checkpoint on a corpus split; returns the report document."""
    samples = corpus.by_split(split)
    if not samples:
        raise ValueError(f"corpus has no {split!r} split")
    use_sdr = sdr_active(cfg.train.mode)

    cand_results = embed_entries(
        params, cfg,
        [(c.id, c.tokens, c.image) for c in corpus.candidates],
        apply_sdr=use_sdr and cfg.sdr.apply_to == "both",
    )
    index = build_index(
        [c.id for c in corpus.candidates],
        np.stack([cand_results[c.id].emb for c in corpus.candidates]),
    )
    query_results = embed_entries(
        params, cfg,
        [(s.id, s.tokens, s.image) for s in samples],
        apply_sdr=use_sdr,
    )

    rankings: dict[str, list[str]] = {}
    truth: dict[str, str] = {}
    kl_values: list[float] = []
    mass_values: list[float] = []
    balance_rows: list[BalanceReport] = []
    for sample in samples:
        res = query_results[sample.id]
        rankings[sample.id] = rank(res.emb, subindex(index, sample.pool), k=1)
        truth[sample.id] = sample.positive
        if sample.flavor != "it2i":
            continue
        balance_rows.append(balance_report(res.row, res.n_visual, res.eol_index))
        if sample.target is not None and sample.target_valid:
            kl_values.append(kl_divergence(res.q_map, sample.target))
            patches = footprint_patches(
                sample.masks[referenced_label(sample)], cfg.model.patch_size
            )
            mass_values.append(mask_mass(res.q_map, patches))

    from .config import flatten_config

    balance = aggregate_balance(balance_rows) if balance_rows else None
    return {
        "p_at_1": precision_at_1(rankings, truth),
        "mean_kl_to_target": float(np.mean(kl_values)) if kl_values else None,
        "mean_mask_mass": float(np.mean(mass_values)) if mass_values else None,
        "balance": None if balance is None else {
            "mu_img": balance.mu_img, "mu_text": balance.mu_text, "distance": balance.distance,
        },
        "config": flatten_config(cfg),
        "seed": cfg.train.seed,
    }


def write_report(report: dict, path: str | Path) -> None:
    Path(path).write_text(json.dumps(report, sort_keys=True, indent=2) + "\n")
