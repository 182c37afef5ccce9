"""Training loop, optimizer, and gradient verification.

One step: embed the batch's queries and positives (grouped by identical
sequence layout so each group is a single dense forward), apply feature
regeneration and fusion where the mode calls for it, take the
contrastive loss plus the weighted attention-alignment loss, and push
analytic gradients back through every path: pooled embeddings, the
regeneration softmax, and the recorded attention rows.

``batch_loss_and_grads`` is the single code path used by training,
evaluation-time loss reporting, and the finite-difference checker, so
the gradient check exercises exactly what trains.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import fileio, model, sdr
from .config import RunConfig, sdr_active, sga_active
from .datagen import Candidate, Corpus, Sample, epoch_batches, image_to_float, load_corpus
from .losses import infonce_with_grad, select_layers, sga_loss_with_grad, total_loss
from .numerics import finite_diff_gradient, make_rng, relative_error

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0


def adam_init(params: dict[str, np.ndarray]) -> AdamState:
    return AdamState(m=model.zeros_like_params(params), v=model.zeros_like_params(params))


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState, lr: float) -> None:
    b1, b2 = ADAM_BETAS
    state.t += 1
    correction1 = 1.0 - b1**state.t
    correction2 = 1.0 - b2**state.t
    for name in sorted(params):
        g = grads[name]
        state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        state.v[name] = b2 * state.v[name] + (1.0 - b2) * g * g
        m_hat = state.m[name] / correction1
        v_hat = state.v[name] / correction2
        params[name] -= lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)


@dataclass
class Group:
    """One forward pass worth of identically laid out sequences."""

    indices: list[int]             # positions in the batch
    token_ids: np.ndarray
    images: np.ndarray | None
    out: model.ForwardOutput | None = None
    f_hat: np.ndarray | None = None
    sdr_cache: dict | None = None
    f_last: np.ndarray | None = None
    emb: np.ndarray | None = None


def group_entries(entries: list[tuple[list[int], np.ndarray | None]]) -> list[Group]:
    """Bucket (tokens, image) pairs by layout, preserving order within groups."""
    buckets: dict[tuple[bool, int], list[int]] = {}
    for i, (tokens, image) in enumerate(entries):
        buckets.setdefault((image is not None, len(tokens)), []).append(i)
    groups = []
    for key in sorted(buckets):
        idx = buckets[key]
        tokens = np.array([entries[i][0] for i in idx], dtype=np.int64)
        images = None
        if key[0]:
            images = np.stack([image_to_float(entries[i][1]) for i in idx])
        groups.append(Group(indices=idx, token_ids=tokens, images=images))
    return groups


def embed_groups(
    params: dict[str, np.ndarray],
    cfg: RunConfig,
    groups: list[Group],
    apply_sdr: bool,
    want_grads: bool,
) -> np.ndarray:
    """Forward every group and assemble embeddings in batch order."""
    total = sum(len(g.indices) for g in groups)
    emb = np.empty((total, cfg.model.d_model))
    final_layer = cfg.model.n_layers - 1
    for group in groups:
        out = model.forward(params, cfg.model, group.token_ids, group.images, want_backward=want_grads)
        group.out = out
        group.f_last = out.f_last
        if apply_sdr and group.images is not None:
            q_map = model.attention_query_distribution(out, final_layer)
            group.f_hat, group.sdr_cache = sdr.regenerate_batch(
                q_map, out.f_visual, cfg.sdr.tau_sdr, cfg.sdr.top_k
            )
            group.emb = sdr.fuse(out.f_last, group.f_hat, cfg.sdr.fusion_mode, params)
        else:
            group.emb = out.f_last
        emb[group.indices] = group.emb
    return emb


def _backward_groups(
    params: dict[str, np.ndarray],
    cfg: RunConfig,
    groups: list[Group],
    d_emb: np.ndarray,
    sga_terms: dict[int, dict[int, np.ndarray]] | None,
    grads: dict[str, np.ndarray],
) -> None:
    """Route embedding and attention-row gradients back through each group.

    ``sga_terms`` maps batch position -> {layer: gradient on that layer's
    visual-attention distribution}; entries only exist for samples that
    carried a valid target.
    """
    final_layer = cfg.model.n_layers - 1
    for group in groups:
        out = group.out
        d_group = d_emb[group.indices]
        d_f_visual = None
        d_q_by_layer: dict[int, np.ndarray] = {}

        if group.sdr_cache is not None:
            d_f_last, d_f_hat = sdr.fuse_batch_backward(
                group.f_last, group.f_hat, cfg.sdr.fusion_mode, params, d_group, grads
            )
            if d_f_hat is not None:
                d_q_map, d_f_visual = sdr.regenerate_batch_backward(group.sdr_cache, d_f_hat)
                d_q_by_layer[final_layer] = d_q_map
        else:
            d_f_last = d_group

        if sga_terms:
            for pos_in_group, batch_pos in enumerate(group.indices):
                for layer, d_q in sga_terms.get(batch_pos, {}).items():
                    if layer not in d_q_by_layer:
                        d_q_by_layer[layer] = np.zeros((len(group.indices), out.n_visual))
                    d_q_by_layer[layer][pos_in_group] += d_q

        d_rows: list[np.ndarray | None] = [None] * cfg.model.n_layers
        for layer, d_q in d_q_by_layer.items():
            d_rows[layer] = model.attention_query_distribution_backward(out, layer, d_q)
        model.backward(
            params, cfg.model, out,
            d_f_last=d_f_last, d_f_visual=d_f_visual,
            d_rows=d_rows if any(r is not None for r in d_rows) else None,
            grads=grads,
        )


def batch_loss_and_grads(
    params: dict[str, np.ndarray],
    cfg: RunConfig,
    batch: list[Sample],
    positives: list[Candidate],
    want_grads: bool = True,
) -> tuple[dict, dict[str, np.ndarray] | None]:
    """Loss terms (and gradients) for one batch of query/positive pairs."""
    mode = cfg.train.mode
    use_sga = sga_active(mode)
    use_sdr = sdr_active(mode)

    query_groups = group_entries([(s.tokens, s.image) for s in batch])
    cand_groups = group_entries([(c.tokens, c.image) for c in positives])
    q_emb = embed_groups(params, cfg, query_groups, apply_sdr=use_sdr, want_grads=want_grads)
    c_emb = embed_groups(
        params, cfg, cand_groups,
        apply_sdr=use_sdr and cfg.sdr.apply_to == "both",
        want_grads=want_grads,
    )
    l_con, d_q_emb, d_c_emb = infonce_with_grad(q_emb, c_emb, cfg.loss.tau_con)

    l_sg = 0.0
    sga_terms: dict[int, dict[int, np.ndarray]] = {}
    if use_sga:
        layers = select_layers(cfg.loss.alignment_layers, cfg.model.n_layers)
        valid_positions = []
        for group in query_groups:
            if group.images is None:
                continue
            q_dists = [model.attention_query_distribution(group.out, layer) for layer in layers]
            for pos_in_group, batch_pos in enumerate(group.indices):
                sample = batch[batch_pos]
                if sample.target is None or not sample.target_valid:
                    continue
                stacked = np.stack([qd[pos_in_group] for qd in q_dists])
                value, d_stack = sga_loss_with_grad(stacked, sample.target, cfg.loss.beta)
                l_sg += value
                sga_terms[batch_pos] = {layer: d_stack[j] for j, layer in enumerate(layers)}
                valid_positions.append(batch_pos)
        n_valid = len(valid_positions)
        if n_valid:
            l_sg /= n_valid
            scale = cfg.loss.alpha / n_valid
            for batch_pos in valid_positions:
                for layer in sga_terms[batch_pos]:
                    sga_terms[batch_pos][layer] = sga_terms[batch_pos][layer] * scale

    l_total = total_loss(l_con, l_sg, cfg.loss.alpha if use_sga else 0.0)
    metrics = {"L_Con": l_con, "L_SG": l_sg if use_sga else 0.0, "L_total": l_total}
    if not want_grads:
        return metrics, None

    grads = model.zeros_like_params(params)
    _backward_groups(params, cfg, query_groups, d_q_emb, sga_terms if use_sga else None, grads)
    _backward_groups(params, cfg, cand_groups, d_c_emb, None, grads)
    metrics["grad_norm"] = float(np.sqrt(sum(float(np.sum(g * g)) for _, g in sorted(grads.items()))))
    return metrics, grads


def train_step(
    params: dict[str, np.ndarray],
    opt: AdamState,
    cfg: RunConfig,
    batch: list[Sample],
    positives: list[Candidate],
) -> dict:
    metrics, grads = batch_loss_and_grads(params, cfg, batch, positives, want_grads=True)
    if not np.isfinite(metrics["L_total"]):
        raise RuntimeError(f"non-finite loss at optimizer step {opt.t + 1}: {metrics}")
    adam_step(params, grads, opt, cfg.train.lr)
    return metrics


def init_all_params(cfg: RunConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    params = model.init_params(cfg.model, rng)
    params.update(sdr.init_fusion_params(cfg.model.d_model, rng))
    return params


def checkpoint_entries(params: dict[str, np.ndarray], opt: AdamState, step: int) -> dict[str, np.ndarray]:
    entries = dict(params)
    for name in params:
        entries[f"opt.m.{name}"] = opt.m[name]
        entries[f"opt.v.{name}"] = opt.v[name]
    entries["meta.step"] = np.array(float(step))
    return entries


def split_checkpoint(entries: dict[str, np.ndarray]) -> tuple[dict[str, np.ndarray], AdamState, int]:
    params = {k: v for k, v in entries.items() if not k.startswith(("opt.", "meta."))}
    step = int(np.asarray(entries["meta.step"]).reshape(-1)[0])
    opt = AdamState(
        m={k: entries[f"opt.m.{k}"] for k in params},
        v={k: entries[f"opt.v.{k}"] for k in params},
        t=step,
    )
    return params, opt, step


def run_training(
    cfg: RunConfig,
    corpus: Corpus | str | Path,
    out_dir: str | Path,
    resume: str | Path | None = None,
) -> dict:
    """Train on the corpus's train split; write checkpoint and metrics log."""
    cfg.validate()
    if not isinstance(corpus, Corpus):
        corpus = load_corpus(corpus)
    if corpus.meta["image_size"] != cfg.model.image_size:
        raise ValueError("corpus image size does not match model config")
    samples = corpus.by_split("train")
    if not samples:
        raise ValueError("corpus has no train split")
    if sga_active(cfg.train.mode):
        missing = [s.id for s in samples if s.flavor == "it2i" and s.target is None]
        if missing:
            raise ValueError(
                f"mode {cfg.train.mode!r} needs saliency targets; {len(missing)} samples lack them "
                f"(first: {missing[0]}); run build-saliency first"
            )
    cand_map = corpus.candidate_map()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    start_step = 0
    params_rng = make_rng(cfg.train.seed)
    params = init_all_params(cfg, params_rng)
    opt = adam_init(params)
    if resume is not None:
        entries, _ = fileio.load_checkpoint(resume)
        params, opt, start_step = split_checkpoint(entries)
        if start_step >= cfg.train.steps:
            raise ValueError(f"checkpoint already at step {start_step}, nothing to do")

    data_rng = make_rng(cfg.train.seed + 1)

    def batch_stream():
        while True:
            yield from epoch_batches(samples, cfg.train.batch_size, data_rng)

    stream = batch_stream()
    for _ in range(start_step):
        next(stream)

    metrics_path = out_dir / "metrics.jsonl"
    last: dict = {}
    with open(metrics_path, "a" if resume is not None else "w") as log:
        for step in range(start_step, cfg.train.steps):
            batch = next(stream)
            positives = [cand_map[s.positive] for s in batch]
            metrics = train_step(params, opt, cfg, batch, positives)
            last = {"step": step + 1, **{k: float(v) for k, v in metrics.items()}}
            log.write(json.dumps(last, sort_keys=True) + "\n")
    fileio.save_checkpoint(out_dir / "checkpoint.ckpt", checkpoint_entries(params, opt, cfg.train.steps))
    return last


def _pack(params: dict[str, np.ndarray]) -> np.ndarray:
    return np.concatenate([params[k].ravel() for k in sorted(params)])


def _unpack(vector: np.ndarray, template: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    out = {}
    pos = 0
    for name in sorted(template):
        size = template[name].size
        out[name] = vector[pos : pos + size].reshape(template[name].shape)
        pos += size
    return out


def tiny_run_config(base: RunConfig, mode: str, fusion_mode: str) -> RunConfig:
    """The small double-precision setup used for finite-difference checks."""
    tiny_model = replace(
        base.model,
        image_size=8, patch_size=4, n_layers=2, d_model=8, n_heads=2,
        vocab_size=16, max_seq_len=12,
    )
    return RunConfig(
        model=tiny_model,
        loss=base.loss,
        sdr=replace(base.sdr, fusion_mode=fusion_mode),
        saliency=base.saliency,
        train=replace(base.train, mode=mode, batch_size=2),
        data=base.data,
    )


def _tiny_batch(cfg: RunConfig, rng: np.random.Generator) -> tuple[list[Sample], list[Candidate]]:
    size = cfg.model.image_size
    n = cfg.model.n_patches

    def random_image():
        return rng.integers(0, 256, (size, size, 3)).astype(np.uint8)

    target = rng.random(n) + 0.1
    target /= target.sum()
    query_a = Sample(
        id="chk_00000", flavor="it2i", tokens=[1, 2, 0], positive="chk_c0", pool=[],
        image=random_image(), target=target, target_valid=True,
    )
    query_b = Sample(
        id="chk_00001", flavor="t2i", tokens=[3, 2, 0], positive="chk_c1", pool=[],
    )
    positives = [
        Candidate(id="chk_c0", tokens=[4, 0], classes=[], image=random_image()),
        Candidate(id="chk_c1", tokens=[4, 0], classes=[], image=random_image()),
    ]
    return [query_a, query_b], positives


def verify_gradients(
    base: RunConfig,
    seed: int = 0,
    combos: tuple[tuple[str, str], ...] = (
        ("baseline", "add"), ("sga", "add"), ("sdr", "add"), ("full", "add"),
        ("sdr", "concat_project"), ("full", "concat_project"),
    ),
    h: float = 1e-5,
) -> dict:
    """Compare analytic gradients against central differences per mode.

    Returns {"combos": {"mode/fusion": max_rel_err}, "max_rel_err": worst}.
    """
    report: dict[str, float] = {}
    for mode, fusion in combos:
        cfg = tiny_run_config(base, mode, fusion)
        rng = make_rng(seed)
        params = init_all_params(cfg, rng)
        batch, positives = _tiny_batch(cfg, rng)
        _, grads = batch_loss_and_grads(params, cfg, batch, positives, want_grads=True)
        analytic = _pack(grads)

        def loss_of(vector: np.ndarray) -> float:
            metrics, _ = batch_loss_and_grads(
                _unpack(vector, params), cfg, batch, positives, want_grads=False
            )
            return metrics["L_total"]

        numeric = finite_diff_gradient(loss_of, _pack(params), h=h)
        report[f"{mode}/{fusion}"] = relative_error(analytic, numeric)
    return {"combos": report, "max_rel_err": max(report.values())}
