"""A small pre-norm transformer over mixed visual-token/text-token input.

The encoder consumes an optional image (split into flattened patches and
linearly projected) followed by text/instruction tokens and a final
end-of-line token. Two things come out of a forward pass:

* pooled embeddings: the final hidden state at the end-of-line position
  (``f_last``) and at every visual position (``f_visual``)
* per-layer, per-head attention rows at the end-of-line position, which
  downstream code turns into saliency-shaped query distributions

Backward passes are written by hand in float64. The backward entry point
accepts gradients for the pooled embeddings and, separately, gradients to
inject directly into the recorded attention rows, so losses defined on
attention distributions flow back into the weights alongside embedding
losses.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

LN_EPS = 1e-5
_GELU_C = float(np.sqrt(2.0 / np.pi))


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 32
    patch_size: int = 4
    n_layers: int = 4
    d_model: int = 64
    n_heads: int = 4
    vocab_size: int = 64
    max_seq_len: int = 80

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size

    @property
    def n_patches(self) -> int:
        return self.grid_size**2

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def ffn_hidden(self) -> int:
        return 2 * self.d_model

    @property
    def patch_dim(self) -> int:
        return 3 * self.patch_size**2

    def validate(self) -> None:
        if self.image_size % self.patch_size != 0:
            raise ValueError("patch size must divide image size")
        if self.d_model % self.n_heads != 0:
            raise ValueError("head count must divide model width")


@dataclass(frozen=True)
class TokenSequence:
    """Non-visual token ids plus per-position tags, end-of-line last.

    ``ids`` excludes visual positions; when ``has_image`` is set the
    model prepends one position per patch ahead of these ids.
    """

    ids: tuple[int, ...]
    tags: tuple[str, ...]
    has_image: bool


def build_sequence(
    text_tokens: list[int],
    instruction_tokens: list[int],
    has_image: bool,
    eol_token: int,
) -> TokenSequence:
    """Compose the input template: visual block, text, instruction, end-of-line."""
    if not has_image and not text_tokens:
        raise ValueError("sequence needs at least one modality")
    ids = tuple(text_tokens) + tuple(instruction_tokens) + (eol_token,)
    tags = ("text",) * len(text_tokens) + ("instruction",) * len(instruction_tokens) + ("eol",)
    return TokenSequence(ids=ids, tags=tags, has_image=has_image)


@dataclass
class ForwardOutput:
    """Everything a forward pass produces, plus caches for backward."""

    f_last: np.ndarray                 # (B, D)
    f_visual: np.ndarray | None        # (B, N, D) when an image was given
    attn_rows: list[np.ndarray]        # per layer: (B, heads, T), end-of-line row
    n_visual: int
    eol_index: int
    seq_len: int
    cache: dict | None = field(default=None, repr=False)


def init_params(cfg: ModelConfig, rng: np.random.Generator, scale: float = 0.02) -> dict[str, np.ndarray]:
    cfg.validate()
    p: dict[str, np.ndarray] = {}
    p["patch_embed.w"] = rng.normal(0.0, scale, (cfg.patch_dim, cfg.d_model))
    p["patch_embed.b"] = np.zeros(cfg.d_model)
    p["token_embed"] = rng.normal(0.0, scale, (cfg.vocab_size, cfg.d_model))
    p["pos_embed"] = rng.normal(0.0, scale, (cfg.max_seq_len, cfg.d_model))
    for layer in range(cfg.n_layers):
        pre = f"layers.{layer}."
        p[pre + "ln1.g"] = np.ones(cfg.d_model)
        p[pre + "ln1.b"] = np.zeros(cfg.d_model)
        for name in ("wq", "wk", "wv", "wo"):
            p[pre + "attn." + name] = rng.normal(0.0, scale, (cfg.d_model, cfg.d_model))
        p[pre + "ln2.g"] = np.ones(cfg.d_model)
        p[pre + "ln2.b"] = np.zeros(cfg.d_model)
        p[pre + "ffn.w1"] = rng.normal(0.0, scale, (cfg.d_model, cfg.ffn_hidden))
        p[pre + "ffn.b1"] = np.zeros(cfg.ffn_hidden)
        p[pre + "ffn.w2"] = rng.normal(0.0, scale, (cfg.ffn_hidden, cfg.d_model))
        p[pre + "ffn.b2"] = np.zeros(cfg.d_model)
    p["final_norm.g"] = np.ones(cfg.d_model)
    p["final_norm.b"] = np.zeros(cfg.d_model)
    return p


def zeros_like_params(params: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {k: np.zeros_like(v) for k, v in params.items()}


def patchify(images: np.ndarray, patch_size: int) -> np.ndarray:
    """(B, H, W, 3) -> (B, N, patch_dim) in raster order."""
    b, h, w, c = images.shape
    gh, gw = h // patch_size, w // patch_size
    tiles = images.reshape(b, gh, patch_size, gw, patch_size, c)
    tiles = tiles.transpose(0, 1, 3, 2, 4, 5)
    return tiles.reshape(b, gh * gw, patch_size * patch_size * c)


def _layer_norm(x: np.ndarray, g: np.ndarray, b: np.ndarray):
    mu = np.mean(x, axis=-1, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * inv
    return xhat * g + b, xhat, inv


def _layer_norm_backward(dy: np.ndarray, xhat: np.ndarray, inv: np.ndarray, g: np.ndarray):
    dxhat = dy * g
    m1 = np.mean(dxhat, axis=-1, keepdims=True)
    m2 = np.mean(dxhat * xhat, axis=-1, keepdims=True)
    dx = (dxhat - m1 - xhat * m2) * inv
    dg = np.sum(dy * xhat, axis=tuple(range(dy.ndim - 1)))
    db = np.sum(dy, axis=tuple(range(dy.ndim - 1)))
    return dx, dg, db


def _gelu(x: np.ndarray):
    x2 = x * x
    inner = _GELU_C * (x + 0.044715 * x2 * x)
    t = np.tanh(inner)
    return 0.5 * x * (1.0 + t), t


def _gelu_backward(x: np.ndarray, t: np.ndarray, dy: np.ndarray) -> np.ndarray:
    d_inner = _GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner)


def _causal_mask(seq_len: int) -> np.ndarray:
    mask = np.zeros((seq_len, seq_len))
    mask[np.triu_indices(seq_len, k=1)] = -np.inf
    return mask


def _masked_softmax(scores: np.ndarray) -> np.ndarray:
    """Row softmax tolerating -inf entries from the causal mask."""
    shifted = scores - np.max(scores, axis=-1, keepdims=True)
    exp = np.exp(shifted)
    return exp / np.sum(exp, axis=-1, keepdims=True)


def forward(
    params: dict[str, np.ndarray],
    cfg: ModelConfig,
    token_ids: np.ndarray,
    images: np.ndarray | None = None,
    want_backward: bool = False,
) -> ForwardOutput:
    """Run a batch of identically shaped sequences.

    ``token_ids`` is (B, T_text) and always ends with the end-of-line
    token; ``images`` is (B, H, W, 3) in [0, 1] or None for text-only
    input. All sequences in the batch share one layout, so no padding.
    """
    token_ids = np.asarray(token_ids)
    if np.any(token_ids < 0) or np.any(token_ids >= cfg.vocab_size):
        raise ValueError("token id outside vocabulary")
    batch = token_ids.shape[0]
    n_visual = cfg.n_patches if images is not None else 0
    seq_len = n_visual + token_ids.shape[1]
    if seq_len > cfg.max_seq_len:
        raise ValueError(f"sequence length {seq_len} exceeds max_seq_len {cfg.max_seq_len}")
    eol = seq_len - 1

    x = np.empty((batch, seq_len, cfg.d_model))
    patches = None
    if images is not None:
        patches = patchify(np.asarray(images, dtype=np.float64), cfg.patch_size)
        x[:, :n_visual] = patches @ params["patch_embed.w"] + params["patch_embed.b"]
    x[:, n_visual:] = params["token_embed"][token_ids]
    x = x + params["pos_embed"][:seq_len]

    mask = _causal_mask(seq_len)
    scale = 1.0 / np.sqrt(cfg.head_dim)
    rows: list[np.ndarray] = []
    layer_caches: list[dict] = []

    for layer in range(cfg.n_layers):
        pre = f"layers.{layer}."
        h1, xhat1, inv1 = _layer_norm(x, params[pre + "ln1.g"], params[pre + "ln1.b"])
        flat = h1.reshape(batch * seq_len, cfg.d_model)

        def heads(w: np.ndarray) -> np.ndarray:
            return (flat @ w).reshape(batch, seq_len, cfg.n_heads, cfg.head_dim).transpose(0, 2, 1, 3)

        q = heads(params[pre + "attn.wq"])
        k = heads(params[pre + "attn.wk"])
        v = heads(params[pre + "attn.wv"])
        scores = q @ k.transpose(0, 1, 3, 2) * scale + mask
        attn = _masked_softmax(scores)
        ctx = (attn @ v).transpose(0, 2, 1, 3).reshape(batch * seq_len, cfg.d_model)
        attn_out = (ctx @ params[pre + "attn.wo"]).reshape(batch, seq_len, cfg.d_model)
        rows.append(attn[:, :, eol, :].copy())
        x_mid = x + attn_out

        h2, xhat2, inv2 = _layer_norm(x_mid, params[pre + "ln2.g"], params[pre + "ln2.b"])
        u1 = h2 @ params[pre + "ffn.w1"] + params[pre + "ffn.b1"]
        a1, tanh1 = _gelu(u1)
        x_out = x_mid + a1 @ params[pre + "ffn.w2"] + params[pre + "ffn.b2"]

        if want_backward:
            layer_caches.append(
                dict(xhat1=xhat1, inv1=inv1, h1=h1, q=q, k=k, v=v, attn=attn, ctx=ctx,
                     xhat2=xhat2, inv2=inv2, h2=h2, u1=u1, tanh1=tanh1, a1=a1)
            )
        x = x_out

    final, xhat_f, inv_f = _layer_norm(x, params["final_norm.g"], params["final_norm.b"])
    f_last = final[:, eol, :].copy()
    f_visual = final[:, :n_visual, :].copy() if n_visual else None

    cache = None
    if want_backward:
        cache = dict(
            token_ids=token_ids, patches=patches, layers=layer_caches,
            xhat_f=xhat_f, inv_f=inv_f, batch=batch,
        )
    return ForwardOutput(
        f_last=f_last, f_visual=f_visual, attn_rows=rows,
        n_visual=n_visual, eol_index=eol, seq_len=seq_len, cache=cache,
    )


def backward(
    params: dict[str, np.ndarray],
    cfg: ModelConfig,
    out: ForwardOutput,
    d_f_last: np.ndarray | None = None,
    d_f_visual: np.ndarray | None = None,
    d_rows: list[np.ndarray] | None = None,
    grads: dict[str, np.ndarray] | None = None,
) -> dict[str, np.ndarray]:
    """Accumulate parameter gradients for one forward pass.

    ``d_rows`` holds per-layer gradients (B, heads, T) to add straight
    into the recorded end-of-line attention rows; entries may be None.
    A ``grads`` dict may be passed in to accumulate across batches.
    """
    if out.cache is None:
        raise ValueError("forward pass was run without want_backward=True")
    cache = out.cache
    batch, seq_len, eol = cache["batch"], out.seq_len, out.eol_index
    n_visual = out.n_visual
    scale = 1.0 / np.sqrt(cfg.head_dim)
    if grads is None:
        grads = zeros_like_params(params)

    d_final = np.zeros((batch, seq_len, cfg.d_model))
    if d_f_last is not None:
        d_final[:, eol, :] += d_f_last
    if d_f_visual is not None:
        d_final[:, :n_visual, :] += d_f_visual

    dx, dg, db = _layer_norm_backward(d_final, cache["xhat_f"], cache["inv_f"], params["final_norm.g"])
    grads["final_norm.g"] += dg
    grads["final_norm.b"] += db

    for layer in range(cfg.n_layers - 1, -1, -1):
        pre = f"layers.{layer}."
        lc = cache["layers"][layer]

        # FFN block: x_out = x_mid + gelu(ln2(x_mid) @ w1 + b1) @ w2 + b2
        da1 = dx @ params[pre + "ffn.w2"].T
        grads[pre + "ffn.w2"] += lc["a1"].reshape(-1, cfg.ffn_hidden).T @ dx.reshape(-1, cfg.d_model)
        grads[pre + "ffn.b2"] += np.sum(dx, axis=(0, 1))
        du1 = _gelu_backward(lc["u1"], lc["tanh1"], da1)
        dh2 = du1 @ params[pre + "ffn.w1"].T
        grads[pre + "ffn.w1"] += lc["h2"].reshape(-1, cfg.d_model).T @ du1.reshape(-1, cfg.ffn_hidden)
        grads[pre + "ffn.b1"] += np.sum(du1, axis=(0, 1))
        dx_mid, dg2, db2 = _layer_norm_backward(dh2, lc["xhat2"], lc["inv2"], params[pre + "ln2.g"])
        dx_mid = dx_mid + dx
        grads[pre + "ln2.g"] += dg2
        grads[pre + "ln2.b"] += db2

        # attention block: x_mid = x_in + (attn @ v heads merged) @ wo
        d_attn_out = dx_mid.reshape(-1, cfg.d_model)
        d_ctx = (d_attn_out @ params[pre + "attn.wo"].T).reshape(
            batch, seq_len, cfg.n_heads, cfg.head_dim
        ).transpose(0, 2, 1, 3)
        grads[pre + "attn.wo"] += lc["ctx"].T @ d_attn_out
        d_attn = d_ctx @ lc["v"].transpose(0, 1, 3, 2)
        if d_rows is not None and d_rows[layer] is not None:
            d_attn[:, :, eol, :] += d_rows[layer]
        dv = lc["attn"].transpose(0, 1, 3, 2) @ d_ctx
        attn = lc["attn"]
        d_scores = attn * (d_attn - np.sum(d_attn * attn, axis=-1, keepdims=True))
        dq = d_scores @ lc["k"] * scale
        dk = d_scores.transpose(0, 1, 3, 2) @ lc["q"] * scale

        def merge(d_heads: np.ndarray) -> np.ndarray:
            return d_heads.transpose(0, 2, 1, 3).reshape(batch * seq_len, cfg.d_model)

        h1_flat = lc["h1"].reshape(-1, cfg.d_model)
        dh1 = np.zeros_like(h1_flat)
        for name, d_part in (("wq", dq), ("wk", dk), ("wv", dv)):
            flat_part = merge(d_part)
            grads[pre + "attn." + name] += h1_flat.T @ flat_part
            dh1 += flat_part @ params[pre + "attn." + name].T
        dh1 = dh1.reshape(batch, seq_len, cfg.d_model)
        dx_in, dg1, db1 = _layer_norm_backward(dh1, lc["xhat1"], lc["inv1"], params[pre + "ln1.g"])
        grads[pre + "ln1.g"] += dg1
        grads[pre + "ln1.b"] += db1
        dx = dx_mid + dx_in

    grads["pos_embed"][:seq_len] += np.sum(dx, axis=0)
    np.add.at(grads["token_embed"], cache["token_ids"], dx[:, n_visual:])
    if n_visual:
        d_vis = dx[:, :n_visual].reshape(-1, cfg.d_model)
        grads["patch_embed.w"] += cache["patches"].reshape(-1, cfg.patch_dim).T @ d_vis
        grads["patch_embed.b"] += np.sum(d_vis, axis=0)
    return grads


def attention_query_distribution(out: ForwardOutput, layer: int) -> np.ndarray:
    """Head-averaged end-of-line attention over visual positions, renormalized.

    Returns (B, N). Requires the forward pass to have seen an image.
    """
    if out.n_visual == 0:
        raise ValueError("no visual positions in this sequence")
    row = np.mean(out.attn_rows[layer], axis=1)        # (B, T)
    vis = row[:, : out.n_visual]
    return vis / np.sum(vis, axis=1, keepdims=True)


def attention_query_distribution_backward(
    out: ForwardOutput, layer: int, d_q: np.ndarray
) -> np.ndarray:
    """Turn a gradient on the (B, N) distribution into a (B, heads, T) row gradient."""
    n_heads = out.attn_rows[layer].shape[1]
    row = np.mean(out.attn_rows[layer], axis=1)
    vis = row[:, : out.n_visual]
    total = np.sum(vis, axis=1, keepdims=True)
    q = vis / total
    d_vis = (d_q - np.sum(d_q * q, axis=1, keepdims=True)) / total
    d_row = np.zeros((out.attn_rows[layer].shape[0], n_heads, out.seq_len))
    d_row[:, :, : out.n_visual] = d_vis[:, None, :] / n_heads
    return d_row
