"""Command-line entrypoint covering the whole pipeline.

Subcommands: gen-data, build-saliency, train, eval, embed, visualize,
stats, grad-check. Exit code 0 on success, 1 on validation errors (bad
flags, bad config values, missing inputs), 2 on unexpected runtime
failures. Every run logs its resolved configuration to stderr.

Config precedence, lowest to highest: built-in defaults, then the
``--config`` file, then repeatable ``--set key=value`` overrides, then
named flags such as ``--steps``.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import config as config_mod
from . import datagen, evaluate, fileio, saliency, train
from .config import RunConfig


class _Parser(argparse.ArgumentParser):
    """argparse with usage errors mapped onto exit code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _add_config_flags(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", help="config file of 'key = value' lines")
    sub.add_argument(
        "--set", action="append", default=[], metavar="KEY=VALUE",
        help="override one config key; repeatable",
    )


def _resolve_config(args, flag_map: dict[str, str]) -> RunConfig:
    """defaults <- --config file <- --set pairs <- named flags; then log."""
    overrides: dict[str, str] = {}
    for entry in getattr(args, "set", []):
        key, eq, value = entry.partition("=")
        if not eq:
            raise ValueError(f"--set expects key=value, got {entry!r}")
        overrides[key.strip()] = value.strip()
    for attr, key in flag_map.items():
        value = getattr(args, attr, None)
        if value is not None:
            overrides[key] = str(value)
    cfg = config_mod.load_config(getattr(args, "config", None), overrides)
    sys.stderr.write("# resolved config\n" + config_mod.serialize_config(cfg))
    return cfg


def _load_checkpoint_config(args) -> tuple[dict[str, np.ndarray], RunConfig]:
    ckpt = Path(args.ckpt)
    if not ckpt.exists():
        raise FileNotFoundError(f"checkpoint not found: {ckpt}")
    if args.config is None:
        sidecar = ckpt.parent / "config.txt"
        if not sidecar.exists():
            raise FileNotFoundError(f"no config found at {sidecar}; pass --config")
        args.config = str(sidecar)
    cfg = _resolve_config(args, {})
    entries, _ = fileio.load_checkpoint(ckpt)
    params, _, _ = train.split_checkpoint(entries)
    return params, cfg


def _require_corpus(path: str) -> Path:
    root = Path(path)
    if not (root / "manifest.jsonl").exists():
        raise FileNotFoundError(f"no corpus manifest at {root / 'manifest.jsonl'}")
    return root


_GRID_DIVIDER = 128  # gray column between the two panels of a pair image


def cmd_gen_data(args) -> int:
    cfg = _resolve_config(args, {
        "seed": "data.seed", "train": "data.n_train", "eval": "data.n_eval",
        "pool": "data.pool_size",
    })
    corpus = datagen.generate_corpus(cfg.data, args.out)
    print(f"wrote {len(corpus.samples)} samples, {len(corpus.candidates)} candidates to {args.out}")
    return 0


def cmd_build_saliency(args) -> int:
    cfg = _resolve_config(args, {"sigma": "saliency.sigma", "delta": "saliency.delta"})
    root = _require_corpus(args.corpus)
    recorder = None
    interfaces = None
    if args.wire_log:
        corpus = datagen.load_corpus(root)
        recorder = saliency.CallRecorder(saliency.make_oracle_interfaces(corpus))
        interfaces = recorder.as_interfaces()
    counts = saliency.build_corpus_targets(root, cfg.saliency, interfaces)
    if recorder is not None:
        Path(args.wire_log).write_text(recorder.dump_jsonl())
    print(f"built {counts['built']} targets ({counts['valid']} valid, {counts['invalid']} invalid)")
    return 0


def cmd_train(args) -> int:
    cfg = _resolve_config(args, {
        "mode": "train.mode", "steps": "train.steps", "batch_size": "train.batch_size",
        "lr": "train.lr", "seed": "train.seed",
        "alignment_layers": "loss.alignment_layers",
        "top_k": "sdr.top_k", "fusion": "sdr.fusion_mode",
    })
    root = _require_corpus(args.corpus)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(config_mod.serialize_config(cfg))
    metrics = train.run_training(cfg, root, out, resume=args.resume)
    print(json.dumps(metrics, sort_keys=True))
    return 0


def cmd_eval(args) -> int:
    params, cfg = _load_checkpoint_config(args)
    corpus = datagen.load_corpus(_require_corpus(args.corpus))
    report = evaluate.evaluate_checkpoint(params, cfg, corpus, split=args.split)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    evaluate.write_report(report, out / "report.json")
    line = {k: report[k] for k in ("p_at_1", "mean_kl_to_target", "mean_mask_mass", "balance")}
    if args.baseline_report:
        base = json.loads(Path(args.baseline_report).read_text())
        line["p_at_1_gap"] = report["p_at_1"] - base["p_at_1"]
        if base.get("balance") and report.get("balance"):
            line["balance_improvement"] = evaluate.balance_improvement(
                base["balance"]["distance"], report["balance"]["distance"]
            )
    print(json.dumps(line, sort_keys=True))
    return 0


def cmd_embed(args) -> int:
    params, cfg = _load_checkpoint_config(args)
    from .config import sdr_active

    corpus = datagen.load_corpus(_require_corpus(args.corpus))
    samples = corpus.by_split(args.split)
    if not samples:
        raise ValueError(f"corpus has no {args.split!r} split")
    use_sdr = sdr_active(cfg.train.mode)
    queries = evaluate.embed_entries(
        params, cfg, [(s.id, s.tokens, s.image) for s in samples], apply_sdr=use_sdr
    )
    cands = evaluate.embed_entries(
        params, cfg, [(c.id, c.tokens, c.image) for c in corpus.candidates],
        apply_sdr=use_sdr and cfg.sdr.apply_to == "both",
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    fileio.write_tensor(out / "query_embeddings.tnsr", np.stack([queries[s.id].emb for s in samples]))
    (out / "query_ids.json").write_text(json.dumps([s.id for s in samples], indent=1) + "\n")
    fileio.write_tensor(
        out / "candidate_embeddings.tnsr", np.stack([cands[c.id].emb for c in corpus.candidates])
    )
    (out / "candidate_ids.json").write_text(
        json.dumps([c.id for c in corpus.candidates], indent=1) + "\n"
    )
    print(f"embedded {len(samples)} queries, {len(corpus.candidates)} candidates")
    return 0


def _pair_image(attn: np.ndarray, target: np.ndarray, factor: int) -> np.ndarray:
    left = evaluate.heatmap_image(attn, factor)
    right = evaluate.heatmap_image(target, factor)
    divider = np.full((left.shape[0], factor), _GRID_DIVIDER, dtype=np.uint8)
    return np.concatenate([left, divider, right], axis=1)


def cmd_visualize(args) -> int:
    params, cfg = _load_checkpoint_config(args)
    corpus = datagen.load_corpus(_require_corpus(args.corpus))
    by_id = {s.id: s for s in corpus.samples}
    if args.ids:
        missing = [sid for sid in args.ids if sid not in by_id]
        if missing:
            raise ValueError(f"unknown sample ids: {missing}")
        samples = [by_id[sid] for sid in args.ids]
    else:
        samples = [s for s in corpus.by_split(args.split) if s.flavor == "it2i"][: args.limit]
    if not samples:
        raise ValueError("no image-bearing samples to visualize")
    for sample in samples:
        if sample.image is None:
            raise ValueError(f"sample {sample.id} has no image to attend over")
        if sample.target is None:
            raise ValueError(f"sample {sample.id} has no saliency target; run build-saliency first")

    from .config import sdr_active

    results = evaluate.embed_entries(
        params, cfg, [(s.id, s.tokens, s.image) for s in samples],
        apply_sdr=sdr_active(cfg.train.mode),
    )
    grid = cfg.model.grid_size
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for sample in samples:
        attn = results[sample.id].q_map.reshape(grid, grid)
        target = np.asarray(sample.target).reshape(grid, grid)
        fileio.write_pgm(out / f"{sample.id}_attn.pgm", evaluate.heatmap_image(attn, args.factor))
        fileio.write_pgm(out / f"{sample.id}_target.pgm", evaluate.heatmap_image(target, args.factor))
        fileio.write_pgm(out / f"{sample.id}_pair.pgm", _pair_image(attn, target, args.factor))
    print(f"wrote heatmaps for {len(samples)} samples to {out}")
    return 0


def cmd_stats(args) -> int:
    _resolve_config(args, {})
    corpus = datagen.load_corpus(_require_corpus(args.corpus))
    samples = corpus.samples if args.split == "all" else corpus.by_split(args.split)
    grids = []
    for sample in samples:
        if sample.target is not None and sample.target_valid:
            side = int(round(np.sqrt(len(sample.target))))
            grids.append(np.asarray(sample.target).reshape(side, side))
    stats = evaluate.saliency_stats(grids)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    fileio.write_pgm(out / "mean_heatmap.pgm", evaluate.heatmap_image(stats["mean_heatmap"], args.factor))
    hotspot = (stats["hotspot_mask"].astype(np.uint8)) * 255
    fileio.write_pgm(
        out / "hotspot_mask.pgm",
        np.repeat(np.repeat(hotspot, args.factor, axis=0), args.factor, axis=1),
    )
    print(f"aggregated {len(grids)} valid targets; hotspot cells: {int(stats['hotspot_mask'].sum())}")
    return 0


def cmd_grad_check(args) -> int:
    cfg = _resolve_config(args, {"seed": "train.seed"})
    report = train.verify_gradients(cfg, seed=cfg.train.seed)
    for combo in sorted(report["combos"]):
        print(f"{combo}: {report['combos'][combo]:.3e}")
    print(f"max relative error: {report['max_rel_err']:.3e}")
    return 0 if report["max_rel_err"] <= args.tolerance else 1


def build_parser() -> _Parser:
    parser = _Parser(prog="salemb", description=__doc__.splitlines()[0])
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("gen-data", help="generate a synthetic retrieval corpus")
    _add_config_flags(p)
    p.add_argument("--out", required=True, help="corpus output directory")
    p.add_argument("--seed", type=int, help="corpus RNG seed")
    p.add_argument("--train", type=int, help="number of training samples")
    p.add_argument("--eval", type=int, help="number of eval samples")
    p.add_argument("--pool", type=int, help="candidate-pool size per query")
    p.set_defaults(func=cmd_gen_data)

    p = subs.add_parser("build-saliency", help="construct saliency targets for a corpus")
    _add_config_flags(p)
    p.add_argument("--corpus", required=True, help="corpus directory")
    p.add_argument("--sigma", type=float, help="Gaussian smoothing width")
    p.add_argument("--delta", type=float, help="confidence threshold for mask filtering")
    p.add_argument("--wire-log", help="also write every interface call as JSONL here")
    p.set_defaults(func=cmd_build_saliency)

    p = subs.add_parser("train", help="train a model on a corpus")
    _add_config_flags(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True, help="run directory for checkpoint and logs")
    p.add_argument("--mode", choices=config_mod.TRAIN_MODES, help="which loss terms are active")
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--alignment-layers", dest="alignment_layers",
                   choices=("early", "middle", "late", "all"))
    p.add_argument("--top-k", dest="top_k", help="'all' or a patch count")
    p.add_argument("--fusion", choices=("base", "add", "concat_project"))
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = subs.add_parser("eval", help="score a checkpoint on a corpus split")
    _add_config_flags(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="eval", choices=("train", "eval"))
    p.add_argument("--baseline-report", help="report.json to compare against")
    p.set_defaults(func=cmd_eval)

    p = subs.add_parser("embed", help="export query and candidate embeddings")
    _add_config_flags(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="eval", choices=("train", "eval"))
    p.set_defaults(func=cmd_embed)

    p = subs.add_parser("visualize", help="write attention/target heatmap pairs")
    _add_config_flags(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--ids", nargs="+", help="specific sample ids")
    p.add_argument("--split", default="eval", choices=("train", "eval"))
    p.add_argument("--limit", type=int, default=8, help="samples to render when --ids is absent")
    p.add_argument("--factor", type=int, default=8, help="nearest-neighbor upscale factor")
    p.set_defaults(func=cmd_visualize)

    p = subs.add_parser("stats", help="aggregate saliency targets into corpus-level maps")
    _add_config_flags(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="all", choices=("train", "eval", "all"))
    p.add_argument("--factor", type=int, default=8)
    p.set_defaults(func=cmd_stats)

    p = subs.add_parser("grad-check", help="verify analytic gradients against finite differences")
    _add_config_flags(p)
    p.add_argument("--seed", type=int, help="parameter/batch RNG seed")
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.set_defaults(func=cmd_grad_check)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError, KeyError, NotADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # anything unexpected is a runtime failure
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
