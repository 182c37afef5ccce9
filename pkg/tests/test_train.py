import json
from dataclasses import replace

import numpy as np
import pytest

from salemb import config, datagen, fileio, saliency, train
from salemb.numerics import make_rng


def _cfg(steps=2, mode="full", seed=0, batch_size=4, **train_kw):
    base = config.default_config()
    return replace(
        base,
        train=replace(base.train, steps=steps, mode=mode, seed=seed,
                      batch_size=batch_size, **train_kw),
    )


def test_adam_zero_lr_keeps_params(rng):
    params = {"w": rng.standard_normal((3, 3))}
    before = params["w"].copy()
    state = train.adam_init(params)
    train.adam_step(params, {"w": rng.standard_normal((3, 3))}, state, lr=0.0)
    assert np.array_equal(params["w"], before)
    assert state.t == 1


def test_adam_first_step_is_signed_lr():
    params = {"w": np.array([1.0, -1.0])}
    grads = {"w": np.array([0.5, -2.0])}
    state = train.adam_init(params)
    train.adam_step(params, grads, state, lr=0.01)
    # bias correction makes the first update lr * g / (|g| + eps)
    assert np.allclose(params["w"], [1.0 - 0.01, -1.0 + 0.01], atol=1e-6)


def test_group_entries_buckets_by_layout(rng):
    img = rng.integers(0, 256, size=(32, 32, 3), dtype=np.uint8)
    entries = [([1, 2, 0], None), ([30, 0], img), ([4, 5, 0], None), ([30, 0], img)]
    groups = train.group_entries(entries)
    assert len(groups) == 2
    text = next(g for g in groups if g.images is None)
    vis = next(g for g in groups if g.images is not None)
    assert text.indices == [0, 2]
    assert vis.indices == [1, 3]
    assert vis.images.shape == (2, 32, 32, 3)
    assert vis.images.max() <= 1.0


def test_batch_loss_modes(tiny_corpus):
    cfg = _cfg(mode="baseline")
    params = train.init_all_params(cfg, make_rng(0))
    trains = tiny_corpus.by_split("train")
    batch = [s for s in trains if s.flavor == "it2i"][:2] + [s for s in trains if s.flavor == "t2i"][:2]
    cand = tiny_corpus.candidate_map()
    positives = [cand[s.positive] for s in batch]

    base_metrics, base_grads = train.batch_loss_and_grads(params, cfg, batch, positives)
    assert base_metrics["L_SG"] == 0.0
    assert base_metrics["L_total"] == base_metrics["L_Con"]

    full_metrics, full_grads = train.batch_loss_and_grads(params, _cfg(mode="full"), batch, positives)
    assert full_metrics["L_SG"] > 0.0
    assert full_metrics["L_total"] > full_metrics["L_Con"]
    # the saliency term reaches parameters the contrastive term alone does not touch the same way
    assert not np.allclose(base_grads["layers.3.attn.wq"], full_grads["layers.3.attn.wq"])


def test_run_training_writes_artifacts(tiny_corpus, tmp_path):
    metrics = train.run_training(_cfg(steps=2), tiny_corpus, tmp_path / "run")
    assert metrics["step"] == 2
    lines = (tmp_path / "run" / "metrics.jsonl").read_text().splitlines()
    assert len(lines) == 2
    for i, line in enumerate(lines, start=1):
        record = json.loads(line)
        assert record["step"] == i
        assert sorted(record) == ["L_Con", "L_SG", "L_total", "grad_norm", "step"]
    entries, _ = fileio.load_checkpoint(tmp_path / "run" / "checkpoint.ckpt")
    params, opt, step = train.split_checkpoint(entries)
    assert step == 2
    assert opt.t == 2
    assert "fusion.w" in params


def test_run_training_deterministic(tiny_corpus, tmp_path):
    train.run_training(_cfg(steps=3, seed=9), tiny_corpus, tmp_path / "a")
    train.run_training(_cfg(steps=3, seed=9), tiny_corpus, tmp_path / "b")
    assert (tmp_path / "a" / "checkpoint.ckpt").read_bytes() == (tmp_path / "b" / "checkpoint.ckpt").read_bytes()
    assert (tmp_path / "a" / "metrics.jsonl").read_text() == (tmp_path / "b" / "metrics.jsonl").read_text()


def test_resume_continues_counter(tiny_corpus, tmp_path):
    out = tmp_path / "run"
    train.run_training(_cfg(steps=3), tiny_corpus, out)
    metrics = train.run_training(
        _cfg(steps=5), tiny_corpus, out, resume=out / "checkpoint.ckpt"
    )
    assert metrics["step"] == 5
    steps = [json.loads(l)["step"] for l in (out / "metrics.jsonl").read_text().splitlines()]
    assert steps == [1, 2, 3, 4, 5]
    with pytest.raises(ValueError, match="nothing to do"):
        train.run_training(_cfg(steps=5), tiny_corpus, out, resume=out / "checkpoint.ckpt")


def test_sga_requires_targets(tmp_path):
    cfg = datagen.DataConfig(n_train=6, n_eval=0, pool_size=8, bank_per_class=1, seed=2)
    corpus = datagen.generate_corpus(cfg, tmp_path / "untargeted")
    with pytest.raises(ValueError, match="build-saliency"):
        train.run_training(_cfg(steps=1, mode="sga"), corpus, tmp_path / "run")
    # contrastive-only training is fine without targets
    train.run_training(_cfg(steps=1, mode="baseline"), corpus, tmp_path / "run2")


def test_checkpoint_entries_round_trip(rng):
    params = {"w": rng.standard_normal((2, 2)), "b": rng.standard_normal(2)}
    opt = train.adam_init(params)
    train.adam_step(params, {k: rng.standard_normal(v.shape) for k, v in params.items()}, opt, 0.1)
    entries = train.checkpoint_entries(params, opt, step=5)
    params2, opt2, step = train.split_checkpoint(entries)
    assert step == 5 and opt2.t == 5
    for name in params:
        assert np.array_equal(params[name], params2[name])
        assert np.array_equal(opt.m[name], opt2.m[name])
        assert np.array_equal(opt.v[name], opt2.v[name])


def test_verify_gradients_single_combo():
    report = train.verify_gradients(config.default_config(), seed=0, combos=(("full", "add"),))
    assert report["max_rel_err"] < 1e-4


def test_training_moves_loss_down(tiny_corpus, tmp_path):
    out = tmp_path / "run"
    train.run_training(_cfg(steps=40, mode="baseline", batch_size=8), tiny_corpus, out)
    steps = [json.loads(l) for l in (out / "metrics.jsonl").read_text().splitlines()]
    first = np.mean([r["L_Con"] for r in steps[:5]])
    last = np.mean([r["L_Con"] for r in steps[-5:]])
    assert last < first
