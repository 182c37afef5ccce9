import json
from dataclasses import replace

import numpy as np
import pytest

from salemb import config, evaluate, model
from salemb.numerics import make_rng


def _random_index(rng, n=5, dim=8):
    ids = [f"c{i:02d}" for i in range(n)]
    return ids, rng.standard_normal((n, dim))


# ---------------------------------------------------------------- index


def test_build_index_rejects_empty():
    with pytest.raises(ValueError, match="zero candidates"):
        evaluate.build_index([], np.zeros((0, 4)))


def test_build_index_rejects_duplicate_id(rng):
    with pytest.raises(ValueError, match="duplicate"):
        evaluate.build_index(["a", "a"], rng.standard_normal((2, 4)))


def test_build_index_rejects_zero_norm():
    emb = np.array([[1.0, 0.0], [0.0, 0.0]])
    with pytest.raises(ValueError, match="zero-norm"):
        evaluate.build_index(["a", "b"], emb)


def test_build_index_rejects_count_mismatch(rng):
    with pytest.raises(ValueError, match="disagree"):
        evaluate.build_index(["a", "b"], rng.standard_normal((3, 4)))


def test_index_rows_unit_norm(rng):
    ids, emb = _random_index(rng)
    index = evaluate.build_index(ids, emb * 37.0)
    assert np.allclose(np.linalg.norm(index.matrix, axis=1), 1.0)


def test_index_bytes_reproducible(rng):
    ids, emb = _random_index(rng)
    a = evaluate.build_index(ids, emb)
    b = evaluate.build_index(ids, emb.copy())
    assert a.to_bytes() == b.to_bytes()


# ---------------------------------------------------------------- rank


def test_rank_self_retrieval(rng):
    ids, emb = _random_index(rng)
    index = evaluate.build_index(ids, emb)
    for i, cid in enumerate(ids):
        assert evaluate.rank(emb[i], index, k=1)[0] == cid


def test_rank_matches_brute_force(rng):
    for _ in range(25):
        ids, emb = _random_index(rng, n=7, dim=5)
        index = evaluate.build_index(ids, emb)
        query = rng.standard_normal(5)
        unit = emb / np.linalg.norm(emb, axis=1)[:, None]
        sims = unit @ (query / np.linalg.norm(query))
        expected = [cid for _, cid in sorted(zip(-sims, ids))]
        assert evaluate.rank(query, index) == expected


def test_rank_tie_breaks_by_ascending_id(rng):
    row = rng.standard_normal(4)
    # identical embeddings in scrambled id order: ties must sort by id
    index = evaluate.build_index(["z", "m", "a"], np.stack([row, row, row]))
    assert evaluate.rank(row, index) == ["a", "m", "z"]


def test_rank_k_beyond_pool_returns_full_ordering(rng):
    ids, emb = _random_index(rng, n=3)
    index = evaluate.build_index(ids, emb)
    assert len(evaluate.rank(emb[0], index, k=99)) == 3


def test_rank_rejects_zero_norm_query(rng):
    ids, emb = _random_index(rng)
    index = evaluate.build_index(ids, emb)
    with pytest.raises(ValueError, match="zero-norm"):
        evaluate.rank(np.zeros(emb.shape[1]), index)


def test_subindex_restricts_pool(rng):
    ids, emb = _random_index(rng, n=6)
    index = evaluate.build_index(ids, emb)
    sub = evaluate.subindex(index, ["c03", "c01"])
    assert sub.ids == ("c03", "c01")
    assert np.array_equal(sub.matrix[0], index.matrix[3])


def test_rank_order_independent_of_insertion(rng):
    ids, emb = _random_index(rng, n=6)
    query = rng.standard_normal(emb.shape[1])
    fwd = evaluate.build_index(ids, emb)
    perm = [4, 2, 0, 5, 1, 3]
    rev = evaluate.build_index([ids[i] for i in perm], emb[perm])
    assert evaluate.rank(query, fwd) == evaluate.rank(query, rev)


# ---------------------------------------------------------------- precision


def test_precision_counts_fractions():
    rankings = {"q1": ["a"], "q2": ["b"], "q3": ["x"], "q4": ["d"]}
    truth = {"q1": "a", "q2": "b", "q3": "c", "q4": "d"}
    assert evaluate.precision_at_1(rankings, truth) == 0.75
    assert evaluate.precision_at_1({"q1": ["a"]}, truth) == 1.0
    assert evaluate.precision_at_1({"q3": ["x"]}, truth) == 0.0


def test_precision_missing_truth_raises():
    with pytest.raises(KeyError, match="q9"):
        evaluate.precision_at_1({"q9": ["a"]}, {"q1": "a"})


def test_precision_empty_raises():
    with pytest.raises(ValueError):
        evaluate.precision_at_1({}, {})


# ---------------------------------------------------------------- balance


def test_balance_uniform_row_distance_zero():
    row = np.full(9, 1.0 / 9.0)
    rep = evaluate.balance_report(row, n_visual=4, eol_index=8)
    assert rep.distance == pytest.approx(0.0)


def test_balance_all_mass_on_visual():
    # 4 visual + 4 text positions, unit mass spread over the visual block
    row = np.array([0.25, 0.25, 0.25, 0.25, 0.0, 0.0, 0.0, 0.0, 0.0])
    rep = evaluate.balance_report(row, n_visual=4, eol_index=8)
    assert rep.mu_img == pytest.approx(0.25)
    assert rep.mu_text == pytest.approx(0.0)
    assert rep.distance == pytest.approx(0.25)


def test_balance_excludes_eol_position():
    row = np.array([0.1, 0.1, 0.3, 0.5])
    rep = evaluate.balance_report(row, n_visual=2, eol_index=3)
    assert rep.mu_text == pytest.approx(0.3)


def test_balance_single_modality_raises():
    with pytest.raises(ValueError):
        evaluate.balance_report(np.ones(4) / 4, n_visual=4, eol_index=4)
    with pytest.raises(ValueError):
        evaluate.balance_report(np.ones(4) / 4, n_visual=0, eol_index=3)


def test_aggregate_balance_means():
    reps = [
        evaluate.BalanceReport(mu_img=0.1, mu_text=0.3, distance=0.2),
        evaluate.BalanceReport(mu_img=0.3, mu_text=0.3, distance=0.0),
    ]
    agg = evaluate.aggregate_balance(reps)
    assert agg.mu_img == pytest.approx(0.2)
    assert agg.distance == pytest.approx(0.1)
    with pytest.raises(ValueError):
        evaluate.aggregate_balance([])


def test_improvement_against_self_is_zero():
    assert evaluate.balance_improvement(0.4, 0.4) == pytest.approx(0.0)
    assert evaluate.balance_improvement(0.4, 0.1) == pytest.approx(0.75)


def test_improvement_zero_baseline_raises():
    with pytest.raises(ValueError):
        evaluate.balance_improvement(0.0, 0.1)


# ---------------------------------------------------------------- heatmaps


def test_heatmap_one_hot_single_bright_block():
    grid = np.zeros((3, 3))
    grid[1, 2] = 0.7
    img = evaluate.heatmap_image(grid, factor=4)
    assert img.shape == (12, 12)
    assert np.all(img[4:8, 8:12] == 255)
    assert img.sum() == 255 * 16


def test_heatmap_uniform_is_constant():
    img = evaluate.heatmap_image(np.full((2, 2), 0.25), factor=2)
    assert np.all(img == 255)


def test_heatmap_zero_map_stays_black():
    img = evaluate.heatmap_image(np.zeros((2, 2)), factor=3)
    assert img.dtype == np.uint8
    assert np.all(img == 0)


def test_heatmap_block_sums_proportional(rng):
    grid = rng.uniform(0.0, 1.0, size=(4, 4))
    factor = 5
    img = evaluate.heatmap_image(grid, factor)
    for i in range(4):
        for j in range(4):
            block = img[i * factor:(i + 1) * factor, j * factor:(j + 1) * factor]
            expected = round(grid[i, j] / grid.max() * 255) * factor * factor
            assert block.sum() == expected


def test_heatmap_rejects_bad_factor():
    with pytest.raises(ValueError):
        evaluate.heatmap_image(np.ones((2, 2)), factor=0)


# ---------------------------------------------------------------- stats


def test_saliency_stats_single_target(rng):
    grid = rng.uniform(0.0, 1.0, size=(8, 8))
    grid /= grid.sum()
    stats = evaluate.saliency_stats([grid])
    assert np.array_equal(stats["mean_heatmap"], grid)
    # hotspot threshold must match a brute-force sort of the cells
    flat = np.sort(grid.reshape(-1))
    threshold = np.quantile(grid, 0.9)
    assert flat[-1] >= threshold
    assert np.array_equal(stats["hotspot_mask"], grid >= threshold)


def test_saliency_stats_mirror_symmetry(rng):
    grid = rng.uniform(0.0, 1.0, size=(6, 6))
    stats = evaluate.saliency_stats([grid, grid[:, ::-1]])
    mean = stats["mean_heatmap"]
    assert np.allclose(mean, mean[:, ::-1])


def test_saliency_stats_hotspot_count_bounds(rng):
    grids = [g / g.sum() for g in rng.uniform(0.0, 1.0, size=(5, 8, 8))]
    stats = evaluate.saliency_stats(grids)
    count = int(stats["hotspot_mask"].sum())
    # top decile of 64 cells: at least one, at most ~10% plus one row
    assert 1 <= count <= 64 * 0.1 + 8


def test_saliency_stats_mean_in_unit_interval(rng):
    grids = [g / g.sum() for g in rng.uniform(0.0, 1.0, size=(4, 4, 4))]
    mean = evaluate.saliency_stats(grids)["mean_heatmap"]
    assert np.all(mean >= 0.0) and np.all(mean <= 1.0)


def test_saliency_stats_shape_mismatch_raises(rng):
    with pytest.raises(ValueError, match="shape"):
        evaluate.saliency_stats([np.ones((2, 2)), np.ones((3, 3))])
    with pytest.raises(ValueError, match="no valid targets"):
        evaluate.saliency_stats([])


# ---------------------------------------------------------------- mask mass


def test_mask_mass_full_overlap():
    q = np.array([0.0, 0.6, 0.4, 0.0])
    footprint = np.array([False, True, True, False])
    assert evaluate.mask_mass(q, footprint) == pytest.approx(1.0)


def test_mask_mass_uniform_is_fraction():
    q = np.full(10, 0.1)
    footprint = np.zeros(10, dtype=bool)
    footprint[:3] = True
    assert evaluate.mask_mass(q, footprint) == pytest.approx(0.3)


def test_mask_mass_matches_per_cell_sum(rng):
    for _ in range(20):
        q = rng.uniform(0.0, 1.0, size=16)
        q /= q.sum()
        footprint = rng.uniform(size=16) < 0.4
        if not footprint.any():
            footprint[0] = True
        expected = sum(q[i] for i in range(16) if footprint[i])
        assert evaluate.mask_mass(q, footprint) == pytest.approx(expected, abs=1e-12)


def test_mask_mass_empty_footprint_raises():
    with pytest.raises(ValueError, match="empty"):
        evaluate.mask_mass(np.ones(4) / 4, np.zeros(4, dtype=bool))


def test_mask_mass_shape_mismatch_raises():
    with pytest.raises(ValueError, match="differ"):
        evaluate.mask_mass(np.ones(4) / 4, np.zeros(5, dtype=bool))


# ---------------------------------------------------------------- end to end


def _init_run(tiny_corpus, mode="baseline"):
    cfg = config.default_config()
    cfg = replace(cfg, train=replace(cfg.train, mode=mode, seed=3))
    params = model.init_params(cfg.model, make_rng(3))
    return cfg, params


def test_embed_entries_layouts(tiny_corpus):
    cfg, params = _init_run(tiny_corpus)
    samples = tiny_corpus.by_split("eval")
    entries = [(s.id, s.tokens, s.image) for s in samples]
    results = evaluate.embed_entries(params, cfg, entries, apply_sdr=False)
    assert set(results) == {s.id for s in samples}
    for s in samples:
        res = results[s.id]
        assert res.emb.shape == (cfg.model.d_model,)
        assert np.all(np.isfinite(res.emb))
        if s.flavor == "t2i":
            assert res.q_map is None
        else:
            assert res.q_map.shape == (cfg.model.n_patches,)
            assert res.q_map.sum() == pytest.approx(1.0)
        assert res.row.sum() == pytest.approx(1.0)


def test_evaluate_checkpoint_report_schema(tiny_corpus):
    cfg, params = _init_run(tiny_corpus, mode="full")
    report = evaluate.evaluate_checkpoint(params, cfg, tiny_corpus)
    assert sorted(report) == [
        "balance", "config", "mean_kl_to_target", "mean_mask_mass", "p_at_1", "seed",
    ]
    assert 0.0 <= report["p_at_1"] <= 1.0
    assert report["mean_kl_to_target"] >= 0.0
    assert 0.0 <= report["mean_mask_mass"] <= 1.0
    assert report["seed"] == 3
    assert report["config"]["train.mode"] == "full"
    bal = report["balance"]
    assert bal["distance"] == pytest.approx(abs(bal["mu_img"] - bal["mu_text"]))


def test_evaluate_checkpoint_unknown_split_raises(tiny_corpus):
    cfg, params = _init_run(tiny_corpus)
    with pytest.raises(ValueError, match="nope"):
        evaluate.evaluate_checkpoint(params, cfg, tiny_corpus, split="nope")


def test_write_report_round_trip(tmp_path):
    report = {"b": 1, "a": {"x": 0.5}}
    path = tmp_path / "report.json"
    evaluate.write_report(report, path)
    text = path.read_text()
    assert text.endswith("\n")
    assert json.loads(text) == report
    # keys come out sorted so reports diff cleanly
    assert text.index('"a"') < text.index('"b"')
