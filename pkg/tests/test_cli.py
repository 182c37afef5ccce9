import json
from pathlib import Path

import numpy as np
import pytest

from salemb import cli, fileio, train


def _tree_bytes(root: Path) -> dict[str, bytes]:
    return {
        str(p.relative_to(root)): p.read_bytes()
        for p in sorted(root.rglob("*")) if p.is_file()
    }


@pytest.fixture(scope="session")
def cli_workspace(tmp_path_factory):
    """Micro corpus plus one trained full-mode run, shared by CLI tests."""
    root = tmp_path_factory.mktemp("cliws")
    corpus = root / "corpus"
    assert cli.main([
        "gen-data", "--out", str(corpus), "--seed", "5",
        "--train", "8", "--eval", "6", "--pool", "4",
        "--set", "data.bank_per_class=2",
    ]) == 0
    assert cli.main(["build-saliency", "--corpus", str(corpus)]) == 0
    run = root / "run_full"
    assert cli.main([
        "train", "--corpus", str(corpus), "--out", str(run),
        "--mode", "full", "--steps", "3", "--batch-size", "4", "--seed", "5",
    ]) == 0
    return root


# ---------------------------------------------------------------- arg errors


def test_unknown_flag_exits_1(tmp_path):
    assert cli.main(["gen-data", "--out", str(tmp_path / "c"), "--bogus"]) == 1


def test_unknown_subcommand_exits_1():
    assert cli.main(["frobnicate"]) == 1


def test_missing_required_flag_exits_1():
    assert cli.main(["train", "--out", "somewhere"]) == 1


def test_bad_set_pair_exits_1(tmp_path, capsys):
    assert cli.main(["gen-data", "--out", str(tmp_path / "c"), "--set", "data.seed"]) == 1
    assert "key=value" in capsys.readouterr().err


def test_unknown_config_key_exits_1(tmp_path, capsys):
    assert cli.main(["gen-data", "--out", str(tmp_path / "c"), "--set", "bogus.key=1"]) == 1
    assert "bogus.key" in capsys.readouterr().err


def test_eval_missing_checkpoint_exits_1(cli_workspace, capsys):
    missing = cli_workspace / "nope.ckpt"
    rc = cli.main([
        "eval", "--ckpt", str(missing),
        "--corpus", str(cli_workspace / "corpus"), "--out", str(cli_workspace / "o"),
    ])
    assert rc == 1
    assert str(missing) in capsys.readouterr().err


def test_train_without_targets_exits_1(tmp_path, capsys):
    corpus = tmp_path / "corpus"
    assert cli.main([
        "gen-data", "--out", str(corpus), "--seed", "2",
        "--train", "4", "--eval", "2", "--pool", "4", "--set", "data.bank_per_class=2",
    ]) == 0
    rc = cli.main([
        "train", "--corpus", str(corpus), "--out", str(tmp_path / "run"),
        "--mode", "sga", "--steps", "1", "--batch-size", "4",
    ])
    assert rc == 1
    assert "build-saliency" in capsys.readouterr().err


# ---------------------------------------------------------------- config


def test_resolved_config_goes_to_stderr(tmp_path, capsys):
    cli.main([
        "gen-data", "--out", str(tmp_path / "c"), "--seed", "9",
        "--train", "2", "--eval", "2", "--pool", "4", "--set", "data.bank_per_class=2",
    ])
    err = capsys.readouterr().err
    assert "# resolved config" in err
    assert "data.seed = 9" in err


def test_named_flag_beats_config_file(tmp_path):
    conf = tmp_path / "conf.txt"
    conf.write_text("data.seed = 1\ndata.n_train = 2\ndata.n_eval = 2\n"
                    "data.pool_size = 4\ndata.bank_per_class = 2\n")
    a = tmp_path / "a"
    b = tmp_path / "b"
    assert cli.main(["gen-data", "--out", str(a), "--config", str(conf), "--seed", "2"]) == 0
    assert cli.main(["gen-data", "--out", str(b), "--seed", "2", "--train", "2",
                     "--eval", "2", "--pool", "4", "--set", "data.bank_per_class=2"]) == 0
    assert _tree_bytes(a) == _tree_bytes(b)


def test_set_beats_config_file(tmp_path):
    conf = tmp_path / "conf.txt"
    conf.write_text("data.n_train = 2\ndata.n_eval = 2\ndata.pool_size = 4\n"
                    "data.bank_per_class = 2\n")
    out = tmp_path / "c"
    assert cli.main(["gen-data", "--out", str(out), "--config", str(conf),
                     "--set", "data.n_train=4"]) == 0
    ids = [json.loads(l)["id"] for l in (out / "manifest.jsonl").read_text().splitlines()]
    assert sum(1 for sid in ids if sid.startswith("train_")) == 4


# ---------------------------------------------------------------- pipeline


def test_gen_data_deterministic_trees(tmp_path):
    args = ["--seed", "7", "--train", "4", "--eval", "2", "--pool", "4",
            "--set", "data.bank_per_class=2"]
    a = tmp_path / "a"
    b = tmp_path / "b"
    assert cli.main(["gen-data", "--out", str(a)] + args) == 0
    assert cli.main(["gen-data", "--out", str(b)] + args) == 0
    assert _tree_bytes(a) == _tree_bytes(b)


def test_train_writes_run_artifacts(cli_workspace):
    run = cli_workspace / "run_full"
    assert (run / "checkpoint.ckpt").exists()
    assert (run / "config.txt").exists()
    lines = (run / "metrics.jsonl").read_text().splitlines()
    assert len(lines) == 3
    assert {"L_Con", "L_SG", "L_total", "grad_norm", "step"} == set(json.loads(lines[0]))


def test_eval_writes_report(cli_workspace, capsys):
    out = cli_workspace / "eval_out"
    rc = cli.main([
        "eval", "--ckpt", str(cli_workspace / "run_full" / "checkpoint.ckpt"),
        "--corpus", str(cli_workspace / "corpus"), "--out", str(out),
    ])
    assert rc == 0
    report = json.loads((out / "report.json").read_text())
    assert 0.0 <= report["p_at_1"] <= 1.0
    assert report["config"]["train.mode"] == "full"
    line = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert line["p_at_1"] == report["p_at_1"]


def test_eval_against_baseline_report(cli_workspace, capsys):
    base_out = cli_workspace / "eval_base"
    if not (base_out / "report.json").exists():
        assert cli.main([
            "eval", "--ckpt", str(cli_workspace / "run_full" / "checkpoint.ckpt"),
            "--corpus", str(cli_workspace / "corpus"), "--out", str(base_out),
        ]) == 0
    capsys.readouterr()
    out = cli_workspace / "eval_vs"
    rc = cli.main([
        "eval", "--ckpt", str(cli_workspace / "run_full" / "checkpoint.ckpt"),
        "--corpus", str(cli_workspace / "corpus"), "--out", str(out),
        "--baseline-report", str(base_out / "report.json"),
    ])
    assert rc == 0
    line = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    # a report compared with itself shows no gap and no improvement
    assert line["p_at_1_gap"] == pytest.approx(0.0)
    assert line["balance_improvement"] == pytest.approx(0.0)


def test_embed_exports_matching_ids(cli_workspace):
    out = cli_workspace / "embed_out"
    rc = cli.main([
        "embed", "--ckpt", str(cli_workspace / "run_full" / "checkpoint.ckpt"),
        "--corpus", str(cli_workspace / "corpus"), "--out", str(out),
    ])
    assert rc == 0
    ids = json.loads((out / "query_ids.json").read_text())
    emb = fileio.read_tensor(out / "query_embeddings.tnsr")
    assert emb.shape[0] == len(ids) == 6
    cand = fileio.read_tensor(out / "candidate_embeddings.tnsr")
    cand_ids = json.loads((out / "candidate_ids.json").read_text())
    assert cand.shape[0] == len(cand_ids)
    assert np.all(np.isfinite(emb)) and np.all(np.isfinite(cand))


def test_visualize_writes_heatmap_pairs(cli_workspace):
    out = cli_workspace / "viz_out"
    rc = cli.main([
        "visualize", "--ckpt", str(cli_workspace / "run_full" / "checkpoint.ckpt"),
        "--corpus", str(cli_workspace / "corpus"), "--out", str(out),
        "--limit", "2", "--factor", "4",
    ])
    assert rc == 0
    pairs = sorted(out.glob("*_pair.pgm"))
    assert len(pairs) == 2
    img = fileio.read_pgm(pairs[0])
    grid = 8 * 4
    assert img.shape == (grid, grid * 2 + 4)


def test_visualize_unknown_id_exits_1(cli_workspace, capsys):
    rc = cli.main([
        "visualize", "--ckpt", str(cli_workspace / "run_full" / "checkpoint.ckpt"),
        "--corpus", str(cli_workspace / "corpus"), "--out", str(cli_workspace / "viz2"),
        "--ids", "no-such-sample",
    ])
    assert rc == 1
    assert "no-such-sample" in capsys.readouterr().err


def test_stats_writes_aggregate_maps(cli_workspace):
    out = cli_workspace / "stats_out"
    rc = cli.main(["stats", "--corpus", str(cli_workspace / "corpus"), "--out", str(out)])
    assert rc == 0
    mean = fileio.read_pgm(out / "mean_heatmap.pgm")
    hot = fileio.read_pgm(out / "hotspot_mask.pgm")
    assert mean.shape == hot.shape == (64, 64)
    assert set(np.unique(hot)) <= {0, 255}


def test_train_resume_continues(cli_workspace, capsys):
    corpus = cli_workspace / "corpus"
    run = cli_workspace / "run_resume"
    assert cli.main([
        "train", "--corpus", str(corpus), "--out", str(run),
        "--mode", "baseline", "--steps", "2", "--batch-size", "4", "--seed", "8",
    ]) == 0
    capsys.readouterr()
    assert cli.main([
        "train", "--corpus", str(corpus), "--out", str(run),
        "--mode", "baseline", "--steps", "4", "--batch-size", "4", "--seed", "8",
        "--resume", str(run / "checkpoint.ckpt"),
    ]) == 0
    steps = [json.loads(l)["step"] for l in (run / "metrics.jsonl").read_text().splitlines()]
    assert steps == [1, 2, 3, 4]


# ---------------------------------------------------------------- grad-check


def test_grad_check_exit_reflects_tolerance(monkeypatch, capsys):
    monkeypatch.setattr(
        train, "verify_gradients",
        lambda cfg, seed=0: {"combos": {"stub": 3e-5}, "max_rel_err": 3e-5},
    )
    assert cli.main(["grad-check", "--seed", "1"]) == 0
    assert "3.000e-05" in capsys.readouterr().out

    monkeypatch.setattr(
        train, "verify_gradients",
        lambda cfg, seed=0: {"combos": {"stub": 2e-3}, "max_rel_err": 2e-3},
    )
    assert cli.main(["grad-check", "--seed", "1"]) == 1
    assert cli.main(["grad-check", "--seed", "1", "--tolerance", "0.01"]) == 0


# ---------------------------------------------------------------- determinism


def test_cli_runs_reproduce_bitwise(tmp_path):
    corpus = tmp_path / "corpus"
    assert cli.main([
        "gen-data", "--out", str(corpus), "--seed", "3",
        "--train", "8", "--eval", "4", "--pool", "4", "--set", "data.bank_per_class=2",
    ]) == 0
    assert cli.main(["build-saliency", "--corpus", str(corpus)]) == 0
    blobs = []
    for name in ("r1", "r2"):
        run = tmp_path / name
        assert cli.main([
            "train", "--corpus", str(corpus), "--out", str(run),
            "--mode", "full", "--steps", "3", "--batch-size", "4", "--seed", "3",
        ]) == 0
        assert cli.main([
            "eval", "--ckpt", str(run / "checkpoint.ckpt"),
            "--corpus", str(corpus), "--out", str(run),
        ]) == 0
        blobs.append((
            (run / "checkpoint.ckpt").read_bytes(),
            (run / "report.json").read_bytes(),
        ))
    assert blobs[0] == blobs[1]
