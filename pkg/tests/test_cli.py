import json

import numpy as np
import pytest

from pointmut.cli import EXIT_NUMERICAL, EXIT_OK, EXIT_USAGE, cli_main, parse_args, read_config_file
from pointmut.io import load_generator, read_csv, read_trajectories
from pointmut.state_space import StateSpace


def run(tmp_path, *argv, sub="out"):
    return cli_main([*argv, "--out-dir", str(tmp_path / sub)])


def test_help_and_version(capsys):
    assert cli_main(["--help"]) == EXIT_OK
    assert cli_main(["--version"]) == EXIT_OK
    assert "pointmut" in capsys.readouterr().out


@pytest.mark.parametrize("argv", [[], ["bogus"], ["sample", "--no-such-flag"], ["sample", "--t", "abc"],
                                  ["sample", "--expm-method", "pade"], ["fit"]])
def test_usage_errors(tmp_path, argv):
    assert cli_main(argv) == EXIT_USAGE


def test_negative_t_and_bad_sequence(tmp_path):
    assert run(tmp_path, "sample", "--t", "-1") == EXIT_USAGE
    assert run(tmp_path, "sample", "--x", "AXA") == EXIT_USAGE


def test_sample_zero_time_echoes_input(tmp_path, capsys):
    assert run(tmp_path, "sample", "--x", "GAT", "--t", "0", "--n", "2") == EXIT_OK
    assert capsys.readouterr().out.split() == ["GAT", "GAT"]


def test_gamma_zero_guide_matches_sample(tmp_path):
    args = ["--x", "CCA", "--t", "2", "--n", "5", "--seed", "4"]
    assert run(tmp_path, "sample", *args, sub="a") == EXIT_OK
    assert run(tmp_path, "guide", *args, "--gamma", "0", sub="b") == EXIT_OK
    a = (tmp_path / "a" / "samples.jsonl").read_bytes()
    assert a == (tmp_path / "b" / "samples.jsonl").read_bytes()
    header, trajs = read_trajectories(tmp_path / "a" / "samples.jsonl", StateSpace.codons())
    assert header["seed"] == 4 and len(trajs) == 5


def test_fixed_steps(tmp_path):
    assert run(tmp_path, "sample", "--fixed-steps", "2", "--mask", "0", "--n", "3") == EXIT_OK
    lines = (tmp_path / "out" / "samples.jsonl").read_text().splitlines()
    ends = [json.loads(l)["end"] for l in lines[1:]]
    assert all(e[1:] == "AA" for e in ends)


def test_config_file_and_env_layering(tmp_path, monkeypatch):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# comment\nseed = 11\nmax-epochs = 7\n")
    assert read_config_file(cfg) == {"seed": "11", "max_epochs": "7"}
    args = parse_args(["sweep", "--config", str(cfg)])
    assert args.seed == 11 and args.max_epochs == 7
    monkeypatch.setenv("POINTMUT_SEED", "12")
    assert parse_args(["sweep", "--config", str(cfg)]).seed == 12
    assert parse_args(["sweep", "--config", str(cfg), "--seed", "13"]).seed == 13
    monkeypatch.setenv("POINTMUT_EXPM_METHOD", "bogus")
    assert cli_main(["sweep"]) == EXIT_USAGE


def test_missing_config_file(tmp_path):
    assert cli_main(["sweep", "--config", str(tmp_path / "none.cfg")]) == EXIT_USAGE


def test_pipeline(tmp_path, capsys):
    out = tmp_path / "out"
    assert run(tmp_path, "gen-truth", "--epsilon", "1", "--seed", "3") == EXIT_OK
    truth = out / "truth.json"
    assert load_generator(truth).space == StateSpace.codons()
    assert run(tmp_path, "gen-data", "--truth", str(truth), "--samples", "400") == EXIT_OK
    assert run(tmp_path, "fit", "--data", str(out / "dataset.jsonl"), "--truth", str(truth),
               "--max-epochs", "3") == EXIT_OK
    fitted = out / "model.json"
    assert run(tmp_path, "eval-curves", "--truth", str(truth), "--model", str(fitted)) == EXIT_OK
    assert len(read_csv(out / "curves.csv")[1]) == 30
    assert run(tmp_path, "jacobian", "--model", str(fitted), "--x", "ACG") == EXIT_OK
    assert run(tmp_path, "entropy", "--model", str(fitted), "--x", "ACG", "--t", "0.5") == EXIT_OK
    capsys.readouterr()
    assert run(tmp_path, "score", "--model", str(truth), "--baseline", str(fitted),
               "--x", "ACG", "--y", "ACT", "--t", "0.1") == EXIT_OK
    assert np.isfinite(float(capsys.readouterr().out))
    assert run(tmp_path, "jacobian", "--model", str(truth), "--x", "ACG") == EXIT_USAGE
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["command"] == "score" and "score.json" in manifest["artifacts"]


def test_divergent_fit_exits_numerical(tmp_path):
    out = tmp_path / "out"
    assert run(tmp_path, "gen-truth") == EXIT_OK
    assert run(tmp_path, "gen-data", "--truth", str(out / "truth.json"), "--samples", "200") == EXIT_OK
    assert run(tmp_path, "fit", "--data", str(out / "dataset.jsonl"), "--lr", "1e300",
               "--max-epochs", "5") == EXIT_NUMERICAL


def test_tree_sim(tmp_path):
    assert run(tmp_path, "tree-sim", "--star", "20", "--guided") == EXIT_OK
    _, rows = read_csv(tmp_path / "out" / "tree_nodes.csv")
    assert sum(r["is_leaf"] == "True" for r in rows) == 20


def test_sweep_is_byte_identical(tmp_path):
    argv = ["sweep", "--epsilons", "0,1", "--replicates", "1", "--samples", "300", "--max-epochs", "3",
            "--seed", "5"]
    assert run(tmp_path, *argv, sub="a") == EXIT_OK
    assert run(tmp_path, *argv, "--threads", "2", sub="b") == EXIT_OK
    a, b = (tmp_path / "a" / "sweep.csv").read_bytes(), (tmp_path / "b" / "sweep.csv").read_bytes()
    assert a == b
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert manifest["artifacts"] == ["sweep.csv"] and manifest["seeds"]["master"] == 5
