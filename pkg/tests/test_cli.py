import csv
import filecmp
import shutil
from pathlib import Path

import pytest
import yaml

from imconnect import cli

TINY = {
    "task": {"vocab_size": 30, "seq_len": 8, "train_size": 60, "eval_size": 30},
    "model": {"vocab_size": 30, "d_model": 8, "n_heads": 2, "n_layers": 2, "ffn_dim": 16, "max_seq_len": 8},
    "euler": {"iterations": 2},
    "hyper": {"epochs": 1},
    "perturbations": [{"kind": "sign_gradient_embedding", "epsilon": 0.5}, {"kind": "token_swap", "swap_fraction": 0.25}],
}


def write_cfg(tmp_path, data, name="cfg.yaml"):
    path = tmp_path / name
    path.write_text(yaml.safe_dump(data))
    return str(path)


def read_csv(path):
    with open(path) as f:
        return list(csv.DictReader(f))


def rerun_from_manifest_is_identical(out: Path, command: str):
    snap = out.parent / (out.name + "-snapshot")
    shutil.copytree(out, snap)
    assert cli.main([command, "--config", str(out / "manifest.yaml")]) == 0
    names = sorted(p.name for p in snap.iterdir())
    assert names == sorted(p.name for p in out.iterdir())
    match, mismatch, errors = filecmp.cmpfiles(snap, out, names, shallow=False)
    assert mismatch == [] and errors == []


# -- stability ----------------------------------------------------------------------------------


def test_stability_defaults(tmp_path):
    out = tmp_path / "st"
    assert cli.main(["stability", "--out", str(out)]) == 0
    implicit = read_csv(out / "region_implicit.csv")
    assert len(implicit) == 2500 and {r["classification"] for r in implicit} == {"converged"}
    assert read_csv(out / "mismatches.csv") == []
    traj = read_csv(out / "trajectories.csv")
    assert {r["method"] for r in traj} == {"explicit", "implicit"}
    rerun_from_manifest_is_identical(out, "stability")


def test_stability_diverging_cell(tmp_path):
    cfg = write_cfg(tmp_path, {"lambdas": [-1.0], "gammas": [3.0], "steps": 100})
    assert cli.main(["stability", "--config", cfg, "--out", str(tmp_path / "o")]) == 0
    assert read_csv(tmp_path / "o" / "region_explicit.csv") == [{"lambda": "-1.0", "gamma": "3.0", "classification": "diverged"}]
    assert read_csv(tmp_path / "o" / "region_implicit.csv")[0]["classification"] == "converged"


def test_stability_mismatch_exit_code(tmp_path, capsys):
    # n=200 at threshold 1e-6 leaves slowly converging cells outside the 10/n band
    cfg = write_cfg(tmp_path, {"steps": 200, "threshold": 1e-6})
    assert cli.main(["stability", "--config", cfg, "--out", str(tmp_path / "o")]) == 1
    assert len(read_csv(tmp_path / "o" / "mismatches.csv")) > 0
    assert "disagree" in capsys.readouterr().err


@pytest.mark.parametrize("bad", [{"lambdas": []}, {"gammas": {"lo": 0.1, "hi": 1.0, "n": 0}}, {"lambdas": [0.5]},
                                 {"steps": 0}, {"nonsense": 1}])
def test_stability_usage_errors(tmp_path, bad):
    cfg = write_cfg(tmp_path, bad)
    assert cli.main(["stability", "--config", cfg, "--out", str(tmp_path / "o")]) == 2


def test_usage_errors_general(tmp_path):
    assert cli.main([]) == 2
    assert cli.main(["bogus"]) == 2
    assert cli.main(["flops", "--config", str(tmp_path / "missing.yaml")]) == 2
    wrong = write_cfg(tmp_path, {"command": "stability"})
    assert cli.main(["flops", "--config", wrong, "--out", str(tmp_path / "o")]) == 2
    bad = tmp_path / "bad.yaml"
    bad.write_text("a: [1,\n")
    assert cli.main(["flops", "--config", str(bad)]) == 2


def test_json_config_and_env_default_out(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.OUT_ENV, str(tmp_path / "root"))
    (tmp_path / "c.json").write_text('{"iterations": [3]}')
    assert cli.main(["flops", "--config", str(tmp_path / "c.json")]) == 0
    rows = read_csv(tmp_path / "root" / "flops" / "flops.csv")
    assert rows[-1]["wiring"] == "implicit-T3"


# -- flops ------------------------------------------------------------------------------------------


def test_flops_table(tmp_path):
    out = tmp_path / "fl"
    assert cli.main(["flops", "--out", str(out)]) == 0
    rows = {r["wiring"]: r for r in read_csv(out / "flops.csv")}
    assert [rows[f"implicit-T{T}"]["flops"] for T in (1, 5, 10, 15)] == ["2", "6", "11", "16"]
    assert rows["layers(4-6)"]["flops"] == "9/4"
    assert len({r["params"] for r in rows.values()}) == 1
    rerun_from_manifest_is_identical(out, "flops")


# -- training commands ----------------------------------------------------------------------------


def test_train_eval_subsample_provenance_and_determinism(tmp_path):
    cfg = write_cfg(tmp_path, {**TINY, "train_subset": 20, "subset_seed": 7, "checkpoint": True})
    out = tmp_path / "te"
    assert cli.main(["train-eval", "--config", cfg, "--out", str(out), "--seed", "3"]) == 0
    manifest = yaml.safe_load((out / "manifest.yaml").read_text())
    assert manifest["params"]["train_subset"] == 20 and manifest["params"]["subset_seed"] == 7
    assert manifest["seed"] == 3
    row = read_csv(out / "metrics.csv")[0]
    assert row["train_size"] == "20" and row["flops"] == "3"
    assert (out / "model.json").exists()
    rerun_from_manifest_is_identical(out, "train-eval")


def test_train_eval_oversized_subsample_is_usage_error(tmp_path):
    cfg = write_cfg(tmp_path, {**TINY, "train_subset": 61})
    assert cli.main(["train-eval", "--config", cfg, "--out", str(tmp_path / "o")]) == 2


def test_train_eval_divergence_exit_code(tmp_path):
    cfg = write_cfg(tmp_path, {**TINY, "hyper": {"epochs": 2, "lr": 1e300}, "wiring": "monotone"})
    assert cli.main(["train-eval", "--config", cfg, "--out", str(tmp_path / "o")]) == 3


def test_ablation_outputs(tmp_path):
    cfg = write_cfg(tmp_path, {**TINY, "placements": ["monotone", "layers(2-2)", "implicit"], "n_runs": 2})
    out = tmp_path / "ab"
    assert cli.main(["ablation", "--config", cfg, "--out", str(out), "--threads", "2"]) == 0
    cells = read_csv(out / "ablation_cells.csv")
    assert len(cells) == 6
    summary = read_csv(out / "ablation_summary.csv")
    assert [r["placement"] for r in summary] == ["monotone", "layers(2-2)", "implicit"]
    assert [r["flops"] for r in summary] == ["1", "2", "3"]
    assert len({r["params"] for r in summary}) == 1
    ranking = (out / "ranking.txt").read_text().splitlines()
    assert ranking[0].startswith("placements ranked") and len([l for l in ranking if l[:1].isdigit()]) == 3
    rerun_from_manifest_is_identical(out, "ablation")


def test_ablation_single_cell(tmp_path):
    cfg = write_cfg(tmp_path, {**TINY, "placements": ["monotone"], "n_runs": 1})
    assert cli.main(["ablation", "--config", cfg, "--out", str(tmp_path / "o")]) == 0
    assert len(read_csv(tmp_path / "o" / "ablation_cells.csv")) == 1


def test_twelve_layer_presets_resolve():
    m = cli.resolve("ablation", {"model": {"n_layers": 12}})
    names = [p["name"] for p in m["params"]["placements"]]
    assert names == ["monotone", "layers(1-3)", "layers(4-6)", "layers(7-9)", "layers(10-12)", "implicit"]


def test_tsweep_rows(tmp_path):
    cfg = write_cfg(tmp_path, {**TINY, "iterations": [1, 1, 3]})
    out = tmp_path / "ts"
    assert cli.main(["tsweep", "--config", cfg, "--out", str(out)]) == 0
    rows = read_csv(out / "tsweep.csv")
    assert [r["flops"] for r in rows] == ["2", "2", "4"]
    assert rows[0]["seed"] != rows[1]["seed"]
    single = write_cfg(tmp_path, {**TINY, "iterations": [5]}, "single.yaml")
    assert cli.main(["tsweep", "--config", single, "--out", str(tmp_path / "ts1")]) == 0
    assert len(read_csv(tmp_path / "ts1" / "tsweep.csv")) == 1


def test_manifest_round_trip_is_lossless(tmp_path):
    m = cli.resolve("train-eval", {**TINY, "train_subset": 10}, seed=4, out=str(tmp_path))
    cli.write_manifest(m, tmp_path)
    again = cli.resolve("train-eval", cli.load_config(tmp_path / "manifest.yaml"))
    assert again == m
