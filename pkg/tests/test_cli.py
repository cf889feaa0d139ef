import json
from pathlib import Path

import numpy as np
import pytest

from conftest import small_config
from dgmrec import formats
from dgmrec.cli import RunManifest, main, parse_grid, read_manifest
from dgmrec.config import ConfigError, dump_config

SPEC = """num_users = 60
num_items = 40
num_modalities = 2
z_dim = 4
s_dim = 2
modality_dims = 12,8
interactions_per_user = 10
noise = 0.1
seed = 0
"""


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "spec.txt").write_text(SPEC)
    (root / "train.txt").write_text(dump_config(small_config(max_epochs=2)))
    assert main(["gen-data", "--spec", str(root / "spec.txt"), "--out", str(root / "data")]) == 0
    return root


def _records(path):
    return [json.loads(line) for line in Path(path).read_text().splitlines()]


def test_gen_data_round_trip(workdir, tmp_path):
    data = workdir / "data"
    bundle = formats.load_bundle(data)
    formats.save_bundle(tmp_path, bundle)
    for name in formats.dataset_files(2):
        assert (tmp_path / name).read_bytes() == (data / name).read_bytes(), name


def test_gen_data_same_seed_byte_identical(workdir, tmp_path):
    assert main(["gen-data", "--spec", str(workdir / "spec.txt"), "--out", str(tmp_path)]) == 0
    for name in formats.dataset_files(2):
        assert (tmp_path / name).read_bytes() == (workdir / "data" / name).read_bytes(), name


def test_gen_data_missing_field_named(tmp_path, capsys):
    (tmp_path / "bad.txt").write_text(SPEC.replace("z_dim = 4\n", ""))
    assert main(["gen-data", "--spec", str(tmp_path / "bad.txt"), "--out", str(tmp_path / "o")]) == 1
    assert "z_dim" in capsys.readouterr().err


def test_usage_and_data_exit_codes(workdir, tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["train"])
    assert exc.value.code == 1
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 1
    code = main(["train", "--config", str(workdir / "train.txt"), "--data", str(tmp_path / "none"),
                 "--out", str(tmp_path / "run")])
    assert code == 2


def test_config_data_mismatch(workdir, tmp_path):
    cfg = small_config(modality_dims=(3, 3))
    (tmp_path / "c.txt").write_text(dump_config(cfg))
    code = main(["train", "--config", str(tmp_path / "c.txt"), "--data", str(workdir / "data"),
                 "--out", str(tmp_path / "run")])
    assert code == 2


@pytest.fixture(scope="module")
def trained(workdir):
    run = workdir / "run"
    code = main(["train", "--config", str(workdir / "train.txt"), "--data", str(workdir / "data"),
                 "--out", str(run), "--max-epochs", "1"])
    assert code == 0
    return run


def test_train_outputs(trained):
    assert len(_records(trained / "epochs.jsonl")) == 1
    manifest = read_manifest(trained / "manifest.txt")
    on_disk = {p.name for p in trained.iterdir() if p.is_file()} - {"manifest.txt"}
    assert set(manifest.outputs) == on_disk
    assert manifest.seed == 0 and manifest.command == "train dgmrec"
    metrics = _records(trained / "metrics.jsonl")
    assert {r["split"] for r in metrics} == {"valid", "test"}
    assert all(set(r) == {"metric", "K", "split", "bucket", "value", "seed", "config_hash"} for r in metrics)


def test_eval_records(workdir, trained):
    assert main(["eval", "--run", str(trained), "--data", str(workdir / "data"), "--ks", "10,20",
                 "--retrieval", "--diagnostics"]) == 0
    recs = _records(trained / "eval" / "eval.jsonl")
    for split in ("valid", "test"):
        overall = [r for r in recs if r["split"] == split and r["bucket"] == "all"]
        assert sorted((r["metric"], r["K"]) for r in overall) == [
            ("ndcg", 10), ("ndcg", 20), ("recall", 10), ("recall", 20)]
    hits = [r for r in recs if r["split"] == "retrieval"]
    assert {r["metric"] for r in hits} == {"hit_generated", "hit_nn"} and {r["K"] for r in hits} == {10, 20}
    assert not any(r["metric"] == "hit_nn" and r["bucket"] == "missing=2" for r in hits)
    assert {r["metric"] for r in recs if r["split"] == "diagnostics"} >= {"cos_general_specific", "cos_general_general"}
    assert {r["bucket"] for r in recs if r["split"] == "test"} >= {"all", "missing=0"}
    assert read_manifest(trained / "eval" / "manifest.txt").outputs == ["eval.jsonl"]


def test_eval_rejects_changed_config(workdir, trained, tmp_path):
    import shutil

    run = tmp_path / "run"
    shutil.copytree(trained, run)
    (run / "config.txt").write_text(dump_config(small_config(max_epochs=1, lr=0.1)))
    assert main(["eval", "--run", str(run), "--data", str(workdir / "data")]) == 1


def test_untrained_model_near_random_baseline(tmp_path):
    spec = SPEC.replace("num_users = 60", "num_users = 300").replace("num_items = 40", "num_items = 200")
    (tmp_path / "spec.txt").write_text(spec)
    assert main(["gen-data", "--spec", str(tmp_path / "spec.txt"), "--out", str(tmp_path / "data")]) == 0
    # one epoch with a vanishing learning rate leaves the model at its initialisation
    (tmp_path / "c.txt").write_text(dump_config(small_config(max_epochs=1, lr=1e-12, q_lr=1e-12, eval_ks=(20,))))
    assert main(["train", "--config", str(tmp_path / "c.txt"), "--data", str(tmp_path / "data"),
                 "--out", str(tmp_path / "run")]) == 0
    assert main(["eval", "--run", str(tmp_path / "run"), "--data", str(tmp_path / "data"), "--ks", "20"]) == 0
    rec = [r for r in _records(tmp_path / "run" / "eval" / "eval.jsonl")
           if r["metric"] == "recall" and r["split"] == "test" and r["bucket"] == "all"][0]
    baseline = 20 / 200
    assert baseline / 3 <= rec["value"] <= 3 * baseline


@pytest.mark.parametrize("flags", [["--ablation", "no_generation"], ["--baseline", "lightgcn"]])
def test_train_variants(workdir, tmp_path, flags):
    assert main(["train", "--config", str(workdir / "train.txt"), "--data", str(workdir / "data"),
                 "--out", str(tmp_path), "--max-epochs", "1", *flags]) == 0
    expected = "lightgcn" if "lightgcn" in flags else "dgmrec"
    assert f"kind = {expected}" in (tmp_path / "checkpoint.txt").read_text()
    if "no_generation" in flags:
        assert "ablation = no_generation" in (tmp_path / "config.txt").read_text()


def test_parse_grid():
    cells = parse_grid("alpha = 0.0, 0.2\nlambda1 = 1.0,0.1\n")
    assert len(cells) == 4 and {"alpha": 0.0, "lambda1": 1.0} in cells
    with pytest.raises(ConfigError):
        parse_grid("")
    with pytest.raises(ConfigError):
        parse_grid("alpha =\n")
    with pytest.raises(ConfigError):
        parse_grid("beta = 1\n")


def test_sweep_single_cell_matches_train(workdir, tmp_path):
    (tmp_path / "grid.txt").write_text("alpha = 0.0\n")
    assert main(["sweep", "--config", str(workdir / "train.txt"), "--grid", str(tmp_path / "grid.txt"),
                 "--data", str(workdir / "data"), "--out", str(tmp_path / "sw"), "--max-epochs", "2"]) == 0
    cfg_text = (workdir / "train.txt").read_text().replace("alpha = 0.6", "alpha = 0.0")
    (tmp_path / "c.txt").write_text(cfg_text)
    assert main(["train", "--config", str(tmp_path / "c.txt"), "--data", str(workdir / "data"),
                 "--out", str(tmp_path / "run")]) == 0
    train_test = {(r["metric"], r["K"]): r["value"] for r in _records(tmp_path / "run" / "metrics.jsonl")
                  if r["split"] == "test"}
    cell = {(r["metric"], r["K"]): r["value"] for r in _records(tmp_path / "sw" / "cell_000.jsonl")
            if r["split"] == "test" and r["bucket"] == "all"}
    assert cell == train_test
    assert all(r["cell_alpha"] == 0.0 for r in _records(tmp_path / "sw" / "cell_000.jsonl"))
    manifest = read_manifest(tmp_path / "sw" / "manifest.txt")
    assert set(manifest.outputs) == {"cell_000.jsonl", "summary.tsv"}


def test_sweep_missing_ratio_cells(workdir, tmp_path):
    (tmp_path / "grid.txt").write_text("missing_ratio = 0.0, 0.4\n")
    assert main(["sweep", "--config", str(workdir / "train.txt"), "--grid", str(tmp_path / "grid.txt"),
                 "--data", str(workdir / "data"), "--out", str(tmp_path / "sw"), "--max-epochs", "1"]) == 0
    lines = (tmp_path / "sw" / "summary.tsv").read_text().splitlines()
    assert len(lines) == 3 and lines[0].startswith("cell\tmissing_ratio")
    zero = {r["bucket"] for r in _records(tmp_path / "sw" / "cell_000.jsonl") if r["split"] == "test"}
    assert zero == {"all", "missing=0"}


def test_sweep_empty_grid_is_usage_error(workdir, tmp_path):
    (tmp_path / "grid.txt").write_text("# nothing\n")
    assert main(["sweep", "--config", str(workdir / "train.txt"), "--grid", str(tmp_path / "grid.txt"),
                 "--data", str(workdir / "data"), "--out", str(tmp_path / "sw")]) == 1


def test_manifest_round_trip():
    m = RunManifest("abc", 3, "train dgmrec", ["a", "b"], ["x"], "t0", "t1")
    assert RunManifest.parse(m.dump()) == m


def test_gradcheck_command(capsys):
    assert main(["gradcheck"]) == 0
    assert "PASS" in capsys.readouterr().out
