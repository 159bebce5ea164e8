import json
import os
import shutil

import numpy as np
import pytest

from lak import cli
from lak.data import VALUE_CATEGORIES, parse_arguments_tsv, parse_labels_tsv
from lak.knn import load_datastore
from lak.training import load_checkpoint

SMALL = "d = 16\nheads = 2\nepochs = 2\nfolds = 3\nk = 4\n"


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    path = tmp_path_factory.mktemp("data")
    assert run("synth", "--out-dir", path, "--size", 120, "--seed", 4) == 0
    return path


@pytest.fixture(scope="module")
def config(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "small.txt"
    path.write_text(SMALL)
    return path


@pytest.fixture(scope="module")
def trained(tmp_path_factory, data_dir, config):
    out = tmp_path_factory.mktemp("run")
    assert run("train", "--data-dir", data_dir, "--out-dir", out, "--config", config) == 0
    assert run("build-store", "--data-dir", data_dir, "--out-dir", out, "--config", config) == 0
    return out


def test_synth_writes_schema(data_dir):
    names = sorted(os.listdir(data_dir))
    assert names == ["arguments-training.tsv", "arguments-validation.tsv",
                     "labels-training.tsv", "labels-validation.tsv"]


def test_ingest_summary(data_dir, tmp_path, capsys):
    assert run("ingest", "--data-dir", data_dir, "--out-dir", tmp_path, "--split", "training") == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0] == "records\t96" and out[1] == "labeled\t96"
    assert sum(line.startswith("prevalence\t") for line in out) == 20


def test_ingest_without_labels(data_dir, tmp_path, capsys):
    shutil.copy(data_dir / "arguments-validation.tsv", tmp_path / "arguments-test.tsv")
    assert run("ingest", "--data-dir", tmp_path, "--out-dir", tmp_path / "o", "--split", "test") == 0
    out = capsys.readouterr().out.splitlines()
    assert out == ["records\t24", "labeled\t0"]


def test_ingest_malformed_row(tmp_path, capsys):
    (tmp_path / "arguments-test.tsv").write_text(
        "Argument ID\tConclusion\tStance\tPremise\nA1\tc\tagainst\tp\nA2\tc\tsideways\tp\n")
    assert run("ingest", "--data-dir", tmp_path, "--out-dir", tmp_path / "o", "--split", "test") == 1
    assert "row 3" in capsys.readouterr().err


def test_train_layout(trained):
    for sub in cli.RUN_SUBDIRS:
        assert os.path.isdir(trained / sub)
    ckpts = sorted(p for p in os.listdir(trained / "checkpoints") if p.endswith(".ckpt"))
    assert ckpts == ["fold-0.ckpt", "fold-1.ckpt", "fold-2.ckpt"]
    assert sorted(os.listdir(trained / "stores")) == ["fold-0.dstore", "fold-1.dstore", "fold-2.dstore"]
    resolved = (trained / "config.train.txt").read_text()
    assert "d = 16" in resolved and "folds = 3" in resolved and "lambda = 0.3" in resolved
    log = (trained / "logs" / "train-fold-0.tsv").read_text().splitlines()
    assert log[0].startswith("epoch\tbce\tcon\ttotal") and len(log) == 3


def test_store_matches_checkpoint(trained):
    ck = load_checkpoint(str(trained / "checkpoints" / "fold-1.ckpt"))
    store = load_datastore(str(trained / "stores" / "fold-1.dstore"), ck.config.d, ck.categories, ck.checksum)
    folds = (trained / "checkpoints" / "folds.tsv").read_text().splitlines()[1:]
    assert len(store) == sum(1 for line in folds if line.split("\t")[1] != "1")


def test_build_store_rerun_identical(trained, data_dir, config):
    before = (trained / "stores" / "fold-0.dstore").read_bytes()
    assert run("build-store", "--data-dir", data_dir, "--out-dir", trained, "--config", config) == 0
    assert (trained / "stores" / "fold-0.dstore").read_bytes() == before


def test_build_store_missing_checkpoint(trained, data_dir, config, tmp_path, capsys):
    out = tmp_path / "copy"
    shutil.copytree(trained, out)
    os.remove(out / "checkpoints" / "fold-2.ckpt")
    assert run("build-store", "--data-dir", data_dir, "--out-dir", out, "--config", config) == 1
    assert "fold-2.ckpt" in capsys.readouterr().err


def test_predict_and_evaluate(trained, data_dir, config, capsys):
    assert run("predict", "--data-dir", data_dir, "--out-dir", trained, "--config", config,
               "--split", "validation") == 0
    labels = parse_labels_tsv(str(trained / "predictions" / "labels-validation.tsv"))
    args = parse_arguments_tsv(str(data_dir / "arguments-validation.tsv"))
    assert list(labels) == args.ids
    probs = cli.read_probabilities(str(trained / "predictions" / "probabilities-validation.tsv"))
    assert probs[0] == args.ids and probs[2].shape == (24, 20)
    capsys.readouterr()
    assert run("evaluate", "--data-dir", data_dir, "--out-dir", trained, "--config", config,
               "--split", "validation", "--sweep") == 0
    assert capsys.readouterr().out.startswith("macro_precision\t")
    report = json.loads((trained / "reports" / "eval-validation.json").read_text())
    assert len(report["labels"]) == 20 and report["threshold"] == 0.5
    assert len((trained / "reports" / "sweep-validation.tsv").read_text().splitlines()) == 10
    assert run("evaluate", "--data-dir", data_dir, "--out-dir", trained, "--config", config,
               "--split", "validation", "--threshold", "0.9") == 0
    assert json.loads((trained / "reports" / "eval-validation.json").read_text())["threshold"] == 0.9


def test_predict_lambda_zero_is_model_only(trained, data_dir, config):
    from lak.data import load_dataset
    from lak.knn import KnnConfig
    from lak.training import predict_ensemble

    assert run("predict", "--data-dir", data_dir, "--out-dir", trained, "--config", config,
               "--split", "validation", "--lambda", 0) == 0
    _, _, probs = cli.read_probabilities(str(trained / "predictions" / "probabilities-validation.tsv"))
    ckpts = [load_checkpoint(str(trained / "checkpoints" / f"fold-{f}.ckpt")) for f in range(3)]
    ds = load_dataset(str(data_dir / "arguments-validation.tsv"))
    want = predict_ensemble(ckpts, None, ds, KnnConfig(blend=0.0))
    np.testing.assert_allclose(probs, want, atol=5e-9, rtol=0)


def test_predict_blend_after_average(trained, data_dir, config, tmp_path):
    out = tmp_path / "baa"
    shutil.copytree(trained, out)
    flags = ["--data-dir", data_dir, "--out-dir", out, "--config", config, "--blend-after-average"]
    assert run("build-store", *flags) == 0
    assert (out / "stores" / "full.dstore").exists()
    assert run("predict", *flags, "--split", "validation") == 0


def test_evaluate_mismatched_ids(data_dir, tmp_path, capsys):
    pred = tmp_path / "p.tsv"
    cli.write_probabilities(str(pred), ["nope"], VALUE_CATEGORIES, np.full((1, 20), 0.5))
    gold = tmp_path / "data"
    gold.mkdir()
    shutil.copy(data_dir / "arguments-validation.tsv", gold)
    shutil.copy(data_dir / "labels-validation.tsv", gold)
    assert run("evaluate", "--data-dir", gold, "--out-dir", tmp_path / "o", "--split", "validation",
               "--predictions", pred) == 1
    assert "'nope'" in capsys.readouterr().err


def test_train_reproducible(data_dir, config, tmp_path):
    for name in ("a", "b"):
        assert run("train", "--data-dir", data_dir, "--out-dir", tmp_path / name, "--config", config,
                   "--folds", 2, "--epochs", 1) == 0
    for f in range(2):
        a = (tmp_path / "a" / "checkpoints" / f"fold-{f}.ckpt").read_bytes()
        b = (tmp_path / "b" / "checkpoints" / f"fold-{f}.ckpt").read_bytes()
        assert a == b


def test_train_jobs_and_gamma_zero(data_dir, config, tmp_path):
    base = ["train", "--data-dir", data_dir, "--config", config, "--folds", 2, "--epochs", 1]
    assert run(*base, "--out-dir", tmp_path / "serial", "--gamma", 0) == 0
    assert run(*base, "--out-dir", tmp_path / "par", "--gamma", 0, "--jobs", 2) == 0
    for f in range(2):
        assert (tmp_path / "serial" / "checkpoints" / f"fold-{f}.ckpt").read_bytes() == \
            (tmp_path / "par" / "checkpoints" / f"fold-{f}.ckpt").read_bytes()
    ck = load_checkpoint(str(tmp_path / "serial" / "checkpoints" / "fold-0.ckpt"))
    assert ck.config.gamma == 0.0
    assert all(h["total"] == h["bce"] for h in ck.history)


def test_config_precedence(tmp_path, monkeypatch):
    path = tmp_path / "c.txt"
    path.write_text("lambda = 0.7\n# comment\nseed = 5\n")
    monkeypatch.setenv("LAK_SEED", "11")
    assert cli.resolve_config(None, {}).seed == 11
    assert cli.resolve_config(str(path), {}).seed == 5
    cfg = cli.resolve_config(str(path), {"seed": 9, "lam": None})
    assert cfg.seed == 9 and cfg.lam == 0.7


def test_unknown_config_key(tmp_path, data_dir, capsys):
    path = tmp_path / "c.txt"
    path.write_text("epochz = 3\n")
    assert run("train", "--data-dir", data_dir, "--out-dir", tmp_path / "o", "--config", path) == 1
    assert "epochz" in capsys.readouterr().err


def test_missing_data_dir(tmp_path, capsys):
    assert run("train", "--data-dir", tmp_path / "nope", "--out-dir", tmp_path / "o") == 1
    assert "arguments-training.tsv" in capsys.readouterr().err


def test_ablate_table_and_grid(data_dir, config, tmp_path, capsys):
    flags = ["--data-dir", data_dir, "--config", config, "--epochs", 1, "--seeds", "0"]
    assert run("ablate", *flags, "--out-dir", tmp_path / "a") == 0
    lines = (tmp_path / "a" / "reports" / "ablation.tsv").read_text().splitlines()
    assert [l.split("\t")[0] for l in lines[1:5]] == \
        ["baseline", "multi-attention", "baseline+KNN", "multi-attention+KNN"]
    assert lines[5].startswith("# config:") and lines[6] == "# seeds: 0"
    capsys.readouterr()
    assert run("ablate", *flags, "--out-dir", tmp_path / "g", "--grid", "lambda=0.1,0.5", "--grid", "k=2,4") == 0
    rows = [l for l in (tmp_path / "g" / "reports" / "grid.tsv").read_text().splitlines()[1:]
            if not l.startswith("#")]
    assert len(rows) == 4


def test_ablate_bad_grid_key(data_dir, config, tmp_path, capsys):
    assert run("ablate", "--data-dir", data_dir, "--config", config, "--out-dir", tmp_path,
               "--grid", "depth=1,2") == 1
    assert "depth" in capsys.readouterr().err
