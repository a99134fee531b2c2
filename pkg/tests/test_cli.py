import json

import pytest

from nodulenet.cli import main
from nodulenet.volume import parse_manifest

FAST = ["--preset", "desk", "--scales", "40", "--epochs", "1", "--stream-width", "0.125",
        "--max-samples-per-class", "4", "--val-fusion-n", "1", "--batch-size", "8"]


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["phantom-gen", "--out", str(d / "ph"), "--splits", "train=2,validation=1,test=1",
                 "--seed", "3"]) == 0
    return d


def test_phantom_gen_per_class(tmp_path):
    assert main(["phantom-gen", "--out", str(tmp_path), "--per-class", "2", "--seed", "7"]) == 0
    recs, dropped = parse_manifest(tmp_path / "manifest.csv")
    assert len(recs) == 12 and dropped == 0
    assert len(list((tmp_path / "volumes").glob("*.mhd"))) == 12
    log = json.loads((tmp_path / "run.json").read_text())
    assert log["config"]["seed"] == 7


def test_phantom_gen_is_byte_identical(tmp_path):
    for name in ("a", "b"):
        assert main(["phantom-gen", "--out", str(tmp_path / name), "--per-class", "1", "--seed", "2"]) == 0
    for f in ("manifest.csv", "volumes/solid_0000.raw", "volumes/spiculated_0000.mhd"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_count_only(workdir, capsys):
    assert main(["extract", "--manifest", str(workdir / "ph/manifest.csv"), "--count-only", "--seed", "0",
                 "--plane-counts", "1,2,3,4,5,6"]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0] == "solid\t32" and out[-1] == "total\t672"


def test_train_evaluate_predict_embed(workdir, capsys):
    m = str(workdir / "ph/manifest.csv")
    store = str(workdir / "s.tpss")
    assert main(["extract", "--manifest", m, "--out", store, "--seed", "1"] + FAST) == 0
    for name in ("c1", "c2"):
        assert main(["train", "--manifest", m, "--store", store, "--out", str(workdir / name), "--seed", "1"]
                    + FAST) == 0
    assert (workdir / "c1").read_bytes() == (workdir / "c2").read_bytes()
    assert (workdir / "c1.log.tsv").read_text() == (workdir / "c2.log.tsv").read_text()
    run = json.loads((workdir / "c1.run.json").read_text())
    assert run["resolved"]["seed"] == 1 and run["resolved"]["epochs"] == 1

    for name in ("r1", "r2"):
        assert main(["evaluate", "--checkpoint", str(workdir / "c1"), "--manifest", m, "--n", "2",
                     "--out", str(workdir / name)]) == 0
    r1 = json.loads((workdir / "r1.json").read_text())
    assert r1 == json.loads((workdir / "r2.json").read_text())
    assert len(r1["confusion"]) == 6 and r1["total"] == 6

    assert main(["evaluate", "--checkpoint", str(workdir / "c1"), "--manifest", m, "--scales", "10,40",
                 "--out", str(workdir / "bad")]) == 1

    assert main(["predict", "--checkpoint", str(workdir / "c1"), "--manifest", m, "--n", "1",
                 "--out", str(workdir / "p.tsv")]) == 0
    rows = (workdir / "p.tsv").read_text().splitlines()
    assert len(rows) == 7 and rows[0].startswith("id\tpredicted")

    assert main(["embed", "--checkpoint", str(workdir / "c1"), "--manifest", m, "--perplexity", "1.5",
                 "--iterations", "250", "--seed", "0", "--out", str(workdir / "emb")]) == 0
    assert len((workdir / "emb.tsv").read_text().splitlines()) == 7
    assert (workdir / "emb.svg").read_text().startswith("<svg")


def test_baselines(workdir):
    m = str(workdir / "ph/manifest.csv")
    assert main(["baseline-svm", "--manifest", m, "--out", str(workdir / "svm"), "--seed", "0", "--n", "3",
                 "--plane-counts", "1,1,1,1,1,1", "--max-samples-per-class", "3"]) == 0
    rep = json.loads((workdir / "svm.report.json").read_text())
    assert rep["features"] == "intensity" and rep["scale"] == 40.0 and rep["total"] == 6
    assert main(["baseline-kmeans", "--manifest", m, "--out", str(workdir / "km"), "--seed", "0", "--n", "3",
                 "--plane-counts", "1,1,1,1,1,1", "--max-samples-per-class", "3", "--centroids", "8",
                 "--windows", "2000"]) == 0
    assert (workdir / "km.tpkm").exists() and (workdir / "km.tpsv").exists()


def test_kappa(tmp_path, capsys):
    (tmp_path / "a.labels").write_text("n1,solid\nn2,calcified\nn3,solid\nn4,spiculated\n")
    (tmp_path / "b.labels").write_text("n4,spiculated\nn3,not_a_nodule\nn2,calcified\nn1,solid\n")
    assert main(["kappa", "--a", str(tmp_path / "a.labels"), "--b", str(tmp_path / "b.labels"),
                 "--out", str(tmp_path / "k")]) == 0
    rep = json.loads((tmp_path / "k.json").read_text())
    assert rep["classes_used"] == 7 and len(rep["confusion"]) == 7
    assert "kappa" in capsys.readouterr().out


def test_usage_errors(tmp_path, capsys):
    with pytest.raises(SystemExit) as e:
        main(["frobnicate"])
    assert e.value.code == 2
    with pytest.raises(SystemExit) as e:
        main(["train", "--seed", "1"])
    assert e.value.code == 2
    assert main(["phantom-gen", "--out", str(tmp_path), "--per-class", "1"]) == 1
    assert "seed is required" in capsys.readouterr().err


def test_config_file_and_override(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"seed": 5, "per_class": 1, "out": str(tmp_path / "x")}))
    assert main(["phantom-gen", "--config", str(cfg)]) == 0
    assert json.loads((tmp_path / "x/run.json").read_text())["config"]["seed"] == 5
    assert main(["phantom-gen", "--config", str(cfg), "--seed", "6", "--out", str(tmp_path / "y")]) == 0
    assert json.loads((tmp_path / "y/run.json").read_text())["config"]["seed"] == 6
    cfg.write_text(json.dumps({"seed": 5, "bogus": 1}))
    assert main(["phantom-gen", "--config", str(cfg), "--out", str(tmp_path / "z")]) == 2
