import json
import shutil

import numpy as np
import pytest

from bevdecomp.cli import main
from bevdecomp.config import dumps
from bevdecomp.manifest import read_manifest

from conftest import tiny_config


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "tiny.yaml").write_text(dumps(tiny_config(1)))
    assert main(["synth", "--n", "12", "--seed", "7", "--out", str(root / "data")]) == 0
    return root


@pytest.fixture(scope="module")
def pipeline(work):
    cfg, data = str(work / "tiny.yaml"), str(work / "data")
    runs = {}
    for stage, parent in (("ae", None), ("align", "ae"), ("finetune", "align")):
        argv = ["train", stage, "--config", cfg, "--data", data, "--out", str(work / stage)]
        if parent:
            argv += ["--from", str(work / parent / f"{parent}.pt")]
        assert main(argv) == 0
        runs[stage] = work / stage
    return runs


def test_synth_idempotent(work, capsys):
    assert main(["synth", "--n", "12", "--seed", "7", "--out", str(work / "data")]) == 0
    assert "up to date" in capsys.readouterr().out


def test_synth_bad_recipe(tmp_path, capsys):
    recipe = tmp_path / "recipe.yaml"
    recipe.write_text("car_density: 2.0\nlane_widht: 3.0\n")
    code = main(["synth", "--n", "4", "--recipe", str(recipe), "--out", str(tmp_path / "d")])
    err = capsys.readouterr().err
    assert code == 1
    assert f"{recipe}:2:" in err and "lane_widht" in err


def test_usage_errors(work, capsys):
    with pytest.raises(SystemExit) as info:
        main(["train"])
    assert info.value.code == 1
    data = str(work / "data")
    assert main(["train", "align", "--data", data]) == 1
    assert main(["train", "align", "--ablate-td", "--data", data]) == 1
    assert main(["eval", "--ckpt", str(work / "missing.pt"), "--data", data]) == 2
    capsys.readouterr()


def test_default_output_root(work, tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("BEVDECOMP_HOME", str(tmp_path / "home"))
    assert main(["synth", "--n", "3", "--seed", "1"]) == 0
    assert (tmp_path / "home" / "datasets" / "synth-n3-s1" / "manifest.json").exists()
    capsys.readouterr()


def test_pipeline_tags_and_manifests(pipeline):
    from bevdecomp.checkpoint import load
    lrs = {"ae": 5e-4, "align": 2e-5, "finetune": 2e-4}
    prev = None
    for stage, run in pipeline.items():
        ck = load(run / f"{stage}.pt")
        man = read_manifest(run)
        assert ck.stage == stage and man["command"] == f"train {stage}"
        assert man["metrics"]["lr"] == lrs[stage]
        assert (run / "timing.json").exists()
        assert ck.extra["manifest_id"] == man["manifest_id"]
        if prev is not None:
            assert man["inputs"]["from"] == prev.checkpoint_id
            assert ck.lineage[-1] == prev.checkpoint_id
        prev = ck


def test_lineage_rejected(work, pipeline, capsys):
    code = main(["train", "align", "--config", str(work / "tiny.yaml"), "--data",
                 str(work / "data"), "--from", str(pipeline["finetune"] / "finetune.pt"),
                 "--out", str(work / "bad")])
    assert code == 2 and "LineageError" in capsys.readouterr().err
    code = main(["eval", "--ckpt", str(pipeline["ae"] / "ae.pt"), "--data", str(work / "data")])
    assert code == 2


def test_joint_baseline(work, capsys):
    out = work / "joint"
    assert main(["train", "ae", "--ablate-td", "--ablate-cst", "--config", str(work / "tiny.yaml"),
                 "--data", str(work / "data"), "--out", str(out)]) == 0
    from bevdecomp.checkpoint import load
    ck = load(out / "joint.pt")
    assert ck.stage == "joint" and not ck.experiment_config.ablation.cst
    assert list(out.glob("*.pt")) == [out / "joint.pt"]
    capsys.readouterr()


def test_eval_outputs(work, pipeline, capsys):
    ft = str(pipeline["finetune"] / "finetune.pt")
    out = work / "eval"
    assert main(["eval", "--ckpt", ft, "--data", str(work / "data"), "--out", str(out)]) == 0
    rep = json.loads((out / "report.json").read_text())
    man = read_manifest(out)
    assert rep["visibility_masked"] is True and rep["manifest_id"] == man["manifest_id"]
    for name in ("class_iou.png", "distance.png"):
        assert (out / name).stat().st_size > 0
    from PIL import Image
    assert man["manifest_id"] in Image.open(out / "distance.png").info["Description"]
    out2 = work / "eval-novis"
    assert main(["eval", "--ckpt", ft, "--data", str(work / "data"), "--out", str(out2),
                 "--no-visibility-mask"]) == 0
    rep2 = json.loads((out2 / "report.json").read_text())
    assert rep2["visibility_masked"] is False
    assert "visibility mask disabled" in capsys.readouterr().out
    # plot re-renders from the report alone
    (out2 / "class_iou.png").unlink(missing_ok=True)
    assert main(["plot", "--report", str(out2 / "report.json")]) == 0
    assert (out2 / "class_iou.png").exists()


def test_infer_file_directory_and_no_gt(work, pipeline, tmp_path, capsys):
    ft = str(pipeline["finetune"] / "finetune.pt")
    val = work / "data" / "val"
    sample = sorted(val.glob("*.png"))[0]
    assert main(["infer", "--ckpt", ft, "--input", str(sample), "--out", str(tmp_path / "one")]) == 0
    assert (tmp_path / "one" / sample.name).exists()
    loose = tmp_path / "loose"
    loose.mkdir()
    for p in sorted((work / "data" / "train").glob("*.png"))[:2]:
        shutil.copy(p, loose / p.name)
    assert main(["infer", "--ckpt", ft, "--input", str(loose), "--out", str(tmp_path / "many")]) == 0
    out = capsys.readouterr().out
    assert out.count("(no ground truth)") == 2
    assert len(list((tmp_path / "many").glob("*.png"))) == 2
    assert main(["infer", "--ckpt", ft, "--input", str(tmp_path / "empty-missing")]) == 2


@pytest.mark.parametrize("groups, rows", [("V,VI", ["V", "VI"]), ("VI,VII", ["VI", "VII"]),
                                          (None, ["I", "III", "V", "VI", "VII"])])
def test_ablate_table(work, groups, rows, capsys):
    out = work / f"ablate-{groups}"
    argv = ["ablate", "--config", str(work / "tiny.yaml"), "--data", str(work / "data"),
            "--seeds", "0", "--limit", "4", "--out", str(out)]
    if groups:
        argv += ["--groups", groups]
    assert main(argv) == 0
    table = (out / "ablation.md").read_text().strip().splitlines()
    assert table[0].split("|")[6:10] == [" Layout ", " Large Obj. ", " Small Obj. ", " Mean "]
    body = table[2:]
    assert [line.split("|")[1].strip() for line in body] == rows
    assert all(len(line.strip("|").split("|")) == 9 for line in body)
    payload = json.loads((out / "ablation.json").read_text())
    assert payload["manifest_id"] == read_manifest(out)["manifest_id"]
    capsys.readouterr()


def test_unknown_ablation_group(work, capsys):
    code = main(["ablate", "--config", str(work / "tiny.yaml"), "--data", str(work / "data"),
                 "--groups", "VIII", "--seeds", "0"])
    assert code != 0
    capsys.readouterr()
