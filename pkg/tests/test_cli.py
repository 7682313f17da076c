import csv
import json

import numpy as np
import pytest
from PIL import Image

from imems.cli import main
from imems.data import load_dataset, write_manifest

TINY_TRAIN = ["--epochs", "2", "--depth", "2", "--base-filters", "4"]


def _tree(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def synth(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    args = ["synth", "--seed", "2", "--width", "32", "--height", "32", "--train", "4", "--val", "2", "--test", "2", "--out", str(out)]
    assert main(args) == 0
    return out


@pytest.fixture
def pair(tmp_path):
    rng = np.random.default_rng(0)
    img = rng.integers(0, 256, (10, 12, 3), dtype=np.uint8)
    mask = rng.integers(0, 5, (10, 12)).astype(np.uint8)
    Image.fromarray(img).save(tmp_path / "img.png")
    Image.fromarray(mask, mode="L").save(tmp_path / "mask.png")
    return tmp_path, mask


def test_encode_decode_roundtrip(pair):
    d, mask = pair
    assert main(["encode", "--image", str(d / "img.png"), "--mask", str(d / "mask.png"),
                 "--num-labels", "5", "--figure", "--out", str(d / "emb")]) == 0
    assert len(list(d.glob("emb.ch*.png"))) == 5
    assert json.loads((d / "emb.meta.json").read_text())["num_labels"] == 5
    assert (d / "emb.png").exists()
    assert main(["decode", "--bundle", str(d / "emb"), "--out", str(d / "back.png")]) == 0
    assert np.array_equal(np.asarray(Image.open(d / "back.png")), mask)


def test_decode_missing_channel_exits_2(pair, capsys):
    d, _ = pair
    main(["encode", "--image", str(d / "img.png"), "--mask", str(d / "mask.png"), "--num-labels", "5", "--out", str(d / "emb")])
    (d / "emb.ch03.png").unlink()
    assert main(["decode", "--bundle", str(d / "emb"), "--out", str(d / "x.png")]) == 2
    assert "emb.ch03.png" in capsys.readouterr().err


def test_encode_label_out_of_range_exits_2(pair):
    d, _ = pair
    assert main(["encode", "--image", str(d / "img.png"), "--mask", str(d / "mask.png"), "--num-labels", "3", "--out", str(d / "e")]) == 2


def test_synth_is_reproducible(tmp_path):
    base = ["synth", "--seed", "7", "--width", "16", "--height", "16", "--train", "2", "--val", "1", "--test", "1"]
    assert main(base + ["--out", str(tmp_path / "a")]) == 0
    assert main(base + ["--out", str(tmp_path / "b")]) == 0
    assert _tree(tmp_path / "a") == _tree(tmp_path / "b")
    run = json.loads((tmp_path / "a" / "run.json").read_text())
    assert run["seed"] == 7 and run["config"]["num_labels"] == 3


def test_synth_rejects_k1(tmp_path, capsys):
    assert main(["synth", "--num-labels", "1", "--out", str(tmp_path)]) == 2
    assert "num_labels" in capsys.readouterr().err


def test_synth_config_file_and_flag_precedence(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"width": 16, "height": 16, "train": 2, "val": 1, "test": 1, "seed": 3}))
    assert main(["synth", "--config", str(cfg), "--seed", "4", "--out", str(tmp_path / "o")]) == 0
    run = json.loads((tmp_path / "o" / "run.json").read_text())
    assert run["seed"] == 4 and run["config"]["width"] == 16


def test_train_rejects_bad_method(synth, tmp_path, capsys):
    rc = main(["train", "--manifest", str(synth / "manifest.json"), "--method", "segnet", "--out", str(tmp_path)])
    assert rc == 2
    err = capsys.readouterr().err
    assert all(m in err for m in ["imems", "unet-c-single", "unet-c-multi-int"])


def test_train_multi_int_needs_lambda_int(synth, tmp_path):
    rc = main(["train", "--manifest", str(synth / "manifest.json"), "--method", "unet-c-multi-int", "--out", str(tmp_path)])
    assert rc == 2


def test_train_fold_on_fixed_split_exits_2(synth, tmp_path):
    rc = main(["train", "--manifest", str(synth / "manifest.json"), "--fold", "1", *TINY_TRAIN, "--out", str(tmp_path)])
    assert rc == 2


def test_train_predict_evaluate(synth, tmp_path):
    manifest = str(synth / "manifest.json")
    for method in ["imems", "unet-c-single"]:
        assert main(["train", "--manifest", manifest, "--method", method, "--seed", "1", *TINY_TRAIN,
                     "--out", str(tmp_path / method)]) == 0
        assert {"model.ckpt", "history.csv", "history.png", "run.json"} <= {p.name for p in (tmp_path / method).iterdir()}
    hist = list(csv.DictReader(open(tmp_path / "imems" / "history.csv")))
    assert [r["epoch"] for r in hist] == ["1", "2"]

    assert main(["predict", "--checkpoint", str(tmp_path / "imems" / "model.ckpt"), "--manifest", manifest,
                 "--out", str(tmp_path / "pred")]) == 0
    assert len(list((tmp_path / "pred").glob("*.labels.png"))) == 2
    assert len(list((tmp_path / "pred").glob("*.overlay.png"))) == 2

    assert main(["evaluate", "--manifest", manifest, "--checkpoint", str(tmp_path / "unet-c-single" / "model.ckpt"),
                 "--checkpoint", str(tmp_path / "imems" / "model.ckpt"), "--out", str(tmp_path / "ev")]) == 0
    rows = list(csv.reader(open(tmp_path / "ev" / "metrics.csv")))
    assert rows[0] == ["method", "f_0", "f_1", "f_2", "avg_f", "accuracy"]
    assert [r[0] for r in rows[1:]] == ["unet-c-single", "imems"]
    assert len(list((tmp_path / "ev" / "overlays" / "imems").glob("*.png"))) == 2


def test_evaluate_label_count_mismatch(synth, tmp_path, capsys):
    assert main(["train", "--manifest", str(synth / "manifest.json"), "--method", "unet-c-single", *TINY_TRAIN,
                 "--epochs", "1", "--out", str(tmp_path / "m")]) == 0
    ds = load_dataset(synth / "manifest.json")
    raw = json.loads((synth / "manifest.json").read_text())
    raw["num_labels"] = 4
    raw["items"] = [{k: str(synth / v) if k in ("image", "mask") else v for k, v in it.items()} for it in raw["items"]]
    other = write_manifest(tmp_path / "k4.json", raw)
    assert len(ds) == 8
    rc = main(["evaluate", "--manifest", str(other), "--checkpoint", str(tmp_path / "m" / "model.ckpt"), "--out", str(tmp_path / "e")])
    assert rc == 2
    assert "K=3" in capsys.readouterr().err


def test_kfold_fold_semantics(tmp_path):
    rng = np.random.default_rng(0)
    (tmp_path / "d").mkdir()
    items = []
    for i in range(10):
        Image.fromarray(rng.integers(0, 256, (16, 16, 3), dtype=np.uint8)).save(tmp_path / "d" / f"i{i}.png")
        Image.fromarray(rng.integers(0, 2, (16, 16)).astype(np.uint8), mode="L").save(tmp_path / "d" / f"m{i}.png")
        items.append({"image": f"d/i{i}.png", "mask": f"d/m{i}.png", "id": f"s{i}"})
    m = write_manifest(tmp_path / "k.json", {"name": "k", "num_labels": 2, "protocol": "kfold", "num_folds": 5, "items": items})
    common = ["--manifest", str(m), "--method", "unet-c-single", *TINY_TRAIN, "--epochs", "1"]
    assert main(["train", *common, "--out", str(tmp_path / "nofold")]) == 2
    for fold in (0, 1):
        assert main(["train", *common, "--fold", str(fold), "--out", str(tmp_path / f"f{fold}")]) == 0
    assert main(["evaluate", "--manifest", str(m), "--no-overlays", "--checkpoint", str(tmp_path / "f0" / "model.ckpt"),
                 "--checkpoint", str(tmp_path / "f1" / "model.ckpt"), "--out", str(tmp_path / "ev")]) == 0
    rows = list(csv.reader(open(tmp_path / "ev" / "metrics.csv")))
    assert [r[0] for r in rows[1:]] == ["unet-c-single/fold0", "unet-c-single/fold1", "unet-c-single"]
    mean_acc = (float(rows[1][-1]) + float(rows[2][-1])) / 2
    assert abs(float(rows[3][-1]) - mean_acc) < 2e-6


def test_grid_search_tiny(synth, tmp_path, capsys):
    rc = main(["grid-search", "--manifest", str(synth / "manifest.json"), "--method", "unet-c-multi",
               "--grid", "0.2,0.5,0.8", "--seed", "0", *TINY_TRAIN, "--epochs", "1", "--out", str(tmp_path)])
    assert rc == 0
    rows = list(csv.DictReader(open(tmp_path / "grid.csv")))
    assert [float(r["lambda_seg"]) for r in rows] == [0.2, 0.5, 0.8]
    best = json.loads((tmp_path / "best.json").read_text())
    assert best["best"] in (0.2, 0.5, 0.8)
    assert (tmp_path / "grid.png").exists()
    assert "best lambda_seg" in capsys.readouterr().out


def test_grid_search_rejects_single_task(synth, tmp_path):
    rc = main(["grid-search", "--manifest", str(synth / "manifest.json"), "--method", "imems",
               "--grid", "0.5", *TINY_TRAIN, "--out", str(tmp_path)])
    assert rc == 2
