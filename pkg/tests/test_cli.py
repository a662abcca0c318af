import json

import jsonschema
import pytest

from yoss.cli import load_recipe, main
from yoss.datamodel import ValidationError
from yoss.evalkit import METRICS_SCHEMA

TINY = """
[corpus]
n_train = 12
n_val = 6
holdout_combos = [["red", "triangle"]]
seed = 3

[stage1]
epochs = 1
batch_size = 4
retrieval_fold = 6

[stage2]
epochs = 1
batch_size = 4
weight_decay = 0.025
"""


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.toml"
    cfg.write_text(TINY)
    data = root / "data"
    assert main(["synth", "--config", str(cfg), "--out", str(data)]) == 0
    assert main(["pretrain", "--data", str(data), "--config", str(cfg), "--out", str(root / "s1")]) == 0
    assert main(["finetune", "--data", str(data), "--config", str(cfg), "--init", str(root / "s1" / "stage1.yoss"), "--out", str(root / "s2")]) == 0
    return root, cfg, data


def test_presets_load():
    for name in ("desk-small", "desk-large"):
        r = load_recipe(name)
        r.corpus_config()
        r.train_config(1)
        r.train_config(2)
    with pytest.raises(ValidationError, match="config"):
        load_recipe("/nonexistent.toml")


def test_pipeline_outputs(pipeline):
    root, _, data = pipeline
    assert (data / "train.jsonl").exists()
    assert (root / "s1" / "stage1_log.csv").exists()
    assert (root / "s2" / "stage2.yoss").exists()


@pytest.mark.parametrize("mode", ["retrieval", "coco", "lvis", "zeroshot"])
def test_eval_modes_write_valid_json(pipeline, mode):
    root, _, data = pipeline
    ck = root / ("s1/stage1.yoss" if mode == "retrieval" else "s2/stage2.yoss")
    out = root / f"{mode}.json"
    argv = ["eval", "--data", str(data), "--checkpoint", str(ck), "--mode", mode, "--out", str(out)]
    if mode == "retrieval":
        argv += ["--fold", "6"]
    assert main(argv) == 0
    rep = json.loads(out.read_text())
    jsonschema.validate(rep, METRICS_SCHEMA)
    assert rep["mode"] == mode
    if mode == "lvis":
        assert rep["max_predictions"] == 1000


def test_eval_saved_predictions_roundtrip(pipeline):
    root, _, data = pipeline
    ck = str(root / "s2" / "stage2.yoss")
    a, b = root / "a.json", root / "b.json"
    preds = root / "preds.jsonl"
    assert main(["eval", "--data", str(data), "--checkpoint", ck, "--mode", "coco", "--out", str(a), "--save-predictions", str(preds)]) == 0
    assert main(["eval", "--data", str(data), "--predictions", str(preds), "--mode", "coco", "--out", str(b)]) == 0
    assert json.loads(a.read_text())["metrics"] == json.loads(b.read_text())["metrics"]


def test_detect(pipeline, tmp_path):
    from yoss.datamodel import write_wav
    from yoss.synthdata import ToneRecipe, speak_token

    root, _, data = pipeline
    img = sorted((data / "images").glob("*.png"))[0]
    wav = tmp_path / "red circle.wav"
    write_wav(wav, speak_token("red circle", ToneRecipe(), 0))
    out = tmp_path / "det.png"
    code = main(["detect", "--image", str(img), "--audio-prompts", str(wav), "--checkpoint", str(root / "s2" / "stage2.yoss"),
                 "--out-image", str(out), "--threshold", "0.0", "--max-predictions", "3"])
    assert code == 0 and out.exists()
    lines = [json.loads(l) for l in out.with_suffix(".jsonl").read_text().splitlines()]
    assert len(lines) <= 3 and all(l["prompt"] == "red circle" for l in lines)


def test_exit_codes(pipeline, tmp_path, capsys):
    root, cfg, data = pipeline
    assert main(["finetune", "--data", str(data), "--config", str(cfg), "--out", str(tmp_path)]) == 2
    assert "--init" in capsys.readouterr().err
    assert main(["synth", "--config", "nope", "--out", str(tmp_path / "x")]) == 2
    bad = tmp_path / "bad.toml"
    bad.write_text("[corpus]\nimage_size = 60\n")
    assert main(["synth", "--config", str(bad), "--out", str(tmp_path / "y")]) == 2
    assert "image_size" in capsys.readouterr().err
    assert main(["eval", "--data", str(tmp_path / "missing"), "--checkpoint", str(root / "s2" / "stage2.yoss"), "--mode", "coco", "--out", str(tmp_path / "m.json")]) in (2, 3)
    with pytest.raises(SystemExit):
        main(["bogus"])
