import json
import subprocess
import sys
import time

import pytest
import torch
from PIL import Image

from streetcompat.cli import main
from streetcompat.netcore import ModelConfig, init_model, load_checkpoint, save_checkpoint

SMALL = {
    "synth": {"persons_per_style": 6, "image_size": 96, "n_target_train": 24, "valid_groups_per_style": 2,
              "test_groups_per_style": 3, "valid_comp_per_class": 8, "test_comp_per_class": 10},
    "model": {"feature_dim": 16, "input_resolution": 8, "conv_channels": [4, 8]},
    "train": {"max_steps": 10, "eval_every": 5, "eval_n_patches": 2},
    "eval": {"n_patches": 3},
}


def _config(tmp_path, data_dir, **overrides):
    doc = json.loads(json.dumps(SMALL))
    doc["paths"] = {"data_dir": str(data_dir)}
    for section, values in overrides.items():
        doc.setdefault(section, {}).update(values)
    path = tmp_path / "config.json"
    path.write_text(json.dumps(doc))
    return path


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = _config(root, root / "data")
    assert main(["synth", "--config", str(cfg), "--seed", "3"]) == 0
    return root, cfg


@pytest.fixture(scope="module")
def trained(dataset):
    root, cfg = dataset
    t0 = time.perf_counter()
    assert main(["train", "--config", str(cfg), "--seed", "3", "--out", str(root / "run")]) == 0
    return root / "run", time.perf_counter() - t0


def _tree(path):
    return {p.relative_to(path).as_posix(): p.read_bytes() for p in sorted(path.rglob("*")) if p.is_file()}


def test_synth_writes_tree_and_is_repeatable(dataset, tmp_path):
    root, cfg = dataset
    assert (root / "data" / "source_train.json").is_file()
    assert (root / "data" / "target_train.json").is_file()
    assert json.loads((root / "data" / "config.json").read_text())["seed"] == 3
    assert main(["synth", "--config", str(cfg), "--seed", "3", "--out", str(tmp_path / "again")]) == 0
    first, second = _tree(root / "data"), _tree(tmp_path / "again")
    first.pop("config.json"), second.pop("config.json")  # data_dir differs
    assert first == second


def test_synth_invalid_items_per_person(tmp_path, capsys):
    cfg = _config(tmp_path, tmp_path / "d", synth={"items_per_person": 1})
    assert main(["synth", "--config", str(cfg)]) == 2
    assert "items_per_person" in capsys.readouterr().err


def test_unknown_config_field(tmp_path, capsys):
    cfg = _config(tmp_path, tmp_path / "d", train={"lr": 1.0})
    assert main(["synth", "--config", str(cfg)]) == 2
    assert "lr" in capsys.readouterr().err


def test_cross_field_constraint_checked_at_load(tmp_path, capsys):
    cfg = _config(tmp_path, tmp_path / "d", train={"persons_per_batch": 8})
    assert main(["train", "--config", str(cfg)]) == 2
    assert "persons_per_batch" in capsys.readouterr().err


def test_train_smoke(trained):
    run, seconds = trained
    assert seconds < 60
    lines = [json.loads(x) for x in (run / "train_log.jsonl").read_text().splitlines()]
    assert [r["step"] for r in lines if "L_D" in r] == list(range(10))
    assert sum("comp_auc" in r for r in lines) == 2
    for name in ("last.pt", "best.pt", "config.json", "checkpoints/step_000005.pt"):
        assert (run / name).is_file()
    assert load_checkpoint(run / "last.pt")[0].step == 10


def test_train_resume_continues(trained, dataset, tmp_path):
    run, _ = trained
    root, cfg = dataset
    out = tmp_path / "resumed"
    out.mkdir()
    (out / "train_log.jsonl").write_text((run / "train_log.jsonl").read_text())
    assert main(["train", "--config", str(cfg), "--seed", "3", "--out", str(out),
                 "--resume", str(run / "last.pt"), "--max-steps", "14"]) == 0
    assert load_checkpoint(out / "last.pt")[0].step == 14
    steps = [json.loads(x)["step"] for x in (out / "train_log.jsonl").read_text().splitlines()]
    assert steps[-1] == 13


def test_train_missing_manifest(tmp_path, capsys):
    cfg = _config(tmp_path, tmp_path / "nowhere")
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "r")]) == 3
    assert "data error" in capsys.readouterr().err


def test_eval_writes_metrics(trained, dataset, tmp_path):
    run, _ = trained
    root, cfg = dataset
    out = tmp_path / "eval"
    assert main(["eval", "--config", str(cfg), "--seed", "3", "--checkpoint", str(run / "best.pt"),
                 "--n-patches", "4", "--out", str(out)]) == 0
    m = json.loads((out / "metrics.json").read_text())
    assert m["n_patches"] == 4 and m["seed"] == 3
    assert 0 <= m["comp_auc"] <= 1 and 0 <= m["fitb_acc"] <= 1
    state = load_checkpoint(run / "best.pt")[0]
    assert m["checkpoint_id"].endswith(state.fingerprint())
    assert json.loads((out / "config.json").read_text())["eval"]["n_patches"] == 4


def test_eval_missing_checkpoint(dataset, tmp_path):
    root, cfg = dataset
    assert main(["eval", "--config", str(cfg), "--checkpoint", str(tmp_path / "x.pt"),
                 "--out", str(tmp_path)]) == 3


def test_eval_content_blind_checkpoint_at_chance(tmp_path):
    """A checkpoint whose features ignore the image scores at chance on FITB.

    Random-init weights are not enough here: random conv features still carry
    colour, which separates synthetic styles almost perfectly.
    """
    data = tmp_path / "data"
    cfg = _config(tmp_path, data, synth={"persons_per_style": 2, "n_target_train": 4,
                                         "test_groups_per_style": 25})
    assert main(["synth", "--config", str(cfg), "--seed", "5"]) == 0
    state = init_model(ModelConfig(**SMALL["model"]), seed=5)
    with torch.no_grad():
        convs = [m for m in state.generator.modules() if isinstance(m, torch.nn.Conv2d)]
        convs[-1].weight.zero_()
        convs[-1].bias.fill_(0.5)
    save_checkpoint(tmp_path / "blind.pt", state)
    assert main(["eval", "--config", str(cfg), "--checkpoint", str(tmp_path / "blind.pt"),
                 "--out", str(tmp_path / "e")]) == 0
    m = json.loads((tmp_path / "e" / "metrics.json").read_text())
    n = 4 * 25 * 4
    assert abs(m["fitb_acc"] - 0.25) <= 3 * (0.25 * 0.75 / n) ** 0.5
    assert m["comp_auc"] == 0.5


def test_embed_outputs(trained, dataset, tmp_path):
    run, _ = trained
    root, cfg = dataset
    out = tmp_path / "emb"
    assert main(["embed", "--config", str(cfg), "--checkpoint", str(run / "best.pt"), "--out", str(out)]) == 0
    n_items = len(json.loads((root / "data" / "target_test.json").read_text())["entries"])
    lines = (out / "embeddings.jsonl").read_text().splitlines()
    assert len(lines) == n_items
    rec = json.loads(lines[0])
    assert rec["projection"]["method"] == "pca" and len(rec["mean_embedding"]) == 64
    png = out / "embeddings.png"
    assert png.stat().st_size > 0
    assert "projection=pca" in Image.open(png).info["Description"]


def test_module_entry_point(tmp_path):
    cfg = _config(tmp_path, tmp_path / "d", synth={"items_per_person": 1})
    proc = subprocess.run([sys.executable, "-m", "streetcompat", "synth", "--config", str(cfg)],
                          capture_output=True, text=True)
    assert proc.returncode == 2 and "items_per_person" in proc.stderr
