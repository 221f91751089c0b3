import json

import numpy as np
import pytest

from tivdiff.cli import dispatch
from tivdiff.config import DEFAULTS, RunConfig, config_hash

TINY = {
    "slots.slot_dim": 16, "slots.mlp_hidden": 32, "slots.cnn_channels": 8, "slots.cnn_layers": 2,
    "slots.cnn_kernel": 3, "slots.feature_stride": 2, "slots.dec_channels": 8,
    "model.d": 16, "model.text_depth": 1, "model.heads": 2, "model.ff": 32, "model.unet_slot_dim": 8,
    "model.schedule": "linear_scaled",
    "unet.base_width": 8, "unet.channel_mult": [1, 2], "unet.temporal_channels": 4, "unet.spade_hidden": 4,
    "unet.slot_key_dim": 4, "unet.groups": 4,
    "train.batch_size": 2, "log.every": 50,
}


@pytest.fixture
def tiny_config(tmp_path):
    p = tmp_path / "tiny.json"
    p.write_text(json.dumps(TINY))
    return str(p)


def test_help_exit_zero(capsys):
    assert dispatch(["--help"]) == 0
    assert "gen-data" in capsys.readouterr().out
    assert dispatch(["train", "--help"]) == 0
    assert "--slots-ckpt" in capsys.readouterr().out


def test_usage_errors_exit_two(tmp_path):
    assert dispatch(["gen-data", "--out", str(tmp_path), "--bogus"]) == 2
    assert dispatch(["no-such-command"]) == 2
    assert dispatch([]) == 2


def test_invalid_config_exit_one(tmp_path, capsys):
    p = tmp_path / "bad.json"
    p.write_text(json.dumps({"data.count": "many"}))
    assert dispatch(["gen-data", "--config", str(p), "--out", str(tmp_path / "d")]) == 1
    assert "data.count" in capsys.readouterr().err
    p.write_text(json.dumps({"model.no_such_key": 1}))
    assert dispatch(["gen-data", "--config", str(p), "--out", str(tmp_path / "d")]) == 1
    assert dispatch(["gen-data", "--count", "-3", "--out", str(tmp_path / "d")]) == 1


def test_missing_inputs_exit_one(tmp_path):
    assert dispatch(["train-slots", "--data", str(tmp_path / "nothing"), "--out", str(tmp_path / "s.pt")]) == 1
    assert dispatch(["sample", "--ckpt", str(tmp_path / "none.pt"), "--image", "x.png", "--caption", "digit 1.",
                     "--out", str(tmp_path / "o")]) == 1


def test_config_hash_and_seed_fallback(tmp_path, monkeypatch):
    monkeypatch.setenv("TIV_SEED", "11")
    cfg = RunConfig.load(None, {"seed": None})
    assert cfg["seed"] == 11
    assert RunConfig.load(None, {"seed": 3})["seed"] == 3
    monkeypatch.delenv("TIV_SEED")
    a, b = RunConfig.load(None, {}), RunConfig.load(None, {})
    assert a.hash() == b.hash() == config_hash(a.values)
    assert set(DEFAULTS) <= set(a.to_json())
    assert RunConfig.load(None, {"train.steps": 7}).hash() != a.hash()


def run_pipeline(root, cfg, seed=0, steps_slots=200, steps_train=200):
    data, slots, model = root / "data", root / "slots.pt", root / "model.pt"
    assert dispatch(["gen-data", "--config", cfg, "--variant", "double", "--count", "32", "--seed", str(seed),
                     "--out", str(data)]) == 0
    assert dispatch(["train-slots", "--config", cfg, "--data", str(data), "--steps", str(steps_slots),
                     "--lr", "1e-3", "--seed", str(seed), "--out", str(slots), "--log", str(root / "log.jsonl")]) == 0
    assert dispatch(["viz-slots", "--config", cfg, "--ckpt", str(slots), "--image",
                     str(data / "samples" / "000000.f32"), "--out", str(root / "slots.png")]) == 0
    assert dispatch(["train", "--config", cfg, "--data", str(data), "--slots-ckpt", str(slots), "--steps",
                     str(steps_train), "--lr", "1e-3", "--T", "20", "--seed", str(seed), "--out", str(model),
                     "--log", str(root / "log.jsonl")]) == 0
    assert dispatch(["sample", "--config", cfg, "--ckpt", str(model), "--image", str(data / "samples" / "000030.f32"),
                     "--caption", "digit 3 is moving left to right.", "--steps", "5", "--seed", "1",
                     "--out", str(root / "sample")]) == 0
    assert dispatch(["eval", "--config", cfg, "--ckpt", str(model), "--data", str(data), "--steps", "5",
                     "--limit", "2", "--seed", "1", "--report", str(root / "report.json")]) == 0
    assert dispatch(["interp-scale", "--config", cfg, "--ckpt", str(model), "--image",
                     str(data / "samples" / "000030.f32"), "--caption-a", "digit 3 is moving left to right.",
                     "--caption-b", "digit 3 is moving right to left.", "--omega", "0", "0.5", "1",
                     "--steps", "3", "--out", str(root / "interp")]) == 0


def test_full_pipeline_smoke(tmp_path, tiny_config):
    run_pipeline(tmp_path, tiny_config)
    for rel in ("data/manifest.json", "slots.pt", "slots.loss.png", "slots.png", "model.pt", "model.loss.png",
                "sample/frame_09.png", "sample/video.gif", "sample/strip.png", "sample/meta.json",
                "report.json", "report.png", "interp/interp.png", "interp/omega_0.5/frames.f32"):
        assert (tmp_path / rel).is_file(), rel
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["count"] == 2 and report["config_hash"]
    assert all(len(v["frame_psnr"]) == 9 for v in report["videos"])
    manifest = json.loads((tmp_path / "data/manifest.json").read_text())
    meta = json.loads((tmp_path / "sample/meta.json").read_text())
    assert manifest["config_hash"] and meta["config_hash"] and meta["format_version"] == 1
    records = [json.loads(line) for line in (tmp_path / "log.jsonl").read_text().splitlines()]
    assert any(r["event"] == "train_slots" for r in records) and any(r["event"] == "train" for r in records)
    assert all("config_hash" in r for r in records)


def test_train_rejects_unfrozen_slots(tmp_path, tiny_config):
    import torch
    from tivdiff.checkpoints import save_slots
    from tivdiff.slots import SlotAutoencoder
    cfg = RunConfig.load(tiny_config, {})
    assert dispatch(["gen-data", "--variant", "single", "--count", "4", "--out", str(tmp_path / "d")]) == 0
    torch.manual_seed(0)
    save_slots(tmp_path / "s.pt", SlotAutoencoder(cfg.slot_config()), frozen=False)
    assert dispatch(["train", "--config", tiny_config, "--data", str(tmp_path / "d"), "--slots-ckpt",
                     str(tmp_path / "s.pt"), "--steps", "1", "--out", str(tmp_path / "m.pt")]) == 1


def test_byte_identical_reruns(tmp_path, tiny_config):
    a, b = tmp_path / "a", tmp_path / "b"
    for root in (a, b):
        run_pipeline(root, tiny_config, steps_slots=5, steps_train=5)
    for rel in ("data/manifest.json", "data/samples/000007.f32", "data/samples/000007.json",
                "sample/frames.f32", "sample/meta.json", "sample/frame_05.png", "sample/video.gif",
                "report.json", "slots.pt", "model.pt"):
        assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel


def test_load_image_formats(tmp_path):
    from PIL import Image
    from tivdiff.cli import load_image
    arr = (np.random.default_rng(0).random((64, 64)) * 255).astype(np.uint8)
    Image.fromarray(arr).save(tmp_path / "x.png")
    np.save(tmp_path / "x.npy", arr.astype(np.float32) / 255)
    a, b = load_image(tmp_path / "x.png"), load_image(tmp_path / "x.npy")
    assert a.shape == (1, 1, 64, 64) and np.allclose(a.numpy(), b.numpy())
