import numpy as np
import pytest
import torch

from protomark.checkpoint import load_checkpoint, save_checkpoint
from protomark.core import ConfigError, RunConfig
from protomark.evaluation import predict
from protomark.model import build_model
from protomark.proto import PrototypeBank, ema_update


def setup():
    cfg = RunConfig(image_size=(16, 16), base_width=4, widths=(4, 4, 4), seed=5)
    net = build_model(cfg).eval()
    bank = ema_update(PrototypeBank(10, cfg.feature_dim, cfg.alpha), torch.randn(2, 10, cfg.feature_dim))
    return cfg, net, bank


def test_round_trip_predictions_identical(tmp_path):
    cfg, net, bank = setup()
    save_checkpoint(tmp_path, net, bank, cfg, epoch=3, step=42)
    ck = load_checkpoint(tmp_path)
    assert ck.cfg == cfg and ck.manifest["step"] == "42" and ck.bank.step == bank.step
    imgs = np.random.default_rng(0).uniform(size=(2, 16, 16))
    a = predict(net, bank.holistic, imgs)
    b = predict(ck.net, ck.bank.holistic, imgs)
    assert np.array_equal(np.asarray(a), np.asarray(b))


def test_inference_only_export(tmp_path):
    cfg, net, bank = setup()
    save_checkpoint(tmp_path, net, bank, cfg, epoch=0, step=0, include_relation=False)
    ck = load_checkpoint(tmp_path)
    assert ck.manifest["inference_only"] == "True"
    torch.testing.assert_close(ck.net.backbone.head3.weight, net.backbone.head3.weight)


def test_tamper_and_missing_detected(tmp_path):
    cfg, net, bank = setup()
    save_checkpoint(tmp_path, net, bank, cfg, epoch=0, step=0)
    blob = tmp_path / "weights.pt"
    raw = bytearray(blob.read_bytes())
    raw[len(raw) // 2] ^= 0xFF
    blob.write_bytes(bytes(raw))
    with pytest.raises(ConfigError, match="hash"):
        load_checkpoint(tmp_path)
    with pytest.raises(ConfigError, match="missing"):
        load_checkpoint(tmp_path / "nope")
