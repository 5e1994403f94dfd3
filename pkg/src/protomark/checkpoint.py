"""Checkpoint directories: ``weights.pt`` blob plus a ``manifest.txt`` of key=value lines."""

import hashlib
import io
from dataclasses import dataclass
from pathlib import Path

import torch

from .core import ConfigError, RunConfig, parse_kv
from .model import LandmarkNet
from .proto import PrototypeBank

BLOB = "weights.pt"
MANIFEST = "manifest.txt"


@dataclass
class Checkpoint:
    net: LandmarkNet
    bank: PrototypeBank
    cfg: RunConfig
    manifest: dict
    path: Path


def save_checkpoint(path, net, bank, cfg, *, epoch, step, seed=None, include_relation=True, extra=None) -> Path:
    """Write a checkpoint directory. ``include_relation=False`` gives an inference-only export."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    state = net.state_dict()
    if not include_relation:
        state = {k: v for k, v in state.items() if k.startswith("backbone.")}
    buf = io.BytesIO()
    torch.save({"model": state, "bank": bank.state_dict()}, buf)
    blob = buf.getvalue()
    (path / BLOB).write_bytes(blob)
    lines = {
        "format": "protomark-checkpoint-1",
        "epoch": epoch,
        "step": step,
        "seed": cfg.seed if seed is None else seed,
        "optimizer": f"sgd(momentum={cfg.momentum}, weight_decay={cfg.weight_decay})",
        "upsample_mode": cfg.upsample_mode,
        "inference_only": not include_relation,
        "sha256": hashlib.sha256(blob).hexdigest(),
    }
    lines.update(extra or {})
    text = "".join(f"{k}={v}\n" for k, v in lines.items())
    text += "".join(f"config.{line}\n" for line in cfg.to_text().splitlines())
    (path / MANIFEST).write_text(text)
    return path


def load_checkpoint(path, dtype=torch.float32) -> Checkpoint:
    path = Path(path)
    for name in (BLOB, MANIFEST):
        if not (path / name).is_file():
            raise ConfigError(f"checkpoint file missing: {path / name}")
    manifest = parse_kv((path / MANIFEST).read_text())
    blob = (path / BLOB).read_bytes()
    if hashlib.sha256(blob).hexdigest() != manifest.get("sha256"):
        raise ConfigError(f"checkpoint {path}: content hash does not match manifest")
    cfg = RunConfig.from_mapping({k[7:]: v for k, v in manifest.items() if k.startswith("config.")})
    payload = torch.load(io.BytesIO(blob), weights_only=True)
    net = LandmarkNet(cfg).to(dtype)
    strict = manifest.get("inference_only") != "True"
    net.load_state_dict(payload["model"], strict=strict)
    return Checkpoint(net.eval(), PrototypeBank.from_state_dict(payload["bank"]), cfg, manifest, path)
