"""Mean radial error, successful detection rate, and per-group reports."""

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .core import GROUPS, ConfigError, Dataset, ShapeError
from .heatmap import decode_landmarks
from .proto import similarity_maps

SDR_THRESHOLDS_MM = (2.0, 2.5, 3.0, 4.0)


def radial_errors(pred, gt, spacing: float = 1.0) -> np.ndarray:
    """Per-landmark Euclidean distance between (K, 2) coordinate arrays, times ``spacing``."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.ndim != 2 or pred.shape[1] != 2:
        raise ShapeError(f"prediction {pred.shape} and ground truth {gt.shape} must both be (K, 2)")
    return spacing * np.hypot(pred[:, 0] - gt[:, 0], pred[:, 1] - gt[:, 1])


def mre(errors) -> tuple[float, float]:
    """Mean and population standard deviation of pooled landmark errors."""
    e = np.concatenate([np.ravel(x) for x in errors]) if _is_nested(errors) else np.ravel(errors)
    if e.size == 0:
        raise ValueError("mre of an empty error collection")
    e = e.astype(np.float64)
    return float(e.mean()), float(e.std())


def _is_nested(errors):
    return isinstance(errors, (list, tuple)) and len(errors) > 0 and np.ndim(errors[0]) > 0


def sdr(errors, thresholds=SDR_THRESHOLDS_MM) -> dict[float, float]:
    """Percentage of errors at or below each threshold."""
    e = np.concatenate([np.ravel(x) for x in errors]) if _is_nested(errors) else np.ravel(errors)
    out = {}
    for t in thresholds:
        if not t > 0:
            raise ValueError("SDR thresholds must be positive")
        out[float(t)] = 100.0 * float(np.count_nonzero(e <= t)) / e.size if e.size else float("nan")
    return out


@dataclass
class GroupReport:
    n_samples: int
    n_landmarks: int
    empty: bool
    mre_mm: float = float("nan")
    mre_std_mm: float = float("nan")
    mre_px: float = float("nan")
    sdr: dict = field(default_factory=dict)


@dataclass
class EvalReport:
    errors_mm: dict  # sample id -> list of K errors at native resolution
    errors_px: dict  # sample id -> list of K errors at working resolution
    groups: dict     # "combined" / "adult" / "adolescent" -> GroupReport
    std_mode: str = "pooled"

    @property
    def combined(self) -> GroupReport:
        return self.groups["combined"]

    def to_dict(self):
        return {"std_mode": self.std_mode,
                "groups": {g: asdict(r) for g, r in self.groups.items()},
                "errors_mm": self.errors_mm, "errors_px": self.errors_px}

    def save(self, out_dir, label="model") -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))
        write_table_csv(out / "report.csv", {label: self})
        return out


def table_row(report: EvalReport) -> dict:
    row = {}
    for g in ("combined",) + GROUPS:
        r = report.groups[g]
        row[f"{g}_mre_mm"] = r.mre_mm
        row[f"{g}_std_mm"] = r.mre_std_mm
        for t in SDR_THRESHOLDS_MM:
            row[f"{g}_sdr_{t:g}mm"] = r.sdr.get(t, float("nan"))
    return row


def write_table_csv(path, reports: dict):
    """Table-shaped CSV: one row per labelled report, MRE/std/SDR columns per group."""
    rows = [{"config": label, **table_row(rep)} for label, rep in reports.items()]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


def summarize(errors_mm: dict, errors_px: dict, groups_of: dict, std_mode: str = "pooled") -> EvalReport:
    if std_mode not in ("pooled", "per_image"):
        raise ConfigError("std_mode must be 'pooled' or 'per_image'")
    out = {}
    for g in ("combined",) + GROUPS:
        ids = [i for i in errors_mm if g == "combined" or groups_of[i] == g]
        if not ids:
            out[g] = GroupReport(0, 0, True)
            continue
        e_mm = [np.asarray(errors_mm[i]) for i in ids]
        mean, std = mre(e_mm)
        if std_mode == "per_image":
            std = float(np.std([x.mean() for x in e_mm]))
        out[g] = GroupReport(len(ids), int(sum(x.size for x in e_mm)), False, mean, std,
                             mre([np.asarray(errors_px[i]) for i in ids])[0], sdr(e_mm))
    return EvalReport(errors_mm, errors_px, out, std_mode)


@torch.no_grad()
def predict(net, holistic, images, batch_size: int = 16) -> np.ndarray:
    """Decode (N, K, 2) landmark predictions for an (N, H, W) image array."""
    backbone = getattr(net, "backbone", net)
    backbone.eval()
    dtype = next(backbone.parameters()).dtype
    protos = torch.as_tensor(holistic).to(dtype)
    preds = []
    for i in range(0, len(images), batch_size):
        x = torch.as_tensor(np.asarray(images[i:i + batch_size]), dtype=dtype)[:, None]
        sims = similarity_maps(protos, backbone(x))
        preds.extend(decode_landmarks(s) for s in sims)
    return np.stack(preds)


def evaluate_predictions(dataset: Dataset, preds, std_mode: str = "pooled") -> EvalReport:
    """Score working-resolution predictions; mm errors are measured at native resolution."""
    errors_mm, errors_px, groups_of = {}, {}, {}
    for s, p in zip(dataset, preds):
        errors_px[s.id] = radial_errors(p, s.landmarks).tolist()
        errors_mm[s.id] = radial_errors(s.native_landmarks(p), s.native_landmarks(), s.native_spacing).tolist()
        groups_of[s.id] = s.group
    return summarize(errors_mm, errors_px, groups_of, std_mode)


def evaluate_model(net, bank, dataset: Dataset, std_mode: str = "pooled") -> EvalReport:
    preds = predict(net, bank.holistic, np.stack([s.image for s in dataset]))
    return evaluate_predictions(dataset, preds, std_mode)


def evaluate(checkpoint, dataset: Dataset, std_mode: str = "pooled") -> EvalReport:
    """Evaluate a checkpoint (path or loaded Checkpoint) over ``dataset``."""
    from .checkpoint import load_checkpoint

    ckpt = load_checkpoint(checkpoint) if isinstance(checkpoint, (str, Path)) else checkpoint
    if ckpt.cfg.num_landmarks != dataset.num_landmarks:
        raise ConfigError(
            f"checkpoint expects {ckpt.cfg.num_landmarks} landmarks, dataset has {dataset.num_landmarks}"
        )
    return evaluate_model(ckpt.net, ckpt.bank, dataset, std_mode)
