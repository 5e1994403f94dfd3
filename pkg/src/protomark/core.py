"""Shared domain types, corpus I/O and run configuration."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

GROUPS = ("adult", "adolescent")
SCHEMA_VERSION = 1
_TOP_LEVEL_KEYS = {"version", "num_landmarks", "samples"}
_SAMPLE_KEYS = {"id", "image", "group", "spacing_mm_per_px", "landmarks"}


class ProtomarkError(Exception):
    """Base class for all package errors."""


class DatasetError(ProtomarkError, ValueError):
    """Corpus is missing, malformed, or violates a sample invariant."""


class ConfigError(ProtomarkError, ValueError):
    """Invalid configuration or call arguments."""


class ShapeError(ProtomarkError, ValueError):
    """Array shapes do not agree."""


def check_image(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise ShapeError(f"image must be 2-D, got shape {img.shape}")
    if img.shape[0] < 8 or img.shape[1] < 8:
        raise ShapeError(f"image must be at least 8x8, got {img.shape}")
    if not np.all(np.isfinite(img)) or img.min() < 0.0 or img.max() > 1.0:
        raise DatasetError("image values must be finite and within [0, 1]")
    return img


def check_landmarks(coords: np.ndarray, height: int, width: int, name: str = "") -> np.ndarray:
    """Validate a (K, 2) array of (x, y) pixel coordinates against image bounds."""
    coords = np.asarray(coords, dtype=np.float64)
    if coords.ndim != 2 or coords.shape[1] != 2:
        raise ShapeError(f"landmarks{name and ' of ' + name} must have shape (K, 2), got {coords.shape}")
    if not np.all(np.isfinite(coords)):
        raise DatasetError(f"non-finite landmark coordinates in sample {name!r}")
    x, y = coords[:, 0], coords[:, 1]
    bad = (x < 0) | (x > width - 1) | (y < 0) | (y > height - 1)
    if bad.any():
        k = int(np.flatnonzero(bad)[0])
        raise DatasetError(
            f"landmark {k} of sample {name!r} at (x={x[k]:g}, y={y[k]:g}) "
            f"is outside a {width}x{height} image"
        )
    return coords


@dataclass(frozen=True)
class Sample:
    """One annotated image.

    ``image`` is an (H, W) float array in [0, 1]; ``landmarks`` holds K rows of
    (x = column, y = row) in pixels. ``meta`` records resize bookkeeping so that
    predictions can be mapped back to native resolution.
    """

    id: str
    image: np.ndarray
    landmarks: np.ndarray
    spacing: float
    group: str
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        img = check_image(self.image)
        lms = check_landmarks(self.landmarks, *img.shape, name=self.id)
        if not self.spacing > 0:
            raise DatasetError(f"sample {self.id!r}: spacing must be positive")
        if self.group not in GROUPS:
            raise DatasetError(f"sample {self.id!r}: unknown group {self.group!r}")
        object.__setattr__(self, "image", img)
        object.__setattr__(self, "landmarks", lms)

    @property
    def shape(self) -> tuple[int, int]:
        return self.image.shape

    def native_landmarks(self, coords: np.ndarray | None = None) -> np.ndarray:
        """Map working-resolution coordinates (default: the annotations) to native pixels."""
        coords = self.landmarks if coords is None else np.asarray(coords, dtype=np.float64)
        sx, sy = self.meta.get("scale", (1.0, 1.0))
        return coords / np.array([sx, sy])

    @property
    def native_spacing(self) -> float:
        return float(self.meta.get("native_spacing", self.spacing))


@dataclass(frozen=True)
class Dataset:
    samples: tuple[Sample, ...]
    num_landmarks: int

    def __post_init__(self):
        object.__setattr__(self, "samples", tuple(self.samples))
        ids = [s.id for s in self.samples]
        if len(set(ids)) != len(ids):
            raise DatasetError("sample ids must be unique")
        for s in self.samples:
            if s.landmarks.shape[0] != self.num_landmarks:
                raise DatasetError(
                    f"sample {s.id!r} has {s.landmarks.shape[0]} landmarks, "
                    f"expected {self.num_landmarks}"
                )

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    def by_group(self, group: str) -> "Dataset":
        return Dataset(tuple(s for s in self.samples if s.group == group), self.num_landmarks)

    @property
    def groups(self) -> list[str]:
        return [g for g in GROUPS if any(s.group == g for s in self.samples)]


# --------------------------------------------------------------------------
# corpus I/O


def _read_png(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im)
        mode = im.mode
    if arr.ndim == 3:
        raise DatasetError(f"{path}: expected a single-channel grayscale image, got mode {mode}")
    if arr.dtype == np.uint8:
        return arr.astype(np.float64) / 255.0
    if arr.dtype in (np.uint16, np.int32, np.int16) or mode.startswith("I"):
        return np.clip(arr.astype(np.float64) / 65535.0, 0.0, 1.0)
    if arr.dtype == bool:
        return arr.astype(np.float64)
    raise DatasetError(f"{path}: unsupported pixel type {arr.dtype}")


def _resize(img: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    h, w = size
    out = Image.fromarray(img.astype(np.float32), mode="F").resize((w, h), Image.BILINEAR)
    return np.clip(np.asarray(out, dtype=np.float64), 0.0, 1.0)


def _validate_annotations(doc, root: Path):
    if not isinstance(doc, dict):
        raise DatasetError("annotations.json: top level must be an object")
    unknown = set(doc) - _TOP_LEVEL_KEYS
    if unknown:
        raise DatasetError(f"annotations.json: unknown top-level key(s) {sorted(unknown)}")
    for key in _TOP_LEVEL_KEYS:
        if key not in doc:
            raise DatasetError(f"annotations.json: missing field {key!r}")
    if doc["version"] != SCHEMA_VERSION:
        raise DatasetError(f"annotations.json: field 'version' must be {SCHEMA_VERSION}")
    k = doc["num_landmarks"]
    if not isinstance(k, int) or isinstance(k, bool) or k < 1:
        raise DatasetError("annotations.json: field 'num_landmarks' must be a positive integer")
    if not isinstance(doc["samples"], list):
        raise DatasetError("annotations.json: field 'samples' must be a list")
    for i, rec in enumerate(doc["samples"]):
        where = f"samples[{i}]"
        if not isinstance(rec, dict):
            raise DatasetError(f"annotations.json: {where} must be an object")
        missing = _SAMPLE_KEYS - set(rec)
        if missing:
            raise DatasetError(f"annotations.json: {where} missing field(s) {sorted(missing)}")
        extra = set(rec) - _SAMPLE_KEYS
        if extra:
            raise DatasetError(f"annotations.json: {where} has unknown field(s) {sorted(extra)}")
        sid = rec["id"]
        if not isinstance(sid, str):
            raise DatasetError(f"annotations.json: {where}.id must be a string")
        if not isinstance(rec["image"], str):
            raise DatasetError(f"annotations.json: sample {sid!r} field 'image' must be a path string")
        if rec["group"] not in GROUPS:
            raise DatasetError(f"annotations.json: sample {sid!r} field 'group' must be one of {GROUPS}")
        sp = rec["spacing_mm_per_px"]
        if not isinstance(sp, (int, float)) or isinstance(sp, bool) or not sp > 0:
            raise DatasetError(f"annotations.json: sample {sid!r} field 'spacing_mm_per_px' must be positive")
        lms = rec["landmarks"]
        if not isinstance(lms, list) or len(lms) != k:
            n = len(lms) if isinstance(lms, list) else "non-list"
            raise DatasetError(
                f"annotations.json: sample {sid!r} field 'landmarks' has {n} entries, expected {k}"
            )
        for pt in lms:
            if (not isinstance(pt, list) or len(pt) != 2
                    or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in pt)):
                raise DatasetError(f"annotations.json: sample {sid!r} field 'landmarks' must hold [x, y] pairs")


def load_dataset(root, image_size: tuple[int, int] | None = None) -> Dataset:
    """Load a corpus directory (``images/`` + ``annotations.json``).

    With ``image_size`` set, every image is bilinearly resized to (H, W) and its
    landmarks scaled per axis. The working spacing becomes the native spacing
    divided by the mean of the two scale factors; the exact per-axis factors are
    kept in ``Sample.meta`` for mapping predictions back.
    """
    root = Path(root)
    ann_path = root / "annotations.json"
    if not ann_path.is_file():
        raise DatasetError(f"missing annotation file: {ann_path}")
    try:
        doc = json.loads(ann_path.read_text())
    except json.JSONDecodeError as e:
        raise DatasetError(f"{ann_path}: invalid JSON ({e})") from e
    _validate_annotations(doc, root)

    samples = []
    for rec in doc["samples"]:
        img_path = root / rec["image"]
        if not img_path.is_file():
            raise DatasetError(f"sample {rec['id']!r}: missing image file {img_path}")
        img = _read_png(img_path)
        coords = np.asarray(rec["landmarks"], dtype=np.float64)
        check_landmarks(coords, *img.shape, name=rec["id"])
        spacing = float(rec["spacing_mm_per_px"])
        meta = {"native_size": img.shape, "native_spacing": spacing, "image_path": str(img_path)}
        if image_size is not None and tuple(image_size) != img.shape:
            h0, w0 = img.shape
            h, w = image_size
            # endpoint-aligned so that x = W0-1 maps to W-1 and bounds are preserved
            sx = (w - 1) / (w0 - 1)
            sy = (h - 1) / (h0 - 1)
            img = _resize(img, (h, w))
            coords = coords * np.array([sx, sy])
            spacing = spacing / ((sx + sy) / 2.0)
            meta.update(scale=(sx, sy), spacing_approx="mean-of-axis-scales")
        samples.append(Sample(rec["id"], img, coords, spacing, rec["group"], meta))
    return Dataset(tuple(samples), doc["num_landmarks"])


def save_dataset(dataset: Dataset, root, bit_depth: int = 16) -> Path:
    """Write ``dataset`` in corpus layout. Images are quantized to ``bit_depth`` (8 or 16)."""
    if bit_depth not in (8, 16):
        raise ConfigError("bit_depth must be 8 or 16")
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    records = []
    for s in dataset:
        rel = f"images/{s.id}.png"
        if bit_depth == 8:
            Image.fromarray(np.round(s.image * 255).astype(np.uint8)).save(root / rel)
        else:
            Image.fromarray(np.round(s.image * 65535).astype(np.uint16)).save(root / rel)
        records.append({
            "id": s.id,
            "image": rel,
            "group": s.group,
            "spacing_mm_per_px": float(s.spacing),
            "landmarks": [[float(x), float(y)] for x, y in s.landmarks],
        })
    doc = {"version": SCHEMA_VERSION, "num_landmarks": dataset.num_landmarks, "samples": records}
    (root / "annotations.json").write_text(json.dumps(doc, indent=1))
    return root


def split_dataset(d: Dataset, fractions=(0.4, 0.3, 0.3), seed: int = 0):
    """Stratified (per group) random split into train/val/test datasets."""
    fr = np.asarray(fractions, dtype=np.float64)
    if fr.shape != (3,) or np.any(fr < 0) or abs(fr.sum() - 1.0) > 1e-9:
        raise ConfigError(f"split fractions must be three non-negative numbers summing to 1, got {fractions}")
    rng = np.random.default_rng(seed)
    parts = ([], [], [])
    for g in d.groups:
        idx = [i for i, s in enumerate(d.samples) if s.group == g]
        n = len(idx)
        n_train = int(round(fr[0] * n))
        n_val = int(round(fr[1] * n))
        n_test = n - n_train - n_val
        if min(n_train, n_val, n_test) < 1:
            raise ConfigError(
                f"group {g!r} with {n} samples cannot fill every split at fractions {tuple(fractions)}"
            )
        order = rng.permutation(n)
        chosen = [idx[j] for j in order]
        bounds = (0, n_train, n_train + n_val, n)
        for p in range(3):
            parts[p].extend(chosen[bounds[p]:bounds[p + 1]])
    return tuple(Dataset(tuple(d.samples[i] for i in sorted(p)), d.num_landmarks) for p in parts)


# --------------------------------------------------------------------------
# run configuration


@dataclass
class RunConfig:
    """Every knob of a training run. Defaults are the full-scale published setup."""

    image_size: tuple[int, int] = (512, 512)
    num_landmarks: int = 10
    sigma_px: float = 6.0
    alpha: float = 0.99
    batch_size: int = 8
    lambda1: float = 1.0
    lambda2: float = 3.0
    mask_ratio: float = 0.7
    lr: float = 1e-3
    lr_decay_factor: float = 0.1
    lr_decay_every_epochs: int = 50
    epochs: int = 150
    momentum: float = 0.9
    weight_decay: float = 0.0
    grad_clip: float = 0.0  # max global gradient norm; 0 disables clipping
    seed: int = 0
    widths: tuple[int, int, int] = (64, 32, 16)
    base_width: int = 16
    context_dilations: tuple[int, ...] = (2, 4, 8)  # residual dilated convs at 1/4 res; empty -> none
    head_init_gain: float = 0.1  # std multiplier of the 1x1 feature read-outs
    msa_heads: int = 4
    mlp_hidden: int = 0  # 0 -> use the prototype dimension D
    brightness: float = 0.1
    contrast: tuple[float, float] = (0.9, 1.1)
    noise_std: tuple[float, float] = (0.0, 0.02)
    mine_masked_only: bool = False
    upsample_mode: str = "nearest"
    deterministic: bool = True
    max_steps: int = 0  # 0 -> no cap

    def __post_init__(self):
        self.image_size = tuple(int(v) for v in self.image_size)
        self.widths = tuple(int(v) for v in self.widths)
        self.context_dilations = tuple(int(v) for v in self.context_dilations)
        self.contrast = tuple(float(v) for v in self.contrast)
        self.noise_std = tuple(float(v) for v in self.noise_std)
        self.validate()

    @property
    def feature_dim(self) -> int:
        return sum(self.widths)

    def validate(self):
        def bad(msg):
            raise ConfigError(msg)

        if len(self.image_size) != 2 or min(self.image_size) < 8:
            bad("image_size must be two integers >= 8")
        if any(v % 4 for v in self.image_size):
            bad("image_size must be divisible by 4")
        if self.num_landmarks < 2:
            bad("num_landmarks must be >= 2")
        if not self.sigma_px > 0:
            bad("sigma_px must be positive")
        if not 0 < self.alpha < 1:
            bad("alpha must lie in (0, 1)")
        if self.batch_size < 2:
            bad("batch_size must be >= 2 (alignment needs pairs)")
        if self.lambda1 < 0 or self.lambda2 < 0:
            bad("lambda1 and lambda2 must be non-negative")
        if not 0 <= self.mask_ratio < 1:
            bad("mask_ratio must lie in [0, 1)")
        if len(self.widths) != 3 or min(self.widths) < 1 or self.base_width < 1:
            bad("all channel widths must be >= 1")
        if self.msa_heads < 1 or self.feature_dim % self.msa_heads:
            bad(f"feature dim {self.feature_dim} must be divisible by msa_heads={self.msa_heads}")
        if self.lr <= 0 or self.lr_decay_every_epochs < 1 or self.epochs < 0:
            bad("lr must be positive, lr_decay_every_epochs >= 1, epochs >= 0")
        if self.upsample_mode not in ("nearest", "transposed"):
            bad("upsample_mode must be 'nearest' or 'transposed'")
        if any(d < 1 for d in self.context_dilations):
            bad("context_dilations must be >= 1")
        if self.grad_clip < 0:
            bad("grad_clip must be >= 0")
        if self.mlp_hidden < 0:
            bad("mlp_hidden must be >= 0")

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    # -- plain-text key=value round trip --------------------------------
    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(repr(x) if isinstance(x, float) else str(x) for x in v)
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{f.name}={v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_mapping(cls, values: dict, base: "RunConfig | None" = None) -> "RunConfig":
        base = base or cls()
        kinds = {f.name: type(getattr(base, f.name)) for f in dataclasses.fields(cls)}
        changes = {}
        for key, raw in values.items():
            key = key.replace("-", "_")
            if key not in kinds:
                raise ConfigError(f"unknown config key {key!r}")
            changes[key] = _coerce(key, raw, kinds[key], getattr(base, key))
        return dataclasses.replace(base, **changes)

    @classmethod
    def from_text(cls, text: str, base: "RunConfig | None" = None) -> "RunConfig":
        return cls.from_mapping(parse_kv(text), base)

    @classmethod
    def from_file(cls, path, base: "RunConfig | None" = None) -> "RunConfig":
        return cls.from_text(Path(path).read_text(), base)


def parse_kv(text: str) -> dict[str, str]:
    """Parse ``key=value`` lines; blank lines and ``#`` comments are skipped."""
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _coerce(key, raw, kind, current):
    if not isinstance(raw, str):
        return tuple(raw) if kind is tuple else kind(raw)
    try:
        if kind is bool:
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind is tuple:
            elem = type(current[0]) if current else int
            parts = [p for p in raw.replace("x", ",").split(",") if p.strip()]
            return tuple(elem(p.strip()) for p in parts)
        if kind is int:
            return int(raw)
        return kind(raw)
    except ValueError:
        raise ConfigError(f"config key {key!r}: cannot parse {raw!r}") from None


PRESETS = {
    "paper": {},
    # one CPU core: 128x128, short schedule, clipped SGD, small read-out init
    "desk": {
        "image_size": (128, 128),
        "sigma_px": 3.0,
        "epochs": 12,
        "lr": 3e-3,
        "lr_decay_every_epochs": 8,
        "grad_clip": 10.0,
        "base_width": 8,
        "head_init_gain": 0.03,
    },
}


def preset(name: str) -> RunConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return RunConfig(**PRESETS[name])
