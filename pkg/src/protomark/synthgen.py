"""Two-domain synthetic skull-analog corpus.

Both domains share one landmark template. Adolescent samples additionally get
a smooth per-landmark displacement field (the drawn anatomy follows it, so the
landmarks stay visually defined), distractor blobs near the tooth anchors, and
a different intensity response.
"""

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import Dataset, DatasetError, Sample, save_dataset

# (x, y) anchors in a unit frame; the first ten are named after their skull role
_BASE_ANCHORS = np.array([
    [0.42, 0.36],  # sella
    [0.80, 0.30],  # nasion
    [0.74, 0.40],  # orbitale
    [0.20, 0.44],  # porion
    [0.78, 0.56],  # anterior nasal spine
    [0.50, 0.58],  # posterior nasal spine
    [0.76, 0.66],  # upper incisor tip
    [0.73, 0.72],  # lower incisor tip
    [0.66, 0.88],  # menton
    [0.32, 0.78],  # gonion
])
_TOOTH_ANCHORS = (6, 7)


def template_anchors(k: int) -> np.ndarray:
    if k <= len(_BASE_ANCHORS):
        return _BASE_ANCHORS[:k].copy()
    extra = np.random.default_rng(12345).uniform(0.25, 0.75, size=(k - len(_BASE_ANCHORS), 2))
    return np.vstack([_BASE_ANCHORS, extra])


@dataclass(frozen=True)
class SynthConfig:
    image_size: tuple = (128, 128)
    num_landmarks: int = 10
    counts: tuple = (250, 250)          # (adult, adolescent)
    shift_px: float = 4.0
    distractors: float = 3.0            # mean blobs per adolescent image
    spacing: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if min(self.counts) < 1:
            raise ValueError("each domain needs at least one sample")
        if self.shift_px < 0:
            raise ValueError("shift magnitude must be non-negative")
        if self.num_landmarks < 2:
            raise ValueError("need at least two landmarks")
        if min(self.image_size) < 8:
            raise ValueError("image too small")


def _similarity_transform(rng, h, w):
    scale = rng.uniform(0.92, 1.08)
    theta = math.radians(rng.uniform(-5, 5))
    t = rng.uniform(-0.04, 0.04, size=2)
    c, s = math.cos(theta), math.sin(theta)
    rot = scale * np.array([[c, -s], [s, c]])
    size = np.array([w - 1, h - 1], dtype=np.float64)

    def apply(unit_pts):
        p = (np.asarray(unit_pts) - 0.5) @ rot.T + 0.5 + t
        return p * size

    return apply, scale


def _offset_field(rng, anchors_unit, magnitude):
    """Smooth displacement: direction rotates slowly across the template."""
    if magnitude == 0:
        return np.zeros_like(anchors_unit)
    base = rng.uniform(0, 2 * math.pi)
    swirl = rng.uniform(-1.5, 1.5, size=2)
    ang = base + anchors_unit @ swirl
    mag = magnitude * rng.uniform(0.75, 1.25)
    return mag * np.stack([np.cos(ang), np.sin(ang)], axis=1)


def _segment_dist(px, py, a, b):
    ab = b - a
    t = np.clip(((px - a[0]) * ab[0] + (py - a[1]) * ab[1]) / max(ab @ ab, 1e-12), 0, 1)
    return np.hypot(px - (a[0] + t * ab[0]), py - (a[1] + t * ab[1]))


def _stroke(dist, width, soft=0.8):
    return 1.0 / (1.0 + np.exp((dist - width) / soft))


def _polyline(canvas, px, py, pts, width, value):
    for a, b in zip(pts[:-1], pts[1:]):
        canvas[:] = np.maximum(canvas, value * _stroke(_segment_dist(px, py, a, b), width))


def _render(lms, transform, scale, h, w, rng, adolescent, distractors, k):
    px, py = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    u = min(h, w) / 128.0  # stroke widths scale with image size
    img = 0.12 + 0.04 * rng.standard_normal((h, w))

    # cranium outline
    ang = np.linspace(0, 2 * math.pi, 64)
    ellipse = transform(np.stack([0.5 + 0.34 * np.cos(ang), 0.42 + 0.30 * np.sin(ang)], axis=1))
    shell = np.zeros((h, w))
    _polyline(shell, px, py, ellipse, 1.6 * u * scale, 0.45)

    # jaw passes through gonion, menton and lower incisor so it follows their shifts
    jaw = np.zeros((h, w))
    jaw_pts = [transform([[0.22, 0.55]])[0]]
    for j in (9, 8, 7):
        if j < k:
            jaw_pts.append(lms[j])
    if len(jaw_pts) > 1:
        _polyline(jaw, px, py, np.array(jaw_pts), 1.4 * u * scale, 0.5)

    # tooth marks hang from the incisor anchors
    teeth = np.zeros((h, w))
    for j in _TOOTH_ANCHORS:
        if j < k:
            for dx in (-4.0, -8.0):
                a = lms[j] + np.array([dx * u, -2.0 * u])
                _polyline(teeth, px, py, np.array([a, a + np.array([0.0, 5.0 * u])]), 1.0 * u, 0.35)

    # every landmark sits on a bright dot with a landmark-specific tick orientation
    marks = np.zeros((h, w))
    for j in range(k):
        d = np.hypot(px - lms[j, 0], py - lms[j, 1])
        marks = np.maximum(marks, 0.9 * np.exp(-d**2 / (2 * (1.2 * u) ** 2)))
        phi = 2 * math.pi * j / k
        tip = lms[j] + 6.0 * u * np.array([math.cos(phi), math.sin(phi)])
        _polyline(marks, px, py, np.array([lms[j], tip]), 1.0 * u, 0.6)

    img = np.maximum.reduce([img, shell, jaw, teeth, marks])
    if adolescent:
        # unerupted-tooth analogs: bright blobs scattered around the tooth region
        n_blobs = rng.poisson(distractors)
        centers = [lms[j] for j in _TOOTH_ANCHORS if j < k] or [lms[0]]
        for _ in range(n_blobs):
            c = centers[rng.integers(len(centers))] + rng.normal(0, 7.0 * u, size=2)
            d = np.hypot(px - c[0], py - c[1])
            r = rng.uniform(1.5, 3.0) * u
            img = np.maximum(img, rng.uniform(0.5, 0.85) * np.exp(-d**2 / (2 * r**2)))
        img = 0.08 + 0.84 * img**0.8
    return np.clip(img, 0.0, 1.0)


def generate_sample(cfg: SynthConfig, domain: str, rng: np.random.Generator, sample_id: str = "") -> Sample:
    h, w = cfg.image_size
    k = cfg.num_landmarks
    anchors = template_anchors(k)
    for _ in range(100):
        transform, scale = _similarity_transform(rng, h, w)
        base = transform(anchors)
        offsets = _offset_field(rng, anchors, cfg.shift_px) if domain == "adolescent" else 0.0
        lms = base + offsets
        if np.all((lms >= 0) & (lms <= np.array([w - 1, h - 1]))):
            break
    else:
        raise DatasetError(f"could not place landmarks in bounds after 100 attempts (shift={cfg.shift_px})")
    img = _render(lms, transform, scale, h, w, rng, domain == "adolescent", cfg.distractors, k)
    meta = {"template": base.tolist()}
    return Sample(sample_id or domain, img, lms, cfg.spacing, domain, meta)


def generate_dataset(cfg: SynthConfig) -> Dataset:
    """Adult samples first, then adolescent; each sample has its own rng stream."""
    samples = []
    for g, (domain, n) in enumerate(zip(("adult", "adolescent"), cfg.counts)):
        for i in range(n):
            rng = np.random.default_rng([cfg.seed, g, i])
            samples.append(generate_sample(cfg, domain, rng, f"{domain}_{i:04d}"))
    return Dataset(tuple(samples), cfg.num_landmarks)


def generate_corpus(cfg: SynthConfig, out) -> Path:
    out = Path(out)
    try:
        return save_dataset(generate_dataset(cfg), out)
    except OSError as e:
        raise DatasetError(f"failed to write corpus under {out}: {e}") from e
