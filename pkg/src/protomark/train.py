"""Training loop: augmentation, batching, the joint objective, SGD, checkpoints."""

import copy
import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .checkpoint import save_checkpoint
from .core import GROUPS, ConfigError, Dataset, ProtomarkError, RunConfig
from .evaluation import SDR_THRESHOLDS_MM, evaluate_model
from .heatmap import render_heatmaps
from .losses import LossBreakdown, loss_align, loss_mine, loss_reg, loss_total
from .model import LandmarkNet, build_model
from .proto import PrototypeBank, ema_update, instance_prototypes, similarity_maps
from .relmine import draw_mask, encode_positions, normalize_coords, reconstruct_prototypes

log = logging.getLogger(__name__)


class TrainingDiverged(ProtomarkError, RuntimeError):
    pass


@dataclass(frozen=True)
class AugmentSpec:
    brightness: float = 0.1                 # delta drawn from U(-b, b)
    contrast: tuple = (0.9, 1.1)            # factor drawn from U(lo, hi)
    noise_std: tuple = (0.0, 0.02)          # per-image sigma drawn from U(lo, hi)

    @classmethod
    def identity(cls):
        return cls(0.0, (1.0, 1.0), (0.0, 0.0))

    @classmethod
    def from_config(cls, cfg: RunConfig):
        return cls(cfg.brightness, tuple(cfg.contrast), tuple(cfg.noise_std))


def augment(img: np.ndarray, spec: AugmentSpec, rng: np.random.Generator) -> np.ndarray:
    """Photometric jitter: clip(c * (img - 0.5) + 0.5 + b + noise, 0, 1)."""
    img = np.asarray(img, dtype=np.float64)
    b = rng.uniform(-spec.brightness, spec.brightness)
    c = rng.uniform(*spec.contrast)
    sd = rng.uniform(*spec.noise_std)
    noise = rng.standard_normal(img.shape)
    out = img
    # skipped terms keep an identity spec bit-exact
    if c != 1.0:
        out = c * (out - 0.5) + 0.5
    if b != 0.0:
        out = out + b
    if sd != 0.0:
        out = out + sd * noise
    return np.clip(out, 0.0, 1.0)


def lr_at(epoch: int, cfg: RunConfig) -> float:
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    return cfg.lr * cfg.lr_decay_factor ** (epoch // cfg.lr_decay_every_epochs)


@dataclass
class TrainState:
    net: LandmarkNet
    bank: PrototypeBank
    optimizer: torch.optim.Optimizer
    rng: np.random.Generator
    epoch: int = 0
    step: int = 0

    def clone(self) -> "TrainState":
        net = copy.deepcopy(self.net)
        opt = make_optimizer(net, self.optimizer.defaults)
        opt.load_state_dict(copy.deepcopy(self.optimizer.state_dict()))
        return TrainState(net, copy.deepcopy(self.bank), opt, copy.deepcopy(self.rng), self.epoch, self.step)


def make_optimizer(net, defaults):
    return torch.optim.SGD(net.parameters(), lr=defaults["lr"], momentum=defaults["momentum"],
                           weight_decay=defaults["weight_decay"])


def init_state(cfg: RunConfig, seed: int | None = None, dtype=torch.float32) -> TrainState:
    seed = cfg.seed if seed is None else seed
    net = build_model(cfg, seed, dtype)
    opt = make_optimizer(net, {"lr": cfg.lr, "momentum": cfg.momentum, "weight_decay": cfg.weight_decay})
    bank = PrototypeBank(cfg.num_landmarks, cfg.feature_dim, cfg.alpha)
    # separate stream from weight init so data order does not depend on model size
    rng = np.random.default_rng([seed, 1])
    return TrainState(net, bank, opt, rng)


def batch_tensors(samples, cfg: RunConfig, dtype=torch.float32, images=None):
    """Stack images, target heatmaps and normalized coordinates for a batch."""
    h, w = cfg.image_size
    for s in samples:
        if s.shape != (h, w):
            raise ConfigError(f"sample {s.id!r} is {s.shape}, config expects {(h, w)}")
    imgs = np.stack(images if images is not None else [s.image for s in samples])
    heat = np.stack([render_heatmaps(s.landmarks, h, w, cfg.sigma_px) for s in samples])
    coords = np.stack([normalize_coords(s.landmarks, h, w) for s in samples])
    return (torch.as_tensor(imgs, dtype=dtype)[:, None], torch.as_tensor(heat, dtype=dtype),
            torch.as_tensor(coords, dtype=dtype))


def compute_losses(net, images, heat, coords, masks, cfg: RunConfig, bank,
                   mine_target=None) -> tuple[LossBreakdown, torch.Tensor]:
    """Joint objective for one batch.

    ``bank`` is either a PrototypeBank, which receives its EMA step from this
    batch before the similarity maps are taken, or a fixed (K, D) tensor (used
    for gradient checks). ``mine_target`` pins the stop-gradient target of the
    mining loss to given values; by default it is the detached instance
    prototypes of this batch. Returns the breakdown and the instance prototypes.
    """
    feats = net.backbone(images)
    protos = instance_prototypes(feats, heat)
    if isinstance(bank, PrototypeBank):
        ema_update(bank, protos)
        holistic = bank.holistic
    else:
        holistic = bank
    holistic = holistic.detach().to(feats.dtype)
    reg = loss_reg(similarity_maps(holistic, feats), heat)
    align = loss_align(protos)

    k = protos.shape[1]
    keep = torch.ones(len(masks), k, 1, dtype=protos.dtype)
    for b, m in enumerate(masks):
        keep[b, list(m.masked_indices)] = 0
    e_pos = encode_positions(net.embedder, coords)
    p_hat = reconstruct_prototypes(net.head, protos * keep, e_pos)
    target = protos if mine_target is None else mine_target
    if cfg.mine_masked_only:
        mine = torch.stack([loss_mine(p_hat[b], target[b], m.masked_indices)
                            for b, m in enumerate(masks)]).mean()
    else:
        mine = loss_mine(p_hat, target)
    return loss_total(reg, align, mine, cfg.lambda1, cfg.lambda2), protos


def train_step(state: TrainState, batch, cfg: RunConfig, spec: AugmentSpec | None = None):
    """One optimizer step on ``batch`` (a list of Samples). Mutates and returns ``state``."""
    if len(batch) < 2:
        raise ValueError("a training batch needs at least two samples")
    spec = AugmentSpec.from_config(cfg) if spec is None else spec
    dtype = next(state.net.parameters()).dtype
    images = [augment(s.image, spec, state.rng) for s in batch]
    masks = [draw_mask(cfg.num_landmarks, cfg.mask_ratio, state.rng) for _ in batch]
    x, heat, coords = batch_tensors(batch, cfg, dtype, images)

    lr = lr_at(state.epoch, cfg)
    for group in state.optimizer.param_groups:
        group["lr"] = lr
    state.net.train()
    state.optimizer.zero_grad(set_to_none=False)
    losses, _ = compute_losses(state.net, x, heat, coords, masks, cfg, state.bank)
    if not torch.isfinite(losses.total):
        raise TrainingDiverged(
            f"non-finite loss at step {state.step} (epoch {state.epoch}): "
            f"reg={float(losses.reg.detach())} align={float(losses.align.detach())} mine={float(losses.mine.detach())}"
        )
    losses.total.backward()
    if cfg.grad_clip:
        torch.nn.utils.clip_grad_norm_(state.net.parameters(), cfg.grad_clip)
    state.optimizer.step()
    for name, p in state.net.named_parameters():
        if not torch.isfinite(p).all():
            raise TrainingDiverged(f"parameter {name} became non-finite at step {state.step}")
    state.step += 1
    return state, losses.as_floats()


def stratified_batches(dataset: Dataset, batch_size: int, rng: np.random.Generator):
    """Shuffled batches for one epoch (``len // batch_size`` of them).

    With both groups present every batch holds floor or ceil of B/2 samples of
    each; the smaller group is re-shuffled and reused when it runs out.
    """
    n_batches = len(dataset) // batch_size
    present = [g for g in GROUPS if any(s.group == g for s in dataset)]
    if len(present) < 2:
        order = rng.permutation(len(dataset))
        return [[dataset[i] for i in order[b * batch_size:(b + 1) * batch_size]] for b in range(n_batches)]

    pools = {g: [i for i, s in enumerate(dataset) if s.group == g] for g in present}
    queues = {g: [] for g in present}

    def take(g, n):
        out = []
        while len(out) < n:
            if not queues[g]:
                queues[g] = [pools[g][j] for j in rng.permutation(len(pools[g]))]
            out.append(queues[g].pop())
        return out

    batches = []
    for b in range(n_batches):
        big, small = (present if b % 2 == 0 else present[::-1])
        idx = take(big, math.ceil(batch_size / 2)) + take(small, batch_size // 2)
        batches.append([dataset[i] for i in idx])
    return batches


def set_deterministic(on: bool = True):
    if on:
        torch.set_num_threads(1)
    torch.use_deterministic_algorithms(on)


TRAIN_LOG_FIELDS = ["step", "epoch", "reg", "align", "mine", "total", "lr"]
VAL_LOG_FIELDS = ["epoch", "mre_px", "mre_mm"] + [f"sdr_{t:g}mm" for t in SDR_THRESHOLDS_MM]


def fit(cfg: RunConfig, train_set: Dataset, val_set: Dataset | None, out_dir, seed: int | None = None,
        progress=None) -> Path:
    """Train for ``cfg.epochs`` epochs, logging and checkpointing under ``out_dir``.

    Returns the best-by-validation-MRE checkpoint, or the last one when no
    validation set is given.
    """
    if len(train_set) == 0:
        raise ConfigError("empty training set")
    if len(train_set) < cfg.batch_size:
        raise ConfigError(f"training set ({len(train_set)}) is smaller than the batch size ({cfg.batch_size})")
    if train_set.num_landmarks != cfg.num_landmarks:
        raise ConfigError(f"dataset has {train_set.num_landmarks} landmarks, config expects {cfg.num_landmarks}")
    if val_set is not None and len(val_set) == 0:
        val_set = None
    seed = cfg.seed if seed is None else seed
    set_deterministic(cfg.deterministic)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.cfg").write_text(cfg.to_text())

    state = init_state(cfg, seed)
    spec = AugmentSpec.from_config(cfg)
    last_dir, best_dir = out / "checkpoints" / "last", out / "checkpoints" / "best"
    ckpt = lambda path: save_checkpoint(path, state.net, state.bank, cfg, epoch=state.epoch,
                                        step=state.step, seed=seed)
    if cfg.epochs == 0:
        return ckpt(last_dir)

    best = math.inf
    with open(out / "train_log.csv", "w", newline="") as tf, open(out / "val_log.csv", "w", newline="") as vf:
        tlog = csv.DictWriter(tf, TRAIN_LOG_FIELDS)
        vlog = csv.DictWriter(vf, VAL_LOG_FIELDS)
        tlog.writeheader()
        vlog.writeheader()
        for epoch in range(cfg.epochs):
            state.epoch = epoch
            for batch in stratified_batches(train_set, cfg.batch_size, state.rng):
                _, losses = train_step(state, batch, cfg, spec)
                tlog.writerow({"step": state.step, "epoch": epoch, "reg": repr(losses.reg),
                               "align": repr(losses.align), "mine": repr(losses.mine),
                               "total": repr(losses.total), "lr": repr(lr_at(epoch, cfg))})
                if cfg.max_steps and state.step >= cfg.max_steps:
                    break
            tf.flush()
            if val_set is not None:
                rep = evaluate_model(state.net, state.bank, val_set).combined
                vlog.writerow({"epoch": epoch, "mre_px": repr(rep.mre_px), "mre_mm": repr(rep.mre_mm),
                               **{f"sdr_{t:g}mm": repr(v) for t, v in rep.sdr.items()}})
                vf.flush()
                if rep.mre_mm < best:
                    best = rep.mre_mm
                    ckpt(best_dir)
                log.info("epoch %d  step %d  loss %.4f  val MRE %.3f px", epoch, state.step, losses.total, rep.mre_px)
            if progress is not None:
                progress(state, losses)
            if cfg.max_steps and state.step >= cfg.max_steps:
                break
    state.epoch += 1
    ckpt(last_dir)
    return best_dir if val_set is not None and best_dir.exists() else last_dir
