"""Command-line entry point: generate, train, eval, ablate, report."""

import argparse
import csv
import logging
import statistics
import sys
from pathlib import Path

from . import __version__
from .core import ConfigError, ProtomarkError, RunConfig, load_dataset, preset, split_dataset

log = logging.getLogger("protomark")

ABLATION_CONFIGS = {
    "reg": {"lambda1": 0.0, "lambda2": 0.0},
    "reg+align": {"lambda2": 0.0},
    "full": {},
}


def _size(text):
    parts = text.lower().replace("x", ",").split(",")
    try:
        vals = tuple(int(p) for p in parts if p.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad image size {text!r}") from None
    if len(vals) == 1:
        vals = vals * 2
    if len(vals) != 2:
        raise argparse.ArgumentTypeError(f"bad image size {text!r}")
    return vals


def _floats(text):
    try:
        return tuple(float(p) for p in text.split(",") if p.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _run_options(p):
    p.add_argument("--config", type=Path, help="key=value config file")
    p.add_argument("--preset", choices=["paper", "desk"], default="desk")
    p.add_argument("--seed", type=int)
    p.add_argument("--image-size", type=_size)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lambda1", type=float)
    p.add_argument("--lambda2", type=float)
    p.add_argument("--mask-ratio", type=float)
    p.add_argument("--max-steps", type=int)


def build_parser():
    parser = argparse.ArgumentParser(prog="protomark", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", required=True)

    g = sub.add_parser("generate", help="write a synthetic two-domain corpus")
    g.add_argument("--out", type=Path, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--image-size", type=_size, default=(128, 128))
    g.add_argument("--num-landmarks", type=int, default=10)
    g.add_argument("--counts", type=int, nargs=2, default=(250, 250), metavar=("ADULT", "ADOLESCENT"))
    g.add_argument("--shift", type=float, default=4.0, help="adolescent landmark shift (px)")
    g.add_argument("--distractors", type=float, default=3.0)
    g.add_argument("--spacing", type=float, default=0.1)

    t = sub.add_parser("train", help="train on a corpus and evaluate on its test split")
    _run_options(t)
    t.add_argument("--corpus", type=Path, required=True)
    t.add_argument("--out", type=Path, required=True)
    t.add_argument("--split", type=_floats, default=(0.4, 0.3, 0.3))

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", type=Path, required=True)
    e.add_argument("--corpus", type=Path, required=True)
    e.add_argument("--out", type=Path, required=True)
    e.add_argument("--split", type=_floats, help="evaluate only the test part of this split")
    e.add_argument("--split-seed", type=int, default=0)
    e.add_argument("--std-mode", choices=["pooled", "per_image"], default="pooled")

    a = sub.add_parser("ablate", help="loss-term ablation and mask-ratio sweep")
    _run_options(a)
    a.add_argument("--corpus", type=Path, required=True)
    a.add_argument("--test-corpus", type=Path, help="held-out corpus; otherwise the corpus is split")
    a.add_argument("--out", type=Path, required=True)
    a.add_argument("--split", type=_floats, default=(0.4, 0.3, 0.3))
    a.add_argument("--seeds", type=int, default=5)
    a.add_argument("--configs", default="reg,reg+align,full")
    a.add_argument("--r-grid", type=_floats, default=(0.1, 0.3, 0.5, 0.7, 0.9))
    a.add_argument("--sweep-seeds", type=int, default=1)
    mode = a.add_mutually_exclusive_group()
    mode.add_argument("--no-sweep", action="store_true", help="skip the mask-ratio sweep")
    mode.add_argument("--sweep-only", action="store_true", help="skip the loss-term ablation table")

    r = sub.add_parser("report", help="re-render tables and plots of a run or ablation directory")
    r.add_argument("--out", type=Path, required=True)
    return parser


def resolve_config(args) -> RunConfig:
    cfg = preset(args.preset)
    if args.config is not None:
        if not args.config.is_file():
            raise ConfigError(f"config file not found: {args.config}")
        cfg = RunConfig.from_file(args.config, base=cfg)
    overrides = {k: getattr(args, k) for k in ("seed", "image_size", "epochs", "lambda1", "lambda2",
                                               "mask_ratio", "max_steps")}
    return cfg.replace(**{k: v for k, v in overrides.items() if v is not None})


def write_manifest(out: Path, argv, cfg: RunConfig | None = None, **extra):
    out.mkdir(parents=True, exist_ok=True)
    lines = [f"version={__version__}", f"argv={' '.join(argv)}"]
    lines += [f"{k}={v}" for k, v in extra.items()]
    if cfg is not None:
        lines += [f"config.{line}" for line in cfg.to_text().splitlines()]
    (out / "run_manifest.txt").write_text("\n".join(lines) + "\n")


# -- verbs --------------------------------------------------------------------


def cmd_generate(args, argv):
    from .synthgen import SynthConfig, generate_corpus

    cfg = SynthConfig(tuple(args.image_size), args.num_landmarks, tuple(args.counts), args.shift,
                      args.distractors, args.spacing, args.seed)
    generate_corpus(cfg, args.out)
    write_manifest(args.out, argv, seed=args.seed, **{f"synth.{k}": v for k, v in vars(cfg).items()})
    print(f"wrote {sum(cfg.counts)} samples to {args.out}")


def _train_one(cfg, train, val, test, out: Path):
    from .evaluation import evaluate
    from .train import fit

    ckpt = fit(cfg, train, val, out)
    rep = evaluate(ckpt, test)
    rep.save(out, label=out.name)
    return rep


def cmd_train(args, argv):
    cfg = resolve_config(args)
    data = load_dataset(args.corpus, cfg.image_size)
    train, val, test = split_dataset(data, args.split, cfg.seed)
    write_manifest(args.out, argv, cfg, corpus=args.corpus, split=",".join(map(str, args.split)),
                   n_train=len(train), n_val=len(val), n_test=len(test))
    rep = _train_one(cfg, train, val, test, args.out)
    _plot_run(args.out)
    c = rep.combined
    print(f"test MRE {c.mre_mm:.3f} mm ({c.mre_px:.2f} px), SDR@2mm {c.sdr[2.0]:.2f}%")


def cmd_eval(args, argv):
    from .checkpoint import load_checkpoint
    from .evaluation import evaluate

    ckpt = load_checkpoint(args.checkpoint)
    data = load_dataset(args.corpus, ckpt.cfg.image_size)
    if args.split:
        data = split_dataset(data, args.split, args.split_seed)[2]
    rep = evaluate(ckpt, data, args.std_mode)
    write_manifest(args.out, argv, ckpt.cfg, checkpoint=args.checkpoint, corpus=args.corpus)
    rep.save(args.out, label=args.checkpoint.name)
    c = rep.combined
    print(f"MRE {c.mre_mm:.3f} mm ({c.mre_px:.2f} px) over {c.n_samples} samples")


def _ablation_row(label, seed, cfg, rep):
    from .evaluation import table_row

    return {"config": label, "seed": seed, "mask_ratio": cfg.mask_ratio, "lambda1": cfg.lambda1,
            "lambda2": cfg.lambda2, "mre_px": rep.combined.mre_px, **table_row(rep)}


def _with_medians(rows, key):
    out = list(rows)
    for label in dict.fromkeys(r[key] for r in rows):
        group = [r for r in rows if r[key] == label]
        med = {k: statistics.median(r[k] for r in group) for k in group[0] if k not in ("config", "seed")}
        out.append({**med, key: label, "seed": "median"})
    return out


def _write_rows(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


def cmd_ablate(args, argv):
    base = resolve_config(args)
    data = load_dataset(args.corpus, base.image_size)
    if args.test_corpus:
        train, val, test = data, None, load_dataset(args.test_corpus, base.image_size)
    else:
        train, val, test = split_dataset(data, args.split, base.seed)
    labels = [c.strip() for c in args.configs.split(",") if c.strip()]
    unknown = set(labels) - set(ABLATION_CONFIGS)
    if unknown:
        raise ConfigError(f"unknown ablation config(s) {sorted(unknown)}; choose from {list(ABLATION_CONFIGS)}")
    write_manifest(args.out, argv, base, corpus=args.corpus, test_corpus=args.test_corpus or "",
                   seeds=args.seeds, configs=",".join(labels),
                   r_grid="" if args.no_sweep else ",".join(map(str, args.r_grid)))

    rows = []
    for label in ([] if args.sweep_only else labels):
        for s in range(args.seeds):
            cfg = base.replace(seed=base.seed + s, **ABLATION_CONFIGS[label])
            rep = _train_one(cfg, train, val, test, args.out / "runs" / label / f"seed{s}")
            rows.append(_ablation_row(label, cfg.seed, cfg, rep))
            log.info("%s seed %d: MRE %.3f px", label, cfg.seed, rep.combined.mre_px)
            _write_rows(args.out / "ablation.csv", _with_medians(rows, "config"))

    if not args.no_sweep:
        sweep = []
        for r in args.r_grid:
            for s in range(args.sweep_seeds):
                cfg = base.replace(seed=base.seed + s, mask_ratio=r)
                rep = _train_one(cfg, train, val, test, args.out / "sweep" / f"R{r:g}" / f"seed{s}")
                sweep.append(_ablation_row(f"R={r:g}", cfg.seed, cfg, rep))
                _write_rows(args.out / "mask_ratio.csv", sweep)
    _plot_ablation(args.out)
    print(f"ablation written to {args.out}")


def cmd_report(args, argv):
    out = args.out
    if not out.is_dir():
        raise ConfigError(f"no such directory: {out}")
    made = _plot_run(out) + _plot_ablation(out)
    if not made:
        raise ConfigError(f"{out} contains neither training logs nor ablation tables")
    for p in made:
        print(p)


# -- plots (informational) ------------------------------------------------------


def _read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def _plot_run(out: Path) -> list:
    made = []
    if (out / "train_log.csv").is_file():
        rows = _read_csv(out / "train_log.csv")
        if rows:
            plt = _pyplot()
            fig, ax = plt.subplots(figsize=(6, 4))
            steps = [int(r["step"]) for r in rows]
            for key in ("total", "reg", "align", "mine"):
                ax.plot(steps, [float(r[key]) for r in rows], label=key, lw=0.8)
            ax.set_yscale("log")
            ax.set_xlabel("step")
            ax.legend()
            fig.tight_layout()
            fig.savefig(out / "loss_curves.png", dpi=100)
            plt.close(fig)
            made.append(out / "loss_curves.png")
    return made


def _plot_ablation(out: Path) -> list:
    made = []
    path = out / "mask_ratio.csv"
    if path.is_file():
        rows = [r for r in _read_csv(path) if r["seed"] != "median"]
        by_r = {}
        for r in rows:
            by_r.setdefault(float(r["mask_ratio"]), []).append(float(r["combined_mre_mm"]))
        pts = sorted((k, statistics.median(v)) for k, v in by_r.items())
        _write_rows(out / "mre_vs_mask_ratio.csv", [{"mask_ratio": k, "median_mre_mm": v} for k, v in pts])
        plt = _pyplot()
        fig, ax = plt.subplots(figsize=(4, 3))
        ax.plot([p[0] for p in pts], [p[1] for p in pts], "o-")
        ax.set_xlabel("mask ratio R")
        ax.set_ylabel("test MRE (mm)")
        fig.tight_layout()
        fig.savefig(out / "mre_vs_mask_ratio.png", dpi=100)
        plt.close(fig)
        made += [out / "mre_vs_mask_ratio.csv", out / "mre_vs_mask_ratio.png"]
    return made


VERBS = {"generate": cmd_generate, "train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate,
         "report": cmd_report}


def run(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        VERBS[args.verb](args, argv)
    except (ProtomarkError, ValueError, OSError) as e:
        msg = " ".join(str(e).split())
        print(f"protomark {args.verb}: error: {msg}", file=sys.stderr)
        return 1
    return 0


def main():
    sys.exit(run())
