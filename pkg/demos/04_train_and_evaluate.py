"""End to end on a small corpus: generate, train briefly, evaluate per group.

Run: python demos/04_train_and_evaluate.py  (a few minutes on one core)
The same pipeline is available as `protomark generate/train/eval`.
"""
import tempfile
from pathlib import Path

from protomark.core import preset, split_dataset
from protomark.evaluation import evaluate
from protomark.synthgen import SynthConfig, generate_dataset
from protomark.train import fit

data = generate_dataset(SynthConfig(image_size=(128, 128), counts=(40, 40), seed=5))
train, val, test = split_dataset(data, (0.5, 0.25, 0.25), seed=0)
print(f"{len(train)} train / {len(val)} val / {len(test)} test")

cfg = preset("desk").replace(epochs=6, lr_decay_every_epochs=4)
print(cfg.to_text())

with tempfile.TemporaryDirectory() as tmp:
    best = fit(cfg, train, val, Path(tmp), progress=lambda st, l: print(f"epoch {st.epoch}  loss {l.total:.3f}"))
    report = evaluate(best, test)

for group, r in report.groups.items():
    sdr = "  ".join(f"{t:g}mm {v:5.1f}%" for t, v in r.sdr.items())
    print(f"{group:>10}: MRE {r.mre_mm:.3f} +- {r.mre_std_mm:.3f} mm  SDR {sdr}")
