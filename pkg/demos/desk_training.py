"""Train the quantum FPN model on a small synthetic corpus and inspect the run.

Run: python demos/desk_training.py [output_dir]
Takes roughly ten seconds on one core.
"""

import csv
import json
import sys
import tempfile
from pathlib import Path

from qfpn.dataio import generate_synthetic
from qfpn.segnet import ModelConfig
from qfpn.trainer import TrainConfig, train

out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp(prefix="qfpn-desk-"))

records = generate_synthetic(200, 32, empty_fraction=0.2, seed=0)
print(f"corpus: {len(records)} images, {sum(not r.mask.any() for r in records)} without salt")

model_cfg = ModelConfig(topology="fpn", merge_kind="quantum", resolution=32)
train_cfg = TrainConfig(stage1_epochs=3, stage2_epochs=2, batch_size=8, folds=2)
result = train(model_cfg, train_cfg, records, out)

for fold in result.folds:
    print(f"fold {fold.fold}: loss {fold.initial_loss:.4f} -> {fold.final_loss:.4f}, "
          f"angle movement stage1 {fold.quantum_update_stage1:.2e} stage2 {fold.quantum_update_stage2:.2e}")

with open(out / "fold0" / "log.csv", newline="") as fh:
    for row in csv.DictReader(fh):
        ratio = float(row["q_grad_var"]) / 2**-4
        print(f"  epoch {row['epoch']} stage {row['stage']} loss {float(row['loss_total']):.4f} "
              f"q_var/floor {ratio:.2e}")

report = json.loads((out / "oof_report.json").read_text())
print(f"out-of-fold TGS mAP {report['tgs_map']:.4f} at threshold {report['best_threshold']}")
print(f"run written to {out}")
