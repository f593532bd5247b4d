"""Train a tiny model twice: diffusion-only, then with cross-timestep
attention calibration on top.

Both runs share the dataset and seed; the metrics log shows the calibration
terms appearing in the second run. Cut down steps/model size so the script
finishes in about a minute on a laptop CPU.
"""
import json
from pathlib import Path

from ctcal_lab import scenes, training
from ctcal_lab.models import ModelConfig
from ctcal_lab.training import TrainConfig

OUT = Path("demo_out/train_tiny")
DATA = OUT / "data"
if not (DATA / "manifest.json").exists():
    scenes.write_dataset(scenes.generate_dataset(0, 200), DATA)

for mode in ("baseline", "ctcal"):
    config = TrainConfig(
        model=ModelConfig(d_model=16, heads=4, depth=4),
        mode=mode,
        steps=300,
        batch_size=8,
        seed=0,
        checkpoint_every=300,
    )
    ckpt = training.run_training(config, DATA, OUT / mode)
    last = json.loads((OUT / mode / "metrics.jsonl").read_text().splitlines()[-1])
    print(f"{mode:>9}: step {last['step']}  diffusion={last['diffusion']:.4f}  "
          f"pixel={last['pixel']:.4f}  semantic={last['semantic']:.4f}  "
          f"lambda_t={last['lambda_t']:.3f}")
    print(f"           checkpoint -> {ckpt}")
