"""Extract and visualize cross-attention maps.

Runs a forward pass on a noised ground-truth scene, aggregates the per-layer
attention records into one (H, W, n) map, and writes a heatmap PNG per token.
Uses an untrained model by default; point CKPT at a training checkpoint to
see calibrated maps instead.
"""
from pathlib import Path

import torch

from ctcal_lab import evaluation, models, prompts, scenes, schedules, training

CKPT = None  # e.g. "demo_out/train_tiny/ctcal/checkpoint.bin"
OUT = Path("demo_out/attention_maps")

if CKPT:
    model, _ = training.load_model_from_checkpoint(CKPT)
else:
    torch.manual_seed(0)
    model = models.build_model(models.ModelConfig(d_model=16, heads=4, depth=4))
model.eval()

prompt = scenes.sample_scene(3, num_subjects=2, relation_mode="spatial")
sample = scenes.render_scene(prompt)
print(f"prompt: '{prompt.text}'")

# noise the clean render to a mid-range timestep, as the student branch sees it
schedule = schedules.NoiseSchedule("ddpm_linear")
x0 = torch.from_numpy(sample.image).float()
t = 400
rng = torch.Generator().manual_seed(0)
x_t = schedules.add_noise(x0, torch.randn(x0.shape, generator=rng), t, schedule)

ids = torch.tensor(prompts.token_ids(prompt.tokens))
with torch.no_grad():
    _, records = model(x_t, ids, t)
print(f"{len(records)} attention records at resolutions "
      f"{[r.query_hw for r in records]}")

amap = models.aggregate_attention(records, model.cfg)
paths = evaluation.render_heatmaps(amap, prompt.tokens, OUT)
evaluation.save_image_png(sample.image, OUT / "scene.png", upscale=8)
for p in paths:
    print(f"  {p}")

# per-noun alignment against the ground-truth masks
vals = amap.values if amap.values.dim() == 3 else amap.values[0]
for pos, mask in sample.masks.items():
    iou = evaluation.soft_iou(vals[:, :, pos].numpy(), mask)
    print(f"soft IoU for '{prompt.tokens[pos].surface}': {iou:.3f}")
