"""Measurement: sampling, attention/mask IoU curves, the binding oracle,
a pixel-space diversity proxy, and report/heatmap emission.

The binding oracle exploits the synthetic renderer's exact conventions
(gray background, palette colors, shape fill ratios), so it is a rule-based
classifier with no learned components. Attention/mask alignment is scored
with a soft IoU over max-normalized maps; no binarization threshold is
introduced.
"""

from __future__ import annotations

import dataclasses
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from scipy import ndimage

from . import models, prompts, schedules
from .errors import (EmptyDataset, InvalidTimesteps, ShapeMismatch, TooFewImages,
                     UntrainedModel)
from .prompts import PAD_WORD, PromptSpec, Relation, Shape
from .scenes import BACKGROUND, PALETTE, SceneSample

REPORT_VERSION = "ctcal-report-v1"

# bounding-box fill-ratio bands around the analytic values
# (square 1.0, circle pi/4, triangle 1/2), each with >= 0.04 margin
SQUARE_MIN_FILL = 0.90
CIRCLE_FILL = (0.70, 0.86)
TRIANGLE_FILL = (0.42, 0.58)
FOREGROUND_THRESHOLD = 0.15
MIN_COMPONENT_PIXELS = 5


@dataclass
class IoUCurve:
    timesteps: list[int]
    mean_iou: list[float]
    std_iou: list[float]
    sample_count: int


@dataclass
class EvalReport:
    run_id: str
    binding: dict            # per-category accuracy in [0, 1]
    iou_curve: IoUCurve | None
    diversity: float | None
    config: dict
    created_at: float = field(default_factory=time.time)
    version: str = REPORT_VERSION

    def to_json(self) -> str:
        d = dataclasses.asdict(self)
        return json.dumps(d, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        d = json.loads(text)
        curve = d.pop("iou_curve")
        return cls(iou_curve=IoUCurve(**curve) if curve else None, **d)


# ---------------------------------------------------------------------------
# sampling

def generate(model: torch.nn.Module, prompt: PromptSpec | list[int], steps: int = 250,
             guidance_scale: float = 1.0, rng: torch.Generator | None = None,
             schedule: schedules.NoiseSchedule | None = None) -> torch.Tensor:
    """Sample one image: ancestral steps for DDPM, Euler steps for RF.

    Classifier-free guidance runs a second forward on an all-pad prompt:
    pred = uncond + w * (cond - uncond).
    """
    schedule = schedule or schedules.NoiseSchedule("ddpm_linear")
    rng = rng or torch.Generator().manual_seed(0)
    cfg = model.cfg
    if isinstance(prompt, PromptSpec):
        ids = prompts.token_ids(prompt.tokens)
    else:
        ids = list(prompt)
    cond_ids = torch.tensor(ids, dtype=torch.long)[None]
    pad_id = prompts.default_lexicon().lookup(PAD_WORD)[0]
    uncond_ids = torch.full_like(cond_ids, pad_id)

    T = schedule.T_train
    ts = [int(round(T * (1 - i / steps))) for i in range(steps + 1)]  # T .. 0
    x = torch.randn(1, 3, cfg.resolution, cfg.resolution, generator=rng)

    def predict(x_t, t):
        with torch.no_grad():
            cond, _ = model(x_t, cond_ids, t)
            if guidance_scale == 1.0:
                return cond
            uncond, _ = model(x_t, uncond_ids, t)
            return uncond + guidance_scale * (cond - uncond)

    for t_hi, t_lo in zip(ts[:-1], ts[1:]):
        pred = predict(x, t_hi)
        if schedule.kind == "rectified_flow":
            sig_hi = float(schedule.sigma[t_hi])
            sig_lo = float(schedule.sigma[t_lo])
            x = x + (sig_lo - sig_hi) * pred
        else:
            ab_hi = float(schedule.alpha_bar[t_hi])
            ab_lo = float(schedule.alpha_bar[t_lo])
            x0_hat = (x - (1 - ab_hi) ** 0.5 * pred) / ab_hi ** 0.5
            x0_hat = x0_hat.clamp(-0.25, 1.25)
            if t_lo == 0:
                x = x0_hat
            else:
                var = (1 - ab_lo) / (1 - ab_hi) * (1 - ab_hi / ab_lo)
                dir_coeff = max(1 - ab_lo - var, 0.0) ** 0.5
                noise = torch.randn(x.shape, generator=rng)
                x = ab_lo ** 0.5 * x0_hat + dir_coeff * pred + var ** 0.5 * noise
    return x[0].clamp(0.0, 1.0)


# ---------------------------------------------------------------------------
# attention/mask alignment

def _downsample_mask(mask: np.ndarray, h: int, w: int) -> np.ndarray:
    """Area-weighted downsampling of a binary mask to (h, w)."""
    H, W = mask.shape
    if H % h or W % w:
        raise ShapeMismatch(f"mask {mask.shape} not divisible into ({h}, {w})")
    return mask.reshape(h, H // h, w, W // w).mean(axis=(1, 3))


def soft_iou(attn_slice, mask) -> float:
    """Sum-min over sum-max between a max-normalized map and a soft mask."""
    a = np.asarray(attn_slice, dtype=np.float64)
    m = np.asarray(mask, dtype=np.float64)
    if m.shape != a.shape:
        m = _downsample_mask(m, *a.shape)
    peak = a.max()
    if peak <= 0:
        return 0.0
    a = a / peak
    denom = np.maximum(a, m).sum()
    if denom == 0:
        return 0.0
    return float(np.minimum(a, m).sum() / denom)


def iou_vs_timestep(model: torch.nn.Module, dataset: list[SceneSample],
                    timesteps: list[int], noise_seeds: list[int],
                    schedule: schedules.NoiseSchedule | None = None) -> IoUCurve:
    """Noun-attention vs ground-truth-mask soft IoU at each noising level.

    For every (timestep, sample, seed): noise the clean image, run a
    training-mode forward, aggregate attention, and score each noun slice
    against its mask.
    """
    if not dataset:
        raise EmptyDataset("no samples to evaluate")
    if any(b <= a for a, b in zip(timesteps, timesteps[1:])) or not timesteps:
        raise InvalidTimesteps("timesteps must be non-empty and strictly increasing")
    schedule = schedule or schedules.NoiseSchedule("ddpm_linear")
    cfg = model.cfg

    # group samples by token length for batched forwards
    groups: dict[int, list[SceneSample]] = {}
    for s in dataset:
        groups.setdefault(len(s.prompt.tokens), []).append(s)

    mean_iou, std_iou = [], []
    for t in timesteps:
        scores = []
        for group in groups.values():
            x0 = torch.stack([torch.from_numpy(s.image).float() for s in group])
            ids = torch.stack([torch.tensor(prompts.token_ids(s.prompt.tokens))
                               for s in group])
            for seed in noise_seeds:
                gen = torch.Generator().manual_seed(seed)
                eps = torch.randn(x0.shape, generator=gen)
                x_t = schedules.add_noise(x0, eps, t, schedule)
                with torch.no_grad():
                    _, records = model(x_t, ids, t)
                amap = models.aggregate_attention(records, cfg).values.numpy()
                for i, s in enumerate(group):
                    for noun_pos, mask in s.masks.items():
                        scores.append(soft_iou(amap[i, :, :, noun_pos], mask))
        scores = np.asarray(scores)
        mean_iou.append(float(scores.mean()))
        std_iou.append(float(scores.std()))
    return IoUCurve(timesteps=list(timesteps), mean_iou=mean_iou, std_iou=std_iou,
                    sample_count=len(dataset))


def iou_trend(curve: IoUCurve) -> float:
    """Spearman rank correlation between timestep and mean IoU."""
    from scipy.stats import spearmanr
    rho, _ = spearmanr(curve.timesteps, curve.mean_iou)
    return float(rho)


# ---------------------------------------------------------------------------
# binding oracle

def _classify_shape(fill_ratio: float) -> Shape | None:
    if fill_ratio >= SQUARE_MIN_FILL:
        return Shape.SQUARE
    if CIRCLE_FILL[0] <= fill_ratio <= CIRCLE_FILL[1]:
        return Shape.CIRCLE
    if TRIANGLE_FILL[0] <= fill_ratio <= TRIANGLE_FILL[1]:
        return Shape.TRIANGLE
    return None


def find_components(image) -> list[dict]:
    """Connected non-background components with color, shape, and centroid."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ShapeMismatch("expected a (3, H, W) image")
    bg = np.array(BACKGROUND).reshape(3, 1, 1)
    fg = np.abs(img - bg).max(axis=0) > FOREGROUND_THRESHOLD
    labels, n = ndimage.label(fg)
    comps = []
    for k in range(1, n + 1):
        mask = labels == k
        if mask.sum() < MIN_COMPONENT_PIXELS:
            continue
        rows, cols = np.where(mask)
        bbox_area = (rows.max() - rows.min() + 1) * (cols.max() - cols.min() + 1)
        mean_rgb = img[:, mask].mean(axis=1)
        color = min(PALETTE, key=lambda c: np.sum((np.array(PALETTE[c]) - mean_rgb) ** 2))
        comps.append({
            "color": color,
            "shape": _classify_shape(mask.sum() / bbox_area),
            "centroid": (float(rows.mean()), float(cols.mean())),
            "pixels": int(mask.sum()),
        })
    return comps


def _relation_holds(relation: Relation, c1, c2) -> bool:
    if relation is Relation.LEFT_OF:
        return c1[1] < c2[1]
    if relation is Relation.RIGHT_OF:
        return c1[1] > c2[1]
    if relation is Relation.ABOVE:
        return c1[0] < c2[0]
    if relation is Relation.BELOW:
        return c1[0] > c2[0]
    return True


def binding_oracle(image, prompt: PromptSpec) -> dict:
    """Rule-based verdicts on a generated image against its prompt.

    two_object: every requested shape appears. color_binding: additionally,
    each requested shape carries its own requested color. spatial: matched
    subject centroids are ordered per the prompt's relation (vacuously true
    without one).
    """
    comps = find_components(image)
    requested = [(s.shape, s.color) for s in prompt.scene]

    available = list(comps)
    shape_hits = []
    for shape, _ in requested:
        hit = next((c for c in available if c["shape"] is shape), None)
        shape_hits.append(hit)
        if hit is not None:
            available.remove(hit)
    two_object = all(h is not None for h in shape_hits)

    available = list(comps)
    pair_hits = []
    for shape, color in requested:
        hit = next((c for c in available if c["shape"] is shape and c["color"] is color),
                   None)
        pair_hits.append(hit)
        if hit is not None:
            available.remove(hit)
    color_binding = two_object and all(h is not None for h in pair_hits)

    spatial = False
    if prompt.relation is Relation.NONE:
        spatial = two_object
    elif all(h is not None for h in pair_hits):
        spatial = _relation_holds(prompt.relation, pair_hits[0]["centroid"],
                                  pair_hits[1]["centroid"])
    return {"two_object": two_object, "color_binding": color_binding,
            "spatial": spatial, "components": comps}


# ---------------------------------------------------------------------------
# diversity proxy

def _patch_features(image, patch: int = 8) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    c, H, W = img.shape
    gh, gw = H // patch, W // patch
    x = img.reshape(c, gh, patch, gw, patch).transpose(1, 3, 0, 2, 4)
    return x.reshape(gh * gw, c * patch * patch)


def diversity_score(images, patch: int = 8) -> float:
    """Mean pairwise (1 - normalized cross-correlation) over local patches.

    Range [0, 2]; 0 for identical images, ~1 for independent noise, 2 for an
    image against its negative. A dependency-free stand-in for a perceptual
    distance; reported as "diversity proxy", never as LPIPS.
    """
    if len(images) < 2:
        raise TooFewImages("diversity needs at least 2 images")
    feats = []
    for img in images:
        f = _patch_features(img, patch)
        f = f - f.mean(axis=1, keepdims=True)
        feats.append(f)
    dists = []
    for i in range(len(feats)):
        for j in range(i + 1, len(feats)):
            a, b = feats[i], feats[j]
            na = np.linalg.norm(a, axis=1)
            nb = np.linalg.norm(b, axis=1)
            corr = np.zeros(a.shape[0])
            both = (na > 0) & (nb > 0)
            corr[both] = (a[both] * b[both]).sum(axis=1) / (na[both] * nb[both])
            corr[(na == 0) & (nb == 0)] = 1.0  # identical flat patches
            dists.append(1.0 - corr.mean())
    return float(np.mean(dists))


# ---------------------------------------------------------------------------
# report and image emission

def write_report(report: EvalReport, out_path: str | Path) -> None:
    Path(out_path).write_text(report.to_json())


def read_report(path: str | Path) -> EvalReport:
    return EvalReport.from_json(Path(path).read_text())


_VIRIDIS_ANCHORS = np.array([
    (68, 1, 84), (72, 40, 120), (62, 74, 137), (49, 104, 142), (38, 130, 142),
    (31, 158, 137), (53, 183, 121), (109, 205, 89), (180, 222, 44), (253, 231, 37),
], dtype=np.float64) / 255.0


def _colormap(values: np.ndarray) -> np.ndarray:
    """Map [0,1] values to viridis-style RGB."""
    v = np.clip(values, 0.0, 1.0) * (len(_VIRIDIS_ANCHORS) - 1)
    lo = np.floor(v).astype(int)
    hi = np.minimum(lo + 1, len(_VIRIDIS_ANCHORS) - 1)
    frac = (v - lo)[..., None]
    return _VIRIDIS_ANCHORS[lo] * (1 - frac) + _VIRIDIS_ANCHORS[hi] * frac


def render_heatmaps(attn_map: models.AttnMap, tokens, out_dir: str | Path,
                    upscale: int = 8) -> list[Path]:
    """One PNG heatmap per token; the token surface lands in the filename."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    values = np.asarray(attn_map.values.detach() if torch.is_tensor(attn_map.values)
                        else attn_map.values, dtype=np.float64)
    if values.ndim == 4 and values.shape[0] == 1:
        values = values[0]
    paths = []
    for i in range(attn_map.n):
        surface = tokens[i].surface if hasattr(tokens[i], "surface") else str(tokens[i])
        safe = "".join(ch if ch.isalnum() else "_" for ch in surface)
        heat = values[:, :, i]
        peak = heat.max()
        rgb = _colormap(heat / peak if peak > 0 else heat)
        rgb = np.repeat(np.repeat(rgb, upscale, axis=0), upscale, axis=1)
        path = out_dir / f"{i:02d}_{safe}.png"
        Image.fromarray((rgb * 255).round().astype(np.uint8)).save(path)
        paths.append(path)
    return paths


def save_image_png(image, path: str | Path, upscale: int = 4) -> None:
    img = np.asarray(image, dtype=np.float64)
    rgb = np.clip(img.transpose(1, 2, 0), 0, 1)
    rgb = np.repeat(np.repeat(rgb, upscale, axis=0), upscale, axis=1)
    Image.fromarray((rgb * 255).round().astype(np.uint8)).save(path)


def render_curve_png(xs, ys, path: str | Path, width: int = 480, height: int = 320,
                     margin: int = 40) -> None:
    """Minimal axes + polyline plot, rasterized without a plotting library."""
    canvas = np.ones((height, width, 3), dtype=np.float64)
    canvas[height - margin, margin:width - margin // 2] = 0.0   # x axis
    canvas[margin // 2:height - margin + 1, margin] = 0.0       # y axis
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    x_span = (xs.max() - xs.min()) or 1.0
    y_max = max(ys.max(), 1e-9)
    px = margin + (xs - xs.min()) / x_span * (width - 1.5 * margin)
    py = (height - margin) - ys / y_max * (height - 1.5 * margin)

    def draw_line(x0, y0, x1, y1):
        n = int(max(abs(x1 - x0), abs(y1 - y0), 1)) * 2
        for k in range(n + 1):
            x = x0 + (x1 - x0) * k / n
            y = y0 + (y1 - y0) * k / n
            r, c = int(round(y)), int(round(x))
            if 0 <= r < height and 0 <= c < width:
                canvas[r, c] = (0.2, 0.4, 0.8)

    for i in range(len(xs) - 1):
        draw_line(px[i], py[i], px[i + 1], py[i + 1])
    for i in range(len(xs)):
        r, c = int(round(py[i])), int(round(px[i]))
        canvas[max(r - 1, 0):r + 2, max(c - 1, 0):c + 2] = (0.8, 0.2, 0.2)
    Image.fromarray((canvas * 255).round().astype(np.uint8)).save(path)


# ---------------------------------------------------------------------------
# checkpoint-level evaluation

def load_trained_model(ckpt_path: str | Path) -> torch.nn.Module:
    if not Path(ckpt_path).exists():
        raise UntrainedModel(f"checkpoint not found: {ckpt_path}")
    from .training import load_model_from_checkpoint
    model, _ = load_model_from_checkpoint(ckpt_path)
    model.eval()
    return model


def binding_accuracy(model: torch.nn.Module, dataset: list[SceneSample],
                     schedule: schedules.NoiseSchedule, steps: int = 250,
                     guidance_scale: float = 1.0, base_seed: int = 0,
                     max_prompts: int | None = None) -> dict:
    """Generate one image per prompt and average the oracle verdicts."""
    counts = {"two_object": 0, "color_binding": 0, "spatial": 0}
    prompts_used = dataset if max_prompts is None else dataset[:max_prompts]
    for i, sample in enumerate(prompts_used):
        rng = torch.Generator().manual_seed(base_seed + i)
        img = generate(model, sample.prompt, steps=steps,
                       guidance_scale=guidance_scale, rng=rng, schedule=schedule)
        verdicts = binding_oracle(img.numpy(), sample.prompt)
        for k in counts:
            counts[k] += bool(verdicts[k])
    n = len(prompts_used)
    return {k: v / n for k, v in counts.items()}
