"""Synthetic compositional scenes with exact per-noun ground-truth masks.

Each scene places one or two colored shapes on a 2x2 grid over a mid-gray
background. Rasterization is 4x supersampled and box-downsampled, so shape
interiors carry the exact palette color and only the 1-pixel boundary is
anti-aliased. Masks mark pixels with majority shape coverage and are keyed
by the noun-token position of the corresponding shape word.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from . import prompts
from .errors import ChecksumMismatch, VersionMismatch
from .prompts import Color, PromptSpec, Relation, Shape, SubjectSpec

DATASET_VERSION = "ctcal-dataset-v1"
BACKGROUND = (0.5, 0.5, 0.5)
SUPERSAMPLE = 4

# Fixed 6-color palette; pairwise max-channel distance >= 64/255.
PALETTE: dict[Color, tuple[float, float, float]] = {
    Color.RED: (220 / 255, 30 / 255, 30 / 255),
    Color.GREEN: (30 / 255, 180 / 255, 30 / 255),
    Color.BLUE: (30 / 255, 30 / 255, 220 / 255),
    Color.YELLOW: (230 / 255, 220 / 255, 30 / 255),
    Color.MAGENTA: (220 / 255, 30 / 255, 220 / 255),
    Color.CYAN: (30 / 255, 220 / 255, 220 / 255),
}


@dataclass
class SceneSample:
    image: np.ndarray            # (3, R, R) float32 in [0, 1]
    masks: dict[int, np.ndarray]  # noun-token position -> (R, R) float32 binary
    prompt: PromptSpec
    seed: int


@dataclass
class DatasetManifest:
    version: str
    count: int
    resolution: int
    sha256: str
    records: list[dict]


_SPATIAL_RELATIONS = (Relation.LEFT_OF, Relation.RIGHT_OF, Relation.ABOVE, Relation.BELOW)


def _cells_for_relation(rng: np.random.Generator, relation: Relation) -> tuple[tuple[int, int], tuple[int, int]]:
    if relation is Relation.LEFT_OF:
        return (int(rng.integers(2)), 0), (int(rng.integers(2)), 1)
    if relation is Relation.RIGHT_OF:
        return (int(rng.integers(2)), 1), (int(rng.integers(2)), 0)
    if relation is Relation.ABOVE:
        return (0, int(rng.integers(2))), (1, int(rng.integers(2)))
    if relation is Relation.BELOW:
        return (1, int(rng.integers(2))), (0, int(rng.integers(2)))
    # unconstrained: two distinct cells
    idx = rng.choice(4, size=2, replace=False)
    return (int(idx[0]) // 2, int(idx[0]) % 2), (int(idx[1]) // 2, int(idx[1]) % 2)


def sample_scene(rng_seed: int, num_subjects: int = 2,
                 relation_mode: str = "none") -> PromptSpec:
    """Draw a random scene description, deterministic in the seed."""
    if relation_mode not in ("none", "spatial"):
        raise ValueError(f"unknown relation_mode: {relation_mode}")
    if relation_mode == "spatial" and num_subjects != 2:
        raise ValueError("spatial relations require two subjects")
    rng = np.random.default_rng(rng_seed)
    shapes = list(Shape)
    colors = list(Color)

    relation = Relation.NONE
    if relation_mode == "spatial":
        relation = _SPATIAL_RELATIONS[int(rng.integers(len(_SPATIAL_RELATIONS)))]

    if num_subjects == 1:
        cell = (int(rng.integers(2)), int(rng.integers(2)))
        scene = [SubjectSpec(shapes[int(rng.integers(3))], colors[int(rng.integers(6))], cell)]
        return prompts.make_prompt(scene, Relation.NONE)

    cell_a, cell_b = _cells_for_relation(rng, relation)
    first = (shapes[int(rng.integers(3))], colors[int(rng.integers(6))])
    second = first
    while second == first:  # distinct (shape, color) so the binding oracle can tell them apart
        second = (shapes[int(rng.integers(3))], colors[int(rng.integers(6))])
    scene = [SubjectSpec(first[0], first[1], cell_a), SubjectSpec(second[0], second[1], cell_b)]
    return prompts.make_prompt(scene, relation)


def _shape_coverage(shape: Shape, resolution: int) -> np.ndarray:
    """Fractional pixel coverage of the shape in one grid cell, via supersampling."""
    cell = resolution // 2
    ss = cell * SUPERSAMPLE
    # subpixel centers in cell-pixel units
    coords = (np.arange(ss) + 0.5) / SUPERSAMPLE
    ys, xs = np.meshgrid(coords, coords, indexing="ij")
    cx = cy = cell / 2.0
    scale = resolution / 32.0
    if shape is Shape.SQUARE:
        half = 5.0 * scale
        inside = (np.abs(xs - cx) <= half) & (np.abs(ys - cy) <= half)
    elif shape is Shape.CIRCLE:
        radius = 6.0 * scale
        inside = (xs - cx) ** 2 + (ys - cy) ** 2 <= radius ** 2
    else:  # isoceles triangle, apex up; bbox fill ratio = 1/2
        half_base, height = 6.0 * scale, 12.0 * scale
        apex_y = cy - height / 2
        frac = (ys - apex_y) / height
        inside = (frac >= 0) & (frac <= 1) & (np.abs(xs - cx) <= frac * half_base)
    inside = inside.astype(np.float64).reshape(cell, SUPERSAMPLE, cell, SUPERSAMPLE)
    return inside.mean(axis=(1, 3))


def render_scene(prompt: PromptSpec, resolution: int = 32) -> SceneSample:
    """Rasterize a prompt's scene; masks are keyed by noun-token position."""
    if resolution % 4 != 0:
        raise ValueError("resolution must be a multiple of 4")
    cell = resolution // 2
    image = np.full((3, resolution, resolution), 0.5, dtype=np.float64)
    noun_positions = prompts.select_noun_indices(prompt.tokens).indices
    masks: dict[int, np.ndarray] = {}
    for subject, noun_pos in zip(prompt.scene, noun_positions):
        cov = _shape_coverage(subject.shape, resolution)
        r0, c0 = subject.cell[0] * cell, subject.cell[1] * cell
        color = PALETTE[subject.color]
        region = image[:, r0:r0 + cell, c0:c0 + cell]
        for ch in range(3):
            region[ch] = region[ch] * (1 - cov) + color[ch] * cov
        mask = np.zeros((resolution, resolution), dtype=np.float32)
        mask[r0:r0 + cell, c0:c0 + cell] = (cov >= 0.5).astype(np.float32)
        masks[noun_pos] = mask
    return SceneSample(image=image.astype(np.float32), masks=masks, prompt=prompt, seed=-1)


def generate_dataset(base_seed: int, count: int, num_subjects: int = 2,
                     relation_mode: str = "none", resolution: int = 32) -> list[SceneSample]:
    samples = []
    for i in range(count):
        seed = base_seed + i
        spec = sample_scene(seed, num_subjects=num_subjects, relation_mode=relation_mode)
        sample = render_scene(spec, resolution)
        sample.seed = seed
        samples.append(sample)
    return samples


def _prompt_to_json(p: PromptSpec) -> dict:
    return {
        "scene": [{"shape": s.shape.value, "color": s.color.value, "cell": list(s.cell)}
                  for s in p.scene],
        "relation": p.relation.value,
        "text": p.text,
    }


def _prompt_from_json(d: dict) -> PromptSpec:
    scene = [SubjectSpec(Shape(s["shape"]), Color(s["color"]), tuple(s["cell"]))
             for s in d["scene"]]
    return prompts.make_prompt(scene, Relation(d["relation"]))


def write_dataset(samples: list[SceneSample], out_dir: str | Path) -> DatasetManifest:
    """Persist samples as raw float32 LE payloads plus a JSON manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = []
    offset = 0
    chunks = []
    resolution = samples[0].image.shape[-1]
    for s in samples:
        mask_keys = sorted(s.masks.keys())
        payload = s.image.astype("<f4").tobytes()
        for k in mask_keys:
            payload += s.masks[k].astype("<f4").tobytes()
        records.append({
            "offset": offset,
            "length": len(payload),
            "seed": s.seed,
            "mask_keys": mask_keys,
            "prompt": _prompt_to_json(s.prompt),
        })
        chunks.append(payload)
        offset += len(payload)
    blob = b"".join(chunks)
    (out_dir / "data.bin").write_bytes(blob)
    manifest = DatasetManifest(
        version=DATASET_VERSION,
        count=len(samples),
        resolution=resolution,
        sha256=hashlib.sha256(blob).hexdigest(),
        records=records,
    )
    (out_dir / "manifest.json").write_text(json.dumps({
        "version": manifest.version,
        "count": manifest.count,
        "resolution": manifest.resolution,
        "sha256": manifest.sha256,
        "records": manifest.records,
    }, indent=1))
    return manifest


def read_manifest(dataset_dir: str | Path) -> DatasetManifest:
    d = json.loads((Path(dataset_dir) / "manifest.json").read_text())
    if d.get("version") != DATASET_VERSION:
        raise VersionMismatch(f"unsupported dataset version: {d.get('version')!r}")
    return DatasetManifest(version=d["version"], count=d["count"],
                           resolution=d["resolution"], sha256=d["sha256"],
                           records=d["records"])


def read_dataset(dataset_dir: str | Path) -> Iterator[SceneSample]:
    """Stream samples back; validates the payload checksum before yielding."""
    dataset_dir = Path(dataset_dir)
    manifest = read_manifest(dataset_dir)
    blob = (dataset_dir / "data.bin").read_bytes()
    if hashlib.sha256(blob).hexdigest() != manifest.sha256:
        raise ChecksumMismatch("data.bin does not match manifest checksum")
    R = manifest.resolution
    img_bytes = 3 * R * R * 4
    mask_bytes = R * R * 4
    for rec in manifest.records:
        payload = blob[rec["offset"]:rec["offset"] + rec["length"]]
        image = np.frombuffer(payload[:img_bytes], dtype="<f4").reshape(3, R, R).copy()
        masks = {}
        for j, k in enumerate(rec["mask_keys"]):
            start = img_bytes + j * mask_bytes
            masks[k] = np.frombuffer(payload[start:start + mask_bytes],
                                     dtype="<f4").reshape(R, R).copy()
        yield SceneSample(image=image, masks=masks,
                          prompt=_prompt_from_json(rec["prompt"]), seed=rec["seed"])


def load_dataset(dataset_dir: str | Path) -> list[SceneSample]:
    return list(read_dataset(dataset_dir))
