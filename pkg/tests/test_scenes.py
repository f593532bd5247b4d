import itertools

import numpy as np
import pytest

from ctcal_lab import prompts, scenes
from ctcal_lab.errors import ChecksumMismatch, VersionMismatch
from ctcal_lab.prompts import Color, Relation, Shape
from ctcal_lab.scenes import (PALETTE, generate_dataset, read_dataset,
                              render_scene, sample_scene, write_dataset)


def test_sample_scene_deterministic():
    a = sample_scene(7, 2, "none")
    b = sample_scene(7, 2, "none")
    assert a.text == b.text and a.scene == b.scene and a.relation == b.relation


def test_sample_scene_spatial_constraint():
    for seed in range(50):
        p = sample_scene(seed, 2, "spatial")
        c1, c2 = p.scene[0].cell, p.scene[1].cell
        if p.relation is Relation.LEFT_OF:
            assert c1[1] < c2[1]
        elif p.relation is Relation.RIGHT_OF:
            assert c1[1] > c2[1]
        elif p.relation is Relation.ABOVE:
            assert c1[0] < c2[0]
        elif p.relation is Relation.BELOW:
            assert c1[0] > c2[0]


def test_sample_scene_single_subject():
    p = sample_scene(3, 1, "none")
    assert len(p.scene) == 1 and p.relation is Relation.NONE


def test_render_mean_color_inside_mask():
    p = prompts.make_prompt([prompts.SubjectSpec(Shape.SQUARE, Color.RED, (0, 0))])
    s = render_scene(p)
    mask = s.masks[2].astype(bool)
    mean_rgb = s.image[:, mask].mean(axis=1)
    assert np.abs(mean_rgb - np.array(PALETTE[Color.RED])).max() < 0.02


def test_render_interior_exact_color():
    # erode the mask by one pixel; interior pixels carry the exact palette color
    from scipy.ndimage import binary_erosion
    p = prompts.make_prompt([prompts.SubjectSpec(Shape.CIRCLE, Color.BLUE, (1, 0))])
    s = render_scene(p)
    interior = binary_erosion(s.masks[2].astype(bool))
    assert interior.sum() > 0
    vals = s.image[:, interior]
    expected = np.array(PALETTE[Color.BLUE], dtype=np.float32).reshape(3, 1)
    assert np.abs(vals - expected).max() < 1e-6


def test_render_two_subjects_disjoint_masks():
    p = sample_scene(11, 2, "none")
    s = render_scene(p)
    assert len(s.masks) == 2
    m1, m2 = s.masks.values()
    assert (m1 * m2).sum() == 0


def test_mask_coverage_bounds():
    total = 32 * 32
    for seed in range(30):
        s = render_scene(sample_scene(seed, 2, "none"))
        for m in s.masks.values():
            frac = m.sum() / total
            assert 0.04 <= frac <= 0.25


def test_masks_do_not_touch_border():
    for seed in range(30):
        s = render_scene(sample_scene(seed, 2, "spatial"))
        for m in s.masks.values():
            assert m[0].sum() == 0 and m[-1].sum() == 0
            assert m[:, 0].sum() == 0 and m[:, -1].sum() == 0


def test_circle_bbox_fill_ratio():
    # independent measurement of the rasterized circle against pi/4
    p = prompts.make_prompt([prompts.SubjectSpec(Shape.CIRCLE, Color.GREEN, (0, 0))])
    mask = render_scene(p).masks[2]
    rows, cols = np.where(mask)
    bbox = (rows.max() - rows.min() + 1) * (cols.max() - cols.min() + 1)
    fill = mask.sum() / bbox
    assert 0.74 <= fill <= 0.82


def test_palette_channel_separation():
    for c1, c2 in itertools.combinations(PALETTE.values(), 2):
        assert np.abs(np.array(c1) - np.array(c2)).max() >= 64 / 255


def test_generation_reproducible():
    a = generate_dataset(5, 10)
    b = generate_dataset(5, 10)
    for sa, sb in zip(a, b):
        assert np.array_equal(sa.image, sb.image)
        assert sa.prompt.text == sb.prompt.text


def test_shape_color_coverage():
    seen = set()
    for seed in range(1000):
        p = sample_scene(seed, 2, "none")
        for s in p.scene:
            seen.add((s.shape, s.color))
    assert seen == set(itertools.product(Shape, Color))


def test_dataset_roundtrip(tmp_path):
    samples = generate_dataset(0, 100)
    write_dataset(samples, tmp_path)
    back = list(read_dataset(tmp_path))
    assert len(back) == 100
    for a, b in zip(samples, back):
        assert np.array_equal(a.image, b.image)
        assert set(a.masks) == set(b.masks)
        for k in a.masks:
            assert np.array_equal(a.masks[k], b.masks[k])
        assert a.prompt.text == b.prompt.text
        assert a.seed == b.seed


def test_dataset_tamper_detection(tmp_path):
    write_dataset(generate_dataset(0, 5), tmp_path)
    data = bytearray((tmp_path / "data.bin").read_bytes())
    data[100] ^= 0xFF
    (tmp_path / "data.bin").write_bytes(bytes(data))
    with pytest.raises(ChecksumMismatch):
        list(read_dataset(tmp_path))


def test_dataset_version_mismatch(tmp_path):
    import json
    write_dataset(generate_dataset(0, 5), tmp_path)
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    manifest["version"] = "other-version"
    (tmp_path / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(VersionMismatch):
        list(read_dataset(tmp_path))
