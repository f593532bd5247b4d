import math

import pytest
import torch

from ctcal_lab.errors import (EmptyRecords, MixedProvenance, PromptTooLong,
                              ShapeMismatch)
from ctcal_lab.models import (AttnRecord, CrossAttention, JointAttention,
                              ModelConfig, TextEncoder, aggregate_attention,
                              build_model, extract_image_text_block,
                              load_checkpoint, load_model, save_checkpoint,
                              save_model, sinusoidal_embedding)

MICRO_UNET = ModelConfig(variant="cross_attn_unet", d_model=8, heads=2, depth=1,
                         resolution=8, attn_h=4, attn_w=4)
MICRO_MMDIT = ModelConfig(variant="mmdit", d_model=8, heads=2, depth=1,
                          resolution=8, attn_h=4, attn_w=4, patch=4)


def _ids(n=3):
    return torch.tensor([1, 10, 16][:n])


def test_sinusoidal_embedding_properties():
    t = torch.tensor([0.0, 1.0, 500.0])
    emb = sinusoidal_embedding(t, 16)
    assert emb.shape == (3, 16)
    # t=0 gives sin=0, cos=1 in every frequency
    assert torch.allclose(emb[0, :8], torch.zeros(8))
    assert torch.allclose(emb[0, 8:], torch.ones(8))
    # unit norm per frequency pair
    norms = emb[:, :8] ** 2 + emb[:, 8:] ** 2
    assert torch.allclose(norms, torch.ones_like(norms), atol=1e-6)


def test_text_encoder_too_long():
    enc = TextEncoder(ModelConfig(n_max=4))
    with pytest.raises(PromptTooLong):
        enc(torch.zeros(1, 5, dtype=torch.long))


def test_text_encoder_position_sensitivity():
    torch.manual_seed(0)
    enc = TextEncoder(ModelConfig())
    a = enc(torch.tensor([[10, 16]]))
    b = enc(torch.tensor([[16, 10]]))
    assert not torch.allclose(a[0, 0], b[0, 1])


def test_cross_attention_rows_sum_to_one():
    torch.manual_seed(0)
    attn = CrossAttention(8, 2)
    img = torch.randn(2, 16, 8)
    txt = torch.randn(2, 3, 8)
    _, m = attn(img, txt)
    assert m.shape == (2, 2, 16, 3)
    sums = m.sum(dim=-1)
    assert (sums - 1.0).abs().max().item() < 1e-6
    assert m.min().item() >= 0.0


def test_joint_attention_rows_and_block():
    torch.manual_seed(0)
    attn = JointAttention(8, 2)
    img = torch.randn(1, 4, 8)
    txt = torch.randn(1, 3, 8)
    _, _, m = attn(img, txt)
    assert m.shape == (1, 2, 7, 7)
    assert (m.sum(dim=-1) - 1.0).abs().max().item() < 1e-6
    block = extract_image_text_block(m, 4, 3)
    assert block.shape == (1, 2, 4, 3)
    # exact slice, no renormalization
    assert torch.equal(block, m[..., :4, 4:])


def test_joint_attention_empty_text():
    attn = JointAttention(8, 2)
    with pytest.raises(ShapeMismatch):
        attn(torch.randn(1, 4, 8), torch.randn(1, 0, 8))


def test_extract_block_shape_check():
    with pytest.raises(ShapeMismatch):
        extract_image_text_block(torch.zeros(1, 2, 6, 6), 4, 3)


@pytest.mark.parametrize("cfg", [MICRO_UNET, MICRO_MMDIT], ids=["unet", "mmdit"])
def test_forward_shapes_and_records(cfg):
    torch.manual_seed(0)
    model = build_model(cfg)
    x = torch.randn(3, cfg.resolution, cfg.resolution)
    pred, records = model(x, _ids(), 5, branch="teacher")
    assert pred.shape == (1, 3, cfg.resolution, cfg.resolution)
    assert len(records) == cfg.depth if cfg.variant == "mmdit" else len(records) >= 1
    for r in records:
        assert r.branch == "teacher" and r.t == 5
        assert (r.map.sum(dim=-1) - 1.0).abs().max().item() < 1e-5


def test_unet_attention_resolutions():
    cfg = ModelConfig(variant="cross_attn_unet", d_model=8, heads=2, depth=4,
                      resolution=32)
    model = build_model(cfg)
    _, records = model(torch.randn(3, 32, 32), _ids(), 1)
    assert [r.query_hw for r in records] == [(16, 16), (8, 8), (8, 8), (16, 16)]


def test_unet_depth_caps_attention_layers():
    cfg = ModelConfig(variant="cross_attn_unet", d_model=8, heads=2, depth=2,
                      resolution=16)
    model = build_model(cfg)
    _, records = model(torch.randn(3, 16, 16), _ids(), 1)
    assert len(records) == 2


@pytest.mark.parametrize("cfg", [MICRO_UNET, MICRO_MMDIT], ids=["unet", "mmdit"])
def test_batched_matches_single(cfg):
    torch.manual_seed(1)
    model = build_model(cfg)
    model.eval()
    x = torch.randn(2, 3, cfg.resolution, cfg.resolution)
    ids = torch.stack([_ids(), _ids()])
    pred, _ = model(x, ids, torch.tensor([7, 7]))
    p0, _ = model(x[0], _ids(), 7)
    p1, _ = model(x[1], _ids(), 7)
    assert torch.allclose(pred[0:1], p0, atol=1e-6)
    assert torch.allclose(pred[1:2], p1, atol=1e-6)


@pytest.mark.parametrize("cfg", [MICRO_UNET, MICRO_MMDIT], ids=["unet", "mmdit"])
def test_timestep_conditioning_matters(cfg):
    torch.manual_seed(2)
    model = build_model(cfg)
    x = torch.randn(3, cfg.resolution, cfg.resolution)
    a, _ = model(x, _ids(), 1)
    b, _ = model(x, _ids(), 900)
    assert not torch.allclose(a, b)


def test_wrong_image_shape():
    model = build_model(MICRO_UNET)
    with pytest.raises(ShapeMismatch):
        model(torch.randn(3, 16, 16), _ids(), 1)


def test_unknown_variant():
    with pytest.raises(ValueError):
        build_model(ModelConfig(variant="dit"))


def test_d_model_heads_divisibility():
    with pytest.raises(ValueError):
        ModelConfig(d_model=10, heads=4)


def test_aggregate_uniform_maps_stay_uniform():
    # uniform attention is a fixed point of head-mean, resize, and layer-mean
    n = 3
    recs = [
        AttnRecord(layer=0, map=torch.full((2, 16, n), 1.0 / n), query_hw=(4, 4)),
        AttnRecord(layer=1, map=torch.full((2, 4, n), 1.0 / n), query_hw=(2, 2)),
    ]
    cfg = ModelConfig(attn_h=4, attn_w=4)
    out = aggregate_attention(recs, cfg)
    assert out.values.shape == (4, 4, n)
    assert torch.allclose(out.values, torch.full((4, 4, n), 1.0 / n), atol=1e-6)


def test_aggregate_hand_computed():
    # single layer, 2 heads, native resolution: aggregate is the head mean
    n = 2
    m = torch.zeros(2, 4, n)
    m[0, :, 0], m[0, :, 1] = 0.25, 0.75
    m[1, :, 0], m[1, :, 1] = 0.75, 0.25
    rec = AttnRecord(layer=0, map=m, query_hw=(2, 2))
    out = aggregate_attention([rec], ModelConfig(attn_h=2, attn_w=2))
    assert torch.allclose(out.values, torch.full((2, 2, n), 0.5))


def test_aggregate_joint_records():
    n_img, n_txt = 4, 3
    m = torch.full((1, 2, n_img + n_txt, n_img + n_txt), 1.0 / (n_img + n_txt))
    rec = AttnRecord(layer=0, map=m, query_hw=(2, 2), joint=True,
                     n_img=n_img, n_txt=n_txt)
    out = aggregate_attention([rec], ModelConfig(attn_h=2, attn_w=2))
    assert out.values.shape == (1, 2, 2, n_txt)
    assert torch.allclose(out.values, torch.full_like(out.values, 1.0 / 7))


def test_aggregate_layer_subset():
    n = 2
    sharp = torch.zeros(1, 4, n)
    sharp[0, 0, 0], sharp[0, 1:, 0] = 1.0, 0.0
    sharp[0, :, 1] = 0.5
    flat = torch.full((1, 4, n), 1.0 / n)
    recs = [AttnRecord(layer=0, map=sharp, query_hw=(2, 2)),
            AttnRecord(layer=1, map=flat, query_hw=(2, 2))]
    cfg = ModelConfig(attn_h=2, attn_w=2, depth=2, agg_layers=(0,))
    out = aggregate_attention(recs, cfg)
    # only layer 0 contributes: aggregate equals that record's head mean
    assert torch.allclose(out.values, sharp[0].view(2, 2, n))
    cfg_all = ModelConfig(attn_h=2, attn_w=2, depth=2)
    both = aggregate_attention(recs, cfg_all)
    assert torch.allclose(both.values,
                          ((sharp[0] + flat[0]) / 2).view(2, 2, n))


def test_agg_layers_validation():
    with pytest.raises(ValueError):
        ModelConfig(depth=4, agg_layers=())
    with pytest.raises(ValueError):
        ModelConfig(depth=4, agg_layers=(4,))
    with pytest.raises(ValueError):
        ModelConfig(depth=4, agg_layers=(-1,))
    cfg = ModelConfig(depth=4, agg_layers=[1, 2])
    assert cfg.agg_layers == (1, 2)


def test_aggregate_batch_axis_preserved():
    n = 3
    recs = [AttnRecord(layer=0, map=torch.rand(5, 2, 16, n).softmax(-1),
                       query_hw=(4, 4))]
    out = aggregate_attention(recs, ModelConfig(attn_h=4, attn_w=4))
    assert out.values.shape == (5, 4, 4, n)
    assert out.values.min().item() >= 0.0 and out.values.max().item() <= 1.0


def test_aggregate_errors():
    cfg = ModelConfig(attn_h=4, attn_w=4)
    with pytest.raises(EmptyRecords):
        aggregate_attention([], cfg)
    a = AttnRecord(layer=0, map=torch.rand(2, 16, 3), query_hw=(4, 4), t=0)
    b = AttnRecord(layer=1, map=torch.rand(2, 16, 3), query_hw=(4, 4), t=5)
    with pytest.raises(MixedProvenance):
        aggregate_attention([a, b], cfg)
    c = AttnRecord(layer=1, map=torch.rand(2, 16, 4), query_hw=(4, 4), t=0)
    with pytest.raises(MixedProvenance):
        aggregate_attention([a, c], cfg)
    d = AttnRecord(layer=1, map=torch.rand(2, 16, 3), query_hw=(4, 4),
                   branch="teacher", t=0)
    with pytest.raises(MixedProvenance):
        aggregate_attention([a, d], cfg)


def test_checkpoint_roundtrip_bitwise(tmp_path):
    cfg = MICRO_UNET
    tensors = {"w": torch.randn(3, 4), "b": torch.randn(4), "s": torch.tensor(2.0)}
    path = tmp_path / "ck.bin"
    save_checkpoint(path, cfg, tensors, extra={"step": 7})
    cfg2, back, extra = load_checkpoint(path)
    assert cfg2 == cfg and extra == {"step": 7}
    for k in tensors:
        assert torch.equal(back[k], tensors[k])


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "bad.bin"
    header = b'{"magic": "other"}'
    path.write_bytes(len(header).to_bytes(8, "little") + header)
    with pytest.raises(ValueError):
        load_checkpoint(path)


@pytest.mark.parametrize("cfg", [MICRO_UNET, MICRO_MMDIT], ids=["unet", "mmdit"])
def test_model_save_load_same_outputs(tmp_path, cfg):
    torch.manual_seed(3)
    model = build_model(cfg)
    path = tmp_path / "m.bin"
    save_model(path, model)
    model2 = load_model(path)
    x = torch.randn(3, cfg.resolution, cfg.resolution)
    a, _ = model(x, _ids(), 4)
    b, _ = model2(x, _ids(), 4)
    assert torch.equal(a, b)


@pytest.mark.parametrize("cfg", [MICRO_UNET, MICRO_MMDIT], ids=["unet", "mmdit"])
def test_gradient_finite_differences(cfg):
    # central-difference check of autograd through the full forward, float64
    torch.manual_seed(4)
    model = build_model(cfg).double()
    x = torch.randn(3, cfg.resolution, cfg.resolution, dtype=torch.float64)
    target = torch.randn(1, 3, cfg.resolution, cfg.resolution, dtype=torch.float64)

    def loss_fn():
        pred, _ = model(x, _ids(), 5)
        return torch.mean((pred - target) ** 2)

    loss = loss_fn()
    loss.backward()
    params = [p for p in model.parameters() if p.grad is not None]
    rng = torch.Generator().manual_seed(0)
    eps = 1e-6
    checked = 0
    for p in params[::3]:
        flat = p.data.view(-1)
        idx = int(torch.randint(0, flat.numel(), (1,), generator=rng).item())
        orig = flat[idx].item()
        flat[idx] = orig + eps
        with torch.no_grad():
            hi = loss_fn().item()
        flat[idx] = orig - eps
        with torch.no_grad():
            lo = loss_fn().item()
        flat[idx] = orig
        fd = (hi - lo) / (2 * eps)
        ag = p.grad.view(-1)[idx].item()
        denom = max(abs(fd), abs(ag), 1e-8)
        assert abs(fd - ag) / denom < 1e-4, f"fd={fd} autograd={ag}"
        checked += 1
    assert checked >= 5
