import json

import pytest
import torch
from torch import nn

from ctcal_lab import models, training
from ctcal_lab.errors import ConfigError, TargetNotFound
from ctcal_lab.losses import CTCalWeights
from ctcal_lab.models import ModelConfig
from ctcal_lab.scenes import generate_dataset, write_dataset
from ctcal_lab.training import (AdapterConfig, LoRALinear, TrainConfig,
                                ablation_mode_wiring, apply_adapter,
                                build_state, config_from_flat, config_to_flat,
                                load_model_from_checkpoint, load_state,
                                merge_adapter, run_training, save_state,
                                train_step, unmerge_adapter)


def micro_config(**kw):
    defaults = dict(
        model=ModelConfig(d_model=8, heads=2, depth=1, resolution=32),
        T_train=100, batch_size=2, steps=3, seed=0, mode="ctcal",
        checkpoint_every=2)
    defaults.update(kw)
    return TrainConfig(**defaults)


@pytest.fixture(scope="module")
def tiny_batch():
    return generate_dataset(0, 4)


# -- config ------------------------------------------------------------------

def test_default_t_tea_strategy():
    assert TrainConfig().t_tea_strategy == "fixed_zero"
    assert TrainConfig(schedule_kind="rectified_flow").t_tea_strategy == "density_mode"
    assert TrainConfig(t_tea_strategy="uniform_below").t_tea_strategy == "uniform_below"


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(mode="ablation_f")
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0)


def test_config_flat_roundtrip():
    cfg = micro_config(mode="ablation_c", schedule_kind="rectified_flow",
                       weights=CTCalWeights(lam2=0.7, tau=0.2),
                       adapter=AdapterConfig(rank=2, alpha=4.0))
    back = config_from_flat(config_to_flat(cfg))
    assert back == cfg


def test_config_flat_roundtrip_no_adapter():
    cfg = micro_config()
    back = config_from_flat(config_to_flat(cfg))
    assert back == cfg and back.adapter is None


def test_config_flat_roundtrip_agg_layers():
    cfg = micro_config(model=ModelConfig(d_model=8, heads=2, depth=2,
                                         resolution=32, agg_layers=(1,)))
    doc = json.dumps(config_to_flat(cfg))
    back = config_from_flat(json.loads(doc))
    assert back == cfg and back.model.agg_layers == (1,)


def test_config_flat_json_safe():
    doc = json.dumps(config_to_flat(micro_config(adapter=AdapterConfig())))
    assert config_from_flat(json.loads(doc)) is not None


def test_config_from_flat_unknown_key():
    flat = config_to_flat(micro_config())
    flat["momentum"] = 0.9
    with pytest.raises(ConfigError):
        config_from_flat(flat)


def test_ablation_wiring_ladder():
    assert ablation_mode_wiring("baseline") is None
    a = ablation_mode_wiring("ablation_a")
    assert a.all_tokens and a.pixel and not (a.semantic or a.subject or a.timestep_weighting)
    b = ablation_mode_wiring("ablation_b")
    assert not b.all_tokens and b.pixel and not b.semantic
    c = ablation_mode_wiring("ablation_c")
    assert c.semantic and c.reconstruction and not c.subject
    d = ablation_mode_wiring("ablation_d")
    assert d.subject and not d.timestep_weighting
    e = ablation_mode_wiring("ablation_e")
    assert e.subject and e.timestep_weighting
    assert ablation_mode_wiring("ctcal") == e
    with pytest.raises(ConfigError):
        ablation_mode_wiring("ablation_z")


# -- adapters ----------------------------------------------------------------

def test_lora_zero_init_preserves_output():
    torch.manual_seed(0)
    base = nn.Linear(6, 4)
    lora = LoRALinear(base, rank=2, alpha=4.0)
    x = torch.randn(3, 6)
    assert torch.allclose(lora(x), base(x), atol=1e-7)


def test_lora_delta_rank():
    torch.manual_seed(1)
    lora = LoRALinear(nn.Linear(8, 8), rank=2, alpha=4.0)
    with torch.no_grad():
        lora.lora_up.copy_(torch.randn(8, 2))
    rank = torch.linalg.matrix_rank(lora.delta()).item()
    assert rank <= 2


def test_lora_merge_unmerge_roundtrip():
    torch.manual_seed(2)
    lora = LoRALinear(nn.Linear(5, 5), rank=2, alpha=4.0)
    with torch.no_grad():
        lora.lora_up.copy_(torch.randn(5, 2))
    x = torch.randn(2, 5)
    before_w = lora.weight.detach().clone()
    unmerged_out = lora(x)
    lora.merge()
    assert torch.allclose(lora(x), unmerged_out, atol=1e-6)
    lora.unmerge()
    assert torch.allclose(lora.weight, before_w, atol=1e-6)
    assert torch.allclose(lora(x), unmerged_out, atol=1e-6)


def test_apply_adapter_freezes_base():
    cfg = ModelConfig(d_model=8, heads=2, depth=1, resolution=32)
    model = models.build_model(cfg)
    names = apply_adapter(model, AdapterConfig(rank=2))
    assert names  # attention projections were found
    for pname, p in model.named_parameters():
        assert p.requires_grad == ("lora_" in pname)


def test_apply_adapter_output_unchanged_at_init():
    torch.manual_seed(3)
    cfg = ModelConfig(d_model=8, heads=2, depth=1, resolution=32)
    model = models.build_model(cfg)
    x = torch.randn(3, 32, 32)
    ids = torch.tensor([1, 10, 16])
    before, _ = model(x, ids, 5)
    apply_adapter(model, AdapterConfig(rank=2))
    after, _ = model(x, ids, 5)
    assert torch.allclose(before, after, atol=1e-6)


def test_apply_adapter_no_targets():
    with pytest.raises(TargetNotFound):
        apply_adapter(nn.Sequential(nn.Linear(4, 4)), AdapterConfig())


def test_merge_unmerge_whole_model():
    torch.manual_seed(4)
    cfg = ModelConfig(d_model=8, heads=2, depth=1, resolution=32)
    model = models.build_model(cfg)
    apply_adapter(model, AdapterConfig(rank=2))
    # push the adapters off their zero init
    for m in model.modules():
        if isinstance(m, LoRALinear):
            with torch.no_grad():
                m.lora_up.copy_(torch.randn_like(m.lora_up) * 0.1)
    x = torch.randn(3, 32, 32)
    ids = torch.tensor([1, 10, 16])
    ref, _ = model(x, ids, 5)
    merge_adapter(model)
    merged, _ = model(x, ids, 5)
    assert torch.allclose(merged, ref, atol=1e-5)
    unmerge_adapter(model)
    back, _ = model(x, ids, 5)
    assert torch.allclose(back, ref, atol=1e-5)


# -- state and steps ---------------------------------------------------------

def test_build_state_deterministic():
    a = build_state(micro_config())
    b = build_state(micro_config())
    for (ka, va), (kb, vb) in zip(a.named_tensors().items(), b.named_tensors().items()):
        assert ka == kb and torch.equal(va, vb)


def test_train_step_deterministic(tiny_batch):
    results = []
    for _ in range(2):
        cfg = micro_config()
        state = build_state(cfg)
        bd = train_step(tiny_batch[:2], state, cfg)
        results.append((bd, state.named_tensors()))
    assert results[0][0] == results[1][0]
    for k in results[0][1]:
        assert torch.equal(results[0][1][k], results[1][1][k])


def test_train_step_moves_params(tiny_batch):
    cfg = micro_config()
    state = build_state(cfg)
    before = {k: v.clone() for k, v in state.model.state_dict().items()}
    train_step(tiny_batch[:2], state, cfg)
    moved = any(not torch.equal(before[k], v) for k, v in state.model.state_dict().items())
    assert moved and state.step == 1


def test_baseline_step_has_no_ctcal_terms(tiny_batch):
    cfg = micro_config(mode="baseline")
    state = build_state(cfg)
    bd = train_step(tiny_batch[:2], state, cfg)
    assert bd.pixel == bd.semantic == bd.reconstruction == bd.subject_reg == 0.0
    assert bd.lambda_t == 0.0
    assert bd.total == pytest.approx(bd.diffusion)


def test_ablation_a_ignores_timestep_weighting(tiny_batch):
    cfg = micro_config(mode="ablation_a")
    state = build_state(cfg)
    bd = train_step(tiny_batch[:2], state, cfg)
    # weighting disabled: per-item lambda is 1, so the logged mean is 1
    assert bd.lambda_t == pytest.approx(1.0)
    assert bd.pixel > 0.0 and bd.semantic == 0.0


def test_teacher_forward_runs_without_grad(tiny_batch, monkeypatch):
    cfg = micro_config()
    state = build_state(cfg)
    seen = []
    orig = type(state.model).forward

    def spy(self, x, ids, t, branch="student"):
        seen.append((branch, torch.is_grad_enabled()))
        return orig(self, x, ids, t, branch)

    monkeypatch.setattr(type(state.model), "forward", spy)
    train_step(tiny_batch[:2], state, cfg)
    branches = {b for b, _ in seen}
    assert branches == {"student", "teacher"}
    for branch, grad_on in seen:
        if branch == "teacher":
            assert not grad_on
        else:
            assert grad_on


def test_empty_batch_rejected():
    cfg = micro_config()
    with pytest.raises(ValueError):
        train_step([], build_state(cfg), cfg)


def test_state_save_load_bitwise(tmp_path, tiny_batch):
    cfg = micro_config()
    state = build_state(cfg)
    train_step(tiny_batch[:2], state, cfg)
    path = tmp_path / "s.bin"
    save_state(path, state, cfg)
    loaded, cfg2 = load_state(path)
    assert cfg2 == cfg and loaded.step == state.step
    a, b = state.named_tensors(), loaded.named_tensors()
    assert set(a) == set(b)
    for k in a:
        assert torch.equal(a[k], b[k]), k
    assert torch.equal(state.rng.get_state(), loaded.rng.get_state())


def test_resume_matches_uninterrupted(tmp_path, tiny_batch):
    # two steps straight vs one step, save, load, one step: bitwise identical
    cfg = micro_config()
    straight = build_state(cfg)
    train_step(tiny_batch[:2], straight, cfg)
    train_step(tiny_batch[2:4], straight, cfg)

    broken = build_state(cfg)
    train_step(tiny_batch[:2], broken, cfg)
    path = tmp_path / "mid.bin"
    save_state(path, broken, cfg)
    resumed, _ = load_state(path)
    train_step(tiny_batch[2:4], resumed, cfg)

    a, b = straight.named_tensors(), resumed.named_tensors()
    for k in a:
        assert torch.equal(a[k], b[k]), k


def test_run_training_outputs(tmp_path, tiny_batch):
    data_dir = tmp_path / "data"
    write_dataset(tiny_batch, data_dir)
    out = tmp_path / "run"
    cfg = micro_config(steps=3, checkpoint_every=2)
    final = run_training(cfg, data_dir, out)
    assert final == out / "checkpoint.bin" and final.exists()
    assert (out / "ckpt_step2.bin").exists()
    assert (out / "config.json").exists()
    lines = (out / "metrics.jsonl").read_text().splitlines()
    assert len(lines) == 3
    recs = [json.loads(line) for line in lines]
    assert [r["step"] for r in recs] == [1, 2, 3]
    for r in recs:
        assert {"diffusion", "pixel", "semantic", "reconstruction",
                "subject_reg", "lambda_t", "total"} <= set(r)


def test_run_training_resume_bitwise(tmp_path, tiny_batch):
    data_dir = tmp_path / "data"
    write_dataset(tiny_batch, data_dir)
    cfg = micro_config(steps=4, checkpoint_every=2)
    full = run_training(cfg, data_dir, tmp_path / "full")

    half = run_training(micro_config(steps=2, checkpoint_every=2),
                        data_dir, tmp_path / "half")
    resumed = run_training(cfg, data_dir, tmp_path / "resumed", resume=half)

    _, t_full, e_full = models.load_checkpoint(full)
    _, t_res, e_res = models.load_checkpoint(resumed)
    assert e_full["step"] == e_res["step"] == 4
    assert e_full["rng"] == e_res["rng"]
    for k in t_full:
        assert torch.equal(t_full[k], t_res[k]), k


def test_run_training_init_from(tmp_path, tiny_batch):
    data_dir = tmp_path / "data"
    write_dataset(tiny_batch, data_dir)
    base = run_training(micro_config(steps=2, mode="baseline"),
                        data_dir, tmp_path / "base")

    # with lr=0 the single fine-tune step is a no-op, so the saved weights must
    # equal the baseline's exactly; the log restarts at step 1
    ft_cfg = micro_config(steps=1, mode="ctcal", lr=0.0)
    out = tmp_path / "ft"
    run_training(ft_cfg, data_dir, out, init_from=base)
    recs = [json.loads(l) for l in (out / "metrics.jsonl").read_text().splitlines()]
    assert [r["step"] for r in recs] == [1]

    base_state, _ = load_state(base)
    ft_state, _ = load_state(out / "checkpoint.bin")
    base_p = base_state.model.state_dict()
    for k, v in ft_state.model.state_dict().items():
        assert torch.equal(v, base_p[k]), k

    with pytest.raises(ConfigError):
        run_training(ft_cfg, data_dir, tmp_path / "bad", resume=base, init_from=base)
    mismatched = micro_config(steps=1, model=ModelConfig(d_model=16, heads=2,
                                                         depth=1, resolution=32))
    with pytest.raises(ConfigError):
        run_training(mismatched, data_dir, tmp_path / "bad2", init_from=base)

    # agg_layers selects maps, not weights: it may differ from the base run
    subset = micro_config(steps=1, lr=0.0,
                          model=ModelConfig(d_model=8, heads=2, depth=1,
                                            resolution=32, agg_layers=(0,)))
    run_training(subset, data_dir, tmp_path / "subset", init_from=base)


def test_load_model_from_checkpoint(tmp_path, tiny_batch):
    data_dir = tmp_path / "data"
    write_dataset(tiny_batch, data_dir)
    cfg = micro_config(steps=2, checkpoint_every=2)
    final = run_training(cfg, data_dir, tmp_path / "run")
    model, back_cfg = load_model_from_checkpoint(final)
    assert back_cfg == cfg
    x = torch.randn(3, 32, 32)
    ids = torch.tensor([1, 10, 16])
    pred, records = model(x, ids, 7)
    assert pred.shape == (1, 3, 32, 32) and records
