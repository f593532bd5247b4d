"""Dual-timestep training loop with teacher-branch gradient truncation.

Each step runs two forwards through the same parameters: a no-gradient
teacher forward at a low-noise timestep producing reference attention maps,
and a student forward at the sampled training timestep. The calibration
terms pull the student's noun-token attention toward the teacher's, weighted
by the linear timestep schedule, on top of the ordinary diffusion loss.

Ablation modes (a-e) switch individual terms on following the same ladder
used for reporting: (a) pixel constraint over all tokens, (b) noun-token
selection, (c) + semantic/reconstruction, (d) + subject regularizer,
(e) + timestep-aware weighting. "ctcal" is an alias for (e).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict, replace
from pathlib import Path

import torch
from torch import nn

from . import losses, models, prompts, scenes, schedules
from .errors import ConfigError, NonFiniteLoss, TargetNotFound
from .losses import AttnAutoencoder, CTCalWeights, LossBreakdown
from .models import AttnRecord, ModelConfig
from .prompts import NounIndexSet
from .scenes import SceneSample

MODES = ("baseline", "ctcal", "ablation_a", "ablation_b", "ablation_c",
         "ablation_d", "ablation_e")


@dataclass
class AdapterConfig:
    rank: int = 4
    alpha: float = 8.0


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    schedule_kind: str = "ddpm_linear"
    T_train: int = 1000
    sampler_kind: str = "uniform"
    sampler_mu: float = 0.0
    sampler_s: float = 1.0
    t_tea_strategy: str = ""        # empty -> schedule-dependent default
    weights: CTCalWeights = field(default_factory=CTCalWeights)
    latent_dim: int = 32
    lr: float = 2e-4
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.0
    batch_size: int = 8
    steps: int = 1000
    seed: int = 0
    mode: str = "ctcal"
    adapter: AdapterConfig | None = None
    include_adjectives: bool = False
    checkpoint_every: int = 1000
    single_worker: bool = True

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode: {self.mode}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not self.t_tea_strategy:
            # low-noise reference at t=0 for DDPM; sampler density mode for RF
            self.t_tea_strategy = ("density_mode" if self.schedule_kind == "rectified_flow"
                                   else "fixed_zero")


@dataclass
class ActiveTerms:
    all_tokens: bool = False
    pixel: bool = True
    semantic: bool = True
    reconstruction: bool = True
    subject: bool = True
    timestep_weighting: bool = True


def ablation_mode_wiring(mode: str) -> ActiveTerms | None:
    """Which loss terms a training mode activates; None for the baseline."""
    if mode == "baseline":
        return None
    if mode == "ablation_a":
        return ActiveTerms(all_tokens=True, semantic=False, reconstruction=False,
                           subject=False, timestep_weighting=False)
    if mode == "ablation_b":
        return ActiveTerms(semantic=False, reconstruction=False, subject=False,
                           timestep_weighting=False)
    if mode == "ablation_c":
        return ActiveTerms(subject=False, timestep_weighting=False)
    if mode == "ablation_d":
        return ActiveTerms(timestep_weighting=False)
    if mode in ("ablation_e", "ctcal"):
        return ActiveTerms()
    raise ConfigError(f"unknown mode: {mode}")


# ---------------------------------------------------------------------------
# low-rank adapters

class LoRALinear(nn.Module):
    """Linear layer with a frozen base weight plus a low-rank trainable delta."""

    def __init__(self, base: nn.Linear, rank: int, alpha: float):
        super().__init__()
        self.in_features = base.in_features
        self.out_features = base.out_features
        self.scaling = alpha / rank
        self.weight = nn.Parameter(base.weight.detach().clone(), requires_grad=False)
        if base.bias is not None:
            self.bias = nn.Parameter(base.bias.detach().clone(), requires_grad=False)
        else:
            self.bias = None
        self.lora_down = nn.Parameter(torch.randn(rank, self.in_features,
                                                  dtype=base.weight.dtype) / rank)
        self.lora_up = nn.Parameter(torch.zeros(self.out_features, rank,
                                                dtype=base.weight.dtype))
        self.merged = False

    def delta(self) -> torch.Tensor:
        return self.scaling * (self.lora_up @ self.lora_down)

    def forward(self, x):
        y = torch.nn.functional.linear(x, self.weight, self.bias)
        if self.merged:
            return y
        return y + torch.nn.functional.linear(
            torch.nn.functional.linear(x, self.lora_down), self.lora_up) * self.scaling

    def merge(self):
        if not self.merged:
            with torch.no_grad():
                self.weight += self.delta()
            self.merged = True

    def unmerge(self):
        if self.merged:
            with torch.no_grad():
                self.weight -= self.delta()
            self.merged = False


def _attention_projection_names(model: nn.Module) -> list[str]:
    names = []
    for mod_name, mod in model.named_modules():
        if isinstance(mod, (models.CrossAttention, models.JointAttention)):
            for child_name, child in mod.named_children():
                if isinstance(child, nn.Linear):
                    names.append(f"{mod_name}.{child_name}" if mod_name else child_name)
    return names


def apply_adapter(model: nn.Module, adapter: AdapterConfig) -> list[str]:
    """Replace attention projection Linears with LoRA-wrapped versions.

    Base parameters are frozen; only the adapter factors stay trainable.
    Returns the list of wrapped module names.
    """
    targets = _attention_projection_names(model)
    if not targets:
        raise TargetNotFound("model has no attention projection layers")
    for name in targets:
        parent_name, _, child_name = name.rpartition(".")
        parent = model.get_submodule(parent_name) if parent_name else model
        base = getattr(parent, child_name)
        setattr(parent, child_name, LoRALinear(base, adapter.rank, adapter.alpha))
    for pname, p in model.named_parameters():
        p.requires_grad = "lora_" in pname
    return targets


def merge_adapter(model: nn.Module):
    for mod in model.modules():
        if isinstance(mod, LoRALinear):
            mod.merge()


def unmerge_adapter(model: nn.Module):
    for mod in model.modules():
        if isinstance(mod, LoRALinear):
            mod.unmerge()


# ---------------------------------------------------------------------------
# state

@dataclass
class TrainState:
    model: nn.Module
    autoencoder: AttnAutoencoder
    optimizer: torch.optim.Optimizer
    rng: torch.Generator
    step: int = 0

    def named_tensors(self) -> dict[str, torch.Tensor]:
        tensors = {f"model.{k}": v for k, v in self.model.state_dict().items()}
        tensors.update({f"ae.{k}": v for k, v in self.autoencoder.state_dict().items()})
        opt_state = self.optimizer.state_dict()["state"]
        for idx, st in opt_state.items():
            for key, val in st.items():
                if torch.is_tensor(val):
                    tensors[f"adam.{idx}.{key}"] = val
        return tensors


def build_state(config: TrainConfig) -> TrainState:
    torch.manual_seed(config.seed)
    model = models.build_model(config.model)
    if config.adapter is not None:
        apply_adapter(model, config.adapter)
    ae = AttnAutoencoder(config.model.attn_h, config.model.attn_w, config.latent_dim)
    params = [p for p in model.parameters() if p.requires_grad] + list(ae.parameters())
    optimizer = torch.optim.Adam(params, lr=config.lr, betas=config.betas,
                                 weight_decay=config.weight_decay)
    rng = torch.Generator().manual_seed(config.seed + 1)
    return TrainState(model=model, autoencoder=ae, optimizer=optimizer, rng=rng)


def save_state(path: str | Path, state: TrainState, config: TrainConfig):
    extra = {
        "step": state.step,
        "rng": state.rng.get_state().numpy().tobytes().hex(),
        "train_config": config_to_flat(config),
    }
    models.save_checkpoint(path, config.model, state.named_tensors(), extra)


def load_state(path: str | Path, config: TrainConfig | None = None) -> tuple[TrainState, TrainConfig]:
    _, tensors, extra = models.load_checkpoint(path)
    if config is None:
        config = config_from_flat(extra["train_config"])
    state = build_state(config)
    state.model.load_state_dict(
        {k[len("model."):]: v for k, v in tensors.items() if k.startswith("model.")})
    state.autoencoder.load_state_dict(
        {k[len("ae."):]: v for k, v in tensors.items() if k.startswith("ae.")})
    # rebuild Adam moments; one step() has not run yet so state dict is empty
    opt_sd = state.optimizer.state_dict()
    adam_state = {}
    for key, val in tensors.items():
        if key.startswith("adam."):
            _, idx, name = key.split(".", 2)
            adam_state.setdefault(int(idx), {})[name] = val
    opt_sd["state"] = adam_state
    state.optimizer.load_state_dict(opt_sd)
    rng_state = torch.frombuffer(bytearray.fromhex(extra["rng"]), dtype=torch.uint8)
    state.rng.set_state(rng_state.clone())
    state.step = extra["step"]
    return state, config


def load_model_from_checkpoint(path: str | Path) -> tuple[nn.Module, TrainConfig]:
    """Rebuild just the model (with adapters, if configured) from a training
    checkpoint."""
    _, tensors, extra = models.load_checkpoint(path)
    config = config_from_flat(extra["train_config"])
    torch.manual_seed(config.seed)
    model = models.build_model(config.model)
    if config.adapter is not None:
        apply_adapter(model, config.adapter)
    model.load_state_dict(
        {k[len("model."):]: v for k, v in tensors.items() if k.startswith("model.")})
    return model, config


# ---------------------------------------------------------------------------
# config (de)serialization: flat dotted-key JSON documents

def config_to_flat(config: TrainConfig) -> dict:
    flat = {}
    for k, v in asdict(config).items():
        if isinstance(v, dict):
            for kk, vv in v.items():
                flat[f"{k}.{kk}"] = list(vv) if isinstance(vv, tuple) else vv
        elif isinstance(v, tuple):
            flat[k] = list(v)
        else:
            flat[k] = v
    return flat


def config_from_flat(flat: dict) -> TrainConfig:
    model_kw, weights_kw, adapter_kw, top = {}, {}, {}, {}
    for k, v in flat.items():
        if k.startswith("model."):
            model_kw[k[6:]] = v
        elif k.startswith("weights."):
            weights_kw[k[8:]] = v
        elif k.startswith("adapter."):
            adapter_kw[k[8:]] = v
        elif k == "adapter":
            pass  # a null adapter flattens to a bare key; subkeys carry the data
        elif k == "betas":
            top[k] = tuple(v)
        else:
            top[k] = v
    try:
        cfg = TrainConfig(model=ModelConfig(**model_kw),
                          weights=CTCalWeights(**weights_kw),
                          adapter=AdapterConfig(**adapter_kw) if adapter_kw else None,
                          **top)
    except TypeError as e:
        raise ConfigError(str(e)) from None
    return cfg


# ---------------------------------------------------------------------------
# the step

def _prepare(sample: SceneSample, include_adjectives: bool):
    ids = torch.tensor(prompts.token_ids(sample.prompt.tokens), dtype=torch.long)
    nouns = prompts.select_content_indices(sample.prompt.tokens, include_adjectives)
    x0 = torch.from_numpy(sample.image).float()
    return x0, ids, nouns


def train_step(batch: list[SceneSample], state: TrainState, config: TrainConfig,
               schedule: schedules.NoiseSchedule | None = None,
               sampler: schedules.TimestepSampler | None = None,
               ) -> LossBreakdown:
    """One optimization step over a batch; returns the loss breakdown."""
    if not batch:
        raise ValueError("empty batch")
    schedule = schedule or schedules.NoiseSchedule(config.schedule_kind, config.T_train)
    sampler = sampler or schedules.TimestepSampler(config.sampler_kind, config.T_train,
                                                   config.sampler_mu, config.sampler_s)
    active = ablation_mode_wiring(config.mode)
    model, ae, rng = state.model, state.autoencoder, state.rng

    # draw all randomness in a fixed order (per item: noise, t_stu, t_tea)
    items = []
    for sample in batch:
        x0, ids, nouns = _prepare(sample, config.include_adjectives)
        eps = torch.randn(x0.shape, generator=rng)
        t_stu = schedules.sample_t_stu(sampler, rng)
        t_tea = schedules.sample_t_tea(config.t_tea_strategy, t_stu, sampler, rng)
        if active is not None and active.all_tokens:
            nouns = NounIndexSet(tuple(range(len(ids))))
        items.append((x0, ids, nouns, eps, t_stu, t_tea))

    # group by token length so forwards can be batched
    groups: dict[int, list] = {}
    for it in items:
        groups.setdefault(len(it[1]), []).append(it)

    B = len(items)
    total = torch.zeros(())
    sums = {"diffusion": 0.0, "pixel": 0.0, "semantic": 0.0,
            "reconstruction": 0.0, "subject_reg": 0.0, "lambda_t": 0.0}
    t_stu_log, t_tea_log = [], []

    for group in groups.values():
        x0 = torch.stack([g[0] for g in group])
        ids = torch.stack([g[1] for g in group])
        eps = torch.stack([g[3] for g in group])
        t_stu = torch.tensor([g[4] for g in group], dtype=torch.long)
        t_tea = torch.tensor([g[5] for g in group], dtype=torch.long)
        t_stu_log += t_stu.tolist()
        t_tea_log += t_tea.tolist()
        g_frac = len(group) / B

        x_stu = schedules.add_noise(x0, eps, t_stu, schedule)
        target = schedules.prediction_target(x0, eps, t_stu, schedule)
        pred, stu_records = model(x_stu, ids, t_stu)
        diff = schedules.diffusion_loss(pred, target)
        total = total + g_frac * diff
        sums["diffusion"] += g_frac * float(diff.detach())

        if active is None:
            continue

        with torch.no_grad():
            x_tea = schedules.add_noise(x0, eps, t_tea, schedule)
            _, tea_records = model(x_tea, ids, t_tea, branch="teacher")
        a_stu = models.aggregate_attention(stu_records, config.model).values
        a_tea = models.aggregate_attention(tea_records, config.model).values.detach()

        eff = CTCalWeights(
            lam1=config.weights.lam1 if active.pixel else 0.0,
            lam2=config.weights.lam2 if active.semantic else 0.0,
            lam3=config.weights.lam3 if active.reconstruction else 0.0,
            lam4=config.weights.lam4 if active.subject else 0.0,
            tau=config.weights.tau,
            detach_encoder_in_semantic=config.weights.detach_encoder_in_semantic)
        use_ae = active.semantic or active.reconstruction
        # sub-batch items sharing a noun index set so the terms vectorize
        by_nouns: dict[tuple, list[int]] = {}
        for i, (_, _, nouns, _, _, _) in enumerate(group):
            by_nouns.setdefault(nouns.indices, []).append(i)
        for noun_tuple, idxs in by_nouns.items():
            sel = torch.tensor(idxs)
            terms = losses.ctcal_terms_per_item(
                a_stu.index_select(0, sel), a_tea.index_select(0, sel),
                NounIndexSet(noun_tuple), eff, ae if use_ae else None)
            if active.timestep_weighting:
                lam = torch.tensor([losses.timestep_weight(group[i][4], config.T_train)
                                    for i in idxs])
            else:
                lam = torch.ones(len(idxs))
            ctcal = (eff.lam1 * terms["pixel"] + eff.lam2 * terms["semantic"]
                     + eff.lam3 * terms["reconstruction"]
                     + eff.lam4 * terms["subject_reg"])
            total = total + (lam * ctcal).sum() / B
            sums["lambda_t"] += float(lam.sum()) / B
            for name in ("pixel", "semantic", "reconstruction", "subject_reg"):
                sums[name] += float(terms[name].detach().sum()) / B

    if not torch.isfinite(total):
        raise NonFiniteLoss(f"non-finite training objective: {float(total)}")

    state.optimizer.zero_grad(set_to_none=False)
    total.backward()
    state.optimizer.step()
    state.step += 1

    return LossBreakdown(
        diffusion=sums["diffusion"], pixel=sums["pixel"], semantic=sums["semantic"],
        reconstruction=sums["reconstruction"], subject_reg=sums["subject_reg"],
        lambda_t=sums["lambda_t"],
        weights={"lam1": config.weights.lam1, "lam2": config.weights.lam2,
                 "lam3": config.weights.lam3, "lam4": config.weights.lam4,
                 "tau": config.weights.tau},
        total=float(total.detach()))


def run_training(config: TrainConfig, data_dir: str | Path, out_dir: str | Path,
                 resume: str | Path | None = None,
                 init_from: str | Path | None = None) -> Path:
    """Full training run; writes metrics.jsonl and checkpoints, returns the
    final checkpoint path.

    `resume` continues an interrupted run bit-exactly (same config). `init_from`
    starts a fresh run (step 0, fresh optimizer/RNG) with model weights copied
    from another run's checkpoint — the fine-tuning entry point, e.g. a
    calibration run on top of a converged diffusion-only baseline.
    """
    if resume is not None and init_from is not None:
        raise ConfigError("resume and init_from are mutually exclusive")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if config.single_worker:
        torch.set_num_threads(1)
    dataset = scenes.load_dataset(data_dir)
    schedule = schedules.NoiseSchedule(config.schedule_kind, config.T_train)
    sampler = schedules.TimestepSampler(config.sampler_kind, config.T_train,
                                        config.sampler_mu, config.sampler_s)
    if resume is not None:
        state, config = load_state(resume, config)
    else:
        state = build_state(config)
        if init_from is not None:
            init_state, init_config = load_state(init_from)
            # agg_layers only selects which maps are aggregated; it carries
            # no weights, so it may differ between the two configs
            if (replace(init_config.model, agg_layers=None)
                    != replace(config.model, agg_layers=None)):
                raise ConfigError("init_from checkpoint has a different model config")
            # strict=False lets a plain checkpoint seed an adapter-wrapped
            # model: base weight/bias keys line up, adapter factors keep
            # their fresh initialization
            missing, unexpected = state.model.load_state_dict(
                init_state.model.state_dict(), strict=False)
            if unexpected or any("lora_" not in k for k in missing):
                raise ConfigError("init_from checkpoint does not match the model")
    (out_dir / "config.json").write_text(json.dumps(config_to_flat(config), indent=1))

    final_path = out_dir / "checkpoint.bin"
    log_mode = "a" if resume is not None else "w"
    with open(out_dir / "metrics.jsonl", log_mode) as log:
        while state.step < config.steps:
            idx = torch.randint(len(dataset), (config.batch_size,), generator=state.rng)
            batch = [dataset[int(i)] for i in idx]
            step_before = state.step
            try:
                breakdown = train_step(batch, state, config, schedule, sampler)
            except NonFiniteLoss:
                # halt; the last periodic checkpoint stays on disk
                log.flush()
                raise
            rec = asdict(breakdown)
            rec["step"] = step_before + 1
            log.write(json.dumps(rec) + "\n")
            if state.step % config.checkpoint_every == 0 or state.step == config.steps:
                save_state(out_dir / f"ckpt_step{state.step}.bin", state, config)
    save_state(final_path, state, config)
    return final_path
