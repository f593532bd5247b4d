"""Noise schedules, forward noising, prediction targets, timestep samplers.

Two schedule families are supported: the classic DDPM linear-beta schedule
(epsilon prediction) and rectified flow (linear interpolation, velocity
prediction). Timesteps are discrete integers in [0, T] for both.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch

from .errors import InvalidStrategy, ShapeMismatch


@dataclass
class NoiseSchedule:
    kind: str                    # "ddpm_linear" | "rectified_flow"
    T_train: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 2e-2
    # per-t coefficients, index 0..T (t=0 is the clean endpoint)
    alpha_bar: torch.Tensor = field(init=False, repr=False)
    sigma: torch.Tensor = field(init=False, repr=False)

    def __post_init__(self):
        T = self.T_train
        if self.kind == "ddpm_linear":
            betas = torch.linspace(self.beta_start, self.beta_end, T, dtype=torch.float64)
            self.alpha_bar = torch.cat([torch.ones(1, dtype=torch.float64),
                                        torch.cumprod(1.0 - betas, dim=0)])
            self.sigma = torch.sqrt(1.0 - self.alpha_bar)
        elif self.kind == "rectified_flow":
            self.sigma = torch.arange(T + 1, dtype=torch.float64) / T
            self.alpha_bar = (1.0 - self.sigma) ** 2
        else:
            raise ValueError(f"unknown schedule kind: {self.kind}")


def _coeff(values: torch.Tensor, t, x: torch.Tensor) -> torch.Tensor:
    """Look up per-timestep coefficients and reshape for broadcasting over x."""
    if isinstance(t, int):
        return values[t].to(x.dtype)
    t = torch.as_tensor(t, dtype=torch.long)
    c = values[t].to(x.dtype)
    return c.view(-1, *([1] * (x.dim() - 1)))


def add_noise(x0: torch.Tensor, eps: torch.Tensor, t, schedule: NoiseSchedule) -> torch.Tensor:
    """Forward process: interpolate clean data toward noise at level t."""
    if x0.shape != eps.shape:
        raise ShapeMismatch(f"x0 {tuple(x0.shape)} vs eps {tuple(eps.shape)}")
    if schedule.kind == "ddpm_linear":
        ab = _coeff(schedule.alpha_bar, t, x0)
        return torch.sqrt(ab) * x0 + torch.sqrt(1.0 - ab) * eps
    sig = _coeff(schedule.sigma, t, x0)
    return (1.0 - sig) * x0 + sig * eps


def prediction_target(x0: torch.Tensor, eps: torch.Tensor, t, schedule: NoiseSchedule) -> torch.Tensor:
    """Network regression target: eps for DDPM, velocity eps - x0 for RF."""
    if x0.shape != eps.shape:
        raise ShapeMismatch(f"x0 {tuple(x0.shape)} vs eps {tuple(eps.shape)}")
    if schedule.kind == "ddpm_linear":
        return eps
    return eps - x0


def diffusion_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    if pred.shape != target.shape:
        raise ShapeMismatch(f"pred {tuple(pred.shape)} vs target {tuple(target.shape)}")
    return torch.mean((pred - target) ** 2)


@dataclass
class TimestepSampler:
    kind: str            # "uniform" | "logit_normal"
    T_train: int = 1000
    mu: float = 0.0
    s: float = 1.0
    _probs: torch.Tensor = field(init=False, repr=False)
    _cdf: torch.Tensor = field(init=False, repr=False)

    def __post_init__(self):
        if self.kind not in ("uniform", "logit_normal"):
            raise ValueError(f"unknown sampler kind: {self.kind}")
        d = self.density_grid()
        probs = d[1:].clone()  # support is t in {1..T}
        probs /= probs.sum()
        self._probs = probs
        self._cdf = torch.cumsum(probs, dim=0)

    def density_grid(self) -> torch.Tensor:
        """Density over t = 0..T, evaluated on normalized u = t/T."""
        T = self.T_train
        u = torch.arange(T + 1, dtype=torch.float64) / T
        if self.kind == "uniform":
            d = torch.ones(T + 1, dtype=torch.float64)
            d[0] = 0.0  # t=0 is never drawn for t_stu
            return d
        d = torch.zeros(T + 1, dtype=torch.float64)
        inner = u[1:-1]
        logit = torch.log(inner / (1.0 - inner))
        d[1:-1] = torch.exp(-((logit - self.mu) ** 2) / (2 * self.s ** 2)) / (
            self.s * math.sqrt(2 * math.pi) * inner * (1.0 - inner))
        return d


def sample_t_stu(sampler: TimestepSampler, rng: torch.Generator) -> int:
    """Draw the student timestep from the sampler's distribution, t >= 1."""
    if sampler.kind == "uniform":
        return int(torch.randint(1, sampler.T_train + 1, (1,), generator=rng).item())
    u = torch.rand(1, generator=rng, dtype=torch.float64).item()
    idx = int(torch.searchsorted(sampler._cdf, torch.tensor(u, dtype=torch.float64)).item())
    return min(idx, sampler.T_train - 1) + 1


TEA_STRATEGIES = ("fixed_zero", "density_mode", "uniform_below")


def sample_t_tea(strategy: str, t_stu: int, sampler: TimestepSampler,
                 rng: torch.Generator | None = None) -> int:
    """Pick the teacher timestep below t_stu according to the strategy."""
    if t_stu < 1:
        raise ValueError("t_stu must be >= 1")
    if strategy == "fixed_zero":
        return 0
    if strategy == "density_mode":
        density = sampler.density_grid()[:t_stu]
        return int(torch.argmax(density).item())  # argmax ties resolve to smallest t
    if strategy == "uniform_below":
        if rng is None:
            raise InvalidStrategy("uniform_below requires an RNG")
        return int(torch.randint(0, t_stu, (1,), generator=rng).item())
    raise InvalidStrategy(f"unknown t_tea strategy: {strategy}")
