"""Attention-calibration loss terms and their composition.

All terms operate on aggregated attention maps of shape ([B,] H, W, n) and a
set of noun-token indices selecting which slices participate. The teacher
map is expected to arrive detached (the training loop owns that contract);
the teacher-side encoding inside the semantic term is additionally treated
as a constant here, so teacher-path gradients never reach the model.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from .errors import NoNounTokens, NonFiniteLoss, ShapeMismatch
from .prompts import NounIndexSet


@dataclass
class CTCalWeights:
    lam1: float = 1.0   # pixel-level
    lam2: float = 0.5   # semantic-level
    lam3: float = 0.5   # reconstruction proxy
    lam4: float = 0.1   # subject response regularizer
    tau: float = 0.1
    detach_encoder_in_semantic: bool = False


@dataclass
class LossBreakdown:
    diffusion: float
    pixel: float = 0.0
    semantic: float = 0.0
    reconstruction: float = 0.0
    subject_reg: float = 0.0
    lambda_t: float = 0.0
    weights: dict = field(default_factory=dict)
    total: float = 0.0


class AttnAutoencoder(nn.Module):
    """Small convolutional autoencoder over single-channel attention maps.

    Encoder: two stride-2 3x3 convolutions (1 -> 8 -> 16) then a linear map
    to the latent. Decoder mirrors it with nearest-neighbor upsampling.
    """

    def __init__(self, map_h: int = 16, map_w: int = 16, latent_dim: int = 32):
        super().__init__()
        self.map_h, self.map_w, self.latent_dim = map_h, map_w, latent_dim
        self.enc_conv1 = nn.Conv2d(1, 8, 3, stride=2, padding=1)
        self.enc_conv2 = nn.Conv2d(8, 16, 3, stride=2, padding=1)
        self.flat = 16 * (map_h // 4) * (map_w // 4)
        self.enc_fc = nn.Linear(self.flat, latent_dim)
        self.dec_fc = nn.Linear(latent_dim, self.flat)
        self.dec_conv1 = nn.Conv2d(16, 8, 3, padding=1)
        self.dec_conv2 = nn.Conv2d(8, 1, 3, padding=1)

    def encode(self, maps: torch.Tensor, frozen: bool = False) -> torch.Tensor:
        """(..., H, W) -> (..., z). With frozen=True the parameters are used
        as constants, so no gradient accumulates on them."""
        lead = maps.shape[:-2]
        x = maps.reshape(-1, 1, self.map_h, self.map_w)
        w1, b1 = self.enc_conv1.weight, self.enc_conv1.bias
        w2, b2 = self.enc_conv2.weight, self.enc_conv2.bias
        wf, bf = self.enc_fc.weight, self.enc_fc.bias
        if frozen:
            w1, b1, w2, b2, wf, bf = (p.detach() for p in (w1, b1, w2, b2, wf, bf))
        x = F.silu(F.conv2d(x, w1, b1, stride=2, padding=1))
        x = F.silu(F.conv2d(x, w2, b2, stride=2, padding=1))
        z = F.linear(x.reshape(x.shape[0], -1), wf, bf)
        return z.reshape(*lead, self.latent_dim)

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        lead = z.shape[:-1]
        h4, w4 = self.map_h // 4, self.map_w // 4
        x = self.dec_fc(z.reshape(-1, self.latent_dim)).reshape(-1, 16, h4, w4)
        x = F.interpolate(x, scale_factor=2, mode="nearest")
        x = F.silu(self.dec_conv1(x))
        x = F.interpolate(x, scale_factor=2, mode="nearest")
        x = self.dec_conv2(x)
        return x.reshape(*lead, self.map_h, self.map_w)

    def forward(self, maps: torch.Tensor) -> torch.Tensor:
        return self.decode(self.encode(maps))


def _noun_slices(values: torch.Tensor, nouns: NounIndexSet) -> torch.Tensor:
    """Gather noun slices: (..., H, W, n) -> (..., N_noun, H, W)."""
    if nouns.count < 1:
        raise NoNounTokens("empty noun index set")
    if max(nouns.indices) >= values.shape[-1]:
        raise ShapeMismatch(f"noun index {max(nouns.indices)} out of range "
                            f"for {values.shape[-1]} tokens")
    idx = torch.as_tensor(nouns.indices, device=values.device)
    return values.index_select(-1, idx).movedim(-1, -3)


def _check_pair(a_stu: torch.Tensor, a_tea: torch.Tensor):
    if a_stu.shape != a_tea.shape:
        raise ShapeMismatch(f"student {tuple(a_stu.shape)} vs teacher {tuple(a_tea.shape)}")


def pixel_loss(a_stu: torch.Tensor, a_tea: torch.Tensor, nouns: NounIndexSet) -> torch.Tensor:
    """Mean over noun slices of per-slice MSE between student and teacher."""
    _check_pair(a_stu, a_tea)
    s = _noun_slices(a_stu, nouns)
    t = _noun_slices(a_tea, nouns)
    return torch.mean((s - t) ** 2)


def semantic_loss(a_stu: torch.Tensor, a_tea: torch.Tensor, nouns: NounIndexSet,
                  autoencoder: AttnAutoencoder,
                  detach_encoder: bool = False) -> torch.Tensor:
    """MSE between encoded student and encoded teacher slices.

    The teacher-side encoding is a constant. With detach_encoder=True the
    encoder parameters receive no gradient from this term either.
    """
    _check_pair(a_stu, a_tea)
    z_stu = autoencoder.encode(_noun_slices(a_stu, nouns), frozen=detach_encoder)
    with torch.no_grad():
        z_tea = autoencoder.encode(_noun_slices(a_tea, nouns))
    return torch.mean((z_stu - z_tea) ** 2)


def recon_proxy_loss(a_tea: torch.Tensor, nouns: NounIndexSet,
                     autoencoder: AttnAutoencoder) -> torch.Tensor:
    """Autoencoder reconstruction error on teacher slices (trains the AE)."""
    t = _noun_slices(a_tea, nouns).detach()
    recon = autoencoder(t)
    return torch.mean((recon - t) ** 2)


def subject_regularizer(a_stu: torch.Tensor, nouns: NounIndexSet, tau: float) -> torch.Tensor:
    """Pull every noun's peak response toward the strongest noun's peak.

    Per prompt: S = max_i max(slice_i); loss = mean_i ReLU(S - max(slice_i) - tau).
    """
    s = _noun_slices(a_stu, nouns)               # (..., N, H, W)
    maxima = s.flatten(-2).max(dim=-1).values    # (..., N)
    peak = maxima.max(dim=-1, keepdim=True).values
    return torch.mean(F.relu(peak - maxima - tau))


def timestep_weight(t_stu: int, T_train: int) -> float:
    """Linear timestep weight for the calibration loss."""
    return t_stu / T_train


def ctcal_total(a_stu: torch.Tensor, a_tea: torch.Tensor, nouns: NounIndexSet,
                weights: CTCalWeights, autoencoder: AttnAutoencoder | None = None
                ) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
    """Weighted sum of the four calibration terms, components reported."""
    zero = a_stu.sum() * 0.0
    terms = {"pixel": pixel_loss(a_stu, a_tea, nouns)}
    if autoencoder is not None:
        terms["semantic"] = semantic_loss(a_stu, a_tea, nouns, autoencoder,
                                          detach_encoder=weights.detach_encoder_in_semantic)
        terms["reconstruction"] = recon_proxy_loss(a_tea, nouns, autoencoder)
    else:
        terms["semantic"] = zero
        terms["reconstruction"] = zero
    terms["subject_reg"] = subject_regularizer(a_stu, nouns, weights.tau)
    total = (weights.lam1 * terms["pixel"] + weights.lam2 * terms["semantic"]
             + weights.lam3 * terms["reconstruction"] + weights.lam4 * terms["subject_reg"])
    return total, terms


def ctcal_terms_per_item(a_stu: torch.Tensor, a_tea: torch.Tensor, nouns: NounIndexSet,
                         weights: CTCalWeights, autoencoder: AttnAutoencoder | None = None
                         ) -> dict[str, torch.Tensor]:
    """Batched variant of the individual terms: maps are (B, H, W, n) with a
    shared noun set, and every term comes back as a (B,) per-item tensor.
    Agrees with the scalar functions item by item."""
    _check_pair(a_stu, a_tea)
    s = _noun_slices(a_stu, nouns)               # (B, N, H, W)
    t = _noun_slices(a_tea, nouns)
    zero = s.sum(dim=(1, 2, 3)) * 0.0
    terms = {"pixel": ((s - t) ** 2).mean(dim=(1, 2, 3))}
    if autoencoder is not None:
        z_stu = autoencoder.encode(s, frozen=weights.detach_encoder_in_semantic)
        with torch.no_grad():
            z_tea = autoencoder.encode(t)
        terms["semantic"] = ((z_stu - z_tea) ** 2).mean(dim=(1, 2))
        t_const = t.detach()
        terms["reconstruction"] = ((autoencoder(t_const) - t_const) ** 2).mean(dim=(1, 2, 3))
    else:
        terms["semantic"] = zero
        terms["reconstruction"] = zero
    maxima = s.flatten(-2).max(dim=-1).values    # (B, N)
    peak = maxima.max(dim=-1, keepdim=True).values
    terms["subject_reg"] = F.relu(peak - maxima - weights.tau).mean(dim=-1)
    return terms


def compose_objective(diffusion_value, ctcal_value, t_stu: int, T_train: int,
                      components: dict | None = None,
                      weights: CTCalWeights | None = None,
                      lambda_t: float | None = None) -> tuple[torch.Tensor, LossBreakdown]:
    """Total objective: diffusion + lambda_t * calibration.

    Returns the total (as a tensor when the inputs are tensors, so it can be
    backpropagated) plus a float-only breakdown for logging.
    """
    if lambda_t is None:
        lambda_t = timestep_weight(t_stu, T_train)
    total = diffusion_value + lambda_t * ctcal_value

    def _f(x):
        return float(x.detach()) if torch.is_tensor(x) else float(x)

    breakdown = LossBreakdown(
        diffusion=_f(diffusion_value),
        lambda_t=float(lambda_t),
        total=_f(total),
    )
    if components:
        breakdown.pixel = _f(components.get("pixel", 0.0))
        breakdown.semantic = _f(components.get("semantic", 0.0))
        breakdown.reconstruction = _f(components.get("reconstruction", 0.0))
        breakdown.subject_reg = _f(components.get("subject_reg", 0.0))
    if weights:
        breakdown.weights = {"lam1": weights.lam1, "lam2": weights.lam2,
                             "lam3": weights.lam3, "lam4": weights.lam4,
                             "tau": weights.tau}
    if not torch.isfinite(torch.as_tensor(breakdown.total)):
        raise NonFiniteLoss(f"non-finite objective: {breakdown.total}")
    return total, breakdown
