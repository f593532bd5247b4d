"""Trainable denoisers with attention recording.

Two variants share one interface: a small UNet whose down/up stages carry
cross-attention over the text tokens, and an MM-DiT-style transformer that
attends jointly over concatenated image-patch and text tokens. Every
attention layer records its post-softmax map; ``aggregate_attention``
collapses the records into one (H, W, n) map per prompt at a canonical
resolution (head-mean, bilinear resize, layer-mean).

Inputs may be batched; all prompts within one forward must share a token
length. Records then carry a leading batch axis.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, asdict, field
from pathlib import Path

import torch
import torch.nn.functional as F
from torch import nn

from .errors import EmptyRecords, MixedProvenance, PromptTooLong, ShapeMismatch

CHECKPOINT_MAGIC = "ctcal-checkpoint-v1"


@dataclass
class ModelConfig:
    variant: str = "cross_attn_unet"   # "cross_attn_unet" | "mmdit"
    d_model: int = 32
    heads: int = 4
    depth: int = 4                     # number of attention layers
    resolution: int = 32
    attn_h: int = 16                   # canonical aggregation resolution
    attn_w: int = 16
    n_max: int = 12
    vocab_size: int = 20
    patch: int = 4                     # mmdit patch size
    agg_layers: tuple[int, ...] | None = None  # attention layers to aggregate; None = all

    def __post_init__(self):
        if self.d_model % self.heads != 0:
            raise ValueError("d_model must be divisible by heads")
        if self.agg_layers is not None:
            layers = tuple(int(i) for i in self.agg_layers)
            if not layers or any(i < 0 or i >= self.depth for i in layers):
                raise ValueError("agg_layers must be a non-empty subset of "
                                 f"range({self.depth})")
            self.agg_layers = layers


@dataclass
class AttnRecord:
    layer: int
    map: torch.Tensor          # ([B,] heads, queries, keys), post-softmax
    query_hw: tuple[int, int]
    branch: str = "student"    # "student" | "teacher"
    t: int = 0
    joint: bool = False        # True for MM-DiT full block matrices
    n_img: int = 0
    n_txt: int = 0


@dataclass
class AttnMap:
    values: torch.Tensor       # ([B,] H, W, n) in [0, 1]
    n: int
    branch: str
    t: int


def sinusoidal_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Standard sin/cos timestep embedding; t is a (B,) float tensor."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=t.dtype, device=t.device) / half)
    args = t[:, None] * freqs[None, :]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


class TextEncoder(nn.Module):
    """Bare learned token embedding plus learned positional term."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.token_emb = nn.Embedding(cfg.vocab_size, cfg.d_model)
        self.pos_emb = nn.Embedding(cfg.n_max, cfg.d_model)

    def forward(self, token_ids: torch.Tensor) -> torch.Tensor:
        if token_ids.shape[-1] > self.cfg.n_max:
            raise PromptTooLong(f"{token_ids.shape[-1]} tokens > n_max={self.cfg.n_max}")
        pos = torch.arange(token_ids.shape[-1], device=token_ids.device)
        return self.token_emb(token_ids) + self.pos_emb(pos)


def _split_heads(x: torch.Tensor, heads: int) -> torch.Tensor:
    b, s, d = x.shape
    return x.view(b, s, heads, d // heads).permute(0, 2, 1, 3)


def _merge_heads(x: torch.Tensor) -> torch.Tensor:
    b, h, s, dh = x.shape
    return x.permute(0, 2, 1, 3).reshape(b, s, h * dh)


class CrossAttention(nn.Module):
    """Image-query / text-key attention; returns the post-softmax map."""

    def __init__(self, d_model: int, heads: int):
        super().__init__()
        self.heads = heads
        self.scale = 1.0 / math.sqrt(d_model // heads)
        self.norm = nn.LayerNorm(d_model)
        self.q_proj = nn.Linear(d_model, d_model)
        self.k_proj = nn.Linear(d_model, d_model)
        self.v_proj = nn.Linear(d_model, d_model)
        self.out_proj = nn.Linear(d_model, d_model)

    def forward(self, image_feats: torch.Tensor, text_feats: torch.Tensor):
        if image_feats.shape[-1] != text_feats.shape[-1]:
            raise ShapeMismatch("image/text feature dims differ")
        q = _split_heads(self.q_proj(self.norm(image_feats)), self.heads)
        k = _split_heads(self.k_proj(text_feats), self.heads)
        v = _split_heads(self.v_proj(text_feats), self.heads)
        attn = torch.softmax(q @ k.transpose(-2, -1) * self.scale, dim=-1)
        out = self.out_proj(_merge_heads(attn @ v))
        return image_feats + out, attn


class JointAttention(nn.Module):
    """MM-DiT joint self-attention over concatenated image and text tokens."""

    def __init__(self, d_model: int, heads: int):
        super().__init__()
        self.heads = heads
        self.scale = 1.0 / math.sqrt(d_model // heads)
        self.img_norm = nn.LayerNorm(d_model)
        self.txt_norm = nn.LayerNorm(d_model)
        self.img_q = nn.Linear(d_model, d_model)
        self.img_k = nn.Linear(d_model, d_model)
        self.img_v = nn.Linear(d_model, d_model)
        self.txt_q = nn.Linear(d_model, d_model)
        self.txt_k = nn.Linear(d_model, d_model)
        self.txt_v = nn.Linear(d_model, d_model)
        self.img_out = nn.Linear(d_model, d_model)
        self.txt_out = nn.Linear(d_model, d_model)

    def forward(self, image_feats: torch.Tensor, text_feats: torch.Tensor):
        if text_feats.shape[-2] == 0:
            raise ShapeMismatch("empty text sequence")
        if image_feats.shape[-1] != text_feats.shape[-1]:
            raise ShapeMismatch("image/text feature dims differ")
        xi = self.img_norm(image_feats)
        xt = self.txt_norm(text_feats)
        # image-then-text concatenation order
        q = torch.cat([self.img_q(xi), self.txt_q(xt)], dim=1)
        k = torch.cat([self.img_k(xi), self.txt_k(xt)], dim=1)
        v = torch.cat([self.img_v(xi), self.txt_v(xt)], dim=1)
        q, k, v = (_split_heads(x, self.heads) for x in (q, k, v))
        attn = torch.softmax(q @ k.transpose(-2, -1) * self.scale, dim=-1)
        out = _merge_heads(attn @ v)
        n_img = image_feats.shape[1]
        img_out = image_feats + self.img_out(out[:, :n_img])
        txt_out = text_feats + self.txt_out(out[:, n_img:])
        return img_out, txt_out, attn


def extract_image_text_block(full_attn: torch.Tensor, n_img: int, n_txt: int) -> torch.Tensor:
    """Image-query / text-key block of a joint attention matrix."""
    if full_attn.shape[-1] != n_img + n_txt or full_attn.shape[-2] != n_img + n_txt:
        raise ShapeMismatch(f"joint map is {tuple(full_attn.shape[-2:])}, "
                            f"expected ({n_img + n_txt}, {n_img + n_txt})")
    return full_attn[..., :n_img, n_img:]


class ConvBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, d_time: int):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.norm1 = nn.GroupNorm(4, c_out)
        self.norm2 = nn.GroupNorm(4, c_out)
        self.time_proj = nn.Linear(d_time, c_out)

    def forward(self, x, t_emb):
        h = F.silu(self.norm1(self.conv1(x)))
        h = h + self.time_proj(t_emb)[:, :, None, None]
        h = F.silu(self.norm2(self.conv2(h)))
        return h


class CrossAttnUnet(nn.Module):
    """2-down / 2-up UNet; one cross-attention layer per stage."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        c = cfg.d_model
        self.text_encoder = TextEncoder(cfg)
        self.time_mlp = nn.Sequential(nn.Linear(c, c * 2), nn.SiLU(), nn.Linear(c * 2, c))
        self.conv_in = nn.Conv2d(3, c, 3, padding=1)
        self.down0 = ConvBlock(c, c, c)     # full resolution, pre-pool
        self.down1 = ConvBlock(c, c, c)     # R -> R/2 after pool
        self.down2 = ConvBlock(c, c, c)     # R/2 -> R/4 after pool
        self.mid = ConvBlock(c, c, c)
        self.up1 = ConvBlock(2 * c, c, c)   # at R/4 -> upsample R/2
        self.up2 = ConvBlock(2 * c, c, c)   # at R/2 -> upsample R
        self.up3 = ConvBlock(2 * c, c, c)   # full resolution, post-skip
        self.conv_out = nn.Conv2d(c, 3, 3, padding=1)
        # attention layers in forward order; resolutions R/2, R/4, R/4, R/2
        self.attn_layers = nn.ModuleList(
            [CrossAttention(c, cfg.heads) for _ in range(min(cfg.depth, 4))])
        # learned positional term added to the image features entering each
        # attention layer; conv features alone are translation-equivariant, so
        # without it the queries cannot express location-dependent attention
        # when the input carries no layout signal (high noise levels)
        res = [cfg.resolution // 2, cfg.resolution // 4,
               cfg.resolution // 4, cfg.resolution // 2]
        self.attn_pos = nn.ParameterList(
            [nn.Parameter(torch.zeros(r * r, c))
             for r in res[:len(self.attn_layers)]])

    def _attend(self, idx: int, x: torch.Tensor, txt: torch.Tensor, records: list,
                branch: str, t_scalar: int):
        if idx >= len(self.attn_layers):
            return x
        b, c, h, w = x.shape
        flat = x.permute(0, 2, 3, 1).reshape(b, h * w, c)
        flat = flat + self.attn_pos[idx]
        flat, attn = self.attn_layers[idx](flat, txt)
        records.append(AttnRecord(layer=idx, map=attn, query_hw=(h, w),
                                  branch=branch, t=t_scalar,
                                  n_img=h * w, n_txt=txt.shape[1]))
        return flat.reshape(b, h, w, c).permute(0, 3, 1, 2)

    def forward(self, x_t: torch.Tensor, token_ids: torch.Tensor, t,
                branch: str = "student"):
        cfg = self.cfg
        if x_t.dim() == 3:
            x_t = x_t[None]
        if token_ids.dim() == 1:
            token_ids = token_ids[None]
        if x_t.shape[-3:] != (3, cfg.resolution, cfg.resolution):
            raise ShapeMismatch(f"expected (3, {cfg.resolution}, {cfg.resolution}) images")
        b = x_t.shape[0]
        t_vec = torch.as_tensor(t, dtype=x_t.dtype, device=x_t.device).reshape(-1)
        if t_vec.numel() == 1:
            t_vec = t_vec.expand(b)
        t_scalar = int(t_vec[0].item())
        t_emb = self.time_mlp(sinusoidal_embedding(t_vec, cfg.d_model))
        txt = self.text_encoder(token_ids)
        if txt.shape[0] == 1 and b > 1:
            txt = txt.expand(b, -1, -1)

        records: list[AttnRecord] = []
        h0 = self.down0(self.conv_in(x_t), t_emb)              # R
        d1 = self.down1(F.avg_pool2d(h0, 2), t_emb)            # R/2
        d1 = self._attend(0, d1, txt, records, branch, t_scalar)
        d2 = self.down2(F.avg_pool2d(d1, 2), t_emb)            # R/4
        d2 = self._attend(1, d2, txt, records, branch, t_scalar)
        m = self.mid(d2, t_emb)
        u1 = self.up1(torch.cat([m, d2], dim=1), t_emb)        # R/4
        u1 = self._attend(2, u1, txt, records, branch, t_scalar)
        u1 = F.interpolate(u1, scale_factor=2, mode="nearest")
        u2 = self.up2(torch.cat([u1, d1], dim=1), t_emb)       # R/2
        u2 = self._attend(3, u2, txt, records, branch, t_scalar)
        u2 = F.interpolate(u2, scale_factor=2, mode="nearest")
        u3 = self.up3(torch.cat([u2, h0], dim=1), t_emb)       # R
        return self.conv_out(u3), records


class MmDitBlock(nn.Module):
    def __init__(self, d_model: int, heads: int):
        super().__init__()
        self.attn = JointAttention(d_model, heads)
        self.img_mlp = nn.Sequential(nn.LayerNorm(d_model), nn.Linear(d_model, 4 * d_model),
                                     nn.SiLU(), nn.Linear(4 * d_model, d_model))
        self.txt_mlp = nn.Sequential(nn.LayerNorm(d_model), nn.Linear(d_model, 4 * d_model),
                                     nn.SiLU(), nn.Linear(4 * d_model, d_model))

    def forward(self, img, txt):
        img, txt, attn = self.attn(img, txt)
        img = img + self.img_mlp(img)
        txt = txt + self.txt_mlp(txt)
        return img, txt, attn


class MmDit(nn.Module):
    """Patchified transformer with joint image/text self-attention."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        c, p = cfg.d_model, cfg.patch
        self.grid = cfg.resolution // p
        self.n_img = self.grid * self.grid
        self.text_encoder = TextEncoder(cfg)
        self.time_mlp = nn.Sequential(nn.Linear(c, c * 2), nn.SiLU(), nn.Linear(c * 2, c))
        self.patch_in = nn.Linear(3 * p * p, c)
        self.img_pos = nn.Embedding(self.n_img, c)
        self.blocks = nn.ModuleList([MmDitBlock(c, cfg.heads) for _ in range(cfg.depth)])
        self.norm_out = nn.LayerNorm(c)
        self.patch_out = nn.Linear(c, 3 * p * p)

    def _patchify(self, x):
        b = x.shape[0]
        p, g = self.cfg.patch, self.grid
        x = x.view(b, 3, g, p, g, p).permute(0, 2, 4, 1, 3, 5)
        return x.reshape(b, g * g, 3 * p * p)

    def _unpatchify(self, x):
        b = x.shape[0]
        p, g = self.cfg.patch, self.grid
        x = x.view(b, g, g, 3, p, p).permute(0, 3, 1, 4, 2, 5)
        return x.reshape(b, 3, g * p, g * p)

    def forward(self, x_t: torch.Tensor, token_ids: torch.Tensor, t,
                branch: str = "student"):
        cfg = self.cfg
        if x_t.dim() == 3:
            x_t = x_t[None]
        if token_ids.dim() == 1:
            token_ids = token_ids[None]
        if x_t.shape[-3:] != (3, cfg.resolution, cfg.resolution):
            raise ShapeMismatch(f"expected (3, {cfg.resolution}, {cfg.resolution}) images")
        b = x_t.shape[0]
        t_vec = torch.as_tensor(t, dtype=x_t.dtype, device=x_t.device).reshape(-1)
        if t_vec.numel() == 1:
            t_vec = t_vec.expand(b)
        t_scalar = int(t_vec[0].item())
        t_emb = self.time_mlp(sinusoidal_embedding(t_vec, cfg.d_model))[:, None, :]

        img = self.patch_in(self._patchify(x_t))
        img = img + self.img_pos(torch.arange(self.n_img, device=x_t.device)) + t_emb
        txt = self.text_encoder(token_ids)
        if txt.shape[0] == 1 and b > 1:
            txt = txt.expand(b, -1, -1)
        txt = txt + t_emb
        n_txt = txt.shape[1]

        records: list[AttnRecord] = []
        for i, block in enumerate(self.blocks):
            img, txt, attn = block(img, txt)
            records.append(AttnRecord(layer=i, map=attn, query_hw=(self.grid, self.grid),
                                      branch=branch, t=t_scalar, joint=True,
                                      n_img=self.n_img, n_txt=n_txt))
        pred = self._unpatchify(self.patch_out(self.norm_out(img)))
        return pred, records


def build_model(cfg: ModelConfig) -> nn.Module:
    if cfg.variant == "cross_attn_unet":
        return CrossAttnUnet(cfg)
    if cfg.variant == "mmdit":
        return MmDit(cfg)
    raise ValueError(f"unknown model variant: {cfg.variant}")


def aggregate_attention(records: list[AttnRecord], cfg: ModelConfig) -> AttnMap:
    """Collapse per-layer records into one ([B,] H, W, n) map.

    Head-mean per record, bilinear resize of the query axis to the canonical
    resolution, then mean over layers. Values are clamped to [0, 1] as a
    guard; means and bilinear resizing already preserve the softmax range.
    With cfg.agg_layers set, only those attention layers contribute.
    """
    if cfg.agg_layers is not None:
        records = [r for r in records if r.layer in cfg.agg_layers]
    if not records:
        raise EmptyRecords("no attention records to aggregate")
    branch, t = records[0].branch, records[0].t
    if any(r.branch != branch or r.t != t for r in records):
        raise MixedProvenance("records mix branches or timesteps")
    H, W = cfg.attn_h, cfg.attn_w
    squeeze = records[0].map.dim() == 3
    resized = []
    n = None
    for rec in records:
        m = rec.map
        if m.dim() == 3:
            m = m[None]
        if rec.joint:
            m = extract_image_text_block(m, rec.n_img, rec.n_txt)
        m = m.mean(dim=1)                      # (B, q, n)
        b, q, n_rec = m.shape
        if n is None:
            n = n_rec
        elif n_rec != n:
            raise MixedProvenance("records disagree on token count")
        h, w = rec.query_hw
        m = m.view(b, h, w, n).permute(0, 3, 1, 2)  # (B, n, h, w)
        if (h, w) != (H, W):
            m = F.interpolate(m, size=(H, W), mode="bilinear", align_corners=False)
        resized.append(m)
    values = torch.stack(resized).mean(dim=0).clamp(0.0, 1.0)  # (B, n, H, W)
    values = values.permute(0, 2, 3, 1)                        # (B, H, W, n)
    if squeeze:
        values = values[0]
    return AttnMap(values=values, n=n, branch=branch, t=t)


def save_checkpoint(path: str | Path, cfg: ModelConfig, tensors: dict[str, torch.Tensor],
                    extra: dict | None = None) -> None:
    """Named float32 tensors as raw little-endian bytes after a JSON header."""
    entries = []
    blobs = []
    offset = 0
    for name, tensor in tensors.items():
        data = tensor.detach().cpu().to(torch.float32).numpy().astype("<f4").tobytes()
        entries.append({"name": name, "shape": list(tensor.shape), "offset": offset,
                        "length": len(data)})
        blobs.append(data)
        offset += len(data)
    header = json.dumps({"magic": CHECKPOINT_MAGIC, "model_config": asdict(cfg),
                         "params": entries, "extra": extra or {}}).encode()
    with open(path, "wb") as f:
        f.write(len(header).to_bytes(8, "little"))
        f.write(header)
        for b in blobs:
            f.write(b)


def load_checkpoint(path: str | Path) -> tuple[ModelConfig, dict[str, torch.Tensor], dict]:
    import numpy as np
    with open(path, "rb") as f:
        hlen = int.from_bytes(f.read(8), "little")
        header = json.loads(f.read(hlen).decode())
        if header.get("magic") != CHECKPOINT_MAGIC:
            raise ValueError("not a recognized checkpoint file")
        blob = f.read()
    cfg = ModelConfig(**header["model_config"])
    tensors = {}
    for e in header["params"]:
        arr = np.frombuffer(blob[e["offset"]:e["offset"] + e["length"]], dtype="<f4")
        tensors[e["name"]] = torch.from_numpy(arr.copy()).view(e["shape"])
    return cfg, tensors, header.get("extra", {})


def save_model(path: str | Path, model: nn.Module, extra: dict | None = None) -> None:
    save_checkpoint(path, model.cfg, dict(model.state_dict()), extra)


def load_model(path: str | Path) -> nn.Module:
    cfg, tensors, _ = load_checkpoint(path)
    model = build_model(cfg)
    model.load_state_dict(tensors)
    return model
