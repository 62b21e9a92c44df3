"""Denoising generator.

A small two-resolution UNet predicts the noise added to a clip of latent
frames. Four residual attachments condition it: reference tokens from a
weight-tied pass over the clean reference latent are concatenated into the
self-attention keys/values; audio windows and the style sample enter via
cross-attention; temporal attention mixes the f frames per spatial site.
Every attachment's output projection starts at zero, so an untrained
attachment leaves the backbone function bitwise unchanged.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .config import DiffusionConfig
from .errors import ContractError, NumericError


class NoiseSchedule:
    """Linear-beta schedule; alpha_bar[t] is the cumulative signal coefficient
    with alpha_bar[0] = 1 (t=0 is the identity endpoint)."""

    def __init__(self, timesteps: int, beta_start: float = 1e-4,
                 beta_end: float = 2e-2):
        self.T = timesteps
        betas = np.linspace(beta_start, beta_end, timesteps, dtype=np.float64)
        abar = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
        if not (np.all(np.diff(abar) < 0) and abar[-1] > 0.0 and abar[1] < 1.0):
            raise ContractError("degenerate noise schedule")
        self.betas = betas
        self.alpha_bar = abar  # length T+1, indexed by t in [0, T]

    def _gather(self, t, like: torch.Tensor) -> torch.Tensor:
        t = torch.as_tensor(t)
        if torch.any(t < 0) or torch.any(t > self.T):
            raise ContractError(f"timestep outside [0, {self.T}]")
        ab = torch.from_numpy(self.alpha_bar).to(like.dtype)[t]
        return ab.reshape([-1] + [1] * (like.dim() - 1))

    def forward_diffuse(self, z0: torch.Tensor, t, eps: torch.Tensor) -> torch.Tensor:
        """z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps; t scalar or (B,)."""
        if eps.shape != z0.shape:
            raise ContractError("noise must be shaped like z0")
        ab = self._gather(t, z0)
        return torch.sqrt(ab) * z0 + torch.sqrt(1.0 - ab) * eps


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) *
                      torch.arange(half, dtype=torch.float32) / half)
    args = t.float().unsqueeze(1) * freqs.unsqueeze(0)
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


def _group_norm(ch: int) -> nn.GroupNorm:
    g = 8
    while ch % g:
        g //= 2
    return nn.GroupNorm(g, ch)


def _zero_mha(ch: int, heads: int) -> nn.MultiheadAttention:
    mha = nn.MultiheadAttention(ch, heads, batch_first=True)
    nn.init.zeros_(mha.out_proj.weight)
    nn.init.zeros_(mha.out_proj.bias)
    return mha


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, tdim: int):
        super().__init__()
        self.norm1 = _group_norm(cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.temb = nn.Linear(tdim, cout)
        self.norm2 = _group_norm(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()
        self.act = nn.SiLU()

    def forward(self, x, temb):
        h = self.conv1(self.act(self.norm1(x)))
        h = h + self.temb(self.act(temb))[:, :, None, None]
        h = self.conv2(self.act(self.norm2(h)))
        return h + self.skip(x)


class SiteAttention(nn.Module):
    """One conditioning site on spatial tokens: self-attention with optional
    reference K/V concatenation, then audio and (optionally) style
    cross-attention, each residual with a zero-initialized output projection."""

    def __init__(self, ch: int, heads: int, d_audio: int, d_style: int,
                 with_style: bool = True):
        super().__init__()
        self.norm_self = nn.LayerNorm(ch)
        self.self_attn = _zero_mha(ch, heads)
        self.norm_audio = nn.LayerNorm(ch)
        self.audio_in = nn.Linear(d_audio, ch)
        self.audio_attn = _zero_mha(ch, heads)
        self.with_style = with_style
        if with_style:
            self.norm_style = nn.LayerNorm(ch)
            self.style_in = nn.Linear(d_style, ch)
            self.style_attn = _zero_mha(ch, heads)

    def forward(self, x: torch.Tensor, ref: torch.Tensor | None,
                audio: torch.Tensor | None, style: torch.Tensor | None):
        # x (B,L,C); ref (B,Lr,C) pre-norm tokens from the weight-tied pass
        h = self.norm_self(x)
        kv = h if ref is None else torch.cat([h, self.norm_self(ref)], dim=1)
        att, _ = self.self_attn(h, kv, kv, need_weights=False)
        x = x + att
        if audio is not None:
            tok = self.audio_in(audio)
            att, _ = self.audio_attn(self.norm_audio(x), tok, tok, need_weights=False)
            x = x + att
        if style is not None and self.with_style:
            tok = self.style_in(style)
            att, _ = self.style_attn(self.norm_style(x), tok, tok, need_weights=False)
            x = x + att
        return x


class TemporalAttention(nn.Module):
    """Attention across the f frames at each spatial location."""

    def __init__(self, ch: int, heads: int, max_frames: int = 64,
                 positional: bool = True):
        super().__init__()
        self.norm = nn.LayerNorm(ch)
        self.attn = _zero_mha(ch, heads)
        self.positional = positional
        pos = timestep_embedding(torch.arange(max_frames), ch)
        self.register_buffer("pe", pos, persistent=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # x (B, f, C, H, W) -> attend over f per (b, h, w)
        b, f, c, hh, ww = x.shape
        tok = x.permute(0, 3, 4, 1, 2).reshape(b * hh * ww, f, c)
        h = self.norm(tok)
        if self.positional:
            h = h + self.pe[:f].to(h.dtype)
        att, _ = self.attn(h, h, h, need_weights=False)
        tok = tok + att
        return tok.reshape(b, hh, ww, f, c).permute(0, 3, 4, 1, 2)


@dataclass
class ConditionBundle:
    """Conditioning for one batch of clips. Optional fields may be None,
    which disables the corresponding attachment (test hooks)."""

    ref_latent: torch.Tensor | None = None   # (B, C, h, w), clean
    kps: torch.Tensor | None = None          # (B, f, 1, H, W) rasters
    audio: torch.Tensor | None = None        # (B, f, W, d_audio) windows
    style: torch.Tensor | None = None        # (B, m, d_style) tokens


class UNet(nn.Module):
    def __init__(self, cfg: DiffusionConfig, latent_channels: int,
                 latent_size: int, d_audio: int):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        w0 = cfg.base_width * cfg.channel_mult[0]
        w1 = cfg.base_width * cfg.channel_mult[-1]
        tdim = cfg.base_width * 4
        self.latent_channels = latent_channels
        self.latent_size = latent_size
        self.time_mlp = nn.Sequential(
            nn.Linear(cfg.base_width, tdim), nn.SiLU(), nn.Linear(tdim, tdim))
        self.in_conv = nn.Conv2d(latent_channels, w0, 3, padding=1)

        self.down0 = ResBlock(w0, w0, tdim)
        self.downsample = nn.Conv2d(w0, w0, 3, stride=2, padding=1)
        self.down1 = ResBlock(w0, w1, tdim)
        self.mid1 = ResBlock(w1, w1, tdim)
        self.mid2 = ResBlock(w1, w1, tdim)
        self.up1 = ResBlock(w1 + w1, w1, tdim)
        self.upsample = nn.Sequential(nn.Upsample(scale_factor=2, mode="nearest"),
                                      nn.Conv2d(w1, w0, 3, padding=1))
        self.up0 = ResBlock(w0 + w0, w0, tdim)
        self.out_norm = _group_norm(w0)
        self.out_conv = nn.Conv2d(w0, latent_channels, 3, padding=1)
        self.act = nn.SiLU()

        # conditioning sites; "d0" sits at full resolution and exists only
        # when attn_levels == "all"
        style_everywhere = cfg.style_attn_levels == "all"
        sites = {}
        if cfg.attn_levels == "all":
            sites["d0"] = SiteAttention(w0, cfg.heads, d_audio, cfg.d_cond,
                                        with_style=style_everywhere)
        sites["d1"] = SiteAttention(w1, cfg.heads, d_audio, cfg.d_cond,
                                    with_style=style_everywhere)
        sites["mid"] = SiteAttention(w1, cfg.heads, d_audio, cfg.d_cond,
                                     with_style=True)
        self.sites = nn.ModuleDict(sites)
        self.temporal = nn.ModuleDict({
            "d1": TemporalAttention(w1, cfg.heads,
                                    positional=cfg.temporal_positional_encoding),
            "mid": TemporalAttention(w1, cfg.heads,
                                     positional=cfg.temporal_positional_encoding),
        })

    @staticmethod
    def _tokens(x: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        return x.reshape(b, c, h * w).transpose(1, 2)

    @staticmethod
    def _spatial(tok: torch.Tensor, h: int, w: int) -> torch.Tensor:
        b, l, c = tok.shape
        return tok.transpose(1, 2).reshape(b, c, h, w)

    def _site(self, name: str, x: torch.Tensor, ref_feats, audio, style,
              collector, frames: int):
        """Apply a conditioning site (and temporal attention) at a trunk
        position; in collect mode, record the pre-norm tokens instead."""
        if name not in self.sites:
            return x
        b, c, h, w = x.shape
        tok = self._tokens(x)
        if collector is not None:
            collector[name] = tok
            return x
        ref = ref_feats.get(name) if ref_feats else None
        tok = self.sites[name](tok, ref, audio, style)
        x = self._spatial(tok, h, w)
        if name in self.temporal and frames > 1:
            bc = b // frames
            x = self.temporal[name](x.reshape(bc, frames, c, h, w)).reshape(b, c, h, w)
        return x

    def forward(self, z: torch.Tensor, t: torch.Tensor,
                ref_feats: dict | None = None, audio: torch.Tensor | None = None,
                style: torch.Tensor | None = None, collect_ref: bool = False):
        """z (B, f, C, h, w); t (B,). Returns predicted noise shaped like z,
        or (with collect_ref) the per-site reference token dict."""
        if z.dim() != 5:
            raise ContractError(f"expected (B,f,C,h,w) latents, got {tuple(z.shape)}")
        b, f, c, hh, ww = z.shape
        x = z.reshape(b * f, c, hh, ww)
        temb = self.time_mlp(timestep_embedding(
            t.repeat_interleave(f), self.cfg.base_width).to(z.dtype))
        if audio is not None:
            audio = audio.reshape(b * f, *audio.shape[2:])
        if style is not None:
            style = style.repeat_interleave(f, dim=0)
        if ref_feats is not None:
            ref_feats = {k: v.repeat_interleave(f, dim=0) for k, v in ref_feats.items()}
        collector: dict | None = {} if collect_ref else None

        x = self.in_conv(x)
        x = self.down0(x, temb)
        x = self._site("d0", x, ref_feats, audio, style, collector, f)
        skip0 = x
        x = self.downsample(x)
        x = self.down1(x, temb)
        x = self._site("d1", x, ref_feats, audio, style, collector, f)
        skip1 = x
        x = self.mid1(x, temb)
        x = self._site("mid", x, ref_feats, audio, style, collector, f)
        x = self.mid2(x, temb)
        x = self.up1(torch.cat([x, skip1], dim=1), temb)
        x = self.upsample(x)
        x = self.up0(torch.cat([x, skip0], dim=1), temb)
        x = self.out_conv(self.act(self.out_norm(x)))
        if collect_ref:
            return collector
        return x.reshape(b, f, c, hh, ww)


class SvpModel(nn.Module):
    """UNet plus keypoint guider plus style-token projection: the trainable
    generator artifact. Parameters split into named groups that the staged
    training freezes and audits."""

    def __init__(self, cfg: DiffusionConfig, latent_channels: int,
                 latent_size: int, d_audio: int):
        super().__init__()
        from .conditioning import KpsGuider
        self.cfg = cfg
        self.unet = UNet(cfg, latent_channels, latent_size, d_audio)
        self.guider = KpsGuider(latent_channels, cfg.image_size, latent_size)
        if cfg.style_tokens > 1:
            self.style_expand = nn.Linear(cfg.d_cond, cfg.style_tokens * cfg.d_cond)
        else:
            self.style_expand = None

    def ref_features(self, ref_latent: torch.Tensor) -> dict:
        """Weight-tied pass over the clean reference latent at t=0; captures
        the tokens entering each site's self-attention."""
        b = ref_latent.shape[0]
        t = torch.zeros(b, dtype=torch.long)
        return self.unet(ref_latent.unsqueeze(1), t, collect_ref=True)

    def style_tokens(self, s: torch.Tensor) -> torch.Tensor:
        if s.dim() == 2:
            s = s.unsqueeze(1)
        if self.style_expand is not None:
            b = s.shape[0]
            s = self.style_expand(s[:, 0]).reshape(b, self.cfg.style_tokens, -1)
        return s

    def forward(self, z: torch.Tensor, t: torch.Tensor, cond: ConditionBundle,
                ref_feats: dict | None = None) -> torch.Tensor:
        b, f = z.shape[:2]
        if cond.kps is not None:
            kps_feat = self.guider(cond.kps.reshape(b * f, *cond.kps.shape[2:]))
            z = z + kps_feat.reshape(b, f, *kps_feat.shape[1:])
        if ref_feats is None and cond.ref_latent is not None:
            ref_feats = self.ref_features(cond.ref_latent)
        style = self.style_tokens(cond.style) if cond.style is not None else None
        return self.unet(z, t, ref_feats=ref_feats, audio=cond.audio, style=style)

    def param_groups(self) -> dict[str, list[str]]:
        """Named parameter groups for the staged freeze policy."""
        groups = {"backbone": [], "kps_guider": [], "audio_attn": [],
                  "style_attn": [], "temporal": []}
        for name, _ in self.named_parameters():
            if name.startswith("guider."):
                groups["kps_guider"].append(name)
            elif "temporal" in name:
                groups["temporal"].append(name)
            elif "audio" in name:
                groups["audio_attn"].append(name)
            elif "style" in name:
                groups["style_attn"].append(name)
            else:
                groups["backbone"].append(name)
        return groups


def denoising_loss(model: SvpModel, schedule: NoiseSchedule, z0: torch.Tensor,
                   cond: ConditionBundle, t: torch.Tensor, eps: torch.Tensor,
                   ref_feats: dict | None = None) -> torch.Tensor:
    """MSE between predicted and true noise over all elements."""
    z_t = schedule.forward_diffuse(z0, t, eps)
    pred = model(z_t, t, cond, ref_feats=ref_feats)
    if not torch.all(torch.isfinite(pred)):
        raise NumericError("denoiser produced non-finite output")
    return torch.mean((pred - eps) ** 2)


def sample_video(model: SvpModel, schedule: NoiseSchedule, cond: ConditionBundle,
                 frames: int, steps: int, seed: int, codec) -> np.ndarray:
    """Deterministic strided sampler. Returns (B, f, H, W, 3) pixels in [0,1]."""
    if steps < 1:
        raise ContractError("sampler needs steps >= 1")
    if cond.ref_latent is None:
        raise ContractError("sampling requires a reference latent")
    model.eval()
    b = cond.ref_latent.shape[0]
    c, h, w = cond.ref_latent.shape[1:]
    gen = torch.Generator().manual_seed(seed)
    z = torch.randn(b, frames, c, h, w, generator=gen)
    taus = np.round(np.linspace(schedule.T, 0, steps + 1)).astype(int)
    with torch.no_grad():
        ref_feats = model.ref_features(cond.ref_latent)
        for i in range(steps):
            t_cur, t_next = int(taus[i]), int(taus[i + 1])
            tt = torch.full((b,), t_cur, dtype=torch.long)
            eps_pred = model(z, tt, cond, ref_feats=ref_feats)
            ab_c = float(schedule.alpha_bar[t_cur])
            ab_n = float(schedule.alpha_bar[t_next])
            x0 = (z - math.sqrt(1.0 - ab_c) * eps_pred) / math.sqrt(ab_c)
            x0 = torch.clamp(x0, -1.0, 1.0)
            z = math.sqrt(ab_n) * x0 + math.sqrt(1.0 - ab_n) * eps_pred
            if not torch.all(torch.isfinite(z)):
                raise NumericError(f"non-finite latent at sampler step {i}")
        pix = codec.decode(z.reshape(b * frames, c, h, w))
    hh, ww = pix.shape[2:]
    return pix.reshape(b, frames, 3, hh, ww).permute(0, 1, 3, 4, 2).numpy().astype(np.float32)
