"""Probabilistic intrinsic-style encoder.

Two transformer branches (expression coefficients, audio features) produce
per-frame embeddings; a cross-attention layer fuses them with expression as
the query side; attention-weighted pooling over frames yields a Gaussian
(mu, sigma) over style space; conditioning draws reparameterized samples.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .checkpoints import load_checkpoint, save_checkpoint
from .clips import StyleClip
from .config import StyleEncoderConfig
from .errors import ContractError, DataError


@dataclass
class StylePrior:
    mu: np.ndarray
    sigma: np.ndarray  # elementwise std, >= 0
    source_clip_id: str = ""

    def __post_init__(self):
        if not (np.all(np.isfinite(self.mu)) and np.all(np.isfinite(self.sigma))):
            raise DataError(f"non-finite style prior from {self.source_clip_id!r}")
        if np.any(self.sigma < 0):
            raise ContractError("negative sigma in style prior")


def sample_prior(prior: StylePrior, seed: int) -> np.ndarray:
    """s = mu + sigma * eps with eps ~ N(0, I) under the given seed."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 909]))
    eps = rng.standard_normal(prior.mu.shape)
    return prior.mu + prior.sigma * eps


def sinusoidal_table(max_len: int, d: int) -> torch.Tensor:
    pos = torch.arange(max_len, dtype=torch.float64).unsqueeze(1)
    div = torch.exp(torch.arange(0, d, 2, dtype=torch.float64) * (-math.log(10000.0) / d))
    pe = torch.zeros(max_len, d, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(pos * div)
    pe[:, 1::2] = torch.cos(pos * div)
    return pe


class StyleEncoder(nn.Module):
    def __init__(self, cfg: StyleEncoderConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        d = cfg.d_style
        self.expr_in = nn.Linear(cfg.d_expr, d)
        self.audio_in = nn.Linear(cfg.d_audio, d)
        layer = dict(d_model=d, nhead=cfg.heads, dim_feedforward=2 * d,
                     dropout=0.0, batch_first=True, norm_first=True)
        self.expr_branch = nn.TransformerEncoder(
            nn.TransformerEncoderLayer(**layer), cfg.layers, enable_nested_tensor=False)
        self.audio_branch = nn.TransformerEncoder(
            nn.TransformerEncoderLayer(**layer), cfg.layers, enable_nested_tensor=False)
        self.fuse_attn = nn.MultiheadAttention(d, cfg.heads, batch_first=True)
        self.fuse_norm = nn.LayerNorm(d)
        # frame-pooling logits come from <agg_w, s_n>; zero init = uniform pooling
        self.agg_w = nn.Parameter(torch.zeros(d))
        self.register_buffer("pe", sinusoidal_table(cfg.max_frames, d).float(),
                             persistent=False)

    # ---- Eq.-level operations ----

    def encode_branches(self, expr: torch.Tensor, audio: torch.Tensor,
                        drop: torch.Tensor | None = None):
        """expr (B,N,d_expr), audio (B,N,d_audio) -> per-frame embeddings.

        drop: optional (B,2) bool, [drop_expr, drop_audio]. A dropped modality
        is replaced by zeros at the input; the branch still runs. Dropping
        both for one sample violates the conditioning contract.
        """
        if expr.dim() != 3 or audio.dim() != 3:
            raise ContractError("encode_branches expects batched (B,N,d) inputs")
        if expr.shape[1] != audio.shape[1]:
            raise ContractError(
                f"sequence length mismatch: expr N={expr.shape[1]} audio N={audio.shape[1]}")
        n = expr.shape[1]
        if n > self.cfg.max_frames:
            raise ContractError(f"sequence length {n} exceeds max_frames {self.cfg.max_frames}")
        if drop is not None:
            if torch.any(drop[:, 0] & drop[:, 1]):
                raise ContractError("modality dropout must never zero both inputs")
            expr = expr * (~drop[:, 0]).view(-1, 1, 1)
            audio = audio * (~drop[:, 1]).view(-1, 1, 1)
        hb = self.expr_in(expr)
        ha = self.audio_in(audio)
        if self.cfg.positional_encoding:
            hb = hb + self.pe[:n].to(hb.dtype)
            ha = ha + self.pe[:n].to(ha.dtype)
        return self.expr_branch(hb), self.audio_branch(ha)

    def fuse(self, sb: torch.Tensor, sa: torch.Tensor) -> torch.Tensor:
        """Cross-modal fusion; expression tokens query the audio tokens."""
        if sb.shape != sa.shape:
            raise ContractError(f"fuse shape mismatch {tuple(sb.shape)} vs {tuple(sa.shape)}")
        att, _ = self.fuse_attn(sb, sa, sa, need_weights=False)
        return self.fuse_norm(sb + att)

    def aggregate(self, s: torch.Tensor):
        """(B,N,d) -> pooled (mu, sigma); attention weights over frames."""
        if s.shape[1] < 1:
            raise ContractError("cannot aggregate an empty sequence")
        logits = torch.einsum("bnd,d->bn", s, self.agg_w.to(s.dtype))
        w = torch.softmax(logits, dim=1).unsqueeze(-1)
        mu = (w * s).sum(dim=1)
        var = (w * (s - mu.unsqueeze(1)) ** 2).sum(dim=1)
        sigma = torch.sqrt(torch.clamp(var, min=0.0))
        return mu, sigma

    def forward(self, expr: torch.Tensor, audio: torch.Tensor,
                drop: torch.Tensor | None = None):
        sb, sa = self.encode_branches(expr, audio, drop=drop)
        s = self.fuse(sb, sa)
        mu, sigma = self.aggregate(s)
        return mu, sigma, s

    @staticmethod
    def reparam_sample(mu: torch.Tensor, sigma: torch.Tensor,
                       generator: torch.Generator | None = None) -> torch.Tensor:
        eps = torch.randn(mu.shape, generator=generator,
                          dtype=mu.dtype, device=mu.device)
        return mu + sigma * eps

    # ---- clip-level convenience (inference) ----

    @torch.no_grad()
    def prior(self, clip: StyleClip, use_expr: bool = True,
              use_audio: bool = True) -> StylePrior:
        if not (use_expr or use_audio):
            raise ContractError("at least one modality must be enabled")
        expr = torch.from_numpy(clip.expr).float().unsqueeze(0)
        audio = torch.from_numpy(clip.audio).float().unsqueeze(0)
        drop = torch.tensor([[not use_expr, not use_audio]])
        mu, sigma, _ = self.forward(expr, audio, drop=drop)
        return StylePrior(mu=mu[0].numpy().astype(np.float64),
                          sigma=sigma[0].numpy().astype(np.float64),
                          source_clip_id=clip.meta.clip_id)

    # ---- persistence ----

    def save(self, path, meta: dict | None = None):
        state = {k: v.detach().numpy() for k, v in self.state_dict().items()}
        save_checkpoint(path, state, config={"style_encoder": self.cfg.to_dict()},
                        meta=meta or {})

    @classmethod
    def load(cls, path) -> "StyleEncoder":
        state, config, _ = load_checkpoint(path)
        enc = cls(StyleEncoderConfig.from_dict(config["style_encoder"]))
        enc.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in state.items()})
        enc.eval()
        return enc
