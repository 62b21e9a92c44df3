"""Contrastive training of the style encoder.

Similarity between style samples is the inverse-distance kernel
zeta(a, b) = 1 / (||a - b|| + 1) in (0, 1]; the loss contrasts one positive
(same identity and emotion) against K negatives (different identity or
emotion) through a temperature-scaled softmax.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .clips import StyleClip
from .config import ContrastiveConfig, StyleEncoderConfig
from .errors import ContractError, DataError, NumericError
from .style_encoder import StyleEncoder


def similarity_zeta(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """1 / (||a-b||_2 + 1), broadcasting over leading dims."""
    if a.shape[-1] != b.shape[-1]:
        raise ContractError(f"zeta dimension mismatch {a.shape[-1]} vs {b.shape[-1]}")
    return 1.0 / (torch.linalg.vector_norm(a - b, dim=-1) + 1.0)


def infonce_loss(anchors: torch.Tensor, positives: torch.Tensor,
                 negatives: torch.Tensor, tau: float) -> torch.Tensor:
    """anchors (B,d), positives (B,d), negatives (B,K,d) -> mean loss.

    Per anchor: -log( w(s_p) / (w(s_p) + sum_k w(s_n_k)) ) with
    w(x) = exp(zeta(s, x) / tau), evaluated via logsumexp.
    """
    if negatives.dim() != 3 or negatives.shape[1] < 1:
        raise ContractError("need at least one negative per anchor")
    zp = similarity_zeta(anchors, positives) / tau                       # (B,)
    zn = similarity_zeta(anchors.unsqueeze(1), negatives) / tau          # (B,K)
    logits = torch.cat([zp.unsqueeze(1), zn], dim=1)
    return (torch.logsumexp(logits, dim=1) - zp).mean()


@dataclass
class PairBatch:
    anchor_idx: list[int]
    positive_idx: list[int]
    negative_idx: list[list[int]]


def build_pairs(clips: list[StyleClip], rng: np.random.Generator,
                batch_size: int, negatives_per_anchor: int) -> PairBatch:
    """Sample anchors with a same-(identity, emotion) positive and negatives
    differing in identity or emotion. Uniform under the given rng."""
    groups: dict[tuple[int, str], list[int]] = {}
    for i, c in enumerate(clips):
        groups.setdefault((c.meta.identity, c.meta.emotion), []).append(i)
    anchor_pool = [i for k, idxs in groups.items() if len(idxs) >= 2 for i in idxs]
    if not anchor_pool:
        raise DataError("no (identity, emotion) group has two clips; "
                        "cannot form a positive pair")
    anchors, positives, negs = [], [], []
    for _ in range(batch_size):
        a = int(rng.choice(anchor_pool))
        key = (clips[a].meta.identity, clips[a].meta.emotion)
        pool = [i for i in groups[key] if i != a]
        p = int(rng.choice(pool))
        neg_pool = [i for i in range(len(clips))
                    if (clips[i].meta.identity, clips[i].meta.emotion) != key]
        if not neg_pool:
            raise DataError("no clip differs in identity or emotion; "
                            "cannot form negatives")
        k = min(negatives_per_anchor, len(neg_pool))
        ns = rng.choice(len(neg_pool), size=k, replace=len(neg_pool) < negatives_per_anchor)
        anchors.append(a)
        positives.append(p)
        negs.append([neg_pool[int(j)] for j in np.atleast_1d(ns)])
    return PairBatch(anchors, positives, negs)


def _draw_modality_drop(rng: np.random.Generator, n: int,
                        cfg: StyleEncoderConfig) -> torch.Tensor:
    """(n,2) bool [drop_expr, drop_audio]; mutually exclusive by construction."""
    u = rng.random(n)
    drop_expr = u < cfg.dropout_prob_expr
    drop_audio = (~drop_expr) & (u < cfg.dropout_prob_expr + cfg.dropout_prob_audio)
    assert not np.any(drop_expr & drop_audio)
    return torch.from_numpy(np.stack([drop_expr, drop_audio], axis=1))


def train_style_encoder(clips: list[StyleClip], enc_cfg: StyleEncoderConfig,
                        cfg: ContrastiveConfig, seed: int,
                        trace_path: Path | None = None):
    """Returns (encoder, trace rows). Trace columns: step, loss, zeta_pos, zeta_neg."""
    torch.manual_seed(seed)
    encoder = StyleEncoder(enc_cfg)
    encoder.train()
    rng = np.random.default_rng(np.random.SeedSequence([seed, 11]))
    gen = torch.Generator().manual_seed(seed + 1)
    opt = torch.optim.Adam(encoder.parameters(), lr=cfg.lr)

    expr_all = torch.from_numpy(np.stack([c.expr for c in clips])).float()
    audio_all = torch.from_numpy(np.stack([c.audio for c in clips])).float()

    def encode(idx: list[int]) -> torch.Tensor:
        drop = _draw_modality_drop(rng, len(idx), enc_cfg)
        mu, sigma, _ = encoder(expr_all[idx], audio_all[idx], drop=drop)
        if cfg.sample_prior:
            return StyleEncoder.reparam_sample(mu, sigma, generator=gen)
        return mu

    trace = []
    for step in range(1, cfg.steps + 1):
        batch = build_pairs(clips, rng, cfg.batch_size, cfg.negatives_per_anchor)
        s_a = encode(batch.anchor_idx)
        s_p = encode(batch.positive_idx)
        flat_negs = [i for row in batch.negative_idx for i in row]
        k = len(batch.negative_idx[0])
        s_n = encode(flat_negs).reshape(len(batch.anchor_idx), k, -1)

        loss = infonce_loss(s_a, s_p, s_n, cfg.tau)
        if not torch.isfinite(loss):
            raise NumericError(f"contrastive loss non-finite at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()

        if step % cfg.log_every == 0 or step == 1 or step == cfg.steps:
            with torch.no_grad():
                zp = similarity_zeta(s_a, s_p).mean()
                zn = similarity_zeta(s_a.unsqueeze(1), s_n).mean()
            trace.append({"step": step, "loss": float(loss.detach()),
                          "zeta_pos": float(zp), "zeta_neg": float(zn)})

    encoder.eval()
    if trace_path is not None:
        write_trace(trace_path, trace)
    return encoder, trace


def write_trace(path: Path, rows: list[dict]):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
