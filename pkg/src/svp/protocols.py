"""Evaluation protocols built on the generator, oracle and style encoder.

Three report families:

- reconstruction: held-out clips re-synthesized from their own conditions
  (reference frame, audio, keypoints, style mean), scored with PSNR/SSIM.
- style transfer: neutral reference frame of an identity driven with an
  emotion clip's audio/kps and its style prior; the oracle decodes the
  generated clip's emotion, and StyleSim compares the generated clip's
  style code against source and reference priors.
- identity leakage: cross-identity transfers where the oracle's identity
  read on generated frames should stay with the reference; a mismatch means
  the style vector leaked its speaker.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .clips import Corpus, StyleClip
from .config import CorpusConfig, DiffusionConfig
from .errors import DataError
from .evaluation import pixel_metrics, style_prior_of_frames, style_sim
from .generate import build_conditions, generate_clip
from .oracle import OracleDecoder
from .style_encoder import StyleEncoder, sample_prior


def _style_tensor(vec: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.asarray(vec, dtype=np.float32)).unsqueeze(0)


def reconstruction_report(model, codec, cfg: DiffusionConfig, clips: list[StyleClip],
                          style_encoder: StyleEncoder | None, seed: int = 0,
                          frames: int | None = None, steps: int | None = None) -> dict:
    """Re-synthesize each clip from its own ground-truth conditions."""
    if not clips:
        raise DataError("reconstruction needs at least one clip")
    f = frames or cfg.frames
    rows = []
    for i, clip in enumerate(clips):
        cond = build_conditions(clip, clip, cfg, codec, frames=f, ref_frame=0, start=0)
        if style_encoder is not None:
            with torch.no_grad():
                prior = style_encoder.prior(clip)
            cond.style = _style_tensor(prior.mu)
        vid = generate_clip(model, codec, cfg, cond, frames=f,
                            seed=seed * 7919 + i, steps=steps)
        psnr, ssim = pixel_metrics(vid, clip.frames[:f])
        rows.append({"clip_id": clip.meta.clip_id, "psnr": psnr, "ssim": ssim})
    return {
        "clips": rows,
        "psnr_mean": float(np.mean([r["psnr"] for r in rows])),
        "ssim_mean": float(np.mean([r["ssim"] for r in rows])),
        "frames": f,
    }


@dataclass
class TransferCase:
    ref_id: str
    style_id: str
    drive_id: str
    expected_emotion: str
    video: np.ndarray | None = None
    decoded_emotion: str | None = None
    decoded_identity: int | None = None
    sim_to_style: float | None = None
    sim_to_ref: float | None = None
    extras: dict = field(default_factory=dict)


def neutral_reference(corpus: Corpus, identity: int, split: str = "test") -> StyleClip:
    pool = [c for c in corpus.clips
            if c.meta.identity == identity and c.meta.emotion == "neutral"
            and (split is None or c.meta.split == split)]
    if not pool:
        raise DataError(f"identity {identity} has no neutral clip in split {split!r}")
    return pool[0]


def style_pool(corpus: Corpus, identity: int, emotion: str, intensity: int | None,
               split: str = "train") -> list[StyleClip]:
    pool = [c for c in corpus.clips
            if c.meta.identity == identity and c.meta.emotion == emotion
            and (intensity is None or c.meta.intensity == intensity)
            and (split is None or c.meta.split == split)]
    if not pool:
        raise DataError(f"no {emotion!r} (intensity {intensity}) clip for identity "
                        f"{identity} in split {split!r}")
    return pool


def run_transfer_case(model, codec, cfg: DiffusionConfig, style_encoder: StyleEncoder,
                      ref_clip: StyleClip, style_clip: StyleClip,
                      drive_clip: StyleClip, seed: int, frames: int | None = None,
                      sample_style: bool = True, steps: int | None = None) -> np.ndarray:
    f = frames or cfg.frames
    cond = build_conditions(ref_clip, drive_clip, cfg, codec, frames=f,
                            ref_frame=0, start=0)
    with torch.no_grad():
        prior = style_encoder.prior(style_clip)
    vec = sample_prior(prior, seed) if sample_style else prior.mu
    cond.style = _style_tensor(vec)
    return generate_clip(model, codec, cfg, cond, frames=f, seed=seed, steps=steps)


def transfer_report(model, codec, cfg: DiffusionConfig, corpus: Corpus,
                    style_encoder: StyleEncoder, decoder: OracleDecoder,
                    cases: list[TransferCase], seed: int = 0,
                    frames: int | None = None, steps: int | None = None,
                    compare_styles: bool = True) -> dict:
    """Generate every case, oracle-decode it, and score emotion accuracy,
    identity retention, and StyleSim margins."""
    d_expr = corpus.clips[0].meta.d_expr
    for i, case in enumerate(cases):
        ref = corpus.get(case.ref_id)
        sty = corpus.get(case.style_id)
        drv = corpus.get(case.drive_id)
        vid = run_transfer_case(model, codec, cfg, style_encoder, ref, sty, drv,
                                seed=seed * 6007 + i, frames=frames, steps=steps)
        case.video = vid
        reading = decoder.decode_clip(vid)
        case.decoded_emotion = reading.emotion if reading.ok else None
        case.decoded_identity = reading.identity if reading.ok else None
        if compare_styles:
            try:
                gen_prior = style_prior_of_frames(vid, decoder, style_encoder,
                                                  d_expr, f"gen_{i}")
                with torch.no_grad():
                    sty_prior = style_encoder.prior(sty)
                    ref_prior = style_encoder.prior(ref)
                case.sim_to_style = style_sim(gen_prior.mu, sty_prior.mu)
                case.sim_to_ref = style_sim(gen_prior.mu, ref_prior.mu)
            except DataError:
                case.sim_to_style = case.sim_to_ref = None
    decoded = [c for c in cases if c.decoded_emotion is not None]
    correct = [c for c in decoded if c.decoded_emotion == c.expected_emotion]
    id_pairs = [(c, corpus.get(c.ref_id).meta.identity) for c in cases
                if c.decoded_identity is not None]
    id_mismatch = [c for c, ref_ident in id_pairs if c.decoded_identity != ref_ident]
    sims = [(c.sim_to_style, c.sim_to_ref) for c in cases
            if c.sim_to_style is not None]
    report = {
        "n_cases": len(cases),
        "n_decoded": len(decoded),
        "emotion_accuracy": len(correct) / len(cases) if cases else 0.0,
        "identity_mismatch_rate": (len(id_mismatch) / len(id_pairs)) if id_pairs else None,
        "per_case": [{
            "ref": c.ref_id, "style": c.style_id, "expected": c.expected_emotion,
            "decoded_emotion": c.decoded_emotion, "decoded_identity": c.decoded_identity,
            "sim_to_style": c.sim_to_style, "sim_to_ref": c.sim_to_ref,
        } for c in cases],
    }
    if sims:
        report["sim_to_style_mean"] = float(np.mean([a for a, _ in sims]))
        report["sim_to_ref_mean"] = float(np.mean([b for _, b in sims]))
    return report


def same_identity_cases(corpus: Corpus, emotions: list[str], intensity: int | None = None,
                        clips_per_cell: int = 2) -> list[TransferCase]:
    """Neutral held-out reference of each identity paired with same-identity
    emotion styles; the driving audio/kps come from the style clip."""
    cases = []
    identities = sorted({c.meta.identity for c in corpus.clips})
    for ident in identities:
        ref = neutral_reference(corpus, ident)
        for emo in emotions:
            inten = None if emo == "neutral" else intensity
            pool = style_pool(corpus, ident, emo, inten)
            for sty in pool[:clips_per_cell]:
                cases.append(TransferCase(ref_id=ref.meta.clip_id,
                                          style_id=sty.meta.clip_id,
                                          drive_id=sty.meta.clip_id,
                                          expected_emotion=emo))
    return cases


def cross_identity_cases(corpus: Corpus, emotions: list[str],
                         intensity: int | None = 3, shift: int = 1) -> list[TransferCase]:
    """Neutral reference of identity i, style from identity i+shift."""
    cases = []
    identities = sorted({c.meta.identity for c in corpus.clips})
    n = len(identities)
    for pos, ident in enumerate(identities):
        ref = neutral_reference(corpus, ident)
        other = identities[(pos + shift) % n]
        for emo in emotions:
            inten = None if emo == "neutral" else intensity
            sty = style_pool(corpus, other, emo, inten)[0]
            cases.append(TransferCase(ref_id=ref.meta.clip_id,
                                      style_id=sty.meta.clip_id,
                                      drive_id=sty.meta.clip_id,
                                      expected_emotion=emo))
    return cases


def oracle_for(corpus: Corpus, corpus_cfg: CorpusConfig) -> OracleDecoder:
    return OracleDecoder(corpus_cfg, seed=corpus.seed)
