"""Clip generation: condition assembly, sampling, and on-disk clip output.

A generated clip directory holds per-frame PNGs, the raw float32 tensor
(``clip.f32``, f x H x W x 3 in [0,1]), and ``manifest.json`` recording the
seed, sampler steps, checkpoint hashes, and condition sources.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .clips import StyleClip, write_f32
from .conditioning import rasterize_kps, window_audio
from .config import DiffusionConfig
from .diffusion import ConditionBundle, NoiseSchedule, SvpModel, sample_video
from .errors import ContractError, DataError


def build_conditions(ref_clip: StyleClip, drive_clip: StyleClip, cfg: DiffusionConfig,
                     codec, frames: int, ref_frame: int = 0,
                     start: int = 0) -> ConditionBundle:
    """Reference frame latent plus the driving clip's kps rasters and audio
    windows for frames [start, start+frames)."""
    if ref_clip.frames is None:
        raise DataError(f"reference clip {ref_clip.meta.clip_id} has no stored frames")
    if drive_clip.kps is None:
        raise DataError(f"driving clip {drive_clip.meta.clip_id} has no keypoints")
    if not (0 <= ref_frame < ref_clip.meta.n_frames):
        raise ContractError(f"reference frame {ref_frame} outside clip")
    if start < 0 or start + frames > drive_clip.meta.n_frames:
        raise ContractError(f"driving window [{start}, {start + frames}) outside clip "
                            f"of {drive_clip.meta.n_frames} frames")
    ref = torch.from_numpy(ref_clip.frames[ref_frame]).permute(2, 0, 1).unsqueeze(0)
    idx = range(start, start + frames)
    kps = torch.from_numpy(np.stack([
        rasterize_kps(drive_clip.kps[i], cfg.image_size, cfg.image_size,
                      cfg.kps_radius_px) for i in idx])).unsqueeze(1).unsqueeze(0)
    audio = torch.from_numpy(np.stack([
        window_audio(drive_clip.audio, i, cfg.audio_window) for i in idx])).unsqueeze(0)
    with torch.no_grad():
        ref_latent = codec.encode(ref)
    return ConditionBundle(ref_latent=ref_latent, kps=kps, audio=audio, style=None)


def generate_clip(model: SvpModel, codec, cfg: DiffusionConfig,
                  cond: ConditionBundle, frames: int, seed: int,
                  steps: int | None = None) -> np.ndarray:
    """(f, H, W, 3) float32 pixels in [0, 1]."""
    schedule = NoiseSchedule(cfg.timesteps, cfg.beta_start, cfg.beta_end)
    vid = sample_video(model, schedule, cond, frames=frames,
                       steps=steps or cfg.sample_steps, seed=seed, codec=codec)
    return vid[0]


def save_generated(out_dir, video: np.ndarray, manifest: dict):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(video):
        img = Image.fromarray(
            np.clip(np.rint(frame * 255.0), 0, 255).astype(np.uint8))
        img.save(out_dir / f"frame_{i:03d}.png")
    write_f32(out_dir / "clip.f32", video)
    (out_dir / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out_dir


def load_generated(out_dir) -> np.ndarray:
    out_dir = Path(out_dir)
    manifest = json.loads((out_dir / "manifest.json").read_text())
    f, h, w = manifest["frames"], manifest["image_size"], manifest["image_size"]
    from .clips import read_f32
    return read_f32(out_dir / "clip.f32", (f, h, w, 3))
