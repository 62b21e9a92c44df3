"""Staged training of the denoising generator.

Stage 1 learns single-frame denoising with reference and keypoint
conditioning (backbone + kps guider trainable). Stage 2 adds audio
cross-attention and temporal attention on short frame windows, everything
else frozen. Stage 3 trains only the style cross-attention, pairing each
target clip with a same-identity reference of a different emotion so the
style sample is the only signal carrying the target expression manner.

Each stage reads the previous stage's checkpoint from the run directory,
writes ``stageN/checkpoint.bin`` and ``stageN/metrics.csv``, and records its
parent checkpoint hash so lineage violations fail loudly.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .checkpoints import checkpoint_hash, load_checkpoint, save_checkpoint
from .clips import Corpus, StyleClip
from .codec import make_codec
from .conditioning import rasterize_kps, window_audio
from .config import DiffusionConfig, RunConfig, StageConfig
from .diffusion import ConditionBundle, NoiseSchedule, SvpModel, denoising_loss
from .errors import ConfigError, DataError
from .style_encoder import StyleEncoder

STAGE_TRAINABLE = {
    1: ("backbone", "kps_guider"),
    2: ("audio_attn", "temporal"),
    3: ("style_attn",),
}


@dataclass
class StagePlan:
    stage: int
    frames: int
    batch: int
    steps: int
    lr: float
    use_audio: bool
    use_style: bool
    cross_emotion_ref: bool


def stage_plan(stage: int, run_cfg: RunConfig) -> StagePlan:
    if stage not in (1, 2, 3):
        raise ConfigError(f"unknown training stage {stage}; expected 1, 2 or 3")
    sc: StageConfig = getattr(run_cfg, f"stage{stage}")
    f = 1 if stage == 1 else run_cfg.diffusion.frames
    return StagePlan(stage=stage, frames=f, batch=sc.batch, steps=sc.steps,
                     lr=sc.lr, use_audio=stage >= 2, use_style=stage == 3,
                     cross_emotion_ref=stage == 3)


def build_model(cfg: DiffusionConfig, d_audio: int, ae_path=None):
    codec = make_codec(cfg, ae_path)
    model = SvpModel(cfg, codec.latent_channels, codec.latent_size, d_audio)
    return model, codec


def model_state(model: SvpModel) -> dict:
    return {k: v for k, v in model.state_dict().items()}


def load_model_checkpoint(path, d_audio: int, ae_path=None):
    """Rebuild an SvpModel (plus codec) from a checkpoint file."""
    state, config, meta = load_checkpoint(path)
    if "diffusion" not in config:
        raise DataError(f"{path}: checkpoint lacks a generator config header")
    cfg = DiffusionConfig.from_dict(config["diffusion"])
    model, codec = build_model(cfg, config.get("d_audio", d_audio), ae_path)
    tensors = {k: torch.from_numpy(v) for k, v in state.items()}
    missing = set(dict(model.named_parameters())) - set(tensors)
    if missing:
        raise DataError(f"{path}: checkpoint missing tensors {sorted(missing)[:4]}...")
    model.load_state_dict(tensors, strict=True)
    return model, codec, cfg, meta


def _frames_tensor(clip: StyleClip, idx: np.ndarray) -> torch.Tensor:
    # (len(idx), 3, H, W) in [0,1]
    arr = clip.frames[idx]
    return torch.from_numpy(np.ascontiguousarray(arr)).permute(0, 3, 1, 2)


def _kps_raster(clip: StyleClip, idx: np.ndarray, size: int, radius: int) -> torch.Tensor:
    imgs = [rasterize_kps(clip.kps[i], size, size, radius) for i in idx]
    return torch.from_numpy(np.stack(imgs)).unsqueeze(1)  # (f,1,H,W)


def _audio_windows(clip: StyleClip, idx: np.ndarray, k: int) -> torch.Tensor:
    return torch.from_numpy(np.stack([window_audio(clip.audio, int(i), k) for i in idx]))


class BatchBuilder:
    """Assembles training batches from corpus clips for one stage."""

    def __init__(self, corpus: Corpus, codec, cfg: DiffusionConfig, plan: StagePlan,
                 rng: np.random.Generator,
                 style_encoder: StyleEncoder | None = None,
                 deterministic_style: bool = False,
                 style_seed: int = 0):
        self.clips = corpus.subset("train")
        if not self.clips:
            raise DataError("corpus has no training clips")
        self.codec = codec
        self.cfg = cfg
        self.plan = plan
        self.rng = rng
        self.deterministic_style = deterministic_style
        if plan.frames > min(c.meta.n_frames for c in self.clips):
            raise DataError(f"stage needs {plan.frames}-frame windows but a clip is shorter")
        # same-identity different-emotion reference pools for stage 3
        self.alt_refs: dict[int, list[int]] = {}
        if plan.cross_emotion_ref:
            for i, c in enumerate(self.clips):
                pool = [j for j, o in enumerate(self.clips)
                        if o.meta.identity == c.meta.identity
                        and o.meta.emotion != c.meta.emotion]
                if not pool:
                    raise DataError(f"clip {c.meta.clip_id}: no same-identity "
                                    "cross-emotion reference available")
                self.alt_refs[i] = pool
        self.style_mu: torch.Tensor | None = None
        self.style_sigma: torch.Tensor | None = None
        if plan.use_style:
            if style_encoder is None:
                raise ConfigError("stage 3 needs a trained style encoder")
            mus, sigmas = [], []
            style_encoder.eval()
            with torch.no_grad():
                for c in self.clips:
                    pr = style_encoder.prior(c)
                    mus.append(pr.mu)
                    sigmas.append(pr.sigma)
            self.style_mu = torch.from_numpy(np.stack(mus)).float()
            self.style_sigma = torch.from_numpy(np.stack(sigmas)).float()
        self.style_gen = torch.Generator().manual_seed(style_seed)

    def _encode(self, frames: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():
            return self.codec.encode(frames)

    def draw(self) -> tuple[torch.Tensor, ConditionBundle]:
        plan, cfg = self.plan, self.cfg
        z0s, refs, kps, auds, styles = [], [], [], [], []
        for _ in range(plan.batch):
            ci = int(self.rng.integers(len(self.clips)))
            clip = self.clips[ci]
            n = clip.meta.n_frames
            start = int(self.rng.integers(n - plan.frames + 1))
            idx = np.arange(start, start + plan.frames)
            z0s.append(self._encode(_frames_tensor(clip, idx)))
            if plan.cross_emotion_ref:
                rclip = self.clips[self.alt_refs[ci][int(self.rng.integers(
                    len(self.alt_refs[ci])))]]
            else:
                rclip = clip
            rf = int(self.rng.integers(rclip.meta.n_frames))
            refs.append(self._encode(_frames_tensor(rclip, np.array([rf])))[0])
            kps.append(_kps_raster(clip, idx, cfg.image_size, cfg.kps_radius_px))
            if plan.use_audio:
                auds.append(_audio_windows(clip, idx, cfg.audio_window))
            if plan.use_style:
                mu = self.style_mu[ci]
                if self.deterministic_style:
                    styles.append(mu)
                else:
                    eps = torch.randn(mu.shape, generator=self.style_gen)
                    styles.append(mu + self.style_sigma[ci] * eps)
        z0 = torch.stack(z0s)
        cond = ConditionBundle(
            ref_latent=torch.stack(refs),
            kps=torch.stack(kps),
            audio=torch.stack(auds) if auds else None,
            style=torch.stack(styles) if styles else None,
        )
        return z0, cond


def apply_freeze(model: SvpModel, trainable_groups: tuple[str, ...]) -> list[torch.nn.Parameter]:
    groups = model.param_groups()
    for g in trainable_groups:
        if g not in groups:
            raise ConfigError(f"unknown parameter group {g!r}")
    trainable_names = {n for g in trainable_groups for n in groups[g]}
    params = []
    for name, p in model.named_parameters():
        p.requires_grad_(name in trainable_names)
        if name in trainable_names:
            params.append(p)
    if not params:
        raise ConfigError(f"freeze policy left no trainable parameters in {trainable_groups}")
    return params


def init_run(run_dir, run_cfg: RunConfig, d_audio: int, ae_path=None, seed: int = 0):
    """Create the run directory: config snapshot plus the initial checkpoint
    every later stage diff is measured against."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(json.dumps(run_cfg.to_dict(), indent=2) + "\n")
    torch.manual_seed(seed)
    model, codec = build_model(run_cfg.diffusion, d_audio, ae_path)
    ckpt = run_dir / "init" / "checkpoint.bin"
    save_checkpoint(ckpt, model_state(model),
                    config={"diffusion": run_cfg.diffusion.to_dict(), "d_audio": d_audio},
                    meta={"stage": 0, "seed": seed, "parent": None})
    return ckpt


def run_stage(run_dir, stage: int, corpus: Corpus, run_cfg: RunConfig,
              d_audio: int, seed: int = 0, ae_path=None,
              style_encoder: StyleEncoder | None = None,
              log=print) -> Path:
    """Train one stage from the previous stage's checkpoint; returns the new
    checkpoint path."""
    run_dir = Path(run_dir)
    plan = stage_plan(stage, run_cfg)
    parent_dir = "init" if stage == 1 else f"stage{stage - 1}"
    parent = run_dir / parent_dir / "checkpoint.bin"
    if not parent.is_file():
        raise DataError(f"stage {stage} requires {parent}; run "
                        f"{'init' if stage == 1 else f'stage {stage - 1}'} first")
    model, codec, diff_cfg, meta = load_model_checkpoint(parent, d_audio, ae_path)
    expected_parent_stage = stage - 1
    if meta.get("stage") != expected_parent_stage:
        raise DataError(f"{parent} is a stage-{meta.get('stage')} checkpoint; "
                        f"stage {stage} must start from stage {expected_parent_stage}")

    torch.manual_seed(seed * 1000 + stage)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 17, stage]))
    gen = torch.Generator().manual_seed(seed * 1000 + stage + 1)
    builder = BatchBuilder(corpus, codec, diff_cfg, plan, rng,
                           style_encoder=style_encoder,
                           deterministic_style=run_cfg.stage3_deterministic_style,
                           style_seed=seed * 1000 + stage + 2)
    params = apply_freeze(model, STAGE_TRAINABLE[stage])
    opt = torch.optim.Adam(params, lr=plan.lr)
    schedule = NoiseSchedule(diff_cfg.timesteps, diff_cfg.beta_start, diff_cfg.beta_end)
    sc: StageConfig = getattr(run_cfg, f"stage{stage}")

    stage_dir = run_dir / f"stage{stage}"
    stage_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    t0 = time.time()
    model.train()
    for step in range(1, plan.steps + 1):
        z0, cond = builder.draw()
        t = torch.randint(1, schedule.T + 1, (z0.shape[0],), generator=gen)
        eps = torch.randn(z0.shape, generator=gen)
        loss = denoising_loss(model, schedule, z0, cond, t, eps)
        opt.zero_grad()
        loss.backward()
        opt.step()
        if step == 1 or step % sc.log_every == 0 or step == plan.steps:
            rows.append({"step": step, "loss": float(loss.detach()),
                         "seconds": round(time.time() - t0, 3)})
            log(f"stage{stage} step {step}/{plan.steps} loss {rows[-1]['loss']:.5f}")

    ckpt = stage_dir / "checkpoint.bin"
    save_checkpoint(ckpt, model_state(model),
                    config={"diffusion": diff_cfg.to_dict(), "d_audio": d_audio},
                    meta={"stage": stage, "seed": seed,
                          "parent": checkpoint_hash(parent),
                          "trainable": sorted(STAGE_TRAINABLE[stage]),
                          "steps": plan.steps})
    with open(stage_dir / "metrics.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=["step", "loss", "seconds"])
        w.writeheader()
        w.writerows(rows)
    return ckpt


def run_all_stages(run_dir, corpus: Corpus, run_cfg: RunConfig, d_audio: int,
                   seed: int = 0, ae_path=None,
                   style_encoder: StyleEncoder | None = None, log=print) -> Path:
    init_run(run_dir, run_cfg, d_audio, ae_path=ae_path, seed=seed)
    ckpt = None
    for stage in (1, 2, 3):
        ckpt = run_stage(run_dir, stage, corpus, run_cfg, d_audio, seed=seed,
                         ae_path=ae_path,
                         style_encoder=style_encoder if stage == 3 else None,
                         log=log)
    return ckpt
