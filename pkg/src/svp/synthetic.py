"""Procedural cartoon-face corpus with exact generator parameters.

Each clip is a parametric face: identity fixes the face shape and color,
emotion and intensity fix brow angle, mouth curvature, eye openness and a
mild color tint, a smooth lip-openness trajectory drives both the rendered
mouth and the synthetic audio features, and a smooth head-pose trajectory
drives the 8 guidance keypoints. Because every frame is a pure function of
its parameters, rendered or generated frames can be decoded back to labels
by template matching (see oracle.py).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .clips import ClipMeta, Corpus, StyleClip
from .config import CorpusConfig
from .errors import ContractError

# layout in normalized image units
FACE_RY = 0.33
EYE_DY = -0.105
EYE_HALF_W = 0.055
EYE_HALF_H = 0.050
PUPIL_R = 0.028
BROW_DY = -0.19
BROW_HALF_LEN = 0.085
BROW_HALF_TH = 0.018
MOUTH_DY = 0.175
MOUTH_HALF_W = 0.135
MOUTH_CURVE_AMP = 0.16
MOUTH_GAP_BASE = 0.012
MOUTH_GAP_LIP = 0.055

# head-pose anchor; trajectories are quantized to whole-pixel offsets from it
# so that a decoded bounding box can be snapped back to the exact pose
POSE_X_BASE = 0.5
POSE_Y_BASE = 0.47

# (brow angle, mouth curvature, eye openness offset) at full intensity
EMOTION_OFFSETS = {
    "neutral": (0.0, 0.0, 0.0),
    "happy": (0.25, 0.6, -0.2),
    "sad": (0.55, -0.5, -0.35),
    "angry": (-0.6, -0.35, -0.5),
}
MAX_INTENSITY = 3


@dataclass
class IdentitySpec:
    index: int
    aspect: float       # face ellipse width/height ratio
    hue: float          # face color hue in [0, 1)
    eye_spacing: float  # eye offset as a fraction of the face half-width
    nose_length: float  # nose length as a fraction of the face half-height


@dataclass
class EmotionSpec:
    label: str
    intensity: int

    def offsets(self) -> tuple[float, float, float]:
        if self.label not in EMOTION_OFFSETS:
            raise ContractError(f"unknown emotion label {self.label!r}")
        scale = self.intensity / MAX_INTENSITY
        brow, curv, eye = EMOTION_OFFSETS[self.label]
        return brow * scale, curv * scale, eye * scale


@dataclass
class ClipSpec:
    identity: IdentitySpec
    emotion: EmotionSpec
    n_frames: int
    lip: np.ndarray   # (N,) lip openness in [0, 1]
    pose: np.ndarray  # (N, 2) face center (cx, cy)
    noise_seed: int


@dataclass
class FaceParams:
    """Everything needed to render one frame."""

    aspect: float
    hue: float
    eye_spacing: float
    nose_length: float
    brow: float
    curvature: float
    eye_open: float  # multiplier around 1.0
    lip: float
    tint: tuple[float, float, float]  # (red add, value mult, sat mult)
    cx: float = 0.5
    cy: float = 0.47


def _hsv_to_rgb(h, s, v):
    i = int(h * 6.0) % 6
    f = h * 6.0 - math.floor(h * 6.0)
    p, q, t = v * (1 - s), v * (1 - f * s), v * (1 - (1 - f) * s)
    return [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i]


def emotion_tint(label: str, intensity: int) -> tuple[float, float, float]:
    s = intensity / MAX_INTENSITY
    if label == "angry":
        return (0.12 * s, 1.0, 1.0)
    if label == "sad":
        return (0.0, 1.0 - 0.12 * s, 1.0)
    if label == "happy":
        return (0.0, 1.0 + 0.08 * s, 1.0 + 0.10 * s)
    return (0.0, 1.0, 1.0)


def face_params(identity: IdentitySpec, emotion: EmotionSpec, lip: float,
                cx: float = 0.5, cy: float = 0.47) -> FaceParams:
    brow, curv, eye_off = emotion.offsets()
    return FaceParams(
        aspect=identity.aspect, hue=identity.hue,
        eye_spacing=identity.eye_spacing, nose_length=identity.nose_length,
        brow=brow, curvature=curv, eye_open=1.0 + eye_off, lip=lip,
        tint=emotion_tint(emotion.label, emotion.intensity), cx=cx, cy=cy)


class FaceRenderer:
    """Rasterizes FaceParams onto an H x W float32 canvas in [0, 1]."""

    def __init__(self, height: int, width: int):
        self.h, self.w = height, width
        ys = (np.arange(height, dtype=np.float64) + 0.5) / height
        xs = (np.arange(width, dtype=np.float64) + 0.5) / width
        self.yy, self.xx = np.meshgrid(ys, xs, indexing="ij")

    def face_color(self, p: FaceParams) -> np.ndarray:
        r_add, v_mult, s_mult = p.tint
        rgb = _hsv_to_rgb(p.hue, min(0.55 * s_mult, 1.0), min(0.82 * v_mult, 1.0))
        rgb = np.array(rgb, dtype=np.float64)
        rgb[0] = min(rgb[0] + r_add, 1.0)
        return rgb

    def base(self, p: FaceParams) -> np.ndarray:
        img = np.zeros((self.h, self.w, 3), dtype=np.float64)
        rx = FACE_RY * p.aspect
        face = (((self.xx - p.cx) / rx) ** 2 + ((self.yy - p.cy) / FACE_RY) ** 2) <= 1.0
        img[face] = self.face_color(p)
        nose_w = 0.016
        nose_top = p.cy - 0.03
        nose = ((np.abs(self.xx - p.cx) <= nose_w)
                & (self.yy >= nose_top)
                & (self.yy <= nose_top + p.nose_length * FACE_RY))
        img[nose] = self.face_color(p) * 0.72
        return img

    def paint(self, img: np.ndarray, p: FaceParams) -> np.ndarray:
        xx, yy = self.xx, self.yy
        rx = FACE_RY * p.aspect
        eye_dx = p.eye_spacing * rx
        ey = p.cy + EYE_DY
        eh = EYE_HALF_H * np.clip(p.eye_open, 0.35, 1.3)

        # brows: thick segments rotated about their centers, inner end follows
        # the brow angle (positive = inner end raised), mirrored left/right
        theta = 0.6 * p.brow
        by = p.cy + BROW_DY - 0.035 * p.brow
        for side in (-1.0, 1.0):
            bx = p.cx + side * eye_dx
            ang = -side * theta  # mirror so both inner ends move together
            u = (xx - bx) * math.cos(ang) + (yy - by) * math.sin(ang)
            v = -(xx - bx) * math.sin(ang) + (yy - by) * math.cos(ang)
            img[(np.abs(u) <= BROW_HALF_LEN) & (np.abs(v) <= BROW_HALF_TH)] = 0.08

        # eyes and pupils (pupils clipped to the eye opening)
        for side in (-1.0, 1.0):
            ex = p.cx + side * eye_dx
            eye = (((xx - ex) / EYE_HALF_W) ** 2 + ((yy - ey) / max(eh, 1e-6)) ** 2) <= 1.0
            img[eye] = 0.93
            pupil = ((xx - ex) ** 2 + (yy - ey) ** 2) <= PUPIL_R ** 2
            img[eye & pupil] = 0.06

        # mouth: region between two curves; positive curvature = corners up
        my = p.cy + MOUTH_DY
        mw = MOUTH_HALF_W * (1.0 + 0.25 * p.curvature)
        xi = (xx - p.cx) / mw
        inside = np.abs(xi) <= 1.0
        yline = my + MOUTH_CURVE_AMP * p.curvature * (xi ** 2 - 0.5)
        gap = (MOUTH_GAP_BASE + MOUTH_GAP_LIP * p.lip) * np.sqrt(np.clip(1.0 - xi ** 2, 0.0, None))
        mouth = inside & (yy >= yline - gap) & (yy <= yline + gap)
        img[mouth] = np.array([0.42, 0.10, 0.12])
        return img

    def render(self, p: FaceParams) -> np.ndarray:
        return self.paint(self.base(p), p).astype(np.float32)


def keypoints(p: FaceParams) -> np.ndarray:
    """The 8 guidance keypoints: face edges (2 left, 2 right), pupils,
    nose bridge top and bottom. Normalized [0,1] coordinates (x, y)."""
    rx = FACE_RY * p.aspect
    eye_dx = p.eye_spacing * rx
    ey = p.cy + EYE_DY
    nose_top = p.cy - 0.03
    pts = np.array([
        [p.cx - rx * 0.97, p.cy - 0.10],
        [p.cx - rx * 0.97, p.cy + 0.10],
        [p.cx + rx * 0.97, p.cy - 0.10],
        [p.cx + rx * 0.97, p.cy + 0.10],
        [p.cx - eye_dx, ey],
        [p.cx + eye_dx, ey],
        [p.cx, nose_top],
        [p.cx, nose_top + p.nose_length * FACE_RY],
    ], dtype=np.float32)
    return np.clip(pts, 0.0, 1.0)


def identity_table(cfg: CorpusConfig, seed: int) -> list[IdentitySpec]:
    """Identity parameters, hue-separated by construction (shuffled grid)."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 101]))
    n = cfg.n_identities
    perm = rng.permutation(n)
    out = []
    for i in range(n):
        out.append(IdentitySpec(
            index=i,
            aspect=float(rng.uniform(0.72, 0.95)),
            hue=float((perm[i] + 0.5) / n),
            eye_spacing=float(rng.uniform(0.40, 0.62)),
            nose_length=float(rng.uniform(0.30, 0.55)),
        ))
    return out


def _smooth_trajectory(rng, n, base, amp, freqs):
    t = np.arange(n, dtype=np.float64)
    out = np.full(n, base)
    for lo, hi, a in freqs:
        f = rng.uniform(lo, hi)
        phase = rng.uniform(0, 2 * math.pi)
        out += a * amp * np.sin(2 * math.pi * f * t / n + phase)
    return out


def make_clip_spec(cfg: CorpusConfig, seed: int, identity: IdentitySpec,
                   emotion: EmotionSpec, clip_index: int) -> ClipSpec:
    key = [seed, 202, identity.index, _emotion_code(emotion.label),
           emotion.intensity, clip_index]
    rng = np.random.default_rng(np.random.SeedSequence(key))
    n = cfg.frames_per_clip
    lip = np.clip(_smooth_trajectory(rng, n, 0.5, 1.0,
                                     [(1.0, 2.5, 0.38), (3.0, 5.0, 0.12)]), 0.0, 1.0)
    cx = _smooth_trajectory(rng, n, POSE_X_BASE, 1.0, [(0.5, 1.5, 0.05)])
    cy = _smooth_trajectory(rng, n, POSE_Y_BASE, 1.0, [(0.5, 1.5, 0.035)])
    pose = np.stack([quantize_pose(cx, POSE_X_BASE, cfg.image_size),
                     quantize_pose(cy, POSE_Y_BASE, cfg.image_size)], axis=1)
    return ClipSpec(identity=identity, emotion=emotion, n_frames=n,
                    lip=lip, pose=pose,
                    noise_seed=int(rng.integers(0, 2 ** 31 - 1)))


def _emotion_code(label: str) -> int:
    return {"neutral": 0, "happy": 1, "sad": 2, "angry": 3}[label]


def quantize_pose(raw, base: float, image_size: int):
    """Snap pose offsets to whole pixels so templates can align exactly."""
    k = np.round((np.asarray(raw, dtype=np.float64) - base) * image_size)
    return base + k / image_size


def audio_lift(cfg: CorpusConfig, seed: int) -> np.ndarray:
    """Corpus-level fixed linear map from lip openness to audio features."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 303]))
    return rng.normal(0.0, 1.0, size=cfg.d_audio)


def identity_audio_bias(cfg: CorpusConfig, seed: int, identity_index: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 404, identity_index]))
    return rng.normal(0.0, 0.5, size=cfg.d_audio)


def render_clip(spec: ClipSpec, cfg: CorpusConfig, seed: int,
                clip_id: str, split: str = "train") -> StyleClip:
    """Render one clip: frames, expression and audio sequences, keypoints."""
    h = w = cfg.image_size
    renderer = FaceRenderer(h, w)
    rng = np.random.default_rng(spec.noise_seed)
    n = spec.n_frames

    brow, curv, eye_off = spec.emotion.offsets()
    frames = np.zeros((n, h, w, 3), dtype=np.float32)
    kps = np.zeros((n, 8, 2), dtype=np.float32)
    for i in range(n):
        p = face_params(spec.identity, spec.emotion, float(spec.lip[i]),
                        cx=float(spec.pose[i, 0]), cy=float(spec.pose[i, 1]))
        frames[i] = renderer.render(p)
        kps[i] = keypoints(p)

    expr = rng.normal(0.0, cfg.expr_noise, size=(n, cfg.d_expr))
    expr[:, 0] += brow
    expr[:, 1] += curv
    expr[:, 2] += 1.0 + eye_off
    expr[:, 3] += spec.lip

    lift = audio_lift(cfg, seed)
    bias = identity_audio_bias(cfg, seed, spec.identity.index)
    audio = (spec.lip[:, None] * lift[None, :] + bias[None, :]
             + rng.normal(0.0, cfg.audio_noise, size=(n, cfg.d_audio)))

    meta = ClipMeta(
        clip_id=clip_id, n_frames=n, identity=spec.identity.index,
        emotion=spec.emotion.label, intensity=spec.emotion.intensity,
        frame_rate=cfg.frame_rate, d_expr=cfg.d_expr, d_audio=cfg.d_audio,
        image_size=cfg.image_size, split=split)
    return StyleClip(meta=meta, expr=expr.astype(np.float32),
                     audio=audio.astype(np.float32), kps=kps, frames=frames)


def build_corpus(cfg: CorpusConfig, seed: int) -> Corpus:
    """Generate the full labeled corpus. Deterministic in (cfg, seed)."""
    identities = identity_table(cfg, seed)
    clips = []
    first_holdout = cfg.clips_per_cell - cfg.holdout_clips_per_cell
    for ident in identities:
        for emo in cfg.emotions:
            for intensity in cfg.intensities:
                for ci in range(cfg.clips_per_cell):
                    spec = make_clip_spec(cfg, seed, ident,
                                          EmotionSpec(emo, intensity), ci)
                    clip_id = f"id{ident.index:02d}_{emo}_i{intensity}_c{ci:02d}"
                    split = "test" if ci >= first_holdout else "train"
                    clips.append(render_clip(spec, cfg, seed, clip_id, split=split))
    return Corpus(clips, seed=seed)
