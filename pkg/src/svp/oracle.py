"""Ground-truth decoder for rendered or generated faces.

Because every corpus frame is a pure function of its generator parameters,
a frame can be decoded back to (identity, emotion, intensity, lip) by
template matching: estimate the head pose from the face-pixel centroid,
then search the parameter grid for the rendering closest in L2. On clean
renders this recovers the exact labels; on model output it gives a label
plus a residual score. Blank or degenerate frames decode to unknown.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .config import CorpusConfig
from .synthetic import (POSE_X_BASE, POSE_Y_BASE, EmotionSpec, FaceRenderer,
                        IdentitySpec, face_params, identity_table)

MIN_FACE_FRACTION = 0.01  # below this many lit pixels a frame is "unknown"
LIT_THRESHOLD = 0.12
CLEAN_RESIDUAL = 5e-4  # residual above this triggers extra pose refinement


@dataclass
class OracleReading:
    ok: bool
    identity: int | None = None
    emotion: str | None = None
    intensity: int | None = None
    lip: float = 0.0
    cx: float = 0.5
    cy: float = 0.47
    score: float = float("inf")  # mean squared error of the best template


def _mse(a: np.ndarray, b: np.ndarray) -> float:
    d = a.astype(np.float64) - b.astype(np.float64)
    return float(np.mean(d * d))


class OracleDecoder:
    def __init__(self, cfg: CorpusConfig, seed: int):
        self.cfg = cfg
        self.identities = identity_table(cfg, seed)
        self.size = cfg.image_size
        self.renderer = FaceRenderer(self.size, self.size)
        # neutral renders identically at every intensity; keep one candidate
        self.emotion_grid: list[EmotionSpec] = []
        for label in cfg.emotions:
            if label == "neutral":
                self.emotion_grid.append(EmotionSpec("neutral", cfg.intensities[0]))
            else:
                for i in cfg.intensities:
                    self.emotion_grid.append(EmotionSpec(label, i))
        self.lip_grid = np.linspace(0.05, 0.95, 5)

    # ---- pose ----

    def pose_candidates(self, frame: np.ndarray) -> list[tuple[float, float]] | None:
        """Head-pose hypotheses from the lit-pixel bounding box.

        The generator quantizes pose offsets to whole pixels, so the box
        center snapped to that lattice recovers the exact pose on clean
        frames; the runner-up lattice point per axis covers boundary cases
        and model output.
        """
        lum = frame.max(axis=2)
        mask = lum > LIT_THRESHOLD
        if mask.sum() < MIN_FACE_FRACTION * mask.size:
            return None
        rows = np.nonzero(mask.sum(axis=1) >= 2)[0]
        cols = np.nonzero(mask.sum(axis=0) >= 2)[0]
        if len(rows) == 0 or len(cols) == 0:
            return None
        bx = (cols[0] + cols[-1] + 1) / 2 / self.size
        by = (rows[0] + rows[-1] + 1) / 2 / self.size

        def lattice(v, base):
            f = (v - base) * self.size
            k = math.floor(f + 0.5)
            k2 = k + (1 if f - k >= 0 else -1)
            return [base + k / self.size, base + k2 / self.size]

        xs = lattice(bx, POSE_X_BASE)
        ys = lattice(by, POSE_Y_BASE)
        return [(x, y) for y in ys for x in xs]

    # ---- staged grid search ----

    def _candidate(self, ident: IdentitySpec, emo: EmotionSpec, lip: float,
                   cx: float, cy: float, base: np.ndarray | None = None) -> np.ndarray:
        p = face_params(ident, emo, lip, cx=cx, cy=cy)
        if base is None:
            base = self.renderer.base(p)
        return self.renderer.paint(base.copy(), p)

    def _pin_identity(self, frame: np.ndarray,
                      poses: list[tuple[float, float]]) -> tuple[IdentitySpec, float, float]:
        """Identity and pose from a neutral-template pass. The face color and
        outline dominate the residual, so expression mismatch does not matter."""
        neutral = EmotionSpec("neutral", self.cfg.intensities[0])
        best = (float("inf"), self.identities[0], poses[0])
        for ident in self.identities:
            for (cx, cy) in poses:
                err = _mse(frame, self._candidate(ident, neutral, 0.5, cx, cy))
                if err < best[0]:
                    best = (err, ident, (cx, cy))
        return best[1], best[2][0], best[2][1]

    def _search_expression(self, frame: np.ndarray, ident: IdentitySpec,
                           cx: float, cy: float, top_k: int = 3) -> OracleReading:
        """Best (emotion, intensity) for a pinned identity and pose. The lip
        grid is coarse, so the lip of the top few candidates is refined before
        the final ranking; otherwise a wrong intensity can win on lip misfit."""
        ranked = []
        for emo in self.emotion_grid:
            base = self.renderer.base(face_params(ident, emo, 0.5, cx=cx, cy=cy))
            cand_best = None
            for lip in self.lip_grid:
                cand = self._candidate(ident, emo, float(lip), cx, cy, base=base)
                err = _mse(frame, cand)
                if cand_best is None or err < cand_best.score:
                    cand_best = OracleReading(
                        ok=True, identity=ident.index, emotion=emo.label,
                        intensity=emo.intensity, lip=float(lip),
                        cx=cx, cy=cy, score=err)
            ranked.append(cand_best)
        ranked.sort(key=lambda r: r.score)
        refined = [self._refine_lip(frame, r) for r in ranked[:top_k]]
        return min(refined, key=lambda r: r.score)

    def _refine_pose(self, frame: np.ndarray, r: OracleReading) -> tuple[float, float]:
        ident = self.identities[r.identity]
        emo = EmotionSpec(r.emotion, r.intensity)
        px = 1.0 / self.size
        best = (r.score, r.cx, r.cy)
        for dy in (-0.5, 0.0, 0.5):
            for dx in (-0.5, 0.0, 0.5):
                cx, cy = r.cx + dx * px, r.cy + dy * px
                err = _mse(frame, self._candidate(ident, emo, r.lip, cx, cy))
                if err < best[0]:
                    best = (err, cx, cy)
        return best[1], best[2]

    def _refine_lip(self, frame: np.ndarray, r: OracleReading) -> OracleReading:
        ident = self.identities[r.identity]
        emo = EmotionSpec(r.emotion, r.intensity)
        base = self.renderer.base(face_params(ident, emo, 0.5, cx=r.cx, cy=r.cy))
        for lip in np.linspace(0.0, 1.0, 21):
            err = _mse(frame, self._candidate(ident, emo, float(lip),
                                              r.cx, r.cy, base=base))
            if err < r.score:
                r = OracleReading(ok=True, identity=r.identity, emotion=r.emotion,
                                  intensity=r.intensity, lip=float(lip),
                                  cx=r.cx, cy=r.cy, score=err)
        return r

    def decode_frame(self, frame: np.ndarray) -> OracleReading:
        poses = self.pose_candidates(frame)
        if poses is None:
            return OracleReading(ok=False)
        ident, cx, cy = self._pin_identity(frame, poses)
        reading = self._search_expression(frame, ident, cx, cy)
        if reading.score > CLEAN_RESIDUAL and reading.emotion is not None:
            # model output can sit off the pose lattice; nudge and re-rank
            cx, cy = self._refine_pose(frame, reading)
            if (cx, cy) != (reading.cx, reading.cy):
                reading = self._search_expression(frame, ident, cx, cy)
        return reading

    def decode_clip(self, frames: np.ndarray, max_frames: int = 4) -> OracleReading:
        """Decode a few frames and vote. frames: (N, H, W, 3)."""
        n = frames.shape[0]
        idx = np.unique(np.linspace(0, n - 1, min(max_frames, n)).astype(int))
        readings = [self.decode_frame(frames[i]) for i in idx]
        readings = [r for r in readings if r.ok]
        if not readings:
            return OracleReading(ok=False)

        def vote(keyfn):
            tally: dict = {}
            for r in readings:
                k = keyfn(r)
                s, c = tally.get(k, (0.0, 0))
                tally[k] = (s + r.score, c + 1)
            # most frames first, then lowest total residual
            return min(tally.items(), key=lambda kv: (-kv[1][1], kv[1][0]))[0]

        ident = vote(lambda r: r.identity)
        emo_int = vote(lambda r: (r.emotion, r.intensity))
        mean_score = float(np.mean([r.score for r in readings]))
        mean_lip = float(np.mean([r.lip for r in readings]))
        return OracleReading(ok=True, identity=ident, emotion=emo_int[0],
                             intensity=emo_int[1], lip=mean_lip,
                             cx=readings[0].cx, cy=readings[0].cy,
                             score=mean_score)

    # ---- continuous mouth curvature ----

    def mouth_curvature(self, frame: np.ndarray,
                        reading: OracleReading | None = None) -> float:
        """Continuous curvature estimate from the mouth region alone.

        Sweeps the curvature parameter with everything else pinned to the
        decoded reading, scoring only a box around the mouth, then refines
        the grid minimum with a parabolic fit.
        """
        if reading is None:
            reading = self.decode_frame(frame)
        if not reading.ok:
            return 0.0
        ident = self.identities[reading.identity]
        emo = EmotionSpec(reading.emotion, reading.intensity)
        my = reading.cy + 0.175
        r0 = max(int((my - 0.15) * self.size), 0)
        r1 = min(int((my + 0.15) * self.size) + 1, self.size)
        c0 = max(int((reading.cx - 0.18) * self.size), 0)
        c1 = min(int((reading.cx + 0.18) * self.size) + 1, self.size)
        box = (slice(r0, r1), slice(c0, c1))

        base = self.renderer.base(face_params(ident, emo, reading.lip,
                                              cx=reading.cx, cy=reading.cy))
        grid = np.linspace(-0.8, 0.8, 33)
        errs = np.zeros_like(grid)
        for i, curv in enumerate(grid):
            p = face_params(ident, emo, reading.lip, cx=reading.cx, cy=reading.cy)
            p.curvature = float(curv)
            cand = self.renderer.paint(base.copy(), p)
            errs[i] = _mse(frame[box], cand[box])
        k = int(np.argmin(errs))
        if 0 < k < len(grid) - 1:
            # parabolic refinement for a continuous estimate
            e0, e1, e2 = errs[k - 1], errs[k], errs[k + 1]
            denom = e0 - 2 * e1 + e2
            if denom > 1e-12:
                step = 0.5 * (e0 - e2) / denom
                return float(grid[k] + np.clip(step, -1.0, 1.0) * (grid[1] - grid[0]))
        return float(grid[k])
