"""Quantitative diagnostics: clustering strength, style similarity,
PSNR/SSIM, 2-D projection export, and prior interpolation."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import convolve2d

from .errors import ContractError, NumericError

EPS_DCLS = 1e-8
PSNR_CAP_DB = 100.0


@dataclass
class ClusterReport:
    grouping: str
    d_inter: float
    d_intra: float
    d_cls: float
    per_cluster_intra: dict = field(default_factory=dict)


def clustering_strength(vectors: np.ndarray, labels: list,
                        grouping: str = "emotion") -> ClusterReport:
    """Centroid-based cluster separation: d_cls = d_inter / (d_intra + 1e-8).

    d_intra: mean distance of members to their own centroid; d_inter: mean
    pairwise distance between cluster centroids.
    """
    vectors = np.asarray(vectors, dtype=np.float64)
    labels = list(labels)
    if vectors.ndim != 2 or len(labels) != vectors.shape[0]:
        raise ContractError("need (M,d) vectors with one label per row")
    uniq = sorted(set(labels), key=str)
    if len(uniq) < 2:
        raise ContractError(f"clustering needs >=2 clusters, got {len(uniq)}")
    centroids = {}
    intra = {}
    dists = []
    for u in uniq:
        members = vectors[[i for i, l in enumerate(labels) if l == u]]
        c = members.mean(axis=0)
        centroids[u] = c
        d = float(np.linalg.norm(members - c, axis=1).mean())
        intra[u] = d
        dists.extend([d] * len(members))
    d_intra = float(np.mean(dists))
    pair = [np.linalg.norm(centroids[a] - centroids[b])
            for i, a in enumerate(uniq) for b in uniq[i + 1:]]
    d_inter = float(np.mean(pair))
    return ClusterReport(grouping=grouping, d_inter=d_inter, d_intra=d_intra,
                         d_cls=d_inter / (d_intra + EPS_DCLS),
                         per_cluster_intra=intra)


def emotion_clustering_by_identity(vectors: np.ndarray, identities: list,
                                   emotions: list) -> tuple[float, dict]:
    """Per-identity emotion clustering strength; returns (mean d_cls, per-id)."""
    per_id = {}
    for ident in sorted(set(identities)):
        idx = [i for i, v in enumerate(identities) if v == ident]
        emo = [emotions[i] for i in idx]
        if len(set(emo)) < 2:
            continue
        per_id[ident] = clustering_strength(vectors[idx], emo).d_cls
    if not per_id:
        raise ContractError("no identity has two emotion clusters")
    return float(np.mean(list(per_id.values()))), per_id


def style_sim(mu_a: np.ndarray, mu_b: np.ndarray) -> float:
    """Cosine similarity between two style means."""
    a = np.asarray(mu_a, dtype=np.float64).ravel()
    b = np.asarray(mu_b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ContractError(f"style_sim shape mismatch {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise NumericError("style_sim undefined for a zero-norm vector")
    return float(np.dot(a, b) / (na * nb))


def _gaussian_window(size: int = 7, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2
    w = np.exp(-(x ** 2) / (2 * sigma ** 2))
    k = np.outer(w, w)
    return k / k.sum()


def ssim(a: np.ndarray, b: np.ndarray, k1: float = 0.01, k2: float = 0.03,
         data_range: float = 1.0) -> float:
    """Mean SSIM with a 7x7 Gaussian window (sigma 1.5), per channel."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ContractError(f"ssim shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    win = _gaussian_window()
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    vals = []
    for ch in range(a.shape[2]):
        x, y = a[:, :, ch], b[:, :, ch]
        mx = convolve2d(x, win, mode="valid")
        my = convolve2d(y, win, mode="valid")
        mxx = convolve2d(x * x, win, mode="valid")
        myy = convolve2d(y * y, win, mode="valid")
        mxy = convolve2d(x * y, win, mode="valid")
        vx, vy = mxx - mx ** 2, myy - my ** 2
        cov = mxy - mx * my
        s = ((2 * mx * my + c1) * (2 * cov + c2)) / \
            ((mx ** 2 + my ** 2 + c1) * (vx + vy + c2))
        vals.append(s.mean())
    return float(np.mean(vals))


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ContractError(f"psnr shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return float(min(-10.0 * np.log10(mse), PSNR_CAP_DB))


def pixel_metrics(gen: np.ndarray, ref: np.ndarray) -> tuple[float, float]:
    """(PSNR dB, SSIM) between clips (f,H,W,3) or single frames (H,W,3)."""
    gen = np.asarray(gen)
    ref = np.asarray(ref)
    if gen.shape != ref.shape:
        raise ContractError(f"clip shape mismatch {gen.shape} vs {ref.shape}")
    if gen.ndim == 3:
        gen, ref = gen[None], ref[None]
    s = float(np.mean([ssim(g, r) for g, r in zip(gen, ref)]))
    return psnr(gen, ref), s


def project_2d(vectors: np.ndarray) -> np.ndarray:
    """Deterministic 2-component PCA; components sign-fixed so the largest
    absolute loading is positive. Rank-deficient data pads a zero axis."""
    x = np.asarray(vectors, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 3:
        raise ContractError("project_2d needs >=3 vectors")
    centered = x - x.mean(axis=0)
    u, s, vt = np.linalg.svd(centered, full_matrices=False)
    coords = np.zeros((x.shape[0], 2))
    n_comp = min(2, int(np.sum(s > 1e-12 * max(s[0], 1e-300))))
    for j in range(n_comp):
        comp = vt[j]
        if comp[np.argmax(np.abs(comp))] < 0:
            comp = -comp
        coords[:, j] = centered @ comp
    return coords


def write_projection_csv(path: Path, coords: np.ndarray, metas: list):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["clip_id", "identity", "emotion", "intensity", "x", "y"])
        for m, (x, y) in zip(metas, coords):
            w.writerow([m.clip_id, m.identity, m.emotion, m.intensity,
                        f"{x:.8f}", f"{y:.8f}"])


def interpolate_priors(s_a: np.ndarray, s_b: np.ndarray, steps: int) -> list[np.ndarray]:
    """Linear path (1-lambda) s_a + lambda s_b on a uniform inclusive grid."""
    a = np.asarray(s_a, dtype=np.float64)
    b = np.asarray(s_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ContractError(f"interpolation shape mismatch {a.shape} vs {b.shape}")
    if steps < 2:
        raise ContractError("interpolation needs at least 2 steps")
    return [(1.0 - lam) * a + lam * b for lam in np.linspace(0.0, 1.0, steps)]


def style_prior_of_frames(frames: np.ndarray, decoder, encoder,
                          d_expr: int, clip_id: str = "generated"):
    """Style prior of generated frames: the oracle recovers per-frame
    expression state (the 3DMM-tracker stand-in), which is encoded with the
    audio branch zeroed."""
    from .style_encoder import StylePrior  # local to avoid cycle at import
    from .clips import StyleClip, ClipMeta
    readings = [decoder.decode_frame(f) for f in frames]
    ok = [r for r in readings if r.ok]
    if not ok:
        raise NumericError("no frame of the generated clip was decodable")
    from .synthetic import EmotionSpec
    expr = np.zeros((len(ok), d_expr), dtype=np.float32)
    for i, r in enumerate(ok):
        brow, curv, eye_off = EmotionSpec(r.emotion, r.intensity).offsets()
        expr[i, 0] = brow
        expr[i, 1] = curv
        expr[i, 2] = 1.0 + eye_off
        expr[i, 3] = r.lip
    meta = ClipMeta(clip_id=clip_id, n_frames=len(ok), identity=-1,
                    emotion="unknown", intensity=0, frame_rate=0.0,
                    d_expr=d_expr, d_audio=encoder.cfg.d_audio)
    clip = StyleClip(meta=meta, expr=expr,
                     audio=np.zeros((len(ok), encoder.cfg.d_audio), dtype=np.float32))
    return encoder.prior(clip, use_expr=True, use_audio=False)
