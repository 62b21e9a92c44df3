"""Clip and corpus file formats.

A clip lives in its own directory:

    expr.f32    N x d_expr   row-major float32, little endian
    audio.f32   N x d_audio
    kps.f32     N x 8 x 2    normalized [0,1] keypoint coordinates
    frames.f32  N x H x W x 3  rendered frames in [0,1] (corpus clips only)
    meta.json   shapes and labels

A corpus directory holds one subdirectory per clip plus ``manifest.json``
listing every clip with its labels and train/test split.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import DataError

KPS_COUNT = 8


@dataclass
class ClipMeta:
    clip_id: str
    n_frames: int
    identity: int
    emotion: str
    intensity: int
    frame_rate: float
    d_expr: int
    d_audio: int
    image_size: int = 0  # 0 when no frames are stored
    split: str = "train"


@dataclass
class StyleClip:
    """One clip's paired sequences plus labels."""

    meta: ClipMeta
    expr: np.ndarray
    audio: np.ndarray
    kps: np.ndarray | None = None
    frames: np.ndarray | None = None

    def __post_init__(self):
        n = self.meta.n_frames
        if self.expr.shape != (n, self.meta.d_expr):
            raise DataError(f"clip {self.meta.clip_id}: expr shape {self.expr.shape} "
                            f"!= ({n}, {self.meta.d_expr})")
        if self.audio.shape != (n, self.meta.d_audio):
            raise DataError(f"clip {self.meta.clip_id}: audio shape {self.audio.shape} "
                            f"!= ({n}, {self.meta.d_audio})")
        if self.kps is not None and self.kps.shape != (n, KPS_COUNT, 2):
            raise DataError(f"clip {self.meta.clip_id}: kps shape {self.kps.shape} "
                            f"!= ({n}, {KPS_COUNT}, 2)")
        for name in ("expr", "audio", "kps", "frames"):
            arr = getattr(self, name)
            if arr is not None and not np.isfinite(arr).all():
                raise DataError(f"clip {self.meta.clip_id}: non-finite values in {name}")


def write_f32(path: Path, arr: np.ndarray):
    np.ascontiguousarray(arr, dtype="<f4").tofile(path)


def read_f32(path: Path, shape: tuple[int, ...]) -> np.ndarray:
    if not path.is_file():
        raise DataError(f"missing data file: {path}")
    arr = np.fromfile(path, dtype="<f4")
    expected = int(np.prod(shape))
    if arr.size != expected:
        raise DataError(f"{path}: has {arr.size} float32 values, expected {expected} "
                        f"for shape {shape}")
    return arr.reshape(shape)


def save_clip(clip_dir: Path, clip: StyleClip):
    clip_dir = Path(clip_dir)
    clip_dir.mkdir(parents=True, exist_ok=True)
    write_f32(clip_dir / "expr.f32", clip.expr)
    write_f32(clip_dir / "audio.f32", clip.audio)
    if clip.kps is not None:
        write_f32(clip_dir / "kps.f32", clip.kps)
    if clip.frames is not None:
        write_f32(clip_dir / "frames.f32", clip.frames)
    (clip_dir / "meta.json").write_text(json.dumps(asdict(clip.meta), indent=2) + "\n")


def load_clip(clip_dir: Path, with_frames: bool = True) -> StyleClip:
    clip_dir = Path(clip_dir)
    meta_path = clip_dir / "meta.json"
    if not meta_path.is_file():
        raise DataError(f"missing clip metadata: {meta_path}")
    try:
        meta = ClipMeta(**json.loads(meta_path.read_text()))
    except (TypeError, json.JSONDecodeError) as e:
        raise DataError(f"malformed clip metadata {meta_path}: {e}") from e
    n = meta.n_frames
    expr = read_f32(clip_dir / "expr.f32", (n, meta.d_expr))
    audio = read_f32(clip_dir / "audio.f32", (n, meta.d_audio))
    kps = None
    if (clip_dir / "kps.f32").is_file():
        kps = read_f32(clip_dir / "kps.f32", (n, KPS_COUNT, 2))
    frames = None
    if with_frames and meta.image_size:
        frames = read_f32(clip_dir / "frames.f32", (n, meta.image_size, meta.image_size, 3))
    return StyleClip(meta=meta, expr=expr, audio=audio, kps=kps, frames=frames)


class Corpus:
    """In-memory view of a corpus directory."""

    def __init__(self, clips: list[StyleClip], seed: int, root: Path | None = None):
        self.clips = clips
        self.seed = seed
        self.root = root
        self.by_id = {c.meta.clip_id: c for c in clips}

    def __len__(self):
        return len(self.clips)

    def subset(self, split: str) -> list[StyleClip]:
        return [c for c in self.clips if c.meta.split == split]

    def groups(self, clips: list[StyleClip] | None = None) -> dict[tuple[int, str], list[int]]:
        """Indices into self.clips grouped by (identity, emotion)."""
        pool = clips if clips is not None else self.clips
        out: dict[tuple[int, str], list[int]] = {}
        for i, c in enumerate(pool):
            out.setdefault((c.meta.identity, c.meta.emotion), []).append(i)
        return out

    def get(self, clip_id: str) -> StyleClip:
        if clip_id not in self.by_id:
            raise DataError(f"clip {clip_id!r} not present in corpus "
                            f"({self.root or 'in-memory'})")
        return self.by_id[clip_id]


def save_corpus(corpus_dir: Path, corpus: Corpus, extra: dict | None = None):
    corpus_dir = Path(corpus_dir)
    corpus_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for clip in corpus.clips:
        save_clip(corpus_dir / clip.meta.clip_id, clip)
        entry = asdict(clip.meta)
        entry["path"] = clip.meta.clip_id
        entries.append(entry)
    manifest = {"schema_version": 1, "seed": corpus.seed, "clips": entries}
    if extra:
        manifest.update(extra)
    (corpus_dir / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")


def load_corpus(corpus_dir: Path, with_frames: bool = True) -> Corpus:
    corpus_dir = Path(corpus_dir)
    manifest_path = corpus_dir / "manifest.json"
    if not manifest_path.is_file():
        raise DataError(f"missing corpus manifest: {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    clips = [load_clip(corpus_dir / e["path"], with_frames=with_frames)
             for e in manifest["clips"]]
    return Corpus(clips, seed=manifest.get("seed", 0), root=corpus_dir)
