"""Command implementations behind the ``svp`` CLI.

Every command resolves its output root from the config (overridable with the
``SVP_OUT_ROOT`` environment variable), writes its artifacts under a fixed
subdirectory, and drops a ``manifest.json`` recording the config and content
hashes of every input file it consumed. Commands are deterministic given
(config, seed): re-running one on unchanged inputs rewrites identical bytes.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
from pathlib import Path

import numpy as np
import torch

from .checkpoints import file_hash
from .clips import Corpus, load_clip, load_corpus, save_corpus
from .codec import train_autoencoder
from .config import RunConfig
from .contrastive import train_style_encoder, write_trace
from .errors import ConfigError, DataError
from .evaluation import (emotion_clustering_by_identity, interpolate_priors,
                         project_2d, write_projection_csv)
from .generate import build_conditions, generate_clip, save_generated
from .oracle import OracleDecoder
from .protocols import (cross_identity_cases, reconstruction_report,
                        same_identity_cases, transfer_report)
from .style_encoder import StyleEncoder, StylePrior, sample_prior
from .synthetic import build_corpus
from .training import init_run, load_model_checkpoint, run_stage

OUT_ROOT_ENV = "SVP_OUT_ROOT"


def out_root(cfg: RunConfig) -> Path:
    return Path(os.environ.get(OUT_ROOT_ENV) or cfg.out_root)


def _config_hash(cfg: RunConfig) -> str:
    return hashlib.sha256(cfg.to_json().encode("utf-8")).hexdigest()


def _write_manifest(directory: Path, command: str, cfg: RunConfig,
                    inputs: dict[str, str], extra: dict | None = None):
    manifest = {
        "command": command,
        "config_sha256": _config_hash(cfg),
        "seed": cfg.seed,
        "inputs": inputs,
    }
    if extra:
        manifest.update(extra)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _require(path: Path, hint: str) -> Path:
    if not path.exists():
        raise DataError(f"missing input: {path} ({hint})")
    return path


def _load_corpus(cfg: RunConfig, root: Path) -> Corpus:
    corpus_dir = _require(root / "corpus",
                          "run `svp make-corpus` first")
    return load_corpus(corpus_dir)


def _style_encoder_path(root: Path) -> Path:
    return root / "style" / "checkpoint.bin"


def _load_style_encoder(root: Path) -> StyleEncoder:
    path = _require(_style_encoder_path(root), "run `svp train-style` first")
    enc = StyleEncoder.load(path)
    enc.eval()
    return enc


def _latest_stage_checkpoint(run_dir: Path) -> Path:
    for stage in (3, 2, 1):
        p = run_dir / f"stage{stage}" / "checkpoint.bin"
        if p.is_file():
            return p
    raise DataError(f"no stage checkpoint under {run_dir}; "
                    "run `svp train-diffusion --stage 1` first")


def _resolve_clip(corpus: Corpus, ref: str):
    """A clip argument is either a corpus clip id or a clip directory path."""
    p = Path(ref)
    if p.is_dir():
        return load_clip(p), str(p)
    clip = corpus.get(ref)
    return clip, str((corpus.root or Path("<memory>")) / ref)


def cmd_make_corpus(cfg: RunConfig, args) -> Path:
    root = out_root(cfg)
    corpus = build_corpus(cfg.corpus, seed=cfg.seed)
    corpus_dir = root / "corpus"
    save_corpus(corpus_dir, corpus, extra={"config_sha256": _config_hash(cfg)})
    _write_manifest(corpus_dir, "make-corpus", cfg, inputs={},
                    extra={"n_clips": len(corpus.clips)})
    print(f"corpus: {len(corpus.clips)} clips -> {corpus_dir}")
    return corpus_dir


def cmd_train_style(cfg: RunConfig, args) -> Path:
    root = out_root(cfg)
    corpus = _load_corpus(cfg, root)
    style_dir = root / "style"
    style_dir.mkdir(parents=True, exist_ok=True)
    encoder, trace = train_style_encoder(corpus.clips, cfg.style_encoder,
                                         cfg.contrastive, seed=cfg.seed)
    ckpt = style_dir / "checkpoint.bin"
    encoder.save(ckpt, meta={"seed": cfg.seed, "steps": cfg.contrastive.steps})
    write_trace(style_dir / "trace.csv", trace)
    _write_manifest(style_dir, "train-style", cfg,
                    inputs={"corpus": file_hash(corpus.root / "manifest.json")},
                    extra={"final_loss": trace[-1]["loss"] if trace else None})
    print(f"style encoder -> {ckpt} (final loss "
          f"{trace[-1]['loss']:.4f})" if trace else f"style encoder -> {ckpt}")
    return ckpt


def _ensure_ae(cfg: RunConfig, run_dir: Path, corpus: Corpus, seed: int):
    """tiny_ae codec: train the autoencoder once per run directory."""
    if cfg.diffusion.codec != "tiny_ae":
        return None
    ae_path = run_dir / "ae" / "checkpoint.bin"
    if not ae_path.is_file():
        frames = np.concatenate([c.frames for c in corpus.subset("train")[:32]])
        ae = train_autoencoder(frames, cfg.diffusion.image_size,
                               width=cfg.diffusion.ae_width, seed=seed)
        ae.save(ae_path, meta={"seed": seed})
    return ae_path


def cmd_train_diffusion(cfg: RunConfig, args) -> Path:
    root = out_root(cfg)
    corpus = _load_corpus(cfg, root)
    run_dir = root / "diffusion"
    stage = int(args.stage)
    ae_path = _ensure_ae(cfg, run_dir, corpus, cfg.seed)
    if stage == 1 and not (run_dir / "init" / "checkpoint.bin").is_file():
        init_run(run_dir, cfg, d_audio=cfg.corpus.d_audio, ae_path=ae_path,
                 seed=cfg.seed)
    style_encoder = _load_style_encoder(root) if stage == 3 else None
    ckpt = run_stage(run_dir, stage, corpus, cfg, d_audio=cfg.corpus.d_audio,
                     seed=cfg.seed, ae_path=ae_path, style_encoder=style_encoder)
    inputs = {"corpus": file_hash(corpus.root / "manifest.json")}
    parent = "init" if stage == 1 else f"stage{stage - 1}"
    inputs["parent_checkpoint"] = file_hash(run_dir / parent / "checkpoint.bin")
    if stage == 3:
        inputs["style_checkpoint"] = file_hash(_style_encoder_path(root))
    _write_manifest(run_dir / f"stage{stage}", "train-diffusion", cfg, inputs,
                    extra={"stage": stage, "checkpoint": file_hash(ckpt)})
    print(f"stage {stage} -> {ckpt}")
    return ckpt


def cmd_generate(cfg: RunConfig, args) -> Path:
    root = out_root(cfg)
    corpus = _load_corpus(cfg, root)
    run_dir = root / "diffusion"
    ckpt_path = Path(args.checkpoint) if args.checkpoint else _latest_stage_checkpoint(run_dir)
    _require(ckpt_path, "train the generator first")
    ae_path = run_dir / "ae" / "checkpoint.bin"
    model, codec, diff_cfg, _ = load_model_checkpoint(
        ckpt_path, d_audio=cfg.corpus.d_audio,
        ae_path=ae_path if ae_path.is_file() else None)
    model.eval()

    ref_clip, ref_src = _resolve_clip(corpus, args.reference)
    drive_clip, drive_src = _resolve_clip(corpus, args.driving)
    seed = cfg.seed if args.seed is None else int(args.seed)
    frames = int(args.frames) if args.frames else diff_cfg.frames
    cond = build_conditions(ref_clip, drive_clip, diff_cfg, codec, frames=frames,
                            ref_frame=int(args.ref_frame), start=int(args.start))
    inputs = {
        "checkpoint": file_hash(ckpt_path),
        "reference": ref_src,
        "driving": drive_src,
    }
    style_src = None
    if args.style_source:
        encoder = _load_style_encoder(root)
        style_clip, style_src = _resolve_clip(corpus, args.style_source)
        with torch.no_grad():
            prior = encoder.prior(style_clip)
        vec = prior.mu if args.style_mean else sample_prior(prior, seed)
        cond.style = torch.from_numpy(np.asarray(vec, dtype=np.float32)).unsqueeze(0)
        inputs["style_source"] = style_src
        inputs["style_checkpoint"] = file_hash(_style_encoder_path(root))

    video = generate_clip(model, codec, diff_cfg, cond, frames=frames, seed=seed,
                          steps=int(args.steps) if args.steps else None)
    name = args.out_name or (
        f"{ref_clip.meta.clip_id}__drv_{drive_clip.meta.clip_id}"
        + (f"__sty_{Path(style_src).name}" if style_src else "") + f"__s{seed}")
    out_dir = root / "generate" / name
    manifest = {
        "command": "generate",
        "config_sha256": _config_hash(cfg),
        "seed": seed,
        "frames": frames,
        "steps": int(args.steps) if args.steps else diff_cfg.sample_steps,
        "image_size": diff_cfg.image_size,
        "style_mean": bool(args.style_mean),
        "inputs": inputs,
    }
    save_generated(out_dir, video, manifest)
    print(f"generated {frames} frames -> {out_dir}")
    return out_dir


def _dcls_by_modality(encoder: StyleEncoder, clips) -> dict:
    out = {}
    ids = [c.meta.identity for c in clips]
    emos = [c.meta.emotion for c in clips]
    for tag, (ue, ua) in {"expr+audio": (True, True), "expr": (True, False),
                          "audio": (False, True)}.items():
        with torch.no_grad():
            vecs = np.stack([encoder.prior(c, use_expr=ue, use_audio=ua).mu
                             for c in clips])
        d, per_id = emotion_clustering_by_identity(vecs, ids, emos)
        out[tag] = {"d_cls": d, "per_identity": {str(k): v for k, v in per_id.items()}}
    return out


def cmd_evaluate(cfg: RunConfig, args) -> Path:
    root = out_root(cfg)
    corpus = _load_corpus(cfg, root)
    encoder = _load_style_encoder(root)
    run_dir = root / "diffusion"
    eval_dir = root / "eval"
    report: dict = {"clustering": _dcls_by_modality(encoder, corpus.clips)}
    inputs = {"corpus": file_hash(corpus.root / "manifest.json"),
              "style_checkpoint": file_hash(_style_encoder_path(root))}

    ckpt = None
    try:
        ckpt = _latest_stage_checkpoint(run_dir)
    except DataError:
        report["reconstruction"] = None
        report["transfer"] = None
    if ckpt is not None:
        ae_path = run_dir / "ae" / "checkpoint.bin"
        model, codec, diff_cfg, meta = load_model_checkpoint(
            ckpt, d_audio=cfg.corpus.d_audio,
            ae_path=ae_path if ae_path.is_file() else None)
        model.eval()
        inputs["checkpoint"] = file_hash(ckpt)
        held = corpus.subset("test")[:int(args.recon_clips)]
        report["reconstruction"] = reconstruction_report(
            model, codec, diff_cfg, held, encoder, seed=cfg.seed)
        report["reconstruction"]["stage"] = meta.get("stage")
        decoder = OracleDecoder(cfg.corpus, seed=corpus.seed)
        emotions = list(cfg.corpus.emotions)
        cases = same_identity_cases(corpus, emotions, intensity=3, clips_per_cell=1)
        cases = cases[:int(args.transfer_clips)]
        report["transfer"] = transfer_report(model, codec, diff_cfg, corpus,
                                             encoder, decoder, cases, seed=cfg.seed)
        cross = cross_identity_cases(corpus, [e for e in emotions if e != "neutral"])
        cross = cross[:int(args.cross_clips)]
        report["cross_identity"] = transfer_report(model, codec, diff_cfg, corpus,
                                                   encoder, decoder, cross,
                                                   seed=cfg.seed + 1)
        if args.compact:
            for section in ("transfer", "cross_identity"):
                report[section].pop("per_case", None)

    eval_dir.mkdir(parents=True, exist_ok=True)
    (eval_dir / "report.json").write_text(
        json.dumps(report, indent=2, sort_keys=True) + "\n")
    _write_manifest(eval_dir, "evaluate", cfg, inputs)
    print(f"evaluation report -> {eval_dir / 'report.json'}")
    return eval_dir / "report.json"


def cmd_export_figures(cfg: RunConfig, args) -> Path:
    root = out_root(cfg)
    corpus = _load_corpus(cfg, root)
    encoder = _load_style_encoder(root)
    fig_dir = root / "figures"
    fig_dir.mkdir(parents=True, exist_ok=True)
    inputs = {"corpus": file_hash(corpus.root / "manifest.json"),
              "style_checkpoint": file_hash(_style_encoder_path(root))}

    # 2-D projection of style means over the whole corpus
    with torch.no_grad():
        mus = np.stack([encoder.prior(c).mu for c in corpus.clips])
    coords = project_2d(mus)
    write_projection_csv(fig_dir / "projection.csv", coords,
                         [c.meta for c in corpus.clips])

    # modality ablation table
    cluster = _dcls_by_modality(encoder, corpus.clips)
    with open(fig_dir / "ablation.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["modality", "d_cls"])
        for tag in ("expr+audio", "expr", "audio"):
            w.writerow([tag, f"{cluster[tag]['d_cls']:.6f}"])

    # sad -> happy interpolation strip (needs a trained generator)
    run_dir = root / "diffusion"
    try:
        ckpt = _latest_stage_checkpoint(run_dir)
    except DataError:
        ckpt = None
    if ckpt is not None:
        from PIL import Image
        ae_path = run_dir / "ae" / "checkpoint.bin"
        model, codec, diff_cfg, _ = load_model_checkpoint(
            ckpt, d_audio=cfg.corpus.d_audio,
            ae_path=ae_path if ae_path.is_file() else None)
        model.eval()
        inputs["checkpoint"] = file_hash(ckpt)
        decoder = OracleDecoder(cfg.corpus, seed=corpus.seed)
        ident = sorted({c.meta.identity for c in corpus.clips})[0]
        from .protocols import neutral_reference, style_pool
        ref = neutral_reference(corpus, ident)
        sad = style_pool(corpus, ident, "sad", 3)[0]
        happy = style_pool(corpus, ident, "happy", 3)[0]
        with torch.no_grad():
            p_sad = encoder.prior(sad)
            p_happy = encoder.prior(happy)
        steps = int(args.interp_steps)
        path = interpolate_priors(p_sad.mu, p_happy.mu, steps)
        interp_dir = fig_dir / "interpolation"
        interp_dir.mkdir(exist_ok=True)
        rows = []
        for k, vec in enumerate(path):
            cond = build_conditions(ref, sad, diff_cfg, codec,
                                    frames=diff_cfg.frames, ref_frame=0, start=0)
            cond.style = torch.from_numpy(vec.astype(np.float32)).unsqueeze(0)
            vid = generate_clip(model, codec, diff_cfg, cond,
                                frames=diff_cfg.frames, seed=cfg.seed)
            frame = vid[len(vid) // 2]
            Image.fromarray(np.clip(np.rint(frame * 255), 0, 255).astype(np.uint8)
                            ).save(interp_dir / f"step_{k:02d}.png")
            reading = decoder.decode_clip(vid)
            curv = decoder.mouth_curvature(frame, reading) if reading.ok else None
            rows.append({"step": k, "alpha": k / (steps - 1),
                         "curvature": "" if curv is None else f"{curv:.4f}",
                         "emotion": reading.emotion if reading.ok else ""})
        with open(interp_dir / "interpolation.csv", "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=["step", "alpha", "curvature", "emotion"])
            w.writeheader()
            w.writerows(rows)

    _write_manifest(fig_dir, "export-figures", cfg, inputs)
    print(f"figure data -> {fig_dir}")
    return fig_dir
