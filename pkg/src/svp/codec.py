"""Pixel <-> latent codecs for the denoiser.

Default is the identity codec: diffusion runs directly in pixel space with
values rescaled to [-1, 1]. The tiny convolutional autoencoder reproduces
the compressed-latent structure (4x spatial reduction) for configurations
that want it; it is trained once and frozen.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn

from .checkpoints import load_checkpoint, save_checkpoint
from .config import DiffusionConfig
from .errors import ConfigError, NumericError


class IdentityCodec:
    """[0,1] pixels -> [-1,1] 'latents' and back; no parameters."""

    def __init__(self, image_size: int, channels: int = 3):
        self.latent_channels = channels
        self.latent_size = image_size

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        return x * 2.0 - 1.0

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        return torch.clamp((z + 1.0) / 2.0, 0.0, 1.0)


class TinyAutoencoder(nn.Module):
    """3 -> C latent at 1/4 spatial resolution, mirrored decoder."""

    def __init__(self, image_size: int, width: int = 32, latent_channels: int = 4):
        super().__init__()
        self.latent_channels = latent_channels
        self.latent_size = image_size // 4
        self.width = width
        self.encoder = nn.Sequential(
            nn.Conv2d(3, width, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(width, width, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(width, latent_channels, 3, padding=1),
        )
        self.decoder = nn.Sequential(
            nn.Conv2d(latent_channels, width, 3, padding=1), nn.SiLU(),
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(width, width, 3, padding=1), nn.SiLU(),
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(width, 3, 3, padding=1),
        )

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        return self.encoder(x * 2.0 - 1.0)

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        return torch.clamp((self.decoder(z) + 1.0) / 2.0, 0.0, 1.0)

    def save(self, path, meta: dict | None = None):
        state = {k: v.detach().numpy() for k, v in self.state_dict().items()}
        save_checkpoint(path, state, config={
            "image_size": self.latent_size * 4, "width": self.width,
            "latent_channels": self.latent_channels}, meta=meta or {})

    @classmethod
    def load(cls, path) -> "TinyAutoencoder":
        state, config, _ = load_checkpoint(path)
        ae = cls(config["image_size"], width=config["width"],
                 latent_channels=config["latent_channels"])
        ae.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in state.items()})
        ae.eval()
        for p in ae.parameters():
            p.requires_grad_(False)
        return ae


def train_autoencoder(frames: np.ndarray, image_size: int, steps: int = 600,
                      lr: float = 2e-3, batch: int = 32, seed: int = 0,
                      width: int = 32, latent_channels: int = 4) -> TinyAutoencoder:
    """frames: (M,H,W,3) in [0,1]. Reconstruction MSE objective."""
    torch.manual_seed(seed)
    ae = TinyAutoencoder(image_size, width=width, latent_channels=latent_channels)
    opt = torch.optim.Adam(ae.parameters(), lr=lr)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 77]))
    data = torch.from_numpy(frames).float().permute(0, 3, 1, 2)
    for step in range(steps):
        idx = rng.integers(0, data.shape[0], size=batch)
        x = data[idx]
        rec = ae.decode(ae.encode(x))
        loss = torch.mean((rec - x) ** 2)
        if not torch.isfinite(loss):
            raise NumericError(f"autoencoder loss non-finite at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
    ae.eval()
    return ae


def make_codec(cfg: DiffusionConfig, ae_path=None):
    if cfg.codec == "identity":
        return IdentityCodec(cfg.image_size)
    if cfg.codec == "tiny_ae":
        if ae_path is None:
            raise ConfigError("codec 'tiny_ae' needs a trained autoencoder "
                              "checkpoint (run train-codec first)")
        return TinyAutoencoder.load(ae_path)
    raise ConfigError(f"unknown codec {cfg.codec!r}")
