"""Toy DDPM on autoencoder latents, used to compare how easy latent spaces are to model."""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Optional, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .probes import frechet_from_features

logger = logging.getLogger(__name__)

__all__ = [
    "NoiseSchedule",
    "LatentDataset",
    "Denoiser",
    "DenoiserConfig",
    "diffusion_forward",
    "train_latent_denoiser",
    "ancestral_sample",
    "sample_and_score",
    "MIN_SCORE_SAMPLES",
]

MIN_SCORE_SAMPLES = 500


class NoiseSchedule:
    """Linear beta schedule; ``alpha_bars[0] == 1`` and ``alpha_bars[t]`` for ``t = 1..T``."""

    def __init__(self, T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02):
        if T < 1 or not 0 < beta_start <= beta_end < 1:
            raise ValueError("invalid schedule parameters")
        self.T = T
        # betas[0] is a placeholder so betas[t] pairs with step t
        self.betas = np.concatenate([[0.0], np.linspace(beta_start, beta_end, T, dtype=np.float64)])
        self.alpha_bars = np.cumprod(1.0 - self.betas)

    def check_t(self, t) -> None:
        t = np.asarray(t)
        if np.any(t < 0) or np.any(t > self.T):
            raise ValueError(f"t outside [0, {self.T}]")


def diffusion_forward(
    z0: torch.Tensor, t: Union[int, torch.Tensor], noise: torch.Tensor, sched: NoiseSchedule
) -> torch.Tensor:
    """``sqrt(abar_t) z0 + sqrt(1 - abar_t) noise``; ``t`` scalar or one step per sample."""
    if noise.shape != z0.shape:
        raise ValueError(f"noise {tuple(noise.shape)} vs z0 {tuple(z0.shape)}")
    t_np = t.cpu().numpy() if torch.is_tensor(t) else np.asarray(t)
    sched.check_t(t_np)
    ab = torch.as_tensor(sched.alpha_bars[t_np], dtype=z0.dtype)
    if ab.dim():
        ab = ab.view(-1, *([1] * (z0.dim() - 1)))
    return ab.sqrt() * z0 + (1 - ab).sqrt() * noise


@dataclass
class LatentDataset:
    """Latents scaled by ``scale_factor`` towards unit variance."""

    latents: torch.Tensor
    scale_factor: float
    source_checkpoint: str

    @classmethod
    def from_raw(cls, raw: torch.Tensor, source_checkpoint: str = "") -> "LatentDataset":
        scale = 1.0 / float(raw.double().std())
        ds = cls(raw.float() * scale, scale, source_checkpoint)
        std = ds.channel_std()
        if np.any(std < 0.8) or np.any(std > 1.2):
            logger.warning("per-channel std after scaling %s outside [0.8, 1.2]", np.round(std, 3))
        return ds

    def channel_std(self) -> np.ndarray:
        return self.latents.double().transpose(0, 1).reshape(self.latents.shape[1], -1).std(1).numpy()

    def save(self, path) -> None:
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        np.save(path / "latents.npy", self.latents.numpy())
        meta = {
            "shape": list(self.latents.shape),
            "scale_factor": self.scale_factor,
            "source_checkpoint": self.source_checkpoint,
            "channel_std": self.channel_std().tolist(),
        }
        (path / "meta.json").write_text(json.dumps(meta, indent=2))

    @classmethod
    def load(cls, path) -> "LatentDataset":
        path = Path(path)
        meta = json.loads((path / "meta.json").read_text())
        lat = torch.from_numpy(np.load(path / "latents.npy"))
        if list(lat.shape) != meta["shape"]:
            raise ValueError(f"latents shape {tuple(lat.shape)} disagrees with metadata {meta['shape']}")
        return cls(lat, meta["scale_factor"], meta["source_checkpoint"])


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    args = t.float()[:, None] * freqs[None]
    return torch.cat([args.sin(), args.cos()], dim=1)


class _TimeResBlock(nn.Module):
    def __init__(self, ch_in, ch_out, t_dim):
        super().__init__()
        self.norm1 = nn.GroupNorm(8, ch_in)
        self.conv1 = nn.Conv2d(ch_in, ch_out, 3, padding=1)
        self.t_proj = nn.Linear(t_dim, ch_out)
        self.norm2 = nn.GroupNorm(8, ch_out)
        self.conv2 = nn.Conv2d(ch_out, ch_out, 3, padding=1)
        self.skip = nn.Conv2d(ch_in, ch_out, 1) if ch_in != ch_out else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.t_proj(temb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


@dataclass
class DenoiserConfig:
    latent_channels: int = 4
    latent_size: int = 8
    width: int = 32
    steps: int = 20_000
    batch_size: int = 64
    lr: float = 2e-4
    T: int = 1000
    seed: int = 0


class Denoiser(nn.Module):
    """Two-level conv U-Net predicting the added noise."""

    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        w, c = cfg.width, cfg.latent_channels
        t_dim = 4 * w
        self.cfg = cfg
        self.t_mlp = nn.Sequential(nn.Linear(w, t_dim), nn.SiLU(), nn.Linear(t_dim, t_dim))
        self.conv_in = nn.Conv2d(c, w, 3, padding=1)
        self.enc1 = _TimeResBlock(w, w, t_dim)
        self.down = nn.Conv2d(w, 2 * w, 3, stride=2, padding=1)
        self.enc2 = _TimeResBlock(2 * w, 2 * w, t_dim)
        self.mid = _TimeResBlock(2 * w, 2 * w, t_dim)
        self.up = nn.ConvTranspose2d(2 * w, w, 4, stride=2, padding=1)
        self.dec1 = _TimeResBlock(2 * w, w, t_dim)
        self.norm_out = nn.GroupNorm(8, w)
        self.conv_out = nn.Conv2d(w, c, 3, padding=1)
        nn.init.zeros_(self.conv_out.weight)
        nn.init.zeros_(self.conv_out.bias)

    def forward(self, x, t):
        temb = self.t_mlp(timestep_embedding(t, self.cfg.width))
        h1 = self.enc1(self.conv_in(x), temb)
        h2 = self.mid(self.enc2(self.down(h1), temb), temb)
        h = self.dec1(torch.cat([self.up(h2), h1], dim=1), temb)
        return self.conv_out(F.silu(self.norm_out(h)))


def train_latent_denoiser(
    data: LatentDataset,
    cfg: DenoiserConfig,
    log: Optional[Callable[[int, float], None]] = None,
) -> dict:
    """Train a :class:`Denoiser` with the MSE noise-prediction loss; returns a checkpoint dict."""
    lat = data.latents
    if lat.shape[1] != cfg.latent_channels or lat.shape[-1] != cfg.latent_size or lat.shape[-2] != cfg.latent_size:
        raise ValueError(
            f"latents {tuple(lat.shape[1:])} do not match config "
            f"({cfg.latent_channels}, {cfg.latent_size}, {cfg.latent_size})"
        )
    torch.manual_seed(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    model = Denoiser(cfg)
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=0.0)
    sched = NoiseSchedule(cfg.T)
    ab = torch.as_tensor(sched.alpha_bars, dtype=torch.float32)
    losses = []
    for step in range(cfg.steps):
        idx = torch.randint(len(lat), (cfg.batch_size,), generator=gen)
        z0 = lat[idx]
        t = torch.randint(1, cfg.T + 1, (cfg.batch_size,), generator=gen)
        noise = torch.randn(z0.shape, generator=gen)
        a = ab[t].view(-1, 1, 1, 1)
        zt = a.sqrt() * z0 + (1 - a).sqrt() * noise
        loss = F.mse_loss(model(zt, t), noise)
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(loss.item())
        if log is not None:
            log(step, losses[-1])
    return {
        "format": "eqvae-denoiser-v1",
        "config": asdict(cfg),
        "state": model.state_dict(),
        "scale_factor": data.scale_factor,
        "source_checkpoint": data.source_checkpoint,
        "losses": losses,
    }


def load_denoiser(ckpt: dict) -> Denoiser:
    model = Denoiser(DenoiserConfig(**ckpt["config"]))
    model.load_state_dict(ckpt["state"])
    return model.eval()


@torch.no_grad()
def ancestral_sample(
    eps_model: Callable[[torch.Tensor, torch.Tensor], torch.Tensor],
    shape: Tuple[int, ...],
    sched: NoiseSchedule,
    generator: torch.Generator,
    batch_size: int = 500,
) -> torch.Tensor:
    """DDPM ancestral sampling with ``sigma_t^2 = beta_t``."""
    out = []
    n = shape[0]
    for start in range(0, n, batch_size):
        b = min(batch_size, n - start)
        z = torch.randn((b, *shape[1:]), generator=generator, dtype=torch.float64)
        for t in range(sched.T, 0, -1):
            beta, ab = sched.betas[t], sched.alpha_bars[t]
            tt = torch.full((b,), t, dtype=torch.long)
            eps = eps_model(z.float(), tt).double()
            mean = (z - beta / math.sqrt(1 - ab) * eps) / math.sqrt(1 - beta)
            if t > 1:
                z = mean + math.sqrt(beta) * torch.randn(z.shape, generator=generator, dtype=torch.float64)
            else:
                z = mean
        out.append(z.float())
    return torch.cat(out)


@torch.no_grad()
def sample_and_score(
    model,
    decoder: Callable[[torch.Tensor], torch.Tensor],
    n: int,
    generator: torch.Generator,
    features: Callable[[torch.Tensor], np.ndarray],
    reference_features: np.ndarray,
    scale_factor: float,
    latent_shape: Tuple[int, int, int],
    sched: Optional[NoiseSchedule] = None,
    decode_batch: int = 250,
):
    """Sample ``n`` latents, undo the scale factor, decode and score against reference features.

    Returns ``(images, frechet_proxy)``.
    """
    if n < MIN_SCORE_SAMPLES:
        raise ValueError(f"n={n} < {MIN_SCORE_SAMPLES}: Frechet statistic too noisy")
    sched = sched or NoiseSchedule(getattr(getattr(model, "cfg", None), "T", 1000))
    z = ancestral_sample(model, (n, *latent_shape), sched, generator)
    z = z / scale_factor
    images = torch.cat([decoder(z[i:i + decode_batch]) for i in range(0, n, decode_batch)])
    return images, frechet_from_features(features(images), reference_features)
