"""Small convolutional autoencoders (KL and VQ) and the patch discriminator.

Every network here is fully convolutional: the training objective decodes
rescaled latents and scores rescaled reconstructions, so nothing may assume
the configured image size except the input validation in :meth:`Autoencoder.encode`.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional, Union

import torch
import torch.nn as nn
import torch.nn.functional as F

__all__ = [
    "ShapeError",
    "ConfigError",
    "AutoencoderConfig",
    "GaussianPosterior",
    "QuantizerOutput",
    "VectorQuantizer",
    "Encoder",
    "Decoder",
    "Autoencoder",
    "PatchDiscriminator",
    "reparameterize",
    "quantize",
    "LOGVAR_MIN",
    "LOGVAR_MAX",
]

LOGVAR_MIN, LOGVAR_MAX = -30.0, 20.0


class ShapeError(ValueError):
    """Tensor shape incompatible with the model configuration."""


class ConfigError(ValueError):
    """Invalid model or experiment configuration."""


@dataclass
class AutoencoderConfig:
    image_size: int = 64
    compression_ratio: int = 8
    latent_channels: int = 4
    base_width: int = 32
    latent_mode: str = "continuous"
    codebook_size: int = 512
    commitment_beta: float = 0.25

    def __post_init__(self):
        f = self.compression_ratio
        if f < 2 or f & (f - 1):
            raise ConfigError(f"compression_ratio must be a power of two >= 2, got {f}")
        if self.image_size % f:
            raise ConfigError(f"image_size {self.image_size} not divisible by f={f}")
        if self.latent_mode not in ("continuous", "discrete"):
            raise ConfigError(f"unknown latent_mode {self.latent_mode!r}")
        if self.latent_mode == "discrete" and self.codebook_size < 2:
            raise ConfigError("codebook_size must be >= 2")
        if self.latent_channels < 1 or self.base_width < 1:
            raise ConfigError("latent_channels and base_width must be positive")

    @property
    def levels(self) -> int:
        return int(math.log2(self.compression_ratio))

    @property
    def latent_size(self) -> int:
        return self.image_size // self.compression_ratio

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class GaussianPosterior:
    """Diagonal Gaussian ``q(z|x)``; ``logvar`` is clamped on construction."""

    mean: torch.Tensor
    logvar: torch.Tensor

    def __post_init__(self):
        if self.mean.shape != self.logvar.shape:
            raise ShapeError(f"mean {tuple(self.mean.shape)} vs logvar {tuple(self.logvar.shape)}")
        self.logvar = self.logvar.clamp(LOGVAR_MIN, LOGVAR_MAX)

    @property
    def std(self) -> torch.Tensor:
        return torch.exp(0.5 * self.logvar)


def reparameterize(post: GaussianPosterior, generator: Optional[torch.Generator] = None) -> torch.Tensor:
    """Sample ``mean + exp(logvar / 2) * eps`` with ``eps ~ N(0, I)`` drawn from ``generator``."""
    eps = torch.randn(
        post.mean.shape, generator=generator, dtype=post.mean.dtype, device=post.mean.device
    )
    return post.mean + post.std * eps


@dataclass
class QuantizerOutput:
    quantized: torch.Tensor
    indices: torch.Tensor
    commitment_loss: torch.Tensor
    codebook_loss: torch.Tensor


class _StraightThrough(torch.autograd.Function):
    # Returns the codebook rows bit-exactly; routes the gradient to z unchanged.

    @staticmethod
    def forward(ctx, z, q):
        return q.clone()

    @staticmethod
    def backward(ctx, grad):
        return grad, None


class VectorQuantizer(nn.Module):
    """Nearest-neighbour codebook with gradient-trained entries."""

    def __init__(self, codebook_size: int, dim: int, beta: float = 0.25):
        super().__init__()
        if codebook_size < 1:
            raise ConfigError("empty codebook")
        self.beta = beta
        self.embedding = nn.Parameter(torch.empty(codebook_size, dim).uniform_(-1 / codebook_size, 1 / codebook_size))
        self.register_buffer("usage_counts", torch.zeros(codebook_size, dtype=torch.long))

    @property
    def entries(self) -> torch.Tensor:
        return self.embedding

    def forward(self, z: torch.Tensor) -> QuantizerOutput:
        return quantize(z, self)

    @torch.no_grad()
    def reseed_dead(self, pool: torch.Tensor, generator: Optional[torch.Generator] = None) -> int:
        """Replace never-used entries with random rows of ``pool`` (``(N, dim)`` encoder outputs).

        Resets ``usage_counts`` afterwards and returns the number of entries replaced.
        """
        dead = (self.usage_counts == 0).nonzero().flatten()
        if len(dead) and len(pool):
            pick = torch.randint(len(pool), (len(dead),), generator=generator)
            self.embedding[dead] = pool[pick].to(self.embedding.dtype)
        self.usage_counts.zero_()
        return len(dead)


def quantize(z: torch.Tensor, cb: Union[VectorQuantizer, torch.Tensor]) -> QuantizerOutput:
    """Map every spatial site of ``z`` (``(..., C, H, W)``) to its nearest codebook row.

    Distances are Euclidean, computed by explicit differences so exact ties stay
    exact; ``argmin`` then resolves them to the lowest index. The returned
    ``quantized`` carries a straight-through gradient to ``z``.
    """
    entries = cb.entries if isinstance(cb, VectorQuantizer) else cb
    if entries.numel() == 0 or entries.dim() != 2:
        raise ConfigError("codebook must be a non-empty (K, C) table")
    c = z.shape[-3]
    if entries.shape[1] != c:
        raise ShapeError(f"z has {c} channels, codebook entries have {entries.shape[1]}")
    flat = z.movedim(-3, -1).reshape(-1, c)
    with torch.no_grad():
        idx = torch.cat([
            ((chunk[:, None, :] - entries[None, :, :]) ** 2).sum(-1).argmin(dim=1)
            for chunk in flat.split(4096)
        ]) if len(flat) else torch.zeros(0, dtype=torch.long)
    q_flat = entries[idx]
    q = q_flat.reshape(*z.shape[:-3], z.shape[-2], z.shape[-1], c).movedim(-1, -3)
    if isinstance(cb, VectorQuantizer) and cb.training:
        cb.usage_counts += torch.bincount(idx, minlength=len(entries))
    commitment = F.mse_loss(z, q.detach())
    codebook = F.mse_loss(q, z.detach())
    return QuantizerOutput(
        quantized=_StraightThrough.apply(z, q),
        indices=idx.reshape(*z.shape[:-3], z.shape[-2], z.shape[-1]),
        commitment_loss=commitment,
        codebook_loss=codebook,
    )


def _groups(ch: int) -> int:
    for g in (8, 4, 2):
        if ch % g == 0:
            return g
    return 1


class ResBlock(nn.Module):
    def __init__(self, ch_in: int, ch_out: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(ch_in), ch_in)
        self.conv1 = nn.Conv2d(ch_in, ch_out, 3, padding=1)
        self.norm2 = nn.GroupNorm(_groups(ch_out), ch_out)
        self.conv2 = nn.Conv2d(ch_out, ch_out, 3, padding=1)
        self.skip = nn.Conv2d(ch_in, ch_out, 1) if ch_in != ch_out else nn.Identity()

    def forward(self, x):
        h = self.conv1(F.silu(self.norm1(x)))
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


def _widths(cfg: AutoencoderConfig):
    # channel width per resolution level, finest first; capped at 4w
    return [cfg.base_width * 2 ** min(i, 2) for i in range(cfg.levels + 1)]


class Encoder(nn.Module):
    """Stride-2 conv then a residual block per level; full resolution sees one conv only."""

    def __init__(self, cfg: AutoencoderConfig):
        super().__init__()
        widths = _widths(cfg)
        out_ch = 2 * cfg.latent_channels if cfg.latent_mode == "continuous" else cfg.latent_channels
        self.conv_in = nn.Conv2d(3, widths[0], 3, padding=1)
        blocks = []
        for i in range(cfg.levels):
            blocks.append(nn.Conv2d(widths[i], widths[i + 1], 3, stride=2, padding=1))
            blocks.append(ResBlock(widths[i + 1], widths[i + 1]))
        self.down = nn.Sequential(*blocks)
        self.mid = ResBlock(widths[-1], widths[-1])
        self.norm_out = nn.GroupNorm(_groups(widths[-1]), widths[-1])
        self.conv_out = nn.Conv2d(widths[-1], out_ch, 3, padding=1)

    def forward(self, x):
        h = self.mid(self.down(self.conv_in(x)))
        return self.conv_out(F.silu(self.norm_out(h)))


class Decoder(nn.Module):
    def __init__(self, cfg: AutoencoderConfig):
        super().__init__()
        widths = _widths(cfg)[::-1]
        self.conv_in = nn.Conv2d(cfg.latent_channels, widths[0], 3, padding=1)
        self.mid = ResBlock(widths[0], widths[0])
        blocks = []
        for i in range(cfg.levels):
            blocks.append(ResBlock(widths[i], widths[i]))
            blocks.append(nn.Upsample(scale_factor=2, mode="nearest"))
            blocks.append(nn.Conv2d(widths[i], widths[i + 1], 3, padding=1))
        self.up = nn.Sequential(*blocks)
        self.norm_out = nn.GroupNorm(_groups(widths[-1]), widths[-1])
        self.conv_out = nn.Conv2d(widths[-1], 3, 3, padding=1)

    def forward(self, z):
        h = self.up(self.mid(self.conv_in(z)))
        return torch.tanh(self.conv_out(F.silu(self.norm_out(h))))


class Autoencoder(nn.Module):
    """Encoder/decoder pair with either a Gaussian or a vector-quantized latent."""

    def __init__(self, cfg: AutoencoderConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = Encoder(cfg)
        self.decoder = Decoder(cfg)
        self.quantizer = (
            VectorQuantizer(cfg.codebook_size, cfg.latent_channels, cfg.commitment_beta)
            if cfg.latent_mode == "discrete"
            else None
        )

    @property
    def discrete(self) -> bool:
        return self.quantizer is not None

    def _check_input(self, x: torch.Tensor) -> None:
        f = self.cfg.compression_ratio
        if x.dim() != 4 or x.shape[1] != 3:
            raise ShapeError(f"expected (N, 3, H, W) images, got {tuple(x.shape)}")
        if x.shape[-1] % f or x.shape[-2] % f:
            raise ShapeError(f"spatial size {tuple(x.shape[-2:])} not divisible by f={f}")
        if not torch.isfinite(x).all():
            raise ValueError("input contains non-finite pixels")

    def encode(self, x: torch.Tensor) -> Union[GaussianPosterior, torch.Tensor]:
        """Posterior for continuous models, pre-quantization features for discrete ones.

        Any spatial size divisible by ``f`` is accepted, since transformed
        images are encoded at reduced resolution.
        """
        self._check_input(x)
        h = self.encoder(x)
        if self.discrete:
            return h
        mean, logvar = h.chunk(2, dim=1)
        return GaussianPosterior(mean, logvar)

    def encode_mean(self, x: torch.Tensor) -> torch.Tensor:
        """Deterministic latent: posterior mean, or pre-quantization features."""
        out = self.encode(x)
        return out.mean if isinstance(out, GaussianPosterior) else out

    def quantize(self, z: torch.Tensor) -> QuantizerOutput:
        if not self.discrete:
            raise ConfigError("continuous model has no codebook")
        return quantize(z, self.quantizer)

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        if z.dim() != 4 or z.shape[1] != self.cfg.latent_channels:
            raise ShapeError(
                f"expected (N, {self.cfg.latent_channels}, h, w) latents, got {tuple(z.shape)}"
            )
        return self.decoder(z)

    def reconstruct(self, x: torch.Tensor) -> torch.Tensor:
        """Deterministic reconstruction through the posterior mean (or the quantized features)."""
        z = self.encode_mean(x)
        if self.discrete:
            z = self.quantize(z).quantized
        return self.decode(z)


class PatchDiscriminator(nn.Module):
    """Three-layer patch discriminator returning a grid of realness logits."""

    def __init__(self, width: int = 32, in_channels: int = 3):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(in_channels, width, 4, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(width, 2 * width, 4, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(2 * width, 1, 4, stride=1, padding=1),
        )

    min_size = 8

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 4 or min(x.shape[-2:]) < self.min_size:
            raise ShapeError(f"discriminator needs (N, C, >={self.min_size}, >={self.min_size}), got {tuple(x.shape)}")
        return self.net(x)
