"""Spatial transforms on pixel and latent grids.

A transform is ``tau = S(s_x, s_y) @ R(theta)`` with right-angle rotations only.
Applying it to a grid rotates first (an exact index permutation) and then
rescales with a Catmull-Rom bicubic resampler. The same resampler is used for
images and for latents so that both sides of the equivariance relation are
produced by identical arithmetic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Optional, Sequence, Tuple

import numpy as np
import torch

__all__ = [
    "DegenerateOutputError",
    "TransformDomainError",
    "Transform2D",
    "TransformSamplerConfig",
    "IDENTITY",
    "make_transform",
    "rotation",
    "scaling",
    "output_shape",
    "apply_transform",
    "bicubic_resize",
    "bicubic_matrix",
    "sample_transform",
    "sample_nonidentity",
    "round_half_away",
    "spawn_rngs",
    "ROTATION_SET",
    "SCALE_SET",
]

HALF_PI = math.pi / 2
# Exact (cos, sin) for quarter turns, avoids 6e-17 residue from math.cos(pi/2).
_QUARTER_COS_SIN = ((1.0, 0.0), (0.0, 1.0), (-1.0, 0.0), (0.0, -1.0))
_ANGLE_TOL = 1e-9
CATMULL_ROM_A = -0.5


class TransformDomainError(ValueError):
    """Transform parameters outside the supported domain."""


class DegenerateOutputError(ValueError):
    """A transformed grid would have an empty spatial dimension."""


def round_half_away(x: float) -> int:
    """Round to nearest integer, ties away from zero."""
    return int(math.copysign(math.floor(abs(x) + 0.5), x))


def _quarter_turns(theta: float) -> int:
    k = round(theta / HALF_PI)
    if abs(theta - k * HALF_PI) > _ANGLE_TOL or not 0 <= k <= 3:
        raise TransformDomainError(
            f"theta={theta!r} is not one of 0, pi/2, pi, 3pi/2"
        )
    return k


@dataclass(frozen=True)
class Transform2D:
    """Composition of an axis-aligned scaling and a right-angle rotation."""

    s_x: float = 1.0
    s_y: float = 1.0
    quarter_turns: int = 0
    matrix: np.ndarray = field(init=False, repr=False, compare=False)
    kind: str = field(init=False)

    def __post_init__(self):
        for name in ("s_x", "s_y"):
            s = getattr(self, name)
            if not (isinstance(s, (int, float)) and math.isfinite(s) and 0.0 < s <= 1.0):
                raise TransformDomainError(f"{name}={s!r} outside (0, 1]")
        if self.quarter_turns not in (0, 1, 2, 3):
            raise TransformDomainError(f"quarter_turns={self.quarter_turns!r}")
        c, s = _QUARTER_COS_SIN[self.quarter_turns]
        rot = np.array([[c, -s], [s, c]])
        mat = np.diag([float(self.s_x), float(self.s_y)]) @ rot
        mat.setflags(write=False)
        object.__setattr__(self, "matrix", mat)
        scaled = not (self.s_x == 1.0 and self.s_y == 1.0)
        rotated = self.quarter_turns != 0
        if scaled and rotated:
            kind = "composed"
        elif scaled:
            kind = "scale"
        elif rotated:
            kind = "rotation"
        else:
            kind = "identity"
        object.__setattr__(self, "kind", kind)

    @property
    def theta(self) -> float:
        return self.quarter_turns * HALF_PI

    @property
    def is_identity(self) -> bool:
        return self.kind == "identity"

    def describe(self) -> str:
        """Short stable key, e.g. ``rot90``, ``scale0.50``, ``scale0.50x0.25+rot180``."""
        parts = []
        if self.s_x != 1.0 or self.s_y != 1.0:
            if self.s_x == self.s_y:
                parts.append(f"scale{self.s_x:.2f}")
            else:
                parts.append(f"scale{self.s_x:.2f}x{self.s_y:.2f}")
        if self.quarter_turns:
            parts.append(f"rot{90 * self.quarter_turns}")
        return "+".join(parts) or "identity"

    def to_dict(self) -> dict:
        return {"s_x": self.s_x, "s_y": self.s_y, "theta": self.theta, "kind": self.kind}


def make_transform(s_x: float, s_y: float, theta: float) -> Transform2D:
    """Build ``S(s_x, s_y) @ R(theta)``; theta must be a multiple of pi/2 in [0, 2pi)."""
    return Transform2D(float(s_x), float(s_y), _quarter_turns(float(theta)))


def rotation(theta: float) -> Transform2D:
    return make_transform(1.0, 1.0, theta)


def scaling(s_x: float, s_y: Optional[float] = None) -> Transform2D:
    return make_transform(s_x, s_x if s_y is None else s_y, 0.0)


IDENTITY = Transform2D()
ROTATION_SET = tuple(rotation(k * HALF_PI) for k in (1, 2, 3))
SCALE_SET = tuple(scaling(s) for s in (0.25, 0.50, 0.75))


def output_shape(height: int, width: int, tau: Transform2D) -> Tuple[int, int]:
    """Spatial shape of ``tau`` applied to a ``height x width`` grid."""
    if tau.quarter_turns % 2:
        height, width = width, height
    out_h = round_half_away(tau.s_y * height)
    out_w = round_half_away(tau.s_x * width)
    if out_h < 1 or out_w < 1:
        raise DegenerateOutputError(
            f"{tau.describe()} maps {height}x{width} to {out_h}x{out_w}"
        )
    return out_h, out_w


def _cubic_weight(d: float, a: float = CATMULL_ROM_A) -> float:
    d = abs(d)
    if d <= 1.0:
        return ((a + 2.0) * d - (a + 3.0)) * d * d + 1.0
    if d < 2.0:
        return ((a * d - 5.0 * a) * d + 8.0 * a) * d - 4.0 * a
    return 0.0


@lru_cache(maxsize=512)
def _bicubic_matrix_np(n_in: int, n_out: int) -> np.ndarray:
    mat = np.zeros((n_out, n_in), dtype=np.float64)
    ratio = n_in / n_out
    for i in range(n_out):
        src = (i + 0.5) * ratio - 0.5
        base = math.floor(src)
        frac = src - base
        for tap in range(-1, 3):
            j = min(max(base + tap, 0), n_in - 1)
            mat[i, j] += _cubic_weight(tap - frac)
    mat /= mat.sum(axis=1, keepdims=True)
    mat.setflags(write=False)
    return mat


def bicubic_matrix(n_in: int, n_out: int, dtype=torch.float32, device=None) -> torch.Tensor:
    """Dense ``(n_out, n_in)`` 1-D Catmull-Rom resampling operator with edge replication.

    Pixel centres are aligned (``align_corners=False`` convention) and every row
    sums to one, so constant signals pass through unchanged.
    """
    return torch.tensor(_bicubic_matrix_np(int(n_in), int(n_out)), dtype=dtype, device=device)


def bicubic_resize(x: torch.Tensor, size: Sequence[int]) -> torch.Tensor:
    """Resize the last two axes of ``x`` to ``size`` with separable bicubic weights."""
    out_h, out_w = int(size[0]), int(size[1])
    if out_h < 1 or out_w < 1:
        raise DegenerateOutputError(f"requested size {out_h}x{out_w}")
    in_h, in_w = x.shape[-2:]
    if (in_h, in_w) == (out_h, out_w):
        return x
    if out_h != in_h:
        x = torch.matmul(bicubic_matrix(in_h, out_h, x.dtype, x.device), x)
    if out_w != in_w:
        x = torch.matmul(x, bicubic_matrix(in_w, out_w, x.dtype, x.device).T)
    return x


def apply_transform(
    grid: torch.Tensor, tau: Transform2D, size: Optional[Sequence[int]] = None
) -> torch.Tensor:
    """Apply ``tau`` to a ``(..., C, H, W)`` grid.

    Rotation is ``torch.rot90`` on the spatial axes, so ``x_tau(p) = x(tau^-1 p)``
    holds exactly on the index lattice. Scaling resamples the rotated grid to
    :func:`output_shape`, or to ``size`` when given (used to pin a pixel target
    to ``f`` times a latent grid's shape).

    Raises:
        DegenerateOutputError: an output dimension would be smaller than one.
    """
    if grid.dim() < 3:
        raise ValueError(f"expected (..., C, H, W) grid, got shape {tuple(grid.shape)}")
    if size is None:
        size = output_shape(grid.shape[-2], grid.shape[-1], tau)
    if tau.quarter_turns:
        grid = torch.rot90(grid, tau.quarter_turns, dims=(-2, -1))
    return bicubic_resize(grid, size)


@dataclass
class TransformSamplerConfig:
    """Distribution over transforms used by the gated training objective."""

    p_alpha: float = 0.5
    scale_min: float = 0.25
    scale_max: float = 1.0
    isotropic: bool = True
    enable_rotation: bool = True
    enable_scale: bool = True
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not 0.0 <= self.p_alpha <= 1.0:
            raise TransformDomainError(f"p_alpha={self.p_alpha} outside [0, 1]")
        if not 0.0 < self.scale_min < self.scale_max <= 1.0:
            raise TransformDomainError(
                f"need 0 < scale_min < scale_max <= 1, got {self.scale_min}, {self.scale_max}"
            )
        if self.p_alpha < 1.0 and not (self.enable_rotation or self.enable_scale):
            raise TransformDomainError("no transform family enabled while p_alpha < 1")


def sample_nonidentity(rng: np.random.Generator, cfg: TransformSamplerConfig) -> Transform2D:
    """Draw from the enabled transform families, skipping the identity gate."""
    s_x = s_y = 1.0
    k = 0
    if cfg.enable_scale:
        s_x = float(rng.uniform(cfg.scale_min, cfg.scale_max))
        s_y = s_x if cfg.isotropic else float(rng.uniform(cfg.scale_min, cfg.scale_max))
    if cfg.enable_rotation:
        k = int(rng.integers(1, 4))
    return Transform2D(s_x, s_y, k)


def sample_transform(rng: np.random.Generator, cfg: TransformSamplerConfig) -> Transform2D:
    """Identity with probability ``cfg.p_alpha``, otherwise :func:`sample_nonidentity`."""
    if rng.random() < cfg.p_alpha:
        return IDENTITY
    return sample_nonidentity(rng, cfg)


def spawn_rngs(seed: int, n: int) -> list:
    """Independent per-worker generators derived from one seed via ``SeedSequence.spawn``."""
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]
