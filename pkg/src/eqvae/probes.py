"""Latent-space diagnostics: equivariance error, PSNR/SSIM, Frechet distance,
TwoNN intrinsic dimension and PCA colour maps of latent grids."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.neighbors import NearestNeighbors

from .transform2d import Transform2D, apply_transform

__all__ = [
    "NumericalStabilityError",
    "DegenerateInputError",
    "EquivarianceReport",
    "FrechetStats",
    "IdEstimate",
    "equivariance_error",
    "psnr",
    "ssim",
    "frechet_distance",
    "frechet_from_features",
    "twonn_intrinsic_dimension",
    "latent_points",
    "pca_latent_visualization",
    "save_png",
]

PSNR_CAP = 100.0
EIG_TOL = 1e-6


class NumericalStabilityError(ArithmeticError):
    pass


class DegenerateInputError(ValueError):
    pass


@dataclass
class EquivarianceReport:
    per_transform: Dict[str, float]
    rotation_mean: float
    scale_mean: float
    n_samples: int
    skipped: Dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "per_transform": dict(self.per_transform),
            "rotation_mean": self.rotation_mean,
            "scale_mean": self.scale_mean,
            "n_samples": self.n_samples,
            "skipped": dict(self.skipped),
        }


@torch.no_grad()
def equivariance_error(
    encoder: Callable[[torch.Tensor], torch.Tensor],
    images: torch.Tensor,
    transforms: Sequence[Transform2D],
    batch_size: int = 64,
) -> EquivarianceReport:
    """Normalised equivariance error per transform.

    For each transform, averages ``||tau o E(x) - E(tau o x)||^2 / ||E(tau o x)||^2``
    over the images. ``tau o x`` is resampled to ``f`` times the shape of
    ``tau o E(x)`` so both latents align. Samples with ``E(tau o x) == 0``
    are skipped and counted in ``skipped``. ``rotation_mean`` and
    ``scale_mean`` average the pure-rotation and pure-scale entries (NaN if
    none were given).
    """
    if len(images) == 0:
        raise ValueError("empty image set")
    per: Dict[str, float] = {}
    skipped: Dict[str, int] = {}
    kinds: Dict[str, str] = {}
    for tau in transforms:
        key = tau.describe()
        ratios = []
        n_skip = 0
        for i in range(0, len(images), batch_size):
            x = images[i:i + batch_size]
            z = encoder(x).double()
            z_tau = apply_transform(z, tau)
            f_h, f_w = x.shape[-2] // z.shape[-2], x.shape[-1] // z.shape[-1]
            x_tau = apply_transform(x, tau, size=(f_h * z_tau.shape[-2], f_w * z_tau.shape[-1]))
            z_tx = encoder(x_tau).double()
            num = (z_tau - z_tx).pow(2).flatten(1).sum(1)
            den = z_tx.pow(2).flatten(1).sum(1)
            ok = den > 0
            n_skip += int((~ok).sum())
            ratios.append((num[ok] / den[ok]).numpy())
        r = np.concatenate(ratios)
        per[key] = float(r.mean()) if len(r) else float("nan")
        skipped[key] = n_skip
        kinds[key] = tau.kind

    def _mean(kind):
        vals = [v for k, v in per.items() if kinds[k] == kind]
        return float(np.mean(vals)) if vals else float("nan")

    return EquivarianceReport(per, _mean("rotation"), _mean("scale"), len(images), skipped)


def psnr(x: torch.Tensor, x_hat: torch.Tensor, data_range: float = 2.0) -> float:
    """Peak signal-to-noise ratio in dB, averaged over images for batched input; capped at 100."""
    if x.shape != x_hat.shape:
        raise ValueError(f"shape mismatch {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    x, x_hat = x.double(), x_hat.double()
    if x.dim() == 3:
        x, x_hat = x[None], x_hat[None]
    mse = (x - x_hat).pow(2).flatten(1).mean(1)
    vals = []
    for m in mse.tolist():
        vals.append(PSNR_CAP if m == 0 else min(PSNR_CAP, 10 * math.log10(data_range ** 2 / m)))
    return float(np.mean(vals))


def _gaussian_window(size: int, sigma: float) -> torch.Tensor:
    ax = torch.arange(size, dtype=torch.float64) - (size - 1) / 2
    g = torch.exp(-(ax ** 2) / (2 * sigma ** 2))
    g = g / g.sum()
    return g[:, None] * g[None, :]


def ssim(
    x: torch.Tensor, x_hat: torch.Tensor, data_range: float = 2.0, win_size: int = 11, sigma: float = 1.5
) -> float:
    """Mean SSIM with a Gaussian window over valid positions, per channel, averaged over the batch.

    Uses population statistics and ``C1 = (0.01 L)^2``, ``C2 = (0.03 L)^2``.
    Windows shrink to the largest odd size fitting images smaller than ``win_size``.
    """
    if x.shape != x_hat.shape:
        raise ValueError(f"shape mismatch {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    x, y = x.double(), x_hat.double()
    if x.dim() == 3:
        x, y = x[None], y[None]
    win_size = min(win_size, *x.shape[-2:])
    if win_size % 2 == 0:
        win_size -= 1
    c = x.shape[1]
    win = _gaussian_window(win_size, sigma).expand(c, 1, win_size, win_size)
    filt = lambda t: F.conv2d(t, win, groups=c)
    mu_x, mu_y = filt(x), filt(y)
    sxx = filt(x * x) - mu_x ** 2
    syy = filt(y * y) - mu_y ** 2
    sxy = filt(x * y) - mu_x * mu_y
    c1, c2 = (0.01 * data_range) ** 2, (0.03 * data_range) ** 2
    s = ((2 * mu_x * mu_y + c1) * (2 * sxy + c2)) / ((mu_x ** 2 + mu_y ** 2 + c1) * (sxx + syy + c2))
    return float(s.mean())


@dataclass
class FrechetStats:
    mean: np.ndarray
    covariance: np.ndarray
    n: int

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.covariance = np.atleast_2d(np.asarray(self.covariance, dtype=np.float64))
        if self.n < 2:
            raise ValueError("need at least two samples")
        if not np.allclose(self.covariance, self.covariance.T, atol=1e-8, rtol=0):
            raise ValueError("covariance is not symmetric")

    @classmethod
    def from_features(cls, feats: np.ndarray) -> "FrechetStats":
        feats = np.asarray(feats, dtype=np.float64)
        return cls(feats.mean(0), np.cov(feats, rowvar=False), len(feats))

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "covariance": self.covariance.tolist(), "n": self.n}


def _psd_sqrt(a: np.ndarray, what: str) -> np.ndarray:
    a = 0.5 * (a + a.T)
    vals, vecs = np.linalg.eigh(a)
    if vals.min() < -EIG_TOL * max(1.0, abs(vals.max())):
        raise NumericalStabilityError(f"{what} has eigenvalue {vals.min():.3g}, not PSD")
    return (vecs * np.sqrt(np.clip(vals, 0, None))) @ vecs.T


def frechet_distance(a: FrechetStats, b: FrechetStats) -> float:
    """``||mu_a - mu_b||^2 + tr(S_a + S_b - 2 (S_a S_b)^{1/2})``.

    The cross term uses ``tr (S_a^{1/2} S_b S_a^{1/2})^{1/2}``, which has the
    same trace and is symmetric, so both square roots come from ``eigh``.
    """
    if a.mean.shape != b.mean.shape or a.covariance.shape != b.covariance.shape:
        raise ValueError(f"dimension mismatch {a.mean.shape} vs {b.mean.shape}")
    root_a = _psd_sqrt(a.covariance, "first covariance")
    _psd_sqrt(b.covariance, "second covariance")
    m = root_a @ (0.5 * (b.covariance + b.covariance.T)) @ root_a
    m = 0.5 * (m + m.T)
    vals = np.linalg.eigvalsh(m)
    if vals.min() < -EIG_TOL * max(1.0, abs(vals.max())):
        raise NumericalStabilityError(f"cross product has eigenvalue {vals.min():.3g}")
    cross = np.sqrt(np.clip(vals, 0, None)).sum()
    diff = a.mean - b.mean
    return float(diff @ diff + np.trace(a.covariance) + np.trace(b.covariance) - 2 * cross)


def frechet_from_features(fa: np.ndarray, fb: np.ndarray) -> float:
    return frechet_distance(FrechetStats.from_features(fa), FrechetStats.from_features(fb))


@dataclass
class IdEstimate:
    id: float
    n_points: int
    discarded_pairs: int
    n_used: int = 0

    def to_dict(self) -> dict:
        return {"id": self.id, "n_points": self.n_points, "discarded_pairs": self.discarded_pairs,
                "n_used": self.n_used}


MIN_ID_POINTS = 100


def twonn_intrinsic_dimension(points: np.ndarray, discard_fraction: float = 0.1) -> IdEstimate:
    """TwoNN intrinsic dimension.

    Exact duplicates are removed first (they give ``r1 = 0``). With
    ``mu = r2 / r1``, ``log mu`` is exponential with rate equal to the
    dimension; the largest ``discard_fraction`` of ratios are treated as
    right-censored at the cut, and the rate is the censored maximum-likelihood
    estimate ``n_kept / (sum(log mu_kept) + n_cut * log mu_cut)``.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2:
        raise ValueError("points must be (N, D)")
    uniq = np.unique(pts, axis=0)
    n = len(uniq)
    discarded = len(pts) - n
    if n < MIN_ID_POINTS:
        raise ValueError(f"only {n} distinct points, need >= {MIN_ID_POINTS}")
    dist, _ = NearestNeighbors(n_neighbors=3).fit(uniq).kneighbors(uniq)
    r1, r2 = dist[:, 1], dist[:, 2]
    if np.any(r1 <= 0):
        raise RuntimeError("zero nearest-neighbour distance after deduplication")
    log_mu = np.sort(np.log(r2 / r1))
    n_keep = int(n * (1.0 - discard_fraction))
    cut = log_mu[n_keep - 1]
    denom = log_mu[:n_keep].sum() + (n - n_keep) * cut
    return IdEstimate(float(n_keep / denom), n, discarded, n_keep)


def latent_points(latents: np.ndarray, mode: str = "per_site", max_points: int = 50_000, seed: int = 0) -> np.ndarray:
    """Point cloud from ``(N, C, H, W)`` latents: one C-vector per site, or one flattened latent per image."""
    latents = np.asarray(latents, dtype=np.float64)
    if mode == "per_site":
        pts = latents.transpose(0, 2, 3, 1).reshape(-1, latents.shape[1])
    elif mode == "flatten":
        pts = latents.reshape(len(latents), -1)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    if len(pts) > max_points:
        idx = np.random.default_rng(seed).choice(len(pts), max_points, replace=False)
        pts = pts[np.sort(idx)]
    return pts


def pca_latent_visualization(latents: Sequence[np.ndarray], rel_tol: float = 1e-10) -> List[np.ndarray]:
    """Project every latent site on the top three principal components.

    PCA is fit on all sites of all latents pooled; each component is min-max
    scaled to ``[0, 1]`` over the pool. Component signs are fixed so the
    largest-magnitude loading is positive. Returns one ``(3, H, W)`` map per input.
    """
    arrs = [np.asarray(z, dtype=np.float64) for z in latents]
    if not arrs:
        raise DegenerateInputError("no latents given")
    c = arrs[0].shape[0]
    if c < 3 or any(a.shape[0] != c for a in arrs):
        raise DegenerateInputError("need >= 3 channels shared by all latents")
    pool = np.concatenate([a.reshape(c, -1).T for a in arrs])
    centred = pool - pool.mean(0)
    cov = centred.T @ centred / max(len(pool) - 1, 1)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1]
    vals, vecs = vals[order], vecs[:, order]
    if vals[0] <= 0 or vals[2] <= rel_tol * vals[0]:
        raise DegenerateInputError("latent covariance has rank < 3")
    comps = vecs[:, :3]
    signs = np.sign(comps[np.abs(comps).argmax(0), np.arange(3)])
    comps = comps * signs
    proj = centred @ comps
    lo, hi = proj.min(0), proj.max(0)
    proj = (proj - lo) / (hi - lo)
    out, start = [], 0
    for a in arrs:
        h, w = a.shape[1:]
        out.append(proj[start:start + h * w].T.reshape(3, h, w))
        start += h * w
    return out


def save_png(rgb: np.ndarray, path, upscale: int = 1) -> None:
    """Write a ``(3, H, W)`` array in ``[0, 1]`` as a lossless PNG (nearest-neighbour upscaled)."""
    from PIL import Image

    arr = np.clip(np.asarray(rgb).transpose(1, 2, 0), 0, 1)
    if upscale > 1:
        arr = arr.repeat(upscale, 0).repeat(upscale, 1)
    Image.fromarray((arr * 255).round().astype(np.uint8)).save(path, format="PNG")
