"""Evaluation of a trained autoencoder: reconstruction, equivariance, ID, PCA maps,
and reconstruction under latent-space transforms."""

from __future__ import annotations

import logging
from pathlib import Path
from typing import Dict, Optional, Sequence

import numpy as np
import torch

from ..ae_core import Autoencoder
from ..features import FeatureNet, extract_features
from ..probes import (
    equivariance_error,
    frechet_from_features,
    latent_points,
    pca_latent_visualization,
    psnr,
    save_png,
    ssim,
    twonn_intrinsic_dimension,
)
from ..transform2d import ROTATION_SET, SCALE_SET, Transform2D, apply_transform
from .data import DatasetHandle

logger = logging.getLogger(__name__)

PROBE_TRANSFORMS = SCALE_SET + ROTATION_SET


def _batched(fn, x: torch.Tensor, batch_size: int = 100) -> torch.Tensor:
    return torch.cat([fn(x[i:i + batch_size]) for i in range(0, len(x), batch_size)])


@torch.no_grad()
def reconstruct(model: Autoencoder, images: torch.Tensor) -> torch.Tensor:
    model.eval()
    return _batched(model.reconstruct, images)


@torch.no_grad()
def latent_means(model: Autoencoder, images: torch.Tensor) -> torch.Tensor:
    model.eval()
    return _batched(model.encode_mean, images)


@torch.no_grad()
def decode_transformed(model: Autoencoder, z: torch.Tensor, tau: Transform2D) -> torch.Tensor:
    """``D(tau o z)``, quantizing after the transform for discrete models."""
    def run(zb):
        zt = apply_transform(zb, tau)
        if model.discrete:
            zt = model.quantize(zt).quantized
        return model.decode(zt)
    return _batched(run, z)


def eval_recon(model: Autoencoder, val: torch.Tensor, feat: FeatureNet) -> dict:
    rec = reconstruct(model, val)
    return {
        "psnr": psnr(val, rec),
        "ssim": ssim(val, rec),
        "frechet_recon": frechet_from_features(extract_features(feat, rec), extract_features(feat, val)),
        "n": len(val),
    }


def eval_equivariance(model: Autoencoder, val: torch.Tensor) -> dict:
    model.eval()
    rep = equivariance_error(model.encode_mean, val, ROTATION_SET + SCALE_SET)
    return rep.to_dict()


def eval_id(model: Autoencoder, val: torch.Tensor, mode: str = "per_site", seed: int = 0) -> dict:
    z = latent_means(model, val).numpy()
    est = twonn_intrinsic_dimension(latent_points(z, mode, seed=seed))
    return {"mode": mode, **est.to_dict()}


def probe_latent_transforms(
    model: Autoencoder, val: torch.Tensor, feat: FeatureNet,
    transforms: Sequence[Transform2D] = PROBE_TRANSFORMS,
) -> dict:
    """Frechet proxy between ``tau o x`` and ``D(tau o E(x))`` per transform.

    Also reports ``D(E(tau o x))`` for contrast and the mean over rotations.
    """
    z = latent_means(model, val)
    f = val.shape[-1] // z.shape[-1]
    out: Dict[str, dict] = {}
    for tau in transforms:
        zt_shape = apply_transform(z[:1], tau).shape[-2:]
        x_tau = apply_transform(val, tau, size=(f * zt_shape[0], f * zt_shape[1]))
        ref = extract_features(feat, x_tau)
        latent_side = decode_transformed(model, z, tau)
        input_side = reconstruct(model, x_tau)
        out[tau.describe()] = {
            "latent_transform": frechet_from_features(extract_features(feat, latent_side), ref),
            "input_transform": frechet_from_features(extract_features(feat, input_side), ref),
        }
    rot = [out[t.describe()]["latent_transform"] for t in transforms if t.kind == "rotation"]
    return {"per_transform": out, "rotation_mean": float(np.mean(rot)) if rot else float("nan")}


def visualize_pca(model: Autoencoder, val: torch.Tensor, out_dir, n: int = 8) -> list:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    z = latent_means(model, val[:n]).numpy()
    maps = pca_latent_visualization(list(z))
    paths = []
    for i, m in enumerate(maps):
        p = out_dir / f"pca_{i:02d}.png"
        save_png(m, p, upscale=8)
        save_png(((val[i] + 1) / 2).numpy(), out_dir / f"input_{i:02d}.png")
        paths.append(str(p))
    return paths


def eval_subset(val: torch.Tensor, n: Optional[int]) -> torch.Tensor:
    return val if n is None else val[:n]


def full_report(model: Autoencoder, data: DatasetHandle, feat: FeatureNet, run_dir=None,
                eval_samples: Optional[int] = None, id_mode: str = "per_site") -> dict:
    val = eval_subset(DatasetHandle.as_float(data.val), eval_samples)
    report = {
        "recon": eval_recon(model, val, feat),
        "equivariance": eval_equivariance(model, val),
        "id": eval_id(model, val, id_mode),
        "id_flatten": None,
        "latent_transform_probe": probe_latent_transforms(model, val, feat),
    }
    try:
        report["id_flatten"] = eval_id(model, val, "flatten")
    except ValueError as exc:
        logger.warning("flattened ID skipped: %s", exc)
    if run_dir is not None:
        try:
            report["pca_maps"] = visualize_pca(model, val, Path(run_dir) / "viz")
        except ValueError as exc:
            logger.warning("PCA visualisation skipped: %s", exc)
    return report
