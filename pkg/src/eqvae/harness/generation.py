"""Latent dataset extraction, toy denoiser training and generation scoring for a run."""

from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from ..features import FeatureNet, extract_features
from ..latentgen import (
    DenoiserConfig,
    LatentDataset,
    file_sha256,
    load_denoiser,
    sample_and_score,
    train_latent_denoiser,
)
from ..probes import frechet_from_features
from .data import DatasetHandle
from .evaluate import latent_means
from .train import load_run

logger = logging.getLogger(__name__)


def build_latent_dataset(run_dir, data: DatasetHandle, out_dir=None, checkpoint=None) -> Path:
    """Encode the training split with the run's posterior means and save them normalised."""
    _, model, _, ckpt = load_run(run_dir, checkpoint)
    z = latent_means(model, DatasetHandle.as_float(data.train))
    ds = LatentDataset.from_raw(z, source_checkpoint=f"{ckpt}:{file_sha256(ckpt)[:16]}")
    out = Path(out_dir) if out_dir else Path(run_dir) / "latents"
    ds.save(out)
    return out


def train_latentgen(latent_dir, out_path, steps: int = 20_000, seed: int = 0, **overrides) -> Path:
    ds = LatentDataset.load(latent_dir)
    _, c, h, _ = ds.latents.shape
    cfg = DenoiserConfig(latent_channels=c, latent_size=h, steps=steps, seed=seed, **overrides)

    def log(step, loss):
        if (step + 1) % 1000 == 0:
            logger.info("denoiser step %d loss %.4f", step + 1, loss)

    ckpt = train_latent_denoiser(ds, cfg, log)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(ckpt, out_path)
    return out_path


def real_noise_floor(feat: FeatureNet, data: DatasetHandle, seed: int = 0) -> float:
    """Frechet proxy between two random halves of the validation split."""
    fv = extract_features(feat, DatasetHandle.as_float(data.val))
    perm = np.random.default_rng(seed).permutation(len(fv))
    half = len(fv) // 2
    return frechet_from_features(fv[perm[:half]], fv[perm[half:2 * half]])


def eval_gen(denoiser_path, run_dir, feat: FeatureNet, data: DatasetHandle,
             n: int = 500, seed: int = 0, out_json=None) -> dict:
    """Sample ``n`` images through the run's decoder and score them against validation features."""
    ckpt = torch.load(denoiser_path, weights_only=False)
    den = load_denoiser(ckpt)
    _, model, _, _ = load_run(run_dir)
    cfg = den.cfg
    ref = extract_features(feat, DatasetHandle.as_float(data.val))
    gen = torch.Generator().manual_seed(seed)

    @torch.no_grad()
    def decoder(z):
        if model.discrete:
            z = model.quantize(z).quantized
        return model.decode(z)

    _, score = sample_and_score(
        den, decoder, n, gen, lambda im: extract_features(feat, im), ref,
        ckpt["scale_factor"], (cfg.latent_channels, cfg.latent_size, cfg.latent_size),
    )
    result = {
        "frechet_gen": score,
        "n": n,
        "seed": seed,
        "noise_floor": real_noise_floor(feat, data, seed),
        "denoiser": str(denoiser_path),
        "final_train_loss": float(np.mean(ckpt["losses"][-500:])),
    }
    if out_json:
        Path(out_json).write_text(json.dumps(result, indent=2))
    return result
