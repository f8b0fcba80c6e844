"""Run orchestration: training loop, checkpoints, metrics CSV and the final report."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import platform
import time
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from ..ae_core import Autoencoder, AutoencoderConfig, ConfigError, PatchDiscriminator
from ..features import FeatureNet, load_feature_net, save_feature_net, train_feature_net
from ..objectives import (
    LossBreakdown,
    explicit_training_step,
    total_training_step,
    vae_step_loss,
)
from ..probes import NumericalStabilityError
from .config import ExperimentConfig, config_from_dict
from .data import DatasetHandle, ingest_dataset
from .evaluate import full_report

logger = logging.getLogger(__name__)

CKPT_FORMAT = "eqvae-ckpt-v1"
METRIC_FIELDS = [
    "step", "epoch", "rec_pixel", "rec_perceptual", "gan_g", "gan_d", "reg",
    "explicit_eq", "total", "n_identity", "wall_time", "rng_fingerprint",
]


def feature_net_path(dataset_path) -> Path:
    p = Path(dataset_path)
    return p / "feature_net.pt" if p.is_dir() else p.with_suffix(".feature_net.pt")


def get_feature_net(cfg: ExperimentConfig, data: DatasetHandle) -> FeatureNet:
    """Shared frozen feature network for a dataset; trained once and cached next to the data."""
    path = Path(cfg.feature_net) if cfg.feature_net else feature_net_path(cfg.dataset_path)
    if path.exists():
        return load_feature_net(path)
    net = train_feature_net(DatasetHandle.as_float(data.train), data.train_labels, seed=0)
    save_feature_net(net, path)
    return net


class Trainer:
    """Owns the autoencoder, discriminator, optimisers and random streams of one run."""

    def __init__(self, cfg: ExperimentConfig, feat: Optional[FeatureNet]):
        self.cfg = cfg
        torch.manual_seed(cfg.seed)
        self.model = Autoencoder(cfg.autoencoder)
        self.disc = PatchDiscriminator()
        self.feat = feat
        betas = (0.5, 0.9)
        self.opt_g = torch.optim.Adam(self.model.parameters(), lr=cfg.lr, betas=betas)
        self.opt_d = torch.optim.Adam(self.disc.parameters(), lr=cfg.disc_lr or cfg.lr, betas=betas)
        self.rng = np.random.default_rng(cfg.seed)
        self.gen = torch.Generator().manual_seed(cfg.seed)
        self.step = 0
        self.epoch = 0

    # -- state ---------------------------------------------------------------
    def state_dict(self) -> dict:
        return {
            "format": CKPT_FORMAT,
            "config": self.cfg.to_dict(),
            "config_hash": self.cfg.hash(),
            "model": self.model.state_dict(),
            "disc": self.disc.state_dict(),
            "opt_g": self.opt_g.state_dict(),
            "opt_d": self.opt_d.state_dict(),
            "np_rng": self.rng.bit_generator.state,
            "torch_gen": self.gen.get_state(),
            "torch_global": torch.get_rng_state(),
            "step": self.step,
            "epoch": self.epoch,
        }

    def load_state_dict(self, state: dict, weights_only: bool = False) -> None:
        if state.get("format") != CKPT_FORMAT:
            raise ConfigError(f"not an {CKPT_FORMAT} checkpoint")
        self.model.load_state_dict(state["model"])
        self.disc.load_state_dict(state["disc"])
        if weights_only:
            return
        self.opt_g.load_state_dict(state["opt_g"])
        self.opt_d.load_state_dict(state["opt_d"])
        self.rng.bit_generator.state = state["np_rng"]
        self.gen.set_state(state["torch_gen"])
        torch.set_rng_state(state["torch_global"])
        self.step = state["step"]
        self.epoch = state["epoch"]

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(".tmp")
        torch.save(self.state_dict(), tmp)
        tmp.replace(path)

    def rng_fingerprint(self) -> str:
        h = hashlib.sha1()
        h.update(self.gen.get_state().numpy().tobytes())
        h.update(json.dumps(self.rng.bit_generator.state, sort_keys=True, default=str).encode())
        return h.hexdigest()[:12]

    # -- optimisation --------------------------------------------------------
    def loss(self, x: torch.Tensor) -> LossBreakdown:
        cfg, m = self.cfg, self.model
        args = (m, self.disc, self.feat, cfg.weights)
        if cfg.mode == "baseline_vae":
            return vae_step_loss(x, *args, generator=self.gen, step=self.step)
        if cfg.mode == "eqvae_finetune":
            return total_training_step(x, cfg.sampler, self.rng, *args, generator=self.gen,
                                       step=self.step, use_posterior_sample=cfg.use_posterior_sample)
        return explicit_training_step(x, cfg.sampler, self.rng, *args, generator=self.gen,
                                      step=self.step, stop_gradient=cfg.mode == "explicit_sg_ablation")

    def train_step(self, x: torch.Tensor) -> LossBreakdown:
        self.model.train()
        self.disc.train()
        b = self.loss(x)
        if not torch.isfinite(b.total):
            raise NumericalStabilityError(f"non-finite loss at step {self.step}")
        self.opt_g.zero_grad(set_to_none=True)
        b.total.backward()
        self.opt_g.step()
        if b.d_loss is not None:
            self.opt_d.zero_grad(set_to_none=True)
            b.d_loss.backward()
            self.opt_d.step()
        self.step += 1
        return b

    @torch.no_grad()
    def reseed_codebook(self, train: torch.Tensor, n_images: int = 256) -> int:
        if not self.model.discrete:
            return 0
        idx = torch.randint(len(train), (min(n_images, len(train)),), generator=self.gen)
        self.model.eval()
        z = self.model.encode_mean(DatasetHandle.as_float(train[idx]))
        pool = z.movedim(1, -1).reshape(-1, z.shape[1])
        return self.model.quantizer.reseed_dead(pool, self.gen)


def epoch_permutation(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def _latest_checkpoint(ckpt_dir: Path) -> Optional[Path]:
    ckpts = sorted(ckpt_dir.glob("epoch_*.pt"))
    return ckpts[-1] if ckpts else None


def _manifest() -> dict:
    return {
        "torch": torch.__version__,
        "numpy": np.__version__,
        "python": platform.python_version(),
        "machine": platform.machine(),
        "num_threads": torch.get_num_threads(),
        "float_mode": "float32 training, float64 metrics; CPU deterministic kernels",
        "note": "wall_time is excluded from reproducibility comparisons",
    }


def run_experiment(cfg: ExperimentConfig, data: Optional[DatasetHandle] = None, evaluate: bool = True) -> Path:
    """Train per ``cfg.mode`` and write the run directory.

    Layout: ``config.echo``, ``manifest.json``, ``ckpt/epoch_%04d.pt``,
    ``metrics.csv`` (one row per step), ``report.json`` and ``viz/``.
    Resuming from a checkpoint whose config hash differs is refused.
    """
    cfg.validate()
    run_dir = Path(cfg.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    if data is None:
        data = ingest_dataset(cfg.dataset_path, cfg.image_size, cfg.split_seed)
    feat = get_feature_net(cfg, data)
    trainer = Trainer(cfg, feat)

    start_epoch = 0
    if cfg.resume:
        state = torch.load(cfg.resume, weights_only=False)
        if state.get("config_hash") != cfg.hash():
            raise ConfigError(
                f"refusing to resume: checkpoint config hash {state.get('config_hash')} != {cfg.hash()}"
            )
        trainer.load_state_dict(state)
        start_epoch = trainer.epoch
    elif cfg.init_checkpoint:
        state = torch.load(cfg.init_checkpoint, weights_only=False)
        init_cfg = config_from_dict(state["config"])
        if init_cfg.autoencoder != cfg.autoencoder:
            raise ConfigError("init checkpoint autoencoder config differs from this run")
        trainer.load_state_dict(state, weights_only=True)

    cfg.dump(run_dir / "config.echo")
    (run_dir / "manifest.json").write_text(json.dumps({**_manifest(), "config_hash": cfg.hash()}, indent=2))
    metrics_path = run_dir / "metrics.csv"
    mode = "a" if cfg.resume and metrics_path.exists() else "w"
    train = data.train
    n = len(train)
    t0 = time.time()
    with open(metrics_path, mode, newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRIC_FIELDS)
        if mode == "w":
            writer.writeheader()
        for epoch in range(start_epoch, cfg.epochs):
            perm = epoch_permutation(cfg.seed, epoch, n)
            for i in range(0, n - cfg.batch_size + 1, cfg.batch_size):
                if cfg.max_steps is not None and trainer.step >= cfg.max_steps:
                    break
                fp = trainer.rng_fingerprint()
                x = DatasetHandle.as_float(train[perm[i:i + cfg.batch_size]])
                b = trainer.train_step(x)
                writer.writerow({"step": trainer.step, "epoch": epoch, **b.as_row(),
                                 "wall_time": round(time.time() - t0, 3), "rng_fingerprint": fp})
                if trainer.step % 100 == 0:
                    logger.info("epoch %d step %d total %.4f", epoch, trainer.step, float(b.total))
            fh.flush()
            reseeded = trainer.reseed_codebook(train)
            if reseeded:
                logger.info("re-seeded %d dead codebook entries", reseeded)
            trainer.epoch = epoch + 1
            trainer.save(run_dir / "ckpt" / f"epoch_{epoch + 1:04d}.pt")

    if evaluate:
        report = full_report(trainer.model, data, feat, run_dir, cfg.eval_samples, cfg.id_mode)
        report.update({"config_hash": cfg.hash(), "mode": cfg.mode, "seed": cfg.seed,
                       "steps": trainer.step, "epochs": trainer.epoch,
                       "train_seconds": round(time.time() - t0, 1)})
        (run_dir / "report.json").write_text(json.dumps(report, indent=2))
    return run_dir


def load_run(run_dir, checkpoint=None):
    """``(cfg, model, disc)`` restored from a run's latest (or given) checkpoint."""
    run_dir = Path(run_dir)
    ckpt = Path(checkpoint) if checkpoint else _latest_checkpoint(run_dir / "ckpt")
    if ckpt is None or not ckpt.exists():
        raise FileNotFoundError(f"no checkpoint under {run_dir / 'ckpt'}")
    state = torch.load(ckpt, weights_only=False)
    if state.get("format") != CKPT_FORMAT:
        raise ConfigError(f"{ckpt} is not an {CKPT_FORMAT} checkpoint")
    cfg = config_from_dict(state["config"])
    model = Autoencoder(cfg.autoencoder)
    model.load_state_dict(state["model"])
    disc = PatchDiscriminator()
    disc.load_state_dict(state["disc"])
    return cfg, model.eval(), disc.eval(), ckpt
