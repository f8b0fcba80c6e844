"""The desk-scale experiment grid behind the directional acceptance criteria.

Per seed: a baseline autoencoder, three fine-tunes from its final checkpoint
(implicit EQ-VAE, explicit loss, explicit loss with stop-gradient), latent
datasets and toy denoisers for baseline and EQ-VAE, and a generation score.
Finished stages are detected by their output files and skipped, so an
interrupted grid resumes where it stopped.
"""

from __future__ import annotations

import copy
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .config import ExperimentConfig
from .data import DatasetHandle, ingest_dataset
from .generation import build_latent_dataset, eval_gen, train_latentgen
from .train import _latest_checkpoint, get_feature_net, run_experiment

logger = logging.getLogger(__name__)

FINETUNE_MODES = ("eqvae_finetune", "explicit_ablation", "explicit_sg_ablation")
GEN_MODES = ("baseline_vae", "eqvae_finetune")


@dataclass
class GridConfig:
    dataset_path: str
    out_root: str = "runs/grid"
    seeds: Tuple[int, ...] = (0, 1, 2)
    baseline_epochs: int = 30
    baseline_batch_size: int = 32
    baseline_lr: float = 2e-4
    baseline_gan_warmup: int = 2000
    finetune_epochs: int = 5
    finetune_batch_size: int = 10
    finetune_lr: float = 1e-4
    denoiser_steps: int = 20_000
    denoiser_width: int = 32
    gen_samples: int = 500
    base: ExperimentConfig = field(default_factory=ExperimentConfig)


def _finished(run_dir: Path, cfg: ExperimentConfig) -> bool:
    p = run_dir / "report.json"
    if not p.exists():
        return False
    rep = json.loads(p.read_text())
    return rep.get("config_hash") == cfg.hash() and rep.get("epochs") == cfg.epochs


def stage_configs(g: GridConfig, seed: int) -> Dict[str, ExperimentConfig]:
    root = Path(g.out_root) / f"seed{seed}"
    base = copy.deepcopy(g.base)
    base.dataset_path = g.dataset_path
    base.seed = seed
    out = {}
    b = copy.deepcopy(base)
    b.mode, b.epochs, b.batch_size, b.lr = "baseline_vae", g.baseline_epochs, g.baseline_batch_size, g.baseline_lr
    b.weights.gan_warmup_steps = g.baseline_gan_warmup
    b.run_dir = str(root / "baseline_vae")
    out["baseline_vae"] = b
    for mode in FINETUNE_MODES:
        c = copy.deepcopy(base)
        c.mode, c.epochs, c.batch_size, c.lr = mode, g.finetune_epochs, g.finetune_batch_size, g.finetune_lr
        c.weights.gan_warmup_steps = 0
        c.run_dir = str(root / mode)
        out[mode] = c
    return out


def run_seed(g: GridConfig, seed: int, data: DatasetHandle) -> dict:
    cfgs = stage_configs(g, seed)
    base = cfgs["baseline_vae"]
    base_dir = Path(base.run_dir)
    if not _finished(base_dir, base):
        logger.info("seed %d: training baseline", seed)
        run_experiment(base, data)
    init = _latest_checkpoint(base_dir / "ckpt")
    reports = {"baseline_vae": json.loads((base_dir / "report.json").read_text())}
    for mode in FINETUNE_MODES:
        c = cfgs[mode]
        c.init_checkpoint = str(init)
        if not _finished(Path(c.run_dir), c):
            logger.info("seed %d: fine-tuning %s", seed, mode)
            run_experiment(c, data)
        reports[mode] = json.loads((Path(c.run_dir) / "report.json").read_text())

    feat = get_feature_net(base, data)
    gen = {}
    for mode in GEN_MODES:
        run_dir = Path(cfgs[mode].run_dir)
        gen_json = run_dir / "gen.json"
        if gen_json.exists():
            gen[mode] = json.loads(gen_json.read_text())
            continue
        t0 = time.time()
        lat = run_dir / "latents"
        if not (lat / "meta.json").exists():
            build_latent_dataset(run_dir, data, lat)
        den = run_dir / "denoiser.pt"
        if not den.exists():
            logger.info("seed %d: training denoiser on %s latents", seed, mode)
            train_latentgen(lat, den, steps=g.denoiser_steps, seed=seed, width=g.denoiser_width)
        res = eval_gen(den, run_dir, feat, data, n=g.gen_samples, seed=seed)
        res["stage_seconds"] = round(time.time() - t0, 1)
        gen_json.write_text(json.dumps(res, indent=2))
        gen[mode] = res
    return {"reports": reports, "gen": gen}


def compute_seconds(summary: dict) -> float:
    """Summed stage times of every run in the grid, robust to resumed invocations."""
    total = 0.0
    for s in summary["seeds"].values():
        total += sum(float(r.get("train_seconds", 0.0)) for r in s["reports"].values())
        total += sum(float(v.get("stage_seconds", 0.0)) for v in s["gen"].values())
    return total


def run_grid(g: GridConfig, data: Optional[DatasetHandle] = None) -> dict:
    """Run (or resume) every stage for every seed and write ``summary.json``."""
    t0 = time.time()
    if data is None:
        data = ingest_dataset(g.dataset_path, g.base.image_size, g.base.split_seed)
    per_seed = {str(s): run_seed(g, s, data) for s in g.seeds}
    summary = {"grid": {k: v for k, v in asdict(g).items() if k != "base"},
               "seeds": per_seed, "wall_seconds": round(time.time() - t0, 1)}
    summary["compute_seconds"] = round(compute_seconds(summary), 1)
    summary["criteria"] = [c.to_dict() for c in evaluate_criteria(summary)]
    out = Path(g.out_root)
    out.mkdir(parents=True, exist_ok=True)
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    return summary


# -- acceptance gates -------------------------------------------------------

@dataclass
class CriterionResult:
    number: int
    name: str
    passed: bool
    detail: str

    def to_dict(self) -> dict:
        return asdict(self)

    def line(self) -> str:
        return f"criterion {self.number} [{'PASS' if self.passed else 'FAIL'}] {self.name}: {self.detail}"


def _metric(summary: dict, mode: str, *keys) -> List[float]:
    vals = []
    for s in summary["seeds"].values():
        cur = s["reports"][mode]
        for k in keys:
            cur = cur[k]
        vals.append(float(cur))
    return vals


def _rel(a: float, b: float) -> float:
    return (b - a) / abs(a)


def evaluate_criteria(summary: dict) -> List[CriterionResult]:
    """Gates for the directional criteria 4-8, computed from a grid summary (means over seeds)."""
    m = lambda mode, *k: float(np.mean(_metric(summary, mode, *k)))
    out = []

    base_rot, eq_rot = m("baseline_vae", "equivariance", "rotation_mean"), m("eqvae_finetune", "equivariance", "rotation_mean")
    base_sc, eq_sc = m("baseline_vae", "equivariance", "scale_mean"), m("eqvae_finetune", "equivariance", "scale_mean")
    base_psnr, eq_psnr = m("baseline_vae", "recon", "psnr"), m("eqvae_finetune", "recon", "psnr")
    base_fd, eq_fd = m("baseline_vae", "recon", "frechet_recon"), m("eqvae_finetune", "recon", "frechet_recon")
    r_rot, r_sc = -_rel(base_rot, eq_rot), -_rel(base_sc, eq_sc)
    d_psnr, r_fd = base_psnr - eq_psnr, _rel(base_fd, eq_fd)
    out.append(CriterionResult(
        4, "EQ-VAE fine-tune reduces equivariance error, keeps reconstruction",
        r_rot >= 0.4 and r_sc >= 0.4 and d_psnr < 0.5 and abs(r_fd) < 0.1,
        f"rotation -{100 * r_rot:.1f}%, scale -{100 * r_sc:.1f}% (need >=40%); "
        f"PSNR drop {d_psnr:.3f} dB (<0.5); Frechet change {100 * r_fd:+.1f}% (|.|<10%)",
    ))

    parts, ok = [], abs(r_fd) < 0.1
    for mode in ("explicit_ablation", "explicit_sg_ablation"):
        rot, sc = m(mode, "equivariance", "rotation_mean"), m(mode, "equivariance", "scale_mean")
        fd = m(mode, "recon", "frechet_recon")
        ratio = fd / base_fd
        ok = ok and rot < base_rot and sc < base_sc and ratio >= 3.0
        parts.append(f"{mode}: eq rot {rot:.3g}/{base_rot:.3g}, scale {sc:.3g}/{base_sc:.3g}, Frechet x{ratio:.2f} (need >=3)")
    parts.append(f"implicit Frechet change {100 * r_fd:+.1f}% (|.|<10%)")
    out.append(CriterionResult(5, "explicit loss collapses reconstruction, implicit does not", ok, "; ".join(parts)))

    ids_b = _metric(summary, "baseline_vae", "id", "id")
    ids_e = _metric(summary, "eqvae_finetune", "id", "id")
    out.append(CriterionResult(
        6, "EQ-VAE latents have lower intrinsic dimension",
        float(np.mean(ids_e)) < float(np.mean(ids_b)),
        f"mean ID {np.mean(ids_b):.3f} -> {np.mean(ids_e):.3f}; per seed "
        + ", ".join(f"{b:.3f}->{e:.3f}" for b, e in zip(ids_b, ids_e)),
    ))

    transforms = list(next(iter(summary["seeds"].values()))["reports"]["baseline_vae"]
                      ["latent_transform_probe"]["per_transform"])
    bad, parts = [], []
    for t in transforms:
        b = m("baseline_vae", "latent_transform_probe", "per_transform", t, "latent_transform")
        e = m("eqvae_finetune", "latent_transform_probe", "per_transform", t, "latent_transform")
        parts.append(f"{t} {b:.3g}->{e:.3g}")
        if not e < b:
            bad.append(t)
    out.append(CriterionResult(
        7, "latent-transform reconstruction proxy lower at every transform", not bad,
        "; ".join(parts) + (f"; not lower at {bad}" if bad else ""),
    ))

    per_seed = []
    for s, v in summary["seeds"].items():
        gb, ge = v["gen"]["baseline_vae"]["frechet_gen"], v["gen"]["eqvae_finetune"]["frechet_gen"]
        per_seed.append((s, gb, ge, v["gen"]["baseline_vae"]["noise_floor"]))
    wins = sum(ge <= gb for _, gb, ge, _ in per_seed)
    out.append(CriterionResult(
        8, "generation proxy on EQ-VAE latents <= baseline in >=2 of 3 seeds", wins >= 2,
        f"{wins}/{len(per_seed)} seeds; " + ", ".join(
            f"seed {s}: {gb:.4g} vs {ge:.4g} (floor {fl:.3g})" for s, gb, ge, fl in per_seed),
    ))
    return out
