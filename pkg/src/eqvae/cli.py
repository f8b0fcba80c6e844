"""Command-line entry point: ``eqvae <subcommand> ...``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical-stability error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional, Sequence

from .ae_core import ConfigError, ShapeError
from .latentgen import LatentDataset
from .probes import DegenerateInputError, NumericalStabilityError
from .transform2d import TransformDomainError

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

logger = logging.getLogger("eqvae")


def _print(obj) -> None:
    print(json.dumps(obj, indent=2))


def _write(obj, out: Optional[str]) -> None:
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(json.dumps(obj, indent=2))
    _print(obj)


def _file_keys(path) -> set:
    if not path:
        return set()
    import yaml

    try:
        return set(yaml.safe_load(Path(path).read_text()) or {})
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc


def _train(args, overrides: List[str], default_mode: str) -> int:
    from .harness.config import load_config
    from .harness.train import run_experiment

    extra = []
    if args.init:
        extra += ["--init_checkpoint", args.init]
    cfg = load_config(args.config, overrides + extra)
    if "mode" not in _file_keys(args.config) and not any(o.lstrip("-").startswith("mode") for o in overrides):
        cfg.mode = default_mode
    run_dir = run_experiment(cfg, evaluate=not args.no_eval)
    print(run_dir)
    return EXIT_OK


def _load(run_dir, checkpoint=None):
    from .harness.data import ingest_dataset
    from .harness.train import load_run

    cfg, model, _, _ = load_run(run_dir, checkpoint)
    data = ingest_dataset(cfg.dataset_path, cfg.image_size, cfg.split_seed)
    return cfg, model, data


def _val(cfg, data, n=None):
    from .harness.data import DatasetHandle
    from .harness.evaluate import eval_subset

    return eval_subset(DatasetHandle.as_float(data.val), n if n is not None else cfg.eval_samples)


def cmd_gen_data(args, _):
    from .harness.data import generate_shapes_corpus

    print(generate_shapes_corpus(args.out, n=args.n, size=args.size, seed=args.seed, packed=args.packed))
    return EXIT_OK


def cmd_train_ae(args, overrides):
    return _train(args, overrides, "baseline_vae")


def cmd_finetune(args, overrides):
    if not args.init and not any(o.startswith("--init_checkpoint") or o.startswith("--init-checkpoint")
                                 for o in overrides):
        raise ConfigError("finetune-eqvae needs --init <checkpoint>")
    return _train(args, overrides, "eqvae_finetune")


def cmd_eval_recon(args, _):
    from .harness.evaluate import eval_recon
    from .harness.train import get_feature_net

    cfg, model, data = _load(args.run_dir, args.checkpoint)
    _write(eval_recon(model, _val(cfg, data, args.n), get_feature_net(cfg, data)), args.out)
    return EXIT_OK


def cmd_eval_equivariance(args, _):
    from .harness.evaluate import eval_equivariance

    cfg, model, data = _load(args.run_dir, args.checkpoint)
    _write(eval_equivariance(model, _val(cfg, data, args.n)), args.out)
    return EXIT_OK


def cmd_estimate_id(args, _):
    from .harness.evaluate import eval_id

    cfg, model, data = _load(args.run_dir, args.checkpoint)
    _write(eval_id(model, _val(cfg, data, args.n), args.id_mode or cfg.id_mode), args.out)
    return EXIT_OK


def cmd_visualize_pca(args, _):
    from .harness.evaluate import visualize_pca

    cfg, model, data = _load(args.run_dir, args.checkpoint)
    out = args.out_dir or str(Path(args.run_dir) / "viz")
    _print(visualize_pca(model, _val(cfg, data), out, n=args.n))
    return EXIT_OK


def cmd_probe(args, _):
    from .harness.evaluate import probe_latent_transforms
    from .harness.train import get_feature_net

    cfg, model, data = _load(args.run_dir, args.checkpoint)
    _write(probe_latent_transforms(model, _val(cfg, data, args.n), get_feature_net(cfg, data)), args.out)
    return EXIT_OK


def cmd_build_latents(args, _):
    from .harness.data import ingest_dataset
    from .harness.generation import build_latent_dataset
    from .harness.train import load_run

    cfg, _, _, _ = load_run(args.run_dir, args.checkpoint)
    data = ingest_dataset(cfg.dataset_path, cfg.image_size, cfg.split_seed)
    out = build_latent_dataset(args.run_dir, data, args.out, args.checkpoint)
    ds = LatentDataset.load(out)
    _print({"path": str(out), "n": len(ds.latents), "scale_factor": ds.scale_factor,
            "channel_std": ds.channel_std().tolist()})
    return EXIT_OK


def cmd_train_latentgen(args, _):
    from .harness.generation import train_latentgen

    print(train_latentgen(args.latents, args.out, steps=args.steps, seed=args.seed,
                          batch_size=args.batch_size, lr=args.lr, width=args.width))
    return EXIT_OK


def cmd_eval_gen(args, _):
    from .harness.generation import eval_gen
    from .harness.train import get_feature_net

    cfg, _, data = _load(args.run_dir)
    _write(eval_gen(args.denoiser, args.run_dir, get_feature_net(cfg, data), data,
                    n=args.n, seed=args.seed), args.out)
    return EXIT_OK


def cmd_compare(args, _):
    from .harness.compare import compare_runs

    cmp = compare_runs(args.run_a, args.run_b, args.out_dir)
    _print(cmp["metrics"])
    return EXIT_OK


def cmd_grid(args, overrides):
    from .harness.config import load_config
    from .harness.grid import GridConfig, run_grid

    base = load_config(args.config, overrides + ["--dataset_path", args.dataset])
    g = GridConfig(
        dataset_path=args.dataset, out_root=args.out_root,
        seeds=tuple(int(s) for s in args.seeds.split(",")),
        baseline_epochs=args.baseline_epochs, finetune_epochs=args.finetune_epochs,
        denoiser_steps=args.denoiser_steps, denoiser_width=args.denoiser_width, gen_samples=args.gen_samples, base=base,
    )
    summary = run_grid(g)
    for c in summary["criteria"]:
        print(f"criterion {c['number']} [{'PASS' if c['passed'] else 'FAIL'}] {c['name']}: {c['detail']}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="eqvae", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-data", help="write the synthetic shapes corpus")
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int, default=5600)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--packed", action="store_true", help="single .npz instead of PNG files")
    s.set_defaults(fn=cmd_gen_data, overrides=False)

    for name, fn, help_ in (("train-ae", cmd_train_ae, "train an autoencoder (default mode baseline_vae)"),
                            ("finetune-eqvae", cmd_finetune, "fine-tune from a checkpoint (default mode eqvae_finetune)")):
        s = sub.add_parser(name, help=help_ + "; any config field can be set with --key value")
        s.add_argument("--config", help="YAML config file")
        s.add_argument("--init", help="initial weights checkpoint")
        s.add_argument("--no-eval", action="store_true", help="skip the final report")
        s.set_defaults(fn=fn, overrides=True)

    def run_cmd(name, fn, help_, out=True, n=True):
        s = sub.add_parser(name, help=help_)
        s.add_argument("run_dir")
        s.add_argument("--checkpoint")
        if out:
            s.add_argument("--out", help="also write the JSON result here")
        if n:
            s.add_argument("--n", type=int, help="number of validation images")
        s.set_defaults(fn=fn, overrides=False)
        return s

    run_cmd("eval-recon", cmd_eval_recon, "PSNR, SSIM and Frechet reconstruction proxy")
    run_cmd("eval-equivariance", cmd_eval_equivariance, "equivariance error over rotations and scales")
    s = run_cmd("estimate-id", cmd_estimate_id, "TwoNN intrinsic dimension of the latents")
    s.add_argument("--id-mode", choices=("per_site", "flatten"))
    s = run_cmd("visualize-pca", cmd_visualize_pca, "PCA maps of the latents as PNG", out=False, n=False)
    s.add_argument("--out-dir")
    s.add_argument("--n", type=int, default=8)
    run_cmd("probe-latent-transforms", cmd_probe, "reconstruction proxy under latent-space transforms")
    s = run_cmd("build-latent-dataset", cmd_build_latents, "encode the training split", out=False, n=False)
    s.add_argument("--out")

    s = sub.add_parser("train-latentgen", help="train a toy latent denoiser")
    s.add_argument("latents")
    s.add_argument("--out", required=True)
    s.add_argument("--steps", type=int, default=20_000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--batch-size", type=int, default=64)
    s.add_argument("--lr", type=float, default=2e-4)
    s.add_argument("--width", type=int, default=32)
    s.set_defaults(fn=cmd_train_latentgen, overrides=False)

    s = sub.add_parser("eval-gen", help="sample through a run's decoder and score")
    s.add_argument("denoiser")
    s.add_argument("run_dir")
    s.add_argument("--n", type=int, default=500)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")
    s.set_defaults(fn=cmd_eval_gen, overrides=False)

    s = sub.add_parser("compare", help="side-by-side table of two runs")
    s.add_argument("run_a")
    s.add_argument("run_b")
    s.add_argument("--out-dir")
    s.set_defaults(fn=cmd_compare, overrides=False)

    s = sub.add_parser("acceptance-grid", help="run the full seed grid behind the directional criteria")
    s.add_argument("--dataset", required=True)
    s.add_argument("--out-root", default="runs/grid")
    s.add_argument("--config")
    s.add_argument("--seeds", default="0,1,2")
    s.add_argument("--baseline-epochs", type=int, default=30)
    s.add_argument("--finetune-epochs", type=int, default=5)
    s.add_argument("--denoiser-steps", type=int, default=20_000)
    s.add_argument("--denoiser-width", type=int, default=32)
    s.add_argument("--gen-samples", type=int, default=500)
    s.set_defaults(fn=cmd_grid, overrides=True)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    from .harness.compare import MissingReportError
    from .harness.data import DataError

    parser = build_parser()
    args, rest = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    if rest and not args.overrides:
        parser.error(f"unrecognized arguments: {' '.join(rest)}")
    try:
        return args.fn(args, rest)
    except (ConfigError, TransformDomainError, ShapeError) as exc:
        logger.error("configuration error: %s", exc)
        return EXIT_CONFIG
    except (DataError, DegenerateInputError, MissingReportError, FileNotFoundError) as exc:
        logger.error("data error: %s", exc)
        return EXIT_DATA
    except NumericalStabilityError as exc:
        logger.error("numerical-stability error: %s", exc)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
