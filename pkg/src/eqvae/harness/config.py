"""Experiment configuration: YAML documents with ``--dotted.key value`` overrides."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import yaml

from ..ae_core import AutoencoderConfig, ConfigError
from ..objectives import LossWeights
from ..transform2d import TransformDomainError, TransformSamplerConfig

MODES = ("baseline_vae", "eqvae_finetune", "explicit_ablation", "explicit_sg_ablation")

# not part of the identity of a run: where it lives, how to restart it, how long it goes
_HASH_EXCLUDE = ("run_dir", "resume", "epochs")


@dataclass
class ExperimentConfig:
    dataset_path: str = ""
    image_size: int = 64
    autoencoder: AutoencoderConfig = field(default_factory=lambda: AutoencoderConfig(base_width=16))
    sampler: TransformSamplerConfig = field(default_factory=TransformSamplerConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    epochs: int = 5
    batch_size: int = 10
    lr: float = 1e-4
    disc_lr: Optional[float] = None
    seed: int = 0
    split_seed: int = 0
    mode: str = "baseline_vae"
    init_checkpoint: Optional[str] = None
    resume: Optional[str] = None
    run_dir: str = "runs/default"
    use_posterior_sample: bool = True
    eval_samples: Optional[int] = None
    id_mode: str = "per_site"
    feature_net: Optional[str] = None
    max_steps: Optional[int] = None

    def validate(self, check_paths: bool = True) -> "ExperimentConfig":
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.image_size != self.autoencoder.image_size:
            raise ConfigError(
                f"image_size {self.image_size} != autoencoder.image_size {self.autoencoder.image_size}"
            )
        if self.epochs < 0 or self.batch_size < 1 or not self.lr > 0:
            raise ConfigError("epochs >= 0, batch_size >= 1 and lr > 0 required")
        if self.id_mode not in ("per_site", "flatten"):
            raise ConfigError(f"unknown id_mode {self.id_mode!r}")
        if self.mode != "baseline_vae" and self.mode.startswith("explicit") and self.autoencoder.latent_mode != "continuous":
            raise ConfigError("explicit ablations need a continuous autoencoder")
        if check_paths:
            for name in ("dataset_path", "init_checkpoint", "resume", "feature_net"):
                p = getattr(self, name)
                if name == "dataset_path" and not p:
                    raise ConfigError("dataset_path is required")
                if p and not Path(p).exists():
                    raise ConfigError(f"{name} does not exist: {p}")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        d = self.to_dict()
        for k in _HASH_EXCLUDE:
            d.pop(k, None)
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    def dump(self, path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))


_NESTED = {
    "autoencoder": AutoencoderConfig,
    "sampler": TransformSamplerConfig,
    "weights": LossWeights,
}


def config_from_dict(d: dict) -> ExperimentConfig:
    d = dict(d)
    known = {f.name for f in dataclasses.fields(ExperimentConfig)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    try:
        for key, cls in _NESTED.items():
            if key in d and isinstance(d[key], dict):
                sub_known = {f.name for f in dataclasses.fields(cls)}
                bad = set(d[key]) - sub_known
                if bad:
                    raise ConfigError(f"unknown keys under {key}: {sorted(bad)}")
                d[key] = cls(**d[key])
        return ExperimentConfig(**d)
    except (TypeError, TransformDomainError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc


def load_config(path=None, overrides: Sequence[str] = ()) -> ExperimentConfig:
    d = {}
    if path:
        try:
            d = yaml.safe_load(Path(path).read_text()) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
    for key, value in parse_overrides(overrides):
        set_dotted(d, key, value)
    return config_from_dict(d)


def parse_overrides(args: Sequence[str]) -> List[tuple]:
    """``['--a.b', '3', '--c=x']`` -> ``[('a.b', 3), ('c', 'x')]``; values parsed as YAML scalars."""
    out = []
    args = list(args)
    i = 0
    while i < len(args):
        tok = args[i]
        if not tok.startswith("--"):
            raise ConfigError(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, raw = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(args):
                raise ConfigError(f"missing value for {tok}")
            raw = args[i + 1]
            i += 2
        out.append((key.replace("-", "_"), _scalar(raw)))
    return out


def _scalar(raw: str):
    value = yaml.safe_load(raw)
    if isinstance(value, str):
        # YAML 1.1 reads "3e-4" as a string
        try:
            return float(value)
        except ValueError:
            pass
    return value


def set_dotted(d: dict, key: str, value) -> None:
    parts = key.split(".")
    for p in parts[:-1]:
        d = d.setdefault(p, {})
        if not isinstance(d, dict):
            raise ConfigError(f"cannot set {key}: {p} is not a mapping")
    d[parts[-1]] = value
