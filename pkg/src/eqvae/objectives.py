"""Training losses: the standard autoencoder objective, the explicit
equivariance penalty, the transformed-reconstruction (EQ-VAE) objective and
the identity-gated batch step that mixes the two.

Shapes follow torch conventions, ``(N, C, H, W)``. Step functions return a
:class:`LossBreakdown` whose ``total`` is the differentiable scalar to
minimise for the autoencoder; the discriminator term is kept separately in
``d_loss`` so the caller can alternate updates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from .ae_core import Autoencoder, GaussianPosterior, ShapeError, reparameterize
from .features import FeatureNet
from .transform2d import (
    IDENTITY,
    Transform2D,
    TransformSamplerConfig,
    apply_transform,
    output_shape,
    sample_nonidentity,
)

__all__ = [
    "LossWeights",
    "LossBreakdown",
    "reconstruction_loss",
    "kl_regularizer",
    "adversarial_losses",
    "explicit_equivariance_loss",
    "vae_step_loss",
    "eqvae_step_loss",
    "total_training_step",
    "explicit_training_step",
]


@dataclass
class LossWeights:
    lambda_gan: float = 0.1
    # None resolves to 1e-6 (KL) or 1.0 (VQ) by latent mode
    lambda_reg: Optional[float] = None
    lambda_explicit: float = 0.1
    perceptual_weight: float = 1.0
    gan_warmup_steps: int = 0

    def __post_init__(self):
        for name in ("lambda_gan", "lambda_explicit", "perceptual_weight", "lambda_reg"):
            v = getattr(self, name)
            if v is not None and not (math.isfinite(v) and v >= 0):
                raise ValueError(f"{name}={v} must be finite and >= 0")
        if self.gan_warmup_steps < 0:
            raise ValueError("gan_warmup_steps must be >= 0")

    def gan_weight(self, step: int) -> float:
        return 0.0 if step < self.gan_warmup_steps else self.lambda_gan

    def reg_weight(self, discrete: bool) -> float:
        if self.lambda_reg is not None:
            return self.lambda_reg
        return 1.0 if discrete else 1e-6


@dataclass
class LossBreakdown:
    rec_pixel: float
    rec_perceptual: float
    gan_g: float
    gan_d: float
    reg: float
    explicit_eq: float
    total: torch.Tensor
    tau_used: Tuple[Transform2D, ...]
    was_identity: Tuple[bool, ...]
    # effective weights, for the weighted-sum invariant
    w_perceptual: float = 1.0
    w_gan: float = 0.0
    w_reg: float = 0.0
    w_explicit: float = 0.0
    d_loss: Optional[torch.Tensor] = field(default=None, repr=False)
    diagnostics: dict = field(default_factory=dict, repr=False)

    def weighted_sum(self) -> float:
        return (
            self.rec_pixel
            + self.w_perceptual * self.rec_perceptual
            + self.w_gan * self.gan_g
            + self.w_reg * self.reg
            + self.w_explicit * self.explicit_eq
        )

    def as_row(self) -> dict:
        return {
            "rec_pixel": self.rec_pixel,
            "rec_perceptual": self.rec_perceptual,
            "gan_g": self.gan_g,
            "gan_d": self.gan_d,
            "reg": self.reg,
            "explicit_eq": self.explicit_eq,
            "total": _scalar(self.total),
            "n_identity": sum(self.was_identity),
        }


def reconstruction_loss(
    x_hat: torch.Tensor, x_target: torch.Tensor, feat: Optional[FeatureNet], w: LossWeights
) -> torch.Tensor:
    """Mean absolute pixel error plus ``perceptual_weight`` times the feature-map MSE."""
    return _rec_terms(x_hat, x_target, feat, w)[2]


def _rec_terms(x_hat, x_target, feat, w):
    if x_hat.shape != x_target.shape:
        raise ShapeError(f"reconstruction {tuple(x_hat.shape)} vs target {tuple(x_target.shape)}")
    pixel = (x_hat - x_target).abs().mean()
    if w.perceptual_weight > 0 and feat is not None:
        perc = feat.perceptual_distance(x_hat, x_target)
    else:
        perc = torch.zeros((), dtype=x_hat.dtype)
    return pixel, perc, pixel + w.perceptual_weight * perc


def kl_regularizer(post: GaussianPosterior) -> torch.Tensor:
    """Elementwise-mean ``KL(q || N(0, I))``."""
    # expm1 keeps exp(lv) - 1 - lv >= 0 for tiny lv
    return 0.5 * (post.mean.pow(2) + (torch.expm1(post.logvar) - post.logvar).clamp_min(0)).mean()


def adversarial_losses(x_hat: torch.Tensor, x_real: torch.Tensor, disc) -> Tuple[torch.Tensor, torch.Tensor]:
    """Hinge losses ``(g_loss, d_loss)``.

    ``d_loss`` sees ``x_hat`` detached, so it only trains the discriminator.
    """
    g_loss = -disc(x_hat).mean()
    d_loss = F.relu(1.0 - disc(x_real)).mean() + F.relu(1.0 + disc(x_hat.detach())).mean()
    return g_loss, d_loss


def _pixel_target(x: torch.Tensor, tau: Transform2D, latent_hw: Sequence[int], f_hw: Sequence[int]) -> torch.Tensor:
    # pin the pixel-space target to f x (transformed latent dims)
    return apply_transform(x, tau, size=(f_hw[0] * latent_hw[0], f_hw[1] * latent_hw[1]))


def _ratio(x: torch.Tensor, z: torch.Tensor) -> Tuple[int, int]:
    return x.shape[-2] // z.shape[-2], x.shape[-1] // z.shape[-1]


def explicit_equivariance_loss(
    x: torch.Tensor,
    tau: Transform2D,
    encoder: Callable[[torch.Tensor], torch.Tensor],
    stop_gradient: bool = False,
    z: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """Squared L2 distance ``||tau o E(x) - E(tau o x)||^2`` per sample, averaged over the batch.

    Args:
        x: images ``(N, 3, H, W)``.
        tau: transform applied to both paths.
        encoder: maps images to deterministic latents (posterior means).
        stop_gradient: block gradients through the ``E(tau o x)`` branch.
        z: precomputed ``encoder(x)``, reused when given.
    """
    if z is None:
        z = encoder(x)
    z_tau = apply_transform(z, tau)
    x_tau = _pixel_target(x, tau, z_tau.shape[-2:], _ratio(x, z))
    z_of_tx = encoder(x_tau)
    if stop_gradient:
        z_of_tx = z_of_tx.detach()
    return (z_tau - z_of_tx).pow(2).flatten(1).sum(1).mean()


def _scalar(t) -> float:
    return float(t.detach()) if torch.is_tensor(t) else float(t)


def vae_step_loss(
    x: torch.Tensor,
    model: Autoencoder,
    disc,
    feat: Optional[FeatureNet],
    w: LossWeights,
    generator: Optional[torch.Generator] = None,
    step: int = 0,
) -> LossBreakdown:
    """Reconstruction + adversarial + regulariser on the untransformed image."""
    enc = model.encode(x)
    if model.discrete:
        q = model.quantize(enc)
        z_dec = q.quantized
        reg = q.codebook_loss + model.quantizer.beta * q.commitment_loss
    else:
        z_dec = reparameterize(enc, generator)
        reg = kl_regularizer(enc)
    x_hat = model.decode(z_dec)
    pixel, perc, rec = _rec_terms(x_hat, x, feat, w)
    w_gan = w.gan_weight(step)
    w_reg = w.reg_weight(model.discrete)
    total = rec + w_reg * reg
    g = d = torch.zeros(())
    d_loss = None
    if w_gan > 0:
        g, d_loss = adversarial_losses(x_hat, x, disc)
        d = d_loss
        total = total + w_gan * g
    n = len(x)
    return LossBreakdown(
        rec_pixel=_scalar(pixel), rec_perceptual=_scalar(perc), gan_g=_scalar(g), gan_d=_scalar(d),
        reg=_scalar(reg), explicit_eq=0.0, total=total,
        tau_used=(IDENTITY,) * n, was_identity=(True,) * n,
        w_perceptual=w.perceptual_weight, w_gan=w_gan, w_reg=w_reg,
        d_loss=d_loss,
    )


def _encode_for_training(model: Autoencoder, x, generator, use_posterior_sample: bool):
    enc = model.encode(x)
    if model.discrete:
        return enc, None
    z = reparameterize(enc, generator) if use_posterior_sample else enc.mean
    return z, enc


def _eqvae_terms(x, z, post, tau, model, disc, feat, w, step):
    """Terms of the transformed objective given already-encoded ``z`` (sample or features)."""
    z_tau = apply_transform(z, tau)
    x_tau = _pixel_target(x, tau, z_tau.shape[-2:], _ratio(x, z))
    diag = {}
    if model.discrete:
        # transform before quantization
        q = model.quantize(z_tau)
        z_dec = q.quantized
        reg = q.codebook_loss + model.quantizer.beta * q.commitment_loss
        diag["indices"] = q.indices
        diag["quantized_after_transform"] = True
    else:
        z_dec = z_tau
        reg = kl_regularizer(post)
    x_hat = model.decode(z_dec)
    pixel, perc, rec = _rec_terms(x_hat, x_tau, feat, w)
    w_gan = w.gan_weight(step)
    w_reg = w.reg_weight(model.discrete)
    total = rec + w_reg * reg
    g = d_loss = None
    if w_gan > 0:
        g, d_loss = adversarial_losses(x_hat, x_tau, disc)
        total = total + w_gan * g
    return dict(pixel=pixel, perc=perc, reg=reg, g=g, d_loss=d_loss, total=total,
                w_gan=w_gan, w_reg=w_reg, diag=diag)


def _breakdown(terms, taus, n, w, explicit=None, w_explicit=0.0) -> LossBreakdown:
    g = terms["g"]
    d = terms["d_loss"]
    total = terms["total"]
    if explicit is not None:
        total = total + w_explicit * explicit
    return LossBreakdown(
        rec_pixel=_scalar(terms["pixel"]), rec_perceptual=_scalar(terms["perc"]),
        gan_g=_scalar(g) if g is not None else 0.0, gan_d=_scalar(d) if d is not None else 0.0,
        reg=_scalar(terms["reg"]), explicit_eq=_scalar(explicit) if explicit is not None else 0.0,
        total=total, tau_used=tuple(taus), was_identity=tuple(t.is_identity for t in taus),
        w_perceptual=w.perceptual_weight, w_gan=terms["w_gan"], w_reg=terms["w_reg"],
        w_explicit=w_explicit, d_loss=d, diagnostics=terms["diag"],
    )


def eqvae_step_loss(
    x: torch.Tensor,
    tau: Transform2D,
    model: Autoencoder,
    disc,
    feat: Optional[FeatureNet],
    w: LossWeights,
    generator: Optional[torch.Generator] = None,
    step: int = 0,
    use_posterior_sample: bool = True,
) -> LossBreakdown:
    """Reconstruct ``tau o x`` from ``tau o E(x)``; one ``tau`` for the whole batch.

    With ``tau`` the identity this is the standard objective, arithmetic included.
    """
    z, post = _encode_for_training(model, x, generator, use_posterior_sample)
    terms = _eqvae_terms(x, z, post, tau, model, disc, feat, w, step)
    return _breakdown(terms, [tau] * len(x), len(x), w)


def _post_slice(post: Optional[GaussianPosterior], idx) -> Optional[GaussianPosterior]:
    if post is None:
        return None
    return GaussianPosterior(post.mean[idx], post.logvar[idx])


def _combine(parts: List[Tuple[int, LossBreakdown]], taus, w) -> LossBreakdown:
    # sample-count weighted average of group breakdowns
    n = sum(k for k, _ in parts)
    avg = lambda name: sum(k * getattr(b, name) for k, b in parts) / n
    total = sum((k / n) * b.total for k, b in parts)
    d_parts = [(k, b.d_loss) for k, b in parts if b.d_loss is not None]
    d_loss = sum((k / n) * d for k, d in d_parts) if d_parts else None
    diag: dict = {}
    for _, b in parts:
        for key, val in b.diagnostics.items():
            diag.setdefault(key, []).append(val)
    first = parts[0][1]
    return LossBreakdown(
        rec_pixel=avg("rec_pixel"), rec_perceptual=avg("rec_perceptual"), gan_g=avg("gan_g"),
        gan_d=avg("gan_d"), reg=avg("reg"), explicit_eq=avg("explicit_eq"), total=total,
        tau_used=tuple(taus), was_identity=tuple(t.is_identity for t in taus),
        w_perceptual=first.w_perceptual, w_gan=first.w_gan, w_reg=first.w_reg,
        w_explicit=first.w_explicit, d_loss=d_loss, diagnostics=diag,
    )


def draw_gated_transforms(rng: np.random.Generator, cfg: TransformSamplerConfig, n: int) -> List[Transform2D]:
    """Per sample: identity if ``p < p_alpha`` (``p ~ U[0, 1)``), else a sampled transform."""
    taus = []
    for _ in range(n):
        p = rng.random()
        taus.append(IDENTITY if p < cfg.p_alpha else sample_nonidentity(rng, cfg))
    return taus


def total_training_step(
    x: torch.Tensor,
    cfg: TransformSamplerConfig,
    rng: np.random.Generator,
    model: Autoencoder,
    disc,
    feat: Optional[FeatureNet],
    w: LossWeights,
    generator: Optional[torch.Generator] = None,
    step: int = 0,
    use_posterior_sample: bool = True,
) -> LossBreakdown:
    """Gated objective over a batch, one transform draw per sample.

    The batch is encoded once. Identity samples go through the standard path
    together; each transformed sample is decoded on its own since output sizes
    differ. Group losses are averaged with weights proportional to group size.
    """
    taus = draw_gated_transforms(rng, cfg, len(x))
    z, post = _encode_for_training(model, x, generator, use_posterior_sample)
    parts = []
    ident = [i for i, t in enumerate(taus) if t.is_identity]
    if ident:
        terms = _eqvae_terms(x[ident], z[ident], _post_slice(post, ident), IDENTITY,
                             model, disc, feat, w, step)
        parts.append((len(ident), _breakdown(terms, [IDENTITY] * len(ident), len(ident), w)))
    for i, tau in enumerate(taus):
        if tau.is_identity:
            continue
        sl = slice(i, i + 1)
        terms = _eqvae_terms(x[sl], z[sl], _post_slice(post, sl), tau, model, disc, feat, w, step)
        parts.append((1, _breakdown(terms, [tau], 1, w)))
    return _combine(parts, taus, w)


def explicit_training_step(
    x: torch.Tensor,
    cfg: TransformSamplerConfig,
    rng: np.random.Generator,
    model: Autoencoder,
    disc,
    feat: Optional[FeatureNet],
    w: LossWeights,
    generator: Optional[torch.Generator] = None,
    step: int = 0,
    stop_gradient: bool = False,
) -> LossBreakdown:
    """Standard objective plus ``lambda_explicit`` times the explicit equivariance loss.

    Every sample draws a non-identity transform for the penalty; the
    reconstruction path is untransformed.
    """
    if model.discrete:
        raise ValueError("explicit ablation is defined for continuous models")
    taus = [sample_nonidentity(rng, cfg) for _ in range(len(x))]
    z, post = _encode_for_training(model, x, generator, True)
    terms = _eqvae_terms(x, z, post, IDENTITY, model, disc, feat, w, step)
    penalties = [
        explicit_equivariance_loss(x[i:i + 1], tau, model.encode_mean, stop_gradient, z=post.mean[i:i + 1])
        for i, tau in enumerate(taus)
    ]
    explicit = torch.stack(penalties).mean()
    b = _breakdown(terms, [IDENTITY] * len(x), len(x), w, explicit=explicit, w_explicit=w.lambda_explicit)
    b.diagnostics["explicit_taus"] = taus
    return b
