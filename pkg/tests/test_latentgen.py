import numpy as np
import pytest
import torch

from eqvae.latentgen import (
    DenoiserConfig,
    LatentDataset,
    NoiseSchedule,
    ancestral_sample,
    diffusion_forward,
    load_denoiser,
    sample_and_score,
    train_latent_denoiser,
)
from eqvae.probes import frechet_from_features


def test_schedule_invariants():
    s = NoiseSchedule()
    assert s.alpha_bars[0] == 1.0
    b = s.betas[1:]
    assert 0 < b[0] and np.all(np.diff(b) >= 0) and b[-1] < 1
    assert np.all(np.diff(s.alpha_bars) < 0)
    assert s.alpha_bars[-1] <= 1e-4


def test_alpha_bar_product_oracle():
    s = NoiseSchedule()
    acc = 1.0
    for t in range(1, s.T + 1):
        acc *= 1.0 - s.betas[t]
        assert abs(s.alpha_bars[t] - acc) <= 1e-10


def test_forward_boundaries():
    s = NoiseSchedule()
    z0 = torch.randn(3, 4, 8, 8, dtype=torch.float64)
    noise = torch.randn_like(z0)
    assert torch.equal(diffusion_forward(z0, 0, noise, s), z0)
    zT = diffusion_forward(z0, s.T, noise, s)
    assert (zT - noise).norm() / noise.norm() < 0.02
    with pytest.raises(ValueError):
        diffusion_forward(z0, s.T + 1, noise, s)
    with pytest.raises(ValueError):
        diffusion_forward(z0, -1, noise, s)
    with pytest.raises(ValueError):
        diffusion_forward(z0, 5, noise[:1], s)


@pytest.mark.parametrize("t", [1, 100, 500, 1000])
def test_forward_marginals(t):
    s = NoiseSchedule()
    n = 10_000
    g = torch.Generator().manual_seed(t)
    z0 = 2.0 + 3.0 * torch.randn(n, 1, 2, 2, generator=g, dtype=torch.float64)
    zt = diffusion_forward(z0, t, torch.randn(z0.shape, generator=g, dtype=torch.float64), s)
    ab = s.alpha_bars[t]
    mean_ref = np.sqrt(ab) * 2.0
    var_ref = ab * 9.0 + (1 - ab)
    m, v = zt.mean(0), zt.var(0)
    se_m = np.sqrt(var_ref / n)
    se_v = var_ref * np.sqrt(2.0 / (n - 1))
    assert torch.all((m - mean_ref).abs() <= 3 * se_m)
    assert torch.all((v - var_ref).abs() <= 3 * se_v)


def test_per_sample_steps():
    s = NoiseSchedule()
    z0 = torch.randn(3, 2, 4, 4, dtype=torch.float64)
    noise = torch.randn_like(z0)
    t = torch.tensor([0, 10, 1000])
    out = diffusion_forward(z0, t, noise, s)
    for i in range(3):
        assert torch.allclose(out[i], diffusion_forward(z0[i], int(t[i]), noise[i], s))


class _GaussianOracle:
    """Exact ``E[noise | z_t]`` when ``z0 ~ N(m, C)``."""

    def __init__(self, mean, cov, sched):
        self.m, self.C, self.s = mean, cov, sched

    def __call__(self, z, t):
        ab = float(self.s.alpha_bars[int(t[0])])
        flat = z.double().reshape(len(z), -1)
        cov_t = ab * self.C + (1 - ab) * torch.eye(len(self.m), dtype=torch.float64)
        r = flat - np.sqrt(ab) * self.m
        eps = np.sqrt(1 - ab) * torch.linalg.solve(cov_t, r.T).T
        return eps.reshape(z.shape)


def _synthetic(seed=0):
    g = torch.Generator().manual_seed(seed)
    d = 2 * 4 * 4
    a = torch.randn(d, d, generator=g, dtype=torch.float64) / np.sqrt(d)
    cov = a @ a.T + 0.1 * torch.eye(d, dtype=torch.float64)
    mean = torch.randn(d, generator=g, dtype=torch.float64)
    chol = torch.linalg.cholesky(cov)

    def draw(n, gen):
        return (mean + torch.randn(n, d, generator=gen, dtype=torch.float64) @ chol.T).reshape(n, 2, 4, 4)

    return mean, cov, draw


def _flat(x):
    return x.reshape(len(x), -1).double().numpy()


def test_oracle_denoiser_within_noise_floor():
    mean, cov, draw = _synthetic()
    s = NoiseSchedule()
    gen = torch.Generator().manual_seed(1)
    ref = _flat(draw(500, gen))
    floor = [frechet_from_features(_flat(draw(500, gen)), ref) for _ in range(20)]
    oracle = _GaussianOracle(mean, cov, s)
    _, proxy = sample_and_score(oracle, lambda z: z, 500, torch.Generator().manual_seed(2),
                                _flat, ref, 1.0, (2, 4, 4), sched=s)
    assert proxy <= max(floor)
    # a denoiser that predicts zero noise lands far from the data
    _, bad = sample_and_score(lambda z, t: torch.zeros_like(z), lambda z: z, 500,
                              torch.Generator().manual_seed(2), _flat, ref, 1.0, (2, 4, 4), sched=s)
    assert bad > 5 * max(floor)


def test_sample_and_score_deterministic_and_rejects_small_n():
    mean, cov, draw = _synthetic()
    s = NoiseSchedule(T=50)
    ref = _flat(draw(500, torch.Generator().manual_seed(0)))
    oracle = _GaussianOracle(mean, cov, s)
    runs = [sample_and_score(oracle, lambda z: z, 500, torch.Generator().manual_seed(5), _flat, ref, 1.0,
                             (2, 4, 4), sched=s) for _ in range(2)]
    assert torch.equal(runs[0][0], runs[1][0]) and runs[0][1] == runs[1][1]
    with pytest.raises(ValueError):
        sample_and_score(oracle, lambda z: z, 499, torch.Generator().manual_seed(5), _flat, ref, 1.0,
                         (2, 4, 4), sched=s)


def test_scale_factor_undone_before_decoding():
    seen = []

    def decoder(z):
        seen.append(z)
        return z

    s = NoiseSchedule(T=5)
    ref = np.random.default_rng(0).normal(size=(600, 32))
    sample_and_score(lambda z, t: torch.zeros_like(z), decoder, 500, torch.Generator().manual_seed(0),
                     _flat, ref, 4.0, (2, 4, 4), sched=s)
    z = ancestral_sample(lambda z, t: torch.zeros_like(z), (500, 2, 4, 4), s, torch.Generator().manual_seed(0))
    assert torch.allclose(torch.cat(seen), z / 4.0)


def test_latent_dataset_scaling_and_round_trip(tmp_path):
    raw = 7.0 * torch.randn(200, 4, 8, 8)
    ds = LatentDataset.from_raw(raw, "ckpt:abc")
    assert np.all((ds.channel_std() > 0.8) & (ds.channel_std() < 1.2))
    assert torch.allclose(ds.latents / ds.scale_factor, raw, rtol=1e-5, atol=1e-5)
    ds.save(tmp_path / "lat")
    back = LatentDataset.load(tmp_path / "lat")
    assert torch.equal(back.latents, ds.latents)
    assert back.scale_factor == ds.scale_factor and back.source_checkpoint == "ckpt:abc"


def test_latent_dataset_shape_metadata_mismatch(tmp_path):
    LatentDataset.from_raw(torch.randn(10, 4, 8, 8)).save(tmp_path)
    np.save(tmp_path / "latents.npy", np.zeros((3, 4, 8, 8), np.float32))
    with pytest.raises(ValueError):
        LatentDataset.load(tmp_path)


def test_training_deterministic_and_shape_checked():
    ds = LatentDataset.from_raw(torch.randn(64, 2, 4, 4))
    cfg = DenoiserConfig(latent_channels=2, latent_size=4, width=16, steps=5, batch_size=8, T=100, seed=3)
    a = train_latent_denoiser(ds, cfg)
    b = train_latent_denoiser(ds, cfg)
    assert a["losses"] == b["losses"] and len(a["losses"]) == 5
    for k in a["state"]:
        assert torch.equal(a["state"][k], b["state"][k])
    model = load_denoiser(a)
    assert model(torch.zeros(2, 2, 4, 4), torch.tensor([1, 50])).shape == (2, 2, 4, 4)
    with pytest.raises(ValueError):
        train_latent_denoiser(ds, DenoiserConfig(latent_channels=4, latent_size=4, steps=1))


def test_training_reduces_loss():
    ds = LatentDataset.from_raw(torch.randn(256, 2, 4, 4) * torch.linspace(0.2, 2, 16).view(1, 1, 4, 4))
    cfg = DenoiserConfig(latent_channels=2, latent_size=4, width=16, steps=300, batch_size=32, lr=1e-3, seed=0)
    losses = train_latent_denoiser(ds, cfg)["losses"]
    assert np.mean(losses[-50:]) < np.mean(losses[:50])
