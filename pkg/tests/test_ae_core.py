import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from eqvae.ae_core import (
    Autoencoder,
    AutoencoderConfig,
    ConfigError,
    GaussianPosterior,
    PatchDiscriminator,
    ShapeError,
    VectorQuantizer,
    quantize,
    reparameterize,
)


@pytest.fixture(scope="module")
def vae():
    torch.manual_seed(0)
    return Autoencoder(AutoencoderConfig(base_width=8)).eval()


@pytest.fixture(scope="module")
def vq():
    torch.manual_seed(0)
    return Autoencoder(AutoencoderConfig(base_width=8, latent_mode="discrete", codebook_size=16)).eval()


@pytest.mark.parametrize("kw", [dict(compression_ratio=6), dict(image_size=60), dict(latent_mode="x"),
                                dict(latent_mode="discrete", codebook_size=1)])
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        AutoencoderConfig(**kw)


def test_encode_shape(vae):
    post = vae.encode(torch.zeros(2, 3, 64, 64))
    assert isinstance(post, GaussianPosterior)
    assert post.mean.shape == post.logvar.shape == (2, 4, 8, 8)


def test_encode_deterministic(vae):
    x = torch.rand(2, 3, 64, 64) * 2 - 1
    a, b = vae.encode(x), vae.encode(x)
    assert torch.equal(a.mean, b.mean) and torch.equal(a.logvar, b.logvar)


def test_encode_rejects_bad_inputs(vae):
    x = torch.zeros(1, 3, 64, 64)
    x[0, 0, 3, 3] = float("nan")
    with pytest.raises(ValueError):
        vae.encode(x)
    with pytest.raises(ShapeError):
        vae.encode(torch.zeros(1, 1, 64, 64))
    with pytest.raises(ShapeError):
        vae.encode(torch.zeros(1, 3, 60, 64))


def test_discrete_encode_returns_features(vq):
    z = vq.encode(torch.zeros(1, 3, 64, 64))
    assert torch.is_tensor(z) and z.shape == (1, 4, 8, 8)


@pytest.mark.parametrize("hw,out", [((8, 8), (64, 64)), ((4, 4), (32, 32)), ((2, 6), (16, 48))])
def test_decode_shape_and_range(vae, hw, out):
    img = vae.decode(torch.randn(2, 4, *hw) * 5)
    assert img.shape == (2, 3, *out)
    assert img.min() >= -1 and img.max() <= 1


def test_decode_channel_mismatch(vae):
    with pytest.raises(ShapeError):
        vae.decode(torch.zeros(1, 3, 8, 8))


@pytest.mark.parametrize("size", [16, 32, 64])
def test_shape_round_trip(vae, vq, size):
    x = torch.rand(1, 3, size, size) * 2 - 1
    assert vae.reconstruct(x).shape == x.shape
    assert vq.reconstruct(x).shape == x.shape


def test_logvar_clamped():
    p = GaussianPosterior(torch.zeros(3), torch.tensor([-100.0, 0.0, 100.0]))
    assert p.logvar.tolist() == [-30.0, 0.0, 20.0]
    with pytest.raises(ShapeError):
        GaussianPosterior(torch.zeros(3), torch.zeros(4))


def test_reparameterize_tiny_variance():
    mean = torch.randn(4, 8, 8)
    z = reparameterize(GaussianPosterior(mean, torch.full_like(mean, -30.0)), torch.Generator().manual_seed(0))
    assert torch.allclose(z, mean, atol=1e-6)


def test_reparameterize_unit_variance():
    n = 10_000
    post = GaussianPosterior(torch.zeros(n, 2, 3, 3), torch.zeros(n, 2, 3, 3))
    z = reparameterize(post, torch.Generator().manual_seed(1)).double()
    var = z.var(dim=0)
    # chi-square with n-1 dof: sd of the sample variance is sqrt(2/(n-1)) ~ 0.014
    assert var.min() >= 0.9 and var.max() <= 1.1


def test_reparameterize_reproducible():
    post = GaussianPosterior(torch.randn(2, 4, 8, 8), torch.randn(2, 4, 8, 8))
    a = reparameterize(post, torch.Generator().manual_seed(7))
    b = reparameterize(post, torch.Generator().manual_seed(7))
    assert torch.equal(a, b)


def test_quantize_exact_match():
    cb = torch.randn(8, 3)
    z = cb[3].view(1, 3, 1, 1).expand(2, 3, 4, 5).clone()
    out = quantize(z, cb)
    assert (out.indices == 3).all()
    assert out.commitment_loss.item() == 0.0


def test_quantize_two_entry_oracle():
    cb = torch.tensor([[0.0, 0.0], [1.0, 1.0]])
    z = torch.tensor([0.4, 0.4]).view(1, 2, 1, 1)
    # brute force: |(0.4,0.4)|^2 = 0.32 < |(-0.6,-0.6)|^2 = 0.72
    assert quantize(z, cb).indices.item() == 0


def test_quantize_tie_breaks_to_lowest_index():
    cb = torch.zeros(6, 2)
    cb[1] = torch.tensor([1.0, 0.0])
    cb[5] = torch.tensor([-1.0, 0.0])
    cb[[0, 2, 3, 4]] = 10.0
    z = torch.zeros(1, 2, 1, 1)
    assert quantize(z, cb).indices.item() == 1


def test_quantize_errors():
    with pytest.raises(ConfigError):
        quantize(torch.zeros(1, 2, 1, 1), torch.zeros(0, 2))
    with pytest.raises(ShapeError):
        quantize(torch.zeros(1, 3, 1, 1), torch.zeros(4, 2))


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 32), st.integers(1, 6), st.integers(0, 10_000))
def test_quantize_rows_idempotence_and_bruteforce(k, c, seed):
    g = torch.Generator().manual_seed(seed)
    cb = torch.randn(k, c, generator=g)
    z = torch.randn(2, c, 3, 4, generator=g)
    out = quantize(z, cb)
    assert ((out.indices >= 0) & (out.indices < k)).all()
    # exact codebook rows
    rows = out.quantized.movedim(1, -1).reshape(-1, c)
    assert torch.equal(rows, cb[out.indices.reshape(-1)])
    # brute-force nearest entry
    flat = z.movedim(1, -1).reshape(-1, c).double()
    d = torch.stack([((flat - e.double()) ** 2).sum(-1) for e in cb], dim=1)
    best = d.min(1).values
    picked = d.gather(1, out.indices.reshape(-1, 1)).squeeze(1)
    assert torch.allclose(picked, best, rtol=1e-6, atol=1e-9)
    again = quantize(out.quantized.detach(), cb)
    assert torch.equal(again.quantized, out.quantized)
    assert again.commitment_loss.item() == 0.0


def test_straight_through_matches_finite_differences():
    torch.manual_seed(0)
    cb = torch.randn(16, 4, dtype=torch.float64)
    z = torch.randn(1, 4, 3, 3, dtype=torch.float64, requires_grad=True)
    w = torch.randn(1, 4, 3, 3, dtype=torch.float64)

    def loss_of_q(q):
        return (torch.sin(q) * w).sum() + (q ** 2).sum()

    out = quantize(z, cb)
    loss_of_q(out.quantized).backward()
    q = out.quantized.detach()
    eps = 1e-6
    gen = torch.Generator().manual_seed(3)
    for _ in range(5):
        i = int(torch.randint(z.numel(), (1,), generator=gen))
        dq = torch.zeros(q.numel(), dtype=torch.float64)
        dq[i] = eps
        dq = dq.view_as(q)
        fd = (loss_of_q(q + dq) - loss_of_q(q - dq)) / (2 * eps)
        g = z.grad.flatten()[i]
        assert abs(g - fd) <= 1e-3 * max(abs(fd), 1e-8)


def test_codebook_gradient_and_reseed():
    vqm = VectorQuantizer(8, 2).train()
    z = torch.randn(1, 2, 4, 4)
    out = vqm(z)
    out.codebook_loss.backward()
    assert vqm.embedding.grad is not None and vqm.embedding.grad.abs().sum() > 0
    used = int((vqm.usage_counts > 0).sum())
    assert int(vqm.usage_counts.sum()) == 16
    pool = torch.full((5, 2), 3.0)
    n = vqm.reseed_dead(pool, torch.Generator().manual_seed(0))
    assert n == 8 - used
    assert int((vqm.embedding == 3.0).all(1).sum()) == n
    assert int(vqm.usage_counts.sum()) == 0


def test_discriminator_shapes_and_determinism():
    d = PatchDiscriminator().eval()
    a = d(torch.zeros(1, 3, 64, 64))
    assert a.shape[-1] >= 1 and a.shape[-2] >= 1
    s = d(torch.zeros(1, 3, 32, 32))
    assert s.shape[-1] >= 1 and s.shape[-1] < a.shape[-1]
    x = torch.rand(2, 3, 16, 16)
    assert torch.equal(d(x), d(x))
    with pytest.raises(ShapeError):
        d(torch.zeros(1, 3, 4, 4))
