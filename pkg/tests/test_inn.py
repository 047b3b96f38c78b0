import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from clrkit.inn import (CouplingBlock, GeneratorConfig, HaarStack, InvertibleGenerator, SNConv2d,
                        SpectralNorm, coupling_forward, coupling_inverse, haar_down, haar_forward,
                        haar_inverse, haar_up, spectral_project)
from clrkit.metrics import ShapeError
from helpers import randomize_subnets
from oracles import block_average, central_difference, relative_error


# --- Haar ----------------------------------------------------------------------

def test_haar_constant_image():
    s = haar_forward(torch.full((1, 3, 8, 8), 0.3, dtype=torch.float64))
    assert torch.allclose(s.low, torch.full_like(s.low, 0.6))
    for band in s.highs:
        assert torch.count_nonzero(band) == 0


def test_haar_hand_block():
    s = haar_forward(torch.tensor([[[[0.0, 1.0], [0.0, 1.0]]]]))
    assert float(s.low) == 1.0
    assert float(s.vertical) == -1.0
    assert float(s.horizontal) == 0.0 and float(s.diagonal) == 0.0


def test_haar_roundtrip_and_energy():
    x = torch.rand(4, 3, 16, 24, dtype=torch.float64)
    s = haar_forward(x)
    assert (haar_inverse(s) - x).abs().max() <= 1e-6
    energy = sum(float((b**2).sum()) for b in (s.low, *s.highs))
    assert energy == pytest.approx(float((x**2).sum()), rel=1e-6)
    assert torch.allclose(haar_up(haar_down(x)), x, atol=1e-12)


def test_haar_inverse_cases():
    z = torch.zeros(1, 3, 4, 4)
    assert torch.count_nonzero(haar_inverse(HaarStack(z, z, z, z))) == 0
    x = torch.rand(2, 3, 8, 8, dtype=torch.float64)
    s = haar_forward(x)
    zero = torch.zeros_like(s.low)
    low_only = haar_inverse(HaarStack(s.low, zero, zero, zero))
    assert np.allclose(low_only.numpy(), block_average(x.numpy()), atol=1e-12)


def test_haar_errors():
    with pytest.raises(ShapeError):
        haar_forward(torch.zeros(1, 3, 7, 8))
    z = torch.zeros(1, 3, 4, 4)
    with pytest.raises(ShapeError):
        haar_inverse(HaarStack(z, z, z, torch.zeros(1, 3, 2, 4)))


@given(st.integers(1, 4), st.integers(1, 6), st.integers(1, 6), st.integers(0, 10_000))
def test_haar_energy_property(c, h2, w2, seed):
    x = torch.randn(1, c, 2 * h2, 2 * w2, generator=torch.Generator().manual_seed(seed),
                    dtype=torch.float64)
    s = haar_forward(x)
    energy = sum(float((b**2).sum()) for b in (s.low, *s.highs))
    assert energy == pytest.approx(float((x**2).sum()), rel=1e-6)


# --- couplings -----------------------------------------------------------------

def _block(seed=0, std=0.1, dtype=torch.float64):
    blk = CouplingBlock(1, 3, hidden=8).to(dtype)
    randomize_subnets(blk, std=std, seed=seed)
    return blk


def test_coupling_identity_at_init():
    blk = CouplingBlock(2, 6, hidden=8).double()
    u1, u2 = torch.rand(1, 2, 4, 4, dtype=torch.float64), torch.rand(1, 6, 4, 4, dtype=torch.float64)
    v1, v2 = coupling_forward((u1, u2), blk)
    assert torch.equal(v1, u1) and torch.equal(v2, u2)
    w1, w2 = coupling_inverse((u1, u2), blk)
    assert torch.equal(w1, u1) and torch.equal(w2, u2)


def test_coupling_roundtrip_random_params():
    for seed in range(5):
        blk = _block(seed, std=0.2, dtype=torch.float32)
        u1, u2 = torch.rand(2, 1, 8, 8), torch.rand(2, 3, 8, 8)
        r1, r2 = coupling_inverse(coupling_forward((u1, u2), blk), blk)
        assert max(float((r1 - u1).abs().max().detach()), float((r2 - u2).abs().max().detach())) <= 1e-5


class _ConstNet(torch.nn.Module):
    def __init__(self, value):
        super().__init__()
        self.value = value

    def forward(self, x):
        return torch.full_like(x, self.value)


def test_coupling_scalar_hand_case():
    blk = CouplingBlock(1, 1, hidden=4, clamp=2.0)
    blk.s2, blk.t2 = _ConstNet(0.5), _ConstNet(0.1)
    blk.s1, blk.t1 = _ConstNet(0.0), _ConstNet(0.0)
    u1, u2 = torch.ones(1, 1, 1, 1, dtype=torch.float64), torch.full((1, 1, 1, 1), 2.0, dtype=torch.float64)
    v1, v2 = blk(u1, u2)
    assert float(v1) == pytest.approx(math.exp(2.0 * math.tanh(0.5)) + 0.1, rel=1e-12)
    assert float(v2) == 2.0
    r1, r2 = blk.inverse(v1, v2)
    assert float(r1) == pytest.approx(1.0, abs=1e-12) and float(r2) == pytest.approx(2.0, abs=1e-12)


def test_coupling_gradient_matches_finite_differences():
    blk = CouplingBlock(1, 1, hidden=4).double()
    randomize_subnets(blk, std=0.3, seed=3)
    u = torch.rand(1, 2, 2, 2, dtype=torch.float64)  # 8 elements
    w1, w2 = torch.randn(1, 1, 2, 2, dtype=torch.float64), torch.randn(1, 1, 2, 2, dtype=torch.float64)

    def f(z):
        v1, v2 = blk(z[:, :1], z[:, 1:])
        return (v1 * w1).sum() + (v2 * w2).sum()

    x = u.clone().requires_grad_(True)
    f(x).backward()
    with torch.no_grad():
        fd = central_difference(f, u)
    assert relative_error(x.grad, fd) <= 1e-3


# --- spectral normalization ----------------------------------------------------

def test_spectral_identity_unchanged():
    eye = torch.eye(6, dtype=torch.float64)
    assert torch.allclose(spectral_project(eye, iterations=5), eye, atol=1e-12)


def test_spectral_diag():
    w = torch.diag(torch.tensor([2.0, 1.0], dtype=torch.float64))
    out = spectral_project(w, iterations=5)
    assert torch.allclose(out, torch.diag(torch.tensor([1.0, 0.5], dtype=torch.float64)), atol=1e-3)


def test_spectral_random_matrix_vs_svd():
    g = torch.Generator().manual_seed(0)
    w = torch.randn(64, 64, generator=g, dtype=torch.float64)
    state = SpectralNorm(64, 64, generator=g, dtype=torch.float64)
    out = None
    for _ in range(100):  # persistent vectors warm up across calls, as over training steps
        out = spectral_project(w, state, iterations=1)
    sigma = np.linalg.svd(out.numpy(), compute_uv=False)[0]
    assert 0.99 <= sigma <= 1.01


def test_spectral_rejects_non_matrix():
    with pytest.raises(ShapeError):
        spectral_project(torch.zeros(2, 2, 2))


def test_snconv_vectors_move_only_on_request():
    conv = SNConv2d(4, 8, 3, padding=1)
    u = conv.sn_u.clone()
    conv(torch.rand(1, 4, 8, 8))
    assert torch.equal(conv.sn_u, u)
    conv.power_iterate(200)
    sigma = np.linalg.svd(conv.normalized_weight().detach().flatten(1).numpy(), compute_uv=False)[0]
    assert sigma == pytest.approx(1.0, abs=1e-3)


# --- generator -----------------------------------------------------------------

def test_generator_identity_at_init():
    from clrkit.attacks import quantize_u8

    gen = InvertibleGenerator(GeneratorConfig(base_channels=8)).double()
    with torch.no_grad():
        # dyadic inputs make every Haar sum exact, so the identity is bit-exact
        x = torch.randint(0, 256, (2, 3, 32, 32)).double() / 256
        assert torch.equal(gen(x), x) and torch.equal(gen.inverse(x), x)
        # arbitrary inputs: identity up to one rounding, and exact on the 8-bit grid
        x = torch.randint(0, 256, (2, 3, 32, 32)).double() / 255
        assert (gen(x) - x).abs().max() <= 1e-15
        assert torch.equal(quantize_u8(gen(x)), x)


def test_generator_structure():
    gen = InvertibleGenerator()
    assert len(gen.down) == 3 and len(gen.up) == 3
    assert all(len(level) == 4 for level in (*gen.down, *gen.up))
    assert gen.down[2][0].split == (3 * 16, 9 * 16)
    assert len(gen.spectral_layers()) == 6 * 4 * 4 * 2


def test_generator_roundtrip_random_params():
    gen = InvertibleGenerator(GeneratorConfig(base_channels=8))
    randomize_subnets(gen, std=0.01, seed=1)
    x = torch.rand(4, 3, 64, 64)
    with torch.no_grad():
        y = gen.protect(x)
        assert (y - x).abs().max() > 1e-3  # parameters actually do something
        assert (gen.recover(y) - x).abs().max() <= 1e-4


def test_generator_shape_errors():
    gen = InvertibleGenerator(GeneratorConfig(base_channels=4))
    with pytest.raises(ShapeError):
        gen(torch.rand(1, 3, 36, 36))
    with pytest.raises(ShapeError):
        gen(torch.rand(1, 1, 32, 32))
    with pytest.raises(ValueError):
        GeneratorConfig(levels=0)
