import math
import pytest
import torch
import convsynth.core as co
import convsynth.operators as op
import convsynth.highpass as hp

EXACT = hp.HighpassConfig(cg_iters=300, cg_tol=1e-12)


def random_image(seed, shape=(16, 16)):
    generator = torch.Generator().manual_seed(seed)
    return torch.complex(torch.randn(shape, generator=generator, dtype=co.REAL),
                         torch.randn(shape, generator=generator, dtype=co.REAL))


def closed_form_lowpass(x0, beta):
    """Per-frequency solution X_low = X_0 / (1 + beta |grad symbol|^2)."""
    height, width = x0.shape
    rows = 4.0 * torch.sin(math.pi * torch.arange(height, dtype=co.REAL) / height) ** 2
    cols = 4.0 * torch.sin(math.pi * torch.arange(width, dtype=co.REAL) / width) ** 2
    symbol = 1.0 + beta * (rows[:, None] + cols[None, :])
    return torch.fft.ifft2(torch.fft.fft2(x0) / symbol)


def test_grad_div_adjoint():
    for trial in range(100):
        x = random_image(3 * trial)
        u, v = random_image(3 * trial + 1), random_image(3 * trial + 2)
        gx, gy = hp.grad(x)
        left = co.inner(gx, u) + co.inner(gy, v)
        right = co.inner(x, -hp.div(u, v))
        assert abs(complex(left - right)) <= 1e-10 * float(co.norm(x)) * math.sqrt(
            float(co.norm(u)) ** 2 + float(co.norm(v)) ** 2)


def test_grad_is_periodic():
    x = torch.arange(4, dtype=co.REAL).reshape(1, 4).to(co.COMPLEX)
    horizontal, vertical = hp.grad(x)
    assert horizontal.real.tolist() == [[1.0, 1.0, 1.0, -3.0]]
    assert float(vertical.abs().sum()) == 0.0
    with pytest.raises(ValueError):
        hp.grad(torch.ones((1, 1), dtype=co.COMPLEX))


def test_lowpass_matches_closed_form():
    for beta in (0.1, 1.0, 10.0):
        for seed in range(3):
            x0 = random_image(seed)
            split = hp.lowpass_split(x0, EXACT, beta)
            expected = closed_form_lowpass(x0, beta)
            assert split.converged
            assert float(co.norm(split.low - expected)) <= 1e-8 * float(co.norm(expected))


def test_split_is_exact():
    x0 = random_image(4)
    split = hp.lowpass_split(x0, hp.HighpassConfig(beta=1.0))
    assert torch.equal(split.high, x0 - split.low)
    assert torch.allclose(split.low + split.high, x0, rtol=0, atol=1e-14)


def test_zero_beta_keeps_everything_low():
    x0 = random_image(5)
    split = hp.lowpass_split(x0, hp.HighpassConfig(beta=0.0))
    assert torch.allclose(split.low, x0, atol=1e-14)
    assert float(split.high.abs().max()) <= 1e-14


def test_constant_image_has_no_detail():
    x0 = torch.full((8, 8), 2.0 + 1.0j, dtype=co.COMPLEX)
    split = hp.lowpass_split(x0, hp.HighpassConfig(beta=10.0))
    assert float(split.high.abs().max()) <= 1e-12


def test_larger_beta_moves_energy_to_detail():
    x0 = random_image(6)
    energies = [float(co.norm(hp.lowpass_split(x0, EXACT, beta).high))
                for beta in (0.1, 1.0, 10.0)]
    assert energies[0] < energies[1] < energies[2]


def test_beta_gradient_matches_finite_difference():
    x0 = random_image(7)
    weights = random_image(8)

    def loss(raw):
        return co.real_inner(weights, hp.lowpass_split(x0, EXACT, hp.softplus(raw)).low)

    raw = torch.tensor(0.3, dtype=co.REAL, requires_grad=True)
    (analytic,) = torch.autograd.grad(loss(raw), raw)
    eps = 1e-6
    with torch.no_grad():
        numeric = (float(loss(raw + eps)) - float(loss(raw - eps))) / (2 * eps)
    assert abs(float(analytic) - numeric) <= 1e-5 * max(1.0, abs(numeric))


def test_softplus_inverse():
    for value in (1e-3, 0.5, 1.0, 20.0):
        raw = hp.inverse_softplus(value)
        assert float(hp.softplus(torch.tensor(raw, dtype=co.REAL))) == pytest.approx(value,
                                                                                    rel=1e-12)
    with pytest.raises(ValueError):
        hp.inverse_softplus(0.0)


def test_residual_data():
    x = random_image(9, (8, 8))
    mask = op.full_mask(8, 8)
    mask[2:4] = False
    y = op.forward_A(x, mask)
    assert torch.allclose(hp.residual_data(y, x, mask), torch.zeros_like(y), atol=1e-12)


def test_invalid_settings():
    with pytest.raises(ValueError):
        hp.HighpassConfig(beta=-1.0)
    with pytest.raises(ValueError):
        hp.HighpassConfig(cg_iters=0)
    with pytest.raises(ValueError):
        hp.lowpass_split(random_image(0, (4, 4)), beta=-0.5)
