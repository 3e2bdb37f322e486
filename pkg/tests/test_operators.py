import pytest
import torch
import convsynth.core as co
import convsynth.operators as op
from convsynth.dictionary import random_bank
from convsynth.simulate import make_lowfreq_mask


def random_complex(generator, shape):
    return torch.complex(torch.randn(shape, generator=generator, dtype=co.REAL),
                         torch.randn(shape, generator=generator, dtype=co.REAL))


def random_mask(generator, shape, keep=0.5):
    mask = torch.rand(shape, generator=generator, dtype=co.REAL) < keep
    mask[0, 0] = True
    return mask


def delta_bank(num_filters=1, kernel_size=3):
    filters = torch.zeros((num_filters, kernel_size, kernel_size), dtype=co.REAL)
    filters[:, kernel_size // 2, kernel_size // 2] = 1.0
    return op.FilterBank(filters)


def dense_matrix(apply, in_shape):
    """Columns are the images of the canonical basis of C^in_shape."""
    size = 1
    for n in in_shape:
        size *= n
    columns = []
    for index in range(size):
        basis = torch.zeros(size, dtype=co.COMPLEX)
        basis[index] = 1.0
        columns.append(apply(basis.reshape(in_shape)).reshape(-1))
    return torch.stack(columns, dim=1)


def assert_adjoint(forward, adjoint, in_shape, out_shape, seed):
    generator = torch.Generator().manual_seed(seed)
    x = random_complex(generator, in_shape)
    y = random_complex(generator, out_shape)
    gap = abs(complex(co.inner(forward(x), y) - co.inner(x, adjoint(y))))
    assert gap <= 1e-10 * float(co.norm(x) * co.norm(y))


def test_adjoint_A():
    for trial in range(100):
        mask = random_mask(torch.Generator().manual_seed(1000 + trial), (16, 16))
        assert_adjoint(lambda x: op.forward_A(x, mask), lambda y: op.adjoint_A(y, mask),
                       (16, 16), (16, 16), trial)


def test_adjoint_D():
    for trial in range(100):
        bank = random_bank(3, 5, seed=trial)
        assert_adjoint(lambda s: op.dict_apply(s, bank), lambda x: op.dict_adjoint(x, bank),
                       (3, 16, 16), (16, 16), trial)


def test_adjoint_B():
    for trial in range(100):
        bank = random_bank(3, 5, seed=trial)
        mask = random_mask(torch.Generator().manual_seed(2000 + trial), (16, 16))
        assert_adjoint(lambda s: op.forward_B(s, bank, mask),
                       lambda y: op.adjoint_B(y, bank, mask), (3, 16, 16), (16, 16), trial)


def test_pad_crop_adjoint():
    generator = torch.Generator().manual_seed(3)
    kernels = torch.randn((2, 5, 5), generator=generator, dtype=co.REAL)
    planes = torch.randn((2, 12, 12), generator=generator, dtype=co.REAL)
    left = torch.sum(op.pad_kernels(kernels, 12, 12) * planes)
    right = torch.sum(kernels * op.crop_kernels(planes, 5))
    assert abs(float(left - right)) < 1e-10
    assert torch.equal(op.crop_kernels(op.pad_kernels(kernels, 12, 12), 5), kernels)


def test_dict_apply_matches_direct_convolution():
    bank = random_bank(2, 3, seed=4)
    generator = torch.Generator().manual_seed(5)
    codes = random_complex(generator, (2, 8, 9))
    expected = torch.zeros((8, 9), dtype=co.COMPLEX)
    center = 1
    for k in range(2):
        for a in range(3):
            for b in range(3):
                expected += bank.filters[k, a, b] * torch.roll(codes[k], shifts=(a - center,
                                                                                  b - center),
                                                               dims=(0, 1))
    assert torch.allclose(op.dict_apply(codes, bank), expected, atol=1e-12)


def test_delta_kernel_is_identity():
    bank = delta_bank()
    codes = random_complex(torch.Generator().manual_seed(6), (1, 8, 8))
    assert torch.allclose(op.dict_apply(codes, bank), codes[0], atol=1e-14)
    assert torch.allclose(op.dict_adjoint(codes[0], bank), codes, atol=1e-14)


def test_forward_A_is_zero_outside_mask():
    generator = torch.Generator().manual_seed(7)
    mask = random_mask(generator, (8, 8))
    y = op.forward_A(random_complex(generator, (8, 8)), mask)
    assert bool((y[~mask] == 0).all())


def test_full_mask_adjoint_is_inverse():
    x = random_complex(torch.Generator().manual_seed(8), (8, 8))
    mask = op.full_mask(8, 8)
    assert torch.allclose(op.adjoint_A(op.forward_A(x, mask), mask), x, atol=1e-12)


def test_delta_kernel_full_mask_norm():
    estimate, converged = op.op_norm_sq(delta_bank(), op.full_mask(8, 8), (8, 8))
    assert converged
    assert abs(estimate - 1.0) <= 1e-6
    assert abs(op.dict_norm_sq(delta_bank(), (8, 8)) - 1.0) < 1e-12


def test_power_iteration_matches_dense_svd():
    for seed in range(3):
        bank = random_bank(2, 3, seed=seed)
        mask = random_mask(torch.Generator().manual_seed(10 + seed), (8, 8))
        matrix = dense_matrix(lambda s, b=bank, m=mask: op.forward_B(s, b, m), (2, 8, 8))
        exact = float(torch.linalg.matrix_norm(matrix, ord=2)) ** 2
        estimate, _ = op.op_norm_sq(bank, mask, (8, 8), iters=5000, tol=1e-13, seed=seed)
        assert abs(estimate - exact) <= 1e-4 * exact


def test_dict_norm_sq_matches_dense_svd():
    bank = random_bank(3, 3, seed=11)
    matrix = dense_matrix(lambda s: op.dict_apply(s, bank), (3, 6, 6))
    exact = float(torch.linalg.matrix_norm(matrix, ord=2)) ** 2
    assert abs(op.dict_norm_sq(bank, (6, 6)) - exact) <= 1e-10 * exact


def test_default_power_iteration_converges_at_full_scale():
    bank = random_bank(64, 11, seed=0)
    mask = make_lowfreq_mask((64, 64), 0.25)
    estimate, converged = op.op_norm_sq(bank, mask, (64, 64))
    assert converged
    # B is block diagonal over frequencies, so ||B||^2 is the largest retained filter energy
    energy = torch.sum(torch.abs(bank.spectrum(64, 64)) ** 2, dim=0)
    exact = float(torch.max(energy[mask]))
    assert estimate <= exact * (1 + 1e-10)
    assert estimate >= exact * (1 - 1e-4)


def test_power_iteration_reports_non_convergence():
    diagonal = torch.tensor([1.0, 0.999999, 0.5], dtype=co.REAL)
    estimate, converged = op.power_iteration(lambda v: diagonal * v,
                                             torch.ones(3, dtype=co.REAL), iters=2, tol=1e-15)
    assert not converged
    assert 0.5 < estimate <= 1.0


def test_filter_bank_validation():
    with pytest.raises(ValueError):
        op.FilterBank(torch.ones((2, 4, 4), dtype=co.REAL) / 4.0)  # even kernel
    with pytest.raises(ValueError):
        op.FilterBank(torch.ones((2, 3, 3), dtype=co.REAL))  # not unit norm
    with pytest.raises(ValueError):
        op.FilterBank(torch.ones((3, 3), dtype=co.REAL))
    with pytest.raises(ValueError):
        random_bank(2, 5).spectrum(4, 4)


def test_filter_bank_copies_filters():
    bank = random_bank(2, 3)
    filters = bank.filters
    filters.zero_()
    assert float(torch.linalg.vector_norm(bank.filters[0])) == pytest.approx(1.0, abs=1e-12)
    assert bank.num_filters == 2
    assert bank.kernel_size == 3


def test_dimension_errors():
    bank = random_bank(2, 3)
    with pytest.raises(ValueError):
        op.dict_apply(torch.zeros((3, 8, 8), dtype=co.COMPLEX), bank)
    with pytest.raises(ValueError):
        op.forward_A(torch.zeros((8, 8), dtype=co.COMPLEX), op.full_mask(8, 7))
    with pytest.raises(ValueError):
        op.check_mask(torch.zeros((8, 8), dtype=torch.bool))
