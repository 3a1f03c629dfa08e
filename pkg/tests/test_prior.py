import math

import numpy as np
import pytest

from ebmmoe.nets import EnergyNet, MlpParams, make_energy
from ebmmoe.prior import (
    EbmPrior,
    ReferenceDistribution,
    estimate_log_partition,
    grad_log_density_wrt_z,
    grad_log_density_wrt_z_tape,
    log_unnormalized_density,
)
from ebmmoe.errors import DimensionError
from ebmmoe.tensor import Tensor


def quadratic_energy(a: float, d: int = 1) -> EnergyNet:
    """f(z) = -0.5 a |z|^2 as a square-activation layer plus a fixed readout."""
    square = (Tensor(np.eye(d), requires_grad=True), Tensor(np.zeros(d), requires_grad=True))
    readout = (Tensor(np.full((1, d), -0.5 * a), requires_grad=True), Tensor([0.0], requires_grad=True))
    return EnergyNet(MlpParams([square, readout], hidden_activation="square"))


def zero_prior(kind="standard_gaussian", d=2):
    net = make_energy(d, 8, 2, np.random.default_rng(0))
    net.zero_output()
    return EbmPrior(net, ReferenceDistribution(kind, d))


def test_null_energy_densities():
    assert math.isclose(log_unnormalized_density(zero_prior(), np.zeros((1, 2))).values[0], -math.log(2 * math.pi), rel_tol=1e-14)
    lap = log_unnormalized_density(zero_prior("standard_laplace", 1), np.zeros((1, 1))).values[0]
    assert math.isclose(lap, math.log(0.5), rel_tol=1e-14)


def test_null_energy_matches_reference_pointwise():
    p = zero_prior()
    z = np.random.default_rng(1).normal(size=(20, 2)) * 3
    assert np.array_equal(log_unnormalized_density(p, z).values, p.reference.log_density(Tensor(z)).values)


def test_constant_shift_in_energy_shifts_density():
    net = make_energy(2, 8, 2, np.random.default_rng(2))
    p = EbmPrior(net, ReferenceDistribution("standard_gaussian", 2))
    z = np.random.default_rng(3).normal(size=(10, 2))
    before = log_unnormalized_density(p, z).values.copy()
    net.mlp.layers[-1][1].values += 1.25
    after = log_unnormalized_density(p, z).values
    assert np.allclose(after - before, 1.25, rtol=0, atol=1e-12)


def test_gradients_in_z():
    z = np.random.default_rng(4).normal(size=(7, 2))
    assert np.array_equal(grad_log_density_wrt_z(zero_prior(), z), -z)
    p = EbmPrior(quadratic_energy(3.0, 2), ReferenceDistribution("standard_gaussian", 2))
    assert np.allclose(grad_log_density_wrt_z(p, z), -4.0 * z, rtol=1e-14)
    learned = EbmPrior(make_energy(2, 16, 3, np.random.default_rng(5)), ReferenceDistribution("standard_gaussian", 2))
    assert np.allclose(grad_log_density_wrt_z(learned, z), grad_log_density_wrt_z_tape(learned, z), rtol=1e-10, atol=1e-13)


def test_laplace_subgradient_at_zero():
    g = grad_log_density_wrt_z(zero_prior("standard_laplace", 2), np.array([[0.0, -2.0]]))
    assert np.array_equal(g, [[0.0, 1.0]])


def test_dimension_mismatch():
    with pytest.raises(DimensionError):
        log_unnormalized_density(zero_prior(d=2), np.zeros((3, 3)))


def test_null_partition_is_exactly_zero():
    for n in (1, 17, 70_000):
        assert estimate_log_partition(zero_prior(), n, np.random.default_rng(n)) == 0.0


def test_quadratic_tilt_partition_matches_closed_form():
    p1 = EbmPrior(quadratic_energy(3.0, 1), ReferenceDistribution("standard_gaussian", 1))
    assert abs(estimate_log_partition(p1, 1_000_000, np.random.default_rng(6)) + 0.5 * math.log(4.0)) < 0.02
    p2 = EbmPrior(quadratic_energy(3.0, 2), ReferenceDistribution("standard_gaussian", 2))
    assert abs(estimate_log_partition(p2, 1_000_000, np.random.default_rng(7)) + math.log(4.0)) < 0.03


def test_partition_cache_is_invalidated_by_parameter_change():
    net = make_energy(1, 8, 2, np.random.default_rng(8))
    p = EbmPrior(net, ReferenceDistribution("standard_gaussian", 1))
    value = estimate_log_partition(p, 1000, np.random.default_rng(0))
    assert p.log_partition_estimate == (value, 1000)
    net.mlp.layers[0][0].values[0, 0] += 1e-3
    assert p.log_partition_estimate is None


@pytest.mark.parametrize("a", [0.0, 0.5, 1.0, 2.5, 5.0])
def test_normalized_density_integrates_to_one(a):
    p = EbmPrior(quadratic_energy(a, 1), ReferenceDistribution("standard_gaussian", 1))
    logz = estimate_log_partition(p, 1_000_000, np.random.default_rng(9))
    grid = np.arange(-8.0, 8.0 + 5e-4, 1e-3)
    dens = np.exp(log_unnormalized_density(p, grid[:, None]).values - logz)
    assert 0.99 <= np.trapezoid(dens, grid) <= 1.01


def test_partition_estimate_variance_shrinks_with_samples():
    net = make_energy(1, 8, 2, np.random.default_rng(10))
    p = EbmPrior(net, ReferenceDistribution("standard_gaussian", 1))
    spread = []
    for n in (100, 10_000):
        spread.append(np.std([estimate_log_partition(p, n, np.random.default_rng([n, s])) for s in range(30)]))
    assert spread[1] < spread[0]
