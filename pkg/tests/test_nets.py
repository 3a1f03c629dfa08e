import numpy as np
import pytest

from ebmmoe import tensor as T
from ebmmoe.errors import DimensionError
from ebmmoe.nets import (
    EncoderNet,
    EnergyNet,
    GeneratorNet,
    MlpParams,
    encoder_forward,
    energy_forward,
    generator_forward,
    init_params,
    make_encoder,
    make_energy,
    make_generator,
)
from ebmmoe.tensor import Tensor, finite_difference_check


def rng(seed=0):
    return np.random.default_rng(seed)


def test_generator_noise_off_is_network_mean():
    g = make_generator(2, 3, 8, 2, rng())
    z = rng(1).normal(size=(4, 2))
    assert np.array_equal(generator_forward(g, z).values, g.mlp.forward(Tensor(z)).values)


def test_identity_linear_generator():
    layer = (Tensor(np.eye(2), requires_grad=True), Tensor(np.zeros(2), requires_grad=True))
    g = GeneratorNet(MlpParams([layer]), 1.0)
    assert np.array_equal(generator_forward(g, Tensor([[1.0, 2.0]])).values, [[1.0, 2.0]])


def test_generator_noise_variance():
    layer = (Tensor(np.zeros((2, 1)), requires_grad=True), Tensor(np.zeros(2), requires_grad=True))
    g = GeneratorNet(MlpParams([layer]), 0.7)
    x = generator_forward(g, np.zeros((100_000, 1)), sample_noise=True, rng=rng(2)).values
    assert np.all(np.abs(x.var(axis=0) / 0.7 - 1.0) < 0.03)


def test_zero_heads_give_unit_gaussian():
    e = make_encoder(3, 2, 8, 2, rng())
    for head in (e.mean_head, e.logvar_head):
        for w, b in head.layers:
            w.values[...] = 0.0
    mu, lv = encoder_forward(e, rng(3).normal(size=(5, 3)) * 50)
    assert not mu.values.any() and not lv.values.any()


def test_identical_rows_give_identical_outputs():
    e = make_encoder(3, 2, 8, 2, rng())
    x = np.repeat(rng(4).normal(size=(1, 3)), 2, axis=0)
    mu, lv = encoder_forward(e, x)
    assert np.array_equal(mu.values[0], mu.values[1]) and np.array_equal(lv.values[0], lv.values[1])


def test_mean_head_gradient_matches_finite_differences():
    e = make_encoder(3, 2, 8, 2, rng())
    x = Tensor(rng(5).normal(size=(4, 3)))
    w = e.mean_head.layers[0][0]
    base = w.values.copy()

    def f(p):
        e.mean_head.layers[0] = (p, e.mean_head.layers[0][1])
        return T.sum(encoder_forward(e, x)[0])

    assert finite_difference_check(f, base) < 1e-4


def test_zeroed_energy_is_exactly_zero():
    net = make_energy(2, 16, 4, rng())
    net.zero_output()
    z = rng(6).normal(size=(50, 2)) * 100
    assert not energy_forward(net, z).values.any()


def test_constructed_quadratic_energy():
    a = 3.0
    square = (Tensor([[1.0]], requires_grad=True), Tensor([0.0], requires_grad=True))
    readout = (Tensor([[-0.5 * a]], requires_grad=True), Tensor([0.0], requires_grad=True))
    net = EnergyNet(MlpParams([square, readout], hidden_activation="square"))
    assert energy_forward(net, Tensor([[2.0]])).item() == -6.0


@pytest.mark.parametrize("bound", [0.0, 3.0])
def test_energy_input_gradient_matches_finite_differences(bound):
    net = make_energy(2, 16, 4, rng(), output_bound=bound)
    z = rng(7).normal(size=(6, 2)) * 2
    assert finite_difference_check(lambda p: T.sum(energy_forward(net, p)), z) < 1e-4
    with T.Tape() as tape:
        zt = Tensor(z, requires_grad=True)
        total = T.sum(energy_forward(net, zt))
    assert np.allclose(net.input_gradient(z), tape.grad(total, [zt])[0], rtol=1e-12, atol=1e-14)


def test_bounded_energy_stays_in_bound():
    net = make_energy(2, 16, 2, rng(), output_bound=2.0)
    w, b = net.mlp.layers[-1]
    w.values *= 1e3
    f = energy_forward(net, rng(8).normal(size=(200, 2)) * 50).values
    assert np.all(np.abs(f) <= 2.0)


def test_init_params_contracts():
    p = init_params([5, 7, 3], rng(9))
    assert all(not b.values.any() for _, b in p.layers)
    q = init_params([5, 7, 3], rng(9))
    assert all(np.array_equal(a.values, c.values) for (a, _), (c, _) in zip(p.layers, q.layers))
    bound = np.sqrt(6.0 / 12.0)
    assert np.abs(p.layers[0][0].values).max() <= bound
    with pytest.raises(ValueError):
        init_params([5, 0, 3], rng())


def test_init_weight_mean_is_near_zero():
    means = [init_params([50, 50], rng(s)).layers[0][0].values.mean() for s in range(1000)]
    assert abs(np.mean(means)) < 0.01


def test_layers_must_chain():
    bad = [(Tensor(np.zeros((3, 2))), Tensor(np.zeros(3))), (Tensor(np.zeros((1, 4))), Tensor(np.zeros(1)))]
    with pytest.raises(DimensionError):
        MlpParams(bad)


def test_outputs_finite_for_large_inputs():
    x = rng(10).uniform(-1e3, 1e3, size=(64, 2))
    nets = [make_generator(2, 4, 16, 2, rng()), make_energy(2, 16, 4, rng())]
    assert np.isfinite(generator_forward(nets[0], x).values).all()
    assert np.isfinite(energy_forward(nets[1], x).values).all()
    enc: EncoderNet = make_encoder(2, 2, 16, 2, rng())
    assert all(np.isfinite(t.values).all() for t in encoder_forward(enc, x))
