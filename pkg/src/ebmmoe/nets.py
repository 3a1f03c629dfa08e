"""Multilayer perceptrons for the generators, encoders and energy function."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import DimensionError, NonFiniteError
from .tensor import Tensor


@dataclass
class MlpParams:
    """Affine layers ``h -> h @ W.T + b`` with weights stored ``[out x in]``."""

    layers: list
    hidden_activation: str = "tanh"
    output_activation: str = "identity"

    def __post_init__(self):
        for (w0, _), (w1, _) in zip(self.layers, self.layers[1:]):
            if w1.shape[1] != w0.shape[0]:
                raise DimensionError(f"layer extents do not chain: {w0.shape} then {w1.shape}")

    @property
    def in_dim(self) -> int:
        return self.layers[0][0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.layers[-1][0].shape[0]

    @property
    def extents(self) -> list[int]:
        return [self.in_dim] + [w.shape[0] for w, _ in self.layers]

    def forward(self, x: Tensor) -> Tensor:
        x = T.as_tensor(x)
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise DimensionError(f"expected input [batch x {self.in_dim}], got {x.shape}")
        h = x
        last = len(self.layers) - 1
        for k, (w, b) in enumerate(self.layers):
            h = T.add(T.matmul(h, T.transpose(w)), b)
            h = T.activation(h, self.output_activation if k == last else self.hidden_activation)
        return h

    __call__ = forward

    def input_gradient(self, x: np.ndarray, out_weight=None) -> np.ndarray:
        """Gradient of the summed outputs w.r.t. ``x``, by direct backpropagation.

        Equivalent to differentiating ``sum(forward(x))`` on a tape, without
        recording anything or touching parameter gradients. ``out_weight``, a
        callable of the output values, rescales the output adjoint first.
        """
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise DimensionError(f"expected input [batch x {self.in_dim}], got {x.shape}")
        h = x
        slopes = []
        last = len(self.layers) - 1
        with np.errstate(over="ignore", invalid="ignore"):  # reported as NonFiniteError below
            for k, (w, b) in enumerate(self.layers):
                pre = h @ w.values.T + b.values
                kind = self.output_activation if k == last else self.hidden_activation
                h, slope = _act_with_slope(pre, kind)
                slopes.append(slope)
            g = np.ones_like(h) if out_weight is None else out_weight(h)
            for (w, _), slope in zip(reversed(self.layers), reversed(slopes)):
                if slope is not None:
                    g = g * slope
                g = g @ w.values
        if not np.isfinite(g).all():
            bad = ~np.isfinite(g).all(axis=1)
            raise NonFiniteError("input_gradient", int(np.flatnonzero(bad)[0]))
        return g

    def named_parameters(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        out = []
        for k, (w, b) in enumerate(self.layers):
            out.append((f"{prefix}layer{k}.weight", w))
            out.append((f"{prefix}layer{k}.bias", b))
        return out


def _act_with_slope(pre: np.ndarray, kind: str):
    if kind == "identity":
        return pre, None
    if kind == "tanh":
        y = np.tanh(pre)
        return y, 1.0 - y * y
    if kind == "softplus":
        return T._softplus_parts(pre)
    if kind == "relu":
        mask = pre > 0.0
        return np.where(mask, pre, 0.0), mask.astype(np.float64)
    if kind == "square":
        return pre * pre, 2.0 * pre
    raise ValueError(f"unknown activation {kind!r}")


def init_params(
    extents: Sequence[int],
    rng: np.random.Generator,
    hidden_activation: str = "tanh",
    output_activation: str = "identity",
) -> MlpParams:
    """Glorot-uniform weights, zero biases."""
    extents = [int(e) for e in extents]
    if len(extents) < 2 or any(e <= 0 for e in extents):
        raise ValueError(f"layer extents must be >= 2 positive integers, got {extents}")
    layers = []
    for fan_in, fan_out in zip(extents, extents[1:]):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        w = Tensor(rng.uniform(-bound, bound, size=(fan_out, fan_in)), requires_grad=True)
        b = Tensor(np.zeros(fan_out), requires_grad=True)
        layers.append((w, b))
    return MlpParams(layers, hidden_activation, output_activation)


@dataclass
class GeneratorNet:
    mlp: MlpParams
    observation_variance: float = 1.0

    @property
    def in_dim(self) -> int:
        return self.mlp.in_dim

    @property
    def out_dim(self) -> int:
        return self.mlp.out_dim

    def named_parameters(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        return self.mlp.named_parameters(prefix)


@dataclass
class EncoderNet:
    """Shared trunk with separate mean and log-variance heads (diagonal Gaussian)."""

    trunk: MlpParams
    mean_head: MlpParams
    logvar_head: MlpParams

    def __post_init__(self):
        if self.mean_head.out_dim != self.logvar_head.out_dim:
            raise DimensionError("mean and log-variance heads must have equal extent")

    @property
    def in_dim(self) -> int:
        return self.trunk.in_dim

    @property
    def latent_dim(self) -> int:
        return self.mean_head.out_dim

    def named_parameters(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        return (
            self.trunk.named_parameters(prefix + "trunk.")
            + self.mean_head.named_parameters(prefix + "mean_head.")
            + self.logvar_head.named_parameters(prefix + "logvar_head.")
        )


@dataclass
class EnergyNet:
    """Scalar energy ``f(z)``; with ``output_bound`` B > 0 the readout is ``B tanh(g / B)``."""

    mlp: MlpParams
    output_bound: float = 0.0

    def forward(self, z) -> Tensor:
        g = self.mlp.forward(z)
        if not self.output_bound:
            return g
        inv = 1.0 / self.output_bound
        return T.mul(T.tanh(T.mul(g, inv)), self.output_bound)

    def input_gradient(self, z: np.ndarray) -> np.ndarray:
        """Per-row ``df/dz`` (rows never interact, so the summed gradient is per-row)."""
        if not self.output_bound:
            return self.mlp.input_gradient(z)
        inv = 1.0 / self.output_bound
        return self.mlp.input_gradient(z, lambda g: 1.0 - np.tanh(g * inv) ** 2)

    @property
    def in_dim(self) -> int:
        return self.mlp.in_dim

    def named_parameters(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        return self.mlp.named_parameters(prefix)

    def zero_output(self) -> None:
        """Zero the final layer so that the energy is identically 0."""
        w, b = self.mlp.layers[-1]
        w.values[...] = 0.0
        b.values[...] = 0.0


def make_generator(latent_dim, data_dim, hidden, n_hidden, rng, activation="tanh", observation_variance=1.0):
    mlp = init_params([latent_dim] + [hidden] * n_hidden + [data_dim], rng, activation)
    return GeneratorNet(mlp, float(observation_variance))


def make_encoder(data_dim, latent_dim, hidden, n_hidden, rng, activation="tanh"):
    trunk = init_params([data_dim] + [hidden] * n_hidden, rng, activation, activation)
    mean_head = init_params([hidden, latent_dim], rng)
    logvar_head = init_params([hidden, latent_dim], rng)
    return EncoderNet(trunk, mean_head, logvar_head)


def make_energy(latent_dim, hidden, n_layers, rng, activation="softplus", output_bound=0.0):
    """``n_layers`` hidden layers of ``hidden`` units, then a scalar readout."""
    if output_bound < 0:
        raise ValueError("output_bound must be >= 0 (0 means unbounded)")
    return EnergyNet(init_params([latent_dim] + [hidden] * n_layers + [1], rng, activation), float(output_bound))


def generator_forward(net: GeneratorNet, z, sample_noise: bool = False, rng=None) -> Tensor:
    mean = net.mlp.forward(z)
    if not sample_noise:
        return mean
    if rng is None:
        raise ValueError("sample_noise needs an rng")
    eps = rng.standard_normal(mean.shape) * np.sqrt(net.observation_variance)
    return T.add(mean, Tensor._wrap(eps))


def encoder_forward(net: EncoderNet, x) -> tuple[Tensor, Tensor]:
    h = net.trunk.forward(x)
    return net.mean_head.forward(h), net.logvar_head.forward(h)


def energy_forward(net: EnergyNet, z) -> Tensor:
    return net.forward(z)
