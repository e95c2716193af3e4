"""Dense and mean-field Bayesian dense layers in a Sequential container."""

from __future__ import annotations

import math
from typing import Optional

import numpy as np

from . import tensor as T
from .distributions import RNG, NormalDiag, kl_normal_normal
from .errors import ShapeError
from .tensor import Parameter, Tensor, as_tensor

ACTIVATIONS = {
    "identity": lambda x: x,
    "relu": T.relu,
    "tanh": T.tanh,
    "sigmoid": T.sigmoid,
    "softplus": T.softplus,
}

INITIAL_SCALE = 0.01


def inverse_softplus(y):
    y = np.asarray(y, dtype=np.float64)
    return y + np.log(-np.expm1(-y))


def _activation(name: str):
    try:
        return ACTIVATIONS[name]
    except KeyError:
        raise ValueError(f"unknown activation {name!r}; choose from {sorted(ACTIVATIONS)}") from None


class Dense:
    """``activation(x @ W + b)`` for input of shape [batch, in_dim]."""

    def __init__(self, in_dim: int, out_dim: int, activation: str = "identity"):
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.activation = activation
        self._act = _activation(activation)
        self.W = Parameter(np.zeros((in_dim, out_dim)), "W")
        self.b = Parameter(np.zeros(out_dim), "b")

    def parameters(self) -> dict:
        return {"W": self.W, "b": self.b}

    def init_parameters(self, rng: RNG) -> None:
        std = math.sqrt(2.0 / (self.in_dim + self.out_dim))
        self.W.data[...] = std * rng.split("W").normal(self.W.shape)
        self.b.data[...] = 0.0

    def kl_penalty(self) -> Optional[Tensor]:
        return None

    def __call__(self, x, rng: Optional[RNG] = None) -> Tensor:
        return self._act(T.matmul(x, self.W) + self.b)

    def __repr__(self):
        return f"Dense({self.in_dim} -> {self.out_dim}, {self.activation})"


class BayesianDense:
    """Dense layer with a factorized Gaussian posterior over W and b.

    Each forward pass draws fresh weights ``loc + softplus(rho) * eps``; the
    prior over every weight is a standard normal.
    """

    def __init__(self, in_dim: int, out_dim: int, activation: str = "identity"):
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.activation = activation
        self._act = _activation(activation)
        rho0 = float(inverse_softplus(INITIAL_SCALE))
        self.W_loc = Parameter(np.zeros((in_dim, out_dim)), "W_loc")
        self.W_rho = Parameter(np.full((in_dim, out_dim), rho0), "W_rho")
        self.b_loc = Parameter(np.zeros(out_dim), "b_loc")
        self.b_rho = Parameter(np.full(out_dim, rho0), "b_rho")

    def parameters(self) -> dict:
        return {"W_loc": self.W_loc, "W_rho": self.W_rho, "b_loc": self.b_loc, "b_rho": self.b_rho}

    def init_parameters(self, rng: RNG) -> None:
        std = math.sqrt(2.0 / (self.in_dim + self.out_dim))
        rho0 = inverse_softplus(INITIAL_SCALE)
        self.W_loc.data[...] = std * rng.split("W").normal(self.W_loc.shape)
        self.W_rho.data[...] = rho0
        self.b_loc.data[...] = 0.0
        self.b_rho.data[...] = rho0

    def posteriors(self) -> tuple[NormalDiag, NormalDiag]:
        return (
            NormalDiag(self.W_loc, T.softplus(self.W_rho)),
            NormalDiag(self.b_loc, T.softplus(self.b_rho)),
        )

    def kl_penalty(self) -> Tensor:
        prior = NormalDiag(0.0, 1.0)
        qW, qb = self.posteriors()
        return kl_normal_normal(qW, prior).sum() + kl_normal_normal(qb, prior).sum()

    def __call__(self, x, rng: Optional[RNG] = None) -> Tensor:
        if rng is None:
            raise ValueError("a Bayesian layer needs an rng to draw its weights")
        qW, qb = self.posteriors()
        W = qW.rsample(rng.split("W"))
        b = qb.rsample(rng.split("b"))
        return self._act(T.matmul(x, W) + b)

    def __repr__(self):
        return f"BayesianDense({self.in_dim} -> {self.out_dim}, {self.activation})"


class Sequential:
    """Layers applied in order.

    Inside a model trace, a Bayesian network called without an explicit rng
    draws its weight noise from the trace's random stream.
    """

    def __init__(self, layers, name: str = "net"):
        self.layers = list(layers)
        self.name = name
        self.training_started = False
        self._initialized = False

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    @property
    def is_bayesian(self) -> bool:
        return any(isinstance(layer, BayesianDense) for layer in self.layers)

    def parameters(self) -> dict:
        """Flat ``{"<layer index>/<param>": Parameter}`` registry, stable across calls."""
        out = {}
        for i, layer in enumerate(self.layers):
            for k, p in layer.parameters().items():
                out[f"{i}/{k}"] = p
        return out

    def init_parameters(self, rng: RNG) -> None:
        if self.training_started:
            raise RuntimeError(f"network {self.name!r} cannot be re-initialized once training has started")
        for i, layer in enumerate(self.layers):
            layer.init_parameters(rng.split(i))
        self._initialized = True

    def kl_penalty(self) -> Tensor:
        total = Tensor(0.0)
        for layer in self.layers:
            kl = layer.kl_penalty()
            if kl is not None:
                total = total + kl
        return total

    def forward(self, x, rng: Optional[RNG] = None) -> Tensor:
        x = as_tensor(x)
        if rng is None and self.is_bayesian:
            from .model import current_rng

            rng = current_rng(self.name)
        for i, layer in enumerate(self.layers):
            if x.ndim != 2 or x.shape[1] != layer.in_dim:
                raise ShapeError(
                    f"layer {i} of {self.name!r} expects input width {layer.in_dim}, got shape {list(x.shape)}"
                )
            x = layer(x, None if rng is None else rng.split(i))
        return x

    __call__ = forward

    def __repr__(self):
        inner = ", ".join(map(repr, self.layers))
        return f"Sequential({self.name!r}: {inner})"


def forward(net: Sequential, x, rng: Optional[RNG] = None) -> Tensor:
    return net.forward(x, rng)


def kl_penalty(net: Sequential) -> Tensor:
    return net.kl_penalty()


def init_parameters(net: Sequential, rng: RNG) -> None:
    net.init_parameters(rng)
