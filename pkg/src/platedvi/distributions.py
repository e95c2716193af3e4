"""Diagonal Normal and Bernoulli distributions, plus a splittable RNG."""

from __future__ import annotations

import functools
import hashlib
import math

import numpy as np

from . import tensor as T
from .errors import NumericFault, ShapeError
from .tensor import Tensor, as_tensor

HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


def _key_words(key) -> tuple:
    if isinstance(key, (tuple, list)):
        return tuple(w for k in key for w in _key_words(k))
    if isinstance(key, (int, np.integer)):
        if key < 0:
            raise ValueError("integer RNG keys must be non-negative")
        return (int(key),)
    return (_str_word(str(key)),)


@functools.lru_cache(maxsize=4096)
def _str_word(key: str) -> int:
    digest = hashlib.blake2b(key.encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


class RNG:
    """Seeded generator with deterministic, order-independent splitting.

    ``rng.split("z")`` always yields the same child stream for the same seed
    and key, no matter how much the parent has been consumed, so adding a
    random variable to a model never perturbs another variable's draws.
    """

    def __init__(self, seed: int = 0, _path: tuple = ()):
        self.seed = int(seed) % 2**64
        self._path = _path
        self._gen = None

    def split(self, key) -> "RNG":
        return RNG(self.seed, self._path + _key_words(key))

    @property
    def generator(self) -> np.random.Generator:
        if self._gen is None:
            ss = np.random.SeedSequence(self.seed, spawn_key=self._path)
            self._gen = np.random.Generator(np.random.PCG64(ss))
        return self._gen

    def normal(self, shape=()) -> np.ndarray:
        return self.generator.standard_normal(tuple(shape))

    def uniform(self, shape=()) -> np.ndarray:
        return self.generator.random(tuple(shape))

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)

    def __repr__(self):
        return f"RNG(seed={self.seed}, path={self._path})"


class UnsupportedReparameterization(TypeError):
    pass


class Distribution:
    has_rsample = False
    batch_shape: tuple = ()

    @property
    def plated(self) -> bool:
        return any(p.plated for p in self._params())

    def _params(self):
        return ()

    def log_prob(self, value) -> Tensor:
        raise NotImplementedError

    def sample(self, rng: RNG, sample_shape=()) -> Tensor:
        raise NotImplementedError

    def rsample(self, rng: RNG, sample_shape=(), eps=None) -> Tensor:
        raise UnsupportedReparameterization(f"{type(self).__name__} has no reparameterized sampler")


class NormalDiag(Distribution):
    """Independent Gaussians parameterized by mean and standard deviation."""

    has_rsample = True

    def __init__(self, loc, scale):
        self.loc = as_tensor(loc)
        self.scale = as_tensor(scale)
        self.batch_shape = T.broadcast_shape(self.loc.shape, self.scale.shape)
        if not (self.scale.data > 0).all():
            if np.isnan(self.scale.data).any():
                raise NumericFault("NormalDiag scale contains nan")
            raise ValueError("NormalDiag scale must be strictly positive")

    def _params(self):
        return (self.loc, self.scale)

    def log_prob(self, value) -> Tensor:
        return T.fused("normal_log_prob", (value, self.loc, self.scale), _normal_lp, _normal_lp_grads)

    def sample(self, rng: RNG, sample_shape=()) -> Tensor:
        shape = tuple(sample_shape) + self.batch_shape
        eps = rng.normal(shape)
        return Tensor(self.loc.data + self.scale.data * eps)

    def rsample(self, rng: RNG, sample_shape=(), eps=None) -> Tensor:
        """``loc + scale * eps`` with ``eps`` drawn off-tape (or supplied)."""
        shape = tuple(sample_shape) + self.batch_shape
        if eps is None:
            eps = rng.normal(shape)
        eps = np.asarray(eps, dtype=np.float64)
        if eps.shape != shape:
            raise ShapeError(f"noise shape {list(eps.shape)} does not match sample shape {list(shape)}")
        return self.loc + self.scale * Tensor(eps)

    def detach(self) -> "NormalDiag":
        return NormalDiag(self.loc.detach(), self.scale.detach())

    def __repr__(self):
        return f"NormalDiag(loc={self.loc.data!r}, scale={self.scale.data!r})"


def _normal_lp(v, mu, sigma):
    z = (v - mu) / sigma
    return -HALF_LOG_2PI - np.log(sigma) - 0.5 * z * z


def _normal_lp_grads(g, v, mu, sigma, out):
    r = (v - mu) / (sigma * sigma)
    return -g * r, g * r, g * ((v - mu) * r - 1.0) / sigma


class Bernoulli(Distribution):
    """Bernoulli over {0, 1}; stores logits internally."""

    def __init__(self, probs=None, logits=None):
        if (probs is None) == (logits is None):
            raise ValueError("give exactly one of probs or logits")
        if probs is not None:
            probs = as_tensor(probs)
            if not np.all((probs.data > 0) & (probs.data < 1)):
                raise ValueError("Bernoulli probs must lie in (0, 1)")
            logits = T.log(probs) - T.log(1.0 - probs)
        self.logits = as_tensor(logits)
        self.batch_shape = self.logits.shape

    def _params(self):
        return (self.logits,)

    @property
    def probs(self) -> Tensor:
        return T.sigmoid(self.logits)

    def log_prob(self, value) -> Tensor:
        # v*log p + (1-v)*log(1-p) with log p = -softplus(-l), log(1-p) = -softplus(l)
        value = as_tensor(value)
        return -(value * T.softplus(-self.logits) + (1.0 - value) * T.softplus(self.logits))

    def sample(self, rng: RNG, sample_shape=()) -> Tensor:
        shape = tuple(sample_shape) + self.batch_shape
        u = rng.uniform(shape)
        p = T._sigmoid(self.logits.data)
        return Tensor((u < p).astype(np.float64))

    def __repr__(self):
        return f"Bernoulli(logits={self.logits.data!r})"


def log_prob(dist: Distribution, value) -> Tensor:
    return dist.log_prob(value)


def sample(dist: Distribution, rng: RNG, sample_shape=()) -> Tensor:
    return dist.sample(rng, sample_shape)


def rsample(dist: Distribution, rng: RNG, sample_shape=(), eps=None) -> Tensor:
    return dist.rsample(rng, sample_shape, eps)


def kl_normal_normal(q: NormalDiag, p: NormalDiag) -> Tensor:
    """Elementwise KL(q || p) between diagonal Gaussians."""
    var_ratio_num = T.square(q.scale) + T.square(q.loc - p.loc)
    return T.log(p.scale / q.scale) + var_ratio_num / (2.0 * T.square(p.scale)) - 0.5
