"""Trace-based model definitions with a single data plate.

A model is an ordinary function decorated with :func:`probmodel`. Calling the
decorated function with hyperparameters yields a :class:`ModelDefinition`;
executing that definition under :func:`trace` records every random variable
it declares::

    @probmodel
    def gaussian_mean(prior_scale=1.0):
        z = Normal(0.0, prior_scale, name="z")
        with datamodel():
            Normal(z, 1.0, name="x")

    p = gaussian_mean()
    tr = trace(p, observations={"x": np.zeros(100)})   # plate size 100

Variables declared inside ``datamodel()`` are replicated once per data row
and are conditionally independent given the globals declared before it.
"""

from __future__ import annotations

import functools
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import distributions as D
from .distributions import RNG
from .errors import ModelError, ShapeError, UncoveredLatentError, UnmatchedVariableError
from .tensor import Parameter, Tensor, as_tensor, no_grad

_CONTEXTS: list["_TraceContext"] = []


@dataclass
class RandomVariable:
    name: str
    dist: D.Distribution
    in_plate: bool
    value: Tensor
    observed_value: Optional[Tensor] = None

    @property
    def observed(self) -> bool:
        return self.observed_value is not None

    @property
    def sampled_value(self) -> Tensor:
        return self.value

    def log_prob(self) -> Tensor:
        return self.dist.log_prob(self.value).sum()


@dataclass
class ModelTrace:
    variables: list
    plate_size: int
    _log_joint: Optional[Tensor] = field(default=None, repr=False)

    def __getitem__(self, name: str) -> RandomVariable:
        for rv in self.variables:
            if rv.name == name:
                return rv
        raise KeyError(name)

    def __contains__(self, name: str) -> bool:
        return any(rv.name == name for rv in self.variables)

    @property
    def names(self) -> list:
        return [rv.name for rv in self.variables]

    def log_joint(self) -> Tensor:
        if self._log_joint is None:
            self._log_joint = log_joint(self)
        return self._log_joint


class ModelDefinition:
    """A model builder bound to its hyperparameters, owning its trainables.

    Networks and free parameters declared with :func:`network` and
    :func:`parameter` are created on first execution and reused afterwards.
    """

    def __init__(self, builder: Callable, args=(), kwargs=None, seed: int = 0):
        self.builder = builder
        self.args = tuple(args)
        self.kwargs = dict(kwargs or {})
        self.seed = seed
        self.params: dict[str, Parameter] = {}
        self.nets: dict = {}
        self._structure: Optional[dict] = None

    @property
    def name(self) -> str:
        return self.builder.__name__

    @property
    def hyperparameters(self) -> dict:
        return {"args": self.args, "kwargs": self.kwargs}

    def initialize(self, seed: Optional[int] = None) -> "ModelDefinition":
        """Create (or re-create) every parameter by running the model once."""
        if seed is not None:
            self.seed = seed
        for net in self.nets.values():
            if net.training_started:
                raise RuntimeError(f"model {self.name!r} is already being trained")
        self.params.clear()
        self.nets.clear()
        self._structure = None
        self.structure()
        return self

    def structure(self) -> dict:
        """``{name: in_plate}`` for every variable, in declaration order."""
        if self._structure is None:
            with no_grad():
                tr = trace(self, plate_size=1, rng=RNG(0).split("structure"))
            self._structure = {rv.name: rv.in_plate for rv in tr.variables}
        return dict(self._structure)

    def parameters(self) -> dict:
        """Flat name -> Parameter map; network weights are ``<net>/<layer>/<param>``."""
        if self._structure is None:
            self.structure()
        out = dict(self.params)
        for name, net in self.nets.items():
            for k, p in net.parameters().items():
                out[f"{name}/{k}"] = p
        return out

    def kl_penalty(self) -> Tensor:
        total = Tensor(0.0)
        for net in self.nets.values():
            if net.is_bayesian:
                total = total + net.kl_penalty()
        return total

    def __repr__(self):
        return f"ModelDefinition({self.name})"


def probmodel(fn: Callable) -> Callable[..., ModelDefinition]:
    """Decorator turning a model function into a factory of definitions."""

    @functools.wraps(fn)
    def make(*args, **kwargs) -> ModelDefinition:
        return ModelDefinition(fn, args, kwargs)

    make.builder = fn
    return make


class _TraceContext:
    def __init__(self, model, plate_size, observations, substitutes, noise, rng, replicate_globals):
        self.model = model
        self.plate_size = plate_size
        self.observations = observations
        self.substitutes = substitutes
        self.noise = noise
        self.rng = rng
        self.replicate_globals = replicate_globals
        self.variables: list[RandomVariable] = []
        self.in_plate = False
        self.plate_seen = False
        self.net_calls: dict = {}

    def site(self, name: str, dist: D.Distribution) -> Tensor:
        if not isinstance(name, str) or not name:
            raise ModelError("random variables need a non-empty name")
        if any(rv.name == name for rv in self.variables):
            raise ModelError(f"duplicate random variable name {name!r}")
        in_plate = self.in_plate
        if not in_plate and self.plate_seen:
            raise ModelError(f"global variable {name!r} declared after the datamodel block")
        replicated = in_plate or self.replicate_globals
        n = self.plate_size

        if replicated:
            if dist.plated:
                if not dist.batch_shape or dist.batch_shape[0] != n:
                    raise ShapeError(
                        f"{name!r}: parameters have shape {list(dist.batch_shape)}, leading axis should be the plate size {n}"
                    )
                sample_shape = ()
            else:
                sample_shape = (n,)
        else:
            if dist.plated:
                raise ModelError(f"global variable {name!r} depends on variables inside the plate")
            sample_shape = ()
        expected = sample_shape + tuple(dist.batch_shape)

        observed = None
        if name in self.observations:
            obs = as_tensor(self.observations[name])
            if in_plate and (obs.ndim == 0 or obs.shape[0] != n):
                raise ShapeError(f"observation {name!r} has shape {list(obs.shape)}, expected leading axis {n}")
            observed = Tensor(obs.data, plated=in_plate)
            value = observed
        elif name in self.substitutes:
            value = as_tensor(self.substitutes[name])
            if value.shape != expected:
                raise ShapeError(f"value for {name!r} has shape {list(value.shape)}, expected {list(expected)}")
            value.plated = replicated
        else:
            r = self.rng.split(("rv", name))
            if dist.has_rsample:
                value = dist.rsample(r, sample_shape, self.noise.get(name))
            else:
                value = dist.sample(r, sample_shape)
            value.plated = replicated
        self.variables.append(RandomVariable(name, dist, in_plate, value, observed))
        return value

    def net_rng(self, key) -> RNG:
        count = self.net_calls.get(key, 0)
        self.net_calls[key] = count + 1
        return self.rng.split(("net", key, count))


def _context() -> _TraceContext:
    if not _CONTEXTS:
        raise ModelError("random variables can only be declared while a model is being traced")
    return _CONTEXTS[-1]


def current_rng(key) -> Optional[RNG]:
    """Fresh stream for a network forward pass inside the active trace, else None."""
    if not _CONTEXTS:
        return None
    return _CONTEXTS[-1].net_rng(key)


@contextmanager
def datamodel():
    """Replicate the variables declared inside once per data row."""
    ctx = _context()
    if ctx.in_plate:
        raise ModelError("nested datamodel blocks are not supported")
    if ctx.plate_seen:
        raise ModelError("a model may contain only one datamodel block")
    ctx.in_plate = True
    try:
        yield ctx.plate_size
    finally:
        ctx.in_plate = False
        ctx.plate_seen = True


def Normal(loc, scale, *, name: str) -> Tensor:
    """Declare a diagonal-Gaussian random variable; returns its value."""
    return _context().site(name, D.NormalDiag(loc, scale))


def Bernoulli(probs=None, logits=None, *, name: str) -> Tensor:
    return _context().site(name, D.Bernoulli(probs=probs, logits=logits))


def parameter(name: str, init) -> Parameter:
    """A free trainable tensor owned by the model being traced."""
    model = _context().model
    p = model.params.get(name)
    if p is None:
        if name in model.nets:
            raise ModelError(f"name {name!r} is already used by a network")
        p = Parameter(np.array(init, dtype=np.float64), name)
        model.params[name] = p
    return p


def network(name: str, factory: Callable):
    """Return the model's network ``name``, building it with ``factory()`` once."""
    model = _context().model
    net = model.nets.get(name)
    if net is None:
        if name in model.params:
            raise ModelError(f"name {name!r} is already used by a parameter")
        net = factory()
        net.name = name
        net.init_parameters(RNG(model.seed).split(("init", name)))
        model.nets[name] = net
    return net


def trace(
    model: ModelDefinition,
    plate_size: Optional[int] = None,
    observations: Optional[dict] = None,
    rng: Optional[RNG] = None,
    substitutes: Optional[dict] = None,
    noise: Optional[dict] = None,
    replicate_globals: bool = False,
) -> ModelTrace:
    """Execute ``model`` and record its random variables.

    Observed variables take their observed value; variables named in
    ``substitutes`` take the given value (this is how q-model draws are fed
    into the p-model); everything else is drawn, reparameterized when the
    distribution allows it. ``noise`` supplies standard-normal draws by name
    in place of the rng. With ``replicate_globals`` every global variable
    also gets a leading axis of ``plate_size`` (one independent global per
    row, used for predictive simulation).
    """
    observations = dict(observations or {})
    substitutes = dict(substitutes or {})
    if plate_size is None:
        try:
            plate_size = detect_plate_size(model, observations)
        except ModelError:
            plate_size = 1
    if int(plate_size) != plate_size or plate_size < 1:
        raise ValueError(f"plate_size must be a positive integer, got {plate_size}")
    ctx = _TraceContext(
        model, int(plate_size), observations, substitutes, dict(noise or {}), rng or RNG(0), replicate_globals
    )
    _CONTEXTS.append(ctx)
    try:
        model.builder(*model.args, **model.kwargs)
    finally:
        _CONTEXTS.pop()

    seen = {rv.name for rv in ctx.variables}
    unknown = sorted(set(observations) - seen)
    if unknown:
        raise ModelError(f"observations given for unknown variables {unknown}")
    unknown = sorted(set(substitutes) - seen)
    if unknown:
        raise ModelError(f"values given for unknown variables {unknown}")
    return ModelTrace(ctx.variables, ctx.plate_size)


def detect_plate_size(model: ModelDefinition, observations: dict) -> int:
    """Shared leading extent of all observed in-plate variables."""
    structure = model.structure()
    extents = {}
    for name, value in observations.items():
        if structure.get(name):
            shape = np.shape(value.data if isinstance(value, Tensor) else value)
            if not shape:
                raise ShapeError(f"in-plate observation {name!r} must have a leading data axis")
            extents[name] = shape[0]
    if not extents:
        raise ModelError("no in-plate variable is observed; pass plate_size explicitly")
    if len(set(extents.values())) > 1:
        raise ModelError(f"observed in-plate variables disagree on the number of rows: {extents}")
    return next(iter(extents.values()))


def log_joint(trace: ModelTrace) -> Tensor:
    """Sum of every variable's log-density at its traced value."""
    total = Tensor(0.0)
    for rv in trace.variables:
        total = total + rv.log_prob()
    return total


@dataclass
class Pairing:
    observed: list
    matched: list
    prior: list

    def role(self, name: str) -> str:
        for role in ("observed", "matched", "prior"):
            if name in getattr(self, role):
                return role
        raise KeyError(name)


def match_q_to_p(p_trace: ModelTrace, q_trace: ModelTrace, require_coverage: bool = True) -> Pairing:
    """Pair p- and q-model variables by name.

    Every p variable is observed, matched by a q latent, or left to its prior;
    the last is an error unless ``require_coverage`` is False.
    """
    p_names = set(p_trace.names)
    extra = [rv.name for rv in q_trace.variables if rv.name not in p_names]
    if extra:
        raise UnmatchedVariableError(f"q-model variables {extra} have no counterpart in the p-model")
    q_latent = {rv.name for rv in q_trace.variables if not rv.observed}
    pairing = Pairing([], [], [])
    for rv in p_trace.variables:
        if rv.observed:
            pairing.observed.append(rv.name)
        elif rv.name in q_latent:
            if q_trace[rv.name].in_plate != rv.in_plate:
                raise ModelError(f"{rv.name!r} is inside the plate in one model but not the other")
            pairing.matched.append(rv.name)
        elif require_coverage:
            raise UncoveredLatentError(f"latent {rv.name!r} has no q-model factor and is not observed")
        else:
            pairing.prior.append(rv.name)
    return pairing
