"""Stochastic variational inference over a p-model / q-model pair.

The objective for a minibatch of M rows out of N is the doubly-stochastic
ELBO estimate

    log p(globals) - log q(globals) - KL(Bayesian weights)
      + N/M * sum_i [log p(x_i, z_i | globals) - log q(z_i | x_i)]

averaged over ``mc_samples`` reparameterized draws, and maximized with Adam.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .distributions import RNG, NormalDiag
from .errors import ModelError, NumericFault, ShapeError
from .model import ModelDefinition, detect_plate_size, match_q_to_p, trace
from .tensor import Tape, Tensor, backward, no_grad


@dataclass
class SVIConfig:
    epochs: int
    batch_size: int
    learning_rate: float = 0.001
    mc_samples: int = 1
    seed: int = 0
    # draws for the per-epoch full-data ELBO; None means mc_samples
    eval_mc_samples: Optional[int] = None

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.mc_samples < 1:
            raise ValueError("mc_samples must be positive")
        if self.eval_mc_samples is not None and self.eval_mc_samples < 1:
            raise ValueError("eval_mc_samples must be positive")

    @property
    def history_mc_samples(self) -> int:
        return self.eval_mc_samples or self.mc_samples


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update, in place, as gradient *ascent*."""
    for name, p in params.items():
        if np.shape(grads[name]) != p.shape:
            raise ShapeError(f"gradient for {name!r} has shape {list(np.shape(grads[name]))}, expected {list(p.shape)}")
    state.t += 1
    bc1 = 1.0 - state.beta1**state.t
    bc2 = 1.0 - state.beta2**state.t
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name] = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        v = state.v[name] = state.beta2 * state.v[name] + (1.0 - state.beta2) * g * g
        p.data += lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


def _batch_tensors(batch: dict) -> dict:
    return {k: v if isinstance(v, Tensor) else Tensor(v) for k, v in batch.items()}


def _single_draw(p, q, batch, scale, plate_size, rng, noise) -> Tensor:
    q_names = q.structure()
    p_names = p.structure()
    qt = trace(q, plate_size, {k: v for k, v in batch.items() if k in q_names}, rng.split("q"), noise=noise)
    # names unknown to p are reported by match_q_to_p below
    latents = {rv.name: rv.value for rv in qt.variables if not rv.observed and rv.name in p_names}
    pt = trace(p, plate_size, batch, rng.split("p"), substitutes=latents)
    match_q_to_p(pt, qt)

    terms = []
    for rv in pt.variables:
        terms.append((f"log p({rv.name})", rv.in_plate, rv.log_prob()))
    for rv in qt.variables:
        if not rv.observed:
            terms.append((f"log q({rv.name})", rv.in_plate, -rv.log_prob()))
    for model in (p, q):
        for name, net in model.nets.items():
            if net.is_bayesian:
                terms.append((f"weight kl({name})", False, -net.kl_penalty()))

    global_part = Tensor(0.0)
    plate_part = Tensor(0.0)
    for _, in_plate, value in terms:
        if in_plate:
            plate_part = plate_part + value
        else:
            global_part = global_part + value
    elbo = global_part + scale * plate_part
    if math.isnan(elbo.item()):
        bad = next((label for label, _, v in terms if math.isnan(v.item())), "scaling")
        raise NumericFault(f"ELBO is nan (offending term: {bad})")
    return elbo


def elbo_draws(
    p: ModelDefinition,
    q: ModelDefinition,
    batch: dict,
    dataset_size: Optional[int] = None,
    rng: Optional[RNG] = None,
    mc_samples: int = 1,
    noise: Optional[dict] = None,
) -> list:
    """Individual single-draw ELBO estimates (each a scalar Tensor)."""
    batch = _batch_tensors(batch)
    try:
        plate_size = detect_plate_size(p, batch)
    except ModelError:
        if any(p.structure().get(k) for k in batch):
            raise
        plate_size = 1
    if dataset_size is None:
        dataset_size = plate_size
    if plate_size > dataset_size:
        raise ValueError(f"batch has {plate_size} rows but the dataset only {dataset_size}")
    rng = rng or RNG(0)
    scale = dataset_size / plate_size
    return [_single_draw(p, q, batch, scale, plate_size, rng.split(("mc", s)), noise) for s in range(mc_samples)]


def elbo_estimate(
    p: ModelDefinition,
    q: ModelDefinition,
    batch: dict,
    dataset_size: Optional[int] = None,
    rng: Optional[RNG] = None,
    mc_samples: int = 1,
    noise: Optional[dict] = None,
) -> Tensor:
    """Monte-Carlo ELBO for a minibatch, plate terms scaled by N/M."""
    draws = elbo_draws(p, q, batch, dataset_size, rng, mc_samples, noise)
    total = draws[0]
    for d in draws[1:]:
        total = total + d
    return total / float(mc_samples) if mc_samples > 1 else total


@dataclass
class VariationalState:
    p: ModelDefinition
    q: ModelDefinition
    config: SVIConfig
    observed: tuple = ()
    step: int = 0
    elbo_history: list = field(default_factory=list)
    adam: AdamState = field(default_factory=AdamState)

    @property
    def p_parameters(self) -> dict:
        return self.p.parameters()

    @property
    def q_parameters(self) -> dict:
        return self.q.parameters()

    @property
    def parameters(self) -> dict:
        out = {f"p/{k}": v for k, v in self.p_parameters.items()}
        out.update({f"q/{k}": v for k, v in self.q_parameters.items()})
        return out

    def posterior(self, name: str):
        return posterior(self, name)

    def posterior_predictive(self, name: str, rng: Optional[RNG] = None, n: int = 1, from_prior: bool = False):
        return posterior_predictive(self, name, rng, n, from_prior)


def _prepare_data(p: ModelDefinition, data: dict) -> tuple[dict, int, set]:
    if not data:
        raise ValueError("no data given")
    arrays = {k: np.asarray(v.data if isinstance(v, Tensor) else v, dtype=np.float64) for k, v in data.items()}
    for k, v in arrays.items():
        if v.size == 0:
            raise ValueError(f"data for {k!r} is empty")
    n = detect_plate_size(p, arrays)
    structure = p.structure()
    plated = {k for k in arrays if structure.get(k)}
    return arrays, n, plated


def evaluate_elbo(state: VariationalState, data: dict, mc_samples: Optional[int] = None, rng: Optional[RNG] = None) -> float:
    """Full-data ELBO with the state's evaluation stream (same noise every call)."""
    if rng is None:
        rng = RNG(state.config.seed).split("eval")
    with no_grad():
        value = elbo_estimate(state.p, state.q, data, None, rng, mc_samples or state.config.history_mc_samples)
    return value.item()


def fit(
    p: ModelDefinition,
    q: ModelDefinition,
    data: dict,
    config: SVIConfig,
    verbose: bool = False,
    state: Optional[VariationalState] = None,
) -> VariationalState:
    """Run ``config.epochs`` passes of minibatch SVI and return the learned state.

    Rows are reshuffled every epoch; the last batch of an epoch may be short
    and is scaled by its true size. After each epoch the full-data ELBO is
    recorded (and printed when ``verbose``).
    """
    arrays, n, plated = _prepare_data(p, data)
    batch_size = min(config.batch_size, n)
    rng = RNG(config.seed)
    if state is None:
        state = VariationalState(p, q, config, observed=tuple(sorted(arrays)))
    params = state.parameters
    for model in (p, q):
        for net in model.nets.values():
            net.training_started = True

    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        perm = rng.split(("epoch", epoch)).permutation(n)
        for start in range(0, n, batch_size):
            idx = perm[start : start + batch_size]
            batch = {k: (v[idx] if k in plated else v) for k, v in arrays.items()}
            with Tape() as tape:
                for prm in params.values():
                    tape.watch(prm)
                try:
                    elbo = elbo_estimate(p, q, batch, n, rng.split(("step", state.step)), config.mc_samples)
                    grads = backward(elbo)
                except NumericFault as exc:
                    raise NumericFault(f"step {state.step}: {exc}") from exc
            adam_step(params, {k: grads[prm].data for k, prm in params.items()}, state.adam, config.learning_rate)
            bad = next((k for k, prm in params.items() if np.isnan(prm.data).any()), None)
            if bad is not None:
                raise NumericFault(f"step {state.step}: parameter {bad!r} became nan")
            state.step += 1
        value = evaluate_elbo(state, arrays)
        if math.isnan(value):
            raise NumericFault(f"step {state.step}: full-data ELBO is nan")
        state.elbo_history.append((state.step, value))
        if verbose:
            wall_ms = int(round((time.perf_counter() - t0) * 1000))
            print(f"epoch={epoch + 1} elbo={value!r} wall_ms={wall_ms}", flush=True)
    return state


class SVI:
    """Inference engine configured with the q-model; optimization runs in :meth:`fit`."""

    def __init__(self, q: ModelDefinition, epochs: int = 1000, batch_size: int = 100, learning_rate: float = 0.001,
                 mc_samples: int = 1, seed: int = 0, verbose: bool = False, eval_mc_samples: Optional[int] = None):
        self.q = q
        self.config = SVIConfig(epochs, batch_size, learning_rate, mc_samples, seed, eval_mc_samples)
        self.verbose = verbose
        self.state: Optional[VariationalState] = None

    def fit(self, p: ModelDefinition, data: dict) -> VariationalState:
        self.state = fit(p, self.q, data, self.config, verbose=self.verbose)
        return self.state

    def posterior(self, name: str):
        return posterior(self._fitted(), name)

    def posterior_predictive(self, name: str, rng: Optional[RNG] = None, n: int = 1, from_prior: bool = False):
        return posterior_predictive(self._fitted(), name, rng, n, from_prior)

    def _fitted(self) -> VariationalState:
        if self.state is None:
            raise RuntimeError("call fit() first")
        return self.state


class AmortizedPosterior:
    """Posterior of an in-plate latent, computed by the q-model from data rows."""

    def __init__(self, q: ModelDefinition, name: str, observed: tuple):
        self.q = q
        self.name = name
        self.inputs = tuple(k for k in observed if k in q.structure())

    def _bind(self, data) -> dict:
        if isinstance(data, dict):
            return data
        if len(self.inputs) != 1:
            raise ValueError(f"q-model reads {list(self.inputs)}; pass data as a dict")
        return {self.inputs[0]: data}

    def distribution(self, data):
        with no_grad():
            qt = trace(self.q, observations=self._bind(data), rng=RNG(0).split("posterior"))
        dist = qt[self.name].dist
        return dist.detach() if isinstance(dist, NormalDiag) else dist

    def sample(self, data, rng: Optional[RNG] = None, n: Optional[int] = None) -> Tensor:
        """One draw per data row, shape [rows, ...]; with ``n``, shape [n, rows, ...]."""
        dist = self.distribution(data)
        rng = rng or RNG(0)
        shape = () if n is None else (n,)
        return dist.sample(rng.split(("rv", self.name)), shape)


def posterior(state: VariationalState, name: str):
    """Learned posterior of latent ``name``.

    A global latent returns its :class:`NormalDiag`; an in-plate latent
    returns an :class:`AmortizedPosterior` that needs the conditioning data.
    """
    p_struct = state.p.structure()
    q_struct = state.q.structure()
    if name not in p_struct:
        raise KeyError(f"unknown variable {name!r}")
    if name in state.observed or name not in q_struct:
        raise ModelError(f"{name!r} is not a latent with a q-model factor")
    if q_struct[name]:
        return AmortizedPosterior(state.q, name, state.observed)
    with no_grad():
        qt = trace(state.q, plate_size=1, rng=RNG(0).split("posterior"))
    dist = qt[name].dist
    return dist.detach() if isinstance(dist, NormalDiag) else dist


def posterior_predictive(
    state: VariationalState, name: str, rng: Optional[RNG] = None, n: int = 1, from_prior: bool = False
) -> Tensor:
    """``n`` independent draws of in-plate observable ``name``.

    Each row gets its own draw of the global latents (from q, or from the
    prior when ``from_prior``); in-plate latents always come from the prior.
    """
    p_struct = state.p.structure()
    if name not in p_struct:
        raise KeyError(f"unknown variable {name!r}")
    if not p_struct[name]:
        raise ModelError(f"{name!r} is not an in-plate observable")
    if n < 0:
        raise ValueError("n must be non-negative")
    rng = rng or RNG(0)
    if n == 0:
        return Tensor(_predictive(state, name, rng, 1, from_prior).data[:0])
    return _predictive(state, name, rng, n, from_prior)


def _q_globals(state: VariationalState) -> list:
    q_struct = state.q.structure()
    return [k for k, in_plate in q_struct.items() if not in_plate and k not in state.observed]


def _predictive(state, name, rng, n, from_prior) -> Tensor:
    global_latents = [] if from_prior else _q_globals(state)
    with no_grad():
        try:
            subs = {}
            if global_latents:
                qt = trace(state.q, n, rng=rng.split("q"), replicate_globals=True)
                subs = {k: qt[k].value.detach() for k in global_latents}
            pt = trace(state.p, n, rng=rng.split("p"), substitutes=subs, replicate_globals=True)
            return pt[name].value.detach()
        except ShapeError:
            pass
        # models that cannot broadcast per-row globals: one trace per row
        rows = []
        for i in range(n):
            r = rng.split(("row", i))
            subs = {}
            if global_latents:
                qt = trace(state.q, 1, rng=r.split("q"))
                subs = {k: qt[k].value.detach() for k in global_latents}
            pt = trace(state.p, 1, rng=r.split("p"), substitutes=subs)
            rows.append(pt[name].value.data[0])
        return Tensor(np.stack(rows))
