"""The two example models shipped with the CLI, and synthetic data for them.

gaussian_mean
    z ~ N(0, 1); x_i | z ~ N(z, 1). Mean-field q(z) = N(z_loc, softplus(z_rho)).

vae
    z_i ~ N(0, I_k); x_i | z_i from a decoder network, either
    N(loc(h), softplus(rho(h))) or Bernoulli(logits(h)) with
    h = relu(Dense(k -> hidden)(z_i)). The encoder computes
    h = relu(Dense(D -> hidden)(x_i)) and q(z_i | x_i) = N(loc(h), softplus(rho(h))).
    With ``bayesian_decoder`` every decoder layer is a BayesianDense layer.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .distributions import RNG
from .model import Bernoulli, ModelDefinition, Normal, datamodel, network, parameter, probmodel
from .nn import BayesianDense, Dense, Sequential, inverse_softplus

MODEL_IDS = ("gaussian_mean", "vae")
LIKELIHOODS = ("normal", "bernoulli")


@probmodel
def gaussian_mean_p():
    z = Normal(0.0, 1.0, name="z")
    with datamodel():
        Normal(z, 1.0, name="x")


@probmodel
def gaussian_mean_q():
    loc = parameter("z_loc", 0.0)
    rho = parameter("z_rho", inverse_softplus(1.0))
    Normal(loc, T.softplus(rho), name="z")


@probmodel
def vae_p(obs_dim, latent_dim, hidden_dim, likelihood="normal", bayesian_decoder=False):
    layer = BayesianDense if bayesian_decoder else Dense
    decoder = network("decoder", lambda: Sequential([layer(latent_dim, hidden_dim, "relu")]))
    if likelihood == "normal":
        loc_head = network("decoder_loc", lambda: Sequential([layer(hidden_dim, obs_dim)]))
        rho_head = network("decoder_rho", lambda: Sequential([layer(hidden_dim, obs_dim)]))
    else:
        logit_head = network("decoder_logits", lambda: Sequential([layer(hidden_dim, obs_dim)]))

    with datamodel():
        z = Normal(np.zeros(latent_dim), 1.0, name="z")
        h = decoder(z)
        if likelihood == "normal":
            Normal(loc_head(h), T.softplus(rho_head(h)), name="x")
        else:
            Bernoulli(logits=logit_head(h), name="x")


@probmodel
def vae_q(obs_dim, latent_dim, hidden_dim):
    encoder = network("encoder", lambda: Sequential([Dense(obs_dim, hidden_dim, "relu")]))
    loc_head = network("encoder_loc", lambda: Sequential([Dense(hidden_dim, latent_dim)]))
    rho_head = network("encoder_rho", lambda: Sequential([Dense(hidden_dim, latent_dim)]))

    with datamodel():
        # binds the observed rows the encoder reads
        x = Normal(np.zeros(obs_dim), 1.0, name="x")
        h = encoder(x)
        Normal(loc_head(h), T.softplus(rho_head(h)), name="z")


def default_hyperparams(model_id: str, obs_dim: int = 1, latent_dim: int = 2, hidden_dim: int = 16,
                        likelihood: str = "normal", bayesian_decoder: bool = False) -> dict:
    if model_id == "gaussian_mean":
        return {}
    if model_id == "vae":
        if likelihood not in LIKELIHOODS:
            raise ValueError(f"likelihood must be one of {LIKELIHOODS}")
        return {
            "obs_dim": int(obs_dim),
            "latent_dim": int(latent_dim),
            "hidden_dim": int(hidden_dim),
            "likelihood": likelihood,
            "bayesian_decoder": bool(bayesian_decoder),
        }
    raise ValueError(f"unknown model {model_id!r}; choose from {MODEL_IDS}")


def build(model_id: str, hyperparams: dict, seed: int = 0) -> tuple[ModelDefinition, ModelDefinition]:
    """Fresh (p, q) definitions with parameters initialized from ``seed``."""
    if model_id == "gaussian_mean":
        p, q = gaussian_mean_p(), gaussian_mean_q()
    elif model_id == "vae":
        h = hyperparams
        p = vae_p(h["obs_dim"], h["latent_dim"], h["hidden_dim"], h["likelihood"], h["bayesian_decoder"])
        q = vae_q(h["obs_dim"], h["latent_dim"], h["hidden_dim"])
    else:
        raise ValueError(f"unknown model {model_id!r}; choose from {MODEL_IDS}")
    p.initialize(RNG(seed).split("p-init").generator.integers(2**63))
    q.initialize(RNG(seed).split("q-init").generator.integers(2**63))
    return p, q


def observations(model_id: str, rows: np.ndarray) -> dict:
    """Map a [N, D] data matrix onto the model's observed variable."""
    rows = np.asarray(rows, dtype=np.float64)
    if model_id == "gaussian_mean":
        return {"x": rows[:, 0]}
    return {"x": rows}


def expected_width(model_id: str, hyperparams: dict) -> int:
    return 1 if model_id == "gaussian_mean" else hyperparams["obs_dim"]


# synthetic data ---------------------------------------------------------

GENERATORS = ("gaussian", "two_clusters")


def synth_gaussian(n: int, seed: int) -> np.ndarray:
    """n draws from N(1, 1) as a single column."""
    return 1.0 + RNG(seed).split("gaussian").normal((n, 1))


def synth_two_clusters(n: int, seed: int, dim: int = 4) -> tuple[np.ndarray, np.ndarray]:
    """Equal-weight mixture of N(-2*1, I) and N(+2*1, I); returns (rows, labels)."""
    rng = RNG(seed).split("two_clusters")
    labels = (rng.uniform((n,)) < 0.5).astype(np.int64)
    centers = np.where(labels[:, None] == 1, 2.0, -2.0)
    return centers + rng.normal((n, dim)), labels


def synth(generator: str, n: int, seed: int) -> np.ndarray:
    if n < 1:
        raise ValueError("n must be at least 1")
    if generator == "gaussian":
        return synth_gaussian(n, seed)
    if generator == "two_clusters":
        return synth_two_clusters(n, seed)[0]
    raise ValueError(f"unknown generator {generator!r}; choose from {GENERATORS}")
