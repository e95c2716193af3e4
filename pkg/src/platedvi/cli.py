"""Command-line front end: ``platedvi train|sample|eval|synth``.

Every failure prints one line ``error=<code> msg=<text>`` to stderr. Bad
input exits with status 2 and a NaN during training with status 3.
"""

from __future__ import annotations

import argparse
import csv
import math
import os
import sys

import numpy as np

from . import builtin
from .checkpoint import Checkpoint, CheckpointError, export_parameters, import_parameters
from .distributions import RNG
from .errors import ModelError, NumericFault
from .inference import SVIConfig, VariationalState, evaluate_elbo, fit, posterior, posterior_predictive

SEED_ENV = "PLATEDVI_SEED"


class CLIError(Exception):
    def __init__(self, code: str, msg: str, status: int = 2):
        super().__init__(msg)
        self.code = code
        self.msg = msg
        self.status = status


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CLIError("usage", message)


def read_csv(path) -> np.ndarray:
    """Rectangular float matrix from a CSV file; a non-numeric first row is a header."""
    try:
        with open(path, newline="") as fh:
            rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    except OSError as exc:
        raise CLIError("io", f"cannot read {path}: {exc.strerror}") from None
    if rows:
        try:
            [float(c) for c in rows[0]]
        except ValueError:
            rows = rows[1:]
    if not rows:
        raise CLIError("data", f"{path} contains no data rows")
    width = len(rows[0])
    out = np.empty((len(rows), width))
    for i, row in enumerate(rows):
        if len(row) != width:
            raise CLIError("data", f"{path}: row {i + 1} has {len(row)} columns, expected {width}")
        for j, cell in enumerate(row):
            try:
                v = float(cell)
            except ValueError:
                raise CLIError("data", f"{path}: row {i + 1} column {j + 1}: cannot parse {cell.strip()!r}") from None
            if not math.isfinite(v):
                raise CLIError("data", f"{path}: row {i + 1} column {j + 1}: value is not finite")
            out[i, j] = v
    return out


def format_rows(values: np.ndarray) -> str:
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 1:
        values = values[:, None]
    elif values.ndim > 2:
        values = values.reshape(values.shape[0], -1)
    return "".join(",".join(repr(float(v)) for v in row) + "\n" for row in values)


def write_csv(path, values: np.ndarray) -> None:
    try:
        with open(path, "w", newline="\n") as fh:
            fh.write(format_rows(values))
    except OSError as exc:
        raise CLIError("io", f"cannot write {path}: {exc.strerror}") from None


def _seed(args, fallback: int = 0) -> int:
    if args.seed is not None:
        return args.seed
    env = os.environ.get(SEED_ENV)
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise CLIError("usage", f"{SEED_ENV} must be an integer, got {env!r}") from None
    return fallback


def _load_checkpoint(path) -> Checkpoint:
    try:
        return Checkpoint.load(path)
    except OSError as exc:
        raise CLIError("io", f"cannot read {path}: {exc.strerror}") from None
    except CheckpointError as exc:
        raise CLIError("checkpoint", f"{path}: {exc}") from None


def restore_state(ckpt: Checkpoint) -> VariationalState:
    """Rebuild the model pair from a checkpoint and load its parameters."""
    if ckpt.model_id not in builtin.MODEL_IDS:
        raise CLIError("checkpoint", f"unknown model id {ckpt.model_id!r}")
    try:
        p, q = builtin.build(ckpt.model_id, ckpt.model_hyperparams)
    except (KeyError, TypeError, ValueError) as exc:
        raise CLIError("checkpoint", f"bad model hyperparameters: {exc}") from None
    meta = ckpt.training_meta
    config = SVIConfig(
        epochs=int(meta.get("epochs", 0)),
        batch_size=int(meta.get("batch_size", 1)),
        learning_rate=float(meta.get("learning_rate", 0.001)),
        mc_samples=int(meta.get("mc_samples", 1)),
        seed=int(meta.get("seed", 0)),
        eval_mc_samples=meta.get("eval_mc_samples"),
    )
    state = VariationalState(p, q, config, observed=("x",))
    try:
        import_parameters(state.parameters, ckpt.parameters)
    except CheckpointError as exc:
        raise CLIError("checkpoint", str(exc)) from None
    return state


def _load_data(path, model_id: str, hyperparams: dict) -> dict:
    rows = read_csv(path)
    width = builtin.expected_width(model_id, hyperparams)
    if rows.shape[1] != width:
        raise CLIError("dimension", f"{path} has {rows.shape[1]} columns, model {model_id} expects {width}")
    return builtin.observations(model_id, rows)


# commands ---------------------------------------------------------------


def cmd_train(args) -> int:
    seed = _seed(args)
    rows = read_csv(args.data)
    try:
        hyper = builtin.default_hyperparams(
            args.model, rows.shape[1], args.latent_dim, args.hidden_dim, args.likelihood, args.bayesian_decoder
        )
    except ValueError as exc:
        raise CLIError("usage", str(exc)) from None
    if builtin.expected_width(args.model, hyper) != rows.shape[1]:
        raise CLIError("dimension", f"{args.data} has {rows.shape[1]} columns, model {args.model} expects 1")
    if args.model == "vae" and args.likelihood == "bernoulli" and not np.isin(rows, (0.0, 1.0)).all():
        raise CLIError("data", f"{args.data}: bernoulli likelihood needs 0/1 data")
    try:
        config = SVIConfig(args.epochs, args.batch_size, args.lr, args.mc_samples, seed, args.eval_mc_samples)
    except ValueError as exc:
        raise CLIError("usage", str(exc)) from None

    p, q = builtin.build(args.model, hyper, seed)
    try:
        state = fit(p, q, builtin.observations(args.model, rows), config, verbose=args.verbose)
    except NumericFault as exc:
        raise CLIError("numeric", str(exc), status=3) from None

    meta = {
        "seed": seed,
        "epochs": config.epochs,
        "batch_size": config.batch_size,
        "learning_rate": config.learning_rate,
        "mc_samples": config.mc_samples,
        "eval_mc_samples": config.history_mc_samples,
        "steps": state.step,
        "final_elbo": state.elbo_history[-1][1] if state.elbo_history else None,
    }
    ckpt = Checkpoint(args.model, hyper, export_parameters(state.parameters), meta)
    try:
        ckpt.save(args.out)
    except OSError as exc:
        raise CLIError("io", f"cannot write {args.out}: {exc.strerror}") from None
    return 0


def cmd_sample(args) -> int:
    kind, _, name = args.what.partition(":")
    if kind not in ("posterior", "predictive") or not name:
        raise CLIError("usage", f"what must be posterior:<name> or predictive:<name>, got {args.what!r}")
    if args.n < 0:
        raise CLIError("usage", "n must be non-negative")
    ckpt = _load_checkpoint(args.checkpoint)
    state = restore_state(ckpt)
    rng = RNG(_seed(args)).split("sample")
    p_struct = state.p.structure()
    if name not in p_struct:
        raise CLIError("name", f"model {ckpt.model_id} has no variable {name!r}")

    try:
        if kind == "predictive":
            values = posterior_predictive(state, name, rng, args.n, from_prior=args.from_prior).data
        else:
            post = posterior(state, name)
            if hasattr(post, "distribution"):
                if args.data is None:
                    raise CLIError("data", f"posterior of {name!r} is amortized and needs --data")
                data = _load_data(args.data, ckpt.model_id, ckpt.model_hyperparams)
                draws = post.sample(data, rng, n=args.n).data
                values = draws.reshape((-1,) + draws.shape[2:])
            else:
                values = post.sample(rng.split(("rv", name)), (args.n,)).data
    except ModelError as exc:
        raise CLIError("name", str(exc)) from None
    sys.stdout.write(format_rows(values))
    return 0


def cmd_eval(args) -> int:
    ckpt = _load_checkpoint(args.checkpoint)
    state = restore_state(ckpt)
    data = _load_data(args.data, ckpt.model_id, ckpt.model_hyperparams)
    seed = _seed(args, fallback=int(ckpt.training_meta.get("seed", 0)))
    mc = args.mc_samples or state.config.history_mc_samples
    try:
        value = evaluate_elbo(state, data, mc_samples=mc, rng=RNG(seed).split("eval"))
    except NumericFault as exc:
        raise CLIError("numeric", str(exc), status=3) from None
    print(f"elbo={value!r}")
    return 0


def cmd_synth(args) -> int:
    if args.n < 1:
        raise CLIError("usage", "n must be at least 1")
    write_csv(args.out, builtin.synth(args.generator, args.n, _seed(args)))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="platedvi", description="Train and query plate-structured variational models.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    tr = sub.add_parser("train", help="fit a model to a CSV file and write a checkpoint")
    tr.add_argument("--model", required=True, choices=builtin.MODEL_IDS)
    tr.add_argument("--data", required=True)
    tr.add_argument("--out", required=True)
    tr.add_argument("--epochs", type=int, default=100)
    tr.add_argument("--batch-size", type=int, default=50)
    tr.add_argument("--lr", type=float, default=0.001)
    tr.add_argument("--mc-samples", type=int, default=1)
    tr.add_argument("--eval-mc-samples", type=int, help="draws for the per-epoch ELBO (default: --mc-samples)")
    tr.add_argument("--seed", type=int)
    tr.add_argument("--latent-dim", type=int, default=2)
    tr.add_argument("--hidden-dim", type=int, default=16)
    tr.add_argument("--likelihood", choices=builtin.LIKELIHOODS, default="normal")
    tr.add_argument("--bayesian-decoder", action="store_true")
    tr.add_argument("--verbose", action="store_true", help="print one line per epoch")
    tr.set_defaults(func=cmd_train)

    sa = sub.add_parser("sample", help="draw posterior or posterior-predictive samples")
    sa.add_argument("checkpoint")
    sa.add_argument("what", help="posterior:<name> or predictive:<name>")
    sa.add_argument("-n", "--n", type=int, default=1)
    sa.add_argument("--seed", type=int)
    sa.add_argument("--data")
    sa.add_argument("--from-prior", action="store_true", help="draw global latents from the prior")
    sa.set_defaults(func=cmd_sample)

    ev = sub.add_parser("eval", help="full-data ELBO of a checkpoint")
    ev.add_argument("checkpoint")
    ev.add_argument("--data", required=True)
    ev.add_argument("--mc-samples", type=int)
    ev.add_argument("--seed", type=int)
    ev.set_defaults(func=cmd_eval)

    sy = sub.add_parser("synth", help="write a synthetic dataset")
    sy.add_argument("generator", choices=builtin.GENERATORS)
    sy.add_argument("-n", "--n", type=int, default=1000)
    sy.add_argument("--seed", type=int)
    sy.add_argument("--out", required=True)
    sy.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        # failures are reported through CLIError, not numpy warnings
        with np.errstate(all="ignore"):
            return args.func(args)
    except CLIError as exc:
        msg = " ".join(exc.msg.split())
        print(f"error={exc.code} msg={msg}", file=sys.stderr)
        return exc.status


if __name__ == "__main__":
    sys.exit(main())
