"""Finite-difference checks for every tape primitive and the full model loss."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .cohort import CohortConfig, Subject, generate_cohort
from .config import LossConfig, ModelConfig
from .model import RTNAG, init_params

PRIMITIVE_TOL = 1e-6
CHOLESKY_TOL = 1e-5
MODEL_TOL = 1e-4


@dataclass
class CheckResult:
    name: str
    error: float
    tolerance: float

    @property
    def ok(self) -> bool:
        return self.error < self.tolerance


def _spd(rng, n, batch=()):
    a = rng.normal(size=batch + (n, n))
    return a @ np.swapaxes(a, -1, -2) + n * np.eye(n)


def _cases(rng) -> dict[str, tuple[Callable, dict[str, np.ndarray]]]:
    """name -> (f(inputs as Tensors) -> Tensor, input arrays)."""
    n = lambda *s: rng.normal(size=s)  # noqa: E731
    pos = lambda *s: rng.uniform(0.5, 2.0, size=s)  # noqa: E731
    return {
        "add": (lambda x: T.add(x["a"], x["b"]), {"a": n(3, 4), "b": n(4)}),
        "sub": (lambda x: T.sub(x["a"], x["b"]), {"a": n(3, 4), "b": n(3, 1)}),
        "mul": (lambda x: T.mul(x["a"], x["b"]), {"a": n(3, 4), "b": n(3, 4)}),
        "div": (lambda x: T.div(x["a"], x["b"]), {"a": n(3, 4), "b": pos(4)}),
        "power": (lambda x: T.power(x["a"], 2.5), {"a": pos(3, 4)}),
        "matmul": (lambda x: T.matmul(x["a"], x["b"]), {"a": n(2, 3, 4), "b": n(4, 5)}),
        "transpose": (lambda x: T.transpose(x["a"]), {"a": n(2, 3, 4)}),
        "reshape": (lambda x: T.reshape(x["a"], (4, 6)), {"a": n(2, 3, 4)}),
        "getitem": (lambda x: T.getitem(x["a"], (slice(None), [0, 2, 2])), {"a": n(3, 4)}),
        "concat": (lambda x: T.concat([x["a"], x["b"]], axis=-1), {"a": n(2, 3), "b": n(2, 2)}),
        "stack": (lambda x: T.stack([x["a"], x["b"]], axis=1), {"a": n(2, 3), "b": n(2, 3)}),
        "sum": (lambda x: T.tsum(x["a"], axis=0), {"a": n(3, 4)}),
        "mean": (lambda x: T.mean(x["a"], axis=-1, keepdims=True), {"a": n(3, 4)}),
        "clamp_min": (lambda x: T.clamp_min(x["a"], 0.1), {"a": n(3, 4)}),
        "relu": (lambda x: T.relu(x["a"]), {"a": n(3, 4)}),
        "tanh": (lambda x: T.tanh(x["a"]), {"a": n(3, 4)}),
        "sigmoid": (lambda x: T.sigmoid(x["a"]), {"a": n(3, 4)}),
        "softplus": (lambda x: T.softplus(x["a"]), {"a": n(3, 4)}),
        "exp": (lambda x: T.exp(x["a"]), {"a": n(3, 4)}),
        "log": (lambda x: T.log(x["a"]), {"a": pos(3, 4)}),
        "softmax_rows": (lambda x: T.softmax_rows(x["a"]), {"a": n(3, 4)}),
        "diagonal": (lambda x: T.diagonal(x["a"]), {"a": n(2, 3, 3)}),
        "diag_embed": (lambda x: T.diag_embed(x["a"]), {"a": n(2, 3)}),
        "tril_vec": (lambda x: T.tril_vec(x["a"]), {"a": n(2, 3, 3)}),
        "tril_unvec": (lambda x: T.tril_unvec(x["a"], 3), {"a": n(2, 6)}),
        "cholesky_factor": (lambda x: T.cholesky_factor(x["a"]), {"a": _spd(rng, 4, (2,))}),
        "covariance_rows": (lambda x: T.covariance_rows(x["a"], 1e-4), {"a": n(2, 3, 5)}),
        "conv1d_same": (lambda x: T.conv1d_same(x["a"], x["k"]), {"a": n(2, 6), "k": n(3, 1, 3)}),
        "conv3d": (lambda x: T.conv3d(x["a"], x["k"]), {"a": n(2, 4, 4, 4), "k": n(2, 2, 3, 3, 3)}),
        "maxpool3d": (lambda x: T.maxpool3d(x["a"]), {"a": n(1, 4, 4, 4)}),
    }


def check_primitives(trials: int = 10, seed: int = 0) -> list[CheckResult]:
    """Worst error per primitive over ``trials`` random inputs.

    Each output is contracted with a fixed random weight so that every
    output entry carries a distinct upstream gradient.
    """
    worst: dict[str, float] = {}
    for trial in range(trials):
        rng = np.random.default_rng([seed, trial])
        for name, (fn, inputs) in _cases(rng).items():
            out_shape = fn({k: T.Tensor(v) for k, v in inputs.items()}).shape
            # magnitudes bounded away from zero keep the relative error meaningful
            weight = rng.choice([-1.0, 1.0], out_shape) * rng.uniform(0.5, 1.5, out_shape)
            err = T.gradient_check(lambda x: T.tsum(fn(x) * weight), inputs)
            worst[name] = max(worst.get(name, 0.0), err)
    return [CheckResult(k, v, CHOLESKY_TOL if k == "cholesky_factor" else PRIMITIVE_TOL)
            for k, v in worst.items()]


def tiny_problem(seed: int = 0, q: int = 4, visits: int = 3, subjects: int = 2,
                 feature_dim: int = 6) -> tuple[RTNAG, list[Subject]]:
    """A small vector-mode model and batch with well-conditioned weights."""
    cohort = generate_cohort(CohortConfig(n_subjects=max(subjects, 10), feature_dim=feature_dim,
                                          seed=seed, score_missing=0.0))
    picked = [Subject(s.subject_id, s.baseline_age, s.visits[:visits])
              for s in cohort.subjects[:subjects]]
    cfg = ModelConfig(q=q, feature_dim=feature_dim, ode_hidden=8, init_std=0.3)
    params = init_params(cfg, seed)
    rng = np.random.default_rng([seed, 0xC4EC])
    # move every weight off its special initial value (zeros, identities)
    params = {k: v + rng.normal(0, 0.3, v.shape) for k, v in params.items()}
    ages = np.array([v.age for s in picked for v in s.visits])
    return RTNAG(cfg, params, float(ages.mean()), float(ages.std())), picked


def check_model(seed: int = 0, h: float = 1e-5) -> CheckResult:
    model, subjects = tiny_problem(seed)
    batch = model.batch(subjects)
    loss_cfg = LossConfig(alpha=(1.0, 1.5, 0.8))
    err = T.gradient_check(lambda p: model.loss(p, batch, loss_cfg), model.params, h=h)
    return CheckResult("end-to-end loss", err, MODEL_TOL)


def run_all(seed: int = 0, trials: int = 10) -> list[CheckResult]:
    return check_primitives(trials, seed) + [check_model(seed)]
