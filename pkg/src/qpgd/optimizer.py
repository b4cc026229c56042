"""The QP-filtered parameter update law.

Each step solves, in closed form, the minimum-norm correction that makes the
descent direction respect the barrier condition <grad g, d> >= c*g on the
constraint g <= 0:

    alpha = max(-<grad f, grad g> + c*g, 0) / max(||grad g||^2, eps_alpha)
    d     = grad f + alpha * grad g
    theta <- theta - gamma * d          (or an Adam step driven by d)

The optimizer is a single-writer state machine: one logical thread owns
(params, AdamState); gradient evaluation inside the supplied closures may be
internally parallel, but step application is strictly sequential.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .autodiff import ConfigurationError


class NonFiniteError(RuntimeError):
    """A loss or gradient came back non-finite; names the offending term."""

    def __init__(self, term: str, epoch: Optional[int] = None):
        self.term = term
        self.epoch = epoch
        at = f" at epoch {epoch}" if epoch is not None else ""
        super().__init__(f"non-finite {term}{at}")


@dataclass
class QpgdConfig:
    """Update-law knobs.

    c scales how fast infeasible iterates are pulled toward the constraint
    boundary; eps_alpha floors the denominator so a vanishing constraint
    gradient cannot divide by zero; alpha_clip (optional) caps the filter
    gain, mainly useful without pretraining.
    """

    c: float = 1.0
    eps_alpha: float = 1e-12
    alpha_clip: Optional[float] = None
    use_adam: bool = False
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.c <= 0:
            raise ConfigurationError("c must be positive")
        if self.eps_alpha <= 0:
            raise ConfigurationError("eps_alpha must be positive")
        if self.alpha_clip is not None and self.alpha_clip <= 0:
            raise ConfigurationError("alpha_clip must be positive when set")


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(m=np.zeros(n), v=np.zeros(n), t=0)


@dataclass(frozen=True)
class LrSchedule:
    """gamma(epoch) = gamma0 * 2^(-floor(epoch / halving_interval))."""

    gamma0: float
    halving_interval: int

    def __post_init__(self):
        if self.gamma0 <= 0:
            raise ConfigurationError("gamma0 must be positive")
        if self.halving_interval < 1:
            raise ConfigurationError("halving_interval must be a positive integer")


@dataclass(frozen=True)
class GradEval:
    f_val: float
    grad_f: np.ndarray
    g_val: float
    grad_g: np.ndarray

    def check_finite(self, epoch: Optional[int] = None):
        if not np.isfinite(self.f_val):
            raise NonFiniteError("objective value f", epoch)
        if not np.all(np.isfinite(self.grad_f)):
            raise NonFiniteError("objective gradient grad_f", epoch)
        if not np.isfinite(self.g_val):
            raise NonFiniteError("constraint value g", epoch)
        if not np.all(np.isfinite(self.grad_g)):
            raise NonFiniteError("constraint gradient grad_g", epoch)


@dataclass(frozen=True)
class StepRecord:
    epoch: int
    f: float
    g: float
    alpha: float
    gamma: float
    grad_norm: float


STEP_RECORD_COLUMNS = ("epoch", "f", "g", "alpha", "gamma", "grad_norm")


def alpha(grad_f: np.ndarray, grad_g: np.ndarray, g_val: float, cfg: QpgdConfig) -> float:
    """Closed-form QP solution for the filter gain; always >= 0."""
    if not (np.all(np.isfinite(grad_f)) and np.all(np.isfinite(grad_g)) and np.isfinite(g_val)):
        raise NonFiniteError("alpha input")
    num = max(-float(np.dot(grad_f, grad_g)) + cfg.c * float(g_val), 0.0)
    den = max(float(np.dot(grad_g, grad_g)), cfg.eps_alpha)
    a = num / den
    if cfg.alpha_clip is not None:
        a = min(a, cfg.alpha_clip)
    return a


def mixed_gradient(grad_f: np.ndarray, grad_g: np.ndarray, alpha_val: float) -> np.ndarray:
    if grad_f.shape != grad_g.shape:
        raise ConfigurationError("grad_f and grad_g shapes differ")
    if alpha_val == 0.0:
        return grad_f
    return grad_f + alpha_val * grad_g


def sgd_step(params: np.ndarray, d: np.ndarray, gamma: float) -> np.ndarray:
    return params - gamma * d


def adam_step(state: AdamState, params: np.ndarray, d: np.ndarray, gamma: float,
              cfg: QpgdConfig):
    """Bias-corrected moment update driven by the mixed gradient d."""
    t = state.t + 1
    m = cfg.adam_beta1 * state.m + (1.0 - cfg.adam_beta1) * d
    v = cfg.adam_beta2 * state.v + (1.0 - cfg.adam_beta2) * (d * d)
    m_hat = m / (1.0 - cfg.adam_beta1**t)
    v_hat = v / (1.0 - cfg.adam_beta2**t)
    new_params = params - gamma * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)
    return AdamState(m=m, v=v, t=t), new_params


def lr_at(schedule: LrSchedule, epoch: int) -> float:
    if epoch < 0:
        raise ConfigurationError("epoch must be non-negative")
    return schedule.gamma0 * 2.0 ** (-(epoch // schedule.halving_interval))


def qpgd_epoch(
    params: np.ndarray,
    f_and_grad: Callable[[np.ndarray], tuple],
    g_and_grad: Callable[[np.ndarray], tuple],
    cfg: QpgdConfig,
    schedule: LrSchedule,
    adam_state: Optional[AdamState],
    epoch: int,
):
    """One filtered step.  Returns (params, adam_state, StepRecord).

    The evaluators return (value, gradient); any non-finite entry aborts the
    epoch with a NonFiniteError naming the term.
    """
    f_val, grad_f = f_and_grad(params)
    g_val, grad_g = g_and_grad(params)
    ev = GradEval(f_val, np.asarray(grad_f), g_val, np.asarray(grad_g))
    ev.check_finite(epoch)
    a = alpha(ev.grad_f, ev.grad_g, ev.g_val, cfg)
    d = mixed_gradient(ev.grad_f, ev.grad_g, a)
    gamma = lr_at(schedule, epoch)
    if cfg.use_adam:
        if adam_state is None:
            adam_state = AdamState.zeros(params.size)
        adam_state, new_params = adam_step(adam_state, params, d, gamma, cfg)
    else:
        new_params = sgd_step(params, d, gamma)
    rec = StepRecord(
        epoch=epoch,
        f=float(ev.f_val),
        g=float(ev.g_val),
        alpha=float(a),
        gamma=float(gamma),
        grad_norm=float(np.linalg.norm(d)),
    )
    return new_params, adam_state, rec


# ---------------------------------------------------------------------------
# StepRecord CSV sink
# ---------------------------------------------------------------------------


def write_step_records(path, records, append=False):
    mode = "a" if append else "w"
    with open(path, mode, newline="") as fh:
        w = csv.writer(fh)
        if not append:
            w.writerow(STEP_RECORD_COLUMNS)
        for r in records:
            w.writerow(
                [r.epoch, repr(r.f), repr(r.g), repr(r.alpha), repr(r.gamma), repr(r.grad_norm)]
            )


def read_step_records(path):
    records = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not set(STEP_RECORD_COLUMNS) <= set(reader.fieldnames):
            missing = set(STEP_RECORD_COLUMNS) - set(reader.fieldnames or ())
            raise ConfigurationError(f"step-record CSV missing columns {sorted(missing)}")
        for row in reader:
            records.append(
                StepRecord(
                    epoch=int(row["epoch"]),
                    f=float(row["f"]),
                    g=float(row["g"]),
                    alpha=float(row["alpha"]),
                    gamma=float(row["gamma"]),
                    grad_norm=float(row["grad_norm"]),
                )
            )
    return records
