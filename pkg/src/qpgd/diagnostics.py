"""Empirical verification of the update law's convergence theory.

The theory says: with the filter gain active, the penalty function

    V_beta(theta) = f(theta) - f_star + beta * max(g(theta), 0)

decreases strictly along plain-gradient (non-Adam) trajectories for small
enough learning rates; positive levels {g <= g_bar} are forwards invariant
up to an O(gamma) excess; and infeasible iterates contract like
g+ <= (1 - gamma c) g + O(gamma^2).  None of the constants in those
statements are observable for a real network, so the checks here run on toy
problems with analytic optima and assert the *scaling* of violations across
a learning-rate sweep instead of absolute bounds.

Adam-mode trajectories sit outside the theory; their reports are marked
advisory and never asserted.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .autodiff import ConfigurationError
from .optimizer import LrSchedule, QpgdConfig, StepRecord, lr_at, qpgd_epoch


@dataclass(frozen=True)
class PenaltyConfig:
    """beta scales the constraint kink; f_star anchors the zero level
    (analytic for toys, best observed f for network runs); g_bar is the
    invariance level under test."""

    beta: float
    f_star: float
    g_bar: float = 0.0

    def __post_init__(self):
        if self.beta <= 0:
            raise ConfigurationError("beta must be positive")


@dataclass
class Trajectory:
    records: list
    params: Optional[list] = None  # per-step parameter vectors (toys only)
    sgd_mode: bool = True

    def __post_init__(self):
        epochs = [r.epoch for r in self.records]
        if any(b <= a for a, b in zip(epochs, epochs[1:])):
            raise ConfigurationError("trajectory epochs must be strictly increasing")


def v_beta(f_val: float, f_star: float, g_val: float, beta: float) -> float:
    """Penalty function value f - f_star + beta * max(g, 0)."""
    if beta <= 0:
        raise ConfigurationError("beta must be positive")
    return f_val - f_star + beta * max(g_val, 0.0)


# ---------------------------------------------------------------------------
# Trajectory checks
# ---------------------------------------------------------------------------


@dataclass
class DescentReport:
    violations: list  # (epoch, delta_v) with delta_v >= 0
    strict_violations: list  # subset with delta_v > 0
    n_steps: int
    advisory: bool

    @property
    def ok(self) -> bool:
        return self.advisory or not self.violations

    def worst(self) -> float:
        return max((dv for _, dv in self.violations), default=float("-inf"))


def check_descent(trajectory: Trajectory, cfg: PenaltyConfig) -> DescentReport:
    """Flags every step where the penalty function failed to decrease."""
    vals = [v_beta(r.f, cfg.f_star, r.g, cfg.beta) for r in trajectory.records]
    violations = []
    strict = []
    for i in range(1, len(vals)):
        dv = vals[i] - vals[i - 1]
        if dv >= 0.0:
            violations.append((trajectory.records[i].epoch, dv))
            if dv > 0.0:
                strict.append((trajectory.records[i].epoch, dv))
    return DescentReport(
        violations=violations,
        strict_violations=strict,
        n_steps=len(vals) - 1,
        advisory=not trajectory.sgd_mode,
    )


@dataclass
class InvarianceReport:
    g_bar: float
    max_excess: float  # max over steps of g - g_bar
    started_inside: bool

    def ok(self, tol: float) -> bool:
        return self.started_inside and self.max_excess <= tol


def check_invariance(trajectory: Trajectory, g_bar: float) -> InvarianceReport:
    gs = [r.g for r in trajectory.records]
    return InvarianceReport(
        g_bar=g_bar,
        max_excess=max(g - g_bar for g in gs),
        started_inside=gs[0] <= g_bar,
    )


@dataclass
class AttractionReport:
    worst_slack: float  # max over qualifying steps of g+ - (1 - gamma c) g
    n_qualifying: int
    gamma_c_warning: bool  # gamma * c exceeded 1/2 somewhere

    def ok(self, tol: float) -> bool:
        return self.worst_slack <= tol


def check_attraction(trajectory: Trajectory, c: float) -> AttractionReport:
    """Verifies the per-step contraction of infeasibility.

    Only steps with g > 0 and an active filter (alpha > 0) qualify; the
    residual above exact geometric decay is reported as slack."""
    recs = trajectory.records
    worst = float("-inf")
    n = 0
    warn = False
    for prev, nxt in zip(recs, recs[1:]):
        if prev.gamma * c > 0.5:
            warn = True
        if prev.g > 0.0 and prev.alpha > 0.0:
            slack = nxt.g - (1.0 - prev.gamma * c) * prev.g
            worst = max(worst, slack)
            n += 1
    return AttractionReport(worst_slack=worst, n_qualifying=n, gamma_c_warning=warn)


# ---------------------------------------------------------------------------
# Toy problems with analytic optima
# ---------------------------------------------------------------------------


@dataclass
class ToyProblem:
    name: str
    f: Callable
    grad_f: Callable
    g: Callable
    grad_g: Callable
    theta_star: np.ndarray
    f_star: float

    def f_and_grad(self, theta):
        return self.f(theta), self.grad_f(theta)

    def g_and_grad(self, theta):
        return self.g(theta), self.grad_g(theta)


def toy_qp(a, b) -> ToyProblem:
    """min ||theta - a||^2  s.t.  b . theta <= 1 (half-space constraint).

    Optimum: a itself if feasible, else the projection of a onto the
    half-space boundary."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if not np.any(b != 0.0):
        raise ConfigurationError("b must be nonzero")
    if float(b @ a) <= 1.0:
        theta_star = a.copy()
    else:
        theta_star = a - ((float(b @ a) - 1.0) / float(b @ b)) * b
    return ToyProblem(
        name=f"halfspace(a={a.tolist()}, b={b.tolist()})",
        f=lambda th: float((th - a) @ (th - a)),
        grad_f=lambda th: 2.0 * (th - a),
        g=lambda th: float(b @ th) - 1.0,
        grad_g=lambda th: b.copy(),
        theta_star=theta_star,
        f_star=float((theta_star - a) @ (theta_star - a)),
    )


def toy_ball(a, radius: float) -> ToyProblem:
    """min ||theta - a||^2  s.t.  ||theta||^2 <= radius^2.

    The curved constraint makes the discrete-step overshoot of level sets
    observable (the half-space toy has a linear g and overshoots nothing)."""
    a = np.asarray(a, dtype=float)
    if radius <= 0:
        raise ConfigurationError("radius must be positive")
    norm_a = float(np.linalg.norm(a))
    theta_star = a.copy() if norm_a <= radius else (radius / norm_a) * a
    return ToyProblem(
        name=f"ball(a={a.tolist()}, r={radius})",
        f=lambda th: float((th - a) @ (th - a)),
        grad_f=lambda th: 2.0 * (th - a),
        g=lambda th: float(th @ th) - radius * radius,
        grad_g=lambda th: 2.0 * th,
        theta_star=theta_star,
        f_star=float((theta_star - a) @ (theta_star - a)),
    )


def run_toy(problem: ToyProblem, theta0, cfg: QpgdConfig, gamma: float,
            max_steps: int, stop_tol: Optional[float] = None,
            divergence_bound: float = 1e6) -> Trajectory:
    """Drive the update law on a toy problem, recording every step."""
    schedule = LrSchedule(gamma0=gamma, halving_interval=10**9)
    theta = np.asarray(theta0, dtype=float).copy()
    records = []
    params = [theta.copy()]
    adam_state = None
    for t in range(max_steps):
        theta, adam_state, rec = qpgd_epoch(
            theta, problem.f_and_grad, problem.g_and_grad, cfg, schedule, adam_state, t
        )
        records.append(rec)
        params.append(theta.copy())
        if float(np.linalg.norm(theta)) > divergence_bound:
            break
        if stop_tol is not None and float(np.linalg.norm(theta - problem.theta_star)) <= stop_tol:
            break
    # close the record stream with the terminal point so checks see it
    fv, gv = problem.f(theta), problem.g(theta)
    records.append(StepRecord(epoch=records[-1].epoch + 1, f=fv, g=gv, alpha=0.0,
                              gamma=lr_at(schedule, len(records)), grad_norm=0.0))
    return Trajectory(records=records, params=params, sgd_mode=not cfg.use_adam)


def kkt_check(problem: ToyProblem, theta) -> dict:
    """First-order optimality residual at theta.

    Returns the better of the two cases: interior (gradient vanishes,
    strictly feasible) or active (stationary Lagrangian with nonnegative
    multiplier on a tight constraint)."""
    theta = np.asarray(theta, dtype=float)
    gf = problem.grad_f(theta)
    gg = problem.grad_g(theta)
    gv = problem.g(theta)
    interior = float(np.linalg.norm(gf)) if gv < 0 else math.inf
    gg_sq = float(gg @ gg)
    if gg_sq > 0:
        lam = max(0.0, -float(gf @ gg) / gg_sq)
        active = max(float(np.linalg.norm(gf + lam * gg)), abs(gv))
    else:
        lam = 0.0
        active = math.inf
    return {
        "residual": min(interior, active),
        "interior_residual": interior,
        "active_residual": active,
        "lambda": lam,
        "g": gv,
    }


@dataclass
class ConvergenceResult:
    problem: str
    final_error: float
    kkt_residual: float
    steps: int
    diverged: bool


def run_convergence_test(problem: ToyProblem, theta0, cfg: QpgdConfig, gamma: float,
                         max_steps: int) -> ConvergenceResult:
    traj = run_toy(problem, theta0, cfg, gamma, max_steps, stop_tol=1e-9)
    theta = traj.params[-1]
    diverged = float(np.linalg.norm(theta)) > 1e6
    err = float(np.linalg.norm(theta - problem.theta_star))
    return ConvergenceResult(
        problem=problem.name,
        final_error=math.inf if diverged else err,
        kkt_residual=kkt_check(problem, theta)["residual"],
        steps=len(traj.records) - 1,
        diverged=diverged,
    )


def beta_for_toy(problem: ToyProblem, g_bar: float, c: float,
                 box_radius: float, n_grid: int = 201) -> float:
    """Twice the analytic sufficiency bound for beta, with the gradient
    bounds measured numerically on a box around the optimum:

        beta >= F_sup / l_low + c * g_bar / (2 l_low^2) + 1/2

    F_sup = sup ||grad f|| and l_low = inf ||grad g|| over the band
    {0 <= g <= g_bar} within the box."""
    center = problem.theta_star
    axes = [np.linspace(center[i] - box_radius, center[i] + box_radius, n_grid)
            for i in range(center.size)]
    mesh = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([m.ravel() for m in mesh], axis=1)
    f_sup, l_low = 0.0, math.inf
    for th in pts:
        gv = problem.g(th)
        if -1e-9 <= gv <= g_bar:
            f_sup = max(f_sup, float(np.linalg.norm(problem.grad_f(th))))
            l_low = min(l_low, float(np.linalg.norm(problem.grad_g(th))))
    if not math.isfinite(l_low) or l_low <= 0:
        # constraint band not visible in the box; fall back to a unit scale
        l_low = 1.0
    bound = f_sup / l_low + c * g_bar / (2.0 * l_low * l_low) + 0.5
    return 2.0 * bound


# ---------------------------------------------------------------------------
# Learning-rate sweeps (the scaling assertions behind the theory checks)
# ---------------------------------------------------------------------------

SWEEP_GAMMAS = (1e-2, 1e-3, 1e-4)


def descent_sweep(problem: ToyProblem, theta0, c: float, g_bar: float,
                  gammas: Sequence[float] = SWEEP_GAMMAS,
                  steps_at_unit_gamma: float = 6.0) -> dict:
    """Violation counts of the penalty-descent property per learning rate.

    Step counts scale like 1/gamma so each run covers comparable progress
    without grinding into float-precision ties near the optimum."""
    beta = beta_for_toy(problem, g_bar=max(g_bar, 1e-6), c=c,
                        box_radius=2.0 * max(1.0, float(np.linalg.norm(
                            np.asarray(theta0, dtype=float) - problem.theta_star))))
    counts = {}
    for gamma in gammas:
        steps = int(steps_at_unit_gamma / gamma)
        traj = run_toy(problem, theta0, QpgdConfig(c=c), gamma, steps)
        rep = check_descent(traj, PenaltyConfig(beta=beta, f_star=problem.f_star,
                                                g_bar=g_bar))
        counts[gamma] = len(rep.violations)
    return {"beta": beta, "counts": counts}


def invariance_sweep(problem: ToyProblem, theta0_on_level, g_bar: float, c: float,
                     gammas: Sequence[float] = SWEEP_GAMMAS,
                     steps_at_unit_gamma: float = 6.0) -> dict:
    """Max excess above the g_bar level per learning rate, started on the level."""
    excesses = {}
    for gamma in gammas:
        steps = int(steps_at_unit_gamma / gamma)
        traj = run_toy(problem, theta0_on_level, QpgdConfig(c=c), gamma, steps)
        rep = check_invariance(traj, g_bar)
        if not rep.started_inside:
            raise ConfigurationError("invariance sweep must start with g <= g_bar")
        excesses[gamma] = rep.max_excess
    return {"excesses": excesses}


def attraction_sweep(problem: ToyProblem, theta0_infeasible, c: float,
                     gammas: Sequence[float] = SWEEP_GAMMAS,
                     steps_at_unit_gamma: float = 6.0) -> dict:
    """Worst contraction slack per learning rate, started infeasible."""
    slacks = {}
    for gamma in gammas:
        steps = int(steps_at_unit_gamma / gamma)
        traj = run_toy(problem, theta0_infeasible, QpgdConfig(c=c), gamma, steps)
        rep = check_attraction(traj, c)
        slacks[gamma] = rep.worst_slack if rep.n_qualifying else 0.0
    return {"slacks": slacks}


def shrinks_at_least_linearly(values_by_gamma: dict, fudge: float = 2.0,
                              floor: float = 1e-12) -> bool:
    """values[gamma/k] <= values[gamma] / k * fudge, treating sub-floor
    values as zero (already as small as measurable)."""
    gammas = sorted(values_by_gamma, reverse=True)
    for big, small in zip(gammas, gammas[1:]):
        vb = max(values_by_gamma[big], 0.0)
        vs = max(values_by_gamma[small], 0.0)
        if vs <= floor:
            continue
        if vs > vb * (small / big) * fudge:
            return False
    return True


def shrinks_quadratically(values_by_gamma: dict, min_ratio: float = 25.0,
                          floor: float = 1e-13) -> bool:
    """Each 10x reduction in gamma must shrink the value by >= min_ratio."""
    gammas = sorted(values_by_gamma, reverse=True)
    for big, small in zip(gammas, gammas[1:]):
        vs = max(values_by_gamma[small], 0.0)
        if vs <= floor:
            continue
        if max(values_by_gamma[big], 0.0) / vs < min_ratio:
            return False
    return True


# ---------------------------------------------------------------------------
# The bundled toy suite (used by the CLI and the acceptance tests)
# ---------------------------------------------------------------------------


def standard_toys():
    """Interior optimum, boundary optimum, and an infeasible-start instance."""
    interior = toy_qp(a=[0.0, 0.0], b=[1.0, 0.0])
    boundary = toy_qp(a=[2.0, 0.0], b=[1.0, 0.0])
    infeasible = toy_qp(a=[2.0, 2.0], b=[1.0, 1.0])
    starts = {
        interior.name: np.array([-0.5, 0.8]),
        boundary.name: np.array([-1.0, 1.0]),
        infeasible.name: np.array([3.0, 3.0]),  # g = 5 here
    }
    return [interior, boundary, infeasible], starts


@dataclass
class ToySuiteReport:
    convergence: list
    descent: dict  # problem name -> {"beta", "counts"}
    invariance: dict
    attraction: dict
    attraction_exact: float  # worst slack on the linear-constraint toy
    penalty_positive_ok: bool
    lines: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        conv_ok = all(r.final_error <= 1e-4 and r.kkt_residual <= 1e-4
                      for r in self.convergence)
        desc_ok = all(
            d["counts"][1e-3] == 0
            and all(d["counts"][b] >= d["counts"][s]
                    for b, s in zip(sorted(d["counts"], reverse=True),
                                    sorted(d["counts"], reverse=True)[1:]))
            for d in self.descent.values()
        )
        inv_ok = shrinks_at_least_linearly(self.invariance["excesses"])
        att_ok = shrinks_quadratically(self.attraction["slacks"])
        return (conv_ok and desc_ok and inv_ok and att_ok
                and self.attraction_exact <= 1e-14 and self.penalty_positive_ok)


def penalty_positivity_check(problem: ToyProblem, beta: float,
                             box_radius: float = 2.0, n_grid: int = 101,
                             exclusion: float = 1e-3) -> bool:
    """v_beta must vanish at the optimum and be positive elsewhere."""
    if abs(v_beta(problem.f_star, problem.f_star, problem.g(problem.theta_star), beta)) > 1e-12:
        return False
    center = problem.theta_star
    axes = [np.linspace(center[i] - box_radius, center[i] + box_radius, n_grid)
            for i in range(center.size)]
    mesh = np.meshgrid(*axes, indexing="ij")
    for th in np.stack([m.ravel() for m in mesh], axis=1):
        if float(np.linalg.norm(th - center)) <= exclusion:
            continue
        if v_beta(problem.f(th), problem.f_star, problem.g(th), beta) <= 0.0:
            return False
    return True


def run_toy_suite(gamma: float = 1e-3, c: float = 1.0,
                  max_steps: int = 100_000) -> ToySuiteReport:
    toys, starts = standard_toys()
    cfg = QpgdConfig(c=c)
    lines = []

    convergence = []
    for prob in toys:
        res = run_convergence_test(prob, starts[prob.name], cfg, gamma, max_steps)
        convergence.append(res)
        lines.append(
            f"convergence {prob.name}: error={res.final_error:.3e} "
            f"kkt={res.kkt_residual:.3e} steps={res.steps}"
        )

    descent = {}
    for prob in toys:
        descent[prob.name] = descent_sweep(prob, starts[prob.name], c=c, g_bar=1.0)
        lines.append(f"descent {prob.name}: counts={descent[prob.name]['counts']}")

    # curved constraint: start exactly on the g = g_bar level with the
    # objective pulling hard along the level, so discrete overshoot is visible
    g_bar = 0.1
    ball = toy_ball(a=[math.sqrt(1.0 + g_bar) - 0.03, -3.0], radius=1.0)
    # on the level up to a hair inside, so g(theta0) <= g_bar holds in floats
    theta0_level = np.array([math.sqrt(1.0 + g_bar) * (1.0 - 1e-9), 0.0])
    invariance = invariance_sweep(ball, theta0_level, g_bar=g_bar, c=c)
    lines.append(f"invariance {ball.name}: excesses={invariance['excesses']}")

    # pull point outside the ball so the filter stays active while infeasible
    ball_attr = toy_ball(a=[2.0, 0.0], radius=1.0)
    attraction = attraction_sweep(ball_attr, np.array([2.0, 0.5]), c=c)
    lines.append(f"attraction {ball_attr.name}: slacks={attraction['slacks']}")

    linear = toy_qp(a=[2.0, 0.0], b=[1.0, 0.0])
    traj = run_toy(linear, np.array([6.0, 1.0]), cfg, gamma, 2000)
    attraction_exact = check_attraction(traj, c).worst_slack
    lines.append(f"attraction {linear.name}: worst slack={attraction_exact:.3e}")

    beta = beta_for_toy(toys[1], g_bar=1.0, c=c, box_radius=3.0)
    penalty_ok = all(
        penalty_positivity_check(p, beta_for_toy(p, g_bar=1.0, c=c, box_radius=3.0))
        for p in toys
    )
    lines.append(f"penalty positivity (beta~{beta:.2f}): {'ok' if penalty_ok else 'FAIL'}")

    return ToySuiteReport(
        convergence=convergence,
        descent=descent,
        invariance=invariance,
        attraction=attraction,
        attraction_exact=attraction_exact,
        penalty_positive_ok=penalty_ok,
        lines=lines,
    )


# ---------------------------------------------------------------------------
# Trajectory I/O and report writing
# ---------------------------------------------------------------------------


def read_trajectory_csv(path, sgd_mode: bool = False) -> Trajectory:
    """Build a trajectory from any CSV carrying epoch, f, g, alpha, gamma."""
    needed = {"epoch", "f", "g", "alpha", "gamma"}
    records = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not needed <= set(reader.fieldnames):
            missing = needed - set(reader.fieldnames or ())
            raise ConfigurationError(f"trajectory CSV missing columns {sorted(missing)}")
        for row in reader:
            records.append(StepRecord(
                epoch=int(row["epoch"]),
                f=float(row["f"]),
                g=float(row["g"]),
                alpha=float(row["alpha"]),
                gamma=float(row["gamma"]),
                grad_norm=float(row.get("grad_norm", "nan") or "nan"),
            ))
    if not records:
        raise ConfigurationError("trajectory CSV has no rows")
    return Trajectory(records=records, sgd_mode=sgd_mode)


def diagnose_trajectory(trajectory: Trajectory, c: float, beta: float = 10.0,
                        f_star: Optional[float] = None,
                        g_bar: Optional[float] = None) -> list:
    """Run all three checks on a recorded trajectory; returns report lines.

    For network runs f_star is unknowable, so the smallest observed f stands
    in (the penalty function only needs it as an additive anchor); results
    on Adam-mode runs are advisory."""
    if f_star is None:
        f_star = min(r.f for r in trajectory.records)
    if g_bar is None:
        g_bar = max(trajectory.records[0].g, 0.0)
    tag = "advisory" if not trajectory.sgd_mode else "asserted"
    cfgp = PenaltyConfig(beta=beta, f_star=f_star, g_bar=g_bar)
    lines = [f"checks are {tag}; beta={beta}, f_star={f_star!r}, g_bar={g_bar!r}"]
    d = check_descent(trajectory, cfgp)
    lines.append(
        f"{'PASS' if d.ok or d.advisory else 'FAIL'} descent: "
        f"{len(d.violations)} non-decreasing steps of {d.n_steps} "
        f"(worst {d.worst():.3e})"
    )
    i = check_invariance(trajectory, g_bar)
    lines.append(
        f"{'PASS' if i.max_excess <= max(1e-6, 0.0) or not trajectory.sgd_mode else 'FAIL'} "
        f"invariance: max excess over g_bar={g_bar:.3e} is {i.max_excess:.3e}"
    )
    a = check_attraction(trajectory, c)
    warn = " (warning: gamma*c > 1/2 somewhere)" if a.gamma_c_warning else ""
    lines.append(
        f"INFO attraction: {a.n_qualifying} qualifying steps, "
        f"worst slack {a.worst_slack:.3e}{warn}"
    )
    return lines


def write_report(path, lines):
    with open(path, "w") as fh:
        for line in lines:
            fh.write(line + "\n")
