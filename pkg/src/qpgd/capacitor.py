"""Capacitor inverse problem: geometry, sampling, losses, constraint, metrics.

The domain is the region between two conducting plates,

    upper plate  y = f_upper(x) = -sin(pi x) + 0.2
    lower plate  y = f_lower(x) = exp(-(x+0.5)^2 / 0.2) (1 - x^2) - 1

over x in [-1, 1].  Sides and bottom are grounded (0 V); the top plate sits
at an unknown voltage estimated by the trainable scalar v_hat.  The network
is fit by minimizing

    f = l_pde + l_bc0 + l_bcv       (physics objective)

subject to the data constraint g = l_data^2 - z^2 delta^2 <= 0, where l_data
is a p-norm of the measurement residuals and delta the known noise scale.

Collocation sets are sampled once and frozen; every loss is a pure function
of (params, frozen sets) with fixed-order reductions, so repeated evaluation
is bit-identical.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import ConfigurationError


class DomainRangeError(ValueError):
    """A coordinate fell outside the geometry's x-range."""


def f_upper(x):
    """Upper plate curve; defined for x in [-1, 1]."""
    x = np.asarray(x, dtype=float)
    if np.any(x < -1.0) or np.any(x > 1.0):
        raise DomainRangeError("x outside [-1, 1]")
    out = -np.sin(np.pi * x) + 0.2
    return float(out) if out.ndim == 0 else out


def f_lower(x):
    """Lower plate curve; defined for x in [-1, 1]."""
    x = np.asarray(x, dtype=float)
    if np.any(x < -1.0) or np.any(x > 1.0):
        raise DomainRangeError("x outside [-1, 1]")
    out = np.exp(-((x + 0.5) ** 2) / 0.2) * (1.0 - x * x) - 1.0
    return float(out) if out.ndim == 0 else out


class DomainGeometry:
    """Region between two boundary curves over x in [x_min, x_max].

    The curves are validated on a 1000-point grid at construction
    (upper > lower strictly inside the x-range); the bounding box is taken
    from the same grid.  Side walls sit at x = x_min and x = x_max, spanning
    the vertical gap between the curves there.
    """

    def __init__(self, upper: Callable = f_upper, lower: Callable = f_lower,
                 x_range=(-1.0, 1.0)):
        self.upper = upper
        self.lower = lower
        self.x_min, self.x_max = float(x_range[0]), float(x_range[1])
        grid = np.linspace(self.x_min, self.x_max, 1000)
        up, lo = np.asarray(upper(grid)), np.asarray(lower(grid))
        if not np.all(up[1:-1] > lo[1:-1]):
            raise ConfigurationError("upper curve must exceed lower curve on the interior")
        # pad by the largest between-sample variation so the box is covering
        pad = max(float(np.max(np.abs(np.diff(up)))), float(np.max(np.abs(np.diff(lo)))), 1e-12)
        self.y_min = float(np.min(lo)) - pad
        self.y_max = float(np.max(up)) + pad

    @property
    def bbox(self):
        return (self.x_min, self.x_max, self.y_min, self.y_max)

    def contains(self, x, y, margin: float = 0.0):
        """Strict interior test, shrunk by `margin` in x and in y."""
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        inside_x = (x > self.x_min + margin) & (x < self.x_max - margin)
        ok = np.zeros(np.broadcast(x, y).shape, dtype=bool)
        xc = np.clip(x, self.x_min, self.x_max)
        lo = np.asarray(self.lower(xc))
        up = np.asarray(self.upper(xc))
        ok = inside_x & (y > lo + margin) & (y < up - margin)
        return bool(ok) if ok.ndim == 0 else ok

    def area(self, n: int = 20000) -> float:
        """Trapezoid-rule area between the curves (setup helper, not an oracle)."""
        xs = np.linspace(self.x_min, self.x_max, n)
        return float(np.trapezoid(np.asarray(self.upper(xs)) - np.asarray(self.lower(xs)), xs))

    def _curve_arclength_table(self, which: str, n: int = 4096):
        xs = np.linspace(self.x_min, self.x_max, n)
        fn = self.lower if which == "lower" else self.upper
        h = 1e-6
        slopes = (np.asarray(fn(np.clip(xs + h, self.x_min, self.x_max)))
                  - np.asarray(fn(np.clip(xs - h, self.x_min, self.x_max))))
        dx = np.minimum(xs + h, self.x_max) - np.maximum(xs - h, self.x_min)
        slopes = slopes / dx
        seg = np.sqrt(1.0 + slopes**2)
        cum = np.concatenate([[0.0], np.cumsum((seg[1:] + seg[:-1]) * 0.5 * np.diff(xs))])
        return xs, cum

    def side_span(self, side: str):
        x = self.x_min if side == "left" else self.x_max
        return float(np.asarray(self.lower(x))), float(np.asarray(self.upper(x)))


def capacitor_geometry() -> DomainGeometry:
    return DomainGeometry(f_upper, f_lower, (-1.0, 1.0))


# ---------------------------------------------------------------------------
# Point sets and measurements
# ---------------------------------------------------------------------------


@dataclass
class PointSets:
    """Frozen collocation sets; arrays are (n, 2) in (x, y) order."""

    interior: np.ndarray
    grounded: np.ndarray
    top: np.ndarray
    measurements: np.ndarray


@dataclass
class MeasurementSet:
    points: np.ndarray  # (n, 2)
    labels: np.ndarray  # (n,) volts
    delta: float = 0.1
    deltas: Optional[np.ndarray] = None  # per-point scales (heteroscedastic)


@dataclass(frozen=True)
class ConstraintConfig:
    """Data-fit tolerance: the constraint reads l_data <= z * delta."""

    p: float = 2.0
    z: float = 1.0
    delta: float = 0.1

    def __post_init__(self):
        if not (self.p >= 1.0):
            raise ConfigurationError("p must be >= 1 (use math.inf for max-abs)")
        if self.z <= 0 or self.delta <= 0:
            raise ConfigurationError("z and delta must be positive")

    @property
    def bound_sq(self) -> float:
        return (self.z * self.delta) ** 2


def sample_interior(geom: DomainGeometry, n: int, seed: int,
                    margin: float = 1e-9) -> np.ndarray:
    """n points uniform over the strict interior, by rejection from the
    bounding box; deterministic per seed."""
    if n <= 0:
        raise ConfigurationError("n must be positive")
    rng = np.random.default_rng(seed)
    out = np.empty((n, 2))
    got = 0
    while got < n:
        m = max(2 * (n - got), 64)
        xs = rng.uniform(geom.x_min, geom.x_max, size=m)
        ys = rng.uniform(geom.y_min, geom.y_max, size=m)
        keep = geom.contains(xs, ys, margin=margin)
        k = min(int(np.sum(keep)), n - got)
        out[got:got + k, 0] = xs[keep][:k]
        out[got:got + k, 1] = ys[keep][:k]
        got += k
    return out


def _allocate_proportional(total: int, lengths) -> list:
    """Largest-remainder allocation of `total` among segments by length."""
    lengths = np.asarray(lengths, dtype=float)
    quota = total * lengths / lengths.sum()
    base = np.floor(quota).astype(int)
    rem = total - int(base.sum())
    order = np.argsort(-(quota - base))
    for i in range(rem):
        base[order[i]] += 1
    return base.tolist()


def sample_boundary(geom: DomainGeometry, n_grounded: int, n_top: int, seed: int):
    """(grounded, top) point arrays.

    Grounded points cover the two side walls and the bottom curve, with
    counts allocated proportionally to arc length; the bottom positions are
    uniform in arc length.  Top points lie on y = upper(x), uniform in x.
    """
    if n_grounded <= 0 or n_top <= 0:
        raise ConfigurationError("boundary counts must be positive")
    rng = np.random.default_rng(seed)
    lo_l, up_l = geom.side_span("left")
    lo_r, up_r = geom.side_span("right")
    xs_tab, cum = geom._curve_arclength_table("lower")
    lengths = [up_l - lo_l, up_r - lo_r, float(cum[-1])]
    n_left, n_right, n_bottom = _allocate_proportional(n_grounded, lengths)

    pts = np.empty((n_grounded, 2))
    i = 0
    ys = rng.uniform(lo_l, up_l, size=n_left)
    pts[i:i + n_left] = np.column_stack([np.full(n_left, geom.x_min), ys])
    i += n_left
    ys = rng.uniform(lo_r, up_r, size=n_right)
    pts[i:i + n_right] = np.column_stack([np.full(n_right, geom.x_max), ys])
    i += n_right
    u = rng.uniform(0.0, cum[-1], size=n_bottom)
    xb = np.interp(u, cum, xs_tab)
    pts[i:] = np.column_stack([xb, np.asarray(geom.lower(xb))])

    xt = rng.uniform(geom.x_min, geom.x_max, size=n_top)
    top = np.column_stack([xt, np.asarray(geom.upper(xt))])
    return pts, top


DEFAULT_MEASUREMENT_NOMINALS = np.array(
    [[-0.5, 0.25], [-0.5, -0.25], [0.5, 0.25], [0.5, -0.25]]
)


def default_measurement_points(geom: DomainGeometry, seed: int,
                               nominals: Optional[np.ndarray] = None,
                               margin: float = 1e-6) -> np.ndarray:
    """Nominal probe locations, with any point outside the region resampled
    nearby (seeded Gaussian walk with growing radius) until strictly inside."""
    rng = np.random.default_rng(seed)
    pts = np.array(DEFAULT_MEASUREMENT_NOMINALS if nominals is None else nominals, dtype=float)
    for k in range(pts.shape[0]):
        x, y = pts[k]
        if geom.contains(x, y, margin=margin):
            continue
        scale = 0.05
        while True:
            cand = pts[k] + scale * rng.standard_normal(2)
            if geom.contains(cand[0], cand[1], margin=margin):
                pts[k] = cand
                break
            scale = min(scale * 1.25, 0.5)
    return pts


def make_measurements(truth, points: np.ndarray, delta: float, seed: int) -> MeasurementSet:
    """Noisy labels: truth value plus i.i.d. Gaussian draws of scale delta."""
    points = np.asarray(points, dtype=float)
    rng = np.random.default_rng(seed)
    clean = np.asarray(truth.eval(points[:, 0], points[:, 1]), dtype=float)
    labels = clean + delta * rng.standard_normal(points.shape[0])
    return MeasurementSet(points=points, labels=labels, delta=float(delta))


# ---------------------------------------------------------------------------
# Losses on scalar fields (network or analytic oracle alike)
# ---------------------------------------------------------------------------


def loss_data(field, m: MeasurementSet, p: float = 2.0) -> float:
    """((1/(N-1)) sum |phi_i - label_i|^p)^(1/p); max-abs for p = inf."""
    resid = np.asarray(field.eval(m.points[:, 0], m.points[:, 1])) - m.labels
    if math.isinf(p):
        return float(np.max(np.abs(resid)))
    n = resid.size
    if n < 2:
        raise ConfigurationError("finite-p data loss needs at least 2 measurements")
    return float((np.sum(np.abs(resid) ** p) / (n - 1)) ** (1.0 / p))


def loss_data_hetero(field, m: MeasurementSet, p: float = 2.0) -> float:
    """Per-point-normalized residual norm ((1/N) sum |r_i/delta_i|^p)^(1/p).

    Note the 1/N normalization here versus 1/(N-1) in `loss_data`; both
    forms are kept as-is."""
    deltas = m.deltas if m.deltas is not None else np.full(m.points.shape[0], m.delta)
    deltas = np.asarray(deltas, dtype=float)
    if np.any(deltas <= 0):
        raise ConfigurationError("all per-point noise scales must be positive")
    resid = (np.asarray(field.eval(m.points[:, 0], m.points[:, 1])) - m.labels) / deltas
    if math.isinf(p):
        return float(np.max(np.abs(resid)))
    return float((np.mean(np.abs(resid) ** p)) ** (1.0 / p))


def loss_pde(field, interior: np.ndarray) -> float:
    """Mean squared Laplacian over the interior collocation set."""
    if len(interior) == 0:
        raise ConfigurationError("empty interior set")
    lap = np.asarray(field.laplacian(interior[:, 0], interior[:, 1]))
    return float(np.mean(lap * lap))


def loss_bc0(field, grounded: np.ndarray) -> float:
    if len(grounded) == 0:
        raise ConfigurationError("empty grounded set")
    phi = np.asarray(field.eval(grounded[:, 0], grounded[:, 1]))
    return float(np.mean(phi * phi))


def loss_bcv(field, top: np.ndarray, v_hat: float) -> float:
    if len(top) == 0:
        raise ConfigurationError("empty top set")
    r = np.asarray(field.eval(top[:, 0], top[:, 1])) - v_hat
    return float(np.mean(r * r))


# ---------------------------------------------------------------------------
# Training-side losses (tape-built, with exact parameter gradients)
# ---------------------------------------------------------------------------


class CapacitorProblem:
    """Frozen point sets + measurement data, exposing the constrained
    training losses and their exact parameter gradients.

    With `fixed_v0` set, the top-boundary target is that constant instead of
    the trainable v_hat slot (forward problem / ground-truth training); the
    v_hat slot then receives zero gradient structurally.
    """

    def __init__(self, spec: ad.MlpSpec, points: PointSets,
                 measurements: Optional[MeasurementSet],
                 constraint: ConstraintConfig,
                 fixed_v0: Optional[float] = None):
        self.spec = spec
        self.points = points
        self.measurements = measurements
        self.constraint = constraint
        self.fixed_v0 = fixed_v0
        self._xy_int = np.ascontiguousarray(points.interior.T)
        self._xy_bc0 = np.ascontiguousarray(points.grounded.T)
        self._xy_top = np.ascontiguousarray(points.top.T)
        if measurements is not None:
            self._xy_meas = np.ascontiguousarray(measurements.points.T)
            self._labels = np.asarray(measurements.labels, dtype=float)

    # -- graph builders ----------------------------------------------------

    def _objective_node(self, pv):
        _, lap = ad.network_output_and_laplacian(pv, self.spec, self._xy_int)
        l_pde = ad.vmean(ad.square(lap))
        l_bc0 = ad.vmean(ad.square(ad.network_output(pv, self.spec, self._xy_bc0)))
        phi_top = ad.network_output(pv, self.spec, self._xy_top)
        target = self.fixed_v0 if self.fixed_v0 is not None else ad.vhat_var(pv, self.spec)
        l_bcv = ad.vmean(ad.square(ad.sub(phi_top, target)))
        f = ad.add(ad.add(l_pde, l_bc0), l_bcv)
        return f, {"l_pde": float(l_pde.value), "l_bc0": float(l_bc0.value),
                   "l_bcv": float(l_bcv.value)}

    def _data_sq_node(self, pv):
        """l_data^2 as a tape node (p-norm squared)."""
        if self.measurements is None:
            raise ConfigurationError("problem has no measurement set")
        phi = ad.network_output(pv, self.spec, self._xy_meas)
        resid = ad.sub(phi, self._labels)
        p = self.constraint.p
        n = self._labels.size
        if math.isinf(p):
            return ad.square(ad.vmax(ad.absolute(resid)))
        if n < 2:
            raise ConfigurationError("finite-p data loss needs at least 2 measurements")
        if p == 2.0:
            return ad.mul(ad.vsum(ad.square(resid)), 1.0 / (n - 1))
        lp_p = ad.mul(ad.vsum(ad.power(ad.absolute(resid), p)), 1.0 / (n - 1))
        return ad.power(lp_p, 2.0 / p)

    # -- public evaluations --------------------------------------------------

    def objective_with_grad(self, params):
        """(f, grad_f, parts) with parts carrying the three physics terms."""
        parts_box = {}

        def build(pv):
            f, parts = self._objective_node(pv)
            parts_box.update(parts)
            return f

        v, g = ad.value_and_grad(build, params)
        return v, g, dict(parts_box)

    def objective_f(self, params) -> float:
        return self.objective_with_grad(params)[0]

    def constraint_with_grad(self, params):
        """(g, grad_g, l_data) for g = l_data^2 - (z*delta)^2."""
        bound = self.constraint.bound_sq

        def build(pv):
            return ad.sub(self._data_sq_node(pv), bound)

        v, g = ad.value_and_grad(build, params)
        l_data = math.sqrt(max(v + bound, 0.0))
        return v, g, l_data

    def constraint_g(self, params) -> float:
        return self.constraint_with_grad(params)[0]

    def naive_with_grad(self, params):
        """(f + l_data^2, grad, parts): the single-loss baseline objective."""
        parts_box = {}

        def build(pv):
            f, parts = self._objective_node(pv)
            dsq = self._data_sq_node(pv)
            parts_box.update(parts)
            parts_box["l_data_sq"] = float(dsq.value)
            return ad.add(f, dsq)

        v, g = ad.value_and_grad(build, params)
        return v, g, dict(parts_box)

    def naive_loss(self, params) -> float:
        return self.naive_with_grad(params)[0]


# ---------------------------------------------------------------------------
# Metrics and exports
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MetricsReport:
    v_hat: Optional[float]
    avg_abs_error_interior: float
    avg_abs_laplacian: float
    n_grid: int


def interior_grid(geom: DomainGeometry, resolution: int = 200):
    """Regular bounding-box grid restricted to the strict interior."""
    xs = np.linspace(geom.x_min, geom.x_max, resolution)
    ys = np.linspace(geom.y_min, geom.y_max, resolution)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    mask = geom.contains(gx, gy)
    return gx[mask], gy[mask]


def metrics(field, truth, geom: DomainGeometry, resolution: int = 200) -> MetricsReport:
    """Interior-grid averages of |phi - truth| and |laplacian phi|."""
    gx, gy = interior_grid(geom, resolution)
    err = np.abs(np.asarray(field.eval(gx, gy)) - np.asarray(truth.eval(gx, gy)))
    lap = np.abs(np.asarray(field.laplacian(gx, gy)))
    v_hat = getattr(field, "v_hat", None)
    return MetricsReport(
        v_hat=v_hat,
        avg_abs_error_interior=float(np.mean(err)),
        avg_abs_laplacian=float(np.mean(lap)),
        n_grid=gx.size,
    )


def export_grid(path, field, truth, geom: DomainGeometry, resolution: int = 200):
    """Plain-text grid of x, y, phi, laplacian, error rows for plotting."""
    gx, gy = interior_grid(geom, resolution)
    phi = np.asarray(field.eval(gx, gy))
    lap = np.asarray(field.laplacian(gx, gy))
    err = (phi - np.asarray(truth.eval(gx, gy))) if truth is not None else np.full_like(phi, np.nan)
    with open(path, "w") as fh:
        fh.write("x,y,phi,laplacian,error\n")
        for row in zip(gx, gy, phi, lap, err):
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


# ---------------------------------------------------------------------------
# Plain-text point-set serialization
# ---------------------------------------------------------------------------


def save_points(path, name: str, seed, points: np.ndarray,
                labels: Optional[np.ndarray] = None,
                deltas: Optional[np.ndarray] = None):
    """One point per line: x y [label [delta]]; '#' header names set and seed."""
    points = np.asarray(points, dtype=float)
    cols = [points[:, 0], points[:, 1]]
    names = ["x", "y"]
    if labels is not None:
        cols.append(np.asarray(labels, dtype=float))
        names.append("label")
    if deltas is not None:
        cols.append(np.asarray(deltas, dtype=float))
        names.append("delta")
    with open(path, "w") as fh:
        fh.write(f"# set: {name}\n")
        fh.write(f"# seed: {seed}\n")
        fh.write("# columns: " + " ".join(names) + "\n")
        for row in zip(*cols):
            fh.write(" ".join(repr(float(v)) for v in row) + "\n")


def load_points(path):
    """Returns (name, seed, points, labels, deltas); absent columns are None."""
    name, seed, columns = None, None, ["x", "y"]
    rows = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                body = line[1:].strip()
                if body.startswith("set:"):
                    name = body[4:].strip()
                elif body.startswith("seed:"):
                    seed = int(body[5:].strip())
                elif body.startswith("columns:"):
                    columns = body[8:].split()
                continue
            rows.append([float(tok) for tok in line.split()])
    data = np.asarray(rows, dtype=float)
    points = data[:, :2]
    labels = data[:, columns.index("label")] if "label" in columns else None
    deltas = data[:, columns.index("delta")] if "delta" in columns else None
    return name, seed, points, labels, deltas
