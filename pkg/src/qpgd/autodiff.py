"""Minimal differentiation engine for dense scalar-output MLPs.

Three capabilities, all in float64 numpy and nothing else:

* forward evaluation of a dense network phi(x, y; params),
* spatial derivatives up to second order along a direction, obtained by
  propagating truncated-Taylor triples (value, d1, d2) through every layer,
  which gives exact Laplacians without an external AD framework,
* exact parameter gradients of any scalar loss assembled from engine
  operations, via a recorded-operation reverse pass (a small tape over
  ndarray-level ops, so batches stay vectorized).

All evaluation functions are pure given (params, inputs); reductions use a
fixed summation order, so results are reproducible bit-for-bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, NamedTuple, Protocol

import numpy as np
from scipy.special import erf


class ConfigurationError(ValueError):
    """Raised when shapes, sizes or options are inconsistent."""


# ---------------------------------------------------------------------------
# Activations.
#
# Each activation is registered with its first three derivatives: the jet
# propagation needs d1/d2, and the reverse pass through a jet needs d3.
# ---------------------------------------------------------------------------

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _norm_cdf(x):
    return 0.5 * (1.0 + erf(x / _SQRT2))


def _norm_pdf(x):
    return _INV_SQRT_2PI * np.exp(-0.5 * x * x)


def gelu(x):
    """x * Phi(x) with the exact standard-normal CDF (error function, not
    the tanh approximation)."""
    return x * _norm_cdf(x)


def gelu_d1(x):
    return _norm_cdf(x) + x * _norm_pdf(x)


def gelu_d2(x):
    # 2*pdf(x) + x*pdf'(x) = pdf(x) * (2 - x^2)
    return _norm_pdf(x) * (2.0 - x * x)


def gelu_d3(x):
    return _norm_pdf(x) * x * (x * x - 4.0)


def _tanh(x):
    return np.tanh(x)


def _tanh_d1(x):
    t = np.tanh(x)
    return 1.0 - t * t


def _tanh_d2(x):
    t = np.tanh(x)
    return -2.0 * t * (1.0 - t * t)


def _tanh_d3(x):
    t = np.tanh(x)
    return -2.0 * (1.0 - t * t) * (1.0 - 3.0 * t * t)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _sigmoid_d1(x):
    s = _sigmoid(x)
    return s * (1.0 - s)


def _sigmoid_d2(x):
    s = _sigmoid(x)
    return s * (1.0 - s) * (1.0 - 2.0 * s)


def _sigmoid_d3(x):
    s = _sigmoid(x)
    d1 = s * (1.0 - s)
    return d1 * (1.0 - 2.0 * s) ** 2 - 2.0 * d1 * d1


def _gelu_jets(z):
    cdf = _norm_cdf(z)
    pdf = _norm_pdf(z)
    zz = z * z
    f = z * cdf
    d1 = z * pdf
    d1 += cdf
    d2 = 2.0 - zz
    d2 *= pdf
    d3 = zz  # buffer reuse; zz is not needed past this point
    d3 -= 4.0
    d3 *= z
    d3 *= pdf
    return f, d1, d2, d3


def _tanh_jets(z):
    t = np.tanh(z)
    sech2 = 1.0 - t * t
    return t, sech2, -2.0 * t * sech2, -2.0 * sech2 * (1.0 - 3.0 * t * t)


def _sigmoid_jets(z):
    s = _sigmoid(z)
    d1 = s * (1.0 - s)
    k = 1.0 - 2.0 * s
    return s, d1, d1 * k, d1 * k * k - 2.0 * d1 * d1


class Activation(NamedTuple):
    f: Callable
    d1: Callable
    d2: Callable
    d3: Callable
    jets: Callable  # fused (f, d1, d2, d3), one transcendental pass


ACTIVATIONS = {
    "gelu": Activation(gelu, gelu_d1, gelu_d2, gelu_d3, _gelu_jets),
    "tanh": Activation(_tanh, _tanh_d1, _tanh_d2, _tanh_d3, _tanh_jets),
    "sigmoid": Activation(_sigmoid, _sigmoid_d1, _sigmoid_d2, _sigmoid_d3, _sigmoid_jets),
}


# ---------------------------------------------------------------------------
# Network specification and parameter layout.
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MlpSpec:
    """Architecture of a dense network.

    The flat parameter vector stores all layer weight matrices (layer by
    layer, C order), then all bias vectors, then one trailing slot for the
    trainable boundary voltage v_hat.  The v_hat slot never influences the
    network output; it exists so that one flat vector carries every
    trainable scalar of the inverse problem.
    """

    input_dim: int = 2
    hidden_widths: tuple = (32, 32, 32)
    output_dim: int = 1
    activation: str = "gelu"

    def __post_init__(self):
        object.__setattr__(self, "hidden_widths", tuple(int(w) for w in self.hidden_widths))
        if self.input_dim < 1 or self.output_dim < 1:
            raise ConfigurationError("input_dim and output_dim must be positive")
        if not self.hidden_widths or any(w < 1 for w in self.hidden_widths):
            raise ConfigurationError("hidden_widths must be non-empty and positive")
        if self.activation not in ACTIVATIONS:
            raise ConfigurationError(f"unknown activation {self.activation!r}")

    @property
    def widths(self):
        return (self.input_dim, *self.hidden_widths, self.output_dim)


def param_count(spec: MlpSpec) -> int:
    w = spec.widths
    n = sum(w[i] * w[i + 1] + w[i + 1] for i in range(len(w) - 1))
    return n + 1  # trailing v_hat slot


def param_slices(spec: MlpSpec):
    """(weight_slices, bias_slices, vhat_index) into the flat vector."""
    w = spec.widths
    wslices, bslices = [], []
    off = 0
    for i in range(len(w) - 1):
        size = w[i + 1] * w[i]
        wslices.append(slice(off, off + size))
        off += size
    for i in range(len(w) - 1):
        bslices.append(slice(off, off + w[i + 1]))
        off += w[i + 1]
    return wslices, bslices, off


def init_params(spec: MlpSpec, seed: int) -> np.ndarray:
    """Xavier-uniform weights, zero biases, v_hat = 0; deterministic per seed."""
    rng = np.random.default_rng(seed)
    w = spec.widths
    params = np.zeros(param_count(spec))
    wslices, _, _ = param_slices(spec)
    for i, sl in enumerate(wslices):
        bound = math.sqrt(6.0 / (w[i] + w[i + 1]))
        params[sl] = rng.uniform(-bound, bound, size=w[i + 1] * w[i])
    return params


def _layer_arrays(params: np.ndarray, spec: MlpSpec):
    if params.size != param_count(spec):
        raise ConfigurationError(
            f"parameter vector has {params.size} entries, spec needs {param_count(spec)}"
        )
    w = spec.widths
    wslices, bslices, _ = param_slices(spec)
    return [
        (params[wslices[i]].reshape(w[i + 1], w[i]), params[bslices[i]].reshape(w[i + 1], 1))
        for i in range(len(w) - 1)
    ]


# ---------------------------------------------------------------------------
# Pure forward evaluation and Taylor-mode spatial derivatives.
# ---------------------------------------------------------------------------


class Taylor2(NamedTuple):
    """Value, first and second derivative along one unit direction."""

    v: float
    d1: float
    d2: float


def mlp_apply(params: np.ndarray, spec: MlpSpec, inputs: np.ndarray) -> np.ndarray:
    """Dense forward pass on a batch laid out as (input_dim, n)."""
    a = np.asarray(inputs, dtype=float)
    act = ACTIVATIONS[spec.activation].f
    layers = _layer_arrays(np.asarray(params, dtype=float), spec)
    last = len(layers) - 1
    for i, (W, b) in enumerate(layers):
        a = W @ a + b
        if i != last:
            a = act(a)
    return a


def mlp_eval(params, spec: MlpSpec, x, y):
    """Scalar field phi(x, y); accepts scalars or equal-shaped arrays."""
    if spec.input_dim != 2 or spec.output_dim != 1:
        raise ConfigurationError("mlp_eval expects a 2-in 1-out network")
    xa, ya = np.broadcast_arrays(np.asarray(x, dtype=float), np.asarray(y, dtype=float))
    out = mlp_apply(params, spec, np.vstack([xa.ravel(), ya.ravel()]))[0]
    return float(out[0]) if xa.ndim == 0 else out.reshape(xa.shape)


def _forward_jets(params, spec: MlpSpec, X: np.ndarray, S: np.ndarray):
    """Propagate (value, d1, d2) columns through the network.

    X and S are (input_dim, n); S holds the direction of each column.
    Returns (phi, d1, d2), each shape (n,).
    """
    fns = ACTIVATIONS[spec.activation]
    layers = _layer_arrays(np.asarray(params, dtype=float), spec)
    last = len(layers) - 1
    v, u, w = np.asarray(X, dtype=float), np.asarray(S, dtype=float), np.zeros_like(S, dtype=float)
    for i, (W, b) in enumerate(layers):
        zv = W @ v + b
        zu = W @ u
        zw = W @ w
        if i != last:
            a0, s1, s2, _ = fns.jets(zv)
            v = a0
            u = s1 * zu
            w = s2 * zu * zu + s1 * zw
        else:
            v, u, w = zv, zu, zw
    return v[0], u[0], w[0]


def mlp_taylor2(params, spec: MlpSpec, point, direction) -> Taylor2:
    """Taylor triple of phi at `point` along the unit vector `direction`."""
    s = np.asarray(direction, dtype=float)
    if abs(float(np.dot(s, s)) - 1.0) > 1e-9:
        raise ConfigurationError("direction must be a unit vector")
    X = np.asarray(point, dtype=float).reshape(-1, 1)
    v, d1, d2 = _forward_jets(params, spec, X, s.reshape(-1, 1))
    return Taylor2(float(v[0]), float(d1[0]), float(d2[0]))


def _laplacian_batch(params, spec: MlpSpec, xy: np.ndarray):
    """phi and its Laplacian for a (2, n) batch, via two stacked direction sweeps."""
    n = xy.shape[1]
    X2 = np.concatenate([xy, xy], axis=1)
    S2 = np.zeros((2, 2 * n))
    S2[0, :n] = 1.0
    S2[1, n:] = 1.0
    v, _, d2 = _forward_jets(params, spec, X2, S2)
    return v[:n], d2[:n] + d2[n:]


def laplacian(params, spec: MlpSpec, x, y):
    """d2phi/dx2 + d2phi/dy2 at (x, y); accepts scalars or arrays."""
    xa, ya = np.broadcast_arrays(np.asarray(x, dtype=float), np.asarray(y, dtype=float))
    _, lap = _laplacian_batch(params, spec, np.vstack([xa.ravel(), ya.ravel()]))
    return float(lap[0]) if xa.ndim == 0 else lap.reshape(xa.shape)


# ---------------------------------------------------------------------------
# Scalar fields: a common face for networks and analytic oracles, so loss
# operators can consume either.
# ---------------------------------------------------------------------------


class ScalarField(Protocol):
    def eval(self, x, y): ...

    def laplacian(self, x, y): ...


class AnalyticField:
    """Closed-form field given as (value, laplacian) callables."""

    def __init__(self, fn, lap_fn):
        self._fn = fn
        self._lap = lap_fn

    def eval(self, x, y):
        return np.asarray(self._fn(np.asarray(x, dtype=float), np.asarray(y, dtype=float)), dtype=float)

    def laplacian(self, x, y):
        return np.asarray(self._lap(np.asarray(x, dtype=float), np.asarray(y, dtype=float)), dtype=float)


class NetworkField:
    """Trained network viewed as a scalar field."""

    def __init__(self, params, spec: MlpSpec):
        self.params = np.asarray(params, dtype=float)
        self.spec = spec
        if self.params.size != param_count(spec):
            raise ConfigurationError("parameter vector does not match spec")

    def eval(self, x, y):
        return mlp_eval(self.params, self.spec, x, y)

    def laplacian(self, x, y):
        return laplacian(self.params, self.spec, x, y)

    @property
    def v_hat(self) -> float:
        return float(self.params[-1])


# ---------------------------------------------------------------------------
# Recorded-operation reverse pass.
#
# Var wraps an ndarray (or python float) value plus pullback closures onto
# its parents.  Graphs are tiny (one node per array op, not per scalar), so
# the bookkeeping cost is negligible next to the BLAS work.
# ---------------------------------------------------------------------------


class Var:
    __slots__ = ("value", "parents")

    def __init__(self, value, parents=()):
        self.value = value
        self.parents = parents

    # -- operator sugar (constants may be plain floats/ndarrays) --
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __getitem__(self, idx):
        return take(self, idx)


def _val(x):
    return x.value if isinstance(x, Var) else x


def _shape(x):
    return np.shape(x)


def _unbroadcast(g, shape):
    if shape == ():
        return np.float64(np.sum(g))
    g = np.asarray(g)
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _binary(a, b, value, da, db):
    parents = []
    if isinstance(a, Var):
        parents.append((a, da))
    if isinstance(b, Var):
        parents.append((b, db))
    return Var(value, tuple(parents))


def add(a, b):
    va, vb = _val(a), _val(b)
    sa, sb = _shape(va), _shape(vb)
    return _binary(a, b, va + vb, lambda g: _unbroadcast(g, sa), lambda g: _unbroadcast(g, sb))


def sub(a, b):
    va, vb = _val(a), _val(b)
    sa, sb = _shape(va), _shape(vb)
    return _binary(a, b, va - vb, lambda g: _unbroadcast(g, sa), lambda g: -_unbroadcast(g, sb))


def mul(a, b):
    va, vb = _val(a), _val(b)
    sa, sb = _shape(va), _shape(vb)
    return _binary(
        a, b, va * vb,
        lambda g: _unbroadcast(g * vb, sa),
        lambda g: _unbroadcast(g * va, sb),
    )


def matmul(a, b):
    va, vb = _val(a), _val(b)
    return _binary(a, b, va @ vb, lambda g: g @ vb.T, lambda g: va.T @ g)


def affine(w, b, x):
    """w @ x + b in one node (b broadcasts over columns)."""
    vw, vb, vx = _val(w), _val(b), _val(x)
    out = vw @ vx
    out += vb
    parents = []
    if isinstance(w, Var):
        parents.append((w, lambda g: g @ vx.T))
    if isinstance(b, Var):
        parents.append((b, lambda g: g.sum(axis=1, keepdims=True)))
    if isinstance(x, Var):
        parents.append((x, lambda g: vw.T @ g))
    return Var(out, tuple(parents))


def take(a, idx):
    va = _val(a)

    def pull(g):
        out = np.zeros_like(va)
        out[idx] = g
        return out

    return Var(va[idx], ((a, pull),))


def reshape(a, shape):
    va = _val(a)
    orig = va.shape
    return Var(va.reshape(shape), ((a, lambda g: np.asarray(g).reshape(orig)),))


def tile2(a):
    """Duplicate columns: (m, n) -> (m, 2n)."""
    va = _val(a)
    n = va.shape[1]
    return Var(np.concatenate([va, va], axis=1), ((a, lambda g: g[:, :n] + g[:, n:]),))


def square(a):
    va = _val(a)
    return Var(va * va, ((a, lambda g: g * (2.0 * va)),))


def sqrt(a):
    va = _val(a)
    s = np.sqrt(va)
    return Var(s, ((a, lambda g: g * (0.5 / s)),))


def absolute(a):
    va = _val(a)
    return Var(np.abs(va), ((a, lambda g: g * np.sign(va)),))


def power(a, exponent: float):
    """a ** exponent for exponent >= 1 and non-negative a."""
    va = _val(a)
    return Var(va**exponent, ((a, lambda g: g * (exponent * va ** (exponent - 1.0))),))


def vsum(a):
    va = _val(a)
    return Var(np.float64(np.sum(va)), ((a, lambda g: np.full(np.shape(va), g)),))


def vmean(a):
    va = _val(a)
    n = va.size
    return Var(np.float64(np.sum(va) / n), ((a, lambda g: np.full(np.shape(va), g / n)),))


def vmax(a):
    """Maximum entry; the pullback routes to the first argmax."""
    va = _val(a)
    flat_idx = int(np.argmax(va))

    def pull(g):
        out = np.zeros_like(va)
        out.flat[flat_idx] = g
        return out

    return Var(np.float64(va.flat[flat_idx]), ((a, pull),))


def elementwise(a, value, deriv):
    """Node with caller-supplied value = fn(a.value) and deriv = fn'(a.value).

    Used internally so each activation derivative array is computed once and
    shared between the forward jet and the reverse pass.
    """
    return Var(value, ((a, lambda g: g * deriv),))


def jet_activation(zv: "Var", zh: "Var", ze, fns: "Activation"):
    """Fused activation for jet streams: one tape node set per layer.

    zv is the pre-activation value stream (m, n); zh and ze carry the first
    and second directional derivatives with the two coordinate directions
    stacked as 2n columns (ze may be None at the first layer, where the
    incoming second derivative is identically zero).  Returns (A, U, E):

        A = act(zv)
        U = act'(zv) * zh                       per direction column
        E = act''(zv) * zh^2 + act'(zv) * ze

    Equivalent to composing elementwise/tile2/mul/square/add nodes, but
    avoids materializing the column-duplicated derivative arrays (the
    direction pair rides in a broadcast axis), which roughly halves the
    memory traffic of the heavy interior-loss gradient.
    """
    z = zv.value
    m, n = z.shape
    a0, s1, s2, s3 = fns.jets(z)
    s1b, s2b = s1[:, None, :], s2[:, None, :]
    zh_v = zh.value
    zh3 = zh_v.reshape(m, 2, n)
    u = (zh3 * s1b).reshape(m, 2 * n)
    zh_sq = zh3 * zh3
    e3 = zh_sq * s2b
    if ze is not None:
        tmp = ze.value.reshape(m, 2, n) * s1b
        e3 += tmp
    e = e3.reshape(m, 2 * n)

    def untile(t):
        return t[:, 0, :] + t[:, 1, :]

    def pull_u_zv(g):
        return untile(g.reshape(m, 2, n) * zh3) * s2

    def pull_u_zh(g):
        return (g.reshape(m, 2, n) * s1b).reshape(m, 2 * n)

    def pull_e_zv(g):
        g3 = g.reshape(m, 2, n)
        out = untile(g3 * zh_sq) * s3
        if ze is not None:
            out += untile(g3 * ze.value.reshape(m, 2, n)) * s2
        return out

    def pull_e_zh(g):
        t = g.reshape(m, 2, n) * s2b
        t *= zh3
        t *= 2.0
        return t.reshape(m, 2 * n)

    def pull_e_ze(g):
        return (g.reshape(m, 2, n) * s1b).reshape(m, 2 * n)

    A = Var(a0, ((zv, lambda g: g * s1),))
    U = Var(u, ((zv, pull_u_zv), (zh, pull_u_zh)))
    e_parents = [(zv, pull_e_zv), (zh, pull_e_zh)]
    if ze is not None:
        e_parents.append((ze, pull_e_ze))
    E = Var(e, tuple(e_parents))
    return A, U, E


def apply_unary(a, fn, dfn):
    va = _val(a)
    return elementwise(a, fn(va), dfn(va))


def _backward(root: Var) -> dict:
    topo = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, _ in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    grads = {id(root): np.float64(1.0)}
    for node in reversed(topo):
        g = grads.get(id(node))
        if g is None:
            continue
        for parent, pull in node.parents:
            contrib = pull(g)
            pid = id(parent)
            if pid in grads:
                grads[pid] = grads[pid] + contrib
            else:
                grads[pid] = contrib
    return grads


def value_and_grad(loss_fn: Callable[[Var], Var], params: np.ndarray):
    """Evaluate a tape-built scalar loss and its exact parameter gradient.

    `loss_fn` receives the flat parameter vector wrapped as a Var and must
    assemble the loss from engine operations only.  A non-finite loss value
    is returned as-is (the flag propagates to the caller; no exception).
    """
    p = Var(np.asarray(params, dtype=float))
    out = loss_fn(p)
    if not isinstance(out, Var):
        raise ConfigurationError("loss_fn must return a tape Var")
    grads = _backward(out)
    g = grads.get(id(p))
    if g is None:
        g = np.zeros_like(p.value)
    return float(out.value), np.asarray(g, dtype=float)


def param_gradient(loss_fn: Callable[[Var], Var], params: np.ndarray) -> np.ndarray:
    return value_and_grad(loss_fn, params)[1]


# ---------------------------------------------------------------------------
# Tape-level network builders (shared by every training loss).
# ---------------------------------------------------------------------------


def _layer_param_vars(pvar: Var, spec: MlpSpec):
    if _val(pvar).size != param_count(spec):
        raise ConfigurationError("parameter vector does not match spec")
    w = spec.widths
    wslices, bslices, _ = param_slices(spec)
    return [
        (reshape(take(pvar, wslices[i]), (w[i + 1], w[i])),
         reshape(take(pvar, bslices[i]), (w[i + 1], 1)))
        for i in range(len(w) - 1)
    ]


def vhat_var(pvar: Var, spec: MlpSpec) -> Var:
    _, _, vi = param_slices(spec)
    return take(pvar, vi)


def network_output(pvar: Var, spec: MlpSpec, xy: np.ndarray) -> Var:
    """phi values (n,) for a (input_dim, n) batch, as a tape node."""
    layers = _layer_param_vars(pvar, spec)
    fns = ACTIVATIONS[spec.activation]
    a = np.asarray(xy, dtype=float)
    last = len(layers) - 1
    for i, (W, b) in enumerate(layers):
        z = affine(W, b, a)
        if i != last:
            a0, s1, _, _ = fns.jets(z.value)
            a = elementwise(z, a0, s1)
        else:
            a = z
    return reshape(a, (np.shape(xy)[1],))


def network_output_and_laplacian(pvar: Var, spec: MlpSpec, xy: np.ndarray):
    """(phi, laplacian) tape nodes, each (n,), for a (2, n) batch.

    The two coordinate directions ride as 2n stacked jet columns; activation
    derivative arrays are computed once per layer and shared between the
    value, d1 and d2 streams.
    """
    layers = _layer_param_vars(pvar, spec)
    fns = ACTIVATIONS[spec.activation]
    xy = np.asarray(xy, dtype=float)
    n = xy.shape[1]
    a = xy
    u0 = np.zeros((2, 2 * n))
    u0[0, :n] = 1.0
    u0[1, n:] = 1.0
    u = u0
    e = None
    last = len(layers) - 1
    for i, (W, b) in enumerate(layers):
        zv = affine(W, b, a)
        zu = matmul(W, u)
        ze = matmul(W, e) if e is not None else None
        if i != last:
            a, u, e = jet_activation(zv, zu, ze, fns)
        else:
            a, u, e = zv, zu, ze
    phi = reshape(a, (n,))
    epair = reshape(e, (2 * n,))
    lap = add(take(epair, slice(0, n)), take(epair, slice(n, 2 * n)))
    return phi, lap
