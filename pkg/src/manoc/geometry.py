"""Chart-based Riemannian geometry: metric, connection, curvature, geodesics.

Each manifold lives in a single coordinate chart with an explicit validity
box; paths that leave the box raise DomainExitError instead of switching
charts.  All point/vector data are plain numpy arrays in chart coordinates;
most internals broadcast over a leading batch axis so that randomized test
suites and per-node trajectory sweeps stay vectorized.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (
    ContractError,
    DomainError,
    DomainExitError,
    GeometryError,
    NonconvergenceError,
)

H_GEO = 1e-5          # central-difference step for metric derivatives
GEO_STEPS = 96        # fixed RK4 steps for one exp/geodesic integration
LOG_TOL = 1e-10       # chart-norm residual target for log_map shooting
LOG_MAX_ITER = 50


@dataclass(frozen=True)
class TangentVector:
    base: np.ndarray
    comps: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "base", np.asarray(self.base, dtype=float))
        object.__setattr__(self, "comps", np.asarray(self.comps, dtype=float))
        if self.base.shape != self.comps.shape:
            raise ContractError("tangent vector base/component shape mismatch")


@dataclass(frozen=True)
class CoTangentVector:
    base: np.ndarray
    comps: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "base", np.asarray(self.base, dtype=float))
        object.__setattr__(self, "comps", np.asarray(self.comps, dtype=float))


@dataclass(frozen=True)
class CurveSample:
    """Discretized curve: times strictly increasing, one point/velocity each."""

    times: np.ndarray
    points: np.ndarray
    velocities: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "times", np.asarray(self.times, dtype=float))
        object.__setattr__(self, "points", np.asarray(self.points, dtype=float))
        object.__setattr__(self, "velocities", np.asarray(self.velocities, dtype=float))
        if not np.all(np.diff(self.times) > 0):
            raise ContractError("curve times must be strictly increasing")
        if not (len(self.times) == len(self.points) == len(self.velocities)):
            raise ContractError("curve arrays must have equal length")


@dataclass
class ManifoldModel:
    """Metric provider over one chart.

    metric_fn maps points (..., n) -> (..., n, n); christoffel_fn, when
    present, maps (..., n) -> (..., n, n, n) with Gamma[k, i, j] symmetric in
    (i, j).  ``flat`` marks models whose connection vanishes identically in
    this chart, enabling exact shortcuts.
    """

    dim: int
    metric_fn: object
    christoffel_fn: object = None
    chart_domain: np.ndarray = None  # (n, 2) lo/hi, may be +-inf
    name: str = "custom"
    flat: bool = False

    def __post_init__(self):
        if self.chart_domain is None:
            self.chart_domain = np.column_stack(
                [np.full(self.dim, -np.inf), np.full(self.dim, np.inf)]
            )
        self.chart_domain = np.asarray(self.chart_domain, dtype=float)

    def contains(self, x):
        x = np.asarray(x, dtype=float)
        lo, hi = self.chart_domain[:, 0], self.chart_domain[:, 1]
        return np.all((x >= lo) & (x <= hi), axis=-1)

    def require_inside(self, x, what="point"):
        if not np.all(self.contains(x)):
            raise DomainError(f"{what} outside chart domain of {self.name}")

    def metric(self, x):
        g = np.asarray(self.metric_fn(np.asarray(x, dtype=float)), dtype=float)
        if not np.allclose(g, np.swapaxes(g, -1, -2), atol=1e-10):
            raise GeometryError(f"metric of {self.name} is not symmetric")
        eig = np.linalg.eigvalsh(g)
        if np.min(eig) <= 0:
            raise GeometryError(f"metric of {self.name} is not positive definite")
        return g

    def inner(self, x, v, w):
        g = self.metric(x)
        return np.einsum("...ij,...i,...j->...", g, v, w)

    def norm(self, x, v):
        return np.sqrt(np.maximum(self.inner(x, v, v), 0.0))


def christoffel_at(model, x, h=H_GEO, check=True):
    """Levi-Civita coefficients Gamma[k, i, j] at x (batched over leading axes)."""
    x = np.asarray(x, dtype=float)
    if check:
        model.require_inside(x)
        model.metric(x)  # validates symmetry and positive definiteness
    if model.christoffel_fn is not None:
        gamma = np.asarray(model.christoffel_fn(x), dtype=float)
        return 0.5 * (gamma + np.swapaxes(gamma, -1, -2))
    n = model.dim
    g = model.metric_fn(x)
    ginv = np.linalg.inv(g)
    # dg[..., l, i, j] = d g_ij / d x_l by central differences
    dg = np.empty(x.shape[:-1] + (n, n, n))
    for l in range(n):
        e = np.zeros(n)
        e[l] = h
        dg[..., l, :, :] = (model.metric_fn(x + e) - model.metric_fn(x - e)) / (2.0 * h)
    # Gamma^k_ij = 1/2 g^kl (d_i g_jl + d_j g_il - d_l g_ij)
    bracket = (
        np.einsum("...ijl->...lij", dg)  # d_i g_jl arranged as [l_out, i, j]
        + np.einsum("...jil->...lij", dg)
        - dg
    )
    # bracket[..., l, i, j] = d_i g_jl + d_j g_il - d_l g_ij
    gamma = 0.5 * np.einsum("...kl,...lij->...kij", ginv, bracket)
    return 0.5 * (gamma + np.swapaxes(gamma, -1, -2))


def curvature_tensor(model, x, h=None):
    """Full covariant curvature R[..., l, k, i, j] = <R(d_i, d_j) d_k, d_l>.

    Components follow R(X,Y)Z = nabla_X nabla_Y Z - nabla_Y nabla_X Z -
    nabla_[X,Y] Z; the first Bianchi identity and the pair antisymmetries
    hold by construction up to the finite-difference error in dGamma.
    """
    x = np.asarray(x, dtype=float)
    if model.flat:
        n = model.dim
        return np.zeros(x.shape[:-1] + (n, n, n, n))
    n = model.dim
    if h is None:
        # wider step when Gamma itself is a finite-difference quantity
        h = H_GEO if model.christoffel_fn is not None else np.sqrt(H_GEO)
    gamma = christoffel_at(model, x)
    dgamma = np.empty(x.shape[:-1] + (n, n, n, n))  # [..., l_deriv, k, i, j]
    for l in range(n):
        e = np.zeros(n)
        e[l] = h
        dgamma[..., l, :, :, :] = (
            christoffel_at(model, x + e) - christoffel_at(model, x - e)
        ) / (2.0 * h)
    # R^l_kij = d_i Gamma^l_jk - d_j Gamma^l_ik
    #           + Gamma^l_im Gamma^m_jk - Gamma^l_jm Gamma^m_ik
    r_up = (
        np.einsum("...iljk->...lkij", dgamma)
        - np.einsum("...jlik->...lkij", dgamma)
        + np.einsum("...lim,...mjk->...lkij", gamma, gamma)
        - np.einsum("...ljm,...mik->...lkij", gamma, gamma)
    )
    g = model.metric_fn(x)
    return np.einsum("...lm,...mkij->...lkij", g, r_up)


def curvature_quadratic(model, x, W, X, Y, Z, r_tensor=None):
    """Scalar R(W, X, Y, Z) = <R(W, X)Y, Z> with plain component arrays."""
    if r_tensor is None:
        r_tensor = curvature_tensor(model, x)
    return np.einsum("...lkij,...i,...j,...k,...l->...", r_tensor, W, X, Y, Z)


def curvature_at(model, x, X, Y, Z, W):
    """R(X, Y, Z, W) for TangentVectors based at x; checks the base points."""
    x = np.asarray(x, dtype=float)
    for v in (X, Y, Z, W):
        if not np.allclose(v.base, x, atol=1e-12):
            raise ContractError("curvature_at: tangent vector not based at x")
    model.require_inside(x)
    return float(curvature_quadratic(model, x, X.comps, Y.comps, Z.comps, W.comps))


def _geodesic_rhs(model, state):
    """state (..., 2n) -> d/ds state for the geodesic equation."""
    n = model.dim
    pos, vel = state[..., :n], state[..., n:]
    gamma = christoffel_at(model, pos, check=False)
    acc = -np.einsum("...kij,...i,...j->...k", gamma, vel, vel)
    return np.concatenate([vel, acc], axis=-1)


def integrate_geodesic(model, x, v, s, steps=GEO_STEPS, check_domain=True):
    """Follow the geodesic from x with initial velocity v for parameter s.

    Returns (point, TangentVector at point).  Batched: x, v may be (B, n).
    """
    x = np.asarray(x, dtype=float)
    comps = v.comps if isinstance(v, TangentVector) else np.asarray(v, dtype=float)
    model.require_inside(x)
    if s == 0.0:
        return x.copy(), TangentVector(x.copy(), comps.copy())
    if model.flat:
        end = x + s * comps
        if check_domain:
            model.require_inside(end, "geodesic endpoint")
        return end, TangentVector(end, comps.copy())
    state = np.concatenate([x, comps], axis=-1)
    h = s / steps
    for k in range(steps):
        k1 = _geodesic_rhs(model, state)
        k2 = _geodesic_rhs(model, state + 0.5 * h * k1)
        k3 = _geodesic_rhs(model, state + 0.5 * h * k2)
        k4 = _geodesic_rhs(model, state + h * k3)
        state = state + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        pos = state[..., : model.dim]
        if check_domain and not np.all(model.contains(pos)):
            raise DomainExitError("geodesic left chart domain", (k + 1) * h)
    n = model.dim
    return state[..., :n], TangentVector(state[..., :n], state[..., n:])


def exp_map(model, x, v, steps=GEO_STEPS, check_domain=True):
    """exp_x(v): endpoint of the unit-parameter geodesic from x along v."""
    point, _ = integrate_geodesic(model, x, v, 1.0, steps=steps, check_domain=check_domain)
    return point


def log_map(model, x, y, steps=GEO_STEPS, tol=LOG_TOL, max_iter=LOG_MAX_ITER):
    """Inverse of exp_x by damped-Newton shooting; supports batched points."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    model.require_inside(x)
    model.require_inside(y)
    if model.flat:
        return TangentVector(x, y - x)
    squeeze = x.ndim == 1
    xb = np.atleast_2d(x)
    yb = np.atleast_2d(y)
    n = model.dim
    v = yb - xb  # chart-difference initial guess (exp is near-identity)
    fd = 1e-7

    def residual(vv):
        # trial shots may wander outside the chart where the metric
        # expressions degenerate; the damping handles the fallout
        with np.errstate(all="ignore"):
            return exp_map(model, xb, vv, steps=steps, check_domain=False) - yb

    res = residual(v)
    for _ in range(max_iter):
        norms = np.linalg.norm(res, axis=-1)
        if np.max(norms) < tol:
            break
        # batched Jacobian of the shooting map by central differences
        jac = np.empty((xb.shape[0], n, n))
        for j in range(n):
            e = np.zeros(n)
            e[j] = fd
            jac[:, :, j] = (residual(v + e) - residual(v - e)) / (2.0 * fd)
        step = np.linalg.solve(jac, res[..., None])[..., 0]
        step[norms < tol] = 0.0  # leave converged items untouched
        alpha = np.ones(xb.shape[0])
        for _damp in range(20):
            trial = v - alpha[:, None] * step
            new_res = residual(trial)
            worse = np.linalg.norm(new_res, axis=-1) > (1.0 - 1e-4) * norms
            if not np.any(worse & (norms >= tol)):
                break
            alpha = np.where(worse, alpha * 0.5, alpha)
        v = v - alpha[:, None] * step
        res = residual(v)
    else:
        raise NonconvergenceError(
            "log_map shooting did not converge", float(np.max(np.linalg.norm(res, axis=-1)))
        )
    return TangentVector(x, v[0] if squeeze else v)


def distance(model, x, y, **kwargs):
    """Geodesic distance |log_x y| (within the shooting radius of the chart)."""
    if model.flat:
        # flat charts may still carry a non-identity constant metric
        diff = np.asarray(y, dtype=float) - np.asarray(x, dtype=float)
        return float(np.sqrt(model.inner(np.asarray(x, dtype=float), diff, diff)))
    v = log_map(model, x, y, **kwargs)
    return float(model.norm(np.asarray(x, dtype=float), v.comps))


def parallel_transport(model, curve, v):
    """Transport v along the sampled curve by RK4 on nabla_{gamma'} X = 0.

    When the curve has an odd number of nodes (2K+1), consecutive node pairs
    serve as full RK4 steps with the middle node as the exact midpoint sample;
    otherwise midpoints are linearly interpolated.
    """
    comps = v.comps if isinstance(v, TangentVector) else np.asarray(v, dtype=float)
    pts = curve.points
    if isinstance(v, TangentVector) and not np.allclose(v.base, pts[0], atol=1e-12):
        raise ContractError("parallel_transport: vector not based at curve start")
    model.require_inside(pts, "curve")
    if model.flat:
        return TangentVector(pts[-1], comps.copy())
    times = curve.times
    m = len(times)

    def step(x0, v0, x1, v1, xm, vm, h, w):
        k1 = _transport_rhs(model, x0, v0, w)
        k2 = _transport_rhs(model, xm, vm, w + 0.5 * h * k1)
        k3 = _transport_rhs(model, xm, vm, w + 0.5 * h * k2)
        k4 = _transport_rhs(model, x1, v1, w + h * k3)
        return w + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)

    w = comps.copy()
    if m % 2 == 1 and m >= 3:
        for i in range(0, m - 2, 2):
            h = times[i + 2] - times[i]
            w = step(
                pts[i], curve.velocities[i], pts[i + 2], curve.velocities[i + 2],
                pts[i + 1], curve.velocities[i + 1], h, w,
            )
    else:
        for i in range(m - 1):
            h = times[i + 1] - times[i]
            xm = 0.5 * (pts[i] + pts[i + 1])
            vm = 0.5 * (curve.velocities[i] + curve.velocities[i + 1])
            w = step(pts[i], curve.velocities[i], pts[i + 1], curve.velocities[i + 1],
                     xm, vm, h, w)
    return TangentVector(pts[-1], w)


def _transport_rhs(model, pos, vel, w):
    gamma = christoffel_at(model, pos, check=False)
    return -np.einsum("kij,i,j->k", gamma, vel, w)


def raise_index(model, x, p_comps):
    """Covector components -> vector components via the inverse metric."""
    ginv = np.linalg.inv(model.metric(np.asarray(x, dtype=float)))
    return np.einsum("...ij,...j->...i", ginv, p_comps)


def lower_index(model, x, v_comps):
    g = model.metric(np.asarray(x, dtype=float))
    return np.einsum("...ij,...j->...i", g, v_comps)


# ---------------------------------------------------------------------------
# Built-in models


def euclidean(n):
    eye = np.eye(n)

    def metric_fn(x):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(eye, x.shape[:-1] + (n, n)).copy()

    def christoffel_fn(x):
        x = np.asarray(x, dtype=float)
        return np.zeros(x.shape[:-1] + (n, n, n))

    return ManifoldModel(
        dim=n, metric_fn=metric_fn, christoffel_fn=christoffel_fn,
        name=f"euclidean:{n}", flat=True,
    )


def sphere2(theta_margin=1e-3):
    """Unit sphere in spherical chart (theta, phi), poles excluded."""

    def metric_fn(x):
        x = np.asarray(x, dtype=float)
        theta = x[..., 0]
        g = np.zeros(x.shape[:-1] + (2, 2))
        g[..., 0, 0] = 1.0
        g[..., 1, 1] = np.sin(theta) ** 2
        return g

    def christoffel_fn(x):
        x = np.asarray(x, dtype=float)
        theta = x[..., 0]
        gamma = np.zeros(x.shape[:-1] + (2, 2, 2))
        gamma[..., 0, 1, 1] = -np.sin(theta) * np.cos(theta)
        cot = np.cos(theta) / np.sin(theta)
        gamma[..., 1, 0, 1] = cot
        gamma[..., 1, 1, 0] = cot
        return gamma

    domain = np.array([[theta_margin, np.pi - theta_margin], [-2.0 * np.pi, 2.0 * np.pi]])
    return ManifoldModel(
        dim=2, metric_fn=metric_fn, christoffel_fn=christoffel_fn,
        chart_domain=domain, name="sphere2",
    )


def halfplane2(y_floor=1e-6):
    """Poincare upper half-plane, curvature -1."""

    def metric_fn(x):
        x = np.asarray(x, dtype=float)
        y = x[..., 1]
        g = np.zeros(x.shape[:-1] + (2, 2))
        g[..., 0, 0] = 1.0 / y**2
        g[..., 1, 1] = 1.0 / y**2
        return g

    def christoffel_fn(x):
        x = np.asarray(x, dtype=float)
        y = x[..., 1]
        gamma = np.zeros(x.shape[:-1] + (2, 2, 2))
        inv_y = 1.0 / y
        gamma[..., 0, 0, 1] = -inv_y
        gamma[..., 0, 1, 0] = -inv_y
        gamma[..., 1, 0, 0] = inv_y
        gamma[..., 1, 1, 1] = -inv_y
        return gamma

    domain = np.array([[-np.inf, np.inf], [y_floor, np.inf]])
    return ManifoldModel(
        dim=2, metric_fn=metric_fn, christoffel_fn=christoffel_fn,
        chart_domain=domain, name="halfplane2",
    )


def product_with_line(model):
    """R x M with the block metric 1 (+) g; used by the Bolza augmentation."""
    n = model.dim

    def metric_fn(x):
        x = np.asarray(x, dtype=float)
        g = np.zeros(x.shape[:-1] + (n + 1, n + 1))
        g[..., 0, 0] = 1.0
        g[..., 1:, 1:] = model.metric_fn(x[..., 1:])
        return g

    christoffel_fn = None
    if model.christoffel_fn is not None:
        def christoffel_fn(x):
            x = np.asarray(x, dtype=float)
            gamma = np.zeros(x.shape[:-1] + (n + 1, n + 1, n + 1))
            gamma[..., 1:, 1:, 1:] = model.christoffel_fn(x[..., 1:])
            return gamma

    domain = np.vstack([np.array([[-np.inf, np.inf]]), model.chart_domain])
    return ManifoldModel(
        dim=n + 1, metric_fn=metric_fn, christoffel_fn=christoffel_fn,
        chart_domain=domain, name=f"line*{model.name}", flat=model.flat,
    )


_BUILTIN_CACHE = {}


def builtin_model(spec):
    """Resolve 'euclidean:n' | 'sphere2' | 'halfplane2' to a model."""
    if spec in _BUILTIN_CACHE:
        return _BUILTIN_CACHE[spec]
    if spec.startswith("euclidean:"):
        model = euclidean(int(spec.split(":", 1)[1]))
    elif spec == "sphere2":
        model = sphere2()
    elif spec == "halfplane2":
        model = halfplane2()
    else:
        raise DomainError(f"unknown builtin manifold {spec!r}")
    _BUILTIN_CACHE[spec] = model
    return model
