"""Randomized identity suite for the geometry kernel.

Draws points, vectors and short geodesic curves on a model and measures the
residuals of the structural identities (transport isometry, exp/log round
trips, curvature symmetries, geodesic speed conservation).  Used by the CLI
``geometry-selftest`` command and by the acceptance suite.
"""

from __future__ import annotations

import numpy as np

from . import geometry as geo

TOL = {
    "transport_isometry": 1e-6,
    "exp_log_round_trip": 1e-8,
    "curvature_antisymmetry": 1e-6,
    "curvature_bianchi": 1e-6,
    "geodesic_speed": 1e-6,
    "metric_spd": 0.0,   # reported as -min eigenvalue; must stay negative
}


def _sample_box(model, rng, count, margin=0.15):
    lo = model.chart_domain[:, 0].copy()
    hi = model.chart_domain[:, 1].copy()
    lo[~np.isfinite(lo)] = -1.5
    hi[~np.isfinite(hi)] = 1.5
    span = hi - lo
    return (lo + margin * span) + (1.0 - 2.0 * margin) * span * rng.random((count, model.dim))


def _geodesic_curve(model, x0, v, nodes=65):
    """Sampled geodesic with an odd node count (paired-step transport)."""
    n = model.dim
    pts = np.empty((nodes, n))
    vels = np.empty((nodes, n))
    state = np.concatenate([x0, v])
    pts[0], vels[0] = x0, v
    h = 1.0 / (nodes - 1)
    for i in range(1, nodes):
        k1 = geo._geodesic_rhs(model, state)
        k2 = geo._geodesic_rhs(model, state + 0.5 * h * k1)
        k3 = geo._geodesic_rhs(model, state + 0.5 * h * k2)
        k4 = geo._geodesic_rhs(model, state + h * k3)
        state = state + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        pts[i], vels[i] = state[:n], state[n:]
    return geo.CurveSample(np.linspace(0.0, 1.0, nodes), pts, vels)


def geometry_suite(model, n_samples=500, seed=7):
    """Residual maxima of the identity suite; keys match TOL."""
    rng = np.random.default_rng(seed)
    n = model.dim
    pts = _sample_box(model, rng, n_samples)
    scale = 0.25

    res = {}
    g = model.metric(pts)
    res["metric_spd"] = -float(np.min(np.linalg.eigvalsh(g)))

    # curvature symmetries: R[t, l, k, i, j] = <R(d_i, d_j) d_k, d_l>
    R = geo.curvature_tensor(model, pts)
    anti_first = R + np.einsum("tlkij->tlkji", R)      # swap X, Y
    anti_last = R + np.einsum("tlkij->tklij", R)       # swap Z, W
    bianchi = (
        R
        + np.einsum("tlijk->tlkij", R)                 # R(Y, Z) X component
        + np.einsum("tljki->tlkij", R)                 # R(Z, X) Y component
    )
    norm = max(1.0, float(np.max(np.abs(R))))
    res["curvature_antisymmetry"] = float(
        max(np.max(np.abs(anti_first)), np.max(np.abs(anti_last)))) / norm
    res["curvature_bianchi"] = float(np.max(np.abs(bianchi))) / norm

    # exp/log round trip on nearby pairs; chart norms capped so paths stay
    # clear of coordinate degeneracies
    vs = scale * rng.normal(size=(n_samples, n))
    vs /= np.maximum(1.0, np.linalg.norm(vs, axis=1, keepdims=True) / 0.35)
    ys = geo.exp_map(model, pts, vs)
    back = geo.log_map(model, pts, ys)
    again = geo.exp_map(model, pts, back.comps)
    res["exp_log_round_trip"] = float(np.max(np.linalg.norm(again - ys, axis=1)))

    # geodesic speed conservation over a unit parameter interval
    _, tv = geo.integrate_geodesic(model, pts, vs, 1.0, steps=256)
    sp0 = model.norm(pts, vs)
    sp1 = model.norm(tv.base, tv.comps)
    res["geodesic_speed"] = float(np.max(np.abs(sp1 - sp0) / np.maximum(sp0, 1e-12)))

    # parallel transport preserves pairings along random short geodesics
    worst = 0.0
    for c in range(max(8, n_samples // 25)):
        x0 = pts[c]
        v = scale * rng.normal(size=n)
        curve = _geodesic_curve(model, x0, v)
        w1 = rng.normal(size=n)
        w2 = rng.normal(size=n)
        t1 = geo.parallel_transport(model, curve, geo.TangentVector(x0, w1))
        t2 = geo.parallel_transport(model, curve, geo.TangentVector(x0, w2))
        before = model.inner(x0, w1, w2)
        after = model.inner(curve.points[-1], t1.comps, t2.comps)
        worst = max(worst, abs(after - before) / max(1.0, abs(before)))
    res["transport_isometry"] = float(worst)
    return res


def suite_verdict(residuals):
    checks = {}
    for key, tol in TOL.items():
        value = residuals[key]
        ok = bool(value <= tol) if tol > 0 else bool(value < 0)
        checks[key] = {"value": value, "tolerance": tol, "pass": ok}
    return all(c["pass"] for c in checks.values()), checks
