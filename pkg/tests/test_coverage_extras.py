"""Spec-example coverage that doesn't fit the per-module files."""

import numpy as np
import pytest

from manoc import geometry as geo
from manoc import problem as pb
from manoc import second_order as so
from manoc import trajectory as tj
from manoc import variations as va


def polar_plane_problem():
    """Flat plane in polar coordinates via a user expression metric."""
    return pb.load_problem(dict(
        name="polar", n=2, m=1, T=1.0, grid_N=64,
        manifold={"dim": 2, "metric": [["1", "0"], ["0", "x1^2"]],
                  "domain_lo": [0.1, -3.0], "domain_hi": [5.0, 3.0]},
        dynamics=["u1", "0.3"], phi=["xf1"], x0=[1.0, 0.0],
        control_set={"lo": [-1.0], "hi": [1.0]}, reference={"u_const": [0.2]},
    ))


def test_expression_metric_polar_plane_is_flat():
    p = polar_plane_problem()
    model = p.manifold
    x = np.array([1.3, 0.7])
    gamma = geo.christoffel_at(model, x)
    # polar-coordinate plane: Gamma^r_pp = -r, Gamma^p_rp = 1/r
    assert gamma[0, 1, 1] == pytest.approx(-1.3, abs=1e-6)
    assert gamma[1, 0, 1] == pytest.approx(1.0 / 1.3, abs=1e-6)
    X = geo.TangentVector(x, np.array([1.0, 0.0]))
    Y = geo.TangentVector(x, np.array([0.0, 1.0 / 1.3]))
    assert abs(geo.curvature_at(model, x, X, Y, Y, X)) < 1e-4


def test_expression_metric_distance_matches_euclidean():
    p = polar_plane_problem()
    model = p.manifold

    def cart(q):
        return np.array([q[0] * np.cos(q[1]), q[0] * np.sin(q[1])])

    a = np.array([1.0, 0.2])
    b = np.array([1.4, 0.9])
    d = geo.distance(model, a, b)
    assert d == pytest.approx(np.linalg.norm(cart(a) - cart(b)), abs=1e-7)


def test_exp_of_zero_vector_is_identity():
    sph = geo.builtin_model("sphere2")
    x = np.array([1.1, 0.4])
    assert np.allclose(geo.exp_map(sph, x, np.zeros(2)), x)


def test_bolza_flat_straight_line_passes():
    # coordinate control fields on the flat plane; a straight segment is the
    # shortest curve, so sampled feasible directions never trigger the test
    data = dict(
        name="flat-line", manifold="euclidean:2", n=2, m=2, T=1.0, grid_N=256,
        dynamics=["u1", "u2"], x0=[0.0, 0.0],
        control_set={"lo": [-2, -2], "hi": [2, 2]},
        reference={"u_const": [1.0, 0.0]},
        bolza={"f0": "(u1^2 + u2^2) / 2",
               "psi1": ["xi1", "xi2"], "psi2": ["xf1 - 1.0", "xf2"]},
    )
    p = pb.load_problem(data)
    traj = tj.integrate_state(p, p.x0, p.reference_signal())
    frame = tj.build_frame(p, traj)
    ell0, ell_psi1, ell_psi2 = -1.0, np.array([1.0, 0.0]), np.array([-1.0, 0.0])
    rng = np.random.default_rng(5)
    for _ in range(5):
        w = rng.normal(size=p.grid_N)
        w -= w.mean()
        a = 1e-4 / float(np.sqrt((w**2).mean()))
        u = pb.ControlSignal(p.grid_times(),
                             np.column_stack([1.0 + a * w, np.zeros(p.grid_N)]))
        rep = so.bolza_second_order_lhs(p, traj, frame, ell0, ell_psi1,
                                        ell_psi2, u, [0.0, 0.0],
                                        cross_check=False)
        assert rep.lhs <= 1e-6
        assert rep.breakdown["curvature"] == 0.0


def test_pointwise_hessians_pass_through_when_Z_identity():
    # driftless flat dynamics: Z = I, so the assembled endpoint Hessians are
    # the plain chart Hessians
    p = pb.load_problem(dict(
        name="driftless", manifold="euclidean:2", n=2, m=2, T=1.0, grid_N=64,
        dynamics=["u1", "u2"], phi=["(xf1^2 + 2*xf2^2) / 2"],
        psi=["xf1 - 0.2"], x0=[0.1, 0.3],
        control_set={"lo": [-1, -1], "hi": [1, 1]},
        reference={"u_const": [0.1, -0.1]},
    ))
    traj = tj.integrate_state(p, p.x0, p.reference_signal())
    frame = tj.build_frame(p, traj)
    ell = pb.Multiplier([-1.0], [0.5])
    u = pb.ControlSignal.constant(p, [0.5, 0.5])
    data = so.pointwise_ingredients(p, traj, frame, ell, u, [0.25, 0.5, 0.75])
    assert np.allclose(data.hess_Phi[0], np.diag([1.0, 2.0]), atol=1e-5)
    assert np.allclose(data.hess_Psi[0], 0.0, atol=1e-5)


def test_pointwise_hypothesis_failure_reported():
    # all witness drifts on the same side: 0 is not interior and no positive
    # weights annihilate the stack
    p = pb.load_problem(dict(
        name="oneside", manifold="euclidean:1", n=1, m=1, T=1.0, grid_N=64,
        dynamics=["u1"], phi=["xf1"], psi=["xf1 - 0.05"], x0=[0.0],
        control_set={"lo": [0.0], "hi": [1.0]},
        reference={"u_const": [0.05]},
    ))
    traj = tj.integrate_state(p, p.x0, p.reference_signal())
    frame = tj.build_frame(p, traj)
    ell = pb.Multiplier([-1.0], [1.0])
    u = pb.ControlSignal.constant(p, [1.0])  # drift strictly positive
    data = so.pointwise_ingredients(p, traj, frame, ell, u, [0.25, 0.5, 0.75])
    assert not data.hypotheses["ii"]
    assert data.interiority_radius <= 0.0
    assert not data.hypotheses["iii"]


def test_fundamental_matrix_conditioning_warning():
    p = pb.load_problem(dict(
        name="stiff", manifold="euclidean:1", n=1, m=1, T=1.0, grid_N=64,
        dynamics=["25*x1"], phi=["xf1"], x0=[1.0],
        control_set={"points": [[0.0]]}, reference={"u_const": [0.0]},
    ))
    traj = tj.integrate_state(p, p.x0, p.reference_signal())
    frame = tj.build_frame(p, traj)
    with pytest.warns(UserWarning, match="condition number"):
        data = tj.reference_data(p, traj, frame)
    assert data.cond_warning


def test_covariant_endpoint_hessian_correction_on_sphere(sphere_geodesic):
    p, traj, frame = sphere_geodesic
    fn = pb.EndpointFunction.parse("xf1^2", p.n)
    x0, xT = traj.states[0], traj.states[-1]
    _, _, H22 = va.covariant_endpoint_hessians(p, fn, x0, xT)
    gamma = geo.christoffel_at(p.manifold, xT)
    grad = np.array([2 * xT[0], 0.0])
    expected = np.diag([2.0, 0.0]) - np.einsum("kij,k->ij", gamma, grad)
    assert np.allclose(H22, expected, atol=1e-5)
