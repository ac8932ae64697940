import numpy as np
import pytest

from manoc import geometry as geo
from manoc import pmp
from manoc import problem as pb
from manoc import trajectory as tj


def test_hamiltonian_values(warga):
    p, traj, _ = warga
    x = np.zeros(2)
    # along the zero trajectory with p = (-1, 0) the Hamiltonian vanishes
    # for every control, so maximization is trivially tight
    for u in pb.sample_controls(p.control_set):
        assert pmp.hamiltonian(p, 0.0, x, np.array([-1.0, 0.0]), u) == 0.0
    assert pmp.hamiltonian(p, 0.0, x, np.zeros(2), [1.0, 1.0]) == 0.0


def test_hamiltonian_dot_product():
    p = pb.load_problem(dict(
        name="dot", manifold="euclidean:1", n=1, m=1, T=1.0, grid_N=16,
        dynamics=["u1"], phi=["xf1"], x0=[0.0],
        control_set={"lo": [-5.0], "hi": [5.0]}, reference={"u_const": [0.0]},
    ))
    assert pmp.hamiltonian(p, 0.0, [0.0], np.array([2.0]), [3.0]) == 6.0


def test_hamiltonian_base_mismatch():
    p = pb.load_problem(dict(
        name="dot", manifold="euclidean:1", n=1, m=1, T=1.0, grid_N=16,
        dynamics=["u1"], phi=["xf1"], x0=[0.0],
        control_set={"lo": [-5.0], "hi": [5.0]}, reference={"u_const": [0.0]},
    ))
    cov = geo.CoTangentVector(np.array([1.0]), np.array([2.0]))
    with pytest.raises(pmp.ContractError):
        pmp.hamiltonian(p, 0.0, [0.0], cov, [3.0])


def test_warga_costate_constant(warga, warga_multiplier):
    p, traj, frame = warga
    costate = pmp.solve_adjoint(p, traj, frame, warga_multiplier)
    assert np.abs(costate.p - np.array([-1.0, 0.0])).max() < 1e-6


def test_costate_constant_when_A_zero():
    p = pb.load_problem(dict(
        name="driftless", manifold="euclidean:2", n=2, m=2, T=1.0, grid_N=32,
        dynamics=["u1", "u2"], phi=["xf1 + 2*xf2"], x0=[0.0, 0.0],
        control_set={"lo": [-1, -1], "hi": [1, 1]},
        reference={"u_const": [0.0, 0.0]},
    ))
    traj = tj.integrate_state(p, p.x0, p.reference_signal())
    frame = tj.build_frame(p, traj)
    ell = pb.Multiplier([-1.0], [])
    costate = pmp.solve_adjoint(p, traj, frame, ell)
    assert np.abs(costate.p - np.array([-1.0, -2.0])).max() < 1e-9


def test_closed_form_matches_ode(warga, warga_multiplier):
    p, traj, frame = warga
    ode = pmp.solve_adjoint(p, traj, frame, warga_multiplier)
    closed = pmp.costate_closed_form(p, traj, frame, warga_multiplier)
    assert np.abs(closed - ode.fine_p).max() < 1e-6


def test_closed_form_matches_ode_nontrivial():
    p = pb.load_problem(dict(
        name="spin", manifold="euclidean:2", n=2, m=1, T=1.0, grid_N=256,
        dynamics=["x2 + 0.3*x1", "u1 - x1"], phi=["xf1^2 + xf2"],
        x0=[0.4, -0.1], control_set={"lo": [-1.0], "hi": [1.0]},
        reference={"u_const": [0.2]},
    ))
    traj = tj.integrate_state(p, p.x0, p.reference_signal())
    frame = tj.build_frame(p, traj)
    ell = pb.Multiplier([-1.0], [])
    ode = pmp.solve_adjoint(p, traj, frame, ell)
    closed = pmp.costate_closed_form(p, traj, frame, ell)
    assert np.abs(closed - ode.fine_p).max() < 1e-6


def test_pmp_residuals_paper_multiplier(warga, warga_multiplier):
    p, traj, frame = warga
    rep = pmp.pmp_residuals(p, traj, frame, warga_multiplier)
    assert rep.verdict
    assert max(rep.r_hamiltonian, rep.r_transversality,
               rep.r_sign, rep.r_complementarity) <= 1e-9
    assert rep.active_inequalities == [0]
    assert rep.inactive_inequalities == []


def test_pmp_residuals_bad_multiplier_fails(warga):
    # weight on the second initial-state row: the costate built from the
    # terminal data stays zero, so the defect surfaces as a unit
    # transversality residual and the verdict fails
    p, traj, frame = warga
    bad = pb.Multiplier([0.0], [0.0, 1.0, 0.0])
    rep = pmp.pmp_residuals(p, traj, frame, bad)
    assert not rep.verdict
    assert rep.r_transversality == pytest.approx(1.0, abs=1e-9)


def test_pmp_residuals_scaling_invariance(warga, warga_multiplier):
    p, traj, frame = warga
    r1 = pmp.pmp_residuals(p, traj, frame, warga_multiplier)
    r2 = pmp.pmp_residuals(p, traj, frame, warga_multiplier.scaled(37.0))
    assert r1.r_hamiltonian == pytest.approx(r2.r_hamiltonian, abs=1e-12)
    assert r1.r_transversality == pytest.approx(r2.r_transversality, abs=1e-12)
    assert r1.verdict == r2.verdict


def test_singleton_control_set_trivial_max():
    p = pb.load_problem(dict(
        name="single", manifold="euclidean:1", n=1, m=1, T=1.0, grid_N=32,
        dynamics=["u1 - x1"], phi=["xf1"], x0=[1.0],
        control_set={"points": [[0.5]]}, reference={"u_const": [0.5]},
    ))
    traj = tj.integrate_state(p, p.x0, p.reference_signal())
    frame = tj.build_frame(p, traj)
    ell = pb.Multiplier([-1.0], [])
    rep = pmp.pmp_residuals(p, traj, frame, ell)
    assert rep.r_hamiltonian == 0.0


def test_integral_first_order_trivial_zero(warga, warga_multiplier):
    p, traj, frame = warga
    val = pmp.integral_first_order(p, traj, frame, warga_multiplier,
                                   np.zeros(2), traj.signal)
    assert val == 0.0


def test_integral_first_order_flat_hamiltonian(warga, warga_multiplier):
    p, traj, frame = warga
    sigma = pb.ControlSignal.constant(p, [1.0, -1.0])
    val = pmp.integral_first_order(p, traj, frame, warga_multiplier,
                                   np.zeros(2), sigma)
    assert abs(val) < 1e-9  # H is flat along the zero trajectory


def test_integral_first_order_sign_test(warga):
    # a rejected multiplier admits a sigma with positive integral value
    p, traj, frame = warga
    bad = pb.Multiplier([0.0], [0.0, 1.0, 0.0])
    best = -np.inf
    for u_pt in pb.sample_controls(p.control_set):
        sigma = pb.ControlSignal.constant(p, u_pt)
        for W in (np.zeros(2), np.array([1.0, 0.0]), np.array([0.0, 1.0]),
                  np.array([0.0, -1.0])):
            best = max(best, pmp.integral_first_order(p, traj, frame, bad, W, sigma))
    assert best > 1e-6


def test_adjoint_duality_identity(warga, warga_multiplier, warga_direction):
    # p(T) X(T) - p(0) X(0) = integral of p (f(u) - f(ubar))
    from manoc import variations as va
    p, traj, frame = warga
    costate = pmp.solve_adjoint(p, traj, frame, warga_multiplier)
    fine_X = va.solve_linearized(p, traj, frame, warga_direction, [0.0, 0.0])
    _, fu, _ = tj.signal_frame_streams(p, traj, frame, warga_direction)
    data = tj.reference_data(p, traj, frame)
    p_cells = tj.nodes_to_cells(costate.fine_p)
    quad = tj.quad_cells(np.einsum("tci,tci->tc", p_cells, fu - data.fvec),
                         traj.cell_width)
    lhs = costate.fine_p[-1] @ fine_X[-1] - costate.fine_p[0] @ fine_X[0]
    assert abs(lhs - quad) < 1e-6


def test_find_multipliers_warga_unique_ray(warga):
    p, traj, frame = warga
    found = pmp.find_multipliers(p, traj, frame)
    assert len(found) == 1
    ell, rep = found[0]
    assert rep.verdict
    norm = ell.normalized()
    assert np.allclose(norm.ell_phi, [-1.0], atol=1e-4)
    assert np.allclose(norm.ell_psi, [1.0, 0.0, 0.0], atol=1e-4)


def test_find_multipliers_scalar_strict_maximizer():
    p = pb.load_problem(dict(
        name="scalar", manifold="euclidean:1", n=1, m=1, T=1.0, grid_N=128,
        dynamics=["u1 - x1^2"], phi=["xf1"], psi=["xi1"], x0=[0.0],
        control_set={"lo": [-1.0], "hi": [1.0]}, reference={"u_const": [-1.0]},
    ))
    traj = tj.integrate_state(p, p.x0, p.reference_signal())
    frame = tj.build_frame(p, traj)
    found = pmp.find_multipliers(p, traj, frame)
    assert len(found) >= 1
    assert any(ell.is_normal for ell, _ in found)


def test_find_multipliers_non_extremal_empty():
    p = pb.load_problem(dict(
        name="warga-bad", manifold="euclidean:2", n=2, m=2, T=1.0, grid_N=256,
        dynamics=["x2*(u1+u2)", "u2 - x1"], phi=["xf1"],
        psi=["xi1", "xi2", "xf2"], x0=[0.0, 0.0],
        control_set={"lo": [0.0, -1.0], "hi": [1.0, 1.0]},
        reference={"u_const": [0.0, 0.5]},
    ))
    traj = tj.integrate_state(p, p.x0, p.reference_signal())
    frame = tj.build_frame(p, traj)
    assert pmp.find_multipliers(p, traj, frame) == []


def test_report_serialization(warga, warga_multiplier):
    import json
    p, traj, frame = warga
    rep = pmp.pmp_residuals(p, traj, frame, warga_multiplier)
    data = json.loads(rep.to_json())
    assert set(data) == {"residuals", "multiplier", "active_sets", "verdicts"}
    assert data["verdicts"]["pmp"] == "pass"
