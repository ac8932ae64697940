import numpy as np
import pytest
import scipy.linalg as sla

from manoc import geometry as geo
from manoc import problem as pb
from manoc import trajectory as tj
from manoc import variations as va


def test_warga_switching_field(warga, warga_direction):
    p, traj, frame = warga
    X = va.solve_linearized(p, traj, frame, warga_direction, [0.0, 0.0])
    assert np.abs(X[:, 0]).max() == 0.0
    mid = len(X) // 2
    assert X[mid, 1] == pytest.approx(-0.5, abs=1e-9)
    assert X[-1, 1] == pytest.approx(0.0, abs=1e-12)


def test_zero_direction_zero_field(warga):
    p, traj, frame = warga
    X = va.solve_linearized(p, traj, frame, traj.signal, [0.0, 0.0])
    assert np.abs(X).max() == 0.0


def test_matrix_exponential_oracle():
    M = np.array([[0.3, -0.8], [1.1, 0.2]])
    p = pb.load_problem(dict(
        name="lin", manifold="euclidean:2", n=2, m=1, T=1.0, grid_N=128,
        dynamics=["0.3*x1 - 0.8*x2", "1.1*x1 + 0.2*x2"], phi=["xf1"],
        x0=[0.5, -0.2], control_set={"points": [[0.0]]},
        reference={"u_const": [0.0]},
    ))
    traj = tj.integrate_state(p, p.x0, p.reference_signal())
    frame = tj.build_frame(p, traj)
    V = np.array([0.7, -0.3])
    X = va.solve_linearized(p, traj, frame, p.reference_signal(), V)
    assert np.abs(X[-1] - sla.expm(M) @ V).max() < 1e-9


def test_superposition_in_seed(warga, warga_direction):
    p, traj, frame = warga
    V1 = np.array([0.3, -0.2])
    V2 = np.array([-0.1, 0.5])
    Xa = va.solve_linearized(p, traj, frame, traj.signal, V1)
    Xb = va.solve_linearized(p, traj, frame, traj.signal, V2)
    Xab = va.solve_linearized(p, traj, frame, traj.signal, V1 + V2)
    assert np.abs(Xab - Xa - Xb).max() < 1e-9


def test_closed_form_cross_check(warga, warga_direction):
    p, traj, frame = warga
    X = va.solve_linearized(p, traj, frame, warga_direction, [0.1, -0.2])
    Xcf = va.linearized_closed_form(p, traj, frame, warga_direction, [0.1, -0.2])
    assert np.abs(Xcf - X[::2]).max() < 1e-6


def test_closed_form_cross_check_nontrivial():
    p = pb.load_problem(dict(
        name="spin", manifold="euclidean:2", n=2, m=2, T=1.0, grid_N=256,
        dynamics=["x2 + u1*x1", "u2 - x1 + 0.2*x2"], phi=["xf1"],
        x0=[0.3, -0.4], control_set={"lo": [-1, -1], "hi": [1, 1]},
        reference={"u_const": [0.1, -0.2]},
    ))
    traj = tj.integrate_state(p, p.x0, p.reference_signal())
    frame = tj.build_frame(p, traj)
    u = pb.ControlSignal.from_pieces(
        p, [(0.0, 0.3, [0.8, 0.5]), (0.3, 1.0, [-0.6, 0.9])])
    X = va.solve_linearized(p, traj, frame, u, [0.2, 0.1])
    Xcf = va.linearized_closed_form(p, traj, frame, u, [0.2, 0.1])
    assert np.abs(Xcf - X[::2]).max() < 1e-6


def test_second_variation_lambda_only(warga):
    # with X = 0 the field reduces to the linearized flow scaled by lambda
    p, traj, frame = warga
    sigma = pb.ControlSignal.constant(p, [1.0, 1.0])
    Y = va.solve_second_variation(p, traj, frame, traj.signal, [0, 0],
                                  sigma, 0.7, [0, 0])
    X_sigma = va.solve_linearized(p, traj, frame, sigma, [0, 0])
    assert np.abs(Y - 0.7 * X_sigma).max() < 1e-12


def test_second_variation_affine_in_lambda_W(warga, warga_direction):
    p, traj, frame = warga
    sigma = pb.ControlSignal.constant(p, [0.5, -0.5])
    W1, W2 = np.array([0.2, -0.1]), np.array([-0.3, 0.4])

    def YT(lam, W):
        return va.solve_second_variation(
            p, traj, frame, warga_direction, [0, 0], sigma, lam, W)[-1]

    a = YT(0.5, W1)
    b = YT(1.5, W2)
    mid = YT(1.0, 0.5 * (W1 + W2))
    assert np.abs(0.5 * (a + b) - mid).max() < 1e-8


def test_curvature_drive_zero_on_flat(warga, warga_direction):
    p, traj, frame = warga
    fine_X = va.solve_linearized(p, traj, frame, warga_direction, [0, 0])
    drive = va.curvature_drive(p, traj, frame, fine_X)
    assert np.abs(drive).max() == 0.0


def test_curvature_drive_sphere_oracle(sphere_geodesic):
    # X constant along e1, f along e2: on the unit sphere the drive rows are
    # R(e_i, X, f, X) = <e_i, X><X, f> - <e_i, f>|X|^2 = -|X|^2 f-row
    p, traj, frame = sphere_geodesic
    V = frame.E[0] @ np.array([0.8, 0.0])  # X = 0.8 e1, parallel (A = 0)
    fine_X = va.solve_linearized(p, traj, frame, traj.signal, V)
    drive = va.curvature_drive(p, traj, frame, fine_X)
    expected = np.zeros_like(drive)
    expected[:, :, 1] = -0.64  # -|X|^2 on the f-aligned row (|f| = 1)
    assert np.abs(drive - expected).max() < 1e-4


def test_critical_warga_switching(warga, warga_direction):
    p, traj, frame = warga
    ok, bundle = va.critical_direction_check(p, traj, frame, warga_direction,
                                             [0.0, 0.0])
    assert ok
    assert np.abs(bundle.psi_rows).max() < 1e-9
    assert bundle.I0_dprime == [0]


def test_trivial_direction_critical(warga):
    p, traj, frame = warga
    ok, bundle = va.critical_direction_check(p, traj, frame, traj.signal,
                                             [0.0, 0.0])
    assert ok
    assert np.all(bundle.phi_rows == 0.0)
    assert bundle.I0_dprime == bundle.I_AO


def test_perturbed_direction_not_critical(warga):
    # breaking the final-time balance of u2 violates the psi row by ~0.1
    p, traj, frame = warga
    u = pb.ControlSignal.from_pieces(
        p, [(0.0, 0.55, [1.0, -1.0]), (0.55, 1.0, [1.0, 1.0])])
    ok, bundle = va.critical_direction_check(p, traj, frame, u, [0.0, 0.0])
    assert not ok
    # the switch snaps to the grid, so the violation is 0.1 up to one cell
    assert abs(bundle.psi_rows[2]) == pytest.approx(0.1, abs=2e-3)


def test_d2_linear_endpoint_zero(warga, warga_direction):
    p, traj, frame = warga
    _, bundle = va.critical_direction_check(p, traj, frame, warga_direction,
                                            [0.0, 0.0])
    assert np.abs(bundle.d2_phi).max() < 1e-9   # phi0 linear
    assert np.abs(bundle.d2_psi).max() < 1e-9   # psi rows linear, flat space


def test_d2_quadratic_endpoint(flat_lq):
    p, traj, frame = flat_lq
    u = pb.ControlSignal.constant(p, [0.5, -0.5])
    _, bundle = va.critical_direction_check(p, traj, frame, u, [0.0, 0.0])
    XT = frame.to_chart_vec(-1, bundle.fine_X[-1])
    # phi0 = |xT|^2/2 has identity Hessian: D^2 phi0 = |X(T)|^2
    assert bundle.d2_phi[0] == pytest.approx(float(XT @ XT), rel=1e-6)


def test_index_sets_strict_split(flat_lq):
    p, traj, frame = flat_lq
    u = pb.ControlSignal.constant(p, [0.5, 0.5])
    ok, bundle = va.critical_direction_check(p, traj, frame, u, [0.0, 0.0])
    # the inactive inequality (xf1 - 10) must land in I0' via I_N
    assert 1 in bundle.I0_prime


def test_linearized_fd_validation_slope():
    # flat problem: needle realization of the direction converges to eps * X
    from manoc import needle as nd
    p = pb.load_problem(dict(
        name="warga", manifold="euclidean:2", n=2, m=2, T=1.0, grid_N=32768,
        dynamics=["x2*(u1+u2)", "u2 - x1"], phi=["xf1"],
        psi=["xi1", "xi2", "xf2"], x0=[0.0, 0.0],
        control_set={"lo": [0.0, -1.0], "hi": [1.0, 1.0]},
        reference={"u_const": [0.0, 0.0]},
    ))
    traj = tj.integrate_state(p, p.x0, p.reference_signal())
    frame = tj.build_frame(p, traj)
    u = pb.ControlSignal.from_pieces(
        p, [(0.0, 0.5, [1.0, -1.0]), (0.5, 1.0, [1.0, 1.0])])
    cfg = nd.NeedleConfig(problem=p, traj=traj, frame=frame, u=u,
                          V_chart=[0.0, 0.0], eps_list=(0.2, 0.1, 0.05))
    eps = list(cfg.eps_list)
    defects = [nd.variation_defect(cfg, e, order=1) for e in eps]
    est = nd.convergence_order(eps, defects)
    assert est.slope >= 1.9
