import numpy as np
import pytest

from manoc import geometry as geo
from manoc import problem as pb
from manoc import trajectory as tj
from manoc.errors import DomainExitError


def exp_problem(grid_N):
    return pb.load_problem(dict(
        name="exp", manifold="euclidean:1", n=1, m=1, T=1.0, grid_N=grid_N,
        dynamics=["x1"], phi=["xf1"], x0=[1.0],
        control_set={"points": [[0.0]]}, reference={"u_const": [0.0]},
    ))


def test_warga_reference_is_zero(warga):
    _, traj, _ = warga
    assert np.abs(traj.states).max() == 0.0


def test_zero_dynamics_constant():
    p = pb.load_problem(dict(
        name="still", manifold="euclidean:1", n=1, m=1, T=2.0, grid_N=32,
        dynamics=["0"], phi=["xf1"], x0=[1.5],
        control_set={"points": [[0.0]]}, reference={"u_const": [0.0]},
    ))
    traj = tj.integrate_state(p, p.x0, p.reference_signal())
    assert np.all(traj.states == 1.5)


def test_exponential_oracle():
    p = exp_problem(256)
    traj = tj.integrate_state(p, p.x0, p.reference_signal())
    assert abs(traj.states[-1, 0] - np.e) < 1e-6


def test_rk4_order_refinement():
    e1 = abs(tj.integrate_state(exp_problem(64), [1.0],
                                exp_problem(64).reference_signal()).states[-1, 0] - np.e)
    e2 = abs(tj.integrate_state(exp_problem(128), [1.0],
                                exp_problem(128).reference_signal()).states[-1, 0] - np.e)
    assert e1 / e2 >= 8.0  # fourth order: expect ~16


def test_domain_exit_detected():
    p = pb.load_problem(dict(
        name="runaway", manifold="sphere2", n=2, m=1, T=2.0, grid_N=64,
        dynamics=["-1", "0"], phi=["xf1"], x0=[1.0, 0.0],
        control_set={"points": [[0.0]]}, reference={"u_const": [0.0]},
    ))
    with pytest.raises(DomainExitError) as err:
        tj.integrate_state(p, p.x0, p.reference_signal())
    assert 0.0 < err.value.t_exit <= 2.0


def test_frame_flat_constant(flat_lq):
    p, traj, frame = flat_lq
    assert np.allclose(frame.E, np.eye(2))
    assert np.allclose(frame.D, np.eye(2))


def test_frame_gram_identity(sphere_geodesic):
    p, traj, frame = sphere_geodesic
    g = p.manifold.metric(traj.states)
    gram = np.einsum("tji,tjk,tkl->til", frame.E, g, frame.E)
    assert np.abs(gram - np.eye(2)).max() < 1e-6
    dual = np.einsum("tij,tjk->tik", frame.D, frame.E)
    assert np.abs(dual - np.eye(2)).max() < 1e-12


def test_frame_velocity_alignment_great_circle(sphere_geodesic):
    p, traj, frame = sphere_geodesic
    vel_frame = np.einsum("tij,tj->ti", frame.D, traj.velocities)
    assert np.abs(vel_frame - np.array([0.0, 1.0])).max() < 1e-6


def test_warga_frame_coefficients(warga):
    p, traj, frame = warga
    A, fvec, B = tj.frame_coefficients(p, traj, frame, [0.0, 0.0], 0)
    assert np.allclose(A, [[0.0, 0.0], [-1.0, 0.0]], atol=1e-9)
    assert np.allclose(fvec, 0.0)
    assert np.abs(B).max() < 1e-6  # bilinear dynamics: zero state Hessian


def test_linear_dynamics_A_equals_matrix():
    M = np.array([[0.3, -0.8], [1.1, 0.2]])
    p = pb.load_problem(dict(
        name="lin", manifold="euclidean:2", n=2, m=1, T=1.0, grid_N=64,
        dynamics=["0.3*x1 - 0.8*x2", "1.1*x1 + 0.2*x2"], phi=["xf1"],
        x0=[0.5, -0.2], control_set={"points": [[0.0]]},
        reference={"u_const": [0.0]},
    ))
    traj = tj.integrate_state(p, p.x0, p.reference_signal())
    frame = tj.build_frame(p, traj)
    data = tj.reference_data(p, traj, frame)
    assert np.abs(data.A - M).max() < 1e-8
    assert np.abs(data.B).max() < 1e-5


def test_B_symmetry_finite_difference():
    p = pb.load_problem(dict(
        name="cubic", manifold="euclidean:2", n=2, m=1, T=0.5, grid_N=32,
        dynamics=["x1^2 * x2", "x1 * x2^2 + x1^3"], phi=["xf1"],
        x0=[0.4, 0.3], control_set={"points": [[0.0]]},
        reference={"u_const": [0.0]},
    ))
    traj = tj.integrate_state(p, p.x0, p.reference_signal())
    frame = tj.build_frame(p, traj)
    _, _, B = tj.frame_coefficients(p, traj, frame, [0.0], 5)
    assert np.abs(B - np.swapaxes(B, 1, 2)).max() < 1e-5
    # hand Hessians at the node
    x = traj.states[5]
    hess_f1 = np.array([[2 * x[1], 2 * x[0]], [2 * x[0], 0.0]])
    assert np.abs(B[0] - hess_f1).max() < 1e-5


def test_fundamental_matrix_warga(warga):
    p, traj, frame = warga
    data = tj.reference_data(p, traj, frame)
    t = traj.fine_times
    expected = np.zeros((len(t), 2, 2))
    expected[:, 0, 0] = 1.0
    expected[:, 1, 1] = 1.0
    expected[:, 1, 0] = t
    assert np.abs(data.Z - expected).max() < 1e-10


def test_fundamental_matrix_identity_when_A_zero():
    p = pb.load_problem(dict(
        name="driftless", manifold="euclidean:2", n=2, m=2, T=1.0, grid_N=32,
        dynamics=["u1", "u2"], phi=["xf1"], x0=[0.0, 0.0],
        control_set={"lo": [-1, -1], "hi": [1, 1]},
        reference={"u_const": [0.2, -0.3]},
    ))
    traj = tj.integrate_state(p, p.x0, p.reference_signal())
    frame = tj.build_frame(p, traj)
    data = tj.reference_data(p, traj, frame)
    assert np.abs(data.Z - np.eye(2)).max() < 1e-12
    assert np.abs(data.Zinv - np.eye(2)).max() < 1e-12


def test_Z_inverse_consistency(warga_small):
    p, traj, frame = warga_small
    data = tj.reference_data(p, traj, frame)
    prod = np.einsum("tij,tjk->tik", data.Z, data.Zinv)
    assert np.abs(prod - np.eye(2)).max() < 1e-7


def test_trajectory_csv_dump(tmp_path, warga_small):
    _, traj, _ = warga_small
    out = tmp_path / "traj.csv"
    traj.to_csv(out)
    rows = out.read_text().strip().splitlines()
    assert rows[0] == "t,x1,x2,u1,u2"
    assert len(rows) == traj.N + 2
