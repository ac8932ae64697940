import importlib.resources as ir

import pytest

from manoc import problem as pb
from manoc import trajectory as tj

PROBLEMS = ir.files("manoc.problems")


def fixture_path(name):
    return str(PROBLEMS / name)


@pytest.fixture(scope="session")
def warga():
    p = pb.load_problem(fixture_path("warga.toml"))
    traj = tj.integrate_state(p, p.x0, p.reference_signal())
    frame = tj.build_frame(p, traj)
    return p, traj, frame


@pytest.fixture(scope="session")
def warga_direction(warga):
    p, _, _ = warga
    return pb.ControlSignal.from_pieces(
        p, [(0.0, 0.5, [1.0, -1.0]), (0.5, 1.0, [1.0, 1.0])]
    )


@pytest.fixture(scope="session")
def warga_multiplier():
    return pb.Multiplier([-1.0], [1.0, 0.0, 0.0])


@pytest.fixture(scope="session")
def flat_lq():
    p = pb.load_problem(fixture_path("flat_lq.toml"))
    traj = tj.integrate_state(p, p.x0, p.reference_signal())
    frame = tj.build_frame(p, traj)
    return p, traj, frame


@pytest.fixture(scope="session")
def sphere_geodesic():
    p = pb.load_problem(fixture_path("sphere_geodesic.toml"))
    traj = tj.integrate_state(p, p.x0, p.reference_signal())
    frame = tj.build_frame(p, traj)
    return p, traj, frame


def small_warga(grid_N=256):
    data = dict(
        name="warga", manifold="euclidean:2", n=2, m=2, T=1.0, grid_N=grid_N,
        dynamics=["x2*(u1+u2)", "u2 - x1"], phi=["xf1"],
        psi=["xi1", "xi2", "xf2"], x0=[0.0, 0.0],
        control_set={"lo": [0.0, -1.0], "hi": [1.0, 1.0]},
        reference={"u_const": [0.0, 0.0]},
    )
    p = pb.load_problem(data)
    traj = tj.integrate_state(p, p.x0, p.reference_signal())
    frame = tj.build_frame(p, traj)
    return p, traj, frame


@pytest.fixture(scope="session")
def warga_small():
    return small_warga()
