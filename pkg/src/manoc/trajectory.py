"""Reference-trajectory machinery: state integration, parallel frames, and
the frame-coordinate coefficient streams (A, f, B, Z).

Sampling layout: states live on a fine grid of 2N+1 nodes (half-step
midpoints between the N+1 public nodes).  Control-dependent coefficient
streams are stored per cell as (N, 3, ...) arrays holding the values at the
cell's left node, midpoint and right node under that cell's own control, so
RK4 stages and Simpson quadratures never straddle a control switch.
Continuous fields (states, frames, Z, costates, variations) remain node
streams of length 2N+1.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import expr as ex
from . import geometry as geo
from .errors import ContractError, DomainExitError

COND_WARN = 1e8


@dataclass
class Trajectory:
    times: np.ndarray          # public nodes (N+1)
    states: np.ndarray         # (N+1, n)
    velocities: np.ndarray     # (N+1, n), dynamics at node with its cell control
    signal: object             # ControlSignal used
    fine_times: np.ndarray = field(repr=False, default=None)   # (2N+1)
    fine_states: np.ndarray = field(repr=False, default=None)  # (2N+1, n)

    @property
    def N(self):
        return len(self.times) - 1

    @property
    def cell_width(self):
        return self.times[1] - self.times[0]

    def to_csv(self, path):
        us = self.signal.node_values()
        n, m = self.states.shape[1], us.shape[1]
        header = "t," + ",".join(f"x{i+1}" for i in range(n)) + "," + \
            ",".join(f"u{i+1}" for i in range(m))
        data = np.column_stack([self.times, self.states, us])
        np.savetxt(path, data, delimiter=",", header=header, comments="")


@dataclass
class FrameField:
    """Parallel orthonormal frame along a trajectory.

    E[t] has the frame vectors as columns (chart components); D[t] = E[t]^-1
    holds the dual covectors as rows, so duality is exact by construction.
    """

    E: np.ndarray              # (N+1, n, n) public nodes
    D: np.ndarray              # (N+1, n, n)
    fine_E: np.ndarray = field(repr=False, default=None)  # (2N+1, n, n)
    fine_D: np.ndarray = field(repr=False, default=None)

    def to_frame_vec(self, idx, chart_comps):
        """Tangent chart components -> frame coordinates at public node idx."""
        return self.D[idx] @ np.asarray(chart_comps, dtype=float)

    def to_chart_vec(self, idx, frame_comps):
        return self.E[idx] @ np.asarray(frame_comps, dtype=float)

    def covector_to_frame(self, idx, chart_comps):
        """Covector chart components -> frame coordinates p_i = p(e_i)."""
        return np.asarray(chart_comps, dtype=float) @ self.E[idx]


@dataclass
class FrameData:
    """Reference coefficient streams.

    A and fvec are cell streams (N, 3, ...) of the frame-coordinate
    linearization and drift under the reference control; B is the symmetrized
    second covariant differential; Z and Zinv are node streams solving
    Z' = -Z A and (Z^-1)' = A Z^-1 with Z(0) = I.
    """

    A: np.ndarray              # (N, 3, n, n)
    fvec: np.ndarray           # (N, 3, n)
    B: np.ndarray              # (N, 3, n, n, n)
    Z: np.ndarray              # (2N+1, n, n)
    Zinv: np.ndarray           # (2N+1, n, n)
    cond_warning: bool = False


def nodes_to_cells(arr):
    """Reindex a node stream (2N+1, ...) to the cell layout (N, 3, ...)."""
    N = (len(arr) - 1) // 2
    idx = 2 * np.arange(N)[:, None] + np.arange(3)[None, :]
    return arr[idx]


def cell_times(traj):
    return nodes_to_cells(traj.fine_times)


def cell_states(traj):
    return nodes_to_cells(traj.fine_states)


def integrate_state(problem, x0, signal):
    """RK4 integration of the chart dynamics under a piecewise-constant control."""
    x0 = np.asarray(x0, dtype=float)
    problem.manifold.require_inside(x0, "initial state")
    N = problem.grid_N
    h = problem.T / N
    rhs = problem.rhs()
    fine = np.empty((2 * N + 1, problem.n))
    fine[0] = x0
    x = x0
    contains = problem.manifold.contains
    for i in range(N):
        t = i * h
        u = signal.values[i]
        k1 = np.asarray(rhs(t, x, u))
        k2 = np.asarray(rhs(t + 0.5 * h, x + 0.5 * h * k1, u))
        k3 = np.asarray(rhs(t + 0.5 * h, x + 0.5 * h * k2, u))
        k4 = np.asarray(rhs(t + h, x + h * k3, u))
        x_new = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.all(np.isfinite(x_new)):
            raise DomainExitError("dynamics produced a non-finite state", (i + 1) * h)
        if not contains(x_new):
            raise DomainExitError("trajectory left chart domain", (i + 1) * h)
        # half-node value by an RK4 half step (midpoints stay O(h^4) accurate)
        hh = 0.5 * h
        hk2 = np.asarray(rhs(t + 0.5 * hh, x + 0.5 * hh * k1, u))
        hk3 = np.asarray(rhs(t + 0.5 * hh, x + 0.5 * hh * hk2, u))
        hk4 = np.asarray(rhs(t + hh, x + hh * hk3, u))
        fine[2 * i + 1] = x + (hh / 6.0) * (k1 + 2.0 * hk2 + 2.0 * hk3 + hk4)
        fine[2 * i + 2] = x_new
        x = x_new
    times = problem.grid_times()
    states = fine[::2]
    velocities = problem.f_chart_batch(times, states, signal.node_values())
    return Trajectory(
        times=times, states=states, velocities=velocities, signal=signal,
        fine_times=np.linspace(0.0, problem.T, 2 * N + 1), fine_states=fine,
    )


def default_seed_basis(model, x0):
    """Gram-Schmidt of the chart axes under g(x0); columns are the basis."""
    g = model.metric(x0)
    n = model.dim
    E = np.eye(n)
    for i in range(n):
        v = E[:, i].copy()
        for j in range(i):
            v = v - (E[:, j] @ g @ v) * E[:, j]
        E[:, i] = v / np.sqrt(v @ g @ v)
    return E


def build_frame(problem, traj, seed_basis=None):
    """Parallel-transport an orthonormal basis along the trajectory."""
    model = problem.manifold
    x0 = traj.states[0]
    E0 = default_seed_basis(model, x0) if seed_basis is None else np.asarray(seed_basis, float)
    gram = E0.T @ model.metric(x0) @ E0
    if not np.allclose(gram, np.eye(model.dim), atol=1e-8):
        raise ContractError("seed basis is not orthonormal at the trajectory start")
    fine = traj.fine_states
    M = len(fine)
    n = model.dim
    fine_E = np.empty((M, n, n))
    fine_E[0] = E0
    if model.flat:
        fine_E[:] = E0
    else:
        gammas = geo.christoffel_at(model, fine, check=False)
        vel = node_velocities(problem, traj)
        # transport generator at fine node i: W -> -Gamma(., vel, W)
        gen = -np.einsum("tkij,ti->tkj", gammas, vel)
        h = traj.fine_times[2] - traj.fine_times[0]
        E = E0.copy()
        for i in range(0, M - 2, 2):
            k1 = gen[i] @ E
            k2 = gen[i + 1] @ (E + 0.5 * h * k1)
            k3 = gen[i + 1] @ (E + 0.5 * h * k2)
            k4 = gen[i + 2] @ (E + h * k3)
            # midpoint frame by a half step (quarter-point generator by average)
            hh = 0.5 * h
            gq = 0.5 * (gen[i] + gen[i + 1])
            m2 = gq @ (E + 0.5 * hh * k1)
            m3 = gq @ (E + 0.5 * hh * m2)
            m4 = gen[i + 1] @ (E + hh * m3)
            fine_E[i + 1] = E + (hh / 6.0) * (k1 + 2.0 * m2 + 2.0 * m3 + m4)
            E = E + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            fine_E[i + 2] = E
    fine_D = np.linalg.inv(fine_E)
    return FrameField(E=fine_E[::2], D=fine_D[::2], fine_E=fine_E, fine_D=fine_D)


def node_velocities(problem, traj):
    """Chart dynamics at every fine node using each node's owning-cell control
    (node 2i+2 owned by cell i+1; only used for continuous-field transport)."""
    vals = traj.signal.values
    us = np.vstack([np.repeat(vals, 2, axis=0), vals[-1:]])
    return problem.f_chart_batch(traj.fine_times, traj.fine_states, us)


def _cell_eval_batch(problem, traj, signal, fn):
    """Evaluate fn(ts, xs, us) over the cell layout: returns (N, 3, ...)."""
    ts = cell_times(traj).reshape(-1)
    xs = cell_states(traj).reshape(-1, problem.n)
    us = np.repeat(signal.values, 3, axis=0)
    out = fn(ts, xs, us)
    return out.reshape((traj.N, 3) + out.shape[1:])


def chart_nabla_f(problem, xs, us, ts, gammas=None):
    """Covariant differential of the dynamics in chart coordinates.

    (nabla f)^k_j = d f^k / d x^j + Gamma^k_{j l} f^l, batched over rows.
    """
    xs = np.asarray(xs, dtype=float)
    if gammas is None:
        gammas = geo.christoffel_at(problem.manifold, xs, check=False)
    n = problem.n
    jac = np.empty((xs.shape[0], n, n))
    for comp, tree in enumerate(problem.dynamics):
        jac[:, comp, :] = ex.grad_state_many(tree, xs, us, ts)
    fvals = problem.f_chart_batch(ts, xs, us)
    return jac + np.einsum("tkjl,tl->tkj", gammas, fvals)


def chart_nabla2_f(problem, xs, us, ts, h=ex.H_HESS):
    """Second covariant differential (nabla^2 f)^k_{j l}, symmetrized in (j, l).

    Outer covariant derivative of the (1,1) tensor nabla f:
    (nabla_l nabla f)^k_j = d_l (nabla f)^k_j + Gamma^k_{l m} (nabla f)^m_j
                            - Gamma^m_{l j} (nabla f)^k_m.
    Only the symmetric part enters the quadratic forms downstream.
    """
    xs = np.asarray(xs, dtype=float)
    n = problem.n
    model = problem.manifold
    gammas = geo.christoffel_at(model, xs, check=False)
    nf = chart_nabla_f(problem, xs, us, ts, gammas=gammas)
    out = np.empty((xs.shape[0], n, n, n))  # [row, k, j, l]
    for l in range(n):
        e = np.zeros(n)
        e[l] = h
        d_nf = (chart_nabla_f(problem, xs + e, us, ts)
                - chart_nabla_f(problem, xs - e, us, ts)) / (2.0 * h)
        gamma_l = gammas[:, :, l, :]  # [row, a, b] = Gamma^a_{l b}
        out[:, :, :, l] = (
            d_nf
            + np.einsum("tkm,tmj->tkj", gamma_l, nf)
            - np.einsum("tmj,tkm->tkj", gamma_l, nf)
        )
    return 0.5 * (out + np.swapaxes(out, 2, 3))


def signal_frame_streams(problem, traj, frame, signal, want_B=False):
    """Cell streams (A, fvec[, B]) for an arbitrary control signal.

    A[c,s]_{ij} = nabla_x f(t, x(t), u_c)(d_i, e_j) and fvec[c,s]_i = f(d_i)
    at the cell's left/mid/right sample points s = 0, 1, 2.
    """
    N = traj.N
    n = problem.n
    ts = cell_times(traj).reshape(-1)
    xs = cell_states(traj).reshape(-1, n)
    us = np.repeat(signal.values, 3, axis=0)
    E = nodes_to_cells(frame.fine_E).reshape(-1, n, n)
    D = nodes_to_cells(frame.fine_D).reshape(-1, n, n)
    nf = chart_nabla_f(problem, xs, us, ts)
    A = np.einsum("tik,tkl,tlj->tij", D, nf, E).reshape(N, 3, n, n)
    fvals = problem.f_chart_batch(ts, xs, us)
    fvec = np.einsum("tik,tk->ti", D, fvals).reshape(N, 3, n)
    if not want_B:
        return A, fvec, None
    n2 = chart_nabla2_f(problem, xs, us, ts)
    B = np.einsum("tik,tkab,taj,tbl->tijl", D, n2, E, E).reshape(N, 3, n, n, n)
    return A, fvec, B


def _rk4_forward_matrix(A_cells, h, y0, rhs_sign):
    """Shared matrix RK4 over cells for Z' = -Z A (sign -1 acting right) and
    (Z^-1)' = A Z^-1 (sign +1 acting left); returns a node stream."""
    N = len(A_cells)
    n = A_cells.shape[-1]
    out = np.empty((2 * N + 1, n, n))
    out[0] = y0
    y = y0.copy()
    for i in range(N):
        A0, Am, A1 = A_cells[i]
        if rhs_sign < 0:
            f = lambda yy, AA: -yy @ AA
        else:
            f = lambda yy, AA: AA @ yy
        k1 = f(y, A0)
        k2 = f(y + 0.5 * h * k1, Am)
        k3 = f(y + 0.5 * h * k2, Am)
        k4 = f(y + h * k3, A1)
        hh = 0.5 * h
        Aq = 0.5 * (A0 + Am)
        m2 = f(y + 0.5 * hh * k1, Aq)
        m3 = f(y + 0.5 * hh * m2, Aq)
        m4 = f(y + hh * m3, Am)
        out[2 * i + 1] = y + (hh / 6.0) * (k1 + 2.0 * m2 + 2.0 * m3 + m4)
        y = y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        out[2 * i + 2] = y
    return out


def fundamental_matrix(problem, traj, frame, A=None):
    """Node streams Z, Zinv of Z' = -Z A(t, ubar), Z(0) = I (and its inverse)."""
    if A is None:
        A, _, _ = signal_frame_streams(problem, traj, frame, traj.signal)
    h = traj.cell_width
    eye = np.eye(problem.n)
    Z = _rk4_forward_matrix(A, h, eye, rhs_sign=-1)
    Zi = _rk4_forward_matrix(A, h, eye, rhs_sign=+1)
    # conditioning over the horizon: digits lost when pairing Z with Z^-1
    cond = float(np.max(np.linalg.norm(Z, axis=(1, 2)))
                 * np.max(np.linalg.norm(Zi, axis=(1, 2))))
    warn = cond > COND_WARN
    if warn:
        warnings.warn(f"fundamental matrix condition number {cond:.2e} exceeds {COND_WARN:.0e}")
    return Z, Zi, warn


def reference_data(problem, traj, frame):
    """Cached FrameData for the reference control of a trajectory."""
    cache = getattr(traj, "_refdata", None)
    if cache is not None and cache[0] is frame:
        return cache[1]
    A, fvec, B = signal_frame_streams(problem, traj, frame, traj.signal, want_B=True)
    Z, Zi, warn = fundamental_matrix(problem, traj, frame, A=A)
    data = FrameData(A=A, fvec=fvec, B=B, Z=Z, Zinv=Zi, cond_warning=warn)
    traj._refdata = (frame, data)
    return data


def frame_coefficients(problem, traj, frame, u_point, t_index):
    """(A, fvec, B) at one public node for one control value."""
    fi = 2 * int(t_index)
    x = traj.fine_states[fi][None, :]
    t = np.array([traj.fine_times[fi]])
    u = np.asarray(u_point, dtype=float)[None, :]
    E, D = frame.fine_E[fi][None], frame.fine_D[fi][None]
    nf = chart_nabla_f(problem, x, u, t)
    A = np.einsum("tik,tkl,tlj->tij", D, nf, E)[0]
    fvec = D[0] @ problem.f_chart_batch(t, x, u)[0]
    n2 = chart_nabla2_f(problem, x, u, t)
    B = np.einsum("tik,tkab,taj,tbl->tijl", D, n2, E, E)[0]
    return A, fvec, B


def simpson_cell_integrals(cell_values, h):
    """Per-cell Simpson integrals of a cell stream (N, 3, ...) -> (N, ...)."""
    return (h / 6.0) * (
        cell_values[:, 0] + 4.0 * cell_values[:, 1] + cell_values[:, 2]
    )


def quad_cells(cell_values, h):
    """Simpson quadrature of a cell stream over [0, T]."""
    return simpson_cell_integrals(cell_values, h).sum(axis=0)
