"""First- and second-order variational fields along the reference pair, and
classification of critical directions.

The linearized field X and the second-order field Y are solved as linear
ODEs in frame coordinates; X additionally has the fundamental-matrix closed
form Z^-1(t) int_0^t Z f-difference ds available as a cross-check.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import geometry as geo
from . import trajectory as tj
from .errors import ContractError

TOL_CRITICAL = 1e-6   # feasibility tolerance for the criticality inequalities
TOL_STRICT = 1e-4     # strictness threshold separating I0' from I0''


@dataclass
class VariationBundle:
    """Direction data: control u, seed V, fields X (and optionally Y)."""

    u: object                     # ControlSignal
    V_chart: np.ndarray           # seed vector at x(0), chart components
    X: np.ndarray                 # (N+1, n) frame coordinates
    fine_X: np.ndarray = field(repr=False, default=None)
    Y: np.ndarray = None          # optional second-order field (N+1, n)
    fine_Y: np.ndarray = field(repr=False, default=None)
    is_critical: bool = None
    phi_rows: np.ndarray = None   # first-order values for every phi_i
    psi_rows: np.ndarray = None   # first-order values for psi rows
    I_AO: list = None
    I_N: list = None
    I0_prime: list = None
    I0_dprime: list = None
    d2_phi: np.ndarray = None     # D^2 phi_i values (j+1)
    d2_psi: np.ndarray = None     # D^2 psi rows (k)


def linear_rk4_cells(A_cells, drive_cells, y0, h):
    """Solve y' = A(t) y + drive(t) over cells; returns a node stream."""
    N = len(A_cells)
    out = np.empty((2 * N + 1, len(y0)))
    out[0] = y0
    y = np.asarray(y0, dtype=float)
    for i in range(N):
        A0, Am, A1 = A_cells[i]
        d0, dm, d1_ = drive_cells[i]
        k1 = A0 @ y + d0
        k2 = Am @ (y + 0.5 * h * k1) + dm
        k3 = Am @ (y + 0.5 * h * k2) + dm
        k4 = A1 @ (y + h * k3) + d1_
        hh = 0.5 * h
        Aq = 0.5 * (A0 + Am)
        dq = 0.5 * (d0 + dm)
        m2 = Aq @ (y + 0.5 * hh * k1) + dq
        m3 = Aq @ (y + 0.5 * hh * m2) + dq
        m4 = Am @ (y + hh * m3) + dm
        out[2 * i + 1] = y + (hh / 6.0) * (k1 + 2.0 * m2 + 2.0 * m3 + m4)
        y = y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        out[2 * i + 2] = y
    return out


def solve_linearized(problem, traj, frame, u, V_chart):
    """Node stream of X' = A(t, ubar) X + (f(t,u) - f(t,ubar)), X(0) = V."""
    data = tj.reference_data(problem, traj, frame)
    _, fvec_u, _ = tj.signal_frame_streams(problem, traj, frame, u)
    drive = fvec_u - data.fvec
    X0 = frame.to_frame_vec(0, V_chart)
    return linear_rk4_cells(data.A, drive, X0, traj.cell_width)


def linearized_closed_form(problem, traj, frame, u, V_chart):
    """X(t) = Z^-1(t) [X(0) + int_0^t Z(s) (f(s,u) - f(s,ubar)) ds]."""
    data = tj.reference_data(problem, traj, frame)
    _, fvec_u, _ = tj.signal_frame_streams(problem, traj, frame, u)
    Z_cells = tj.nodes_to_cells(data.Z)
    drive = np.einsum("tcij,tcj->tci", Z_cells, fvec_u - data.fvec)
    cells = tj.simpson_cell_integrals(drive, traj.cell_width)
    acc = np.vstack([np.zeros((1, problem.n)), np.cumsum(cells, axis=0)])
    X0 = frame.to_frame_vec(0, V_chart)
    return np.einsum("tij,tj->ti", data.Zinv[::2], X0 + acc)


def curvature_drive(problem, traj, frame, fine_X):
    """Cell-stream rows R(e_i, X, f[t], X); identically zero on flat models."""
    model = problem.manifold
    N = traj.N
    n = problem.n
    if model.flat:
        return np.zeros((N, 3, n))
    xs = tj.cell_states(traj).reshape(-1, n)
    ts = tj.cell_times(traj).reshape(-1)
    us = np.repeat(traj.signal.values, 3, axis=0)
    R = geo.curvature_tensor(model, xs)  # [t, l, k, i, j] = <R(di,dj)dk, dl>
    E = tj.nodes_to_cells(frame.fine_E).reshape(-1, n, n)
    X_cells = tj.nodes_to_cells(fine_X).reshape(-1, n)
    X_chart = np.einsum("tij,tj->ti", E, X_cells)
    f_chart = problem.f_chart_batch(ts, xs, us)
    # R(e_a, X, f, X) = R_{lkij} (e_a)^i X^j f^k X^l
    rows_chart = np.einsum("tlkij,tj,tk,tl->ti", R, X_chart, f_chart, X_chart)
    rows = np.einsum("tia,ti->ta", E, rows_chart)
    return rows.reshape(N, 3, n)


def solve_second_variation(problem, traj, frame, u, V_chart, sigma, lam, W_chart,
                           fine_X=None):
    """Node stream of the second-variation field Y for data (u, V, sigma, lam, W).

    Y' = A(t,ubar) Y + lam (f(sigma) - f(ubar)) + 1/2 B(X, X)
         + (A(t,u) - A(t,ubar)) X - 1/2 R(., X, f, X),   Y(0) = W.
    """
    if lam < 0:
        raise ContractError("lambda must be positive")
    data = tj.reference_data(problem, traj, frame)
    if fine_X is None:
        fine_X = solve_linearized(problem, traj, frame, u, V_chart)
    X_cells = tj.nodes_to_cells(fine_X)
    A_u, _, _ = tj.signal_frame_streams(problem, traj, frame, u)
    _, fvec_sigma, _ = tj.signal_frame_streams(problem, traj, frame, sigma)
    drive = lam * (fvec_sigma - data.fvec)
    drive += 0.5 * np.einsum("tcijl,tcj,tcl->tci", data.B, X_cells, X_cells)
    drive += np.einsum("tcij,tcj->tci", A_u - data.A, X_cells)
    drive -= 0.5 * curvature_drive(problem, traj, frame, fine_X)
    Y0 = frame.to_frame_vec(0, W_chart)
    return linear_rk4_cells(data.A, drive, Y0, traj.cell_width)


def first_order_rows(problem, traj, frame, fine_X, V_chart):
    """nabla_1 phi_i(V) + nabla_2 phi_i(X(T)) for every phi_i, and psi rows."""
    x0, xT = traj.states[0], traj.states[-1]
    XT_chart = frame.to_chart_vec(-1, fine_X[-1])
    V = np.asarray(V_chart, dtype=float)
    phi_rows = np.empty(problem.j + 1)
    for i, fn in enumerate(problem.phi):
        g1, g2 = fn.grad(x0, xT)
        phi_rows[i] = g1 @ V + g2 @ XT_chart
    psi_rows = np.empty(problem.k)
    for r, fn in enumerate(problem.psi):
        g1, g2 = fn.grad(x0, xT)
        psi_rows[r] = g1 @ V + g2 @ XT_chart
    return phi_rows, psi_rows


def critical_direction_check(problem, traj, frame, u, V_chart,
                             tol=TOL_CRITICAL, tol_strict=TOL_STRICT):
    """Classify (u, V) against the critical-direction conditions.

    Critical: the first-order rows are <= tol for active inequalities and
    |psi rows| <= tol; fills the index sets splitting strictly-negative
    active rows from the tight ones.
    """
    from .pmp import active_sets

    fine_X = solve_linearized(problem, traj, frame, u, V_chart)
    phi_rows, psi_rows = first_order_rows(problem, traj, frame, fine_X, V_chart)
    I_AO, I_N = active_sets(problem, traj)
    ok_phi = all(phi_rows[i] <= tol for i in I_AO)
    ok_psi = bool(np.all(np.abs(psi_rows) <= tol)) if problem.k else True
    I0_prime = list(I_N) + [i for i in I_AO if phi_rows[i] < -tol_strict]
    I0_dprime = [i for i in range(problem.j + 1) if i not in I0_prime]
    bundle = VariationBundle(
        u=u, V_chart=np.asarray(V_chart, dtype=float), X=fine_X[::2],
        fine_X=fine_X, is_critical=bool(ok_phi and ok_psi),
        phi_rows=phi_rows, psi_rows=psi_rows, I_AO=I_AO, I_N=I_N,
        I0_prime=sorted(I0_prime), I0_dprime=I0_dprime,
    )
    bundle.d2_phi = np.array([
        endpoint_second_difference(problem, traj, frame, bundle, fn)
        for fn in problem.phi
    ])
    bundle.d2_psi = np.array([
        endpoint_second_difference(problem, traj, frame, bundle, fn)
        for fn in problem.psi
    ])
    return bundle.is_critical, bundle


def covariant_endpoint_hessians(problem, fn, x0, xT):
    """Blocks (H11, H12, H22) of the covariant endpoint Hessian in chart
    coordinates: pure blocks get the -Gamma^k grad_k correction, the mixed
    block is the plain mixed partial."""
    n = problem.n
    H = fn.chart_hessian(x0, xT)
    g1, g2 = fn.grad(x0, xT)
    model = problem.manifold
    H11 = H[:n, :n].copy()
    H22 = H[n:, n:].copy()
    H12 = H[:n, n:].copy()
    if not model.flat:
        gamma0 = geo.christoffel_at(model, x0)
        gammaT = geo.christoffel_at(model, xT)
        H11 -= np.einsum("kij,k->ij", gamma0, g1)
        H22 -= np.einsum("kij,k->ij", gammaT, g2)
    return H11, H12, H22


def endpoint_second_difference(problem, traj, frame, bundle, fn):
    """D^2 phi(u, V) = H11(V,V) + 2 H12(V, X(T)) + H22(X(T), X(T))."""
    x0, xT = traj.states[0], traj.states[-1]
    V = bundle.V_chart
    XT = frame.to_chart_vec(-1, bundle.fine_X[-1])
    H11, H12, H22 = covariant_endpoint_hessians(problem, fn, x0, xT)
    return float(V @ H11 @ V + 2.0 * (V @ H12 @ XT) + XT @ H22 @ XT)
