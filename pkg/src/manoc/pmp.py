"""First-order machinery: adjoint solves, maximum-principle residuals,
transversality, and the Lagrange-multiplier search.

All covector work happens in the parallel-frame coordinates, where the dual
equation is the linear ODE p' = -p A(t, ubar) and the closed form
p(t) = p(T) Z(T)^-1 Z(t) is available as an independent cross-check.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize

from . import geometry as geo
from . import problem as pb
from . import trajectory as tj
from .errors import ContractError

TOL_H = 1e-6         # verdict tolerance for Hamiltonian/transversality residuals
TOL_ACTIVE = 1e-7    # |phi_i| threshold for active-set membership


@dataclass
class Costate:
    """Frame-coordinate costate rows p[t] tied to one multiplier."""

    p: np.ndarray              # (N+1, n) public nodes
    multiplier: object
    fine_p: np.ndarray = field(repr=False, default=None)  # (2N+1, n)

    def chart_covector(self, frame, idx):
        """Chart components of p at public node idx: p_chart = p_frame @ D."""
        return self.p[idx] @ frame.D[idx]


@dataclass
class PmpReport:
    r_hamiltonian: float
    r_transversality: float
    r_sign: float
    r_complementarity: float
    multiplier: object
    active_inequalities: list
    inactive_inequalities: list
    verdict: bool

    def to_dict(self):
        m = self.multiplier
        return {
            "residuals": {
                "hamiltonian": self.r_hamiltonian,
                "transversality": self.r_transversality,
                "sign": self.r_sign,
                "complementarity": self.r_complementarity,
            },
            "multiplier": {
                "ell_phi": list(map(float, m.ell_phi)),
                "ell_psi": list(map(float, m.ell_psi)),
                "normal": bool(m.is_normal),
            },
            "active_sets": {
                "I_AO": self.active_inequalities,
                "I_N": self.inactive_inequalities,
            },
            "verdicts": {"pmp": "pass" if self.verdict else "fail"},
        }

    def to_json(self, **kw):
        return json.dumps(self.to_dict(), **kw)


def hamiltonian(problem, t, x, p, u_point):
    """H(t, x, p, u) = p(f(t, x, u)) with a chart covector p."""
    if isinstance(p, geo.CoTangentVector):
        if not np.allclose(p.base, np.asarray(x, dtype=float), atol=1e-12):
            raise ContractError("hamiltonian: covector not based at x")
        comps = p.comps
    else:
        comps = np.asarray(p, dtype=float)
    return float(comps @ problem.f_chart(t, x, u_point))


def active_sets(problem, traj, tol_active=TOL_ACTIVE):
    """(I_AO, I_N): active inequality indices (0 always active) and the rest."""
    x0, xT = traj.states[0], traj.states[-1]
    active = [0]
    inactive = []
    for i in range(1, problem.j + 1):
        if abs(problem.phi[i].value(x0, xT)) <= tol_active:
            active.append(i)
        else:
            inactive.append(i)
    return active, inactive


def lagrange_gradients(problem, traj, ell):
    """Chart gradients (d1 L, d2 L) of the Lagrange function at the endpoints."""
    x0, xT = traj.states[0], traj.states[-1]
    d1 = np.zeros(problem.n)
    d2 = np.zeros(problem.n)
    weights = list(ell.ell_phi) + list(ell.ell_psi)
    for w, fn in zip(weights, problem.phi + problem.psi):
        if w == 0.0:
            continue
        g1, g2 = fn.grad(x0, xT)
        d1 += w * g1
        d2 += w * g2
    return d1, d2


def solve_adjoint(problem, traj, frame, ell, running_drift=None, terminal_chart=None):
    """Backward RK4 of p' = -p A(t, ubar) - drift from p(T) = d2 L in frame.

    ``running_drift`` (cell stream) and ``terminal_chart`` support the Bolza
    form, whose dual equation carries -ell_0 d_x f0 and whose terminal value
    is ell_0 dh + ell_psi2 dpsi2.
    """
    data = tj.reference_data(problem, traj, frame)
    A = data.A
    N = len(A)
    n = problem.n
    if terminal_chart is None:
        _, d2 = lagrange_gradients(problem, traj, ell)
        terminal_chart = d2
    pT = frame.covector_to_frame(-1, terminal_chart)
    fine_p = np.empty((2 * N + 1, n))
    fine_p[-1] = pT
    h = traj.cell_width
    drift = running_drift if running_drift is not None else np.zeros((N, 3, n))
    p = pT.copy()
    for i in range(N - 1, -1, -1):
        A0, Am, A1 = A[i]
        d0, dm, d1_ = drift[i]
        k1 = -(p @ A1) - d1_
        k2 = -((p - 0.5 * h * k1) @ Am) - dm
        k3 = -((p - 0.5 * h * k2) @ Am) - dm
        k4 = -((p - h * k3) @ A0) - d0
        hh = 0.5 * h
        Aq = 0.5 * (A1 + Am)
        dq = 0.5 * (d1_ + dm)
        m2 = -((p - 0.5 * hh * k1) @ Aq) - dq
        m3 = -((p - 0.5 * hh * m2) @ Aq) - dq
        m4 = -((p - hh * m3) @ Am) - dm
        fine_p[2 * i + 1] = p - (hh / 6.0) * (k1 + 2.0 * m2 + 2.0 * m3 + m4)
        p = p - (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        fine_p[2 * i] = p
    return Costate(p=fine_p[::2], multiplier=ell, fine_p=fine_p)


def costate_closed_form(problem, traj, frame, ell):
    """p(t) = p(T) Z(T)^-1 Z(t): the fundamental-matrix route (cross-check)."""
    data = tj.reference_data(problem, traj, frame)
    _, d2 = lagrange_gradients(problem, traj, ell)
    pT = frame.covector_to_frame(-1, d2)
    c = pT @ data.Zinv[-1]  # p(t) = p(T) Z(T)^-1 Z(t), rows act from the left
    return np.einsum("j,tjk->tk", c, data.Z)


def excess_stream(problem, traj, frame, samples):
    """Frame drift differences f(t, u_s) - f(t, ubar) as a cell stream
    (N, 3, n, S)."""
    N = traj.N
    n = problem.n
    ts = tj.cell_times(traj).reshape(-1)
    xs = tj.cell_states(traj).reshape(-1, n)
    D = tj.nodes_to_cells(frame.fine_D).reshape(-1, n, n)
    us_ref = np.repeat(traj.signal.values, 3, axis=0)
    ref = problem.f_chart_batch(ts, xs, us_ref)
    out = np.empty((N, 3, n, len(samples)))
    for s, u in enumerate(samples):
        us = np.tile(u, (len(ts), 1))
        fu = problem.f_chart_batch(ts, xs, us)
        out[:, :, :, s] = np.einsum("tik,tk->ti", D, fu - ref).reshape(N, 3, n)
    return out


def hamiltonian_excess(problem, traj, frame, costate, samples=None):
    """max over cell sample points and control samples of H(u) - H(ubar).

    Positive values certify a maximum-principle violation; for a true
    maximizer the sampled excess is <= 0 up to discretization noise.
    """
    if samples is None:
        samples = pb.sample_controls(problem.control_set)
    excess = excess_stream(problem, traj, frame, samples)  # (N, 3, n, S)
    p_cells = tj.nodes_to_cells(costate.fine_p)
    vals = np.einsum("tcn,tcns->tcs", p_cells, excess)
    idx = np.unravel_index(np.argmax(vals), vals.shape)
    t_at = tj.cell_times(traj)[idx[0], idx[1]]
    return float(vals[idx]), float(t_at), samples[idx[2]]


def pmp_residuals(problem, traj, frame, ell, tol_h=TOL_H, tol_active=TOL_ACTIVE):
    """Evaluate all first-order conditions for one multiplier."""
    ell_n = ell.scaled(1.0 / np.linalg.norm(ell.stacked))
    costate = solve_adjoint(problem, traj, frame, ell_n)
    r_h, _, _ = hamiltonian_excess(problem, traj, frame, costate)
    d1, _ = lagrange_gradients(problem, traj, ell_n)
    r_tr = float(np.max(np.abs(costate.p[0] + frame.covector_to_frame(0, d1))))
    r_sign = float(max(0.0, np.max(ell_n.ell_phi)))
    active, inactive = active_sets(problem, traj, tol_active)
    r_comp = float(max((abs(ell_n.ell_phi[i]) for i in inactive), default=0.0))
    verdict = max(r_h, r_tr, r_sign, r_comp) <= tol_h
    return PmpReport(
        r_hamiltonian=r_h, r_transversality=r_tr, r_sign=r_sign,
        r_complementarity=r_comp, multiplier=ell, active_inequalities=active,
        inactive_inequalities=inactive, verdict=verdict,
    )


def integral_first_order(problem, traj, frame, ell, W_chart, sigma):
    """Integral form of the maximum principle for one (W, sigma) pair:

    quad of H(sigma) - H(ubar) plus (d1 L + p(0))(W); <= 0 for a multiplier.
    """
    costate = solve_adjoint(problem, traj, frame, ell)
    _, fvec_sigma, _ = tj.signal_frame_streams(problem, traj, frame, sigma)
    data = tj.reference_data(problem, traj, frame)
    p_cells = tj.nodes_to_cells(costate.fine_p)
    integrand = np.einsum("tci,tci->tc", p_cells, fvec_sigma - data.fvec)
    total = float(tj.quad_cells(integrand, traj.cell_width))
    d1, _ = lagrange_gradients(problem, traj, ell)
    W_frame = frame.to_frame_vec(0, W_chart)
    boundary = float((frame.covector_to_frame(0, d1) + costate.p[0]) @ W_frame)
    return total + boundary


# ---------------------------------------------------------------------------
# Multiplier search


def _basis_costates(problem, traj, frame):
    """Costates and transversality rows for unit multiplier basis vectors."""
    d = 1 + problem.j + problem.k
    fns = problem.phi + problem.psi
    x0, xT = traj.states[0], traj.states[-1]
    data = tj.reference_data(problem, traj, frame)
    p_basis = []
    tr_rows = []
    for a in range(d):
        g1, g2 = fns[a].grad(x0, xT)
        pT = frame.covector_to_frame(-1, g2)
        c = pT @ data.Zinv[-1]
        fine_p = np.einsum("j,tjk->tk", c, data.Z)
        p_basis.append(fine_p)
        tr_rows.append(frame.covector_to_frame(0, g1) + fine_p[0])
    return np.array(p_basis), np.array(tr_rows)


def find_multipliers(problem, traj, frame, tol_h=TOL_H, n_starts=4096,
                     n_refine=24, seed=0):
    """Heuristic search for multiplier rays: residual minimization on the
    sign-constrained unit sphere.  Sound (returned multipliers verify) but
    not complete; an empty result means none was found at this resolution.
    """
    d = 1 + problem.j + problem.k
    active, inactive = active_sets(problem, traj)
    samples = pb.sample_controls(problem.control_set)
    p_basis, tr_rows = _basis_costates(problem, traj, frame)
    excess = excess_stream(problem, traj, frame, samples)
    # excess_per_basis[a, t, c, s] = p_a(t) . (f(t, u_s) - f(t, ubar))
    p_cells = np.stack([tj.nodes_to_cells(p) for p in p_basis])
    excess_per_basis = np.einsum("atcn,tcns->atcs", p_cells, excess)
    flat_excess = excess_per_basis.reshape(d, -1)

    def rho(ell_vec):
        v = ell_vec / max(np.linalg.norm(ell_vec), 1e-300)
        r_h = float(np.max(v @ flat_excess))
        r_tr = float(np.linalg.norm(v @ tr_rows))
        r_sign = float(np.sum(np.maximum(v[: problem.j + 1], 0.0)))
        r_comp = float(sum(abs(v[i]) for i in inactive))
        return max(r_h, 0.0) + r_tr + r_sign + r_comp

    rng = np.random.default_rng(seed)
    cands = rng.normal(size=(n_starts, d))
    cands[:, : problem.j + 1] = -np.abs(cands[:, : problem.j + 1])
    for i in inactive:
        cands[:, i] = 0.0
    cands /= np.linalg.norm(cands, axis=1, keepdims=True)
    scores = np.array([rho(c) for c in cands])
    order = np.argsort(scores)[:n_refine]

    found = []
    for idx in order:
        res = optimize.minimize(
            rho, cands[idx], method="Nelder-Mead",
            options={"xatol": 1e-12, "fatol": 1e-14, "maxiter": 4000},
        )
        v = res.x / np.linalg.norm(res.x)
        if rho(v) > tol_h:
            continue
        # clip tiny sign violations introduced by the polished iterate
        v[: problem.j + 1] = np.minimum(v[: problem.j + 1], 0.0)
        for i in inactive:
            v[i] = 0.0
        nrm = np.linalg.norm(v)
        if nrm < 1e-9 or rho(v) > tol_h:
            continue
        v = v / nrm
        if any(np.linalg.norm(v - w) < 1e-3 for w in found):
            continue
        found.append(v)

    out = []
    for v in found:
        ell = pb.Multiplier(v[: problem.j + 1], v[problem.j + 1:])
        report = pmp_residuals(problem, traj, frame, ell, tol_h=tol_h)
        if report.verdict:
            out.append((ell, report))
    return out
