"""Needle-variation laboratory: build the composite needle controls, integrate
the perturbed trajectories, and measure the expansion defects

    sup_t | V_eps(t) - eps X(t) - eps^2 sum_eta nu_eta Y_eta(t) |,

where V_eps(t) is the chart logarithm of the perturbed state along the
reference.  Supports are unions of grid cells selected by the Liapounoff
machinery so that the scaled running integrals of the frame drift
differences match; replays are deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import geometry as geo
from . import liapounoff as lia
from . import problem as pb
from . import trajectory as tj
from . import variations as va
from .errors import ContractError

PREFIX_CHECKPOINTS = 8   # dyadic prefix integrands stacked into selections
DEFAULT_SWEEP = (0.2, 0.1, 0.05, 0.025)


@dataclass
class NeedleConfig:
    problem: object
    traj: object                  # reference trajectory
    frame: object
    u: object                     # first-order direction (ControlSignal)
    V_chart: np.ndarray
    sigmas: list = field(default_factory=list)   # second-order controls
    nus: np.ndarray = None        # simplex weights over sigmas
    lambdas: np.ndarray = None    # positive rates, lambda_1 = max
    Ws: list = None               # second-order seeds (chart), one per sigma
    eps_list: tuple = DEFAULT_SWEEP

    def __post_init__(self):
        self.V_chart = np.asarray(self.V_chart, dtype=float)
        q = len(self.sigmas)
        if q:
            self.nus = (np.full(q, 1.0 / q) if self.nus is None
                        else np.asarray(self.nus, dtype=float))
            if abs(self.nus.sum() - 1.0) > 1e-9 or np.any(self.nus < 0):
                raise ContractError("nu weights must lie on the simplex")
            self.lambdas = (np.ones(q) if self.lambdas is None
                            else np.asarray(self.lambdas, dtype=float))
            if np.any(self.lambdas <= 0):
                raise ContractError("lambda rates must be positive")
            if self.Ws is None:
                self.Ws = [np.zeros(self.problem.n) for _ in range(q)]
        else:
            self.nus = np.zeros(0)
            self.lambdas = np.zeros(0)
            self.Ws = []
        self._cache = {}

    @property
    def lambda1(self):
        return float(np.max(self.lambdas)) if len(self.lambdas) else 1.0


def _cell_drift_integrals(cfg, signal):
    """Per-cell Simpson integrals of the frame drift f(t,sig) - f(t,ubar)."""
    problem, traj, frame = cfg.problem, cfg.traj, cfg.frame
    data = tj.reference_data(problem, traj, frame)
    _, fvec, _ = tj.signal_frame_streams(problem, traj, frame, signal)
    return tj.simpson_cell_integrals(fvec - data.fvec, traj.cell_width)


def _with_prefix_checkpoints(h):
    """Stack dyadic prefix copies so selections track the running integral."""
    N = len(h)
    cols = [h]
    for d in range(1, PREFIX_CHECKPOINTS):
        cut = (N * d) // PREFIX_CHECKPOINTS
        masked = h.copy()
        masked[cut:] = 0.0
        cols.append(masked)
    return np.concatenate(cols, axis=1)


def _masked_signal(cfg, mask_sets):
    """Compose the needle control from (mask, signal) layers over ubar."""
    values = cfg.traj.signal.values.copy()
    for mask, sig in mask_sets:
        values[mask] = sig.values[mask]
    return pb.ControlSignal(cfg.problem.grid_times(), values)


def build_needle_control(cfg, eps):
    """Needle control and shifted initial point for one epsilon.

    The supports E_eps (measure eps T), F_eps (measure lambda_1 eps^2 T),
    A_eta (measure lambda_eta/lambda_1 T) and the nu-partition are grid-cell
    selections matching the scaled drift integrals; the construction is
    deterministic, so replays are bit-for-bit identical.
    """
    key = ("sets", float(eps))
    if key in cfg._cache:
        E_mask, F_mask, assigned = cfg._cache[key]
    else:
        residuals = {}
        problem, traj = cfg.problem, cfg.traj
        N = problem.grid_N
        q = len(cfg.sigmas)
        lam1 = cfg.lambda1
        cw = traj.cell_width

        if eps < 0 or eps > 1:
            raise ContractError("epsilon must lie in [0, 1]")
        n_E = int(round(eps * N))
        n_F = int(round(lam1 * eps * eps * N)) if q else 0
        if eps > 0 and n_E == 0:
            raise ContractError("epsilon below grid resolution")
        if q and eps > 0 and n_F == 0:
            raise ContractError("epsilon^2 support below grid resolution")

        drift_u = _cell_drift_integrals(cfg, cfg.u)

        # A_eta: measure (lambda_eta / lambda_1) T matching the sigma_eta drift
        sigma_hat = []
        for eta in range(q):
            drift_s = _cell_drift_integrals(cfg, cfg.sigmas[eta])
            if eta == 0:
                sigma_hat.append(cfg.sigmas[0])
            else:
                rho = cfg.lambdas[eta] / lam1
                sub, resid = lia.select_subset(
                    _with_prefix_checkpoints(drift_s), rho, cell_width=cw)
                residuals[f"A_{eta}"] = float(np.linalg.norm(resid))
                vals = cfg.traj.signal.values.copy()
                vals[sub.mask] = cfg.sigmas[eta].values[sub.mask]
                sigma_hat.append(pb.ControlSignal(problem.grid_times(), vals))

        F_mask = np.zeros(N, dtype=bool)
        if q and eps > 0:
            stacked = [
                _with_prefix_checkpoints(_cell_drift_integrals(cfg, sh))
                for sh in sigma_hat
            ]
            stacked.append(_with_prefix_checkpoints(drift_u))
            F_sub, resid = lia.select_subset(
                np.concatenate(stacked, axis=1), lam1 * eps * eps, cell_width=cw)
            residuals["F"] = float(np.linalg.norm(resid))
            F_mask = F_sub.mask

        # E_eps from the direction drift restricted off F_eps
        drift_u_masked = drift_u.copy()
        drift_u_masked[F_mask] = 0.0
        E_mask = np.zeros(N, dtype=bool)
        if eps > 0:
            E_sub, resid = lia.select_subset(
                _with_prefix_checkpoints(drift_u_masked), eps, cell_width=cw)
            residuals["E"] = float(np.linalg.norm(resid))
            E_mask = E_sub.mask

        # nu-partition of the F cells across the sigma layers
        assigned = []
        if q and eps > 0:
            masked = []
            for sh in sigma_hat:
                d = _cell_drift_integrals(cfg, sh)
                d[~F_mask] = 0.0
                masked.append(_with_prefix_checkpoints(d))
            parts, resid = lia.partition_family(masked, cfg.nus, cell_width=cw)
            residuals["nu_partition"] = float(np.linalg.norm(resid))
            # playing sigma_hat on F * part realizes sigma_eta on
            # F * part * A_eta and ubar elsewhere, as required
            for eta in range(q):
                assigned.append((F_mask & parts[eta].mask, sigma_hat[eta]))
        cfg._cache[key] = (E_mask, F_mask, assigned)
        cfg._cache[("residuals", float(eps))] = residuals

    layers = [(E_mask & ~F_mask, cfg.u)] + assigned
    control = _masked_signal(cfg, layers)
    shift = eps * cfg.V_chart
    for eta in range(len(cfg.sigmas)):
        shift = shift + eps * eps * cfg.nus[eta] * np.asarray(cfg.Ws[eta], dtype=float)
    model = cfg.problem.manifold
    if model.flat:
        x0 = cfg.traj.states[0] + shift
    else:
        x0 = geo.exp_map(model, cfg.traj.states[0], shift)
    return control, x0


def selection_residuals(cfg, eps):
    """Full-interval residual norms of the support selections for one eps."""
    build_needle_control(cfg, eps)
    return dict(cfg._cache.get(("residuals", float(eps)), {}))


def _expansion_fields(cfg):
    key = "fields"
    if key not in cfg._cache:
        problem, traj, frame = cfg.problem, cfg.traj, cfg.frame
        fine_X = va.solve_linearized(problem, traj, frame, cfg.u, cfg.V_chart)
        Ys = []
        for eta in range(len(cfg.sigmas)):
            Ys.append(va.solve_second_variation(
                problem, traj, frame, cfg.u, cfg.V_chart, cfg.sigmas[eta],
                float(cfg.lambdas[eta]), cfg.Ws[eta], fine_X=fine_X))
        cfg._cache[key] = (fine_X, Ys)
    return cfg._cache[key]


def log_along_reference(cfg, perturbed):
    """Frame coordinates of exp^-1_{xbar(t)} x_eps(t) at the public nodes."""
    problem, traj, frame = cfg.problem, cfg.traj, cfg.frame
    model = problem.manifold
    base = traj.states
    pts = perturbed.states
    if model.flat:
        diff = pts - base
    else:
        diff = geo.log_map(model, base, pts).comps
    return np.einsum("tij,tj->ti", frame.D, diff)


def _perturbed_log(cfg, eps):
    key = ("V_eps", float(eps))
    if key not in cfg._cache:
        control, x0 = build_needle_control(cfg, eps)
        perturbed = tj.integrate_state(cfg.problem, x0, control)
        cfg._cache[key] = log_along_reference(cfg, perturbed)
    return cfg._cache[key]


def variation_defect(cfg, eps, order=2):
    """sup-norm expansion defect at the public nodes for one epsilon.

    order=1 measures |V_eps - eps X|; order=2 subtracts the nu-weighted
    second-order fields as well.  Exactly zero at eps = 0.
    """
    if eps == 0.0:
        return 0.0
    V_eps = _perturbed_log(cfg, eps)
    fine_X, Ys = _expansion_fields(cfg)
    model_err = V_eps - eps * fine_X[::2]
    if order >= 2:
        for eta in range(len(cfg.sigmas)):
            model_err = model_err - eps * eps * cfg.nus[eta] * Ys[eta][::2]
    return float(np.max(np.linalg.norm(model_err, axis=1)))


def endpoint_expansion_defect(cfg, eps, fn):
    """Defect of the endpoint-map expansion for one EndpointFunction."""
    problem, traj, frame = cfg.problem, cfg.traj, cfg.frame
    if eps == 0.0:
        return 0.0
    control, x0 = build_needle_control(cfg, eps)
    perturbed = tj.integrate_state(problem, x0, control)
    value = fn.value(perturbed.states[0], perturbed.states[-1])
    base = fn.value(traj.states[0], traj.states[-1])
    fine_X, Ys = _expansion_fields(cfg)
    x0b, xTb = traj.states[0], traj.states[-1]
    g1, g2 = fn.grad(x0b, xTb)
    XT = frame.to_chart_vec(-1, fine_X[-1])
    first = g1 @ cfg.V_chart + g2 @ XT
    bundle = va.VariationBundle(u=cfg.u, V_chart=cfg.V_chart, X=fine_X[::2],
                                fine_X=fine_X)
    d2 = va.endpoint_second_difference(problem, traj, frame, bundle, fn)
    second = 0.0
    for eta in range(len(cfg.sigmas)):
        W = np.asarray(cfg.Ws[eta], dtype=float)
        YT = frame.to_chart_vec(-1, Ys[eta][-1])
        second += cfg.nus[eta] * (g1 @ W + g2 @ YT + 0.5 * d2)
    if not cfg.sigmas:
        second = 0.5 * d2
    return float(abs(value - base - eps * first - eps * eps * second))


@dataclass
class SlopeEstimate:
    slope: float
    exact: bool = False
    points: list = field(default_factory=list)


def convergence_order(eps_values, defects, floor=1e-14):
    """Least-squares slope of log(defect) against log(eps)."""
    eps_values = np.asarray(eps_values, dtype=float)
    defects = np.asarray(defects, dtype=float)
    if len(eps_values) < 3:
        raise ContractError("need at least three sweep points")
    if np.all(defects <= floor):
        return SlopeEstimate(slope=np.inf, exact=True,
                             points=list(zip(eps_values, defects)))
    keep = defects > floor
    x = np.log(eps_values[keep])
    y = np.log(defects[keep])
    slope = float(np.polyfit(x, y, 1)[0])
    return SlopeEstimate(slope=slope, exact=False,
                         points=list(zip(eps_values, defects)))


def sweep(cfg, order=2):
    """Measure defects over cfg.eps_list; returns (eps, defects, SlopeEstimate)."""
    eps_values = list(cfg.eps_list)
    defects = [variation_defect(cfg, e, order=order) for e in eps_values]
    return eps_values, defects, convergence_order(eps_values, defects)


def sweep_to_csv(path, eps_values, defects):
    rows = []
    for i in range(len(eps_values)):
        if i >= 2:
            est = convergence_order(eps_values[: i + 1], defects[: i + 1])
            slope = est.slope
        else:
            slope = float("nan")
        rows.append((eps_values[i], defects[i], slope))
    with open(path, "w") as fh:
        fh.write("eps,defect,slope_so_far\n")
        for e, d, s in rows:
            fh.write(f"{e},{d},{s}\n")
