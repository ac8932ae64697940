"""Grid-based analogues of the Liapounoff convexity selections.

Cells are the intervals of a uniform time grid; a "selection" is a boolean
mask whose cell count is pinned to the nearest integer of the requested
fraction.  The greedy machinery tracks the running (prefix) integrals, which
is what the continuous lemmas guarantee for every t, then polishes the
full-interval residual with exchange passes.  Small instances are solved
exactly by enumeration.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations

import numpy as np

from .errors import ContractError

EXACT_ENUM_LIMIT = 250_000   # max C(N, c) explored by the exact fallback
EXCHANGE_CELL_LIMIT = 4096   # skip O(N^2) exchange polish above this size


@dataclass(frozen=True)
class GridSubset:
    mask: np.ndarray
    cell_width: float

    def __post_init__(self):
        object.__setattr__(self, "mask", np.asarray(self.mask, dtype=bool))

    @property
    def measure(self):
        return float(self.mask.sum()) * self.cell_width

    @property
    def indices(self):
        return np.flatnonzero(self.mask)


def _as_cells(h):
    h = np.asarray(h, dtype=float)
    if h.ndim == 1:
        h = h[:, None]
    return h


def _prefix_greedy(h, count):
    """Sequential selection tracking the scaled running integral.

    Chooses ``count`` cells so that, sweeping left to right, the selected
    partial sums stay close to rho * (prefix sum); this realizes the
    for-every-t clause of the selection lemmas at cell granularity.
    """
    N, k = h.shape
    rho = count / N if N else 0.0
    chosen = np.zeros(N, dtype=bool)
    run = np.zeros(k)
    remaining_slots = count
    remaining_cells = N
    for i in range(N):
        if remaining_slots <= 0:
            run -= rho * h[i]
            remaining_cells -= 1
            continue
        if remaining_slots >= remaining_cells:
            take = True
        else:
            r_take = run + (1.0 - rho) * h[i]
            r_skip = run - rho * h[i]
            # prefer the branch with the smaller running residual; break
            # exact ties toward keeping pace with the target count
            nt, ns = np.dot(r_take, r_take), np.dot(r_skip, r_skip)
            if abs(nt - ns) < 1e-18:
                take = (i + 1) * rho - (count - remaining_slots) >= 0.5
            else:
                take = nt < ns
        if take:
            chosen[i] = True
            run += (1.0 - rho) * h[i]
            remaining_slots -= 1
        else:
            run -= rho * h[i]
        remaining_cells -= 1
    return chosen


def _total_residual(h, mask, rho):
    return rho * h.sum(axis=0) - h[mask].sum(axis=0)


def _exchange_polish(h, mask, rho, locked=None, max_passes=8):
    """Swap in/out pairs while the full-interval residual strictly improves."""
    N = h.shape[0]
    if N > EXCHANGE_CELL_LIMIT:
        return mask
    res = _total_residual(h, mask, rho)
    best = float(np.dot(res, res))
    for _ in range(max_passes):
        improved = False
        ins = np.flatnonzero(mask if locked is None else (mask & ~locked))
        outs = np.flatnonzero(~mask)
        if len(ins) == 0 or len(outs) == 0:
            break
        # residual after swapping i (out) for j (in): res + h[i] - h[j]
        cand = res[None, None, :] + h[ins][:, None, :] - h[outs][None, :, :]
        norms = np.einsum("ijk,ijk->ij", cand, cand)
        i_best, j_best = np.unravel_index(np.argmin(norms), norms.shape)
        if norms[i_best, j_best] < best - 1e-24:
            mask = mask.copy()
            mask[ins[i_best]] = False
            mask[outs[j_best]] = True
            res = _total_residual(h, mask, rho)
            best = float(np.dot(res, res))
            improved = True
        if not improved:
            break
    return mask


def _exact_enumeration(h, count, rho):
    N = h.shape[0]
    total = rho * h.sum(axis=0)
    best_mask, best_val = None, np.inf
    for combo in combinations(range(N), count):
        res = total - h[list(combo)].sum(axis=0)
        val = float(np.dot(res, res))
        if val < best_val - 1e-24:
            best_val = val
            best_mask = combo
    mask = np.zeros(N, dtype=bool)
    mask[list(best_mask)] = True
    return mask


def _comb(n, c):
    from math import comb
    return comb(n, c)


def select_subset(h, rho, cell_width=1.0, eps=0.0):
    """Pick a subset E with |E| = round(rho*N) cells matching rho * integral.

    Returns (GridSubset, residual vector rho*sum(h) - sum_E h).  ``eps`` is
    the requested accuracy; the residual actually achieved is returned and
    generally shrinks as the grid refines.
    """
    if not 0.0 <= rho <= 1.0:
        raise ContractError("rho must lie in [0, 1]")
    h = _as_cells(h)
    N = h.shape[0]
    count = int(round(rho * N))
    rho_eff = count / N if N else 0.0
    if count == 0:
        mask = np.zeros(N, dtype=bool)
        return GridSubset(mask, cell_width), rho * h.sum(axis=0)
    if count == N:
        mask = np.ones(N, dtype=bool)
        return GridSubset(mask, cell_width), (rho - 1.0) * h.sum(axis=0)
    if N <= 64 and _comb(N, count) <= EXACT_ENUM_LIMIT:
        mask = _exact_enumeration(h, count, rho_eff)
    else:
        mask = _prefix_greedy(h, count)
        mask = _exchange_polish(h, mask, rho_eff)
    res = _total_residual(h, mask, rho_eff) + (rho - rho_eff) * h.sum(axis=0)
    return GridSubset(mask, cell_width), res


def nested_family(h, rhos, cell_width=1.0, eps=0.0):
    """Monotone family E_rho0 <= E_rho1 <= ... by incremental augmentation."""
    rhos = list(rhos)
    if any(b < a for a, b in zip(rhos, rhos[1:])):
        raise ContractError("rho list must be ascending")
    h = _as_cells(h)
    N = h.shape[0]
    out = []
    mask = np.zeros(N, dtype=bool)
    for rho in rhos:
        count = int(round(rho * N))
        rho_eff = count / N if N else 0.0
        while int(mask.sum()) < count:
            # add the unselected cell that best tracks the scaled target
            k_sel = int(mask.sum()) + 1
            target = (k_sel / count) * rho_eff * h.sum(axis=0) if count else 0.0
            current = h[mask].sum(axis=0)
            cand_idx = np.flatnonzero(~mask)
            cand = current[None, :] + h[cand_idx] - target[None, :]
            j = cand_idx[int(np.argmin(np.einsum("ij,ij->i", cand, cand)))]
            mask[j] = True
        if int(mask.sum()) == count and 0 < count < N:
            mask = _exchange_polish(h, mask, rho_eff, locked=out[-1].mask if out else None)
        out.append(GridSubset(mask.copy(), cell_width))
    return out


def partition_family(hs, rhos, cell_width=1.0, eps=0.0, exact_final=False):
    """Disjoint cover E_1..E_l with |E_i| = round(rho_i N) and matched sums.

    Returns (list[GridSubset], residual vector).  ``exact_final=True`` runs
    extra exchange passes that target the full-interval residual (the
    variant of the selection lemma whose rest term vanishes at T); for
    non-constant integrands the achievable value is limited by the cell
    granularity and is reported rather than asserted.
    """
    rhos = np.asarray(rhos, dtype=float)
    if np.any(rhos < -1e-12) or abs(rhos.sum() - 1.0) > 1e-9:
        raise ContractError("rho weights must be nonnegative and sum to 1")
    hs = [_as_cells(h) for h in hs]
    l = len(hs)
    if len(rhos) != l:
        raise ContractError("one weight per integrand required")
    N = hs[0].shape[0]
    # largest-remainder apportionment keeps the counts summing to N
    raw = rhos * N
    counts = np.floor(raw).astype(int)
    rem = raw - counts
    for idx in np.argsort(-rem)[: N - counts.sum()]:
        counts[idx] += 1
    labels = np.full(N, -1, dtype=int)
    order = np.argsort(-rem)  # assign tightest classes first
    remaining = np.ones(N, dtype=bool)
    for cls in order:
        if counts[cls] == 0:
            continue
        sub = hs[cls][remaining]
        rho_local = counts[cls] / remaining.sum()
        chosen_local = _prefix_greedy(sub, counts[cls])
        idx = np.flatnonzero(remaining)[chosen_local]
        labels[idx] = cls
        remaining[idx] = False
    if np.any(labels < 0):
        # all leftover cells belong to the last processed class with space
        leftovers = np.flatnonzero(labels < 0)
        for cls in range(l):
            deficit = counts[cls] - int((labels == cls).sum())
            if deficit > 0:
                take, leftovers = leftovers[:deficit], leftovers[deficit:]
                labels[take] = cls

    def total_res(lab):
        res = np.zeros(hs[0].shape[1])
        for i in range(l):
            res += rhos[i] * hs[i].sum(axis=0) - hs[i][lab == i].sum(axis=0)
        return res

    # pairwise exchange polish on the combined residual
    passes = 24 if exact_final else 8
    if N <= EXCHANGE_CELL_LIMIT:
        res = total_res(labels)
        best = float(np.dot(res, res))
        for _ in range(passes):
            improved = False
            for a in range(l):
                for b in range(a + 1, l):
                    ia = np.flatnonzero(labels == a)
                    ib = np.flatnonzero(labels == b)
                    if len(ia) == 0 or len(ib) == 0:
                        continue
                    # swap i<-b, j<-a changes residual by
                    #   + h_a[i] - h_b[i] - h_a[j] + h_b[j]
                    da = hs[a][ia] - hs[b][ia]
                    db = hs[a][ib] - hs[b][ib]
                    cand = res[None, None, :] + da[:, None, :] - db[None, :, :]
                    norms = np.einsum("ijk,ijk->ij", cand, cand)
                    i_b, j_b = np.unravel_index(np.argmin(norms), norms.shape)
                    if norms[i_b, j_b] < best - 1e-24:
                        labels[ia[i_b]] = b
                        labels[ib[j_b]] = a
                        res = total_res(labels)
                        best = float(np.dot(res, res))
                        improved = True
            if not improved:
                break
    subsets = [GridSubset(labels == i, cell_width) for i in range(l)]
    return subsets, total_res(labels)


def brute_force_subset(h, rho):
    """Exhaustive optimum for tests; only sensible for ~20 cells."""
    h = _as_cells(h)
    N = h.shape[0]
    count = int(round(rho * N))
    rho_eff = count / N if N else 0.0
    mask = _exact_enumeration(h, count, rho_eff)
    return GridSubset(mask, 1.0), _total_residual(h, mask, rho_eff)
