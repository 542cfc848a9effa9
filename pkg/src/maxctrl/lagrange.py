"""Minimum-norm control solves: multiplier elimination, KKT oracle, ablations.

The production route eliminates the divergence multipliers and solves the
dense symmetric reduced system for the terminal multiplier.  A direct
saddle-point solve of the full first-order system is kept as an
independent cross-check for small instances, and ablated solves handle
the (generally infeasible) reduced-control variants as lexicographic
least squares: first minimize the terminal defect, then the control norm.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .constraints import ConstraintSystem, ResidualRecord, constraint_residual
from .errors import CapExceeded, ConfigError, SchurSingular
from .grid import LayoutSet

_RCOND_FLOOR = 1e-13
_FEASIBLE_REL = 1e-6


@dataclass
class ControlSolution:
    """Solved control vectors, multipliers, and solve diagnostics."""

    f_s: np.ndarray
    g_s: np.ndarray
    gstar_s: np.ndarray
    estar_s: np.ndarray
    rstar_s: np.ndarray
    lambda1: np.ndarray | None
    lambda2: np.ndarray | None
    lambda3: np.ndarray | None
    objective_value: float
    schur_condition_estimate: float
    schur_rank: int | None
    regularized: bool
    residuals: ResidualRecord
    label: str
    feasible: bool

    def stacked(self) -> np.ndarray:
        return np.concatenate(
            [self.f_s, self.g_s, self.gstar_s, self.estar_s, self.rstar_s]
        )


def _objective(*vecs) -> float:
    return 0.5 * float(sum(v @ v for v in vecs))


def _block_cho_solve(factor, rhs_blocks: np.ndarray) -> np.ndarray:
    """Solve one symmetric factorization against stacked row blocks."""
    out = np.empty_like(rhs_blocks)
    for t in range(rhs_blocks.shape[0]):
        out[t] = sla.cho_solve(factor, rhs_blocks[t])
    return out


def _condition_from_cho(factor, a_norm1: float) -> float:
    try:
        from scipy.linalg.lapack import dpocon

        rcond, info = dpocon(factor[0], a_norm1, lower=factor[1])
        if info == 0 and rcond > 0:
            return 1.0 / rcond
    except Exception:  # pragma: no cover - lapack wrapper differences
        pass
    return float("nan")


def solve_min_norm(
    system: ConstraintSystem,
    ridge_epsilon: float = 1e-10,
    allow_singular: bool = False,
) -> ControlSolution:
    """Minimum-norm controls meeting every constraint, via elimination.

    Parameters
    ----------
    system : ConstraintSystem
        Assembled divergence and terminal constraints.
    ridge_epsilon : float
        Relative ridge added to the reduced system when it is numerically
        singular; the result is then flagged as regularized.
    allow_singular : bool
        Return the flagged solution instead of raising when the reduced
        system is rank deficient and the terminal equation stays unmet.

    Raises
    ------
    SchurSingular
        Rank-deficient reduced system with a large terminal residual
        (loss of controllability, e.g. a frozen noise path).
    """
    nt = system.n_steps
    n = system.state_dim

    # reduced symmetric system for the terminal multiplier
    schur = system.S_f @ system.S_f.T
    schur += system.S_g @ system.S_g.T
    if system.S1.shape[1]:
        schur += system.S1 @ system.S1.T
    if system.S_r.shape[1]:
        schur += system.S_r @ system.S_r.T

    y_f = None
    cho_v = None
    if system.V.shape[0]:
        n_v = system.V.shape[0] // nt
        y_f = (system.V @ system.S_f.T).reshape(nt, n_v, n)
        v0 = system.V[:n_v, : system.V.shape[1] // nt]
        cho_v = sla.cho_factor(np.asarray((v0 @ v0.T).todense()))
        w_f = _block_cho_solve(cho_v, y_f)
        schur -= np.tensordot(y_f, w_f, axes=([0, 1], [0, 1]))

    y_g = None
    cho_p = None
    if system.P.shape[0]:
        n_p = system.P.shape[0] // nt
        y_g = (system.P @ system.S_g.T).reshape(nt, n_p, n)
        p0 = system.P[:n_p, : system.P.shape[1] // nt]
        q0 = system.Q[:n_p, : system.Q.shape[1] // nt]
        m_p = np.asarray((p0 @ p0.T + q0 @ q0.T).todense())
        cho_p = sla.cho_factor(m_p)
        w_g = _block_cho_solve(cho_p, y_g)
        schur -= np.tensordot(y_g, w_g, axes=([0, 1], [0, 1]))

    schur = 0.5 * (schur + schur.T)
    xi = system.xi

    regularized = False
    rank: int | None = None
    cond: float
    try:
        factor = sla.cho_factor(schur)
        cond = _condition_from_cho(factor, float(np.linalg.norm(schur, 1)))
        if np.isfinite(cond) and cond > 1.0 / _RCOND_FLOOR:
            raise np.linalg.LinAlgError("near singular")

        def solve_schur(rhs):
            return sla.cho_solve(factor, rhs)

    except np.linalg.LinAlgError:
        regularized = True
        w, q = sla.eigh(schur)
        w_max = float(w[-1]) if len(w) else 0.0
        tol = max(w_max, 0.0) * 1e-12
        rank = int(np.sum(w > tol))
        ridge = max(ridge_epsilon * (float(np.trace(schur)) / n), 1e-300)
        denom = np.maximum(w, 0.0) + ridge
        cond = w_max / max(float(w[0]), ridge)

        def solve_schur(rhs):
            return q @ ((q.T @ rhs) / denom)

    def recover(lam3):
        """Multipliers and controls from the stationarity formulas."""
        if cho_v is not None:
            lam1 = -_block_cho_solve(cho_v, (y_f @ lam3)[:, :, None])[:, :, 0].reshape(-1)
            f_s = system.V.T @ lam1 + system.S_f.T @ lam3
        else:
            lam1 = np.zeros(0)
            f_s = system.S_f.T @ lam3
        if cho_p is not None:
            lam2 = -_block_cho_solve(cho_p, (y_g @ lam3)[:, :, None])[:, :, 0].reshape(-1)
            g_s = system.P.T @ lam2 + system.S_g.T @ lam3
            gstar_s = system.Q.T @ lam2
        else:
            lam2 = np.zeros(0)
            g_s = system.S_g.T @ lam3
            gstar_s = np.zeros(system.Q.shape[1])
        estar_s = system.S1.T @ lam3
        rstar_s = system.S_r.T @ lam3
        return lam1, lam2, f_s, g_s, gstar_s, estar_s, rstar_s

    # Refine on the primal terminal residual: it is evaluated at control
    # scale, so the correction loop is not limited by the multiplier
    # magnitude the way plain refinement of the reduced system would be.
    lam3 = solve_schur(xi)
    lam1, lam2, f_s, g_s, gstar_s, estar_s, rstar_s = recover(lam3)
    best = None
    for _ in range(12):
        r = xi - system.terminal_map(f_s, g_s, estar_s, rstar_s)
        r_norm = float(np.linalg.norm(r))
        if best is None or r_norm < best[0]:
            best = (r_norm, lam3, (lam1, lam2, f_s, g_s, gstar_s, estar_s, rstar_s))
        else:
            break
        if r_norm <= 1e-15 * max(1.0, float(np.linalg.norm(xi))):
            break
        lam3 = lam3 + solve_schur(r)
        lam1, lam2, f_s, g_s, gstar_s, estar_s, rstar_s = recover(lam3)
    lam3 = best[1]
    lam1, lam2, f_s, g_s, gstar_s, estar_s, rstar_s = best[2]

    sol = ControlSolution(
        f_s=f_s,
        g_s=g_s,
        gstar_s=gstar_s,
        estar_s=estar_s,
        rstar_s=rstar_s,
        lambda1=lam1,
        lambda2=lam2,
        lambda3=lam3,
        objective_value=_objective(f_s, g_s, gstar_s, estar_s, rstar_s),
        schur_condition_estimate=float(cond),
        schur_rank=rank if rank is not None else n,
        regularized=regularized,
        residuals=ResidualRecord(0.0, 0.0, 0.0, 0.0),
        label="full",
        feasible=False,
    )
    sol.residuals = constraint_residual(system, sol)
    sol.feasible = sol.residuals.terminal_rel <= _FEASIBLE_REL
    if regularized and not sol.feasible and not allow_singular:
        raise SchurSingular(
            "reduced control system is rank deficient "
            f"(rank {rank} of {n}); terminal residual "
            f"{sol.residuals.terminal_abs:.3e}",
            rank=rank,
            dim=n,
            residual=sol.residuals.terminal_abs,
        )
    return sol


def oracle_min_norm(system: ConstraintSystem, cap: int = 4000) -> ControlSolution:
    """Same minimum-norm problem, solved as one dense saddle system.

    Independent verification route for small instances: no elimination,
    no reduced system, one LU factorization of the full first-order
    optimality matrix.
    """
    n = system.state_dim
    dims = [
        system.S_f.shape[1],
        system.S_g.shape[1],
        system.Q.shape[1],
        system.S1.shape[1],
        system.S_r.shape[1],
    ]
    m = sum(dims)
    n_rows = system.V.shape[0] + system.P.shape[0] + n
    if m + n_rows > cap:
        raise CapExceeded(
            f"oracle KKT dimension {m + n_rows} exceeds cap {cap}"
        )
    edges = np.cumsum([0] + dims)
    c_mat = np.zeros((system.V.shape[0] + system.P.shape[0], m))
    c_mat[: system.V.shape[0], edges[0] : edges[1]] = np.asarray(system.V.todense())
    if system.P.shape[0]:
        c_mat[system.V.shape[0] :, edges[1] : edges[2]] = np.asarray(
            system.P.todense()
        )
        c_mat[system.V.shape[0] :, edges[2] : edges[3]] = np.asarray(
            system.Q.todense()
        )
    s_mat = np.zeros((n, m))
    s_mat[:, edges[0] : edges[1]] = system.S_f
    s_mat[:, edges[1] : edges[2]] = system.S_g
    s_mat[:, edges[3] : edges[4]] = system.S1
    s_mat[:, edges[4] : edges[5]] = system.S_r

    k = m + n_rows
    kkt = np.zeros((k, k))
    kkt[:m, :m] = np.eye(m)
    kkt[:m, m : m + c_mat.shape[0]] = -c_mat.T
    kkt[:m, m + c_mat.shape[0] :] = -s_mat.T
    kkt[m : m + c_mat.shape[0], :m] = c_mat
    kkt[m + c_mat.shape[0] :, :m] = s_mat
    rhs = np.zeros(k)
    rhs[m + c_mat.shape[0] :] = system.xi

    # the saddle matrix is exactly singular whenever the constraint rows are
    # rank deficient (consistent systems included); fall back to the
    # minimum-norm least-squares solution, whose primal part is still the
    # unique optimum, when a plain factorization goes astray
    import warnings

    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        try:
            sol_vec = sla.solve(kkt, rhs)
        except np.linalg.LinAlgError:
            sol_vec = None
    scale = float(np.linalg.norm(rhs)) or 1.0
    if sol_vec is None or np.linalg.norm(kkt @ sol_vec - rhs) > 1e-8 * scale:
        sol_vec = sla.lstsq(kkt, rhs, lapack_driver="gelsd")[0]
    x = sol_vec[:m]
    parts = [x[edges[i] : edges[i + 1]] for i in range(5)]

    sol = ControlSolution(
        f_s=parts[0],
        g_s=parts[1],
        gstar_s=parts[2],
        estar_s=parts[3],
        rstar_s=parts[4],
        lambda1=None,
        lambda2=None,
        lambda3=sol_vec[m + c_mat.shape[0] :],
        objective_value=_objective(*parts),
        schur_condition_estimate=float("nan"),
        schur_rank=None,
        regularized=False,
        residuals=ResidualRecord(0.0, 0.0, 0.0, 0.0),
        label="oracle",
        feasible=False,
    )
    sol.residuals = constraint_residual(system, sol)
    sol.feasible = sol.residuals.terminal_rel <= _FEASIBLE_REL
    return sol


# control families available per mode; 'u' expands to the boundary trace
_F_TOKENS = {"E1": "f1", "E2": "f2", "E3": "f3"}
_G_TOKENS = {"H1": "g1", "H2": "g2", "H3": "g3"}


def _family_tokens(layouts: LayoutSet) -> dict[str, str]:
    tok = {}
    for name in layouts.e_names:
        tok[name] = _F_TOKENS[layouts.families[name].component]
    for name in layouts.h_names:
        tok[name] = _G_TOKENS[layouts.families[name].component]
    for name in layouts.estar_names:
        tok[name] = name.lower()
    for name in layouts.gstar_names:
        # boundary g samples follow their interior family
        tok[name] = _G_TOKENS[layouts.families[name].component]
    for name in layouts.r_names:
        # leftover tangential-E edge values belong to the boundary control
        tok[name] = "redge" if name.startswith("R_E") else None
    return tok


@dataclass(frozen=True)
class AblationMode:
    """Subset of control families kept active in a solve."""

    active: frozenset[str]
    label: str

    def __post_init__(self):
        if not self.active:
            raise ConfigError("ablation mode needs at least one active control")

    @staticmethod
    def available(layouts: LayoutSet) -> frozenset[str]:
        toks = set()
        for t in _family_tokens(layouts).values():
            if t is not None:
                toks.add(t)
        return frozenset(toks)

    @classmethod
    def full(cls, layouts: LayoutSet) -> "AblationMode":
        return cls(cls.available(layouts), "full")

    @classmethod
    def drop(cls, dropped, layouts: LayoutSet) -> "AblationMode":
        """Remove the named control families; 'u' means the whole boundary."""
        avail = cls.available(layouts)
        expand = set()
        for d in dropped:
            d = d.strip().lower()
            if d == "u":
                expand |= {t for t in avail if t.startswith("e") or t == "redge"}
            elif d in avail:
                expand.add(d)
            else:
                raise ConfigError(
                    f"unknown control family {d!r}; available: {sorted(avail)} or 'u'"
                )
        active = avail - expand
        if not active:
            raise ConfigError("cannot drop every control family")
        label = "drop-" + "+".join(sorted(expand)) if expand else "full"
        return cls(frozenset(active), label)


def _null_basis(mat: np.ndarray) -> np.ndarray:
    if mat.shape[1] == 0:
        return np.zeros((0, 0))
    if mat.shape[0] == 0:
        return np.eye(mat.shape[1])
    return sla.null_space(mat)


def _ablation_basis(system: ConstraintSystem, mode: AblationMode) -> sp.csr_matrix:
    """Orthonormal basis of the feasible set {dropped = 0, divergences = 0}.

    Returns Z with orthonormal columns such that candidates are exactly
    x = Z y over the stacked unknowns [f; g; gstar; estar; r].
    """
    lay = system.layouts
    nt = system.n_steps
    tok = _family_tokens(lay)
    keep = {name: (tok[name] is None or tok[name] in mode.active)
            for name in tok}

    def group_mask(names) -> np.ndarray:
        parts = [
            np.full(lay.families[n].flat_len, keep[n], dtype=bool) for n in names
        ]
        return np.concatenate(parts) if parts else np.zeros(0, dtype=bool)

    f_mask = group_mask(lay.e_names)
    g_mask = group_mask(lay.h_names)
    gstar_mask = group_mask(lay.gstar_names)
    estar_mask = group_mask(lay.estar_names)
    r_mask = group_mask(lay.r_names)

    n_e, n_h = lay.n_e, lay.n_h
    n_gs, n_s, n_r = lay.n_gstar, lay.n_estar, lay.n_r
    off_f, off_g = 0, nt * n_e
    off_gs = off_g + nt * n_h
    off_es = off_gs + nt * n_gs
    off_r = off_es + nt * n_s
    total = off_r + nt * n_r

    # per-step null bases, shared across steps
    v0 = system.V[: system.V.shape[0] // nt if system.V.shape[0] else 0,
                  :n_e].toarray() if system.V.shape[0] else np.zeros((0, n_e))
    z_f = _null_basis(v0[:, f_mask]) if f_mask.any() else np.zeros((0, 0))
    if system.P.shape[0]:
        n_p = system.P.shape[0] // nt
        p0 = system.P[:n_p, :n_h].toarray()
        q0 = system.Q[:n_p, :n_gs].toarray()
        joint = np.hstack([p0[:, g_mask], q0[:, gstar_mask]])
        z_gg = _null_basis(joint) if joint.shape[1] else np.zeros((0, 0))
    else:
        z_gg = np.eye(int(g_mask.sum()))

    rows, cols, vals = [], [], []
    col0 = 0

    def place(block: np.ndarray, row_idx: np.ndarray):
        nonlocal col0
        r, c = block.shape
        if r == 0 or c == 0:
            return
        rr = np.repeat(row_idx, c)
        cc = np.tile(np.arange(col0, col0 + c), r)
        rows.append(rr)
        cols.append(cc)
        vals.append(block.reshape(-1))
        col0 += c

    f_idx = np.flatnonzero(f_mask)
    g_idx = np.flatnonzero(g_mask)
    gs_idx = np.flatnonzero(gstar_mask)
    es_idx = np.flatnonzero(estar_mask)
    r_idx = np.flatnonzero(r_mask)
    for t in range(nt):
        place(z_f, off_f + t * n_e + f_idx)
        if system.P.shape[0]:
            gg_rows = np.concatenate(
                [off_g + t * n_h + g_idx, off_gs + t * n_gs + gs_idx]
            )
            place(z_gg, gg_rows)
        else:
            place(np.eye(len(g_idx)), off_g + t * n_h + g_idx)
        place(np.eye(len(es_idx)), off_es + t * n_s + es_idx)
        place(np.eye(len(r_idx)), off_r + t * n_r + r_idx)

    if not rows:
        raise ConfigError("ablation leaves no feasible directions")
    z = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(total, col0),
    )
    return z


def _zero_dropped(system: ConstraintSystem, mode: AblationMode, sol: ControlSolution,
                  label: str) -> ControlSolution:
    """Withhold the dropped families from a solved control set."""
    lay = system.layouts
    nt = system.n_steps
    tok = _family_tokens(lay)
    if not any(t is not None and t not in mode.active for t in tok.values()):
        return sol  # nothing withheld: the full minimum-norm solution

    def masked(vec: np.ndarray, names, group_len: int) -> np.ndarray:
        out = vec.reshape(nt, group_len).copy()
        for name in names:
            if tok[name] is not None and tok[name] not in mode.active:
                lo = lay.offsets[name]
                out[:, lo : lo + lay.families[name].flat_len] = 0.0
        return out.reshape(-1)

    parts = (
        masked(sol.f_s, lay.e_names, lay.n_e),
        masked(sol.g_s, lay.h_names, lay.n_h),
        masked(sol.gstar_s, lay.gstar_names, lay.n_gstar) if lay.n_gstar else sol.gstar_s,
        masked(sol.estar_s, lay.estar_names, lay.n_estar),
        masked(sol.rstar_s, lay.r_names, lay.n_r) if lay.n_r else sol.rstar_s,
    )
    out = ControlSolution(
        f_s=parts[0],
        g_s=parts[1],
        gstar_s=parts[2],
        estar_s=parts[3],
        rstar_s=parts[4],
        lambda1=None,
        lambda2=None,
        lambda3=None,
        objective_value=_objective(*parts),
        schur_condition_estimate=sol.schur_condition_estimate,
        schur_rank=sol.schur_rank,
        regularized=sol.regularized,
        residuals=ResidualRecord(0.0, 0.0, 0.0, 0.0),
        label=label,
        feasible=False,
    )
    out.residuals = constraint_residual(system, out)
    out.feasible = out.residuals.terminal_rel <= _FEASIBLE_REL
    return out


def solve_ablated(
    system: ConstraintSystem,
    mode: AblationMode,
    strategy: str = "withhold",
    ridge_epsilon: float = 1e-10,
) -> ControlSolution:
    """Solve with a reduced control set.

    strategy="withhold" (default): synthesize the full minimum-norm
    control, then zero the dropped families before use.  The replayed
    system then misses the target by the withheld families' share, which
    is the published control-removal phenomenology.

    strategy="reoptimize": pin the dropped families to zero and
    re-optimize the remaining ones, keeping the divergence constraints
    binding; the terminal equation is handled as least squares with a
    minimum-norm tie-break.  At the grid sizes this package targets the
    reduced problem typically remains feasible (the per-path discrete
    system is close to fully actuated), so this strategy reports
    near-zero residuals; it is kept for investigating that gap.
    """
    if strategy == "withhold":
        full = solve_min_norm(
            system, ridge_epsilon=ridge_epsilon, allow_singular=False
        )
        return _zero_dropped(system, mode, full, mode.label)
    if strategy != "reoptimize":
        raise ConfigError(f"unknown ablation strategy {strategy!r}")

    lay = system.layouts
    nt = system.n_steps
    z = _ablation_basis(system, mode)

    n_e, n_h = lay.n_e, lay.n_h
    n_gs, n_s, n_r = lay.n_gstar, lay.n_estar, lay.n_r
    off_g = nt * n_e
    off_gs = off_g + nt * n_h
    off_es = off_gs + nt * n_gs
    off_r = off_es + nt * n_s

    sz = (z[:off_g].T @ system.S_f.T).T
    sz = sz + (z[off_g:off_gs].T @ system.S_g.T).T
    if n_s:
        sz = sz + (z[off_es:off_r].T @ system.S1.T).T
    if n_r:
        sz = sz + (z[off_r:].T @ system.S_r.T).T
    sz = np.ascontiguousarray(sz)

    y, _, rank, _ = np.linalg.lstsq(sz, system.xi, rcond=None)
    x = z @ y
    parts = (
        x[:off_g],
        x[off_g:off_gs],
        x[off_gs:off_es],
        x[off_es:off_r],
        x[off_r:],
    )
    sol = ControlSolution(
        f_s=parts[0],
        g_s=parts[1],
        gstar_s=parts[2],
        estar_s=parts[3],
        rstar_s=parts[4],
        lambda1=None,
        lambda2=None,
        lambda3=None,
        objective_value=_objective(*parts),
        schur_condition_estimate=float("nan"),
        schur_rank=int(rank),
        regularized=False,
        residuals=ResidualRecord(0.0, 0.0, 0.0, 0.0),
        label=mode.label,
        feasible=False,
    )
    sol.residuals = constraint_residual(system, sol)
    sol.feasible = sol.residuals.terminal_rel <= _FEASIBLE_REL
    return sol
