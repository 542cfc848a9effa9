"""Global linear system satisfied by the controls.

Two constraint groups bind the stacked unknowns
[f_s; g_s; gstar_s; estar_s; rstar_s]:

  * per-step divergence-free conditions on the noise controls, and
  * the terminal condition, reduced to one dense linear equation by
    iterating the one-step recurrence to the final time.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .dynamics import BrownianPath, SchemeMatrices
from .errors import DimensionMismatch
from .grid import LayoutSet


def assemble_divergence_constraints(ops, n_steps: int):
    """Block-diagonal stacked divergence operators (V, P, Q)."""
    eye = sp.identity(n_steps, format="csr")
    v = sp.kron(eye, ops.V0, format="csr")
    p = sp.kron(eye, ops.P0, format="csr") if ops.P0.shape[0] else sp.csr_matrix(
        (0, n_steps * ops.P0.shape[1])
    )
    q = sp.kron(eye, ops.Q0, format="csr") if ops.Q0.shape[0] else sp.csr_matrix(
        (0, n_steps * ops.Q0.shape[1])
    )
    return v, p, q


@dataclass
class ConstraintSystem:
    """Assembled constraints for one realized noise path.

    S_f, S_g, S1, S_r hold N_t column blocks each; xi is the terminal
    right-hand side.  V, P, Q are the stacked divergence constraints.
    """

    layouts: LayoutSet
    n_steps: int
    path: BrownianPath
    V: sp.csr_matrix
    P: sp.csr_matrix
    Q: sp.csr_matrix
    S_f: np.ndarray
    S_g: np.ndarray
    S1: np.ndarray
    S_r: np.ndarray
    xi: np.ndarray
    phi0: np.ndarray
    e_star_0: np.ndarray
    phi_target: np.ndarray

    @property
    def state_dim(self) -> int:
        return self.layouts.state_dim

    def terminal_map(self, f_s, g_s, estar_s, rstar_s) -> np.ndarray:
        """Left-hand side of the terminal constraint for a candidate."""
        out = self.S_f @ np.ravel(f_s)
        out += self.S_g @ np.ravel(g_s)
        if self.S1.shape[1]:
            out += self.S1 @ np.ravel(estar_s)
        if self.S_r.shape[1]:
            out += self.S_r @ np.ravel(rstar_s)
        return out

    def predict_terminal(self, candidate) -> np.ndarray:
        """Terminal state the constraint algebra assigns to a candidate.

        Equals phi_target - xi + (terminal map), i.e. the propagated
        initial data plus the control contributions.
        """
        base = self.phi_target - self.xi
        return base + self.terminal_map(
            candidate.f_s, candidate.g_s, candidate.estar_s, candidate.rstar_s
        )


def assemble_terminal_constraint(
    scheme: SchemeMatrices,
    path: BrownianPath,
    phi0: np.ndarray,
    e_star_0: np.ndarray,
    phi_target: np.ndarray,
):
    """Dense terminal-constraint matrices (S_f, S_g, S1, S_r) and xi.

    Blocks are produced with one sweep of propagator applications,
    reusing each partial power across all four matrices.
    """
    scheme.require_dense()
    lay = scheme.layouts
    n = lay.state_dim
    nt = path.n_steps
    n_e, n_h, n_s, n_r = lay.n_e, lay.n_h, lay.n_estar, lay.n_r
    for name, v, m in (("phi0", phi0, n), ("e_star_0", e_star_0, n_s),
                       ("phi_target", phi_target, n)):
        if np.shape(v) != (m,):
            raise DimensionMismatch(f"{name} has shape {np.shape(v)}, expected ({m},)")

    u = scheme.U
    dw = path.increments
    kb_f = scheme.solve_m1_matrix(scheme.B_f.toarray())
    kb_g = scheme.solve_m1_matrix(scheme.B_g.toarray())
    kb_1 = scheme.solve_m1_matrix(scheme.B1.toarray())
    kb_2 = scheme.solve_m1_matrix(scheme.B2.toarray())
    kb_3 = scheme.solve_m1_matrix(scheme.B3.toarray()) if n_r else np.zeros((n, 0))
    s0 = u @ kb_1 + kb_2

    s_f = np.zeros((n, nt * n_e))
    s_g = np.zeros((n, nt * n_h))
    s_1 = np.zeros((n, nt * n_s))
    s_r = np.zeros((n, nt * n_r))

    cur_f, cur_g, cur_0, cur_3 = kb_f, kb_g, s0, kb_3
    for m in range(nt):
        blk = nt - 1 - m
        s_f[:, blk * n_e : (blk + 1) * n_e] = cur_f * dw[blk]
        s_g[:, blk * n_h : (blk + 1) * n_h] = cur_g * dw[blk]
        if n_r:
            s_r[:, blk * n_r : (blk + 1) * n_r] = cur_3
        if blk >= 1:
            s_1[:, (blk - 1) * n_s : blk * n_s] = cur_0
        if m < nt - 1:
            cur_f = u @ cur_f
            cur_g = u @ cur_g
            cur_0 = u @ cur_0
            if n_r:
                cur_3 = u @ cur_3
    s_1[:, (nt - 1) * n_s :] = kb_1

    prop = np.array(phi0, dtype=float)
    for _ in range(nt):
        prop = u @ prop
    vb = kb_2 @ e_star_0
    for _ in range(nt - 1):
        vb = u @ vb
    xi = np.asarray(phi_target, dtype=float) - prop - vb
    return s_f, s_g, s_1, s_r, xi


def assemble_constraint_system(
    ops,
    scheme: SchemeMatrices,
    path: BrownianPath,
    phi0: np.ndarray,
    phi_target: np.ndarray,
    e_star_0: np.ndarray | None = None,
) -> ConstraintSystem:
    """Assemble divergence and terminal constraints into one system."""
    lay = scheme.layouts
    if e_star_0 is None:
        e_star_0 = np.array(phi0[lay.estar_slice])
    v, p, q = assemble_divergence_constraints(ops, path.n_steps)
    s_f, s_g, s_1, s_r, xi = assemble_terminal_constraint(
        scheme, path, phi0, e_star_0, phi_target
    )
    return ConstraintSystem(
        layouts=lay,
        n_steps=path.n_steps,
        path=path,
        V=v,
        P=p,
        Q=q,
        S_f=s_f,
        S_g=s_g,
        S1=s_1,
        S_r=s_r,
        xi=xi,
        phi0=np.array(phi0, dtype=float),
        e_star_0=np.array(e_star_0, dtype=float),
        phi_target=np.array(phi_target, dtype=float),
    )


@dataclass
class ResidualRecord:
    div_f: float
    div_g: float
    terminal_abs: float
    terminal_rel: float

    def as_dict(self) -> dict:
        return {
            "div_f": self.div_f,
            "div_g": self.div_g,
            "terminal_abs": self.terminal_abs,
            "terminal_rel": self.terminal_rel,
        }


def constraint_residual(system: ConstraintSystem, candidate) -> ResidualRecord:
    """Norms of the three constraint equations at a candidate solution."""
    div_f = system.V @ np.ravel(candidate.f_s)
    div_f_norm = float(np.linalg.norm(div_f)) if div_f.size else 0.0
    if system.P.shape[0]:
        div_g = system.P @ np.ravel(candidate.g_s) + system.Q @ np.ravel(
            candidate.gstar_s
        )
        div_g_norm = float(np.linalg.norm(div_g))
    else:
        div_g_norm = 0.0
    res = system.terminal_map(
        candidate.f_s, candidate.g_s, candidate.estar_s, candidate.rstar_s
    ) - system.xi
    term = float(np.linalg.norm(res))
    xi_norm = float(np.linalg.norm(system.xi))
    return ResidualRecord(div_f_norm, div_g_norm, term, term / max(xi_norm, 1e-300))
