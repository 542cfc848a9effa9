"""One-step scheme matrices, Brownian increments, stepping, and replay.

The state vector stacks [E; H; Estar; R].  Only the E/H block evolves;
the boundary blocks are passed through unchanged each step, which the
one-step matrices encode with identity rows.  The inverse of the system
matrix is kept as a factorization of the evolved block, so the boundary
slices of a solve are exact copies of the right-hand side.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import CapExceeded, DimensionMismatch, SingularM1
from .grid import GridSpec, LayoutSet


@dataclass(frozen=True)
class BrownianPath:
    """Increments of one scalar Wiener process over the time mesh."""

    seed: int
    dt: float
    increments: np.ndarray  # shape (N_t,), variance dt each

    def __post_init__(self):
        self.increments.setflags(write=False)

    @property
    def n_steps(self) -> int:
        return len(self.increments)


def sample_path(seed: int, spec: GridSpec, frozen: bool = False) -> BrownianPath:
    """Draw the Brownian increments for a spec, reproducibly from the seed.

    With ``frozen=True`` all increments are zero (deterministic limit,
    used to witness loss of controllability).
    """
    if frozen:
        inc = np.zeros(spec.n_steps)
    else:
        rng = np.random.default_rng(np.uint64(seed))
        inc = rng.standard_normal(spec.n_steps) * np.sqrt(spec.dt)
    return BrownianPath(seed=int(seed), dt=spec.dt, increments=inc)


@dataclass
class StateVector:
    phi: np.ndarray
    time_index: int


class SchemeMatrices:
    """Assembled one-step system: M1 x_{n+1} = M2 x_n + inputs.

    Attributes
    ----------
    M1, M2 : sparse matrices over the full state.
    B_f, B_g : selectors placing the noise controls into the E / H rows.
    B1, B2, B3 : couplings of the boundary unknowns into the update.
    U : dense one-step propagator inv(M1) M2, materialized when the
        state dimension does not exceed ``dense_cap`` (None otherwise).
    """

    def __init__(self, ops, dt: float | None = None, dense_cap: int = 5000):
        self.ops = ops
        self.spec: GridSpec = ops.spec
        self.layouts: LayoutSet = ops.layouts
        self.dt = self.spec.dt if dt is None else float(dt)
        self.dense_cap = int(dense_cap)

        lay = self.layouts
        n_e, n_h, n_s, n_r = lay.n_e, lay.n_h, lay.n_estar, lay.n_r
        a = 0.5 * self.dt
        A, F, G = ops.A, ops.F, ops.G
        I_e, I_h = sp.identity(n_e, format="csr"), sp.identity(n_h, format="csr")

        m1_ev = sp.bmat([[I_e, -a * A], [-a * F, I_h]], format="csc")
        m2_ev = sp.bmat([[I_e, a * A], [a * F, I_h]], format="csr")
        self.M1 = sp.block_diag(
            (m1_ev, sp.identity(n_s, format="csr"), sp.identity(n_r, format="csr")),
            format="csr",
        )
        self.M2 = sp.block_diag(
            (m2_ev, sp.csr_matrix((n_s, n_s)), sp.csr_matrix((n_r, n_r))),
            format="csr",
        )

        def col(rows_e, rows_h, rows_s, rows_r, width):
            return sp.vstack(
                [
                    rows_e if rows_e is not None else sp.csr_matrix((n_e, width)),
                    rows_h if rows_h is not None else sp.csr_matrix((n_h, width)),
                    rows_s if rows_s is not None else sp.csr_matrix((n_s, width)),
                    rows_r if rows_r is not None else sp.csr_matrix((n_r, width)),
                ],
                format="csr",
            )

        self.B_f = col(I_e, None, None, None, n_e)
        self.B_g = col(None, I_h, None, None, n_h)
        self.B1 = col(None, a * G, sp.identity(n_s, format="csr"), None, n_s)
        self.B2 = col(None, a * G, None, None, n_s)
        self.B3 = col(None, None, None, sp.identity(n_r, format="csr"), n_r)

        try:
            self._ev_lu = spla.splu(m1_ev)
        except RuntimeError as e:  # pragma: no cover - assembly bug guard
            raise SingularM1(f"one-step matrix factorization failed: {e}") from e
        self._n_ev = n_e + n_h

        self.U: np.ndarray | None = None
        if self.state_dim <= self.dense_cap:
            u = np.zeros((self.state_dim, self.state_dim))
            u[: self._n_ev, : self._n_ev] = self._ev_lu.solve(
                np.asarray(m2_ev.todense())
            )
            self.U = u

    @property
    def state_dim(self) -> int:
        return self.layouts.state_dim

    def solve_m1(self, rhs: np.ndarray) -> np.ndarray:
        """Apply inv(M1) to a vector.  Boundary slices are copied exactly."""
        out = np.array(rhs, dtype=float, copy=True)
        out[: self._n_ev] = self._ev_lu.solve(np.asarray(rhs[: self._n_ev]))
        return out

    def apply_u(self, x: np.ndarray) -> np.ndarray:
        """One application of the propagator, dense or factorized."""
        if self.U is not None:
            return self.U @ x
        return self.solve_m1(self.M2 @ x)

    def require_dense(self):
        if self.U is None:
            raise CapExceeded(
                f"state dimension {self.state_dim} exceeds the dense cap "
                f"{self.dense_cap}; lower the grid resolution"
            )

    def solve_m1_matrix(self, rhs: np.ndarray) -> np.ndarray:
        """inv(M1) on a dense matrix of column vectors."""
        out = np.array(rhs, dtype=float, copy=True)
        out[: self._n_ev, :] = self._ev_lu.solve(np.asarray(rhs[: self._n_ev, :]))
        return out


def assemble_scheme(ops, dt: float | None = None, dense_cap: int = 5000) -> SchemeMatrices:
    """Build the scheme matrices for an assembled operator set."""
    return SchemeMatrices(ops, dt=dt, dense_cap=dense_cap)


def _check_len(name: str, v: np.ndarray, n: int):
    if v.shape != (n,):
        raise DimensionMismatch(f"{name} has shape {v.shape}, expected ({n},)")


def step(
    scheme: SchemeMatrices,
    state: StateVector,
    f_n: np.ndarray,
    g_n: np.ndarray,
    e_star_n: np.ndarray,
    e_star_np1: np.ndarray,
    r_star_np1: np.ndarray,
    d_w: float,
) -> StateVector:
    """Advance one step of the midpoint scheme.

    The new boundary slices equal the supplied t_{n+1} boundary values
    exactly; they are inputs of the step, not evolved quantities.
    """
    lay = scheme.layouts
    _check_len("state", state.phi, lay.state_dim)
    _check_len("f_n", f_n, lay.n_e)
    _check_len("g_n", g_n, lay.n_h)
    _check_len("e_star_n", e_star_n, lay.n_estar)
    _check_len("e_star_np1", e_star_np1, lay.n_estar)
    _check_len("r_star_np1", r_star_np1, lay.n_r)
    rhs = scheme.M2 @ state.phi
    rhs += scheme.B_f @ (f_n * d_w)
    rhs += scheme.B_g @ (g_n * d_w)
    rhs += scheme.B1 @ e_star_np1
    rhs += scheme.B2 @ e_star_n
    if lay.n_r:
        rhs += scheme.B3 @ r_star_np1
    return StateVector(scheme.solve_m1(rhs), state.time_index + 1)


@dataclass
class Trajectory:
    """Replayed states with per-step divergence diagnostics."""

    states: np.ndarray  # (N_t + 1, state_dim)
    times: np.ndarray
    div_e_max: np.ndarray  # max |interior E divergence| per stored state
    div_h_inner_max: np.ndarray  # same for H at fully interior cells

    @property
    def terminal(self) -> np.ndarray:
        return self.states[-1]


def replay(
    scheme: SchemeMatrices,
    phi0: np.ndarray,
    controls,
    path: BrownianPath,
) -> Trajectory:
    """Run the scheme forward with solved controls and record diagnostics.

    ``controls`` needs attributes f_s, g_s, estar_s, rstar_s: the stacked
    per-step vectors (boundary blocks hold steps 1..N_t).  The initial
    boundary trace is read from phi0.
    """
    lay = scheme.layouts
    nt = path.n_steps
    n_e, n_h, n_s, n_r = lay.n_e, lay.n_h, lay.n_estar, lay.n_r
    f_s = np.asarray(controls.f_s, dtype=float).reshape(nt, n_e)
    g_s = np.asarray(controls.g_s, dtype=float).reshape(nt, n_h)
    estar_s = np.asarray(controls.estar_s, dtype=float).reshape(nt, n_s)
    rstar_s = np.asarray(controls.rstar_s, dtype=float).reshape(nt, n_r)

    v0 = scheme.ops.V0
    p0 = scheme.ops.P0
    inner = scheme.ops.inner_cell_mask()
    p_inner = p0[inner] if p0.shape[0] else p0

    states = np.empty((nt + 1, lay.state_dim))
    div_e = np.empty(nt + 1)
    div_h = np.zeros(nt + 1)
    cur = StateVector(np.array(phi0, dtype=float), 0)

    def record(n, phi):
        states[n] = phi
        div = v0 @ phi[lay.e_slice]
        div_e[n] = np.abs(div).max() if div.size else 0.0
        if p_inner.shape[0]:
            dh = p_inner @ phi[lay.h_slice]
            div_h[n] = np.abs(dh).max()

    record(0, cur.phi)
    e_star_prev = np.array(phi0[lay.estar_slice])
    for n in range(nt):
        cur = step(
            scheme,
            cur,
            f_s[n],
            g_s[n],
            e_star_prev,
            estar_s[n],
            rstar_s[n],
            float(path.increments[n]),
        )
        e_star_prev = estar_s[n]
        record(n + 1, cur.phi)

    times = np.arange(nt + 1) * scheme.dt
    return Trajectory(states, times, div_e, div_h)


def _axis_weights(layout, spec: GridSpec) -> np.ndarray:
    """Tensor trapezoid/midpoint quadrature weight of every sample."""
    d_of = {"i": 0, "j": 1, "k": 2}
    per_axis = []
    for ax in layout.axes:
        if ax.half:
            per_axis.append(np.ones(len(ax)))
        else:
            n_d = spec.n_cells[d_of[ax.name]]
            per_axis.append(
                np.array([0.5 if lab in (0, n_d) else 1.0 for lab in ax.labels])
            )
    w = per_axis[0]
    for pa in per_axis[1:]:
        w = np.multiply.outer(w, pa)
    return w.reshape(-1)


def state_weights(layouts: LayoutSet) -> np.ndarray:
    """Quadrature weights for all state entries (boundary samples halved)."""
    w = np.empty(layouts.state_dim)
    for name in layouts.e_names + layouts.h_names + layouts.estar_names + layouts.r_names:
        w[layouts.state_slice(name)] = _axis_weights(
            layouts.families[name], layouts.spec
        )
    return w


def discrete_energy(phi: np.ndarray, layouts: LayoutSet) -> float:
    """Quadrature of (|E|^2 + |H|^2) / 2 over the box from the state samples."""
    if phi.shape[-1] != layouts.state_dim:
        raise DimensionMismatch(
            f"state of length {phi.shape[-1]}, expected {layouts.state_dim}"
        )
    vol = float(np.prod(layouts.spec.h))
    w = state_weights(layouts)
    return 0.5 * vol * float(np.sum(w * phi * phi))
