"""Two-dimensional transverse-electric assembly: fields (E1, E2, H3).

The 2-D operators realize the same central differences as the 3-D stack,
on the staggering E1 at (i+1/2, j), E2 at (i, j+1/2), H3 at (i+1/2, j+1/2),
with flattening j fastest then i.  Boundary rows of the H3 update pull from
the trace families E12 (E1 at j in {0, N2}) and E21 (E2 at i in {0, N1}).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import ConfigError, DimensionMismatch, ShapeError
from .grid import DimMode, GridSpec, LayoutSet, build_layouts


@dataclass(frozen=True)
class TEzOperatorSet:
    """2-D operator bundle; attribute names mirror the 3-D set."""

    spec: GridSpec
    layouts: LayoutSet
    A2d: sp.csr_matrix  # E update from H3
    F2d: sp.csr_matrix  # H3 update from interior E
    G2d: sp.csr_matrix  # H3 update from boundary E
    V2d: sp.csr_matrix  # E divergence at interior nodes

    # aliases so the dynamics/constraints pipeline is mode agnostic
    @property
    def A(self) -> sp.csr_matrix:
        return self.A2d

    @property
    def F(self) -> sp.csr_matrix:
        return self.F2d

    @property
    def G(self) -> sp.csr_matrix:
        return self.G2d

    @property
    def V0(self) -> sp.csr_matrix:
        return self.V2d

    @property
    def P0(self) -> sp.csr_matrix:
        # H3 divergence is vacuous in two dimensions: no constraint rows
        return sp.csr_matrix((0, self.layouts.n_h))

    @property
    def Q0(self) -> sp.csr_matrix:
        return sp.csr_matrix((0, 0))

    @property
    def n_div_e(self) -> int:
        return self.V2d.shape[0]

    @property
    def n_div_h(self) -> int:
        return 0

    def inner_cell_mask(self) -> np.ndarray:
        return np.zeros(0, dtype=bool)


def assemble_tez(spec: GridSpec) -> TEzOperatorSet:
    """Assemble the 2-D operators by walking the staggered stencils."""
    if spec.dim_mode is not DimMode.TEZ2D:
        raise ConfigError("assemble_tez needs a TEz2D spec")
    layouts = build_layouts(spec)
    n1, n2 = spec.n_cells
    s1, s2 = (1.0 / h for h in spec.h)
    e1, e2, h3 = (layouts.families[n] for n in ("E1", "E2", "H3"))
    b12, b21 = layouts.families["E12"], layouts.families["E21"]
    off_e2 = layouts.offsets["E2"]
    off_b21 = layouts.offsets["E21"]

    # A2d: rows over [E1; E2], columns over H3
    rows, cols, vals = [], [], []
    for i in range(n1):
        for j in range(1, n2):
            r = e1.flat_index((i, j))
            rows += [r, r]
            cols += [h3.flat_index((i, j)), h3.flat_index((i, j - 1))]
            vals += [s2, -s2]
    for i in range(1, n1):
        for j in range(n2):
            r = off_e2 + e2.flat_index((i, j))
            rows += [r, r]
            cols += [h3.flat_index((i, j)), h3.flat_index((i - 1, j))]
            vals += [-s1, s1]
    a2d = sp.csr_matrix((vals, (rows, cols)), shape=(layouts.n_e, layouts.n_h))

    # F2d and G2d: rows over H3, columns over [E1; E2] resp. [E12; E21]
    fr, fc, fv = [], [], []
    gr, gc, gv = [], [], []
    for i in range(n1):
        for j in range(n2):
            r = h3.flat_index((i, j))
            # + (E1 at j+1) - (E1 at j), scaled by 1/h2
            for jj, sgn in ((j + 1, s2), (j, -s2)):
                if 1 <= jj <= n2 - 1:
                    fr.append(r)
                    fc.append(e1.flat_index((i, jj)))
                    fv.append(sgn)
                else:
                    gr.append(r)
                    gc.append(b12.flat_index((jj, i)))
                    gv.append(sgn)
            # - (E2 at i+1) + (E2 at i), scaled by 1/h1
            for ii, sgn in ((i + 1, -s1), (i, s1)):
                if 1 <= ii <= n1 - 1:
                    fr.append(r)
                    fc.append(off_e2 + e2.flat_index((ii, j)))
                    fv.append(sgn)
                else:
                    gr.append(r)
                    gc.append(off_b21 + b21.flat_index((ii, j)))
                    gv.append(sgn)
    f2d = sp.csr_matrix((fv, (fr, fc)), shape=(layouts.n_h, layouts.n_e))
    g2d = sp.csr_matrix((gv, (gr, gc)), shape=(layouts.n_h, layouts.n_estar))

    # V2d: E divergence at interior integer nodes, i slowest then j
    vr, vc, vv = [], [], []
    row = 0
    for i in range(1, n1):
        for j in range(1, n2):
            vr += [row] * 4
            vc += [
                e1.flat_index((i, j)),
                e1.flat_index((i - 1, j)),
                off_e2 + e2.flat_index((i, j)),
                off_e2 + e2.flat_index((i, j - 1)),
            ]
            vv += [s1, -s1, s2, -s2]
            row += 1
    v2d = sp.csr_matrix((vv, (vr, vc)), shape=((n1 - 1) * (n2 - 1), layouts.n_e))

    if (f2d + a2d.T).count_nonzero() != 0:
        raise ShapeError("2-D adjoint identity F2d = -A2d^T violated")
    return TEzOperatorSet(spec, layouts, a2d, f2d, g2d, v2d)


def tez_initial_profiles():
    """Closures for the reference initial fields of the 2-D experiment."""
    two_pi = 2.0 * math.pi

    def e1(x1, x2):
        return 5.0 * np.sin(two_pi * x1) * np.cos(two_pi * x2)

    def e2(x1, x2):
        return -5.0 * np.cos(two_pi * x1) * np.sin(two_pi * x2)

    def h3(x1, x2):
        return 5.0 * np.sin(two_pi * x1) * np.sin(two_pi * x2)

    return {"E1": e1, "E2": e2, "H3": h3}


def tez_initial_fields(spec: GridSpec) -> np.ndarray:
    """Full initial state [E; H3; Estar]: the sinusoidal reference data.

    Interior samples and the boundary traces both come from the same
    analytic profiles, so the initial state has a consistent trace.
    """
    if spec.dim_mode is not DimMode.TEZ2D:
        raise ConfigError("the reference initial data is two dimensional")
    layouts = build_layouts(spec)
    profiles = tez_initial_profiles()
    phi0 = np.zeros(layouts.state_dim)
    for name in ("E1", "E2", "H3", "E12", "E21"):
        lay = layouts.families[name]
        xy = lay.coords(spec)
        phi0[layouts.state_slice(name)] = profiles[lay.component](xy[:, 0], xy[:, 1])
    return phi0


@dataclass(frozen=True)
class AxisSwapMaps:
    """Signed permutations realizing the x1 <-> x2 relabeling.

    For a vector v on the original grid, ``sign * v[perm]`` is the
    corresponding vector on the swapped grid (E1 and E2 exchanged, H3
    negated, boundary families exchanged).  ``swapped_spec`` is the grid
    with axes, corners, and cell counts interchanged.
    """

    swapped_spec: GridSpec
    state_perm: np.ndarray
    state_sign: np.ndarray
    f_perm: np.ndarray  # per-step noise control on E samples
    f_sign: np.ndarray
    g_perm: np.ndarray  # per-step noise control on H3 samples
    g_sign: np.ndarray
    estar_perm: np.ndarray
    estar_sign: np.ndarray

    def apply_state(self, v: np.ndarray) -> np.ndarray:
        return self.state_sign * v[..., self.state_perm]

    def apply_f(self, v: np.ndarray) -> np.ndarray:
        return self.f_sign * v[..., self.f_perm]

    def apply_g(self, v: np.ndarray) -> np.ndarray:
        return self.g_sign * v[..., self.g_perm]

    def apply_estar(self, v: np.ndarray) -> np.ndarray:
        return self.estar_sign * v[..., self.estar_perm]


_SWAP_SOURCES = {"E1": "E2", "E2": "E1", "H3": "H3", "E12": "E21", "E21": "E12"}
_SWAP_SIGNS = {"E1": 1.0, "E2": 1.0, "H3": -1.0, "E12": 1.0, "E21": 1.0}


def axis_swap_maps(spec: GridSpec) -> AxisSwapMaps:
    """Build the relabeling between a 2-D grid and its axis-swapped twin."""
    if spec.dim_mode is not DimMode.TEZ2D:
        raise ConfigError("axis swap maps are two dimensional")
    swapped = GridSpec(
        a=(spec.a[1], spec.a[0]),
        b=(spec.b[1], spec.b[0]),
        n_cells=(spec.n_cells[1], spec.n_cells[0]),
        t_final=spec.t_final,
        n_steps=spec.n_steps,
        dim_mode=DimMode.TEZ2D,
    )
    orig = build_layouts(spec)
    tilde = build_layouts(swapped)

    def family_map(tilde_name: str) -> tuple[np.ndarray, float]:
        src_name = _SWAP_SOURCES[tilde_name]
        t_lay = tilde.families[tilde_name]
        s_lay = orig.families[src_name]
        perm = np.empty(t_lay.flat_len, dtype=np.intp)
        for flat in range(t_lay.flat_len):
            i, j = t_lay.grid_labels_of(flat)
            perm[flat] = s_lay.grid_index((j, i))
        return perm, _SWAP_SIGNS[tilde_name]

    def group_map(t_names, base_of_src) -> tuple[np.ndarray, np.ndarray]:
        perms, signs = [], []
        for t_name in t_names:
            p, s = family_map(t_name)
            src = _SWAP_SOURCES[t_name]
            perms.append(p + base_of_src[src])
            signs.append(np.full(len(p), s))
        return np.concatenate(perms), np.concatenate(signs)

    e_base = {n: orig.offsets[n] for n in ("E1", "E2")}
    h_base = {"H3": 0}
    estar_base = {n: orig.offsets[n] for n in ("E12", "E21")}

    f_perm, f_sign = group_map(("E1", "E2"), e_base)
    g_perm, g_sign = group_map(("H3",), h_base)
    estar_perm, estar_sign = group_map(("E12", "E21"), estar_base)

    state_perm = np.concatenate(
        [f_perm, orig.n_e + g_perm, orig.n_e + orig.n_h + estar_perm]
    )
    state_sign = np.concatenate([f_sign, g_sign, estar_sign])
    return AxisSwapMaps(
        swapped, state_perm, state_sign, f_perm, f_sign, g_perm, g_sign,
        estar_perm, estar_sign,
    )
