"""Sparse assembly of the staggered-grid difference operators (3-D).

All blocks are built from the displayed kron/stacking patterns; the 1/h_d
row scalings are folded into the stacked matrices at assembly time, so A,
F, G, V0, P0, Q0 can be applied without further scaling.  Unscaled
sub-blocks are kept for inspection and testing.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import ConfigError, ShapeError
from .grid import DimMode, GridSpec, LayoutSet, build_layouts

_DIFF_KINDS = ("D1", "D2", "D1p", "D3", "D4", "D5", "D6", "D3p", "D4p")


def _bidiag(n: int) -> sp.csr_matrix:
    """(n-1) x n forward-difference pattern: -1 on the diagonal, +1 above."""
    if n < 1:
        raise ShapeError(f"bidiagonal block needs n >= 1, got {n}")
    data = np.concatenate([-np.ones(n - 1), np.ones(n - 1)])
    rows = np.concatenate([np.arange(n - 1), np.arange(n - 1)])
    cols = np.concatenate([np.arange(n - 1), np.arange(1, n)])
    return sp.csr_matrix((data, (rows, cols)), shape=(n - 1, n))


def _eye(n: int) -> sp.csr_matrix:
    return sp.identity(n, format="csr")


def _stack_low_high(n_top: int, n_pad: int, sign: int) -> sp.csr_matrix:
    """[sign*I_top; 0] when sign < 0 placed on top, [0; I] when on the bottom."""
    top = -_eye(n_top) if sign < 0 else _eye(n_top)
    pad = sp.csr_matrix((n_pad, n_top))
    return sp.vstack([top, pad] if sign < 0 else [pad, top], format="csr")


def assemble_difference_block(kind: str, spec: GridSpec) -> sp.csr_matrix:
    """One of the primitive +-1 difference blocks, exactly as displayed.

    The blocks depend only on the cell counts N2 and N3 of the spec.
    """
    if spec.dim_mode is not DimMode.FULL3D:
        raise ConfigError("difference blocks are defined for the 3-D assembly")
    if kind not in _DIFF_KINDS:
        raise ConfigError(f"unknown difference block {kind!r}")
    _, n2, n3 = spec.n_cells
    if kind == "D1":
        return sp.kron(_bidiag(n2), _eye(n3 - 1), format="csr")
    if kind == "D2":
        return _bidiag(n3)
    if kind == "D1p":
        return sp.kron(_bidiag(n2), _eye(n3), format="csr")
    if kind == "D3":
        return _stack_low_high(n3, (n2 - 1) * n3, -1)
    if kind == "D4":
        return _stack_low_high(n3, (n2 - 1) * n3, +1)
    if kind == "D5":
        return _stack_low_high(1, n3 - 1, -1)
    if kind == "D6":
        return _stack_low_high(1, n3 - 1, +1)
    if kind == "D3p":
        return _stack_low_high(n3 - 1, (n2 - 1) * (n3 - 1), -1)
    return _stack_low_high(n3 - 1, (n2 - 1) * (n3 - 1), +1)  # D4p


@dataclass(frozen=True)
class OperatorSet:
    """All stacked 3-D operators plus their named sub-blocks.

    A  : interior curl acting on H           (N_E x N_H)
    F  : interior curl acting on E, F = -A^T (N_H x N_E)
    G  : boundary-E coupling into H          (N_H x N_*)
    V0 : E-divergence at interior nodes      (n_div_e x N_E)
    P0 : H-divergence, interior part         (n_div_h x N_H)
    Q0 : H-divergence, boundary part         (n_div_h x N_gstar)
    """

    spec: GridSpec
    layouts: LayoutSet
    A: sp.csr_matrix
    F: sp.csr_matrix
    G: sp.csr_matrix
    V0: sp.csr_matrix
    P0: sp.csr_matrix
    Q0: sp.csr_matrix
    sub_blocks: dict[str, sp.csr_matrix] = field(repr=False, default_factory=dict)

    @property
    def n_div_e(self) -> int:
        return self.V0.shape[0]

    @property
    def n_div_h(self) -> int:
        return self.P0.shape[0]

    def inner_cell_mask(self) -> np.ndarray:
        """Cells whose H-divergence stencil touches only evolved H samples."""
        n1, n2, n3 = self.spec.n_cells
        m = np.zeros((n1, n2, n3), dtype=bool)
        m[1 : n1 - 1, 1 : n2 - 1, 1 : n3 - 1] = True
        return m.reshape(-1)


def _curl_sub_blocks(spec: GridSpec) -> dict[str, sp.csr_matrix]:
    n1, n2, n3 = spec.n_cells
    d = {k: assemble_difference_block(k, spec) for k in _DIFF_KINDS}
    blocks = {}
    blocks["A1"] = sp.kron(_eye(n1), d["D1"], format="csr")
    blocks["A2"] = sp.kron(_eye(n1 * (n2 - 1)), d["D2"], format="csr")
    blocks["A3"] = sp.kron(_eye((n1 - 1) * n2), d["D2"], format="csr")
    blocks["A4"] = sp.kron(_bidiag(n1), _eye(n2 * (n3 - 1)), format="csr")
    blocks["A5"] = sp.kron(_bidiag(n1), _eye((n2 - 1) * n3), format="csr")
    blocks["A6"] = sp.kron(_eye(n1 - 1), d["D1p"], format="csr")
    # adjoint pairing of the interior curls
    for fi, ai in (("F1", "A6"), ("F2", "A3"), ("F3", "A2"),
                   ("F4", "A5"), ("F5", "A4"), ("F6", "A1")):
        blocks[fi] = (-blocks[ai].T).tocsr()
    blocks["G11"] = sp.kron(_eye(n1 - 1), d["D3"], format="csr")
    blocks["G12"] = sp.kron(_eye(n1 - 1), d["D4"], format="csr")
    blocks["G21"] = sp.kron(_eye((n1 - 1) * n2), d["D5"], format="csr")
    blocks["G22"] = sp.kron(_eye((n1 - 1) * n2), d["D6"], format="csr")
    blocks["G31"] = sp.kron(_eye(n1 * (n2 - 1)), d["D5"], format="csr")
    blocks["G32"] = sp.kron(_eye(n1 * (n2 - 1)), d["D6"], format="csr")
    blocks["G41"] = _stack_low_high((n2 - 1) * n3, (n1 - 1) * (n2 - 1) * n3, -1)
    blocks["G42"] = _stack_low_high((n2 - 1) * n3, (n1 - 1) * (n2 - 1) * n3, +1)
    blocks["G51"] = _stack_low_high(n2 * (n3 - 1), (n1 - 1) * n2 * (n3 - 1), -1)
    blocks["G52"] = _stack_low_high(n2 * (n3 - 1), (n1 - 1) * n2 * (n3 - 1), +1)
    blocks["G61"] = sp.kron(_eye(n1), d["D3p"], format="csr")
    blocks["G62"] = sp.kron(_eye(n1), d["D4p"], format="csr")
    for i in range(1, 7):
        blocks[f"G{i}"] = sp.hstack(
            [blocks[f"G{i}1"], blocks[f"G{i}2"]], format="csr"
        )
    blocks.update(d)
    return blocks


def _div_sub_blocks(spec: GridSpec) -> dict[str, sp.csr_matrix]:
    n1, n2, n3 = spec.n_cells
    d = {k: assemble_difference_block(k, spec) for k in ("D1", "D2", "D1p", "D3", "D4", "D5", "D6")}
    blocks = {}
    blocks["V1"] = sp.kron(_bidiag(n1), _eye((n2 - 1) * (n3 - 1)), format="csr")
    blocks["V2"] = sp.kron(_eye(n1 - 1), d["D1"], format="csr")
    blocks["V3"] = sp.kron(_eye((n1 - 1) * (n2 - 1)), d["D2"], format="csr")
    blocks["P1"] = sp.kron((-_bidiag(n1).T).tocsr(), _eye(n2 * n3), format="csr")
    blocks["P2"] = sp.kron(_eye(n1), (-d["D1p"].T).tocsr(), format="csr")
    blocks["P3"] = sp.kron(_eye(n1 * n2), (-d["D2"].T).tocsr(), format="csr")
    blocks["Q11"] = _stack_low_high(n2 * n3, (n1 - 1) * n2 * n3, -1)
    blocks["Q12"] = _stack_low_high(n2 * n3, (n1 - 1) * n2 * n3, +1)
    blocks["Q21"] = sp.kron(_eye(n1), d["D3"], format="csr")
    blocks["Q22"] = sp.kron(_eye(n1), d["D4"], format="csr")
    blocks["Q31"] = sp.kron(_eye(n1 * n2), d["D5"], format="csr")
    blocks["Q32"] = sp.kron(_eye(n1 * n2), d["D6"], format="csr")
    for i in (1, 2, 3):
        blocks[f"Q{i}"] = sp.hstack(
            [blocks[f"Q{i}1"], blocks[f"Q{i}2"]], format="csr"
        )
    return blocks


def assemble_divergence_blocks(spec: GridSpec):
    """Stacked divergence operators (V0, P0, Q0) with 1/h_d scalings folded."""
    if spec.dim_mode is not DimMode.FULL3D:
        raise ConfigError("3-D divergence blocks need a Full3D spec")
    s1, s2, s3 = (1.0 / h for h in spec.h)
    b = _div_sub_blocks(spec)
    v0 = sp.hstack([s1 * b["V1"], s2 * b["V2"], s3 * b["V3"]], format="csr")
    p0 = sp.hstack([s1 * b["P1"], s2 * b["P2"], s3 * b["P3"]], format="csr")
    q0 = sp.hstack([s1 * b["Q1"], s2 * b["Q2"], s3 * b["Q3"]], format="csr")
    return v0, p0, q0


def assemble_operator_set(spec: GridSpec) -> OperatorSet:
    """Assemble every stacked 3-D operator and self-check the bookkeeping."""
    if spec.dim_mode is not DimMode.FULL3D:
        raise ConfigError("assemble_operator_set needs a Full3D spec")
    layouts = build_layouts(spec)
    n1, n2, n3 = spec.n_cells
    s1, s2, s3 = (1.0 / h for h in spec.h)
    b = _curl_sub_blocks(spec)

    A = sp.bmat(
        [
            [None, -s3 * b["A2"], s2 * b["A1"]],
            [s3 * b["A3"], None, -s1 * b["A4"]],
            [-s2 * b["A6"], s1 * b["A5"], None],
        ],
        format="csr",
    )
    F = sp.bmat(
        [
            [None, s3 * b["F2"], -s2 * b["F1"]],
            [-s3 * b["F3"], None, s1 * b["F4"]],
            [s2 * b["F6"], -s1 * b["F5"], None],
        ],
        format="csr",
    )
    # Estar column order: E12, E13, E21, E23, E31, E32
    G = sp.bmat(
        [
            [None, None, None, s3 * b["G2"], None, -s2 * b["G1"]],
            [None, -s3 * b["G3"], None, None, s1 * b["G4"], None],
            [s2 * b["G6"], None, -s1 * b["G5"], None, None, None],
        ],
        format="csr",
    )
    v0, p0, q0 = assemble_divergence_blocks(spec)
    b.update(_div_sub_blocks(spec))

    checks = [
        (A.shape, (layouts.n_e, layouts.n_h), "A"),
        (F.shape, (layouts.n_h, layouts.n_e), "F"),
        (G.shape, (layouts.n_h, layouts.n_estar), "G"),
        (v0.shape, ((n1 - 1) * (n2 - 1) * (n3 - 1), layouts.n_e), "V0"),
        (p0.shape, (n1 * n2 * n3, layouts.n_h), "P0"),
        (q0.shape, (n1 * n2 * n3, layouts.n_gstar), "Q0"),
    ]
    for got, want, name in checks:
        if got != want:
            raise ShapeError(f"{name} assembled as {got}, count formulas give {want}")
    if (F + A.T).count_nonzero() != 0:
        raise ShapeError("stacked adjoint identity F = -A^T violated")

    return OperatorSet(spec, layouts, A, F, G, v0, p0, q0, b)


def dump_block_csv(ops: OperatorSet, name: str, path) -> None:
    """Write one named sub-block (or stacked operator) as a dense CSV."""
    mats = dict(ops.sub_blocks)
    mats.update({"A": ops.A, "F": ops.F, "G": ops.G,
                 "V0": ops.V0, "P0": ops.P0, "Q0": ops.Q0})
    if name not in mats:
        raise KeyError(f"no block named {name!r}")
    dense = np.asarray(mats[name].todense())
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# block {name}, shape {dense.shape[0]}x{dense.shape[1]}, row-major\n")
        for row in dense:
            fh.write(",".join(f"{v:.17g}" for v in row) + "\n")
