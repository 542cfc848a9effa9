"""Space-time mesh, staggered field layouts, and flattening conventions.

Every vector in the solver is a concatenation of per-family flat vectors.
A family is one staggered sample set (an interior field component, a
boundary trace family, or a leftover boundary family), and its flattening
always iterates the last running index fastest (k, then j, then i), with
face selectors slowest and the low face before the high face.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterator, Sequence

import numpy as np

from .errors import ConfigError, DimensionMismatch

AXIS_NAMES = ("i", "j", "k")


class DimMode(Enum):
    FULL3D = "full3d"
    TEZ2D = "tez2d"


@dataclass(frozen=True)
class GridSpec:
    """Uniform box mesh with a fixed number of time steps.

    Parameters
    ----------
    a, b : sequence of float
        Lower and upper corners of the box, in meters.  Length 3 in
        ``FULL3D`` mode; length 2 (or 3 with the third entry ignored)
        in ``TEZ2D`` mode.
    n_cells : sequence of int
        Cells per axis (N1, N2, N3).  Each active axis needs at least 2
        cells, otherwise the interior index sets are empty.
    t_final : float
        Time horizon T in seconds.
    n_steps : int
        Number of time steps N_t; the step size is T / N_t.
    dim_mode : DimMode
        Full 3-D system or the two-dimensional transverse-electric mode.
    """

    a: tuple[float, ...]
    b: tuple[float, ...]
    n_cells: tuple[int, ...]
    t_final: float
    n_steps: int
    dim_mode: DimMode = DimMode.FULL3D

    def __post_init__(self):
        ndim = self.ndim
        a = tuple(float(x) for x in self.a)[:3]
        b = tuple(float(x) for x in self.b)[:3]
        n = tuple(int(x) for x in self.n_cells)[:3]
        if len(a) < ndim or len(b) < ndim or len(n) < ndim:
            raise ConfigError(
                f"need {ndim} entries in a, b, n_cells for {self.dim_mode.value}"
            )
        object.__setattr__(self, "a", a[:ndim])
        object.__setattr__(self, "b", b[:ndim])
        object.__setattr__(self, "n_cells", n[:ndim])
        for d in range(ndim):
            if not self.b[d] > self.a[d]:
                raise ConfigError(f"b[{d}]={self.b[d]} must exceed a[{d}]={self.a[d]}")
            if self.n_cells[d] < 2:
                raise ConfigError(
                    f"n_cells[{d}]={self.n_cells[d]} < 2: interior index sets are empty"
                )
        if not self.t_final > 0:
            raise ConfigError(f"t_final={self.t_final} must be positive")
        if self.n_steps < 1:
            raise ConfigError(f"n_steps={self.n_steps} must be a positive integer")

    @property
    def ndim(self) -> int:
        return 2 if self.dim_mode is DimMode.TEZ2D else 3

    @property
    def h(self) -> tuple[float, ...]:
        return tuple(
            (self.b[d] - self.a[d]) / self.n_cells[d] for d in range(self.ndim)
        )

    @property
    def dt(self) -> float:
        return self.t_final / self.n_steps

    def corners(self) -> np.ndarray:
        """All 2**ndim box corners, one per row."""
        ndim = self.ndim
        out = np.empty((2**ndim, ndim))
        for m in range(2**ndim):
            for d in range(ndim):
                out[m, d] = self.b[d] if (m >> d) & 1 else self.a[d]
        return out


@dataclass(frozen=True)
class Axis:
    """One iteration axis of a family: which grid axis, which labels, half offset.

    ``labels`` holds the integer part of the node label; a half axis at
    label i sits at physical coordinate a + (i + 1/2) h.
    """

    name: str
    labels: tuple[int, ...]
    half: bool

    def __len__(self) -> int:
        return len(self.labels)

    def position(self, label: int) -> int:
        if self.labels and self.labels[0] <= label <= self.labels[-1]:
            p = label - self.labels[0]
            if len(self.labels) == self.labels[-1] - self.labels[0] + 1:
                return p  # contiguous range
        try:
            return self.labels.index(label)
        except ValueError:
            raise IndexError(
                f"label {label} outside axis {self.name} range {self.labels}"
            ) from None


def _run(name: str, lo: int, hi: int, half: bool) -> Axis:
    return Axis(name, tuple(range(lo, hi + 1)), half)


def _faces(name: str, n: int) -> Axis:
    return Axis(name, (0, n), False)


@dataclass(frozen=True)
class ComponentLayout:
    """Index bookkeeping for one sample family.

    ``axes`` are listed slowest first; the flat index is the C-order
    ravel of the per-axis positions, so the last axis varies fastest.
    """

    name: str
    component: str  # physical field this family samples: E1..E3, H1..H3
    axes: tuple[Axis, ...]

    @property
    def flat_len(self) -> int:
        n = 1
        for ax in self.axes:
            n *= len(ax)
        return n

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(len(ax) for ax in self.axes)

    def flat_index(self, labels: Sequence[int]) -> int:
        """Flat position of a sample given its axis labels, in axes order."""
        if len(labels) != len(self.axes):
            raise IndexError(
                f"{self.name}: expected {len(self.axes)} labels, got {len(labels)}"
            )
        flat = 0
        for ax, lab in zip(self.axes, labels):
            flat = flat * len(ax) + ax.position(int(lab))
        return flat

    def labels_of(self, flat: int) -> tuple[int, ...]:
        """Inverse of :meth:`flat_index`."""
        if not 0 <= flat < self.flat_len:
            raise IndexError(f"{self.name}: flat index {flat} out of range")
        pos = []
        for ax in reversed(self.axes):
            pos.append(ax.labels[flat % len(ax)])
            flat //= len(ax)
        return tuple(reversed(pos))

    def grid_index(self, labels: Sequence[int]) -> int:
        """Flat position from labels given in grid-axis order (i, j[, k])."""
        return self.flat_index(self._to_axis_order(labels))

    def _to_axis_order(self, labels: Sequence[int]) -> tuple[int, ...]:
        by_name = {}
        for name, lab in zip(AXIS_NAMES, labels):
            by_name[name] = lab
        try:
            return tuple(by_name[ax.name] for ax in self.axes)
        except KeyError as e:
            raise IndexError(f"{self.name}: missing label for axis {e}") from None

    def grid_labels_of(self, flat: int) -> tuple[int, ...]:
        """Labels of a flat position, reordered to grid-axis order (i, j[, k])."""
        lab = dict(zip((ax.name for ax in self.axes), self.labels_of(flat)))
        return tuple(lab[n] for n in AXIS_NAMES if n in lab)

    def iter_labels(self) -> Iterator[tuple[int, ...]]:
        """All label tuples in flat order (axes order)."""
        for flat in range(self.flat_len):
            yield self.labels_of(flat)

    def coords(self, spec: GridSpec) -> np.ndarray:
        """Physical coordinates of every sample, shape (flat_len, ndim).

        Columns follow grid-axis order x1, x2[, x3] regardless of the
        iteration order of the axes.
        """
        ndim = spec.ndim
        h = spec.h
        out = np.empty((self.flat_len, ndim))
        col = {name: d for d, name in enumerate(AXIS_NAMES[:ndim])}
        # per-axis coordinate values
        vals = []
        for ax in self.axes:
            off = 0.5 if ax.half else 0.0
            d = col[ax.name]
            vals.append(spec.a[d] + (np.asarray(ax.labels, dtype=float) + off) * h[d])
        grids = np.meshgrid(*vals, indexing="ij")
        for ax, g in zip(self.axes, grids):
            out[:, col[ax.name]] = g.reshape(-1)
        return out


def yee_index(layout: ComponentLayout, multi_index: Sequence[int]) -> int:
    """Flat index of a sample from its grid-order integer labels.

    Raises IndexError when the label tuple falls outside the layout.
    """
    return layout.grid_index(multi_index)


def yee_multi_index(layout: ComponentLayout, flat: int) -> tuple[int, ...]:
    """Inverse of :func:`yee_index` (grid-axis label order)."""
    return layout.grid_labels_of(flat)


# family membership of the state vector groups, in concatenation order
E_GROUP_3D = ("E1", "E2", "E3")
H_GROUP_3D = ("H1", "H2", "H3")
ESTAR_GROUP_3D = ("E12", "E13", "E21", "E23", "E31", "E32")
GSTAR_GROUP_3D = ("G11b", "G22b", "G33b")
R_GROUP_3D = ("R_E1", "R_E2", "R_E3", "R_H1", "R_H2", "R_H3")

E_GROUP_2D = ("E1", "E2")
H_GROUP_2D = ("H3",)
ESTAR_GROUP_2D = ("E12", "E21")


@dataclass(frozen=True)
class LayoutSet:
    """All family layouts for one grid spec, plus group/offset bookkeeping."""

    spec: GridSpec
    families: dict[str, ComponentLayout]
    e_names: tuple[str, ...]
    h_names: tuple[str, ...]
    estar_names: tuple[str, ...]
    gstar_names: tuple[str, ...]
    r_names: tuple[str, ...]
    offsets: dict[str, int] = field(default_factory=dict)  # within-group offsets

    def __post_init__(self):
        off = {}
        for group in (
            self.e_names,
            self.h_names,
            self.estar_names,
            self.gstar_names,
            self.r_names,
        ):
            pos = 0
            for name in group:
                off[name] = pos
                pos += self.families[name].flat_len
        object.__setattr__(self, "offsets", off)

    def _group_len(self, names: tuple[str, ...]) -> int:
        return sum(self.families[n].flat_len for n in names)

    @property
    def n_e(self) -> int:
        return self._group_len(self.e_names)

    @property
    def n_h(self) -> int:
        return self._group_len(self.h_names)

    @property
    def n_estar(self) -> int:
        return self._group_len(self.estar_names)

    @property
    def n_gstar(self) -> int:
        return self._group_len(self.gstar_names)

    @property
    def n_r(self) -> int:
        return self._group_len(self.r_names)

    @property
    def state_dim(self) -> int:
        return self.n_e + self.n_h + self.n_estar + self.n_r

    # slices of the stacked state [E; H; Estar; R]
    @property
    def e_slice(self) -> slice:
        return slice(0, self.n_e)

    @property
    def h_slice(self) -> slice:
        return slice(self.n_e, self.n_e + self.n_h)

    @property
    def estar_slice(self) -> slice:
        base = self.n_e + self.n_h
        return slice(base, base + self.n_estar)

    @property
    def r_slice(self) -> slice:
        base = self.n_e + self.n_h + self.n_estar
        return slice(base, base + self.n_r)

    def group_of(self, name: str) -> str:
        if name in self.e_names:
            return "E"
        if name in self.h_names:
            return "H"
        if name in self.estar_names:
            return "Estar"
        if name in self.gstar_names:
            return "gstar"
        if name in self.r_names:
            return "R"
        raise KeyError(name)

    def state_slice(self, name: str) -> slice:
        """Slice of family ``name`` inside the stacked state vector."""
        group = self.group_of(name)
        base = {
            "E": 0,
            "H": self.n_e,
            "Estar": self.n_e + self.n_h,
            "R": self.n_e + self.n_h + self.n_estar,
        }
        if group == "gstar":
            raise KeyError(f"{name} is not part of the state vector")
        lo = base[group] + self.offsets[name]
        return slice(lo, lo + self.families[name].flat_len)

    def group_slice_within(self, name: str) -> slice:
        """Slice of family ``name`` inside its own group vector."""
        lo = self.offsets[name]
        return slice(lo, lo + self.families[name].flat_len)

    def split_state(self, phi: np.ndarray) -> dict[str, np.ndarray]:
        if phi.shape[-1] != self.state_dim:
            raise DimensionMismatch(
                f"state vector of length {phi.shape[-1]}, expected {self.state_dim}"
            )
        out = {}
        for name in self.e_names + self.h_names + self.estar_names + self.r_names:
            out[name] = phi[..., self.state_slice(name)]
        return out

    def component_members(self, component: str) -> tuple[str, ...]:
        """All families sampling a given physical component, state order."""
        return tuple(
            n
            for n in self.e_names + self.h_names + self.estar_names + self.r_names
            if self.families[n].component == component
        )

    @property
    def components(self) -> tuple[str, ...]:
        seen = []
        for n in self.e_names + self.h_names:
            c = self.families[n].component
            if c not in seen:
                seen.append(c)
        return tuple(seen)


def _layouts_3d(spec: GridSpec) -> dict[str, ComponentLayout]:
    n1, n2, n3 = spec.n_cells
    L = ComponentLayout
    fams = {
        # interior field components; ranges as dictated by the staggering
        "E1": L("E1", "E1", (_run("i", 0, n1 - 1, True), _run("j", 1, n2 - 1, False), _run("k", 1, n3 - 1, False))),
        "E2": L("E2", "E2", (_run("i", 1, n1 - 1, False), _run("j", 0, n2 - 1, True), _run("k", 1, n3 - 1, False))),
        "E3": L("E3", "E3", (_run("i", 1, n1 - 1, False), _run("j", 1, n2 - 1, False), _run("k", 0, n3 - 1, True))),
        "H1": L("H1", "H1", (_run("i", 1, n1 - 1, False), _run("j", 0, n2 - 1, True), _run("k", 0, n3 - 1, True))),
        "H2": L("H2", "H2", (_run("i", 0, n1 - 1, True), _run("j", 1, n2 - 1, False), _run("k", 0, n3 - 1, True))),
        "H3": L("H3", "H3", (_run("i", 0, n1 - 1, True), _run("j", 0, n2 - 1, True), _run("k", 1, n3 - 1, False))),
        # tangential-E boundary traces; face axis slowest, low face first
        "E12": L("E12", "E1", (_faces("j", n2), _run("i", 0, n1 - 1, True), _run("k", 1, n3 - 1, False))),
        "E13": L("E13", "E1", (_faces("k", n3), _run("i", 0, n1 - 1, True), _run("j", 1, n2 - 1, False))),
        "E21": L("E21", "E2", (_faces("i", n1), _run("j", 0, n2 - 1, True), _run("k", 1, n3 - 1, False))),
        "E23": L("E23", "E2", (_faces("k", n3), _run("i", 1, n1 - 1, False), _run("j", 0, n2 - 1, True))),
        "E31": L("E31", "E3", (_faces("i", n1), _run("j", 1, n2 - 1, False), _run("k", 0, n3 - 1, True))),
        "E32": L("E32", "E3", (_faces("j", n2), _run("i", 1, n1 - 1, False), _run("k", 0, n3 - 1, True))),
        # boundary samples of the magnetic noise control, for the divergence constraint
        "G11b": L("G11b", "H1", (_faces("i", n1), _run("j", 0, n2 - 1, True), _run("k", 0, n3 - 1, True))),
        "G22b": L("G22b", "H2", (_faces("j", n2), _run("i", 0, n1 - 1, True), _run("k", 0, n3 - 1, True))),
        "G33b": L("G33b", "H3", (_faces("k", n3), _run("i", 0, n1 - 1, True), _run("j", 0, n2 - 1, True))),
        # leftover boundary samples: tangential-E edge values and normal-H faces
        "R_E1": L("R_E1", "E1", (_faces("j", n2), _faces("k", n3), _run("i", 0, n1 - 1, True))),
        "R_E2": L("R_E2", "E2", (_faces("i", n1), _faces("k", n3), _run("j", 0, n2 - 1, True))),
        "R_E3": L("R_E3", "E3", (_faces("i", n1), _faces("j", n2), _run("k", 0, n3 - 1, True))),
        "R_H1": L("R_H1", "H1", (_faces("i", n1), _run("j", 0, n2 - 1, True), _run("k", 0, n3 - 1, True))),
        "R_H2": L("R_H2", "H2", (_faces("j", n2), _run("i", 0, n1 - 1, True), _run("k", 0, n3 - 1, True))),
        "R_H3": L("R_H3", "H3", (_faces("k", n3), _run("i", 0, n1 - 1, True), _run("j", 0, n2 - 1, True))),
    }
    return fams


def _layouts_2d(spec: GridSpec) -> dict[str, ComponentLayout]:
    n1, n2 = spec.n_cells
    L = ComponentLayout
    return {
        "E1": L("E1", "E1", (_run("i", 0, n1 - 1, True), _run("j", 1, n2 - 1, False))),
        "E2": L("E2", "E2", (_run("i", 1, n1 - 1, False), _run("j", 0, n2 - 1, True))),
        "H3": L("H3", "H3", (_run("i", 0, n1 - 1, True), _run("j", 0, n2 - 1, True))),
        "E12": L("E12", "E1", (_faces("j", n2), _run("i", 0, n1 - 1, True))),
        "E21": L("E21", "E2", (_faces("i", n1), _run("j", 0, n2 - 1, True))),
    }


def build_layouts(spec: GridSpec) -> LayoutSet:
    """Build every family layout for the spec and check the count formulas."""
    if spec.dim_mode is DimMode.TEZ2D:
        fams = _layouts_2d(spec)
        ls = LayoutSet(
            spec, fams, E_GROUP_2D, H_GROUP_2D, ESTAR_GROUP_2D, (), ()
        )
        n1, n2 = spec.n_cells
        expect_ne = n1 * (n2 - 1) + (n1 - 1) * n2
        expect_nstar = 2 * n1 + 2 * n2
        if ls.n_e != expect_ne or ls.n_h != n1 * n2 or ls.n_estar != expect_nstar:
            raise ConfigError("2-D layout counts disagree with the closed formulas")
        return ls

    fams = _layouts_3d(spec)
    ls = LayoutSet(
        spec, fams, E_GROUP_3D, H_GROUP_3D, ESTAR_GROUP_3D, GSTAR_GROUP_3D, R_GROUP_3D
    )
    n1, n2, n3 = spec.n_cells
    expect_ne = (
        n1 * (n2 - 1) * (n3 - 1) + (n1 - 1) * n2 * (n3 - 1) + (n1 - 1) * (n2 - 1) * n3
    )
    expect_nh = (
        (n1 - 1) * n2 * n3 + n1 * (n2 - 1) * n3 + n1 * n2 * (n3 - 1)
    )
    expect_nstar = (
        2 * n1 * (n2 + n3 - 2) + 2 * n2 * (n1 + n3 - 2) + 2 * n3 * (n1 + n2 - 2)
    )
    if ls.n_e != expect_ne or ls.n_h != expect_nh or ls.n_estar != expect_nstar:
        raise ConfigError("3-D layout counts disagree with the closed formulas")
    return ls


def critical_time_from_box(a: Sequence[float], b: Sequence[float]) -> float:
    """Control-time threshold 18(2 M^2 + 1), M = largest corner distance to 0."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    m_sq = 0.0
    for mask in range(2 ** len(a)):
        corner = np.where([(mask >> d) & 1 for d in range(len(a))], b, a)
        m_sq = max(m_sq, float(corner @ corner))
    return 18.0 * (2.0 * m_sq + 1.0)


def critical_time(spec: GridSpec) -> float:
    """Threshold time below which exact controllability is not guaranteed.

    Used only to emit an advisory when the configured horizon is shorter.
    """
    return critical_time_from_box(spec.a, spec.b)
