"""Experiment orchestration: config parsing, the solve pipeline, and I/O.

One experiment runs grid -> operators -> scheme -> noise path ->
constraints -> solve -> replay -> metrics, and writes a run directory
with report.json, controls.csv, multipliers.csv, and optional field
snapshots.  Everything in the report is reproducible from (config, seed);
wall-clock timings are the only non-deterministic entries.
"""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .constraints import assemble_constraint_system
from .dynamics import (
    Trajectory,
    assemble_scheme,
    discrete_energy,
    replay,
    sample_path,
)
from .errors import ConfigError, IOErrorWithPath
from .grid import DimMode, GridSpec, LayoutSet, build_layouts, critical_time
from .lagrange import AblationMode, ControlSolution, solve_ablated, solve_min_norm
from .operators3d import assemble_operator_set
from .tez2d import assemble_tez, tez_initial_fields

log = logging.getLogger("maxctrl")

# published schema of the experiment config (all keys optional, defaults below)
CONFIG_SCHEMA = {
    "grid": {
        "a": "list of 2 or 3 floats, lower box corner (default [0, 0])",
        "b": "list of 2 or 3 floats, upper box corner (default [1, 1])",
        "n_cells": "list of 2 or 3 positive ints >= 2 (default [16, 16])",
        "t_final": "positive float, horizon in seconds (default 1.0)",
        "n_steps": "positive int, time steps (default 10)",
    },
    "mode": "'tez2d' or 'full3d' (default 'tez2d')",
    "seed": "unsigned 64-bit int for the noise path (default 42)",
    "ablation": "list of control families to drop, or [] for the full set",
    "ablation_strategy": "'withhold' (default) or 'reoptimize'",
    "initial": "'paper-tez', 'zero', or path to a family,index,value CSV",
    "target": "'zero' or path to a family,index,value CSV",
    "dense_cap": "max state dimension for the dense propagator (default 5000)",
    "ridge_epsilon": "relative ridge for singular reduced systems (default 1e-10)",
    "snapshot_times": "list of time indices in 0..n_steps to dump as CSV",
    "allow_singular": "bool: report instead of failing on rank deficiency",
    "frozen_path": "bool: all noise increments zero (degenerate test mode)",
    "output_dir": "run directory (default 'maxctrl-run')",
}


@dataclass
class ExperimentConfig:
    a: tuple = (0.0, 0.0)
    b: tuple = (1.0, 1.0)
    n_cells: tuple = (16, 16)
    t_final: float = 1.0
    n_steps: int = 10
    mode: str = "tez2d"
    seed: int = 42
    ablation: tuple = ()
    ablation_strategy: str = "withhold"
    initial: str = "paper-tez"
    target: str = "zero"
    dense_cap: int = 5000
    ridge_epsilon: float = 1e-10
    snapshot_times: tuple = ()
    allow_singular: bool = False
    frozen_path: bool = False
    output_dir: str = "maxctrl-run"

    def spec(self) -> GridSpec:
        try:
            dim_mode = DimMode(self.mode)
        except ValueError:
            raise ConfigError(f"mode must be 'tez2d' or 'full3d', got {self.mode!r}")
        return GridSpec(
            a=tuple(self.a),
            b=tuple(self.b),
            n_cells=tuple(self.n_cells),
            t_final=float(self.t_final),
            n_steps=int(self.n_steps),
            dim_mode=dim_mode,
        )

    def validate(self) -> None:
        spec = self.spec()
        if self.ablation_strategy not in ("withhold", "reoptimize"):
            raise ConfigError(
                f"ablation_strategy must be 'withhold' or 'reoptimize', "
                f"got {self.ablation_strategy!r}"
            )
        if not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigError(f"seed must be a nonnegative integer, got {self.seed!r}")
        for t in self.snapshot_times:
            if not 0 <= int(t) <= spec.n_steps:
                raise ConfigError(
                    f"snapshot time {t} outside 0..{spec.n_steps}"
                )
        for name, value in (("initial", self.initial), ("target", self.target)):
            if value in ("paper-tez", "zero"):
                if name == "initial" and value == "paper-tez" and spec.dim_mode is not DimMode.TEZ2D:
                    raise ConfigError("initial 'paper-tez' needs tez2d mode")
                continue
            if name == "target" and value == "zero":
                continue
            if not Path(value).exists():
                raise ConfigError(f"{name} file does not exist: {value}")
        if int(self.dense_cap) < 1 or float(self.ridge_epsilon) < 0:
            raise ConfigError("dense_cap must be >= 1 and ridge_epsilon >= 0")

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        known = {f for f in cls.__dataclass_fields__}
        kwargs = {}
        grid = data.get("grid", {})
        if not isinstance(grid, dict):
            raise ConfigError("'grid' must be an object")
        for key in ("a", "b", "n_cells", "t_final", "n_steps"):
            if key in grid:
                kwargs[key] = tuple(grid[key]) if isinstance(grid[key], list) else grid[key]
        for key, value in data.items():
            if key == "grid":
                continue
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
            if key in ("ablation", "snapshot_times", "a", "b", "n_cells"):
                value = tuple(value)
            kwargs[key] = value
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg

    @classmethod
    def from_json_file(cls, path) -> "ExperimentConfig":
        try:
            with open(path, "r", encoding="utf-8") as fh:
                data = json.load(fh)
        except OSError as e:
            raise IOErrorWithPath(f"cannot read config: {e}", path=str(path))
        except json.JSONDecodeError as e:
            raise ConfigError(f"config is not valid JSON ({path}): {e}")
        if not isinstance(data, dict):
            raise ConfigError("config root must be a JSON object")
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        d = asdict(self)
        grid = {k: d.pop(k) for k in ("a", "b", "n_cells", "t_final", "n_steps")}
        grid["a"], grid["b"], grid["n_cells"] = (
            list(grid["a"]), list(grid["b"]), list(grid["n_cells"]),
        )
        d["ablation"] = list(d["ablation"])
        d["snapshot_times"] = [int(t) for t in d["snapshot_times"]]
        return {"grid": grid, **d}


@dataclass
class EvaluationReport:
    """Everything the acceptance checks need, JSON round-trippable."""

    mse: dict
    residuals: dict
    objective: float
    schur_condition_estimate: float
    schur_rank: int | None
    regularized: bool
    feasible: bool
    defect: float
    divergence: dict
    energy_initial: float
    critical_time: dict
    label: str
    seed: int
    config: dict
    files: list
    timings: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "EvaluationReport":
        data = json.loads(text)
        return cls(**data)


def compute_mse(
    terminal: np.ndarray, target: np.ndarray, layouts: LayoutSet
) -> dict:
    """Per-component sums of squared nodal differences, boundary included."""
    out = {}
    for comp in layouts.components:
        s = 0.0
        for fam in layouts.component_members(comp):
            sl = layouts.state_slice(fam)
            d = terminal[sl] - target[sl]
            s += float(d @ d)
        out[comp] = s
    return out


# control-channel names used in controls.csv, derived from the family
_CHANNEL = {
    "E1": "f1", "E2": "f2", "E3": "f3",
    "H1": "g1", "H2": "g2", "H3": "g3",
}


def _control_channels(layouts: LayoutSet):
    """(csv family name, layout name, group) for every control block."""
    chans = []
    for name in layouts.e_names:
        chans.append((_CHANNEL[layouts.families[name].component], name, "f"))
    for name in layouts.h_names:
        chans.append((_CHANNEL[layouts.families[name].component], name, "g"))
    for name in layouts.gstar_names:
        chans.append((name.lower(), name, "gstar"))
    for name in layouts.estar_names:
        chans.append((name.lower(), name, "estar"))
    for name in layouts.r_names:
        chans.append((name.lower(), name, "r"))
    return chans


def _coord_label(xy: np.ndarray) -> str:
    return ";".join(f"{v:.17g}" for v in xy)


def write_controls_csv(path, sol: ControlSolution, layouts: LayoutSet) -> None:
    """controls.csv: step, family, node label (coordinates), value.

    Noise controls carry the step n they act on (over [t_n, t_{n+1}]);
    boundary unknowns carry the time index m = 1..N_t they belong to.
    """
    spec = layouts.spec
    nt = spec.n_steps
    group_vec = {
        "f": (sol.f_s, layouts.n_e),
        "g": (sol.g_s, layouts.n_h),
        "gstar": (sol.gstar_s, layouts.n_gstar),
        "estar": (sol.estar_s, layouts.n_estar),
        "r": (sol.rstar_s, layouts.n_r),
    }
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "family", "label", "value"])
        for chan, name, group in _control_channels(layouts):
            vec, width = group_vec[group]
            if width == 0:
                continue
            arr = np.asarray(vec).reshape(nt, width)
            lay = layouts.families[name]
            coords = lay.coords(spec)
            lo = layouts.offsets[name]
            for n in range(nt):
                step = n if group in ("f", "g", "gstar") else n + 1
                block = arr[n, lo : lo + lay.flat_len]
                for idx in range(lay.flat_len):
                    w.writerow(
                        [step, chan, _coord_label(coords[idx]), f"{block[idx]:.17g}"]
                    )


def read_controls_csv(path, layouts: LayoutSet):
    """Rebuild the stacked control vectors from a controls.csv file."""
    spec = layouts.spec
    nt = spec.n_steps
    vecs = {
        "f": np.zeros((nt, layouts.n_e)),
        "g": np.zeros((nt, layouts.n_h)),
        "gstar": np.zeros((nt, layouts.n_gstar)),
        "estar": np.zeros((nt, layouts.n_estar)),
        "r": np.zeros((nt, layouts.n_r)),
    }
    chan_of = {}
    for chan, name, group in _control_channels(layouts):
        chan_of[chan] = (name, group)
    counts = {}
    try:
        with open(path, "r", newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header != ["step", "family", "label", "value"]:
                raise ConfigError(f"unexpected controls header in {path}: {header}")
            for row in reader:
                step, chan, _, value = row
                if chan not in chan_of:
                    raise ConfigError(f"unknown control family {chan!r} in {path}")
                name, group = chan_of[chan]
                n = int(step) if group in ("f", "g", "gstar") else int(step) - 1
                if not 0 <= n < nt:
                    raise ConfigError(f"step {step} outside the time mesh in {path}")
                key = (chan, n)
                idx = counts.get(key, 0)
                lay = layouts.families[name]
                if idx >= lay.flat_len:
                    raise ConfigError(f"too many rows for {chan} step {step}")
                vecs[group][n, layouts.offsets[name] + idx] = float(value)
                counts[key] = idx + 1
    except OSError as e:
        raise IOErrorWithPath(f"cannot read controls: {e}", path=str(path))
    for chan, name, group in _control_channels(layouts):
        lay = layouts.families[chan_of[chan][0]]
        for n in range(nt):
            got = counts.get((chan, n), 0)
            if got != lay.flat_len:
                raise ConfigError(
                    f"controls file {path} has {got} rows for {chan} at step "
                    f"index {n}, expected {lay.flat_len}"
                )

    class Controls:
        f_s = vecs["f"].reshape(-1)
        g_s = vecs["g"].reshape(-1)
        gstar_s = vecs["gstar"].reshape(-1)
        estar_s = vecs["estar"].reshape(-1)
        rstar_s = vecs["r"].reshape(-1)

    return Controls()


def write_multipliers_csv(path, sol: ControlSolution) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["multiplier", "index", "value"])
        for name, vec in (
            ("lambda1", sol.lambda1),
            ("lambda2", sol.lambda2),
            ("lambda3", sol.lambda3),
        ):
            if vec is None:
                continue
            for i, v in enumerate(np.asarray(vec)):
                w.writerow([name, i, f"{v:.17g}"])


def load_state_csv(path, layouts: LayoutSet) -> np.ndarray:
    """Read a full state from a family,index,value CSV (missing rows are 0)."""
    phi = np.zeros(layouts.state_dim)
    names = set(
        layouts.e_names + layouts.h_names + layouts.estar_names + layouts.r_names
    )
    try:
        with open(path, "r", newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header != ["family", "index", "value"]:
                raise ConfigError(f"unexpected state header in {path}: {header}")
            for fam, idx, value in reader:
                if fam not in names:
                    raise ConfigError(f"unknown family {fam!r} in {path}")
                sl = layouts.state_slice(fam)
                i = int(idx)
                if not 0 <= i < sl.stop - sl.start:
                    raise ConfigError(f"index {i} out of range for {fam} in {path}")
                phi[sl.start + i] = float(value)
    except OSError as e:
        raise IOErrorWithPath(f"cannot read state file: {e}", path=str(path))
    return phi


def write_state_csv(path, phi: np.ndarray, layouts: LayoutSet) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["family", "index", "value"])
        for name in layouts.e_names + layouts.h_names + layouts.estar_names + layouts.r_names:
            sl = layouts.state_slice(name)
            for i, v in enumerate(phi[sl]):
                w.writerow([name, i, f"{v:.17g}"])


def export_snapshots(
    trajectory: Trajectory,
    layouts: LayoutSet,
    times,
    out_dir,
) -> list:
    """One CSV per requested time index per physical component.

    Columns are the physical coordinates followed by the sampled value,
    covering every sample of the component (interior and boundary).
    """
    spec = layouts.spec
    out_dir = Path(out_dir)
    written = []
    ndim = spec.ndim
    header = ["x1", "x2", "x3"][:ndim] + ["value"]
    for t in times:
        t = int(t)
        if not 0 <= t < trajectory.states.shape[0]:
            raise ConfigError(f"snapshot time index {t} outside trajectory")
        phi = trajectory.states[t]
        for comp in layouts.components:
            fname = out_dir / f"snapshot_t{t:04d}_{comp}.csv"
            with open(fname, "w", newline="", encoding="utf-8") as fh:
                w = csv.writer(fh)
                w.writerow(header)
                for fam in layouts.component_members(comp):
                    lay = layouts.families[fam]
                    coords = lay.coords(spec)
                    vals = phi[layouts.state_slice(fam)]
                    for row, v in zip(coords, vals):
                        w.writerow([f"{c:.17g}" for c in row] + [f"{v:.17g}"])
            written.append(str(fname))
    return written


def _initial_state(config: ExperimentConfig, spec: GridSpec, layouts: LayoutSet):
    if config.initial == "paper-tez":
        return tez_initial_fields(spec)
    if config.initial == "zero":
        return np.zeros(layouts.state_dim)
    return load_state_csv(config.initial, layouts)


def _target_state(config: ExperimentConfig, layouts: LayoutSet):
    if config.target == "zero":
        return np.zeros(layouts.state_dim)
    return load_state_csv(config.target, layouts)


def run_experiment(config: ExperimentConfig) -> EvaluationReport:
    """Full pipeline for one experiment; writes the run directory.

    Raises SchurSingular when the control system is rank deficient and
    ``allow_singular`` is off; ConfigError for invalid configuration.
    """
    config.validate()
    timings: dict[str, float] = {}
    t_start = time.perf_counter()

    spec = config.spec()
    layouts = build_layouts(spec)
    t_star = critical_time(spec)
    warned = spec.t_final < t_star
    if warned:
        log.warning(
            "horizon T=%.6g is below the guaranteed-controllability time "
            "T*=%.6g for this box; proceeding anyway",
            spec.t_final,
            t_star,
        )

    t0 = time.perf_counter()
    ops = assemble_tez(spec) if spec.dim_mode is DimMode.TEZ2D else assemble_operator_set(spec)
    scheme = assemble_scheme(ops, dense_cap=config.dense_cap)
    timings["assemble"] = time.perf_counter() - t0

    path = sample_path(config.seed, spec, frozen=config.frozen_path)
    phi0 = _initial_state(config, spec, layouts)
    phi_target = _target_state(config, layouts)

    t0 = time.perf_counter()
    system = assemble_constraint_system(ops, scheme, path, phi0, phi_target)
    timings["constraints"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    if config.ablation:
        mode = AblationMode.drop(config.ablation, layouts)
        sol = solve_ablated(
            system, mode, strategy=config.ablation_strategy,
            ridge_epsilon=config.ridge_epsilon,
        )
    else:
        sol = solve_min_norm(
            system,
            ridge_epsilon=config.ridge_epsilon,
            allow_singular=config.allow_singular,
        )
    timings["solve"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    traj = replay(scheme, phi0, sol, path)
    timings["replay"] = time.perf_counter() - t0

    mse = compute_mse(traj.terminal, phi_target, layouts)
    defect = float(np.abs(traj.terminal - phi_target).max())
    energy0 = discrete_energy(phi0, layouts)

    out_dir = Path(config.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    files = []
    try:
        controls_path = out_dir / "controls.csv"
        write_controls_csv(controls_path, sol, layouts)
        files.append(str(controls_path))
        mult_path = out_dir / "multipliers.csv"
        write_multipliers_csv(mult_path, sol)
        files.append(str(mult_path))
        terminal_path = out_dir / "terminal_state.csv"
        write_state_csv(terminal_path, traj.terminal, layouts)
        files.append(str(terminal_path))
        files += export_snapshots(traj, layouts, config.snapshot_times, out_dir)
    except OSError as e:
        raise IOErrorWithPath(f"cannot write run artifacts: {e}", path=str(out_dir))

    report = EvaluationReport(
        mse=mse,
        residuals=sol.residuals.as_dict(),
        objective=sol.objective_value,
        schur_condition_estimate=sol.schur_condition_estimate,
        schur_rank=sol.schur_rank,
        regularized=sol.regularized,
        feasible=sol.feasible,
        defect=defect,
        divergence={
            "max_div_e": float(traj.div_e_max.max()),
            "max_div_h_inner": float(traj.div_h_inner_max.max()),
            "per_step_div_e": [float(v) for v in traj.div_e_max],
        },
        energy_initial=energy0,
        critical_time={"t_star": t_star, "t": spec.t_final, "warned": warned},
        label=sol.label,
        seed=config.seed,
        config=config.to_dict(),
        files=files,
        timings={},
    )
    timings["total"] = time.perf_counter() - t_start
    report.timings = timings

    report_path = out_dir / "report.json"
    try:
        report_path.write_text(report.to_json() + "\n", encoding="utf-8")
    except OSError as e:
        raise IOErrorWithPath(f"cannot write report: {e}", path=str(report_path))
    report.files.append(str(report_path))
    return report


def replay_from_files(config: ExperimentConfig, controls_path) -> EvaluationReport:
    """Re-run the scheme with controls read back from a controls.csv."""
    config.validate()
    spec = config.spec()
    layouts = build_layouts(spec)
    ops = assemble_tez(spec) if spec.dim_mode is DimMode.TEZ2D else assemble_operator_set(spec)
    scheme = assemble_scheme(ops, dense_cap=config.dense_cap)
    path = sample_path(config.seed, spec, frozen=config.frozen_path)
    phi0 = _initial_state(config, spec, layouts)
    phi_target = _target_state(config, layouts)
    controls = read_controls_csv(controls_path, layouts)
    traj = replay(scheme, phi0, controls, path)
    mse = compute_mse(traj.terminal, phi_target, layouts)
    defect = float(np.abs(traj.terminal - phi_target).max())

    out_dir = Path(config.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    files = export_snapshots(traj, layouts, config.snapshot_times, out_dir)
    t_star = critical_time(spec)
    report = EvaluationReport(
        mse=mse,
        residuals={},
        objective=float("nan"),
        schur_condition_estimate=float("nan"),
        schur_rank=None,
        regularized=False,
        feasible=defect <= 1e-6,
        defect=defect,
        divergence={
            "max_div_e": float(traj.div_e_max.max()),
            "max_div_h_inner": float(traj.div_h_inner_max.max()),
            "per_step_div_e": [float(v) for v in traj.div_e_max],
        },
        energy_initial=discrete_energy(phi0, layouts),
        critical_time={
            "t_star": t_star,
            "t": spec.t_final,
            "warned": spec.t_final < t_star,
        },
        label="replay",
        seed=config.seed,
        config=config.to_dict(),
        files=files,
        timings={},
    )
    report_path = out_dir / "report.json"
    report_path.write_text(report.to_json() + "\n", encoding="utf-8")
    report.files.append(str(report_path))
    return report
