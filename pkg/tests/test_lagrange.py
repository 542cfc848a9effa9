import numpy as np
import pytest
import scipy.linalg as sla

from maxctrl import (
    AblationMode,
    ConfigError,
    SchurSingular,
    assemble_constraint_system,
    assemble_operator_set,
    assemble_scheme,
    assemble_tez,
    axis_swap_maps,
    build_layouts,
    oracle_min_norm,
    replay,
    sample_path,
    solve_ablated,
    solve_min_norm,
    tez_initial_fields,
)
from maxctrl.errors import CapExceeded

from conftest import spec2d, spec3d


def _pipeline(spec, seed=42, frozen=False, phi0=None, target=None):
    ops = assemble_tez(spec) if spec.dim_mode.value == "tez2d" else assemble_operator_set(spec)
    scheme = assemble_scheme(ops)
    path = sample_path(seed, spec, frozen=frozen)
    if phi0 is None:
        phi0 = tez_initial_fields(spec) if spec.dim_mode.value == "tez2d" else np.zeros(scheme.state_dim)
    if target is None:
        target = np.zeros(scheme.state_dim)
    system = assemble_constraint_system(ops, scheme, path, phi0, target)
    return ops, scheme, path, system


UNKNOWNS = ("f_s", "g_s", "gstar_s", "estar_s", "rstar_s")


def _rel(a, b):
    if len(b) == 0:
        return 0.0
    return float(np.abs(a - b).max() / (1.0 + np.abs(b).max()))


def test_zero_data_gives_zero_controls():
    # zero initial data and zero target: homogeneous problem
    spec = spec2d((3, 3), n_steps=2)
    _, _, _, system = _pipeline(spec)
    system.xi[:] = 0.0
    system.phi0[:] = 0.0
    system.e_star_0[:] = 0.0
    sol = solve_min_norm(system)
    assert sol.objective_value == 0.0
    for name in UNKNOWNS:
        assert np.abs(getattr(sol, name)).max() == 0.0 if len(getattr(sol, name)) else True
    assert np.abs(sol.lambda3).max() == 0.0


@pytest.mark.parametrize("n,nt", [((3, 3), 2), ((4, 4), 3)])
def test_cross_validation_against_kkt_oracle(n, nt):
    spec = spec2d(n, n_steps=nt)
    _, _, _, system = _pipeline(spec)
    sol = solve_min_norm(system)
    ora = oracle_min_norm(system)
    for name in UNKNOWNS:
        assert _rel(getattr(sol, name), getattr(ora, name)) <= 1e-8, name
    assert abs(sol.objective_value - ora.objective_value) <= 1e-8 * ora.objective_value


def test_cross_validation_3d():
    # consistent right-hand side: image of a divergence-feasible candidate
    spec = spec3d((2, 2, 2), n_steps=2)
    rng = np.random.default_rng(3)
    ops, scheme, path, system = _pipeline(spec)
    lay = ops.layouts
    f = np.concatenate([ops.A @ rng.standard_normal(lay.n_h) for _ in range(2)])
    es = rng.standard_normal(2 * lay.n_estar)
    rs = rng.standard_normal(2 * lay.n_r)
    system.xi = system.S_f @ f + system.S1 @ es + system.S_r @ rs
    sol = solve_min_norm(system, allow_singular=True)
    ora = oracle_min_norm(system)
    assert sol.residuals.terminal_rel <= 1e-9
    for name in UNKNOWNS:
        assert _rel(getattr(sol, name), getattr(ora, name)) <= 1e-8, name


def test_consistent_random_rhs_equal_objectives():
    spec = spec2d((3, 3), n_steps=2)
    ops, scheme, path, system = _pipeline(spec)
    rng = np.random.default_rng(9)
    lay = ops.layouts
    # build a feasible candidate, then use its image as the right-hand side
    f = np.concatenate([ops.A2d @ rng.standard_normal(lay.n_h) for _ in range(2)])
    g = rng.standard_normal(2 * lay.n_h)
    es = rng.standard_normal(2 * lay.n_estar)
    system.xi = system.S_f @ f + system.S_g @ g + system.S1 @ es
    sol = solve_min_norm(system)
    ora = oracle_min_norm(system)
    assert sol.residuals.terminal_rel <= 1e-9
    assert ora.residuals.terminal_rel <= 1e-9
    assert abs(sol.objective_value - ora.objective_value) <= 1e-8 * ora.objective_value


def test_kkt_residuals_on_every_solve():
    spec = spec2d((4, 4), n_steps=3)
    _, _, _, system = _pipeline(spec)
    sol = solve_min_norm(system)
    xi_norm = float(np.linalg.norm(system.xi))
    assert sol.residuals.terminal_abs <= 1e-9 * xi_norm
    assert sol.residuals.div_f <= 1e-9 * xi_norm
    assert sol.residuals.div_g <= 1e-9 * xi_norm
    # stationarity identities, recomputed from the stored multipliers
    f_expect = system.V.T @ sol.lambda1 + system.S_f.T @ sol.lambda3
    assert _rel(sol.f_s, f_expect) <= 1e-10
    np.testing.assert_allclose(sol.estar_s, system.S1.T @ sol.lambda3, rtol=0, atol=1e-12)


def test_min_norm_optimality_in_feasible_directions():
    spec = spec2d((3, 3), n_steps=2)
    _, _, _, system = _pipeline(spec)
    sol = solve_min_norm(system)
    x = sol.stacked()
    m = len(x)
    c_rows = np.zeros((system.V.shape[0], m))
    c_rows[:, : system.V.shape[1]] = system.V.toarray()
    s_rows = np.zeros((system.state_dim, m))
    nf, ng = system.S_f.shape[1], system.S_g.shape[1]
    ns = system.S1.shape[1]
    s_rows[:, :nf] = system.S_f
    s_rows[:, nf : nf + ng] = system.S_g
    s_rows[:, nf + ng + 0 : nf + ng + ns] = system.S1  # no gstar in 2-D
    null = sla.null_space(np.vstack([c_rows, s_rows]))
    assert null.shape[1] > 0
    rng = np.random.default_rng(12)
    j0 = sol.objective_value
    for _ in range(20):
        d = null @ rng.standard_normal(null.shape[1])
        j1 = 0.5 * float((x + d) @ (x + d))
        assert j1 >= j0 - 1e-9 * j0


def test_frozen_path_raises_and_allow_singular_flags():
    spec = spec2d((4, 4), n_steps=3)
    _, _, _, system = _pipeline(spec, frozen=True)
    with pytest.raises(SchurSingular) as exc:
        solve_min_norm(system)
    assert exc.value.rank is not None and exc.value.rank < exc.value.dim
    sol = solve_min_norm(system, allow_singular=True)
    assert sol.regularized and not sol.feasible
    assert sol.residuals.terminal_rel > 1e-3


def test_solution_determinism():
    spec = spec2d((4, 4), n_steps=3)
    _, _, _, s1 = _pipeline(spec)
    _, _, _, s2 = _pipeline(spec)
    a = solve_min_norm(s1)
    b = solve_min_norm(s2)
    for name in UNKNOWNS:
        np.testing.assert_array_equal(getattr(a, name), getattr(b, name))


def test_ablation_mode_validation():
    lay = build_layouts(spec2d((4, 4)))
    full = AblationMode.full(lay)
    assert full.active == {"f1", "f2", "g3", "e12", "e21"}
    drop = AblationMode.drop(["u"], lay)
    assert drop.active == {"f1", "f2", "g3"}
    assert drop.label == "drop-e12+e21"
    with pytest.raises(ConfigError):
        AblationMode.drop(["f1", "f2", "g3", "u"], lay)
    with pytest.raises(ConfigError):
        AblationMode.drop(["f9"], lay)


def test_ablated_full_set_matches_min_norm():
    spec = spec2d((4, 4), n_steps=3)
    _, _, _, system = _pipeline(spec)
    ref = solve_min_norm(system)
    full = solve_ablated(system, AblationMode.full(system.layouts))
    for name in UNKNOWNS:
        np.testing.assert_array_equal(getattr(full, name), getattr(ref, name))


def test_withheld_family_is_zero_and_misses_target():
    spec = spec2d((4, 4), n_steps=3)
    ops, scheme, path, system = _pipeline(spec)
    lay = ops.layouts
    sol = solve_ablated(system, AblationMode.drop(["f1"], lay))
    f = sol.f_s.reshape(3, lay.n_e)
    assert np.abs(f[:, lay.group_slice_within("E1")]).max() == 0.0
    assert np.abs(f[:, lay.group_slice_within("E2")]).max() > 0.0
    assert not sol.feasible
    assert sol.residuals.terminal_abs > 1e-2
    traj = replay(scheme, system.phi0, sol, path)
    assert np.abs(traj.terminal - system.phi_target).max() > 1e-2


def test_reoptimized_ablation_reports_feasibility_gap():
    # the per-path discrete system stays controllable with f1 removed:
    # re-optimization finds an exact control, unlike withholding
    spec = spec2d((4, 4), n_steps=3)
    _, _, _, system = _pipeline(spec)
    re = solve_ablated(system, AblationMode.drop(["f1"], system.layouts),
                       strategy="reoptimize")
    assert re.feasible
    assert re.residuals.terminal_rel <= 1e-9
    f = re.f_s.reshape(3, system.layouts.n_e)
    assert np.abs(f[:, system.layouts.group_slice_within("E1")]).max() == 0.0
    # divergence constraint still binds the remaining family
    assert re.residuals.div_f <= 1e-11
    wh = solve_ablated(system, AblationMode.drop(["f1"], system.layouts))
    assert re.objective_value > solve_min_norm(system).objective_value
    assert wh.residuals.terminal_abs > re.residuals.terminal_abs


def test_reoptimize_rejects_unknown_strategy():
    spec = spec2d((3, 3), n_steps=2)
    _, _, _, system = _pipeline(spec)
    with pytest.raises(ConfigError):
        solve_ablated(system, AblationMode.full(system.layouts), strategy="nope")


def test_oracle_cap():
    spec = spec2d((4, 4), n_steps=3)
    _, _, _, system = _pipeline(spec)
    with pytest.raises(CapExceeded):
        oracle_min_norm(system, cap=10)


def test_axis_swap_maps_solution():
    spec = spec2d((4, 4), n_steps=3)
    maps = axis_swap_maps(spec)
    ops, scheme, path, system = _pipeline(spec)
    phi0s = maps.apply_state(system.phi0)
    opss = assemble_tez(maps.swapped_spec)
    schemes = assemble_scheme(opss)
    systems = assemble_constraint_system(
        opss, schemes, path, phi0s, np.zeros(schemes.state_dim)
    )
    nt = 3
    sol1 = solve_ablated(system, AblationMode.drop(["f1"], ops.layouts))
    sol2 = solve_ablated(systems, AblationMode.drop(["f2"], opss.layouts))
    f_m = maps.apply_f(sol1.f_s.reshape(nt, -1)).reshape(-1)
    g_m = maps.apply_g(sol1.g_s.reshape(nt, -1)).reshape(-1)
    e_m = maps.apply_estar(sol1.estar_s.reshape(nt, -1)).reshape(-1)
    assert _rel(f_m, sol2.f_s) <= 1e-8
    assert _rel(g_m, sol2.g_s) <= 1e-8
    assert _rel(e_m, sol2.estar_s) <= 1e-8
