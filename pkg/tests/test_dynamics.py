import numpy as np
import pytest

from maxctrl import (
    DimensionMismatch,
    StateVector,
    assemble_scheme,
    assemble_tez,
    build_layouts,
    discrete_energy,
    replay,
    sample_path,
    step,
    tez_initial_fields,
)

from conftest import spec2d, spec3d
from test_tez2d import A2D_22, F2D_22, G2D_22


def _scheme22(n_steps=2, dt=None):
    spec = spec2d((2, 2), n_steps=n_steps)
    return assemble_tez(spec), spec, dt


def test_state_dimension_2x2():
    ops = assemble_tez(spec2d((2, 2), n_steps=1))
    scheme = assemble_scheme(ops)
    assert scheme.M1.shape == (16, 16)  # 4 + 4 + 8 + 0
    assert scheme.state_dim == 16


def test_dt_zero_propagator():
    ops = assemble_tez(spec2d((2, 2)))
    scheme = assemble_scheme(ops, dt=0.0)
    n_ev = ops.layouts.n_e + ops.layouts.n_h
    np.testing.assert_array_equal(scheme.U[:n_ev, :n_ev], np.eye(n_ev))
    assert np.abs(scheme.U[:, n_ev:]).max() == 0.0
    assert np.abs(scheme.U[n_ev:, :]).max() == 0.0


def test_inverse_consistency():
    ops = assemble_tez(spec2d((4, 4), n_steps=3))
    scheme = assemble_scheme(ops)
    rng = np.random.default_rng(0)
    phi = rng.standard_normal(scheme.state_dim)
    back = scheme.M1 @ scheme.solve_m1(phi)
    assert np.abs(back - phi).max() <= 1e-12 * np.abs(phi).max()


def test_propagator_is_orthogonal_on_evolved_block():
    # midpoint propagator of the skew pair (A, -A^T) is a Cayley transform
    ops = assemble_tez(spec2d((4, 4)))
    scheme = assemble_scheme(ops)
    n_ev = ops.layouts.n_e + ops.layouts.n_h
    u = scheme.U[:n_ev, :n_ev]
    assert np.abs(u.T @ u - np.eye(n_ev)).max() <= 1e-12


def test_sample_path_reproducible_and_frozen():
    spec = spec2d((4, 4), n_steps=7)
    p1 = sample_path(99, spec)
    p2 = sample_path(99, spec)
    np.testing.assert_array_equal(p1.increments, p2.increments)
    assert sample_path(100, spec).increments[0] != p1.increments[0]
    frozen = sample_path(99, spec, frozen=True)
    assert np.abs(frozen.increments).max() == 0.0


def test_sample_path_variance():
    spec = spec2d((2, 2), t_final=1000.0, n_steps=10_000)
    assert spec.dt == pytest.approx(0.1)
    path = sample_path(123, spec)
    assert 0.095 <= float(np.var(path.increments)) <= 0.105


def test_step_zero_is_zero():
    ops = assemble_tez(spec2d((2, 2)))
    scheme = assemble_scheme(ops)
    z = np.zeros
    out = step(scheme, StateVector(z(16), 0), z(4), z(4), z(8), z(8), z(0), 0.3)
    assert np.abs(out.phi).max() == 0.0
    assert out.time_index == 1


def test_step_selector_consistency_exact():
    ops = assemble_tez(spec2d((2, 2)))
    scheme = assemble_scheme(ops)
    rng = np.random.default_rng(4)
    e_next = rng.standard_normal(8)
    out = step(
        scheme,
        StateVector(rng.standard_normal(16), 0),
        rng.standard_normal(4),
        rng.standard_normal(4),
        rng.standard_normal(8),
        e_next,
        np.zeros(0),
        0.17,
    )
    np.testing.assert_array_equal(out.phi[8:16], e_next)


def test_step_dimension_mismatch():
    ops = assemble_tez(spec2d((2, 2)))
    scheme = assemble_scheme(ops)
    z = np.zeros
    with pytest.raises(DimensionMismatch):
        step(scheme, StateVector(z(16), 0), z(3), z(4), z(8), z(8), z(0), 0.1)


def test_step_matches_hand_midpoint_update():
    # eight evolved unknowns on the 2x2 grid, solved densely by hand
    spec = spec2d((2, 2), n_steps=5)
    ops = assemble_tez(spec)
    scheme = assemble_scheme(ops)
    a = 0.5 * spec.dt
    rng = np.random.default_rng(11)
    e0, h0 = rng.standard_normal(4), rng.standard_normal(4)
    f_n, g_n = rng.standard_normal(4), rng.standard_normal(4)
    es0, es1 = rng.standard_normal(8), rng.standard_normal(8)
    d_w = 0.21

    rhs_e = e0 + a * (A2D_22 @ h0) + f_n * d_w
    rhs_h = a * (F2D_22 @ e0) + h0 + g_n * d_w + a * (G2D_22 @ (es1 + es0))
    m_ev = np.block([[np.eye(4), -a * A2D_22], [-a * F2D_22, np.eye(4)]])
    expect = np.linalg.solve(m_ev, np.concatenate([rhs_e, rhs_h]))

    phi0 = np.concatenate([e0, h0, es0])
    out = step(scheme, StateVector(phi0, 0), f_n, g_n, es0, es1, np.zeros(0), d_w)
    np.testing.assert_allclose(out.phi[:8], expect, atol=1e-13)
    np.testing.assert_array_equal(out.phi[8:], es1)


def test_step_linearity():
    ops = assemble_tez(spec2d((3, 3)))
    scheme = assemble_scheme(ops)
    lay = ops.layouts
    rng = np.random.default_rng(8)
    d_w = float(rng.standard_normal())
    alpha, beta = 1.3, -0.7

    def rand_inputs():
        return (
            rng.standard_normal(lay.state_dim),
            rng.standard_normal(lay.n_e),
            rng.standard_normal(lay.n_h),
            rng.standard_normal(lay.n_estar),
            rng.standard_normal(lay.n_estar),
        )

    x = rand_inputs()
    y = rand_inputs()
    z0 = np.zeros(0)

    def run(v):
        return step(scheme, StateVector(v[0], 0), v[1], v[2], v[3], v[4], z0, d_w).phi

    combo = tuple(alpha * a + beta * b for a, b in zip(x, y))
    lhs = run(combo)
    rhs = alpha * run(x) + beta * run(y)
    assert np.abs(lhs - rhs).max() <= 1e-12 * max(1.0, np.abs(rhs).max())


def test_uncontrolled_iteration_equals_powers():
    ops = assemble_tez(spec2d((3, 3), n_steps=6))
    scheme = assemble_scheme(ops)
    lay = ops.layouts
    rng = np.random.default_rng(2)
    phi = np.zeros(lay.state_dim)
    phi[: lay.n_e + lay.n_h] = rng.standard_normal(lay.n_e + lay.n_h)
    z_e, z_h, z_s = np.zeros(lay.n_e), np.zeros(lay.n_h), np.zeros(lay.n_estar)
    cur = StateVector(phi.copy(), 0)
    by_power = phi.copy()
    for n in range(6):
        cur = step(scheme, cur, z_e, z_h, z_s, z_s, np.zeros(0), 0.44)
        by_power = scheme.U @ by_power
        assert np.abs(cur.phi - by_power).max() <= 1e-11


class _ZeroControls:
    def __init__(self, lay, nt):
        self.f_s = np.zeros(nt * lay.n_e)
        self.g_s = np.zeros(nt * lay.n_h)
        self.estar_s = np.zeros(nt * lay.n_estar)
        self.rstar_s = np.zeros(nt * lay.n_r)


def test_replay_zero_everything():
    spec = spec2d((3, 3), n_steps=4)
    ops = assemble_tez(spec)
    scheme = assemble_scheme(ops)
    path = sample_path(5, spec)
    traj = replay(scheme, np.zeros(scheme.state_dim), _ZeroControls(ops.layouts, 4), path)
    assert np.abs(traj.states).max() == 0.0
    assert np.abs(traj.div_e_max).max() == 0.0
    assert traj.states.shape == (5, scheme.state_dim)


def test_replay_reproducible():
    spec = spec2d((4, 4), n_steps=5)
    ops = assemble_tez(spec)
    scheme = assemble_scheme(ops)
    path = sample_path(17, spec)
    lay = ops.layouts
    rng = np.random.default_rng(17)

    class C:
        f_s = rng.standard_normal(5 * lay.n_e)
        g_s = rng.standard_normal(5 * lay.n_h)
        estar_s = rng.standard_normal(5 * lay.n_estar)
        rstar_s = np.zeros(0)

    phi0 = tez_initial_fields(spec)
    t1 = replay(scheme, phi0, C, path)
    t2 = replay(scheme, phi0, C, path)
    np.testing.assert_array_equal(t1.states, t2.states)


def test_discrete_energy_basics():
    spec = spec2d((4, 4))
    ls = build_layouts(spec)
    assert discrete_energy(np.zeros(ls.state_dim), ls) == 0.0
    rng = np.random.default_rng(0)
    phi = rng.standard_normal(ls.state_dim)
    e1 = discrete_energy(phi, ls)
    assert e1 > 0.0
    assert discrete_energy(2.0 * phi, ls) == pytest.approx(4.0 * e1, rel=1e-14)


def test_discrete_energy_reference_data():
    # quadrature of the reference sinusoids: 0.5 * 3 * 25/4 = 9.375
    spec = spec2d((32, 32), n_steps=10)
    ls = build_layouts(spec)
    phi0 = tez_initial_fields(spec)
    assert discrete_energy(phi0, ls) == pytest.approx(9.375, rel=0.02)


def test_discrete_energy_3d_state():
    spec = spec3d((2, 3, 4))
    ls = build_layouts(spec)
    e = discrete_energy(np.ones(ls.state_dim), ls)
    assert e > 0.0
    with pytest.raises(DimensionMismatch):
        discrete_energy(np.ones(3), ls)
