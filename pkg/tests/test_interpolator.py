import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fllab.ensemble import EnsembleDraw, MonteCarloPlan, ProblemDims, collapse_level, collapse_schedule, sample_ensemble, sample_tree
from fllab.interpolator import (
    PSI_TRACE_COLUMNS,
    ConfigurationSets,
    EmptyInnerSetError,
    build_partition,
    evaluate_tree,
    exponent_D0,
    log_mean_exp,
    partition_from_log_a,
    psi_estimate,
    psi_trace_rows,
    write_psi_trace,
    zeta_ladder,
    zeta_ladder_from_level1,
)
from fllab.perceptron import build_sphere_samples
from fllab.schedule import LiftingSchedule, validate_schedule


def sched(r, m, p, q=None, beta=1.0, s=-1.0, group_exponent=1.0, allow_zero_beta=False):
    cand = LiftingSchedule(r, m, p, p if q is None else q, beta, s, group_exponent)
    return validate_schedule(cand, allow_zero_beta=allow_zero_beta)


def random_sets(n, m, l, seed, anchor=None, restriction=None):
    X = build_sphere_samples(n, l, False, seed)
    Y = build_sphere_samples(m, l, False, seed + 1000)
    return ConfigurationSets(X, Y, anchor=anchor, restriction=restriction)


def scalar_draw(g, u4, u2, h):
    return EnsembleDraw(np.array([[g]]), [(u4, np.array([u2]), np.array([h]))])


# ---------------------------------------------------------------------------
# D0


def test_d0_scalar_example():
    sets = ConfigurationSets([[1.0]], [[1.0]])
    d = exponent_D0(scalar_draw(2.0, 0.2, 0.1, 0.3), sets, 0.5, 0, 0, 0)
    assert d == pytest.approx(1.8384776310850235, abs=1e-14)


def test_d0_at_t_one_drops_u2_and_h():
    rng = np.random.default_rng(0)
    X, Y = rng.standard_normal((2, 3)), rng.standard_normal((2, 4))
    sets = ConfigurationSets(X, Y, anchor=lambda xb: (lambda x: x @ xb))
    draw = EnsembleDraw(rng.standard_normal((4, 3)), [(0.7, rng.standard_normal(4), rng.standard_normal(3))])
    x, y = X[1], Y[0]
    expected = y @ draw.g_matrix @ x + np.linalg.norm(x) * np.linalg.norm(y) * 0.7 + X[0] @ x
    assert exponent_D0(draw, sets, 1.0, 1, 0, 0) == pytest.approx(expected, rel=1e-14)


def test_d0_at_t_zero_with_zero_noise():
    sets = random_sets(3, 2, 2, 1)
    draw = EnsembleDraw(np.ones((2, 3)), [(0.0, np.zeros(2), np.zeros(3))])
    assert exponent_D0(draw, sets, 0.0, 1, 1, 0) == 0.0


def test_d0_excluded_pair_and_range():
    sets = random_sets(3, 2, 2, 1, restriction=[[0], [0, 1]])
    draw = EnsembleDraw(np.ones((2, 3)), [(0.0, np.zeros(2), np.zeros(3))])
    assert exponent_D0(draw, sets, 0.5, 1, 0, 0) == -np.inf
    assert np.isfinite(exponent_D0(draw, sets, 0.5, 1, 0, 1))
    with pytest.raises(ValueError):
        exponent_D0(draw, sets, 1.5, 0, 0, 0)


# ---------------------------------------------------------------------------
# partition tables


def test_partition_single_term():
    table = partition_from_log_a(np.full((1, 1, 1), 0.37), s=-2.0)
    assert table.log_c[0, 0] == 0.37
    assert table.log_z[0] == pytest.approx(-0.74, abs=1e-15)


def test_partition_two_equal_terms():
    table = partition_from_log_a(np.zeros((1, 2, 1)), s=1.0)
    assert table.log_c[0, 0] == pytest.approx(math.log(2), abs=1e-15)


def test_partition_negative_s_example():
    log_a = np.array([1.0, 3.0]).reshape(2, 1, 1)
    table = partition_from_log_a(log_a, s=-1.0)
    assert table.log_z[0] == pytest.approx(-0.8730719889570274, abs=1e-14)


def test_build_partition_matches_scalar_exponent():
    sets = random_sets(4, 3, 3, 2, anchor=lambda xb: (lambda x: 0.3 * (x @ xb)), restriction=[[0, 2], [1], [0, 1, 2]])
    schedule = sched(2, [1, 0.7, 0.3, 0], [1, 0.6, 0.2, 0], q=[0.9, 0.5, 0.1, 0], beta=1.7, s=-0.5)
    draw = sample_ensemble(ProblemDims(4, 3, 3), schedule, 3, 1, (2, 1))
    t = 0.3
    table = build_partition(draw, sets, schedule, t)
    for i3 in range(3):
        zs = []
        for i1 in range(3):
            terms = [schedule.beta * exponent_D0(draw, sets, t, i1, i2, i3) for i2 in range(3)]
            if not sets.allowed[i3, i1]:
                assert table.log_c[i1, i3] == -np.inf
                continue
            log_c = math.log(sum(math.exp(v) for v in terms))
            assert table.log_c[i1, i3] == pytest.approx(log_c, rel=1e-13)
            zs.append(math.exp(schedule.s * log_c))
        assert table.log_z[i3] == pytest.approx(math.log(sum(zs)), rel=1e-13)


def test_build_partition_empty_inner_set():
    mask = np.array([[True, False], [False, False]])
    sets = random_sets(3, 2, 2, 1, restriction=mask)
    schedule = sched(1, [1, 0.5, 0], [1, 0.5, 0])
    draw = sample_ensemble(ProblemDims(3, 2, 2), schedule, 0, 0, (0,))
    with pytest.raises(EmptyInnerSetError, match="empty inner set"):
        build_partition(draw, sets, schedule, 0.5)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-700, 700), min_size=6, max_size=6), st.sampled_from([-1.0, -0.5, 0.5, 1.0]))
def test_partition_finite_for_large_exponents(values, s):
    table = partition_from_log_a(np.array(values).reshape(3, 2, 1), s)
    assert np.all(np.isfinite(table.log_c)) and np.all(np.isfinite(table.log_z))


def test_partition_finite_at_huge_beta():
    sets = random_sets(3, 3, 3, 5)
    schedule = sched(1, [1, 0.5, 0], [1, 0.5, 0], beta=1e6)
    draw = sample_ensemble(ProblemDims(3, 3, 3), schedule, 0, 0, (0,))
    table = build_partition(draw, sets, schedule, 0.5)
    assert np.all(np.isfinite(table.log_z))


def test_partition_csv_shape():
    text = partition_from_log_a(np.zeros((2, 2, 1)), 1.0).to_csv()
    lines = text.strip().splitlines()
    assert lines[0] == "i1,i2,i3,log_a,log_c,log_z"
    assert len(lines) == 5


# ---------------------------------------------------------------------------
# zeta ladder


def test_ladder_constant_samples():
    schedule = sched(3, [1, 0.8, 0.5, 0.2, 0], [1, 0.6, 0.3, 0.1, 0])
    c = 2.5
    ladder = zeta_ladder_from_level1(np.full((4, 3), math.log(c)), schedule)
    m = schedule.m_schedule
    for k in (1, 2, 3):
        assert np.allclose(ladder.log_zeta[k - 1], m[k] / m[1] * math.log(c), rtol=1e-14)
    assert ladder.depth == 3


def test_ladder_ratio_one_single_sample():
    schedule = sched(2, [1, 0.6, 0.6, 0], [1, 0.5, 0.5, 0])
    ladder = zeta_ladder_from_level1(np.array([1.234]), schedule)
    assert ladder.log_zeta[1] == pytest.approx(1.234, abs=1e-15)


def test_ladder_two_sample_example():
    schedule = sched(2, [1, 1.0, 0.5, 0], [1, 0.5, 0.2, 0])
    ladder = zeta_ladder_from_level1(np.array([1.0, 3.0]), schedule)
    assert ladder.log_zeta[1] == pytest.approx(1.1201145069582774, abs=1e-14)


def test_ladder_from_log_z_samples():
    # level-1 log-mean-exp, group power over anchors, then one climb
    schedule = sched(2, [1, 0.5, 0.25, 0], [1, 0.5, 0.2, 0], group_exponent=2.0)
    log_z = np.random.default_rng(4).standard_normal((3, 5, 2))  # (N_2, N_1, l3)
    ladder = zeta_ladder(log_z, schedule)
    z1 = np.exp(log_z)
    zeta1 = np.sum(np.mean(z1**0.5, axis=1) ** 2.0, axis=-1)
    zeta2 = np.mean(zeta1**0.5)
    assert np.allclose(ladder.log_zeta[0], np.log(zeta1), rtol=1e-13)
    assert ladder.log_zeta[1] == pytest.approx(math.log(zeta2), rel=1e-13)
    assert ladder.sample_counts == (5, 3)


def test_ladder_rejects_zero_samples():
    schedule = sched(2, [1, 0.5, 0.25, 0], [1, 0.5, 0.2, 0])
    with pytest.raises(ValueError):
        zeta_ladder(np.zeros((0, 3, 2)), schedule)
    with pytest.raises(ValueError):
        log_mean_exp(np.zeros((2, 0)))


# ---------------------------------------------------------------------------
# psi


def unit_pair():
    return ConfigurationSets([[1.0, 0.0, 0.0, 0.0]], [[0.0, 1.0, 0.0]])


@pytest.mark.parametrize("r", [1, 2])
@pytest.mark.parametrize("s", [-1.0, -0.5, 2.0])
def test_psi_at_zero_beta_is_deterministic(r, s):
    l, n = 3, 4
    sets = random_sets(n, 2, l, 9)
    m = [1, 0.6, 0] if r == 1 else [1, 0.6, 0.3, 0]
    p = [1, 0.5, 0] if r == 1 else [1, 0.5, 0.2, 0]
    g = 1.5
    schedule = sched(r, m, p, beta=0.0, s=s, group_exponent=g, allow_zero_beta=True)
    est = psi_estimate(ProblemDims(n, 2, l), sets, schedule, 0.4, MonteCarloPlan(4, (3,) * r, seed=1))
    m1 = schedule.m_schedule[1]
    expected = math.log(l * (l ** ((1 + s) * m1)) ** g) / (g * abs(s) * math.sqrt(n) * m1)
    assert est.value == pytest.approx(expected, abs=1e-12)
    assert est.stderr < 1e-12


def test_anchor_shift_moves_psi_exactly():
    n, l = 4, 3
    base = random_sets(n, 3, l, 3)
    c = 0.7
    shifted = ConfigurationSets(base.x_set, base.y_set, anchor=lambda xb: (lambda x: np.full(x.shape[0], c)))
    schedule = sched(2, [1, 0.7, 0.4, 0], [1, 0.6, 0.3, 0], beta=2.0, s=-1.0)
    tree = sample_tree(ProblemDims(n, 3, l), 2, MonteCarloPlan(20, (4, 3), seed=2))
    a = psi_estimate(None, base, schedule, 0.6, None, tree=tree)
    b = psi_estimate(None, shifted, schedule, 0.6, None, tree=tree)
    np.testing.assert_allclose(b.samples - a.samples, -schedule.beta * c / math.sqrt(n), rtol=0, atol=1e-12)


@pytest.mark.parametrize("seed", range(3))
def test_level_collapse(seed):
    n, l = 4, 3
    sets = random_sets(n, 4, l, seed)
    two = sched(2, [1, 0.7, 0.4, 0], [1, 0.6, 0.6, 0], q=[0.9, 0.5, 0.5, 0])
    one = collapse_schedule(two, 2)
    assert one.p_schedule == (1.0, 0.6, 0.0) and one.m_schedule == (1.0, 0.7, 0.0)
    tree = sample_tree(ProblemDims(n, 4, l), 2, MonteCarloPlan(30, (6, 1), seed=seed))
    for t in (0.0, 0.3, 1.0):
        a = psi_estimate(None, sets, two, t, None, tree=tree)
        b = psi_estimate(None, sets, one, t, None, tree=collapse_level(tree, 2))
        np.testing.assert_allclose(a.samples, b.samples, rtol=0, atol=1e-10)


def test_tree_evaluation_matches_per_path_partitions():
    n, m, l = 3, 2, 3
    sets = random_sets(n, m, l, 6, restriction=[[0, 1], [2], [0, 1, 2]])
    schedule = sched(2, [1, 0.8, 0.5, 0], [1, 0.6, 0.3, 0], beta=1.3, s=-1.0)
    tree = sample_tree(ProblemDims(n, m, l), 2, MonteCarloPlan(2, (3, 2), seed=7))
    state = evaluate_tree(tree, sets, schedule, 0.45)
    for o in range(2):
        for j2 in range(2):
            for j1 in range(3):
                table = build_partition(tree.path_draw(schedule, o, (j1, j2)), sets, schedule, 0.45)
                np.testing.assert_allclose(state.log_z[o, j2, j1], table.log_z, rtol=1e-13)


def test_threads_do_not_change_results():
    sets = random_sets(4, 3, 3, 0)
    schedule = sched(2, [1, 0.7, 0.4, 0], [1, 0.6, 0.3, 0])
    plan = MonteCarloPlan(11, (3, 2), seed=5)
    a = psi_estimate(ProblemDims(4, 3, 3), sets, schedule, 0.5, plan, threads=1)
    b = psi_estimate(ProblemDims(4, 3, 3), sets, schedule, 0.5, plan, threads=3)
    assert np.array_equal(a.samples, b.samples)
    assert a.value == b.value and a.stderr == b.stderr


def test_disjoint_seeds_consistent():
    sets = random_sets(4, 4, 3, 1)
    schedule = sched(1, [1, 0.5, 0], [1, 0.5, 0])
    dims = ProblemDims(4, 4, 3)
    a = psi_estimate(dims, sets, schedule, 0.5, MonteCarloPlan(300, (20,), seed=1))
    b = psi_estimate(dims, sets, schedule, 0.5, MonteCarloPlan(300, (20,), seed=2))
    assert abs(a.value - b.value) <= 4 * math.hypot(a.stderr, b.stderr)


def lognormal_psi(t, a, beta, m1, s, n):
    return abs(s) * beta**2 * m1 * (2 * (1 - t) * (1 - a) + t * (1 - a * a)) / (2 * math.sqrt(n))


@pytest.mark.parametrize("t", [0.2, 0.8])
def test_single_pair_matches_lognormal_oracle(t):
    sets, a, m1 = unit_pair(), 0.5, 0.5
    schedule = sched(1, [1, m1, 0], [1, a, 0], beta=1.0, s=-1.0)
    est = psi_estimate(ProblemDims(4, 3, 1), sets, schedule, t, MonteCarloPlan(1000, (500,), seed=3), control_variate=True)
    assert abs(est.value - lognormal_psi(t, a, 1.0, m1, -1.0, 4)) <= 3 * est.stderr


def test_single_pair_degenerate_level_constant_in_t():
    sets = unit_pair()
    schedule = sched(1, [1, 0.5, 0], [1, 1, 0])
    plan = MonteCarloPlan(500, (10,), seed=4)
    a = psi_estimate(ProblemDims(4, 3, 1), sets, schedule, 0.2, plan)
    b = psi_estimate(ProblemDims(4, 3, 1), sets, schedule, 0.8, MonteCarloPlan(500, (10,), seed=5))
    assert abs(a.value - b.value) <= 3 * math.hypot(a.stderr, b.stderr)


def test_psi_argument_errors():
    sets = random_sets(3, 2, 2, 0)
    schedule = sched(1, [1, 0.5, 0], [1, 0.5, 0])
    dims = ProblemDims(3, 2, 2)
    with pytest.raises(ValueError):
        psi_estimate(dims, sets, schedule, 1.2, MonteCarloPlan(2, (2,)))
    with pytest.raises(ValueError):
        psi_estimate(dims, sets, schedule, 0.5, MonteCarloPlan(0, (2,)))
    with pytest.raises(ValueError):
        psi_estimate(ProblemDims(5, 2, 2), sets, schedule, 0.5, MonteCarloPlan(2, (2,)))


def test_sets_validate_norms_and_shapes():
    sets = random_sets(5, 3, 4, 8)
    assert sets.norms_consistent()
    assert sets.l_x == 4 and sets.l_anchor == 4
    with pytest.raises(ValueError):
        ConfigurationSets([[1.0, 0.0]], [[1.0]], x_bar_set=[[1.0, 0.0, 0.0]])
    with pytest.raises(ValueError):
        ConfigurationSets([[np.nan]], [[1.0]])


def test_psi_trace_csv(tmp_path):
    sets = random_sets(3, 2, 2, 0)
    schedule = sched(1, [1, 0.5, 0], [1, 0.5, 0])
    plan = MonteCarloPlan(5, (3,), seed=2)
    grid = [0.0, 0.5, 1.0]
    ests = [psi_estimate(ProblemDims(3, 2, 2), sets, schedule, t, plan) for t in grid]
    path = tmp_path / "trace.csv"
    write_psi_trace(path, psi_trace_rows(grid, ests, plan), ["seed = 2"])
    lines = path.read_text().splitlines()
    assert lines[0] == "# seed = 2"
    assert lines[1] == ",".join(PSI_TRACE_COLUMNS)
    assert len(lines) == 5
