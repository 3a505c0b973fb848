import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fllab import _backend
from fllab.interpolator import ConfigurationSets, EmptyInnerSetError
from fllab.perceptron import (
    LOCAL_ENTROPY_COLUMNS,
    BinaryInstance,
    SolutionCensus,
    anchor_soft,
    bp_ground_state,
    build_binary_sets,
    build_sphere_samples,
    corner_vectors,
    local_entropy,
    local_entropy_curve,
    max_posorthant,
    min_max_enumeration,
    restrict_overlap,
    soft_anchor_family,
    write_local_entropy,
    zero_temperature_check,
    zero_temperature_schedule,
)
from fllab.schedule import LiftingSchedule

BACKENDS = ["numpy"] + (["numba"] if _backend.HAVE_NUMBA else [])


# ---------------------------------------------------------------------------
# sets and anchors


def test_full_binary_set_n2():
    bs = build_binary_sets(2, "full")
    assert bs.vectors.shape == (4, 2)
    np.testing.assert_allclose(np.linalg.norm(bs.vectors, axis=1), 1.0, atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 16), st.data())
def test_corner_overlap_identity(n, data):
    a = data.draw(st.integers(0, 2**n - 1))
    b = data.draw(st.integers(0, 2**n - 1))
    x, y = corner_vectors([a, b], n)
    d = bin(a ^ b).count("1")
    assert x @ x == pytest.approx(1.0, abs=1e-12)
    assert x @ y == pytest.approx(1.0 - 2.0 * d / n, abs=1e-12)


def test_random_and_explicit_subsets():
    bs = build_binary_sets(6, ("random", 10, 3))
    assert len(set(bs.corners.tolist())) == 10
    assert np.array_equal(build_binary_sets(6, ("random", 10, 3)).corners, bs.corners)
    assert np.array_equal(build_binary_sets(3, [5, 1]).corners, [5, 1])
    with pytest.raises(ValueError):
        build_binary_sets(2, ("random", 5, 0))
    with pytest.raises(ValueError):
        build_binary_sets(2, [4])
    with pytest.raises(ValueError):
        build_binary_sets(21, "full")


def test_sphere_samples():
    y = build_sphere_samples(5, 50, positive_orthant=True, seed=2)
    np.testing.assert_allclose(np.linalg.norm(y, axis=1), 1.0, atol=1e-12)
    assert y.min() >= 0.0
    with pytest.raises(ValueError):
        build_sphere_samples(3, 0)


def test_positive_orthant_mean_direction():
    y = build_sphere_samples(3, 10**4, positive_orthant=True, seed=0)
    mean = y.mean(axis=0)
    direction = mean / np.linalg.norm(mean)
    np.testing.assert_allclose(direction, np.ones(3) / math.sqrt(3), rtol=0.02)


def test_anchor_soft_examples():
    x_bar = np.array([1.0, 0.0])
    assert np.all(anchor_soft(0.0, 0.3, x_bar)(np.eye(2)) == 0.0)
    assert anchor_soft(2.0, 0.25, x_bar)(np.array([[0.5, 0.1]]))[0] == pytest.approx(0.5, abs=1e-15)
    assert anchor_soft(3.0, 0.4, x_bar)(np.array([[0.4, 0.9]]))[0] == pytest.approx(0.0, abs=1e-15)
    sets = ConfigurationSets(np.eye(2), [[1.0]], anchor=soft_anchor_family(2.0, 0.5))
    np.testing.assert_allclose(sets.anchor_table, [[1.0, -1.0], [-1.0, 1.0]])


def test_restrict_overlap_examples():
    full = build_binary_sets(2, "full")
    x_bar = corner_vectors([3], 2)[0]
    assert restrict_overlap(full.vectors, x_bar, 1.0).tolist() == [3]
    assert restrict_overlap(full.vectors, x_bar, 0.0).tolist() == [1, 2]
    ten = build_binary_sets(10, "full")
    ref = corner_vectors([0b1011001110], 10)[0]
    assert restrict_overlap(ten.vectors, ref, 1 - 2 * 3 / 10).size == math.comb(10, 3) == 120
    with pytest.raises(EmptyInnerSetError):
        restrict_overlap(full.vectors, x_bar, 0.3)
    assert restrict_overlap(full.vectors, x_bar, 0.3, allow_empty=True).size == 0


def test_max_posorthant_examples():
    assert max_posorthant([-1.0, -2.0]) == 0.0
    assert max_posorthant([1.0, -2.0, 3.0]) == pytest.approx(math.sqrt(10), abs=1e-15)
    assert max_posorthant([0.0, 2.5, 0.0]) == 2.5


def test_max_posorthant_grid_search():
    v = np.array([1.0, -2.0, 3.0])
    th, ph = np.meshgrid(np.linspace(0, np.pi / 2, 801), np.linspace(0, np.pi / 2, 801))
    y = np.stack([np.sin(th) * np.cos(ph), np.sin(th) * np.sin(ph), np.cos(th)], axis=-1)
    assert abs((y @ v).max() - max_posorthant(v)) < 1e-3


# ---------------------------------------------------------------------------
# ground states


def naive_census(G):
    m, n = G.shape
    energies = np.array([max_posorthant(G @ corner_vectors([c], n)[0]) for c in range(2**n)])
    return energies, np.flatnonzero(energies <= 1e-10)


@pytest.mark.parametrize("backend", BACKENDS)
def test_ground_state_hand_examples(backend):
    c = bp_ground_state(BinaryInstance([[1.0, 0.0], [-1.0, 0.0]]), backend=backend)
    assert c.count == 0
    assert c.ground_state_energy == pytest.approx(1 / math.sqrt(2), abs=1e-15)
    c = bp_ground_state(BinaryInstance([[1.0, -1.0]]), backend=backend)
    assert c.count == 3 and c.ground_state_energy == 0.0
    assert not c.is_solution(0b01)  # x = (+, -)
    assert c.is_solution(0b10)
    G = -np.abs(np.random.default_rng(0).standard_normal((4, 6)))
    c = bp_ground_state(BinaryInstance(G), backend=backend)
    assert c.is_solution(2**6 - 1) and c.ground_state_energy == 0.0


@pytest.mark.parametrize("backend", BACKENDS)
@pytest.mark.parametrize("seed", range(3))
def test_ground_state_matches_naive(backend, seed):
    inst = BinaryInstance.random(9, 3, seed)
    census = bp_ground_state(inst, backend=backend)
    energies, sols = naive_census(inst.g_matrix)
    assert np.array_equal(census.solutions(), sols.astype(np.uint64))
    assert census.count == sols.size
    assert census.ground_state_energy == energies.min()
    assert (census.ground_state_energy == 0.0) == (census.count > 0)


def test_ground_state_budget():
    with pytest.raises(ValueError):
        bp_ground_state(BinaryInstance(np.ones((1, 25))))


@pytest.mark.parametrize("seed", range(3))
def test_census_row_permutation_invariant(seed):
    inst = BinaryInstance.random(8, 4, seed)
    perm = np.random.default_rng(seed).permutation(4)
    a = bp_ground_state(inst)
    b = bp_ground_state(BinaryInstance(inst.g_matrix[perm]))
    assert np.array_equal(a.bits, b.bits)


@pytest.mark.parametrize("col", [0, 3, 7])
def test_census_column_negation_flips_coordinate(col):
    inst = BinaryInstance.random(8, 2, col)
    G = inst.g_matrix.copy()
    G[:, col] *= -1
    a = bp_ground_state(inst).solutions()
    b = bp_ground_state(BinaryInstance(G)).solutions()
    assert np.array_equal(np.sort(a ^ np.uint64(1 << col)), b)


def test_census_json_round_trip():
    census = bp_ground_state(BinaryInstance.random(7, 2, 5))
    assert census.count > 0
    back = SolutionCensus.from_json(census.to_json())
    assert np.array_equal(back.bits, census.bits)
    assert back.count == census.count and back.n == 7 and back.threshold == 1e-10
    assert sum(census.runs()) == 2**7


# ---------------------------------------------------------------------------
# local entropy


def naive_local_entropy(solutions, n, d, policy):
    refs = range(2**n) if policy == "allCorners" else solutions
    best = 0
    for a in refs:
        count = 0
        for b in solutions:
            diff = sum(1 for i in range(n) if ((int(a) >> i) & 1) != ((int(b) >> i) & 1))
            count += diff == d
        best = max(best, count)
    return best


@pytest.mark.parametrize("policy", ["solutionsOnly", "allCorners"])
def test_local_entropy_matches_naive(policy):
    census = bp_ground_state(BinaryInstance.random(7, 2, 1))
    sols = census.solutions().tolist()
    for d in range(8):
        pt = local_entropy(census, distance=d, reference_policy=policy)
        assert pt.cluster_count == naive_local_entropy(sols, 7, d, policy)


def test_local_entropy_distance_zero():
    census = bp_ground_state(BinaryInstance.random(8, 3, 2))
    assert census.count > 0
    pt = local_entropy(census, overlap=1.0)
    assert pt.cluster_count == 1 and pt.sigma == 0.0
    assert census.is_solution(pt.best_reference_index)


def test_local_entropy_empty_census():
    census = bp_ground_state(BinaryInstance(np.vstack([np.eye(3), -np.eye(3)])))
    assert census.count == 0
    for policy in ("solutionsOnly", "allCorners"):
        assert all(pt.empty and pt.sigma is None for pt in local_entropy_curve(census, range(4), policy))


@pytest.mark.parametrize("seed", range(4))
def test_local_entropy_bounds_and_policy_order(seed):
    n = 10
    census = bp_ground_state(BinaryInstance.random(n, 3, seed))
    sol_pts = local_entropy_curve(census, range(n + 1), "solutionsOnly")
    all_pts = local_entropy_curve(census, range(n + 1), "allCorners")
    for a, b in zip(sol_pts, all_pts):
        assert b.cluster_count >= a.cluster_count
        for pt in (a, b):
            assert pt.cluster_count <= math.comb(n, pt.distance)
            if not pt.empty:
                assert pt.sigma <= math.log(math.comb(n, pt.distance)) / n
                assert pt.sigma <= math.log(census.count) / n


def test_local_entropy_argument_errors():
    census = bp_ground_state(BinaryInstance.random(6, 2, 0))
    with pytest.raises(ValueError):
        local_entropy(census, distance=7)
    with pytest.raises(ValueError):
        local_entropy(census, overlap=0.5)  # not on the 1 - 2d/6 grid
    with pytest.raises(ValueError):
        local_entropy(census, distance=1, overlap=2 / 3)
    with pytest.raises(ValueError):
        local_entropy(census, distance=1, reference_policy="best")


def test_local_entropy_csv(tmp_path):
    census = bp_ground_state(BinaryInstance.random(6, 2, 0))
    pts = local_entropy_curve(census, range(7))
    text = write_local_entropy(tmp_path / "le.csv", census, pts)
    lines = text.splitlines()
    assert lines[0] == ",".join(LOCAL_ENTROPY_COLUMNS)
    assert len(lines) == 8


# ---------------------------------------------------------------------------
# zero temperature


@pytest.mark.parametrize("beta", [5.0, 40.0])
def test_zero_temperature_single_pair(beta):
    rng = np.random.default_rng(1)
    x = corner_vectors([5], 4)
    y = build_sphere_samples(3, 1, True, 2)
    G = rng.standard_normal((3, 4))
    res = zero_temperature_check(x, y, G, beta, outer_samples=8)
    ygx = float(y[0] @ G @ x[0])
    assert res.psi * math.sqrt(4) / beta == pytest.approx(-ygx, abs=1e-12)
    assert res.gap == pytest.approx(0.0, abs=1e-12)
    assert res.observed_sign == -1.0


def test_min_max_by_hand():
    X = np.eye(2)
    Y = np.eye(2)
    G = np.array([[1.0, -2.0], [3.0, 0.5]])
    # column x0: max(1, 3) = 3; column x1: max(-2, 0.5) = 0.5
    assert min_max_enumeration(X, Y, G) == 0.5


def test_zero_temperature_argument_checks():
    G = np.ones((2, 2))
    with pytest.raises(ValueError):
        zero_temperature_check(2 * np.eye(2), np.eye(2), G, 10.0)
    bad = LiftingSchedule(1, [1, 0.5, 0], [1, 0.5, 0], [1, 0.5, 0], 10.0, -1.0)
    with pytest.raises(ValueError):
        zero_temperature_check(np.eye(2), np.eye(2), G, 10.0, schedule=bad)
    assert zero_temperature_schedule(3.0).p_schedule == (1.0, 1.0, 0.0)


def test_zero_temperature_gap_shrinks_with_beta():
    n = m = 6
    X = build_binary_sets(n, ("random", 8, 0)).vectors
    Y = build_sphere_samples(m, 8, True, 100)
    G = np.random.default_rng(200).standard_normal((m, n))
    gaps = [zero_temperature_check(X, Y, G, b, seed=0).gap for b in (10.0, 20.0, 40.0)]
    assert gaps[2] <= math.log(8) / 40.0
    assert gaps[2] < gaps[0]
