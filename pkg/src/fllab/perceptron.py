"""Perceptron applications: binary and spherical sets, exhaustive ground
states, local entropy and the zero-temperature comparison.

Hypercube corners are addressed by integers: bit ``i`` of corner ``c`` set
means ``x_i = +1/sqrt(n)``, clear means ``-1/sqrt(n)``. A corner solves an
instance when every entry of ``G x`` is nonpositive, i.e. when its energy
``||(G x)_+||_2`` is at most ``1e-10``.
"""

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from ._io import atomic_write_text, csv_text
from .ensemble import MonteCarloPlan, ProblemDims
from .interpolator import ConfigurationSets, EmptyInnerSetError, psi_estimate
from .schedule import LiftingSchedule, validate_schedule

SOLUTION_THRESHOLD = 1e-10
MAX_CENSUS_N = 24
MAX_ENTROPY_N = 18
MAX_FULL_SET_N = 20


# ---------------------------------------------------------------------------
# configuration sets


def corner_vectors(corners, n):
    """Rows ``x`` for the given corner integers."""
    corners = np.asarray(corners, dtype=np.int64)
    bits = (corners[:, None] >> np.arange(n)) & 1
    return (2.0 * bits - 1.0) / np.sqrt(n)


@dataclass
class BinarySet:
    vectors: np.ndarray
    corners: np.ndarray


def build_binary_sets(n, subset_spec="full"):
    """Scaled hypercube corners.

    ``subset_spec`` is ``"full"`` (every corner, ``n <= 20``), an explicit
    sequence of corner integers, or ``("random", count, seed)`` for distinct
    corners drawn without replacement.
    """
    total = 1 << n
    if isinstance(subset_spec, str):
        if subset_spec != "full":
            raise ValueError(f"unknown subset spec {subset_spec!r}")
        if n > MAX_FULL_SET_N:
            raise ValueError(f"full enumeration is limited to n <= {MAX_FULL_SET_N}")
        corners = np.arange(total, dtype=np.int64)
    elif isinstance(subset_spec, tuple) and subset_spec and subset_spec[0] == "random":
        _, count, seed = subset_spec
        if count > total:
            raise ValueError(f"cannot pick {count} corners out of 2^{n} = {total}")
        rng = np.random.default_rng(seed)
        if total <= 1 << 22:
            corners = np.sort(rng.choice(total, size=count, replace=False))
        else:
            picked = set()
            while len(picked) < count:
                picked.add(int(rng.integers(total)))
            corners = np.array(sorted(picked), dtype=np.int64)
    else:
        corners = np.asarray(list(subset_spec), dtype=np.int64)
        if corners.size > total:
            raise ValueError(f"cannot pick {corners.size} corners out of 2^{n} = {total}")
        if corners.size and (corners.min() < 0 or corners.max() >= total):
            raise ValueError("corner index out of range")
    return BinarySet(corner_vectors(corners, n), corners)


def build_sphere_samples(dim, count, positive_orthant=False, seed=0):
    """Unit vectors from normalised Gaussians, optionally folded into the positive orthant."""
    if count < 1:
        raise ValueError("count must be >= 1")
    z = np.random.default_rng(seed).normal(size=(count, dim))
    if positive_orthant:
        z = np.abs(z)
    return z / np.linalg.norm(z, axis=1, keepdims=True)


def anchor_soft(nu, delta_bar, x_bar):
    """``f(x) = nu (x_bar . x - delta_bar)``, evaluated row-wise on 2-D input."""
    x_bar = np.asarray(x_bar, dtype=np.float64)

    def f(x):
        return nu * (np.asarray(x, dtype=np.float64) @ x_bar - delta_bar)

    return f


def soft_anchor_family(nu, delta_bar):
    """Anchor family usable as ``ConfigurationSets.anchor``."""
    return lambda x_bar: anchor_soft(nu, delta_bar, x_bar)


def restrict_overlap(x_set, x_bar, delta_bar, tolerance=1e-9, allow_empty=False):
    """Indices of rows of ``x_set`` whose overlap with ``x_bar`` equals ``delta_bar``."""
    overlaps = np.asarray(x_set, dtype=np.float64) @ np.asarray(x_bar, dtype=np.float64)
    idx = np.flatnonzero(np.abs(overlaps - delta_bar) <= tolerance)
    if idx.size == 0 and not allow_empty:
        raise EmptyInnerSetError(f"no configuration at overlap {delta_bar}")
    return idx


def max_posorthant(v):
    """``max_{y >= 0, ||y|| = 1} y . v``, attained at ``v_+ / ||v_+||``."""
    v = np.asarray(v, dtype=np.float64)
    return float(np.linalg.norm(np.maximum(v, 0.0)))


# ---------------------------------------------------------------------------
# instances and censuses


@dataclass
class BinaryInstance:
    g_matrix: np.ndarray
    seed: int = None

    def __post_init__(self):
        self.g_matrix = np.atleast_2d(np.asarray(self.g_matrix, dtype=np.float64))
        if not np.all(np.isfinite(self.g_matrix)):
            raise ValueError("instance matrix must be finite")

    @property
    def m(self):
        return self.g_matrix.shape[0]

    @property
    def n(self):
        return self.g_matrix.shape[1]

    @property
    def alpha(self):
        return self.m / self.n

    @classmethod
    def random(cls, n, m, seed):
        return cls(np.random.default_rng(seed).normal(size=(m, n)), seed)


def corner_energy(g_matrix, corner):
    n = g_matrix.shape[1]
    return max_posorthant(g_matrix @ corner_vectors([corner], n)[0])


@dataclass
class SolutionCensus:
    n: int
    m: int
    bits: np.ndarray  # packed little-endian over the 2^n corners
    count: int
    ground_state_energy: float
    ground_state_corner: int
    seed: int = None
    threshold: float = SOLUTION_THRESHOLD

    def solutions(self):
        flags = np.unpackbits(self.bits, bitorder="little", count=1 << self.n)
        return np.flatnonzero(flags).astype(np.uint64)

    def is_solution(self, corner):
        return bool((self.bits[corner >> 3] >> (corner & 7)) & 1)

    def runs(self):
        """Run lengths of the bit string, starting with a run of non-solutions."""
        flags = np.unpackbits(self.bits, bitorder="little", count=1 << self.n).astype(np.int8)
        edges = np.flatnonzero(np.diff(flags)) + 1
        bounds = np.concatenate(([0], edges, [flags.size]))
        lengths = np.diff(bounds).tolist()
        if flags[0] == 1:
            lengths = [0] + lengths
        return lengths

    def to_json(self):
        return json.dumps(
            {
                "n": self.n,
                "m": self.m,
                "seed": self.seed,
                "threshold": self.threshold,
                "count": self.count,
                "ground_state_energy": self.ground_state_energy,
                "ground_state_corner": self.ground_state_corner,
                "runs": self.runs(),
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text):
        rec = json.loads(text)
        flags = np.zeros(1 << rec["n"], dtype=np.uint8)
        pos, value = 0, 0
        for length in rec["runs"]:
            flags[pos : pos + length] = value
            pos += length
            value ^= 1
        return cls(
            n=rec["n"],
            m=rec["m"],
            bits=np.packbits(flags, bitorder="little"),
            count=rec["count"],
            ground_state_energy=rec["ground_state_energy"],
            ground_state_corner=rec["ground_state_corner"],
            seed=rec["seed"],
            threshold=rec["threshold"],
        )


def bp_ground_state(instance, backend=None, threshold=SOLUTION_THRESHOLD):
    """Exhaustive census of the hypercube via Gray-code updates of ``G x``."""
    n = instance.n
    if n > MAX_CENSUS_N:
        raise ValueError(f"enumeration is limited to n <= {MAX_CENSUS_N}, got {n}")
    energies = _kernels.gray_energies(instance.g_matrix, 1.0 / np.sqrt(n), backend=backend)
    flags = energies <= threshold
    best = int(np.argmin(energies))
    # report the minimiser's energy from a fresh product, not the running update
    ground = corner_energy(instance.g_matrix, best)
    return SolutionCensus(
        n=n,
        m=instance.m,
        bits=np.packbits(flags.astype(np.uint8), bitorder="little"),
        count=int(np.count_nonzero(flags)),
        ground_state_energy=ground,
        ground_state_corner=best,
        seed=instance.seed,
        threshold=threshold,
    )


# ---------------------------------------------------------------------------
# local entropy


@dataclass
class LocalEntropyPoint:
    distance: int
    overlap: float
    best_reference_index: int
    cluster_count: int
    sigma: float  # None when empty
    reference_policy: str

    @property
    def empty(self):
        return self.cluster_count == 0


POLICIES = ("allCorners", "solutionsOnly")


def _distance_of(n, distance=None, overlap=None):
    if (distance is None) == (overlap is None):
        raise ValueError("give exactly one of distance or overlap")
    if distance is None:
        d_float = n * (1.0 - overlap) / 2.0
        distance = int(round(d_float))
        if abs(d_float - distance) > 1e-9:
            raise ValueError(f"overlap {overlap} is off the grid 1 - 2d/{n}")
    if not 0 <= distance <= n:
        raise ValueError(f"distance must lie in [0, {n}], got {distance}")
    return int(distance)


def distance_histogram(census, reference_policy, backend=None):
    """``(refs, hist)`` with ``hist[a, d]`` = solutions at distance ``d`` from ``refs[a]``."""
    n = census.n
    if n > MAX_ENTROPY_N:
        raise ValueError(f"local entropy is limited to n <= {MAX_ENTROPY_N}, got {n}")
    if reference_policy not in POLICIES:
        raise ValueError(f"reference policy must be one of {POLICIES}")
    sols = census.solutions()
    refs = np.arange(1 << n, dtype=np.uint64) if reference_policy == "allCorners" else sols
    return refs, _kernels.popcount_histogram(refs, sols, n, backend=backend)


def _point(n, d, refs, hist, policy):
    overlap = 1.0 - 2.0 * d / n
    if refs.size == 0:
        return LocalEntropyPoint(d, overlap, -1, 0, None, policy)
    col = hist[:, d]
    a = int(np.argmax(col))  # first maximiser on ties
    count = int(col[a])
    if count == 0:
        return LocalEntropyPoint(d, overlap, -1, 0, None, policy)
    return LocalEntropyPoint(d, overlap, int(refs[a]), count, math.log(count) / n, policy)


def local_entropy(census, distance=None, overlap=None, reference_policy="solutionsOnly", backend=None):
    """Largest number of solutions at exact distance ``d`` from one reference."""
    d = _distance_of(census.n, distance, overlap)
    refs, hist = distance_histogram(census, reference_policy, backend)
    return _point(census.n, d, refs, hist, reference_policy)


def local_entropy_curve(census, d_grid, reference_policy="solutionsOnly", backend=None):
    refs, hist = distance_histogram(census, reference_policy, backend)
    return [_point(census.n, _distance_of(census.n, distance=d), refs, hist, reference_policy) for d in d_grid]


LOCAL_ENTROPY_COLUMNS = ("n", "m", "alpha", "seed", "d", "overlap", "count", "sigma", "reference_policy")


def local_entropy_rows(census, points):
    return [
        {
            "n": census.n,
            "m": census.m,
            "alpha": census.m / census.n,
            "seed": census.seed,
            "d": pt.distance,
            "overlap": pt.overlap,
            "count": pt.cluster_count,
            "sigma": "empty" if pt.empty else pt.sigma,
            "reference_policy": pt.reference_policy,
        }
        for pt in points
    ]


def write_local_entropy(path, census, points, header_lines=()):
    text = csv_text(LOCAL_ENTROPY_COLUMNS, local_entropy_rows(census, points), header_lines)
    atomic_write_text(path, text)
    return text


# ---------------------------------------------------------------------------
# zero temperature


@dataclass
class ZeroTemperatureResult:
    psi: float
    psi_stderr: float
    psi_scaled: float
    psi_scaled_stderr: float
    min_max_enum: float
    gap: float
    beta: float
    observed_sign: float = field(default=0.0)

    def __iter__(self):
        return iter((self.psi_scaled, self.min_max_enum, self.gap))


def zero_temperature_schedule(beta):
    return validate_schedule(LiftingSchedule(1, [1.0, 1.0, 0.0], [1.0, 1.0, 0.0], [1.0, 1.0, 0.0], beta, -1.0, 1.0))


def min_max_enumeration(x_set, y_set, g_matrix):
    """``min_x max_y y^T G x`` over finite sets by direct enumeration."""
    table = np.asarray(y_set) @ np.asarray(g_matrix) @ np.asarray(x_set).T  # [y, x]
    return float(np.min(np.max(table, axis=0)))


def zero_temperature_check(x_set, y_set, g_matrix, beta, schedule=None, seed=0, outer_samples=64, control_variate=True):
    """Compare ``|psi(1)| sqrt(n) / beta`` with the magnitude of the finite min-max.

    ``g_matrix`` is the fixed instance; only the level draws are averaged.
    The anchor set is a single zero vector with a vanishing anchor, so no
    anchor-count term enters psi. With ``control_variate`` the top-level
    ``u4`` shift, exactly mean zero, is removed sample by sample.
    """
    schedule = zero_temperature_schedule(beta) if schedule is None else validate_schedule(schedule)
    if schedule.r != 1 or schedule.s != -1.0 or schedule.group_exponent != 1.0:
        raise ValueError("zero-temperature check needs r = 1, s = -1 and group exponent 1")
    if schedule.p_schedule != (1.0, 1.0, 0.0) or schedule.q_schedule != (1.0, 1.0, 0.0):
        raise ValueError("zero-temperature check needs p = q = [1, 1, 0]")
    x_set = np.atleast_2d(np.asarray(x_set, dtype=np.float64))
    y_set = np.atleast_2d(np.asarray(y_set, dtype=np.float64))
    for name, arr in (("X", x_set), ("Y", y_set)):
        if not np.allclose(np.linalg.norm(arr, axis=1), 1.0, rtol=0, atol=1e-12):
            raise ValueError(f"{name} must contain unit-norm vectors")
    n, m = x_set.shape[1], y_set.shape[1]
    sets = ConfigurationSets(x_set, y_set, x_bar_set=np.zeros((1, n)))
    dims = ProblemDims(n, m, x_set.shape[0])
    plan = MonteCarloPlan(outer_samples, (1,), seed=seed)
    est = psi_estimate(dims, sets, schedule, 1.0, plan, fixed_g=g_matrix, control_variate=control_variate)
    scale = np.sqrt(n) / beta
    mm = min_max_enumeration(x_set, y_set, g_matrix)
    psi_scaled = float(abs(est.value) * scale)
    # psi(1) sqrt(n) / beta tends to minus the min-max; compare magnitudes, keep the sign
    return ZeroTemperatureResult(
        psi=est.value,
        psi_stderr=est.stderr,
        psi_scaled=psi_scaled,
        psi_scaled_stderr=float(est.stderr * scale),
        min_max_enum=mm,
        gap=abs(psi_scaled - abs(mm)),
        beta=float(beta),
        observed_sign=float(np.sign(est.value) * np.sign(mm)) if mm != 0 else 0.0,
    )
