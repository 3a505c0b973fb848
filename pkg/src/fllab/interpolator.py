"""Interpolating exponents, partition tables, the zeta ladder and psi(t).

Everything is carried in the log domain. For one draw of the randomness

    logA[i1, i2, i3] = beta * D0(i1, i2, i3)
    logC[i1, i3]     = logsumexp_i2 logA
    logZ[i3]         = logsumexp_i1 s * logC

and the ladder climbs from ``log E_{U1} Z^{m1}`` (a log-mean-exp over the
level-1 samples) through ``log zeta_k = log-mean-exp of (m_k / m_{k-1}) *
log zeta_{k-1}`` up to level ``r``. ``psi`` is the outer mean of
``log zeta_r / (p |s| sqrt(n) m_r)``.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from ._io import atomic_write_text, csv_text
from .ensemble import MonteCarloPlan, ProblemDims, sample_tree
from .schedule import validate_schedule


class EmptyInnerSetError(ValueError):
    """An anchor's restriction leaves no admissible inner configuration."""


def log_mean_exp(a, axis=-1):
    a = np.asarray(a, dtype=np.float64)
    if a.shape[axis] == 0:
        raise ValueError("log-mean-exp over zero samples")
    return logsumexp(a, axis=axis) - np.log(a.shape[axis])


def softmax(a, axis=-1):
    """Shifted-exponential normalisation; ``-inf`` entries get weight 0."""
    a = np.asarray(a, dtype=np.float64)
    top = np.max(a, axis=axis, keepdims=True)
    e = np.exp(a - top)
    return e / np.sum(e, axis=axis, keepdims=True)


# ---------------------------------------------------------------------------
# configuration sets


@dataclass
class ConfigurationSets:
    """Finite sets ``X`` (rows ``x^(i1)``), ``Y`` (rows ``y^(i2)``) and anchors.

    ``anchor`` maps an anchor vector ``x_bar`` to a function of ``x`` that is
    evaluated row-wise on ``X`` (``None`` means identically zero).
    ``restriction`` optionally lists, per anchor, the admissible ``X``
    indices, either as a boolean ``(l3, l1)`` mask or as index lists.
    Anchors default to a copy of ``X``.
    """

    x_set: np.ndarray
    y_set: np.ndarray
    x_bar_set: np.ndarray = None
    anchor: object = None
    restriction: object = None
    x_norms: np.ndarray = field(init=False, repr=False)
    y_norms: np.ndarray = field(init=False, repr=False)
    anchor_table: np.ndarray = field(init=False, repr=False)
    allowed: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.x_set = np.atleast_2d(np.asarray(self.x_set, dtype=np.float64))
        self.y_set = np.atleast_2d(np.asarray(self.y_set, dtype=np.float64))
        if self.x_bar_set is None:
            self.x_bar_set = self.x_set.copy()
        self.x_bar_set = np.atleast_2d(np.asarray(self.x_bar_set, dtype=np.float64))
        if self.x_bar_set.shape[1] != self.x_set.shape[1]:
            raise ValueError("anchor vectors must have the same dimension as X")
        if not (np.all(np.isfinite(self.x_set)) and np.all(np.isfinite(self.y_set))):
            raise ValueError("configuration vectors must be finite")
        self.x_norms = np.linalg.norm(self.x_set, axis=1)
        self.y_norms = np.linalg.norm(self.y_set, axis=1)
        l3, l1 = self.x_bar_set.shape[0], self.x_set.shape[0]
        if self.anchor is None:
            self.anchor_table = np.zeros((l3, l1))
        else:
            self.anchor_table = np.array(
                [np.broadcast_to(np.asarray(self.anchor(xb)(self.x_set), dtype=np.float64), (l1,)) for xb in self.x_bar_set]
            )
        self.allowed = _restriction_mask(self.restriction, l3, l1)

    @property
    def l_x(self):
        return self.x_set.shape[0]

    @property
    def l_y(self):
        return self.y_set.shape[0]

    @property
    def l_anchor(self):
        return self.x_bar_set.shape[0]

    @property
    def dims(self):
        return ProblemDims(self.x_set.shape[1], self.y_set.shape[1], self.l_x)

    def norms_consistent(self, rtol=1e-12):
        ok_x = np.allclose(self.x_norms, np.linalg.norm(self.x_set, axis=1), rtol=rtol, atol=0)
        ok_y = np.allclose(self.y_norms, np.linalg.norm(self.y_set, axis=1), rtol=rtol, atol=0)
        return bool(ok_x and ok_y)

    def check_inner_sets(self):
        empty = np.flatnonzero(~self.allowed.any(axis=1))
        if empty.size:
            raise EmptyInnerSetError(f"empty inner set for anchor index {int(empty[0])}")


def _restriction_mask(restriction, l3, l1):
    if restriction is None:
        return np.ones((l3, l1), dtype=bool)
    if isinstance(restriction, np.ndarray) and restriction.dtype == bool:
        if restriction.shape != (l3, l1):
            raise ValueError(f"restriction mask has shape {restriction.shape}, expected {(l3, l1)}")
        return restriction.copy()
    mask = np.zeros((l3, l1), dtype=bool)
    if len(restriction) != l3:
        raise ValueError(f"restriction needs one index list per anchor ({l3})")
    for i3, idx in enumerate(restriction):
        mask[i3, np.asarray(list(idx), dtype=np.int64)] = True
    return mask


# ---------------------------------------------------------------------------
# single-draw objects


def exponent_D0(draw, sets, t, i1, i2, i3):
    """Interpolating exponent for one index triple; ``-inf`` if ``(i1, i3)`` is excluded."""
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must lie in [0, 1], got {t}")
    if not sets.allowed[i3, i1]:
        return -np.inf
    x, y = sets.x_set[i1], sets.y_set[i2]
    nx, ny = np.linalg.norm(x), np.linalg.norm(y)
    u4, u2, h = draw.sums()
    st, sc = np.sqrt(t), np.sqrt(1.0 - t)
    return float(
        st * (y @ draw.g_matrix @ x)
        + sc * nx * (y @ u2)
        + st * nx * ny * u4
        + sc * ny * (h @ x)
        + sets.anchor_table[i3, i1]
    )


@dataclass
class PartitionTable:
    """Log-domain ``A`` (``[i1, i2, i3]``), ``C`` (``[i1, i3]``) and ``Z`` (``[i3]``)."""

    log_a: np.ndarray
    log_c: np.ndarray
    log_z: np.ndarray

    def to_csv(self, path=None):
        rows = []
        l1, l2, l3 = self.log_a.shape
        for i1 in range(l1):
            for i2 in range(l2):
                for i3 in range(l3):
                    rows.append((i1, i2, i3, float(self.log_a[i1, i2, i3]), float(self.log_c[i1, i3]), float(self.log_z[i3])))
        text = csv_text(("i1", "i2", "i3", "log_a", "log_c", "log_z"), rows)
        if path is not None:
            atomic_write_text(path, text)
        return text


def partition_from_log_a(log_a, s):
    """Reduce a ``[i1, i2, i3]`` table of ``log A`` (``-inf`` = excluded) to C and Z."""
    log_a = np.asarray(log_a, dtype=np.float64)
    excluded = np.all(np.isneginf(log_a), axis=1)  # (i1, i3)
    with np.errstate(divide="ignore"):
        log_c = np.where(excluded, -np.inf, logsumexp(np.where(excluded[:, None, :], 0.0, log_a), axis=1))
    if np.any(np.all(excluded, axis=0)):
        raise EmptyInnerSetError(f"empty inner set for anchor index {int(np.flatnonzero(np.all(excluded, axis=0))[0])}")
    # s * (-inf) would flip sign for s < 0, so mask first
    scaled = np.where(excluded, -np.inf, s * np.where(excluded, 0.0, log_c))
    log_z = logsumexp(scaled, axis=0)
    return PartitionTable(log_a=log_a, log_c=log_c, log_z=log_z)


def build_partition(draw, sets, schedule, t):
    """Partition table of one draw at interpolation time ``t``."""
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must lie in [0, 1], got {t}")
    sets.check_inner_sets()
    X, Y = sets.x_set, sets.y_set
    u4, u2, h = draw.sums()
    st, sc = np.sqrt(t), np.sqrt(1.0 - t)
    d0 = (
        st * (Y @ draw.g_matrix @ X.T).T
        + sc * np.outer(sets.x_norms, Y @ u2)
        + st * u4 * np.outer(sets.x_norms, sets.y_norms)
        + sc * np.outer(X @ h, sets.y_norms)
    )  # [i1, i2]
    full = d0[:, :, None] + sets.anchor_table.T[:, None, :]
    log_a = np.where(sets.allowed.T[:, None, :], schedule.beta * full, -np.inf)
    return partition_from_log_a(log_a, schedule.s)


# ---------------------------------------------------------------------------
# the zeta ladder


@dataclass
class ZetaLadder:
    """``log_zeta[k - 1]`` holds ``log zeta_k`` for ``k = 1 .. r``.

    Arrays keep any batch axes and the sample axes of levels above ``k``;
    ``sample_counts[k - 1]`` is the number of level-``k`` samples averaged.
    """

    log_zeta: tuple
    sample_counts: tuple
    log_m1: np.ndarray = None

    @property
    def depth(self):
        return len(self.log_zeta)


def zeta_ladder(log_z, schedule):
    """Climb the ladder from level-1 samples of ``log Z``.

    ``log_z`` has shape ``(..., N_r, ..., N_1, l3)``; any leading axes are
    treated as a batch.
    """
    r = schedule.r
    log_z = np.asarray(log_z, dtype=np.float64)
    if log_z.ndim < r + 1:
        raise ValueError(f"need {r} sample axes plus an anchor axis, got shape {log_z.shape}")
    counts = log_z.shape[-(r + 1) : -1]
    if any(c == 0 for c in counts):
        raise ValueError("zero samples at some level")
    m, p = schedule.m_schedule, schedule.group_exponent
    log_m1 = log_mean_exp(m[1] * log_z, axis=-2)
    levels = [logsumexp(p * log_m1, axis=-1)]
    for k in range(2, r + 1):
        levels.append(log_mean_exp((m[k] / m[k - 1]) * levels[-1], axis=-1))
    return ZetaLadder(tuple(levels), tuple(reversed(counts)), log_m1)


def zeta_ladder_from_level1(log_zeta1, schedule):
    """Climb from given ``log zeta_1`` samples of shape ``(..., N_r, ..., N_2)``."""
    r = schedule.r
    log_zeta1 = np.asarray(log_zeta1, dtype=np.float64)
    counts = log_zeta1.shape[log_zeta1.ndim - (r - 1) :] if r > 1 else ()
    if any(c == 0 for c in counts):
        raise ValueError("zero samples at some level")
    m = schedule.m_schedule
    levels = [log_zeta1]
    for k in range(2, r + 1):
        levels.append(log_mean_exp((m[k] / m[k - 1]) * levels[-1], axis=-1))
    return ZetaLadder(tuple(levels), (1,) + tuple(reversed(counts)))


# ---------------------------------------------------------------------------
# vectorised evaluation of a whole sample tree


@dataclass
class TreeState:
    """All per-node quantities of one sample tree at one ``t``.

    Shapes use ``leaf = (N_out, N_r, ..., N_1)`` and ``node_k`` for the node
    shape of level ``k`` (``node_{r+1} = (N_out,)``).

    ``p_inner``  leaf + (l1, l2): ``A / C`` (softmax over ``i2``)
    ``p_outer``  leaf + (l3, l1): ``C^s / Z`` (softmax over admissible ``i1``)
    ``log_z``    leaf + (l3,)
    ``w1``       leaf + (l3,): level-1 reweighting, normalised over ``j1``
    ``log_m1``   node_2 + (l3,): ``log E_{U1} Z^{m1}``
    ``gamma00``  node_2 + (l3,)
    ``log_zeta`` list, entry ``k - 1`` on node_{k+1}
    ``w_level``  dict ``k -> weights on node_k`` for ``k = 2 .. r``
    """

    schedule: object
    t: float
    p_inner: np.ndarray
    p_outer: np.ndarray
    log_z: np.ndarray
    w1: np.ndarray
    log_m1: np.ndarray
    gamma00: np.ndarray
    log_zeta: list
    w_level: dict
    psi_samples: np.ndarray

    @property
    def r(self):
        return self.schedule.r

    @property
    def n_outer(self):
        return self.p_inner.shape[0]


def _broadcast_level(arr, node_shape, leaf_ndim, trailing):
    extra = leaf_ndim - len(node_shape)
    return arr.reshape(node_shape + (1,) * extra + trailing)


def _leaf_sums(tree, schedule):
    leaf = tree.leaf_shape
    m, n = tree.dims.y_dim, tree.dims.x_dim
    su4 = np.zeros(leaf)
    su2 = np.zeros(leaf + (m,))
    sh = np.zeros(leaf + (n,))
    for k in range(1, tree.r + 2):
        sd4, sd2, sdh = schedule.level_stddevs(k)
        node = tree.node_shape(k)
        if sd4 > 0:
            su4 = su4 + sd4 * _broadcast_level(tree.u4[k - 1], node, len(leaf), ())
        if sd2 > 0:
            su2 = su2 + sd2 * _broadcast_level(tree.u2[k - 1], node, len(leaf), (m,))
        if sdh > 0:
            sh = sh + sdh * _broadcast_level(tree.h[k - 1], node, len(leaf), (n,))
    return su4, su2, sh


def _evaluate_block(tree, sets, schedule, t, control_variate):
    r = schedule.r
    leaf = tree.leaf_shape
    nd = len(leaf)
    X, Y = sets.x_set, sets.y_set
    xn, yn = sets.x_norms, sets.y_norms
    beta, s = schedule.beta, schedule.s
    st, sc = np.sqrt(t), np.sqrt(1.0 - t)

    if tree.fixed_g is not None:
        ygx = np.einsum("bm,mn,an->ab", Y, tree.fixed_g, X)[None]
    else:
        ygx = np.einsum("bm,omn,an->oab", Y, tree.g, X)
    ygx = ygx.reshape((ygx.shape[0],) + (1,) * (nd - 1) + ygx.shape[1:])

    su4, su2, sh = _leaf_sums(tree, schedule)
    yu = np.einsum("...m,bm->...b", su2, Y)
    xh = np.einsum("...n,an->...a", sh, X)
    d0 = (
        st * ygx
        + sc * xn[:, None] * yu[..., None, :]
        + st * np.multiply.outer(su4, np.outer(xn, yn))
        + sc * yn[None, :] * xh[..., :, None]
    )
    bd = beta * d0
    log_c0 = logsumexp(bd, axis=-1)
    p_inner = np.exp(bd - log_c0[..., None])

    log_c = log_c0[..., None, :] + beta * sets.anchor_table
    allowed = sets.allowed
    scaled = np.where(allowed, s * np.where(allowed, log_c, 0.0), -np.inf)
    log_z = logsumexp(scaled, axis=-1)
    p_outer = np.exp(scaled - log_z[..., None])

    m, p = schedule.m_schedule, schedule.group_exponent
    a1 = m[1] * log_z
    log_m1 = log_mean_exp(a1, axis=-2)
    w1 = softmax(a1, axis=-2)
    log_zeta = [logsumexp(p * log_m1, axis=-1)]
    gamma00 = np.exp(p * log_m1 - log_zeta[0][..., None])
    w_level = {}
    for k in range(2, r + 1):
        b = (m[k] / m[k - 1]) * log_zeta[-1]
        w_level[k] = softmax(b, axis=-1)
        log_zeta.append(log_mean_exp(b, axis=-1))

    if p > 0:
        psi = log_zeta[-1] / (p * abs(s) * np.sqrt(tree.dims.x_dim) * m[r])
    else:
        psi = np.full(log_zeta[-1].shape, np.nan)
    if control_variate:
        psi = psi - control_shift(tree, schedule, t)
    return TreeState(schedule, t, p_inner, p_outer, log_z, w1, log_m1, gamma00, log_zeta, w_level, psi)


def control_shift(tree, schedule, t):
    """Mean-zero part of psi carried by the top-level ``u4`` draw.

    With unit norms the top ``u4`` shifts every exponent by the same amount,
    which passes through the whole ladder and moves each outer sample of
    psi by exactly ``sign(s) beta sqrt(t) u4 / sqrt(n)``.
    """
    sd4 = schedule.level_stddevs(schedule.r + 1)[0]
    u4_top = sd4 * tree.u4[schedule.r]
    return np.sign(schedule.s) * schedule.beta * np.sqrt(t) * u4_top / np.sqrt(tree.dims.x_dim)


_STATE_FIELDS = ("p_inner", "p_outer", "log_z", "w1", "log_m1", "gamma00", "psi_samples")


def evaluate_tree(tree, sets, schedule, t, control_variate=False, threads=1):
    """Evaluate every node of ``tree`` at ``t``.

    Outer samples are split into contiguous blocks for ``threads`` workers
    and the blocks are concatenated in index order, so results do not depend
    on the thread count.
    """
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must lie in [0, 1], got {t}")
    if tree.r != schedule.r:
        raise ValueError(f"tree depth {tree.r} does not match schedule r = {schedule.r}")
    _check_dims(tree.dims, sets)
    sets.check_inner_sets()
    threads = max(1, int(threads))
    n_out = tree.plan.n_outer
    if threads == 1 or n_out == 1:
        return _evaluate_block(tree, sets, schedule, t, control_variate)
    bounds = np.linspace(0, n_out, min(threads, n_out) + 1).astype(int)
    blocks = [tree.outer_slice(a, b) for a, b in zip(bounds[:-1], bounds[1:])]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        parts = list(pool.map(lambda tr: _evaluate_block(tr, sets, schedule, t, control_variate), blocks))
    return _concat_states(parts)


def _concat_states(parts):
    first = parts[0]
    merged = {name: np.concatenate([getattr(pt, name) for pt in parts]) for name in _STATE_FIELDS}
    log_zeta = [np.concatenate([pt.log_zeta[i] for pt in parts]) for i in range(len(first.log_zeta))]
    w_level = {k: np.concatenate([pt.w_level[k] for pt in parts]) for k in first.w_level}
    return TreeState(first.schedule, first.t, log_zeta=log_zeta, w_level=w_level, **merged)


def _check_dims(dims, sets):
    if sets.x_set.shape[1] != dims.x_dim or sets.y_set.shape[1] != dims.y_dim:
        raise ValueError(
            f"sets have x/y dimensions {sets.x_set.shape[1]}/{sets.y_set.shape[1]}, "
            f"expected {dims.x_dim}/{dims.y_dim}"
        )


# ---------------------------------------------------------------------------
# psi estimation


@dataclass
class PsiEstimate:
    value: float
    stderr: float
    samples: np.ndarray = field(repr=False, default=None)

    def __iter__(self):
        return iter((self.value, self.stderr))


def mean_and_stderr(samples):
    samples = np.asarray(samples, dtype=np.float64)
    value = float(np.mean(samples))
    se = float(np.std(samples, ddof=1) / np.sqrt(samples.size)) if samples.size > 1 else 0.0
    return value, se


def prepare_tree(dims, schedule, plan, fixed_g=None, backend=None):
    if not isinstance(plan, MonteCarloPlan):
        raise TypeError("plan must be a MonteCarloPlan")
    return sample_tree(dims, schedule.r, plan, fixed_g=fixed_g, backend=backend)


def psi_estimate(dims, sets, schedule, t, plan, *, tree=None, fixed_g=None, control_variate=False, threads=1, backend=None):
    """Monte Carlo estimate of psi(t) with its standard error.

    Pass ``tree`` to reuse draws across calls (common random numbers);
    otherwise the tree is generated from ``plan``.
    """
    schedule = validate_schedule(schedule)
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must lie in [0, 1], got {t}")
    if schedule.group_exponent <= 0:
        raise ValueError("psi needs a positive group exponent")
    if tree is None:
        tree = prepare_tree(dims, schedule, plan, fixed_g=fixed_g, backend=backend)
    state = evaluate_tree(tree, sets, schedule, t, control_variate=control_variate, threads=threads)
    value, se = mean_and_stderr(state.psi_samples)
    return PsiEstimate(value, se, state.psi_samples)


PSI_TRACE_COLUMNS = ("t", "psi", "stderr", "outer_samples", "per_level_samples", "seed")


def psi_trace_rows(t_grid, estimates, plan):
    per_level = ";".join(str(c) for c in plan.per_level)
    return [
        {
            "t": float(t),
            "psi": est.value,
            "stderr": est.stderr,
            "outer_samples": plan.n_outer,
            "per_level_samples": per_level,
            "seed": plan.seed,
        }
        for t, est in zip(t_grid, estimates)
    ]


def write_psi_trace(path, rows, header_lines=()):
    atomic_write_text(path, csv_text(PSI_TRACE_COLUMNS, rows, header_lines))
