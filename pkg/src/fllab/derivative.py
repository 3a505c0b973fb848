"""Closed-form dpsi/dt from gamma averages, and its finite-difference oracle.

The closed form is

    dpsi/dt = sign(s) beta^2 / (2 sqrt(n)) * (sum_{k1=1}^{r+1} phi_{k1} + phi22 + phi01 + phi02)

with overlap observables averaged under the gamma family of each term. The
oracle differentiates the psi estimator itself: a central difference on a
single shared sample tree, with its standard error taken from per-outer
paired differences.
"""

from dataclasses import dataclass, field

import numpy as np

from ._io import atomic_write_text, csv_text
from .interpolator import build_partition, evaluate_tree, mean_and_stderr, prepare_tree
from .measures import per_sample_values
from .schedule import omega, validate_schedule


def _check_open_t(t):
    if not 0.0 < t < 1.0:
        raise ValueError(f"t must lie in (0, 1), got {t}")


def overlap_factors(sets, p_val, q_val):
    """``Ox[i1, p1] = p ||x_i|| ||x_p|| - x_p.x_i`` and the same for ``y`` with ``q``."""
    X, Y = sets.x_set, sets.y_set
    ox = p_val * np.outer(sets.x_norms, sets.x_norms) - X @ X.T
    oy = q_val * np.outer(sets.y_norms, sets.y_norms) - Y @ Y.T
    return ox, oy


def overlap_observable(sets, p_val, q_val):
    ox, oy = overlap_factors(sets, p_val, q_val)

    def obs(i1, i2, i3, p1, p2, p3):
        return ox[i1, p1] * oy[i2, p2]

    return obs


def norm_observable(sets):
    xn2, yn2 = sets.x_norms**2, sets.y_norms**2

    def obs(i1, i2, i3, p1, p2, p3):
        return xn2[i1] * yn2[i2]

    return obs


def cross_observable(sets, q0):
    xn2 = sets.x_norms**2
    oy = q0 * np.outer(sets.y_norms, sets.y_norms) - sets.y_set @ sets.y_set.T

    def obs(i1, i2, i3, p1, p2, p3):
        return xn2[i1] * oy[i2, p2]

    return obs


@dataclass
class PhiTermSet:
    """Per-term estimates; ``samples`` holds the per-outer-sample values."""

    phi_k: tuple
    phi22: float
    phi01: float
    phi02: float
    se_k: tuple
    se22: float
    se01: float
    se02: float
    derivative_value: float
    derivative_stderr: float
    samples: dict = field(repr=False, default_factory=dict)


def _family_for(k1):
    return {1: "gamma1", 2: "gamma21"}.get(k1, f"gamma{k1}")


def phi_samples(state, sets, schedule):
    """Per-outer samples of every phi term on an evaluated tree."""
    r, s = schedule.r, schedule.s
    m, pv, qv = schedule.m_schedule, schedule.p_schedule, schedule.q_schedule
    p = schedule.group_exponent
    out = {}
    for k1 in range(1, r + 2):
        coef = -s * (m[k1 - 1] - m[k1]) * omega(k1, p)
        obs = overlap_observable(sets, pv[k1 - 1], qv[k1 - 1])
        out[f"phi{k1}"] = coef * per_sample_values(obs, _family_for(k1), state)
    out["phi22"] = s * m[1] * (p - 1.0) * per_sample_values(overlap_observable(sets, pv[1], qv[1]), "gamma22", state)
    out["phi01"] = (1.0 - pv[0]) * (1.0 - qv[0]) * per_sample_values(norm_observable(sets), "gamma01", state)
    out["phi02"] = (s - 1.0) * (1.0 - pv[0]) * per_sample_values(cross_observable(sets, qv[0]), "gamma02", state)
    return out


def derivative_prefactor(schedule, x_dim):
    return np.sign(schedule.s) * schedule.beta**2 / (2.0 * np.sqrt(x_dim))


def assemble(samples, schedule, x_dim):
    r = schedule.r
    total = sum(samples[f"phi{k}"] for k in range(1, r + 2)) + samples["phi22"] + samples["phi01"] + samples["phi02"]
    deriv = derivative_prefactor(schedule, x_dim) * total
    stats = {name: mean_and_stderr(v) for name, v in samples.items()}
    d_val, d_se = mean_and_stderr(deriv)
    return PhiTermSet(
        phi_k=tuple(stats[f"phi{k}"][0] for k in range(1, r + 2)),
        phi22=stats["phi22"][0],
        phi01=stats["phi01"][0],
        phi02=stats["phi02"][0],
        se_k=tuple(stats[f"phi{k}"][1] for k in range(1, r + 2)),
        se22=stats["phi22"][1],
        se01=stats["phi01"][1],
        se02=stats["phi02"][1],
        derivative_value=d_val,
        derivative_stderr=d_se,
        samples=dict(samples, derivative=deriv),
    )


def phi_terms(dims, sets, schedule, t, plan, *, tree=None, threads=1, backend=None):
    """Every phi term of the closed-form derivative at ``t``."""
    _check_open_t(t)
    schedule = validate_schedule(schedule)
    if tree is None:
        tree = prepare_tree(dims, schedule, plan, backend=backend)
    state = evaluate_tree(tree, sets, schedule, t, threads=threads)
    return assemble(phi_samples(state, sets, schedule), schedule, dims.x_dim)


@dataclass
class DerivativeEstimate:
    value: float
    stderr: float
    samples: np.ndarray = field(repr=False, default=None)

    def __iter__(self):
        return iter((self.value, self.stderr))


def dpsi_dt_closed(dims, sets, schedule, t, plan, *, tree=None, threads=1, backend=None):
    terms = phi_terms(dims, sets, schedule, t, plan, tree=tree, threads=threads, backend=backend)
    return DerivativeEstimate(terms.derivative_value, terms.derivative_stderr, terms.samples["derivative"])


def dpsi_dt_fd(dims, sets, schedule, t, h, plan, *, tree=None, threads=1, backend=None):
    """Central difference of the psi estimator on one shared tree."""
    if h <= 0:
        raise ValueError(f"step must be positive, got {h}")
    if not (0.0 < t - h and t + h < 1.0):
        raise ValueError(f"t +/- h must stay inside (0, 1), got t = {t}, h = {h}")
    schedule = validate_schedule(schedule)
    if schedule.group_exponent <= 0:
        raise ValueError("psi needs a positive group exponent")
    if tree is None:
        tree = prepare_tree(dims, schedule, plan, backend=backend)
    up = evaluate_tree(tree, sets, schedule, t + h, threads=threads).psi_samples
    down = evaluate_tree(tree, sets, schedule, t - h, threads=threads).psi_samples
    diff = (up - down) / (2.0 * h)
    value, se = mean_and_stderr(diff)
    return DerivativeEstimate(value, se, diff)


# ---------------------------------------------------------------------------
# direct first-level route (r = 1), built from per-path partition tables


def level1_phi_samples(tree, sets, schedule, t):
    """Five first-level terms computed path by path, without the tree machinery.

    Returns per-outer samples keyed ``phi1``, ``phi21``, ``phi22``, ``phi01``
    and ``phi02``. Meant as an independent cross-check for ``r = 1``.
    """
    if schedule.r != 1:
        raise ValueError("the direct route covers r = 1 only")
    s, p = schedule.s, schedule.group_exponent
    m1 = schedule.m_schedule[1]
    p0, p1 = schedule.p_schedule[0], schedule.p_schedule[1]
    q0, q1 = schedule.q_schedule[0], schedule.q_schedule[1]
    ox0, oy0 = overlap_factors(sets, p0, q0)
    ox1, oy1 = overlap_factors(sets, p1, q1)
    xn2, yn2 = sets.x_norms**2, sets.y_norms**2
    yy = sets.y_set @ sets.y_set.T
    n1 = tree.plan.per_level[0]
    keys = ("phi1", "phi21", "phi22", "phi01", "phi02")
    out = {k: np.empty(tree.plan.n_outer) for k in keys}
    for o in range(tree.plan.n_outer):
        tables = [build_partition(tree.path_draw(schedule, o, (j,)), sets, schedule, t) for j in range(n1)]
        log_z = np.array([tb.log_z for tb in tables])  # (j, i3)
        top = log_z.max(axis=0)
        raw = np.exp(m1 * (log_z - top))
        w = raw / raw.sum(axis=0)
        log_mean = m1 * top + np.log(raw.mean(axis=0))
        g00 = np.exp(p * (log_mean - log_mean.max()))
        g00 = g00 / g00.sum()
        # per (j, i3): C^s / Z over i1 and A / C over i2; zero on excluded pairs
        outer_w = np.array([_outer_weights(tb, s) for tb in tables])  # (j, i3, i1)
        inner_w = np.array([_inner_weights(tb) for tb in tables])  # (j, i3, i1, i2)
        g0 = outer_w[:, :, :, None] * inner_w
        t1 = t01 = t02 = 0.0
        nu = np.zeros(g0.shape[1:])
        for j in range(n1):
            for c in range(g0.shape[1]):
                wc = g00[c] * w[j, c]
                gi = g0[j, c]
                t1 += wc * np.sum(gi[:, :, None, None] * gi[None, None, :, :] * ox0[:, None, :, None] * oy0[None, :, None, :])
                t01 += wc * np.sum(gi * xn2[:, None] * yn2[None, :])
                pairs = inner_w[j, c][:, :, None] * inner_w[j, c][:, None, :]  # (i1, i2, p2)
                t02 += wc * np.sum(outer_w[j, c][:, None, None] * pairs * xn2[:, None, None] * (q0 * np.outer(sets.y_norms, sets.y_norms) - yy)[None])
                nu[c] += w[j, c] * gi
        marg = g00[:, None, None] * nu
        flat = marg.sum(axis=0)
        t21 = np.sum(flat[:, :, None, None] * flat[None, None, :, :] * ox1[:, None, :, None] * oy1[None, :, None, :])
        t22 = sum(
            g00[c] * np.sum(nu[c][:, :, None, None] * nu[c][None, None, :, :] * ox1[:, None, :, None] * oy1[None, :, None, :])
            for c in range(nu.shape[0])
        )
        out["phi1"][o] = -s * (1.0 - m1) * t1
        out["phi21"][o] = -s * m1 * p * t21
        out["phi22"][o] = s * m1 * (p - 1.0) * t22
        out["phi01"][o] = (1.0 - p0) * (1.0 - q0) * t01
        out["phi02"][o] = (s - 1.0) * (1.0 - p0) * t02
    return out


def _outer_weights(table, s):
    ok = np.isfinite(table.log_c)  # (i1, i3)
    w = np.zeros(table.log_c.shape)
    w[ok] = np.exp(s * table.log_c[ok] - np.broadcast_to(table.log_z, ok.shape)[ok])
    return w.T


def _inner_weights(table):
    l1, l2, l3 = table.log_a.shape
    w = np.zeros((l3, l1, l2))
    for c in range(l3):
        for i1 in range(l1):
            if np.isfinite(table.log_c[i1, c]):
                w[c, i1] = np.exp(table.log_a[i1, :, c] - table.log_c[i1, c])
    return w


# ---------------------------------------------------------------------------
# consistency battery


@dataclass
class ConsistencyRow:
    r: int
    t: float
    h: float
    closed: float
    se_closed: float
    fd: float
    se_fd: float
    z: float
    seed: int
    samples: str

    @property
    def flagged(self):
        return abs(self.z) > 3.0


CONSISTENCY_COLUMNS = ("r", "t", "h", "closed", "se_closed", "fd", "se_fd", "z", "seed", "samples")


def z_score(closed, se_closed, fd, se_fd):
    denom = np.hypot(se_closed, se_fd)
    diff = closed - fd
    if denom == 0.0:
        return 0.0 if diff == 0.0 else float(np.copysign(np.inf, diff))
    return float(diff / denom)


def consistency_report(dims, sets, schedule, t_grid, plan, h=1e-3, *, tree=None, threads=1, backend=None):
    """Closed form versus finite differences at every ``t`` on one shared tree."""
    schedule = validate_schedule(schedule)
    for t in t_grid:
        _check_open_t(t)
    if tree is None:
        tree = prepare_tree(dims, schedule, plan, backend=backend)
    label = "x".join(str(v) for v in (plan.n_outer,) + tuple(reversed(plan.per_level)))
    rows = []
    for t in t_grid:
        closed = dpsi_dt_closed(dims, sets, schedule, t, plan, tree=tree, threads=threads)
        fd = dpsi_dt_fd(dims, sets, schedule, t, h, plan, tree=tree, threads=threads)
        z = z_score(closed.value, closed.stderr, fd.value, fd.stderr)
        rows.append(ConsistencyRow(schedule.r, float(t), float(h), closed.value, closed.stderr, fd.value, fd.stderr, z, plan.seed, label))
    return rows


def write_consistency(path, rows, header_lines=()):
    records = [tuple(getattr(row, c) for c in CONSISTENCY_COLUMNS) for row in rows]
    text = csv_text(CONSISTENCY_COLUMNS, records, header_lines)
    atomic_write_text(path, text)
    return text
