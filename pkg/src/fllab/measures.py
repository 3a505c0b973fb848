"""Reweighting operators and the gamma family of tilted measures.

Every family is estimated on a :class:`~fllab.interpolator.TreeState` with
plug-in self-normalised weights:

* level-1 reweighting over the ``j1`` samples, ``w1 ~ Z^{m1}`` per anchor;
* level-``k`` reweighting over the ``j_k`` samples, ``w_k ~ zeta_{k-1}^{m_k/m_{k-1}}``;
* ``gamma00(i3) ~ (E_{U1} Z^{m1})^p``;
* the inner Gibbs weight ``gamma0 = (C^s / Z) (A / C)``.

Two-replica families multiply single-replica marginals at the node where the
replicas separate, then climb to the outer level through the remaining
reweightings. The outer mean of the per-sample values is the estimate.

Observables are vectorised callables ``f(i1, i2, i3, p1, p2, p3)`` that
accept broadcastable integer index arrays, or a dense array of shape
``(l1, l2, l3, l1, l2, l3)``. Single-replica families evaluate them with
``p = i``; ``gamma02`` shares ``i1`` and ``i3`` between the replicas.
"""

import re
from dataclasses import dataclass, field

import numpy as np

from ._io import atomic_write_text, csv_text
from .interpolator import log_mean_exp, mean_and_stderr, softmax


@dataclass
class WeightVector:
    weights: np.ndarray
    stored_sum: float

    @classmethod
    def from_log(cls, log_weights):
        w = softmax(np.asarray(log_weights, dtype=np.float64), axis=-1)
        return cls(w, float(np.sum(w)))


def phi_u1_weights(log_z_samples, m1):
    """Level-1 reweighting of the samples of ``log Z`` for one anchor."""
    log_z_samples = np.asarray(log_z_samples, dtype=np.float64)
    if log_z_samples.size == 0:
        raise ValueError("need at least one sample")
    return WeightVector.from_log(m1 * log_z_samples)


def phi_uk_weights(log_zeta_samples, ratio):
    """Level-``k`` reweighting of the samples of ``log zeta_{k-1}``."""
    log_zeta_samples = np.asarray(log_zeta_samples, dtype=np.float64)
    if log_zeta_samples.size == 0:
        raise ValueError("need at least one sample")
    return WeightVector.from_log(ratio * log_zeta_samples)


def gamma00(log_means, group_exponent):
    """Anchor distribution from per-anchor ``log E_{U1} Z^{m1}``."""
    return WeightVector.from_log(group_exponent * np.asarray(log_means, dtype=np.float64))


def level1_log_means(log_z_samples, m1):
    """``log E_{U1} Z^{m1}`` over the trailing sample axis."""
    return log_mean_exp(m1 * np.asarray(log_z_samples, dtype=np.float64), axis=-1)


# ---------------------------------------------------------------------------
# family names

_SPECIAL = {"00": "gamma00", "0": "gamma01", "01": "gamma01", "02": "gamma02", "1": "gamma1", "2": "gamma21", "21": "gamma21", "22": "gamma22"}
_NAME = re.compile(r"^(?:gamma|γ)_?\{?([0-9]+)\}?$")


def canonical_family(family_id, r):
    """Map a family name to ``(canonical name, formation level)``.

    ``gamma2`` and ``gamma21`` are the same family; ``gamma0`` names the
    single-replica chain ``gamma01``. ``gamma{k}`` for ``3 <= k <= r + 1``
    is the product family formed at level ``k``.
    """
    match = _NAME.match(str(family_id).strip())
    if not match:
        raise ValueError(f"unknown gamma family {family_id!r}")
    code = match.group(1)
    if code in _SPECIAL:
        name = _SPECIAL[code]
        return name, (2 if name == "gamma21" else None)
    k = int(code)
    if k < 3 or k > r + 1:
        raise ValueError(f"family gamma{k} is not defined for r = {r} (need 3 <= k <= r + 1)")
    return f"gamma{k}", k


def families_for(r):
    """Every distinct family available at depth ``r``."""
    return ["gamma00", "gamma01", "gamma02", "gamma1", "gamma21", "gamma22"] + [f"gamma{k}" for k in range(3, r + 2)]


# ---------------------------------------------------------------------------
# observables


def observable_tensor(observable, l1, l2, l3):
    shape = (l1, l2, l3, l1, l2, l3)
    if callable(observable):
        grids = np.ix_(*(np.arange(d) for d in shape))
        value = observable(*grids)
    else:
        value = observable
    return np.broadcast_to(np.asarray(value, dtype=np.float64), shape)


def _sizes(state):
    l1, l2 = state.p_inner.shape[-2:]
    l3 = state.p_outer.shape[-2]
    return l1, l2, l3


# ---------------------------------------------------------------------------
# per-node building blocks


def _lift(values, state, k_from, k_to, trailing=0):
    """Apply the level-``k`` reweightings for ``k = k_from .. k_to``."""
    for k in range(k_from, k_to + 1):
        w = state.w_level[k]
        w = w.reshape(w.shape + (1,) * trailing)
        values = np.sum(w * values, axis=-(1 + trailing))
    return values


def _leaf_marginal(state):
    # gamma0 given i3: leaf + (l3, l1, l2)
    return state.p_outer[..., :, :, None] * state.p_inner[..., None, :, :]


def _level1_average(state, leaf_values):
    """``sum_i3 gamma00(i3) Phi_{U1}^{(i3)}`` of per-leaf, per-anchor values."""
    per_anchor = np.sum(state.w1 * leaf_values, axis=-2)
    return np.sum(state.gamma00 * per_anchor, axis=-1)


def _level1_marginal(state, mu0):
    # Phi_{U1} average of gamma0, per anchor: node2 + (l3, l1, l2)
    return np.sum(state.w1[..., None, None] * mu0, axis=-4)


def per_sample_values(observable, family_id, state):
    """Per-outer-sample values of a gamma average (shape ``(N_out,)``)."""
    r = state.r
    name, k_form = canonical_family(family_id, r)
    l1, l2, l3 = _sizes(state)
    O = observable_tensor(observable, l1, l2, l3)
    a1, a2, a3 = np.ix_(np.arange(l1), np.arange(l2), np.arange(l3))

    if name == "gamma00":
        o00 = O[0, 0, np.arange(l3), 0, 0, np.arange(l3)]
        node2 = np.sum(state.gamma00 * o00, axis=-1)
        return _lift(node2, state, 2, r)

    mu0 = _leaf_marginal(state)
    if name == "gamma01":
        o1 = O[a1, a2, a3, a1, a2, a3].transpose(2, 0, 1)  # (l3, l1, l2)
        leaf = np.einsum("...cab,cab->...c", mu0, o1)
        return _lift(_level1_average(state, leaf), state, 2, r)

    if name == "gamma02":
        b2 = np.arange(l2).reshape(1, 1, 1, l2)
        o02 = O[a1[..., None], a2[..., None], a3[..., None], a1[..., None], b2, a3[..., None]]  # (l1, l2, l3, l2)
        leaf = np.einsum("...ca,...ab,...ad,abcd->...c", state.p_outer, state.p_inner, state.p_inner, o02)
        return _lift(_level1_average(state, leaf), state, 2, r)

    # two replicas sharing the anchor: O[a, b, c, d, e, c]
    if name in ("gamma1", "gamma22"):
        c = np.arange(l3)
        o_same = np.moveaxis(O[:, :, c, :, :, c], 0, 2)  # (l1, l2, l3, l1, l2)
        if name == "gamma1":
            leaf = np.einsum("...cab,...cde,abcde->...c", mu0, mu0, o_same)
            return _lift(_level1_average(state, leaf), state, 2, r)
        nu = _level1_marginal(state, mu0)
        per_anchor = np.einsum("...cab,...cde,abcde->...c", nu, nu, o_same)
        return _lift(np.sum(state.gamma00 * per_anchor, axis=-1), state, 2, r)

    # product families formed at level k_form >= 2
    marg = state.gamma00[..., :, None, None] * _level1_marginal(state, mu0)
    marg = _lift(marg, state, 2, k_form - 1, trailing=3)
    node = np.einsum("...cab,...fde,abcdef->...", marg, marg, O)
    return _lift(node, state, k_form, r)


@dataclass
class GammaAverage:
    family: str
    value: float
    stderr: float
    r: int
    samples: np.ndarray = field(repr=False, default=None)


def gamma_average(observable, family_id, state):
    """Plug-in estimate of an observable's average under one gamma family."""
    name, _ = canonical_family(family_id, state.r)
    samples = per_sample_values(observable, family_id, state)
    value, se = mean_and_stderr(samples)
    return GammaAverage(name, value, se, state.r, samples)


def one(*idx):
    return 1.0


# ---------------------------------------------------------------------------
# audit


@dataclass
class AuditRow:
    family: str
    r: int
    sum_deviation: float
    effective_sample_size_per_level: tuple


def effective_sample_sizes(state):
    """Mean ``1 / sum w^2`` of the reweightings at each level ``1 .. r``."""
    ess = [float(np.mean(1.0 / np.sum(state.w1**2, axis=-2)))]
    for k in range(2, state.r + 1):
        ess.append(float(np.mean(1.0 / np.sum(state.w_level[k] ** 2, axis=-1))))
    return tuple(ess)


def normalization_audit(families, state):
    """Largest per-sample ``|total mass - 1|`` of each family."""
    ess = effective_sample_sizes(state)
    rows = []
    for fam in families:
        name, _ = canonical_family(fam, state.r)
        dev = float(np.max(np.abs(per_sample_values(one, fam, state) - 1.0)))
        rows.append(AuditRow(name, state.r, dev, ess))
    return rows


AUDIT_COLUMNS = ("family", "r", "sum_deviation", "effective_sample_size_per_level")


def write_audit(path, rows, header_lines=()):
    records = [
        (row.family, row.r, row.sum_deviation, ";".join(repr(v) for v in row.effective_sample_size_per_level)) for row in rows
    ]
    text = csv_text(AUDIT_COLUMNS, records, header_lines)
    atomic_write_text(path, text)
    return text
