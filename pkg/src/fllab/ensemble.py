"""Reproducible Gaussian randomness for the interpolation.

All draws come from a counter-based construction: a normal deviate is a pure
function of ``(seed, coordinates)``. Coordinates are hashed with a
splitmix64-style mixer into a key, and the last coordinate selects the
component inside that key's stream. Nothing depends on call order, block
sizes or worker count.

Coordinate scheme (documented in the README as well)::

    G[j, i] at outer sample o       (STREAM_G, o, j * n + i)
    U_{r+1} component c at o        (STREAM_U, 0, o, c)
    U_k component c, k <= r         (STREAM_U, k, o, j_r, ..., j_k, c)

where a level's components are ordered ``u4, u2[0..m), h[0..n)``. The top
level is tagged ``0`` rather than ``r + 1`` so that its draws do not depend
on the depth of the ladder below it.

Draws are stored standardised (unit variance); schedule standard deviations
are applied at evaluation time, which keeps a sample tree reusable at every
``t`` (common random numbers) and makes zero-variance levels exact zeros.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from . import _kernels

STREAM_G = 1
STREAM_U = 2
TOP_LEVEL_TAG = 0
_MASK64 = (1 << 64) - 1


@dataclass(frozen=True)
class ProblemDims:
    x_dim: int
    y_dim: int
    set_size: int

    def __post_init__(self):
        for name in ("x_dim", "y_dim", "set_size"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")


def _seed_key(seed):
    return _kernels.mix_np(np.array([int(seed) & _MASK64], dtype=np.uint64))[0]


def stream_key(seed, coordinates):
    """Fold ``coordinates`` into the key for ``seed``."""
    key = _seed_key(seed)
    for c in coordinates:
        key = _kernels.fold_np(np.array([key]), np.array([int(c) & _MASK64], dtype=np.uint64))[0]
    return key


def gaussian_stream(seed, coordinates):
    """Standard normal deviate addressed by ``(seed, coordinates)``.

    The final coordinate is the component index within the stream keyed by
    the preceding ones.
    """
    coordinates = tuple(int(c) for c in coordinates)
    if not coordinates:
        raise ValueError("at least one coordinate (the component) is required")
    key = stream_key(seed, coordinates[:-1])
    comp = coordinates[-1]
    bits = _kernels.fold_np(np.array([key, key]), np.array([2 * comp, 2 * comp + 1], dtype=np.uint64))
    return float(_kernels.bits_to_normal(bits[None, :])[0])


def _block_normals(keys, ncomp, backend=None):
    """Normals for components ``0..ncomp`` of every key; shape ``keys.shape + (ncomp,)``."""
    keys = np.asarray(keys, dtype=np.uint64)
    bits = _kernels.component_bits(keys.ravel(), ncomp, backend=backend)
    return _kernels.bits_to_normal(bits).reshape(keys.shape + (ncomp,))


def _grid_keys(base, sizes, offset0=0):
    """Keys for every index tuple of a grid, folding axis by axis."""
    keys = np.asarray(base, dtype=np.uint64)
    for ax, size in enumerate(sizes):
        idx = np.arange(size, dtype=np.uint64)
        if ax == 0:
            idx = idx + np.uint64(offset0)
        keys = _kernels.fold_np(keys[..., None], idx)
    return keys


def _level_base(seed, tag):
    return stream_key(seed, (STREAM_U, tag))


# ---------------------------------------------------------------------------
# single path


@dataclass
class EnsembleDraw:
    """One realisation of ``G`` and the per-level triples, already scaled.

    ``levels[k - 1]`` is ``(u4_k, u2_k, h_k)`` for ``k = 1 .. r + 1``.
    """

    g_matrix: np.ndarray
    levels: list
    provenance: dict = field(default_factory=dict)

    @property
    def r(self):
        return len(self.levels) - 1

    def sums(self):
        """Level sums ``(sum u4, sum u2, sum h)`` over ``k = 1 .. r + 1``."""
        u4 = sum(float(lv[0]) for lv in self.levels)
        u2 = np.sum([lv[1] for lv in self.levels], axis=0)
        h = np.sum([lv[2] for lv in self.levels], axis=0)
        return u4, u2, h

    def to_npz(self, path):
        arrays = {"g_matrix": self.g_matrix}
        for k, (u4, u2, h) in enumerate(self.levels, start=1):
            arrays[f"u4_{k}"] = np.asarray(u4)
            arrays[f"u2_{k}"] = u2
            arrays[f"h_{k}"] = h
        arrays["provenance"] = np.array(json.dumps(self.provenance))
        np.savez(path, **arrays)

    @classmethod
    def from_npz(cls, path):
        with np.load(path) as data:
            k = 1
            levels = []
            while f"u4_{k}" in data:
                levels.append((float(data[f"u4_{k}"]), data[f"u2_{k}"].copy(), data[f"h_{k}"].copy()))
                k += 1
            prov = json.loads(str(data["provenance"]))
            return cls(g_matrix=data["g_matrix"].copy(), levels=levels, provenance=prov)

    def to_json(self):
        return json.dumps(
            {
                "g_matrix": self.g_matrix.tolist(),
                "levels": [[float(u4), list(map(float, u2)), list(map(float, h))] for u4, u2, h in self.levels],
                "provenance": self.provenance,
            }
        )


def sample_ensemble(dims, schedule, seed, outer_index, per_level_indices):
    """Draw the path ``(outer_index, j_r, ..., j_1)`` of the sample tree.

    ``per_level_indices[k - 1]`` is the sample index ``j_k`` at level ``k``.
    """
    r = schedule.r
    per_level_indices = tuple(int(j) for j in per_level_indices)
    if len(per_level_indices) < r:
        raise ValueError(f"need {r} per-level indices, got {len(per_level_indices)}")
    m, n = dims.y_dim, dims.x_dim
    ncomp = 1 + m + n
    g = _block_normals(stream_key(seed, (STREAM_G, outer_index)), m * n).reshape(m, n)
    levels = [None] * (r + 1)
    top = _block_normals(stream_key(seed, (STREAM_U, TOP_LEVEL_TAG, outer_index)), ncomp)
    levels[r] = _scale_triple(top, m, schedule.level_stddevs(r + 1))
    for k in range(r, 0, -1):
        path = [per_level_indices[kk - 1] for kk in range(r, k - 1, -1)]
        z = _block_normals(stream_key(seed, (STREAM_U, k, outer_index, *path)), ncomp)
        levels[k - 1] = _scale_triple(z, m, schedule.level_stddevs(k))
    prov = {"seed": int(seed), "outer_index": int(outer_index), "per_level_indices": list(per_level_indices[:r])}
    return EnsembleDraw(g_matrix=g, levels=levels, provenance=prov)


def _scale_triple(z, m, sds):
    sd4, sd2, sdh = sds
    return (sd4 * float(z[0]), sd2 * z[1 : 1 + m], sdh * z[1 + m :])


# ---------------------------------------------------------------------------
# nested sample tree


@dataclass(frozen=True)
class MonteCarloPlan:
    """Sample counts: ``per_level[k - 1]`` children at level ``k``."""

    n_outer: int
    per_level: tuple
    seed: int = 0
    outer_offset: int = 0

    def __post_init__(self):
        object.__setattr__(self, "per_level", tuple(int(v) for v in self.per_level))
        if int(self.n_outer) < 1 or any(v < 1 for v in self.per_level):
            raise ValueError("every Monte Carlo count must be >= 1")


@dataclass
class SampleTree:
    """Standardised draws for a whole nested Monte Carlo tree.

    Level ``k`` arrays have node shape ``(n_outer, N_r, ..., N_k)``; the top
    level (``k = r + 1``) has node shape ``(n_outer,)``. ``g`` is
    ``(n_outer, m, n)`` or ``None`` when ``fixed_g`` pins one instance.
    """

    dims: ProblemDims
    r: int
    plan: MonteCarloPlan
    g: np.ndarray
    u4: list
    u2: list
    h: list
    fixed_g: np.ndarray = None

    def node_shape(self, k):
        counts = self.plan.per_level
        return (self.plan.n_outer,) + tuple(counts[kk - 1] for kk in range(self.r, k - 1, -1))

    @property
    def leaf_shape(self):
        return self.node_shape(1)

    def g_for(self, o):
        return self.fixed_g if self.fixed_g is not None else self.g[o]

    def path_draw(self, schedule, o, path):
        """Scaled :class:`EnsembleDraw` for local outer index ``o`` and ``path = (j_1, ..., j_r)``."""
        levels = []
        for k in range(1, self.r + 2):
            idx = (o,) + tuple(path[kk - 1] for kk in range(self.r, k - 1, -1))
            sd4, sd2, sdh = schedule.level_stddevs(k)
            levels.append((sd4 * float(self.u4[k - 1][idx]), sd2 * self.u2[k - 1][idx], sdh * self.h[k - 1][idx]))
        prov = {
            "seed": int(self.plan.seed),
            "outer_index": int(self.plan.outer_offset + o),
            "per_level_indices": list(path),
        }
        return EnsembleDraw(g_matrix=np.array(self.g_for(o)), levels=levels, provenance=prov)

    def outer_slice(self, start, stop):
        """Sub-tree over local outer samples ``start:stop``."""
        plan = MonteCarloPlan(stop - start, self.plan.per_level, self.plan.seed, self.plan.outer_offset + start)
        return SampleTree(
            dims=self.dims,
            r=self.r,
            plan=plan,
            g=None if self.g is None else self.g[start:stop],
            u4=[a[start:stop] for a in self.u4],
            u2=[a[start:stop] for a in self.u2],
            h=[a[start:stop] for a in self.h],
            fixed_g=self.fixed_g,
        )


def sample_tree(dims, r, plan, fixed_g=None, backend=None):
    """Generate every draw of a nested Monte Carlo tree for ``plan``."""
    if len(plan.per_level) != r:
        raise ValueError(f"plan has {len(plan.per_level)} level counts, expected r = {r}")
    m, n = dims.y_dim, dims.x_dim
    ncomp = 1 + m + n
    seed, off, n_out = plan.seed, plan.outer_offset, plan.n_outer
    if fixed_g is None:
        gkeys = _grid_keys(stream_key(seed, (STREAM_G,)), (n_out,), off)
        g = _block_normals(gkeys, m * n, backend).reshape(n_out, m, n)
    else:
        fixed_g = np.asarray(fixed_g, dtype=np.float64)
        if fixed_g.shape != (m, n):
            raise ValueError(f"fixed G has shape {fixed_g.shape}, expected {(m, n)}")
        g = None
    u4, u2, h = [None] * (r + 1), [None] * (r + 1), [None] * (r + 1)
    tree = SampleTree(dims, r, plan, g, u4, u2, h, fixed_g)
    for k in range(1, r + 2):
        tag = TOP_LEVEL_TAG if k == r + 1 else k
        z = _block_normals(_grid_keys(_level_base(seed, tag), tree.node_shape(k), off), ncomp, backend)
        u4[k - 1] = z[..., 0]
        u2[k - 1] = z[..., 1 : 1 + m]
        h[k - 1] = z[..., 1 + m :]
    return tree


def collapse_level(tree, k):
    """Drop level ``k`` (which must hold a single sample) from ``tree``.

    The result is an ``(r - 1)``-level tree over the same draws: levels above
    ``k`` move down one index and the squeezed level disappears. Pair it with
    :func:`collapse_schedule`.
    """
    r = tree.r
    if not 1 <= k <= r:
        raise ValueError(f"can only collapse inner levels 1..{r}, got {k}")
    if tree.plan.per_level[k - 1] != 1:
        raise ValueError(f"level {k} has {tree.plan.per_level[k - 1]} samples; collapse needs exactly 1")
    axis = 1 + (r - k)  # position of j_k in node shapes of levels <= k
    u4, u2, h = [], [], []
    for kk in range(1, r + 2):
        if kk == k:
            continue
        a4, a2, ah = tree.u4[kk - 1], tree.u2[kk - 1], tree.h[kk - 1]
        if kk < k:
            a4, a2, ah = (np.squeeze(a, axis=axis) for a in (a4, a2, ah))
        u4.append(a4)
        u2.append(a2)
        h.append(ah)
    per_level = tuple(c for i, c in enumerate(tree.plan.per_level, start=1) if i != k)
    plan = MonteCarloPlan(tree.plan.n_outer, per_level, tree.plan.seed, tree.plan.outer_offset)
    return SampleTree(tree.dims, r - 1, plan, tree.g, u4, u2, h, tree.fixed_g)


def collapse_schedule(schedule, k):
    """Remove entry ``k`` from the three schedules (counterpart of :func:`collapse_level`)."""
    from .schedule import LiftingSchedule, validate_schedule

    def drop(seq):
        return tuple(v for i, v in enumerate(seq) if i != k)

    return validate_schedule(
        LiftingSchedule(
            r=schedule.r - 1,
            m_schedule=drop(schedule.m_schedule),
            p_schedule=drop(schedule.p_schedule),
            q_schedule=drop(schedule.q_schedule),
            beta=schedule.beta,
            s=schedule.s,
            group_exponent=schedule.group_exponent,
        )
    )
