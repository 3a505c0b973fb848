"""Lifting schedules: the parameter bundle shared by every other module."""

from dataclasses import dataclass, field

import numpy as np

_ATOL = 1e-12


class ScheduleError(ValueError):
    """Raised when a schedule violates one of its chain inequalities."""


@dataclass(frozen=True)
class LiftingSchedule:
    """Exponent ladder and overlap schedules for an ``r``-level interpolation.

    ``m_schedule``, ``p_schedule`` and ``q_schedule`` all have ``r + 2``
    entries indexed ``0 .. r + 1``. ``group_exponent`` is the scalar power
    applied to each anchor's level-1 expectation.
    """

    r: int
    m_schedule: tuple
    p_schedule: tuple
    q_schedule: tuple
    beta: float
    s: float
    group_exponent: float = 1.0
    _variances: tuple = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        for name in ("m_schedule", "p_schedule", "q_schedule"):
            object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))
        object.__setattr__(self, "r", int(self.r))
        object.__setattr__(self, "beta", float(self.beta))
        object.__setattr__(self, "s", float(self.s))
        object.__setattr__(self, "group_exponent", float(self.group_exponent))

    @property
    def validated(self):
        return self._variances is not None

    def level_variances(self, k):
        """``(var u4_k, var u2_k, var h_k)`` for level ``k`` in ``1 .. r + 1``."""
        if not 1 <= k <= self.r + 1:
            raise IndexError(f"level {k} outside 1..{self.r + 1}")
        if self._variances is not None:
            return self._variances[k - 1]
        return _variances(self.p_schedule, self.q_schedule, k)

    def level_stddevs(self, k):
        return tuple(float(np.sqrt(max(v, 0.0))) for v in self.level_variances(k))

    def to_record(self):
        return {
            "r": self.r,
            "m_schedule": list(self.m_schedule),
            "p_schedule": list(self.p_schedule),
            "q_schedule": list(self.q_schedule),
            "beta": self.beta,
            "s": self.s,
            "group_exponent": self.group_exponent,
        }

    @classmethod
    def from_record(cls, rec):
        return cls(
            r=rec["r"],
            m_schedule=rec["m_schedule"],
            p_schedule=rec["p_schedule"],
            q_schedule=rec["q_schedule"],
            beta=rec["beta"],
            s=rec["s"],
            group_exponent=rec.get("group_exponent", 1.0),
        )


def _variances(p, q, k):
    return (
        p[k - 1] * q[k - 1] - p[k] * q[k],
        p[k - 1] - p[k],
        q[k - 1] - q[k],
    )


def _check_nonincreasing(name, seq):
    for i in range(1, len(seq)):
        if seq[i] > seq[i - 1] + _ATOL:
            raise ScheduleError(f"{name} not nonincreasing at index {i}")


def validate_schedule(candidate, allow_zero_beta=False):
    """Check every chain inequality and cache the per-level variances.

    Returns a schedule equal to ``candidate`` with variances cached; a schedule
    that is already validated is returned as is. ``allow_zero_beta`` admits the
    noise-free ``beta = 0`` limit, which is otherwise rejected.
    """
    if candidate.validated:
        return candidate
    r = candidate.r
    m, p, q = candidate.m_schedule, candidate.p_schedule, candidate.q_schedule
    if r < 1:
        raise ScheduleError(f"r must be >= 1, got {r}")
    for name, seq in (("mSchedule", m), ("pSchedule", p), ("qSchedule", q)):
        if len(seq) != r + 2:
            raise ScheduleError(f"{name} must have r + 2 = {r + 2} entries, got {len(seq)}")
        if not all(np.isfinite(seq)):
            raise ScheduleError(f"{name} has non-finite entries")
    if not np.isfinite(candidate.beta) or candidate.beta < 0 or (candidate.beta == 0 and not allow_zero_beta):
        raise ScheduleError(f"beta must be positive, got {candidate.beta}")
    if candidate.s == 0 or not np.isfinite(candidate.s):
        raise ScheduleError("s must be nonzero")
    if candidate.group_exponent < 0:
        raise ScheduleError(f"group exponent must be nonnegative, got {candidate.group_exponent}")
    if m[0] != 1.0:
        raise ScheduleError(f"mSchedule[0] must equal 1, got {m[0]}")
    if m[r + 1] != 0.0:
        raise ScheduleError(f"mSchedule[{r + 1}] must equal 0, got {m[r + 1]}")
    for k in range(1, r + 1):
        if not 0.0 < m[k] <= 1.0:
            raise ScheduleError(f"mSchedule[{k}] must lie in (0, 1], got {m[k]}")
    for k in range(2, r + 1):
        if m[k] > m[k - 1] + _ATOL:
            raise ScheduleError(f"mSchedule not nonincreasing at index {k}")
    for name, seq in (("pSchedule", p), ("qSchedule", q)):
        if seq[0] > 1.0:
            raise ScheduleError(f"{name}[0] must be <= 1, got {seq[0]}")
        if seq[r + 1] != 0.0:
            raise ScheduleError(f"{name}[{r + 1}] must equal 0, got {seq[r + 1]}")
        _check_nonincreasing(name, seq)
    variances = tuple(_variances(p, q, k) for k in range(1, r + 2))
    for k, triple in enumerate(variances, start=1):
        if min(triple) < -_ATOL:
            raise ScheduleError(f"negative variance at level {k}: {triple}")
    # clip round-off so zero-variance levels are exactly degenerate
    variances = tuple(tuple(max(v, 0.0) for v in tr) for tr in variances)
    validated = LiftingSchedule(
        r=r,
        m_schedule=m,
        p_schedule=p,
        q_schedule=q,
        beta=candidate.beta,
        s=candidate.s,
        group_exponent=candidate.group_exponent,
        _variances=variances,
    )
    return validated


def omega(k1, group_exponent):
    """Level weight: 1 on the first level, the group exponent on every other."""
    if k1 < 1:
        raise IndexError(f"level index must be >= 1, got {k1}")
    return 1.0 if k1 == 1 else float(group_exponent)
