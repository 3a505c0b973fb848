"""Numerical laboratory for lifted interpolation of bilinearly indexed Gaussian processes."""

from .schedule import LiftingSchedule, ScheduleError, omega, validate_schedule

__all__ = ["LiftingSchedule", "ScheduleError", "omega", "validate_schedule"]
__version__ = "0.1.0"
