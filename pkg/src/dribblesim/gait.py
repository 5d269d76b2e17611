"""Gait timing reference variables and the desired foot-contact schedule."""

from __future__ import annotations

import numpy as np

from .config import GaitConfig


def advance_gait_phase(t, schedule: GaitConfig) -> tuple[np.ndarray, np.ndarray]:
    """Per-foot phases in [0,1) and the timing reference variables sin(2*pi*phase).

    t broadcasts; outputs gain a trailing axis of 4 (FR, FL, RR, RL).
    """
    t = np.asarray(t, dtype=np.float64)
    offsets = np.asarray(schedule.offsets)
    phases = np.mod(t[..., None] / schedule.period + offsets, 1.0)
    return np.sin(2.0 * np.pi * phases), phases


def desired_contact(phases: np.ndarray, schedule: GaitConfig) -> np.ndarray:
    """Smooth stance indicator: ~1 for phase in (0, duty), ~0 in swing,
    sigmoid transitions of configured sharpness, exactly 0.5 at the duty
    boundary.  The second term carries the transition across the 1 -> 0 wrap.
    """
    s = schedule.sharpness
    d = schedule.duty

    def sig(x):
        return 1.0 / (1.0 + np.exp(-x))

    p = np.asarray(phases)
    return sig(p / s) * sig((d - p) / s) + sig((p - 1.0) / s) * sig((d - (p - 1.0)) / s)
