"""Exponentially weighted instantaneous event-rate estimator.

Each packet event bumps the estimate by the decay constant k; between events
the estimate decays as e^{-k*dt}.  The recurrence

    estimate <- k + e^{-k*(t - t_prev)} * estimate

is algebraically identical to the direct sum k * sum_i e^{-k*(t - t_i)} over
the whole event history, so the meter needs only O(1) state per direction.
For a stationary stream the expected reading converges to the true event rate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass


class TimeRegressionError(ValueError):
    """An observation arrived with a timestamp earlier than the meter clock."""


@dataclass
class RateMeter:
    """One-directional packet-rate estimator with exponential forgetting.

    ``estimate`` is the events-per-second reading as of ``last_t``; ``k`` is
    the decay rate per second (default 1).  ``read`` is pure; ``on_event``
    fuses decay and increment into a single committed update so the decay is
    never applied twice for one interval.
    """

    k: float = 1.0
    estimate: float = 0.0
    last_t: float = 0.0

    def read(self, t: float) -> float:
        """Return the decayed rate estimate at time t without mutating state."""
        if t < self.last_t:
            raise TimeRegressionError(f"read at t={t} before meter clock {self.last_t}")
        return math.exp(-self.k * (t - self.last_t)) * self.estimate

    def on_event(self, t: float) -> float:
        """Commit one event at time t; returns the updated estimate."""
        if t < self.last_t:
            raise TimeRegressionError(f"event at t={t} before meter clock {self.last_t}")
        self.estimate = self.k + math.exp(-self.k * (t - self.last_t)) * self.estimate
        self.last_t = t
        return self.estimate
