"""Runtime actuator-fault estimator: a strictly proper filter on [y; V*].

The filter realizes -N(p) B_cal / a(p) in balanced observable-canonical
coordinates and steps alongside the plant at the simulation step h using
the exact matrix-exponential map (inputs first-order-held across the
step). Exact propagation is required because the design cancels large
internal terms; approximate integrators leak the cancellation at fast
pole scales. Its output is the actuator-fault estimate.
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionMismatch
from .synthesis import FilterDesign


class ActuatorFaultEstimator:
    """One DG unit's fault estimator. Instances are independent."""

    def __init__(self, design: FilterDesign, vref: float):
        if design.dae.variant != "actuator":
            raise DimensionMismatch("estimator needs an actuator-variant design")
        self.design = design
        self.vref = float(vref)
        self.Ar = design.Ar_balanced
        self.Bu = design.input_matrix_balanced  # (d_N+1, 4)
        self.x = np.zeros(design.Ar.shape[0])
        self._h = None
        self._step_mats = None

    def reset(self):
        self.x[:] = 0.0

    def warm_start(self, y):
        """Start at the DC-consistent state for a constant past input y."""
        y = np.asarray(y, dtype=float)
        u = np.array([y[0], y[1], y[2], self.vref])
        self.x = np.linalg.solve(self.Ar, -self.Bu @ u)

    @property
    def output(self) -> float:
        return float(self.x[-1])

    def _mats(self, h: float):
        if self._h != h:
            from .linediag import foh_step_matrices
            Ead, M0, M1 = foh_step_matrices(self.Ar, h)
            self._step_mats = (Ead, M0 @ self.Bu, M1 @ self.Bu)
            self._h = h
        return self._step_mats

    def step(self, y, h: float, y_next=None) -> float:
        """Advance one step of length h driven by the measurement y.

        y is held over the step unless y_next is given, in which case the
        input ramps linearly across the step (matching a plant integrated
        alongside). Returns the fault estimate after the step.
        """
        y = np.asarray(y, dtype=float)
        if y.shape != (3,):
            raise DimensionMismatch("y must be a 3-vector")
        Ead, F0, F1 = self._mats(h)
        u0 = np.array([y[0], y[1], y[2], self.vref])
        if y_next is None:
            u1 = u0
        else:
            yn = np.asarray(y_next, dtype=float)
            u1 = np.array([yn[0], yn[1], yn[2], self.vref])
        self.x = Ead @ self.x + F0 @ u0 + F1 @ u1
        return self.output
