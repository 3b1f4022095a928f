"""Convenience wiring: synthesize all per-DG filters and run scenarios."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import (FaultSchedule, GridSpec, LoadSchedule, ScenarioTrace,
                   build_closed_loop, simulate)
from .linediag import (DiagnosisTrace, FilterBank, ParityKit, build_parity,
                       make_filter_bank, residual_model, run_algorithm1)
from .synthesis import (DenominatorPoly, FilterDesign, actuator_dae, line_dae,
                        synthesize)

PAPER_ROOTS = (-0.5, -0.1, -1.0)


@dataclass
class DiagnosisSuite:
    """All offline-designed artifacts for one grid at one sampling setup."""

    spec: GridSpec
    a: DenominatorPoly
    actuator_designs: tuple[FilterDesign, ...]
    line_designs: tuple[FilterDesign, ...]
    bank: FilterBank
    kits: tuple[ParityKit, ...]
    ts: float
    T: int


def design_filters(spec: GridSpec, a: DenominatorPoly, d_N: int = 2):
    """Synthesize both filter variants for every DG unit."""
    acts, lines = [], []
    for dg in spec.dgs:
        A, B, D, E, _ = build_closed_loop(dg)
        acts.append(synthesize(actuator_dae(A, B, D, E), a, d_N))
        lines.append(synthesize(line_dae(A, B, D, E), a, d_N))
    return tuple(acts), tuple(lines)


def build_suite(spec: GridSpec, a_roots, ts: float, T: int, d_N: int = 2) -> DiagnosisSuite:
    a = DenominatorPoly.from_roots(a_roots)
    acts, lines = design_filters(spec, a, d_N)
    bank = make_filter_bank(acts, lines)
    kits = tuple(build_parity(residual_model(lines[i], spec, i, ts), T)
                 for i in range(spec.n))
    return DiagnosisSuite(spec=spec, a=a, actuator_designs=acts,
                          line_designs=lines, bank=bank, kits=kits, ts=ts, T=T)


def run_scenario(suite: DiagnosisSuite, loads: LoadSchedule, faults: FaultSchedule,
                 t_end: float, h: float, seed: int = 0, *,
                 noise_scale: float = 1.0, incipient_time_scale: float = 1e10,
                 alpha: float = 3.0, eta: float = 1e6,
                 with_bound: bool = True,
                 x0: np.ndarray | None = None) -> tuple[ScenarioTrace, DiagnosisTrace]:
    """Simulate a scenario with co-integrated filters, then run the diagnosis."""
    trace = simulate(suite.spec, loads, faults, t_end, suite.ts, h, seed,
                     filter_bank=suite.bank, noise_scale=noise_scale,
                     incipient_time_scale=incipient_time_scale, x0=x0)
    diag = run_algorithm1(trace, suite.spec, suite.kits, alpha, eta,
                          with_bound=with_bound)
    return trace, diag
