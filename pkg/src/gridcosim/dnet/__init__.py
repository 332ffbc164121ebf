"""Radial distribution feeders: data model, file format and power flow."""

from __future__ import annotations

import dataclasses
from typing import Mapping

from .feeder import (
    DerSite,
    Feeder,
    FeederError,
    FeederNode,
    FeederParseError,
    LineSegment,
    TopologyError,
    Transformer,
    load_feeder,
    parse_feeder,
)
from .powerflow import (
    DivergedError,
    FeederSolution,
    SweepSolver,
    head_power,
    solve_power_flow,
    solver_for,
)


@dataclasses.dataclass
class FeederGroup:
    """``replication_count`` identical feeders hanging off one transmission bus.

    Identical replicas are solved once and scaled; ``instantiate=True`` solves
    every replica separately (useful only to check that scaling is faithful).
    """

    id: str
    feeder: Feeder
    replication_count: int
    bus: str
    phase_model: str = "three_phase"
    instantiate: bool = False

    def __post_init__(self) -> None:
        if self.replication_count < 1:
            raise ValueError(f"group {self.id}: replication_count must be >= 1")

    def solve(self, der_injections: Mapping | None = None, source_voltage_pu: float = 1.0,
              **kw) -> tuple[FeederSolution, complex, float]:
        """Return (single-feeder solution, aggregate head MW+jMVAr, aggregate losses kW)."""
        sol = solve_power_flow(self.feeder, der_injections, source_voltage_pu, mode=self.phase_model, **kw)
        if not self.instantiate:
            return sol, head_power(sol, self.replication_count), sol.losses_kW * self.replication_count
        total, losses = 0j, 0.0
        for _ in range(self.replication_count):
            replica = solve_power_flow(self.feeder, der_injections, source_voltage_pu,
                                       mode=self.phase_model, **kw)
            total += head_power(replica)
            losses += replica.losses_kW
        return sol, total, losses


__all__ = [
    "DerSite", "DivergedError", "Feeder", "FeederError", "FeederGroup", "FeederNode",
    "FeederParseError", "FeederSolution", "LineSegment", "SweepSolver", "TopologyError",
    "Transformer", "head_power", "load_feeder", "parse_feeder", "solve_power_flow", "solver_for",
]
