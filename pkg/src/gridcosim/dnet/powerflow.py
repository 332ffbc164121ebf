"""Forward/backward sweep power flow for radial feeders.

The backward pass accumulates branch currents from node injection currents
through the branch-injection incidence matrix; the forward pass walks the
branch voltage drops from the source back down to every node. Both passes
are sparse matrix products precomputed once per feeder topology.
"""

from __future__ import annotations

import dataclasses
import math
from typing import Mapping

import numpy as np
import scipy.sparse as sp

from .feeder import Feeder

_SHIFT = {"a": 1.0 + 0j, "b": complex(math.cos(-2 * math.pi / 3), math.sin(-2 * math.pi / 3)),
          "c": complex(math.cos(2 * math.pi / 3), math.sin(2 * math.pi / 3))}

MODES = ("three_phase", "balanced")


class DivergedError(ArithmeticError):
    def __init__(self, message: str, mismatch: float) -> None:
        super().__init__(message)
        self.mismatch = mismatch


@dataclasses.dataclass(frozen=True)
class FeederSolution:
    index: tuple[tuple[str, str], ...]
    voltage_vector: np.ndarray
    head_power: complex          # MW + jMVAr at the high side of the head transformer
    losses_kW: float
    load_kW: float
    der_kW: float
    iterations: int
    converged: bool
    mismatch: float

    @property
    def voltages(self) -> dict[tuple[str, str], complex]:
        return dict(zip(self.index, self.voltage_vector))

    def voltage(self, node: str, phase: str = "a") -> complex:
        return self.voltage_vector[self.index.index((node, phase))]


def _balanced_impedance(z: np.ndarray) -> complex:
    n = z.shape[0]
    if n == 1:
        return complex(z[0, 0])
    self_z = np.trace(z) / n
    mutual = (z.sum() - np.trace(z)) / (n * (n - 1))
    return complex(self_z - mutual)


class SweepSolver:
    """Precomputed sweep matrices for one feeder topology and phase model."""

    def __init__(self, feeder: Feeder, mode: str = "three_phase") -> None:
        if mode not in MODES:
            raise ValueError(f"unknown phase model {mode!r}")
        self.feeder = feeder
        self.mode = mode
        balanced = mode == "balanced"
        self.phase_factor = 3.0 if balanced else 1.0
        z_base = feeder.base_kV ** 2 / feeder.base_MVA
        self.s_base_kva = feeder.base_MVA * 1000.0 / 3.0  # per phase

        def phases_of(nid: str) -> str:
            return "a" if balanced else feeder.nodes[nid].phases

        index: list[tuple[str, str]] = []
        pos: dict[tuple[str, str], int] = {}
        for nid in feeder.bfs_order:
            for ph in phases_of(nid):
                pos[(nid, ph)] = len(index)
                index.append((nid, ph))
        self.index = tuple(index)
        self.pos = pos
        n = len(index)

        # branches: head transformer first, then each line, keyed by child node
        tx = feeder.transformer
        z_tx = complex(tx.r_pu, tx.x_pu) * feeder.base_MVA / (tx.kVA / 1000.0)
        branch_rows: dict[tuple[str, str], int] = {}
        blocks = []
        row = 0
        for nid in feeder.bfs_order:
            line = feeder.parent_line[nid]
            phs = phases_of(nid)
            if line is None:
                block = np.eye(len(phs)) * z_tx
            elif balanced:
                block = np.array([[_balanced_impedance(line.z_ohm) / z_base]])
            else:
                block = line.z_ohm / z_base
            blocks.append(block)
            for ph in phs:
                branch_rows[(nid, ph)] = row
                row += 1
        self.z_branch = sp.block_diag(blocks, format="csr")
        self.head_rows = np.array([branch_rows[(feeder.head, ph)] for ph in phases_of(feeder.head)])

        # BIBC: branch (k, phase) carries the injection of every downstream bus on that phase
        rows, cols = [], []
        for (nid, ph), col in pos.items():
            node = nid
            while node is not None:
                rows.append(branch_rows[(node, ph)])
                cols.append(col)
                node = feeder.parent_of(node)
        self.bibc = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(row, n))
        self.bibc_t = self.bibc.T.tocsr()
        self.phase_shift = np.array([_SHIFT[ph] for _, ph in index])

        load = np.zeros(n, dtype=complex)
        for (nid, ph), k in pos.items():
            node = feeder.nodes[nid]
            if balanced:
                load[k] = complex(node.total_load_kW, sum(node.load_kvar.values())) / 3.0
            else:
                load[k] = complex(node.load_kW.get(ph, 0.0), node.load_kvar.get(ph, 0.0))
        self.load_pu = load / self.s_base_kva

    def injection_vector(self, der_injections: Mapping[str, float | complex | tuple[float, float]]) -> np.ndarray:
        """Per bus-phase DER injection in pu (generation positive)."""
        inj = np.zeros(len(self.index), dtype=complex)
        for dev, value in der_injections.items():
            site = self.feeder.der_sites.get(dev)
            if site is None:
                raise KeyError(f"DER {dev!r} is not sited on feeder {self.feeder.name!r}")
            if isinstance(value, tuple):
                s = complex(*value)
            else:
                s = complex(value)
            if self.mode == "balanced":
                inj[self.pos[(site.node, "a")]] += s / 3.0
            else:
                share = s / len(site.phases)
                for ph in site.phases:
                    inj[self.pos[(site.node, ph)]] += share
        return inj / self.s_base_kva

    def solve(self, der_injections: Mapping | None = None, source_voltage_pu: float = 1.0,
              tol: float = 1e-8, max_iter: int = 50, v_init: np.ndarray | None = None,
              zip_coeffs: tuple[float, float, float] | None = None,
              raise_on_divergence: bool = True) -> FeederSolution:
        inj = self.injection_vector(der_injections or {})
        v_source = source_voltage_pu / self.feeder.transformer.tap * self.phase_shift
        v = v_source.copy() if v_init is None else np.array(v_init, dtype=complex)
        load = self.load_pu
        mismatch = math.inf
        converged = False
        it = 0
        for it in range(1, max_iter + 1):
            if zip_coeffs is None:
                s_net = load - inj
            else:
                z, i, p = zip_coeffs
                mag = np.abs(v)
                s_net = load * (z * mag ** 2 + i * mag + p) - inj
            i_inj = np.conj(s_net / v)
            i_branch = self.bibc @ i_inj                                  # backward
            v_new = v_source - self.bibc_t @ (self.z_branch @ i_branch)   # forward
            if not np.all(np.isfinite(v_new)):
                mismatch = math.inf
                break
            mismatch = float(np.max(np.abs(v_new - v)))
            v = v_new
            if mismatch < tol:
                converged = True
                break
        if not converged and raise_on_divergence:
            raise DivergedError(f"sweep did not converge on {self.feeder.name!r} after {it} "
                                f"iterations (mismatch {mismatch:.3e} pu)", mismatch)
        # branch currents consistent with the final voltages
        if zip_coeffs is None:
            s_net = load - inj
        else:
            z, i, p = zip_coeffs
            mag = np.abs(v)
            s_net = load * (z * mag ** 2 + i * mag + p) - inj
        i_branch = self.bibc @ np.conj(s_net / v)
        drop = self.z_branch @ i_branch
        losses_pu = float(np.real(np.vdot(i_branch, drop)))
        i_head = i_branch[self.head_rows]
        s_head_pu = complex(np.sum(v_source[: len(i_head)] * np.conj(i_head)))
        scale_kva = self.s_base_kva * self.phase_factor
        return FeederSolution(
            index=self.index,
            voltage_vector=v,
            head_power=s_head_pu * scale_kva / 1000.0,
            losses_kW=losses_pu * scale_kva,
            load_kW=float(np.real(np.sum(s_net + inj))) * scale_kva,
            der_kW=float(np.real(np.sum(inj))) * scale_kva,
            iterations=it,
            converged=converged,
            mismatch=mismatch,
        )


def solver_for(feeder: Feeder, mode: str = "three_phase") -> SweepSolver:
    solver = feeder._cache.get(("sweep", mode))
    if solver is None:
        solver = feeder._cache[("sweep", mode)] = SweepSolver(feeder, mode)
    return solver


def solve_power_flow(feeder: Feeder, der_injections: Mapping | None = None,
                     source_voltage_pu: float = 1.0, mode: str = "three_phase",
                     tol: float = 1e-8, max_iter: int = 50, **kw) -> FeederSolution:
    return solver_for(feeder, mode).solve(der_injections, source_voltage_pu, tol=tol,
                                          max_iter=max_iter, **kw)


def head_power(solution: FeederSolution, replication_count: int = 1) -> complex:
    """Aggregate head power of ``replication_count`` identical replicas (MW + jMVAr)."""
    if not solution.converged:
        raise DivergedError("refusing to aggregate an unconverged solution", solution.mismatch)
    if replication_count < 1:
        raise ValueError("replication_count must be >= 1")
    return solution.head_power * replication_count

