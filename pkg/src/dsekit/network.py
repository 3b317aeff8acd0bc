"""Bus/branch network model: case files, admittance stamping, topology checks.

A case file is JSON with three sections (``buses``, ``branches``, ``machines``)
plus ``base_mva`` and ``nominal_hz``.  All impedances are per unit: network
quantities on the system base, machine quantities on the machine base declared
per machine.  Bundled cases live in ``dsekit/cases``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .machine import MachineParams

BUS_TYPES = ("slack", "PV", "PQ")


class CaseValidationError(ValueError):
    """Raised when a case file violates a structural invariant."""


class NetworkIslandError(RuntimeError):
    """Raised when the live topology strands a machine away from the reference."""


@dataclass
class Bus:
    id: int
    type: str = "PQ"
    vm: float = 1.0          # voltage setpoint (slack/PV) or initial guess, pu
    va: float = 0.0          # slack angle, rad
    pload: float = 0.0       # pu on system base
    qload: float = 0.0
    pgen: float = 0.0        # dispatch (PV buses), pu on system base
    qgen: float = 0.0
    gshunt: float = 0.0
    bshunt: float = 0.0


@dataclass
class Branch:
    from_bus: int
    to_bus: int
    r: float
    x: float
    b: float = 0.0           # total line charging susceptance
    tap: float = 0.0         # 0 means no transformer (ratio 1)
    status: str = "closed"

    def key(self):
        return (self.from_bus, self.to_bus)


@dataclass
class NetworkCase:
    name: str
    base_mva: float
    nominal_hz: float
    buses: list[Bus]
    branches: list[Branch]
    machines: list[MachineParams]
    machine_buses: list[int] = field(default_factory=list)

    def __post_init__(self):
        self._index = {b.id: i for i, b in enumerate(self.buses)}
        validate_case(self)

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    @property
    def n_machine(self) -> int:
        return len(self.machines)

    def bus_index(self, bus_id: int) -> int:
        try:
            return self._index[bus_id]
        except KeyError:
            raise CaseValidationError(f"unknown bus id {bus_id}") from None

    @property
    def slack_index(self) -> int:
        return next(i for i, b in enumerate(self.buses) if b.type == "slack")

    @property
    def machine_bus_indices(self) -> list[int]:
        return [self.bus_index(b) for b in self.machine_buses]

    def branch_index(self, from_bus: int, to_bus: int) -> int:
        for i, br in enumerate(self.branches):
            if {br.from_bus, br.to_bus} == {from_bus, to_bus}:
                return i
        raise CaseValidationError(f"no branch between buses {from_bus} and {to_bus}")

    @property
    def omega_s(self) -> float:
        """Synchronous speed, rad/s."""
        return 2.0 * np.pi * self.nominal_hz


def validate_case(case: NetworkCase) -> None:
    ids = [b.id for b in case.buses]
    if len(set(ids)) != len(ids):
        raise CaseValidationError("duplicate bus ids")
    slacks = [b for b in case.buses if b.type == "slack"]
    if len(slacks) != 1:
        raise CaseValidationError(f"exactly one slack bus required, got {len(slacks)}")
    for b in case.buses:
        if b.type not in BUS_TYPES:
            raise CaseValidationError(f"bus {b.id}: unknown type {b.type!r}")
    idset = set(ids)
    for br in case.branches:
        if br.from_bus not in idset or br.to_bus not in idset:
            raise CaseValidationError(f"branch {br.key()} references unknown bus")
        if br.status not in ("closed", "open"):
            raise CaseValidationError(f"branch {br.key()}: bad status {br.status!r}")
    if len(case.machine_buses) != len(case.machines):
        raise CaseValidationError("machine_buses and machines length mismatch")
    for mb in case.machine_buses:
        if mb not in idset:
            raise CaseValidationError(f"machine mapped to unknown bus {mb}")
    if len(set(case.machine_buses)) != len(case.machine_buses):
        raise CaseValidationError("at most one machine per bus is supported")
    for mb, p in zip(case.machine_buses, case.machines):
        p.validate(f"machine@bus{mb}")
    comps = connected_components(case)
    if len(comps) != 1:
        raise CaseValidationError("case graph is disconnected with all branches closed")


def connected_components(case: NetworkCase, statuses: list[str] | None = None) -> list[set[int]]:
    """Connected components (sets of bus indices) under the given branch statuses."""
    n = case.n_bus
    adj: list[list[int]] = [[] for _ in range(n)]
    for k, br in enumerate(case.branches):
        st = statuses[k] if statuses is not None else br.status
        if st == "closed":
            i, j = case.bus_index(br.from_bus), case.bus_index(br.to_bus)
            adj[i].append(j)
            adj[j].append(i)
    seen = [False] * n
    comps = []
    for s in range(n):
        if seen[s]:
            continue
        stack, comp = [s], set()
        seen[s] = True
        while stack:
            u = stack.pop()
            comp.add(u)
            for v in adj[u]:
                if not seen[v]:
                    seen[v] = True
                    stack.append(v)
        comps.append(comp)
    return comps


def build_admittance(
    case: NetworkCase,
    statuses: list[str] | None = None,
    fault_bus: int | None = None,
    fault_admittance: complex = -1e6j,
    check_islands: bool = True,
) -> np.ndarray:
    """Complex bus admittance matrix reflecting branch statuses.

    ``statuses`` overrides the per-branch status list (live topology during a
    simulation).  ``fault_bus`` adds ``fault_admittance`` as a shunt at that
    bus, the bolted three-phase fault approximation.  With ``check_islands``
    the live topology must keep every machine connected to the slack bus.
    """
    n = case.n_bus
    Y = np.zeros((n, n), dtype=complex)
    for k, br in enumerate(case.branches):
        st = statuses[k] if statuses is not None else br.status
        if st != "closed":
            continue
        i, j = case.bus_index(br.from_bus), case.bus_index(br.to_bus)
        y = 1.0 / complex(br.r, br.x)
        ysh = 0.5j * br.b
        a = br.tap if br.tap not in (0.0, None) else 1.0
        Y[i, i] += (y + ysh) / (a * a)
        Y[j, j] += y + ysh
        Y[i, j] -= y / a
        Y[j, i] -= y / a
    for b in case.buses:
        i = case.bus_index(b.id)
        Y[i, i] += complex(b.gshunt, b.bshunt)
    if fault_bus is not None:
        Y[case.bus_index(fault_bus), case.bus_index(fault_bus)] += fault_admittance
    if check_islands:
        comps = connected_components(case, statuses)
        ref = case.slack_index
        ref_comp = next(c for c in comps if ref in c)
        stranded = [case.machine_buses[g] for g, i in enumerate(case.machine_bus_indices)
                    if i not in ref_comp]
        if stranded:
            raise NetworkIslandError(
                f"machines at buses {stranded} islanded from the slack reference")
    return Y


def load_admittance_diagonal(case: NetworkCase, v_abs: np.ndarray,
                             modulation: np.ndarray | None = None) -> np.ndarray:
    """Constant-impedance load admittances from the load P/Q at voltages ``v_abs``."""
    y = np.zeros(case.n_bus, dtype=complex)
    for b in case.buses:
        i = case.bus_index(b.id)
        s = complex(b.pload, b.qload)
        if s != 0:
            y[i] = np.conj(s) / (v_abs[i] ** 2)
    if modulation is not None:
        y = y * modulation
    return y


# ---------------------------------------------------------------------------
# Case file I/O

def _case_from_dict(d: dict) -> NetworkCase:
    buses = [Bus(**b) for b in d["buses"]]
    branches = [Branch(**b) for b in d["branches"]]
    machines, machine_buses = [], []
    for m in d.get("machines", []):
        m = dict(m)
        machine_buses.append(m.pop("bus"))
        machines.append(MachineParams.from_dict(m))
    return NetworkCase(
        name=d.get("name", "unnamed"),
        base_mva=float(d["base_mva"]),
        nominal_hz=float(d.get("nominal_hz", 60.0)),
        buses=buses,
        branches=branches,
        machines=machines,
        machine_buses=machine_buses,
    )


def case_to_dict(case: NetworkCase) -> dict:
    return {
        "name": case.name,
        "base_mva": case.base_mva,
        "nominal_hz": case.nominal_hz,
        "buses": [vars(b).copy() for b in case.buses],
        "branches": [{k: v for k, v in vars(b).items()} for b in case.branches],
        "machines": [
            {"bus": bus, **p.to_dict()} for bus, p in zip(case.machine_buses, case.machines)
        ],
    }


def load_case(path: str | Path) -> NetworkCase:
    """Load a case from a JSON file path or a bundled case name (e.g. ``ieee39``)."""
    p = Path(path)
    if not p.exists() and not p.suffix:
        ref = resources.files("dsekit").joinpath(f"cases/{path}.json")
        if ref.is_file():
            return _case_from_dict(json.loads(ref.read_text()))
    with open(p) as f:
        return _case_from_dict(json.load(f))


def save_case(case: NetworkCase, path: str | Path) -> None:
    with open(path, "w") as f:
        json.dump(case_to_dict(case), f, indent=1, sort_keys=True)
        f.write("\n")
