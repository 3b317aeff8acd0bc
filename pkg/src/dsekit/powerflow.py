"""Newton-Raphson power flow in polar form with full complex Jacobians."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .network import NetworkCase, build_admittance


class PowerFlowDivergedError(RuntimeError):
    pass


@dataclass
class PowerFlowSolution:
    v_bus: np.ndarray          # complex bus voltages, system pu
    iterations: int
    max_mismatch: float
    s_inj: np.ndarray          # complex net injections V * conj(Y V)
    s_gen: np.ndarray          # complex generation per machine (injection + local load)


def _injections(Y: np.ndarray, v: np.ndarray) -> np.ndarray:
    return v * np.conj(Y @ v)


def _jacobian(Y: np.ndarray, v: np.ndarray):
    """dS/d(angle) and dS/d(magnitude), complex matrices."""
    ibus = Y @ v
    dV = np.diag(v)
    dI = np.diag(ibus)
    dVn = np.diag(v / np.abs(v))
    ds_dva = 1j * dV @ np.conj(dI - Y @ dV)
    ds_dvm = dV @ np.conj(Y @ dVn) + np.conj(dI) @ dVn
    return ds_dva, ds_dvm


def solve_powerflow(case: NetworkCase, tol: float = 1e-10, max_iter: int = 20,
                    flat_start: bool = False) -> PowerFlowSolution:
    """Solve the case power flow; raises :class:`PowerFlowDivergedError` on failure.

    Bus-wise power mismatches of the returned solution are below ``tol`` (well
    under the 1e-8 pu contract at default settings).
    """
    Y = build_admittance(case)
    n = case.n_bus
    types = np.array([b.type for b in case.buses])
    slack = case.slack_index
    pv = np.where(types == "PV")[0]
    pq = np.where(types == "PQ")[0]
    pvpq = np.concatenate([pv, pq])

    vm = np.array([1.0 if (flat_start and b.type == "PQ") else b.vm for b in case.buses])
    va = np.array([b.va if b.type == "slack" else 0.0 for b in case.buses])
    s_sched = np.array([complex(b.pgen - b.pload, b.qgen - b.qload) for b in case.buses])

    v = vm * np.exp(1j * va)
    iterations = 0
    for iterations in range(1, max_iter + 1):
        mis = _injections(Y, v) - s_sched
        f = np.concatenate([mis[pvpq].real, mis[pq].imag])
        if np.max(np.abs(f)) < tol:
            break
        ds_dva, ds_dvm = _jacobian(Y, v)
        J = np.block([
            [ds_dva[np.ix_(pvpq, pvpq)].real, ds_dvm[np.ix_(pvpq, pq)].real],
            [ds_dva[np.ix_(pq, pvpq)].imag, ds_dvm[np.ix_(pq, pq)].imag],
        ])
        dx = np.linalg.solve(J, -f)
        va[pvpq] += dx[: len(pvpq)]
        vm[pq] += dx[len(pvpq):]
        v = vm * np.exp(1j * va)
    else:
        raise PowerFlowDivergedError(
            f"power flow did not converge in {max_iter} iterations "
            f"(max mismatch {np.max(np.abs(f)):.3e})")

    s_inj = _injections(Y, v)
    mis = s_inj - s_sched
    max_mis = float(np.max(np.abs(np.concatenate([mis[pvpq].real, mis[pq].imag]))))
    s_gen = np.array([
        s_inj[i] + complex(case.buses[i].pload, case.buses[i].qload)
        for i in case.machine_bus_indices
    ])
    _ = slack
    return PowerFlowSolution(v_bus=v, iterations=iterations, max_mismatch=max_mis,
                             s_inj=s_inj, s_gen=s_gen)
