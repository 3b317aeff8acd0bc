"""Operational studies: snapshot (static) estimation, initialization of
dynamic security assessment from static vs dynamic estimates, stability
classification, and finite-time divergence-rate (Lyapunov) estimates.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .machine import InfeasibleDispatchError, MachineAssembly
from .network import NetworkCase, build_admittance
from .simulator import Scenario, Trajectory, simulate


class SseObservabilityError(RuntimeError):
    pass


@dataclass
class SnapshotEstimate:
    t: float
    vm: np.ndarray
    va: np.ndarray
    cov: np.ndarray              # over [va; vm]
    residuals: np.ndarray
    norm_residuals: np.ndarray
    iterations: int

    @property
    def v_phasor(self) -> np.ndarray:
        return self.vm * np.exp(1j * self.va)

    def largest_residual_channel(self) -> int:
        return int(np.argmax(np.abs(self.norm_residuals)))


def _sse_h_and_jacobian(case: NetworkCase, channels, va, vm, Y):
    v = vm * np.exp(1j * va)
    n = case.n_bus
    s_inj = v * np.conj(Y @ v)
    h_rows, jac = [], []
    for ch in channels:
        i = case.bus_index(ch.target)
        row = np.zeros(2 * n)
        if ch.kind == "Vmag":
            h_rows.append(vm[i])
            row[n + i] = 1.0
        elif ch.kind == "Vang":
            h_rows.append(va[i])
            row[i] = 1.0
        elif ch.kind in ("P", "Q"):
            h_rows.append(s_inj[i].real if ch.kind == "P" else s_inj[i].imag)
            # complex power-injection sensitivities at bus i
            ibus = Y @ v
            for j in range(n):
                dv_dva = 1j * v[j] if j == i else 0.0
                dv_dvm = v[j] / vm[j] if j == i else 0.0
                ds_va = (dv_dva * np.conj(ibus[i]) if j == i else 0.0) \
                    + v[i] * np.conj(Y[i, j] * 1j * v[j])
                ds_vm = (dv_dvm * np.conj(ibus[i]) if j == i else 0.0) \
                    + v[i] * np.conj(Y[i, j] * v[j] / vm[j])
                row[j] = ds_va.real if ch.kind == "P" else ds_va.imag
                row[n + j] = ds_vm.real if ch.kind == "P" else ds_vm.imag
        else:
            raise SseObservabilityError(f"unsupported SSE channel kind {ch.kind!r}")
        jac.append(row)
    return np.array(h_rows), np.array(jac)


def sse_wls(case: NetworkCase, frame, max_iter: int = 10, tol: float = 1e-10
            ) -> SnapshotEstimate:
    """Weighted least squares over the snapshot measurement model.

    With only voltage phasor channels the problem is linear and converges in
    one Gauss-Newton step.  Rank deficiency raises with the unobservable
    buses named.
    """
    channels = [c for c in frame.channels if c.kind in ("Vmag", "Vang", "P", "Q")]
    z = np.array([frame.values[i] for i, c in enumerate(frame.channels)
                  if c.kind in ("Vmag", "Vang", "P", "Q")])
    sig = np.array([c.sigma for c in channels])
    n = case.n_bus
    Y = build_admittance(case)
    va = np.zeros(n)
    vm = np.ones(n)
    w = 1.0 / sig

    iterations = 0
    for iterations in range(1, max_iter + 1):
        h, jac = _sse_h_and_jacobian(case, channels, va, vm, Y)
        resid = z - h
        for i, c in enumerate(channels):
            if c.kind == "Vang":
                resid[i] = np.angle(np.exp(1j * resid[i]))
        a = jac * w[:, None]
        rank = np.linalg.matrix_rank(a, tol=1e-8)
        if rank < 2 * n:
            covered = {c.target for c in channels}
            dark = sorted(b.id for b in case.buses if b.id not in covered)
            raise SseObservabilityError(
                f"snapshot model rank {rank} < {2 * n}; "
                f"buses without direct coverage: {dark}")
        dx, *_ = np.linalg.lstsq(a, resid * w, rcond=None)
        va += dx[:n]
        vm += dx[n:]
        if np.max(np.abs(dx)) < tol:
            break

    h, jac = _sse_h_and_jacobian(case, channels, va, vm, Y)
    resid = z - h
    for i, c in enumerate(channels):
        if c.kind == "Vang":
            resid[i] = np.angle(np.exp(1j * resid[i]))
    a = jac * w[:, None]
    gain_inv = np.linalg.inv(a.T @ a)
    cov = gain_inv
    # residual covariance for the largest-normalized-residual test
    r_mat = np.diag(sig ** 2)
    omega = r_mat - jac @ gain_inv @ jac.T
    dn = np.sqrt(np.clip(np.diag(omega), 1e-18, None))
    return SnapshotEstimate(t=frame.t, vm=vm, va=va, cov=cov, residuals=resid,
                            norm_residuals=resid / dn, iterations=iterations)


def init_from_sse(snapshot: SnapshotEstimate, case: NetworkCase):
    """Equilibrium machine states consistent with the snapshot voltages
    (quasi-steady-state assumption: all state derivatives zero).

    Returns (states, vref, pref); infeasible equilibria propagate as
    :class:`InfeasibleDispatchError`.
    """
    v = snapshot.v_phasor
    Y = build_admittance(case)
    s_inj = v * np.conj(Y @ v)
    n_m = case.n_machine
    vref = np.zeros(n_m)
    pref = np.zeros(n_m)
    states = []
    for g, bus in enumerate(case.machine_buses):
        i = case.bus_index(bus)
        p = case.machines[g]
        asm = MachineAssembly(p, case.omega_s)
        s_gen = s_inj[i] + complex(case.buses[i].pload, case.buses[i].qload)
        s_mach = s_gen * case.base_mva / p.base_mva
        try:
            xg, vref[g], pref[g] = asm.equilibrium(v[i], s_mach)
        except InfeasibleDispatchError as exc:
            raise InfeasibleDispatchError(
                f"machine g{g + 1} at bus {bus}: {exc}") from None
        states.append(xg)
    nx = max(len(s) for s in states)
    x = np.zeros((n_m, nx))
    for g, s in enumerate(states):
        x[g, : len(s)] = s
    return x, vref, pref


@dataclass
class DsaResult:
    contingency_id: str
    init_mode: str               # SSE | DSE | truth
    trajectory: Trajectory
    verdict: str                 # stable | unstable
    max_relative_angle_deg: float
    lyapunov: float | None = None
    pair_series: np.ndarray | None = None   # tracked machine-pair relative angle
    pair: tuple = ()

    def to_dict(self) -> dict:
        return {
            "contingency_id": self.contingency_id,
            "init_mode": self.init_mode,
            "verdict": self.verdict,
            "max_relative_angle_deg": self.max_relative_angle_deg,
            "lyapunov": self.lyapunov,
            "pair": list(self.pair),
        }


def run_dsa(case: NetworkCase, contingency: Scenario, x0: np.ndarray,
            setpoints: tuple, v0: np.ndarray | None = None,
            init_mode: str = "DSE", contingency_id: str = "contingency",
            pair: tuple = (9, 10), angle_limit_deg: float = 180.0,
            t_start: float = 0.0) -> DsaResult:
    """Simulate the contingency from the supplied initial condition and
    classify first-swing stability by the relative rotor-angle criterion."""
    tr = simulate(contingency, x0=x0, v0=v0, setpoints=setpoints, t_start=t_start)
    if tr.diverged:
        return DsaResult(contingency_id, init_mode, tr, "withheld",
                         float("nan"), pair=pair)
    spread = tr.angle_spread()
    stable = bool(np.all(spread < np.deg2rad(angle_limit_deg)))
    gi, gj = pair[0] - 1, pair[1] - 1
    rel = tr.states[:, gi, 0] - tr.states[:, gj, 0]
    return DsaResult(
        contingency_id=contingency_id, init_mode=init_mode, trajectory=tr,
        verdict="stable" if stable else "unstable",
        max_relative_angle_deg=float(np.rad2deg(spread.max())),
        pair_series=rel, pair=pair)


# ---------------------------------------------------------------------------
# finite-time divergence rate

def lyapunov_exponent(series: np.ndarray, twin: np.ndarray, dt: float,
                      window: float, d_floor: float = 1e-15) -> float:
    """Largest finite-time divergence rate (1/s) of two neighboring rotor-angle
    trajectories.

    The horizon is cut into windows of the given length; each window's log
    separation growth is fit by least squares from its own start (re-anchored),
    and the window slopes are averaged.
    """
    series = np.atleast_2d(np.asarray(series, float).T).T
    twin = np.atleast_2d(np.asarray(twin, float).T).T
    n = min(len(series), len(twin))
    wlen = int(round(window / dt))
    if wlen < 2 or n < wlen:
        raise ValueError("series shorter than the requested window")
    dist = np.linalg.norm(series[:n] - twin[:n], axis=1)
    dist = np.maximum(dist, d_floor)
    logd = np.log(dist)
    slopes = []
    for s in range(0, n - wlen + 1, wlen):
        seg = logd[s: s + wlen]
        tt = np.arange(wlen) * dt
        a = np.polyfit(tt, seg, 1)[0]
        slopes.append(a)
    return float(np.mean(slopes))


def twin_rotor_series(scenario: Scenario, x0: np.ndarray, setpoints: tuple,
                      perturbation: float = 1e-6, v0: np.ndarray | None = None,
                      t_start: float = 0.0):
    """Base and perturbed rotor-angle series for divergence-rate estimation.

    The twin starts with every rotor angle offset by ``perturbation`` radians.
    """
    base = simulate(scenario, x0=x0, v0=v0, setpoints=setpoints, t_start=t_start)
    xp = np.array(x0, copy=True)
    xp[:, 0] += perturbation
    tw = simulate(scenario, x0=xp, v0=v0, setpoints=setpoints, t_start=t_start)
    d_idx = base.state_names.index("delta") if "delta" in base.state_names else 0
    return base, base.states[:, :, d_idx], tw.states[:, :, d_idx]
