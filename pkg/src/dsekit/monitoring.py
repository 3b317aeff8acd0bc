"""Frequency and anomaly monitoring on top of estimation outputs.

Covers the susceptance-weighted frequency divider (machine rotor speeds to
bus frequencies), center-of-inertia frequency, a kinematic Kalman smoother
treating the rate of change of frequency as a state, rotor-speed baselines
built on numerically differentiated angle proxies, and the innovation-based
anomaly detector with bad-data/anomaly typing.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import chi2

from .network import NetworkCase, connected_components


class MonitoringError(RuntimeError):
    pass


@dataclass
class FrequencySnapshot:
    t: float
    bus_freq: np.ndarray        # pu
    rotor_speed: np.ndarray     # pu
    coi: float                  # pu
    rocof: np.ndarray | None = None   # pu/s


# ---------------------------------------------------------------------------
# frequency divider

def divider_matrices(case: NetworkCase, statuses: list[str] | None = None):
    """Susceptance matrices (B_bb, B_bg) of the series-branch network augmented
    with the machine internal reactances on the system base."""
    n = case.n_bus
    n_g = case.n_machine
    b_bb = np.zeros((n, n))
    for k, br in enumerate(case.branches):
        st = statuses[k] if statuses is not None else br.status
        if st != "closed" or br.x == 0:
            continue
        i, j = case.bus_index(br.from_bus), case.bus_index(br.to_bus)
        b = 1.0 / br.x
        b_bb[i, i] += b
        b_bb[j, j] += b
        b_bb[i, j] -= b
        b_bb[j, i] -= b
    b_bg = np.zeros((n, n_g))
    for g, (p, bus) in enumerate(zip(case.machines, case.machine_buses)):
        x_sys = p.xdp * case.base_mva / p.base_mva
        b_int = 1.0 / x_sys
        i = case.bus_index(bus)
        b_bb[i, i] += b_int
        b_bg[i, g] -= b_int
    return b_bb, b_bg


def frequency_divider(case: NetworkCase, omega: np.ndarray,
                      statuses: list[str] | None = None) -> np.ndarray:
    """Per-bus frequency (pu) interpolated from machine rotor speeds.

    Solves B_bb * df_bus = -B_bg * domega; raises when a bus island has no
    machine (singular subproblem), naming the island.
    """
    comps = connected_components(case, statuses)
    mach_idx = set(case.machine_bus_indices)
    for comp in comps:
        if not (comp & mach_idx):
            buses = sorted(case.buses[i].id for i in comp)
            raise MonitoringError(f"bus island without a machine: {buses}")
    b_bb, b_bg = divider_matrices(case, statuses)
    d_omega = np.asarray(omega, float) - 1.0
    df = np.linalg.solve(b_bb, -b_bg @ d_omega)
    return 1.0 + df


def coi_frequency(omega: np.ndarray, h: np.ndarray,
                  base_mva: np.ndarray | None = None) -> float:
    """Inertia-weighted mean rotor speed; weights use a common MVA base."""
    h = np.asarray(h, float)
    if np.any(h <= 0):
        raise MonitoringError("inertias must be positive")
    w = h if base_mva is None else h * np.asarray(base_mva, float)
    return float(w @ np.asarray(omega, float) / w.sum())


# ---------------------------------------------------------------------------
# ROCoF as a state

def rocof_state_estimate(t: np.ndarray, f_meas: np.ndarray, r: float, q: float):
    """Kinematic [f, df/dt] Kalman filter over a frequency channel.

    ``q`` is the white-noise intensity driving the derivative (pu^2/s^3).
    Returns (f_filtered, rocof, cov_diag).
    """
    if q <= 0:
        raise MonitoringError("rocof process intensity q must be positive")
    n = len(t)
    x = np.array([f_meas[0], 0.0])
    p = np.diag([r, 1.0])
    h_row = np.array([1.0, 0.0])
    out = np.zeros((n, 2))
    cov = np.zeros((n, 2))
    out[0] = x
    cov[0] = np.diag(p)
    for k in range(1, n):
        dt = float(t[k] - t[k - 1])
        a = np.array([[1.0, dt], [0.0, 1.0]])
        qk = q * np.array([[dt ** 3 / 3.0, dt ** 2 / 2.0],
                           [dt ** 2 / 2.0, dt]])
        x = a @ x
        p = a @ p @ a.T + qk
        s = float(h_row @ p @ h_row) + r
        kgain = p @ h_row / s
        x = x + kgain * (f_meas[k] - x[0])
        p = p - np.outer(kgain, h_row @ p)
        out[k] = x
        cov[k] = np.diag(p)
    return out[:, 0], out[:, 1], cov


# ---------------------------------------------------------------------------
# rotor-speed baselines from differentiated angle proxies

def internal_angle_proxy(v_phasor: np.ndarray, i_phasor: np.ndarray,
                         ra: float, x: float, unwrap: bool = True) -> np.ndarray:
    """Machine internal-angle proxy from terminal phasors (voltage behind
    the given reactance); the industry-practice input to derivative-based
    speed estimates."""
    ang = np.angle(np.asarray(v_phasor) + complex(ra, x) * np.asarray(i_phasor))
    return np.unwrap(ang) if unwrap else ang


def derivative_baselines(t: np.ndarray, angle: np.ndarray,
                         lowpass_tau: float = 0.04, washout_tw: float = 0.1):
    """Two legacy speed estimates from an angle series.

    Returns (d_lowpass, d_washout) in rad/s: a two-point difference smoothed
    by a first-order low pass, and the Tustin-discretized washout
    s*Tw/(1+s*Tw) scaled back by Tw.
    """
    t = np.asarray(t, float)
    angle = np.asarray(angle, float)
    if np.any(np.diff(t) <= 0):
        raise MonitoringError("baseline input series must be uniformly sampled")
    h = float(t[1] - t[0])
    diff = np.zeros_like(angle)
    diff[1:] = np.diff(angle) / h
    diff[0] = diff[1] if len(angle) > 1 else 0.0

    alpha = h / (lowpass_tau + h)
    low = np.zeros_like(diff)
    acc = diff[0]
    for k, d in enumerate(diff):
        acc += alpha * (d - acc)
        low[k] = acc

    c = 2.0 * washout_tw / h
    wash = np.zeros_like(angle)
    for k in range(1, len(angle)):
        wash[k] = (c * (angle[k] - angle[k - 1]) - (1.0 - c) * wash[k - 1]) / (1.0 + c)
    wash[0] = wash[1] if len(angle) > 1 else 0.0
    return low, wash / washout_tw


# ---------------------------------------------------------------------------
# anomaly detection

@dataclass
class AnomalyReport:
    flags: np.ndarray            # per-frame chi-square exceedance
    kinds: np.ndarray            # 0 none, 1 isolated bad data, 2 persistent anomaly
    threshold: float
    alpha: float
    onsets: list                 # frame indices where persistent anomalies begin


def anomaly_detect(nis: np.ndarray, dim: int, alpha: float = 0.05,
                   m_of: int = 5, n_of: int = 8) -> AnomalyReport:
    """Per-frame chi-square innovation test plus m-of-n persistence typing.

    Isolated exceedances are labeled bad data; a window with ``m_of`` of the
    last ``n_of`` frames exceeding marks a persistent (model/controller)
    anomaly starting at the first exceedance of the run.
    """
    if not (0.0 < alpha < 1.0):
        raise MonitoringError("alpha must lie in (0, 1)")
    nis = np.asarray(nis, float)
    thr = float(chi2.ppf(1.0 - alpha, dim))
    flags = nis > thr
    kinds = np.zeros(len(nis), dtype=int)
    persistent = np.zeros(len(nis), dtype=bool)
    for k in range(len(nis)):
        lo = max(0, k - n_of + 1)
        if flags[lo: k + 1].sum() >= m_of:
            persistent[lo: k + 1] |= flags[lo: k + 1]
    kinds[flags] = 1
    kinds[persistent] = 2
    onsets = []
    prev = False
    for k, p in enumerate(persistent):
        if p and not prev:
            onsets.append(k)
        prev = p
    return AnomalyReport(flags=flags, kinds=kinds, threshold=thr, alpha=alpha,
                         onsets=onsets)


def nis_series(innovations: np.ndarray, covariances) -> np.ndarray:
    """NIS per frame from innovation vectors and their covariances."""
    innovations = np.atleast_2d(innovations)
    n = len(innovations)
    out = np.zeros(n)
    for k in range(n):
        s = covariances[k] if not isinstance(covariances, np.ndarray) or covariances.ndim == 3 \
            else covariances
        out[k] = float(innovations[k] @ np.linalg.solve(np.atleast_2d(s), innovations[k]))
    return out
