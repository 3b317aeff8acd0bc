"""Synchronous machine assembly: two-axis machine, DC1A-type exciter, droop
governor, optional stabilizer, and the stator/network boundary algebra.

All machine quantities are per unit on the machine base; the network boundary
converts to the system base.  Every dynamic function is vectorized over
leading axes of the state array, so the same code serves single-machine
evaluation, stacked multi-machine simulation, and sigma-point ensembles
(parameters may themselves be arrays aligned with the leading axes).

State layout (order fixed, presence controlled by the model flags):

    delta, omega, eqp, edp            two-axis machine (always)
    efd, vr, rf                       exciter (flag ``exciter``)
    pm, gate                          governor (flag ``governor``)
    pss_wash, pss_lead1, pss_lead2    stabilizer (flag ``pss``)
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

MACHINE_STATES = ("delta", "omega", "eqp", "edp")
EXCITER_STATES = ("efd", "vr", "rf")
GOVERNOR_STATES = ("pm", "gate")
PSS_STATES = ("pss_wash", "pss_lead1", "pss_lead2")


class ModelInputError(ValueError):
    """Raised when a dynamic evaluation receives a non-finite or invalid input."""


class ParamValidationError(ValueError):
    """Raised when machine parameters violate a structural invariant."""


class InfeasibleDispatchError(RuntimeError):
    """Raised when equilibrium initialization needs a field voltage outside limits."""


@dataclass
class ExciterParams:
    ka: float = 20.0
    ta: float = 0.2
    ke: float = 1.0
    te: float = 0.314
    kf: float = 0.063
    tf: float = 0.35
    vrmax: float = 5.0
    vrmin: float = -5.0


@dataclass
class GovernorParams:
    r: float = 0.05       # droop, pu
    tg: float = 0.2       # servo lag, s
    tch: float = 0.3      # turbine charging lag, s
    pmax: float = 12.0    # gate ceiling, pu on machine base


@dataclass
class PssParams:
    kstab: float = 5.0
    tw: float = 10.0
    t1: float = 0.08
    t2: float = 0.02
    t3: float = 0.08
    t4: float = 0.02


@dataclass
class MachineParams:
    """Per-machine dynamic parameters on the machine MVA base.

    ``flags`` are integer model selectors: 1 enables the exciter / governor /
    stabilizer blocks, 0 removes their states from the assembly (the removed
    quantity becomes an external input).
    """

    h: float
    d: float
    xd: float
    xq: float
    xdp: float
    xqp: float
    td0p: float
    tq0p: float
    ra: float = 0.0
    base_mva: float = 100.0
    exciter: Optional[ExciterParams] = None
    governor: Optional[GovernorParams] = None
    pss: Optional[PssParams] = None
    flags: dict = field(default_factory=lambda: {"exciter": 1, "governor": 1, "pss": 0})

    def validate(self, label: str = "machine") -> None:
        for name, value in self.flags.items():
            if name not in ("exciter", "governor", "pss"):
                raise ParamValidationError(f"{label}: unknown flag {name!r}")
            if float(value) != int(value):
                raise ParamValidationError(
                    f"{label}: flag {name!r} must be an integer, got {value}")
            if int(value) not in (0, 1):
                raise ParamValidationError(f"{label}: flag {name!r} outside {{0,1}}")
        if self.h <= 0:
            raise ParamValidationError(f"{label}: H must be positive")
        if not (self.xdp < self.xd):
            raise ParamValidationError(f"{label}: X'd must be below Xd")
        if not (self.xqp <= self.xq):
            raise ParamValidationError(f"{label}: X'q must not exceed Xq")
        for name in ("td0p", "tq0p"):
            if getattr(self, name) <= 0:
                raise ParamValidationError(f"{label}: {name} must be positive")
        if self.base_mva <= 0:
            raise ParamValidationError(f"{label}: base_mva must be positive")
        if self.flag("exciter"):
            e = self.exciter
            if e is None:
                raise ParamValidationError(f"{label}: exciter flag set but no parameters")
            if not (e.vrmin < e.vrmax):
                raise ParamValidationError(f"{label}: VRmin must be below VRmax")
            for name in ("ka", "ta", "ke", "te", "tf"):
                if getattr(e, name) <= 0:
                    raise ParamValidationError(f"{label}: exciter {name} must be positive")
        if self.flag("governor"):
            g = self.governor
            if g is None:
                raise ParamValidationError(f"{label}: governor flag set but no parameters")
            for name in ("r", "tg", "tch", "pmax"):
                if getattr(g, name) <= 0:
                    raise ParamValidationError(f"{label}: governor {name} must be positive")
        if self.flag("pss"):
            if self.pss is None:
                raise ParamValidationError(f"{label}: pss flag set but no parameters")
            if not self.flag("exciter"):
                raise ParamValidationError(f"{label}: pss requires the exciter")
            for name in ("tw", "t2", "t4"):
                if getattr(self.pss, name) <= 0:
                    raise ParamValidationError(f"{label}: pss {name} must be positive")

    def flag(self, name: str) -> int:
        return int(self.flags.get(name, 0))

    def replace(self, **kw) -> "MachineParams":
        return replace(self, **kw)

    @classmethod
    def from_dict(cls, d: dict) -> "MachineParams":
        d = dict(d)
        for key, sub in (("exciter", ExciterParams), ("governor", GovernorParams),
                         ("pss", PssParams)):
            if d.get(key) is not None:
                d[key] = sub(**d[key])
        return cls(**d)

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in
             ("h", "d", "xd", "xq", "xdp", "xqp", "td0p", "tq0p", "ra", "base_mva")}
        d["flags"] = dict(self.flags)
        for key in ("exciter", "governor", "pss"):
            sub = getattr(self, key)
            d[key] = None if sub is None else vars(sub).copy()
        return d


@dataclass
class MachineState:
    """Named view of one machine's dynamic state (see module docstring for units)."""

    delta: float
    omega: float
    eqp: float
    edp: float
    efd: float = 0.0
    vr: float = 0.0
    rf: float = 0.0
    pm: float = 0.0
    gate: float = 0.0
    pss_wash: float = 0.0
    pss_lead1: float = 0.0
    pss_lead2: float = 0.0


@dataclass
class InputVector:
    """Terminal boundary quantities driving a machine assembly."""

    vmag: float
    vang: float
    freq: Optional[float] = None
    vref: Optional[float] = None
    pref: Optional[float] = None

    def validate(self) -> None:
        for name in ("vmag", "vang"):
            v = getattr(self, name)
            if not np.all(np.isfinite(v)):
                raise ModelInputError(f"non-finite input field {name!r}")
        if np.any(np.asarray(self.vmag) <= 0):
            raise ModelInputError("input field 'vmag' must be positive")


def _dq_currents(eqp, edp, vd, vq, p):
    det = p.ra * p.ra + p.xdp * p.xqp
    i_d = (p.ra * (edp - vd) + p.xqp * (eqp - vq)) / det
    i_q = (p.ra * (eqp - vq) - p.xdp * (edp - vd)) / det
    return i_d, i_q


class MachineAssembly:
    """One machine plus its enabled controllers, with a declared state order."""

    def __init__(self, params: MachineParams, omega_s: float = 2 * np.pi * 60.0):
        params.validate()
        self.params = params
        self.omega_s = omega_s
        names = list(MACHINE_STATES)
        if params.flag("exciter"):
            names += EXCITER_STATES
        if params.flag("governor"):
            names += GOVERNOR_STATES
        if params.flag("pss"):
            names += PSS_STATES
        self.state_names = tuple(names)
        self.idx = {n: i for i, n in enumerate(names)}

    @property
    def nx(self) -> int:
        return len(self.state_names)

    # -- conversions ------------------------------------------------------

    def pack(self, st: MachineState) -> np.ndarray:
        return np.array([getattr(st, n) for n in self.state_names], dtype=float)

    def unpack(self, x: np.ndarray) -> MachineState:
        x = np.asarray(x, dtype=float)
        if x.shape != (self.nx,):
            raise ModelInputError(
                f"state vector length {x.shape} does not match assembly order {self.nx}")
        return MachineState(**{n: float(x[i]) for n, i in self.idx.items()})

    # -- dynamics ----------------------------------------------------------

    def derivatives(self, x: np.ndarray, vmag, vang, vref=None, pref=None,
                    efd_ext=None, pm_ext=None, params: MachineParams | None = None
                    ) -> np.ndarray:
        """Time derivatives of the assembly state.

        ``x`` has shape (..., nx); scalar or broadcast-compatible terminal
        quantities.  When a controller block is disabled, the corresponding
        drive (``efd_ext`` or ``pm_ext``) must be supplied.  Exciter output and
        governor gate limits are enforced with anti-windup (outward derivative
        forced to zero at a binding limit).
        """
        p = params if params is not None else self.params
        x = np.asarray(x, dtype=float)
        ix = self.idx
        delta, omega = x[..., ix["delta"]], x[..., ix["omega"]]
        eqp, edp = x[..., ix["eqp"]], x[..., ix["edp"]]
        dw = omega - 1.0

        rot = delta - vang
        vd = vmag * np.sin(rot)
        vq = vmag * np.cos(rot)
        i_d, i_q = _dq_currents(eqp, edp, vd, vq, p)
        te = edp * i_d + eqp * i_q + (p.xqp - p.xdp) * i_d * i_q

        dx = np.empty_like(x)
        if p.flag("exciter"):
            efd = x[..., ix["efd"]]
        else:
            if efd_ext is None:
                raise ModelInputError("exciter disabled: efd_ext input required")
            efd = efd_ext
        if p.flag("governor"):
            pm = x[..., ix["pm"]]
        else:
            if pm_ext is None:
                raise ModelInputError("governor disabled: pm_ext input required")
            pm = pm_ext

        dx[..., ix["delta"]] = self.omega_s * dw
        dx[..., ix["omega"]] = (pm - te - p.d * dw) / (2.0 * p.h)
        dx[..., ix["eqp"]] = (-eqp - (p.xd - p.xdp) * i_d + efd) / p.td0p
        dx[..., ix["edp"]] = (-edp + (p.xq - p.xqp) * i_q) / p.tq0p

        vpss = 0.0
        if p.flag("pss"):
            s = p.pss
            wash, lead1, lead2 = (x[..., ix["pss_wash"]], x[..., ix["pss_lead1"]],
                                  x[..., ix["pss_lead2"]])
            y_w = s.kstab * dw - wash
            y_1 = lead1 + (s.t1 / s.t2) * (y_w - lead1)
            vpss = lead2 + (s.t3 / s.t4) * (y_1 - lead2)
            dx[..., ix["pss_wash"]] = y_w / s.tw
            dx[..., ix["pss_lead1"]] = (y_w - lead1) / s.t2
            dx[..., ix["pss_lead2"]] = (y_1 - lead2) / s.t4

        if p.flag("exciter"):
            e = p.exciter
            if vref is None:
                raise ModelInputError("exciter enabled: vref input required")
            vr, rf = x[..., ix["vr"]], x[..., ix["rf"]]
            dx[..., ix["efd"]] = (vr - e.ke * efd) / e.te
            dx[..., ix["rf"]] = (-rf + (e.kf / e.tf) * efd) / e.tf
            dvr = (-vr + e.ka * (rf - (e.kf / e.tf) * efd + vref - vmag + vpss)) / e.ta
            hi = (vr >= e.vrmax) & (dvr > 0)
            lo = (vr <= e.vrmin) & (dvr < 0)
            dx[..., ix["vr"]] = np.where(hi | lo, 0.0, dvr)

        if p.flag("governor"):
            g = p.governor
            if pref is None:
                raise ModelInputError("governor enabled: pref input required")
            gate = x[..., ix["gate"]]
            dgate = (pref - dw / g.r - gate) / g.tg
            hi = (gate >= g.pmax) & (dgate > 0)
            lo = (gate <= 0.0) & (dgate < 0)
            dx[..., ix["gate"]] = np.where(hi | lo, 0.0, dgate)
            dx[..., ix["pm"]] = (gate - pm) / g.tch

        return dx

    def clamp(self, x: np.ndarray) -> np.ndarray:
        """Clip limited states into their admissible bands (in place)."""
        p = self.params
        if p.flag("exciter"):
            i = self.idx["vr"]
            np.clip(x[..., i], p.exciter.vrmin, p.exciter.vrmax, out=x[..., i])
        if p.flag("governor"):
            i = self.idx["gate"]
            np.clip(x[..., i], 0.0, p.governor.pmax, out=x[..., i])
        return x

    def outputs(self, x: np.ndarray, vmag, vang, params: MachineParams | None = None):
        """Terminal P, Q (machine base) and the current phasor (machine base)."""
        p = params if params is not None else self.params
        x = np.asarray(x, dtype=float)
        delta = x[..., self.idx["delta"]]
        eqp, edp = x[..., self.idx["eqp"]], x[..., self.idx["edp"]]
        rot = delta - vang
        vd = vmag * np.sin(rot)
        vq = vmag * np.cos(rot)
        i_d, i_q = _dq_currents(eqp, edp, vd, vq, p)
        pe = vd * i_d + vq * i_q
        qe = vq * i_d - vd * i_q
        i_ph = (i_d + 1j * i_q) * np.exp(1j * (delta - np.pi / 2.0))
        return pe, qe, i_ph

    # -- equilibrium -------------------------------------------------------

    def equilibrium(self, v_phasor: complex, s_machine: complex):
        """Steady state consistent with terminal voltage and machine-base power.

        Returns ``(x0, vref, pref)``; with disabled blocks the matching
        setpoint slot carries the constant external drive instead.
        """
        p = self.params
        v = complex(v_phasor)
        s = complex(s_machine)
        i = np.conj(s / v)
        delta = np.angle(v + complex(p.ra, p.xq) * i)
        rot = np.exp(-1j * (delta - np.pi / 2.0))
        vdq, idq = v * rot, i * rot
        vd, vq = vdq.real, vdq.imag
        i_d, i_q = idq.real, idq.imag
        eqp = vq + p.ra * i_q + p.xdp * i_d
        edp = vd + p.ra * i_d - p.xqp * i_q
        efd = eqp + (p.xd - p.xdp) * i_d
        te = edp * i_d + eqp * i_q + (p.xqp - p.xdp) * i_d * i_q

        st = MachineState(delta=float(delta), omega=1.0, eqp=float(eqp), edp=float(edp))
        vref = pref = None
        if p.flag("exciter"):
            e = p.exciter
            vr = e.ke * efd
            if not (e.vrmin <= vr <= e.vrmax):
                raise InfeasibleDispatchError(
                    f"required regulator output {vr:.3f} outside "
                    f"[{e.vrmin}, {e.vrmax}]: infeasible dispatch")
            st.efd, st.vr, st.rf = float(efd), float(vr), float(e.kf / e.tf * efd)
            vref = float(abs(v) + vr / e.ka)
        else:
            vref = float(efd)  # constant external field drive
        if p.flag("governor"):
            st.pm = st.gate = float(te)
            pref = float(te)
        else:
            pref = float(te)  # constant external mechanical drive
        return self.pack(st), vref, pref


# ---------------------------------------------------------------------------
# Spec-level operations on named records

def machine_derivatives(state: MachineState, u: InputVector, params: MachineParams,
                        omega_s: float = 2 * np.pi * 60.0) -> np.ndarray:
    """Derivative vector for one machine; rejects non-finite inputs by field name."""
    u.validate()
    asm = MachineAssembly(params, omega_s)
    x = asm.pack(state)
    for name, value in zip(asm.state_names, x):
        if not np.isfinite(value):
            raise ModelInputError(f"non-finite state field {name!r}")
    efd_ext = None if params.flag("exciter") else (u.vref if u.vref is not None else None)
    pm_ext = None if params.flag("governor") else (u.pref if u.pref is not None else None)
    return asm.derivatives(x, u.vmag, u.vang, vref=u.vref, pref=u.pref,
                           efd_ext=efd_ext, pm_ext=pm_ext)


def stator_outputs(state: MachineState, u: InputVector, params: MachineParams):
    """Terminal P, Q and current phasor for one machine (machine base)."""
    u.validate()
    asm = MachineAssembly(params)
    x = asm.pack(state)
    for name, value in zip(asm.state_names, x):
        if not np.isfinite(value):
            raise ModelInputError(f"non-finite state field {name!r}")
    return asm.outputs(x, u.vmag, u.vang)


def steady_state_init(case, pf) -> list[MachineState]:
    """Equilibrium machine states for every machine from a power-flow solution.

    ``pf`` must expose ``v_bus`` (complex bus voltages, system pu) and
    ``s_gen`` (complex generation per machine, system base).
    """
    states = []
    for g, bus_id in enumerate(case.machine_buses):
        p = case.machines[g]
        asm = MachineAssembly(p, case.omega_s)
        v = pf.v_bus[case.bus_index(bus_id)]
        s_mach = pf.s_gen[g] * case.base_mva / p.base_mva
        x0, _, _ = asm.equilibrium(v, s_mach)
        states.append(asm.unpack(x0))
    return states
