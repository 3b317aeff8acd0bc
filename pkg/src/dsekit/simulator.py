"""Ground-truth time-domain simulation of the multi-machine DAE system.

Integration is trapezoidal-implicit on the machine/controller states with an
alternating algebraic network solution (machines enter the network as Norton
injections; transient saliency is handled by fixed-point refinement).  Event
times are hit exactly by step splitting.  A playback mode integrates a single
machine driven by a measured terminal-voltage series.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from types import SimpleNamespace

import numpy as np

from .machine import MachineAssembly, MachineParams
from .network import (NetworkCase, build_admittance, load_admittance_diagonal,
                      load_case)
from .powerflow import solve_powerflow

EVENT_KINDS = ("fault", "clear", "open", "close", "load_step", "param_drift")


class ScenarioError(ValueError):
    pass


class NetworkSolveError(RuntimeError):
    pass


class IntegrationError(RuntimeError):
    pass


@dataclass
class Event:
    time: float
    kind: str
    bus: int | None = None
    from_bus: int | None = None
    to_bus: int | None = None
    scale: float | None = None
    gen: int | None = None
    param: str | None = None
    factor: float | None = None

    @classmethod
    def from_dict(cls, d: dict) -> "Event":
        d = dict(d)
        t = d.pop("t", d.pop("time", None))
        kind = d.pop("kind")
        return cls(time=float(t), kind=kind,
                   bus=d.pop("bus", None),
                   from_bus=d.pop("from", d.pop("from_bus", None)),
                   to_bus=d.pop("to", d.pop("to_bus", None)),
                   scale=d.pop("scale", None), gen=d.pop("gen", None),
                   param=d.pop("param", None), factor=d.pop("factor", None))

    def to_dict(self) -> dict:
        d = {"t": self.time, "kind": self.kind}
        for k in ("bus", "from_bus", "to_bus", "scale", "gen", "param", "factor"):
            v = getattr(self, k)
            if v is not None:
                d[k] = v
        return d


@dataclass
class Scenario:
    case: NetworkCase
    horizon: float
    dt: float = 1e-3
    rate: float = 60.0
    events: list[Event] = field(default_factory=list)
    load_sigma: float = 0.0
    load_tau: float = 1.0
    seed: int = 0
    fault_admittance: complex = -1e6j

    def __post_init__(self):
        if self.horizon <= 0 or self.dt <= 0:
            raise ScenarioError("horizon and dt must be positive")
        if not (30.0 <= self.rate <= 240.0):
            raise ScenarioError(f"reporting rate {self.rate} outside [30, 240] frames/s")
        times = [e.time for e in self.events]
        if times != sorted(times):
            raise ScenarioError("events must be time-ordered")
        pending = set()
        for e in self.events:
            if e.kind not in EVENT_KINDS:
                raise ScenarioError(f"unknown event kind {e.kind!r}")
            if e.kind == "fault":
                pending.add(e.bus)
            elif e.kind == "clear":
                if e.bus not in pending:
                    raise ScenarioError(f"clear at bus {e.bus} without a preceding fault")
                pending.discard(e.bus)

    # the integration grid is snapped so the frame interval is a whole number
    # of steps (decimation alignment)
    @property
    def frame_dt(self) -> float:
        return 1.0 / self.rate

    @property
    def steps_per_frame(self) -> int:
        return max(1, round(self.frame_dt / self.dt))

    @property
    def dt_actual(self) -> float:
        return self.frame_dt / self.steps_per_frame

    @property
    def n_steps(self) -> int:
        return round(self.horizon / self.dt_actual)

    @classmethod
    def from_dict(cls, d: dict, base_dir: Path | None = None) -> "Scenario":
        d = dict(d)
        case_ref = d.pop("case")
        if isinstance(case_ref, dict):
            from .network import _case_from_dict
            case = _case_from_dict(case_ref)
        else:
            p = Path(case_ref)
            if base_dir is not None and not p.is_absolute() and p.suffix:
                p = base_dir / p
            case = load_case(p if p.suffix else case_ref)
        events = [Event.from_dict(e) for e in d.pop("events", [])]
        known = {"horizon", "dt", "rate", "load_sigma", "load_tau", "seed"}
        unknown = set(d) - known
        if unknown:
            raise ScenarioError(f"unknown scenario keys: {sorted(unknown)}")
        return cls(case=case, events=events, **d)

    def to_dict(self) -> dict:
        return {
            "case": self.case.name,
            "horizon": self.horizon,
            "dt": self.dt,
            "rate": self.rate,
            "load_sigma": self.load_sigma,
            "load_tau": self.load_tau,
            "seed": self.seed,
            "events": [e.to_dict() for e in self.events],
        }


def load_scenario(path: str | Path) -> Scenario:
    """Load a scenario JSON from a path or a bundled name (e.g. ``fig5``)."""
    from importlib import resources
    p = Path(path)
    if not p.exists() and not p.suffix:
        ref = resources.files("dsekit").joinpath(f"scenarios/{path}.json")
        if ref.is_file():
            return Scenario.from_dict(json.loads(ref.read_text()))
    with open(p) as f:
        return Scenario.from_dict(json.load(f), base_dir=p.parent)


@dataclass
class Trajectory:
    t: np.ndarray                 # (nt,) simulation grid
    states: np.ndarray            # (nt, n_machine, nx)
    v_bus: np.ndarray             # (nt, n_bus) complex
    p_mach: np.ndarray            # (nt, n_machine), machine base
    q_mach: np.ndarray            # (nt, n_machine), machine base
    i_mach: np.ndarray            # (nt, n_machine) complex terminal current, machine base
    state_names: tuple
    machine_buses: list[int]
    rate: float
    bus_ids: list[int] = field(default_factory=list)
    diverged: bool = False
    diagnostic: str = ""
    events: list[Event] = field(default_factory=list)

    @property
    def frame_stride(self) -> int:
        return max(1, round((1.0 / self.rate) / (self.t[1] - self.t[0])))

    @property
    def frame_index(self) -> np.ndarray:
        return np.arange(0, len(self.t), self.frame_stride)

    def column(self, gen: int, name: str) -> np.ndarray:
        return self.states[:, gen, self.state_names.index(name)]

    def angle_spread(self) -> np.ndarray:
        """Largest pairwise rotor-angle separation per time point, rad."""
        d = self.states[:, :, self.state_names.index("delta")]
        return d.max(axis=1) - d.min(axis=1)

    def is_stable(self, limit_deg: float = 180.0) -> bool:
        return bool(np.all(self.angle_spread() < np.deg2rad(limit_deg)))


# ---------------------------------------------------------------------------
# machine bank: machines grouped by identical block layout for vectorization

def _group_params(members: list[MachineParams]) -> SimpleNamespace:
    def arr(get):
        return np.array([get(m) for m in members], dtype=float)
    p = SimpleNamespace(
        h=arr(lambda m: m.h), d=arr(lambda m: m.d),
        xd=arr(lambda m: m.xd), xq=arr(lambda m: m.xq),
        xdp=arr(lambda m: m.xdp), xqp=arr(lambda m: m.xqp),
        td0p=arr(lambda m: m.td0p), tq0p=arr(lambda m: m.tq0p),
        ra=arr(lambda m: m.ra), base_mva=arr(lambda m: m.base_mva),
        flags=dict(members[0].flags))
    p.flag = lambda name: int(p.flags.get(name, 0))
    if p.flag("exciter"):
        p.exciter = SimpleNamespace(**{
            k: arr(lambda m, k=k: getattr(m.exciter, k))
            for k in ("ka", "ta", "ke", "te", "kf", "tf", "vrmax", "vrmin")})
    if p.flag("governor"):
        p.governor = SimpleNamespace(**{
            k: arr(lambda m, k=k: getattr(m.governor, k))
            for k in ("r", "tg", "tch", "pmax")})
    if p.flag("pss"):
        p.pss = SimpleNamespace(**{
            k: arr(lambda m, k=k: getattr(m.pss, k))
            for k in ("kstab", "tw", "t1", "t2", "t3", "t4")})
    return p


class MachineBank:
    """All machines of a case, grouped by flag signature for vectorized evaluation."""

    def __init__(self, case: NetworkCase):
        self.case = case
        self.assemblies = [MachineAssembly(p, case.omega_s) for p in case.machines]
        self.bus_idx = np.array(case.machine_bus_indices)
        sigs: dict[tuple, list[int]] = {}
        for g, p in enumerate(case.machines):
            key = (p.flag("exciter"), p.flag("governor"), p.flag("pss"))
            sigs.setdefault(key, []).append(g)
        self.groups = []
        for key, idxs in sigs.items():
            members = [case.machines[g] for g in idxs]
            self.groups.append(SimpleNamespace(
                idx=np.array(idxs),
                asm=self.assemblies[idxs[0]],
                params=_group_params(members)))
        self.nx_of = [a.nx for a in self.assemblies]
        self.nx_max = max(self.nx_of)
        self.n = case.n_machine
        base = np.array([p.base_mva for p in case.machines])
        self.i_scale = base / case.base_mva   # machine-base current -> system base

    def refresh_group(self, gen: int) -> None:
        """Rebuild the stacked parameter arrays containing machine ``gen``."""
        for gr in self.groups:
            if gen in gr.idx:
                gr.params = _group_params([self.case.machines[g] for g in gr.idx])

    def pack_states(self, states: list) -> np.ndarray:
        x = np.zeros((self.n, self.nx_max))
        for g, st in enumerate(states):
            x[g, : self.nx_of[g]] = self.assemblies[g].pack(st) \
                if not isinstance(st, np.ndarray) else st
        return x

    def derivs(self, x: np.ndarray, vmag, vang, vref, pref) -> np.ndarray:
        dx = np.zeros_like(x)
        for gr in self.groups:
            i = gr.idx
            nxg = gr.asm.nx
            dx[i, :nxg] = gr.asm.derivatives(
                x[i, :nxg], vmag[i], vang[i], vref=vref[i], pref=pref[i],
                params=gr.params)
        return dx

    def clamp(self, x: np.ndarray) -> np.ndarray:
        for gr in self.groups:
            p = gr.params
            if p.flag("exciter"):
                j = gr.asm.idx["vr"]
                x[gr.idx, j] = np.clip(x[gr.idx, j], p.exciter.vrmin, p.exciter.vrmax)
            if p.flag("governor"):
                j = gr.asm.idx["gate"]
                x[gr.idx, j] = np.clip(x[gr.idx, j], 0.0, p.governor.pmax)
        return x

    def currents_sys(self, x: np.ndarray, v_bus: np.ndarray) -> np.ndarray:
        """Machine current phasors injected at their buses, system base."""
        inj = np.zeros(self.n, dtype=complex)
        for gr in self.groups:
            i = gr.idx
            v = v_bus[self.bus_idx[i]]
            _, _, iph = gr.asm.outputs(x[i, : gr.asm.nx], np.abs(v), np.angle(v),
                                       params=gr.params)
            inj[i] = iph * self.i_scale[i]
        return inj

    def pq_machine(self, x: np.ndarray, v_bus: np.ndarray):
        p = np.zeros(self.n)
        q = np.zeros(self.n)
        iph = np.zeros(self.n, dtype=complex)
        for gr in self.groups:
            i = gr.idx
            v = v_bus[self.bus_idx[i]]
            pe, qe, ip = gr.asm.outputs(x[i, : gr.asm.nx], np.abs(v), np.angle(v),
                                        params=gr.params)
            p[i], q[i], iph[i] = pe, qe, ip
        return p, q, iph


class NetworkOperator:
    """Live algebraic network: topology, constant-impedance loads, fault shunts.

    For fixed machine states the stator relations are linear in the terminal
    voltage, so the network solution is one exact real 2n-by-2n solve with the
    per-machine dq admittance embedded as a rotated 2-by-2 block (this handles
    transient saliency without fixed-point iteration).
    """

    def __init__(self, case: NetworkCase, bank: MachineBank, v_ref_abs: np.ndarray,
                 fault_admittance: complex = -1e6j):
        self.case = case
        self.bank = bank
        self.n = case.n_bus
        self.statuses = [br.status for br in case.branches]
        self.fault_admittance = fault_admittance
        self.faulted: set[int] = set()
        self.load_scale = np.ones(case.n_bus)
        self.modulation = np.ones(case.n_bus)
        self.y_load0 = load_admittance_diagonal(case, v_ref_abs)
        self._refresh_machine_blocks()
        self._restamp()
        self._rebuild()

    def _refresh_machine_blocks(self):
        # dq current map [Id;Iq] = A [E'd-Vd; E'q-Vq], scaled to system base
        blocks = []
        for p, scale in zip(self.case.machines, self.bank.i_scale):
            det = p.ra * p.ra + p.xdp * p.xqp
            A = np.array([[p.ra, p.xqp], [-p.xdp, p.ra]]) / det
            blocks.append(A * scale)
        self._A_sys = np.array(blocks)

    def _restamp(self):
        """Re-stamp the branch topology (only needed on open/close events)."""
        self._y_topo = build_admittance(self.case, self.statuses, check_islands=True)

    def _rebuild(self):
        Y = self._y_topo.copy()
        Y[np.diag_indices_from(Y)] += self.y_load0 * self.load_scale * self.modulation
        for b in self.faulted:
            i = self.case.bus_index(b)
            Y[i, i] += self.fault_admittance
        n = self.n
        N = np.zeros((2 * n, 2 * n))
        N[:n, :n] = Y.real
        N[:n, n:] = -Y.imag
        N[n:, :n] = Y.imag
        N[n:, n:] = Y.real
        self._N = N

    # -- event hooks -------------------------------------------------------

    def apply_event(self, e: Event) -> None:
        if e.kind == "fault":
            self.faulted.add(e.bus)
        elif e.kind == "clear":
            self.faulted.discard(e.bus)
        elif e.kind in ("open", "close"):
            k = self.case.branch_index(e.from_bus, e.to_bus)
            self.statuses[k] = "closed" if e.kind == "close" else "open"
            self._restamp()
        elif e.kind == "load_step":
            self.load_scale[self.case.bus_index(e.bus)] *= e.scale
        elif e.kind == "param_drift":
            p = self.case.machines[e.gen]
            setattr(p, e.param, getattr(p, e.param) * e.factor)
            self.bank.refresh_group(e.gen)
            self._refresh_machine_blocks()
        else:
            raise ScenarioError(f"unknown event kind {e.kind!r}")
        self._rebuild()

    def set_modulation(self, m_bus: np.ndarray) -> None:
        self.modulation = m_bus
        self._rebuild()

    # -- algebraic solution --------------------------------------------------

    def solve(self, x: np.ndarray, v_guess: np.ndarray | None = None) -> np.ndarray:
        bank = self.bank
        n = self.n
        # delta/eqp/edp occupy the first slots of every assembly layout
        delta = x[:, 0]
        edp_eqp = x[:, [3, 2]]
        a = delta - np.pi / 2.0
        c, s = np.cos(a), np.sin(a)
        T = np.empty((bank.n, 2, 2))
        T[:, 0, 0], T[:, 0, 1] = c, -s
        T[:, 1, 0], T[:, 1, 1] = s, c
        M = np.einsum("gij,gjk,glk->gil", T, self._A_sys, T)
        e_ri = np.einsum("gij,gj->gi", T, edp_eqp)
        rhs = np.zeros(2 * n)
        K = self._N.copy()
        b = bank.bus_idx
        K[b, b] += M[:, 0, 0]
        K[b, n + b] += M[:, 0, 1]
        K[n + b, b] += M[:, 1, 0]
        K[n + b, n + b] += M[:, 1, 1]
        inj = np.einsum("gij,gj->gi", M, e_ri)
        rhs[b] += inj[:, 0]
        rhs[n + b] += inj[:, 1]
        try:
            z = np.linalg.solve(K, rhs)
        except np.linalg.LinAlgError as exc:
            raise NetworkSolveError(f"network matrix singular: {exc}") from None
        return z[:n] + 1j * z[n:]


# ---------------------------------------------------------------------------
# stochastic load process

def stochastic_load_process(scenario: Scenario, sigma: float | None = None,
                            tau: float | None = None, seed: int | None = None):
    """Mean-reverting (Ornstein-Uhlenbeck) multiplicative load modulation.

    Returns ``(t, m)`` with ``m`` of shape (n_steps+1, n_load_buses) sampled on
    the simulation grid; stationary standard deviation equals ``sigma``.
    """
    sigma = scenario.load_sigma if sigma is None else sigma
    tau = scenario.load_tau if tau is None else tau
    seed = scenario.seed if seed is None else seed
    if sigma < 0:
        raise ScenarioError("load sigma must be non-negative")
    case = scenario.case
    load_buses = [i for i, b in enumerate(case.buses) if b.pload != 0 or b.qload != 0]
    n = scenario.n_steps
    t = np.arange(n + 1) * scenario.dt_actual
    m = np.ones((n + 1, len(load_buses)))
    if sigma > 0:
        rng = np.random.default_rng(seed)
        a = np.exp(-scenario.dt_actual / tau)
        s = sigma * np.sqrt(1.0 - a * a)
        dev = rng.normal(0.0, sigma, size=len(load_buses))
        m[0] += dev
        for k in range(1, n + 1):
            dev = a * dev + s * rng.normal(0.0, 1.0, size=len(load_buses))
            m[k] += dev
    return t, m, load_buses


# ---------------------------------------------------------------------------
# main integration

def _u_of(bank: MachineBank, v_bus: np.ndarray):
    v = v_bus[bank.bus_idx]
    return np.abs(v), np.angle(v)


def simulate(scenario: Scenario, x0: np.ndarray | None = None,
             v0: np.ndarray | None = None, t_start: float = 0.0,
             setpoints: tuple | None = None,
             corrector_tol: float = 1e-9, max_corrector: int = 12,
             min_substep_fraction: float = 1.0 / 64.0) -> Trajectory:
    """Integrate the scenario and return the ground-truth trajectory.

    With ``x0``/``v0`` the run starts from the given machine states and bus
    voltages instead of the power-flow equilibrium (used for DSA replays; the
    states may carry nonzero derivatives).  ``t_start`` shifts the grid so a
    continuation run reuses the same seeded load-noise realization.
    """
    case = scenario.case
    bank = MachineBank(case)
    dt = scenario.dt_actual

    pf = solve_powerflow(case)
    if setpoints is None:
        vref = np.zeros(bank.n)
        pref = np.zeros(bank.n)
        x_eq = np.zeros((bank.n, bank.nx_max))
        for g in range(bank.n):
            p = case.machines[g]
            vb = pf.v_bus[bank.bus_idx[g]]
            s_m = pf.s_gen[g] * case.base_mva / p.base_mva
            xg, vref[g], pref[g] = bank.assemblies[g].equilibrium(vb, s_m)
            x_eq[g, : bank.nx_of[g]] = xg
    else:
        vref, pref = np.asarray(setpoints[0], float), np.asarray(setpoints[1], float)
        x_eq = None

    x = x_eq.copy() if x0 is None else np.array(x0, dtype=float, copy=True)
    net = NetworkOperator(case, bank, np.abs(pf.v_bus), scenario.fault_admittance)
    v = (pf.v_bus if v0 is None else np.asarray(v0)).copy()

    # seeded load modulation shared across continuation runs of the same scenario
    total_steps = scenario.n_steps
    k_start = round(t_start / dt)
    _, mod, load_buses = stochastic_load_process(
        Scenario(case=case, horizon=t_start + scenario.horizon, dt=scenario.dt,
                 rate=scenario.rate, load_sigma=scenario.load_sigma,
                 load_tau=scenario.load_tau, seed=scenario.seed))
    stochastic = scenario.load_sigma > 0 and len(load_buses) > 0

    events = sorted(scenario.events, key=lambda e: e.time)
    eq = list(events)

    t_grid = t_start + np.arange(total_steps + 1) * dt
    states = np.zeros((total_steps + 1, bank.n, bank.nx_max))
    v_hist = np.zeros((total_steps + 1, case.n_bus), dtype=complex)
    p_hist = np.zeros((total_steps + 1, bank.n))
    q_hist = np.zeros((total_steps + 1, bank.n))
    i_hist = np.zeros((total_steps + 1, bank.n), dtype=complex)
    applied: list[Event] = []
    diverged = False
    diagnostic = ""

    def due_events(t_now):
        out = []
        while eq and eq[0].time <= t_now + 1e-12:
            out.append(eq.pop(0))
        return out

    def trap_step(xc, vc, fc, h, vref, pref, depth=0):
        xp = bank.clamp(xc + h * fc)
        vv = vc
        for _ in range(max_corrector):
            vv = net.solve(xp, vv)
            vm, va = _u_of(bank, vv)
            f1 = bank.derivs(xp, vm, va, vref, pref)
            xn = bank.clamp(xc + 0.5 * h * (fc + f1))
            err = np.max(np.abs(xn - xp))
            xp = xn
            if err < corrector_tol * max(1.0, np.max(np.abs(xn))):
                return xn, vv, f1
        if depth >= 6 or h < scenario.dt_actual * min_substep_fraction:
            raise IntegrationError(
                f"trapezoidal corrector stalled at h = {h:.2e} s")
        xm, vm_, fm = trap_step(xc, vc, fc, 0.5 * h, vref, pref, depth + 1)
        return trap_step(xm, vm_, fm, 0.5 * h, vref, pref, depth + 1)

    # events at or before t_start fire before the first step
    for e in due_events(t_grid[0]):
        net.apply_event(e)
        applied.append(e)
    if stochastic:
        mrow = np.ones(case.n_bus)
        mrow[load_buses] = mod[min(k_start, len(mod) - 1)]
        net.set_modulation(mrow)
    v = net.solve(x, v)
    vm, va = _u_of(bank, v)
    f = bank.derivs(x, vm, va, vref, pref)

    states[0], v_hist[0] = x, v
    p_hist[0], q_hist[0], i_hist[0] = bank.pq_machine(x, v)

    try:
        for k in range(total_steps):
            t0, t1 = t_grid[k], t_grid[k + 1]
            if stochastic:
                mrow = np.ones(case.n_bus)
                mrow[load_buses] = mod[min(k_start + k, len(mod) - 1)]
                net.set_modulation(mrow)
                v = net.solve(x, v)
                vm, va = _u_of(bank, v)
                f = bank.derivs(x, vm, va, vref, pref)
            t_cur = t0
            while t_cur < t1 - 1e-12:
                t_stop = min(t1, eq[0].time) if eq and eq[0].time < t1 - 1e-12 else t1
                if t_stop > t_cur + 1e-12:
                    x, v, f = trap_step(x, v, f, t_stop - t_cur, vref, pref)
                    t_cur = t_stop
                hit = due_events(t_cur)
                if hit:
                    for e in hit:
                        net.apply_event(e)
                        applied.append(e)
                    v = net.solve(x, v)
                    vm, va = _u_of(bank, v)
                    f = bank.derivs(x, vm, va, vref, pref)
            if not np.all(np.isfinite(x)):
                raise IntegrationError("non-finite state encountered")
            states[k + 1], v_hist[k + 1] = x, v
            p_hist[k + 1], q_hist[k + 1], i_hist[k + 1] = bank.pq_machine(x, v)
    except (IntegrationError, NetworkSolveError) as exc:
        diverged = True
        diagnostic = str(exc)
        last = k + 1
        t_grid = t_grid[:last]
        states, v_hist = states[:last], v_hist[:last]
        p_hist, q_hist, i_hist = p_hist[:last], q_hist[:last], i_hist[:last]

    return Trajectory(
        t=t_grid, states=states, v_bus=v_hist, p_mach=p_hist, q_mach=q_hist,
        i_mach=i_hist,
        state_names=bank.assemblies[0].state_names
        if len({a.state_names for a in bank.assemblies}) == 1
        else tuple(f"x{i}" for i in range(bank.nx_max)),
        machine_buses=list(case.machine_buses), rate=scenario.rate,
        bus_ids=[b.id for b in case.buses],
        diverged=diverged, diagnostic=diagnostic, events=applied)


def equilibrium_setpoints(case: NetworkCase):
    """Power-flow equilibrium states plus (vref, pref) arrays for all machines."""
    bank = MachineBank(case)
    pf = solve_powerflow(case)
    vref = np.zeros(bank.n)
    pref = np.zeros(bank.n)
    x = np.zeros((bank.n, bank.nx_max))
    for g in range(bank.n):
        p = case.machines[g]
        vb = pf.v_bus[bank.bus_idx[g]]
        s_m = pf.s_gen[g] * case.base_mva / p.base_mva
        xg, vref[g], pref[g] = bank.assemblies[g].equilibrium(vb, s_m)
        x[g, : bank.nx_of[g]] = xg
    return x, vref, pref, pf


# ---------------------------------------------------------------------------
# playback

@dataclass
class PlaybackResult:
    t: np.ndarray
    states: np.ndarray      # (n_frames, nx)
    p: np.ndarray           # machine base
    q: np.ndarray
    gaps: list[float] = field(default_factory=list)


def playback(assembly: MachineAssembly, t_u: np.ndarray, vmag: np.ndarray,
             vang: np.ndarray, x0: np.ndarray, vref: float, pref: float,
             params: MachineParams | None = None, substeps: int | None = None,
             max_gap: float = 0.1, efd_ext=None, pm_ext=None) -> PlaybackResult:
    """Integrate one machine holding the measured terminal voltage (zero-order
    hold between frames) and return the model-implied state and P/Q series.

    Frame gaps larger than ``max_gap`` seconds are recorded in ``gaps``.
    """
    t_u = np.asarray(t_u, float)
    if np.any(np.diff(t_u) <= 0):
        raise ScenarioError("playback input series must be strictly increasing in time")
    p = params if params is not None else assembly.params
    n = len(t_u)
    x = np.array(x0, dtype=float, copy=True)
    states = np.zeros((n, assembly.nx))
    states[0] = x
    gaps = [float(t) for t, d in zip(t_u[1:], np.diff(t_u)) if d > max_gap]

    def rk4(x, h, vm, va):
        k1 = assembly.derivatives(x, vm, va, vref, pref, efd_ext, pm_ext, params=p)
        k2 = assembly.derivatives(x + 0.5 * h * k1, vm, va, vref, pref, efd_ext, pm_ext, params=p)
        k3 = assembly.derivatives(x + 0.5 * h * k2, vm, va, vref, pref, efd_ext, pm_ext, params=p)
        k4 = assembly.derivatives(x + h * k3, vm, va, vref, pref, efd_ext, pm_ext, params=p)
        return assembly.clamp(x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4))

    for k in range(1, n):
        h_frame = t_u[k] - t_u[k - 1]
        ns = substeps if substeps is not None else (1 if h_frame <= 1.0 / 60.0 + 1e-9 else 4)
        h = h_frame / ns
        for _ in range(ns):
            x = rk4(x, h, vmag[k - 1], vang[k - 1])
        states[k] = x
    pe, qe, _ = assembly.outputs(states, vmag, vang, params=p)
    return PlaybackResult(t=t_u, states=states, p=pe, q=qe, gaps=gaps)
