"""Prediction/correction filtering for dynamic state estimation.

Three estimators over one model protocol: extended (Jacobian), unscented
(scaled sigma points), and ensemble (perturbed observations).  All share the
innovation-based update, so Huber reweighting of standardized innovations
(robust correction) applies uniformly.  Measured terminal quantities that
drive the prediction carry noise; their covariance is mapped into effective
process and measurement covariances so the innovation statistics stay
calibrated.

Models must expose ``nx``, ``nz``, ``propagate(x, u, dt)``, ``measure(x, u)``
(both vectorized over leading axes of ``x``), a ``wrap_mask`` marking angle
measurement channels, and optionally exact Jacobians plus ``input_cov``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from types import SimpleNamespace

import numpy as np

from .machine import MachineAssembly, MachineParams
from .measurements import wrap_angle


class FilterError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# filter state and covariance conditioning

@dataclass
class FilterState:
    mean: np.ndarray
    cov: np.ndarray
    q: np.ndarray
    r: np.ndarray
    innovation: np.ndarray | None = None
    innovation_cov: np.ndarray | None = None
    nis: float | None = None
    ensemble: np.ndarray | None = None

    def copy(self) -> "FilterState":
        return FilterState(
            mean=self.mean.copy(), cov=self.cov.copy(), q=self.q, r=self.r,
            innovation=None if self.innovation is None else self.innovation.copy(),
            innovation_cov=None if self.innovation_cov is None else self.innovation_cov.copy(),
            nis=self.nis,
            ensemble=None if self.ensemble is None else self.ensemble.copy())


def make_filter_state(x0, p0, q, r) -> FilterState:
    x0 = np.asarray(x0, float)
    p0 = np.atleast_2d(np.asarray(p0, float))
    return FilterState(mean=x0.copy(), cov=p0.copy(),
                       q=np.atleast_2d(np.asarray(q, float)),
                       r=np.atleast_2d(np.asarray(r, float)))


def condition_cov(p: np.ndarray, floor: float = 1e-14) -> np.ndarray:
    """Symmetrize and floor eigenvalues so the covariance stays PSD."""
    p = 0.5 * (p + p.T)
    w, v = np.linalg.eigh(p)
    if w[0] < floor:
        w = np.clip(w, floor, None)
        p = (v * w) @ v.T
        p = 0.5 * (p + p.T)
    return p


def _sqrt_psd(p: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.cholesky(p)
    except np.linalg.LinAlgError:
        p = condition_cov(p)
        try:
            return np.linalg.cholesky(p)
        except np.linalg.LinAlgError as exc:
            cond = np.linalg.cond(p)
            raise FilterError(
                f"covariance factorization failed (condition number {cond:.2e})"
            ) from exc


def fd_jacobian(f, x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central-difference Jacobian of a vectorized map at ``x``."""
    n = len(x)
    h = eps * np.maximum(1.0, np.abs(x))
    pts = np.vstack([x + np.diag(h), x - np.diag(h)])
    out = f(pts)
    return (out[:n] - out[n:]).T / (2.0 * h)


# ---------------------------------------------------------------------------
# shared innovation machinery

class BaseFilter:
    """Common prediction/correction skeleton over a state-space model."""

    def __init__(self, model):
        self.model = model

    # subclasses fill these
    def predict(self, fs: FilterState, u, dt: float) -> FilterState:
        raise NotImplementedError

    def _innovation_stats(self, fs: FilterState, u):
        """Return (zhat, Pzz, Pxz) at the predicted state (R excluded)."""
        raise NotImplementedError

    def _effective_q(self, fs: FilterState, u, dt: float) -> np.ndarray:
        q = fs.q
        ru = getattr(self.model, "input_cov", lambda u: None)(u)
        if ru is not None:
            gu = self._input_jacobian_propagate(fs.mean, u, dt)
            q = q + gu @ ru @ gu.T
        return q

    def _effective_r_base(self, fs: FilterState, u, r: np.ndarray) -> np.ndarray:
        ru = getattr(self.model, "input_cov", lambda u: None)(u)
        if ru is not None:
            hu = self._input_jacobian_measure(fs.mean, u)
            r = r + hu @ ru @ hu.T
        return r

    def _input_jacobian_propagate(self, x, u, dt):
        u = np.asarray(u, float)
        h = 1e-6 * np.maximum(1.0, np.abs(u))
        cols = []
        for i in range(len(u)):
            up, um = u.copy(), u.copy()
            up[i] += h[i]
            um[i] -= h[i]
            cols.append((self.model.propagate(x, up, dt)
                         - self.model.propagate(x, um, dt)) / (2 * h[i]))
        return np.array(cols).T

    def _input_jacobian_measure(self, x, u):
        u = np.asarray(u, float)
        h = 1e-6 * np.maximum(1.0, np.abs(u))
        cols = []
        for i in range(len(u)):
            up, um = u.copy(), u.copy()
            up[i] += h[i]
            um[i] -= h[i]
            cols.append((self.model.measure(x, up) - self.model.measure(x, um))
                        / (2 * h[i]))
        return np.array(cols).T

    def _wrap(self, innov: np.ndarray) -> np.ndarray:
        mask = getattr(self.model, "wrap_mask", None)
        if mask is not None and np.any(mask):
            innov = innov.copy()
            innov[mask] = wrap_angle(innov[mask])
        return innov

    def _apply_update(self, fs: FilterState, u, z, r_eff: np.ndarray):
        zhat, pzz, pxz = self._innovation_stats(fs, u)
        innov = self._wrap(np.asarray(z, float) - zhat)
        s = pzz + r_eff
        k = np.linalg.solve(s.T, pxz.T).T
        mean = fs.mean + k @ innov
        cov = condition_cov(fs.cov - k @ s @ k.T)
        nis = float(innov @ np.linalg.solve(s, innov))
        return mean, cov, innov, s, nis, k

    def correct(self, fs: FilterState, z, u=None, r: np.ndarray | None = None
                ) -> FilterState:
        r = fs.r if r is None else r
        r_eff = self._effective_r_base(fs, u, r)
        mean, cov, innov, s, nis, _ = self._apply_update(fs, u, z, r_eff)
        if not np.isfinite(nis):
            out = fs.copy()
            out.nis = np.nan
            return out
        out = replace(fs, mean=mean, cov=cov, innovation=innov,
                      innovation_cov=s, nis=nis)
        self._refresh_ensemble(out, u, z, r_eff)
        return out

    def robust_correct(self, fs: FilterState, z, u=None, gamma: float = 1.5,
                       r: np.ndarray | None = None, max_passes: int = 10
                       ) -> FilterState:
        """Huber reweighting: channels with standardized innovation beyond
        ``gamma`` get their measurement variance inflated by (|s|/gamma)^2,
        iterated to convergence.  Equals :meth:`correct` when none exceed."""
        if gamma <= 0:
            raise FilterError("huber threshold must be positive")
        r = fs.r if r is None else r
        r_base = self._effective_r_base(fs, u, r)
        zhat, pzz, pxz = self._innovation_stats(fs, u)
        innov0 = self._wrap(np.asarray(z, float) - zhat)
        w = np.ones(len(innov0))
        for _ in range(max_passes):
            r_eff = r_base + np.diag(np.diag(r_base) * (w - 1.0))
            s = pzz + r_eff
            std = innov0 / np.sqrt(np.diag(s))
            w_new = np.maximum(1.0, (np.abs(std) / gamma) ** 2)
            if np.allclose(w_new, w, rtol=1e-10, atol=1e-12):
                w = w_new
                break
            w = w_new
        r_eff = r_base + np.diag(np.diag(r_base) * (w - 1.0))
        mean, cov, innov, s, nis, _ = self._apply_update(fs, u, z, r_eff)
        if not np.isfinite(nis):
            out = fs.copy()
            out.nis = np.nan
            return out
        out = replace(fs, mean=mean, cov=cov, innovation=innov,
                      innovation_cov=s, nis=nis)
        self._refresh_ensemble(out, u, z, r_eff)
        return out

    def _refresh_ensemble(self, fs: FilterState, u, z, r_eff) -> None:
        pass


class ExtendedKalmanFilter(BaseFilter):
    """First-order linearization; uses model Jacobians when provided."""

    def _state_jacobian(self, x, u, dt):
        j = getattr(self.model, "state_jacobian", None)
        if j is not None:
            return j(x, u, dt)
        return fd_jacobian(lambda p: self.model.propagate(p, u, dt), x)

    def _meas_jacobian(self, x, u):
        j = getattr(self.model, "meas_jacobian", None)
        if j is not None:
            return j(x, u)
        return fd_jacobian(lambda p: self.model.measure(p, u), x)

    def predict(self, fs: FilterState, u, dt: float) -> FilterState:
        q = self._effective_q(fs, u, dt)
        f = self._state_jacobian(fs.mean, u, dt)
        mean = self.model.propagate(fs.mean, u, dt)
        cov = condition_cov(f @ fs.cov @ f.T + q)
        return replace(fs, mean=mean, cov=cov)

    def _innovation_stats(self, fs: FilterState, u):
        h = self._meas_jacobian(fs.mean, u)
        zhat = self.model.measure(fs.mean, u)
        return zhat, h @ fs.cov @ h.T, fs.cov @ h.T


class UnscentedKalmanFilter(BaseFilter):
    """Scaled unscented transform (alpha, beta, kappa) with square-root sigma
    generation and symmetrization fallback."""

    def __init__(self, model, alpha: float = 0.1, beta: float = 2.0, kappa: float = 0.0):
        super().__init__(model)
        self.alpha, self.beta, self.kappa = alpha, beta, kappa

    def _weights(self, n: int):
        lam = self.alpha ** 2 * (n + self.kappa) - n
        wm = np.full(2 * n + 1, 1.0 / (2.0 * (n + lam)))
        wc = wm.copy()
        wm[0] = lam / (n + lam)
        wc[0] = wm[0] + (1.0 - self.alpha ** 2 + self.beta)
        return lam, wm, wc

    def _sigma_points(self, mean, cov):
        n = len(mean)
        lam, wm, wc = self._weights(n)
        a = _sqrt_psd((n + lam) * cov)
        pts = np.vstack([mean, mean + a.T, mean - a.T])
        return pts, wm, wc

    def predict(self, fs: FilterState, u, dt: float) -> FilterState:
        q = self._effective_q(fs, u, dt)
        pts, wm, wc = self._sigma_points(fs.mean, fs.cov)
        prop = self.model.propagate(pts, u, dt)
        mean = wm @ prop
        dev = prop - mean
        cov = condition_cov((dev.T * wc) @ dev + q)
        return replace(fs, mean=mean, cov=cov)

    def _innovation_stats(self, fs: FilterState, u):
        pts, wm, wc = self._sigma_points(fs.mean, fs.cov)
        zpts = np.atleast_2d(self.model.measure(pts, u))
        zhat = wm @ zpts
        dz = zpts - zhat
        dx = pts - fs.mean
        pzz = (dz.T * wc) @ dz
        pxz = (dx.T * wc) @ dz
        return zhat, pzz, pxz


class EnsembleKalmanFilter(BaseFilter):
    """Stochastic ensemble filter with perturbed observations."""

    def __init__(self, model, n_members: int = 200, seed: int = 0):
        super().__init__(model)
        self.n_members = n_members
        self.rng = np.random.default_rng(seed)

    def initialize(self, fs: FilterState) -> FilterState:
        a = _sqrt_psd(fs.cov)
        draws = self.rng.standard_normal((self.n_members, len(fs.mean)))
        ens = fs.mean + draws @ a.T
        return replace(fs, ensemble=ens)

    def predict(self, fs: FilterState, u, dt: float) -> FilterState:
        if fs.ensemble is None:
            fs = self.initialize(fs)
        q = self._effective_q(fs, u, dt)
        ens = self.model.propagate(fs.ensemble, u, dt)
        noise = self.rng.standard_normal(ens.shape) @ _sqrt_psd(q).T
        ens = ens + noise
        mean = ens.mean(axis=0)
        dev = ens - mean
        cov = condition_cov(dev.T @ dev / (self.n_members - 1))
        return replace(fs, mean=mean, cov=cov, ensemble=ens)

    def _innovation_stats(self, fs: FilterState, u):
        zens = np.atleast_2d(self.model.measure(fs.ensemble, u))
        zhat = zens.mean(axis=0)
        dz = zens - zhat
        dx = fs.ensemble - fs.ensemble.mean(axis=0)
        pzz = dz.T @ dz / (self.n_members - 1)
        pxz = dx.T @ dz / (self.n_members - 1)
        self._zens = zens
        return zhat, pzz, pxz

    def _refresh_ensemble(self, fs: FilterState, u, z, r_eff) -> None:
        if fs.ensemble is None:
            return
        zens = self._zens
        zhat = zens.mean(axis=0)
        dz = zens - zhat
        dx = fs.ensemble - fs.ensemble.mean(axis=0)
        pzz = dz.T @ dz / (self.n_members - 1)
        pxz = dx.T @ dz / (self.n_members - 1)
        s = pzz + r_eff
        k = np.linalg.solve(s.T, pxz.T).T
        pert = self.rng.standard_normal(zens.shape) @ _sqrt_psd(r_eff).T
        innov = np.asarray(z, float) + pert - zens
        mask = getattr(self.model, "wrap_mask", None)
        if mask is not None and np.any(mask):
            innov[:, mask] = wrap_angle(innov[:, mask])
        ens = fs.ensemble + innov @ k.T
        fs.ensemble = ens
        fs.mean = ens.mean(axis=0)
        dev = ens - fs.mean
        fs.cov = condition_cov(dev.T @ dev / (self.n_members - 1))


FILTERS = {
    "ekf": ExtendedKalmanFilter,
    "ukf": UnscentedKalmanFilter,
    "enkf": EnsembleKalmanFilter,
    "rukf": UnscentedKalmanFilter,   # robust correction applied by the driver
}


def make_filter(method: str, model, seed: int = 0, n_members: int = 200):
    if method not in FILTERS:
        raise FilterError(f"unknown filter method {method!r}")
    if method == "enkf":
        return EnsembleKalmanFilter(model, n_members=n_members, seed=seed)
    return FILTERS[method](model)


# ---------------------------------------------------------------------------
# machine model adapter

def _dotted_get(params: MachineParams, name: str):
    obj = params
    for part in name.split("."):
        obj = getattr(obj, part)
    return obj


def _augmented_params(base: MachineParams, names: list[str], values: np.ndarray):
    """Parameter view with the selected entries replaced by arrays.

    ``values`` has shape (..., len(names)); returned namespace broadcasts
    against state arrays of matching leading shape.
    """
    ns = SimpleNamespace(
        flags=dict(base.flags),
        **{k: getattr(base, k) for k in
           ("h", "d", "xd", "xq", "xdp", "xqp", "td0p", "tq0p", "ra", "base_mva")})
    ns.flag = lambda name: int(ns.flags.get(name, 0))
    for key in ("exciter", "governor", "pss"):
        sub = getattr(base, key)
        setattr(ns, key, None if sub is None else SimpleNamespace(**vars(sub)))
    for j, name in enumerate(names):
        col = values[..., j]
        if "." in name:
            head, tail = name.split(".", 1)
            setattr(getattr(ns, head), tail, col)
        else:
            setattr(ns, name, col)
    return ns


class MachineDseModel:
    """Decentralized per-machine estimation model: terminal voltage drives the
    prediction (zero-order hold), terminal P/Q are the measurements."""

    def __init__(self, params: MachineParams, vref: float, pref: float,
                 omega_s: float = 2 * np.pi * 60.0,
                 meas_kinds: tuple = ("P", "Q"),
                 substeps: int | None = None,
                 u_sigma: tuple | None = (0.002, 0.002),
                 efd_ext: float | None = None, pm_ext: float | None = None):
        self.assembly = MachineAssembly(params, omega_s)
        self.params = params
        self.vref, self.pref = vref, pref
        self.meas_kinds = tuple(meas_kinds)
        self.substeps = substeps
        self.u_sigma = u_sigma
        self.efd_ext, self.pm_ext = efd_ext, pm_ext
        self.nx = self.assembly.nx
        self.nz = len(self.meas_kinds)
        self.wrap_mask = np.array([k in ("Vang", "Iang") for k in self.meas_kinds])

    def default_q(self) -> np.ndarray:
        q = np.empty(self.nx)
        for i, name in enumerate(self.assembly.state_names):
            q[i] = 1e-8 if name in ("delta", "omega", "eqp", "edp") else 1e-6
        return np.diag(q)

    def _drives(self):
        return dict(vref=self.vref, pref=self.pref,
                    efd_ext=self.efd_ext, pm_ext=self.pm_ext)

    def propagate(self, x, u, dt, params=None, efd_ext=None, pm_ext=None):
        ns = self.substeps if self.substeps is not None else (
            1 if dt <= 1.0 / 60.0 + 1e-9 else 4)
        h = dt / ns
        vm, va = u[0], u[1]
        d = self._drives()
        if efd_ext is not None:
            d["efd_ext"] = efd_ext
        if pm_ext is not None:
            d["pm_ext"] = pm_ext
        p = params
        x = np.asarray(x, float).copy()
        asm = self.assembly
        for _ in range(ns):
            k1 = asm.derivatives(x, vm, va, d["vref"], d["pref"], d["efd_ext"], d["pm_ext"], params=p)
            k2 = asm.derivatives(x + 0.5 * h * k1, vm, va, d["vref"], d["pref"], d["efd_ext"], d["pm_ext"], params=p)
            k3 = asm.derivatives(x + 0.5 * h * k2, vm, va, d["vref"], d["pref"], d["efd_ext"], d["pm_ext"], params=p)
            k4 = asm.derivatives(x + h * k3, vm, va, d["vref"], d["pref"], d["efd_ext"], d["pm_ext"], params=p)
            x = asm.clamp(x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4))
        return x

    def measure(self, x, u, params=None):
        pe, qe, iph = self.assembly.outputs(x, u[0], u[1], params=params)
        cols = {"P": pe, "Q": qe, "Imag": np.abs(iph), "Iang": np.angle(iph)}
        out = [cols[k] for k in self.meas_kinds]
        return np.stack(out, axis=-1) if np.ndim(pe) else np.array(out)

    def input_cov(self, u):
        if self.u_sigma is None:
            return None
        return np.diag(np.square(self.u_sigma))


class AugmentedMachineModel(MachineDseModel):
    """Machine model with selected parameters appended as random-walk states."""

    def __init__(self, base: MachineDseModel, param_names: list[str],
                 bounds: dict, w: np.ndarray):
        self.__dict__.update(base.__dict__)
        self.base_nx = base.nx
        self.param_names = list(param_names)
        self.bounds = {k: tuple(bounds[k]) for k in param_names}
        self.w = np.atleast_2d(w)
        self.nx = self.base_nx + len(param_names)

    def split(self, x):
        return x[..., : self.base_nx], x[..., self.base_nx:]

    def clip_params(self, theta):
        lo = np.array([self.bounds[k][0] for k in self.param_names])
        hi = np.array([self.bounds[k][1] for k in self.param_names])
        return np.clip(theta, lo, hi)

    def propagate(self, x, u, dt, params=None):
        xs, theta = self.split(np.asarray(x, float))
        p = _augmented_params(self.params, self.param_names, self.clip_params(theta))
        xs = super().propagate(xs, u, dt, params=p)
        return np.concatenate([xs, theta], axis=-1)

    def measure(self, x, u, params=None):
        xs, theta = self.split(np.asarray(x, float))
        p = _augmented_params(self.params, self.param_names, self.clip_params(theta))
        return super().measure(xs, u, params=p)

    def augmented_q(self, q_base: np.ndarray) -> np.ndarray:
        q = np.zeros((self.nx, self.nx))
        q[: self.base_nx, : self.base_nx] = q_base
        q[self.base_nx:, self.base_nx:] = self.w
        return q


# ---------------------------------------------------------------------------
# drivers

@dataclass
class EstimationResult:
    t: np.ndarray
    means: np.ndarray            # (n_frames, nx)
    cov_diag: np.ndarray
    nis: np.ndarray
    innovations: np.ndarray
    state_names: tuple
    skipped: list[int] = field(default_factory=list)


def run_filter(filt: BaseFilter, fs: FilterState, t: np.ndarray,
               u_series: np.ndarray, z_series: np.ndarray,
               robust: bool = False, gamma: float = 1.5) -> EstimationResult:
    """Run predict/correct over a frame series.

    ``u_series`` rows drive the prediction across each interval (zero-order
    hold from the previous frame); the same row feeds the measurement map at
    the frame.  The state at frame 0 is corrected but not predicted.
    """
    n = len(t)
    nx = len(fs.mean)
    means = np.zeros((n, nx))
    cov_diag = np.zeros((n, nx))
    nis = np.full(n, np.nan)
    innov = np.zeros((n, z_series.shape[1]))
    skipped = []
    for k in range(n):
        if k > 0:
            dt = float(t[k] - t[k - 1])
            fs = filt.predict(fs, u_series[k - 1], dt)
        if robust:
            fs = filt.robust_correct(fs, z_series[k], u=u_series[k], gamma=gamma)
        else:
            fs = filt.correct(fs, z_series[k], u=u_series[k])
        if fs.nis is None or not np.isfinite(fs.nis):
            skipped.append(k)
        else:
            nis[k] = fs.nis
            innov[k] = fs.innovation
        means[k] = fs.mean
        cov_diag[k] = np.diag(fs.cov)
    names = getattr(getattr(filt.model, "assembly", None), "state_names",
                    tuple(f"x{i}" for i in range(nx)))
    return EstimationResult(t=t, means=means, cov_diag=cov_diag, nis=nis,
                            innovations=innov, state_names=tuple(names),
                            skipped=skipped)


@dataclass
class JointEstimateResult:
    estimation: EstimationResult
    param_names: list[str]
    param_trajectory: np.ndarray      # (n_frames, n_params)
    param_cov_diag: np.ndarray
    final: dict
    final_cov: dict
    identifiable: bool
    warnings: list[str] = field(default_factory=list)


def _param_sensitivities(model: MachineDseModel, x0, t, u_series, names,
                         rel: float = 0.01, n_frames: int | None = None):
    """Normalized measurement-trajectory sensitivity per parameter (central
    differences at +/- ``rel``)."""
    kmax = len(t) if n_frames is None else min(n_frames, len(t))
    sens = []
    for name in names:
        base_val = _dotted_get(model.params, name)
        step = rel * (abs(base_val) if base_val != 0 else 1.0)
        zs = []
        for sgn in (+1.0, -1.0):
            val = np.array([base_val + sgn * step])
            p = _augmented_params(model.params, [name], val[None, :])
            x = np.asarray(x0, float)
            z = []
            for k in range(kmax):
                if k > 0:
                    x = model.propagate(x, u_series[k - 1], float(t[k] - t[k - 1]), params=p)
                z.append(np.atleast_1d(np.squeeze(model.measure(x, u_series[k], params=p))))
            zs.append(np.concatenate(z))
        g = (zs[0] - zs[1]) / (2.0 * step) * (abs(base_val) if base_val != 0 else 1.0)
        sens.append(g)
    return np.array(sens)


def joint_estimate(model: MachineDseModel, x0: np.ndarray, p0: np.ndarray,
                   t: np.ndarray, u_series: np.ndarray, z_series: np.ndarray,
                   r: np.ndarray, param_names: list[str], bounds: dict,
                   w_scale: float = 1e-6, q_base: np.ndarray | None = None,
                   method: str = "ukf", corr_limit: float = 0.99,
                   screen_frames: int = 60, seed: int = 0) -> JointEstimateResult:
    """Augmented-state joint estimation of machine states and parameters.

    Parameters evolve as a bounded random walk with per-parameter variance
    ``w_scale * (bound range)^2``; estimates are projected onto their bounds
    after every correction.  An identifiability screen (near-zero or highly
    correlated sensitivity vectors) runs first and is reported, not silently
    ignored.
    """
    warnings = []
    sens = _param_sensitivities(model, x0, t, u_series, param_names,
                                n_frames=screen_frames)
    norms = np.linalg.norm(sens, axis=1)
    scale = np.linalg.norm(z_series[:screen_frames]) + 1e-12
    identifiable = True
    for name, nv in zip(param_names, norms):
        if nv < 1e-6 * scale:
            identifiable = False
            warnings.append(f"parameter {name} has no measurable output sensitivity")
    for i in range(len(param_names)):
        for j in range(i + 1, len(param_names)):
            if norms[i] > 0 and norms[j] > 0:
                c = float(sens[i] @ sens[j] / (norms[i] * norms[j]))
                if abs(c) > corr_limit:
                    identifiable = False
                    warnings.append(
                        f"parameters {param_names[i]} and {param_names[j]} are "
                        f"jointly unidentifiable (|corr| = {abs(c):.3f})")

    w = np.diag([w_scale * (bounds[k][1] - bounds[k][0]) ** 2 for k in param_names])
    aug = AugmentedMachineModel(model, param_names, bounds, w)
    qb = model.default_q() if q_base is None else q_base
    x_aug = np.concatenate([x0, p0])
    p_init = np.zeros((aug.nx, aug.nx))
    p_init[: aug.base_nx, : aug.base_nx] = np.eye(aug.base_nx) * 1e-4
    rng = [0.1 * (bounds[k][1] - bounds[k][0]) for k in param_names]
    p_init[aug.base_nx:, aug.base_nx:] = np.diag(np.square(rng))
    fs = make_filter_state(x_aug, p_init, aug.augmented_q(qb), r)
    filt = make_filter(method, aug, seed=seed)

    n = len(t)
    means = np.zeros((n, aug.nx))
    cov_diag = np.zeros((n, aug.nx))
    nis = np.full(n, np.nan)
    innov = np.zeros((n, z_series.shape[1]))
    for k in range(n):
        if k > 0:
            fs = filt.predict(fs, u_series[k - 1], float(t[k] - t[k - 1]))
        fs = filt.correct(fs, z_series[k], u=u_series[k])
        fs.mean[aug.base_nx:] = aug.clip_params(fs.mean[aug.base_nx:])
        means[k] = fs.mean
        cov_diag[k] = np.diag(fs.cov)
        if fs.nis is not None and np.isfinite(fs.nis):
            nis[k] = fs.nis
            innov[k] = fs.innovation

    est = EstimationResult(t=t, means=means[:, : aug.base_nx],
                           cov_diag=cov_diag[:, : aug.base_nx], nis=nis,
                           innovations=innov,
                           state_names=model.assembly.state_names)
    theta = means[:, aug.base_nx:]
    theta_cov = cov_diag[:, aug.base_nx:]
    tail = slice(max(0, n - max(10, n // 10)), n)
    final = {k: float(np.mean(theta[tail, j])) for j, k in enumerate(param_names)}
    final_cov = {k: float(np.mean(theta_cov[tail, j])) for j, k in enumerate(param_names)}
    return JointEstimateResult(estimation=est, param_names=list(param_names),
                               param_trajectory=theta, param_cov_diag=theta_cov,
                               final=final, final_cov=final_cov,
                               identifiable=identifiable, warnings=warnings)


@dataclass
class UnknownInputResult:
    estimation: EstimationResult
    input_name: str
    input_series: np.ndarray


def unknown_input_estimate(model: MachineDseModel, x0: np.ndarray,
                           t: np.ndarray, u_series: np.ndarray,
                           z_series: np.ndarray, r: np.ndarray,
                           input_name: str, d0: float,
                           method: str = "ukf", seed: int = 0,
                           q: np.ndarray | None = None) -> UnknownInputResult:
    """Two-stage unknown-input estimation.

    Stage one solves the per-frame least-squares input increment that explains
    the innovation; stage two substitutes the estimate and runs the ordinary
    correction.  ``input_name`` is ``efd`` or ``pm``; the model must have the
    matching controller block disabled so the quantity is exogenous.
    """
    if input_name == "efd":
        if model.params.flag("exciter"):
            raise FilterError("efd input estimation requires the exciter block disabled")
        kw = "efd_ext"
    elif input_name == "pm":
        if model.params.flag("governor"):
            raise FilterError("pm input estimation requires the governor block disabled")
        kw = "pm_ext"
    else:
        raise FilterError(f"unknown input selector {input_name!r}")

    filt = make_filter(method, model, seed=seed)
    fs = make_filter_state(x0, np.eye(model.nx) * 1e-4,
                           model.default_q() if q is None else q, r)
    n = len(t)
    d = float(d0)
    d_hist = np.zeros(n)
    means = np.zeros((n, model.nx))
    cov_diag = np.zeros((n, model.nx))
    nis = np.full(n, np.nan)
    innov = np.zeros((n, z_series.shape[1]))
    eps = 1e-4 * max(1.0, abs(d0))
    for k in range(n):
        if k > 0:
            dt = float(t[k] - t[k - 1])
            base = dict(efd_ext=model.efd_ext, pm_ext=model.pm_ext)

            def with_d(value):
                o = dict(base)
                o[kw] = value
                return o

            # stage 1: input sensitivity of the predicted measurement
            x_nom = model.propagate(fs.mean, u_series[k - 1], dt, **with_d(d))
            z_nom = model.measure(x_nom, u_series[k])
            x_p = model.propagate(fs.mean, u_series[k - 1], dt, **with_d(d + eps))
            x_m = model.propagate(fs.mean, u_series[k - 1], dt, **with_d(d - eps))
            m_vec = (model.measure(x_p, u_series[k]) - model.measure(x_m, u_series[k])) / (2 * eps)
            s_approx = fs.innovation_cov if fs.innovation_cov is not None else fs.r
            wgt = np.linalg.inv(s_approx)
            denom = float(m_vec @ wgt @ m_vec)
            if denom < 1e-12:
                raise FilterError(
                    f"input {input_name!r} unobservable from the measurement set "
                    f"(sensitivity norm {np.linalg.norm(m_vec):.2e})")
            resid = z_series[k] - z_nom
            d = d + float(m_vec @ wgt @ resid) / denom
            # stage 2: prediction and correction with the estimated input
            setattr(model, kw, d)
            fs = filt.predict(fs, u_series[k - 1], dt)
        fs = filt.correct(fs, z_series[k], u=u_series[k])
        d_hist[k] = d
        means[k] = fs.mean
        cov_diag[k] = np.diag(fs.cov)
        if fs.nis is not None and np.isfinite(fs.nis):
            nis[k] = fs.nis
            innov[k] = fs.innovation
    est = EstimationResult(t=t, means=means, cov_diag=cov_diag, nis=nis,
                           innovations=innov,
                           state_names=model.assembly.state_names)
    return UnknownInputResult(estimation=est, input_name=input_name,
                              input_series=d_hist)
