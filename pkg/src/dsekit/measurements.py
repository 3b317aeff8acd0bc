"""Synthetic synchrophasor channels from simulated trajectories.

Channels are identified as ``g<N>.<kind>`` for machine quantities (P, Q, Imag,
Iang, on the machine base) and ``b<ID>.<kind>`` for bus quantities (Vmag, Vang,
freq).  Angle channels are wrapped to (-pi, pi].  Corruption (bad data, attack
windows) is logged in a hidden ledger so detectors can be scored against truth.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .simulator import Trajectory

CHANNEL_KINDS = ("Vmag", "Vang", "Imag", "Iang", "P", "Q", "freq")
ANGLE_KINDS = ("Vang", "Iang")

DEFAULT_SIGMA = {
    "Vmag": 0.002, "Vang": 0.002, "Imag": 0.002, "Iang": 0.002,
    "P": 0.001, "Q": 0.001, "freq": 1e-4,
}


class MeasurementError(ValueError):
    pass


def wrap_angle(a):
    """Map angles to (-pi, pi]."""
    return np.pi - np.mod(np.pi - np.asarray(a), 2.0 * np.pi)


@dataclass(frozen=True)
class Channel:
    id: str
    kind: str
    target: int            # bus id or 1-based generator number
    sigma: float

    @property
    def is_angle(self) -> bool:
        return self.kind in ANGLE_KINDS


@dataclass
class MeasurementFrame:
    """One timestamped frame: values, declared sigmas, and quality flags."""

    t: float
    channels: tuple
    values: np.ndarray
    flags: np.ndarray

    @property
    def sigma(self) -> np.ndarray:
        return np.array([c.sigma for c in self.channels])


@dataclass
class NoiseRecipe:
    distribution: str = "gaussian"       # gaussian | laplace | student_t | gaussian_mixture
    sigma: dict = field(default_factory=lambda: dict(DEFAULT_SIGMA))
    nu: float = 3.0                      # student_t dof (> 2 so the variance exists)
    mix_eps: float = 0.1
    mix_inflation: float = 10.0
    bad_prob: float = 0.0
    bad_sigma: float = 20.0              # gross-error magnitude, in channel sigmas
    attack_channels: tuple = ()
    attack_window: tuple = (0.0, 0.0)
    attack_kind: str = "bias"            # bias | ramp
    attack_magnitude: float = 0.0
    declared_sigma: dict | None = None   # what goes into R; defaults to sigma

    def __post_init__(self):
        if not (0.0 <= self.bad_prob <= 1.0):
            raise MeasurementError("bad-data probability outside [0, 1]")
        if not (0.0 <= self.mix_eps <= 0.5):
            raise MeasurementError("mixture epsilon outside [0, 0.5]")
        if self.distribution not in ("gaussian", "laplace", "student_t", "gaussian_mixture"):
            raise MeasurementError(f"unknown distribution {self.distribution!r}")
        if self.distribution == "student_t" and self.nu <= 2:
            raise MeasurementError("student_t requires nu > 2")

    def sigma_of(self, kind: str) -> float:
        return float(self.sigma.get(kind, DEFAULT_SIGMA[kind]))

    def declared_of(self, kind: str) -> float:
        if self.declared_sigma and kind in self.declared_sigma:
            return float(self.declared_sigma[kind])
        s = self.sigma_of(kind)
        return s if s > 0 else DEFAULT_SIGMA[kind]

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseRecipe":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise MeasurementError(f"unknown noise recipe keys: {sorted(unknown)}")
        d = dict(d)
        if "attack_channels" in d:
            d["attack_channels"] = tuple(d["attack_channels"])
        if "attack_window" in d:
            d["attack_window"] = tuple(d["attack_window"])
        return cls(**d)


@dataclass
class MeasurementSet:
    """Columnar series of frames sharing one channel list."""

    t: np.ndarray                # (n_frames,)
    channels: tuple              # tuple[Channel]
    z: np.ndarray                # (n_frames, n_channels)
    flags: np.ndarray            # (n_frames, n_channels) int, 0 = good

    def index_of(self, channel_id: str) -> int:
        for i, c in enumerate(self.channels):
            if c.id == channel_id:
                return i
        raise MeasurementError(f"no channel {channel_id!r}")

    def series(self, channel_id: str) -> np.ndarray:
        return self.z[:, self.index_of(channel_id)]

    def frame(self, k: int) -> MeasurementFrame:
        return MeasurementFrame(t=float(self.t[k]), channels=self.channels,
                                values=self.z[k].copy(), flags=self.flags[k].copy())

    def subset(self, channel_ids: list[str]) -> "MeasurementSet":
        idx = [self.index_of(c) for c in channel_ids]
        return MeasurementSet(self.t, tuple(self.channels[i] for i in idx),
                              self.z[:, idx], self.flags[:, idx])

    @property
    def n_frames(self) -> int:
        return len(self.t)


def machine_channels(gens: list[int], kinds=("P", "Q"), recipe: NoiseRecipe | None = None):
    r = recipe or NoiseRecipe()
    return [Channel(id=f"g{g}.{k}", kind=k, target=g, sigma=r.declared_of(k))
            for g in gens for k in kinds]


def bus_channels(buses: list[int], kinds=("Vmag", "Vang"), recipe: NoiseRecipe | None = None):
    r = recipe or NoiseRecipe()
    return [Channel(id=f"b{b}.{k}", kind=k, target=b, sigma=r.declared_of(k))
            for b in buses for k in kinds]


def _truth_series(traj: Trajectory, ch: Channel, idx: np.ndarray,
                  freq_tau: float = 0.02) -> np.ndarray:
    if ch.kind in ("P", "Q"):
        g = ch.target - 1
        if not (0 <= g < traj.p_mach.shape[1]):
            raise MeasurementError(f"no machine g{ch.target} in trajectory")
        src = traj.p_mach if ch.kind == "P" else traj.q_mach
        return src[idx, g]
    if ch.kind in ("Vmag", "Vang", "freq"):
        buses = {b: i for i, b in enumerate(_bus_ids(traj))}
        if ch.target not in buses:
            raise MeasurementError(f"channel requests unmonitored bus {ch.target}")
        col = buses[ch.target]
        v = traj.v_bus[:, col]
        if ch.kind == "Vmag":
            return np.abs(v)[idx]
        if ch.kind == "Vang":
            return np.angle(v)[idx]
        # frequency from filtered angle differentiation at full resolution
        theta = np.unwrap(np.angle(v))
        dt = traj.t[1] - traj.t[0]
        dth = np.gradient(theta, dt)
        alpha = dt / (freq_tau + dt)
        f = np.empty_like(dth)
        acc = dth[0]
        for k, d in enumerate(dth):
            acc += alpha * (d - acc)
            f[k] = acc
        omega_s = 2.0 * np.pi * 60.0
        return (1.0 + f / omega_s)[idx]
    if ch.kind in ("Imag", "Iang"):
        g = ch.target - 1
        if not (0 <= g < traj.i_mach.shape[1]):
            raise MeasurementError(f"no machine g{ch.target} in trajectory")
        i = traj.i_mach[idx, g]
        return np.abs(i) if ch.kind == "Imag" else np.angle(i)
    raise MeasurementError(f"unknown channel kind {ch.kind!r}")


def _bus_ids(traj: Trajectory) -> list[int]:
    return traj.bus_ids or list(range(1, traj.v_bus.shape[1] + 1))


def synthesize(traj: Trajectory, channels: list[Channel], recipe: NoiseRecipe,
               rate: float, seed: int = 0):
    """Sample noisy frames from the trajectory at the reporting rate.

    Returns ``(MeasurementSet, ledger)``; the ledger maps corruption kind to a
    list of ``[frame, channel_index]`` pairs plus the seed, for scoring.
    """
    dt = traj.t[1] - traj.t[0]
    stride_f = (1.0 / rate) / dt
    stride = round(stride_f)
    if abs(stride_f - stride) > 1e-6 or stride < 1:
        raise MeasurementError(
            f"rate {rate}/s does not divide the trajectory grid (dt = {dt:.6g}s)")
    idx = np.arange(0, len(traj.t), stride)
    t = traj.t[idx]
    n, m = len(idx), len(channels)
    rng = np.random.default_rng(seed)

    z = np.zeros((n, m))
    for j, ch in enumerate(channels):
        z[:, j] = _truth_series(traj, ch, idx)

    sig = np.array([recipe.sigma_of(c.kind) for c in channels])
    if np.any(sig > 0):
        if recipe.distribution == "gaussian":
            noise = rng.normal(0.0, 1.0, (n, m))
        elif recipe.distribution == "laplace":
            noise = rng.laplace(0.0, 1.0 / np.sqrt(2.0), (n, m))
        elif recipe.distribution == "student_t":
            noise = rng.standard_t(recipe.nu, (n, m)) * np.sqrt(
                (recipe.nu - 2.0) / recipe.nu)
        else:  # gaussian_mixture
            noise = rng.normal(0.0, 1.0, (n, m))
            hit = rng.random((n, m)) < recipe.mix_eps
            noise = np.where(hit, noise * recipe.mix_inflation, noise)
        z = z + noise * sig

    ledger = {"seed": seed, "bad_data": [], "attack": []}
    if recipe.bad_prob > 0:
        hit = rng.random((n, m)) < recipe.bad_prob
        signs = np.where(rng.random((n, m)) < 0.5, -1.0, 1.0)
        declared = np.array([c.sigma for c in channels])
        z = z + hit * signs * recipe.bad_sigma * declared
        ledger["bad_data"] = [[int(i), int(j)] for i, j in zip(*np.nonzero(hit))]

    if recipe.attack_channels and recipe.attack_magnitude != 0.0:
        ids = [c.id for c in channels]
        t0, t1 = recipe.attack_window
        win = (t >= t0) & (t <= t1)
        for cid in recipe.attack_channels:
            if cid not in ids:
                raise MeasurementError(f"attack on unknown channel {cid!r}")
            j = ids.index(cid)
            if recipe.attack_kind == "bias":
                z[win, j] += recipe.attack_magnitude
            elif recipe.attack_kind == "ramp":
                span = max(t1 - t0, 1e-9)
                z[win, j] += recipe.attack_magnitude * (t[win] - t0) / span
            else:
                raise MeasurementError(f"unknown attack kind {recipe.attack_kind!r}")
            ledger["attack"] += [[int(i), j] for i in np.nonzero(win)[0]]

    for j, ch in enumerate(channels):
        if ch.is_angle:
            z[:, j] = wrap_angle(z[:, j])

    flags = np.zeros((n, m), dtype=int)
    return MeasurementSet(t=t, channels=tuple(channels), z=z, flags=flags), ledger


@dataclass
class DetectionScore:
    precision: float
    recall: float
    false_alarm_rate: float
    hits: int
    misses: int
    false_positives: int


def score_detection(ledger: dict, flagged, n_frames: int, n_channels: int) -> DetectionScore:
    """Precision/recall/false-alarm of flags against the corruption ledger.

    ``flagged`` is an iterable of ``(frame, channel)`` pairs or a boolean
    matrix of shape (n_frames, n_channels).
    """
    truth = {tuple(e) for e in ledger.get("bad_data", [])}
    truth |= {tuple(e) for e in ledger.get("attack", [])}
    if isinstance(flagged, np.ndarray):
        marked = {(int(i), int(j)) for i, j in zip(*np.nonzero(flagged))}
    else:
        marked = {(int(i), int(j)) for i, j in flagged}
    tp = len(truth & marked)
    fp = len(marked - truth)
    fn = len(truth - marked)
    clean = n_frames * n_channels - len(truth)
    return DetectionScore(
        precision=tp / len(marked) if marked else (1.0 if not truth else 0.0),
        recall=tp / len(truth) if truth else 1.0,
        false_alarm_rate=fp / clean if clean else 0.0,
        hits=tp, misses=fn, false_positives=fp)


# ---------------------------------------------------------------------------
# CSV / JSON round trip

def save_measurements(ms: MeasurementSet, path: str | Path) -> None:
    """CSV with one header row ``id:kind:sigma`` per channel, one row per frame."""
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["t"] + [f"{c.id}:{c.kind}:{c.sigma:.10g}" for c in ms.channels])
        for k in range(ms.n_frames):
            w.writerow([f"{ms.t[k]:.9f}"] + [f"{v:.12g}" for v in ms.z[k]])
    tmp.replace(path)


def load_measurements(path: str | Path) -> MeasurementSet:
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    header, data = rows[0], rows[1:]
    channels = []
    for col in header[1:]:
        cid, kind, sigma = col.rsplit(":", 2)
        target = int(cid[1:].split(".")[0])
        channels.append(Channel(id=cid, kind=kind, target=target, sigma=float(sigma)))
    arr = np.array([[float(v) for v in r] for r in data])
    return MeasurementSet(t=arr[:, 0], channels=tuple(channels), z=arr[:, 1:],
                          flags=np.zeros((len(data), len(channels)), dtype=int))


def save_ledger(ledger: dict, path: str | Path) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w") as f:
        json.dump(ledger, f, indent=1, sort_keys=True)
        f.write("\n")
    tmp.replace(path)
