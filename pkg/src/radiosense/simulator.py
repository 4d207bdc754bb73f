"""Synthetic CQI traces with ground truth.

RSSI uses log-distance path loss with elliptical shadowing.  CSI sums a
line-of-sight path, a few static scatterers and one path per target over
the OFDM subcarriers.  All randomness comes from the scene seed; the
static environment (scatterer layout) comes from ``env_seed`` so that
training and test scenes share the same room.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np

from .cqi_core import (
    CqiSeries,
    CqiType,
    DeploymentConfig,
    Device,
    Gateway,
    Layout,
    Link,
    TaskType,
    window,
    write_trace,
)
from .feature_pca import TrainingSet
from .pipeline import feature_layout, preprocess, window_vector

SPEED_OF_LIGHT = 299_792_458.0
NOISE_DB = {"high_snr": 1.0, "mid_snr": 2.5, "low_snr": 5.0}
ACTIVITIES = ("none", "head", "arm")


class NoisePreset(str, Enum):
    HIGH = "high_snr"
    MID = "mid_snr"
    LOW = "low_snr"

    @property
    def sigma_db(self) -> float:
        return NOISE_DB[self.value]


@dataclass(frozen=True)
class CellGrid:
    """Rectangular grid of localization cells; labels are ``r<row>c<col>``."""

    x0: float
    y0: float
    nx: int
    ny: int
    dx: float
    dy: float

    @property
    def labels(self) -> list[str]:
        return [f"r{r}c{c}" for r in range(self.ny) for c in range(self.nx)]

    def center(self, label: str) -> tuple[float, float]:
        r, c = label[1:].split("c")
        return (self.x0 + (int(c) + 0.5) * self.dx, self.y0 + (int(r) + 0.5) * self.dy)

    @property
    def positions(self) -> dict[str, tuple[float, float]]:
        return {lab: self.center(lab) for lab in self.labels}

    def label_of(self, x: float, y: float) -> str:
        c = min(max(int((x - self.x0) // self.dx), 0), self.nx - 1)
        r = min(max(int((y - self.y0) // self.dy), 0), self.ny - 1)
        return f"r{r}c{c}"

    def to_json(self) -> dict:
        return {"x0": self.x0, "y0": self.y0, "nx": self.nx, "ny": self.ny, "dx": self.dx, "dy": self.dy}

    @classmethod
    def from_json(cls, obj: dict) -> "CellGrid":
        return cls(float(obj["x0"]), float(obj["y0"]), int(obj["nx"]), int(obj["ny"]), float(obj["dx"]), float(obj["dy"]))


@dataclass(frozen=True)
class Target:
    """A person: position waypoints ``(t_ms, x, y)`` held until the next one.

    ``present`` lists ``(start_ms, end_ms)`` intervals; empty means always
    present.  ``activity`` lists ``(start_ms, end_ms, label)`` with label in
    ``none|head|arm``; ``amplitude`` scales the activity strength per
    interval (defaults to 1).
    """

    waypoints: tuple[tuple[int, float, float], ...]
    present: tuple[tuple[int, int], ...] = ()
    activity: tuple[tuple[int, int, str], ...] = ()
    amplitude: tuple[float, ...] = ()

    def __post_init__(self):
        if not self.waypoints:
            raise ValueError("target needs at least one waypoint")
        wps = tuple(sorted((int(t), float(x), float(y)) for t, x, y in self.waypoints))
        object.__setattr__(self, "waypoints", wps)
        object.__setattr__(self, "present", tuple((int(a), int(b)) for a, b in self.present))
        acts = tuple((int(a), int(b), str(lab)) for a, b, lab in self.activity)
        for _, _, lab in acts:
            if lab not in ACTIVITIES:
                raise ValueError(f"unknown activity {lab!r}")
        for group in (sorted(self.present), sorted(a[:2] for a in acts)):
            for (a0, b0), (a1, b1) in zip(group, group[1:]):
                if a1 < b0:
                    raise ValueError("intervals overlap")
        object.__setattr__(self, "activity", acts)
        object.__setattr__(self, "amplitude", tuple(float(a) for a in self.amplitude))

    def positions(self, times_ms: np.ndarray) -> np.ndarray:
        """(N_t, 2) position at each time (step interpolation)."""
        wt = np.array([w[0] for w in self.waypoints])
        xy = np.array([[w[1], w[2]] for w in self.waypoints])
        idx = np.clip(np.searchsorted(wt, times_ms, side="right") - 1, 0, len(wt) - 1)
        return xy[idx]

    def presence(self, times_ms: np.ndarray) -> np.ndarray:
        if not self.present:
            return np.ones(times_ms.shape, dtype=bool)
        out = np.zeros(times_ms.shape, dtype=bool)
        for a, b in self.present:
            out |= (times_ms >= a) & (times_ms < b)
        return out

    def activity_at(self, t_ms: int) -> str:
        for a, b, lab in self.activity:
            if a <= t_ms < b:
                return lab
        return "none"

    def to_json(self) -> dict:
        out = {"waypoints": [list(w) for w in self.waypoints]}
        if self.present:
            out["present"] = [list(p) for p in self.present]
        if self.activity:
            out["activity"] = [list(a) for a in self.activity]
        if self.amplitude:
            out["amplitude"] = list(self.amplitude)
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "Target":
        return cls(
            waypoints=tuple(tuple(w) for w in obj["waypoints"]),
            present=tuple(tuple(p) for p in obj.get("present", ())),
            activity=tuple(tuple(a) for a in obj.get("activity", ())),
            amplitude=tuple(obj.get("amplitude", ())),
        )


@dataclass(frozen=True)
class Scene:
    deployment: DeploymentConfig
    targets: tuple[Target, ...] = ()
    noise_preset: NoisePreset = NoisePreset.HIGH
    seed: int = 0
    cqi_type: CqiType = CqiType.UP
    duration_ms: int = 6000
    sampling_ms: int = 60
    num_subcarriers: int = 1
    carrier_hz: float = 2.44e9
    bandwidth_hz: float = 20e6
    phi_db: float = 5.0
    lambda_m: float = 0.3
    rho: float = 0.5
    num_scatterers: int = 4
    env_seed: int = 0
    # truth labelling
    task_type: TaskType = TaskType.DETECTION
    window_ms: int = 600
    cells: CellGrid | None = None
    # impairments
    drop_prob: float = 0.0
    impulse_prob: float = 0.0
    impulse_db: float = 20.0
    phase_ramp_rad: float = 0.0
    noise_free: bool = False
    sway_m: float = 0.0
    # activity scatterer
    head_gain: float = 0.3
    head_excursion_m: float = 0.004
    arm_gain: float = 2.0
    arm_excursion_m: float = 0.05

    def __post_init__(self):
        object.__setattr__(self, "noise_preset", NoisePreset(self.noise_preset))
        object.__setattr__(self, "cqi_type", CqiType(self.cqi_type))
        object.__setattr__(self, "task_type", TaskType(self.task_type))
        x0, y0, x1, y1 = self.deployment.area
        for tg in self.targets:
            for _, x, y in tg.waypoints:
                if not (x0 <= x <= x1 and y0 <= y <= y1):
                    raise ValueError(f"waypoint ({x}, {y}) outside the deployment area")
        if self.duration_ms < self.sampling_ms or self.sampling_ms <= 0:
            raise ValueError("duration_ms must cover at least one sample")

    @property
    def sigma_db(self) -> float:
        return 0.0 if self.noise_free else self.noise_preset.sigma_db

    @property
    def times_ms(self) -> np.ndarray:
        return np.arange(0, self.duration_ms, self.sampling_ms, dtype=np.int64)

    @property
    def frequencies_hz(self) -> np.ndarray:
        F = self.num_subcarriers
        return self.carrier_hz + (np.arange(F) - (F - 1) / 2.0) * self.bandwidth_hz / F

    def replace(self, **changes) -> "Scene":
        kw = {f: getattr(self, f) for f in self.__dataclass_fields__}
        kw.update(changes)
        return Scene(**kw)

    def to_json(self) -> dict:
        out = {f: getattr(self, f) for f in self.__dataclass_fields__}
        out["deployment"] = self.deployment.to_json()
        out["targets"] = [t.to_json() for t in self.targets]
        out["noise_preset"] = self.noise_preset.value
        out["cqi_type"] = self.cqi_type.value
        out["task_type"] = self.task_type.value
        out["cells"] = self.cells.to_json() if self.cells else None
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "Scene":
        obj = dict(obj)
        dep = obj.pop("deployment")
        if isinstance(dep, str):
            dep = deployment_preset(dep)
        else:
            dep = DeploymentConfig.from_json(dep)
        targets = tuple(Target.from_json(t) for t in obj.pop("targets", ()))
        cells = obj.pop("cells", None)
        if cells == "default" or (cells is None and obj.get("task_type") == "localization"):
            cells = default_cells(dep)
        elif isinstance(cells, dict):
            cells = CellGrid.from_json(cells)
        unknown = set(obj) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown scene fields {sorted(unknown)}")
        return cls(deployment=dep, targets=targets, cells=cells, **obj)


@dataclass(frozen=True, eq=False)
class GroundTruthTrace:
    window_starts_ms: np.ndarray
    labels: tuple[str, ...]

    def label_at(self, t_ms: int) -> str:
        i = int(np.searchsorted(self.window_starts_ms, t_ms, side="right")) - 1
        return self.labels[max(i, 0)]

    def write(self, path: str | Path) -> Path:
        path = Path(path)
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write("window_start_ms,label\n")
            for t, lab in zip(self.window_starts_ms, self.labels):
                fh.write(f"{int(t)},{lab}\n")
        return path

    @classmethod
    def read(cls, path: str | Path) -> "GroundTruthTrace":
        with open(path, encoding="utf-8", newline="") as fh:
            rows = list(csv.DictReader(fh))
        return cls(np.array([int(r["window_start_ms"]) for r in rows], dtype=np.int64), tuple(r["label"] for r in rows))


@dataclass(frozen=True, eq=False)
class SimResult:
    series: dict[str, CqiSeries]  # one per receiving device
    truth: GroundTruthTrace
    scene: Scene

    def write(self, out_dir: str | Path, stem: str = "trace") -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        trace = write_trace(out / f"{stem}.csv", [self.series[d] for d in sorted(self.series)])
        truth = self.truth.write(out / ("truth.csv" if stem == "trace" else f"{stem}_truth.csv"))
        return trace, truth


# ---------------------------------------------------------------------------
# geometry


def _link_endpoints(dep: DeploymentConfig) -> tuple[np.ndarray, np.ndarray]:
    dm = dep.device_map
    tx = np.array([[dm[ln.tx].x, dm[ln.tx].y] for ln in dep.links])
    rx = np.array([[dm[ln.rx].x, dm[ln.rx].y + ln.antenna * dep.antenna_spacing_m] for ln in dep.links])
    return tx, rx


def excess_path(tx: np.ndarray, rx: np.ndarray, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Bistatic path length ``d1 + d2`` and LOS ``d0``; ``points`` (..., 2) broadcast over links (L, 2)."""
    p = points[..., None, :]
    d1 = np.linalg.norm(p - tx, axis=-1)
    d2 = np.linalg.norm(p - rx, axis=-1)
    return d1 + d2, np.linalg.norm(rx - tx, axis=-1)


def in_ellipse(tx: np.ndarray, rx: np.ndarray, points: np.ndarray, lambda_m: float) -> np.ndarray:
    bist, d0 = excess_path(tx, rx, points)
    return bist - d0 <= lambda_m


def static_scatterers(scene: Scene) -> tuple[np.ndarray, np.ndarray]:
    """Positions (N_s, 2) and gains (N_s,) of the fixed environment scatterers."""
    rng = np.random.default_rng(np.random.SeedSequence([scene.env_seed, 101]))
    x0, y0, x1, y1 = scene.deployment.area
    pos = np.column_stack([rng.uniform(x0, x1, scene.num_scatterers), rng.uniform(y0, y1, scene.num_scatterers)])
    gains = rng.uniform(0.1, 0.4, scene.num_scatterers)
    return pos, gains


def _rng(scene: Scene, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([scene.seed, stream]))


def _target_state(scene: Scene, times: np.ndarray):
    """Per-target positions (T, N_t, 2) and presence (T, N_t)."""
    if not scene.targets:
        return np.zeros((0, times.size, 2)), np.zeros((0, times.size), dtype=bool)
    pos = np.stack([t.positions(times) for t in scene.targets])
    pres = np.stack([t.presence(times) for t in scene.targets])
    if scene.sway_m > 0:
        # body sway: small per-sample displacement, keyed by sample time
        x0, y0, x1, y1 = scene.deployment.area
        for k in range(pos.shape[0]):
            for i, t in enumerate(times):
                rng = np.random.default_rng(np.random.SeedSequence([scene.seed, 4, k, int(t)]))
                pos[k, i] += rng.normal(0.0, scene.sway_m, 2)
        pos[..., 0] = np.clip(pos[..., 0], x0, x1)
        pos[..., 1] = np.clip(pos[..., 1], y0, y1)
    return pos, pres


def _shadow_count(scene: Scene, tx, rx, pos, pres) -> np.ndarray:
    """Number of present targets inside each link's ellipse, shape (L, N_t)."""
    L, Nt = tx.shape[0], pos.shape[1]
    count = np.zeros((L, Nt))
    for k in range(pos.shape[0]):
        inside = in_ellipse(tx, rx, pos[k], scene.lambda_m).T  # (L, N_t)
        count += inside & pres[k][None, :]
    return count


def _split_by_rx(scene: Scene, values: np.ndarray, times: np.ndarray) -> dict[str, CqiSeries]:
    dep = scene.deployment
    out = {}
    for rx_dev, links in sorted(dep.links_by_rx().items()):
        idx = [dep.links.index(ln) for ln in links]
        out[rx_dev] = CqiSeries(
            device_id=rx_dev,
            cqi_type=scene.cqi_type,
            link_ids=tuple(ln.link_id for ln in links),
            times_ms=times,
            values=values[:, idx, :],
            sampling_ms=scene.sampling_ms,
        )
    return out


def _impair(scene: Scene, values: np.ndarray) -> np.ndarray:
    rng = _rng(scene, 3)
    if scene.impulse_prob > 0:
        hit = rng.random(values.shape) < scene.impulse_prob
        if np.iscomplexobj(values):
            values = np.where(hit, values * 10 ** (scene.impulse_db / 20.0), values)
        else:
            values = np.where(hit, values + scene.impulse_db, values)
    if scene.drop_prob > 0:
        # drops are whole packets: every subcarrier of a (link, time) pair
        drop = rng.random(values.shape[1:]) < scene.drop_prob
        drop[:, 0] = False
        drop[:, -1] = False
        values = np.where(drop[None], np.nan, values)
    return values


# ---------------------------------------------------------------------------
# channel models


def rssi_values(scene: Scene, clean: bool = False) -> np.ndarray:
    """RSSI in dBm, shape (1, L, N_t)."""
    dep = scene.deployment
    if not dep.links:
        raise ValueError("empty link set")
    times = scene.times_ms
    tx, rx = _link_endpoints(dep)
    d0 = np.linalg.norm(rx - tx, axis=1)
    base = -40.0 - 20.0 * np.log10(np.maximum(d0, 1e-3))
    pos, pres = _target_state(scene, times)
    shadow = _shadow_count(scene, tx, rx, pos, pres)
    rssi = base[:, None] - scene.phi_db * shadow
    if not clean and scene.sigma_db > 0:
        rssi = rssi + _rng(scene, 1).normal(0.0, scene.sigma_db, rssi.shape)
    return rssi[None]


def simulate_rssi(scene: Scene) -> SimResult:
    if scene.cqi_type is not CqiType.UP:
        scene = scene.replace(cqi_type=CqiType.UP)
    if scene.num_subcarriers != 1:
        scene = scene.replace(num_subcarriers=1)
    values = _impair(scene, rssi_values(scene))
    return SimResult(_split_by_rx(scene, values, scene.times_ms), ground_truth(scene), scene)


def _activity_modulation(scene: Scene, target: Target, times: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Gain relative to LOS and extra path length (m) of the moving scatterer."""
    gain = np.zeros(times.size)
    dpath = np.zeros(times.size)
    for i, (a, b, lab) in enumerate(target.activity):
        amp = target.amplitude[i] if i < len(target.amplitude) else 1.0
        m = (times >= a) & (times < b)
        tau = (times[m] - a) / 1000.0
        if lab == "head":
            gain[m] = scene.head_gain * amp
            # one slow turn and return: raised cosine at 0.5 Hz
            dpath[m] = scene.head_excursion_m * amp * 0.5 * (1.0 - np.cos(2 * np.pi * 0.5 * tau))
        elif lab == "arm":
            lobe = np.where(tau < 1.5, np.abs(np.sin(2 * np.pi * tau)), 0.0)
            gain[m] = scene.arm_gain * amp * lobe
            dpath[m] = scene.arm_excursion_m * amp * lobe
    return gain, dpath


@dataclass(frozen=True, eq=False)
class PathSet:
    """Multipath description of one link at one time: amplitudes and delays (s)."""

    amplitudes: np.ndarray
    delays: np.ndarray


def csi_paths(scene: Scene, link_index: int, t_index: int) -> PathSet:
    """Paths of one link at one sample, matching :func:`csi_values` without noise."""
    times = scene.times_ms
    tx, rx = _link_endpoints(scene.deployment)
    tx, rx = tx[link_index : link_index + 1], rx[link_index : link_index + 1]
    d0 = float(np.linalg.norm(rx - tx))
    pos, pres = _target_state(scene, times[t_index : t_index + 1])
    shadow = _shadow_count(scene, tx, rx, pos, pres)[0, 0]
    amps = [(1.0 / d0) * 10 ** (-scene.phi_db * shadow / 20.0)]
    delays = [d0 / SPEED_OF_LIGHT]
    sp, sg = static_scatterers(scene)
    bist, _ = excess_path(tx, rx, sp)
    for g, b in zip(sg, bist[:, 0]):
        amps.append(g / b)
        delays.append(b / SPEED_OF_LIGHT)
    for k, tg in enumerate(scene.targets):
        if not pres[k, 0]:
            continue
        b = float(excess_path(tx, rx, pos[k, 0])[0][0])
        if tg.activity:
            gain, dpath = _activity_modulation(scene, tg, times[t_index : t_index + 1])
            if gain[0] > 0:
                amps.append(gain[0] / d0)
                delays.append((b + dpath[0]) / SPEED_OF_LIGHT)
        else:
            amps.append(scene.rho / b)
            delays.append(b / SPEED_OF_LIGHT)
    return PathSet(np.array(amps), np.array(delays))


def csi_values(scene: Scene, clean: bool = False) -> np.ndarray:
    """Complex CSI, shape (F, L, N_t)."""
    dep = scene.deployment
    if scene.num_subcarriers < 2:
        raise ValueError("CSI simulation needs F >= 2 subcarriers")
    if not dep.links:
        raise ValueError("empty link set")
    times = scene.times_ms
    freqs = scene.frequencies_hz
    tx, rx = _link_endpoints(dep)
    d0 = np.linalg.norm(rx - tx, axis=1)
    a0 = 1.0 / d0
    k = -2j * np.pi * freqs[:, None] / SPEED_OF_LIGHT  # (F, 1)

    los = a0[None, :] * np.exp(k * d0[None, :])  # (F, L)
    sp, sg = static_scatterers(scene)
    static = np.zeros_like(los)
    if sp.size:
        bist, _ = excess_path(tx, rx, sp)  # (N_s, L)
        for g, b in zip(sg, bist):
            static += (g / b)[None, :] * np.exp(k * b[None, :])

    pos, pres = _target_state(scene, times)
    shadow = _shadow_count(scene, tx, rx, pos, pres)  # (L, N_t)
    values = los[:, :, None] * (10 ** (-scene.phi_db * shadow / 20.0))[None] + static[:, :, None]
    for i, tg in enumerate(scene.targets):
        bist, _ = excess_path(tx, rx, pos[i])  # (N_t, L)
        bist = bist.T  # (L, N_t)
        on = pres[i][None, :]
        if tg.activity:
            gain, dpath = _activity_modulation(scene, tg, times)
            amp = gain[None, :] * a0[:, None] * on
            plen = bist + dpath[None, :]
        else:
            amp = scene.rho / bist * on
            plen = bist
        values = values + amp[None] * np.exp(k[:, :, None] * plen[None])

    if scene.phase_ramp_rad:
        m = np.arange(scene.num_subcarriers)[:, None, None]
        offset = _rng(scene, 2).uniform(-np.pi, np.pi, values.shape[1:])[None]
        values = values * np.exp(1j * (scene.phase_ramp_rad * m + offset))

    if not clean and scene.sigma_db > 0:
        sigma_n = a0 * scene.sigma_db * np.log(10.0) / 20.0  # (L,)
        rng = _rng(scene, 1)
        noise = rng.normal(size=values.shape) + 1j * rng.normal(size=values.shape)
        values = values + sigma_n[None, :, None] * noise
    return values


def simulate_csi(scene: Scene) -> SimResult:
    if scene.cqi_type is not CqiType.PHY:
        scene = scene.replace(cqi_type=CqiType.PHY)
    values = _impair(scene, csi_values(scene))
    return SimResult(_split_by_rx(scene, values, scene.times_ms), ground_truth(scene), scene)


def simulate(scene: Scene) -> SimResult:
    return simulate_csi(scene) if scene.cqi_type is CqiType.PHY else simulate_rssi(scene)


# ---------------------------------------------------------------------------
# ground truth


def ground_truth(scene: Scene) -> GroundTruthTrace:
    starts = np.arange(0, scene.duration_ms - scene.window_ms + 1, scene.window_ms, dtype=np.int64)
    if starts.size == 0:
        starts = np.array([0], dtype=np.int64)
    pos, pres = _target_state(scene, starts)
    labels = []
    for i, t in enumerate(starts):
        if scene.task_type is TaskType.DETECTION:
            labels.append("occupied" if pres[:, i].any() else "empty")
        elif scene.task_type is TaskType.LOCALIZATION:
            if scene.cells is None:
                raise ValueError("localization truth needs a cell grid")
            present = np.flatnonzero(pres[:, i])
            labels.append(scene.cells.label_of(*pos[present[0], i]) if present.size else "empty")
        else:
            acts = [tg.activity_at(int(t)) for tg in scene.targets]
            labels.append(next((a for a in acts if a != "none"), "none"))
    return GroundTruthTrace(starts, tuple(labels))


# ---------------------------------------------------------------------------
# presets


def mesh_deployment(gw_id: str = "gw1") -> DeploymentConfig:
    """14 devices on the perimeter of a 6 x 3 m room, full directed mesh (182 links)."""
    pts = [(x, 0.0) for x in (0.0, 1.5, 3.0, 4.5, 6.0)]
    pts += [(x, 3.0) for x in (0.0, 1.5, 3.0, 4.5, 6.0)]
    pts += [(0.0, 1.0), (0.0, 2.0), (6.0, 1.0), (6.0, 2.0)]
    devices = tuple(Device(f"n{i:02d}", x, y) for i, (x, y) in enumerate(pts))
    links = []
    for rx in devices:
        for tx in devices:
            if tx.device_id != rx.device_id:
                links.append(Link(len(links), tx.device_id, rx.device_id))
    return DeploymentConfig((Gateway(gw_id),), devices, (0.0, 0.0, 6.0, 3.0), tuple(links))


def wifi_link_deployment(gw_id: str = "gw1", antennas: int = 3) -> DeploymentConfig:
    """One AP and one 3-antenna receiver across a 6 x 3 m room."""
    devices = (Device("ap", 0.5, 1.5), Device("rx", 5.5, 1.5))
    links = tuple(Link(a, "ap", "rx", antenna=a) for a in range(antennas))
    return DeploymentConfig((Gateway(gw_id),), devices, (0.0, 0.0, 6.0, 3.0), links)


def cabin_deployment(gw_id: str = "gw1", antennas: int = 3) -> DeploymentConfig:
    """Dashboard AP and a receiver behind the driver in a 2 x 1.5 m cabin."""
    devices = (Device("dash", 0.2, 0.4), Device("rx", 1.8, 1.1))
    links = tuple(Link(a, "dash", "rx", antenna=a) for a in range(antennas))
    return DeploymentConfig((Gateway(gw_id),), devices, (0.0, 0.0, 2.0, 1.5), links)


DEPLOYMENTS = {"mesh_14": mesh_deployment, "wifi_link": wifi_link_deployment, "car_cabin": cabin_deployment}


def deployment_preset(name: str) -> DeploymentConfig:
    try:
        return DEPLOYMENTS[name]()
    except KeyError:
        raise ValueError(f"unknown deployment preset {name!r}") from None


def default_cells(dep: DeploymentConfig) -> CellGrid:
    x0, y0, x1, y1 = dep.area
    return CellGrid(x0, y0, 4, 3, (x1 - x0) / 4, (y1 - y0) / 3)


def load_scene(path: str | Path) -> Scene:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"scene file not found: {path}")
    return Scene.from_json(json.loads(path.read_text(encoding="utf-8")))


def random_position(rng: np.random.Generator, area: Sequence[float], margin: float = 0.1) -> tuple[float, float]:
    x0, y0, x1, y1 = area
    return float(rng.uniform(x0 + margin, x1 - margin)), float(rng.uniform(y0 + margin, y1 - margin))


# ---------------------------------------------------------------------------
# training sets


def emit_training_set(
    scenes: dict[str, Scene], task, subbands: int | None = None, denoise_len: int = 3
) -> dict[str, TrainingSet]:
    """Simulate one scene per latent label and return per-device training sets.

    Each scene is pre-processed, cut into task windows, and every window
    becomes one time-averaged feature-space vector of its class.
    """
    if set(scenes) != set(task.latent_labels):
        raise ValueError(f"scene labels {sorted(scenes)} do not match task labels {list(task.latent_labels)}")
    results = {label: simulate(scenes[label].replace(cqi_type=task.cqi_type)) for label in task.latent_labels}
    return training_set_from_results(results, task, subbands, denoise_len)


def training_set_from_results(
    results: dict[str, SimResult], task, subbands: int | None = None, denoise_len: int = 3
) -> dict[str, TrainingSet]:
    """Per-device training sets from already simulated per-label runs."""
    per_dev: dict[str, dict[str, list[np.ndarray]]] = {}
    layouts: dict[str, Layout] = {}
    for label in task.latent_labels:
        for dev, series in results[label].series.items():
            clean = preprocess(series, denoise_len)
            vecs = [window_vector(w, subbands) for w in window(clean, task.window_ms, task.window_ms)]
            per_dev.setdefault(dev, {})[label] = vecs
            layouts[dev] = Layout(*feature_layout(series, subbands))
    return {
        dev: TrainingSet(task.task_id, {k: np.array(v) for k, v in classes.items()}, layouts[dev], device_id=dev)
        for dev, classes in sorted(per_dev.items())
    }


def write_training_sets(path: str | Path, sets: dict[str, TrainingSet]) -> Path:
    path = Path(path)
    items = [sets[d].to_json() for d in sorted(sets)]
    doc = items[0] if len(items) == 1 else {"task_id": items[0]["task_id"], "training_sets": items}
    path.write_text(json.dumps(doc, sort_keys=True), encoding="utf-8")
    return path


def read_training_sets(path: str | Path) -> dict[str, TrainingSet]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    items = doc.get("training_sets", [doc])
    out = {}
    for obj in items:
        ts = TrainingSet.from_json(obj)
        out[ts.device_id] = ts
    return out
