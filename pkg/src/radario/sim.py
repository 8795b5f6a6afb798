"""Synthetic ground truth and sensor data for closed-loop testing.

The FMCW model is deliberately simple: constant amplitude per scatterer, no
range migration within a frame, and ideal beat tones. A scatterer at range
``r`` with radial velocity ``d`` (receding positive) and radar-frame direction
``u`` contributes

    a * exp(j (2 pi (r / max_range) * sample + 2 pi (d / (2 max_doppler)) * chirp
               + 2 pi d_lambda (col * u_y + row * u_z) + phi0))

to virtual element (row, col), which the FFT conventions in
:mod:`radario.spectrum` map back to range bin r / dr, Doppler bin
N_c / 2 + d / dv, and angle bins at psi = 2 pi d_lambda u.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.spatial.transform import Rotation, RotationSpline

from radario import lie
from radario.evaluation import Trajectory, read_tum
from radario.imu import ImuNoise, ImuStream
from radario.spectrum import ChirpConfig, RawFrame
from radario.velocity import DirectionGrid, DopplerImage, FeedRecord, project_velocity

KINDS = ("forward", "lateral", "circle", "from-file")
SIGMA_FLOOR = 1e-6  # reported sigma of a noise-free feed


@dataclass
class Scatterer:
    position: np.ndarray
    reflectivity: float = 1.0

    def __post_init__(self):
        if not self.reflectivity > 0:
            raise ValueError("reflectivity must be positive")


@dataclass
class TrajectorySpec:
    kind: str = "forward"
    duration: float = 60.0
    speed: float = 0.7  # nominal m/s
    yaw_rate: float = 0.2  # amplitude (or constant for circle) rad/s
    radius: float = 5.0  # circle only
    frame_rate: float = 20.0
    dense_rate: float = 1000.0
    path: str | None = None  # from-file TUM trajectory

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown trajectory kind {self.kind!r}; choose from {KINDS}")
        if not self.duration > 0:
            raise ValueError("duration must be positive")


@dataclass
class Truth:
    """Densely sampled planar (or general) ground truth."""

    t: np.ndarray
    R: np.ndarray  # world <- body
    p: np.ndarray
    v: np.ndarray  # world velocity
    a: np.ndarray  # world acceleration
    omega: np.ndarray  # body angular rate

    @property
    def rate(self) -> float:
        return 1.0 / (self.t[1] - self.t[0])

    def index(self, times) -> np.ndarray:
        times = np.atleast_1d(np.asarray(times, dtype=float))
        idx = np.rint((times - self.t[0]) * self.rate).astype(int)
        if np.any(idx < 0) or np.any(idx >= len(self.t)) or np.any(np.abs(self.t[idx] - times) > 1e-6):
            raise ValueError("requested times are not on the dense truth grid")
        return idx

    def body_velocity(self, idx=None) -> np.ndarray:
        idx = slice(None) if idx is None else idx
        return np.einsum("nji,nj->ni", self.R[idx], self.v[idx])

    def frame_times(self, frame_rate: float) -> np.ndarray:
        n = int(np.floor((self.t[-1] - self.t[0]) * frame_rate + 1e-9)) + 1
        step = int(round(self.rate / frame_rate))
        return self.t[0] + np.arange(n) * step / self.rate

    def trajectory(self, times) -> Trajectory:
        idx = self.index(times)
        return Trajectory(self.t[idx], self.R[idx], self.p[idx])


def _smooth_profile(rng, t, amp, periods=(40.0, 17.0, 9.0)):
    """Sum of a few random-phase sinusoids and its derivative and integral."""
    val = np.zeros_like(t)
    der = np.zeros_like(t)
    integ = np.zeros_like(t)
    weights = np.array([1.0, 0.5, 0.25])
    weights = weights / weights.sum()
    for w, T in zip(weights, periods):
        f = 2 * np.pi / (T * rng.uniform(0.8, 1.25))
        ph = rng.uniform(0, 2 * np.pi)
        val += amp * w * np.sin(f * t + ph)
        der += amp * w * f * np.cos(f * t + ph)
        integ += amp * w * (np.cos(ph) - np.cos(f * t + ph)) / f
    return val, der, integ


def _cumtrapz(y, dt):
    out = np.zeros_like(y)
    out[1:] = np.cumsum(0.5 * (y[1:] + y[:-1]) * dt, axis=0)
    return out


def gen_trajectory(spec: TrajectorySpec, seed: int = 0) -> Truth:
    """Dense twice-differentiable ground truth starting at the identity pose."""
    rng = np.random.default_rng(seed)
    n = int(round(spec.duration * spec.dense_rate)) + 1
    t = np.arange(n) / spec.dense_rate
    dt = 1.0 / spec.dense_rate

    if spec.kind == "from-file":
        return _truth_from_file(spec.path, spec.dense_rate)

    if spec.kind == "circle":
        if spec.speed == 0:
            yaw = np.zeros(n)
            rate = np.zeros(n)
        else:
            rate = np.full(n, spec.speed / spec.radius)
            yaw = rate * t
        vb = np.zeros((n, 3))
        vb[:, 0] = spec.speed
        vb_dot = np.zeros((n, 3))
    else:
        speed = spec.speed
        main, main_d, _ = _smooth_profile(rng, t, 0.25 * speed)
        side, side_d, _ = _smooth_profile(rng, t, 0.2 * speed)
        rate, _, yaw = _smooth_profile(rng, t, spec.yaw_rate)
        vb = np.zeros((n, 3))
        vb_dot = np.zeros((n, 3))
        if spec.kind == "forward":
            vb[:, 0], vb_dot[:, 0] = speed + main, main_d
            vb[:, 1], vb_dot[:, 1] = side, side_d
        else:
            # sideways motion that slowly reverses direction
            f = 2 * np.pi / 30.0
            ph = rng.uniform(0, 2 * np.pi)
            vb[:, 1] = speed * np.sin(f * t + ph) + main
            vb_dot[:, 1] = speed * f * np.cos(f * t + ph) + main_d
            vb[:, 0], vb_dot[:, 0] = side, side_d
        if speed == 0:
            vb[:] = 0
            vb_dot[:] = 0
            rate = np.zeros(n)
            yaw = np.zeros(n)

    R = lie.yaw_rotation(yaw)
    omega = np.zeros((n, 3))
    omega[:, 2] = rate
    v = np.einsum("nij,nj->ni", R, vb)
    a = np.einsum("nij,nj->ni", R, vb_dot + np.cross(omega, vb))
    p = _cumtrapz(v, dt)
    if spec.kind == "circle":
        # exact closed form for the circle
        w0 = spec.speed / spec.radius if spec.speed else 0.0
        if w0:
            p = np.stack([spec.radius * np.sin(w0 * t), spec.radius * (1 - np.cos(w0 * t)), np.zeros(n)], axis=1)
    return Truth(t, R, p, v, a, omega)


def _truth_from_file(path, dense_rate) -> Truth:
    traj = read_tum(path)
    t_src = traj.stamps - traj.stamps[0]
    pos = CubicSpline(t_src, traj.p)
    rot = RotationSpline(t_src, Rotation.from_matrix(traj.R))
    t = np.arange(0.0, t_src[-1] + 1e-12, 1.0 / dense_rate)
    R = rot(t).as_matrix()
    # RotationSpline rates are expressed in the world frame
    omega_world = rot(t, 1)
    omega = np.einsum("nji,nj->ni", R, omega_world)
    return Truth(t, R, pos(t), pos(t, 1), pos(t, 2), omega)


def gen_imu(truth: Truth, noise: ImuNoise = ImuNoise(), rate: float = 100.0, seed: int = 0,
            bias=(np.zeros(3), np.zeros(3)), noisy: bool = True) -> ImuStream:
    """Body angular rate and specific force R^T (a - g), plus bias and white noise."""
    step = truth.rate / rate
    if step < 5 - 1e-9 or abs(step - round(step)) > 1e-9:
        raise ValueError("truth must be an integer multiple (>= 5x) of the IMU rate")
    idx = np.arange(0, len(truth.t), int(round(step)))
    rng = np.random.default_rng(seed)
    R = truth.R[idx]
    gyro = truth.omega[idx] + np.asarray(bias[0])
    acc = np.einsum("nji,nj->ni", R, truth.a[idx] - noise.g) + np.asarray(bias[1])
    if noisy:
        gyro = gyro + rng.normal(size=gyro.shape) * noise.gyro_noise * np.sqrt(rate)
        acc = acc + rng.normal(size=acc.shape) * noise.accel_noise * np.sqrt(rate)
    return ImuStream(truth.t[idx], gyro, acc)


# --- radar scenes -----------------------------------------------------------


def gen_scene(truth: Truth, density: float = 0.3, z_range=(-0.6, 1.2), margin: float = 12.0,
              seed: int = 0) -> list[Scatterer]:
    """Static scatterers scattered uniformly around the trajectory footprint."""
    rng = np.random.default_rng(seed)
    lo = truth.p[:, :2].min(0) - margin
    hi = truth.p[:, :2].max(0) + margin
    area = float(np.prod(hi - lo))
    n = rng.poisson(density * area)
    xy = rng.uniform(lo, hi, size=(n, 2))
    z = rng.uniform(*z_range, size=n)
    refl = rng.uniform(0.7, 1.3, size=n)
    return [Scatterer(np.array([x, y, zz]), float(r)) for (x, y), zz, r in zip(xy, z, refl)]


def _scene_arrays(scatterers):
    if isinstance(scatterers, tuple):
        return scatterers
    pos = np.array([s.position for s in scatterers], dtype=float).reshape(-1, 3)
    amp = np.array([s.reflectivity for s in scatterers], dtype=float)
    return pos, amp


def gen_iq_frame(scatterers: Sequence[Scatterer] | tuple, pose: tuple[np.ndarray, np.ndarray], velocity,
                 cfg: ChirpConfig, noise_floor: float = 0.1, rng=None, timestamp: float = 0.0,
                 extrinsic=None) -> RawFrame:
    """Synthesize one frame seen by a radar at ``pose`` = (R, p) moving with world ``velocity``.

    Only scatterers in front of the sensor (x > 0) and inside max_range
    contribute. ``noise_floor`` is the per-sample complex noise standard deviation.
    """
    rng = np.random.default_rng() if rng is None else rng
    R, p = pose
    pos, amp = _scene_arrays(scatterers)
    v_body = R.T @ np.asarray(velocity, dtype=float)
    q = (pos - p) @ R  # body frame
    if extrinsic is not None:
        q = (q - extrinsic.t) @ extrinsic.R
        v_body = extrinsic.R.T @ v_body
    rng_m = np.linalg.norm(q, axis=1)
    ok = (q[:, 0] > 0) & (rng_m < cfg.max_range) & (rng_m > 1e-3)
    q, rng_m, amp = q[ok], rng_m[ok], amp[ok]
    u = q / rng_m[:, None]
    doppler = -u @ v_body
    doppler = np.clip(doppler, -cfg.max_doppler, cfg.max_doppler)
    phase0 = rng.uniform(0, 2 * np.pi, size=len(amp))

    nc, nr = cfg.num_chirps, cfg.num_samples
    chirp = np.exp(2j * np.pi * np.outer(doppler / (2 * cfg.max_doppler), np.arange(nc)))  # (S, Nc)
    rows = cfg.layout[..., 0].ravel()
    cols = cfg.layout[..., 1].ravel()
    arr = np.exp(2j * np.pi * cfg.antenna_spacing * (np.outer(u[:, 1], cols) + np.outer(u[:, 2], rows)))
    fast = np.exp(2j * np.pi * np.outer(rng_m / cfg.max_range, np.arange(nr)))  # (S, Nr)
    spatial = (amp * np.exp(1j * phase0))[:, None, None] * arr[:, :, None] * fast[:, None, :]
    iq = chirp.T @ spatial.reshape(len(amp), rows.size * nr)
    iq = iq.reshape(cfg.frame_shape)
    if noise_floor > 0:
        iq = iq + (rng.normal(size=iq.shape) + 1j * rng.normal(size=iq.shape)) * (noise_floor / np.sqrt(2))
    return RawFrame(timestamp, iq)


def iter_iq_frames(truth: Truth, scatterers, cfg: ChirpConfig, noise_floor: float = 0.1, seed: int = 0,
                   frame_rate: float | None = None):
    """Frames at the radar rate along the truth trajectory (generator; frames are large)."""
    rng = np.random.default_rng(seed)
    arrays = _scene_arrays(scatterers)
    times = truth.frame_times(frame_rate or cfg.frame_rate)
    for k in truth.index(times):
        yield gen_iq_frame(arrays, (truth.R[k], truth.p[k]), truth.v[k], cfg, noise_floor, rng, float(truth.t[k]))


# --- prediction feeds -------------------------------------------------------


@dataclass
class FeedNoise:
    """Heteroscedastic Doppler noise: sigma = base * (1 + edge * (|az| / az_max)^2)."""

    base_sigma: float = 0.05
    edge_gain: float = 2.0
    velocity_sigma: float = 0.05
    miscalibration: float = 1.0  # reported sigma = true sigma * miscalibration
    with_logvar: bool = True


def doppler_sigma(grid: DirectionGrid, noise: FeedNoise) -> np.ndarray:
    az = np.abs(grid.azimuth)
    rel = az / az.max() if az.max() > 0 else az
    return np.broadcast_to(noise.base_sigma * (1.0 + noise.edge_gain * rel**2), grid.shape).copy()


def gen_prediction_feed(truth: Truth, grid: DirectionGrid, noise: FeedNoise = FeedNoise(), seed: int = 0,
                        frame_rate: float = 20.0, mode: int = 1) -> list[FeedRecord]:
    """Noisy Doppler images (mode 1) or direct velocities (mode 0) with log-variances."""
    rng = np.random.default_rng(seed)
    times = truth.frame_times(frame_rate)
    idx = truth.index(times)
    vb = truth.body_velocity(idx)
    out = []
    if mode == 1:
        sigma = doppler_sigma(grid, noise)
        logvar = np.log(np.maximum(sigma * noise.miscalibration, SIGMA_FLOOR) ** 2)
        for t, v in zip(times, vb):
            d = project_velocity(v, grid) + sigma * rng.normal(size=grid.shape)
            out.append(FeedRecord(float(t), doppler=DopplerImage(d, logvar.copy())))
    else:
        s = noise.velocity_sigma
        lv = np.full(3, np.log(max(s * noise.miscalibration, SIGMA_FLOOR) ** 2))
        for t, v in zip(times, vb):
            out.append(FeedRecord(float(t), v=v + s * rng.normal(size=3),
                                  logvar=lv.copy() if noise.with_logvar else None,
                                  has_logvar=noise.with_logvar))
    return out
