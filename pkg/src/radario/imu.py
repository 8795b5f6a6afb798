"""IMU preintegration between radar frames and the relative-motion residual.

Deltas follow the on-manifold formulation: gravity is left out of the
preintegrated quantities and re-enters in the residual. The discrete scheme is
midpoint integration; the bias Jacobians and covariance are the exact
first-order linearization of that same scheme.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from radario import lie
from radario.errors import TimestampError
from radario.state import BA, BG, DIM, PHI, POS, VEL, FrameState

GRAVITY = np.array([0.0, 0.0, -9.81])
TIME_TOLERANCE = 1e-3
MIN_SPAN = 1e-6


@dataclass
class ImuSample:
    timestamp: float
    gyro: np.ndarray
    accel: np.ndarray


@dataclass(frozen=True)
class ImuNoise:
    """Continuous-time noise densities and the known gravity vector."""

    gyro_noise: float = 1.2e-4  # rad/s/sqrt(Hz)
    accel_noise: float = 1.2e-3  # m/s^2/sqrt(Hz)
    gyro_walk: float = 1e-5  # rad/s^2/sqrt(Hz)
    accel_walk: float = 1e-4  # m/s^3/sqrt(Hz)
    gravity: tuple[float, float, float] = (0.0, 0.0, -9.81)

    def __post_init__(self):
        if min(self.gyro_noise, self.accel_noise, self.gyro_walk, self.accel_walk) < 0:
            raise ValueError("noise densities must be non-negative")

    @property
    def g(self) -> np.ndarray:
        return np.array(self.gravity, dtype=float)


@dataclass
class PreintegratedImu:
    dR: np.ndarray
    dv: np.ndarray
    dp: np.ndarray
    dt: float
    cov: np.ndarray  # 9x9, ordered (rotation, velocity, position)
    J_R_bg: np.ndarray
    J_v_bg: np.ndarray
    J_v_ba: np.ndarray
    J_p_bg: np.ndarray
    J_p_ba: np.ndarray
    bg: np.ndarray  # linearization biases
    ba: np.ndarray
    t0: float = 0.0
    t1: float = 0.0
    gyro_end: np.ndarray = field(default_factory=lambda: np.zeros(3))  # last raw gyro sample

    def corrected(self, bg, ba):
        """First-order bias-corrected (dR, dv, dp)."""
        dbg = np.asarray(bg) - self.bg
        dba = np.asarray(ba) - self.ba
        return (
            self.dR @ lie.exp(self.J_R_bg @ dbg),
            self.dv + self.J_v_bg @ dbg + self.J_v_ba @ dba,
            self.dp + self.J_p_bg @ dbg + self.J_p_ba @ dba,
        )


def _as_arrays(samples):
    if isinstance(samples, tuple) and len(samples) == 3:
        t, w, a = samples
        return np.asarray(t, float), np.asarray(w, float), np.asarray(a, float)
    t = np.array([s.timestamp for s in samples], dtype=float)
    w = np.array([s.gyro for s in samples], dtype=float).reshape(-1, 3)
    a = np.array([s.accel for s in samples], dtype=float).reshape(-1, 3)
    return t, w, a


def preintegrate(samples: Sequence[ImuSample] | tuple, bias=(np.zeros(3), np.zeros(3)),
                 noise: ImuNoise = ImuNoise(), track=None) -> PreintegratedImu:
    """Preintegrate samples spanning [t_first, t_last].

    ``samples`` is a list of :class:`ImuSample` or a ``(t, gyro, accel)`` array
    triple. ``track``, if given, is called with the running result after
    every step (used by tests that inspect intermediate covariances).
    """
    t, gyro, acc = _as_arrays(samples)
    if len(t) < 2:
        raise ValueError("preintegration needs at least 2 samples")
    steps = np.diff(t)
    if np.any(steps <= 0):
        raise TimestampError("IMU timestamps must be strictly increasing")
    if t[-1] - t[0] < MIN_SPAN:
        raise TimestampError("preintegration span below 1 us")
    bg = np.asarray(bias[0], dtype=float).copy()
    ba = np.asarray(bias[1], dtype=float).copy()

    dR = np.eye(3)
    dv = np.zeros(3)
    dp = np.zeros(3)
    J_R = np.zeros((3, 3))
    J_vg = np.zeros((3, 3))
    J_va = np.zeros((3, 3))
    J_pg = np.zeros((3, 3))
    J_pa = np.zeros((3, 3))
    cov = np.zeros((9, 9))
    I3 = np.eye(3)
    qg, qa = noise.gyro_noise**2, noise.accel_noise**2

    for k, h in enumerate(steps):
        w = 0.5 * (gyro[k] + gyro[k + 1]) - bg
        a0 = acc[k] - ba
        a1 = acc[k + 1] - ba
        step_R = lie.exp(w * h)
        Jr = lie.right_jacobian(w * h)
        R1 = dR @ step_R
        J_R1 = step_R.T @ J_R - Jr * h

        mid = 0.5 * (dR @ a0 + R1 @ a1)
        d_mid_phi = -0.5 * (dR @ lie.hat(a0) + R1 @ lie.hat(a1) @ step_R.T)
        d_mid_bg = -0.5 * (dR @ lie.hat(a0) @ J_R + R1 @ lie.hat(a1) @ J_R1)
        d_mid_ba = -0.5 * (dR + R1)
        d_mid_ng = 0.5 * R1 @ lie.hat(a1) @ Jr * h

        A = np.zeros((9, 9))
        A[0:3, 0:3] = step_R.T
        A[3:6, 0:3] = d_mid_phi * h
        A[3:6, 3:6] = I3
        A[6:9, 0:3] = 0.5 * d_mid_phi * h * h
        A[6:9, 3:6] = I3 * h
        A[6:9, 6:9] = I3
        B = np.zeros((9, 6))
        B[0:3, 0:3] = Jr * h
        B[3:6, 0:3] = d_mid_ng * h
        B[6:9, 0:3] = 0.5 * d_mid_ng * h * h
        B[3:6, 3:6] = -d_mid_ba * h
        B[6:9, 3:6] = -0.5 * d_mid_ba * h * h
        Q = np.diag([qg / h] * 3 + [qa / h] * 3)
        cov = A @ cov @ A.T + B @ Q @ B.T

        dp = dp + dv * h + 0.5 * mid * h * h
        dv = dv + mid * h
        J_pg = J_pg + J_vg * h + 0.5 * d_mid_bg * h * h
        J_pa = J_pa + J_va * h + 0.5 * d_mid_ba * h * h
        J_vg = J_vg + d_mid_bg * h
        J_va = J_va + d_mid_ba * h
        J_R = J_R1
        dR = lie.project_to_so3(R1) if k % 64 == 63 else R1

        if track is not None:
            track(PreintegratedImu(dR, dv, dp, float(t[k + 1] - t[0]), 0.5 * (cov + cov.T),
                                   J_R, J_vg, J_va, J_pg, J_pa, bg, ba, t[0], t[k + 1]))

    return PreintegratedImu(dR, dv, dp, float(t[-1] - t[0]), 0.5 * (cov + cov.T), J_R, J_vg, J_va,
                            J_pg, J_pa, bg, ba, float(t[0]), float(t[-1]), gyro[-1].copy())


# --- residual --------------------------------------------------------------


def imu_residual_batch(Ri, pi, vi, bgi, bai, Rj, pj, vj, pre: dict, g=GRAVITY, jacobians=True):
    """Vectorized preintegration residual for n factors.

    ``pre`` holds stacked preintegration arrays: dR, dv, dp (n,...), dt (n,),
    J_R_bg, J_v_bg, J_v_ba, J_p_bg, J_p_ba, bg, ba. Returns r (n, 9) and,
    when requested, Jacobians (n, 9, 15) w.r.t. state i and state j in the
    tangent ordering of :mod:`radario.state`.
    """
    dt = pre["dt"][:, None]
    dbg = bgi - pre["bg"]
    dba = bai - pre["ba"]
    corr_phi = np.einsum("nij,nj->ni", pre["J_R_bg"], dbg)
    dR_c = pre["dR"] @ lie.exp(corr_phi)
    dv_c = pre["dv"] + np.einsum("nij,nj->ni", pre["J_v_bg"], dbg) + np.einsum("nij,nj->ni", pre["J_v_ba"], dba)
    dp_c = pre["dp"] + np.einsum("nij,nj->ni", pre["J_p_bg"], dbg) + np.einsum("nij,nj->ni", pre["J_p_ba"], dba)

    RiT = np.swapaxes(Ri, 1, 2)
    E = np.swapaxes(dR_c, 1, 2) @ RiT @ Rj
    r_R = lie.log(E)
    dv_world = vj - vi - g * dt
    dp_world = pj - pi - vi * dt - 0.5 * g * dt * dt
    vel_i = np.einsum("nij,nj->ni", RiT, dv_world)
    pos_i = np.einsum("nij,nj->ni", RiT, dp_world)
    r = np.concatenate([r_R, vel_i - dv_c, pos_i - dp_c], axis=1)
    if not jacobians:
        return r

    n = len(r)
    Jinv = lie.right_jacobian_inv(r_R)
    Ji = np.zeros((n, 9, DIM))
    Jj = np.zeros((n, 9, DIM))
    Ji[:, 0:3, PHI] = -Jinv @ np.swapaxes(Rj, 1, 2) @ Ri
    Ji[:, 0:3, BG] = -Jinv @ np.swapaxes(lie.exp(r_R), 1, 2) @ lie.right_jacobian(corr_phi) @ pre["J_R_bg"]
    Jj[:, 0:3, PHI] = Jinv

    Ji[:, 3:6, PHI] = lie.hat(vel_i)
    Ji[:, 3:6, VEL] = -RiT
    Ji[:, 3:6, BG] = -pre["J_v_bg"]
    Ji[:, 3:6, BA] = -pre["J_v_ba"]
    Jj[:, 3:6, VEL] = RiT

    Ji[:, 6:9, PHI] = lie.hat(pos_i)
    Ji[:, 6:9, POS] = -RiT
    Ji[:, 6:9, VEL] = -RiT * dt[:, :, None]
    Ji[:, 6:9, BG] = -pre["J_p_bg"]
    Ji[:, 6:9, BA] = -pre["J_p_ba"]
    Jj[:, 6:9, POS] = RiT
    return r, Ji, Jj


def stack_preintegrations(items: Sequence[PreintegratedImu]) -> dict:
    keys = ("dR", "dv", "dp", "J_R_bg", "J_v_bg", "J_v_ba", "J_p_bg", "J_p_ba", "bg", "ba")
    out = {k: np.stack([getattr(p, k) for p in items]) for k in keys}
    out["dt"] = np.array([p.dt for p in items])
    return out


def _check_times(state_i: FrameState, state_j: FrameState, preint: PreintegratedImu) -> None:
    if preint.dt < MIN_SPAN:
        raise TimestampError("preintegration span below 1 us")
    if abs(state_i.timestamp - preint.t0) > TIME_TOLERANCE or abs(state_j.timestamp - preint.t1) > TIME_TOLERANCE:
        raise TimestampError(
            f"states at ({state_i.timestamp}, {state_j.timestamp}) do not match preintegration "
            f"interval ({preint.t0}, {preint.t1})")


def imu_residual(state_i: FrameState, state_j: FrameState, preint: PreintegratedImu, g=GRAVITY) -> np.ndarray:
    """9-vector (rotation, velocity, position) residual of one preintegration factor."""
    return imu_residual_jacobians(state_i, state_j, preint, g, jacobians=False)


def imu_residual_jacobians(state_i: FrameState, state_j: FrameState, preint: PreintegratedImu,
                           g=GRAVITY, jacobians=True):
    _check_times(state_i, state_j, preint)
    out = imu_residual_batch(
        state_i.R[None], state_i.p[None], state_i.v[None], state_i.bg[None], state_i.ba[None],
        state_j.R[None], state_j.p[None], state_j.v[None],
        stack_preintegrations([preint]), np.asarray(g, dtype=float), jacobians=jacobians,
    )
    if not jacobians:
        return out[0]
    r, Ji, Jj = out
    return r[0], Ji[0], Jj[0]


# --- streams ---------------------------------------------------------------


class ImuStream:
    """Time-sorted IMU samples with interval extraction."""

    def __init__(self, t, gyro, accel):
        self.t = np.asarray(t, dtype=float)
        self.gyro = np.asarray(gyro, dtype=float).reshape(-1, 3)
        self.accel = np.asarray(accel, dtype=float).reshape(-1, 3)
        if len(self.t) and np.any(np.diff(self.t) <= 0):
            raise TimestampError("IMU timestamps must be strictly increasing")

    @classmethod
    def from_samples(cls, samples: Sequence[ImuSample]) -> "ImuStream":
        return cls(*_as_arrays(samples))

    def __len__(self):
        return len(self.t)

    def samples(self) -> list[ImuSample]:
        return [ImuSample(t, w, a) for t, w, a in zip(self.t, self.gyro, self.accel)]

    def interpolate(self, t: float) -> tuple[np.ndarray, np.ndarray]:
        if t < self.t[0] - TIME_TOLERANCE or t > self.t[-1] + TIME_TOLERANCE:
            raise TimestampError(f"time {t} outside IMU stream [{self.t[0]}, {self.t[-1]}]")
        w = np.array([np.interp(t, self.t, self.gyro[:, i]) for i in range(3)])
        a = np.array([np.interp(t, self.t, self.accel[:, i]) for i in range(3)])
        return w, a

    def between(self, t0: float, t1: float):
        """(t, gyro, accel) on [t0, t1], with linearly interpolated boundary samples."""
        if t1 <= t0:
            raise TimestampError(f"empty interval [{t0}, {t1}]")
        eps = 1e-9
        inside = (self.t > t0 + eps) & (self.t < t1 - eps)
        w0, a0 = self.interpolate(t0)
        w1, a1 = self.interpolate(t1)
        t = np.concatenate([[t0], self.t[inside], [t1]])
        gyro = np.vstack([w0, self.gyro[inside], w1])
        acc = np.vstack([a0, self.accel[inside], a1])
        return t, gyro, acc


def write_imu_csv(path: str | Path, stream: ImuStream) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["timestamp", "wx", "wy", "wz", "ax", "ay", "az"])
        for t, g, a in zip(stream.t, stream.gyro, stream.accel):
            w.writerow([repr(float(t)), *(repr(float(x)) for x in g), *(repr(float(x)) for x in a)])


def read_imu_csv(path: str | Path) -> ImuStream:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return ImuStream(data[:, 0], data[:, 1:4], data[:, 4:7])
