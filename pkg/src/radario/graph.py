"""Sliding-window radar-inertial fusion.

The window holds per-frame states linked by IMU preintegration factors (with
bias random-walk terms), body-frame velocity factors under a Huber loss, a
weak bias prior and a locking prior on the oldest retained pose. It is solved
by Levenberg-Marquardt on the manifold with right-perturbed rotations.

Old states are not Schur-marginalized: leaving the window simply drops their
factors and the new oldest state is pinned by a large diagonal information
(``LOCK_INFORMATION``) on its six pose degrees of freedom.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import LinAlgError, cho_solve_banded, cholesky_banded

from radario import lie
from radario.errors import OptimizationDivergedError, TimestampError
from radario.imu import (GRAVITY, TIME_TOLERANCE, ImuNoise, ImuStream, PreintegratedImu,
                         imu_residual_batch, preintegrate, stack_preintegrations)
from radario.state import BA, BG, DIM, PHI, POS, VEL, FrameState
from radario.velocity import VelocityMeasurement

log = logging.getLogger(__name__)

LOCK_INFORMATION = 1e12
COV_FLOOR = 1e-12


@dataclass(frozen=True)
class RobustParams:
    huber_delta: float = 1.0
    max_iterations: int = 20
    tolerance: float = 1e-8
    initial_lambda: float = 1e-4
    cost_tolerance: float = 1e-5

    def __post_init__(self):
        if not self.huber_delta > 0:
            raise ValueError("huber_delta must be positive")


@dataclass
class Extrinsic:
    """Radar pose in the body (IMU) frame."""

    R: np.ndarray = field(default_factory=lambda: np.eye(3))  # body <- radar
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))
    lever_arm: bool = False


@dataclass
class ImuFactor:
    t_i: float
    t_j: float
    preint: PreintegratedImu
    gyro_walk: float = ImuNoise.gyro_walk
    accel_walk: float = ImuNoise.accel_walk

    def sqrt_information(self) -> np.ndarray:
        """Upper-triangular U with U^T U = inverse covariance of the 15-dim residual."""
        cov = np.zeros((15, 15))
        cov[:9, :9] = self.preint.cov + COV_FLOOR * np.eye(9)
        dt = self.preint.dt
        cov[9:12, 9:12] = np.eye(3) * max(self.gyro_walk**2 * dt, COV_FLOOR)
        cov[12:15, 12:15] = np.eye(3) * max(self.accel_walk**2 * dt, COV_FLOOR)
        return np.linalg.cholesky(np.linalg.inv(cov)).T


@dataclass
class VelocityFactor:
    meas: VelocityMeasurement
    gyro: np.ndarray = field(default_factory=lambda: np.zeros(3))  # raw angular rate for lever-arm use
    cov_floor: float = 0.0  # m/s, added isotropically to the measurement covariance

    @property
    def covariance(self) -> np.ndarray:
        return self.meas.cov + self.cov_floor**2 * np.eye(3)

    @property
    def timestamp(self) -> float:
        return self.meas.timestamp


@dataclass
class PosePrior:
    timestamp: float
    R: np.ndarray
    p: np.ndarray
    information: float = LOCK_INFORMATION


@dataclass
class BiasPrior:
    timestamp: float
    bg: np.ndarray
    ba: np.ndarray
    sigma_g: float = 0.01
    sigma_a: float = 0.1


@dataclass
class Window:
    states: list[FrameState] = field(default_factory=list)
    imu_factors: list[ImuFactor] = field(default_factory=list)
    velocity_factors: list[VelocityFactor] = field(default_factory=list)
    prior: PosePrior | None = None
    bias_prior: BiasPrior | None = None
    extrinsic: Extrinsic = field(default_factory=Extrinsic)
    gravity: np.ndarray = field(default_factory=lambda: GRAVITY.copy())
    planar: bool = False
    removed: list[FrameState] = field(default_factory=list, repr=False)

    @property
    def span(self) -> float:
        return self.states[-1].timestamp - self.states[0].timestamp if self.states else 0.0

    def index_of(self, t: float) -> int:
        for k, s in enumerate(self.states):
            if abs(s.timestamp - t) <= TIME_TOLERANCE:
                return k
        raise TimestampError(f"no state at t={t}")


# --- individual residuals ----------------------------------------------------


def huber_weight(r_norm: float, delta: float) -> float:
    """IRLS weight of the Huber loss: 1 inside delta, delta / r outside."""
    return 1.0 if r_norm <= delta else delta / r_norm


def _huber_rho(s, delta):
    """Huber loss on the whitened norm s, scaled so rho(s) = s^2 inside delta."""
    return np.where(s <= delta, s * s, 2.0 * delta * s - delta * delta)


def _radar_velocity(R, v, bg, gyro, ext: Extrinsic):
    body = np.einsum("nji,nj->ni", R, v)
    if ext.lever_arm:
        body = body + np.cross(gyro - bg, ext.t)
    return body @ ext.R  # = ext.R^T body per row


def velocity_residual(state: FrameState, meas: VelocityMeasurement, extrinsic: Extrinsic = Extrinsic(),
                      gyro=None) -> np.ndarray:
    """Radar-frame velocity predicted by the state minus the measured one (unwhitened)."""
    if abs(state.timestamp - meas.timestamp) > TIME_TOLERANCE:
        raise TimestampError(f"state t={state.timestamp} vs measurement t={meas.timestamp}")
    gyro = np.zeros(3) if gyro is None else np.asarray(gyro, dtype=float)
    pred = _radar_velocity(state.R[None], state.v[None], state.bg[None], gyro[None], extrinsic)[0]
    return pred - meas.v


def _velocity_batch(R, v, bg, gyro, meas_v, ext: Extrinsic):
    r = _radar_velocity(R, v, bg, gyro, ext) - meas_v
    n = len(r)
    J = np.zeros((n, 3, DIM))
    RexT = ext.R.T
    J[:, :, PHI] = RexT @ lie.hat(np.einsum("nji,nj->ni", R, v))
    J[:, :, VEL] = RexT @ np.swapaxes(R, 1, 2)
    if ext.lever_arm:
        J[:, :, BG] = RexT @ lie.hat(ext.t)
    return r, J


# --- window assembly ---------------------------------------------------------


class _Problem:
    """Cached factor structure for one optimize call.

    The normal equations are accumulated directly into lower banded storage
    ``ab[d, c] = H[c + d, c]``; factors only couple states at most
    ``self.span`` apart, which keeps the band narrow.
    """

    def __init__(self, window: Window, robust: RobustParams):
        self.window = window
        self.robust = robust
        self.n = len(window.states)
        idx = {round(s.timestamp, 6): k for k, s in enumerate(window.states)}

        def find(t):
            key = round(t, 6)
            if key in idx:
                return idx[key]
            return window.index_of(t)

        imu = window.imu_factors
        self.imu_i = np.array([find(f.t_i) for f in imu], dtype=int)
        self.imu_j = np.array([find(f.t_j) for f in imu], dtype=int)
        self.pre = stack_preintegrations([f.preint for f in imu]) if imu else None
        self.imu_sqrt = np.stack([f.sqrt_information() for f in imu]) if imu else None

        vel = window.velocity_factors
        self.vel_k = np.array([find(f.timestamp) for f in vel], dtype=int)
        self.vel_meas = np.array([f.meas.v for f in vel]).reshape(-1, 3)
        self.vel_gyro = np.array([f.gyro for f in vel]).reshape(-1, 3)
        # whitening W with W^T W = Sigma^-1
        self.vel_sqrt = (np.stack([np.linalg.inv(np.linalg.cholesky(f.covariance)) for f in vel])
                         if vel else np.zeros((0, 3, 3)))

        self.prior_k = find(window.prior.timestamp) if window.prior is not None else None
        self.bias_k = find(window.bias_prior.timestamp) if window.bias_prior is not None else None

        N = self.n * DIM
        reach = int(np.max(np.abs(self.imu_j - self.imu_i))) if len(self.imu_i) else 0
        self.bandwidth = min((reach + 1) * DIM - 1, N - 1)
        self.size = N
        blk = np.arange(DIM)
        self.imu_cols = np.concatenate([self.imu_i[:, None] * DIM + blk, self.imu_j[:, None] * DIM + blk], axis=1)
        self.imu_band = self._band_index(self.imu_cols)
        self.vel_cols = self.vel_k[:, None] * DIM + blk
        self.vel_band = self._band_index(self.vel_cols)
        self.imu_J = None
        if len(self.imu_i):
            J = np.zeros((len(self.imu_i), 15, 2 * DIM))
            eye = np.eye(3)
            J[:, 9:12, DIM + 9:DIM + 12] = eye
            J[:, 9:12, 9:12] = -eye
            J[:, 12:15, DIM + 12:DIM + 15] = eye
            J[:, 12:15, 12:15] = -eye
            self.imu_J = J

    def _band_index(self, cols):
        """Flat banded-storage index of every (row, col) pair; -1 above the diagonal."""
        rows, cs = cols[:, :, None], cols[:, None, :]
        d = rows - cs
        return np.where(d >= 0, d * self.size + cs, -1)

    def _add(self, ab, g, band, cols, Jw, rw):
        Hb = np.swapaxes(Jw, 1, 2) @ Jw
        keep = band >= 0
        ab += np.bincount(band[keep], weights=Hb[keep], minlength=ab.size).reshape(ab.shape)
        g += np.bincount(cols.ravel(), weights=np.einsum("nra,nr->na", Jw, rw).ravel(), minlength=g.size)

    def _add_block(self, ab, g, k, Jw, rw):
        """Dense single-state block (priors)."""
        Hb = Jw.T @ Jw
        c0 = k * DIM
        for d in range(DIM):
            ab[d, c0:c0 + DIM - d] += np.diagonal(Hb, -d)
        g[c0:c0 + DIM] += Jw.T @ rw

    def evaluate(self, x, linearize=True, robust=True):
        """Return (cost, ab, g) at stacked arrays ``x = (R, p, v, bg, ba)``.

        ``ab`` is the lower banded Gauss-Newton matrix; ab and g are None when
        not linearizing.
        """
        R, p, v, bg, ba = x
        ab = np.zeros((self.bandwidth + 1, self.size)) if linearize else None
        g = np.zeros(self.size) if linearize else None
        cost = 0.0
        w = self.window

        if len(self.imu_i):
            i, j = self.imu_i, self.imu_j
            out = imu_residual_batch(R[i], p[i], v[i], bg[i], ba[i], R[j], p[j], v[j], self.pre, w.gravity,
                                     jacobians=linearize)
            r9 = out[0] if linearize else out
            r = np.concatenate([r9, bg[j] - bg[i], ba[j] - ba[i]], axis=1)
            rw = np.einsum("nab,nb->na", self.imu_sqrt, r)
            cost += 0.5 * float(np.sum(rw * rw))
            if linearize:
                J = self.imu_J.copy()
                J[:, :9, :DIM] = out[1]
                J[:, :9, DIM:] = out[2]
                self._add(ab, g, self.imu_band, self.imu_cols, self.imu_sqrt @ J, rw)

        if len(self.vel_k):
            k = self.vel_k
            r, J = _velocity_batch(R[k], v[k], bg[k], self.vel_gyro, self.vel_meas, w.extrinsic)
            rw = np.einsum("nab,nb->na", self.vel_sqrt, r)
            s = np.linalg.norm(rw, axis=1)
            if robust:
                cost += 0.5 * float(np.sum(_huber_rho(s, self.robust.huber_delta)))
                weight = np.where(s <= self.robust.huber_delta, 1.0, self.robust.huber_delta / np.maximum(s, 1e-300))
            else:
                cost += 0.5 * float(np.sum(s * s))
                weight = np.ones_like(s)
            if linearize:
                sw = np.sqrt(weight)[:, None]
                Jw = (self.vel_sqrt @ J) * sw[:, :, None]
                self._add(ab, g, self.vel_band, self.vel_cols, Jw, rw * sw)

        if self.prior_k is not None:
            pr = w.prior
            kk = self.prior_k
            e_rot = lie.log(pr.R.T @ R[kk])
            r = np.concatenate([e_rot, p[kk] - pr.p])
            cost += 0.5 * pr.information * float(r @ r)
            if linearize:
                J = np.zeros((6, DIM))
                J[0:3, PHI] = lie.right_jacobian_inv(e_rot)
                J[3:6, POS] = np.eye(3)
                sq = np.sqrt(pr.information)
                self._add_block(ab, g, kk, sq * J, sq * r)

        if self.bias_k is not None:
            bp = w.bias_prior
            kk = self.bias_k
            scale = np.array([1 / bp.sigma_g] * 3 + [1 / bp.sigma_a] * 3)
            r = scale * np.concatenate([bg[kk] - bp.bg, ba[kk] - bp.ba])
            cost += 0.5 * float(r @ r)
            if linearize:
                J = np.zeros((6, DIM))
                J[:, 9:15] = np.diag(scale)
                self._add_block(ab, g, kk, J, r)

        return cost, ab, g


def _stack(states):
    return (np.stack([s.R for s in states]), np.stack([s.p for s in states]), np.stack([s.v for s in states]),
            np.stack([s.bg for s in states]), np.stack([s.ba for s in states]))


def _retract(x, dx):
    R, p, v, bg, ba = x
    d = dx.reshape(-1, DIM)
    return (R @ lie.exp(d[:, PHI]), p + d[:, POS], v + d[:, VEL], bg + d[:, BG], ba + d[:, BA])


def _unstack(x, states):
    R, p, v, bg, ba = x
    return [FrameState(s.timestamp, R[k], p[k], v[k], bg[k], ba[k]) for k, s in enumerate(states)]


def _band_to_dense(ab):
    n = ab.shape[1]
    H = np.zeros((n, n))
    for d in range(ab.shape[0]):
        H[np.arange(d, n), np.arange(n - d)] = ab[d, : n - d]
        H[np.arange(n - d), np.arange(d, n)] = ab[d, : n - d]
    return H


def window_hessian(window: Window, robust: RobustParams = RobustParams()) -> np.ndarray:
    """Gauss-Newton information matrix of the window at its current estimate."""
    _, ab, _ = _Problem(window, robust).evaluate(_stack(window.states))
    return _band_to_dense(ab)


def window_cost(window: Window, robust: RobustParams = RobustParams(), use_robust: bool = True) -> float:
    return _Problem(window, robust).evaluate(_stack(window.states), linearize=False, robust=use_robust)[0]


def optimize(window: Window, robust: RobustParams = RobustParams()) -> Window:
    """Levenberg-Marquardt over all window states, in place.

    Each iteration relinearizes (refreshing the Huber weights), then damps the
    normal equations by ``lambda * I``. Steps that do not lower the
    robust cost are rejected and the damping grows tenfold. Iteration stops on
    a small step, a negligible relative cost decrease or the iteration cap.
    """
    if len(window.states) < 2:
        raise ValueError("optimize needs at least two states")
    problem = _Problem(window, robust)
    x = _stack(window.states)
    lam = robust.initial_lambda
    cost, ab, g = problem.evaluate(x)
    if not np.isfinite(cost):
        raise OptimizationDivergedError("initial cost is not finite")

    for _ in range(robust.max_iterations):
        damped = ab.copy()
        damped[0] = ab[0] + lam
        try:
            dx = cho_solve_banded((cholesky_banded(damped, lower=True), True), -g)
        except (LinAlgError, ValueError):
            lam *= 10.0
            continue
        step_norm = float(np.linalg.norm(dx))
        trial = _retract(x, dx)
        new_cost = problem.evaluate(trial, linearize=False)[0]
        if not np.isfinite(new_cost):
            window.states = _unstack(x, window.states)
            raise OptimizationDivergedError("cost became non-finite")
        if new_cost <= cost:
            x = trial
            lam = max(lam / 10.0, 1e-12)
            small = cost - new_cost <= robust.cost_tolerance * max(cost, 1e-300)
            if step_norm < robust.tolerance or small:
                break
            cost, ab, g = problem.evaluate(x)
        else:
            lam *= 10.0
            if step_norm < robust.tolerance:
                break
    window.states = _unstack(x, window.states)
    return window


# --- window bookkeeping ------------------------------------------------------


def planar_project(window: Window) -> Window:
    """Planar mode: put the prior-locked pose (and its prior mean) at z = 0."""
    if not window.planar or window.prior is None:
        return window
    window.prior.p = window.prior.p.copy()
    window.prior.p[2] = 0.0
    k = window.index_of(window.prior.timestamp)
    window.states[k].p = window.states[k].p.copy()
    window.states[k].p[2] = 0.0
    return window


def marginalize(window: Window, horizon: float = 3.0) -> Window:
    """Drop states older than ``horizon`` before the newest one and lock the new oldest pose.

    The removed states are kept in ``window.removed`` until the next call.
    """
    window.removed = []
    if not window.states:
        return window
    newest = window.states[-1].timestamp
    keep = [s for s in window.states if newest - s.timestamp <= horizon + 1e-6]
    if len(keep) == len(window.states):
        return window
    window.removed = window.states[: len(window.states) - len(keep)]
    window.states = keep
    t0 = keep[0].timestamp - TIME_TOLERANCE
    window.imu_factors = [f for f in window.imu_factors if f.t_i >= t0]
    window.velocity_factors = [f for f in window.velocity_factors if f.timestamp >= t0]
    oldest = keep[0]
    window.prior = PosePrior(oldest.timestamp, oldest.R.copy(), oldest.p.copy())
    if window.bias_prior is not None:
        bp = window.bias_prior
        window.bias_prior = BiasPrior(oldest.timestamp, oldest.bg.copy(), oldest.ba.copy(), bp.sigma_g, bp.sigma_a)
    return planar_project(window)


def propagate(state: FrameState, preint: PreintegratedImu, g=GRAVITY) -> FrameState:
    """Predict the next state from a preintegration, using the state's biases."""
    dR, dv, dp = preint.corrected(state.bg, state.ba)
    dt = preint.dt
    return FrameState(
        state.timestamp + dt,
        lie.project_to_so3(state.R @ dR),
        state.p + state.v * dt + 0.5 * g * dt * dt + state.R @ dp,
        state.v + g * dt + state.R @ dv,
        state.bg, state.ba,
    )


class RadarInertialOdometry:
    """Online fixed-lag estimator feeding one radar frame at a time.

    ``velocity_floor`` (m/s) is added in quadrature to every velocity
    covariance; it stands in for slowly varying errors (angle quantization,
    scene geometry) that per-frame covariances do not capture.

    Each state's reported pose is its estimate when it leaves the window
    (or at :meth:`finish`).
    """

    def __init__(self, imu: ImuStream, noise: ImuNoise = ImuNoise(), robust: RobustParams = RobustParams(),
                 horizon: float = 3.0, planar: bool = False, extrinsic: Extrinsic | None = None,
                 bias_sigma: tuple[float, float] = (0.01, 0.1), velocity_floor: float = 0.0):
        self.imu = imu
        self.velocity_floor = velocity_floor
        self.noise = noise
        self.robust = robust
        self.horizon = horizon
        self.bias_sigma = bias_sigma
        self.window = Window(extrinsic=extrinsic or Extrinsic(), gravity=noise.g, planar=planar)
        self.output: list[FrameState] = []
        self.dropped = 0

    def add_frame(self, t: float, meas: VelocityMeasurement | None = None) -> FrameState:
        w = self.window
        gyro = self.imu.interpolate(t)[0]
        if not w.states:
            state = FrameState(t)
            if meas is not None:
                state.v = w.extrinsic.R @ meas.v
            w.states.append(state)
            w.prior = PosePrior(t, state.R.copy(), state.p.copy())
            w.bias_prior = BiasPrior(t, state.bg.copy(), state.ba.copy(), *self.bias_sigma)
        else:
            prev = w.states[-1]
            pre = preintegrate(self.imu.between(prev.timestamp, t), (prev.bg, prev.ba), self.noise)
            w.states.append(propagate(prev, pre, w.gravity))
            w.imu_factors.append(ImuFactor(prev.timestamp, t, pre, self.noise.gyro_walk, self.noise.accel_walk))
        if meas is not None:
            w.velocity_factors.append(VelocityFactor(meas, gyro, self.velocity_floor))
        if len(w.states) >= 2:
            optimize(w, self.robust)
        marginalize(w, self.horizon)
        self.output.extend(s.copy() for s in w.removed)
        return w.states[-1]

    def finish(self) -> list[FrameState]:
        """All reported states, including those still in the window."""
        return self.output + [s.copy() for s in self.window.states]
