"""Body-frame ego-velocity measurements from Doppler observations.

Sign convention: a static scatterer in unit direction ``u`` seen from a sensor
moving with velocity ``v`` has Doppler ``d = -v . u`` (positive = receding).
All three estimators below invert that model.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Iterator, Sequence

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from radario.detect import RadarPoint
from radario.errors import DegenerateGeometryError, FormatError, InsufficientPointsError

log = logging.getLogger(__name__)

FIXED_DIRECT_COVARIANCE = 0.01
DEGENERATE_EIG_RATIO = 1e-8
DOPPLER_MARGIN = 1.25
SOURCES = ("point-cloud", "doppler-wls", "direct")


@dataclass
class DirectionGrid:
    elevation: np.ndarray  # (O_E,) rad, increasing
    azimuth: np.ndarray  # (O_A,) rad, increasing
    unit: np.ndarray  # (O_E, O_A, 3)

    @property
    def shape(self) -> tuple[int, int]:
        return self.unit.shape[:2]

    def directions(self) -> np.ndarray:
        return self.unit.reshape(-1, 3)


@dataclass
class DopplerImage:
    doppler: np.ndarray  # (O_E, O_A) m/s
    log_variance: np.ndarray  # (O_E, O_A)


@dataclass
class VelocityMeasurement:
    timestamp: float
    v: np.ndarray
    cov: np.ndarray
    source: str = "direct"
    inliers: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.v = np.asarray(self.v, dtype=float).reshape(3)
        self.cov = np.asarray(self.cov, dtype=float).reshape(3, 3)
        self.cov = 0.5 * (self.cov + self.cov.T)
        if self.source not in SOURCES:
            raise ValueError(f"unknown source {self.source!r}")


@dataclass(frozen=True)
class ConsensusParams:
    """Sample-consensus settings for point-cloud velocity.

    ``min_sigma`` floors the residual standard deviation so that a perfect fit
    still yields a positive-definite covariance.
    """

    inlier_threshold: float = 0.1
    iterations: int = 100
    sample_size: int = 3
    seed: int | None = 0
    enabled: bool = True
    min_sigma: float = 0.01


def unit_direction(elevation, azimuth) -> np.ndarray:
    """x forward, y left, z up."""
    ce = np.cos(elevation)
    return np.stack([ce * np.cos(azimuth), ce * np.sin(azimuth), np.sin(elevation) * np.ones_like(azimuth)], axis=-1)


def make_grid(num_elevation: int, num_azimuth: int,
              fov: tuple[float, float] = (np.deg2rad(60.0), np.deg2rad(30.0))) -> DirectionGrid:
    """Bin centres uniform in angle over [-fov, +fov] per axis, endpoints included.

    A single bin on an axis sits at 0.
    """
    if num_elevation < 1 or num_azimuth < 1:
        raise ValueError("grid dimensions must be >= 1")
    az_fov, el_fov = fov

    def centres(n, half):
        return np.zeros(1) if n == 1 else np.linspace(-half, half, n)

    el = centres(num_elevation, el_fov)
    az = centres(num_azimuth, az_fov)
    E, A = np.meshgrid(el, az, indexing="ij")
    return DirectionGrid(el, az, unit_direction(E, A))


def project_velocity(v, grid: DirectionGrid) -> np.ndarray:
    """Doppler image of a static scene: -v . u per bin."""
    return -(grid.unit @ np.asarray(v, dtype=float))


def _solve_information(info: np.ndarray, rhs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    eig = np.linalg.eigvalsh(info)
    if eig[0] < DEGENERATE_EIG_RATIO * eig[-1] or eig[-1] <= 0:
        raise DegenerateGeometryError(f"information eigenvalues {eig} fail the {DEGENERATE_EIG_RATIO:g} ratio gate")
    factor = cho_factor(info)
    v = cho_solve(factor, rhs)
    cov = cho_solve(factor, np.eye(3))
    return v, 0.5 * (cov + cov.T)


def wls_from_directions(directions: np.ndarray, doppler: np.ndarray, weights: np.ndarray):
    """Weighted least squares for d = -u . v; returns (v, inverse information)."""
    D = -np.asarray(directions, dtype=float)
    w = np.asarray(weights, dtype=float)
    info = D.T @ (w[:, None] * D)
    return _solve_information(info, D.T @ (w * np.asarray(doppler, dtype=float)))


def wls_velocity(img: DopplerImage, grid: DirectionGrid, timestamp: float = 0.0) -> VelocityMeasurement:
    """Velocity and covariance from a Doppler image with per-bin log-variance."""
    if img.doppler.shape != grid.shape or img.log_variance.shape != grid.shape:
        raise ValueError(f"image shape {img.doppler.shape} does not match grid {grid.shape}")
    w = np.exp(-img.log_variance.ravel())
    v, cov = wls_from_directions(grid.directions(), img.doppler.ravel(), w)
    return VelocityMeasurement(timestamp, v, cov, "doppler-wls")


def _points_to_arrays(points: Sequence[RadarPoint]) -> tuple[np.ndarray, np.ndarray]:
    if not len(points):
        return np.zeros((0, 3)), np.zeros(0)
    pos = np.array([p.position for p in points], dtype=float)
    dop = np.array([p.doppler for p in points], dtype=float)
    norm = np.linalg.norm(pos, axis=1)
    ok = norm > 0
    return pos[ok] / norm[ok, None], dop[ok]


def pc_velocity(points: Sequence[RadarPoint], robust: ConsensusParams = ConsensusParams(),
                timestamp: float = 0.0) -> VelocityMeasurement:
    """Robust ego-velocity from a point cloud of static scatterers.

    A sample-consensus loop picks the largest set of points whose Doppler
    residual is below ``inlier_threshold``; the final estimate is a least-squares
    fit on that set with covariance ``sigma^2 (A^T A)^-1``.
    """
    u, d = _points_to_arrays(points)
    return _consensus_fit(u, d, robust, timestamp)


def _consensus_fit(u, d, robust: ConsensusParams, timestamp: float) -> VelocityMeasurement:
    n = len(d)
    k = robust.sample_size
    if n < max(3, k):
        raise InsufficientPointsError(f"{n} points, need at least {max(3, k)}")
    A = -u
    inliers = np.ones(n, dtype=bool)

    if robust.enabled:
        rng = np.random.default_rng(robust.seed)
        # all minimal samples at once: k distinct indices per hypothesis
        idx = np.argsort(rng.random((robust.iterations, n)), axis=1)[:, :k]
        Ak, dk = A[idx], d[idx]
        ok = np.linalg.svd(Ak, compute_uv=False)[:, -1] > 1e-6
        best = inliers
        if np.any(ok):
            Ak, dk = Ak[ok], dk[ok]
            AtA = np.swapaxes(Ak, 1, 2) @ Ak
            v = np.linalg.solve(AtA, np.einsum("hki,hk->hi", Ak, dk)[..., None])[..., 0]
            res = np.abs(v @ A.T - d)
            mask = res < robust.inlier_threshold
            count = mask.sum(axis=1)
            err = np.sum(np.where(mask, res**2, 0.0), axis=1)
            # most inliers, then smallest inlier error, then earliest hypothesis
            order = np.lexsort((np.arange(len(count)), err, -count))
            best = mask[order[0]]
        else:
            best = np.zeros(n, dtype=bool)
        inliers = best
        if inliers.sum() < 3:
            raise InsufficientPointsError(f"only {int(inliers.sum())} inliers")

    Ai, di = A[inliers], d[inliers]
    v, inv_info = wls_from_directions(-Ai, di, np.ones(len(di)))
    dof = max(len(di) - 3, 1)
    sigma2 = max(float(np.sum((Ai @ v - di) ** 2)) / dof, robust.min_sigma**2)
    return VelocityMeasurement(timestamp, v, sigma2 * inv_info, "point-cloud", inliers=inliers)


def direct_velocity(v, logvar=None, timestamp: float = 0.0) -> VelocityMeasurement:
    """Wrap a predicted velocity; without a log-variance the covariance is diag(0.01)."""
    v = np.asarray(v, dtype=float)
    if v.shape != (3,) or not np.all(np.isfinite(v)):
        raise ValueError("velocity must be a finite 3-vector")
    if logvar is None:
        cov = np.eye(3) * FIXED_DIRECT_COVARIANCE
    else:
        lv = np.asarray(logvar, dtype=float)
        if lv.shape != (3,) or not np.all(np.isfinite(lv)):
            raise ValueError("log-variance must be a finite 3-vector")
        cov = np.diag(np.exp(lv))
    return VelocityMeasurement(timestamp, v, cov, "direct")


# --- RPV1 prediction feed -------------------------------------------------

RPV_MAGIC = b"RPV1"
MODE_DIRECT = 0
MODE_DOPPLER = 1


@dataclass
class FeedRecord:
    timestamp: float
    v: np.ndarray | None = None
    logvar: np.ndarray | None = None
    has_logvar: bool = True
    doppler: DopplerImage | None = None

    def to_measurement(self, grid: DirectionGrid | None = None) -> VelocityMeasurement:
        if self.doppler is not None:
            if grid is None:
                raise ValueError("a Doppler-image record needs a direction grid")
            return wls_velocity(self.doppler, grid, self.timestamp)
        return direct_velocity(self.v, self.logvar if self.has_logvar else None, self.timestamp)


class FeedWriter:
    def __init__(self, fh: BinaryIO, mode: int, shape: tuple[int, int] | None = None):
        self.fh, self.mode, self.shape = fh, mode, shape
        fh.write(RPV_MAGIC + struct.pack("<B", mode))
        if mode == MODE_DOPPLER:
            if shape is None:
                raise ValueError("Doppler feeds need the (O_E, O_A) shape")
            fh.write(struct.pack("<II", *shape))
        elif mode != MODE_DIRECT:
            raise ValueError(f"unknown feed mode {mode}")

    def write(self, rec: FeedRecord) -> None:
        self.fh.write(struct.pack("<d", rec.timestamp))
        if self.mode == MODE_DIRECT:
            lv = rec.logvar if rec.logvar is not None else np.zeros(3)
            self.fh.write(np.asarray(rec.v, dtype="<f4").tobytes())
            self.fh.write(np.asarray(lv, dtype="<f4").tobytes())
            self.fh.write(struct.pack("<B", 1 if rec.has_logvar and rec.logvar is not None else 0))
        else:
            if rec.doppler.doppler.shape != tuple(self.shape):
                raise ValueError("Doppler image shape does not match the feed header")
            self.fh.write(np.asarray(rec.doppler.doppler, dtype="<f4").tobytes())
            self.fh.write(np.asarray(rec.doppler.log_variance, dtype="<f4").tobytes())


def write_feed(path: str | Path, mode: int, records, shape: tuple[int, int] | None = None) -> None:
    with open(path, "wb") as fh:
        writer = FeedWriter(fh, mode, shape)
        for rec in records:
            writer.write(rec)


def read_feed_header(fh: BinaryIO) -> tuple[int, tuple[int, int] | None]:
    head = fh.read(5)
    if len(head) != 5 or head[:4] != RPV_MAGIC:
        raise FormatError(f"bad feed magic {head[:4]!r}")
    mode = head[4]
    if mode == MODE_DOPPLER:
        raw = fh.read(8)
        if len(raw) != 8:
            raise FormatError("truncated feed header")
        return mode, struct.unpack("<II", raw)
    if mode != MODE_DIRECT:
        raise FormatError(f"unknown feed mode {mode}")
    return mode, None


def iter_feed(path: str | Path) -> Iterator[FeedRecord]:
    with open(path, "rb") as fh:
        mode, shape = read_feed_header(fh)
        size = 8 + (25 if mode == MODE_DIRECT else 8 * shape[0] * shape[1])
        while True:
            chunk = fh.read(size)
            if not chunk:
                return
            if len(chunk) != size:
                raise FormatError("truncated feed record")
            (t,) = struct.unpack_from("<d", chunk)
            if mode == MODE_DIRECT:
                vals = np.frombuffer(chunk, dtype="<f4", count=6, offset=8).astype(float)
                yield FeedRecord(t, v=vals[:3], logvar=vals[3:], has_logvar=bool(chunk[32]))
            else:
                n = shape[0] * shape[1]
                vals = np.frombuffer(chunk, dtype="<f4", count=2 * n, offset=8).astype(float)
                img = DopplerImage(vals[:n].reshape(shape), vals[n:].reshape(shape))
                yield FeedRecord(t, doppler=img)


def feed_info(path: str | Path) -> tuple[int, tuple[int, int] | None]:
    with open(path, "rb") as fh:
        return read_feed_header(fh)
