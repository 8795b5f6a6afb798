"""Flat ``key = value`` configuration shared by the CLI and the pipeline helpers."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from radario.detect import CfarParams
from radario.errors import ConfigError
from radario.graph import Extrinsic, RobustParams
from radario.imu import ImuNoise
from radario.sim import FeedNoise, TrajectorySpec
from radario.spectrum import AngularPadding, ChirpConfig
from radario.velocity import ConsensusParams, DirectionGrid, make_grid


@dataclass
class Config:
    # chirp / frame
    num_chirps: int = 64
    num_tx: int = 3
    num_rx: int = 4
    num_samples: int = 128
    max_range: float = 11.2
    max_doppler: float = 1.2
    carrier_wavelength: float = 3e8 / 77e9
    antenna_spacing: float = 0.5
    frame_rate: float = 20.0
    # spectral processing
    pad_elevation: int = 32
    pad_azimuth: int = 64
    window: str = ""  # comma list of range,doppler,angle
    mag_floor: float = 1e-12
    # detection
    cfar_train_range: int = 8
    cfar_train_doppler: int = 4
    cfar_guard_range: int = 4
    cfar_guard_doppler: int = 2
    cfar_alpha: float = 8.0
    fov_azimuth_deg: float = 60.0
    fov_elevation_deg: float = 30.0
    peak_grouping: bool = True
    # point-cloud velocity
    inlier_threshold: float = 0.1
    consensus_iterations: int = 100
    min_sigma: float = 0.01
    # Doppler-image grid
    grid_elevation: int = 8
    grid_azimuth: int = 32
    grid_fov_azimuth_deg: float = 60.0
    grid_fov_elevation_deg: float = 30.0
    # IMU
    imu_rate: float = 100.0
    gyro_noise: float = 1.2e-4
    accel_noise: float = 1.2e-3
    gyro_walk: float = 1e-5
    accel_walk: float = 1e-4
    gravity: float = 9.81
    # fusion
    horizon: float = 3.0
    planar: bool = True
    huber_delta: float = 1.0
    max_iterations: int = 20
    tolerance: float = 1e-8
    cost_tolerance: float = 1e-5
    initial_lambda: float = 1e-4
    bias_sigma_gyro: float = 0.01
    bias_sigma_accel: float = 0.1
    lever_arm: bool = False
    velocity_cov_floor: float = 0.05
    extrinsic_t: str = "0 0 0"
    extrinsic_rpy_deg: str = "0 0 0"
    # calibration
    logvar_min: float = -10.0
    logvar_max: float = 4.0
    # simulation
    trajectory: str = "forward"
    duration: float = 60.0
    speed: float = 0.7
    yaw_rate: float = 0.2
    radius: float = 5.0
    trajectory_file: str = ""
    snr_db: float = 20.0
    scatterer_density: float = 0.3
    feed_sigma: float = 0.05
    feed_edge_gain: float = 2.0
    velocity_sigma: float = 0.05
    miscalibration: float = 1.0
    seed: int = 0

    # -- loading ----------------------------------------------------------

    @classmethod
    def load(cls, path: str | Path | None = None, overrides: dict | None = None) -> "Config":
        values: dict[str, str] = {}
        if path:
            values.update(parse_kv(Path(path).read_text()))
        if overrides:
            values.update({k: str(v) for k, v in overrides.items()})
        return cls.from_strings(values)

    @classmethod
    def from_strings(cls, values: dict[str, str]) -> "Config":
        known = {f.name: f for f in fields(cls)}
        kw = {}
        for key, raw in values.items():
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
            kw[key] = _convert(known[key].type, raw, key)
        return cls(**kw)

    def replace(self, **kw) -> "Config":
        return dataclasses.replace(self, **kw)

    # -- builders ---------------------------------------------------------

    def chirp(self) -> ChirpConfig:
        return ChirpConfig(
            num_chirps=self.num_chirps, num_tx=self.num_tx, num_rx=self.num_rx, num_samples=self.num_samples,
            range_resolution=self.max_range / self.num_samples,
            doppler_resolution=self.max_doppler / (self.num_chirps / 2),
            carrier_wavelength=self.carrier_wavelength, antenna_spacing=self.antenna_spacing,
            frame_rate=self.frame_rate,
        )

    def padding(self) -> AngularPadding:
        return AngularPadding(self.pad_elevation, self.pad_azimuth)

    def windows(self) -> tuple[str, ...]:
        return tuple(w.strip() for w in self.window.split(",") if w.strip())

    def cfar(self) -> CfarParams:
        return CfarParams((self.cfar_train_range, self.cfar_train_doppler),
                          (self.cfar_guard_range, self.cfar_guard_doppler), self.cfar_alpha)

    def fov(self) -> tuple[float, float]:
        return np.deg2rad(self.fov_azimuth_deg), np.deg2rad(self.fov_elevation_deg)

    def consensus(self, seed: int | None = None) -> ConsensusParams:
        return ConsensusParams(self.inlier_threshold, self.consensus_iterations, 3,
                               self.seed if seed is None else seed, True, self.min_sigma)

    def grid(self) -> DirectionGrid:
        return make_grid(self.grid_elevation, self.grid_azimuth,
                         (np.deg2rad(self.grid_fov_azimuth_deg), np.deg2rad(self.grid_fov_elevation_deg)))

    def imu_noise(self) -> ImuNoise:
        return ImuNoise(self.gyro_noise, self.accel_noise, self.gyro_walk, self.accel_walk, (0.0, 0.0, -self.gravity))

    def robust(self) -> RobustParams:
        return RobustParams(self.huber_delta, self.max_iterations, self.tolerance, self.initial_lambda,
                            self.cost_tolerance)

    def extrinsic(self) -> Extrinsic:
        from scipy.spatial.transform import Rotation

        rpy = np.deg2rad(_floats(self.extrinsic_rpy_deg, 3, "extrinsic_rpy_deg"))
        R = Rotation.from_euler("xyz", rpy).as_matrix()
        return Extrinsic(R, np.array(_floats(self.extrinsic_t, 3, "extrinsic_t")), self.lever_arm)

    def trajectory_spec(self) -> TrajectorySpec:
        return TrajectorySpec(self.trajectory, self.duration, self.speed, self.yaw_rate, self.radius,
                              self.frame_rate, path=self.trajectory_file or None)

    def feed_noise(self) -> FeedNoise:
        return FeedNoise(self.feed_sigma, self.feed_edge_gain, self.velocity_sigma, self.miscalibration)

    def noise_floor(self, amplitude: float = 1.0) -> float:
        """Per-sample noise std giving ``snr_db`` after range-Doppler integration in one channel."""
        return amplitude * np.sqrt(self.num_chirps * self.num_samples) / 10 ** (self.snr_db / 20)

    def to_text(self) -> str:
        return "".join(f"{f.name} = {_format(getattr(self, f.name))}\n" for f in fields(self))


def parse_kv(text: str) -> dict[str, str]:
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'key = value', got {line!r}")
        key, val = line.split("=", 1)
        out[key.strip()] = val.strip()
    return out


def _floats(text: str, n: int, key: str) -> list[float]:
    try:
        vals = [float(x) for x in text.replace(",", " ").split()]
    except ValueError as exc:
        raise ConfigError(f"{key}: {exc}") from None
    if len(vals) != n:
        raise ConfigError(f"{key} needs {n} numbers")
    return vals


def _convert(type_name, raw: str, key: str):
    name = type_name if isinstance(type_name, str) else type_name.__name__
    try:
        if name == "bool":
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if name == "int":
            return int(raw)
        if name == "float":
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"{key}: {exc}") from None


def _format(val) -> str:
    if isinstance(val, bool):
        return "true" if val else "false"
    return str(val)
