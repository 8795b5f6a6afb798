"""End-to-end glue: simulated datasets, DSP velocity extraction and odometry runs."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from radario.config import Config
from radario.detect import RadarPoint, build_pointcloud, write_pointcloud_csv
from radario.errors import DegenerateGeometryError, EvaluationError, InsufficientPointsError
from radario.evaluation import Trajectory, write_tum
from radario.graph import RadarInertialOdometry
from radario.imu import ImuStream, write_imu_csv
from radario.sim import Truth, gen_imu, gen_iq_frame, gen_prediction_feed, gen_scene, gen_trajectory
from radario.spectrum import RawFrame, append_frame, dc_remove, process_frame, write_header
from radario.velocity import (FIXED_DIRECT_COVARIANCE, MODE_DIRECT, MODE_DOPPLER, VelocityMeasurement, iter_feed,
                              pc_velocity, project_velocity, write_feed)

log = logging.getLogger(__name__)


@dataclass
class SimData:
    truth: Truth
    imu: ImuStream
    scene: tuple[np.ndarray, np.ndarray]
    frame_times: np.ndarray


def simulate(cfg: Config, seed: int | None = None) -> SimData:
    seed = cfg.seed if seed is None else seed
    truth = gen_trajectory(cfg.trajectory_spec(), seed)
    imu = gen_imu(truth, cfg.imu_noise(), cfg.imu_rate, seed + 1)
    scene = gen_scene(truth, cfg.scatterer_density, seed=seed + 2)
    arrays = (np.array([s.position for s in scene]).reshape(-1, 3), np.array([s.reflectivity for s in scene]))
    return SimData(truth, imu, arrays, truth.frame_times(cfg.frame_rate))


def iter_sim_frames(sim: SimData, cfg: Config, seed: int | None = None) -> Iterator[RawFrame]:
    rng = np.random.default_rng((cfg.seed if seed is None else seed) + 3)
    chirp = cfg.chirp()
    sigma = cfg.noise_floor()
    truth = sim.truth
    for k in truth.index(sim.frame_times):
        yield gen_iq_frame(sim.scene, (truth.R[k], truth.p[k]), truth.v[k], chirp, sigma, rng, float(truth.t[k]))


def frame_pointcloud(frame: RawFrame, cfg: Config) -> list[RadarPoint]:
    chirp = cfg.chirp()
    cube = process_frame(dc_remove(frame), chirp, cfg.padding(), cfg.windows(), lazy=True)
    return build_pointcloud(cube, chirp, cfg.cfar(), cfg.fov(), cfg.peak_grouping)


def dsp_measurements(frames: Iterable[RawFrame], cfg: Config, clouds: list | None = None
                     ) -> Iterator[tuple[float, VelocityMeasurement | None]]:
    """Point-cloud velocity per frame; frames whose fit fails yield ``None``."""
    for k, frame in enumerate(frames):
        points = frame_pointcloud(frame, cfg)
        if clouds is not None:
            clouds.append((frame.timestamp, points))
        try:
            meas = pc_velocity(points, cfg.consensus(cfg.seed + k), frame.timestamp)
        except (InsufficientPointsError, DegenerateGeometryError) as exc:
            log.info("frame t=%.3f: no velocity (%s)", frame.timestamp, exc)
            meas = None
        yield frame.timestamp, meas


def feed_measurements(path, cfg: Config) -> Iterator[tuple[float, VelocityMeasurement | None]]:
    grid = None
    for rec in iter_feed(path):
        if rec.doppler is not None and grid is None:
            grid = cfg.grid()
            if grid.shape != rec.doppler.doppler.shape:
                raise ValueError(f"feed image {rec.doppler.doppler.shape} does not match grid {grid.shape}")
        try:
            yield rec.timestamp, rec.to_measurement(grid)
        except DegenerateGeometryError as exc:
            log.info("record t=%.3f dropped: %s", rec.timestamp, exc)
            yield rec.timestamp, None


def run_odometry(imu: ImuStream, measurements: Iterable[tuple[float, VelocityMeasurement | None]],
                 cfg: Config) -> Trajectory:
    rio = RadarInertialOdometry(imu, cfg.imu_noise(), cfg.robust(), cfg.horizon, cfg.planar, cfg.extrinsic(),
                                (cfg.bias_sigma_gyro, cfg.bias_sigma_accel), cfg.velocity_cov_floor)
    for t, meas in measurements:
        if t > imu.t[-1] + 1e-9:
            break
        rio.add_frame(t, meas)
    return Trajectory.from_states(rio.finish())


# --- velocity CSV -----------------------------------------------------------

VELOCITY_HEADER = ["timestamp", "vx", "vy", "vz"] + [f"c{i}{j}" for i in range(3) for j in range(3)] + ["source"]


def write_velocity_csv(path, measurements: Iterable[tuple[float, VelocityMeasurement | None]]) -> int:
    n = 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(VELOCITY_HEADER)
        for t, m in measurements:
            if m is None:
                continue
            w.writerow([repr(float(t)), *(repr(float(x)) for x in m.v), *(repr(float(x)) for x in m.cov.ravel()),
                        m.source])
            n += 1
    return n


def read_velocity_csv(path) -> list[tuple[float, VelocityMeasurement]]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            t = float(row["timestamp"])
            v = [float(row[k]) for k in ("vx", "vy", "vz")]
            cov = np.array([float(row[f"c{i}{j}"]) for i in range(3) for j in range(3)]).reshape(3, 3)
            out.append((t, VelocityMeasurement(t, v, cov, row.get("source") or "point-cloud")))
    return out


# --- dataset files ----------------------------------------------------------


def write_dataset(cfg: Config, out_dir, seed: int | None = None, with_iq: bool = True) -> dict[str, Path]:
    """Write the simulated IQ frames, IMU stream, prediction feeds and truth into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seed = cfg.seed if seed is None else seed
    sim = simulate(cfg, seed)
    truth = sim.truth
    paths = {
        "imu": out / "imu.csv",
        "truth": out / "truth.tum",
        "truth_velocity": out / "truth_velocity.csv",
        "feed_doppler": out / "feed_doppler.rpv",
        "feed_velocity": out / "feed_velocity.rpv",
    }
    write_imu_csv(paths["imu"], sim.imu)
    write_tum(paths["truth"], truth.trajectory(sim.frame_times))
    idx = truth.index(sim.frame_times)
    with open(paths["truth_velocity"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["timestamp", "vx", "vy", "vz"])
        for t, v in zip(sim.frame_times, truth.body_velocity(idx)):
            w.writerow([repr(float(t)), *(repr(float(x)) for x in v)])
    grid = cfg.grid()
    write_feed(paths["feed_doppler"], MODE_DOPPLER,
               gen_prediction_feed(truth, grid, cfg.feed_noise(), seed + 4, cfg.frame_rate, mode=1), grid.shape)
    write_feed(paths["feed_velocity"], MODE_DIRECT,
               gen_prediction_feed(truth, grid, cfg.feed_noise(), seed + 5, cfg.frame_rate, mode=0))
    if with_iq:
        paths["iq"] = out / "frames.riq"
        chirp = cfg.chirp()
        with open(paths["iq"], "wb") as fh:
            write_header(fh, chirp)
            for frame in iter_sim_frames(sim, cfg, seed):
                append_frame(fh, chirp, frame)
    return paths


def read_truth_velocity(path) -> tuple[np.ndarray, np.ndarray]:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return data[:, 0], data[:, 1:4]


def write_clouds(path, clouds) -> None:
    write_pointcloud_csv(path, clouds)


# --- calibration against truth ----------------------------------------------


def _truth_lookup(truth_t: np.ndarray, t: float) -> int | None:
    k = int(np.argmin(np.abs(truth_t - t)))
    return k if abs(truth_t[k] - t) <= 1e-3 else None


def calibration_samples(path, truth_path, cfg: Config):
    """(estimate, truth, log-variance) arrays for any velocity or Doppler source.

    RPV feeds are scored per element (velocity axes, or Doppler bins against the
    projected true velocity); velocity CSVs use the covariance diagonal.
    """
    truth_t, truth_v = read_truth_velocity(truth_path)
    est, gt, lv = [], [], []
    if str(path).endswith(".csv"):
        for t, m in read_velocity_csv(path):
            k = _truth_lookup(truth_t, t)
            if k is not None:
                est.append(m.v)
                gt.append(truth_v[k])
                lv.append(np.log(np.diag(m.cov)))
    else:
        grid = None
        for rec in iter_feed(path):
            k = _truth_lookup(truth_t, rec.timestamp)
            if k is None:
                continue
            if rec.doppler is not None:
                grid = grid or cfg.grid()
                est.append(rec.doppler.doppler.ravel())
                gt.append(project_velocity(truth_v[k], grid).ravel())
                lv.append(rec.doppler.log_variance.ravel())
            else:
                logvar = rec.logvar if rec.has_logvar else np.full(3, np.log(FIXED_DIRECT_COVARIANCE))
                est.append(rec.v)
                gt.append(truth_v[k])
                lv.append(logvar)
    if not est:
        raise EvaluationError("no source samples matched the truth timestamps")
    return np.array(est), np.array(gt), np.array(lv)
