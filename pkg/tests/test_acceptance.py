"""Acceptance criteria, one test (or group) per criterion.

A pass/fail line per criterion is printed in the terminal summary by
conftest.py; measured values are attached with ``record_property``.
"""

import time

import numpy as np
import pytest

from oracles import dense_preintegration
from radario import lie
from radario.calibration import nll, z_stats
from radario.config import Config
from radario.detect import CfarParams, alpha_for_pfa, build_pointcloud, ca_cfar_2d
from radario.evaluation import Trajectory, ape_rmse, evaluate, rpe_rmse, umeyama_se3
from radario.graph import RadarInertialOdometry, marginalize, optimize
from radario.imu import ImuStream, imu_residual, imu_residual_jacobians, preintegrate
from radario.pipeline import dsp_measurements, iter_sim_frames, run_odometry, simulate
from radario.sim import FeedNoise, Scatterer, TrajectorySpec, gen_iq_frame, gen_prediction_feed, gen_trajectory
from radario.spectrum import dc_remove, process_frame
from radario.state import DIM, FrameState
from radario.velocity import DopplerImage, VelocityMeasurement, make_grid, project_velocity, wls_velocity


# --- 1 -----------------------------------------------------------------------------


@pytest.mark.criterion(1, "WLS round trip")
def test_c1_wls_round_trip(record_property):
    rng = np.random.default_rng(100)
    grid = Config().grid()
    start = time.perf_counter()
    worst = 0.0
    for _ in range(200):
        v = rng.normal(size=3)
        v *= rng.uniform(0, 1.2) / np.linalg.norm(v)
        img = DopplerImage(project_velocity(v, grid), np.full(grid.shape, rng.uniform(-6, 0)))
        worst = max(worst, float(np.abs(wls_velocity(img, grid).v - v).max()))
    elapsed = time.perf_counter() - start
    record_property("max_err", f"{worst:.1e}")
    record_property("seconds", f"{elapsed:.2f}")
    assert worst <= 1e-9
    assert elapsed < 5.0


# --- 2 -----------------------------------------------------------------------------


@pytest.mark.criterion(2, "WLS covariance consistency")
def test_c2_covariance_consistency(record_property):
    rng = np.random.default_rng(200)
    grid = Config().grid()
    v = np.array([0.6, -0.3, 0.1])
    lv = rng.uniform(-6, -2, grid.shape)
    clean = project_velocity(v, grid)
    sigma = np.exp(0.5 * lv)
    start = time.perf_counter()
    est = np.array([wls_velocity(DopplerImage(clean + sigma * rng.normal(size=grid.shape), lv), grid).v
                    for _ in range(2000)])
    elapsed = time.perf_counter() - start
    ratio = np.diag(np.cov(est.T)) / np.diag(wls_velocity(DopplerImage(clean, lv), grid).cov)
    record_property("ratios", " ".join(f"{r:.3f}" for r in ratio))
    record_property("seconds", f"{elapsed:.2f}")
    assert np.all((ratio >= 1 / 1.3) & (ratio <= 1.3))
    assert elapsed < 30.0


# --- 3 -----------------------------------------------------------------------------


def random_signals(rng):
    a_w, f_w, p_w = rng.uniform(0.1, 0.6, 3), rng.uniform(0.3, 3.0, 3), rng.uniform(0, 2 * np.pi, 3)
    a_a, f_a, p_a = rng.uniform(0.2, 2.0, 3), rng.uniform(0.3, 3.0, 3), rng.uniform(0, 2 * np.pi, 3)
    g = np.array([0.0, 0.0, 9.81])
    return (lambda t: a_w * np.sin(f_w * t + p_w)), (lambda t: a_a * np.sin(f_a * t + p_a) + g)


@pytest.mark.criterion(3, "Preintegration oracle and Jacobians")
def test_c3_preintegration_dense_oracle(record_property):
    rng = np.random.default_rng(300)
    worst = 0.0
    for _ in range(20):
        w_fn, a_fn = random_signals(rng)
        t0 = rng.uniform(0, 10)
        t1 = t0 + 0.5
        t = np.linspace(t0, t1, 51)  # 100 Hz
        pre = preintegrate((t, np.array([w_fn(s) for s in t]), np.array([a_fn(s) for s in t])))
        R, v, p = dense_preintegration(w_fn, a_fn, t0, t1, 5000)
        rel = max(np.linalg.norm(lie.log(R.T @ pre.dR)) / np.linalg.norm(lie.log(R)),
                  np.linalg.norm(pre.dv - v) / np.linalg.norm(v),
                  np.linalg.norm(pre.dp - p) / np.linalg.norm(p))
        worst = max(worst, rel)
    record_property("max_rel_err", f"{worst:.1e}")
    assert worst <= 1e-4


@pytest.mark.criterion(3, "Preintegration oracle and Jacobians")
def test_c3_residual_jacobians(record_property):
    rng = np.random.default_rng(301)
    worst = 0.0
    eps = 1e-6
    for _ in range(20):
        w_fn, a_fn = random_signals(rng)
        t = np.linspace(0.0, 0.05, 6)
        pre = preintegrate((t, np.array([w_fn(s) for s in t]), np.array([a_fn(s) for s in t])),
                           (0.01 * rng.normal(size=3), 0.05 * rng.normal(size=3)))
        si = FrameState(0.0, lie.exp(rng.normal(size=3)), rng.normal(size=3), rng.normal(size=3),
                        0.01 * rng.normal(size=3), 0.05 * rng.normal(size=3))
        sj = FrameState(0.05, lie.exp(rng.normal(size=3)), rng.normal(size=3), rng.normal(size=3))
        _, Ji, Jj = imu_residual_jacobians(si, sj, pre)
        for which, J in ((0, Ji), (1, Jj)):
            num = np.zeros_like(J)
            for k in range(DIM):
                d = np.zeros(DIM)
                d[k] = eps
                if which == 0:
                    num[:, k] = (imu_residual(si.retract(d), sj, pre) - imu_residual(si.retract(-d), sj, pre)) / (2 * eps)
                else:
                    num[:, k] = (imu_residual(si, sj.retract(d), pre) - imu_residual(si, sj.retract(-d), pre)) / (2 * eps)
            worst = max(worst, np.linalg.norm(J - num) / max(np.linalg.norm(num), 1.0))
    record_property("max_rel_jac_err", f"{worst:.1e}")
    assert worst <= 1e-4


# --- 4 -----------------------------------------------------------------------------


@pytest.mark.criterion(4, "CFAR false-alarm rate")
def test_c4_cfar_false_alarm(record_property):
    n_train = CfarParams().num_training_cells()
    params = CfarParams(threshold_scale=alpha_for_pfa(1e-3, n_train))
    hits = cells = 0
    for seed in range(20):
        rd = np.random.default_rng(400 + seed).exponential(size=(256, 64))
        hits += len(ca_cfar_2d(rd, params))
        cells += rd.size
    rate = hits / cells
    record_property("pfa", f"{rate:.2e}")
    assert 1e-4 <= rate <= 1e-2


# --- 5 -----------------------------------------------------------------------------


@pytest.mark.criterion(5, "DSP peak localization")
def test_c5_peak_localization(record_property):
    cfg = Config()
    ch = cfg.chirp()
    assert ch.max_doppler == pytest.approx(1.2) and ch.max_range == pytest.approx(11.2)
    az = np.deg2rad(20.0)
    u = np.array([np.cos(az), np.sin(az), 0.0])
    velocity = -0.4 * u  # sensor moving away: scatterer recedes at 0.4 m/s
    frame = gen_iq_frame([Scatterer(5.0 * u)], (np.eye(3), np.zeros(3)), velocity, ch, cfg.noise_floor(),
                         np.random.default_rng(500))
    cube = process_frame(dc_remove(frame), ch, cfg.padding(), cfg.windows(), lazy=True)
    pts = build_pointcloud(cube, ch, cfg.cfar(), cfg.fov(), cfg.peak_grouping)
    assert pts
    p = max(pts, key=lambda q: q.magnitude)
    r = np.linalg.norm(p.position)
    u_hat = p.position / r
    errors = {
        "range_bins": abs(r - 5.0) / ch.range_resolution,
        "doppler_bins": abs(p.doppler - 0.4) / ch.doppler_resolution,
        # spatial frequency psi = 2 pi d_lambda * direction cosine, bin width 2 pi / pad
        "azimuth_bins": abs(np.pi * (u_hat[1] - u[1])) / (2 * np.pi / cfg.pad_azimuth),
        "elevation_bins": abs(np.pi * u_hat[2]) / (2 * np.pi / cfg.pad_elevation),
    }
    for k, v in errors.items():
        record_property(k, f"{v:.3f}")
    assert all(v <= 0.5 for v in errors.values())


# --- 6 -----------------------------------------------------------------------------

_E2E = {}


def e2e_run(kind, source):
    key = (kind, source)
    if key not in _E2E:
        cfg = Config(trajectory=kind, duration=60.0, snr_db=20.0)
        start = time.perf_counter()
        sim = simulate(cfg)
        if source == "pc":
            meas = list(dsp_measurements(iter_sim_frames(sim, cfg), cfg))
        else:
            grid = cfg.grid()
            feed = gen_prediction_feed(sim.truth, grid, cfg.feed_noise(), cfg.seed + 4, cfg.frame_rate)
            meas = [(r.timestamp, r.to_measurement(grid)) for r in feed]
        traj = run_odometry(sim.imu, meas, cfg)
        report = evaluate(traj, sim.truth.trajectory(sim.frame_times), 10.0)
        _E2E[key] = (report, time.perf_counter() - start)
    return _E2E[key]


@pytest.mark.criterion(6, "End-to-end odometry")
@pytest.mark.parametrize("kind", ["forward", "lateral"])
@pytest.mark.parametrize("source", ["pc", "doppler"])
def test_c6_end_to_end(record_property, kind, source):
    report, elapsed = e2e_run(kind, source)
    record_property(f"{kind}_{source}_ape", f"{report.ape_rmse:.3f}")
    record_property(f"{kind}_{source}_rpe", f"{report.rpe_rmse:.3f}")
    assert report.ape_rmse < 0.3
    assert report.rpe_rmse < 0.15


@pytest.mark.criterion(6, "End-to-end odometry")
def test_c6_lateral_not_degraded_and_runtime(record_property):
    fwd, t_fwd = e2e_run("forward", "doppler")
    lat, t_lat = e2e_run("lateral", "doppler")
    ape_ratio = lat.ape_rmse / fwd.ape_rmse
    rpe_ratio = lat.rpe_rmse / fwd.rpe_rmse
    total = sum(e2e_run(k, s)[1] for k in ("forward", "lateral") for s in ("pc", "doppler"))
    record_property("doppler_lateral_over_forward_ape", f"{ape_ratio:.2f}")
    record_property("doppler_lateral_over_forward_rpe", f"{rpe_ratio:.2f}")
    record_property("seconds", f"{total:.0f}")
    assert ape_ratio <= 2.0 and rpe_ratio <= 2.0
    assert total < 180.0


# --- 7 -----------------------------------------------------------------------------


@pytest.mark.criterion(7, "Uncertainty calibration")
def test_c7_calibration(record_property):
    truth = gen_trajectory(TrajectorySpec(kind="lateral", duration=10.0), 700)
    grid = make_grid(8, 32)
    gt = np.concatenate([project_velocity(v, grid).ravel()
                         for v in truth.body_velocity(truth.index(truth.frame_times(20.0)))])

    def scored(scale):
        feed = gen_prediction_feed(truth, grid, FeedNoise(miscalibration=scale), seed=701)
        est = np.concatenate([r.doppler.doppler.ravel() for r in feed])
        lv = np.concatenate([r.doppler.log_variance.ravel() for r in feed])
        return est, lv

    est, lv = scored(1.0)
    coverage = z_stats(est - gt, np.exp(0.5 * lv)).within_1
    values = {}
    for scale in (0.5, 1.0, 2.0):
        e, lv_s = scored(scale)
        values[scale] = nll(e, gt, lv_s)
    record_property("coverage_1sigma", f"{coverage:.4f}")
    record_property("nll", " ".join(f"{s}:{v:.4f}" for s, v in values.items()))
    assert 0.66 <= coverage <= 0.70
    assert values[1.0] < values[0.5] and values[1.0] < values[2.0]


# --- 8 -----------------------------------------------------------------------------


@pytest.mark.criterion(8, "Evaluation correctness")
def test_c8_umeyama(record_property):
    rng = np.random.default_rng(800)
    worst = 0.0
    for _ in range(10):
        gt = rng.normal(size=(50, 3)) * 4
        R0, t0 = lie.exp(rng.normal(size=3)), rng.normal(size=3) * 10
        R, t = umeyama_se3(gt @ R0.T + t0, gt)
        worst = max(worst, np.abs(R - R0.T).max(), np.abs(t + R0.T @ t0).max())
    record_property("max_err", f"{worst:.1e}")
    assert worst <= 1e-9


@pytest.mark.criterion(8, "Evaluation correctness")
def test_c8_fixtures():
    eye3 = np.tile(np.eye(3), (3, 1, 1))
    gt = Trajectory([0.0, 1.0, 2.0], eye3, [[0, 0, 0], [1, 0, 0], [2, 0, 0]])
    est = Trajectory(gt.stamps, eye3, gt.p + np.array([[3.0, 4.0, 0.0], [0.0, 0.0, 1.0], [1.0, 2.0, 2.0]]))
    assert abs(ape_rmse(est, gt, align=False) - np.sqrt((25.0 + 1.0 + 9.0) / 3.0)) <= 1e-12

    xy = np.array([[1.0, 1.0], [1.0, -1.0], [-1.0, -1.0], [-1.0, 1.0]])
    eye4 = np.tile(np.eye(3), (4, 1, 1))
    sq = Trajectory(np.arange(4.0), eye4, np.column_stack([xy, np.zeros(4)]))
    bent = Trajectory(np.arange(4.0), eye4, np.column_stack([xy, 0.25 * xy[:, 0] * xy[:, 1]]))
    assert abs(ape_rmse(bent, sq) - 0.25) <= 1e-12

    line = Trajectory([0.0, 1.0, 2.0], eye3, [[0, 0, 0], [5, 0, 0], [10, 0, 0]])
    off = Trajectory(line.stamps, eye3, line.p + np.array([[0, 0, 0], [0, 0, 0], [0, 0.5, 0]]))
    assert abs(rpe_rmse(off, line, 10.0) - 0.5) <= 1e-12


# --- 9 -----------------------------------------------------------------------------


@pytest.mark.criterion(9, "Window mechanics")
def test_c9_window(record_property):
    rng = np.random.default_rng(900)
    t = np.arange(0.0, 6.01, 0.01)
    imu = ImuStream(t, 0.1 * np.sin(t[:, None] * [0.5, 0.7, 1.1]),
                    0.3 * np.cos(t[:, None] * [0.9, 0.4, 1.3]) + [0.0, 0.0, 9.81])
    rio = RadarInertialOdometry(imu)
    sizes = []
    for k in range(101):  # 0 .. 5 s at 20 Hz
        tk = k / 20.0
        before = [s.timestamp for s in rio.window.states] + [tk]
        rio.add_frame(tk, VelocityMeasurement(tk, rng.normal(0, 0.05, 3), np.eye(3) * 0.01))
        removed = [s.timestamp for s in rio.window.removed]
        assert removed == [s for s in before if tk - s > 3.0 + 1e-6]
        sizes.append(len(rio.window.states))
    record_property("max_states", max(sizes))
    assert max(sizes) <= 61

    w = rio.window
    locked = w.states[0].copy()
    for f in w.velocity_factors:
        f.meas.v = f.meas.v + rng.normal(0, 0.3, 3)
    optimize(w)
    moved = max(np.linalg.norm(w.states[0].p - locked.p), np.linalg.norm(lie.log(locked.R.T @ w.states[0].R)))
    record_property("locked_pose_motion", f"{moved:.1e}")
    assert moved < 1e-9
    assert marginalize(w, 3.0).removed == []
