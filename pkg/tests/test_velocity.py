import io
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from radario.detect import RadarPoint
from radario.errors import DegenerateGeometryError, FormatError, InsufficientPointsError
from radario.velocity import (FIXED_DIRECT_COVARIANCE, MODE_DIRECT, MODE_DOPPLER, ConsensusParams, DopplerImage,
                              FeedRecord, direct_velocity, feed_info, iter_feed, make_grid, pc_velocity,
                              project_velocity, read_feed_header, wls_velocity, write_feed)

GRID = make_grid(8, 32)


def static_points(v, n, rng, outliers=0, outlier_offset=1.0):
    pts = []
    for i in range(n + outliers):
        p = rng.uniform([1, -6, -1.5], [10, 6, 1.5])
        u = p / np.linalg.norm(p)
        d = -float(np.dot(v, u)) + (outlier_offset if i >= n else 0.0)
        pts.append(RadarPoint(p, d, 1.0))
    return pts


# --- grid -------------------------------------------------------------------------


def test_grid_single_bin_is_boresight():
    g = make_grid(1, 1, (0.3, 0.7))
    assert g.shape == (1, 1)
    assert np.array_equal(g.directions(), [[1.0, 0.0, 0.0]])


def test_grid_three_azimuth_bins():
    g = make_grid(1, 3, (np.deg2rad(60.0), np.deg2rad(30.0)))
    assert np.allclose(np.rad2deg(g.azimuth), [-60.0, 0.0, 60.0], atol=1e-12)
    assert np.array_equal(g.elevation, [0.0])


def test_grid_unit_norm_and_increasing():
    g = make_grid(16, 64)
    assert np.allclose(np.linalg.norm(g.unit, axis=-1), 1.0, atol=1e-9)
    assert np.all(np.diff(g.elevation) > 0) and np.all(np.diff(g.azimuth) > 0)
    assert g.azimuth[0] == pytest.approx(-np.deg2rad(60)) and g.elevation[-1] == pytest.approx(np.deg2rad(30))


def test_grid_rejects_empty():
    with pytest.raises(ValueError):
        make_grid(0, 4)


# --- projection -------------------------------------------------------------------


def test_project_zero_and_boresight():
    assert np.array_equal(project_velocity(np.zeros(3), GRID), np.zeros(GRID.shape))
    assert project_velocity([1.0, 0.0, 0.0], make_grid(1, 1))[0, 0] == -1.0


def test_project_matches_dot_product_oracle():
    rng = np.random.default_rng(3)
    v = rng.normal(size=3)
    g = make_grid(5, 11, (0.9, 0.4))
    img = project_velocity(v, g)
    for e in range(5):
        for a in range(11):
            u = g.unit[e, a]
            assert img[e, a] == pytest.approx(-(v[0] * u[0] + v[1] * u[1] + v[2] * u[2]), abs=1e-12)


# --- WLS --------------------------------------------------------------------------


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-1.2, 1.2), min_size=3, max_size=3), st.floats(-5, 3))
def test_wls_round_trip(v, lv):
    v = np.array(v)
    img = DopplerImage(project_velocity(v, GRID), np.full(GRID.shape, lv))
    m = wls_velocity(img, GRID, 1.5)
    assert np.allclose(m.v, v, atol=1e-9)
    assert m.source == "doppler-wls" and m.timestamp == 1.5


def test_wls_covariance_closed_form():
    sigma2 = 0.04
    img = DopplerImage(project_velocity([0.3, 0.1, 0.0], GRID), np.full(GRID.shape, np.log(sigma2)))
    D = -GRID.directions()
    expected = sigma2 * np.linalg.inv(D.T @ D)
    m = wls_velocity(img, GRID)
    assert np.allclose(m.cov, expected, atol=1e-9)
    assert np.array_equal(m.cov, m.cov.T)
    assert np.all(np.linalg.eigvalsh(m.cov) > 0)


def test_wls_single_elevation_row_is_degenerate():
    g = make_grid(1, 32)
    img = DopplerImage(project_velocity([0.5, 0, 0], g), np.zeros(g.shape))
    with pytest.raises(DegenerateGeometryError):
        wls_velocity(img, g)


def test_wls_shape_mismatch():
    with pytest.raises(ValueError):
        wls_velocity(DopplerImage(np.zeros((2, 2)), np.zeros((2, 2))), GRID)


def test_wls_logvar_shift_invariance():
    rng = np.random.default_rng(4)
    d = project_velocity([0.4, -0.2, 0.05], GRID) + 0.01 * rng.normal(size=GRID.shape)
    lv = rng.uniform(-6, 0, GRID.shape)
    a = wls_velocity(DopplerImage(d, lv), GRID)
    b = wls_velocity(DopplerImage(d, lv + 1.7), GRID)
    assert np.allclose(a.v, b.v, atol=1e-9)
    assert np.allclose(b.cov, np.exp(1.7) * a.cov, rtol=1e-9)


def test_wls_monte_carlo_covariance():
    rng = np.random.default_rng(5)
    v = np.array([0.8, 0.2, -0.1])
    lv = rng.uniform(-5, -2, GRID.shape)
    clean = project_velocity(v, GRID)
    est = np.array([wls_velocity(DopplerImage(clean + np.exp(0.5 * lv) * rng.normal(size=GRID.shape), lv), GRID).v
                    for _ in range(2000)])
    predicted = wls_velocity(DopplerImage(clean, lv), GRID).cov
    ratio = np.diag(np.cov(est.T)) / np.diag(predicted)
    assert np.all((ratio > 1 / 1.3) & (ratio < 1.3))


# --- point cloud ------------------------------------------------------------------


def test_pc_noise_free_exact():
    v = np.array([0.7, -0.3, 0.1])
    m = pc_velocity(static_points(v, 50, np.random.default_rng(6)), timestamp=2.0)
    assert np.allclose(m.v, v, atol=1e-9)
    assert m.source == "point-cloud" and m.inliers.all()
    # perfect fit: residual variance floored
    assert np.all(np.linalg.eigvalsh(m.cov) > 0)


def test_pc_two_points():
    with pytest.raises(InsufficientPointsError):
        pc_velocity(static_points(np.ones(3), 2, np.random.default_rng(0)))


def test_pc_rejects_planted_outliers():
    rng = np.random.default_rng(7)
    v = np.array([0.5, 0.2, 0.0])
    pts = static_points(v, 45, rng, outliers=5)
    noise = 0.01
    for p in pts:
        p.doppler += noise * rng.normal()
    m = pc_velocity(pts)
    assert not m.inliers[45:].any()
    assert m.inliers[:45].sum() >= 43
    assert np.all(np.abs(m.v - v) < 5 * np.sqrt(np.diag(m.cov)))


def test_pc_consensus_is_seeded():
    rng = np.random.default_rng(8)
    pts = static_points(np.array([0.5, 0, 0]), 30, rng, outliers=10, outlier_offset=0.6)
    a, b = pc_velocity(pts), pc_velocity(pts)
    assert np.array_equal(a.v, b.v) and np.array_equal(a.inliers, b.inliers)


def test_pc_agrees_with_wls_without_consensus():
    rng = np.random.default_rng(9)
    v = np.array([0.6, 0.1, -0.05])
    dirs = GRID.directions()
    d = project_velocity(v, GRID).ravel() + 0.02 * rng.normal(size=len(dirs))
    pts = [RadarPoint(3.0 * u, float(x), 1.0) for u, x in zip(dirs, d)]
    a = pc_velocity(pts, ConsensusParams(enabled=False))
    b = wls_velocity(DopplerImage(d.reshape(GRID.shape), np.zeros(GRID.shape)), GRID)
    assert np.allclose(a.v, b.v, atol=1e-6)


# --- direct -----------------------------------------------------------------------


def test_direct_examples():
    assert np.array_equal(direct_velocity([0.5, 0, 0], np.zeros(3)).cov, np.eye(3))
    assert np.array_equal(direct_velocity([0.5, 0, 0]).cov, np.eye(3) * 0.01)
    assert FIXED_DIRECT_COVARIANCE == 0.01
    m = direct_velocity([0.5, 0, 0], [np.log(4), 0.0, np.log(0.25)])
    assert np.allclose(m.cov, np.diag([4.0, 1.0, 0.25]), atol=1e-12)


@pytest.mark.parametrize("v,lv", [([np.nan, 0, 0], None), ([0, 0], None), ([0, 0, 0], [np.inf, 0, 0])])
def test_direct_rejects_bad_input(v, lv):
    with pytest.raises(ValueError):
        direct_velocity(v, lv)


# --- RPV1 feed --------------------------------------------------------------------


def test_feed_direct_byte_layout(tmp_path):
    path = tmp_path / "f.rpv"
    write_feed(path, MODE_DIRECT, [FeedRecord(0.25, v=np.array([1.0, 2.0, 3.0]), logvar=np.array([0.0, -1.0, 0.5]))])
    raw = path.read_bytes()
    assert raw[:5] == b"RPV1\x00"
    assert len(raw) == 5 + 8 + 12 + 12 + 1
    assert struct.unpack_from("<d", raw, 5)[0] == 0.25
    assert struct.unpack_from("<6f", raw, 13) == (1.0, 2.0, 3.0, 0.0, -1.0, 0.5)
    assert raw[-1] == 1


def test_feed_direct_without_logvar(tmp_path):
    path = tmp_path / "f.rpv"
    write_feed(path, MODE_DIRECT, [FeedRecord(0.0, v=np.array([0.5, 0, 0]), logvar=None, has_logvar=False)])
    (rec,) = list(iter_feed(path))
    assert not rec.has_logvar
    assert np.array_equal(rec.to_measurement().cov, np.eye(3) * 0.01)


def test_feed_doppler_round_trip(tmp_path):
    path = tmp_path / "f.rpv"
    vs = [np.array([0.5, 0.1, 0.0]), np.array([-0.2, 0.3, 0.05])]
    recs = [FeedRecord(0.05 * i, doppler=DopplerImage(project_velocity(v, GRID), np.full(GRID.shape, -4.0)))
            for i, v in enumerate(vs)]
    write_feed(path, MODE_DOPPLER, recs, GRID.shape)
    assert feed_info(path) == (MODE_DOPPLER, (8, 32))
    assert path.stat().st_size == 13 + 2 * (8 + 8 * 8 * 32)
    back = list(iter_feed(path))
    for rec, v in zip(back, vs):
        # float32 storage bounds the round trip
        assert np.allclose(rec.to_measurement(GRID).v, v, atol=1e-6)


def test_feed_errors(tmp_path):
    with pytest.raises(FormatError):
        read_feed_header(io.BytesIO(b"XXXX\x00"))
    with pytest.raises(FormatError):
        read_feed_header(io.BytesIO(b"RPV1\x07"))
    path = tmp_path / "t.rpv"
    path.write_bytes(b"RPV1\x00" + b"\x00" * 10)
    with pytest.raises(FormatError):
        list(iter_feed(path))
    with pytest.raises(ValueError):
        write_feed(tmp_path / "x.rpv", MODE_DOPPLER, [])
