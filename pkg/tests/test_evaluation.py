import numpy as np
import pytest

from radario import lie
from radario.errors import EvaluationError, FormatError
from radario.evaluation import (Trajectory, ape_rmse, associate, evaluate, read_tum, rpe_pairs, rpe_rmse,
                                umeyama_se3, write_tum)


def random_traj(n=200, seed=0, dt=0.05):
    rng = np.random.default_rng(seed)
    t = np.arange(n) * dt
    yaw = np.cumsum(rng.normal(0, 0.02, n))
    p = np.cumsum(np.column_stack([np.cos(yaw), np.sin(yaw), 0.01 * rng.normal(size=n)]) * 0.05, axis=0)
    return Trajectory(t, lie.yaw_rotation(yaw), p)


def random_rigid(seed):
    rng = np.random.default_rng(seed)
    return lie.exp(rng.normal(size=3)), rng.normal(size=3) * 5


def straight(xs, t=None):
    xs = np.asarray(xs, dtype=float)
    t = np.arange(len(xs)) * 1.0 if t is None else t
    return Trajectory(t, np.tile(np.eye(3), (len(xs), 1, 1)), np.column_stack([xs, np.zeros((len(xs), 2))]))


# --- association ------------------------------------------------------------------


def test_associate_identical_and_offset():
    gt = random_traj(50)
    ei, gi, unmatched = associate(gt, gt)
    assert np.array_equal(ei, gi) and len(ei) == 50 and unmatched == 0
    shifted = Trajectory(gt.stamps + 0.02, gt.R, gt.p)
    ei, gi, unmatched = associate(shifted, gt, 0.05)
    assert np.array_equal(gi, np.arange(50)) and unmatched == 0


def test_associate_disjoint_and_partial():
    gt = random_traj(20)
    with pytest.raises(EvaluationError):
        associate(Trajectory(gt.stamps + 100.0, gt.R, gt.p), gt)
    half = Trajectory(gt.stamps + 0.5, gt.R, gt.p)
    _, _, unmatched = associate(half, gt, 0.01)
    assert unmatched == 10


# --- alignment --------------------------------------------------------------------


def test_umeyama_identity():
    p = random_traj(30).p
    R, t = umeyama_se3(p, p)
    assert np.allclose(R, np.eye(3), atol=1e-12) and np.allclose(t, 0.0, atol=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_umeyama_recovers_planted_transform(seed):
    rng = np.random.default_rng(seed)
    gt = rng.normal(size=(40, 3)) * 3
    R0, t0 = random_rigid(seed + 10)
    est = gt @ R0.T + t0
    R, t = umeyama_se3(est, gt)
    assert np.allclose(R, R0.T, atol=1e-9)
    assert np.allclose(t, -R0.T @ t0, atol=1e-9)
    assert np.linalg.det(R) == pytest.approx(1.0)


def test_umeyama_degenerate():
    with pytest.raises(EvaluationError):
        umeyama_se3(np.zeros((2, 3)), np.ones((2, 3)))
    line = np.outer(np.arange(5.0), [1.0, 2.0, 0.5])
    with pytest.raises(EvaluationError):
        umeyama_se3(line, line)


def test_umeyama_reflection_corrected():
    rng = np.random.default_rng(3)
    gt = rng.normal(size=(20, 3))
    mirrored = gt * np.array([1.0, 1.0, -1.0])
    R, _ = umeyama_se3(mirrored, gt)
    assert np.linalg.det(R) == pytest.approx(1.0)


# --- APE / RPE fixtures -----------------------------------------------------------


def test_ape_identical_and_offset():
    gt = random_traj(100)
    assert ape_rmse(gt, gt) < 1e-12
    assert ape_rmse(Trajectory(gt.stamps, gt.R, gt.p + [3.0, -1.0, 0.5]), gt) < 1e-12


def test_ape_three_pose_fixture_unaligned():
    gt = straight([0.0, 1.0, 2.0])
    est = Trajectory(gt.stamps, gt.R, gt.p + np.array([[3.0, 4.0, 0.0], [0.0, 0.0, 1.0], [1.0, 2.0, 2.0]]))
    # errors 5, 1, 3
    assert ape_rmse(est, gt, align=False) == pytest.approx(np.sqrt(35.0 / 3.0), abs=1e-12)


def test_ape_square_fixture_aligned():
    # z errors proportional to x*y are orthogonal to every rigid correction of a square
    xy = np.array([[1.0, 1.0], [1.0, -1.0], [-1.0, -1.0], [-1.0, 1.0]])
    gt_p = np.column_stack([xy, np.zeros(4)])
    est_p = gt_p + np.column_stack([np.zeros((4, 2)), 0.3 * xy[:, 0] * xy[:, 1]])
    eye = np.tile(np.eye(3), (4, 1, 1))
    assert ape_rmse(Trajectory(np.arange(4.0), eye, est_p), Trajectory(np.arange(4.0), eye, gt_p)) == \
        pytest.approx(0.3, abs=1e-12)


def test_rpe_single_segment_fixture():
    gt = straight([0.0, 5.0, 10.0])
    est_p = gt.p.copy()
    est_p[2, 1] = 0.5
    est = Trajectory(gt.stamps, gt.R, est_p)
    assert rpe_pairs(gt, 10.0) == [(0, 2)]
    assert rpe_rmse(est, gt, 10.0) == pytest.approx(0.5, abs=1e-12)


def test_rpe_path_too_short():
    with pytest.raises(EvaluationError):
        rpe_rmse(straight([0.0, 1.0]), straight([0.0, 1.0]), 10.0)


def test_rpe_first_crossing_pairs():
    gt = straight(np.arange(0.0, 25.0, 1.0))
    pairs = rpe_pairs(gt, 10.0)
    assert pairs[0] == (0, 10) and pairs[-1] == (14, 24) and len(pairs) == 15


def test_metric_invariances():
    gt = random_traj(300, 1)
    rng = np.random.default_rng(1)
    est = Trajectory(gt.stamps, gt.R, gt.p + rng.normal(0, 0.05, gt.p.shape))
    base_ape, base_rpe = ape_rmse(est, gt), rpe_rmse(est, gt, 5.0)
    R0, t0 = random_rigid(4)
    # same transform on both
    assert ape_rmse(est.transformed(R0, t0), gt.transformed(R0, t0)) == pytest.approx(base_ape, rel=1e-9)
    assert rpe_rmse(est.transformed(R0, t0), gt.transformed(R0, t0), 5.0) == pytest.approx(base_rpe, rel=1e-9)
    # transform on est alone
    assert rpe_rmse(est.transformed(R0, t0), gt, 5.0) == pytest.approx(base_rpe, rel=1e-9)
    assert rpe_rmse(gt.transformed(R0, t0), gt, 5.0) < 1e-12
    report = evaluate(gt, gt, 5.0)
    assert report.ape_rmse < 1e-12 and report.rpe_rmse == 0.0


# --- I/O and report ---------------------------------------------------------------


def test_tum_round_trip(tmp_path):
    traj = random_traj(20, 2)
    path = tmp_path / "t.tum"
    write_tum(path, traj)
    assert len(path.read_text().splitlines()[0].split()) == 8
    back = read_tum(path)
    assert np.allclose(back.p, traj.p, atol=1e-9) and np.allclose(back.R, traj.R, atol=1e-8)


def test_tum_errors(tmp_path):
    bad = tmp_path / "bad.tum"
    bad.write_text("0 1 2 3\n")
    with pytest.raises(FormatError):
        read_tum(bad)
    empty = tmp_path / "empty.tum"
    empty.write_text("# nothing\n")
    with pytest.raises(FormatError):
        read_tum(empty)
    with pytest.raises(ValueError):
        Trajectory([0.0, 0.0], np.tile(np.eye(3), (2, 1, 1)), np.zeros((2, 3)))


def test_evaluate_report():
    gt = random_traj(400, 5)
    est = Trajectory(gt.stamps[::2] + 0.01, gt.R[::2], gt.p[::2] + 0.1)
    rep = evaluate(est, gt, 5.0)
    assert rep.pairs == 200 and rep.unmatched == 0
    d = rep.as_dict()
    assert d["ape_rmse"] < 1e-9 and d["rpe_interval"] == 5.0 and d["rpe_pairs"] > 0
    assert len(d["align_R"].split()) == 9
