import numpy as np
import pytest

from oracles import nll_loop
from radario.calibration import DEFAULT_CLAMP, nll, write_report, z_stats


def test_nll_examples():
    assert nll([1.0, 2.0], [1.0, 2.0], [0.0, 0.0]) == 0.0
    assert nll([1.0], [0.0], [0.0]) == 0.5


def test_nll_matches_loop_oracle():
    rng = np.random.default_rng(0)
    est, gt = rng.normal(size=1000), rng.normal(size=1000)
    lv = rng.uniform(-3, 2, 1000)
    assert nll(est, gt, lv) == pytest.approx(nll_loop(est, gt, lv, *DEFAULT_CLAMP), abs=1e-12)


def test_nll_unsquared_variant():
    assert nll([3.0], [1.0], [0.0], squared=False) == 1.0
    assert nll([3.0], [1.0], [0.0]) == 2.0


def test_nll_length_mismatch():
    with pytest.raises(ValueError):
        nll([1.0, 2.0], [1.0], [0.0, 0.0])


def test_nll_clamp_equals_boundary():
    lo, hi = DEFAULT_CLAMP
    assert nll([0.3], [0.0], [-50.0]) == nll([0.3], [0.0], [lo])
    assert nll([0.3], [0.0], [50.0]) == nll([0.3], [0.0], [hi])


@pytest.mark.parametrize("r", [0.05, 0.4, 1.0, 3.0])
def test_nll_minimized_at_log_squared_residual(r):
    grid = np.linspace(-8, 3.5, 23001)
    vals = [nll([r], [0.0], [g]) for g in grid]
    assert grid[int(np.argmin(vals))] == pytest.approx(np.log(r * r), abs=1e-3)


def test_z_stats_examples():
    s = np.array([0.5, 1.0, 2.0])
    rep = z_stats(s, s)
    assert rep.z_mean.item() == 1.0 and rep.within_1 == 1.0
    rep = z_stats([2.0], [1.0])
    assert rep.count == 1 and rep.z_mean.item() == 2.0
    assert (rep.within_1, rep.within_2, rep.within_3) == (0.0, 1.0, 1.0)


def test_z_stats_gaussian_coverage():
    z = np.random.default_rng(1).normal(size=10_000)
    rep = z_stats(z, np.ones_like(z))
    assert 0.66 <= rep.within_1 <= 0.70
    assert rep.within_1 <= rep.within_2 <= rep.within_3


def test_z_stats_per_axis_and_errors():
    r = np.array([[1.0, 0.0, -2.0], [3.0, 0.0, 2.0]])
    rep = z_stats(r, np.ones_like(r))
    assert np.array_equal(rep.z_mean, [2.0, 0.0, 0.0])
    assert np.array_equal(rep.z_var, [1.0, 0.0, 4.0])
    assert set(rep.as_dict()) >= {"z_mean_x", "z_var_z", "within_2", "mean_nll", "count"}
    with pytest.raises(ValueError):
        z_stats([], [])
    with pytest.raises(ValueError):
        z_stats([1.0], [0.0])


def test_write_report(tmp_path):
    path = tmp_path / "r.txt"
    write_report(path, {"a": 1, "b": 0.5})
    assert path.read_text() == "a = 1\nb = 0.5\n"
