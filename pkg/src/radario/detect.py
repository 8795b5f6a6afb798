"""Classical detection chain: CA-CFAR on the range-Doppler map, angle of
arrival from the angle FFT image, and a 4-D point cloud gated to the antenna FoV."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from radario.errors import ConfigError, InvisibleAngleError, ShapeMismatchError
from radario.spectrum import ChirpConfig, SpectralCube

log = logging.getLogger(__name__)

DEFAULT_FOV = (np.deg2rad(60.0), np.deg2rad(30.0))


@dataclass(frozen=True)
class CfarParams:
    """Cell-averaging CFAR window; counts are half-widths per side as (range, doppler)."""

    train_cells: tuple[int, int] = (8, 4)
    guard_cells: tuple[int, int] = (4, 2)
    threshold_scale: float = 8.0

    def __post_init__(self):
        if min(self.train_cells) < 1:
            raise ConfigError("train_cells must be >= 1 on each axis")
        if min(self.guard_cells) < 0:
            raise ConfigError("guard_cells must be >= 0")
        if not self.threshold_scale > 0:
            raise ConfigError("threshold_scale must be positive")

    def num_training_cells(self) -> int:
        (tr, td), (gr, gd) = self.train_cells, self.guard_cells
        outer = (2 * (tr + gr) + 1) * (2 * (td + gd) + 1)
        return outer - (2 * gr + 1) * (2 * gd + 1)


def alpha_for_pfa(pfa: float, num_training: int) -> float:
    """Threshold scale giving false-alarm rate ``pfa`` for CA-CFAR on exponential noise."""
    return num_training * (pfa ** (-1.0 / num_training) - 1.0)


@dataclass
class RadarPoint:
    position: np.ndarray  # (x, y, z) in the radar frame, x forward, y left, z up
    doppler: float  # m/s, positive = receding
    magnitude: float  # linear power


def _box_sum(sat: np.ndarray, r0, r1, c0, c1):
    """Sum of the original array over [r0, r1) x [c0, c1) from its summed-area table."""
    return sat[r1, c1] - sat[r0, c1] - sat[r1, c0] + sat[r0, c0]


def ca_cfar_2d(rd_map: np.ndarray, params: CfarParams = CfarParams()) -> list[tuple[int, int]]:
    """Detect cells whose power exceeds ``alpha`` times the mean of their training annulus.

    The annulus is truncated at the map border (no wrap-around).
    """
    rd = np.asarray(rd_map, dtype=float)
    if rd.ndim != 2:
        raise ShapeMismatchError("rd_map must be 2-D (range, doppler)")
    n_r, n_d = rd.shape
    (tr, td), (gr, gd) = params.train_cells, params.guard_cells
    if 2 * (tr + gr) + 1 > n_r or 2 * (td + gd) + 1 > n_d:
        raise ConfigError(f"CFAR window larger than map {rd.shape}")

    sat = np.zeros((n_r + 1, n_d + 1))
    sat[1:, 1:] = rd.cumsum(0).cumsum(1)
    ones = np.zeros_like(sat)
    ones[1:, 1:] = np.arange(1, n_r + 1)[:, None] * np.arange(1, n_d + 1)[None, :]

    r = np.arange(n_r)[:, None]
    d = np.arange(n_d)[None, :]

    def window(hr, hd):
        r0, r1 = np.clip(r - hr, 0, n_r), np.clip(r + hr + 1, 0, n_r)
        c0, c1 = np.clip(d - hd, 0, n_d), np.clip(d + hd + 1, 0, n_d)
        return _box_sum(sat, r0, r1, c0, c1), _box_sum(ones, r0, r1, c0, c1)

    outer_sum, outer_n = window(tr + gr, td + gd)
    inner_sum, inner_n = window(gr, gd)
    count = outer_n - inner_n
    noise = (outer_sum - inner_sum) / np.maximum(count, 1)
    hits = (rd > params.threshold_scale * noise) & (count > 0)
    return [(int(i), int(j)) for i, j in zip(*np.nonzero(hits))]


def bin_to_angle(psi, d_lambda: float = 0.5):
    """Physical angle arcsin(psi / (2 pi d)) of a spatial frequency psi."""
    s = np.asarray(psi, dtype=float) / (2.0 * np.pi * d_lambda)
    if np.any(np.abs(s) > 1.0 + 1e-12):
        raise InvisibleAngleError(f"psi/(2 pi d) = {s} outside [-1, 1]")
    out = np.arcsin(np.clip(s, -1.0, 1.0))
    return float(out) if out.ndim == 0 else out


def aoa_peak(angle_image: np.ndarray) -> tuple[int, int]:
    """(elevation, azimuth) bin of the largest magnitude; ties go to the lowest index."""
    mag = np.abs(np.asarray(angle_image))
    e, a = np.unravel_index(int(np.argmax(mag)), mag.shape)
    return int(e), int(a)


def _local_maxima(rd: np.ndarray, cells: np.ndarray) -> np.ndarray:
    padded = np.pad(rd, 1, mode="constant", constant_values=-np.inf)
    r, d = cells[:, 0] + 1, cells[:, 1] + 1
    centre = padded[r, d]
    keep = np.ones(len(cells), dtype=bool)
    for dr in (-1, 0, 1):
        for dd in (-1, 0, 1):
            if dr or dd:
                keep &= centre >= padded[r + dr, d + dd]
    return keep


def build_pointcloud(
    cube: SpectralCube,
    cfg: ChirpConfig,
    cfar: CfarParams = CfarParams(),
    fov: tuple[float, float] = DEFAULT_FOV,
    peak_grouping: bool = False,
    stats: dict | None = None,
) -> list[RadarPoint]:
    """CFAR detections to Cartesian points with Doppler.

    Range bin 0 is skipped because it has no direction. Elevation comes from
    ``bin_to_angle`` directly; the azimuth bin measures the direction cosine
    along y, which is divided by cos(elevation) before the arcsin so the
    spherical-to-Cartesian step reproduces that direction cosine.
    ``peak_grouping`` keeps only detections that are local maxima of the
    range-Doppler map in their 3x3 neighbourhood.
    """
    rd = cube.range_doppler_power()
    cells = np.array(ca_cfar_2d(rd, cfar), dtype=int).reshape(-1, 2)
    counts = {"detections": len(cells), "invisible": 0, "outside_fov": 0, "grouped": 0}
    cells = cells[cells[:, 0] > 0]
    if peak_grouping and len(cells):
        keep = _local_maxima(rd, cells)
        counts["grouped"] = int(np.sum(~keep))
        cells = cells[keep]

    points: list[RadarPoint] = []
    d_lambda = cfg.antenna_spacing
    for r_bin, d_bin in cells:
        e_bin, a_bin = aoa_peak(cube.angle_image(d_bin, r_bin))
        try:
            el = bin_to_angle(cube.psi_elevation[e_bin], d_lambda)
            cone = bin_to_angle(cube.psi_azimuth[a_bin], d_lambda)
            az = bin_to_angle(2.0 * np.pi * d_lambda * np.sin(cone) / np.cos(el), d_lambda)
        except InvisibleAngleError:
            counts["invisible"] += 1
            continue
        if abs(az) > fov[0] or abs(el) > fov[1]:
            counts["outside_fov"] += 1
            continue
        rng = cube.range[r_bin]
        pos = rng * np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
        points.append(RadarPoint(pos, float(cube.doppler[d_bin]), float(rd[r_bin, d_bin])))

    if counts["invisible"]:
        log.debug("dropped %d detections at invisible angles", counts["invisible"])
    if stats is not None:
        stats.update(counts)
    return points


def write_pointcloud_csv(path: str | Path, clouds: Iterable[tuple[float, list[RadarPoint]]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["timestamp", "x", "y", "z", "doppler", "magnitude"])
        for t, points in clouds:
            for p in points:
                w.writerow([repr(float(t)), *(repr(float(c)) for c in p.position),
                            repr(p.doppler), repr(p.magnitude)])


def read_pointcloud_csv(path: str | Path) -> list[tuple[float, list[RadarPoint]]]:
    """Group rows by timestamp, preserving file order."""
    out: list[tuple[float, list[RadarPoint]]] = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            t = float(row["timestamp"])
            p = RadarPoint(np.array([float(row["x"]), float(row["y"]), float(row["z"])]),
                           float(row["doppler"]), float(row["magnitude"]))
            if out and out[-1][0] == t:
                out[-1][1].append(p)
            else:
                out.append((t, [p]))
    return out
