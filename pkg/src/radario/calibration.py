"""Uncertainty calibration metrics for predicted velocities and Doppler images."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

DEFAULT_CLAMP = (-10.0, 4.0)


def nll(est, gt, logvar, clamp: tuple[float, float] = DEFAULT_CLAMP, squared: bool = True) -> float:
    """Mean Gaussian negative log-likelihood (without the constant term).

    Per element: r^2 / (2 s^2) + log(s^2) / 2 with s^2 = exp(clip(logvar)).
    ``squared=False`` uses the raw residual r in place of r^2, matching the
    loss as sometimes written without the square; it is not a likelihood.
    """
    est = np.asarray(est, dtype=float).ravel()
    gt = np.asarray(gt, dtype=float).ravel()
    lv = np.asarray(logvar, dtype=float).ravel()
    if not (est.shape == gt.shape == lv.shape):
        raise ValueError(f"length mismatch: {est.shape}, {gt.shape}, {lv.shape}")
    lv = np.clip(lv, *clamp)
    r = est - gt
    num = r * r if squared else r
    return float(np.mean(num / (2.0 * np.exp(lv)) + 0.5 * lv))


@dataclass
class CalibrationReport:
    count: int
    mean_nll: float
    z_mean: np.ndarray
    z_var: np.ndarray
    within_1: float
    within_2: float
    within_3: float

    def as_dict(self) -> dict[str, float]:
        out = {}
        for key, val in asdict(self).items():
            arr = np.atleast_1d(val)
            if arr.size == 1:
                out[key] = arr.item()
            else:
                for i, x in enumerate(arr):
                    out[f"{key}_{'xyz'[i] if arr.size == 3 else i}"] = float(x)
        return out


def z_stats(residuals, sigmas, nll_value: float | None = None) -> CalibrationReport:
    """Z-score moments and coverage fractions.

    ``residuals``/``sigmas`` are (n,) or (n, k); moments are reported per
    column (axis), coverage over all elements.
    """
    r = np.asarray(residuals, dtype=float)
    s = np.asarray(sigmas, dtype=float)
    if r.size == 0:
        raise ValueError("z_stats needs at least one sample")
    if r.shape != s.shape:
        raise ValueError(f"shape mismatch {r.shape} vs {s.shape}")
    if np.any(s <= 0):
        raise ValueError("all sigmas must be positive")
    z = r / s
    az = np.abs(z)
    if nll_value is None:
        nll_value = float(np.mean(0.5 * z * z + np.log(s)))
    zc = z if z.ndim > 1 else z[:, None]
    return CalibrationReport(
        count=int(z.shape[0]),
        mean_nll=nll_value,
        z_mean=zc.mean(axis=0),
        z_var=zc.var(axis=0),
        within_1=float(np.mean(az <= 1.0)),
        within_2=float(np.mean(az <= 2.0)),
        within_3=float(np.mean(az <= 3.0)),
    )


def write_report(path, values: dict) -> None:
    with open(path, "w") as fh:
        for k, v in values.items():
            fh.write(f"{k} = {v}\n")
