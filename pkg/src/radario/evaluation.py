"""Trajectory I/O and accuracy metrics (APE with SE(3) Umeyama alignment, RPE by distance)."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
import numpy as np
from scipy.spatial.transform import Rotation

from radario.errors import EvaluationError, FormatError


@dataclass
class Trajectory:
    stamps: np.ndarray  # (n,)
    R: np.ndarray  # (n, 3, 3) world <- body
    p: np.ndarray  # (n, 3)

    def __post_init__(self):
        self.stamps = np.asarray(self.stamps, dtype=float).reshape(-1)
        self.R = np.asarray(self.R, dtype=float).reshape(-1, 3, 3)
        self.p = np.asarray(self.p, dtype=float).reshape(-1, 3)
        if not (len(self.stamps) == len(self.R) == len(self.p)):
            raise ValueError("stamps, rotations and positions differ in length")
        if np.any(np.diff(self.stamps) <= 0):
            raise ValueError("trajectory timestamps must be strictly increasing")

    def __len__(self):
        return len(self.stamps)

    @classmethod
    def from_states(cls, states) -> "Trajectory":
        states = sorted(states, key=lambda s: s.timestamp)
        return cls(np.array([s.timestamp for s in states]), np.stack([s.R for s in states]),
                   np.stack([s.p for s in states]))

    def subset(self, idx) -> "Trajectory":
        return Trajectory(self.stamps[idx], self.R[idx], self.p[idx])

    def transformed(self, R, t) -> "Trajectory":
        """Left-apply the rigid transform (R, t) to every pose."""
        return Trajectory(self.stamps, R @ self.R, self.p @ R.T + t)


def write_tum(path: str | Path, traj: Trajectory) -> None:
    quat = Rotation.from_matrix(traj.R).as_quat()  # x, y, z, w
    with open(path, "w") as fh:
        for t, p, q in zip(traj.stamps, traj.p, quat):
            fh.write(" ".join(f"{x:.9f}" for x in (t, *p, *q)) + "\n")


def read_tum(path: str | Path) -> Trajectory:
    rows = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            vals = line.split()
            if len(vals) != 8:
                raise FormatError(f"TUM line needs 8 fields, got {len(vals)}: {line!r}")
            rows.append([float(x) for x in vals])
    if not rows:
        raise FormatError(f"{path}: empty trajectory")
    data = np.array(rows)
    return Trajectory(data[:, 0], Rotation.from_quat(data[:, 4:8]).as_matrix(), data[:, 1:4])


def associate(est: Trajectory, gt: Trajectory, max_dt: float = 0.05):
    """Pair each estimate with the nearest ground-truth stamp within ``max_dt``.

    Each ground-truth pose is used at most once. Returns (est_idx, gt_idx, unmatched).
    """
    if len(est) == 0 or len(gt) == 0:
        raise EvaluationError("cannot associate an empty trajectory")
    pos = np.searchsorted(gt.stamps, est.stamps)
    lo = np.clip(pos - 1, 0, len(gt) - 1)
    hi = np.clip(pos, 0, len(gt) - 1)
    pick = np.where(np.abs(gt.stamps[lo] - est.stamps) <= np.abs(gt.stamps[hi] - est.stamps), lo, hi)
    ok = np.abs(gt.stamps[pick] - est.stamps) <= max_dt
    est_idx, gt_idx, used = [], [], set()
    for i in np.flatnonzero(ok):
        if pick[i] in used:
            continue
        used.add(pick[i])
        est_idx.append(int(i))
        gt_idx.append(int(pick[i]))
    if not est_idx:
        raise EvaluationError("no timestamp pairs within max_dt")
    return np.array(est_idx), np.array(gt_idx), len(est) - len(est_idx)


def umeyama_se3(src: np.ndarray, dst: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Rigid (R, t) minimizing sum ||R src_i + t - dst_i||^2, scale fixed to 1."""
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 3:
        raise ValueError("point sets must both be (n, 3)")
    if len(src) < 3:
        raise EvaluationError("Umeyama alignment needs at least 3 pairs")
    mu_s, mu_d = src.mean(0), dst.mean(0)
    xs, xd = src - mu_s, dst - mu_d
    sv = np.linalg.svd(xs, compute_uv=False)
    if sv[1] < 1e-9 * max(sv[0], 1e-300):
        raise EvaluationError("degenerate (collinear or coincident) point configuration")
    U, _, Vt = np.linalg.svd(xd.T @ xs / len(src))
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    return R, mu_d - R @ mu_s


def ape_residuals(est: Trajectory, gt: Trajectory, align: bool = True):
    """Per-pose translation errors after optional alignment of est onto gt (already paired)."""
    if align:
        R, t = umeyama_se3(est.p, gt.p)
    else:
        R, t = np.eye(3), np.zeros(3)
    err = np.linalg.norm(est.p @ R.T + t - gt.p, axis=1)
    return err, (R, t)


def ape_rmse(est: Trajectory, gt: Trajectory, align: bool = True) -> float:
    err, _ = ape_residuals(est, gt, align)
    return float(np.sqrt(np.mean(err**2)))


def rpe_pairs(gt: Trajectory, interval: float) -> list[tuple[int, int]]:
    """For each i, the first j whose ground-truth arc length from i reaches ``interval``."""
    steps = np.linalg.norm(np.diff(gt.p, axis=0), axis=1)
    arc = np.concatenate([[0.0], np.cumsum(steps)])
    if arc[-1] < interval:
        raise EvaluationError(f"path length {arc[-1]:.3f} m shorter than RPE interval {interval} m")
    j = np.searchsorted(arc, arc + interval - 1e-12, side="left")
    return [(i, int(jj)) for i, jj in enumerate(j) if jj < len(arc)]


def rpe_residuals(est: Trajectory, gt: Trajectory, interval: float = 10.0) -> np.ndarray:
    out = []
    for i, j in rpe_pairs(gt, interval):
        # relative motion i -> j expressed in frame i
        d_gt = gt.R[i].T @ (gt.p[j] - gt.p[i])
        d_est = est.R[i].T @ (est.p[j] - est.p[i])
        R_gt = gt.R[i].T @ gt.R[j]
        # translation of (gt_rel)^-1 * est_rel
        out.append(np.linalg.norm(R_gt.T @ (d_est - d_gt)))
    return np.array(out)


def rpe_rmse(est: Trajectory, gt: Trajectory, interval: float = 10.0) -> float:
    err = rpe_residuals(est, gt, interval)
    return float(np.sqrt(np.mean(err**2)))


@dataclass
class EvalReport:
    ape_rmse: float
    rpe_rmse: float
    rpe_interval: float
    pairs: int
    unmatched: int
    alignment: tuple[np.ndarray, np.ndarray] = field(repr=False, default=None)
    ape_errors: np.ndarray = field(repr=False, default=None)
    rpe_errors: np.ndarray = field(repr=False, default=None)

    def as_dict(self) -> dict:
        R, t = self.alignment
        return {
            "ape_rmse": self.ape_rmse,
            "rpe_rmse": self.rpe_rmse,
            "rpe_interval": self.rpe_interval,
            "rpe_pairs": 0 if self.rpe_errors is None else len(self.rpe_errors),
            "pairs": self.pairs,
            "unmatched": self.unmatched,
            "align_R": " ".join(f"{x:.9f}" for x in np.ravel(R)),
            "align_t": " ".join(f"{x:.9f}" for x in t),
        }


def evaluate(est: Trajectory, gt: Trajectory, interval: float = 10.0, max_dt: float = 0.05) -> EvalReport:
    ei, gi, unmatched = associate(est, gt, max_dt)
    e, g = est.subset(ei), gt.subset(gi)
    ape_err, alignment = ape_residuals(e, g)
    rpe_err = rpe_residuals(e, g, interval)
    return EvalReport(
        ape_rmse=float(np.sqrt(np.mean(ape_err**2))),
        rpe_rmse=float(np.sqrt(np.mean(rpe_err**2))),
        rpe_interval=interval, pairs=len(ei), unmatched=unmatched,
        alignment=alignment, ape_errors=ape_err, rpe_errors=rpe_err,
    )
