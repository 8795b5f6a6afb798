"""Per-frame navigation state and its 15-dim tangent-space update.

Tangent ordering: ``[dphi (3), dp (3), dv (3), dbg (3), dba (3)]``. Rotation is
perturbed on the right (R <- R Exp(dphi)); position, velocity and biases are
world-frame vector additions.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from radario import lie

DIM = 15
PHI, POS, VEL, BG, BA = (slice(0, 3), slice(3, 6), slice(6, 9), slice(9, 12), slice(12, 15))


@dataclass
class FrameState:
    timestamp: float
    R: np.ndarray = field(default_factory=lambda: np.eye(3))  # world <- body
    p: np.ndarray = field(default_factory=lambda: np.zeros(3))
    v: np.ndarray = field(default_factory=lambda: np.zeros(3))  # world frame
    bg: np.ndarray = field(default_factory=lambda: np.zeros(3))
    ba: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.R = np.array(self.R, dtype=float).reshape(3, 3)
        for name in ("p", "v", "bg", "ba"):
            setattr(self, name, np.array(getattr(self, name), dtype=float).reshape(3))

    def copy(self) -> "FrameState":
        return FrameState(self.timestamp, self.R.copy(), self.p.copy(), self.v.copy(), self.bg.copy(), self.ba.copy())

    def retract(self, delta: np.ndarray) -> "FrameState":
        delta = np.asarray(delta, dtype=float)
        return FrameState(
            self.timestamp,
            self.R @ lie.exp(delta[PHI]),
            self.p + delta[POS],
            self.v + delta[VEL],
            self.bg + delta[BG],
            self.ba + delta[BA],
        )

    def local(self, other: "FrameState") -> np.ndarray:
        """Tangent vector d with self.retract(d) == other."""
        return np.concatenate([
            lie.log(self.R.T @ other.R), other.p - self.p, other.v - self.v,
            other.bg - self.bg, other.ba - self.ba,
        ])
