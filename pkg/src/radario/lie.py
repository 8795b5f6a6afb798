"""SO(3) helpers: hat/vee, exponential and logarithm maps, right Jacobians.

All functions accept either a single 3-vector / 3x3 matrix or a batch with a
leading axis, so factor evaluation in the window solver can stay vectorized.
"""

import numpy as np


def hat(w):
    w = np.asarray(w, dtype=float)
    out = np.zeros(w.shape[:-1] + (3, 3))
    out[..., 0, 1] = -w[..., 2]
    out[..., 0, 2] = w[..., 1]
    out[..., 1, 0] = w[..., 2]
    out[..., 1, 2] = -w[..., 0]
    out[..., 2, 0] = -w[..., 1]
    out[..., 2, 1] = w[..., 0]
    return out


def vee(m):
    m = np.asarray(m, dtype=float)
    return np.stack([m[..., 2, 1], m[..., 0, 2], m[..., 1, 0]], axis=-1)


def _coeffs(theta):
    """Return (sin t / t, (1 - cos t) / t^2, (t - sin t) / t^3) with series near 0."""
    t2 = theta * theta
    small = theta < 1e-4
    safe = np.where(small, 1.0, theta)
    a = np.where(small, 1.0 - t2 / 6.0, np.sin(safe) / safe)
    b = np.where(small, 0.5 - t2 / 24.0, (1.0 - np.cos(safe)) / safe**2)
    c = np.where(small, 1.0 / 6.0 - t2 / 120.0, (safe - np.sin(safe)) / safe**3)
    return a, b, c


def exp(w):
    """Rodrigues formula, R = I + a [w]x + b [w]x^2."""
    w = np.asarray(w, dtype=float)
    theta = np.linalg.norm(w, axis=-1)
    a, b, _ = _coeffs(theta)
    W = hat(w)
    return np.eye(3) + a[..., None, None] * W + b[..., None, None] * (W @ W)


def log(R):
    """Rotation vector of R, stable near 0 and near pi."""
    R = np.asarray(R, dtype=float)
    single = R.ndim == 2
    Rb = R.reshape(-1, 3, 3)
    tr = np.trace(Rb, axis1=1, axis2=2)
    cos_t = np.clip((tr - 1.0) / 2.0, -1.0, 1.0)
    theta = np.arccos(cos_t)
    skew = vee(Rb - np.swapaxes(Rb, 1, 2)) / 2.0  # = sin(t) * axis
    out = np.empty((Rb.shape[0], 3))

    near_zero = theta < 1e-4
    near_pi = theta > np.pi - 1e-4
    regular = ~(near_zero | near_pi)

    if np.any(near_zero):
        t2 = theta[near_zero] ** 2
        out[near_zero] = skew[near_zero] * (1.0 + t2 / 6.0)[:, None]
    if np.any(regular):
        th = theta[regular]
        out[regular] = skew[regular] * (th / np.sin(th))[:, None]
    if np.any(near_pi):
        for k in np.flatnonzero(near_pi):
            # R ~ 2 aa^T - I at theta = pi; take the best-conditioned column
            M = (Rb[k] + np.eye(3)) / 2.0
            col = int(np.argmax(np.diag(M)))
            axis = M[:, col] / np.sqrt(max(M[col, col], 1e-300))
            axis /= np.linalg.norm(axis)
            if np.dot(axis, skew[k]) < 0:
                axis = -axis
            out[k] = axis * theta[k]
    return out[0] if single else out.reshape(R.shape[:-2] + (3,))


def right_jacobian(w):
    """Jr(w) such that Exp(w + d) ~ Exp(w) Exp(Jr(w) d)."""
    w = np.asarray(w, dtype=float)
    theta = np.linalg.norm(w, axis=-1)
    _, b, c = _coeffs(theta)
    W = hat(w)
    return np.eye(3) - b[..., None, None] * W + c[..., None, None] * (W @ W)


def right_jacobian_inv(w):
    w = np.asarray(w, dtype=float)
    theta = np.linalg.norm(w, axis=-1)
    small = theta < 1e-4
    safe = np.where(small, 1.0, theta)
    coef = np.where(
        small,
        1.0 / 12.0 + theta**2 / 720.0,
        1.0 / safe**2 - (1.0 + np.cos(safe)) / (2.0 * safe * np.sin(safe)),
    )
    W = hat(w)
    return np.eye(3) + 0.5 * W + coef[..., None, None] * (W @ W)


def project_to_so3(R):
    """Nearest rotation in the Frobenius sense."""
    U, _, Vt = np.linalg.svd(R)
    D = np.eye(3)
    D[2, 2] = np.sign(np.linalg.det(U @ Vt))
    return U @ D @ Vt


def yaw_rotation(yaw):
    yaw = np.asarray(yaw, dtype=float)
    c, s = np.cos(yaw), np.sin(yaw)
    R = np.zeros(yaw.shape + (3, 3))
    R[..., 0, 0] = c
    R[..., 0, 1] = -s
    R[..., 1, 0] = s
    R[..., 1, 1] = c
    R[..., 2, 2] = 1.0
    return R
