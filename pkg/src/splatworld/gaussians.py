"""3D Gaussian primitives: covariance factorization and point evaluation.

A Gaussian is parameterized by center, unit quaternion, per-axis scale,
RGB color and opacity. Scale is stored as log-scale and opacity as a
pre-sigmoid logit so the optimizer can run unconstrained; the constrained
values are recovered through exp/sigmoid on access.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateGaussianError, InvalidParameterError

# Condition-number limit above which the covariance gets a diagonal bump
# before inversion (pancake Gaussians produced mid-optimization).
COND_LIMIT = 1e12
COND_EPS = 1e-9


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


def quat2rot(q: np.ndarray) -> np.ndarray:
    """Convert a (possibly unnormalized) quaternion (w, x, y, z) to a rotation matrix."""
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (4,):
        raise InvalidParameterError(f"quaternion must have 4 components, got shape {q.shape}")
    if not np.all(np.isfinite(q)):
        raise InvalidParameterError("quaternion has non-finite components")
    n = np.linalg.norm(q)
    if n < 1e-12:
        raise InvalidParameterError("zero quaternion has no rotation")
    return quats_to_rots(q[None])[0]


def quats_to_rots(quats: np.ndarray) -> np.ndarray:
    """Batched quaternion (M, 4) -> rotation matrices (M, 3, 3); normalizes internally."""
    q = np.asarray(quats, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    q = q / norm
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    R = np.empty((q.shape[0], 3, 3), dtype=np.float64)
    R[:, 0, 0] = 1 - 2 * (y * y + z * z)
    R[:, 0, 1] = 2 * (x * y - w * z)
    R[:, 0, 2] = 2 * (x * z + w * y)
    R[:, 1, 0] = 2 * (x * y + w * z)
    R[:, 1, 1] = 1 - 2 * (x * x + z * z)
    R[:, 1, 2] = 2 * (y * z - w * x)
    R[:, 2, 0] = 2 * (x * z - w * y)
    R[:, 2, 1] = 2 * (y * z + w * x)
    R[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def build_covariance(q: np.ndarray, s: np.ndarray) -> np.ndarray:
    """Covariance from rotation quaternion and positive per-axis scales: R diag(s)^2 R^T."""
    q = np.asarray(q, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    if not (np.all(np.isfinite(q)) and np.all(np.isfinite(s))):
        raise InvalidParameterError("non-finite covariance parameters")
    if np.any(s <= 0):
        raise InvalidParameterError("scales must be strictly positive")
    n = np.linalg.norm(q)
    if abs(n - 1.0) > 1e-6:
        raise InvalidParameterError(f"quaternion norm {n:.2e} is not within 1e-6 of 1")
    R = quat2rot(q)
    return (R * s**2) @ R.T


def covariances_from(quats: np.ndarray, scales: np.ndarray) -> np.ndarray:
    """Batched covariance build: (M, 4) quats + (M, 3) scales -> (M, 3, 3)."""
    R = quats_to_rots(quats)
    return np.einsum("mij,mj,mkj->mik", R, np.asarray(scales, dtype=np.float64) ** 2, R)


def eval_gaussian(g: "Gaussian3D", x: np.ndarray) -> float:
    """Unnormalized Gaussian weight exp(-1/2 (x-mu)^T Sigma^-1 (x-mu)); 1 exactly at the center."""
    x = np.asarray(x, dtype=np.float64)
    cov = build_covariance(g.quat, g.scale)
    smax, smin = np.max(g.scale), np.min(g.scale)
    if (smax / smin) ** 2 > COND_LIMIT:
        cov = cov + (COND_EPS * np.trace(cov) / 3.0) * np.eye(3)
    d = x - g.center
    try:
        sol = np.linalg.solve(cov, d)
    except np.linalg.LinAlgError as exc:
        raise DegenerateGaussianError("covariance is singular after regularization") from exc
    m = float(d @ sol)
    if not np.isfinite(m):
        raise DegenerateGaussianError("non-finite Mahalanobis distance")
    return float(np.exp(-0.5 * m))


@dataclass
class Gaussian3D:
    """A single Gaussian with constrained attribute values."""

    center: np.ndarray  # (3,) world units
    quat: np.ndarray  # (4,) unit quaternion, (w, x, y, z)
    scale: np.ndarray  # (3,) positive lengths
    color: np.ndarray  # (3,) RGB in [0, 1]
    opacity: float  # in (0, 1)


@dataclass
class GaussianSet:
    """Flat collection of Gaussians stored as parallel attribute arrays.

    The space tag records whether centers live in world coordinates or in a
    human's canonical (rest pose) frame; it never changes over the set's life.
    """

    centers: np.ndarray  # (M, 3)
    quats: np.ndarray  # (M, 4)
    log_scales: np.ndarray  # (M, 3)
    colors: np.ndarray  # (M, 3) in [0, 1]
    opacity_logits: np.ndarray  # (M,)
    space: str = "world"  # "world" | "canonical"

    def __post_init__(self):
        m = len(self.centers)
        for name in ("centers", "quats", "log_scales", "colors", "opacity_logits"):
            arr = np.ascontiguousarray(getattr(self, name), dtype=np.float64)
            setattr(self, name, arr)
            if len(arr) != m:
                raise InvalidParameterError(f"attribute array {name} has length {len(arr)} != {m}")
        if self.space not in ("world", "canonical"):
            raise InvalidParameterError(f"unknown space tag {self.space!r}")

    @classmethod
    def from_attributes(cls, centers, quats, scales, colors, opacities, space="world"):
        """Build from constrained values (positive scales, opacities in (0,1))."""
        scales = np.asarray(scales, dtype=np.float64)
        if np.any(scales <= 0):
            raise InvalidParameterError("scales must be strictly positive")
        return cls(
            centers=np.array(centers, dtype=np.float64),
            quats=np.array(quats, dtype=np.float64),
            log_scales=np.log(scales),
            colors=np.array(colors, dtype=np.float64),
            opacity_logits=logit(opacities),
            space=space,
        )

    def __len__(self):
        return len(self.centers)

    def __getitem__(self, i: int) -> Gaussian3D:
        return Gaussian3D(
            center=self.centers[i].copy(),
            quat=self.quats[i] / np.linalg.norm(self.quats[i]),
            scale=np.exp(self.log_scales[i]),
            color=self.colors[i].copy(),
            opacity=float(sigmoid(self.opacity_logits[i])),
        )

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    @property
    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logits)

    def rotations(self) -> np.ndarray:
        return quats_to_rots(self.quats)

    def covariances(self) -> np.ndarray:
        return covariances_from(self.quats, self.scales)

    def normalize_quats(self):
        self.quats /= np.linalg.norm(self.quats, axis=1, keepdims=True)

    def copy(self) -> "GaussianSet":
        return GaussianSet(
            centers=self.centers.copy(),
            quats=self.quats.copy(),
            log_scales=self.log_scales.copy(),
            colors=self.colors.copy(),
            opacity_logits=self.opacity_logits.copy(),
            space=self.space,
        )


# Derivatives of the rotation matrix w.r.t. the unit quaternion components.
# Rows follow the quat2rot layout; validated against finite differences.
def _rot_quat_jacobian(q: np.ndarray) -> np.ndarray:
    """(M, 4) unit quats -> dR/dq_hat of shape (M, 4, 3, 3)."""
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    o = np.zeros_like(w)
    J = np.empty((q.shape[0], 4, 3, 3), dtype=np.float64)
    J[:, 0] = 2 * np.stack(
        [np.stack([o, -z, y], -1), np.stack([z, o, -x], -1), np.stack([-y, x, o], -1)], axis=1
    )
    J[:, 1] = 2 * np.stack(
        [np.stack([o, y, z], -1), np.stack([y, -2 * x, -w], -1), np.stack([z, w, -2 * x], -1)],
        axis=1,
    )
    J[:, 2] = 2 * np.stack(
        [np.stack([-2 * y, x, w], -1), np.stack([x, o, z], -1), np.stack([-w, z, -2 * y], -1)],
        axis=1,
    )
    J[:, 3] = 2 * np.stack(
        [np.stack([-2 * z, -w, x], -1), np.stack([w, -2 * z, y], -1), np.stack([x, y, o], -1)],
        axis=1,
    )
    return J


def covariance_factor_backward(quats: np.ndarray, log_scales: np.ndarray, dL_dcov: np.ndarray):
    """Backprop dL/dSigma (M, 3, 3) through Sigma = R diag(exp(ls))^2 R^T.

    Returns (dL/dquats, dL/dlog_scales) for the raw (unnormalized) quaternions,
    including the normalization Jacobian.
    """
    q = np.asarray(quats, dtype=np.float64)
    norm = np.linalg.norm(q, axis=1, keepdims=True)
    qh = q / norm
    s = np.exp(np.asarray(log_scales, dtype=np.float64))
    R = quats_to_rots(qh)
    K = 0.5 * (dL_dcov + np.transpose(dL_dcov, (0, 2, 1)))

    # dL/ds via diag(R^T K R): Sigma = R D R^T with D = diag(s^2).
    RtKR_diag = np.einsum("mia,mij,mja->ma", R, K, R)
    dlog_scales = RtKR_diag * 2.0 * s**2

    # dL/dR = 2 K R D, then contract with dR/dq_hat.
    dR = 2.0 * np.einsum("mij,mja,ma->mia", K, R, s**2)
    Jq = _rot_quat_jacobian(qh)
    dqh = np.einsum("mkij,mij->mk", Jq, dR)

    # Normalization: dq_hat/dq = (I - qh qh^T) / |q|.
    dq = (dqh - qh * np.sum(dqh * qh, axis=1, keepdims=True)) / norm
    return dq, dlog_scales
