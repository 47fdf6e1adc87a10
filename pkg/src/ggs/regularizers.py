"""Geometric regularizers: disk thinness, normal alignment, and the
weighted total objective with analytic gradients.

Per-cloud loss values are means over primitives, so the weights do not
need rescaling with the Gaussian count. The thinness term penalizes the
smallest activated scale of each ellipsoid; the alignment term rotates
each flattened disk's normal onto the guidance normal of its paired cloud
point. Alignment gradients flow only into the quaternion: the paired
normal is a fixed prior.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import (GaussianCloud, GaussianPrimitive, InvalidInputError,
                   quat_to_rotation_matrix, quats_rotation_with_derivatives)

DEFAULT_ALPHA = 100.0
DEFAULT_BETA = 0.1


@dataclass(frozen=True)
class LossBreakdown:
    """Per-term objective values; total = l_rgb + alpha*l_thin + beta*l_normal."""

    l_rgb: float
    l_thin: float
    l_normal: float
    total: float
    alpha: float
    beta: float


@dataclass
class GradientSet:
    """Per-Gaussian partial derivatives for all five parameter groups."""

    positions: np.ndarray       # (N,3)
    rotations: np.ndarray       # (N,4), wrt the raw (unnormalized) quaternion
    log_scales: np.ndarray      # (N,3)
    opacity_logits: np.ndarray  # (N,)
    colors: np.ndarray          # (N,3)

    @classmethod
    def zeros(cls, n: int) -> "GradientSet":
        return cls(np.zeros((n, 3)), np.zeros((n, 4)), np.zeros((n, 3)),
                   np.zeros(n), np.zeros((n, 3)))

    def __len__(self) -> int:
        return len(self.positions)

    def copy(self) -> "GradientSet":
        return GradientSet(self.positions.copy(), self.rotations.copy(),
                           self.log_scales.copy(), self.opacity_logits.copy(),
                           self.colors.copy())

    def add_scaled(self, other: "GradientSet", factor: float) -> None:
        self.positions += factor * other.positions
        self.rotations += factor * other.rotations
        self.log_scales += factor * other.log_scales
        self.opacity_logits += factor * other.opacity_logits
        self.colors += factor * other.colors

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in
                   (self.positions, self.rotations, self.log_scales,
                    self.opacity_logits, self.colors))


def loss_thin(g: GaussianPrimitive) -> float:
    """Smallest activated scale of the ellipsoid (nonnegative)."""
    return float(np.min(np.exp(g.log_scale)))


def loss_thin_cloud(cloud: GaussianCloud) -> float:
    """Mean thinness loss over all primitives."""
    if len(cloud) == 0:
        return 0.0
    return float(np.mean(np.min(np.exp(cloud.log_scales), axis=1)))


def disk_normal(g: GaussianPrimitive) -> np.ndarray:
    """Unit normal of the flattened disk: the axis of minimum scale.

    Scale ties resolve to the lowest axis index.
    """
    R = quat_to_rotation_matrix(g.rotation)
    return R[:, int(np.argmin(g.log_scale))]


def disk_normals(cloud: GaussianCloud) -> np.ndarray:
    """(N,3) disk normals for a whole cloud."""
    from .core import quats_to_rotation_matrices
    R = quats_to_rotation_matrices(cloud.rotations)
    k = np.argmin(cloud.log_scales, axis=1)
    return R[np.arange(len(cloud)), :, k]


def loss_normal(n, m) -> float:
    """Alignment loss 1 - |m . n| in [0,1]; zero iff (anti)parallel."""
    n = np.asarray(n, dtype=np.float64).reshape(3)
    m = np.asarray(m, dtype=np.float64).reshape(3)
    nn, nm = np.linalg.norm(n), np.linalg.norm(m)
    if nn == 0.0 or nm == 0.0:
        raise InvalidInputError("alignment loss requires nonzero vectors")
    return float(1.0 - np.abs(np.dot(m / nm, n / nn)))


def loss_normal_cloud(cloud: GaussianCloud, pairing_normals: np.ndarray) -> float:
    """Mean alignment loss over primitives against their paired normals."""
    pairing_normals = np.asarray(pairing_normals, dtype=np.float64).reshape(-1, 3)
    if len(pairing_normals) != len(cloud):
        raise InvalidInputError("pairing normals do not match Gaussian count")
    if len(cloud) == 0:
        return 0.0
    n = disk_normals(cloud)
    return float(np.mean(1.0 - np.abs(np.sum(pairing_normals * n, axis=1))))


def total_loss(l_rgb: float, cloud: GaussianCloud, pairing_normals,
               alpha: float = DEFAULT_ALPHA, beta: float = DEFAULT_BETA) -> LossBreakdown:
    """Combine the photometric term with the per-cloud regularizer means."""
    l_thin = loss_thin_cloud(cloud)
    l_norm = loss_normal_cloud(cloud, pairing_normals)
    total = l_rgb + alpha * l_thin + beta * l_norm
    return LossBreakdown(float(l_rgb), l_thin, l_norm, float(total),
                         float(alpha), float(beta))


def thinness_gradients(cloud: GaussianCloud) -> GradientSet:
    """Gradient of the mean thinness loss.

    The min() subgradient at a tie goes entirely to the lowest-index
    argmin axis.
    """
    grads = GradientSet.zeros(len(cloud))
    if len(cloud) == 0:
        return grads
    k = np.argmin(cloud.log_scales, axis=1)
    rows = np.arange(len(cloud))
    grads.log_scales[rows, k] = np.exp(cloud.log_scales[rows, k]) / len(cloud)
    return grads


def alignment_gradients(cloud: GaussianCloud, pairing_normals: np.ndarray) -> GradientSet:
    """Gradient of the mean alignment loss; flows only into quaternions."""
    pairing_normals = np.asarray(pairing_normals, dtype=np.float64).reshape(-1, 3)
    if len(pairing_normals) != len(cloud):
        raise InvalidInputError("pairing normals do not match Gaussian count")
    grads = GradientSet.zeros(len(cloud))
    n_prims = len(cloud)
    if n_prims == 0:
        return grads
    R, dR = quats_rotation_with_derivatives(cloud.rotations)
    k = np.argmin(cloud.log_scales, axis=1)
    rows = np.arange(n_prims)
    n = R[rows, :, k]                       # disk normals, (N,3)
    dots = np.sum(pairing_normals * n, axis=1)
    # d(1-|dot|)/dn = -sign(dot) * m; sign(0) kills the gradient at the
    # non-differentiable orthogonal configuration.
    dl_dn = -np.sign(dots)[:, None] * pairing_normals
    dn_dq = dR[rows, :, :, k]               # (N,4,3): column k of each dR/dq_l
    grads.rotations = np.einsum("nla,na->nl", dn_dq, dl_dn) / n_prims
    return grads


def analytic_gradients(cloud: GaussianCloud, pairing_normals,
                       photometric: GradientSet | None = None,
                       alpha: float = DEFAULT_ALPHA,
                       beta: float = DEFAULT_BETA) -> GradientSet:
    """Weighted sum of photometric and regularizer gradients.

    With both weights zero this returns exactly the photometric gradients.
    """
    total = photometric.copy() if photometric is not None else GradientSet.zeros(len(cloud))
    if len(total) != len(cloud):
        raise InvalidInputError("photometric gradients do not match Gaussian count")
    if alpha != 0.0:
        total.add_scaled(thinness_gradients(cloud), alpha)
    if beta != 0.0:
        total.add_scaled(alignment_gradients(cloud, pairing_normals), beta)
    return total
