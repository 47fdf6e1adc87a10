"""Core geometric types: Gaussian primitives, point clouds, meshes, cameras.

Everything here is an immutable value object (arrays are copied on
construction and marked read-only), so instances can be shared freely
across worker threads. The trainer keeps its own writable parameter
arrays and materializes GaussianCloud views on demand.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class GgsError(Exception):
    """Base class for all errors raised by this package."""


class InvalidInputError(GgsError, ValueError):
    """An argument violates a documented precondition."""


class ConfigError(GgsError, ValueError):
    """A configuration file or flag combination is invalid."""


def _readonly(a: np.ndarray, dtype=np.float64) -> np.ndarray:
    out = np.array(a, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


# ---------------------------------------------------------------------------
# Quaternion math. Convention: (w, x, y, z), scalar first. Quaternions are
# renormalized lazily at the point of use, never projected in the optimizer.
# ---------------------------------------------------------------------------

def quat_normalize(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q)
    if n == 0.0 or not np.isfinite(n):
        raise InvalidInputError("quaternion has zero or non-finite norm")
    return q / n


def quat_to_rotation_matrix(q) -> np.ndarray:
    """Rotation matrix of a (w,x,y,z) quaternion; renormalizes internally."""
    w, x, y, z = quat_normalize(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def quats_to_rotation_matrices(q: np.ndarray) -> np.ndarray:
    """Batched version: (N,4) quaternions -> (N,3,3) rotation matrices."""
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q, axis=1)
    if np.any(n == 0.0) or not np.all(np.isfinite(n)):
        raise InvalidInputError("quaternion batch contains zero/non-finite norms")
    w, x, y, z = (q / n[:, None]).T
    R = np.empty((len(q), 3, 3))
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


def _rotation_derivative_wrt_unit_quat(qn: np.ndarray) -> np.ndarray:
    """d(R)/d(q) for a unit quaternion, shape (4, 3, 3)."""
    w, x, y, z = qn
    dw = 2.0 * np.array([[0, -z, y], [z, 0, -x], [-y, x, 0]], dtype=np.float64)
    dx = 2.0 * np.array([[0, y, z], [y, -2 * x, -w], [z, w, -2 * x]], dtype=np.float64)
    dy = 2.0 * np.array([[-2 * y, x, w], [x, 0, z], [-w, z, -2 * y]], dtype=np.float64)
    dz = 2.0 * np.array([[-2 * z, -w, x], [w, -2 * z, y], [x, y, 0]], dtype=np.float64)
    return np.stack([dw, dx, dy, dz])


def quat_rotation_with_derivative(q_raw) -> tuple[np.ndarray, np.ndarray]:
    """Rotation matrix of a raw (unnormalized) quaternion plus dR/dq_raw.

    The derivative (4,3,3) includes the normalization chain, so it is the
    correct Jacobian for gradient descent on unnormalized quaternions.
    """
    q_raw = np.asarray(q_raw, dtype=np.float64)
    n = np.linalg.norm(q_raw)
    if n == 0.0 or not np.isfinite(n):
        raise InvalidInputError("quaternion has zero or non-finite norm")
    qn = q_raw / n
    dR_dqn = _rotation_derivative_wrt_unit_quat(qn)
    # dqn/dqraw = (I - qn qn^T) / n
    proj = (np.eye(4) - np.outer(qn, qn)) / n
    dR_draw = np.einsum("lj,jab->lab", proj, dR_dqn)
    R = quat_to_rotation_matrix(qn)
    return R, dR_draw


def quats_rotation_with_derivatives(q_raw: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Batched quat_rotation_with_derivative: (N,4) -> ((N,3,3), (N,4,3,3))."""
    q_raw = np.asarray(q_raw, dtype=np.float64)
    n = np.linalg.norm(q_raw, axis=1)
    if np.any(n == 0.0) or not np.all(np.isfinite(n)):
        raise InvalidInputError("quaternion batch contains zero/non-finite norms")
    qn = q_raw / n[:, None]
    w, x, y, z = qn.T
    m = len(qn)
    zero = np.zeros(m)
    dR = np.empty((m, 4, 3, 3))
    dR[:, 0] = 2.0 * np.stack([zero, -z, y, z, zero, -x, -y, x, zero],
                              axis=1).reshape(m, 3, 3)
    dR[:, 1] = 2.0 * np.stack([zero, y, z, y, -2 * x, -w, z, w, -2 * x],
                              axis=1).reshape(m, 3, 3)
    dR[:, 2] = 2.0 * np.stack([-2 * y, x, w, x, zero, z, -w, z, -2 * y],
                              axis=1).reshape(m, 3, 3)
    dR[:, 3] = 2.0 * np.stack([-2 * z, -w, x, w, -2 * z, y, x, y, zero],
                              axis=1).reshape(m, 3, 3)
    proj = (np.eye(4)[None, :, :] - qn[:, :, None] * qn[:, None, :]) / n[:, None, None]
    dR_draw = np.einsum("nlj,njab->nlab", proj, dR)
    return quats_to_rotation_matrices(qn), dR_draw


def rotation_matrix_to_quat(R: np.ndarray) -> np.ndarray:
    """Inverse of quat_to_rotation_matrix (w,x,y,z), positive w."""
    R = np.asarray(R, dtype=np.float64)
    t = np.trace(R)
    if t > 0:
        s = np.sqrt(t + 1.0) * 2
        q = np.array([0.25 * s, (R[2, 1] - R[1, 2]) / s,
                      (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s])
    else:
        i = int(np.argmax(np.diag(R)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = np.sqrt(max(R[i, i] - R[j, j] - R[k, k] + 1.0, 0.0)) * 2
        q = np.empty(4)
        q[0] = (R[k, j] - R[j, k]) / s
        q[1 + i] = 0.25 * s
        q[1 + j] = (R[j, i] + R[i, j]) / s
        q[1 + k] = (R[k, i] + R[i, k]) / s
    if q[0] < 0:
        q = -q
    return q / np.linalg.norm(q)


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out if out.ndim else float(out)


def logit(p: float) -> float:
    return float(np.log(p / (1.0 - p)))


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GaussianPrimitive:
    """One anisotropic 3D Gaussian: the optimizable unit of the pipeline.

    Scales are stored as logs (activated scales exp(log_scale) stay
    positive under unconstrained gradient steps) and opacity as a logit.
    """

    position: np.ndarray      # (3,)
    rotation: np.ndarray      # (4,) quaternion, (w,x,y,z)
    log_scale: np.ndarray     # (3,)
    opacity_logit: float
    color: np.ndarray         # (3,) RGB in [0,1]

    def __post_init__(self):
        object.__setattr__(self, "position", _readonly(self.position).reshape(3))
        object.__setattr__(self, "rotation", _readonly(self.rotation).reshape(4))
        object.__setattr__(self, "log_scale", _readonly(self.log_scale).reshape(3))
        object.__setattr__(self, "color", _readonly(self.color).reshape(3))
        object.__setattr__(self, "opacity_logit", float(self.opacity_logit))
        if np.linalg.norm(self.rotation) == 0.0:
            raise InvalidInputError("primitive rotation quaternion has zero norm")

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scale)

    @property
    def opacity(self) -> float:
        return float(sigmoid(self.opacity_logit))

    @property
    def rotation_matrix(self) -> np.ndarray:
        return quat_to_rotation_matrix(self.rotation)


class GaussianCloud:
    """Ordered collection of Gaussian primitives, stored as flat arrays.

    Index order is stable through save/load round trips; all arrays are
    read-only views.
    """

    def __init__(self, positions, rotations, log_scales, opacity_logits, colors):
        self.positions = _readonly(positions)
        self.rotations = _readonly(rotations)
        self.log_scales = _readonly(log_scales)
        self.opacity_logits = _readonly(opacity_logits)
        self.colors = _readonly(colors)
        n = len(self.positions)
        if (self.positions.shape != (n, 3) or self.rotations.shape != (n, 4)
                or self.log_scales.shape != (n, 3)
                or self.opacity_logits.shape != (n,) or self.colors.shape != (n, 3)):
            raise InvalidInputError("gaussian cloud arrays have inconsistent shapes")

    @classmethod
    def from_primitives(cls, primitives) -> "GaussianCloud":
        prims = list(primitives)
        return cls(
            np.array([p.position for p in prims]).reshape(-1, 3),
            np.array([p.rotation for p in prims]).reshape(-1, 4),
            np.array([p.log_scale for p in prims]).reshape(-1, 3),
            np.array([p.opacity_logit for p in prims]).reshape(-1),
            np.array([p.color for p in prims]).reshape(-1, 3),
        )

    def __len__(self) -> int:
        return len(self.positions)

    def primitive(self, i: int) -> GaussianPrimitive:
        return GaussianPrimitive(self.positions[i], self.rotations[i],
                                 self.log_scales[i], float(self.opacity_logits[i]),
                                 self.colors[i])

    @property
    def primitives(self) -> list[GaussianPrimitive]:
        return [self.primitive(i) for i in range(len(self))]

    def __iter__(self):
        return (self.primitive(i) for i in range(len(self)))

    def replace(self, **kwargs) -> "GaussianCloud":
        vals = {k: kwargs.get(k, getattr(self, k)) for k in
                ("positions", "rotations", "log_scales", "opacity_logits", "colors")}
        return GaussianCloud(**vals)

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    @property
    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logits)


class DensePointCloud:
    """Oriented point set: positions plus unit normals, geometry only."""

    def __init__(self, positions, normals):
        self.positions = _readonly(positions)
        self.normals = _readonly(normals)
        if self.positions.ndim != 2 or self.positions.shape[1] != 3:
            raise InvalidInputError("positions must be (N,3)")
        if self.normals.shape != self.positions.shape:
            raise InvalidInputError("normals must match positions in shape")
        if len(self.normals):
            norms = np.linalg.norm(self.normals, axis=1)
            if np.any(np.abs(norms - 1.0) > 1e-6):
                raise InvalidInputError("normals must be unit length (within 1e-6)")

    def __len__(self) -> int:
        return len(self.positions)


class TriangleMesh:
    """Indexed triangle mesh; faces must reference valid, distinct vertices."""

    def __init__(self, vertices, faces):
        self.vertices = _readonly(np.asarray(vertices, dtype=np.float64).reshape(-1, 3))
        f = np.array(faces, dtype=np.int64, copy=True).reshape(-1, 3)
        if len(f):
            if f.min() < 0 or f.max() >= len(self.vertices):
                raise InvalidInputError("face index out of range")
            degenerate = ((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2])
                          | (f[:, 0] == f[:, 2]))
            if np.any(degenerate):
                raise InvalidInputError(f"{int(degenerate.sum())} degenerate faces")
        f.setflags(write=False)
        self.faces = f

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def is_empty(self) -> bool:
        return len(self.faces) == 0


@dataclass(frozen=True)
class CameraModel:
    """Pinhole camera: pixel intrinsics plus rigid world-to-camera pose.

    Projection convention: x_cam = R @ x_world + t, pixel centers at
    integer coordinates, u = fx*x/z + cx (u is the column coordinate).
    """

    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray     # (4,) quaternion, world-to-camera
    translation: np.ndarray  # (3,)
    width: int
    height: int

    def __post_init__(self):
        object.__setattr__(self, "rotation", _readonly(self.rotation).reshape(4))
        object.__setattr__(self, "translation", _readonly(self.translation).reshape(3))
        for name in ("fx", "fy", "cx", "cy"):
            object.__setattr__(self, name, float(getattr(self, name)))
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))
        if self.fx <= 0 or self.fy <= 0:
            raise InvalidInputError("focal lengths must be positive")
        if not (0 < self.cx < self.width) or not (0 < self.cy < self.height):
            raise InvalidInputError("principal point must lie inside the image")

    @property
    def rotation_matrix(self) -> np.ndarray:
        return quat_to_rotation_matrix(self.rotation)

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation_matrix.T @ self.translation

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        return pts @ self.rotation_matrix.T + self.translation

    def project(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """World points -> ((N,2) pixel coords (u,v), (N,) camera depth z)."""
        pc = self.world_to_camera(points)
        z = pc[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.fx * pc[:, 0] / z + self.cx
            v = self.fy * pc[:, 1] / z + self.cy
        return np.stack([u, v], axis=1), z

    def back_project(self, pixels: np.ndarray, depths: np.ndarray) -> np.ndarray:
        """Pixel (u,v) coords + camera depths -> world points."""
        px = np.atleast_2d(np.asarray(pixels, dtype=np.float64))
        d = np.asarray(depths, dtype=np.float64).reshape(-1)
        x = (px[:, 0] - self.cx) / self.fx * d
        y = (px[:, 1] - self.cy) / self.fy * d
        cam = np.stack([x, y, d], axis=1)
        return (cam - self.translation) @ self.rotation_matrix

    def scaled(self, factor: int) -> "CameraModel":
        """Camera for an image block-averaged by an integer factor."""
        f = int(factor)
        off = (f - 1) / 2.0
        return CameraModel(self.fx / f, self.fy / f,
                           (self.cx - off) / f, (self.cy - off) / f,
                           self.rotation, self.translation,
                           self.width // f, self.height // f)


# ---------------------------------------------------------------------------
# Gaussian primitive math
# ---------------------------------------------------------------------------

def assemble_covariance(g: GaussianPrimitive) -> np.ndarray:
    """3x3 covariance R diag(s^2) R^T; exactly symmetric by construction."""
    R = g.rotation_matrix
    s2 = np.exp(2.0 * g.log_scale)
    cov = (R * s2) @ R.T
    return (cov + cov.T) / 2.0


def assemble_covariances(cloud: GaussianCloud) -> np.ndarray:
    """Batched covariance assembly: (N,3,3)."""
    R = quats_to_rotation_matrices(cloud.rotations)
    s2 = np.exp(2.0 * cloud.log_scales)
    cov = np.einsum("nab,nb,ncb->nac", R, s2, R)
    return (cov + cov.transpose(0, 2, 1)) / 2.0


def eval_density(g: GaussianPrimitive, x) -> float:
    """Unnormalized Gaussian density exp(-x^T Sigma^-1 x / 2).

    ``x`` is the offset from the Gaussian center, not a world position.
    """
    x = np.asarray(x, dtype=np.float64).reshape(3)
    cov = assemble_covariance(g)
    m = float(x @ np.linalg.solve(cov, x))
    return float(np.exp(-0.5 * m))
