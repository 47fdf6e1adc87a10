"""CPU differentiable splatting renderer.

Gaussians are projected through the local camera Jacobian onto the image
plane, depth-sorted by center, and alpha-composited front to back. The
backward pass returns exact gradients of any image-space objective with
respect to every Gaussian parameter (positions, quaternions, log-scales,
opacity logits, colors). Depth output is alpha-weighted expected depth
and carries no gradient.

Speed/robustness choices, kept identical in forward and backward so
finite-difference checks see one consistent function: the 2D covariance
diagonal is floored by 0.3 px^2, evaluation is restricted to each splat's
3-sigma ellipse, and contributions below 1/255 opacity are clipped.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import _composite
from .core import CameraModel, GaussianCloud, GaussianPrimitive, InvalidInputError, sigmoid
from .regularizers import GradientSet
from .ssim import ssim

log = logging.getLogger(__name__)

COV2D_FLOOR = 0.3     # px^2 added to the projected covariance diagonal
DEFAULT_NEAR = 0.01
LAMBDA_DSSIM = 0.2


@dataclass(frozen=True)
class RenderedFrame:
    """Color, alpha-weighted expected depth, and accumulated opacity."""

    color: np.ndarray   # (H,W,3) in [0,1]
    depth: np.ndarray   # (H,W), world units; 0 where nothing was hit
    alpha: np.ndarray   # (H,W) in [0,1]


@dataclass
class RenderRecord:
    """Everything the backward pass needs to replay a forward render."""

    cam: CameraModel
    n_total: int
    visible: np.ndarray       # indices into the cloud, (M,)
    order: np.ndarray         # front-to-back order over visible gaussians
    mean2d: np.ndarray        # (M,2)
    cov2d: np.ndarray         # (M,2,2)
    inv_cov: np.ndarray       # (M,2,2)
    radii: np.ndarray         # (M,2)
    depths: np.ndarray        # (M,)
    p_cam: np.ndarray         # (M,3)
    jac: np.ndarray           # (M,2,3)
    sigma_cam: np.ndarray     # (M,3,3)
    rot_mats: np.ndarray      # (M,3,3)
    s2: np.ndarray            # (M,3) squared activated scales
    rotations: np.ndarray     # (M,4) raw quaternions
    alpha_base: np.ndarray    # (M,)
    colors: np.ndarray        # (M,3)
    bg: np.ndarray            # (3,)
    trans_final: np.ndarray   # (H,W)
    last_pos: np.ndarray      # (H,W)
    n_culled: int


def project_gaussian(g: GaussianPrimitive, cam: CameraModel,
                     near: float = DEFAULT_NEAR):
    """Project one Gaussian: (2D mean, 2x2 covariance, center depth).

    Returns None when the center is behind the near plane (culled).
    """
    cloud = GaussianCloud.from_primitives([g])
    data = _project(cloud, cam, near)
    if len(data["visible"]) == 0:
        return None
    return data["mean2d"][0], data["cov2d"][0], float(data["depths"][0])


def _project(cloud: GaussianCloud, cam: CameraModel, near: float) -> dict:
    from .core import assemble_covariances, quats_to_rotation_matrices

    Wc = cam.rotation_matrix
    p_cam = cloud.positions @ Wc.T + cam.translation
    visible = np.flatnonzero(p_cam[:, 2] > near)
    p_cam = p_cam[visible]
    x, y, z = p_cam.T

    rot_mats = quats_to_rotation_matrices(cloud.rotations[visible]) \
        if len(visible) else np.zeros((0, 3, 3))
    s2 = np.exp(2.0 * cloud.log_scales[visible])
    sigma = np.einsum("nab,nb,ncb->nac", rot_mats, s2, rot_mats)
    sigma_cam = np.einsum("ab,nbc,dc->nad", Wc, sigma, Wc)

    inv_z = 1.0 / z if len(z) else z
    jac = np.zeros((len(visible), 2, 3))
    jac[:, 0, 0] = cam.fx * inv_z
    jac[:, 0, 2] = -cam.fx * x * inv_z * inv_z
    jac[:, 1, 1] = cam.fy * inv_z
    jac[:, 1, 2] = -cam.fy * y * inv_z * inv_z

    cov2d = np.einsum("nab,nbc,ndc->nad", jac, sigma_cam, jac)
    cov2d[:, 0, 0] += COV2D_FLOOR
    cov2d[:, 1, 1] += COV2D_FLOOR

    mean2d = np.stack([cam.fx * x * inv_z + cam.cx,
                       cam.fy * y * inv_z + cam.cy], axis=1) \
        if len(visible) else np.zeros((0, 2))

    det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] ** 2
    inv_cov = np.empty_like(cov2d)
    if len(visible):
        inv_cov[:, 0, 0] = cov2d[:, 1, 1] / det
        inv_cov[:, 1, 1] = cov2d[:, 0, 0] / det
        inv_cov[:, 0, 1] = inv_cov[:, 1, 0] = -cov2d[:, 0, 1] / det

    radii = 3.0 * np.sqrt(np.maximum(
        np.stack([cov2d[:, 0, 0], cov2d[:, 1, 1]], axis=1), 0.0))

    return dict(visible=visible, p_cam=p_cam, rot_mats=rot_mats, s2=s2,
                sigma_cam=sigma_cam, jac=jac, cov2d=cov2d, inv_cov=inv_cov,
                mean2d=mean2d, radii=radii, depths=z,
                n_culled=len(cloud) - len(visible))


def render(cloud: GaussianCloud, cam: CameraModel, bg=(0.0, 0.0, 0.0),
           near: float = DEFAULT_NEAR, record: bool = False):
    """Render a camera view; with ``record`` also return backward state."""
    bg = np.asarray(bg, dtype=np.float64).reshape(3)
    data = _project(cloud, cam, near)
    if data["n_culled"]:
        log.debug("culled %d/%d gaussians behind the near plane",
                  data["n_culled"], len(cloud))
    order = np.argsort(data["depths"], kind="stable").astype(np.int64)
    alpha_base = np.asarray(sigmoid(cloud.opacity_logits[data["visible"]])).reshape(-1)
    colors = np.ascontiguousarray(cloud.colors[data["visible"]])

    color, depth_num, alpha_img, trans, last_pos = _composite.composite_forward(
        order, np.ascontiguousarray(data["mean2d"]),
        np.ascontiguousarray(data["inv_cov"]),
        np.ascontiguousarray(data["radii"]), colors,
        np.ascontiguousarray(alpha_base),
        np.ascontiguousarray(data["depths"]),
        cam.height, cam.width, bg)

    with np.errstate(invalid="ignore", divide="ignore"):
        depth = np.where(alpha_img > 0.0, depth_num / alpha_img, 0.0)
    frame = RenderedFrame(color=color, depth=depth, alpha=alpha_img)
    if not record:
        return frame
    rec = RenderRecord(
        cam=cam, n_total=len(cloud), visible=data["visible"], order=order,
        mean2d=data["mean2d"], cov2d=data["cov2d"], inv_cov=data["inv_cov"],
        radii=data["radii"], depths=data["depths"], p_cam=data["p_cam"],
        jac=data["jac"], sigma_cam=data["sigma_cam"], rot_mats=data["rot_mats"],
        s2=data["s2"], rotations=cloud.rotations[data["visible"]],
        alpha_base=alpha_base, colors=colors, bg=bg, trans_final=trans,
        last_pos=last_pos, n_culled=data["n_culled"])
    return frame, rec


def backward(rec: RenderRecord, d_color: np.ndarray,
             d_alpha: np.ndarray | None = None) -> GradientSet:
    """Pull image-space gradients back onto all Gaussian parameters.

    Culled (invisible) Gaussians receive exactly zero gradient.
    """
    from .core import quats_rotation_with_derivatives

    cam = rec.cam
    d_color = np.ascontiguousarray(d_color, dtype=np.float64)
    if d_color.shape != (cam.height, cam.width, 3):
        raise InvalidInputError("color gradient image has wrong shape")
    if d_alpha is None:
        d_alpha = np.zeros((cam.height, cam.width))
    d_alpha = np.ascontiguousarray(d_alpha, dtype=np.float64)

    grads = GradientSet.zeros(rec.n_total)
    m = len(rec.visible)
    if m == 0:
        return grads

    d_mean2d, d_invcov_flat, d_colors, d_alpha_base = _composite.composite_backward(
        rec.order, np.ascontiguousarray(rec.mean2d),
        np.ascontiguousarray(rec.inv_cov), np.ascontiguousarray(rec.radii),
        rec.colors, np.ascontiguousarray(rec.alpha_base),
        np.ascontiguousarray(rec.depths), cam.height, cam.width, rec.bg,
        rec.trans_final, rec.last_pos, d_color, d_alpha)

    # d/d(inverse covariance) -> d/d(covariance): dC = -M^T dM M^T.
    d_m = np.empty((m, 2, 2))
    d_m[:, 0, 0] = d_invcov_flat[:, 0]
    d_m[:, 0, 1] = d_m[:, 1, 0] = 0.5 * d_invcov_flat[:, 1]
    d_m[:, 1, 1] = d_invcov_flat[:, 2]
    g2 = -np.einsum("nab,nbc,ncd->nad", rec.inv_cov, d_m, rec.inv_cov)

    # Through the projected covariance J Sigma_cam J^T + floor.
    d_jac = 2.0 * np.einsum("nab,nbc,ncd->nad", g2, rec.jac, rec.sigma_cam)
    d_sigma_cam = np.einsum("nba,nbc,ncd->nad", rec.jac, g2, rec.jac)
    Wc = cam.rotation_matrix
    g3 = np.einsum("ba,nbc,cd->nad", Wc, d_sigma_cam, Wc)

    # Through the 2D mean (its Jacobian wrt p_cam is exactly jac) and the
    # p_cam dependence of jac itself.
    d_p_cam = np.einsum("nab,na->nb", rec.jac, d_mean2d)
    x, y, z = rec.p_cam.T
    inv_z2 = 1.0 / (z * z)
    d_p_cam[:, 0] += d_jac[:, 0, 2] * (-cam.fx * inv_z2)
    d_p_cam[:, 1] += d_jac[:, 1, 2] * (-cam.fy * inv_z2)
    d_p_cam[:, 2] += (d_jac[:, 0, 0] * (-cam.fx * inv_z2)
                      + d_jac[:, 0, 2] * (2.0 * cam.fx * x * inv_z2 / z)
                      + d_jac[:, 1, 1] * (-cam.fy * inv_z2)
                      + d_jac[:, 1, 2] * (2.0 * cam.fy * y * inv_z2 / z))
    d_positions = d_p_cam @ Wc

    # Through Sigma = R diag(s^2) R^T.
    d_rot_mat = 2.0 * np.einsum("nab,nbc->nac", g3, rec.rot_mats) * rec.s2[:, None, :]
    d_diag = np.einsum("nba,nbc,nca->na", rec.rot_mats, g3, rec.rot_mats)
    d_log_scales = d_diag * 2.0 * rec.s2

    _, dR_draw = quats_rotation_with_derivatives(rec.rotations)
    d_rotations = np.einsum("nlab,nab->nl", dR_draw, d_rot_mat)

    ab = rec.alpha_base
    d_opacity = d_alpha_base * ab * (1.0 - ab)

    grads.positions[rec.visible] = d_positions
    grads.rotations[rec.visible] = d_rotations
    grads.log_scales[rec.visible] = d_log_scales
    grads.opacity_logits[rec.visible] = d_opacity
    grads.colors[rec.visible] = d_colors
    return grads


def photometric_loss(rendered, target, lambda_dssim: float = LAMBDA_DSSIM):
    """L1 + structural-dissimilarity loss with its per-pixel gradient.

    loss = (1 - lam) * mean|r - t| + lam * (1 - ssim(r, t)) / 2
    """
    r = rendered.color if isinstance(rendered, RenderedFrame) else np.asarray(rendered)
    t = np.asarray(target, dtype=np.float64)
    if r.shape != t.shape:
        raise InvalidInputError(f"image shapes differ: {r.shape} vs {t.shape}")
    diff = r - t
    l1 = float(np.mean(np.abs(diff)))
    d_l1 = np.sign(diff) / diff.size
    s, d_s = ssim(r, t, with_gradient=True)
    loss = (1.0 - lambda_dssim) * l1 + lambda_dssim * (1.0 - s) / 2.0
    grad = (1.0 - lambda_dssim) * d_l1 - (lambda_dssim / 2.0) * d_s
    return loss, grad
