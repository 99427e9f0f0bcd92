"""Camera geometry: poses with optimizable increments, projection, rays,
plane-induced homographies, and similarity alignment.

Conventions used everywhere in this package:

* World-to-camera ("w2c") poses: ``x_cam = R @ x_world + t``. Scene files
  store camera-to-world matrices; they are inverted on load.
* Camera frame: +x right, +y down, +z forward (points with z > 0 are in
  front of the camera).
* Pixels: ``u = fx * x/z + cx`` (column, grows right), ``v = fy * y/z + cy``
  (row, grows down). Integer coordinates land on pixel centers. The valid
  domain is the half-open rectangle [0, w) x [0, h).
* A pose is an immutable initial estimate ``(R0, t0)`` plus a 6-vector se(3)
  increment ``delta`` applied on the left: ``T_eff = exp(delta) @ T0``.
  Only ``delta`` receives gradients; R0/t0 never change after construction.
* Twist layout: ``delta = (omega, u)`` with the rotational part first.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import (
    BehindCamera,
    DegenerateConfiguration,
    DegeneratePlane,
    InsufficientPoints,
    OutOfBounds,
)
from .utils import DTYPE, as_tensor, to_numpy

_ORTHO_TOL = 1e-8


# --------------------------------------------------------------------------
# intrinsics
# --------------------------------------------------------------------------
@dataclass(frozen=True)
class Intrinsics:
    """Pinhole intrinsics. Focal lengths in pixels, principal point inside
    the image rectangle."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got {self.fx}, {self.fy}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside image rectangle")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image dimensions must be positive")

    def matrix(self) -> torch.Tensor:
        k = torch.eye(3, dtype=DTYPE)
        k[0, 0] = self.fx
        k[1, 1] = self.fy
        k[0, 2] = self.cx
        k[1, 2] = self.cy
        return k

    def inverse_matrix(self) -> torch.Tensor:
        k = torch.eye(3, dtype=DTYPE)
        k[0, 0] = 1.0 / self.fx
        k[1, 1] = 1.0 / self.fy
        k[0, 2] = -self.cx / self.fx
        k[1, 2] = -self.cy / self.fy
        return k

    def contains(self, u: float, v: float) -> bool:
        return 0.0 <= u < self.width and 0.0 <= v < self.height


# --------------------------------------------------------------------------
# se(3) exponential
# --------------------------------------------------------------------------
def _skew(w: torch.Tensor) -> torch.Tensor:
    """Skew-symmetric matrices for (..., 3) vectors -> (..., 3, 3)."""
    zero = torch.zeros_like(w[..., 0])
    rows = [
        torch.stack([zero, -w[..., 2], w[..., 1]], dim=-1),
        torch.stack([w[..., 2], zero, -w[..., 0]], dim=-1),
        torch.stack([-w[..., 1], w[..., 0], zero], dim=-1),
    ]
    return torch.stack(rows, dim=-2)


def se3_exp_rt(twist: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Exponential map of (..., 6) twists -> rotation (..., 3, 3), translation (..., 3).

    Rodrigues for the rotation, left Jacobian for the translation. Fully
    differentiable; switches to Taylor series below ||omega|| = 1e-8 so the
    coefficients (and their gradients) stay finite at zero.
    """
    twist = as_tensor(twist)
    omega, u = twist[..., :3], twist[..., 3:]
    theta2 = (omega * omega).sum(-1)
    near = theta2 < 1e-16
    # substitute a harmless value in the near-zero lanes before any sqrt /
    # division, so the unselected branch cannot poison gradients with NaN
    safe2 = torch.where(near, torch.ones_like(theta2), theta2)
    theta = torch.sqrt(safe2)
    a = torch.where(near, 1.0 - theta2 / 6.0, torch.sin(theta) / theta)
    # 2*sin^2(theta/2) == 1 - cos(theta) without the catastrophic cancellation
    # that would otherwise corrupt the first-order translation term near zero
    half_sin = torch.sin(theta / 2.0)
    b = torch.where(near, 0.5 - theta2 / 24.0, 2.0 * half_sin * half_sin / safe2)
    c = torch.where(near, 1.0 / 6.0 - theta2 / 120.0, (theta - torch.sin(theta)) / (safe2 * theta))
    k = _skew(omega)
    k2 = k @ k
    eye = torch.eye(3, dtype=twist.dtype).expand(k.shape)
    rot = eye + a[..., None, None] * k + b[..., None, None] * k2
    jac = eye + b[..., None, None] * k + c[..., None, None] * k2
    trans = (jac @ u[..., None]).squeeze(-1)
    return rot, trans


def rotation_angle(rot: torch.Tensor) -> torch.Tensor:
    """Geodesic angle (radians) of (..., 3, 3) rotation matrices.

    atan2 of (|skew part|, trace form): unlike plain arccos this keeps full
    precision for near-identity rotations, where arccos loses half the
    mantissa to the flat top of the cosine.
    """
    rot = as_tensor(rot)
    tr = rot[..., 0, 0] + rot[..., 1, 1] + rot[..., 2, 2]
    vee = torch.stack(
        [
            rot[..., 2, 1] - rot[..., 1, 2],
            rot[..., 0, 2] - rot[..., 2, 0],
            rot[..., 1, 0] - rot[..., 0, 1],
        ],
        dim=-1,
    )
    sin = 0.5 * torch.linalg.norm(vee, dim=-1)
    cos = torch.clamp((tr - 1.0) / 2.0, -1.0, 1.0)
    return torch.atan2(sin, cos)


# --------------------------------------------------------------------------
# pose
# --------------------------------------------------------------------------
class Pose:
    """World-to-camera pose: frozen initial estimate + optimizable se(3) delta.

    ``rotation``/``translation`` hold the initial estimate and never receive
    gradients. ``delta`` is a leaf tensor; pass it to an optimizer to refine
    the pose. ``effective()`` composes ``exp(delta)`` on the left.
    """

    def __init__(self, rotation, translation, delta=None, trainable: bool = True):
        rot = as_tensor(rotation).detach().clone()
        if rot.shape != (3, 3):
            raise ValueError(f"rotation must be 3x3, got {tuple(rot.shape)}")
        err = (rot @ rot.T - torch.eye(3, dtype=DTYPE)).abs().max().item()
        if err > _ORTHO_TOL or abs(torch.linalg.det(rot).item() - 1.0) > _ORTHO_TOL:
            raise ValueError(f"rotation not orthonormal within {_ORTHO_TOL} (err={err:.2e})")
        tr = as_tensor(translation).detach().clone().reshape(3)
        self.rotation = rot
        self.translation = tr
        if delta is None:
            delta = torch.zeros(6, dtype=DTYPE)
        self.delta = as_tensor(delta).detach().clone().reshape(6).requires_grad_(trainable)

    @classmethod
    def identity(cls, trainable: bool = True) -> "Pose":
        return cls(torch.eye(3, dtype=DTYPE), torch.zeros(3, dtype=DTYPE), trainable=trainable)

    @classmethod
    def from_w2c(cls, matrix, trainable: bool = True) -> "Pose":
        m = as_tensor(matrix).reshape(4, 4)
        return cls(m[:3, :3], m[:3, 3], trainable=trainable)

    @classmethod
    def from_c2w(cls, matrix, trainable: bool = True) -> "Pose":
        m = as_tensor(matrix).reshape(4, 4)
        r_c2w, c = m[:3, :3], m[:3, 3]
        return cls(r_c2w.T, -(r_c2w.T @ c), trainable=trainable)

    def effective(self) -> tuple[torch.Tensor, torch.Tensor]:
        """(R, t) of exp(delta) @ T0; differentiable w.r.t. delta."""
        rot_d, t_d = se3_exp_rt(self.delta)
        return rot_d @ self.rotation, (rot_d @ self.translation) + t_d

    def matrix(self) -> torch.Tensor:
        r, t = self.effective()
        m = torch.eye(4, dtype=DTYPE)
        m[:3, :3] = r.detach()
        m[:3, 3] = t.detach()
        return m

    def c2w_matrix(self) -> torch.Tensor:
        r, t = self.effective()
        m = torch.eye(4, dtype=DTYPE)
        m[:3, :3] = r.detach().T
        m[:3, 3] = (-r.detach().T @ t.detach())
        return m

    def camera_center(self) -> torch.Tensor:
        r, t = self.effective()
        return -(r.T @ t)

    def bake(self) -> "Pose":
        """New pose with the current delta folded into the initial estimate."""
        r, t = self.effective()
        return Pose(r.detach(), t.detach(), trainable=self.delta.requires_grad)

    def perturbed(self, twist) -> "Pose":
        """New pose with exp(twist) composed on the left of the *initial*
        estimate (delta reset to zero). Used to inject synthetic noise."""
        rot_d, t_d = se3_exp_rt(as_tensor(twist))
        return Pose(
            rot_d @ self.rotation,
            rot_d @ self.translation + t_d,
            trainable=self.delta.requires_grad,
        )

    def __repr__(self):
        return f"Pose(center={to_numpy(self.camera_center()).round(4).tolist()})"


def se3_exp(twist) -> Pose:
    """Public exponential map: twist (6,) -> rigid Pose (zero delta)."""
    rot, trans = se3_exp_rt(as_tensor(twist).reshape(6))
    return Pose(rot, trans, trainable=False)


def look_at(eye, target, up=(0.0, 0.0, 1.0), trainable: bool = True) -> Pose:
    """W2c pose for a camera at ``eye`` looking at ``target``.

    Camera +z points at the target; +y is world-down projected into the
    image so the rendered horizon is upright for a world +z up vector.
    """
    eye = as_tensor(eye).reshape(3)
    fwd = as_tensor(target).reshape(3) - eye
    fwd = fwd / torch.linalg.norm(fwd)
    up_t = as_tensor(up).reshape(3)
    right = torch.linalg.cross(fwd, up_t)
    n = torch.linalg.norm(right)
    if n < 1e-9:  # looking straight along up: pick any perpendicular
        up_t = as_tensor((1.0, 0.0, 0.0))
        right = torch.linalg.cross(fwd, up_t)
        n = torch.linalg.norm(right)
    right = right / n
    down = torch.linalg.cross(fwd, right)
    rot = torch.stack([right, down, fwd], dim=0)
    return Pose(rot, -(rot @ eye), trainable=trainable)


# --------------------------------------------------------------------------
# rays and projection
# --------------------------------------------------------------------------
@dataclass
class Ray:
    """Origin + unit direction, world frame."""

    origin: torch.Tensor
    direction: torch.Tensor

    def __post_init__(self):
        self.origin = as_tensor(self.origin).reshape(3)
        self.direction = as_tensor(self.direction).reshape(3)
        n = torch.linalg.norm(self.direction.detach())
        if abs(float(n) - 1.0) > 1e-9:
            raise ValueError(f"ray direction must be unit length, got |d|={float(n)}")

    def at(self, t) -> torch.Tensor:
        return self.origin + as_tensor(t) * self.direction


def project_points(
    points: torch.Tensor, pose: Pose, intrinsics: Intrinsics, eps_z: float = 1e-6
) -> tuple[torch.Tensor, torch.Tensor]:
    """Batched pinhole projection with a validity mask instead of exceptions.

    Returns (pixels (N, 2), valid (N,)). Rows with camera depth <= eps_z are
    marked invalid and get zeros; the division is guarded so no gradient or
    NaN leaks from the masked lanes.
    """
    pts = as_tensor(points).reshape(-1, 3)
    r, t = pose.effective()
    cam = pts @ r.T + t
    z = cam[:, 2]
    valid = z > eps_z
    safe_z = torch.where(valid, z, torch.ones_like(z))
    u = intrinsics.fx * cam[:, 0] / safe_z + intrinsics.cx
    v = intrinsics.fy * cam[:, 1] / safe_z + intrinsics.cy
    pix = torch.stack([u, v], dim=-1)
    pix = torch.where(valid[:, None], pix, torch.zeros_like(pix))
    return pix, valid


def project(point, pose: Pose, intrinsics: Intrinsics, eps_z: float = 1e-6) -> torch.Tensor:
    """Project world point(s) to pixels; raises BehindCamera if any depth <= eps_z.

    Accepts (3,) or (N, 3); pixels may fall outside the image rectangle
    (callers decide whether that matters).
    """
    pts = as_tensor(point)
    single = pts.ndim == 1
    pix, valid = project_points(pts, pose, intrinsics, eps_z)
    if not bool(valid.all()):
        raise BehindCamera(f"{int((~valid).sum())} point(s) at depth <= {eps_z}")
    return pix[0] if single else pix


def cast_rays(
    pixels: torch.Tensor, pose: Pose, intrinsics: Intrinsics
) -> tuple[torch.Tensor, torch.Tensor]:
    """Batched inverse of projection: pixel (N, 2) -> (origins (N, 3), unit dirs (N, 3)).

    Raises OutOfBounds if any pixel leaves [0, w) x [0, h). Differentiable
    w.r.t. the pose delta.
    """
    pix = as_tensor(pixels).reshape(-1, 2)
    u, v = pix[:, 0], pix[:, 1]
    w, h = intrinsics.width, intrinsics.height
    with torch.no_grad():
        bad = (u < 0) | (u >= w) | (v < 0) | (v >= h)
        if bool(bad.any()):
            i = int(bad.nonzero()[0, 0])
            raise OutOfBounds(
                f"pixel ({float(u[i])}, {float(v[i])}) outside [0,{w}) x [0,{h})"
            )
    d_cam = torch.stack(
        [(u - intrinsics.cx) / intrinsics.fx, (v - intrinsics.cy) / intrinsics.fy, torch.ones_like(u)],
        dim=-1,
    )
    r, t = pose.effective()
    d_world = d_cam @ r  # == (r.T @ d_cam.T).T
    d_world = d_world / torch.linalg.norm(d_world, dim=-1, keepdim=True)
    center = -(r.T @ t)
    return center.expand_as(d_world).reshape(-1, 3), d_world


def cast_ray(pixel, pose: Pose, intrinsics: Intrinsics) -> Ray:
    """Ray through one pixel. See cast_rays for the batched form."""
    origins, dirs = cast_rays(as_tensor(pixel).reshape(1, 2), pose, intrinsics)
    return Ray(origins[0], dirs[0])


# --------------------------------------------------------------------------
# plane-induced homography
# --------------------------------------------------------------------------
@dataclass
class PlanePatch:
    """Local tangent plane at a surface point, expressed in the *reference*
    camera frame (view i): n . p + offset = 0 for camera-frame points p.
    ``center_pixel`` is the patch center in view i, ``half_extent`` the patch
    half width in pixels (an 11x11 patch has half_extent 5)."""

    normal: torch.Tensor
    offset: torch.Tensor
    center_pixel: torch.Tensor
    half_extent: int

    def __post_init__(self):
        self.normal = as_tensor(self.normal).reshape(3)
        self.offset = as_tensor(self.offset).reshape(())
        self.center_pixel = as_tensor(self.center_pixel).reshape(2)


def plane_homography(
    pose_i: Pose,
    pose_j: Pose,
    k_i: Intrinsics,
    k_j: Intrinsics,
    plane: PlanePatch,
    eps_d: float = 1e-9,
) -> torch.Tensor:
    """Homography induced by a 3D plane, mapping view-j pixels to view-i pixels.

    The plane is given in the reference (view-i) camera frame as
    ``n . p + d = 0``; it is re-expressed in the j frame internally. With
    ``x_i = R_rel x_j + t_rel`` (relative rigid motion between the two camera
    frames), the map is ``H = K_i (R_rel - t_rel n_j^T / d_j) K_j^{-1}`` up to
    scale, applied to homogeneous pixels.

    Raises DegeneratePlane when the plane passes through either camera center
    (|d| <= eps_d on either side); the induced map is undefined there.
    """
    d_i = plane.offset
    if abs(float(as_tensor(d_i).detach())) <= eps_d:
        raise DegeneratePlane(f"plane offset |d|={float(as_tensor(d_i).detach()):.3e} <= {eps_d}")
    r_i, t_i = pose_i.effective()
    r_j, t_j = pose_j.effective()
    r_rel = r_i @ r_j.T
    t_rel = t_i - r_rel @ t_j
    n_i = plane.normal
    n_j = r_rel.T @ n_i
    d_j = d_i + n_i @ t_rel
    if abs(float(d_j.detach())) <= eps_d:
        raise DegeneratePlane(f"plane through target camera center (|d_j|={float(d_j.detach()):.3e})")
    mid = r_rel - torch.outer(t_rel, n_j) / d_j
    return k_i.matrix() @ mid @ k_j.inverse_matrix()


def apply_homography(h: torch.Tensor, pixels: torch.Tensor) -> torch.Tensor:
    """Apply a 3x3 homography to (N, 2) pixels (homogeneous normalize)."""
    pix = as_tensor(pixels).reshape(-1, 2)
    ones = torch.ones(pix.shape[0], 1, dtype=pix.dtype)
    hom = torch.cat([pix, ones], dim=-1) @ h.T
    return hom[:, :2] / hom[:, 2:3]


# --------------------------------------------------------------------------
# similarity alignment
# --------------------------------------------------------------------------
@dataclass
class Sim3:
    """Similarity transform p -> scale * R p + t (numpy, float64)."""

    scale: float
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        self.scale = float(self.scale)
        if self.scale <= 0:
            raise ValueError("scale must be positive")
        err = np.abs(self.rotation @ self.rotation.T - np.eye(3)).max()
        if err > 1e-6 or abs(np.linalg.det(self.rotation) - 1.0) > 1e-6:
            raise ValueError("rotation not orthonormal")

    @classmethod
    def identity(cls) -> "Sim3":
        return cls(1.0, np.eye(3), np.zeros(3))

    def apply(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return self.scale * (pts @ self.rotation.T) + self.translation

    def inverse(self) -> "Sim3":
        r_inv = self.rotation.T
        return Sim3(1.0 / self.scale, r_inv, -(r_inv @ self.translation) / self.scale)

    def compose(self, other: "Sim3") -> "Sim3":
        """self o other: apply ``other`` first, then ``self``."""
        return Sim3(
            self.scale * other.scale,
            self.rotation @ other.rotation,
            self.scale * (self.rotation @ other.translation) + self.translation,
        )

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.scale * self.rotation
        m[:3, 3] = self.translation
        return m


def umeyama_align(src: np.ndarray, dst: np.ndarray) -> Sim3:
    """Least-squares similarity aligning src -> dst (closed form).

    Standard SVD solution with the determinant-sign correction so the
    rotation is proper even for reflective optima. Requires >= 3
    non-collinear points; raises InsufficientPoints / DegenerateConfiguration.
    """
    src = np.asarray(src, dtype=np.float64).reshape(-1, 3)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 3)
    if src.shape != dst.shape:
        raise ValueError(f"shape mismatch {src.shape} vs {dst.shape}")
    n = src.shape[0]
    if n < 3:
        raise InsufficientPoints(f"need >= 3 points, got {n}")
    mu_s, mu_d = src.mean(0), dst.mean(0)
    x, y = src - mu_s, dst - mu_d
    cov = y.T @ x / n
    var_src = (x * x).sum() / n
    if var_src < 1e-24:
        raise DegenerateConfiguration("all source points coincide")
    u, d, vt = np.linalg.svd(cov)
    # collinear sources leave the rotation about the line undetermined
    scale_ref = float(np.sqrt((x * x).sum(1).mean()))
    sv = np.linalg.svd(x, compute_uv=False)
    if sv[1] <= 1e-9 * max(sv[0], scale_ref):
        raise DegenerateConfiguration("source points are collinear")
    s_fix = np.eye(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        s_fix[2, 2] = -1.0
    rot = u @ s_fix @ vt
    scale = float(np.trace(np.diag(d) @ s_fix) / var_src)
    if scale <= 0:
        raise DegenerateConfiguration("non-positive scale (degenerate geometry)")
    trans = mu_d - scale * (rot @ mu_s)
    return Sim3(scale, rot, trans)
