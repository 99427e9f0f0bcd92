"""Loss terms for joint field + pose optimization.

Four terms feed one objective:

    total = color + lambda_r * reproj + lambda_ncc * ncc + lambda_reg * eikonal

The reprojection term drives explicit surface intersections to agree with
feature correspondences in both views; the patch term compares image patches
warped through the local tangent plane; the color term is the volume-rendering
photometric L1; the eikonal term keeps the field a distance function.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import DegeneratePlane, InvariantViolation, NonFiniteLoss
from .fields import SdfField
from .geometry import (
    Intrinsics,
    PlanePatch,
    Pose,
    apply_homography,
    cast_rays,
    plane_homography,
    project_points,
)
from .intersection import IntersectConfig, intersect_rays, warmup_filter_batch
from .rendering import RenderConfig, render_rays
from .utils import DTYPE, as_tensor


@dataclass(frozen=True)
class LossConfig:
    lambda_r: float = 1.0
    lambda_ncc: float = 0.5
    lambda_reg: float = 0.1
    rho_max: float = 50.0  # reprojection residual clamp, pixels
    patch_half: int = 5  # 11x11 patches
    tau_var: float = 1e-4  # patch std below this is untextured -> skip
    ncc_literal_var: bool = False  # divide by Var*Var instead of sigma*sigma
    warmup_threshold: float = 0.05  # intersection-vs-rendered-depth gate


@dataclass
class Correspondence:
    view_i: int
    view_j: int
    pixel_i: np.ndarray  # (2,) float, view-i pixel
    pixel_j: np.ndarray  # (2,)
    confidence: float = 1.0

    def __post_init__(self):
        self.pixel_i = np.asarray(self.pixel_i, dtype=np.float64).reshape(2)
        self.pixel_j = np.asarray(self.pixel_j, dtype=np.float64).reshape(2)

    def swapped(self) -> "Correspondence":
        return Correspondence(
            self.view_j, self.view_i, self.pixel_j.copy(), self.pixel_i.copy(), self.confidence
        )


@dataclass
class CorrespondenceSet:
    entries: list[Correspondence] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def pair_counts(self) -> dict[tuple[int, int], int]:
        counts: dict[tuple[int, int], int] = {}
        for e in self.entries:
            key = (e.view_i, e.view_j)
            counts[key] = counts.get(key, 0) + 1
        return counts

    def validate(self, intrinsics: list[Intrinsics]) -> None:
        """Raise InvariantViolation on self-pairs, bad indices, or
        out-of-bounds pixels."""
        n = len(intrinsics)
        for idx, e in enumerate(self.entries):
            if e.view_i == e.view_j:
                raise InvariantViolation(f"correspondence {idx}: view paired with itself")
            for view, pix in ((e.view_i, e.pixel_i), (e.view_j, e.pixel_j)):
                if not 0 <= view < n:
                    raise InvariantViolation(
                        f"correspondence {idx}: view index {view} out of range [0, {n})"
                    )
                if not intrinsics[view].contains(float(pix[0]), float(pix[1])):
                    raise InvariantViolation(
                        f"correspondence {idx}: pixel {pix.tolist()} outside view {view}"
                    )

    def with_swapped_roles(self) -> "CorrespondenceSet":
        """Each entry plus its role-swapped twin (restores pair symmetry)."""
        out = list(self.entries) + [e.swapped() for e in self.entries]
        return CorrespondenceSet(out)


@dataclass
class LossBreakdown:
    color: torch.Tensor
    reproj: torch.Tensor
    ncc: torch.Tensor
    eikonal: torch.Tensor
    total: torch.Tensor
    valid_correspondences: int = 0
    skipped_patches: int = 0

    def floats(self) -> dict[str, float]:
        return {
            "color": float(self.color),
            "reproj": float(self.reproj),
            "ncc": float(self.ncc),
            "eikonal": float(self.eikonal),
            "total": float(self.total),
        }


def _graph_gradient(sdf, points: torch.Tensor) -> torch.Tensor:
    """Spatial gradient that stays differentiable w.r.t. upstream inputs."""
    if isinstance(sdf, SdfField):
        return sdf.gradient(points, create_graph=True)
    return sdf.gradient(points)  # analytic forms are closed torch expressions


# --------------------------------------------------------------------------
# reprojection
# --------------------------------------------------------------------------
def reprojection_loss(
    corr: CorrespondenceSet,
    poses: list[Pose],
    intrinsics: list[Intrinsics],
    sdf,
    cfg: LossConfig = LossConfig(),
    icfg: IntersectConfig = IntersectConfig(),
    warmup: bool = False,
    sharpness=None,
    render_cfg: RenderConfig | None = None,
    rng: np.random.Generator | None = None,
) -> tuple[torch.Tensor, int]:
    """Mean clamped L1 pixel residual of intersected surface points, both views.

    Each correspondence casts the reference ray through pixel_i, intersects
    the surface, and projects the 3D point back into both views. Rays that
    find no surface are dropped (warm-up signal, not an error). During
    warm-up, intersections far from the rendered depth are replaced by the
    rendered-depth point (requires ``sharpness`` and ``render_cfg``).

    Returns (loss, number of correspondences that produced residuals).
    """
    device_zero = torch.zeros((), dtype=DTYPE)
    if len(corr) == 0:
        return device_zero, 0
    groups: dict[tuple[int, int], list[Correspondence]] = {}
    for e in corr:
        groups.setdefault((e.view_i, e.view_j), []).append(e)
    total = device_zero
    n_terms = 0
    n_valid = 0
    for (i, j), entries in sorted(groups.items()):
        pix_i = as_tensor(np.stack([e.pixel_i for e in entries]))
        pix_j = as_tensor(np.stack([e.pixel_j for e in entries]))
        origins, dirs = cast_rays(pix_i, poses[i], intrinsics[i])
        batch = intersect_rays(sdf, origins, dirs, icfg)
        found = batch.found
        if warmup:
            if sharpness is None or render_cfg is None:
                raise ValueError("warm-up filtering needs sharpness and render_cfg")
            positions, _ = warmup_filter_batch(
                batch.position, found, origins, dirs, sdf,
                cfg.warmup_threshold, sharpness, render_cfg, rng,
            )
        else:
            positions = batch.position
        if not bool(found.any()):
            continue
        pts = positions[found]
        n_valid += int(found.sum())
        for view, target in ((i, pix_i[found]), (j, pix_j[found])):
            proj, ok = project_points(pts, poses[view], intrinsics[view])
            if not bool(ok.any()):
                continue
            resid = (proj[ok] - target[ok]).abs().sum(dim=-1)
            total = total + torch.clamp(resid, max=cfg.rho_max).sum()
            n_terms += int(ok.sum())
    if n_terms == 0:
        return device_zero, 0
    return total / n_terms, n_valid


# --------------------------------------------------------------------------
# patch warping
# --------------------------------------------------------------------------
def bilinear_sample(image: torch.Tensor, pixels: torch.Tensor) -> torch.Tensor:
    """Sample an (H, W, C) image at continuous pixel coordinates (N, 2).

    The texel at array index (y, x) is centered at pixel coordinate
    (x + 0.5, y + 0.5), matching the projection convention. Coordinates are
    clamped to the image rectangle; differentiable w.r.t. ``pixels``.
    """
    img = as_tensor(image)
    h, w = img.shape[0], img.shape[1]
    pix = as_tensor(pixels).reshape(-1, 2)
    x = torch.clamp(pix[:, 0] - 0.5, 0.0, w - 1.0)
    y = torch.clamp(pix[:, 1] - 0.5, 0.0, h - 1.0)
    x0 = torch.clamp(x.detach().floor().long(), 0, w - 2) if w > 1 else torch.zeros_like(x, dtype=torch.long)
    y0 = torch.clamp(y.detach().floor().long(), 0, h - 2) if h > 1 else torch.zeros_like(y, dtype=torch.long)
    x1 = torch.clamp(x0 + 1, max=w - 1)
    y1 = torch.clamp(y0 + 1, max=h - 1)
    wx = (x - x0.to(DTYPE)).clamp(0.0, 1.0)[:, None]
    wy = (y - y0.to(DTYPE)).clamp(0.0, 1.0)[:, None]
    v00 = img[y0, x0]
    v01 = img[y0, x1]
    v10 = img[y1, x0]
    v11 = img[y1, x1]
    top = v00 * (1 - wx) + v01 * wx
    bot = v10 * (1 - wx) + v11 * wx
    return top * (1 - wy) + bot * wy


def ncc(a: torch.Tensor, b: torch.Tensor, literal_var: bool = False) -> torch.Tensor:
    """Normalized cross correlation of two equal-size patches (flattened).

    The standard form divides the covariance by sigma_a * sigma_b; the
    ``literal_var`` form divides by the variances instead (not scale
    invariant, kept for comparison runs).
    """
    x = as_tensor(a).reshape(-1)
    y = as_tensor(b).reshape(-1)
    if x.shape != y.shape:
        raise ValueError(f"patch shapes differ: {tuple(x.shape)} vs {tuple(y.shape)}")
    xc = x - x.mean()
    yc = y - y.mean()
    cov = (xc * yc).mean()
    var_x = (xc * xc).mean()
    var_y = (yc * yc).mean()
    if literal_var:
        denom = torch.clamp(var_x * var_y, min=1e-30)
    else:
        denom = torch.clamp(torch.sqrt(var_x * var_y), min=1e-30)
    return cov / denom


def patch_stats(patch: torch.Tensor) -> torch.Tensor:
    """Population std of a patch, the texturedness gate."""
    x = as_tensor(patch).reshape(-1)
    return x.std(unbiased=False)


def _patch_grid(center: torch.Tensor, half: int) -> torch.Tensor:
    offs = torch.arange(-half, half + 1, dtype=DTYPE)
    dy, dx = torch.meshgrid(offs, offs, indexing="ij")
    grid = torch.stack([dx.reshape(-1), dy.reshape(-1)], dim=-1)
    return center[None, :] + grid


def patch_warp_loss(
    seeds,
    poses: list[Pose],
    intrinsics: list[Intrinsics],
    sdf,
    images: list,
    cfg: LossConfig = LossConfig(),
    icfg: IntersectConfig = IntersectConfig(),
) -> tuple[torch.Tensor, int, int]:
    """Mean (1 - NCC) between reference patches and plane-warped target patches.

    ``seeds`` is a sequence of (view_i, view_j, pixel_i) or a
    CorrespondenceSet (pixel_j is ignored; the warp supplies it). For each
    seed the reference ray is intersected, the tangent plane at the hit is
    expressed in the reference camera frame, and the induced homography warps
    the reference grid into the target image. Patches are skipped (and
    counted) when the ray misses, the plane is degenerate, the grid leaves
    either image, or either patch is untextured (std < tau_var).

    Returns (loss, evaluated count, skipped count).
    """
    if isinstance(seeds, CorrespondenceSet):
        seeds = [(e.view_i, e.view_j, e.pixel_i) for e in seeds]
    imgs = [as_tensor(im) for im in images]
    zero = torch.zeros((), dtype=DTYPE)
    total = zero
    evaluated = 0
    skipped = 0
    half = cfg.patch_half
    for i, j, pixel in seeds:
        center = as_tensor(pixel).reshape(2)
        ref_grid = _patch_grid(center, half)
        h_i, w_i = imgs[i].shape[0], imgs[i].shape[1]
        with torch.no_grad():
            inside_ref = bool(
                (ref_grid[:, 0] >= 0).all()
                and (ref_grid[:, 0] < w_i).all()
                and (ref_grid[:, 1] >= 0).all()
                and (ref_grid[:, 1] < h_i).all()
            )
        if not inside_ref:
            skipped += 1
            continue
        origins, dirs = cast_rays(center[None], poses[i], intrinsics[i])
        batch = intersect_rays(sdf, origins, dirs, icfg)
        if not bool(batch.found[0]):
            skipped += 1
            continue
        p_world = batch.position[0]
        n_world = _graph_gradient(sdf, p_world[None])[0]
        n_world = n_world / torch.clamp(torch.linalg.norm(n_world), min=1e-30)
        r_i, t_i = poses[i].effective()
        p_cam = r_i @ p_world + t_i
        n_cam = r_i @ n_world
        plane = PlanePatch(n_cam, -(n_cam @ p_cam), center, half)
        try:
            h_ji = plane_homography(poses[i], poses[j], intrinsics[i], intrinsics[j], plane)
        except DegeneratePlane:
            skipped += 1
            continue
        warped = apply_homography(torch.linalg.inv(h_ji), ref_grid)
        h_j, w_j = imgs[j].shape[0], imgs[j].shape[1]
        with torch.no_grad():
            inside_tgt = bool(
                (warped[:, 0] >= 0).all()
                and (warped[:, 0] < w_j).all()
                and (warped[:, 1] >= 0).all()
                and (warped[:, 1] < h_j).all()
            )
        if not inside_tgt:
            skipped += 1
            continue
        s_i = bilinear_sample(imgs[i], ref_grid)
        s_j = bilinear_sample(imgs[j], warped)
        with torch.no_grad():
            textured = min(float(patch_stats(s_i)), float(patch_stats(s_j))) >= cfg.tau_var
        if not textured:
            skipped += 1
            continue
        total = total + (1.0 - ncc(s_i, s_j, cfg.ncc_literal_var))
        evaluated += 1
    if evaluated == 0:
        return zero, 0, skipped
    return total / evaluated, evaluated, skipped


# --------------------------------------------------------------------------
# color and eikonal
# --------------------------------------------------------------------------
def color_loss(
    origins,
    dirs,
    gt_rgb,
    sdf,
    radiance,
    sharpness,
    render_cfg: RenderConfig = RenderConfig(),
    rng: np.random.Generator | None = None,
) -> tuple[torch.Tensor, dict]:
    """Mean L1 between volume-rendered and ground-truth colors.

    Returns (loss, render dict) so callers can reuse weights/positions.
    """
    gt = as_tensor(gt_rgb).reshape(-1, 3)
    out = render_rays(sdf, radiance, origins, dirs, sharpness, render_cfg, rng)
    loss = (out["rgb"] - gt).abs().mean()
    return loss, out


def eikonal_points(
    rng: np.random.Generator,
    m: int,
    bound_radius: float = 1.2,
    near_surface: np.ndarray | torch.Tensor | None = None,
    sigma: float = 0.01,
) -> torch.Tensor:
    """M uniform samples in the bounding ball, plus jittered copies of any
    supplied near-surface points."""
    if m < 1:
        raise ValueError("need at least one sample point")
    u = rng.random(m)
    d = rng.normal(size=(m, 3))
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    pts = d * (bound_radius * u[:, None] ** (1.0 / 3.0))
    out = as_tensor(pts)
    if near_surface is not None:
        ns = as_tensor(near_surface).detach().reshape(-1, 3)
        jit = as_tensor(rng.normal(scale=sigma, size=(ns.shape[0], 3)))
        out = torch.cat([out, ns + jit], dim=0)
    return out


def eikonal_loss(sdf, points) -> torch.Tensor:
    """Mean squared deviation of the gradient norm from 1."""
    pts = as_tensor(points).reshape(-1, 3)
    grad = _graph_gradient(sdf, pts)
    norms = torch.linalg.norm(grad, dim=-1)
    return ((norms - 1.0) ** 2).mean()


# --------------------------------------------------------------------------
# aggregation
# --------------------------------------------------------------------------
def total_objective(
    color: torch.Tensor,
    reproj: torch.Tensor,
    ncc_term: torch.Tensor,
    eikonal: torch.Tensor,
    cfg: LossConfig = LossConfig(),
    valid_correspondences: int = 0,
    skipped_patches: int = 0,
) -> LossBreakdown:
    """Weighted sum of the four terms; raises NonFiniteLoss naming the first
    non-finite part."""
    parts = {
        "color": as_tensor(color),
        "reproj": as_tensor(reproj),
        "ncc": as_tensor(ncc_term),
        "eikonal": as_tensor(eikonal),
    }
    for name, value in parts.items():
        if not bool(torch.isfinite(value.detach()).all()):
            raise NonFiniteLoss(name, float(value.detach()))
    total = (
        parts["color"]
        + cfg.lambda_r * parts["reproj"]
        + cfg.lambda_ncc * parts["ncc"]
        + cfg.lambda_reg * parts["eikonal"]
    )
    if not bool(torch.isfinite(total.detach())):
        raise NonFiniteLoss("total", float(total.detach()))
    return LossBreakdown(
        color=parts["color"],
        reproj=parts["reproj"],
        ncc=parts["ncc"],
        eikonal=parts["eikonal"],
        total=total,
        valid_correspondences=valid_correspondences,
        skipped_patches=skipped_patches,
    )
