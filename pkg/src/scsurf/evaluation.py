"""Evaluation: pose RMSE under gauge alignment, mesh extraction, Chamfer, ICP.

Joint pose-and-shape optimization only recovers geometry up to a global
similarity, so pose metrics first align estimated camera centers to ground
truth (Umeyama for >= 3 views, explicit first-view gauge fixing for 2) and
then report geodesic rotation and center-distance RMSE per view.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from scipy.spatial import cKDTree
from skimage.measure import marching_cubes as _skimage_marching_cubes

from .errors import (
    CountMismatch,
    EmptyInput,
    EmptySurface,
    InsufficientPoints,
    InvariantViolation,
    ParseError,
)
from .geometry import Pose, Sim3, rotation_angle, umeyama_align
from .utils import DTYPE, as_tensor, to_numpy


# --------------------------------------------------------------------------
# pose metrics
# --------------------------------------------------------------------------
@dataclass
class PoseMetrics:
    rot_rmse_deg: float
    trans_rmse: float  # scene units
    per_view: list  # (rot_err_deg, trans_err) per view

    def as_dict(self) -> dict:
        return {"rot_rmse_deg": self.rot_rmse_deg, "trans_rmse": self.trans_rmse}


def _pose_arrays(poses: list[Pose]) -> tuple[np.ndarray, np.ndarray]:
    rots, centers = [], []
    for p in poses:
        r, _ = p.effective()
        rots.append(to_numpy(r.detach()))
        centers.append(to_numpy(p.camera_center().detach()))
    return np.stack(rots), np.stack(centers)


def _two_view_gauge(est_r, est_c, gt_r, gt_c) -> Sim3:
    """Similarity pinning estimated view 0 exactly onto ground-truth view 0,
    with scale from the baseline ratio."""
    r_w = gt_r[0].T @ est_r[0]
    base_est = np.linalg.norm(est_c[1] - est_c[0])
    base_gt = np.linalg.norm(gt_c[1] - gt_c[0])
    scale = base_gt / base_est if base_est > 1e-12 else 1.0
    trans = gt_c[0] - scale * (r_w @ est_c[0])
    return Sim3(scale, r_w, trans)


def pose_rmse(estimated: list[Pose], ground_truth: list[Pose]) -> PoseMetrics:
    """RMSE of rotation (geodesic, degrees) and camera-center distance after
    global similarity alignment.

    With >= 3 views the alignment is the least-squares Umeyama fit of camera
    centers; with exactly 2 views the gauge is fixed by pinning view 0 (so
    its errors are zero by construction and view 1 carries the relative
    error).
    """
    if len(estimated) != len(ground_truth):
        raise CountMismatch(
            f"{len(estimated)} estimated vs {len(ground_truth)} ground-truth poses"
        )
    if len(estimated) < 2:
        raise CountMismatch("need at least 2 views")
    est_r, est_c = _pose_arrays(estimated)
    gt_r, gt_c = _pose_arrays(ground_truth)
    if len(estimated) == 2:
        sim = _two_view_gauge(est_r, est_c, gt_r, gt_c)
    else:
        sim = umeyama_align(est_c, gt_c)
    aligned_c = sim.apply(est_c)
    r_align = sim.rotation
    per_view = []
    for k in range(len(estimated)):
        r_err = est_r[k] @ r_align.T @ gt_r[k].T
        ang = float(rotation_angle(as_tensor(r_err))) * 180.0 / np.pi
        dist = float(np.linalg.norm(aligned_c[k] - gt_c[k]))
        per_view.append((ang, dist))
    rot_rmse = float(np.sqrt(np.mean([a * a for a, _ in per_view])))
    trans_rmse = float(np.sqrt(np.mean([d * d for _, d in per_view])))
    return PoseMetrics(rot_rmse_deg=rot_rmse, trans_rmse=trans_rmse, per_view=per_view)


# --------------------------------------------------------------------------
# meshes
# --------------------------------------------------------------------------
@dataclass
class Mesh:
    vertices: np.ndarray  # (V, 3) float64
    triangles: np.ndarray  # (F, 3) int64

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if self.triangles.size and (
            self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)
        ):
            raise InvariantViolation("triangle index out of vertex range")

    def triangle_areas(self) -> np.ndarray:
        v = self.vertices
        t = self.triangles
        cross = np.cross(v[t[:, 1]] - v[t[:, 0]], v[t[:, 2]] - v[t[:, 0]])
        return 0.5 * np.linalg.norm(cross, axis=-1)

    def drop_degenerate(self, min_area: float = 1e-12) -> "Mesh":
        keep = self.triangle_areas() > min_area
        return Mesh(self.vertices, self.triangles[keep])


def marching_cubes(sdf, resolution: int = 128, bounds: float = 1.2,
                   batch: int = 1 << 19) -> Mesh:
    """Zero-isosurface triangulation on a uniform grid over [-bounds, bounds]^3.

    Linear edge interpolation (the standard algorithm); degenerate (zero
    area) triangles are dropped. Raises EmptySurface when the field has no
    sign change inside the grid.
    """
    if resolution < 8:
        raise ValueError(f"resolution must be >= 8, got {resolution}")
    lo, hi = -float(bounds), float(bounds)
    axis = np.linspace(lo, hi, resolution)
    gx, gy, gz = np.meshgrid(axis, axis, axis, indexing="ij")
    pts = np.stack([gx.reshape(-1), gy.reshape(-1), gz.reshape(-1)], axis=-1)
    vals = np.empty(len(pts), dtype=np.float64)
    with torch.no_grad():
        for start in range(0, len(pts), batch):
            chunk = as_tensor(pts[start:start + batch])
            vals[start:start + batch] = to_numpy(sdf.sdf(chunk))
    volume = vals.reshape(resolution, resolution, resolution)
    if volume.min() > 0 or volume.max() < 0:
        raise EmptySurface(
            f"no zero crossing in [-{bounds}, {bounds}]^3 "
            f"(f in [{volume.min():.3g}, {volume.max():.3g}])"
        )
    spacing = (hi - lo) / (resolution - 1)
    verts, faces, _, _ = _skimage_marching_cubes(
        volume, level=0.0, spacing=(spacing, spacing, spacing)
    )
    verts = verts + lo
    return Mesh(verts.astype(np.float64), faces.astype(np.int64)).drop_degenerate()


def save_ply(mesh: Mesh, path, binary: bool = False) -> None:
    """Write a PLY file; ASCII by default (shortest-exact float repr, so the
    bytes are reproducible), optional little-endian binary doubles."""
    p = Path(path)
    header = [
        "ply",
        "format binary_little_endian 1.0" if binary else "format ascii 1.0",
        f"element vertex {len(mesh.vertices)}",
        "property double x",
        "property double y",
        "property double z",
        f"element face {len(mesh.triangles)}",
        "property list uchar int vertex_indices",
        "end_header",
    ]
    if binary:
        with open(p, "wb") as fh:
            fh.write(("\n".join(header) + "\n").encode("ascii"))
            fh.write(mesh.vertices.astype("<f8").tobytes())
            for tri in mesh.triangles:
                fh.write(np.uint8(3).tobytes())
                fh.write(tri.astype("<i4").tobytes())
        return
    lines = list(header)
    for v in mesh.vertices:
        lines.append(f"{float(v[0])!r} {float(v[1])!r} {float(v[2])!r}")
    for t in mesh.triangles:
        lines.append(f"3 {int(t[0])} {int(t[1])} {int(t[2])}")
    p.write_text("\n".join(lines) + "\n")


def load_ply(path) -> Mesh:
    """Read the subset of PLY written by save_ply (ascii or binary doubles)."""
    p = Path(path)
    raw = p.read_bytes()
    end = raw.find(b"end_header\n")
    if end < 0:
        raise ParseError("missing end_header", path=str(p))
    header = raw[:end].decode("ascii", errors="replace").splitlines()
    if not header or header[0].strip() != "ply":
        raise ParseError("not a PLY file", path=str(p))
    fmt = None
    n_vert = n_face = 0
    for line in header[1:]:
        tok = line.split()
        if not tok:
            continue
        if tok[0] == "format":
            fmt = tok[1]
        elif tok[0] == "element" and tok[1] == "vertex":
            n_vert = int(tok[2])
        elif tok[0] == "element" and tok[1] == "face":
            n_face = int(tok[2])
    body = raw[end + len(b"end_header\n"):]
    if fmt == "ascii":
        lines = body.decode("ascii").splitlines()
        if len(lines) < n_vert + n_face:
            raise ParseError(
                f"expected {n_vert + n_face} body lines, got {len(lines)}", path=str(p)
            )
        verts = np.array(
            [[float(x) for x in lines[i].split()] for i in range(n_vert)]
        ).reshape(n_vert, 3)
        faces = []
        for i in range(n_vert, n_vert + n_face):
            tok = lines[i].split()
            if tok[0] != "3":
                raise ParseError("only triangle faces supported", path=str(p), line=i + 1)
            faces.append([int(tok[1]), int(tok[2]), int(tok[3])])
        return Mesh(verts, np.array(faces, dtype=np.int64).reshape(n_face, 3))
    if fmt == "binary_little_endian":
        vert_bytes = n_vert * 3 * 8
        verts = np.frombuffer(body[:vert_bytes], dtype="<f8").reshape(n_vert, 3).copy()
        faces = np.empty((n_face, 3), dtype=np.int64)
        off = vert_bytes
        for k in range(n_face):
            count = body[off]
            if count != 3:
                raise ParseError("only triangle faces supported", path=str(p))
            faces[k] = np.frombuffer(body[off + 1:off + 13], dtype="<i4")
            off += 13
        return Mesh(verts, faces)
    raise ParseError(f"unsupported PLY format {fmt!r}", path=str(p))


def mesh_from_sdf(sdf, resolution: int = 128, bounds: float = 1.2) -> Mesh:
    """Alias used by scene export; see marching_cubes."""
    return marching_cubes(sdf, resolution=resolution, bounds=bounds)


# --------------------------------------------------------------------------
# point sampling and Chamfer
# --------------------------------------------------------------------------
def sample_points(mesh: Mesh, n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform-by-area surface samples, (n, 3)."""
    if len(mesh.triangles) == 0:
        raise EmptyInput("mesh has no triangles")
    areas = mesh.triangle_areas()
    total = areas.sum()
    if total <= 0:
        raise EmptyInput("mesh has zero surface area")
    tri_idx = rng.choice(len(areas), size=n, p=areas / total)
    tri = mesh.triangles[tri_idx]
    a = mesh.vertices[tri[:, 0]]
    b = mesh.vertices[tri[:, 1]]
    c = mesh.vertices[tri[:, 2]]
    r1 = np.sqrt(rng.random(n))[:, None]
    r2 = rng.random(n)[:, None]
    return a * (1 - r1) + b * (r1 * (1 - r2)) + c * (r1 * r2)


def _as_points(obj, n_samples: int, rng: np.random.Generator | None) -> np.ndarray:
    if isinstance(obj, Mesh):
        if rng is None:
            rng = np.random.default_rng(0)
        return sample_points(obj, n_samples, rng)
    pts = np.asarray(to_numpy(obj) if torch.is_tensor(obj) else obj, dtype=np.float64)
    return pts.reshape(-1, 3)


def chamfer_distance(
    a, b, n_samples: int = 100_000, rng: np.random.Generator | None = None,
    mode: str = "sum",
) -> float:
    """Symmetric Chamfer distance between meshes or point sets.

    ``sum`` mode (default) adds the two directed mean nearest-neighbor
    distances; ``mean`` averages them. Meshes are sampled uniformly by area.
    """
    pa = _as_points(a, n_samples, rng)
    pb = _as_points(b, n_samples, rng)
    if len(pa) == 0 or len(pb) == 0:
        raise EmptyInput(f"empty point set ({len(pa)} vs {len(pb)} points)")
    d_ab = cKDTree(pb).query(pa, k=1)[0].mean()
    d_ba = cKDTree(pa).query(pb, k=1)[0].mean()
    if mode == "sum":
        return float(d_ab + d_ba)
    if mode == "mean":
        return float(0.5 * (d_ab + d_ba))
    raise ValueError(f"unknown chamfer mode {mode!r}")


# --------------------------------------------------------------------------
# ICP
# --------------------------------------------------------------------------
def _kabsch_rigid(src: np.ndarray, dst: np.ndarray) -> Sim3:
    mu_s, mu_d = src.mean(0), dst.mean(0)
    x, y = src - mu_s, dst - mu_d
    cov = y.T @ x / len(src)
    u, _, vt = np.linalg.svd(cov)
    s_fix = np.eye(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        s_fix[2, 2] = -1.0
    rot = u @ s_fix @ vt
    return Sim3(1.0, rot, mu_d - rot @ mu_s)


def icp_refine(
    source: np.ndarray,
    target: np.ndarray,
    init: Sim3 | None = None,
    max_iters: int = 50,
    tol: float = 1e-8,
) -> tuple[Sim3, float]:
    """Point-to-point rigid ICP from an initial similarity.

    Returns (refined transform, final RMS residual). The refinement composes
    a rigid motion on top of ``init`` (whose scale is kept). Convergence is
    declared when the RMS residual improves by less than ``tol``.
    """
    src = np.asarray(source, dtype=np.float64).reshape(-1, 3)
    tgt = np.asarray(target, dtype=np.float64).reshape(-1, 3)
    if len(src) < 3 or len(tgt) < 3:
        raise InsufficientPoints(f"need >= 3 points each, got {len(src)}, {len(tgt)}")
    current = init if init is not None else Sim3.identity()
    tree = cKDTree(tgt)
    prev_rms = np.inf
    for _ in range(max_iters):
        moved = current.apply(src)
        dist, nn = tree.query(moved, k=1)
        rms = float(np.sqrt((dist * dist).mean()))
        if prev_rms - rms < tol:
            prev_rms = rms
            break
        prev_rms = rms
        step = _kabsch_rigid(moved, tgt[nn])
        current = step.compose(current)
    return current, prev_rms


def icp_or_fallback(
    source: np.ndarray, target: np.ndarray, init: Sim3 | None = None,
) -> tuple[Sim3, float, bool]:
    """ICP refinement guarded by a Chamfer comparison.

    Returns (transform, chamfer, used_icp): the refined transform when it
    lowers the Chamfer distance, otherwise the initialization unchanged.
    """
    base = init if init is not None else Sim3.identity()
    src = np.asarray(source, dtype=np.float64).reshape(-1, 3)
    tgt = np.asarray(target, dtype=np.float64).reshape(-1, 3)
    chamfer_init = chamfer_distance(base.apply(src), tgt)
    refined, _ = icp_refine(src, tgt, base)
    chamfer_icp = chamfer_distance(refined.apply(src), tgt)
    if chamfer_icp < chamfer_init:
        return refined, chamfer_icp, True
    return base, chamfer_init, False
