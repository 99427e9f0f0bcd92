"""Scene files, image I/O, correspondence import, and synthetic scene generation.

A scene directory holds:

    scene.json   -- views (intrinsics, camera-to-world poses, image names),
                    normalization bounds, optional exact ground-truth shape
    view_*.png   -- 8-bit images, linearized to float [0,1] in memory
    matches.txt  -- "i j u_i v_i u_j v_j conf" per line, '#' comments
    gt_mesh.ply  -- optional ground-truth surface

The synthetic generator places cameras on a view sphere, renders ground
truth by sphere tracing an analytic SDF with a procedural texture, samples
cross-view-visible surface points as correspondences, and perturbs the true
poses with Gaussian noise on the se(3) 6-vector.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image as PilImage

from .errors import InvariantViolation, MissingImage, ParseError
from .fields import AnalyticSdf
from .geometry import Intrinsics, Pose, Sim3, cast_rays, look_at, project_points
from .losses import Correspondence, CorrespondenceSet
from .utils import DTYPE, as_tensor, substream

SCENE_FORMAT = "scsurf.scene.v1"
LIGHT_DIR = np.array([0.35, 0.25, 0.9]) / np.linalg.norm([0.35, 0.25, 0.9])
AMBIENT = 0.25


# --------------------------------------------------------------------------
# images
# --------------------------------------------------------------------------
@dataclass
class Image:
    """Float RGB image, row-major (height, width, 3), values in [0, 1]."""

    width: int
    height: int
    rgb: np.ndarray

    def __post_init__(self):
        self.rgb = np.asarray(self.rgb, dtype=np.float64)
        if self.rgb.shape != (self.height, self.width, 3):
            raise InvariantViolation(
                f"image buffer {self.rgb.shape} does not match "
                f"(h={self.height}, w={self.width}, 3)"
            )
        if self.rgb.size and (self.rgb.min() < 0.0 or self.rgb.max() > 1.0):
            raise InvariantViolation("image values must lie in [0, 1]")

    @classmethod
    def from_array(cls, rgb: np.ndarray) -> "Image":
        rgb = np.asarray(rgb, dtype=np.float64)
        return cls(width=rgb.shape[1], height=rgb.shape[0], rgb=rgb)

    @classmethod
    def constant(cls, width: int, height: int, color=(0.0, 0.0, 0.0)) -> "Image":
        buf = np.broadcast_to(np.asarray(color, dtype=np.float64), (height, width, 3)).copy()
        return cls(width=width, height=height, rgb=buf)

    def to_uint8(self) -> np.ndarray:
        return np.clip(np.rint(self.rgb * 255.0), 0, 255).astype(np.uint8)

    def save_png(self, path) -> None:
        PilImage.fromarray(self.to_uint8(), mode="RGB").save(str(path), format="PNG")

    @classmethod
    def load_png(cls, path) -> "Image":
        p = Path(path)
        if not p.exists():
            raise MissingImage(str(p))
        arr = np.asarray(PilImage.open(p).convert("RGB"), dtype=np.float64) / 255.0
        return cls.from_array(arr)


# --------------------------------------------------------------------------
# procedural texture and analytic radiance
# --------------------------------------------------------------------------
@dataclass(frozen=True)
class ProceduralTexture:
    """Smooth trig color field: channel c = base + amp * sin(2 pi f_c . p + phi_c).

    Default parameters keep every channel inside [base - amp, base + amp],
    safely within [0, 1] after Lambert shading.
    """

    freqs: tuple = ((3.1, 1.7, 2.3), (1.3, 2.9, 1.1), (2.2, 0.7, 3.7))
    phases: tuple = (0.0, 2.0, 4.0)
    base: float = 0.5
    amp: float = 0.35

    def colors(self, points) -> torch.Tensor:
        p = as_tensor(points).reshape(-1, 3)
        f = as_tensor(self.freqs)
        ph = as_tensor(self.phases)
        return self.base + self.amp * torch.sin(2.0 * np.pi * (p @ f.T) + ph)


def lambert_shade(normals, light_dir=LIGHT_DIR, ambient: float = AMBIENT) -> torch.Tensor:
    """Scalar shading factor in [ambient, 1] per normal; light_dir points
    toward the light."""
    n = as_tensor(normals).reshape(-1, 3)
    light = as_tensor(light_dir)
    light = light / torch.linalg.norm(light)
    cos = torch.clamp((n * light).sum(-1), min=0.0)
    return ambient + (1.0 - ambient) * cos


class AnalyticRadiance:
    """Radiance stub matching the neural head's call signature: shaded
    procedural texture, independent of view direction."""

    def __init__(self, texture: ProceduralTexture = ProceduralTexture(),
                 light_dir=LIGHT_DIR, ambient: float = AMBIENT):
        self.texture = texture
        self.light_dir = np.asarray(light_dir, dtype=np.float64)
        self.ambient = ambient

    def __call__(self, x, view_dir, normal, feature=None) -> torch.Tensor:
        shade = lambert_shade(normal, self.light_dir, self.ambient)
        return self.texture.colors(x) * shade[:, None]


# --------------------------------------------------------------------------
# sphere tracing (ground-truth renderer and intersection oracle)
# --------------------------------------------------------------------------
def sphere_trace(
    sdf,
    origins,
    dirs,
    t_start: float = 0.0,
    t_max: float = 12.0,
    max_steps: int = 512,
    tol: float = 1e-6,
) -> tuple[torch.Tensor, torch.Tensor]:
    """March each ray by the SDF value until |f| < tol or t exceeds t_max.

    Returns (t (N,), hit (N,) bool), gradient-free. Exact SDFs converge
    monotonically from outside; tangential rays may exhaust max_steps and
    come back as misses.
    """
    with torch.no_grad():
        o = as_tensor(origins).reshape(-1, 3)
        v = as_tensor(dirs).reshape(-1, 3)
        n = o.shape[0]
        t = torch.full((n,), float(t_start), dtype=DTYPE)
        hit = torch.zeros(n, dtype=torch.bool)
        active = torch.ones(n, dtype=torch.bool)
        for _ in range(max_steps):
            idx = active.nonzero(as_tuple=True)[0]
            if idx.numel() == 0:
                break
            f = sdf.sdf(o[idx] + t[idx, None] * v[idx])
            conv = f < tol
            hit[idx[conv]] = True
            active[idx[conv]] = False
            stepping = idx[~conv]
            t[stepping] = t[stepping] + f[~conv]
            active = active & (t <= t_max)
    return t, hit


def _pixel_grid(intrinsics: Intrinsics) -> torch.Tensor:
    """Continuous coordinates of all texel centers, row-major (h*w, 2)."""
    xs = torch.arange(intrinsics.width, dtype=DTYPE) + 0.5
    ys = torch.arange(intrinsics.height, dtype=DTYPE) + 0.5
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")
    return torch.stack([gx.reshape(-1), gy.reshape(-1)], dim=-1)


def sphere_trace_render(
    shape,
    texture: ProceduralTexture,
    pose: Pose,
    intrinsics: Intrinsics,
    background=(0.0, 0.0, 0.0),
    light_dir=LIGHT_DIR,
    ambient: float = AMBIENT,
    max_steps: int = 512,
    tol: float = 1e-6,
) -> Image:
    """Reference render: first hit by sphere tracing, Lambert-shaded texture,
    uniform background on miss. ``shape`` may be None (or an empty list) for
    a pure background image; a list is treated as a union.
    """
    if isinstance(shape, (list, tuple)):
        shape = None if len(shape) == 0 else (shape[0] if len(shape) == 1 else _union(shape))
    h, w = intrinsics.height, intrinsics.width
    buf = np.broadcast_to(
        np.asarray(background, dtype=np.float64), (h * w, 3)
    ).copy()
    if shape is not None:
        pix = _pixel_grid(intrinsics)
        origins, dirs = cast_rays(pix, pose, intrinsics)
        t, hit = sphere_trace(shape, origins, dirs, max_steps=max_steps, tol=tol)
        if bool(hit.any()):
            pts = origins[hit] + t[hit][:, None] * dirs[hit]
            normals = shape.gradient(pts)
            normals = normals / torch.clamp(
                torch.linalg.norm(normals, dim=-1, keepdim=True), min=1e-30
            )
            shade = lambert_shade(normals, light_dir, ambient)
            rgb = (texture.colors(pts) * shade[:, None]).numpy()
            buf[hit.numpy()] = np.clip(rgb, 0.0, 1.0)
    return Image(width=w, height=h, rgb=buf.reshape(h, w, 3))


def _union(shapes):
    from .fields import UnionSdf

    return UnionSdf(list(shapes))


# --------------------------------------------------------------------------
# scene container
# --------------------------------------------------------------------------
@dataclass
class View:
    image: Image
    intrinsics: Intrinsics
    pose: Pose  # initial (noisy) world-to-camera pose, trainable
    pose_gt: Pose | None = None  # ground truth, evaluation only
    image_name: str = ""


@dataclass
class Scene:
    views: list[View]
    correspondences: CorrespondenceSet = field(default_factory=CorrespondenceSet)
    bounds: Sim3 = field(default_factory=Sim3.identity)
    gt_shape: AnalyticSdf | None = None
    gt_mesh_path: str | None = None

    def __post_init__(self):
        self.check_invariants()

    def check_invariants(self):
        if len(self.views) < 2:
            raise InvariantViolation(f"scene needs >= 2 views, got {len(self.views)}")
        channels = {v.image.rgb.shape[-1] for v in self.views}
        if len(channels) > 1:
            raise InvariantViolation(f"views disagree on channel count: {channels}")

    @property
    def intrinsics(self) -> list[Intrinsics]:
        return [v.intrinsics for v in self.views]

    @property
    def poses(self) -> list[Pose]:
        return [v.pose for v in self.views]

    @property
    def gt_poses(self) -> list[Pose | None]:
        return [v.pose_gt for v in self.views]

    @property
    def images(self) -> list[np.ndarray]:
        return [v.image.rgb for v in self.views]


# --------------------------------------------------------------------------
# persistence
# --------------------------------------------------------------------------
def _pose_to_list(pose: Pose) -> list[float]:
    return [float(x) for x in pose.c2w_matrix().detach().reshape(-1)]


def save_scene(scene: Scene, directory, write_gt_mesh: bool = True,
               mesh_resolution: int = 256) -> None:
    """Write the directory layout described in the module docstring.

    Output is byte-deterministic for identical scenes: JSON keys are sorted,
    floats use shortest-exact repr, and PNG encoding is reproducible.
    """
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    views_json = []
    for k, view in enumerate(scene.views):
        name = view.image_name or f"view_{k:03d}.png"
        view.image_name = name
        view.image.save_png(d / name)
        entry = {
            "image": name,
            "intrinsics": {
                "fx": view.intrinsics.fx,
                "fy": view.intrinsics.fy,
                "cx": view.intrinsics.cx,
                "cy": view.intrinsics.cy,
                "w": view.intrinsics.width,
                "h": view.intrinsics.height,
            },
            "pose_c2w": _pose_to_list(view.pose),
        }
        if view.pose_gt is not None:
            entry["pose_gt_c2w"] = _pose_to_list(view.pose_gt)
        views_json.append(entry)
    gt_mesh_name = scene.gt_mesh_path
    if write_gt_mesh and scene.gt_shape is not None:
        from .evaluation import mesh_from_sdf, save_ply

        mesh = mesh_from_sdf(scene.gt_shape, resolution=mesh_resolution)
        gt_mesh_name = gt_mesh_name or "gt_mesh.ply"
        save_ply(mesh, d / gt_mesh_name)
        scene.gt_mesh_path = gt_mesh_name
    doc = {
        "format": SCENE_FORMAT,
        "bounds": {
            "scale": float(scene.bounds.scale),
            "rotation": [float(x) for x in np.asarray(scene.bounds.rotation).reshape(-1)],
            "translation": [float(x) for x in np.asarray(scene.bounds.translation).reshape(-1)],
        },
        "gt_mesh": gt_mesh_name,
        "gt_shape": scene.gt_shape.to_dict() if scene.gt_shape is not None else None,
        "views": views_json,
    }
    (d / "scene.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    lines = ["# i j u_i v_i u_j v_j conf"]
    for e in scene.correspondences:
        lines.append(
            f"{e.view_i} {e.view_j} "
            f"{float(e.pixel_i[0])!r} {float(e.pixel_i[1])!r} "
            f"{float(e.pixel_j[0])!r} {float(e.pixel_j[1])!r} {float(e.confidence)!r}"
        )
    (d / "matches.txt").write_text("\n".join(lines) + "\n")


def _parse_matches(path: Path, intrinsics: list[Intrinsics]) -> CorrespondenceSet:
    entries = []
    n_views = len(intrinsics)
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        tokens = line.split()
        if len(tokens) != 7:
            raise ParseError(
                f"expected 7 fields, got {len(tokens)}", path=str(path), line=lineno
            )
        try:
            i, j = int(tokens[0]), int(tokens[1])
            vals = [float(tok) for tok in tokens[2:]]
        except ValueError as exc:
            raise ParseError(f"bad number: {exc}", path=str(path), line=lineno) from None
        if not all(np.isfinite(vals)):
            raise ParseError("non-finite value", path=str(path), line=lineno)
        if i == j:
            raise ParseError(f"view paired with itself ({i})", path=str(path), line=lineno)
        for view, (u, v) in ((i, vals[0:2]), (j, vals[2:4])):
            if not 0 <= view < n_views:
                raise ParseError(
                    f"view index {view} out of range [0, {n_views})",
                    path=str(path), line=lineno,
                )
            if not intrinsics[view].contains(u, v):
                raise ParseError(
                    f"pixel ({u}, {v}) outside view {view}", path=str(path), line=lineno
                )
        entries.append(Correspondence(i, j, np.array(vals[0:2]), np.array(vals[2:4]), vals[4]))
    return CorrespondenceSet(entries)


def load_scene(directory) -> Scene:
    """Parse a scene directory; inverse of save_scene up to float encoding."""
    d = Path(directory)
    scene_path = d / "scene.json"
    if not scene_path.exists():
        raise ParseError("scene.json not found", path=str(scene_path))
    try:
        doc = json.loads(scene_path.read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON: {exc.msg}", path=str(scene_path), line=exc.lineno) from None
    if doc.get("format") != SCENE_FORMAT:
        raise ParseError(
            f"unsupported format {doc.get('format')!r}", path=str(scene_path)
        )
    views_doc = doc.get("views")
    if not isinstance(views_doc, list):
        raise ParseError("missing or malformed 'views'", path=str(scene_path))
    views = []
    for k, entry in enumerate(views_doc):
        try:
            intr_doc = entry["intrinsics"]
            intr = Intrinsics(
                fx=float(intr_doc["fx"]), fy=float(intr_doc["fy"]),
                cx=float(intr_doc["cx"]), cy=float(intr_doc["cy"]),
                width=int(intr_doc["w"]), height=int(intr_doc["h"]),
            )
            mat = np.asarray(entry["pose_c2w"], dtype=np.float64)
            if mat.size != 16:
                raise ParseError(
                    f"view {k}: pose_c2w needs 16 floats, got {mat.size}",
                    path=str(scene_path),
                )
            pose = Pose.from_c2w(mat.reshape(4, 4), trainable=True)
            pose_gt = None
            if entry.get("pose_gt_c2w") is not None:
                gt_mat = np.asarray(entry["pose_gt_c2w"], dtype=np.float64).reshape(4, 4)
                pose_gt = Pose.from_c2w(gt_mat, trainable=False)
            image_name = entry["image"]
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"view {k}: {exc}", path=str(scene_path)) from None
        image = Image.load_png(d / image_name)
        if (image.width, image.height) != (intr.width, intr.height):
            raise InvariantViolation(
                f"view {k}: image is {image.width}x{image.height}, "
                f"intrinsics say {intr.width}x{intr.height}"
            )
        views.append(View(image=image, intrinsics=intr, pose=pose,
                          pose_gt=pose_gt, image_name=image_name))
    if len(views) < 2:
        raise InvariantViolation(f"scene needs >= 2 views, got {len(views)}")
    bounds_doc = doc.get("bounds") or {}
    bounds = Sim3(
        scale=float(bounds_doc.get("scale", 1.0)),
        rotation=np.asarray(bounds_doc.get("rotation", np.eye(3).reshape(-1)),
                            dtype=np.float64).reshape(3, 3),
        translation=np.asarray(bounds_doc.get("translation", np.zeros(3)),
                               dtype=np.float64).reshape(3),
    )
    matches_path = d / "matches.txt"
    if not matches_path.exists():
        raise ParseError("matches.txt not found", path=str(matches_path))
    corr = _parse_matches(matches_path, [v.intrinsics for v in views])
    gt_shape = None
    if doc.get("gt_shape") is not None:
        gt_shape = AnalyticSdf.from_dict(doc["gt_shape"])
    return Scene(
        views=views,
        correspondences=corr,
        bounds=bounds,
        gt_shape=gt_shape,
        gt_mesh_path=doc.get("gt_mesh"),
    )


# --------------------------------------------------------------------------
# synthetic generation
# --------------------------------------------------------------------------
def _view_sphere_poses(n_views: int, radius: float, rng: np.random.Generator) -> list[Pose]:
    poses = []
    for k in range(n_views):
        azimuth = 2.0 * np.pi * k / n_views + rng.uniform(-0.2, 0.2)
        elevation = np.deg2rad(rng.uniform(15.0, 45.0))
        eye = radius * np.array(
            [np.cos(azimuth) * np.cos(elevation),
             np.sin(azimuth) * np.cos(elevation),
             np.sin(elevation)]
        )
        poses.append(look_at(eye, (0.0, 0.0, 0.0), up=(0.0, 0.0, 1.0), trainable=False))
    return poses


def _check_normalized(shape: AnalyticSdf, rng: np.random.Generator) -> None:
    dirs = rng.normal(size=(512, 3))
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    vals = shape.sdf(as_tensor(dirs))
    if bool((vals <= 0).any()):
        raise InvariantViolation("ground-truth shape is not inside the unit sphere")


def generate_synthetic(
    shape: AnalyticSdf,
    texture: ProceduralTexture | None = None,
    n_views: int = 3,
    noise_sigma: float = 0.15,
    seed: int = 0,
    image_size: int = 96,
    fov_deg: float = 40.0,
    view_radius: float = 3.0,
    n_correspondences: int = 256,
    pixel_margin: float = 8.0,
    max_attempts: int = 20000,
) -> Scene:
    """Build a fully ground-truthed synthetic scene.

    Cameras sit on a view sphere of the given radius looking at the origin.
    Images come from the sphere-tracing reference renderer. Correspondences
    are surface points visible (front-facing and unoccluded, checked by
    re-tracing) in at least two views, projected with the true poses; each
    one is verified to reproject within 0.5 px. Initial poses are the true
    poses perturbed by N(0, noise_sigma) on the se(3) twist.
    """
    if n_views < 2:
        raise InvariantViolation(f"need >= 2 views, got {n_views}")
    texture = texture or ProceduralTexture()
    _check_normalized(shape, substream(seed, "normcheck"))
    fx = (image_size / 2.0) / np.tan(np.deg2rad(fov_deg) / 2.0)
    intr = Intrinsics(fx=fx, fy=fx, cx=image_size / 2.0, cy=image_size / 2.0,
                      width=image_size, height=image_size)
    gt_poses = _view_sphere_poses(n_views, view_radius, substream(seed, "cameras"))
    images = [
        sphere_trace_render(shape, texture, pose, intr) for pose in gt_poses
    ]
    corr = _sample_correspondences(
        shape, gt_poses, intr, substream(seed, "correspondences"),
        n_correspondences, pixel_margin, max_attempts,
    )
    noise_rng = substream(seed, "noise")
    views = []
    for k, pose in enumerate(gt_poses):
        twist = noise_rng.normal(0.0, noise_sigma, size=6) if noise_sigma > 0 else np.zeros(6)
        noisy = pose.perturbed(twist)
        noisy.delta.requires_grad_(True)
        views.append(
            View(image=images[k], intrinsics=intr, pose=noisy,
                 pose_gt=pose, image_name=f"view_{k:03d}.png")
        )
    return Scene(views=views, correspondences=corr, bounds=Sim3.identity(),
                 gt_shape=shape)


def _sample_correspondences(
    shape: AnalyticSdf,
    gt_poses: list[Pose],
    intr: Intrinsics,
    rng: np.random.Generator,
    n_target: int,
    margin: float,
    max_attempts: int,
) -> CorrespondenceSet:
    n_views = len(gt_poses)
    entries: list[Correspondence] = []
    occl_tol = 1e-3
    for _ in range(max_attempts):
        if len(entries) >= n_target:
            break
        i = int(rng.integers(n_views))
        pixel_i = np.array(
            [rng.uniform(margin, intr.width - margin),
             rng.uniform(margin, intr.height - margin)]
        )
        origins, dirs = cast_rays(as_tensor(pixel_i)[None], gt_poses[i], intr)
        t, hit = sphere_trace(shape, origins, dirs, max_steps=4096)
        if not bool(hit[0]):
            continue
        point = origins[0] + t[0] * dirs[0]
        candidates = []
        for j in range(n_views):
            if j == i:
                continue
            pix_j, ok = project_points(point[None], gt_poses[j], intr)
            if not bool(ok[0]):
                continue
            u, v = float(pix_j[0, 0]), float(pix_j[0, 1])
            if not (margin <= u < intr.width - margin and margin <= v < intr.height - margin):
                continue
            o_j, d_j = cast_rays(pix_j, gt_poses[j], intr)
            t_j, hit_j = sphere_trace(shape, o_j, d_j, max_steps=4096)
            if not bool(hit_j[0]):
                continue
            other = o_j[0] + t_j[0] * d_j[0]
            if float(torch.linalg.norm(other - point)) < occl_tol:
                candidates.append((j, np.array([u, v])))
        if not candidates:
            continue
        j, pixel_j = candidates[int(rng.integers(len(candidates)))]
        # generation self-check: both pixels must reproject the 3D point
        for view, pix in ((i, pixel_i), (j, pixel_j)):
            back, ok = project_points(point[None], gt_poses[view], intr)
            err = float(torch.linalg.norm(back[0] - as_tensor(pix)))
            if not (bool(ok[0]) and err < 0.5):
                raise InvariantViolation(
                    f"generated correspondence reprojects with {err:.2e} px error"
                )
        entries.append(Correspondence(i, j, pixel_i, pixel_j, 1.0))
    return CorrespondenceSet(entries)
