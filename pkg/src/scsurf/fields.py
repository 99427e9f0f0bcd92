"""Neural fields (SDF + radiance), analytic SDF primitives used as oracles,
frequency encoding with a coarse-to-fine window, and checkpoint I/O.

Sign convention: SDF values are negative inside the surface, positive
outside, so a camera outside the object sees + -> - sign changes along rays.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

from .errors import ParseError
from .utils import DTYPE, as_tensor

_CKPT_FORMAT = "scsurf.checkpoint.v1"


# --------------------------------------------------------------------------
# frequency encoding
# --------------------------------------------------------------------------
@dataclass(frozen=True)
class EncodingConfig:
    """Sin/cos band encoding. ``alpha`` in [0, num_freqs] soft-gates the bands
    (coarse to fine). None means fully active."""

    num_freqs: int = 6
    include_input: bool = True
    alpha: float | None = None

    def __post_init__(self):
        if self.num_freqs < 0:
            raise ValueError("num_freqs must be >= 0")
        if self.alpha is not None and not (0.0 <= self.alpha <= self.num_freqs):
            raise ValueError(f"alpha must lie in [0, {self.num_freqs}]")

    def dim(self, in_dim: int = 3) -> int:
        return in_dim * (int(self.include_input) + 2 * self.num_freqs)


def band_weights(cfg: EncodingConfig) -> torch.Tensor:
    """Per-band window w_k in [0, 1]: 0 below activation, cosine ramp while
    the band fades in, 1 once fully active."""
    alpha = cfg.num_freqs if cfg.alpha is None else cfg.alpha
    k = torch.arange(cfg.num_freqs, dtype=DTYPE)
    a = torch.clamp(alpha - k, 0.0, 1.0)
    return (1.0 - torch.cos(a * math.pi)) / 2.0


def encode(x: torch.Tensor, cfg: EncodingConfig) -> torch.Tensor:
    """Encode (..., D) -> (..., cfg.dim(D)).

    Layout: [x (if include_input), sin(2^0 pi x), cos(2^0 pi x),
    sin(2^1 pi x), cos(2^1 pi x), ...] with each block D wide.
    """
    x = as_tensor(x)
    parts = [x] if cfg.include_input else []
    if cfg.num_freqs > 0:
        w = band_weights(cfg)
        for k in range(cfg.num_freqs):
            arg = (2.0**k) * math.pi * x
            parts.append(w[k] * torch.sin(arg))
            parts.append(w[k] * torch.cos(arg))
    return torch.cat(parts, dim=-1)


# --------------------------------------------------------------------------
# neural fields
# --------------------------------------------------------------------------
def _normal(rng: np.random.Generator, shape, mean=0.0, std=1.0) -> torch.Tensor:
    return torch.tensor(rng.normal(mean, std, size=shape), dtype=DTYPE)


class SdfField(nn.Module):
    """MLP signed distance field with a feature head for the radiance network.

    forward(x) returns (N, 1 + feature_dim): column 0 is the SDF. Geometric
    initialization biases the zero level set to a sphere of radius ``r0``
    centered at the origin, with the frequency-band input channels zeroed so
    early training sees a smooth function of raw position.
    """

    def __init__(
        self,
        encoding: EncodingConfig = EncodingConfig(),
        hidden: int = 256,
        num_layers: int = 8,
        skip_layer: int = 4,
        feature_dim: int = 256,
        r0: float = 0.5,
        softplus_beta: float = 100.0,
        geometric_init: bool = True,
        rng: np.random.Generator | None = None,
    ):
        super().__init__()
        if rng is None:
            rng = np.random.default_rng(0)
        self.geometric_init = geometric_init
        self.encoding = encoding
        self.skip_layer = skip_layer
        self.feature_dim = feature_dim
        self.r0 = r0
        self.hidden = hidden
        self.num_hidden = num_layers
        d_in = encoding.dim(3)
        dims = [d_in] + [hidden] * num_layers + [1 + feature_dim]
        if skip_layer is not None:
            if hidden <= d_in:
                raise ValueError(
                    f"hidden width {hidden} must exceed encoding dim {d_in} for a skip connection"
                )
            dims[skip_layer] = hidden - d_in  # output of the layer feeding the skip concat
        self.num_linear = len(dims) - 1
        layers = []
        for l in range(self.num_linear):
            in_dim = dims[l]
            if skip_layer is not None and l == skip_layer:
                in_dim = hidden  # concat of previous output and the encoded input
            lin = nn.Linear(in_dim, dims[l + 1], dtype=DTYPE)
            if geometric_init:
                self._geometric_init(lin, l, in_dim, dims[l + 1], d_in, rng)
            else:
                with torch.no_grad():
                    lin.weight.copy_(_normal(rng, (dims[l + 1], in_dim), std=math.sqrt(2.0 / in_dim)))
                    lin.bias.zero_()
            layers.append(lin)
        self.layers = nn.ModuleList(layers)
        self.activation = nn.Softplus(beta=softplus_beta)
        if geometric_init:
            self._calibrate_sphere(rng)

    def _geometric_init(self, lin, l, in_dim, out_dim, d_in, rng):
        if l == self.num_linear - 1:
            # zero level set ~ sphere(r0): weights clustered at sqrt(pi/in), bias -r0
            w = _normal(rng, (out_dim, in_dim), mean=math.sqrt(math.pi) / math.sqrt(in_dim), std=1e-4)
            b = torch.full((out_dim,), -self.r0, dtype=DTYPE)
        elif l == 0:
            w = torch.zeros(out_dim, in_dim, dtype=DTYPE)
            w[:, :3] = _normal(rng, (out_dim, 3), std=math.sqrt(2.0) / math.sqrt(out_dim))
            b = torch.zeros(out_dim, dtype=DTYPE)
        elif self.skip_layer is not None and l == self.skip_layer:
            w = _normal(rng, (out_dim, in_dim), std=math.sqrt(2.0) / math.sqrt(out_dim))
            w[:, -(d_in - 3):] = 0.0  # frequency channels of the skipped-in encoding
            b = torch.zeros(out_dim, dtype=DTYPE)
        else:
            w = _normal(rng, (out_dim, in_dim), std=math.sqrt(2.0) / math.sqrt(out_dim))
            b = torch.zeros(out_dim, dtype=DTYPE)
        with torch.no_grad():
            lin.weight.copy_(w)
            lin.bias.copy_(b)

    def _calibrate_sphere(self, rng):
        """Affine correction of the SDF output row so the fresh field is
        distance-like: f(0) = -r0 exactly and the mean over directions at
        radius r0 is 0. The softplus floor otherwise accumulates a constant
        offset that flattens the radial profile and shifts the zero set."""
        probes = rng.normal(size=(256, 3))
        probes /= np.linalg.norm(probes, axis=1, keepdims=True)
        last = self.layers[-1]
        with torch.no_grad():
            g0 = float(self.sdf(torch.zeros(1, 3, dtype=DTYPE))) + self.r0
            gr = float(self.sdf(torch.tensor(probes * self.r0, dtype=DTYPE)).mean()) + self.r0
            if gr - g0 < 1e-3:  # degenerate probe; leave the raw init alone
                return
            scale = self.r0 / (gr - g0)
            last.weight[0] *= scale
            last.bias[0] = -self.r0 - scale * g0

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        enc = encode(x, self.encoding)
        h = enc
        for l, lin in enumerate(self.layers):
            if self.skip_layer is not None and l == self.skip_layer:
                h = torch.cat([h, enc], dim=-1) / math.sqrt(2.0)
            h = lin(h)
            if l < self.num_linear - 1:
                h = self.activation(h)
        return h

    def sdf(self, x: torch.Tensor) -> torch.Tensor:
        return self.forward(x)[..., 0]

    def sdf_with_feature(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        out = self.forward(x)
        return out[..., 0], out[..., 1:]

    def gradient(self, x: torch.Tensor, create_graph: bool = False) -> torch.Tensor:
        x = as_tensor(x)
        needs = x.requires_grad
        with torch.enable_grad():
            if not needs:
                x = x.detach().requires_grad_(True)
            val = self.sdf(x)
            (grad,) = torch.autograd.grad(
                val, x, grad_outputs=torch.ones_like(val), create_graph=create_graph,
                retain_graph=create_graph or needs,
            )
        return grad

    def set_alpha(self, alpha: float | None):
        self.encoding = EncodingConfig(self.encoding.num_freqs, self.encoding.include_input, alpha)


class RadianceField(nn.Module):
    """View-dependent color head: (position, direction, normal, feature) -> rgb.

    Directions get their own (always fully active) frequency encoding;
    output passes through a sigmoid so colors stay in [0, 1].
    """

    def __init__(
        self,
        feature_dim: int = 256,
        hidden: int = 256,
        num_layers: int = 4,
        dir_freqs: int = 4,
        rng: np.random.Generator | None = None,
    ):
        super().__init__()
        if rng is None:
            rng = np.random.default_rng(1)
        self.dir_encoding = EncodingConfig(num_freqs=dir_freqs, include_input=True)
        self.feature_dim = feature_dim
        self.hidden = hidden
        self.num_hidden = num_layers
        d_in = 3 + self.dir_encoding.dim(3) + 3 + feature_dim
        dims = [d_in] + [hidden] * num_layers + [3]
        layers = []
        for l in range(len(dims) - 1):
            lin = nn.Linear(dims[l], dims[l + 1], dtype=DTYPE)
            with torch.no_grad():
                lin.weight.copy_(_normal(rng, (dims[l + 1], dims[l]), std=math.sqrt(2.0 / dims[l])))
                lin.bias.zero_()
            layers.append(lin)
        self.layers = nn.ModuleList(layers)

    def forward(self, x, view_dir, normal, feature) -> torch.Tensor:
        h = torch.cat([as_tensor(x), encode(view_dir, self.dir_encoding), as_tensor(normal), feature], dim=-1)
        for l, lin in enumerate(self.layers):
            h = lin(h)
            if l < len(self.layers) - 1:
                h = torch.relu(h)
        return torch.sigmoid(h)


def sdf_eval(field, x, create_graph: bool = False) -> tuple[torch.Tensor, torch.Tensor]:
    """(value, spatial gradient) of any SDF-like field at (N, 3) points.

    Analytic primitives supply exact gradients; neural fields differentiate
    through the network.
    """
    x = as_tensor(x)
    if isinstance(field, AnalyticSdf):
        return field.sdf(x), field.gradient(x)
    return field.sdf(x), field.gradient(x, create_graph=create_graph)


def radiance_eval(field, x, view_dir, normal, feature) -> torch.Tensor:
    """Color of a radiance-like field; thin dispatch so analytic emitters and
    the neural head share call sites."""
    return field(x, view_dir, normal, feature)


# --------------------------------------------------------------------------
# analytic primitives
# --------------------------------------------------------------------------
class AnalyticSdf:
    """Closed-form signed distance functions with exact gradients.

    All are torch-differentiable in x as well, so they can stand in for the
    neural field anywhere (rendering, intersection, training oracles).
    """

    kind = "base"

    def sdf(self, x: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def gradient(self, x: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def to_dict(self) -> dict:
        raise NotImplementedError

    def bound_radius(self) -> float:
        """Radius of the tightest origin-centered sphere containing the
        surface; lets ray sampling span only the occupied segment."""
        raise NotImplementedError

    @staticmethod
    def from_dict(d: dict) -> "AnalyticSdf":
        kind = d.get("kind")
        if kind == "sphere":
            return SphereSdf(d["radius"], d.get("center", (0.0, 0.0, 0.0)))
        if kind == "box":
            return BoxSdf(d["half_extents"])
        if kind == "torus":
            return TorusSdf(d["major_radius"], d["minor_radius"])
        if kind == "union":
            return UnionSdf([AnalyticSdf.from_dict(c) for c in d["children"]])
        raise ParseError(f"unknown analytic sdf kind {kind!r}")


class SphereSdf(AnalyticSdf):
    kind = "sphere"

    def __init__(self, radius: float, center=(0.0, 0.0, 0.0)):
        if radius <= 0:
            raise ValueError("radius must be positive")
        self.radius = float(radius)
        self.center = as_tensor(center).reshape(3)

    def sdf(self, x):
        return torch.linalg.norm(as_tensor(x) - self.center, dim=-1) - self.radius

    def gradient(self, x):
        d = as_tensor(x) - self.center
        n = torch.linalg.norm(d, dim=-1, keepdim=True)
        return d / torch.clamp(n, min=1e-30)

    def to_dict(self):
        return {"kind": "sphere", "radius": self.radius, "center": self.center.tolist()}

    def bound_radius(self):
        return float(torch.linalg.norm(self.center)) + self.radius


class BoxSdf(AnalyticSdf):
    kind = "box"

    def __init__(self, half_extents):
        self.half_extents = as_tensor(half_extents).reshape(3)
        if bool((self.half_extents <= 0).any()):
            raise ValueError("half extents must be positive")

    def sdf(self, x):
        q = torch.abs(as_tensor(x)) - self.half_extents
        outside = torch.linalg.norm(torch.clamp(q, min=0.0), dim=-1)
        inside = torch.clamp(q.max(dim=-1).values, max=0.0)
        return outside + inside

    def gradient(self, x):
        x = as_tensor(x)
        q = torch.abs(x) - self.half_extents
        sign = torch.where(x >= 0, 1.0, -1.0)
        pos = torch.clamp(q, min=0.0)
        out_norm = torch.linalg.norm(pos, dim=-1, keepdim=True)
        is_outside = (q > 0).any(dim=-1, keepdim=True)
        g_out = sign * pos / torch.clamp(out_norm, min=1e-30)
        # inside: distance is governed by the closest face (largest q)
        face = torch.nn.functional.one_hot(q.argmax(dim=-1), 3).to(x.dtype)
        g_in = sign * face
        return torch.where(is_outside, g_out, g_in)

    def to_dict(self):
        return {"kind": "box", "half_extents": self.half_extents.tolist()}

    def bound_radius(self):
        return float(torch.linalg.norm(self.half_extents))


class TorusSdf(AnalyticSdf):
    """Torus around the z axis: ring radius ``major``, tube radius ``minor``."""

    kind = "torus"

    def __init__(self, major_radius: float, minor_radius: float):
        if not (major_radius > minor_radius > 0):
            raise ValueError("need major > minor > 0")
        self.major = float(major_radius)
        self.minor = float(minor_radius)

    def sdf(self, x):
        x = as_tensor(x)
        rho = torch.linalg.norm(x[..., :2], dim=-1)
        q = torch.stack([rho - self.major, x[..., 2]], dim=-1)
        return torch.linalg.norm(q, dim=-1) - self.minor

    def gradient(self, x):
        x = as_tensor(x)
        rho = torch.clamp(torch.linalg.norm(x[..., :2], dim=-1, keepdim=True), min=1e-30)
        q1 = rho[..., 0] - self.major
        q2 = x[..., 2]
        qn = torch.clamp(torch.sqrt(q1 * q1 + q2 * q2), min=1e-30)
        radial = x[..., :2] / rho
        g_xy = (q1 / qn)[..., None] * radial
        g_z = (q2 / qn)[..., None]
        return torch.cat([g_xy, g_z], dim=-1)

    def to_dict(self):
        return {"kind": "torus", "major_radius": self.major, "minor_radius": self.minor}

    def bound_radius(self):
        return self.major + self.minor


class UnionSdf(AnalyticSdf):
    kind = "union"

    def __init__(self, children):
        if not children:
            raise ValueError("union needs at least one child")
        self.children = list(children)

    def sdf(self, x):
        return torch.stack([c.sdf(x) for c in self.children], dim=-1).min(dim=-1).values

    def gradient(self, x):
        vals = torch.stack([c.sdf(x) for c in self.children], dim=-1)
        grads = torch.stack([c.gradient(x) for c in self.children], dim=-2)
        idx = vals.argmin(dim=-1)
        return torch.gather(
            grads, -2, idx[..., None, None].expand(*idx.shape, 1, 3)
        ).squeeze(-2)

    def to_dict(self):
        return {"kind": "union", "children": [c.to_dict() for c in self.children]}

    def bound_radius(self):
        return max(c.bound_radius() for c in self.children)


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------
@dataclass
class Checkpoint:
    sdf: SdfField
    radiance: RadianceField
    sharpness_raw: torch.Tensor
    poses: list  # list[Pose]; deferred import to avoid a cycle
    iteration: int
    header: dict


def _param_entries(sdf, radiance, sharpness_raw, poses):
    entries = []
    for name, p in sdf.named_parameters():
        entries.append((f"sdf.{name}", p.detach()))
    for name, p in radiance.named_parameters():
        entries.append((f"radiance.{name}", p.detach()))
    entries.append(("sharpness_raw", sharpness_raw.detach().reshape(1)))
    for i, pose in enumerate(poses):
        entries.append((f"pose.{i}.rotation", pose.rotation))
        entries.append((f"pose.{i}.translation", pose.translation))
        entries.append((f"pose.{i}.delta", pose.delta.detach()))
    return entries


def save_checkpoint(path, sdf: SdfField, radiance: RadianceField, sharpness_raw, poses, iteration: int):
    """Write a single-file checkpoint: one JSON header line, then raw little-
    endian float64 parameter data in header order."""
    sharpness_raw = as_tensor(sharpness_raw)
    entries = _param_entries(sdf, radiance, sharpness_raw, poses)
    header = {
        "format": _CKPT_FORMAT,
        "iteration": int(iteration),
        "encoding": asdict(sdf.encoding),
        "arch": {
            "sdf": {
                "hidden": sdf.hidden,
                "num_layers": sdf.num_hidden,
                "skip_layer": sdf.skip_layer,
                "feature_dim": sdf.feature_dim,
                "r0": sdf.r0,
                "softplus_beta": float(sdf.activation.beta),
            },
            "radiance": {
                "hidden": radiance.hidden,
                "num_layers": radiance.num_hidden,
                "dir_freqs": radiance.dir_encoding.num_freqs,
                "feature_dim": radiance.feature_dim,
            },
        },
        "n_poses": len(poses),
        "params": [[name, list(t.shape)] for name, t in entries],
    }
    blob = b"".join(t.numpy().astype("<f8").tobytes() for _, t in entries)
    with open(path, "wb") as f:
        f.write(json.dumps(header).encode("utf-8"))
        f.write(b"\n")
        f.write(blob)


def load_checkpoint(path) -> Checkpoint:
    """Inverse of save_checkpoint; rebuilds the fields and poses."""
    from .geometry import Pose  # local import: geometry does not know about fields

    with open(path, "rb") as f:
        head_line = f.readline()
        blob = f.read()
    try:
        header = json.loads(head_line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ParseError(f"checkpoint header is not valid JSON: {e}", path=str(path))
    if header.get("format") != _CKPT_FORMAT:
        raise ParseError(f"unrecognized checkpoint format {header.get('format')!r}", path=str(path))

    arrays = {}
    offset = 0
    for name, shape in header["params"]:
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 8
        if offset + nbytes > len(blob):
            raise ParseError(f"checkpoint truncated at parameter {name!r}", path=str(path))
        arrays[name] = np.frombuffer(blob[offset : offset + nbytes], dtype="<f8").reshape(shape)
        offset += nbytes
    if offset != len(blob):
        raise ParseError(f"{len(blob) - offset} trailing bytes after parameters", path=str(path))

    enc = EncodingConfig(**header["encoding"])
    a_s = header["arch"]["sdf"]
    a_r = header["arch"]["radiance"]
    sdf = SdfField(
        encoding=enc,
        hidden=a_s["hidden"],
        num_layers=a_s["num_layers"],
        skip_layer=a_s["skip_layer"],
        feature_dim=a_s["feature_dim"],
        r0=a_s["r0"],
        softplus_beta=a_s["softplus_beta"],
        geometric_init=False,  # parameters are restored below anyway
    )
    radiance = RadianceField(
        feature_dim=a_r["feature_dim"],
        hidden=a_r["hidden"],
        num_layers=a_r["num_layers"],
        dir_freqs=a_r["dir_freqs"],
    )
    with torch.no_grad():
        for name, p in sdf.named_parameters():
            p.copy_(torch.tensor(arrays[f"sdf.{name}"], dtype=DTYPE))
        for name, p in radiance.named_parameters():
            p.copy_(torch.tensor(arrays[f"radiance.{name}"], dtype=DTYPE))
    sharpness_raw = torch.tensor(arrays["sharpness_raw"][0], dtype=DTYPE, requires_grad=True)
    poses = []
    for i in range(header["n_poses"]):
        pose = Pose(
            arrays[f"pose.{i}.rotation"],
            arrays[f"pose.{i}.translation"],
            delta=arrays[f"pose.{i}.delta"],
        )
        poses.append(pose)
    return Checkpoint(sdf, radiance, sharpness_raw, poses, header["iteration"], header)
