"""Volume rendering of an SDF field along camera rays.

Opacity comes from the logistic CDF of the signed distance: for consecutive
samples k, k+1 along a ray,

    alpha_k = max((Phi_s(f_k) - Phi_s(f_{k+1})) / Phi_s(f_k), 0),
    w_k = alpha_k * prod_{j<k} (1 - alpha_j),

with Phi_s the sigmoid of sharpness s. Weights are nonnegative and sum to at
most 1; the remainder goes to a constant background color.

Sampling happens inside the intersection of the ray with a bounding sphere.
Sample positions are parametrized as fixed fractions of [near, far], so they
move smoothly with the camera pose and rendered values stay differentiable
w.r.t. pose deltas even though the fractions themselves are not.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .geometry import Ray
from .utils import DTYPE, as_tensor

# smallest useful positive float64; guards the alpha ratio against 0/0 deep
# inside the surface without disturbing any non-underflowed lane
_PHI_FLOOR = 1e-300


@dataclass(frozen=True)
class RenderConfig:
    n_coarse: int = 64
    n_importance: int = 64
    bound_radius: float = 1.2
    eps_w: float = 1e-4  # accumulated-weight floor below which depth is a miss
    importance_sharpness: float = 64.0  # fixed s for the coarse resampling pass
    background: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if self.n_coarse < 2:
            raise ValueError("need at least 2 coarse samples")
        if self.n_importance < 0:
            raise ValueError("n_importance must be >= 0")
        if self.bound_radius <= 0:
            raise ValueError("bound_radius must be positive")


@dataclass
class RaySamples:
    t: torch.Tensor  # (S,) strictly increasing
    positions: torch.Tensor  # (S, 3)
    sdf: torch.Tensor | None = None  # (S,) when a field was supplied


@dataclass
class RenderResult:
    rgb: torch.Tensor  # (3,)
    weights: torch.Tensor  # (S-1,)
    accumulated: torch.Tensor  # () sum of weights
    expected_depth: torch.Tensor  # () sentinel = far when accumulated < eps_w
    miss: bool  # ray never entered the bounding sphere, or weight below floor


# --------------------------------------------------------------------------
# bounds and sampling
# --------------------------------------------------------------------------
def ray_sphere_bounds(
    origins: torch.Tensor, dirs: torch.Tensor, radius: float
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Entry/exit distances of rays against the centered bounding sphere.

    Returns (near (N,), far (N,), hit (N,) bool). Differentiable w.r.t. both
    inputs on hit lanes; non-hit lanes carry zeros.
    """
    o = as_tensor(origins).reshape(-1, 3)
    d = as_tensor(dirs).reshape(-1, 3)
    b = (o * d).sum(-1)
    c = (o * o).sum(-1) - radius * radius
    disc = b * b - c
    hit = disc > 0
    safe = torch.where(hit, disc, torch.ones_like(disc))
    root = torch.sqrt(safe)
    near = torch.clamp(-b - root, min=0.0)
    far = -b + root
    hit = hit & (far > 0)
    near = torch.where(hit, near, torch.zeros_like(near))
    far = torch.where(hit, far, torch.zeros_like(far))
    return near, far, hit


def _uniform_fractions(n: int, count: int, rng: np.random.Generator | None) -> torch.Tensor:
    """(count, n) sample fractions in [0, 1]: exact linspace without jitter,
    stratified uniform with."""
    if rng is None:
        u = torch.linspace(0.0, 1.0, n, dtype=DTYPE).expand(count, n)
    else:
        jit = torch.tensor(rng.random((count, n)), dtype=DTYPE)
        u = (torch.arange(n, dtype=DTYPE) + jit) / n
    return u


def _importance_fractions(
    t: torch.Tensor,
    sdf_vals: torch.Tensor,
    near: torch.Tensor,
    far: torch.Tensor,
    n_imp: int,
    sharpness: float,
    rng: np.random.Generator | None,
) -> torch.Tensor:
    """Inverse-CDF resampling of [near, far] fractions from coarse weights.

    Runs detached: the returned fractions are treated as constants, like the
    coarse linspace fractions.
    """
    with torch.no_grad():
        _, w = neus_alpha_weights(sdf_vals, torch.tensor(sharpness, dtype=DTYPE))
        pdf = w + 1e-5
        pdf = pdf / pdf.sum(-1, keepdim=True)
        cdf = torch.cumsum(pdf, dim=-1)
        cdf = torch.cat([torch.zeros_like(cdf[..., :1]), cdf], dim=-1)  # (N, S)
        if rng is None:
            u = (torch.arange(n_imp, dtype=DTYPE) + 0.5) / n_imp
            u = u.expand(t.shape[0], n_imp)
        else:
            u = torch.tensor(rng.random((t.shape[0], n_imp)), dtype=DTYPE)
        idx = torch.clamp(torch.searchsorted(cdf, u.contiguous(), right=True) - 1, 0, t.shape[1] - 2)
        cdf_lo = torch.gather(cdf, 1, idx)
        cdf_hi = torch.gather(cdf, 1, idx + 1)
        t_lo = torch.gather(t, 1, idx)
        t_hi = torch.gather(t, 1, idx + 1)
        frac_in_bin = (u - cdf_lo) / torch.clamp(cdf_hi - cdf_lo, min=1e-12)
        t_new = t_lo + frac_in_bin * (t_hi - t_lo)
        span = torch.clamp(far - near, min=1e-12)
        return ((t_new - near[:, None]) / span[:, None]).clamp(0.0, 1.0)


def sample_rays(
    sdf,
    origins: torch.Tensor,
    dirs: torch.Tensor,
    near: torch.Tensor,
    far: torch.Tensor,
    cfg: RenderConfig,
    rng: np.random.Generator | None = None,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Sample distances along each ray: (t (N, S), positions (N, S, 3)).

    Coarse pass is uniform in [near, far]; the optional importance pass
    resamples around surface crossings found by a fixed-sharpness weighting
    of coarse SDF values (evaluated without gradients).
    """
    o = as_tensor(origins).reshape(-1, 3)
    d = as_tensor(dirs).reshape(-1, 3)
    n = o.shape[0]
    span = far - near
    frac = _uniform_fractions(cfg.n_coarse, n, rng)
    t = near[:, None] + frac * span[:, None]
    if cfg.n_importance > 0:
        with torch.no_grad():
            coarse_pos = o[:, None, :] + t[..., None] * d[:, None, :]
            coarse_sdf = sdf.sdf(coarse_pos.reshape(-1, 3)).reshape(n, -1)
        imp_frac = _importance_fractions(
            t.detach(), coarse_sdf, near.detach(), far.detach(),
            cfg.n_importance, cfg.importance_sharpness, rng,
        )
        frac = torch.sort(torch.cat([frac, imp_frac], dim=-1), dim=-1).values
    # tie-break ramp: keeps ordering strict even on exact duplicates
    frac = frac + torch.arange(frac.shape[-1], dtype=DTYPE) * 1e-15
    t = near[:, None] + frac * span[:, None]
    positions = o[:, None, :] + t[..., None] * d[:, None, :]
    return t, positions


def sample_ray(
    ray: Ray,
    near: float,
    far: float,
    n_coarse: int,
    n_importance: int = 0,
    sdf=None,
    rng: np.random.Generator | None = None,
) -> RaySamples:
    """Single-ray sampling; importance placement requires ``sdf``."""
    if n_importance > 0 and sdf is None:
        raise ValueError("importance sampling needs an sdf field")
    cfg = RenderConfig(n_coarse=n_coarse, n_importance=n_importance)
    t, pos = sample_rays(
        sdf,
        ray.origin[None],
        ray.direction[None],
        as_tensor([near]),
        as_tensor([far]),
        cfg,
        rng,
    )
    vals = sdf.sdf(pos[0]) if sdf is not None else None
    return RaySamples(t=t[0], positions=pos[0], sdf=vals)


# --------------------------------------------------------------------------
# weights
# --------------------------------------------------------------------------
def neus_alpha_weights(
    sdf_vals: torch.Tensor, s: torch.Tensor
) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-section opacity and render weights from SDF samples (..., S).

    Returns (alpha (..., S-1), weights (..., S-1)).
    """
    phi = torch.sigmoid(as_tensor(s) * as_tensor(sdf_vals))
    num = phi[..., :-1] - phi[..., 1:]
    alpha = torch.clamp(num / torch.clamp(phi[..., :-1], min=_PHI_FLOOR), min=0.0, max=1.0)
    one_minus = 1.0 - alpha
    trans = torch.cumprod(
        torch.cat([torch.ones_like(alpha[..., :1]), one_minus[..., :-1]], dim=-1), dim=-1
    )
    return alpha, alpha * trans


def neus_weights(samples, s) -> torch.Tensor:
    """Render weights for a RaySamples (uses its SDF values) or a raw tensor
    of SDF samples."""
    vals = samples.sdf if isinstance(samples, RaySamples) else samples
    if vals is None:
        raise ValueError("samples carry no SDF values")
    return neus_alpha_weights(vals, s)[1]


# --------------------------------------------------------------------------
# rendering
# --------------------------------------------------------------------------
def render_rays(
    sdf,
    radiance,
    origins: torch.Tensor,
    dirs: torch.Tensor,
    s,
    cfg: RenderConfig = RenderConfig(),
    rng: np.random.Generator | None = None,
    with_normals: bool = True,
):
    """Batched renderer. Returns a dict with rgb (N, 3), weights (N, S-1),
    accumulated (N,), depth (N,), hit (N,), miss (N,), and the per-sample
    tensors (positions, sdf, gradients) for reuse by callers.

    Rays that never enter the bounding sphere get the background color, zero
    weights, and depth 0 (their ``hit`` is False). Rays whose accumulated
    weight falls below eps_w keep their color but report depth = far (miss).
    """
    o = as_tensor(origins).reshape(-1, 3)
    d = as_tensor(dirs).reshape(-1, 3)
    n = o.shape[0]
    s = as_tensor(s)
    bg = as_tensor(cfg.background)
    near, far, hit = ray_sphere_bounds(o, d, cfg.bound_radius)
    total = cfg.n_coarse + cfg.n_importance
    out = {
        "rgb": bg.expand(n, 3).clone(),
        "weights": torch.zeros(n, total - 1, dtype=DTYPE),
        "accumulated": torch.zeros(n, dtype=DTYPE),
        "depth": torch.zeros(n, dtype=DTYPE),
        "hit": hit,
        "miss": torch.ones(n, dtype=torch.bool),
        "near": near,
        "far": far,
        "positions": None,
        "sdf": None,
        "gradients": None,
    }
    idx = hit.nonzero(as_tuple=True)[0]
    if idx.numel() == 0:
        return out
    o_h, d_h = o[idx], d[idx]
    near_h, far_h = near[idx], far[idx]
    t, pos = sample_rays(sdf, o_h, d_h, near_h, far_h, cfg, rng)
    flat = pos.reshape(-1, 3)
    if not flat.requires_grad:
        flat = flat.detach().requires_grad_(True)
    vals, feat = sdf.sdf_with_feature(flat) if hasattr(sdf, "sdf_with_feature") else (sdf.sdf(flat), None)
    grads = None
    if with_normals:
        (grads,) = torch.autograd.grad(
            vals, flat, grad_outputs=torch.ones_like(vals), create_graph=True
        )
    sdf_vals = vals.reshape(len(idx), -1)
    _, weights = neus_alpha_weights(sdf_vals, s)

    if radiance is not None:
        sec = slice(None, -1)  # colors attach to section start points
        pos_sec = flat.reshape(len(idx), -1, 3)[:, sec, :].reshape(-1, 3)
        dir_sec = d_h[:, None, :].expand(-1, t.shape[1] - 1, -1).reshape(-1, 3)
        feat_sec = (
            feat.reshape(len(idx), -1, feat.shape[-1])[:, sec, :].reshape(-1, feat.shape[-1])
            if feat is not None
            else torch.zeros(pos_sec.shape[0], 0, dtype=DTYPE)
        )
        grad_sec = (
            grads.reshape(len(idx), -1, 3)[:, sec, :].reshape(-1, 3)
            if grads is not None
            else torch.zeros_like(pos_sec)
        )
        colors = radiance(pos_sec, dir_sec, grad_sec, feat_sec).reshape(len(idx), -1, 3)
        rgb = (weights[..., None] * colors).sum(-2)
    else:
        rgb = torch.zeros(len(idx), 3, dtype=DTYPE)
    acc = weights.sum(-1)
    rgb = rgb + (1.0 - acc)[:, None] * bg
    depth = (weights * t[:, :-1]).sum(-1) / torch.clamp(acc, min=cfg.eps_w)
    miss_h = acc < cfg.eps_w
    depth = torch.where(miss_h, far_h, depth)

    out["rgb"] = out["rgb"].index_copy(0, idx, rgb)
    out["weights"] = out["weights"].index_copy(0, idx, weights)
    out["accumulated"] = out["accumulated"].index_copy(0, idx, acc)
    out["depth"] = out["depth"].index_copy(0, idx, depth)
    miss = torch.ones(n, dtype=torch.bool)
    miss[idx] = miss_h
    out["miss"] = miss
    out["positions"] = pos
    out["sdf"] = sdf_vals
    out["gradients"] = grads.reshape(len(idx), -1, 3) if grads is not None else None
    return out


def render_pixel(
    sdf,
    radiance,
    ray: Ray,
    s,
    cfg: RenderConfig = RenderConfig(),
    rng: np.random.Generator | None = None,
) -> RenderResult:
    """Render one ray to a RenderResult. Colors stay in [0, 1] as long as the
    radiance field and background do."""
    out = render_rays(sdf, radiance, ray.origin[None], ray.direction[None], s, cfg, rng)
    return RenderResult(
        rgb=out["rgb"][0],
        weights=out["weights"][0],
        accumulated=out["accumulated"][0],
        expected_depth=out["depth"][0],
        miss=bool(out["miss"][0]),
    )


def render_depth(
    sdf,
    ray: Ray,
    s,
    cfg: RenderConfig = RenderConfig(),
    rng: np.random.Generator | None = None,
) -> torch.Tensor:
    """Expected surface depth along one ray (sentinel: far distance when the
    accumulated weight is below eps_w, i.e. the ray sees through the scene)."""
    out = render_rays(
        sdf, None, ray.origin[None], ray.direction[None], s, cfg, rng, with_normals=False
    )
    return out["depth"][0]


def render_depth_rays(
    sdf,
    origins,
    dirs,
    s,
    cfg: RenderConfig = RenderConfig(),
    rng: np.random.Generator | None = None,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Batched expected depth: (depth (N,), miss (N,))."""
    out = render_rays(sdf, None, origins, dirs, s, cfg, rng, with_normals=False)
    return out["depth"], out["miss"]
