"""Coordinate conventions, affine algebra, warp fields, sampling, and TPS.

Every other module builds on three conventions fixed here:

* normalized coordinates: ``(x, y)`` in ``[-1, 1]^2``, x rightward, y
  downward, with corner *pixel centers* mapping exactly to +/-1
  (``align_corners=True`` everywhere);
* warp fields are backward maps: ``field[..., i, j, :]`` holds the source
  location sampled for output pixel ``(i, j)``, shape ``(..., H, W, 2)``
  with ``(x, y)`` order in the last dimension (what ``grid_sample`` eats);
* affines act on normalized coordinates as ``z -> J z + t``.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass

import torch
import torch.nn.functional as F


class SingularAffineError(ValueError):
    """Raised when inverting an affine whose linear part is singular."""


# ---------------------------------------------------------------------------
# identity grid
# ---------------------------------------------------------------------------

@functools.lru_cache(maxsize=128)
def _axis_coords(n: int) -> torch.Tensor:
    """Float32 coordinates along one axis whose grid_sample round trip is exact.

    ``grid_sample`` unnormalizes coordinates as ``((x + 1) / 2) * (n - 1)``
    in float32.  Naive linspace endpoints survive that, but interior points
    usually land a few ulp away from their integer pixel index, so an
    "identity" warp would not reproduce the image bit-for-bit.  Starting from
    the float64 formula we nudge each coordinate by single ulps until the
    float32 round trip hits its pixel index exactly.
    """
    if n == 1:
        return torch.zeros(1)
    k = torch.arange(n, dtype=torch.float64)
    x = ((2.0 * k - (n - 1)) / (n - 1)).to(torch.float32)
    target = k.to(torch.float32)

    def roundtrip(v: torch.Tensor) -> torch.Tensor:
        return ((v + 1.0) / 2.0) * float(n - 1)

    # For a few (n, k) combinations no float32 coordinate round-trips exactly
    # (the two roundings skip over the integer); those stay within one ulp and
    # are caught by the identity fast path in sample().
    for _ in range(16):
        rt = roundtrip(x)
        if torch.equal(rt, target):
            break
        toward = torch.where(rt > target, -torch.inf, torch.inf).to(x.dtype)
        x = torch.where(rt == target, x, torch.nextafter(x, toward))
    return x


def make_identity_grid(height: int, width: int, device=None) -> torch.Tensor:
    """Return the (height, width, 2) normalized identity grid.

    Corner pixel centers map exactly to +/-1; a 1x1 grid maps to (0, 0).
    Sampling any image with this grid reproduces it bit-identically.
    """
    if height < 1 or width < 1:
        raise ValueError(f"grid dimensions must be positive, got {height}x{width}")
    ys = _axis_coords(int(height))
    xs = _axis_coords(int(width))
    yy, xx = torch.meshgrid(ys, xs, indexing="ij")
    grid = torch.stack([xx, yy], dim=-1)
    return grid.to(device) if device is not None else grid


# ---------------------------------------------------------------------------
# affine algebra
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Affine2D:
    """z -> linear @ z + translation in normalized coordinates.

    ``linear`` is (..., 2, 2) and ``translation`` (..., 2); leading batch
    dimensions are allowed and broadcast together.
    """

    linear: torch.Tensor
    translation: torch.Tensor

    def apply(self, points: torch.Tensor) -> torch.Tensor:
        """Apply to points shaped (..., 2)."""
        moved = torch.einsum("...ij,...j->...i", self.linear, points)
        return moved + self.translation

    @property
    def batch_shape(self) -> torch.Size:
        return self.linear.shape[:-2]


def identity_affine(batch_shape=(), dtype=torch.float32, device=None) -> Affine2D:
    eye = torch.eye(2, dtype=dtype, device=device).expand(*batch_shape, 2, 2).clone()
    zero = torch.zeros(*batch_shape, 2, dtype=dtype, device=device)
    return Affine2D(eye, zero)


def compose_affine(a: Affine2D, b: Affine2D) -> Affine2D:
    """Return a∘b, i.e. z -> a(b(z))."""
    linear = a.linear @ b.linear
    translation = torch.einsum("...ij,...j->...i", a.linear, b.translation) + a.translation
    return Affine2D(linear, translation)


def invert_affine(a: Affine2D, det_eps: float = 1e-8) -> Affine2D:
    """Invert; compose_affine(a, invert_affine(a)) is identity within 1e-6."""
    det = torch.linalg.det(a.linear)
    if bool((det.abs() <= det_eps).any()):
        raise SingularAffineError(
            f"affine linear part is singular (|det| <= {det_eps}): det={det.tolist()}"
        )
    inv = torch.linalg.inv(a.linear)
    translation = -torch.einsum("...ij,...j->...i", inv, a.translation)
    return Affine2D(inv, translation)


def affine_to_warpfield(a: Affine2D, height: int, width: int) -> torch.Tensor:
    """Evaluate the affine on every grid coordinate.

    Returns (..., H, W, 2) where leading dims are the affine's batch shape.
    An identity affine reproduces the identity grid exactly.
    """
    grid = make_identity_grid(height, width, device=a.linear.device).to(a.linear.dtype)
    target = torch.einsum("...ij,hwj->...hwi", a.linear, grid)
    return target + a.translation[..., None, None, :]


# ---------------------------------------------------------------------------
# differentiable backward sampling
# ---------------------------------------------------------------------------

_PADDING_MODES = {"border", "zeros"}


def sample(image: torch.Tensor, warp: torch.Tensor, padding: str = "border") -> torch.Tensor:
    """Bilinearly sample ``image`` at the backward-warp targets in ``warp``.

    Parameters
    ----------
    image : (C, H, W) or (B, C, H, W) tensor
    warp : (H', W', 2) or (B, H', W', 2) tensor of normalized source coords
    padding : "border" for images, "zeros" for masks (out-of-frame reads 0)

    Differentiable w.r.t. both the image values and the warp coordinates.
    """
    if padding not in _PADDING_MODES:
        raise ValueError(f"padding must be one of {sorted(_PADDING_MODES)}, got {padding!r}")
    squeeze = image.dim() == 3
    img = image.unsqueeze(0) if squeeze else image
    grid = warp.unsqueeze(0) if warp.dim() == 3 else warp
    if img.dim() != 4 or grid.dim() != 4 or grid.shape[-1] != 2:
        raise ValueError(
            f"expected image (B,C,H,W) and warp (B,H,W,2), got {tuple(image.shape)} "
            f"and {tuple(warp.shape)}"
        )
    if grid.shape[0] == 1 and img.shape[0] > 1:
        grid = grid.expand(img.shape[0], -1, -1, -1)
    elif img.shape[0] == 1 and grid.shape[0] > 1:
        img = img.expand(grid.shape[0], -1, -1, -1)
    elif img.shape[0] != grid.shape[0]:
        raise ValueError(f"batch mismatch: image {img.shape[0]} vs warp {grid.shape[0]}")
    if _is_identity_warp(img, grid):
        out = img.clone()
    else:
        out = F.grid_sample(img, grid, mode="bilinear", padding_mode=padding, align_corners=True)
    return out.squeeze(0) if squeeze else out


def _is_identity_warp(img: torch.Tensor, grid: torch.Tensor) -> bool:
    # An identity warp is mathematically an exact copy, but grid_sample's
    # float32 coordinate unnormalization can land a hair off a pixel center,
    # so take the algebraic shortcut.  Skipped whenever gradients w.r.t. the
    # warp are in play (identity grids are data, not network output).
    if grid.requires_grad or img.shape[-2:] != grid.shape[1:3]:
        return False
    ident = make_identity_grid(grid.shape[1], grid.shape[2], device=grid.device)
    if ident.dtype != grid.dtype:
        return False
    return torch.equal(grid, ident.unsqueeze(0).expand_as(grid))


def sample_many(image: torch.Tensor, fields: torch.Tensor, padding: str = "border") -> torch.Tensor:
    """Sample one (B, C, H, W) image through K fields (B, K, H', W', 2).

    Returns (B, K, C, H', W').
    """
    b, k = fields.shape[0], fields.shape[1]
    flat = fields.reshape(b * k, *fields.shape[2:])
    rep = image.unsqueeze(1).expand(b, k, *image.shape[1:]).reshape(b * k, *image.shape[1:])
    out = sample(rep, flat, padding=padding)
    return out.reshape(b, k, *out.shape[1:])


# ---------------------------------------------------------------------------
# thin-plate-spline deformations
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TPSConfig:
    """Random-deformation settings: control lattice size and displacement scale."""

    points: int = 5            # control grid is points x points over [-1, 1]^2
    sigma: float = 0.15        # max |displacement| per control point (L-inf bound)
    affine_sigma: float = 0.0  # optional global affine jitter scale (0 = identity)


@dataclass(frozen=True)
class TPSParams:
    """A concrete sampled deformation: control points, displacements, jitter."""

    control_points: torch.Tensor  # (N, 2) float64
    displacements: torch.Tensor   # (N, 2) float64, |d|_inf <= sigma
    affine: Affine2D              # global jitter, identity by default


def _control_lattice(points: int) -> torch.Tensor:
    axis = torch.linspace(-1.0, 1.0, points, dtype=torch.float64)
    yy, xx = torch.meshgrid(axis, axis, indexing="ij")
    return torch.stack([xx.reshape(-1), yy.reshape(-1)], dim=-1)


def random_tps(cfg: TPSConfig, seed: int) -> TPSParams:
    """Draw a deformation deterministically from ``seed``."""
    if cfg.points < 2:
        raise ValueError(f"control grid must be at least 2x2, got {cfg.points}")
    gen = torch.Generator().manual_seed(int(seed) & 0x7FFFFFFFFFFFFFFF)
    control = _control_lattice(cfg.points)
    disp = (torch.rand(control.shape, generator=gen, dtype=torch.float64) * 2.0 - 1.0) * cfg.sigma
    if cfg.affine_sigma > 0:
        linear = torch.eye(2, dtype=torch.float64) + cfg.affine_sigma * torch.randn(
            2, 2, generator=gen, dtype=torch.float64
        )
        translation = cfg.affine_sigma * torch.randn(2, generator=gen, dtype=torch.float64)
        jitter = Affine2D(linear, translation)
    else:
        jitter = identity_affine(dtype=torch.float64)
    return TPSParams(control, disp, jitter)


def _tps_kernel(sq_dist: torch.Tensor) -> torch.Tensor:
    # U(r) = r^2 log r^2, with the squared distance clamped away from zero so
    # the log stays finite (the true limit at r=0 is 0).
    sq = sq_dist.clamp(min=1e-12)
    return sq * torch.log(sq)


@functools.lru_cache(maxsize=32)
def _tps_coefficients_cached(control_key, disp_key):
    control = torch.tensor(control_key, dtype=torch.float64)
    disp = torch.tensor(disp_key, dtype=torch.float64)
    n = control.shape[0]
    d2 = (control[:, None, :] - control[None, :, :]).pow(2).sum(-1)
    kernel = _tps_kernel(d2)
    kernel.fill_diagonal_(0.0)
    p = torch.cat([torch.ones(n, 1, dtype=torch.float64), control], dim=1)
    lmat = torch.zeros(n + 3, n + 3, dtype=torch.float64)
    lmat[:n, :n] = kernel
    lmat[:n, n:] = p
    lmat[n:, :n] = p.T
    rhs = torch.cat([disp, torch.zeros(3, 2, dtype=torch.float64)], dim=0)
    coefs = torch.linalg.solve(lmat, rhs)
    return coefs[:n], coefs[n:]  # rbf weights (N, 2), affine part (3, 2)


def _tps_coefficients(params: TPSParams):
    control_key = tuple(map(tuple, params.control_points.tolist()))
    disp_key = tuple(map(tuple, params.displacements.tolist()))
    return _tps_coefficients_cached(control_key, disp_key)


def tps_transform_points(params: TPSParams, points: torch.Tensor) -> torch.Tensor:
    """Evaluate the deformation T at ``points`` (..., 2); differentiable."""
    weights, affine_part = _tps_coefficients(params)
    dtype = points.dtype
    control = params.control_points.to(dtype)
    weights = weights.to(dtype)
    affine_part = affine_part.to(dtype)
    d2 = (points[..., None, :] - control).pow(2).sum(-1)
    rbf = _tps_kernel(d2) @ weights
    lin = affine_part[0] + points @ affine_part[1:]
    moved = points + rbf + lin
    jl = params.affine.linear.to(dtype)
    jt = params.affine.translation.to(dtype)
    return torch.einsum("ij,...j->...i", jl, moved) + jt


def tps_jacobian(params: TPSParams, points: torch.Tensor) -> torch.Tensor:
    """Analytic local Jacobian dT/dz at ``points``; returns (..., 2, 2)."""
    weights, affine_part = _tps_coefficients(params)
    dtype = points.dtype
    control = params.control_points.to(dtype)
    weights = weights.to(dtype)
    diff = points[..., None, :] - control             # (..., N, 2)
    sq = diff.pow(2).sum(-1).clamp(min=1e-12)         # (..., N)
    # U = s log s with s = |z - c|^2, so dU/dz_e = (log s + 1) * 2 (z - c)_e
    du = (torch.log(sq) + 1.0)[..., None] * diff
    grad_rbf = torch.einsum("...ne,nd->...de", 2.0 * du, weights)
    grad = grad_rbf + affine_part[1:].T.to(dtype)     # (..., 2, 2), rows d, cols e
    eye = torch.eye(2, dtype=dtype, device=points.device)
    inner = eye + grad
    return torch.einsum("ij,...jk->...ik", params.affine.linear.to(dtype), inner)


def apply_tps(params: TPSParams, grid: torch.Tensor) -> torch.Tensor:
    """Evaluate the deformation over a grid -> warp field of the same shape.

    Zero displacements with an identity jitter return ``grid`` exactly.
    """
    flat = grid.reshape(-1, 2)
    moved = tps_transform_points(params, flat.to(torch.float64))
    return moved.to(grid.dtype).reshape(grid.shape)
