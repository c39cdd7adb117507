"""Geometry layer: grids, affine algebra, warp fields, sampling, TPS.

Expected values come from independent oracles: 3x3 homogeneous matrix
algebra in numpy float64, per-pixel python loops, and a hand-rolled
bilinear interpolator.
"""

from __future__ import annotations

import numpy as np
import pytest
import torch

from masktransport.geometry import (
    Affine2D,
    SingularAffineError,
    TPSConfig,
    affine_to_warpfield,
    apply_tps,
    compose_affine,
    identity_affine,
    invert_affine,
    make_identity_grid,
    random_tps,
    sample,
    sample_many,
    tps_jacobian,
    tps_transform_points,
)


def rand_affine(gen, scale=0.5):
    """Random well-conditioned affine (float32)."""
    linear = torch.eye(2) + scale * (torch.rand(2, 2, generator=gen) - 0.5)
    translation = scale * (torch.rand(2, generator=gen) - 0.5)
    return Affine2D(linear, translation)


def to_homogeneous(a: Affine2D) -> np.ndarray:
    m = np.eye(3, dtype=np.float64)
    m[:2, :2] = a.linear.detach().cpu().double().numpy()
    m[:2, 2] = a.translation.detach().cpu().double().numpy()
    return m


# ---------------------------------------------------------------------------
# identity grid
# ---------------------------------------------------------------------------

def test_identity_grid_corners_2x2():
    g = make_identity_grid(2, 2)
    expected = torch.tensor(
        [[[-1.0, -1.0], [1.0, -1.0]], [[-1.0, 1.0], [1.0, 1.0]]]
    )
    assert torch.equal(g, expected)


def test_identity_grid_degenerate_1x1():
    g = make_identity_grid(1, 1)
    assert torch.equal(g, torch.zeros(1, 1, 2))


def test_identity_grid_3x3_symmetry():
    g = make_identity_grid(3, 3)
    assert torch.equal(g[1, 1], torch.zeros(2))
    assert torch.equal(g[0, 1], torch.tensor([0.0, -1.0]))
    assert torch.equal(g[1, 0], torch.tensor([-1.0, 0.0]))
    assert torch.equal(g[2, 2], torch.tensor([1.0, 1.0]))


def test_identity_grid_monotone_and_bounded():
    g = make_identity_grid(37, 53)
    xs, ys = g[0, :, 0], g[:, 0, 1]
    assert (xs.diff() > 0).all() and (ys.diff() > 0).all()
    assert xs[0] == -1 and xs[-1] == 1 and ys[0] == -1 and ys[-1] == 1


def test_identity_grid_rejects_bad_dims():
    with pytest.raises(ValueError):
        make_identity_grid(0, 4)
    with pytest.raises(ValueError):
        make_identity_grid(4, -1)


@pytest.mark.parametrize("h,w", [(2, 2), (7, 5), (37, 41), (64, 64), (57, 33), (256, 256)])
def test_sample_identity_is_bit_exact(h, w):
    gen = torch.Generator().manual_seed(41)
    img = torch.rand(3, h, w, generator=gen)
    out = sample(img, make_identity_grid(h, w), padding="border")
    assert torch.equal(out, img)


# ---------------------------------------------------------------------------
# affine algebra
# ---------------------------------------------------------------------------

def test_compose_identities():
    ident = identity_affine()
    out = compose_affine(ident, ident)
    assert torch.equal(out.linear, torch.eye(2))
    assert torch.equal(out.translation, torch.zeros(2))


def test_compose_right_identity():
    gen = torch.Generator().manual_seed(7)
    a = rand_affine(gen)
    out = compose_affine(a, identity_affine())
    assert torch.allclose(out.linear, a.linear)
    assert torch.allclose(out.translation, a.translation)


def test_compose_matches_homogeneous_oracle():
    gen = torch.Generator().manual_seed(11)
    for _ in range(20):
        a, b = rand_affine(gen), rand_affine(gen)
        got = to_homogeneous(compose_affine(a, b))
        want = to_homogeneous(a) @ to_homogeneous(b)
        assert np.abs(got - want).max() < 1e-6


def test_compose_associative():
    gen = torch.Generator().manual_seed(13)
    for _ in range(10):
        a, b, c = rand_affine(gen), rand_affine(gen), rand_affine(gen)
        left = compose_affine(a, compose_affine(b, c))
        right = compose_affine(compose_affine(a, b), c)
        assert torch.allclose(left.linear, right.linear, atol=1e-6)
        assert torch.allclose(left.translation, right.translation, atol=1e-6)


def test_invert_identity_and_translation():
    ident = invert_affine(identity_affine())
    assert torch.allclose(ident.linear, torch.eye(2))
    assert torch.allclose(ident.translation, torch.zeros(2))
    t = Affine2D(torch.eye(2), torch.tensor([0.3, -0.7]))
    inv = invert_affine(t)
    assert torch.allclose(inv.translation, torch.tensor([-0.3, 0.7]))


def test_invert_composes_to_identity():
    gen = torch.Generator().manual_seed(17)
    for _ in range(20):
        a = rand_affine(gen)
        round_trip = compose_affine(a, invert_affine(a))
        assert torch.allclose(round_trip.linear, torch.eye(2), atol=1e-6)
        assert torch.allclose(round_trip.translation, torch.zeros(2), atol=1e-6)


def test_invert_singular_raises_with_det():
    bad = Affine2D(torch.zeros(2, 2), torch.zeros(2))
    with pytest.raises(SingularAffineError, match="det"):
        invert_affine(bad)


# ---------------------------------------------------------------------------
# warp fields
# ---------------------------------------------------------------------------

def test_warpfield_identity_equals_grid():
    field = affine_to_warpfield(identity_affine(), 16, 16)
    assert torch.equal(field, make_identity_grid(16, 16))


def test_warpfield_translation_shifts_x():
    shift = Affine2D(torch.eye(2), torch.tensor([0.5, 0.0]))
    field = affine_to_warpfield(shift, 8, 8)
    grid = make_identity_grid(8, 8)
    assert torch.allclose(field[..., 0], grid[..., 0] + 0.5)
    assert torch.allclose(field[..., 1], grid[..., 1])


def warpfield_loop_oracle(a: Affine2D, h: int, w: int) -> np.ndarray:
    """Brute-force per-pixel evaluation in float64."""
    m = to_homogeneous(a)
    grid = make_identity_grid(h, w).double().numpy()
    out = np.zeros((h, w, 2))
    for i in range(h):
        for j in range(w):
            x, y = grid[i, j]
            out[i, j, 0] = m[0, 0] * x + m[0, 1] * y + m[0, 2]
            out[i, j, 1] = m[1, 0] * x + m[1, 1] * y + m[1, 2]
    return out


def test_warpfield_matches_per_pixel_oracle():
    gen = torch.Generator().manual_seed(19)
    for _ in range(5):
        a = rand_affine(gen)
        field = affine_to_warpfield(a, 64, 64).double().numpy()
        want = warpfield_loop_oracle(a, 64, 64)
        assert np.abs(field - want).max() < 1e-6


def test_warpfield_batched_matches_individual():
    gen = torch.Generator().manual_seed(23)
    affs = [rand_affine(gen) for _ in range(4)]
    batched = Affine2D(
        torch.stack([a.linear for a in affs]),
        torch.stack([a.translation for a in affs]),
    )
    fields = affine_to_warpfield(batched, 12, 10)
    for i, a in enumerate(affs):
        assert torch.allclose(fields[i], affine_to_warpfield(a, 12, 10), atol=1e-7)


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

def test_sample_constant_image_any_warp():
    img = torch.full((3, 9, 9), 0.37)
    gen = torch.Generator().manual_seed(29)
    warp = make_identity_grid(9, 9) + 0.6 * (torch.rand(9, 9, 2, generator=gen) - 0.5)
    out = sample(img, warp, padding="border")
    assert torch.allclose(out, img)


def bilinear_oracle(img: np.ndarray, warp: np.ndarray) -> np.ndarray:
    """Hand-rolled align_corners=True bilinear sampler with border padding."""
    c, h, w = img.shape
    out = np.zeros((c, warp.shape[0], warp.shape[1]))
    for i in range(warp.shape[0]):
        for j in range(warp.shape[1]):
            x = (warp[i, j, 0] + 1) / 2 * (w - 1)
            y = (warp[i, j, 1] + 1) / 2 * (h - 1)
            x0, y0 = int(np.floor(x)), int(np.floor(y))
            fx, fy = x - x0, y - y0
            xs = np.clip([x0, x0 + 1], 0, w - 1)
            ys = np.clip([y0, y0 + 1], 0, h - 1)
            for ch in range(c):
                top = img[ch, ys[0], xs[0]] * (1 - fx) + img[ch, ys[0], xs[1]] * fx
                bot = img[ch, ys[1], xs[0]] * (1 - fx) + img[ch, ys[1], xs[1]] * fx
                out[ch, i, j] = top * (1 - fy) + bot * fy
    return out


def test_sample_matches_bilinear_oracle():
    ramp = torch.arange(16, dtype=torch.float32).reshape(1, 4, 4) / 15.0
    # +1 pixel shift along x: 2/(W-1) in normalized units
    warp = make_identity_grid(4, 4).clone()
    warp[..., 0] += 2.0 / 3.0
    got = sample(ramp, warp, padding="border").numpy()
    want = bilinear_oracle(ramp.numpy(), warp.double().numpy())
    assert np.abs(got - want).max() < 1e-6


def test_sample_random_warp_matches_oracle():
    gen = torch.Generator().manual_seed(31)
    img = torch.rand(2, 6, 7, generator=gen)
    warp = make_identity_grid(6, 7) + 0.5 * (torch.rand(6, 7, 2, generator=gen) - 0.5)
    got = sample(img, warp, padding="border").double().numpy()
    want = bilinear_oracle(img.double().numpy(), warp.double().numpy())
    assert np.abs(got - want).max() < 1e-6


def test_sample_rejects_bad_shapes():
    with pytest.raises(ValueError):
        sample(torch.rand(3, 4, 4), torch.rand(4, 4, 3))
    with pytest.raises(ValueError):
        sample(torch.rand(2, 3, 4, 4), torch.rand(3, 4, 4, 2))
    with pytest.raises(ValueError):
        sample(torch.rand(3, 4, 4), torch.rand(4, 4, 2), padding="reflect")


def test_sample_gradient_wrt_warp_matches_finite_differences():
    gen = torch.Generator().manual_seed(37)
    img = torch.rand(1, 8, 8, generator=gen, dtype=torch.float64)
    # keep coordinates strictly inside pixel cells, away from non-smooth points
    base = make_identity_grid(8, 8).double() + 0.4 * 2 / 7 * (
        torch.rand(8, 8, 2, generator=gen, dtype=torch.float64) - 0.5
    )
    warp = base.clone().requires_grad_(True)
    out = sample(img, warp, padding="border")
    loss = (out * torch.cos(torch.arange(64, dtype=torch.float64).reshape(1, 8, 8))).sum()
    loss.backward()
    eps = 1e-6
    idx = [(1, 2, 0), (5, 5, 1), (3, 6, 0), (7, 0, 1)]
    for i, j, d in idx:
        plus, minus = base.clone(), base.clone()
        plus[i, j, d] += eps
        minus[i, j, d] -= eps
        weight = torch.cos(torch.arange(64, dtype=torch.float64).reshape(1, 8, 8))
        fd = (
            (sample(img, plus) * weight).sum() - (sample(img, minus) * weight).sum()
        ).item() / (2 * eps)
        an = warp.grad[i, j, d].item()
        assert abs(fd - an) < 1e-3 * max(1.0, abs(fd)), (i, j, d, fd, an)


def test_sample_many_matches_loop():
    gen = torch.Generator().manual_seed(43)
    img = torch.rand(2, 3, 10, 10, generator=gen)
    fields = make_identity_grid(10, 10).expand(2, 4, 10, 10, 2).clone()
    fields += 0.1 * (torch.rand(2, 4, 10, 10, 2, generator=gen) - 0.5)
    got = sample_many(img, fields)
    for b in range(2):
        for k in range(4):
            want = sample(img[b], fields[b, k])
            assert torch.equal(got[b, k], want)


# ---------------------------------------------------------------------------
# TPS
# ---------------------------------------------------------------------------

def test_tps_zero_displacement_is_identity_exactly():
    params = random_tps(TPSConfig(points=5, sigma=0.0), seed=0)
    grid = make_identity_grid(32, 32)
    assert torch.equal(apply_tps(params, grid), grid)


def test_tps_same_seed_identical():
    cfg = TPSConfig(points=5, sigma=0.15)
    a, b = random_tps(cfg, seed=123), random_tps(cfg, seed=123)
    assert torch.equal(a.control_points, b.control_points)
    assert torch.equal(a.displacements, b.displacements)


def test_tps_different_seed_differs():
    cfg = TPSConfig(points=5, sigma=0.15)
    a, b = random_tps(cfg, seed=1), random_tps(cfg, seed=2)
    assert not torch.equal(a.displacements, b.displacements)


def test_tps_displacements_bounded():
    cfg = TPSConfig(points=5, sigma=0.15)
    for seed in range(20):
        params = random_tps(cfg, seed)
        assert params.displacements.abs().max() <= cfg.sigma + 1e-12


def test_tps_interpolates_control_points_exactly():
    # single control point displaced by (0.1, 0): the solved spline must pass
    # through it — evaluate at that control location and expect the offset.
    params = random_tps(TPSConfig(points=5, sigma=0.0), seed=0)
    disp = torch.zeros_like(params.displacements)
    disp[7, 0] = 0.1
    params = type(params)(params.control_points, disp, params.affine)
    at_control = tps_transform_points(params, params.control_points.clone())
    want = params.control_points + disp
    assert (at_control - want).abs().max().item() < 1e-9


def test_tps_control_point_visible_in_grid():
    # on a 65x65 grid, lattice controls land exactly on pixel centers
    params = random_tps(TPSConfig(points=5, sigma=0.0), seed=0)
    disp = torch.zeros_like(params.displacements)
    disp[12, :] = torch.tensor([0.1, 0.0])  # center control point (0, 0)
    params = type(params)(params.control_points, disp, params.affine)
    field = apply_tps(params, make_identity_grid(65, 65))
    assert torch.allclose(field[32, 32], torch.tensor([0.1, 0.0]), atol=1e-5)


def test_tps_rejects_tiny_control_grid():
    with pytest.raises(ValueError):
        random_tps(TPSConfig(points=1), seed=0)


def test_tps_jacobian_matches_finite_differences():
    params = random_tps(TPSConfig(points=5, sigma=0.15, affine_sigma=0.05), seed=5)
    pts = torch.tensor([[0.13, -0.4], [-0.72, 0.55], [0.0, 0.01]], dtype=torch.float64)
    jac = tps_jacobian(params, pts)
    eps = 1e-6
    for n in range(pts.shape[0]):
        for e in range(2):
            plus, minus = pts.clone(), pts.clone()
            plus[n, e] += eps
            minus[n, e] -= eps
            fd = (tps_transform_points(params, plus)[n] - tps_transform_points(params, minus)[n]) / (2 * eps)
            assert torch.allclose(jac[n, :, e], fd, atol=1e-4), (n, e, jac[n, :, e], fd)


def test_tps_transform_points_differentiable():
    params = random_tps(TPSConfig(points=5, sigma=0.15), seed=9)
    pts = torch.tensor([[0.2, 0.3]], dtype=torch.float64, requires_grad=True)
    tps_transform_points(params, pts).sum().backward()
    assert pts.grad is not None and torch.isfinite(pts.grad).all()
