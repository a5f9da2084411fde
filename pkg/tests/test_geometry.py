from __future__ import annotations

import numpy as np
import pytest
from scipy import ndimage

from modules import geometry, phantoms
from modules.volume_core import BinaryMask, linear_index
from utils import GeometryError


def brute_force_edt(fg: np.ndarray, spacing) -> np.ndarray:
    spacing = np.asarray(spacing, dtype=np.float64)
    fg_idx = np.argwhere(fg)
    bg_idx = np.argwhere(~fg)
    out = np.zeros(fg.shape)
    if len(fg_idx):
        diff = (fg_idx[:, None, :] - bg_idx[None, :, :]) * spacing
        out[tuple(fg_idx.T)] = np.sqrt((diff ** 2).sum(axis=2)).min(axis=1)
    return out


def random_mask(rng, dims, spacing, fill=0.6) -> BinaryMask:
    fg = rng.random(dims) < fill
    fg[tuple(rng.integers(0, d) for d in dims)] = False
    return BinaryMask.from_bool(fg, spacing=spacing)


# -----------------------------
# Distance transform
# -----------------------------
def test_single_voxel_distance():
    fg = np.zeros((3, 3, 3), dtype=bool)
    fg[1, 1, 1] = True
    dm, _ = geometry.distance_transform(BinaryMask.from_bool(fg))
    assert dm.values[1, 1, 1] == pytest.approx(1.0)
    assert dm.values.sum() == pytest.approx(1.0)


def test_rod_distances():
    fg = np.ones((1, 1, 7), dtype=bool)
    fg[0, 0, 0] = fg[0, 0, 6] = False
    dm, _ = geometry.distance_transform(BinaryMask.from_bool(fg))
    assert np.allclose(dm.values[0, 0, :], [0, 1, 2, 3, 2, 1, 0])


def test_all_foreground_is_an_error():
    with pytest.raises(GeometryError):
        geometry.distance_transform(BinaryMask.from_bool(np.ones((3, 3, 3), dtype=bool)))


def test_empty_mask_gives_zero_distances():
    dm, _ = geometry.distance_transform(BinaryMask.from_bool(np.zeros((3, 3, 3), dtype=bool)))
    assert not dm.values.any()
    assert dm.values.dtype == np.float32


def _check_edt_against_brute_force(rng, count):
    for _ in range(count):
        dims = tuple(int(d) for d in rng.integers(1, 11, size=3))
        spacing = tuple(float(s) for s in rng.uniform(0.2, 2.0, size=3))
        m = random_mask(rng, dims, spacing, fill=rng.uniform(0.3, 0.9))
        dm, fm = geometry.distance_transform(m)
        expected = brute_force_edt(m.foreground, spacing)
        assert np.allclose(dm.values, expected, atol=1e-5)

        # Feature voxel sits at exactly the reported distance.
        grid = np.indices(dims).astype(np.float64)
        feat = fm.indices.astype(np.float64)
        gap = np.sqrt(sum(((grid[a] - feat[a]) * spacing[a]) ** 2 for a in range(3)))
        assert np.allclose(gap, dm.values, atol=1e-5)
        assert not m.foreground[tuple(fm.indices.reshape(3, -1))].any()


def test_edt_matches_brute_force(rng):
    _check_edt_against_brute_force(rng, 25)


@pytest.mark.slow
def test_edt_matches_brute_force_full_grid(rng):
    _check_edt_against_brute_force(rng, 200)


# -----------------------------
# Skeleton
# -----------------------------
def test_one_voxel_sheet_is_all_skeleton():
    fg = np.zeros((5, 5, 5), dtype=bool)
    fg[:, :, 2] = True
    m = BinaryMask.from_bool(fg)
    dm, _ = geometry.distance_transform(m)
    sk = geometry.skeletonize(m, dm)
    assert len(sk) == 25
    assert np.allclose(sk.radii, 1.0)


def test_cube_keeps_centre_with_largest_ball():
    fg = np.zeros((7, 7, 7), dtype=bool)
    fg[1:6, 1:6, 1:6] = True
    m = BinaryMask.from_bool(fg)
    dm, _ = geometry.distance_transform(m)
    sk = geometry.skeletonize(m, dm)
    kept = {tuple(v) for v in sk.voxels}
    assert (3, 3, 3) in kept
    assert (2, 3, 3) not in kept  # its ball sits inside the centre's
    centre, radius = geometry.max_inscribed_sphere(sk, fg)
    assert centre == (3, 3, 3)
    assert radius == pytest.approx(3.0)


@pytest.mark.parametrize("t", [2, 3, 4, 5, 8])
def test_slab_skeleton_lies_on_central_planes(t):
    fg = np.zeros((6, 6, t + 4), dtype=bool)
    fg[:, :, 2:2 + t] = True
    m = BinaryMask.from_bool(fg)
    dm, _ = geometry.distance_transform(m)
    sk = geometry.skeletonize(m, dm)
    mid = 2 + (t - 1) / 2.0
    assert len(sk)
    assert np.all(np.abs(sk.voxels[:, 2] - mid) <= 0.5)


def test_skeleton_is_sorted_and_exports_radius_map():
    fg = np.zeros((6, 6, 6), dtype=bool)
    fg[1:5, 1:5, 2:4] = True
    m = BinaryMask.from_bool(fg, spacing=(0.5, 0.5, 0.5))
    dm, _ = geometry.distance_transform(m)
    sk = geometry.skeletonize(m, dm)
    assert np.all(np.diff(sk.linear) > 0)
    radius_map = sk.as_volume()
    assert np.allclose(radius_map.data[tuple(sk.voxels.T)], sk.radii)
    assert np.count_nonzero(radius_map.data) == len(sk)


def test_empty_mask_has_empty_skeleton():
    m = BinaryMask.from_bool(np.zeros((4, 4, 4), dtype=bool))
    dm, _ = geometry.distance_transform(m)
    assert len(geometry.skeletonize(m, dm)) == 0


def _check_skeleton_properties(rng, count):
    offsets = np.array(geometry.NEIGHBOR_OFFSETS)
    for _ in range(count):
        spacing = tuple(float(s) for s in rng.uniform(0.3, 1.5, size=3))
        m = random_mask(rng, (8, 8, 8), spacing, fill=0.7)
        fg = m.foreground
        dm, _ = geometry.distance_transform(m)
        r = dm.values.astype(np.float64)
        sk = geometry.skeletonize(m, dm)
        kept = np.zeros_like(fg)
        kept[tuple(sk.voxels.T)] = True
        assert not (kept & ~fg).any()

        for v in np.argwhere(fg):
            best_margin = -np.inf
            for o in offsets:
                u = v + o
                if np.any(u < 0) or np.any(u >= 8) or not fg[tuple(u)]:
                    continue
                step = float(np.linalg.norm(o * np.asarray(spacing)))
                best_margin = max(best_margin, r[tuple(u)] - r[tuple(v)] - step)
            if kept[tuple(v)]:
                assert best_margin < 0.0
            else:
                assert best_margin >= -2 * geometry.CMB_TOLERANCE_MM

        # Union of skeleton balls covers every foreground centre.
        centres = np.argwhere(fg) * np.asarray(spacing)
        balls = sk.voxels * np.asarray(spacing)
        gaps = np.sqrt(((centres[:, None, :] - balls[None, :, :]) ** 2).sum(axis=2))
        assert np.all((gaps <= sk.radii[None, :] + 1e-3).any(axis=1))


def test_skeleton_properties(rng):
    _check_skeleton_properties(rng, 10)


@pytest.mark.slow
def test_skeleton_properties_full_grid(rng):
    _check_skeleton_properties(rng, 100)


def test_region_restricts_candidates():
    fg = np.zeros((7, 7, 7), dtype=bool)
    fg[1:6, 1:6, 1:6] = True
    m = BinaryMask.from_bool(fg)
    dm, _ = geometry.distance_transform(m)
    region = np.zeros_like(fg)
    region[1:3] = True
    sk = geometry.skeletonize(m, dm, region=region)
    assert np.all(sk.voxels[:, 0] < 3)


# -----------------------------
# Maximal inscribed sphere
# -----------------------------
def test_solid_ball_radius():
    ph = phantoms.generate(phantoms.PhantomSpec(kind="solid-ball", dims=(23, 23, 23), spacing=(0.5, 0.5, 0.5),
                                                radius_mm=5.0))
    dm, _ = geometry.distance_transform(ph.mask)
    sk = geometry.skeletonize(ph.mask, dm)
    centre, radius = geometry.max_inscribed_sphere(sk, ph.mask.foreground)
    assert abs(radius - 5.0) <= 0.5
    assert np.all(np.abs(np.asarray(centre) - 11) <= 1)


def test_thin_slab_radius():
    fg = np.zeros((10, 10, 12), dtype=bool)
    fg[:, :, 4:8] = True
    m = BinaryMask.from_bool(fg, spacing=(0.3, 0.3, 0.3))
    dm, _ = geometry.distance_transform(m)
    _, radius = geometry.max_inscribed_sphere(geometry.skeletonize(m, dm), fg)
    assert 0.45 <= radius <= 0.75


def test_region_without_global_maximum():
    fg = np.zeros((7, 7, 7), dtype=bool)
    fg[1:6, 1:6, 1:6] = True
    m = BinaryMask.from_bool(fg)
    dm, _ = geometry.distance_transform(m)
    sk = geometry.skeletonize(m, dm)
    region = fg.copy()
    region[3, 3, 3] = False
    centre, radius = geometry.max_inscribed_sphere(sk, region)
    assert centre != (3, 3, 3)
    assert radius < 3.0
    assert radius == pytest.approx(max(r for v, r in zip(map(tuple, sk.voxels), sk.radii) if v != (3, 3, 3)))


def test_ties_go_to_smallest_linear_index():
    fg = np.zeros((5, 5, 5), dtype=bool)
    fg[:, :, 2] = True
    m = BinaryMask.from_bool(fg)
    dm, _ = geometry.distance_transform(m)
    sk = geometry.skeletonize(m, dm)
    centre, _ = geometry.max_inscribed_sphere(sk, [(4, 4, 2), (1, 0, 2), (0, 1, 2)])
    assert centre == (1, 0, 2)
    assert linear_index((5, 5, 5), np.array([centre]))[0] == 1 + 50


def test_region_errors():
    fg = np.zeros((5, 5, 5), dtype=bool)
    fg[2, 2, 2] = True
    m = BinaryMask.from_bool(fg)
    dm, _ = geometry.distance_transform(m)
    sk = geometry.skeletonize(m, dm)
    with pytest.raises(GeometryError):
        geometry.max_inscribed_sphere(sk, np.zeros_like(fg))
    with pytest.raises(GeometryError):
        geometry.max_inscribed_sphere(sk, [(0, 0, 0)])


def test_dilation_never_shrinks_the_largest_ball(rng):
    for _ in range(10):
        fg = ndimage.binary_dilation(rng.random((12, 12, 12)) < 0.05, iterations=1)
        fg[0] = False
        dilated = ndimage.binary_dilation(fg)
        dilated[0] = False
        radii = []
        for mask_fg in (fg, dilated):
            m = BinaryMask.from_bool(mask_fg, spacing=(0.5, 0.7, 1.0))
            dm, _ = geometry.distance_transform(m)
            sk = geometry.skeletonize(m, dm)
            radii.append(geometry.max_inscribed_sphere(sk, np.ones_like(mask_fg))[1])
        assert radii[1] >= radii[0]
