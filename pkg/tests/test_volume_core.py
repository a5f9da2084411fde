from __future__ import annotations

import gzip

import nibabel as nib
import numpy as np
import pytest

from modules.volume_core import (
    BinaryMask,
    LandmarkSet,
    Volume,
    connected_components,
    crop,
    keep_largest_component,
    load_landmark_catalog,
    nearest_voxel,
    phys_to_voxel,
    read_landmarks,
    read_nifti,
    thickness_ineligible_names,
    voxel_to_phys,
    write_landmarks,
    write_nifti,
)
from utils import GeometryError, NiftiError, RunConfig, VolumeError


# -----------------------------
# Volume model
# -----------------------------
def test_volume_is_read_only_and_spacing_follows_affine():
    v = Volume.from_array(np.zeros((2, 3, 4), dtype=np.float32), spacing=(0.5, 0.3, 2.0))
    assert v.dims == (2, 3, 4)
    assert np.allclose(v.spacing, (0.5, 0.3, 2.0))
    assert v.size == 24
    with pytest.raises(ValueError):
        v.data[0, 0, 0] = 1.0


def test_volume_rejects_bad_shapes_and_dtypes():
    with pytest.raises(VolumeError):
        Volume(np.zeros((3, 3), dtype=np.float32), np.eye(4))
    with pytest.raises(VolumeError):
        Volume(np.zeros((3, 3, 3), dtype=np.float64), np.eye(4))
    with pytest.raises(VolumeError):
        Volume(np.zeros((3, 3, 3), dtype=np.uint8), np.diag([1.0, 0.0, 1.0, 1.0]))


def test_from_array_coerces_dtype():
    assert Volume.from_array(np.ones((2, 2, 2), dtype=bool)).dtype_tag == "uint8"
    assert Volume.from_array(np.full((2, 2, 2), -5, dtype=np.int64)).dtype_tag == "int16"
    assert Volume.from_array(np.full((2, 2, 2), 0.5)).dtype_tag == "float32"


def test_voxels_are_x_fastest():
    data = np.arange(8, dtype=np.uint8).reshape((2, 2, 2), order="F")
    assert list(Volume.from_array(data).voxels()) == list(range(8))


def test_binary_mask_rejects_labels():
    with pytest.raises(VolumeError):
        BinaryMask(np.full((2, 2, 2), 2, dtype=np.uint8), np.eye(4))


def test_landmark_names_must_be_unique():
    with pytest.raises(VolumeError):
        LandmarkSet.from_points([("a", (0, 0, 0)), ("a", (1, 1, 1))])
    with pytest.raises(VolumeError):
        LandmarkSet.from_points([("a", (0, np.nan, 0))])


# -----------------------------
# Coordinates
# -----------------------------
def test_phys_to_voxel_examples():
    ident = Volume.from_array(np.zeros((5, 5, 5), dtype=np.uint8))
    assert np.allclose(phys_to_voxel(ident, (2, 3, 4)), (2, 3, 4))

    scaled = Volume.from_array(np.zeros((5, 5, 5), dtype=np.uint8), spacing=(0.3, 0.3, 0.3))
    assert np.allclose(phys_to_voxel(scaled, (0.6, 0.0, 0.9)), (2, 0, 3))

    affine = np.diag([0.5, 0.5, 0.5, 1.0])
    affine[:3, 3] = -10.0
    shifted = Volume(np.zeros((5, 5, 5), dtype=np.uint8), affine)
    assert np.allclose(phys_to_voxel(shifted, (-9, -10, -8)), (2, 0, 4))


def test_phys_voxel_round_trip_on_random_affines(rng):
    for _ in range(20):
        affine = np.eye(4)
        affine[:3, :3] = rng.normal(size=(3, 3)) + 2 * np.eye(3)
        affine[:3, 3] = rng.normal(size=3) * 10
        v = Volume(np.zeros((2, 2, 2), dtype=np.uint8), affine)
        ijk = rng.uniform(-5, 5, size=(10, 3))
        assert np.allclose(phys_to_voxel(v, voxel_to_phys(v, ijk)), ijk, atol=1e-9)


def test_singular_affine_is_reported():
    affine = np.eye(4)
    affine[:3, :3] = [[1, 1, 0], [1, 1, 0], [0, 0, 1]]
    v = Volume(np.zeros((2, 2, 2), dtype=np.uint8), affine)
    with pytest.raises(GeometryError):
        phys_to_voxel(v, (0, 0, 0))


def test_nearest_voxel_rounds_half_away_from_zero():
    v = Volume.from_array(np.zeros((4, 4, 4), dtype=np.uint8))
    assert nearest_voxel(v, (1.5, 2.49, 0.5)) == ((2, 2, 1), True)
    assert nearest_voxel(v, (-0.5, 0, 0)) == ((-1, 0, 0), False)
    assert nearest_voxel(v, (3.4, 3.4, 3.5)) == ((3, 3, 4), False)


def test_crop_keeps_physical_positions():
    v = Volume.from_array(np.arange(64, dtype=np.uint8).reshape(4, 4, 4), spacing=(0.5, 0.5, 0.5))
    sub = crop(v, (1, 2, 0), (3, 4, 2))
    assert sub.dims == (2, 2, 2)
    assert np.allclose(voxel_to_phys(sub, (0, 0, 0)), voxel_to_phys(v, (1, 2, 0)))
    assert sub.data[0, 0, 0] == v.data[1, 2, 0]


# -----------------------------
# NIfTI I/O
# -----------------------------
def test_read_zero_float_volume(tmp_path):
    v = Volume.from_array(np.zeros((3, 3, 3), dtype=np.float32), spacing=(0.3, 0.3, 0.3))
    path = tmp_path / "zeros.nii"
    write_nifti(v, path)
    back = read_nifti(path)
    assert back.dims == (3, 3, 3)
    assert back.dtype_tag == "float32"
    assert not back.data.any()
    assert np.allclose(back.spacing, (0.3, 0.3, 0.3))


@pytest.mark.parametrize("suffix", [".nii", ".nii.gz"])
@pytest.mark.parametrize("dtype", [np.uint8, np.int16, np.float32])
def test_round_trip_is_exact(tmp_path, rng, suffix, dtype):
    for i in range(3):
        dims = tuple(int(d) for d in rng.integers(1, 7, size=3))
        if dtype is np.float32:
            data = rng.normal(size=dims).astype(np.float32)
        else:
            info = np.iinfo(dtype)
            data = rng.integers(info.min, info.max, size=dims, endpoint=True).astype(dtype)
        affine = np.diag(list(rng.uniform(0.2, 2.0, size=3)) + [1.0])
        affine[:3, 3] = rng.normal(size=3)
        v = Volume(data, affine)
        path = tmp_path / f"v{i}{suffix}"
        write_nifti(v, path)
        back = read_nifti(path)
        assert back.data.dtype == v.data.dtype
        assert np.array_equal(back.data, v.data)
        assert np.allclose(back.affine, v.affine, atol=1e-6)

        hdr = nib.load(str(path)).header
        assert int(hdr["sform_code"]) == 1
        on_disk = gzip.decompress(path.read_bytes()) if suffix.endswith(".gz") else path.read_bytes()
        assert int(np.frombuffer(on_disk[108:112], dtype="<f4")[0]) == 352


def test_config_is_embedded_without_changing_voxels(tmp_path, rng):
    v = Volume(rng.integers(0, 100, size=(5, 4, 3)).astype(np.int16), np.diag([0.3, 0.3, 0.6, 1.0]))
    config = RunConfig(subcommand="components").validate()
    path = tmp_path / "labels.nii.gz"
    write_nifti(v, path, config)
    hdr = nib.load(str(path)).header
    assert bytes(hdr["descrip"]).decode("ascii").startswith("cortexa ")
    assert "components" in bytes(hdr["descrip"]).decode("ascii")
    assert len(hdr.extensions) == 1
    assert np.array_equal(read_nifti(path).data, v.data)


def test_mask_is_written_as_uint8(tmp_path):
    path = tmp_path / "ones.nii.gz"
    write_nifti(BinaryMask.from_bool(np.ones((64, 64, 64), dtype=bool)), path)
    assert int(nib.load(str(path)).header["datatype"]) == 2


def test_rotated_affine_survives_round_trip(tmp_path):
    theta = np.deg2rad(30.0)
    affine = np.eye(4)
    affine[:3, :3] = [[np.cos(theta), -np.sin(theta), 0], [np.sin(theta), np.cos(theta), 0], [0, 0, 1]]
    affine[:3, :3] *= 0.3
    affine[:3, 3] = (5.0, -2.0, 1.0)
    path = tmp_path / "rot.nii.gz"
    write_nifti(Volume(np.zeros((4, 4, 4), dtype=np.int16), affine), path)
    assert np.allclose(nib.load(str(path)).header.get_sform(), affine, atol=1e-6)
    assert np.allclose(read_nifti(path).affine, affine, atol=1e-6)


def _hand_written_nifti(path, raw: np.ndarray, slope: float, inter: float) -> None:
    hdr = nib.Nifti1Header()
    hdr.set_data_shape(raw.shape)
    hdr.set_data_dtype(raw.dtype)
    hdr["vox_offset"] = 352
    hdr["scl_slope"] = slope
    hdr["scl_inter"] = inter
    hdr["magic"] = b"n+1"
    with open(path, "wb") as f:
        hdr.write_to(f)
        f.write(raw.tobytes(order="F"))


def test_scaling_is_applied(tmp_path):
    path = tmp_path / "scaled.nii"
    _hand_written_nifti(path, np.full((2, 2, 2), 3, dtype=np.int16), slope=2.0, inter=1.0)
    v = read_nifti(path)
    assert v.dtype_tag == "float32"
    assert np.all(v.data == 7.0)


def test_scaling_keeps_voxel_order(tmp_path):
    path = tmp_path / "mixed.nii"
    raw = np.zeros((2, 1, 1), dtype=np.int16)
    raw[1, 0, 0] = 3
    _hand_written_nifti(path, raw, slope=2.0, inter=1.0)
    v = read_nifti(path)
    assert v.data.ravel(order="F").tolist() == [1.0, 7.0]
    assert np.array_equal(v.data, nib.load(str(path)).get_fdata().astype(np.float32))


def test_unscaled_file_keeps_its_dtype(tmp_path):
    path = tmp_path / "plain.nii"
    _hand_written_nifti(path, np.full((2, 2, 2), 3, dtype=np.int16), slope=1.0, inter=0.0)
    v = read_nifti(path)
    assert v.data.dtype == np.int16
    assert np.all(v.data == 3)


def test_unsupported_datatype_is_rejected(tmp_path):
    path = tmp_path / "f64.nii"
    nib.save(nib.Nifti1Image(np.zeros((2, 2, 2), dtype=np.float64), np.eye(4)), str(path))
    with pytest.raises(NiftiError):
        read_nifti(path)


def test_four_d_with_several_frames_is_rejected(tmp_path):
    path = tmp_path / "4d.nii"
    nib.save(nib.Nifti1Image(np.zeros((2, 2, 2, 3), dtype=np.int16), np.eye(4)), str(path))
    with pytest.raises(NiftiError):
        read_nifti(path)


def test_four_d_with_one_frame_is_squeezed(tmp_path):
    path = tmp_path / "4d1.nii"
    nib.save(nib.Nifti1Image(np.ones((2, 3, 4, 1), dtype=np.int16), np.eye(4)), str(path))
    assert read_nifti(path).dims == (2, 3, 4)


def test_truncated_and_corrupt_files(tmp_path):
    good = tmp_path / "good.nii"
    write_nifti(Volume.from_array(np.ones((8, 8, 8), dtype=np.float32)), good)
    truncated = tmp_path / "truncated.nii"
    truncated.write_bytes(good.read_bytes()[:500])
    with pytest.raises(NiftiError):
        read_nifti(truncated)

    bad_gz = tmp_path / "bad.nii.gz"
    bad_gz.write_bytes(gzip.compress(good.read_bytes())[:60])
    with pytest.raises(NiftiError):
        read_nifti(bad_gz)

    with pytest.raises(NiftiError):
        read_nifti(tmp_path / "missing.nii")


def test_unwritable_path(tmp_path):
    with pytest.raises(NiftiError):
        write_nifti(Volume.from_array(np.zeros((2, 2, 2), dtype=np.uint8)), tmp_path / "nope" / "v.nii")


# -----------------------------
# Landmarks
# -----------------------------
def test_landmark_csv_round_trip(tmp_path):
    landmarks = LandmarkSet.from_points([("motor", (1.5, -2.0, 3.25)), ("ERC", (0.0, 0.0, 0.0))])
    path = tmp_path / "lm.csv"
    write_landmarks(landmarks, path)
    back = read_landmarks(path)
    assert back.names == ["motor", "ERC"]
    assert np.allclose(back.landmarks[0].point, (1.5, -2.0, 3.25))


def test_landmark_csv_requires_columns(tmp_path):
    path = tmp_path / "lm.csv"
    path.write_text("name,x,y\na,1,2\n", encoding="utf-8")
    with pytest.raises(VolumeError):
        read_landmarks(path)


def test_catalog_lists_eighteen_landmarks():
    catalog = load_landmark_catalog()
    assert len(catalog) == 18
    assert sorted(thickness_ineligible_names()) == ["CA1", "subiculum"]


# -----------------------------
# Components
# -----------------------------
def test_two_disjoint_voxels():
    fg = np.zeros((5, 5, 5), dtype=bool)
    fg[0, 0, 0] = fg[3, 3, 3] = True
    labels, sizes = connected_components(BinaryMask.from_bool(fg), connectivity=6)
    assert sizes == [1, 1]
    assert labels.data[0, 0, 0] == 1
    assert labels.data[3, 3, 3] == 2


def test_full_cube_is_one_component():
    labels, sizes = connected_components(BinaryMask.from_bool(np.ones((3, 3, 3), dtype=bool)))
    assert sizes == [27]
    assert np.all(labels.data == 1)


def test_corner_contact_depends_on_connectivity():
    fg = np.zeros((3, 3, 3), dtype=bool)
    fg[0, 0, 0] = fg[1, 1, 1] = True
    m = BinaryMask.from_bool(fg)
    assert len(connected_components(m, 6)[1]) == 2
    assert len(connected_components(m, 18)[1]) == 2
    assert len(connected_components(m, 26)[1]) == 1


def test_labels_order_by_size_then_position():
    fg = np.zeros((8, 8, 8), dtype=bool)
    fg[6, 6, 6] = True
    fg[0:2, 0, 0] = True
    fg[4, 0:3, 4] = True
    labels, sizes = connected_components(BinaryMask.from_bool(fg), 6)
    assert sizes == [3, 2, 1]
    assert labels.data[4, 1, 4] == 1
    assert labels.data[0, 0, 0] == 2
    assert labels.data[6, 6, 6] == 3


def test_labelling_does_not_depend_on_construction_order(rng):
    fg = rng.random((10, 10, 10)) < 0.2
    idx = np.argwhere(fg)
    permuted = np.zeros_like(fg)
    for i, j, k in idx[rng.permutation(len(idx))]:
        permuted[i, j, k] = True
    a = connected_components(BinaryMask.from_bool(fg), 6)
    b = connected_components(BinaryMask.from_bool(permuted), 6)
    assert a[1] == b[1]
    assert np.array_equal(a[0].data, b[0].data)


def test_empty_mask_has_no_components():
    labels, sizes = connected_components(BinaryMask.from_bool(np.zeros((3, 3, 3), dtype=bool)))
    assert sizes == []
    assert not labels.data.any()


def test_keep_largest_component():
    fg = np.zeros((6, 6, 6), dtype=bool)
    fg[0, 0, 0] = True
    fg[3:5, 3:5, 3:5] = True
    largest = keep_largest_component(BinaryMask.from_bool(fg))
    assert largest.count == 8
    assert not largest.data[0, 0, 0]
