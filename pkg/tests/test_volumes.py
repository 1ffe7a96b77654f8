import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from autonet.volumes import (
    BinaryMask,
    PhantomSpec,
    Volume,
    VolumeFormatError,
    generate_phantom,
    load_volume,
    mean_intensity,
    normalize_intensity,
    save_volume,
)
from oracles import ellipsoid_count_bruteforce


def test_load_zero_nifti(tmp_path):
    import nibabel as nib

    nib.save(nib.Nifti1Image(np.zeros((64, 64, 64), np.float32), np.eye(4)), tmp_path / "z.nii")
    v, m = load_volume(tmp_path / "z.nii")
    assert v.dims == (64, 64, 64)
    assert np.all(v.data == 0)
    assert m is None


@pytest.mark.parametrize("name", ["v.raw", "v.nii", "v.nii.gz"])
def test_volume_round_trip(tmp_path, rng, name):
    v = Volume(rng.normal(50, 20, (7, 5, 3)).astype(np.float32), (0.75, 0.75, 0.75))
    save_volume(v, tmp_path / name)
    back, mask = load_volume(tmp_path / name)
    assert mask is None
    np.testing.assert_array_equal(back.data, v.data)
    assert back.spacing == pytest.approx((0.75, 0.75, 0.75))


def test_raw_round_trip_is_bit_exact_float64(tmp_path, rng):
    v = Volume(rng.normal(size=(4, 6, 5)), (1.1, 0.3, 2.7))
    save_volume(v, tmp_path / "v.raw")
    back, _ = load_volume(tmp_path / "v.raw")
    assert back.data.dtype == np.float64
    assert back.data.tobytes() == v.data.tobytes()
    assert back.spacing == v.spacing


@pytest.mark.parametrize("name", ["m.raw", "m.nii.gz"])
def test_single_voxel_mask_round_trip(tmp_path, name):
    data = np.zeros((9, 9, 9), np.uint8)
    data[4, 2, 7] = 1
    save_volume(BinaryMask(data), tmp_path / name)
    _, m = load_volume(tmp_path / name)
    assert m is not None
    np.testing.assert_array_equal(m.data, data)


def test_raw_header_layout(tmp_path):
    data = np.arange(24, dtype=np.float32).reshape(2, 3, 4)
    save_volume(Volume(data, (1, 2, 3)), tmp_path / "a.raw")
    blob = (tmp_path / "a.raw").read_bytes()
    header, payload = blob.split(b"\n", 1)
    assert header.split()[:5] == [b"AUTONET-RAW", b"v1", b"2", b"3", b"4"]
    assert header.split()[-1] == b"float32"
    # x varies fastest
    np.testing.assert_array_equal(np.frombuffer(payload, "<f4")[:3], [data[0, 0, 0], data[1, 0, 0], data[0, 1, 0]])


def test_4d_file_rejected(tmp_path):
    import nibabel as nib

    nib.save(nib.Nifti1Image(np.zeros((4, 4, 4, 2), np.float32), np.eye(4)), tmp_path / "x.nii")
    with pytest.raises(VolumeFormatError, match="unsupported datatype"):
        load_volume(tmp_path / "x.nii")


def test_non_finite_rejected(tmp_path):
    (tmp_path / "n.raw").write_bytes(b"AUTONET-RAW v1 1 1 2 1 1 1 float32\n" + np.array([1.0, np.nan], "<f4").tobytes())
    with pytest.raises(VolumeFormatError, match="non-finite"):
        load_volume(tmp_path / "n.raw")
    with pytest.raises(ValueError):
        Volume(np.array([[[np.inf]]]))


def test_missing_file_and_unwritable_dir(tmp_path):
    with pytest.raises(VolumeFormatError):
        load_volume(tmp_path / "nope.raw")
    with pytest.raises(OSError):
        save_volume(Volume(np.zeros((2, 2, 2))), tmp_path / "missing" / "v.raw")


def test_invalid_containers():
    with pytest.raises(ValueError):
        BinaryMask(np.full((2, 2, 2), 2))
    with pytest.raises(ValueError):
        Volume(np.zeros((2, 2)))
    with pytest.raises(ValueError):
        Volume(np.zeros((2, 2, 2)), (1, 0, 1))


def test_phantom_mask_matches_bruteforce_ellipsoid():
    spec = PhantomSpec(dims=(24, 20, 18), brain_center=(11.3, 9.5, 8.7), brain_axes=(9.2, 7.1, 6.4), n_distractors=0)
    _, m = generate_phantom(spec, 0)
    # frozen from oracles.ellipsoid_count_bruteforce
    assert m.count == 1756
    assert m.count == ellipsoid_count_bruteforce(spec.dims, spec.brain_center, spec.brain_axes)


def test_phantom_deterministic():
    spec = PhantomSpec(n_distractors=4, noise_sigma=5.0, bias_field=(1.0, 0.1, 0.0, -0.1), jitter=2.0)
    a = generate_phantom(spec, 11)
    b = generate_phantom(spec, 11)
    assert a[0].data.tobytes() == b[0].data.tobytes()
    assert a[1].data.tobytes() == b[1].data.tobytes()
    c = generate_phantom(spec, 12)
    assert c[0].data.tobytes() != a[0].data.tobytes()


def test_phantom_noiseless_levels():
    spec = PhantomSpec(noise_sigma=0.0, brain_intensity=100, background_intensity=10, distractor_intensity=55)
    v, m = generate_phantom(spec, 3)
    assert set(np.unique(v.data).tolist()) == {10.0, 55.0, 100.0}
    # distractors are labelled non-brain and the brain is labelled exactly
    assert np.all(v.data[m.data == 1] == 100)
    assert np.all(m.data[v.data == 55] == 0)


def test_phantom_rejects_oversized_ellipsoid():
    with pytest.raises(ValueError, match="exceeds dims"):
        PhantomSpec(dims=(32, 32, 32), brain_center=(15.5, 15.5, 15.5), brain_axes=(20, 10, 10))


def test_phantom_spec_json_round_trip():
    spec = PhantomSpec(n_distractors=2, bias_field=(1, 0, 0, 0.2))
    assert PhantomSpec.from_json(spec.to_json()) == spec


def test_normalize_formula():
    v = Volume(np.array([10.0, 60.0, 110.0]).reshape(1, 1, 3))
    out = normalize_intensity(v)
    assert out.data[0, 0, 1] == pytest.approx(127.5)
    assert out.data.min() == 0 and out.data.max() == pytest.approx(255)


def test_normalize_constant_and_fixed_point(rng):
    assert np.all(normalize_intensity(Volume(np.full((3, 3, 3), 42.0))).data == 0)
    data = rng.uniform(0, 255, (5, 5, 5))
    data.flat[0], data.flat[1] = 0.0, 255.0
    np.testing.assert_allclose(normalize_intensity(Volume(data)).data, data, atol=1e-4)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(-1e3, 1e3), st.floats(1e-2, 1e3))
def test_normalize_range_and_extremes(seed, shift, scale):
    data = np.random.default_rng(seed).normal(shift, scale, (4, 5, 6))
    out = normalize_intensity(Volume(data)).data
    assert out.min() >= 0 and out.max() <= 255
    assert np.argmax(out) == np.argmax(data)
    assert np.argmin(out) == np.argmin(data)


def test_mean_intensity(rng):
    assert mean_intensity(Volume(np.full((4, 4, 4), 100.0))) == 100
    half = np.zeros((4, 4, 4))
    half[:2] = 200
    assert mean_intensity(Volume(half)) == 100
    data = rng.normal(size=(8, 8, 8))
    total = 0.0
    for x in data.reshape(-1).tolist():
        total += x
    assert mean_intensity(Volume(data)) == pytest.approx(total / 512, abs=1e-12)
