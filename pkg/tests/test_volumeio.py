import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from p3drad.volumeio import (
    CHANNELS,
    MAGIC,
    ConditionTensor,
    ShapeMismatchError,
    Volume3D,
    VolumeFormatError,
    assemble_condition,
    check_condition,
    condition_channels,
    load_volume,
    mask_volume,
    masked_image,
    masked_region_indices,
    read_manifest,
    save_sample,
    save_volume,
    write_manifest,
)


def test_volume_is_read_only_copy():
    src = np.zeros((2, 3, 4))
    v = Volume3D(src)
    src[0, 0, 0] = 1
    assert v.data[0, 0, 0] == 0
    assert v.data.dtype == np.float32
    with pytest.raises(ValueError):
        v.data[0, 0, 0] = 1


@pytest.mark.parametrize(
    "data, kind",
    [
        (np.zeros((2, 2)), "image"),
        (np.full((2, 2, 2), np.nan), "field"),
        (np.full((2, 2, 2), 0.5), "mask"),
        (np.full((2, 2, 2), 1.5), "image"),
        (np.zeros((2, 2, 2)), "label"),
    ],
)
def test_volume_rejects_invalid(data, kind):
    with pytest.raises(VolumeFormatError):
        Volume3D(data, kind=kind)


def test_field_kind_allows_any_finite_values():
    assert Volume3D(np.full((1, 2, 2), -3.0), kind="field").data.min() == -3.0


@settings(max_examples=25, deadline=None)
@given(
    arrays(np.float32, st.tuples(*[st.integers(1, 5)] * 3), elements=st.floats(0, 1, width=32)),
    st.tuples(*[st.floats(0.1, 4.0)] * 3),
)
def test_container_round_trip_is_bit_exact(tmp_path_factory, data, spacing):
    path = tmp_path_factory.mktemp("vol") / "x.vol"
    v = Volume3D(data, spacing)
    save_volume(v, path)
    back = load_volume(path)
    assert back == v
    assert back.data.tobytes() == v.data.tobytes()


def test_container_layout(tmp_path):
    v = Volume3D(np.arange(6, dtype=np.float32).reshape(1, 2, 3) / 10, (1.0, 2.0, 3.0), "field")
    save_volume(v, tmp_path / "a.vol")
    raw = (tmp_path / "a.vol").read_bytes()
    assert raw[:8] == MAGIC
    (n,) = struct.unpack(">I", raw[8:12])
    header = json.loads(raw[12 : 12 + n])
    assert header == {"dims": [1, 2, 3], "dtype": "float32le", "kind": "field", "spacing": [1.0, 2.0, 3.0]}
    assert np.frombuffer(raw[12 + n :], "<f4").tolist() == v.data.ravel().tolist()


def test_container_errors(tmp_path):
    v = Volume3D(np.zeros((2, 2, 2)))
    p = tmp_path / "a.vol"
    save_volume(v, p)
    raw = p.read_bytes()
    (tmp_path / "magic.vol").write_bytes(b"NOTAVOL!" + raw[8:])
    (tmp_path / "short.vol").write_bytes(raw[:-4])
    (tmp_path / "hdr.vol").write_bytes(raw[:8] + struct.pack(">I", 3) + b"{x}" + raw[-32:])
    for name in ("magic", "short", "hdr"):
        with pytest.raises(VolumeFormatError):
            load_volume(tmp_path / f"{name}.vol")


def test_masked_image_zeroes_exactly():
    img = Volume3D(np.full((2, 2, 2), 0.7))
    m = mask_volume(np.eye(2)[None].repeat(2, 0))
    out = masked_image(img, m)
    assert np.all(out[m.data > 0] == 0.0)
    assert np.all(out[m.data == 0] == np.float32(0.7))


def test_condition_channel_order(sample):
    z = Volume3D(np.full(sample.dims, -1.0), kind="field")
    cond = assemble_condition(sample, z, z)
    assert cond.channels.shape == (8, *sample.dims)
    np.testing.assert_array_equal(cond.channel("csf2"), sample.csf_t2.data)
    np.testing.assert_array_equal(cond.channel("m1"), sample.lesion_mask_t1.data)
    np.testing.assert_array_equal(cond.channel("z2"), z.data)
    np.testing.assert_array_equal(condition_channels(sample), cond.channels[:6])
    check_condition(cond, sample)


def test_check_condition_catches_swapped_channels(sample):
    z = Volume3D(np.zeros(sample.dims), kind="field")
    cond = assemble_condition(sample, z, z)
    for a, b in [("csf1", "csf2"), ("m1", "m2"), ("im1", "im2"), ("m1", "im1")]:
        ch = cond.channels.copy()
        i, j = CHANNELS.index(a), CHANNELS.index(b)
        ch[[i, j]] = ch[[j, i]]
        with pytest.raises(ValueError):
            check_condition(ConditionTensor(ch), sample)


def test_condition_shape_mismatch(sample):
    z = Volume3D(np.zeros((1, 2, 2)), kind="field")
    with pytest.raises(ShapeMismatchError):
        assemble_condition(sample, z, z)


def test_masked_region_indices():
    data = np.zeros((3, 4, 5))
    data[1, 2, 3] = data[2, 0, 1] = 1
    idx = masked_region_indices(mask_volume(data))
    assert idx.count == 2
    assert idx.bbox == ((1, 2), (0, 2), (1, 3))
    assert np.array_equal(idx.indices, np.sort(np.flatnonzero(data)))
    empty = masked_region_indices(mask_volume(np.zeros((2, 2, 2))))
    assert empty.count == 0 and empty.bbox is None


def test_sample_validate_and_manifest(sample, tmp_path):
    sample.validate()
    names = save_sample(sample, tmp_path / "s0")
    entry = {"subject_id": sample.subject_id, "seed": sample.seed,
             "volumes": {k: f"s0/{v}" for k, v in names.items()}}
    path = write_manifest(tmp_path / "manifest.json", [entry], {"note": "x"})
    man = read_manifest(path)
    assert len(man) == 1 and man.meta == {"note": "x"}
    assert man.load_sample(0) == sample


def test_sample_validate_rejects_lesion_in_csf(sample):
    bad = sample.lesion_mask_t1.data.copy()
    bad[sample.csf_t1.data > 0] = 1
    with pytest.raises(ValueError):
        sample.replace(lesion_mask_t1=mask_volume(bad)).validate()


def test_sample_dims_must_agree(sample):
    with pytest.raises(ShapeMismatchError):
        sample.replace(img_t1=Volume3D(np.zeros((1, 2, 2))))


def test_payload_size_mismatch(tmp_path):
    header = json.dumps({"dims": [2, 2, 2], "dtype": "float32le", "kind": "image", "spacing": [1, 1, 1]}).encode()
    raw = MAGIC + struct.pack(">I", len(header)) + header + np.zeros(7, "<f4").tobytes()
    (tmp_path / "bad.vol").write_bytes(raw)
    with pytest.raises(VolumeFormatError, match="payload"):
        load_volume(tmp_path / "bad.vol")


def test_resave_is_byte_identical(tmp_path):
    v = Volume3D(np.zeros((8, 8, 8)))
    save_volume(v, tmp_path / "a.vol")
    back = load_volume(tmp_path / "a.vol")
    assert back.data.min() == back.data.max() == 0
    save_volume(back, tmp_path / "b.vol")
    assert (tmp_path / "a.vol").read_bytes() == (tmp_path / "b.vol").read_bytes()


def test_mask_payload_is_float_zero_one(tmp_path):
    m = mask_volume(np.eye(3)[None])
    save_volume(m, tmp_path / "m.vol")
    raw = (tmp_path / "m.vol").read_bytes()
    assert set(np.frombuffer(raw[-36:], "<f4").tolist()) == {0.0, 1.0}


def test_save_to_missing_directory_raises(tmp_path):
    with pytest.raises(OSError):
        save_volume(Volume3D(np.zeros((1, 1, 1))), tmp_path / "missing" / "x.vol")


def test_empty_and_full_masks_in_condition(sample):
    zero = mask_volume(np.zeros(sample.dims))
    one = mask_volume(np.ones(sample.dims))
    z = Volume3D(np.zeros(sample.dims), kind="field")
    cond = assemble_condition(sample.replace(lesion_mask_t1=zero, lesion_mask_t2=zero), z, z)
    assert np.array_equal(cond.channel("im1"), sample.img_t1.data)
    assert np.array_equal(cond.channel("im2"), sample.img_t2.data)
    cond = assemble_condition(sample.replace(lesion_mask_t1=one), z, z)
    assert not cond.channel("im1").any()


def test_region_count_matches_sum(sample):
    idx = masked_region_indices(sample.lesion_mask_t1)
    assert idx.count == int(sum(sample.lesion_mask_t1.data.ravel().tolist()))
    single = np.zeros((4, 4, 4))
    single[1, 2, 3] = 1
    one = masked_region_indices(mask_volume(single))
    assert one.indices.tolist() == [1 * 16 + 2 * 4 + 3] and one.bbox == ((1, 1), (2, 2), (3, 3))
