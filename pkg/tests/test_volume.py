import json

import numpy as np
import pytest

from conftest import linear_volume
from dvckit.volume import (
    DomainError,
    GrayInterval,
    LabelVolume,
    Volume,
    VolumeFormatError,
    check_disjoint,
    component_mean,
    gradient,
    histogram,
    in_domain,
    load_labels,
    load_volume,
    sample,
    save_labels,
    save_volume,
    threshold_segment,
    write_histogram_csv,
)


def _hermite(p0, p1, p2, p3, t):
    # Catmull-Rom written as a cubic Hermite segment with centred tangents
    m1, m2 = (p2 - p0) / 2.0, (p3 - p1) / 2.0
    t2, t3 = t * t, t * t * t
    return ((2 * t3 - 3 * t2 + 1) * p1 + (t3 - 2 * t2 + t) * m1
            + (-2 * t3 + 3 * t2) * p2 + (t3 - t2) * m2)


def tricubic_oracle(arr, x, y, z):
    ix, iy, iz = int(np.floor(x)), int(np.floor(y)), int(np.floor(z))
    tx, ty, tz = x - ix, y - iy, z - iz
    block = arr[iz - 1 : iz + 3, iy - 1 : iy + 3, ix - 1 : ix + 3].astype(float)
    rows = np.array([[_hermite(*block[a, b], tx) for b in range(4)] for a in range(4)])
    cols = np.array([_hermite(*rows[a], ty) for a in range(4)])
    return _hermite(*cols, tz)


# ---------------------------------------------------------------- I/O


def test_load_u8_4cube(tmp_path):
    data = np.arange(64, dtype=np.uint8)
    (tmp_path / "a.vol").write_bytes(data.tobytes())
    (tmp_path / "a.vol.json").write_text(json.dumps({"dims": [4, 4, 4], "dtype": "u8"}))
    vol = load_volume(tmp_path / "a.vol")
    assert vol.dims == (4, 4, 4)
    # x fastest: byte 1 is voxel (x=1, y=0, z=0)
    assert vol.data[0, 0, 1] == 1 and vol.data[0, 1, 0] == 4 and vol.data[1, 0, 0] == 16


def test_payload_size_mismatch(tmp_path):
    (tmp_path / "a.vol").write_bytes(bytes(60))
    (tmp_path / "a.vol.json").write_text(json.dumps({"dims": [4, 4, 4], "dtype": "u8"}))
    with pytest.raises(VolumeFormatError, match="size mismatch"):
        load_volume(tmp_path / "a.vol")


@pytest.mark.parametrize(
    "header, msg",
    [("{not json", "corrupt"), (json.dumps({"dims": [4, 4]}), "dims"),
     (json.dumps({"dims": [4, 4, 4], "dtype": "f64"}), "dtype")],
)
def test_bad_headers(tmp_path, header, msg):
    (tmp_path / "a.vol").write_bytes(bytes(64))
    (tmp_path / "a.vol.json").write_text(header)
    with pytest.raises(VolumeFormatError, match=msg):
        load_volume(tmp_path / "a.vol")


def test_missing_header_and_payload(tmp_path):
    (tmp_path / "a.vol").write_bytes(bytes(8))
    with pytest.raises(VolumeFormatError, match="missing header"):
        load_volume(tmp_path / "a.vol")
    with pytest.raises(FileNotFoundError):
        load_volume(tmp_path / "nothing.vol")


def test_full_scale_header_accepted(tmp_path):
    path = tmp_path / "scan.vol"
    try:
        with open(path, "wb") as fh:
            fh.truncate(2000 * 2000 * 3000)  # sparse
    except OSError:
        pytest.skip("filesystem cannot hold a sparse 12 GB file")
    (tmp_path / "scan.vol.json").write_text(json.dumps({"dims": [2000, 2000, 3000], "dtype": "u8"}))
    vol = load_volume(path, mmap=True)
    assert vol.dims == (2000, 2000, 3000)
    assert vol.data[1500, 10, 10] == 0


@pytest.mark.parametrize("dtype", ["u8", "u16", "f32"])
def test_round_trip_bit_exact(tmp_path, rng, dtype):
    hi = {"u8": 255, "u16": 65535, "f32": 1000}[dtype]
    vol = Volume.from_array(rng.uniform(0, hi, (5, 6, 7)), dtype, spacing=(0.5, 1.0, 2.0))
    save_volume(vol, tmp_path / "v.vol")
    back = load_volume(tmp_path / "v.vol")
    assert back == vol
    assert back.data.tobytes() == vol.data.tobytes()


def test_non_finite_rejected_on_save(tmp_path):
    arr = np.zeros((3, 3, 3))
    arr[1, 1, 1] = np.nan
    with pytest.raises(ValueError, match="non-finite"):
        save_volume(Volume.from_array(arr), tmp_path / "v.vol")


def test_save_to_unwritable_location(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    with pytest.raises(OSError):
        save_volume(Volume.from_array(np.zeros((2, 2, 2)), "u8"), blocker / "v.vol")


def test_integer_range_invariant():
    with pytest.raises(ValueError, match="range"):
        Volume(np.full((2, 2, 2), 300), "u8")
    # from_array clips and rounds instead
    assert Volume.from_array(np.full((2, 2, 2), 300.4), "u8").data.max() == 255


def test_labels_round_trip(tmp_path):
    lab = LabelVolume(np.array([[[0, 1], [2, 1]]]))
    save_labels(lab, tmp_path / "l.vol")
    assert np.array_equal(load_labels(tmp_path / "l.vol").labels, lab.labels)


# ---------------------------------------------------------------- sampling


def test_sample_reproduces_nodes(speckle48):
    vol, _ = speckle48
    for mode in ("trilinear", "tricubic"):
        assert sample(vol, (3, 5, 7), mode) == pytest.approx(float(vol.data[7, 5, 3]), abs=1e-9)


@pytest.mark.parametrize("mode", ["trilinear", "tricubic"])
def test_linear_gray_reproduced(mode):
    vol = linear_volume((4, 4, 6), (2.0, 0.0, 0.0))
    assert sample(vol, (2.5, 1, 1), mode) == pytest.approx(5.0, abs=1e-12)
    vol = linear_volume((8, 8, 8), (1.5, -0.5, 2.0), 10.0)
    pts = np.array([[1.3, 2.7, 3.1], [5.9, 1.01, 4.5], [3.0, 3.0, 5.99]])
    want = 10.0 + pts @ np.array([1.5, -0.5, 2.0])
    assert np.allclose(sample(vol, pts, mode), want, atol=1e-9)


def test_tricubic_matches_polynomial_oracle(speckle48, rng):
    vol, _ = speckle48
    arr = vol.data.astype(float)
    pts = rng.uniform(1.0, 45.99, (50, 3))
    got = sample(vol, pts, "tricubic")
    want = [tricubic_oracle(arr, *p) for p in pts]
    assert np.max(np.abs(got - want)) < 1e-9


def test_sample_domain():
    vol = Volume.from_array(np.zeros((5, 5, 5)))
    assert in_domain(vol.shape, np.array([[0, 0, 0], [4, 4, 4]]), "trilinear").all()
    assert not in_domain(vol.shape, np.array([[0.5, 2, 2]]), "tricubic").any()
    assert in_domain(vol.shape, np.array([[1, 1, 3]]), "tricubic").all()
    with pytest.raises(DomainError):
        sample(vol, (0.5, 2, 2), "tricubic")
    with pytest.raises(DomainError):
        sample(vol, (4.2, 2, 2), "trilinear")


def test_gradient_cases():
    vol = linear_volume((6, 6, 6), (3.0, 2.0, 1.0))
    assert gradient(vol, (2, 3, 3)) == pytest.approx((3.0, 2.0, 1.0))
    assert gradient(Volume.from_array(np.full((4, 4, 4), 7.0)), (1, 1, 1)) == (0.0, 0.0, 0.0)
    z, y, x = np.meshgrid(np.arange(3), np.arange(3), np.arange(8), indexing="ij")
    sq = Volume.from_array(x.astype(float) ** 2)
    assert gradient(sq, (4, 1, 1))[0] == 8.0
    with pytest.raises(DomainError):
        gradient(sq, (0, 1, 1))


# ---------------------------------------------------------------- histogram / segmentation


def test_histogram_constant_and_two_level(tmp_path):
    counts, _ = histogram(Volume.from_array(np.full((4, 4, 4), 77), "u8"), 16)
    assert np.count_nonzero(counts) == 1 and counts.sum() == 64
    arr = np.full((4, 4, 4), 50)
    arr[2:] = 200
    counts, edges = histogram(Volume.from_array(arr, "u8"), 256)
    assert counts[50] == 32 and counts[200] == 32 and counts.sum() == 64
    write_histogram_csv(counts, edges, tmp_path / "h.csv")
    lines = (tmp_path / "h.csv").read_text().splitlines()
    assert lines[0] == "bin_lo,bin_hi,count" and len(lines) == 257


def test_histogram_bimodal_near_component_means(speckle64):
    vol, _ = speckle64
    counts, edges = histogram(vol, 64)
    centers = 0.5 * (edges[1:] + edges[:-1])
    low = centers < 140
    m1 = centers[low][np.argmax(counts[low])]
    m2 = centers[~low][np.argmax(counts[~low])]
    assert abs(m1 - 105.78) < 8 and abs(m2 - 175.17) < 8


def test_threshold_segment_table_values():
    vol = Volume.from_array(np.array([[[100, 175, 20]]]), "u8")
    ivs = [GrayInterval(50, 150, 1), GrayInterval(150, 256, 2)]
    assert threshold_segment(vol, ivs).labels.tolist() == [[[1, 2, 0]]]


def test_overlapping_intervals_rejected():
    # the literal row-5 pair (soil 50-140, quartz 50-255) overlaps
    with pytest.raises(ValueError, match="overlapping"):
        check_disjoint([GrayInterval.parse("50-140", 1), GrayInterval.parse("50-255", 2)])


def test_interval_parse():
    iv = GrayInterval.parse("55-140", 1)
    assert (iv.lo, iv.hi, iv.label) == (55, 140, 1)
    with pytest.raises(ValueError):
        GrayInterval(10, 10, 1)


def test_component_mean_cases(speckle64):
    vol = Volume.from_array(np.full((3, 3, 3), 105.78))
    labels = LabelVolume(np.ones((3, 3, 3), int))
    assert component_mean(vol, labels, 1) == pytest.approx(105.78, abs=1e-5)
    arr = np.full((2, 2, 2), 100.0)
    arr[1] = 200.0
    assert component_mean(Volume.from_array(arr), LabelVolume(np.ones((2, 2, 2))), 1) == 150.0
    with pytest.raises(ValueError, match="empty"):
        component_mean(vol, labels, 2)
    sp, lab = speckle64
    assert abs(component_mean(sp, lab, 2) - 175.17) < 1.0
