import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ddmd.data import (
    CorruptBlobError,
    LabelMismatchError,
    ManifestError,
    MissingFileError,
    ShapeMismatchError,
    SliceRecord,
    balance_records,
    derive_label,
    generate_synthetic,
    load_dataset,
    normalize_minmax,
    split_datasets,
    write_dataset,
    zscore_dataset,
)


def rec(label, i=0):
    mask = np.zeros((4, 4), np.uint8)
    mask[0, 0] = label
    return SliceRecord(np.zeros((1, 4, 4), np.float32), mask, label, f"r{i}")


def test_derive_label():
    z = np.zeros((5, 5), np.uint8)
    assert derive_label(z) == 0
    z[2, 3] = 1
    assert derive_label(z) == 1
    assert derive_label(np.ones((5, 5))) == 1
    with pytest.raises(ValueError):
        derive_label(np.full((2, 2), 2))


def test_split_datasets():
    recs = [rec(0, 0), rec(0, 1), rec(1, 2)]
    a, b = split_datasets(recs)
    assert len(a) == 2 and len(b) == 3
    assert all(any(r is x for x in b) for r in a)
    healthy = [rec(0, i) for i in range(3)]
    a, b = split_datasets(healthy)
    assert [r.id for r in a] == [r.id for r in b]
    with pytest.raises(ValueError):
        split_datasets([rec(1, i) for i in range(3)])
    with pytest.raises(ValueError):
        split_datasets([])


@settings(max_examples=30, deadline=None)
@given(n0=st.integers(0, 12), n1=st.integers(0, 12), seed=st.integers(0, 1000))
def test_balance_within_one(n0, n1, seed):
    recs = [rec(0, i) for i in range(n0)] + [rec(1, n0 + i) for i in range(n1)]
    out = balance_records(recs, seed)
    c0 = sum(r.label == 0 for r in out)
    c1 = len(out) - c0
    assert abs(c0 - c1) <= 1
    assert c0 == c1 == min(n0, n1)
    ids = [r.id for r in recs]
    assert [ids.index(r.id) for r in out] == sorted(ids.index(r.id) for r in out)


@settings(max_examples=50, deadline=None)
@given(img=arrays(np.float32, (3, 5, 5), elements=st.floats(-1e3, 1e3, width=32)))
def test_minmax_normalization(img):
    out = normalize_minmax(img)
    assert out.dtype == np.float32
    for c in range(3):
        if img[c].max() > img[c].min():
            assert out[c].min() == 0.0 and out[c].max() == pytest.approx(1.0)
        else:
            assert (out[c] == 0).all()


def test_zscore_dataset_centers_channels():
    rng = np.random.default_rng(0)
    recs = [SliceRecord(rng.normal(3, 2, (2, 8, 8)).astype(np.float32), np.zeros((8, 8), np.uint8), 0)
            for _ in range(5)]
    stack = np.stack([r.modalities for r in zscore_dataset(recs)]).astype(np.float64)
    np.testing.assert_allclose(stack.mean(axis=(0, 2, 3)), 0, atol=1e-5)
    np.testing.assert_allclose(stack.std(axis=(0, 2, 3)), 1, atol=1e-4)


def test_synthetic_is_deterministic_and_labelled():
    a = generate_synthetic(4, 4, C=4, H=32, W=32, seed=3, test_fraction=0.25)
    b = generate_synthetic(4, 4, C=4, H=32, W=32, seed=3, test_fraction=0.25)
    assert all(x.modalities.tobytes() == y.modalities.tobytes() and x.mask.tobytes() == y.mask.tobytes()
               and x.id == y.id and x.split == y.split for x, y in zip(a, b))
    c = generate_synthetic(4, 4, C=4, H=32, W=32, seed=4)
    assert any(x.modalities.tobytes() != y.modalities.tobytes() for x, y in zip(a, c))
    assert sum(r.label for r in a) == 4
    for r in a:
        assert r.label == derive_label(r.mask)
        assert r.modalities.shape == (4, 32, 32) and r.modalities.dtype == np.float32
        assert r.modalities.min() >= 0 and r.modalities.max() <= 1
    assert sorted(r.split for r in a).count("test") == 2


def test_lesion_area_fraction():
    recs = generate_synthetic(0, 40, C=4, H=64, W=64, seed=0)
    frac = np.array([r.mask.mean() for r in recs])
    assert 0.02 <= frac.mean() <= 0.08
    assert frac.min() > 0
    big = generate_synthetic(0, 20, C=4, H=64, W=64, seed=0, lesion_fraction=(0.1, 0.15))
    assert np.mean([r.mask.mean() for r in big]) > frac.mean()


def test_lesions_change_the_image_where_marked():
    recs = generate_synthetic(0, 10, C=4, H=64, W=64, seed=1)
    gaps = []
    for r in recs:
        m = r.mask.astype(bool)
        flair = r.modalities[3]
        gaps.append(flair[m].mean() - flair[~m].mean())
    assert np.mean(gaps) > 0.1


@pytest.mark.parametrize("kw", [dict(H=16), dict(W=31), dict(C=0), dict(n_normal=0, n_abnormal=0),
                                dict(lesion_fraction=(0.2, 0.1)), dict(test_fraction=1.0)])
def test_synthetic_rejects_bad_arguments(kw):
    args = dict(n_normal=2, n_abnormal=2, C=4, H=32, W=32)
    args.update(kw)
    with pytest.raises(ValueError):
        generate_synthetic(**args)


def test_round_trip(tmp_path):
    recs = generate_synthetic(3, 3, C=4, H=32, W=32, seed=0, test_fraction=0.34)
    path = write_dataset(recs, tmp_path / "data")
    back = load_dataset(path, normalization="none")
    assert [r.id for r in back] == [r.id for r in recs]
    for x, y in zip(recs, back):
        np.testing.assert_array_equal(x.modalities, y.modalities)
        np.testing.assert_array_equal(x.mask, y.mask)
        assert (x.label, x.split) == (y.label, y.split)
    m = json.loads(path.read_text())
    assert set(m) >= {"version", "C", "H", "W", "records"}
    assert set(m["records"][0]) == {"id", "modality_blob", "mask_blob", "label", "split"}
    normed = load_dataset(path)
    for r in normed:
        assert r.modalities.min() >= 0 and r.modalities.max() <= 1


def _written(tmp_path):
    recs = generate_synthetic(2, 2, C=2, H=32, W=32, seed=0)
    return recs, write_dataset(recs, tmp_path)


def test_missing_file_errors(tmp_path):
    recs, path = _written(tmp_path)
    (tmp_path / f"blobs/{recs[1].id}.img.f32").unlink()
    with pytest.raises(MissingFileError):
        load_dataset(path)
    with pytest.raises(MissingFileError):
        load_dataset(tmp_path / "nope.json")


def test_shape_errors(tmp_path):
    recs, path = _written(tmp_path)
    m = json.loads(path.read_text())
    m["H"] = 64
    path.write_text(json.dumps(m))
    with pytest.raises(ShapeMismatchError):
        load_dataset(path)


def test_corrupt_blob_errors(tmp_path):
    recs, path = _written(tmp_path)
    blob = tmp_path / f"blobs/{recs[0].id}.img.f32"
    blob.write_bytes(blob.read_bytes()[:-2])
    with pytest.raises(CorruptBlobError):
        load_dataset(path)
    recs, path = _written(tmp_path)
    arr = np.frombuffer(blob.read_bytes(), dtype="<f4").copy()
    arr[3] = np.inf
    blob.write_bytes(arr.tobytes())
    with pytest.raises(CorruptBlobError):
        load_dataset(path)
    recs, path = _written(tmp_path)
    mblob = tmp_path / f"blobs/{recs[0].id}.mask.u8"
    mblob.write_bytes(bytes([7]) + mblob.read_bytes()[1:])
    with pytest.raises(CorruptBlobError):
        load_dataset(path)


def test_manifest_and_label_errors(tmp_path):
    recs, path = _written(tmp_path)
    m = json.loads(path.read_text())
    m["records"][0]["label"] = 1 - m["records"][0]["label"]
    path.write_text(json.dumps(m))
    with pytest.raises(LabelMismatchError):
        load_dataset(path)
    path.write_text("{not json")
    with pytest.raises(ManifestError):
        load_dataset(path)
    path.write_text(json.dumps({"version": 99}))
    with pytest.raises(ManifestError):
        load_dataset(path)
