import numpy as np
import pytest

from imilia import ingest
from imilia.ingest import DataError, FeatureMatrix, SlideRecord


def _write_manifest(tmp_path, rows):
    header = ",".join(ingest.MANIFEST_COLUMNS)
    (tmp_path / "manifest.csv").write_text(header + "\n" + "\n".join(rows) + "\n")
    return tmp_path / "manifest.csv"


def test_three_row_manifest(tmp_path):
    for sid in "abc":
        ingest.write_features(FeatureMatrix(np.ones((2, 3), np.float32), ["t0", "t1"]), tmp_path / "f" / sid)
    m = _write_manifest(tmp_path, [f"{s},C,{l},0.5,0.5,,f/{s}" for s, l in zip("abc", ["1", "0", ""])])
    recs = ingest.load_dataset(m)
    assert [(r.slide_id, r.label) for r in recs] == [("a", 1), ("b", 0), ("c", None)]
    assert recs[0].feature_path == tmp_path / "f" / "a"


def test_manifest_errors(tmp_path):
    m = _write_manifest(tmp_path, ["a,C,1,0.5,0.5,,f/a", "a,C,0,0.5,0.5,,f/a"])
    with pytest.raises(DataError, match="duplicate slide_id 'a'"):
        ingest.load_dataset(m, check_features=False)
    m = _write_manifest(tmp_path, ["a,C,1,0,0.5,,f/a"])
    with pytest.raises(DataError, match="non-positive mpp"):
        ingest.load_dataset(m, check_features=False)
    m = _write_manifest(tmp_path, ["a,C,1,0.5,0.5,,f/a"])
    with pytest.raises(DataError, match="unreadable feature container"):
        ingest.load_dataset(m)
    with pytest.raises(DataError, match="label"):
        SlideRecord("x", "C", 2, 0.5, 0.5, None, tmp_path)


def test_feature_matrix_validation():
    X = np.zeros((4, 2), np.float32)
    X[2, 1] = np.nan
    with pytest.raises(DataError, match="row 2"):
        FeatureMatrix(X, list("abcd"))
    with pytest.raises(DataError):
        FeatureMatrix(np.zeros((3, 2)), ["a", "b"])
    with pytest.raises(DataError):
        FeatureMatrix(np.zeros((0, 2)), [])


def test_container_round_trip_is_byte_identical(tmp_path, rng):
    fm = FeatureMatrix(rng.standard_normal((7, 5)).astype(np.float32), [f"t{i}" for i in range(7)], mpp=0.5, grid=(3, 3))
    ingest.write_features(fm, tmp_path / "a")
    back = ingest.read_features(tmp_path / "a.json")
    np.testing.assert_array_equal(back.data, fm.data)
    assert (back.tile_ids, back.mpp, back.grid) == (fm.tile_ids, 0.5, (3, 3))
    ingest.write_features(back, tmp_path / "b")
    for ext in (".json", ".bin"):
        assert (tmp_path / f"a{ext}").read_bytes() == (tmp_path / f"b{ext}").read_bytes()


def test_container_size_mismatch(tmp_path):
    ingest.write_features(FeatureMatrix(np.ones((3, 4), np.float32), ["a", "b", "c"]), tmp_path / "x")
    (tmp_path / "x.bin").write_bytes((tmp_path / "x.bin").read_bytes()[:-4])
    with pytest.raises(DataError, match="payload"):
        ingest.read_features(tmp_path / "x")


def _records(labels):
    return [SlideRecord(f"s{i:02d}", "C", l, 0.5, 0.5, None, ingest.Path("x")) for i, l in enumerate(labels)]


def test_folds_partition_and_stratify():
    recs = _records([1, 0] * 5)
    folds = ingest.make_folds(recs, 5, seed=0)
    assert sorted(folds.assignment) == sorted(r.slide_id for r in recs)
    labels = {r.slide_id: r.label for r in recs}
    for k in range(5):
        ids = folds.fold_ids(k)
        assert sorted(labels[i] for i in ids) == [0, 1]
    assert folds.assignment == ingest.make_folds(recs, 5, seed=0).assignment
    assert folds.assignment != ingest.make_folds(recs, 5, seed=1).assignment


def test_folds_balance_uneven_classes():
    recs = _records([1] * 7 + [0] * 16)
    sizes = np.bincount(list(ingest.make_folds(recs, 5, 3).assignment.values()))
    assert sizes.max() - sizes.min() <= 1


def test_folds_need_enough_per_class():
    with pytest.raises(DataError, match="too few"):
        ingest.make_folds(_records([1, 1, 1, 0, 0, 0, 0, 0]), 5)


def test_tile_manifest_round_trip(tmp_path):
    ingest.write_tile_manifest([("t0", 0, 224), ("t1", 448, 0)], 224, 0.5, tmp_path / "t.csv")
    assert ingest.read_tile_manifest(tmp_path / "t.csv") == {"t0": (0, 224, 224, 0.5), "t1": (448, 0, 224, 0.5)}


def test_synth_dataset_is_deterministic(tmp_path):
    a, ta = ingest.synth_dataset(6, (3, 9), 4, 2.0, 11, tmp_path / "a")
    b, tb = ingest.synth_dataset(6, (3, 9), 4, 2.0, 11, tmp_path / "b")
    assert ta.signal_tiles == tb.signal_tiles
    for ra, rb in zip(a, b):
        np.testing.assert_array_equal(ingest.load_features(ra).data, ingest.load_features(rb).data)
    assert (tmp_path / "a" / "manifest.csv").read_bytes() == (tmp_path / "b" / "manifest.csv").read_bytes()
    assert sum(r.label for r in a) == 3
    assert len(ingest.load_dataset(tmp_path / "a" / "manifest.csv")) == 6
