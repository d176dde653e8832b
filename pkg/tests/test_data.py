from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from impact.data import (
    NUM_SHAPE_CLASSES,
    Dataset,
    IdxFormatError,
    generate_shapes,
    load_dataset_dir,
    load_idx,
    make_binary_task,
    read_idx,
    save_dataset_dir,
    write_idx,
)


def test_minimal_idx_scaling(tmp_path):
    img = tmp_path / "img.idx"
    lab = tmp_path / "lab.idx"
    img.write_bytes(bytes([0, 0, 8, 3, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0, 2, 0, 255, 0, 255]))
    lab.write_bytes(bytes([0, 0, 8, 1, 0, 0, 0, 1, 0]))
    ds = load_idx(img, lab)
    assert ds.images.shape == (1, 1, 2, 2)
    np.testing.assert_array_equal(ds.images.ravel(), [0, 1, 0, 1])


def test_label_count_mismatch(tmp_path):
    write_idx(tmp_path / "i.idx", np.zeros((3, 2, 2), np.uint8))
    write_idx(tmp_path / "l.idx", np.zeros(2, np.uint8))
    with pytest.raises(IdxFormatError, match="count"):
        load_idx(tmp_path / "i.idx", tmp_path / "l.idx")


def test_idx_format_errors(tmp_path):
    p = tmp_path / "x.idx"
    p.write_bytes(b"\x01\x00\x08\x01")
    with pytest.raises(IdxFormatError, match="magic"):
        read_idx(p)
    p.write_bytes(bytes([0, 0, 0x0D, 1, 0, 0, 0, 1]) + b"\0" * 4)
    with pytest.raises(IdxFormatError, match="element type"):
        read_idx(p)
    p.write_bytes(bytes([0, 0, 8, 2, 0, 0]))
    with pytest.raises(IdxFormatError, match="header"):
        read_idx(p)
    p.write_bytes(bytes([0, 0, 8, 1, 0, 0, 0, 4, 1, 2]))
    with pytest.raises(IdxFormatError, match="truncated"):
        read_idx(p)
    p.write_bytes(bytes([0, 0, 8, 1, 0, 0, 0, 1, 1, 2]))
    with pytest.raises(IdxFormatError, match="trailing"):
        read_idx(p)


def test_generated_dataset_round_trips_exactly(tmp_path):
    ds = generate_shapes(3, 4)
    files = save_dataset_dir(tmp_path, {"train": ds})
    assert len(files) == 2
    back = load_dataset_dir(tmp_path, "train", NUM_SHAPE_CLASSES)
    assert back.images.tobytes() == ds.images.tobytes()
    np.testing.assert_array_equal(back.labels, ds.labels)


@settings(max_examples=25, deadline=None)
@given(st.lists(st.integers(1, 5), min_size=1, max_size=4), st.integers(0, 2**32 - 1))
def test_idx_round_trip_property(shape, seed):
    import tempfile
    from pathlib import Path

    arr = np.random.default_rng(seed).integers(0, 256, size=shape).astype(np.uint8)
    with tempfile.TemporaryDirectory() as d:
        p = Path(d) / "a.idx"
        write_idx(p, arr)
        back = read_idx(p)
    assert back.shape == arr.shape and back.tobytes() == arr.tobytes()


def test_shapes_deterministic_and_balanced():
    a, b = generate_shapes(7, 5), generate_shapes(7, 5)
    assert a.images.tobytes() == b.images.tobytes()
    np.testing.assert_array_equal(a.labels, b.labels)
    assert len(a) == 50 and a.images.shape == (50, 1, 32, 32)
    np.testing.assert_array_equal(np.bincount(a.labels, minlength=10), np.full(10, 5))
    assert a.images.min() >= 0 and a.images.max() <= 1
    c = generate_shapes(8, 5)
    assert c.images.tobytes() != a.images.tobytes()


def test_shapes_rejects_nonpositive_count():
    with pytest.raises(ValueError):
        generate_shapes(0, 0)


def test_binary_task_counts():
    ds = generate_shapes(0, 5)
    t = make_binary_task(ds, 3, seed=0)
    assert len(t.positives) == 5 and len(t.negatives) == 5
    assert np.all(ds.labels[t.positives] == 3) and np.all(ds.labels[t.negatives] != 3)
    np.testing.assert_array_equal(t.targets, [1] * 5 + [0] * 5)


def test_binary_task_seeds_change_negatives_only():
    ds = generate_shapes(0, 20)
    a, b = make_binary_task(ds, 2, seed=1), make_binary_task(ds, 2, seed=2)
    np.testing.assert_array_equal(a.positives, b.positives)
    assert not np.array_equal(a.negatives, b.negatives)


def test_binary_task_cap_and_errors():
    ds = generate_shapes(0, 20)
    assert len(make_binary_task(ds, 1, 0, max_positives=7).positives) == 7
    sub = ds.subset(ds.class_indices(0))
    with pytest.raises(ValueError):
        make_binary_task(sub, 1, 0)
    with pytest.raises(ValueError):
        make_binary_task(sub, 0, 0)


def test_dataset_validation():
    with pytest.raises(ValueError):
        Dataset(np.zeros((2, 1, 4, 4), np.float32), np.array([0]), 2)
    with pytest.raises(ValueError):
        Dataset(np.zeros((1, 1, 4, 4), np.float32), np.array([5]), 2)
