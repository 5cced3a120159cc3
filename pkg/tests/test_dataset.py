import hashlib

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tactnet.dataset import (
    CLASS_NAMES, Dataset, DatasetFormatError, import_frame_csvs, load_dataset, make_splits,
    read_frame_csv, save_dataset, synthesize_dataset, write_frame_csv,
)
from tactnet.image_ops import N_CLASSES, TactileFrame, expand_set


@pytest.fixture(scope="module")
def synth():
    return synthesize_dataset(50, seed=7)


class TestContainer:
    def test_round_trip(self, tmp_path, synth):
        small = Dataset(synth.frames[::37])
        save_dataset(small, tmp_path / "d.tdat")
        back = load_dataset(tmp_path / "d.tdat")
        assert back.class_names == CLASS_NAMES
        np.testing.assert_array_equal(back.labels, small.labels)
        np.testing.assert_array_equal(back.values(), small.values())

    def test_empty(self, tmp_path):
        save_dataset(Dataset([]), tmp_path / "e.tdat")
        assert len(load_dataset(tmp_path / "e.tdat")) == 0

    def test_full_resave_byte_identical(self, tmp_path, synth):
        save_dataset(synth, tmp_path / "a.tdat")
        save_dataset(load_dataset(tmp_path / "a.tdat"), tmp_path / "b.tdat")
        digest = lambda p: hashlib.sha256(p.read_bytes()).hexdigest()
        assert digest(tmp_path / "a.tdat") == digest(tmp_path / "b.tdat") == synth.checksum()

    def test_header_layout(self, tmp_path):
        save_dataset(Dataset([TactileFrame(np.full((2, 3), 0.5, np.float32), 4)]), tmp_path / "x.tdat")
        raw = (tmp_path / "x.tdat").read_bytes()
        assert raw[:4] == b"TDAT" and raw[4:6] == b"\x01\x00"
        # trailing record: one label byte then six float32 values, little-endian
        assert raw[-25] == 4 and np.frombuffer(raw[-24:], "<f4").tolist() == [0.5] * 6

    def test_rejects_corruption(self, tmp_path):
        save_dataset(Dataset([TactileFrame(np.zeros((2, 3), np.float32), 1)]), tmp_path / "x.tdat")
        raw = (tmp_path / "x.tdat").read_bytes()
        cases = [(b"NOPE" + raw[4:], "not a TDAT"), (raw[:4] + b"\x07\x00" + raw[6:], "version"),
                 (raw[:-1], "truncated"), (raw[:8], "truncated"), (raw + b"\x00", "trailing"),
                 (raw[:-25] + b"\x63" + raw[-24:], "out of range")]
        for bad, msg in cases:
            (tmp_path / "y.tdat").write_bytes(bad)
            with pytest.raises(DatasetFormatError, match=msg):
                load_dataset(tmp_path / "y.tdat")

    def test_dataset_requires_labels(self):
        with pytest.raises(ValueError, match="no label"):
            Dataset([TactileFrame(np.zeros((2, 2)))])


class TestFrameCsv:
    def test_import_directory(self, tmp_path, synth):
        for name, f in [("ball_1.csv", synth.frames[150]), ("allen key_2.csv", synth.frames[50]),
                        ("sticky-tape_x.csv", synth.frames[1000])]:
            write_frame_csv(f.values, tmp_path / name)
        ds = import_frame_csvs(tmp_path)
        assert sorted(ds.labels.tolist()) == [1, 3, 20]
        np.testing.assert_array_equal(ds.values()[ds.labels.tolist().index(3)], synth.frames[150].values)

    def test_kpa_units_and_resize(self, tmp_path):
        np.savetxt(tmp_path / "rock_1.csv", np.full((14, 25), 17.0), delimiter=",")
        f = read_frame_csv(tmp_path / "rock_1.csv", units="kpa", resize=True)
        assert f.values.shape == (28, 50) and f.label == 17
        np.testing.assert_allclose(f.values, 0.5, atol=1e-6)

    @pytest.mark.parametrize("name,body,msg", [
        ("ball.csv", "0,0\n", "file name"), ("drum_1.csv", "0,0\n", "unknown class"),
        ("ball_1.csv", "0,0\n0\n", r"ball_1.csv:2"), ("ball_1.csv", "0,x\n", r"ball_1.csv:1"),
        ("ball_1.csv", "0.1,0.2\n", "expected 28x50"),
    ])
    def test_malformed(self, tmp_path, name, body, msg):
        (tmp_path / name).write_text(body)
        with pytest.raises(DatasetFormatError, match=msg):
            read_frame_csv(tmp_path / name)


class TestSplits:
    def test_protocol_counts(self, synth):
        plan = make_splits(synth, 1)
        assert plan.sizes() == (704, 176, 220)
        labels = synth.labels
        for part, n in zip((plan.train, plan.val, plan.test), (32, 8, 10)):
            assert np.all(np.bincount(labels[part], minlength=N_CLASSES) == n)

    def test_exact_cover(self, synth):
        plan = make_splits(synth, 3)
        assert sorted(plan.train + plan.val + plan.test) == list(range(1100))

    def test_seeds_distinct_and_repeatable(self, synth):
        plans = [tuple(make_splits(synth, s).test) for s in range(1, 21)]
        assert len(set(plans)) == 20
        assert make_splits(synth, 4) == make_splits(synth, 4)

    def test_insufficient_frames(self):
        ds = synthesize_dataset(49, seed=1)
        with pytest.raises(ValueError, match="fewer than 50"):
            make_splits(ds, 0)

    def test_augment_after_split_has_no_leak(self, synth):
        plan = make_splits(synth, 2)
        train = expand_set([synth.frames[i] for i in plan.train], rng_seed=10)
        test = expand_set([synth.frames[i] for i in plan.test], rng_seed=12)
        assert len(train) == 4224 and len(test) == 1320
        assert not {f.origin for f in train} & {f.origin for f in test}


class TestSynthetic:
    def test_size_and_balance(self, synth):
        assert len(synth) == 1100 and np.all(synth.class_counts() == 50)
        assert synth.shape == (28, 50)

    def test_bit_identical_per_seed(self, synth):
        assert synthesize_dataset(50, seed=7).checksum() == synth.checksum()
        assert synthesize_dataset(2, seed=8).checksum() != synthesize_dataset(2, seed=9).checksum()

    def test_classes_distinguishable(self, synth):
        plan = make_splits(synth, 0)
        x = synth.values().reshape(len(synth), -1).astype(np.float64)
        y = synth.labels
        centroids = np.stack([x[plan.train][y[plan.train] == k].mean(axis=0) for k in range(N_CLASSES)])
        pred = np.argmin(((x[plan.test][:, None, :] - centroids[None]) ** 2).sum(-1), axis=1)
        assert np.mean(pred == y[plan.test]) > 1 / N_CLASSES

    @settings(max_examples=10, deadline=None)
    @given(seed=st.integers(0, 2**31 - 1))
    def test_frames_valid_for_any_seed(self, seed):
        ds = synthesize_dataset(1, seed=seed)
        v = ds.values()
        assert v.dtype == np.float32 and v.min() >= 0 and v.max() <= 1 and np.all(np.isfinite(v))
        # every imprint carries real contact pressure above the noise floor
        assert np.all(v.reshape(22, -1).max(axis=1) > 0.12)
