import numpy as np
import pytest

from tfda.benchmark import PRETRAIN_EPOCHS, PRETRAIN_LR
from tfda.data import (
    DEFAULT_SHIFT,
    IDENTITY,
    DataFormatError,
    Dataset,
    DatasetMeta,
    ShiftSpec,
    batches,
    generate_synthetic,
    load_dataset,
    make_benchmark,
    save_dataset,
)
from tfda.trainer import evaluate


class TestGenerator:
    def test_identity_shift_matches(self):
        a = generate_synthetic(3, 2, 64, 5, IDENTITY, seed=9)
        b = generate_synthetic(3, 2, 64, 5, ShiftSpec(0.0, 1.0, 0.0, 0.0), seed=9, domain_id=1)
        np.testing.assert_array_equal(a.samples, b.samples)
        np.testing.assert_array_equal(a.labels, b.labels)

    def test_deterministic(self):
        a = generate_synthetic(3, 2, 64, 5, DEFAULT_SHIFT, seed=4)
        b = generate_synthetic(3, 2, 64, 5, DEFAULT_SHIFT, seed=4)
        assert a.samples.tobytes() == b.samples.tobytes()

    def test_seed_matters(self):
        a = generate_synthetic(3, 2, 64, 5, seed=4)
        b = generate_synthetic(3, 2, 64, 5, seed=5)
        assert not np.array_equal(a.samples, b.samples)

    @pytest.mark.parametrize("C", [2, 3, 5])
    def test_balanced(self, C):
        ds = generate_synthetic(C, 1, 256, 7, seed=0)
        counts = np.bincount(ds.labels, minlength=C)
        assert counts.max() - counts.min() <= 1
        assert ds.samples.shape == (7 * C, 1, 256)

    def test_shift_changes_data(self):
        a = generate_synthetic(3, 2, 64, 5, seed=1)
        b = generate_synthetic(3, 2, 64, 5, DEFAULT_SHIFT, seed=1)
        assert not np.allclose(a.samples, b.samples)

    def test_length_too_short(self):
        with pytest.raises(ValueError, match="cannot resolve"):
            generate_synthetic(3, 2, 16, 5)

    def test_one_class(self):
        with pytest.raises(ValueError):
            generate_synthetic(1, 2, 64, 5)

    @pytest.mark.parametrize("spec", [
        ShiftSpec(amplitude_scale=0.0), ShiftSpec(noise_sigma=-1.0), ShiftSpec(time_warp=0.5),
        ShiftSpec(frequency_shift=100.0),
    ])
    def test_shift_ranges(self, spec):
        with pytest.raises(ValueError):
            generate_synthetic(3, 2, 128, 2, spec)

    def test_default_shift_is_material(self, bench0, pretrained0):
        src = evaluate(pretrained0, bench0.source_test)
        tgt = evaluate(pretrained0, bench0.target_test)
        assert src - tgt >= 0.10


class TestDataset:
    def _meta(self, **kw):
        return DatasetMeta(**{"channels": 1, "classes": 2, "length": 4, **kw})

    def test_label_range(self):
        with pytest.raises(DataFormatError):
            Dataset(np.zeros((2, 1, 4)), [0, 2], self._meta())

    def test_non_finite(self):
        x = np.zeros((1, 1, 4))
        x[0, 0, 1] = np.nan
        with pytest.raises(DataFormatError):
            Dataset(x, None, self._meta())

    def test_empty(self):
        with pytest.raises(DataFormatError):
            Dataset(np.zeros((0, 1, 4)), None, self._meta())

    def test_shape_vs_meta(self):
        with pytest.raises(DataFormatError):
            Dataset(np.zeros((1, 2, 4)), None, self._meta())


class TestDiskFormat:
    def test_round_trip(self, tmp_path, tiny_data):
        save_dataset(tiny_data, tmp_path / "d")
        back = load_dataset(tmp_path / "d")
        assert back.samples.tobytes() == tiny_data.samples.tobytes()
        np.testing.assert_array_equal(back.labels, tiny_data.labels)
        assert back.meta == tiny_data.meta

    def test_sizes_and_layout(self, tmp_path, tiny_data):
        save_dataset(tiny_data, tmp_path)
        N, Ch, S = tiny_data.samples.shape
        raw = (tmp_path / "samples.bin").read_bytes()
        assert len(raw) == N * Ch * S * 8
        assert (tmp_path / "labels.bin").stat().st_size == 2 * N
        np.testing.assert_array_equal(np.frombuffer(raw, "<f8")[:S], tiny_data.samples[0, 0])
        meta = (tmp_path / "meta.txt").read_text().splitlines()
        assert meta == ["channels=2", "classes=3", "length=48", f"count={N}", "labeled=1",
                        "domain_id=0", "seed=5"]

    def test_unlabeled_has_no_labels_file(self, tmp_path, tiny_data):
        save_dataset(tiny_data, tmp_path)
        save_dataset(tiny_data.unlabeled(), tmp_path)
        assert not (tmp_path / "labels.bin").exists()
        assert load_dataset(tmp_path).labels is None

    def test_truncated_samples(self, tmp_path, tiny_data):
        save_dataset(tiny_data, tmp_path)
        p = tmp_path / "samples.bin"
        p.write_bytes(p.read_bytes()[:-8])
        with pytest.raises(DataFormatError, match="samples.bin"):
            load_dataset(tmp_path)

    def test_label_out_of_range(self, tmp_path, tiny_data):
        save_dataset(tiny_data, tmp_path)
        p = tmp_path / "labels.bin"
        lab = np.frombuffer(p.read_bytes(), "<u2").copy()
        lab[0] = 3
        p.write_bytes(lab.tobytes())
        with pytest.raises(DataFormatError, match="labels.bin"):
            load_dataset(tmp_path)

    @pytest.mark.parametrize("name", ["meta.txt", "samples.bin", "labels.bin"])
    def test_missing_file(self, tmp_path, tiny_data, name):
        save_dataset(tiny_data, tmp_path)
        (tmp_path / name).unlink()
        with pytest.raises(DataFormatError, match=name.replace(".", r"\.")):
            load_dataset(tmp_path)


class TestBatches:
    def test_sizes(self):
        assert [len(b) for b in batches(10, 4)] == [4, 4, 2]

    def test_deterministic(self):
        a = [b.tolist() for b in batches(50, 7, 3, 2)]
        assert a == [b.tolist() for b in batches(50, 7, 3, 2)]
        assert a != [b.tolist() for b in batches(50, 7, 3, 3)]

    @pytest.mark.parametrize("n,bs", [(1, 1), (10, 3), (33, 32), (64, 100)])
    def test_partition(self, n, bs):
        got = np.concatenate(list(batches(n, bs, 1, 0)))
        assert sorted(got.tolist()) == list(range(n))

    def test_bad_size(self):
        with pytest.raises(ValueError):
            list(batches(4, 0))


def test_benchmark_splits():
    b = make_benchmark(1, n_train=4, n_test=2)
    assert len(b.source_train) == 12 and len(b.target_test) == 6
    assert b.source_train.meta.domain_id == 0 and b.target_train.meta.domain_id == 1
