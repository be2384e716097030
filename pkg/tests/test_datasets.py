import numpy as np
import pytest

from zipq import (
    ContainerError,
    DataFormatError,
    Dataset,
    column_scales,
    compression_ratio,
    load_csv,
    load_libsvm,
    new_rng,
    read_quantized,
    scheme_for_bits,
    synth,
    synth_bimodal,
    uniform_scheme,
    write_quantized,
)
from zipq.datasets import _HEADER, _row_nbytes
from zipq.linear import least_squares_loss
from zipq.quantize import encode_copies


class TestLibsvm:
    def test_basic_sparse_line(self, tmp_path):
        f = tmp_path / "a.libsvm"
        f.write_text("+1 1:0.5 3:-2\n")
        ds = load_libsvm(f, n_features=3)
        assert ds.X.tolist() == [[0.5, 0.0, -2.0]]
        assert ds.y.tolist() == [1.0]

    def test_infers_width(self, tmp_path):
        f = tmp_path / "b.libsvm"
        f.write_text("-1 2:1\n+1 4:2\n")
        ds = load_libsvm(f)
        assert ds.n_features == 4

    def test_empty_file_rejected(self, tmp_path):
        f = tmp_path / "c.libsvm"
        f.write_text("\n\n")
        with pytest.raises(DataFormatError):
            load_libsvm(f)

    def test_malformed_line_reports_position(self, tmp_path):
        f = tmp_path / "d.libsvm"
        f.write_text("+1 1:0.5\n-1 nonsense\n")
        with pytest.raises(DataFormatError, match="line 2"):
            load_libsvm(f)

    def test_zero_based_index_rejected(self, tmp_path):
        f = tmp_path / "e.libsvm"
        f.write_text("+1 0:0.5\n")
        with pytest.raises(DataFormatError, match="1-based"):
            load_libsvm(f)

    def test_roundtrip_random(self, tmp_path):
        rng = new_rng(110)
        X = np.round(rng.uniform(-2, 2, size=(20, 6)), 6)
        y = rng.choice([-1.0, 1.0], 20)
        lines = []
        for row, label in zip(X, y):
            feats = " ".join(f"{i + 1}:{float(row[i])!r}" for i in range(6) if row[i] != 0)
            lines.append(f"{label:+.0f} {feats}".strip())
        f = tmp_path / "f.libsvm"
        f.write_text("\n".join(lines) + "\n")
        ds = load_libsvm(f, n_features=6)
        assert np.array_equal(ds.X, X)
        assert np.array_equal(ds.y, y)


class TestCsv:
    def test_label_column(self, tmp_path):
        f = tmp_path / "a.csv"
        f.write_text("1.0,2.0,3.0\n-1.0,4.0,5.0\n")
        ds = load_csv(f, label_col=0)
        assert ds.y.tolist() == [1.0, -1.0]
        assert ds.X.tolist() == [[2.0, 3.0], [4.0, 5.0]]

    def test_header_skipped(self, tmp_path):
        f = tmp_path / "b.csv"
        f.write_text("label,f1\n1.0,0.5\n")
        ds = load_csv(f)
        assert ds.n_samples == 1

    def test_ragged_rejected(self, tmp_path):
        f = tmp_path / "c.csv"
        f.write_text("1,2,3\n1,2\n")
        with pytest.raises(DataFormatError, match="line 2"):
            load_csv(f)

    def test_bad_value_rejected(self, tmp_path):
        f = tmp_path / "d.csv"
        f.write_text("1,2\n1,x\n")
        with pytest.raises(DataFormatError):
            load_csv(f)


class TestSynth:
    def test_noiseless_regression_recoverable(self):
        ds = synth("regression", 8, 400, 0, seed=111, noise=0.0)
        xhat = np.linalg.lstsq(ds.X, ds.y, rcond=None)[0]
        assert least_squares_loss(ds.X, ds.y, xhat) < 1e-12
        assert np.allclose(ds.X @ xhat, ds.y, atol=1e-6)

    def test_seed_repeatable(self):
        a = synth("regression", 5, 50, 20, seed=112, noise=0.1)
        b = synth("regression", 5, 50, 20, seed=112, noise=0.1)
        assert np.array_equal(a.X, b.X) and np.array_equal(a.y, b.y)
        assert np.array_equal(a.X_test, b.X_test)

    def test_shapes(self):
        ds = synth("regression", 100, 10_000, 10_000, seed=113, noise=0.1)
        assert ds.X.shape == (10_000, 100)
        assert ds.X_test.shape == (10_000, 100)

    def test_classification_labels(self):
        ds = synth("classification", 6, 200, 50, seed=114, noise=0.05)
        assert set(np.unique(ds.y)) <= {-1.0, 1.0}

    def test_rows_unit_norm(self):
        ds = synth("regression", 7, 64, 0, seed=115)
        assert np.allclose(np.linalg.norm(ds.X, axis=1), 1.0)

    def test_bimodal_in_unit_interval(self):
        ds = synth_bimodal(6, 500, 100, seed=116)
        assert ds.X.min() >= 0.0 and ds.X.max() <= 1.0
        # actually bimodal: almost nothing in the middle band
        mid = ((ds.X > 0.3) & (ds.X < 0.7)).mean()
        assert mid < 0.01

    def test_bad_kind(self):
        with pytest.raises(ValueError):
            synth("clustering", 3, 10, 0)


class TestDatasetValidation:
    def test_rejects_nan(self):
        with pytest.raises(ValueError):
            Dataset(np.array([[np.nan]]), np.array([1.0]))

    def test_rejects_mismatch(self):
        with pytest.raises(ValueError):
            Dataset(np.ones((3, 2)), np.ones(2))


class TestContainer:
    def _write(self, tmp_path, n=12, d=5, bits=4, copies=2, seed=117, signed=True):
        rng = new_rng(seed)
        X = rng.uniform(-1 if signed else 0, 1, size=(n, d))
        ds = Dataset(X, rng.normal(size=n))
        sch = scheme_for_bits(bits, signed=signed)
        path = tmp_path / "q.zipq"
        write_quantized(ds, sch, copies, seed, path)
        return ds, sch, path

    def test_roundtrip_bit_exact(self, tmp_path):
        ds, sch, path = self._write(tmp_path)
        zf = read_quantized(path, scheme=sch)
        rec = encode_copies(ds.X, sch, column_scales(ds.X), 2, new_rng(117))
        for k in range(ds.n_samples):
            assert np.array_equal(zf.base_indices(k), rec.base[k])
            assert np.array_equal(zf.selector_counts(k), rec.base_count[k])
            for c in range(2):
                assert np.array_equal(zf.copy_indices(k, c), rec.decode(c).idx[k])
                assert np.array_equal(zf.dequantize_copy(k, c), rec.decode(c).dequantize()[k])
        assert np.array_equal(zf.labels, ds.y)
        assert np.array_equal(zf.scales, column_scales(ds.X))

    @pytest.mark.parametrize("copies", [1, 2, 4, 8])
    def test_roundtrip_copy_counts(self, tmp_path, copies):
        ds, sch, path = self._write(tmp_path, copies=copies, seed=118 + copies)
        zf = read_quantized(path, scheme=sch)
        assert zf.n_copies == copies
        M = zf.copy_matrix(copies - 1)
        assert M.shape == ds.X.shape
        gaps = np.abs((M / zf.scales)[..., None] - sch.levels).min(axis=-1)
        assert gaps.max() < 1e-12

    def test_file_size_formula(self, tmp_path):
        n, d, bits, copies = 9, 7, 5, 4
        ds, sch, path = self._write(tmp_path, n=n, d=d, bits=bits, copies=copies, seed=130)
        selbits = copies.bit_length() - 1
        expected = _HEADER.size + 8 * d + n * _row_nbytes(d, bits, selbits) + 8 * n + 4
        assert path.stat().st_size == expected

    def test_compression_ratio(self):
        assert compression_ratio(100, 5, 2) == pytest.approx(32 / 6)
        assert compression_ratio(10, 4, 16) == pytest.approx(32 / 8)

    def test_truncated_file_rejected(self, tmp_path):
        _, sch, path = self._write(tmp_path, seed=131)
        blob = path.read_bytes()
        path.write_bytes(blob[: len(blob) // 2])
        with pytest.raises(ContainerError):
            read_quantized(path)

    def test_bad_magic_rejected(self, tmp_path):
        _, sch, path = self._write(tmp_path, seed=132)
        blob = bytearray(path.read_bytes())
        blob[:4] = b"JUNK"
        path.write_bytes(bytes(blob))
        with pytest.raises(ContainerError):
            read_quantized(path)

    def test_wrong_scheme_bits_rejected(self, tmp_path):
        _, sch, path = self._write(tmp_path, bits=4, seed=133)
        with pytest.raises(ContainerError):
            read_quantized(path, scheme=scheme_for_bits(6))

    def test_single_byte_corruption_always_detected(self, tmp_path):
        _, sch, path = self._write(tmp_path, seed=134)
        blob = bytearray(path.read_bytes())
        rng = new_rng(135)
        for _ in range(200):
            pos = int(rng.integers(len(blob)))
            old = blob[pos]
            blob[pos] = old ^ int(rng.integers(1, 256))
            path.write_bytes(bytes(blob))
            with pytest.raises(ContainerError):
                read_quantized(path, scheme=sch)
            blob[pos] = old

    def test_anchored_grid_container(self, tmp_path):
        ds, sch, path = self._write(tmp_path, signed=False, bits=3, seed=136)
        zf = read_quantized(path, scheme=sch)
        deq = zf.copy_matrix(0)
        assert np.all(deq >= 0.0)

    def test_needs_scheme_for_dequantize(self, tmp_path):
        _, sch, path = self._write(tmp_path, seed=137)
        zf = read_quantized(path)
        with pytest.raises(ValueError):
            zf.dequantize_copy(0, 0)
        assert zf.base_indices(0).size == 5  # index access works without a grid

    def test_stored_copies_feed_training(self, tmp_path):
        from zipq import TrainConfig, train

        ds, sch, path = self._write(tmp_path, n=300, d=6, bits=6, copies=2, seed=138)
        zf = read_quantized(path, scheme=sch)
        copies = np.stack([zf.copy_matrix(0), zf.copy_matrix(1)])
        stored = Dataset(copies[0], zf.labels)
        cfg = TrainConfig(alpha0=1.0, epochs=4, batch_size=16, seed=7, sample_scheme=sch)
        t1 = train(stored, cfg, sample_copies=copies)
        t2 = train(stored, cfg, sample_copies=copies)
        assert not t1.diverged
        assert t1.train_loss == t2.train_loss  # fixed copies, fixed order
        with pytest.raises(ValueError):
            train(stored, cfg, sample_copies=copies[:1][:, :10])
