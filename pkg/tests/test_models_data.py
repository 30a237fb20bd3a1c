import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from ckd import data as D
from ckd.gradcheck import max_relative_error
from ckd.models import MlpSpec, init_mlp, mlp_forward, predict_logits
from ckd.tensor import Tensor


def pixel_pattern():
    return bytes(k % 256 for k in range(D.PIXEL_BYTES))


def fixture_blob():
    return bytes([3, 97]) + pixel_pattern() + bytes([0, 0]) + pixel_pattern()


class TestMlp:
    def test_deterministic(self):
        a, b = init_mlp(MlpSpec((16, 64, 8), seed=5)), init_mlp(MlpSpec((16, 64, 8), seed=5))
        assert all(x.values.tobytes() == y.values.tobytes() for x, y in zip(a, b))
        c = init_mlp(MlpSpec((16, 64, 8), seed=6))
        assert a[0].values.tobytes() != c[0].values.tobytes()

    def test_shapes(self):
        p = init_mlp(MlpSpec((4, 3)))
        assert [q.shape for q in p] == [(4, 3), (3,)]
        assert MlpSpec((16, 12, 8)).param_shapes() == [(16, 12), (12,), (12, 8), (8,)]

    def test_he_variance(self):
        w = init_mlp(MlpSpec((64, 157), seed=1))[0].values.ravel()[:10_000]
        assert w.size == 10_000
        assert abs(w.var() - 2 / 64) < 0.1 * 2 / 64
        assert abs(w.mean()) < 0.01

    def test_hidden_biases_zero(self):
        p = init_mlp(MlpSpec((5, 7, 6, 3)))
        assert not p[1].values.any() and not p[3].values.any()
        assert np.abs(p[5].values).max() < 1e-2

    def test_invalid_spec(self):
        with pytest.raises(ValueError):
            MlpSpec((4,))

    def test_zero_net(self):
        params = [Tensor(np.zeros((3, 2))), Tensor(np.zeros(2))]
        assert not mlp_forward(params, Tensor(np.ones((4, 3)))).values.any()

    def test_single_layer_affine(self, rng):
        w, b, x = rng.normal(size=(3, 2)), rng.normal(size=2), rng.normal(size=(5, 3))
        np.testing.assert_allclose(mlp_forward([Tensor(w), Tensor(b)], Tensor(x)).values, x @ w + b, atol=1e-14)

    def test_relu_between_layers(self, rng):
        p = init_mlp(MlpSpec((3, 4, 2), seed=3))
        x = rng.normal(size=(6, 3))
        h = np.maximum(x @ p[0].values + p[1].values, 0)
        np.testing.assert_allclose(mlp_forward(p, Tensor(x)).values, h @ p[2].values + p[3].values, atol=1e-14)
        np.testing.assert_array_equal(predict_logits(p, x), mlp_forward(p, Tensor(x)).values)

    def test_gradcheck(self, rng):
        p = init_mlp(MlpSpec((4, 5, 3), seed=2))
        x = rng.normal(size=(6, 4))
        arrays = [q.values for q in p]
        err = max_relative_error(lambda ps: (mlp_forward(ps, Tensor(x)) * Tensor(np.arange(18.).reshape(6, 3))).sum(),
                                 arrays)
        assert err < 1e-4

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            mlp_forward(init_mlp(MlpSpec((4, 2))), Tensor(np.ones((1, 5))))

    @given(st.integers(1, 8), st.integers(0, 2**32 - 1))
    def test_output_shape_finite(self, b, seed):
        rng = np.random.default_rng(seed)
        p = init_mlp(MlpSpec((6, 9, 4), seed=seed))
        out = mlp_forward(p, Tensor(rng.uniform(-1e3, 1e3, size=(b, 6)))).values
        assert out.shape == (b, 4) and np.all(np.isfinite(out))


class TestSynthetic:
    def test_balance_and_sizes(self):
        train, test = D.generate_synthetic(D.SyntheticSpec(class_count=5, per_class=12, dim=3))
        assert np.bincount(train.labels).tolist() == [12] * 5
        assert np.bincount(test.labels).tolist() == [math.ceil(12 / 5)] * 5
        assert train.features.shape == (60, 3)

    def test_deterministic(self):
        s = D.SyntheticSpec(class_count=3, per_class=4, dim=2, seed=9)
        a, b = D.generate_synthetic(s)[0], D.generate_synthetic(s)[0]
        assert a.features.tobytes() == b.features.tobytes()
        assert D.generate_synthetic(D.SyntheticSpec(class_count=3, per_class=4, dim=2, seed=10))[0] \
            .features.tobytes() != a.features.tobytes()

    def test_tiny_noise_nearest_center(self):
        train, _ = D.generate_synthetic(D.SyntheticSpec(class_count=6, per_class=20, dim=4, noise_sigma=1e-9))
        centers = np.stack([train.features[train.labels == k].mean(axis=0) for k in range(6)])
        dist = ((train.features[:, None, :] - centers[None]) ** 2).sum(-1)
        assert (dist.argmin(axis=1) == train.labels).all()

    def test_centers_in_range(self):
        train, _ = D.generate_synthetic(D.SyntheticSpec(class_count=4, per_class=50, dim=3, center_scale=2.0,
                                                        noise_sigma=1e-9))
        assert np.abs(train.features).max() <= 2.0

    @pytest.mark.parametrize("kw", [dict(class_count=1), dict(per_class=1), dict(dim=1), dict(noise_sigma=0)])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            D.SyntheticSpec(**kw)

    def test_ckds_round_trip(self, tmp_path):
        train, _ = D.generate_synthetic(D.SyntheticSpec(class_count=3, per_class=5, dim=4))
        D.write_synthetic(train, tmp_path / "x.ckds")
        blob = (tmp_path / "x.ckds").read_bytes()
        assert blob[:4] == b"CKDS" and len(blob) == 16 + 15 * 4 * 8 + 15 * 2
        back = D.read_synthetic(tmp_path / "x.ckds")
        assert back.features.tobytes() == train.features.tobytes()
        assert back.labels.tolist() == train.labels.tolist() and back.class_count == 3

    def test_ckds_bad(self, tmp_path):
        (tmp_path / "bad").write_bytes(b"XXXX" + bytes(12))
        with pytest.raises(D.DataFormatError):
            D.read_synthetic(tmp_path / "bad")
        (tmp_path / "short").write_bytes(b"CKDS" + bytes(12) + b"\x00")
        with pytest.raises(D.DataFormatError):
            D.read_synthetic(tmp_path / "short")

    def test_dataset_immutable_and_validated(self):
        ds = D.Dataset(np.zeros((2, 2)), [0, 1], 2)
        with pytest.raises(ValueError):
            ds.features[0, 0] = 1.0
        with pytest.raises(ValueError):
            D.Dataset(np.zeros((2, 2)), [0, 2], 2)


class TestCifar:
    def test_empty(self):
        assert D.parse_cifar100(b"") == []

    def test_fixture_round_trip(self):
        blob = fixture_blob()
        recs = D.parse_cifar100(blob)
        assert [(r.coarse_label, r.fine_label) for r in recs] == [(3, 97), (0, 0)]
        assert recs[0].pixels == pixel_pattern()
        assert D.serialize_cifar100(recs) == blob

    def test_truncated(self):
        with pytest.raises(D.TruncatedRecordError) as exc:
            D.parse_cifar100(bytes(3073))
        assert exc.value.offset == 0
        with pytest.raises(D.TruncatedRecordError) as exc:
            D.parse_cifar100(fixture_blob() + b"\x01")
        assert exc.value.offset == 2 * 3074

    def test_corrupt_label(self):
        blob = bytearray(fixture_blob())
        blob[3074 + 1] = 100
        with pytest.raises(D.CorruptRecordError) as exc:
            D.parse_cifar100(bytes(blob))
        assert exc.value.offset == 3074

    @given(st.lists(st.tuples(st.integers(0, 19), st.integers(0, 99), st.binary(min_size=3072, max_size=3072)),
                    max_size=4))
    def test_round_trip_property(self, items):
        recs = [D.CifarRecord(c, f, p) for c, f, p in items]
        blob = D.serialize_cifar100(recs)
        assert len(blob) == 3074 * len(recs)
        assert D.parse_cifar100(blob) == recs

    def test_to_dataset_normalization(self):
        recs = D.parse_cifar100(fixture_blob())
        ds = D.cifar_to_dataset(recs)
        assert ds.features.shape == (2, 3072) and ds.labels.tolist() == [97, 0]
        # first G-plane byte is 1024 % 256 == 0
        assert ds.features[0, 1024] == pytest.approx((0.0 - D.CIFAR100_MEAN[1]) / D.CIFAR100_STD[1])
        assert ds.features[0, 255] == pytest.approx((1.0 - D.CIFAR100_MEAN[0]) / D.CIFAR100_STD[0])

    def test_load_directory(self, tmp_path):
        (tmp_path / "train.bin").write_bytes(fixture_blob())
        (tmp_path / "test.bin").write_bytes(fixture_blob()[:3074])
        train, test = D.load_cifar100(tmp_path)
        assert len(train) == 2 and len(test) == 1


class TestBatchIter:
    def _data(self, n):
        return D.Dataset(np.zeros((n, 2)), np.zeros(n, int), 2)

    def test_single_batch(self):
        batches = list(D.batch_iter(self._data(10), 10, 0, 0))
        assert len(batches) == 1 and sorted(batches[0].tolist()) == list(range(10))

    def test_drop_last(self):
        batches = list(D.batch_iter(self._data(10), 3, 0, 0))
        assert len(batches) == 3 and all(len(b) == 3 for b in batches)
        assert len(set(np.concatenate(batches).tolist())) == 9

    def test_deterministic_and_fresh(self):
        d = self._data(50)
        a = np.concatenate(list(D.batch_iter(d, 5, 3, 1)))
        assert a.tolist() == np.concatenate(list(D.batch_iter(d, 5, 3, 1))).tolist()
        assert a.tolist() != np.concatenate(list(D.batch_iter(d, 5, 3, 2))).tolist()

    @pytest.mark.parametrize("b", [0, 11])
    def test_bad_size(self, b):
        with pytest.raises(ValueError):
            list(D.batch_iter(self._data(10), b, 0, 0))
