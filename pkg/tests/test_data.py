from collections import Counter

import numpy as np
import pytest

from fedsmooth.data import (
    CsvFormatError,
    LabeledDataset,
    PartitionSpec,
    generate_synthetic,
    label_entropy,
    largest_remainder,
    load_csv,
    partition_dirichlet,
    partition_iid,
    sample_dirichlet,
    save_csv,
    split_train_val,
    standardize,
)
from fedsmooth.model import Batch, ModelSpec, forward, loss_and_grads


def sample_multiset(parts):
    out = Counter()
    for ds in parts:
        for x, y in zip(ds.features, ds.labels):
            out[(x.tobytes(), int(y))] += 1
    return out


@pytest.fixture
def pool(rng):
    return generate_synthetic(600, 6, 5, 3.0, rng)


class TestSynthetic:
    def test_one_sample_per_class(self, rng):
        ds = generate_synthetic(4, 3, 4, 2.0, rng)
        assert sorted(ds.labels.tolist()) == [0, 1, 2, 3]

    def test_deterministic(self):
        a = generate_synthetic(50, 4, 3, 2.0, np.random.default_rng(9))
        b = generate_synthetic(50, 4, 3, 2.0, np.random.default_rng(9))
        assert a.fingerprint() == b.fingerprint()

    def test_preconditions(self, rng):
        with pytest.raises(ValueError):
            generate_synthetic(3, 4, 4, 1.0, rng)
        with pytest.raises(ValueError):
            generate_synthetic(10, 1, 2, 1.0, rng)

    def _fit(self, ds, steps, lr):
        spec = ModelSpec(input_dim=ds.dim, num_classes=ds.class_count)
        w = np.zeros((ds.class_count, ds.dim))
        batch = Batch(ds.features, ds.labels)
        for _ in range(steps):
            _, (g,) = loss_and_grads(spec, [w], batch)
            w -= lr * g
        return spec, w

    def test_well_separated_is_learnable(self, rng):
        ds = generate_synthetic(400, 8, 4, 10.0, rng)
        spec, w = self._fit(ds, 200, 0.5)
        acc = np.mean(np.argmax(forward(spec, [w], Batch(ds.features, ds.labels)), axis=1) == ds.labels)
        assert acc > 0.95

    def test_no_separation_is_chance(self, rng):
        train = generate_synthetic(2000, 8, 4, 0.0, rng)
        test = generate_synthetic(2000, 8, 4, 0.0, rng)
        spec, w = self._fit(train, 100, 0.5)
        acc = np.mean(np.argmax(forward(spec, [w], Batch(test.features, test.labels)), axis=1) == test.labels)
        sd = np.sqrt(0.25 * 0.75 / 2000)
        assert abs(acc - 0.25) < 3 * sd


class TestCsv:
    def test_two_rows(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("1.0,2.0,0\n3.0,4.0,1")
        ds = load_csv(p)
        assert (len(ds), ds.dim, ds.class_count) == (2, 2, 2)

    def test_header_and_crlf(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_bytes(b"a,b,label\r\n1.5,2,3\r\n0,0,0\r\n")
        ds = load_csv(p)
        np.testing.assert_array_equal(ds.features, [[1.5, 2.0], [0.0, 0.0]])
        assert ds.class_count == 4

    def test_round_trip(self, tmp_path, rng):
        ds = generate_synthetic(30, 3, 3, 1.0, rng)
        save_csv(ds, tmp_path / "x.csv")
        back = load_csv(tmp_path / "x.csv")
        np.testing.assert_array_equal(back.features, ds.features)
        np.testing.assert_array_equal(back.labels, ds.labels)

    def test_bad_cell_names_line(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("1,2,0\n1,x,1\n")
        with pytest.raises(CsvFormatError, match="line 2"):
            load_csv(p)

    @pytest.mark.parametrize("text", ["", "f1,label\n", "1,2,0\n1,2\n", "1,0.5\n", "1,-1\n"])
    def test_malformed(self, tmp_path, text):
        p = tmp_path / "d.csv"
        p.write_text(text)
        with pytest.raises(CsvFormatError):
            load_csv(p)

    def test_standardize(self, rng):
        ds = LabeledDataset(rng.standard_normal((50, 3)) * 4 + 2, np.zeros(50, dtype=int), 1)
        z = standardize(ds).features
        np.testing.assert_allclose(z.mean(axis=0), 0.0, atol=1e-12)
        np.testing.assert_allclose(z.std(axis=0), 1.0, atol=1e-12)


class TestIid:
    def test_single_client(self, pool, rng):
        (only,) = partition_iid(pool, 1, rng)
        assert sample_multiset([only]) == sample_multiset([pool])

    def test_sizes(self, rng):
        ds = generate_synthetic(10, 2, 2, 1.0, rng)
        assert sorted(len(s) for s in partition_iid(ds, 3, rng)) == [3, 3, 4]

    def test_multiset_preserved(self, pool, rng):
        assert sample_multiset(partition_iid(pool, 7, rng)) == sample_multiset([pool])

    def test_too_many_clients(self, rng):
        with pytest.raises(ValueError):
            partition_iid(generate_synthetic(4, 2, 2, 1.0, rng), 5, rng)


class TestDirichlet:
    def test_marginal_mean(self):
        rng = np.random.default_rng(0)
        k, beta = 5, 0.5
        draws = np.array([sample_dirichlet(beta, k, rng) for _ in range(10_000)])
        np.testing.assert_allclose(draws.sum(axis=1), 1.0, atol=1e-12)
        # Beta(beta, (k-1) beta) marginal
        a, b = beta, (k - 1) * beta
        var = a * b / ((a + b) ** 2 * (a + b + 1))
        se = np.sqrt(var / 10_000)
        assert np.all(np.abs(draws.mean(axis=0) - 1.0 / k) < 3 * se)

    def test_largest_remainder(self):
        np.testing.assert_array_equal(largest_remainder(10, np.array([0.33, 0.33, 0.34])), [3, 3, 4])
        np.testing.assert_array_equal(largest_remainder(7, np.array([0.5, 0.5])), [4, 3])
        assert largest_remainder(13, np.array([0.1, 0.2, 0.7])).sum() == 13

    def test_concentrated_at_large_beta(self):
        rng = np.random.default_rng(1)
        ds = generate_synthetic(10_000, 4, 5, 1.0, rng)
        shards = partition_dirichlet(ds, 5, 1e6, rng)
        for shard in shards:
            share = shard.class_counts() / ds.class_counts()
            np.testing.assert_allclose(share, 0.2, rtol=0.1)

    def test_skew_lowers_entropy(self, pool):
        skew = partition_dirichlet(pool, 5, 0.1, np.random.default_rng(2))
        iid = partition_iid(pool, 5, np.random.default_rng(2))
        assert np.mean([label_entropy(s) for s in skew]) < np.mean([label_entropy(s) for s in iid])

    def test_partition_property(self, pool):
        shards = partition_dirichlet(pool, 5, 0.1, np.random.default_rng(3))
        assert sample_multiset(shards) == sample_multiset([pool])
        assert sum(len(s) for s in shards) == len(pool)

    def test_no_empty_shards(self, rng):
        ds = generate_synthetic(20, 2, 2, 1.0, rng)
        for seed in range(20):
            shards = partition_dirichlet(ds, 8, 0.01, np.random.default_rng(seed))
            assert all(len(s) >= 1 for s in shards)
            assert sample_multiset(shards) == sample_multiset([ds])

    def test_deterministic(self, pool):
        a = partition_dirichlet(pool, 4, 0.3, np.random.default_rng(5))
        b = partition_dirichlet(pool, 4, 0.3, np.random.default_rng(5))
        assert [s.fingerprint() for s in a] == [s.fingerprint() for s in b]

    def test_spec_validation(self):
        with pytest.raises(ValueError):
            PartitionSpec(kind="dirichlet", beta=0.0)
        with pytest.raises(ValueError):
            PartitionSpec(kind="shards")


class TestSplit:
    def test_sizes(self, rng):
        ds = generate_synthetic(100, 2, 2, 1.0, rng)
        train, val = split_train_val(ds, 0.8, rng)
        assert (len(train), len(val)) == (80, 20)
        assert sample_multiset([train, val]) == sample_multiset([ds])

    def test_two_samples(self, rng):
        ds = generate_synthetic(2, 2, 2, 1.0, rng)
        train, val = split_train_val(ds, 0.5, rng)
        assert (len(train), len(val)) == (1, 1)

    def test_empty_side(self, rng):
        with pytest.raises(ValueError):
            split_train_val(generate_synthetic(2, 2, 2, 1.0, rng), 0.9, rng)
        with pytest.raises(ValueError):
            split_train_val(generate_synthetic(2, 2, 2, 1.0, rng), 1.0, rng)


class TestEntropy:
    def test_uniform_and_pure(self):
        ds = LabeledDataset(np.zeros((4, 1)), np.array([0, 1, 2, 3]), 4)
        assert label_entropy(ds) == pytest.approx(np.log(4))
        assert label_entropy(ds.subset([1, 1, 1])) == 0.0
