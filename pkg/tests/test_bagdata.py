import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from milhard.bagdata import (
    BACKGROUND,
    CONFUSER,
    WITNESS,
    Bag,
    BagSizeStats,
    Dataset,
    SynthConfig,
    append_bags,
    bag_size_stats,
    generate_synthetic,
    kfold_split,
    load_bags,
    save_bags,
)
from milhard.errors import BagFormatError, ConfigError, DimensionError

from conftest import make_dataset


class TestBag:
    def test_rejects_empty_and_bad_label(self):
        with pytest.raises(DimensionError):
            Bag("a", 0, np.empty((0, 3)))
        with pytest.raises(ConfigError):
            Bag("a", 2, np.ones((1, 3)))
        with pytest.raises(ConfigError):
            Bag("a", 0, np.ones((1, 3)), origin="stolen")

    def test_instances_are_read_only(self):
        b = Bag("a", 1, np.ones((2, 2)))
        with pytest.raises(ValueError):
            b.instances[0, 0] = 5.0

    def test_dataset_invariants(self):
        a = Bag("a", 0, np.ones((1, 3)))
        with pytest.raises(BagFormatError):
            Dataset((), 3)
        with pytest.raises(DimensionError):
            Dataset((a, Bag("b", 0, np.ones((1, 2)))), 3)
        with pytest.raises(BagFormatError, match="duplicate"):
            Dataset((a, Bag("a", 1, np.ones((1, 3)))), 3)


class TestSizeStats:
    def test_constant(self):
        s = bag_size_stats(make_dataset([4, 4, 4]))
        assert (s.mu, s.sigma, s.z_min, s.z_max) == (4, 0, 4, 4)

    def test_population_std(self):
        s = bag_size_stats(make_dataset([2, 4, 6]))
        assert s.mu == 4
        assert s.sigma == pytest.approx(np.sqrt(8 / 3), abs=1e-12)
        assert round(s.sigma, 5) == 1.63299
        assert (s.z_min, s.z_max) == (2, 6)

    def test_singleton(self):
        s = bag_size_stats(make_dataset([7]))
        assert (s.mu, s.sigma) == (7, 0)

    def test_invalid(self):
        with pytest.raises(ConfigError):
            BagSizeStats(3.0, -1.0, 1, 5)
        with pytest.raises(ConfigError):
            BagSizeStats(3.0, 1.0, 4, 2)


class TestSynthetic:
    def test_label_count_and_witnesses(self):
        ds, kinds = generate_synthetic(SynthConfig(n_bags=100, positive_fraction=0.5, seed=3), return_kinds=True)
        assert ds.labels.sum() == 50
        for bag, k in zip(ds, kinds):
            if bag.label == 1:
                assert (k == WITNESS).any()
            else:
                assert not (k == WITNESS).any()

    def test_negative_bags_hold_confusers(self):
        ds, kinds = generate_synthetic(SynthConfig(confuser_rate=0.3, seed=1), return_kinds=True)
        assert any((k == CONFUSER).any() for b, k in zip(ds, kinds) if b.label == 0)

    def test_no_confusers_by_distance_scan(self):
        cfg = SynthConfig(confuser_rate=0.0, seed=5)
        ds = generate_synthetic(cfg)
        _, confuser, _ = cfg.resolved_means()
        for bag in ds:
            if bag.label == 0:
                d = np.linalg.norm(bag.instances - confuser, axis=1)
                assert d.min() > 3 * cfg.cluster_spread

    def test_instances_scatter_around_means(self):
        cfg = SynthConfig(n_bags=200, seed=2, cluster_spread=0.7)
        ds, kinds = generate_synthetic(cfg, return_kinds=True)
        means = cfg.resolved_means()
        x = np.concatenate([b.instances for b in ds])
        k = np.concatenate(kinds)
        for kind in (WITNESS, CONFUSER, BACKGROUND):
            resid = x[k == kind] - means[kind]
            assert np.abs(resid.mean(axis=0)).max() < 0.25
            assert resid.std() == pytest.approx(0.7, rel=0.05)

    def test_deterministic(self, tmp_path):
        cfg = SynthConfig(n_bags=20, seed=9)
        save_bags(generate_synthetic(cfg), tmp_path / "a.jsonl")
        save_bags(generate_synthetic(cfg), tmp_path / "b.jsonl")
        assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()

    @pytest.mark.parametrize("field, value", [("positive_fraction", 1.0), ("confuser_rate", -0.1),
                                              ("cluster_spread", 0.0), ("bag_size_range", (0, 3)),
                                              ("n_bags", 0)])
    def test_invalid_config_names_field(self, field, value):
        with pytest.raises(ConfigError) as err:
            generate_synthetic(SynthConfig(**{field: value}))
        assert err.value.field == field


class TestPersistence:
    def test_round_trip(self, tmp_path):
        ds = generate_synthetic(SynthConfig(n_bags=3, seed=0))
        save_bags(ds, tmp_path / "d.jsonl")
        assert load_bags(tmp_path / "d.jsonl") == ds

    def test_mixed_dims(self, tmp_path):
        p = tmp_path / "d.jsonl"
        p.write_text('{"feature_dim": 2}\n'
                     '{"bag_id": "a", "label": 0, "instances": [[1, 2]]}\n'
                     '{"bag_id": "b", "label": 1, "instances": [[1, 2, 3]]}\n')
        with pytest.raises(DimensionError, match="line 3"):
            load_bags(p)

    def test_empty_file(self, tmp_path):
        p = tmp_path / "d.jsonl"
        p.write_text("")
        with pytest.raises(BagFormatError, match="empty dataset"):
            load_bags(p)

    def test_malformed_line_number(self, tmp_path):
        p = tmp_path / "d.jsonl"
        p.write_text('{"feature_dim": 1}\n{"bag_id": "a", "label": 0, "instances": [[1]]}\n{oops\n')
        with pytest.raises(BagFormatError) as err:
            load_bags(p)
        assert err.value.line == 3

    def test_append_keeps_header(self, tmp_path):
        p = tmp_path / "d.jsonl"
        a = Bag("a", 0, np.ones((2, 4)))
        b = Bag("b", 1, np.zeros((1, 4)))
        append_bags([a], p, 4, "first", patch_shape=(2, 2, 1))
        append_bags([b], p, 4, "ignored")
        ds = load_bags(p)
        assert [x.bag_id for x in ds] == ["a", "b"]
        assert ds.provenance == "first"
        assert ds.patch_shape == (2, 2, 1)
        assert json.loads(p.read_text().splitlines()[0])["feature_dim"] == 4
        with pytest.raises(DimensionError):
            append_bags([Bag("c", 0, np.ones((1, 3)))], p, 3)


class TestKFold:
    def test_partition(self):
        ds = make_dataset([2] * 100)
        folds = kfold_split(ds, 10, seed=0)
        tests = [{b.bag_id for b in te} for _, te in folds]
        assert all(len(t) == 10 for t in tests)
        assert set().union(*tests) == {b.bag_id for b in ds}
        assert sum(len(t) for t in tests) == 100
        for tr, te in folds:
            assert not {b.bag_id for b in tr} & {b.bag_id for b in te}

    def test_uneven_sizes(self):
        ds = make_dataset([1] * 58)
        sizes = sorted(len(te) for _, te in kfold_split(ds, 4, seed=1))
        assert sizes == [14, 14, 15, 15]

    @pytest.mark.parametrize("seed", range(5))
    def test_stratified(self, seed):
        ds = make_dataset([1] * 100, labels=[1] * 50 + [0] * 50)
        for _, te in kfold_split(ds, 10, seed):
            assert 4 <= te.labels.sum() <= 6

    def test_too_many_folds(self):
        with pytest.raises(ConfigError):
            kfold_split(make_dataset([1] * 3), 4, 0)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(0, 1), min_size=2, max_size=40), st.integers(2, 6), st.integers(0, 2**32 - 1))
def test_kfold_properties(labels, k, seed):
    if k > len(labels):
        k = len(labels)
    ds = make_dataset([1] * len(labels), labels=labels)
    folds = kfold_split(ds, k, seed)
    sizes = [len(te) for _, te in folds]
    assert max(sizes) - min(sizes) <= 1
    n_pos = sum(labels)
    for _, te in folds:
        # class counts per fold stay within one of the even share
        assert abs(te.labels.sum() - n_pos / k) < 1 + 1e-9
