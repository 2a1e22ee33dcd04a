import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedscope import numerics as nx
from fedscope import synthdata as sd
from fedscope.errors import ValidationError


def labelled(class_sizes, side=2):
    """Dataset with the given per-class sizes; one disease per group."""
    spec = sd.DatasetSpec(diseases=(1,) * len(class_sizes) if len(class_sizes) > 1 else (2,), side=side)
    groups = np.concatenate([np.full(n, c) for c, n in enumerate(class_sizes)]).astype(np.int64)
    if len(class_sizes) == 1:
        diseases, groups = groups.copy(), np.zeros_like(groups)
    else:
        diseases = np.zeros_like(groups)
    n = groups.size
    return sd.Dataset(spec, np.zeros((n, side * side)), groups, diseases, np.arange(n, dtype=np.int64))


class TestGenerate:
    def test_deterministic(self, small_spec):
        a, b = sd.generate(small_spec), sd.generate(small_spec)
        assert a.images.tobytes() == b.images.tobytes()
        assert np.array_equal(a.classes, b.classes)

    def test_zero_noise_gives_prototypes(self, small_spec):
        spec = sd.DatasetSpec(**{**small_spec.to_dict(), "noise": 0.0})
        ds = sd.generate(spec)
        protos = sd.prototypes(spec).astype(np.float32).astype(np.float64)
        for c in range(spec.n_classes):
            assert np.all(ds.images[ds.classes == c] == protos[c])

    def test_neighbouring_diseases_differ_in_one_cue(self):
        spec = sd.DatasetSpec(diseases=(3,), side=8)
        p = sd.prototypes(spec)
        # 1 -> 2 is a pure intensity step, 0 -> 1 a zero-level pattern change
        assert np.allclose(p[2] - p[1], spec.margin * sd.LEVEL_STEP, atol=1e-12)
        assert not np.allclose(p[1] - p[0], (p[1] - p[0]).mean())

    def test_pixels_in_unit_range(self, small_dataset):
        assert small_dataset.images.min() >= 0 and small_dataset.images.max() <= 1

    def test_labels(self, small_dataset, small_spec):
        assert len(small_dataset) == small_spec.n_classes * small_spec.samples_per_class
        assert set(small_dataset.classes.tolist()) == set(range(small_spec.n_classes))
        assert small_dataset.diseases[small_dataset.groups == 0].max() == 1

    @pytest.mark.parametrize("bad", [{"diseases": ()}, {"diseases": (0, 2)}, {"diseases": (1,)},
                                     {"margin": 0.0}])
    def test_invalid_spec(self, bad):
        with pytest.raises(ValidationError):
            sd.DatasetSpec(**bad)

    def test_groups_shorthand(self):
        spec = sd.DatasetSpec.from_dict({"groups": 3, "diseases": 2})
        assert spec.diseases == (2, 2, 2)
        with pytest.raises(ValidationError, match="groups"):
            sd.DatasetSpec.from_dict({"groups": 0})

    def test_full_shape(self):
        spec = sd.DatasetSpec.full_shape()
        assert (spec.n_groups, spec.n_classes) == (14, 38)

    def test_linear_router_is_accurate(self):
        """A centrally trained linear model separates the default groups (seed 0)."""
        ds = sd.generate(sd.DatasetSpec(seed=0))
        train, _, test = sd.split(ds, seed=0)
        spec = nx.ModelSpec(ds.spec.n_pixels, (), ds.spec.n_groups)
        p = nx.init_params(spec, np.random.default_rng(0))
        state = nx.AdamState.init(p, nx.AdamHyper(lr=1e-2))
        order_rng = np.random.default_rng(1)
        for _ in range(10):
            order = order_rng.permutation(len(train))
            for s in range(0, len(train), 64):
                idx = order[s:s + 64]
                g = nx.gradient(p, train.images[idx], train.groups[idx], 0.0)
                p, state = nx.adam_step(state, p, g)
        acc = np.mean(np.argmax(nx.forward(p, test.images), axis=1) == test.groups)
        assert acc >= 0.95


class TestSplit:
    def test_exact_fractions(self):
        tr, va, te = sd.split(labelled([100]), seed=1)
        assert (len(tr), len(va), len(te)) == (70, 15, 15)

    def test_largest_remainder(self):
        # quotas 7, 1.5, 1.5: the tied remainder goes to validation
        tr, va, te = sd.split(labelled([10]), seed=1)
        assert (len(tr), len(va), len(te)) == (7, 2, 1)

    def test_disjoint_exhaustive_stratified(self, small_dataset):
        parts = sd.split(small_dataset, seed=3)
        ids = np.concatenate([p.ids for p in parts])
        assert np.array_equal(np.sort(ids), small_dataset.ids)
        for c in range(small_dataset.spec.n_classes):
            assert [int(np.sum(p.classes == c)) for p in parts] == [14, 3, 3]

    def test_order_independent(self, small_dataset):
        perm = np.random.default_rng(0).permutation(len(small_dataset))
        a = sd.split(small_dataset, seed=5)
        b = sd.split(small_dataset.subset(perm), seed=5)
        for pa, pb in zip(a, b):
            assert set(pa.ids.tolist()) == set(pb.ids.tolist())

    def test_tiny_class_rejected(self):
        with pytest.raises(ValidationError):
            sd.split(labelled([2, 10]), seed=0)

    def test_bad_fractions(self, small_dataset):
        with pytest.raises(ValidationError):
            sd.split(small_dataset, (0.5, 0.3, 0.3))


class TestPartition:
    def test_even(self):
        shards = sd.partition(labelled([300, 300]), 10, seed=0)
        train = labelled([300, 300])
        for s in shards:
            assert [int(np.sum(train.classes[s.indices] == c)) for c in (0, 1)] == [30, 30]

    def test_remainder_to_lowest_ids(self):
        shards = sd.partition(labelled([7]), 3, seed=0)
        assert [len(s) for s in shards] == [3, 2, 2]

    def test_single_client(self, small_dataset):
        (shard,) = sd.partition(small_dataset, 1, seed=0)
        assert np.array_equal(shard.indices, np.arange(len(small_dataset)))

    def test_warns_when_clients_exceed_class(self):
        with pytest.warns(UserWarning):
            sd.partition(labelled([3, 10]), 5, seed=0)

    def test_order_independent(self, small_dataset):
        perm = np.random.default_rng(2).permutation(len(small_dataset))
        permuted = small_dataset.subset(perm)
        a = sd.partition(small_dataset, 4, seed=9)
        b = sd.partition(permuted, 4, seed=9)
        for sa, sb in zip(a, b):
            assert set(small_dataset.ids[sa.indices].tolist()) == set(permuted.ids[sb.indices].tolist())

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.integers(1, 60), min_size=1, max_size=5), st.integers(1, 20), st.integers(0, 2**32 - 1))
    def test_invariants(self, sizes, n_clients, seed):
        train = labelled(sizes)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            shards = sd.partition(train, n_clients, seed)
        all_idx = np.concatenate([s.indices for s in shards])
        assert np.array_equal(np.sort(all_idx), np.arange(len(train)))
        for c in range(len(sizes)):
            counts = [int(np.sum(train.classes[s.indices] == c)) for s in shards]
            assert max(counts) - min(counts) <= 1


class TestCorrupt:
    def img(self, value=0.6, side=8):
        return np.full(side * side, value)

    def test_translate_zero_offset_is_identity(self, rng):
        sq = rng.random((8, 8))
        assert np.array_equal(sd.translate(sq, 0, 0), sq)

    def test_uc5_zero_shift_is_identity(self, monkeypatch, rng):
        monkeypatch.setitem(sd.RECIPES, "UC5", {"max_shift_frac": 0.0})
        x = rng.random(64)
        assert np.array_equal(sd.corrupt(x, "UC5", 3), x)

    def test_uc4_quantization(self):
        assert sd.quantize(0.51, 16) == pytest.approx(8 / 15, abs=1e-15)
        out = sd.corrupt(np.full(16, 0.51), "UC4", 0)
        assert out[0] == pytest.approx(8 / 15 + 0.05, abs=1e-12) or out[0] == pytest.approx(8 / 15 - 0.05, abs=1e-12)
        assert np.all(out == out[0])

    def test_uc2_affine_without_noise(self, monkeypatch):
        monkeypatch.setitem(sd.RECIPES, "UC2", {**sd.RECIPES["UC2"], "noise_sigma": 0.0})
        out = sd.corrupt(self.img(0.6), "UC2", 0)
        # 0.8 * (x - 0.15 - 0.5) + 0.5
        assert np.allclose(out, 0.8 * 0.6 - 0.15 * 0.8 + 0.1, atol=1e-15)

    def test_uc1_constant_image(self):
        out = sd.corrupt(self.img(0.5), "UC1", 0)
        assert np.allclose(out, 0.6)

    def test_uc3_box_blur(self):
        sq = np.zeros((5, 5))
        sq[2, 2] = 0.9
        out = sd.corrupt(sq.ravel(), "UC3", 0).reshape(5, 5)
        assert out[2, 2] == pytest.approx(0.1)
        assert out[1, 1] == pytest.approx(0.1)
        assert out[0, 0] == 0

    @pytest.mark.parametrize("uc", list(sd.RECIPES))
    def test_range_and_determinism(self, uc, rng):
        x = rng.random(100)
        a = sd.corrupt(x, uc, 11)
        assert a.min() >= 0 and a.max() <= 1
        assert a.tobytes() == sd.corrupt(x, uc, 11).tobytes()

    def test_unknown_use_case(self):
        with pytest.raises(ValidationError):
            sd.corrupt(self.img(), "UC9", 0)

    def test_corrupt_dataset_uses_sample_ids(self, small_dataset):
        perm = np.random.default_rng(0).permutation(len(small_dataset))
        a = sd.corrupt_dataset(small_dataset, "UC2", 4)
        b = sd.corrupt_dataset(small_dataset.subset(perm), "UC2", 4)
        assert np.array_equal(a.images[perm], b.images)


class TestFileFormat:
    def test_roundtrip(self, small_dataset, tmp_path):
        path = tmp_path / "d.fsds"
        manifest = sd.save(small_dataset, path)
        back = sd.load(path)
        assert back.images.tobytes() == small_dataset.images.tobytes()
        assert np.array_equal(back.classes, small_dataset.classes)
        assert back.spec == small_dataset.spec
        assert manifest["seed"] == small_dataset.spec.seed
        raw = path.read_bytes()
        assert raw[:4] == b"FSDS"

    def test_rejects_foreign_file(self, tmp_path):
        p = tmp_path / "x.fsds"
        p.write_bytes(b"NOPE" + bytes(20))
        with pytest.raises(ValidationError):
            sd.load(p)
