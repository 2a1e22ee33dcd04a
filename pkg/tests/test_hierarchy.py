import numpy as np
import pytest

from fedscope import hierarchy as hi
from fedscope import numerics as nx
from fedscope import synthdata as sd
from fedscope.errors import ConfigurationError, ValidationError
from fedscope.fedcore import StrategyConfig, TrainConfig
from fedscope.seeding import derive_seed, rng_for
from fedscope.telemetry import evaluate


@pytest.fixture
def small_setup(small_dataset):
    train, val, test = sd.split(small_dataset, seed=1)
    shards = sd.partition(train, 3, seed=2)
    return train, val, test, shards


@pytest.fixture
def trained(small_setup):
    train, val, test, shards = small_setup
    plans = hi.plan_sessions(train, shards, hi.HierarchyConfig(rounds=3, router_hidden=(8,), specialist_hidden=(8,)))
    res = hi.train_hierarchy(plans, StrategyConfig(), TrainConfig(epochs=2, batch_size=8), seed=4, val=val,
                             diseases=train.spec.diseases)
    return res, test


class TestPlans:
    def test_every_client_everywhere_when_iid(self, small_setup):
        train, _, _, shards = small_setup
        plans = hi.plan_sessions(train, shards, hi.HierarchyConfig(rounds=1))
        assert [p.session for p in plans] == [hi.ROUTER, 0, 1]
        for p in plans:
            assert p.client_ids == (0, 1, 2)

    def test_participation_matches_brute_force(self, small_setup):
        train, _, _, shards = small_setup
        shards = list(shards)
        # drop all group-1 samples from client 1
        keep = shards[1].indices[train.groups[shards[1].indices] != 1]
        shards[1] = sd.ClientShard(1, keep)
        plans = hi.plan_sessions(train, shards, hi.HierarchyConfig(rounds=1))
        for p in plans[1:]:
            expected = tuple(s.client_id for s in shards if np.any(train.groups[s.indices] == p.session))
            assert p.client_ids == expected
        assert plans[2].client_ids == (0, 2)
        assert plans[1].client_ids == (0, 1, 2)

    def test_group_labels_are_within_group(self, small_setup):
        train, _, _, shards = small_setup
        plans = hi.plan_sessions(train, shards, hi.HierarchyConfig(rounds=1))
        for p in plans[1:]:
            labels = np.concatenate([y for _, _, y in p.shards])
            assert labels.max() == train.spec.diseases[p.session] - 1
            assert p.spec.n_classes == train.spec.diseases[p.session]
        assert plans[0].spec.n_classes == train.spec.n_groups

    def test_default_shape_gives_five_plans(self):
        ds = sd.generate(sd.DatasetSpec(samples_per_class=30, side=4))
        train, _, _ = sd.split(ds, seed=0)
        plans = hi.plan_sessions(train, sd.partition(train, 10, seed=0), hi.HierarchyConfig(rounds=1))
        assert len(plans) == 5

    def test_group_without_samples(self, small_setup):
        train, _, _, shards = small_setup
        emptied = [sd.ClientShard(s.client_id, s.indices[train.groups[s.indices] != 0]) for s in shards]
        with pytest.raises(ConfigurationError, match="group 0"):
            hi.plan_sessions(train, emptied, hi.HierarchyConfig(rounds=1))

    def test_negative_rounds(self):
        with pytest.raises(ValidationError):
            hi.HierarchyConfig(rounds=-1)


class TestTraining:
    def test_zero_rounds_is_initialization(self, small_setup):
        train, _, _, shards = small_setup
        plans = hi.plan_sessions(train, shards, hi.HierarchyConfig(rounds=0))
        res = hi.train_hierarchy(plans, StrategyConfig(), TrainConfig(), seed=11)
        for plan, params in zip(plans, (res.model.router, *res.model.specialists)):
            init = nx.init_params(plan.spec, rng_for(derive_seed(11, "session", plan.name), "init"))
            assert params.equals(init)
        assert len(res.ledger) == 0 and res.round_log == []

    def test_deterministic(self, small_setup):
        train, _, _, shards = small_setup
        plans = hi.plan_sessions(train, shards, hi.HierarchyConfig(rounds=2, router_hidden=(4,), specialist_hidden=(4,)))
        a = hi.train_hierarchy(plans, StrategyConfig("fedavgm"), TrainConfig(epochs=1), seed=3)
        b = hi.train_hierarchy(plans, StrategyConfig("fedavgm"), TrainConfig(epochs=1), seed=3, workers=3)
        assert hi.model_to_bytes(a.model) == hi.model_to_bytes(b.model)

    def test_session_order_and_log(self, trained):
        res, _ = trained
        sessions = [r["session"] for r in res.round_log]
        assert sessions == ["router"] * 3 + ["group0"] * 3 + ["group1"] * 3
        energies = [r["cum_energy_wh"] for r in res.round_log]
        assert energies == sorted(energies)
        assert all(0 <= r["val_acc"] <= 1 for r in res.round_log)


class TestPrediction:
    def test_tie_goes_to_lowest_index(self):
        zero = lambda spec: nx.ParamSet.zeros(spec)  # noqa: E731
        r = nx.ModelSpec(4, (), 3)
        s = nx.ModelSpec(4, (), 2)
        model = hi.HierarchicalModel(zero(r), r, (zero(s),) * 3, (s,) * 3, (2, 2, 2))
        assert hi.predict(model, np.ones(4)) == (0, 0)

    def test_single_disease_group_is_padded(self):
        r = nx.ModelSpec(2, (), 2)
        s = nx.ModelSpec(2, (), 2)
        bias = nx.ParamSet([(np.zeros((2, 2)), np.array([0.0, 5.0]))])
        model = hi.HierarchicalModel(bias, r, (bias, bias), (s, s), (1, 2))
        # router picks group 1 -> disease 1; forcing group 0 must still return disease 0
        assert hi.predict(model, np.zeros(2)) == (1, 1)
        g, d = hi.predict_batch(model, np.zeros((1, 2)), groups=[0])
        assert (g[0], d[0]) == (0, 0)

    def test_end_to_end_not_above_router(self, trained):
        res, test = trained
        m, _ = evaluate(res.model, test)
        g_pred, _ = hi.predict_batch(res.model, test.images)
        router_acc = float(np.mean(g_pred == test.groups))
        assert m["accuracy"] <= router_acc

    def test_oracle_router_is_weighted_specialist_accuracy(self, trained):
        res, test = trained
        m, _ = evaluate(res.model, test, oracle_router=True)
        correct = 0
        for g in range(test.spec.n_groups):
            sel = test.groups == g
            logits = nx.forward(res.model.specialists[g], hi.model_input(test.images[sel]))[:, :test.spec.diseases[g]]
            correct += int(np.sum(np.argmax(logits, axis=1) == test.diseases[sel]))
        assert m["accuracy"] == correct / len(test)


class TestSerialization:
    def test_roundtrip(self, trained, tmp_path):
        res, _ = trained
        path = tmp_path / "m.fshm"
        hi.save_model(res.model, path, {"seed": 4})
        back = hi.load_model(path)
        assert back.equals(res.model)
        assert back.specialist_specs == res.model.specialist_specs
        assert path.read_bytes()[:4] == b"FSHM"

    def test_bad_magic(self, trained, tmp_path):
        res, _ = trained
        path = tmp_path / "m.fshm"
        hi.save_model(res.model, path)
        path.write_bytes(b"XXXX" + path.read_bytes()[4:])
        with pytest.raises(ValidationError):
            hi.load_model(path)
