import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spurlab import metrics, nn
from spurlab import scenario as sc


class TestOmega:
    def test_mean_example(self):
        assert metrics.omega([0.5, 0.7, 0.9]) == pytest.approx(0.7)

    def test_single_entry(self):
        assert metrics.omega([0.42]) == pytest.approx(0.42)

    def test_constant_trace(self):
        assert metrics.omega([0.6] * 7) == pytest.approx(0.6)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            metrics.omega([])

    @settings(max_examples=40)
    @given(st.lists(st.floats(0, 1), min_size=1, max_size=20))
    def test_permutation_invariant_and_bounded(self, vals):
        om = metrics.omega(vals)
        rng = np.random.default_rng(0)
        assert om == pytest.approx(metrics.omega(list(rng.permutation(vals))))
        assert min(vals) - 1e-12 <= om <= max(vals) + 1e-12


def const_model(n_classes=2, dim=3, winner=0):
    w = np.zeros((n_classes, dim))
    b = np.zeros(n_classes)
    b[winner] = 1.0
    return nn.ModelParams(trunk=[], heads=[nn.Head(kind=nn.LINEAR, weight=w, bias=b)])


def samples_for(labels, dim=3):
    return [sc.Sample(x=np.arange(dim, dtype=float) + y, y=int(y), mode_id=int(y)) for y in labels]


class TestAccuracy:
    def test_constant_predictor_on_balanced_data(self):
        model = const_model(winner=0)
        assert metrics.accuracy(model, samples_for([0, 1, 0, 1])) == pytest.approx(0.5)

    def test_single_correct_sample(self):
        model = const_model(winner=1)
        assert metrics.accuracy(model, samples_for([1])) == 1.0

    def test_mask_restricts_classes(self):
        # logits favor class 2 globally, but a mask against {0, 1} hides it
        w = np.zeros((3, 3))
        b = np.array([0.5, 0.0, 9.0])
        model = nn.ModelParams(trunk=[], heads=[nn.Head(kind=nn.LINEAR, weight=w, bias=b)])
        data = samples_for([0, 0])
        assert metrics.accuracy(model, data) == 0.0
        mask = np.array([True, True, False])
        assert metrics.accuracy(model, data, class_mask=mask) == 1.0

    def test_tie_breaks_to_lowest_index(self):
        model = const_model(winner=-1)  # all-zero logits
        model.heads[0].bias[:] = 0.0
        assert metrics.accuracy(model, samples_for([0])) == 1.0
        assert metrics.accuracy(model, samples_for([1])) == 0.0

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            metrics.accuracy(const_model(), [])


class TestRunRecordIO:
    def test_csv_round_trip(self):
        rec = metrics.RunRecord(run_id="r1", seed=0)
        rec.add(0, 1, "clean_test", "accuracy", 0.75)
        rec.add(1, 0, "train", "loss", 0.125)
        back = metrics.RunRecord.from_csv(rec.to_csv())
        assert back.run_id == "r1"
        assert back.entries == rec.entries

    def test_post_task_accuracies_keep_latest(self):
        rec = metrics.RunRecord(run_id="r", seed=0)
        rec.add(0, 4, "clean_test", "accuracy", 0.5)
        rec.add(1, 4, "clean_test", "accuracy", 0.7)
        assert rec.post_task_accuracies() == [0.5, 0.7]


class TestOverfitReport:
    def test_pairs_by_task(self):
        rec = metrics.RunRecord(run_id="r", seed=0)
        rec.add(0, 9, "clean_test", "accuracy", 0.52)
        rec.add(0, 9, "eval_spurious_0", "accuracy", 0.99)
        rec.add(1, 9, "clean_test", "accuracy", 0.61)
        rec.add(1, 9, "eval_spurious_0", "accuracy", 0.80)
        rec.add(1, 9, "eval_spurious_1", "accuracy", 0.97)
        rep = metrics.overfit_report(rec)
        assert rep == [(0.99, 0.52), (0.97, 0.61)]

    def test_missing_split_rejected(self):
        rec = metrics.RunRecord(run_id="r", seed=0)
        rec.add(0, 9, "clean_test", "accuracy", 0.5)
        with pytest.raises(ValueError, match="eval_spurious_0"):
            metrics.overfit_report(rec)


def ci_scenario(seed=0, n_train=300, n_test=150, n_tasks=5):
    return sc.build_class_incremental_scenario(
        sc.SynthSpec(n_train=n_train, n_test=n_test), n_tasks, seed)


class TestProtocol:
    def test_single_task_gap_is_zero(self):
        scen = sc.build_class_incremental_scenario(
            sc.SynthSpec(modes_per_class=1, n_train=60, n_test=40), 1, seed=0)
        trunk = metrics.make_random_projection_trunk(20, 16, seed=0)
        rep = metrics.local_spurious_protocol(scen, trunk,
                                              metrics.ProtocolConfig(epochs_per_task=2))
        for hg in rep.heads.values():
            assert hg.gap == pytest.approx(0.0, abs=1e-12)

    def test_overlapping_classes_rejected(self):
        scen = ci_scenario(n_train=20, n_test=10)
        scen.tasks[1] = sc.TaskData(task_id=1, train=scen.tasks[0].train,
                                    eval_spurious=scen.tasks[0].eval_spurious,
                                    classes=scen.tasks[0].classes, class_modes={},
                                    feature_params=np.zeros((2, 0)))
        trunk = metrics.make_random_projection_trunk(20, 16, seed=0)
        with pytest.raises(ValueError, match="reuses classes"):
            metrics.local_spurious_protocol(scen, trunk, metrics.ProtocolConfig(epochs_per_task=1))

    def test_masked_accuracy_dominates_global_per_task(self):
        scen = ci_scenario(seed=1, n_train=120, n_test=60)
        trunk = metrics.make_random_projection_trunk(20, 24, seed=1)
        rep = metrics.local_spurious_protocol(scen, trunk,
                                              metrics.ProtocolConfig(epochs_per_task=3, seed=1))
        for hg in rep.heads.values():
            for loc, glo in zip(hg.per_task_local, hg.per_task_global):
                assert loc >= glo - 1e-12

    def test_frozen_heads_bit_identical(self):
        scen = ci_scenario(seed=2, n_train=100, n_test=50)
        trunk = metrics.make_random_projection_trunk(20, 24, seed=2)
        rep = metrics.local_spurious_protocol(scen, trunk,
                                              metrics.ProtocolConfig(epochs_per_task=3, seed=2))
        assert rep.frozen_rows_intact

    def test_meanlayer_gap_below_linear_gap(self):
        # trained heads pick within-task directions; the fitted mean head
        # only pays the 10-way-vs-2-way difficulty cost
        gaps = {"linear": [], "meanlayer": [], "weightnorm": []}
        for seed in range(3):
            scen = ci_scenario(seed=seed, n_train=400, n_test=200)
            trunk = metrics.make_random_projection_trunk(20, 64, seed=seed)
            rep = metrics.local_spurious_protocol(
                scen, trunk, metrics.ProtocolConfig(epochs_per_task=10, seed=seed))
            for k, hg in rep.heads.items():
                gaps[k].append(hg.gap)
        assert np.mean(gaps["linear"]) > np.mean(gaps["meanlayer"])

    def test_deterministic(self):
        scen = ci_scenario(seed=3, n_train=80, n_test=40)
        trunk = metrics.make_random_projection_trunk(20, 16, seed=3)
        cfg = metrics.ProtocolConfig(epochs_per_task=2, seed=3)
        a = metrics.local_spurious_protocol(scen, trunk, cfg)
        b = metrics.local_spurious_protocol(scen, trunk, cfg)
        assert a.to_json_dict() == b.to_json_dict()
        assert a.freeze_digests == b.freeze_digests
