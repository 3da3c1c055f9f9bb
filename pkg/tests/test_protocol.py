import json

import pytest

from incrlearn.data import concat_datasets, generate_domain, synthetic_domain_spec
from incrlearn.exceptions import ConfigError
from incrlearn.protocol import (
    IncrementPlan,
    IncrementSpec,
    run_plan,
    serialize_logs,
)


def make_dataset(labels=(0, 1, 2, 3), domain_id=0, n=30, dim=8, seed=0, **kw):
    spec = synthetic_domain_spec(
        domain_id, labels=list(labels), dim=dim, samples_per_class=n, seed=seed, **kw
    )
    return generate_domain(spec)


def two_step_plan(epochs=3, **plan_kw):
    incs = (
        IncrementSpec(kind="disease", new_class_ids=(0, 1), domain_id=0, epochs=epochs, seed=1),
        IncrementSpec(kind="disease", new_class_ids=(2, 3), domain_id=0, epochs=epochs, seed=2),
    )
    return IncrementPlan(increments=incs, hidden_sizes=(16, 8), **plan_kw)


class TestSpecValidation:
    def test_unknown_kind(self):
        with pytest.raises(ConfigError):
            IncrementSpec(kind="mystery", new_class_ids=(0,), domain_id=0)

    def test_nonpositive_tau(self):
        with pytest.raises(ConfigError):
            IncrementSpec(kind="disease", new_class_ids=(0,), domain_id=0, tau=0.0)

    def test_negative_weight(self):
        with pytest.raises(ConfigError):
            IncrementSpec(kind="disease", new_class_ids=(0,), domain_id=0, alpha=-0.1)

    def test_class_reuse_across_increments(self):
        incs = (
            IncrementSpec(kind="disease", new_class_ids=(0, 1), domain_id=0),
            IncrementSpec(kind="disease", new_class_ids=(1, 2), domain_id=0),
        )
        with pytest.raises(ConfigError, match="reused"):
            IncrementPlan(increments=incs)

    def test_plan_rejects_unknown_class(self):
        ds = make_dataset(labels=(0, 1))
        plan = IncrementPlan(
            increments=(IncrementSpec(kind="disease", new_class_ids=(0, 9), domain_id=0),)
        )
        with pytest.raises(ConfigError, match="unknown class"):
            run_plan(plan, ds)

    def test_plan_rejects_unknown_domain(self):
        ds = make_dataset(labels=(0, 1))
        plan = IncrementPlan(
            increments=(IncrementSpec(kind="disease", new_class_ids=(0, 1), domain_id=7),)
        )
        with pytest.raises(ConfigError, match="unknown domain"):
            run_plan(plan, ds)

    def test_dataset_increment_rejects_reused_domain(self):
        ds = make_dataset(labels=(0, 1, 2, 3))
        incs = (
            IncrementSpec(kind="disease", new_class_ids=(0, 1), domain_id=0, epochs=1),
            IncrementSpec(kind="dataset", new_class_ids=(2, 3), domain_id=0, epochs=1),
        )
        with pytest.raises(ConfigError, match="reuses"):
            run_plan(IncrementPlan(increments=incs, hidden_sizes=(8,)), ds)

    def test_empty_plan(self):
        logs, state = run_plan(IncrementPlan(increments=()), make_dataset(labels=(0, 1)))
        assert logs == []
        assert state.model.head_size == 0


@pytest.fixture(scope="module")
def run():
    ds = make_dataset()
    return run_plan(two_step_plan(), ds)


class TestRunPlan:
    def test_head_grows_monotonically(self, run):
        logs, state = run
        assert [l.head_size for l in logs] == [2, 4]
        assert state.model.head_size == 4

    def test_all_epochs_logged(self, run):
        logs, _ = run
        assert all(len(l.epochs) == 3 for l in logs)

    def test_combined_loss_identity_each_epoch(self, run):
        logs, _ = run
        for log in logs:
            for e in log.epochs:
                expect = 0.5 * e["l_c"] + 0.25 * e["l_md"] + 0.25 * e["l_d"]
                assert abs(e["l_il"] - expect) <= 1e-9

    def test_first_increment_has_no_old_terms(self, run):
        logs, _ = run
        first = logs[0]
        assert first.forgetting is None
        assert all(e["l_d"] == 0.0 for e in first.epochs)

    def test_second_increment_reports_forgetting(self, run):
        logs, _ = run
        assert logs[1].forgetting is not None
        assert 0.0 <= logs[1].forgetting <= 1.0

    def test_per_class_accuracy_covers_seen_classes(self, run):
        logs, _ = run
        assert set(logs[0].per_class_accuracy) == {0, 1}
        assert set(logs[1].per_class_accuracy) == {0, 1, 2, 3}

    def test_teacher_snapshot_frozen_per_increment(self, run):
        _, state = run
        assert state.teacher is not None
        assert state.teacher.head_size == 4

    def test_exemplar_store_retains_quota(self, run):
        _, state = run
        # floor(0.1 * 24 train samples per class) = 2
        assert sorted(state.store.classes()) == [0, 1, 2, 3]
        for c in state.store.classes():
            assert state.store.count(c) == 2

    def test_metric_rows_schema(self, run):
        logs, _ = run
        for row in logs[1].metric_rows:
            assert {"increment", "domain", "class", "accuracy", "tpr", "ppv", "f1"} <= set(row)


class TestDeterminism:
    def test_identical_serialized_logs(self):
        ds = make_dataset()
        a, _ = run_plan(two_step_plan(), ds)
        b, _ = run_plan(two_step_plan(), ds)
        assert serialize_logs(a) == serialize_logs(b)

    def test_serialization_is_valid_json_without_timing(self):
        ds = make_dataset()
        logs, _ = run_plan(two_step_plan(epochs=1), ds)
        payload = json.loads(serialize_logs(logs))
        assert payload["schema_version"] == 1
        for inc in payload["increments"]:
            assert "wall_time_s" not in inc


class TestAblationArms:
    def test_beta_zero_logs_zero_md(self):
        ds = make_dataset()
        incs = tuple(
            IncrementSpec(
                kind="disease", new_class_ids=ids, domain_id=0, epochs=2, beta=0.0, seed=s
            )
            for ids, s in (((0, 1), 1), ((2, 3), 2))
        )
        logs, _ = run_plan(IncrementPlan(increments=incs, hidden_sizes=(16, 8)), ds)
        assert all(e["l_md"] == 0.0 for log in logs for e in log.epochs)

    def test_md_warmup_delays_posterior_term(self):
        ds = make_dataset()
        logs, _ = run_plan(two_step_plan(epochs=4, md_warmup_epochs=2), ds)
        later = logs[1]
        assert all(e["l_md"] == 0.0 for e in later.epochs[:2])
        assert any(e["l_md"] > 0.0 for e in later.epochs[2:])

    def test_negative_warmup_rejected(self):
        with pytest.raises(ConfigError):
            two_step_plan(md_warmup_epochs=-1)

    def test_no_exemplars_leaves_store_empty(self):
        ds = make_dataset()
        _, state = run_plan(two_step_plan(epochs=1, use_exemplars=False), ds)
        assert state.store.total() == 0

    def test_cumulative_finetune_runs_and_skips_replay(self):
        ds = make_dataset()
        incs = tuple(
            IncrementSpec(
                kind="disease",
                new_class_ids=ids,
                domain_id=0,
                epochs=2,
                alpha=1.0,
                beta=0.0,
                gamma=0.0,
                seed=s,
            )
            for ids, s in (((0, 1), 1), ((2, 3), 2))
        )
        plan = IncrementPlan(increments=incs, hidden_sizes=(16, 8), cumulative=True)
        logs, state = run_plan(plan, ds)
        assert state.store.total() == 0
        assert all(e["l_d"] == 0.0 and e["l_md"] == 0.0 for log in logs for e in log.epochs)
        assert logs[1].head_size == 4


class TestTwoDomainPlan:
    def test_dataset_phase_tracks_both_domains(self):
        d0 = make_dataset(labels=(0, 1), domain_id=0, seed=0)
        d1 = make_dataset(labels=(2, 3), domain_id=1, seed=1, gain=1.3, bias=0.5)
        ds = concat_datasets([d0, d1])
        incs = (
            IncrementSpec(kind="disease", new_class_ids=(0, 1), domain_id=0, epochs=3, seed=1),
            IncrementSpec(kind="dataset", new_class_ids=(2, 3), domain_id=1, epochs=3, seed=2),
        )
        logs, state = run_plan(IncrementPlan(increments=incs, hidden_sizes=(16, 8)), ds)
        assert state.seen_domains == [0, 1]
        assert set(logs[1].per_domain_accuracy) == {0, 1}
        assert set(logs[0].per_domain_accuracy) == {0}
