import numpy as np
import pytest

from wudi.errors import DivergenceError
from wudi.synth import (
    LAYER1,
    LAYER2,
    FineTuneConfig,
    SynthTask,
    apply_prefixes,
    finetune,
    four_task_family,
    load_trace_jsonl,
    matched_random_matrix,
    premise_fixture,
    pretrain,
    save_trace_jsonl,
    task_family,
    verify_input_consistency,
    verify_reconstruction,
)


def default_setup(seed=0, **task_kwargs):
    pre = pretrain(seed, (8, 16, 4))
    task = SynthTask(seed=seed + 1000, **task_kwargs)
    return pre, task


class TestPretrain:
    def test_deterministic(self):
        a = pretrain(7, (4, 8, 2))
        b = pretrain(7, (4, 8, 2))
        for name in a.names():
            assert np.array_equal(a.values(name), b.values(name))

    def test_seeds_differ(self):
        a = pretrain(7, (4, 8, 2))
        b = pretrain(8, (4, 8, 2))
        assert not np.array_equal(a.values(LAYER1), b.values(LAYER1))

    def test_shape_contract(self):
        ck = pretrain(0, (4, 8, 2))
        assert ck.entry(LAYER1).shape == (8, 4)
        assert ck.entry(LAYER2).shape == (2, 8)


class TestFineTune:
    def test_zero_rate_schedule_is_a_no_op(self):
        pre, task = default_setup()
        cfg = FineTuneConfig(iterations=3, learning_rate=0.0)
        expert, trace = finetune(pre, task, cfg)
        for name in pre.names():
            assert np.array_equal(expert.values(name), pre.values(name))
            assert np.array_equal(trace.task_vector()[name], np.zeros_like(pre.values(name)))

    def test_single_step_identity(self):
        pre, task = default_setup()
        eta = 1e-3
        _, trace = finetune(pre, task, FineTuneConfig(iterations=1, learning_rate=eta))
        for name in pre.names():
            # one full-batch step: the task vector is -eta times the gradient
            # the step used, up to the rounding of (theta - eta*g) - theta
            tau = trace.task_vector()[name]
            acc = -trace.grad_sums[name]
            scale = max(np.max(np.abs(pre.values(name))), 1.0)
            assert np.max(np.abs(tau - acc)) <= 1e-15 * scale

    def test_default_config_halves_loss(self):
        pre, task = default_setup()
        _, trace = finetune(pre, task, FineTuneConfig())
        assert trace.losses[-1] < 0.5 * trace.losses[0]

    def test_accumulated_gradient_identity(self):
        pre, task = default_setup(seed=3)
        _, trace = finetune(pre, task, FineTuneConfig(iterations=50))
        for name in pre.names():
            tau = trace.task_vector()[name]
            acc = -trace.grad_sums[name]
            scale = max(np.max(np.abs(tau)), 1.0)
            assert np.max(np.abs(tau - acc)) <= 1e-9 * scale

    def test_deterministic_traces(self):
        pre, task = default_setup(seed=4)
        _, t1 = finetune(pre, task, FineTuneConfig(iterations=20))
        _, t2 = finetune(pre, task, FineTuneConfig(iterations=20))
        assert np.array_equal(t1.layer2_inputs, t2.layer2_inputs)
        assert t1.losses == t2.losses

    def test_teacher_recoverable_with_long_schedule(self):
        pre, task = default_setup(seed=5)
        _, trace = finetune(pre, task, FineTuneConfig(iterations=6000, learning_rate=3e-3))
        assert trace.losses[-1] < 1e-2 * trace.losses[0]

    def test_divergence_detected(self):
        pre, task = default_setup(seed=6)
        with pytest.raises(DivergenceError):
            finetune(pre, task, FineTuneConfig(iterations=200, learning_rate=10.0))

    def test_gradient_self_check_runs(self):
        pre, task = default_setup(seed=7)
        finetune(pre, task, FineTuneConfig(iterations=1), self_check=True)


class TestInputDrift:
    def test_no_op_schedule_has_zero_drift(self):
        pre, task = default_setup(seed=8)
        _, trace = finetune(pre, task, FineTuneConfig(iterations=2, learning_rate=0.0))
        report = verify_input_consistency(trace)
        assert report.delta_direction == 0.0
        assert report.delta_magnitude == 0.0

    def test_longer_hotter_schedules_do_not_drift_less(self):
        base, hot = [], []
        for seed in range(8):
            pre, task = default_setup(seed=seed)
            _, t1 = finetune(pre, task, FineTuneConfig(iterations=50, learning_rate=1e-3))
            _, t2 = finetune(pre, task, FineTuneConfig(iterations=100, learning_rate=2e-3))
            base.append(verify_input_consistency(t1).delta_direction)
            hot.append(verify_input_consistency(t2).delta_direction)
        assert np.median(hot) >= np.median(base)


class TestReconstructionComparison:
    def test_span_membership(self):
        rng = np.random.default_rng(9)
        from wudi.diagnostics import reconstruct_input

        tau = rng.standard_normal((6, 12))
        x = tau.T @ rng.standard_normal(6)
        assert reconstruct_input(tau, x).relative_residual <= 1e-8

    def test_single_row_orthogonal_input(self):
        from wudi.diagnostics import reconstruct_input

        tau = np.array([[1.0, 0.0, 0.0]])
        res = reconstruct_input(tau, np.array([0.0, 1.0, 0.0]))
        assert res.relative_residual == pytest.approx(1.0, abs=1e-12)

    def test_true_task_vector_beats_matched_random(self):
        _, trace = premise_fixture(0)
        comparison = verify_reconstruction(trace)
        assert comparison.true_below_random

    def test_matched_random_preserves_row_moments(self):
        rng = np.random.default_rng(10)
        tau = rng.standard_normal((4, 200)) * np.array([[1.0], [2.0], [3.0], [4.0]])
        rand = matched_random_matrix(tau, seed=1)
        for k in range(4):
            assert np.mean(rand[k]) == pytest.approx(np.mean(tau[k]), abs=0.5 * (k + 1))
            assert np.std(rand[k]) == pytest.approx(np.std(tau[k]), rel=0.25)


class TestFamilies:
    def test_family_is_deterministic(self):
        a = four_task_family(0)
        b = four_task_family(0)
        for expert_a, expert_b in zip(a.experts, b.experts):
            for name in expert_a.names():
                assert np.array_equal(expert_a.values(name), expert_b.values(name))

    def test_tasks_differ_within_family(self):
        bundle = task_family(1, num_tasks=3)
        t0 = bundle.traces[0].task_vector()[LAYER1]
        t1 = bundle.traces[1].task_vector()[LAYER1]
        assert not np.allclose(t0, t1)

    def test_prefix_evaluator_shapes(self):
        bundle = four_task_family(2)
        params = {name: bundle.pretrained.values(name) for name in (LAYER1, LAYER2)}
        x = bundle.tasks[0].inputs()[0]
        outs = apply_prefixes(params, x)
        assert outs[0].shape == (params[LAYER1].shape[0],)
        assert outs[1].shape == (params[LAYER2].shape[0],)


class TestTraceSerialization:
    def test_jsonl_round_trip(self, tmp_path):
        pre, task = default_setup(seed=11)
        _, trace = finetune(pre, task, FineTuneConfig(iterations=5))
        path = tmp_path / "trace.jsonl"
        save_trace_jsonl(trace, path)
        header, inputs = load_trace_jsonl(path)
        assert header["iterations"] == 5
        assert header["samples"] == task.samples
        assert header["learning_rates"] == [1e-3] * 5
        assert np.allclose(inputs, trace.layer2_inputs, rtol=0, atol=1e-15)
