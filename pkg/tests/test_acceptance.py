"""Acceptance suite: one test per criterion, at the stated tolerances.

Each test prints a `ACCEPTANCE <n> <name>: PASS` line on success (visible
with `pytest -s`; the per-test pass/fail lines of `pytest -v` mirror them).
Expected values come from oracles implemented here, independent of the
library code paths they check.
"""

import time

import numpy as np
import pytest

from wudi.calibration import load_calibration
from wudi.checkpoint import Checkpoint, TensorEntry, load_checkpoint, save_checkpoint
from wudi.cli import main as cli_main
from wudi.diagnostics import check_interference_bound, relative_interference
from wudi.errors import SingularMatrixError
from wudi.solver import (
    LayerProblem,
    loss,
    loss_gradient,
    merge,
    solve_baseline,
    solve_closed_form,
    solve_gd,
)
from wudi.synth import (
    LAYER1,
    LAYER2,
    apply_prefixes,
    four_task_family,
    premise_fixture,
    verify_input_consistency,
    verify_reconstruction,
)
from wudi.taskvector import MergeConfig
from wudi.tensorops import frobenius_norm_sq


def report(number, name):
    print(f"ACCEPTANCE {number} {name}: PASS")


def rel_fnorm(a, b):
    return float(np.sqrt(frobenius_norm_sq(a - b) / frobenius_norm_sq(b)))


def f32_entry(values):
    values = np.asarray(values, dtype=np.float32).astype(np.float64)
    return TensorEntry("F32", values.shape, values)


def test_c01_gradient_correctness():
    """Analytic gradient vs central differences, 1e-6 relative, < 10 s."""
    start = time.perf_counter()
    rng = np.random.default_rng(101)
    h = 1e-5
    for _ in range(100):
        rows = int(rng.integers(2, 17))
        cols = int(rng.integers(2, 33))
        tasks = int(rng.integers(1, 6))
        problem = LayerProblem([rng.standard_normal((rows, cols)) for _ in range(tasks)])
        tau_m = rng.standard_normal((rows, cols))
        grad = loss_gradient(problem, tau_m)
        fd = np.zeros_like(grad)
        for i in range(rows):
            for j in range(cols):
                bump = np.zeros_like(tau_m)
                bump[i, j] = h
                fd[i, j] = (
                    loss(problem, tau_m + bump) - loss(problem, tau_m - bump)
                ) / (2 * h)
        assert rel_fnorm(fd, grad) <= 1e-6
    elapsed = time.perf_counter() - start
    assert elapsed < 10.0, f"took {elapsed:.1f}s"
    report(1, "gradient-correctness")


def test_c02_closed_form_optimality():
    """Stationarity residual <= 1e-8 * (1 + ||B||_F), < 5 s."""
    start = time.perf_counter()
    rng = np.random.default_rng(102)
    omegas = (1e-6, 1e-2, 1.0)
    for k in range(100):
        omega = omegas[k % 3]
        rows = int(rng.integers(2, 13))
        cols = int(rng.integers(2, 13))
        tasks = int(rng.integers(1, 5))
        problem = LayerProblem([rng.standard_normal((rows, cols)) for _ in range(tasks)])
        tau_m = solve_closed_form(problem, omega)
        eye = np.eye(cols)
        a = np.zeros((cols, cols))
        b = np.zeros((rows, cols))
        for t, w in zip(problem.taus, problem.weights):
            gram = t.T @ t + omega * eye
            a += w * gram
            b += w * t @ gram
        resid = float(np.sqrt(frobenius_norm_sq(tau_m @ a - b)))
        assert resid <= 1e-8 * (1.0 + np.sqrt(frobenius_norm_sq(b)))
    elapsed = time.perf_counter() - start
    assert elapsed < 5.0, f"took {elapsed:.1f}s"
    report(2, "closed-form-optimality")


def test_c03_hand_derived_fixtures():
    """The three small closed-form oracles reproduce exactly (<= 1e-12)."""
    # orthogonal row spans: the merged vector is the plain sum
    got = solve_closed_form(
        LayerProblem([np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]])]), omega=0.0
    )
    assert np.max(np.abs(got - np.array([[1.0, 1.0]]))) <= 1e-12

    # balanced weights {1, 1/2}: A = [[1.5, .5], [.5, .5]], B = [2, 1],
    # hand inverse A^-1 = [[1, -1], [-1, 3]] gives [1, 1]
    got = solve_closed_form(
        LayerProblem([np.array([[1.0, 0.0]]), np.array([[1.0, 1.0]])], balanced=True),
        omega=0.0,
    )
    assert np.max(np.abs(got - np.array([[1.0, 1.0]]))) <= 1e-12

    # opposed tasks: the aggregated Gram is rank deficient
    with pytest.raises(SingularMatrixError):
        solve_closed_form(
            LayerProblem([np.array([[1.0, 0.0]]), np.array([[-1.0, 0.0]])]), omega=0.0
        )
    report(3, "hand-derived-fixtures")


def test_c04_gd_cfs_agreement():
    """Adam (2000 steps, lr 1e-2) within 1e-2 of the closed form, < 30 s."""
    start = time.perf_counter()
    rng = np.random.default_rng(42)
    for _ in range(20):
        problem = LayerProblem([rng.standard_normal((4, 6)) for _ in range(3)])
        reference = solve_closed_form(problem, omega=1e-8)
        solution, _ = solve_gd(problem, steps=2000, lr=1e-2)
        assert rel_fnorm(solution, reference) <= 1e-2
    elapsed = time.perf_counter() - start
    assert elapsed < 30.0, f"took {elapsed:.1f}s"
    report(4, "gd-cfs-agreement")


def test_c05_equivariances():
    """Scale, row-permutation, right-orthogonal equivariance, 50 each."""
    rng = np.random.default_rng(105)

    for _ in range(50):
        problem = LayerProblem([rng.standard_normal((4, 6)) for _ in range(3)])
        base = solve_closed_form(problem, omega=0.0)
        c = float(rng.uniform(0.1, 10.0))
        scaled = solve_closed_form(LayerProblem([c * t for t in problem.taus]), omega=0.0)
        assert rel_fnorm(scaled, c * base) <= 1e-9

    for _ in range(50):
        problem = LayerProblem([rng.standard_normal((4, 6)) for _ in range(3)])
        base = solve_closed_form(problem, omega=0.0)
        perm = rng.permutation(4)
        permuted = solve_closed_form(LayerProblem([t[perm] for t in problem.taus]), omega=0.0)
        assert rel_fnorm(permuted, base[perm]) <= 1e-12
        gd_base, _ = solve_gd(problem, steps=40, lr=1e-2)
        gd_perm, _ = solve_gd(LayerProblem([t[perm] for t in problem.taus]), steps=40, lr=1e-2)
        assert np.max(np.abs(gd_perm - gd_base[perm])) <= 1e-6

    for _ in range(50):
        problem = LayerProblem([rng.standard_normal((4, 6)) for _ in range(3)])
        base = solve_closed_form(problem, omega=0.0)
        q, _ = np.linalg.qr(rng.standard_normal((6, 6)))
        rotated = solve_closed_form(LayerProblem([t @ q for t in problem.taus]), omega=0.0)
        assert rel_fnorm(rotated, base @ q) <= 1e-8
    report(5, "equivariances")


def test_c06_interference_bound():
    """The bound holds on 200 random instances, zero violations, < 10 s."""
    start = time.perf_counter()
    rng = np.random.default_rng(106)
    for _ in range(200):
        d_in = int(rng.integers(2, 13))
        tau = rng.standard_normal((int(rng.integers(2, 9)), d_in))
        delta = rng.standard_normal((int(rng.integers(2, 9)), d_in))
        samples = [rng.standard_normal(d_in) for _ in range(int(rng.integers(3, 12)))]
        result = check_interference_bound(tau, delta, samples)
        assert result.satisfied, f"lhs={result.lhs} rhs={result.rhs}"
    elapsed = time.perf_counter() - start
    assert elapsed < 10.0, f"took {elapsed:.1f}s"
    report(6, "interference-bound")


def test_c07_premise_verification():
    """Input drift below the stored threshold; reconstruction direction, < 60 s."""
    start = time.perf_counter()
    calibration = load_calibration()
    seeds = calibration["config"]["seeds"]
    assert len(seeds) == 20
    directions = []
    wins = 0
    for seed in seeds:
        _, trace = premise_fixture(seed)
        directions.append(verify_input_consistency(trace).delta_direction)
        comparison = verify_reconstruction(trace)
        wins += comparison.median_true < comparison.median_random
    assert float(np.median(directions)) < calibration["delta_direction_threshold"]
    assert wins >= 18, f"reconstruction wins {wins}/20"
    elapsed = time.perf_counter() - start
    assert elapsed < 60.0, f"took {elapsed:.1f}s"
    report(7, "premise-verification")


def test_c08_interference_reduction():
    """WUDI-GD beats task arithmetic and averaging in >= 18/20 seeds, < 120 s."""
    start = time.perf_counter()
    wins_ta = wins_avg = 0
    for seed in range(20):
        bundle = four_task_family(seed)
        theta = {name: bundle.pretrained.values(name) for name in (LAYER1, LAYER2)}
        taus = [trace.task_vector() for trace in bundle.traces]
        merged = {"wudi": {}, "ta": {}, "avg": {}}
        for name in (LAYER1, LAYER2):
            mats = [tv[name] for tv in taus]
            merged["wudi"][name], _ = solve_gd(LayerProblem(mats), steps=1000, lr=1e-3)
            merged["ta"][name] = solve_baseline(mats, "task_arithmetic", 1.0)
            merged["avg"][name] = solve_baseline(mats, "average")
        finals = {}
        for method, tau_m in merged.items():
            per_task = []
            for i, trace in enumerate(bundle.traces):
                samples = list(bundle.tasks[i].inputs())
                rep = relative_interference(apply_prefixes, theta, tau_m, taus[i], samples)
                per_task.append(rep.per_depth[-1])
            finals[method] = float(np.mean(per_task))
        wins_ta += finals["wudi"] < finals["ta"]
        wins_avg += finals["wudi"] < finals["avg"]
    assert wins_ta >= 18, f"beat task arithmetic in {wins_ta}/20 seeds"
    assert wins_avg >= 18, f"beat averaging in {wins_avg}/20 seeds"
    elapsed = time.perf_counter() - start
    assert elapsed < 120.0, f"took {elapsed:.1f}s"
    report(8, "interference-reduction")


def _expert_pair(tmp_path):
    rng = np.random.default_rng(109)
    names = ["blk1.weight", "blk2.weight"]
    pretrained = Checkpoint({n: f32_entry(rng.standard_normal((6, 4))) for n in names})
    expert = Checkpoint(
        {n: f32_entry(pretrained.values(n) + 0.1 * rng.standard_normal((6, 4))) for n in names}
    )
    p_path = tmp_path / "p.safetensors"
    e_path = tmp_path / "e.safetensors"
    save_checkpoint(pretrained, p_path)
    save_checkpoint(expert, e_path)
    return p_path, e_path


def test_c09_single_expert_identity(tmp_path):
    """One expert, any method, eps=1: expert bits return after round-trip."""
    p_path, e_path = _expert_pair(tmp_path)
    pretrained = load_checkpoint(p_path)
    expert = load_checkpoint(e_path)
    for method in ("wudi-gd", "wudi-cfs", "average", "task-arith"):
        cfg = MergeConfig(method=method, epsilon=1.0, steps=30, learning_rate=1e-3, omega=0.0)
        merged, _ = merge(pretrained, [expert], cfg)
        out = tmp_path / f"m_{method}.safetensors"
        save_checkpoint(merged, out)
        back = load_checkpoint(out)
        for name in ("blk1.weight", "blk2.weight"):
            got = back.values(name).astype(np.float32).view(np.uint32)
            want = expert.values(name).astype(np.float32).view(np.uint32)
            assert np.array_equal(got, want), (method, name)
    report(9, "single-expert-identity")


def test_c10_determinism_across_threads(tmp_path):
    """Identical merged bytes for --threads 1 and --threads 8."""
    rng = np.random.default_rng(110)
    names = ["blk1.weight", "blk2.weight", "norm.weight"]
    shapes = {"blk1.weight": (6, 4), "blk2.weight": (4, 6), "norm.weight": (4,)}
    pretrained = Checkpoint({n: f32_entry(rng.standard_normal(shapes[n])) for n in names})
    p_path = tmp_path / "p.safetensors"
    save_checkpoint(pretrained, p_path)
    expert_paths = []
    for k in range(3):
        expert = Checkpoint(
            {n: f32_entry(pretrained.values(n) + 0.1 * rng.standard_normal(shapes[n]))
             for n in names}
        )
        path = tmp_path / f"e{k}.safetensors"
        save_checkpoint(expert, path)
        expert_paths.append(path)
    blobs = []
    for threads in (1, 8):
        out = tmp_path / f"merged_t{threads}.safetensors"
        argv = ["--threads", str(threads), "merge", "--pretrained", str(p_path)]
        for path in expert_paths:
            argv += ["--expert", str(path)]
        argv += ["--out", str(out), "--method", "wudi-gd", "--steps", "100", "--lr", "1e-3"]
        assert cli_main(argv) == 0
        blobs.append(out.read_bytes())
    assert blobs[0] == blobs[1]
    report(10, "determinism-across-threads")


def test_c11_checkpoint_io_fidelity(tmp_path):
    """f32/f64 bitwise round-trip; every finite f16 pattern survives."""
    rng = np.random.default_rng(111)
    tensors = {
        "a.weight": f32_entry(rng.standard_normal((5, 3))),
        "b.weight": TensorEntry("F64", (3, 7), rng.standard_normal((3, 7))),
    }
    ck = Checkpoint(tensors, metadata={"fixture": "io"})
    path = tmp_path / "io.safetensors"
    save_checkpoint(ck, path)
    back = load_checkpoint(path)
    for name in ck.names():
        assert back.entry(name).dtype == ck.entry(name).dtype
        assert np.array_equal(
            back.values(name).view(np.uint64), ck.values(name).view(np.uint64)
        )

    bits = np.arange(2**16, dtype=np.uint16)
    finite = bits[(bits & 0x7C00) != 0x7C00]  # drop NaN/Inf exponents
    values = finite.view(np.float16)
    upcast = values.astype(np.float64)
    ck16 = Checkpoint({"h": TensorEntry("F16", upcast.shape, upcast)})
    path16 = tmp_path / "f16.safetensors"
    save_checkpoint(ck16, path16)
    back16 = load_checkpoint(path16)
    got_bits = back16.values("h").astype(np.float16).view(np.uint16)
    assert np.array_equal(got_bits, finite)
    report(11, "checkpoint-io-fidelity")
