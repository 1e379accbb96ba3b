"""Acceptance gate: every criterion at its stated tolerance.

Run with ``pytest tests/test_acceptance.py -v -s`` to see one pass/fail line
per criterion. Criteria 9 and 10 train and verify end to end, so this module
takes several minutes.
"""

import time

import numpy as np

from conftest import rel_err
from mfil import backbone as bb
from mfil import theory
from mfil.analysis import VERIFICATION_SEEDS, erf, gradcheck_suite
from mfil.checkpoint import load_checkpoint, load_into, save_checkpoint
from mfil.config import RunConfig
from mfil.scan import SOBEL_X, SOBEL_Y, AdaptiveWeights, adaptive_merge
from mfil.ssm import (SsmCore, causal_conv, discretize_zoh, lti_kernel,
                      scan_recurrent, selective_scan)
from mfil.tensor import Tensor
from mfil.train import compare_scan_modes, train_run
from mfil.verify import run_suites


def _report(num: int, summary: str, passed: bool):
    print(f"\nACCEPTANCE {num:02d} [{'PASS' if passed else 'FAIL'}] "
          f"{summary}")
    assert passed, f"criterion {num}: {summary}"


def test_criterion_01_lti_equivalence():
    rng = np.random.default_rng(101)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(1, 5))
        length = int(rng.integers(1, 65))
        a = -np.exp(rng.standard_normal(n))
        b = rng.standard_normal(n)
        c = rng.standard_normal(n)
        delta = float(np.exp(rng.uniform(np.log(1e-3), 0.0)))
        a_bar, b_bar = discretize_zoh(a, b, delta)
        x = rng.standard_normal(length)
        y_rec = scan_recurrent(a_bar, b_bar, c, x)
        y_conv = causal_conv(x, lti_kernel(a_bar, b_bar, c, length))
        worst = max(worst, rel_err(y_conv, y_rec))
    elapsed = time.perf_counter() - start
    _report(1, f"kernel form == recurrence on 100 systems, worst rel "
               f"{worst:.2e} (tol 1e-6), {elapsed:.1f}s (< 5s)",
            worst <= 1e-6 and elapsed < 5.0)


def test_criterion_02_zoh_correctness():
    a_bar, b_bar = discretize_zoh(-1.0, 1.0, np.log(2.0))
    analytic_err = max(abs(float(a_bar) - 0.5), abs(float(b_bar) - 0.5))
    delta = 1e-12
    a_lim, b_lim = discretize_zoh(np.array([-1.0]), np.array([1.0]), delta)
    limit_err = max(abs(float(a_lim[0]) - 1.0),
                    abs(float(b_lim[0]) - delta) / delta)
    _report(2, f"analytic scalar err {analytic_err:.1e} (tol 1e-12), "
               f"limit-branch rel err {limit_err:.1e} (tol 1e-6)",
            analytic_err <= 1e-12 and limit_err <= 1e-6)


def test_criterion_03_selective_fast_path():
    rng = np.random.default_rng(103)
    worst = 0.0
    for i in range(50):
        bsz = int(rng.integers(1, 3))
        length = int(rng.integers(1, 129))
        ch = int(rng.integers(1, 9))
        nst = int(rng.integers(1, 3))
        core = SsmCore(ch, d_state=nst,
                       rng=np.random.default_rng(1000 + i), dtype="f64",
                       exact_input_discretization=bool(i % 2))
        x = Tensor(rng.standard_normal((bsz, length, ch)))
        fast = selective_scan(x, core).data
        ref = selective_scan(x, core, path="reference").data
        worst = max(worst, rel_err(fast, ref))
    _report(3, f"fast path vs sequential reference on 50 cases, worst rel "
               f"{worst:.2e} (tol 1e-5)", worst <= 1e-5)


def test_criterion_04_gradient_suite():
    start = time.perf_counter()
    worst = 0.0
    all_pass = True
    for seed in VERIFICATION_SEEDS:
        rep = gradcheck_suite(bb.desk(), seed=seed)
        worst = max(worst, max(rep.entries.values()))
        all_pass &= rep.passed
    elapsed = time.perf_counter() - start
    _report(4, f"finite-difference gradients on {len(VERIFICATION_SEEDS)} "
               f"seeds, worst rel {worst:.2e} (tol 1e-4), {elapsed:.0f}s "
               f"(< 180s)", all_pass and worst <= 1e-4 and elapsed < 180.0)


def test_criterion_05_covariance_identities():
    rng = np.random.default_rng(105)
    samples = rng.standard_normal((200, 36))
    moments = theory.empirical_moments(samples)
    kernels = [SOBEL_X, SOBEL_Y, rng.standard_normal((3, 3)),
               np.array([[0.7]]), rng.standard_normal((2, 2))]
    worst = 0.0
    for i in range(20):
        if i % 2 == 0:
            rep = theory.verify_permutation_identity(
                theory.permutation_matrix(rng.permutation(36)),
                theory.permutation_matrix(rng.permutation(36)),
                moments, samples)
        else:
            k_i = kernels[i % len(kernels)]
            k_j = kernels[(i + 2) % len(kernels)]
            rep = theory.verify_filter_identity(
                theory.conv_as_matrix(k_i, 6, 6,
                                      padding=(k_i.shape[0] - 1) // 2),
                theory.conv_as_matrix(k_j, 6, 6,
                                      padding=(k_j.shape[0] - 1) // 2),
                moments, samples)
        worst = max(worst, rep.max_abs_error)
    perm = theory.permutation_matrix(rng.permutation(36))
    sob = theory.conv_as_matrix(SOBEL_X, 6, 6, padding=1)
    spectra = theory.spectrum_report(moments.covariance, perm, sob)
    _report(5, f"20 operator pairs worst max-abs {worst:.2e} (tol 1e-10); "
               f"permutation spectral distance "
               f"{spectra.permutation_distance:.1e} (tol 1e-8); sobel "
               f"distance {spectra.filter_distance:.2e} (> 1e-3)",
            worst <= 1e-10 and spectra.permutation_distance <= 1e-8
            and spectra.filter_distance > 1e-3)


def test_criterion_06_structural_fidelity():
    t, s, b = bb.tiny(), bb.small(), bb.base()
    dims_ok = (t.dims == (94, 188, 376, 752) and t.depths == (1, 3, 8, 2)
               and s.dims == (94, 188, 376, 752)
               and s.depths == (2, 2, 18, 2)
               and b.dims == (128, 256, 512, 1024)
               and b.depths == (2, 2, 18, 2))
    params_ok = all(
        abs(bb.count_params(bb.VARIANTS[name]()) - ref) / ref <= 0.10
        for name, ref in bb.REFERENCE_PARAMS.items())
    flops_ok = all(
        abs(bb.count_flops(bb.VARIANTS[name](), 224, 224) - ref) / ref
        <= 0.20 for name, ref in bb.REFERENCE_FLOPS.items())
    tiny_model = bb.build(t.with_overrides(num_classes=10), seed=0)
    rng = np.random.default_rng(0)
    trace = tiny_model.spatial_trace(Tensor(
        rng.standard_normal((1, 3, 224, 224)).astype(np.float32),
        dtype="f32"))
    trace_ok = trace[:4] == [56, 28, 14, 7]
    _report(6, f"dims/depths exact {dims_ok}; 224 trace {trace[:4]}; "
               f"params within 10% {params_ok}; flops within 20% "
               f"{flops_ok}", dims_ok and params_ok and flops_ok
            and trace_ok)


def test_criterion_07_adaptive_merge_properties():
    rng = np.random.default_rng(107)
    ok = True
    for _ in range(10):
        w = AdaptiveWeights(4, dtype="f64")
        w.w.data = 5.0 * rng.standard_normal(4)
        a = w.alphas().data
        ok &= abs(a.sum() - 1.0) <= 1e-6 and np.all(a > 0)
    maps = [Tensor(rng.standard_normal((1, 2, 4, 4))) for _ in range(4)]
    w = AdaptiveWeights(4, dtype="f64")
    w.w.data = rng.standard_normal(4)
    fused = adaptive_merge(maps, w).data
    stack = np.stack([m.data for m in maps])
    ok &= bool(np.all(fused >= stack.min(axis=0) - 1e-12)
               and np.all(fused <= stack.max(axis=0) + 1e-12))
    w.w.data = np.zeros(4)
    uniform = adaptive_merge(maps, w).data
    ok &= rel_err(uniform, np.mean(stack, axis=0)) <= 1e-12
    w.w.data = np.array([50.0, 0.0, 0.0, 0.0])
    ok &= rel_err(adaptive_merge(maps, w).data, maps[0].data) <= 1e-6
    _report(7, "weight sums, hull containment, uniform-at-zero, "
               "saturation", bool(ok))


def test_criterion_08_erf_global_coverage():
    start = time.perf_counter()
    cfg = bb.desk()
    cov_model = erf(bb.build(cfg, seed=0), 192, stage=3, samples=16,
                    seed=0).coverage()
    cov_conv = erf(bb.build_conv_baseline(cfg, seed=0), 192, stage=3,
                   samples=16, seed=0).coverage()
    elapsed = time.perf_counter() - start
    _report(8, f"desk coverage {cov_model:.4f} (>= 0.99) vs conv baseline "
               f"{cov_conv:.4f} (< 0.99), {elapsed:.0f}s (< 60s)",
            cov_model >= 0.99 and cov_conv < 0.99 and elapsed < 60.0)


def test_criterion_09_learnability(tmp_path):
    cfg = RunConfig(steps=1500, seed=0, out_dir=str(tmp_path / "main"),
                    checkpoint_interval=500)
    result = train_run(cfg)
    acc_ok = result.final_acc >= 0.90
    # Determinism of the run protocol (full-length reruns are covered by the
    # bit-identical short-run check; the data/init/update path is shared).
    det_cfg = cfg.with_overrides(steps=30)
    r1 = train_run(det_cfg, tmp_path / "d1")
    r2 = train_run(det_cfg, tmp_path / "d2")
    det_ok = ((tmp_path / "d1" / "metrics.csv").read_bytes()
              == (tmp_path / "d2" / "metrics.csv").read_bytes())
    rows = compare_scan_modes(cfg.with_overrides(steps=150),
                              out_dir=tmp_path / "cmp")
    print("\nscan-mode comparison (identical 150-step budget):")
    for row in rows:
        print(f"  {row['scan_mode']:<16} final_acc {row['final_acc']:.4f} "
              f"final_loss {row['final_loss']:.4f}")
    cmp_ok = (len(rows) == 2
              and all(np.isfinite(r["final_loss"]) for r in rows))
    drift_ok = result.total_drift > 0.0
    _report(9, f"1500-step desk accuracy {result.final_acc:.4f} (>= 0.90); "
               f"deterministic {det_ok}; ablation rows complete {cmp_ok}; "
               f"fusion-weight drift {result.total_drift:.4f} (> 0)",
            acc_ok and det_ok and cmp_ok and drift_ok)


def test_criterion_10_checkpoint_and_verify(tmp_path):
    model = bb.build(bb.desk(), seed=2)
    rng = np.random.default_rng(2)
    x = Tensor(rng.standard_normal((2, 3, 32, 32)).astype(np.float32),
               dtype="f32")
    before = model.forward(x).data.copy()
    path = tmp_path / "model.mfil"
    save_checkpoint(path, model.parameters())
    clone = bb.build(bb.desk(), seed=77)
    load_into(clone.parameters(), load_checkpoint(path))
    round_trip_ok = bool(np.array_equal(clone.forward(x).data, before))
    start = time.perf_counter()
    results = run_suites(log=lambda *a, **k: None)
    elapsed = time.perf_counter() - start
    suites_ok = all(r.passed for r in results)
    failed = [r.name for r in results if not r.passed]
    _report(10, f"checkpoint round-trip bit-exact {round_trip_ok}; verify "
                f"suites all pass {suites_ok}{failed or ''}; "
                f"{elapsed:.0f}s (< 600s)",
            round_trip_ok and suites_ok and elapsed < 600.0)
