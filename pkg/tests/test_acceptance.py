"""Acceptance suite: one PASS/FAIL line per criterion, at the contract tolerances.

Run ``pytest tests/test_acceptance.py -v`` (lines are printed even without ``-s``).
"""
import time

import numpy as np
import pytest

from conftest import random_conv_block, random_dense_block
from test_autodiff import check_gradients
from mergeguard import activations as A
from mergeguard import autodiff as ad
from mergeguard.accounting import count_params, merge_savings
from mergeguard.activations import Kind
from mergeguard.checkpoint import load_checkpoint, save_checkpoint
from mergeguard.config import parse_config
from mergeguard.experiment import run_experiment
from mergeguard.layers import default_victim, mlp
from mergeguard.merge import (
    CompressionSpec, audit_bound, compression_ratio_conv,
    compression_ratio_dense, finalize_merge, linearity_gap, merge_block,
)
from mergeguard.report import report_json
from mergeguard.rng import make_rng

SEEDS = range(5)


@pytest.fixture
def verdict(capsys):
    def emit(number, ok, detail):
        with capsys.disabled():
            print(f"\ncriterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
        assert ok, detail
    return emit


def test_1_dense_merge_exactness(verdict):
    t = time.perf_counter()
    worst = 0.0
    for seed in range(100):
        r = np.random.default_rng(seed)
        n_in, n_h, n_out = r.integers(2, 48, size=3)
        block = random_dense_block(r, n_in, n_h, n_out, dtype=np.float32)
        x = r.standard_normal((1000, n_in)).astype(np.float32)
        fused = merge_block(block).forward(ad.Tensor(x)).data
        worst = max(worst, float(np.max(np.abs(fused - block.forward(x)))))
    secs = time.perf_counter() - t
    verdict(1, worst <= 1e-5 and secs < 10, f"max|diff| {worst:.2e} <= 1e-5, {secs:.2f}s < 10s")


def test_2_conv_merge_exactness(verdict):
    t = time.perf_counter()
    worst, sizes_ok = 0.0, True
    ks = [1, 3, 5, 7]
    for seed in range(20):
        r = np.random.default_rng(seed)
        k1, k2 = ks[seed % 4], ks[(seed // 4) % 4]
        block = random_conv_block(r, 2, 4, 3, k1, k2, padding=k1 // 2, dtype=np.float32)
        fused = merge_block(block)
        sizes_ok &= fused.kernel_size == k1 + k2 - 1
        x = r.standard_normal((4, 2, 16, 16)).astype(np.float32)
        worst = max(worst, float(np.max(np.abs(fused.forward(ad.Tensor(x)).data - block.forward(x)))))
    secs = time.perf_counter() - t
    ok = worst <= 1e-4 and sizes_ok and secs < 30
    verdict(2, ok, f"max|diff| {worst:.2e} <= 1e-4, kernel k1+k2-1: {sizes_ok}, {secs:.2f}s < 30s")


def test_3_gap_identity_and_scaling(verdict):
    identity_err, scale_err = 0.0, 0.0
    for seed in range(50):
        r = np.random.default_rng(seed)
        block = random_dense_block(r, 6, 10, 4, alpha=0.0)
        x = r.standard_normal((20, 6))
        _, base_sq = linearity_gap(block, x)
        pre = x @ block.first.W.data.T + block.first.b.data
        for alpha in (0.0, 0.3, 0.7, 1.0):
            block.activation.pin(alpha)
            gap, sq = linearity_gap(block, x)
            expected = (1 - alpha) * np.minimum(pre, 0) @ block.second.W.data.T
            identity_err = max(identity_err, float(np.max(np.abs(gap - expected))))
            if alpha < 1:
                rel = np.abs(sq - (1 - alpha) ** 2 * base_sq) / np.maximum((1 - alpha) ** 2 * base_sq, 1e-300)
                scale_err = max(scale_err, float(np.max(rel[base_sq > 0])))
            else:
                scale_err = max(scale_err, float(np.max(sq)))
    ok = identity_err <= 1e-6 and scale_err <= 1e-5
    verdict(3, ok, f"identity err {identity_err:.2e} <= 1e-6, (1-a)^2 scaling rel err {scale_err:.2e} <= 1e-5")


def test_4_activation_identities(verdict):
    grid = np.linspace(-10, 10, 2001)
    worst = 0.0
    for kind in Kind:
        worst = max(worst, float(np.max(np.abs(A.evaluate(kind, grid, 1.0) - grid))))
        worst = max(worst, float(np.max(np.abs(A.evaluate(kind, grid, 0.0) - A.base_activation(kind, grid)))))
    verdict(4, worst <= 1e-6, f"max err {worst:.2e} <= 1e-6 over 4 activations, 2001 points")


def test_5_gradient_checks(verdict):
    failures = []
    for seed in range(10):
        r = np.random.default_rng(seed)
        cases = {
            "dense": (lambda p: ad.sum_all(ad.square(ad.linear(p["x"], p["W"], p["b"]))),
                      {"x": r.standard_normal((4, 5)), "W": r.standard_normal((3, 5)), "b": r.standard_normal(3)}),
            "conv": (lambda p: ad.sum_all(ad.square(ad.conv2d(p["x"], p["K"], p["b"], 1, 1))),
                     {"x": r.standard_normal((2, 2, 6, 6)), "K": r.standard_normal((3, 2, 3, 3)),
                      "b": r.standard_normal(3)}),
        }
        for kind in Kind:
            x = r.standard_normal((3, 6)) * 2
            x[np.abs(x) < 1e-3] = 0.5
            cases[kind.value] = (
                lambda p, kind=kind: ad.sum_all(ad.square(ad.parametric_activation(p["x"], p["a"], kind))),
                {"x": x, "a": np.array(r.uniform(0.05, 0.95))},
            )
        labels = r.integers(0, 3, size=5)

        def composite(p, labels=labels):
            alpha = ad.logistic(p["raw"])
            h = ad.parametric_activation(ad.linear(p["x"], p["W1"], p["b1"]), alpha, Kind.PRELU)
            ce = ad.cross_entropy(ad.linear(h, p["W2"], p["b2"]), labels)
            return ad.add(ce, ad.mul(ad.square(ad.sub(1.0, alpha)), 1.0))

        cases["composite"] = (composite, {
            "x": r.standard_normal((5, 4)), "W1": r.standard_normal((6, 4)), "b1": r.standard_normal(6),
            "W2": r.standard_normal((3, 6)), "b2": r.standard_normal(3), "raw": np.array(r.normal()),
        })
        for name, (build, arrays) in cases.items():
            try:
                check_gradients(build, arrays, rtol=1e-3)
            except AssertionError as exc:
                failures.append(f"seed {seed} {name}: {exc}")
    verdict(5, not failures, "rel err <= 1e-3, 10 seeds, dense/conv/4 activations with alpha/composite"
            + ("" if not failures else f"; {failures[:3]}"))


def test_6_compression_accounting(verdict):
    eq_dense = (compression_ratio_dense(CompressionSpec(dense=(768, 3072, 768))),
                compression_ratio_dense(CompressionSpec(dense=(10, 2, 10))))
    eq_conv = compression_ratio_conv(CompressionSpec(conv=(3, 3, 64, 64, 64)))
    formulas_ok = eq_dense == (0.875, -1.5) and abs(eq_conv - 0.28) < 1e-15

    # executable dense models: formula CR, measured weight CR, and counted params all agree
    measured_ok = True
    for seed in range(20):
        r = make_rng(seed)
        sizes = [int(v) for v in r.integers(2, 40, size=3)]
        model = mlp(sizes, r)
        model.layers[1].pin(1.0)
        merged, (rec,) = finalize_merge(model)
        w_before = sizes[0] * sizes[1] + sizes[1] * sizes[2]
        w_after = sizes[0] * sizes[2]
        measured_ok &= rec.cr_weight_only == 1 - w_after / w_before
        measured_ok &= rec.cr_formula == pytest.approx(rec.cr_weight_only, abs=1e-12)
        measured_ok &= count_params(model) - count_params(merged) == rec.params_before - rec.params_after
    ok = formulas_ok and measured_ok
    verdict(6, ok, f"dense {eq_dense}, conv {eq_conv:.2f}, weight-only CR == measured: {measured_ok}")


def test_7_vit_bookkeeping(verdict):
    t = time.perf_counter()
    acc = merge_savings("vit-base-16", 3)
    secs = time.perf_counter() - t
    per_block = {b.params_saved for b in acc.blocks}
    ok = (
        per_block == {4_131_840}
        and abs(acc.params_before - 85.8e6) <= 0.5e6
        and abs(acc.params_after - 73.4e6) <= 0.5e6
        and abs(100 * acc.param_reduction - 15) <= 1
        and abs(100 * acc.mac_reduction - 14) <= 2
        and secs < 1
    )
    verdict(7, ok, f"per block {sorted(per_block)}, {acc.params_before:,} -> {acc.params_after:,} "
                   f"(-{100 * acc.param_reduction:.2f}%), MACs -{100 * acc.mac_reduction:.2f}%, {secs:.3f}s")


@pytest.fixture(scope="module")
def end_to_end():
    """Default BadNet pipeline, with the clean safety run, on five seeds."""
    runs = []
    for seed in SEEDS:
        cfg = parse_config({"seed": seed, "figures": False})
        t = time.perf_counter()
        report = run_experiment(cfg, save=False)
        runs.append((report, time.perf_counter() - t))
    return runs


@pytest.mark.slow
def test_8_end_to_end_defense(verdict, end_to_end):
    lines, passes = [], 0
    for seed, (r, secs) in zip(SEEDS, end_to_end):
        drop = r.trojaned.test_acc - r.defended.test_acc
        ok = (
            r.trojaned.asr >= 0.90 and r.trojaned.test_acc >= 0.90
            and r.defended.asr <= 0.20 and drop <= 0.05
            and len(r.merges) >= 1 and secs <= 300
        )
        passes += ok
        lines.append(f"seed {seed} {'ok' if ok else 'x'}: acc {r.trojaned.test_acc:.3f}->{r.defended.test_acc:.3f} "
                     f"ASR {r.trojaned.asr:.3f}->{r.defended.asr:.3f} merged {len(r.merges)} {secs:.0f}s")
    verdict(8, passes >= 3, f"{passes}/5 seeds; " + "; ".join(lines))


@pytest.mark.slow
def test_9_clean_model_safety(verdict, end_to_end):
    changes = [r.safety["acc_change"] for r, _ in end_to_end]
    passes = sum(abs(c) <= 0.05 for c in changes)
    verdict(9, passes >= 3, f"{passes}/5 seeds within 5 points; changes {[round(c, 4) for c in changes]}")


def test_10_bound_audit(verdict):
    t = time.perf_counter()
    worst_zero_bias, general = 0.0, []
    for seed in range(100):
        r = np.random.default_rng(seed)
        alpha = (0.0, 0.5, 0.9)[seed % 3]
        n_in, n_h, n_out = (int(v) for v in r.integers(2, 16, size=3))
        x = r.standard_normal((1000, n_in))
        zero = random_dense_block(r, n_in, n_h, n_out, alpha=alpha, zero_bias=True)
        worst_zero_bias = max(worst_zero_bias, audit_bound(zero, x, 0.01).empirical_violation_rate)
        biased = random_dense_block(r, n_in, n_h, n_out, alpha=alpha)
        general.append(audit_bound(biased, x, 0.01).empirical_violation_rate)
    secs = time.perf_counter() - t
    ok = worst_zero_bias <= 0.01 and secs < 30
    verdict(10, ok, f"b1=0 worst violation rate {worst_zero_bias:.4f} <= 0.01; general blocks "
                    f"(reported only) mean {np.mean(general):.4f} max {max(general):.4f}; {secs:.1f}s < 30s")


def test_11_determinism_and_serialization(verdict, tmp_path):
    small = {"seed": 7, "figures": False, "safety_run": False,
             "dataset": {"n_train": 1500, "n_test": 300}, "victim": {"epochs": 3},
             "defense": {"epochs": 3, "learning_rate": [0.05, 0.1], "benign_fraction": 0.2}}
    a = report_json(run_experiment(parse_config(small), save=False))
    b = report_json(run_experiment(parse_config(small), save=False))

    model = default_victim((1, 16, 16), 4, make_rng(11))
    model.layers[5].unpin(0.42)
    save_checkpoint(model, tmp_path / "m.ckpt")
    x = make_rng(12).random((100, 1, 16, 16)).astype(np.float32)
    diff = float(np.max(np.abs(load_checkpoint(tmp_path / "m.ckpt").logits(x) - model.logits(x))))
    ok = a == b and diff == 0.0
    verdict(11, ok, f"reports byte-identical: {a == b}; checkpoint logits max|diff| {diff}")
