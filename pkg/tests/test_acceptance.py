"""Acceptance gate: one test per release criterion.

Each test prints a single summary line (visible with `pytest -s` or in the
captured output of a failure). The learning criteria (6, 7) train real
models on the CPU and are marked `slow`; they are part of the default run.
"""

import math
import time

import numpy as np
import pytest

from csilab import channel as ch
from csilab import layers
from csilab.autodiff import ParameterStore, Tape, grad_check
from csilab.cli import main
from csilab.complexity import AccountingMode, analyze, verify_flops_against_execution
from csilab.models import CONVCSINET, SHUFFLECSINET, ModelGraph, ModelSpec
from csilab.training import TrainConfig, evaluate, train

TABLE_FLOPS = {
    (CONVCSINET, 16): 58_515_456,
    (CONVCSINET, 32): 58_220_544,
    (SHUFFLECSINET, 16): 11_845_632,
    (SHUFFLECSINET, 32): 11_550_720,
}
TABLE_PARAMS_PRINTED = {
    (CONVCSINET, 16): 1_697_144,
    (CONVCSINET, 32): 1_623_416,
    (SHUFFLECSINET, 16): 415_528,
    (SHUFFLECSINET, 32): 341_800,
}
RESIDUALS = {CONVCSINET: 248, SHUFFLECSINET: 808}


def report(line):
    print(f"[acceptance] {line}")


def test_criterion_01_flop_table_oracle():
    """Published encoder FLOP totals reproduce exactly, in under a second."""
    t0 = time.perf_counter()
    got = {}
    for (arch, cr), want in TABLE_FLOPS.items():
        rep = analyze(ModelGraph(ModelSpec(architecture=arch, cr_den=cr), seed=0),
                      AccountingMode.paper_table(), scope="encoder")
        got[(arch, cr)] = rep.total_flops
    elapsed = time.perf_counter() - t0
    assert got == TABLE_FLOPS, got
    assert elapsed < 1.0, f"analyze took {elapsed:.2f}s"
    report(f"criterion 1 PASS: four encoder FLOP totals exact in {elapsed * 1e3:.0f} ms")


def test_criterion_02_param_table_oracle():
    """Encoder parameter totals within 0.25% of print, residuals in the footer."""
    for (arch, cr), printed in TABLE_PARAMS_PRINTED.items():
        rep = analyze(ModelGraph(ModelSpec(architecture=arch, cr_den=cr), seed=0),
                      AccountingMode.paper_table(), scope="encoder")
        rel = abs(rep.total_params - printed) / printed
        assert rel < 0.0025, (arch, cr, rep.total_params, printed)
        assert printed - rep.total_params == RESIDUALS[arch]
        assert any(f"+{RESIDUALS[arch]}" in line.replace(",", "") for line in rep.footer)
    report("criterion 2 PASS: parameter totals within 0.25%, residuals +248/+808 in footer")


def test_criterion_03_shape_conformance():
    """Codewords are (M/4, 2, 2) with M = 2048*CR; reconstructions are (2,32,32) in (0,1)."""
    rng = np.random.default_rng(0)
    for arch in (CONVCSINET, SHUFFLECSINET):
        for cr in (16, 32):
            model = ModelGraph(ModelSpec(architecture=arch, cr_den=cr), seed=0)
            x = rng.random((2, 2, 32, 32), dtype=np.float32)
            code = model.encode(x)
            m = 2 * 32 * 32 // cr
            assert code.shape == (2, m // 4, 2, 2), (arch, cr, code.shape)
            y = model.decode(code)
            assert y.shape == (2, 2, 32, 32)
            assert np.all((y > 0) & (y < 1))
    report("criterion 3 PASS: codeword and reconstruction shapes conform for both archs/CRs")


def _layer_zoo_tape():
    """One tape exercising every differentiable op against a scalar loss."""
    store = ParameterStore(dtype=np.float64, seed=0)
    dt = np.float64
    rng = store.rng
    store.register("c1.w", layers.he_uniform(rng, (8, 2, 3, 3), 18, dt))
    store.register("c1.b", np.zeros(8))
    store.register("bn.g", np.ones(8))
    store.register("bn.b", np.zeros(8))
    store.register("bn.rm", np.zeros(8), trainable=False)
    store.register("bn.rv", np.ones(8), trainable=False)
    store.register("dw.w", layers.he_uniform(rng, (8, 1, 3, 3), 9, dt))
    store.register("c2.w", layers.he_uniform(rng, (8, 8, 1, 1), 8, dt))
    store.register("c2.b", np.zeros(8))
    store.register("fc.w", layers.glorot_uniform(rng, (16, 32), 32, 16, dt))
    store.register("fc.b", np.zeros(16))
    store.register("c3.w", layers.he_uniform(rng, (2, 16, 3, 3), 144, dt))
    store.register("c3.b", np.zeros(2))
    t = Tape(store)
    x = t.input("x")
    y = t.add("conv2d", (x,), ("c1.w", "c1.b"), stride=1)
    y = t.add("batch_norm", (y,), ("bn.g", "bn.b", "bn.rm", "bn.rv"), momentum=0.99, eps=1e-3)
    y = t.add("leaky_relu", (y,), alpha=0.3)
    a = t.add("dwconv2d", (y,), ("dw.w",), stride=2)
    b = t.add("conv2d", (y,), ("c2.w", "c2.b"), stride=2)
    y = t.add("concat", (a, b), )
    y = t.add("shuffle", (y,), groups=4)
    lo = t.add("slice_channels", (y,), lo=0, hi=8)
    hi = t.add("slice_channels", (y,), lo=8, hi=16)
    y = t.add("add", (lo, hi))
    y = t.add("avg_pool2", (y,))
    y = t.add("dense", (y,), ("fc.w", "fc.b"))
    y = t.add("upsample2", (y,))
    y = t.add("upsample2", (y,))
    y = t.add("conv2d", (y,), ("c3.w", "c3.b"), stride=1)
    y = t.add("sigmoid", (y,))
    tgt = t.input("target")
    t.add("mse_loss", (y, tgt))
    return t


@pytest.mark.slow
def test_criterion_04_gradient_integrity():
    """Finite-difference checks: every op, then both full architectures."""
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    tape = _layer_zoo_tape()
    b = {"x": rng.random((2, 2, 8, 8)), "target": rng.random((2, 2, 4, 4))}
    worst = 0.0
    for name in tape.store.trainable_names():
        worst = max(worst, grad_check(tape, b, name, probe_count=32, eps=1e-5, rng=rng))
    assert worst < 1e-5, f"layer zoo: {worst}"

    for arch in (CONVCSINET, SHUFFLECSINET):
        model = ModelGraph(ModelSpec(architecture=arch, cr_den=16), seed=0, dtype=np.float64)
        x = rng.random((1, 2, 32, 32))
        bindings = {"x": x, "target": x}
        arch_worst = 0.0
        for name in model.store.trainable_names():
            err = grad_check(model.trainer, bindings, name, probe_count=32, eps=1e-5, rng=rng)
            arch_worst = max(arch_worst, err)
        assert arch_worst < 1e-5, f"{arch}: {arch_worst}"
        worst = max(worst, arch_worst)
    elapsed = time.perf_counter() - t0
    report(f"criterion 4 PASS: max rel grad err {worst:.2e} over all tensors, {elapsed / 60:.1f} min")


def test_criterion_05_mac_count_equivalence():
    """Instrumented kernels match the analytic conv/depthwise rows exactly, 20 random configs."""
    rng = np.random.default_rng(7)
    from csilab.layers import mac_counter, same_pad

    for trial in range(20):
        n = int(rng.integers(1, 5))
        ci = int(rng.integers(1, 12))
        co = int(rng.integers(1, 12))
        k = int(rng.choice([1, 3]))
        s = int(rng.choice([1, 2]))
        h = int(rng.integers(4, 20))
        w = int(rng.integers(4, 20))
        x = rng.standard_normal((n, ci, h, w))
        mac_counter.reset()
        mac_counter.enabled = True
        try:
            layers.conv2d_forward(x, rng.standard_normal((co, ci, k, k)), None, s)
            layers.depthwise_conv2d_forward(x, rng.standard_normal((ci, 1, 3, 3)), s)
        finally:
            mac_counter.enabled = False
        oh, ow = same_pad(h, k, s)[0], same_pad(w, k, s)[0]
        oh3, ow3 = same_pad(h, 3, s)[0], same_pad(w, 3, s)[0]
        assert mac_counter.per_call == [
            ("conv2d", n * oh * ow * k * k * ci * co),
            ("depthwise_conv2d", n * oh3 * ow3 * 9 * ci),
        ], trial

    # and for both assembled models end to end
    for arch in (CONVCSINET, SHUFFLECSINET):
        g = ModelGraph(ModelSpec(architecture=arch, cr_den=16), seed=0)
        v = verify_flops_against_execution(g, rng.random((2, 2, 32, 32)).astype(np.float32))
        assert v.ok, v.discrepancies[:3]
    report("criterion 5 PASS: MAC counts equal analytic rows for 20 random configs + both models")


# overfit/desk-scale runs share one generated dataset setup
EASY_PROFILE = ch.SyntheticProfile(seed=42)

# results cached for the directional comparison in criterion 9
_desk_results = {}


@pytest.mark.slow
def test_criterion_06_overfit_sanity():
    """ConvCsiNet CR 1/16 memorizes 64 samples: training NMSE < -30 dB in 2000 steps.

    Reference-run configuration: default profile, batch 32 (2 steps/epoch),
    lr 1e-3. Achieved NMSE is reported either way; see the history CSVs under
    docs/reference-runs for the committed trajectories.
    """
    prof = ch.SyntheticProfile(seed=11)
    splits, info, _ = ch.build_splits(prof, 64, 8, 8)
    model = ModelGraph(ModelSpec(architecture=CONVCSINET, cr_den=16), seed=0)
    cfg = TrainConfig(epochs=1000, batch_size=32, seed=0, val_every=100)
    t0 = time.perf_counter()
    train(model, splits["train"], splits["train"], info, cfg)
    elapsed = time.perf_counter() - t0
    ev = evaluate(model, splits["train"], info)
    report(f"criterion 6: train NMSE {ev.nmse_db:.2f} dB after 2000 steps, {elapsed / 60:.1f} min")
    assert elapsed < 30 * 60, f"overfit probe exceeded 30 min: {elapsed / 60:.1f}"
    assert ev.nmse_db < -30.0, ev.nmse_db
    report("criterion 6 PASS")


@pytest.mark.slow
@pytest.mark.parametrize("arch", [CONVCSINET, SHUFFLECSINET])
def test_criterion_07_desk_scale_learning(arch):
    """100 epochs on 5000 easy samples: >= 20 dB NMSE gain over untrained, rho > 0.9."""
    splits, info, _ = ch.build_splits(EASY_PROFILE, 5000, 1000, 1000)
    model = ModelGraph(ModelSpec(architecture=arch, cr_den=16), seed=0)
    ev0 = evaluate(model, splits["test"], info)
    cfg = TrainConfig(epochs=100, batch_size=200, seed=0, val_every=10)
    t0 = time.perf_counter()
    res = train(model, splits["train"], splits["val"], info, cfg)
    elapsed = time.perf_counter() - t0
    if res.best_weights is not None:
        model.store.load_values(res.best_weights)
    ev1 = evaluate(model, splits["test"], info)
    _desk_results[arch] = (ev0.nmse_db, ev1.nmse_db, ev1.rho)
    report(
        f"criterion 7 [{arch}]: untrained {ev0.nmse_db:.2f} dB -> trained {ev1.nmse_db:.2f} dB "
        f"(gain {ev0.nmse_db - ev1.nmse_db:.1f} dB), rho {ev1.rho:.3f}, {elapsed / 3600:.2f} h"
    )
    assert elapsed <= 4 * 3600, f"training exceeded the 4 h budget: {elapsed / 3600:.2f} h"
    assert ev0.nmse_db - ev1.nmse_db >= 20.0
    assert ev1.rho > 0.9
    report(f"criterion 7 [{arch}] PASS")


def test_criterion_08_metric_identities():
    rng = np.random.default_rng(3)
    h = rng.standard_normal((6, 32, 32)) + 1j * rng.standard_normal((6, 32, 32))
    v = ch.nmse(h, h / 2)
    assert abs(v - (-6.02)) < 0.01, v
    for c in (2.0, -1.5 + 0.5j, 1e-3, 1e3 * 1j):
        assert abs(ch.rho(h, c * h) - 1.0) < 1e-6
    hf = rng.standard_normal((256, 32)) + 1j * rng.standard_normal((256, 32))
    back = ch.inverse_dft(ch.dft_transform(hf))
    rel = np.linalg.norm(back - hf) / np.linalg.norm(hf)
    assert rel < 1e-6
    report(f"criterion 8 PASS: nmse(H,H/2)={v:.3f} dB, rho scale-invariant, DFT round trip {rel:.1e}")


@pytest.mark.slow
def test_criterion_09_directional_ordering_soft():
    """Reported, not gated: trained ConvCsiNet <= ShuffleCsiNet <= untrained on NMSE."""
    if len(_desk_results) < 2:
        report("criterion 9: desk-scale results unavailable in this run order; reporting only")
        pytest.skip("needs the criterion-7 results from this session")
    conv_untrained, conv_trained, _ = _desk_results[CONVCSINET]
    _, shuffle_trained, _ = _desk_results[SHUFFLECSINET]
    ordered = conv_trained <= shuffle_trained <= conv_untrained
    report(
        f"criterion 9 (soft): ConvCsiNet {conv_trained:.2f} dB, ShuffleCsiNet {shuffle_trained:.2f} dB, "
        f"untrained {conv_untrained:.2f} dB -> ordering {'holds' if ordered else 'VIOLATED'}"
    )
    # absolute published NMSE values are not reproducible without the original
    # channel model and GPU-scale training; the ordering above is informational
    report("criterion 9 PASS (reported, not gated)")


def test_criterion_10_byte_reproducibility(tmp_path):
    """Identical flags (threads=1) produce byte-identical artifacts."""
    outputs = {}
    for tag in ("a", "b"):
        root = tmp_path / tag
        assert main(["gen-data", "--train", "24", "--val", "6", "--test", "6",
                     "--seed", "9", "--out", str(root / "data")]) == 0
        assert main(["train", "--arch", "convcsinet", "--cr", "32",
                     "--data", str(root / "data"), "--out", str(root / "runs"),
                     "--epochs", "1", "--batch", "12", "--seed", "4"]) == 0
        weights = root / "runs" / "convcsinet_cr32.csiw"
        assert main(["encode", "--weights", str(weights),
                     "--input", str(root / "data" / "test.csib"),
                     "--out", str(root / "codes.csib")]) == 0
        assert main(["decode", "--weights", str(weights),
                     "--input", str(root / "codes.csib"),
                     "--out", str(root / "recon.csib")]) == 0
        outputs[tag] = {
            p.relative_to(root): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()
        }
    assert outputs["a"].keys() == outputs["b"].keys()
    for name in outputs["a"]:
        assert outputs["a"][name] == outputs["b"][name], f"{name} differs between reruns"
    report(f"criterion 10 PASS: {len(outputs['a'])} artifacts byte-identical across reruns")
