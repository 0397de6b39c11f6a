"""Acceptance gate: ten numbered criteria, each printing one pass/fail line.

The verdict lines are collected by conftest.py and echoed in the terminal
summary so they stay visible under pytest's output capture.
"""

import json
import struct
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_VERDICTS

from structadv import dataio, fw, harness, net, selftest
from structadv.distortion import (DistortionBall, GROUP_NUCLEAR, GroupPartition,
                                  NUCLEAR)
from structadv.linalg import full_svd_small, nuclear_norm, top_singular_pair

N_ATTACK_SAMPLES = 300


def _verdict(num, name, ok, detail=""):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {num:2d} {name}: {detail}"
    ACCEPTANCE_VERDICTS.append(line)
    print(line)
    assert ok, line


@pytest.fixture(scope="module")
def desk():
    """Desk-scale model: "cnn" preset on 10k synthetic bar images, 2k held out."""
    t0 = time.monotonic()
    train = dataio.synth_dataset("bars", 10_000, seed=11)
    test = dataio.synth_dataset("bars", 2_000, seed=12)
    spec = net.cnn_spec(train.images.shape[1:], train.num_classes)
    params, _ = net.train_sgd(spec, train.images, train.labels,
                              epochs=2, lr=0.05, batch=64, seed=0)
    return {"spec": spec, "params": params, "test": test,
            "train_seconds": time.monotonic() - t0}


@pytest.fixture(scope="module")
def sweep(desk):
    """FWnucl reports over the nuclear radii {1, 3, 5} on the desk model."""
    t0 = time.monotonic()
    reports = {}
    for radius in (1.0, 3.0, 5.0):
        cfg = harness.AttackConfig(method=harness.FWNUCL, radius=radius,
                                   iterations=20, seed=1,
                                   max_samples=N_ATTACK_SAMPLES)
        reports[radius] = harness.run_config(desk["spec"], desk["params"],
                                             desk["test"].images,
                                             desk["test"].labels, cfg,
                                             workers=4, keep_adversarial=True)
    reports["seconds"] = time.monotonic() - t0
    return reports


@pytest.fixture(scope="module")
def pgd_report(desk):
    cfg = harness.AttackConfig(method=harness.PGD, radius=0.3,
                               alpha=2.55 / 255.0, iterations=20, seed=1,
                               max_samples=N_ATTACK_SAMPLES)
    return harness.run_config(desk["spec"], desk["params"],
                              desk["test"].images, desk["test"].labels, cfg,
                              workers=4)


def test_01_lmo_optimality_battery():
    t0 = time.monotonic()
    result = selftest.lmo_selftest(seed=0, shape=(3, 8, 8),
                                   n_directions=200, n_samples=10_000)
    elapsed = time.monotonic() - t0
    ok = (result.max_violation <= 1e-7
          and result.max_nuclear_value_error <= 1e-6
          and result.max_feasibility_excess <= 1e-7
          and elapsed < 60.0)
    _verdict(1, "LMO optimality battery", ok,
             f"violation {result.max_violation:.2e}, nuclear value err "
             f"{result.max_nuclear_value_error:.2e}, feasibility excess "
             f"{result.max_feasibility_excess:.2e}, {elapsed:.1f}s")


def test_02_spectral_correctness():
    rng = np.random.default_rng(42)
    worst = 0.0
    for i in range(1000):
        r, c = int(rng.integers(1, 9)), int(rng.integers(1, 9))
        m = rng.standard_normal((r, c))
        sigma = top_singular_pair(m, tol=1e-9, max_iters=2000, seed=i).sigma
        s0 = full_svd_small(m)[1][0]
        worst = max(worst, abs(sigma - s0) / max(1.0, s0))
    m1234 = np.array([[1.0, 2.0], [3.0, 4.0]])
    sigma1 = top_singular_pair(m1234, tol=1e-10).sigma
    nuc = nuclear_norm(m1234)
    ok = (worst <= 1e-6 and abs(sigma1 - 5.46499) <= 1e-5
          and abs(nuc - np.sqrt(34)) <= 1e-5)
    _verdict(2, "spectral correctness", ok,
             f"battery rel err {worst:.2e}, sigma1 {sigma1:.5f}, "
             f"nuclear {nuc:.5f}")


def test_03_gradient_fidelity(desk):
    worst = selftest.gradient_check(seed=0, h=1e-5)
    x = desk["test"].images[0]
    y = int(desk["test"].labels[0])
    loss, grad = net.loss_and_input_grad(desk["spec"], desk["params"], x, y)
    oloss, ograd = harness.make_adversarial_oracle(desk["spec"], desk["params"], y)(x)
    negated = oloss == -loss and np.array_equal(ograd, -grad)
    ok = worst <= 1e-4 and negated
    _verdict(3, "gradient fidelity", ok,
             f"max FD rel err {worst:.2e}, oracle exact negation {negated}")


def test_04_fw_convergence_sanity():
    t0 = time.monotonic()
    rng = np.random.default_rng(31)
    rules = (fw.ShortStep(1.0), fw.Decaying(), fw.Backtracking())
    worst_gap = 0.0
    monotone = True
    from structadv.distortion import L2, LINF
    for i in range(20):
        n = int(rng.integers(2, 9))
        # the decaying rule's gap shrinks like (ball diameter)^2 / t, so the
        # balls are kept small enough for the absolute 1e-3 target at t=500
        kind, radius = [(NUCLEAR, 0.15), (L2, 0.15), (LINF, 0.05)][i % 3]
        ball = DistortionBall(kind, radius)
        x_ori = np.zeros((1, n, n))
        target = 0.04 * rng.standard_normal((1, n, n))

        def oracle(x, target=target, x_ori=x_ori):
            diff = x - x_ori - target
            return 0.5 * float(np.sum(diff * diff)), diff

        for rule in rules:
            trace = fw.frank_wolfe(oracle, x_ori, ball, rule,
                                   max_iters=500, gap_tol=1e-3)
            worst_gap = max(worst_gap, min(r.fw_gap for r in trace.records))
            if isinstance(rule, fw.Backtracking):
                losses = [r.loss for r in trace.records]
                monotone = monotone and all(b <= a + 1e-12
                                            for a, b in zip(losses, losses[1:]))
    elapsed = time.monotonic() - t0
    ok = worst_gap <= 1e-3 and monotone and elapsed < 60.0
    _verdict(4, "FW convergence sanity", ok,
             f"worst min-gap {worst_gap:.2e}, backtracking monotone {monotone}, "
             f"{elapsed:.1f}s")


def test_05_desk_scale_attack_trend(desk, sweep):
    clean = net.accuracy(desk["spec"], desk["params"],
                         desk["test"].images, desk["test"].labels) * 100.0
    accs = {r: sweep[r].adversarial_accuracy for r in (1.0, 3.0, 5.0)}
    non_increasing = (accs[3.0] <= accs[1.0] + 2.0
                      and accs[5.0] <= accs[3.0] + 2.0)
    drop_at_3 = sweep[3.0].clean_accuracy - accs[3.0]
    runtime = desk["train_seconds"] + sweep["seconds"]
    ok = (clean >= 95.0 and non_increasing and drop_at_3 >= 50.0
          and runtime <= 900.0)
    _verdict(5, "desk-scale attack trend", ok,
             f"clean {clean:.2f}%, adversarial acc {accs[1.0]:.2f}/"
             f"{accs[3.0]:.2f}/{accs[5.0]:.2f}% at radii 1/3/5, drop at 3 "
             f"{drop_at_3:.1f}pp, {runtime:.0f}s")


def test_06_structure_advantage(sweep, pgd_report):
    fw_rep = sweep[1.0]
    l2_ratio = fw_rep.mean_l2 / pgd_report.mean_l2
    nuc_ratio = fw_rep.mean_nuclear / pgd_report.mean_nuclear
    ok = l2_ratio <= 0.5 and nuc_ratio <= 0.5
    _verdict(6, "structure advantage", ok,
             f"mean l2 {fw_rep.mean_l2:.3f} vs PGD {pgd_report.mean_l2:.3f} "
             f"(ratio {l2_ratio:.2f}), mean nuclear {fw_rep.mean_nuclear:.3f} "
             f"vs {pgd_report.mean_nuclear:.3f} (ratio {nuc_ratio:.2f})")


def test_07_sparsity_of_support(sweep, pgd_report):
    fw_nz = sweep[1.0].mean_nonzero_pixels
    pgd_nz = pgd_report.mean_nonzero_pixels
    ok = fw_nz < pgd_nz
    _verdict(7, "sparsity of support", ok,
             f"mean nonzero pixels {fw_nz:.1f} (FWnucl) vs {pgd_nz:.1f} (PGD)")


def test_08_group_locality(desk):
    spec, params, test = desk["spec"], desk["params"], desk["test"]
    shape = test.images.shape[1:]
    partition = GroupPartition.grid(shape, 4)

    # part 1: GroupFWnucl perturbations exactly zero outside selected groups
    localized = True
    ball = DistortionBall(GROUP_NUCLEAR, 3.0, partition=partition)
    for i in range(10):
        y = int(test.labels[i])
        oracle = harness.make_adversarial_oracle(spec, params, y)
        trace = fw.frank_wolfe(oracle, test.images[i], ball,
                               fw.ShortStep(5.0), max_iters=10)
        selected = {r.selected_group for r in trace.records
                    if r.selected_group is not None}
        mask = np.zeros(shape, dtype=bool)
        for g in selected:
            mask[partition.slices(g)] = True
        localized = localized and np.all(trace.delta[~mask] == 0.0)

    # part 2: variance weights steer energy into high-variance groups
    n = 100
    common = dict(radius=3.0, iterations=20, seed=1, partition=partition,
                  max_samples=n)
    cfg_g = harness.AttackConfig(method=harness.GROUP_FWNUCL, **common)
    cfg_w = harness.AttackConfig(method=harness.WEIGHTED_GROUP_FWNUCL,
                                 weight_source="variance", **common)

    def high_variance_energy_fraction(cfg):
        rep = harness.run_config(spec, params, test.images, test.labels, cfg,
                                 workers=4, keep_adversarial=True)
        fracs = []
        for i, res in enumerate(rep.samples):
            x = test.images[i]
            d = res.adversarial - x
            stds = np.array([np.std(partition.block(x, g))
                             for g in range(len(partition))])
            hi = stds > np.median(stds)
            total = float(np.sum(d * d))
            if total > 0:
                e_hi = sum(float(np.sum(partition.block(d, g) ** 2))
                           for g in range(len(partition)) if hi[g])
                fracs.append(e_hi / total)
        return float(np.mean(fracs))

    frac_unweighted = high_variance_energy_fraction(cfg_g)
    frac_weighted = high_variance_energy_fraction(cfg_w)
    ok = localized and frac_weighted > frac_unweighted
    _verdict(8, "group locality", ok,
             f"zero outside selected groups {localized}, high-variance energy "
             f"fraction {frac_weighted:.3f} (weighted) > {frac_unweighted:.3f} "
             f"(unweighted)")


def test_09_protocol_invariants(desk, sweep, tmp_path):
    spec, params, test = desk["spec"], desk["params"], desk["test"]

    in_box = all(s.adversarial.min() >= 0.0 and s.adversarial.max() <= 1.0
                 for radius in (1.0, 3.0, 5.0) for s in sweep[radius].samples)
    feasible = all(s.pre_clamp_ball_norm <= radius * (1.0 + 1e-6)
                   for radius in (1.0, 3.0, 5.0) for s in sweep[radius].samples)

    cfg = harness.AttackConfig(method=harness.FWNUCL, radius=3.0, iterations=10,
                               seed=5, max_samples=40)
    serial = harness.run_config(spec, params, test.images, test.labels, cfg,
                                workers=1)
    parallel = harness.run_config(spec, params, test.images, test.labels, cfg,
                                  workers=4)
    rerun = harness.run_config(spec, params, test.images, test.labels, cfg,
                               workers=1)

    paths = []
    for tag, rep in (("a", serial), ("b", parallel), ("c", rerun)):
        out = tmp_path / tag
        dataio.write_report([rep], str(out))
        paths.append((out / "report.json").read_bytes()
                     + (out / "report.csv").read_bytes())
    byte_identical = paths[0] == paths[2]
    parallel_matches = paths[0] == paths[1]

    ok = in_box and feasible and byte_identical and parallel_matches
    _verdict(9, "protocol invariants", ok,
             f"box {in_box}, pre-clamp feasible {feasible}, byte-identical "
             f"reruns {byte_identical}, parallel==serial {parallel_matches}")


def test_10_io_bit_exactness(tmp_path):
    # IDX fixture: stated bytes -> value table
    imgs, lbls = tmp_path / "i.idx", tmp_path / "l.idx"
    imgs.write_bytes(struct.pack(">iiii", 0x00000803, 2, 2, 2)
                     + bytes([0, 255, 128, 64, 255, 0, 0, 0]))
    lbls.write_bytes(struct.pack(">ii", 0x00000801, 2) + bytes([7, 1]))
    ds = dataio.parse_idx(str(imgs), str(lbls))
    idx_ok = (np.allclose(ds.images[0, 0],
                          [[0.0, 1.0], [128 / 255, 64 / 255]], atol=1e-9)
              and list(ds.labels) == [7, 1])
    dataio.write_idx(ds, str(tmp_path / "o.idx"), str(tmp_path / "ol.idx"))
    roundtrip_ok = ((tmp_path / "o.idx").read_bytes() == imgs.read_bytes()
                    and (tmp_path / "ol.idx").read_bytes() == lbls.read_bytes())

    # PNM fixture
    x = np.array([[[0.0, 1.0], [0.5, 0.25]]])
    dataio.write_pnm(str(tmp_path / "x.pgm"), x)
    pnm_ok = ((tmp_path / "x.pgm").read_bytes()
              == b"P5\n2 2\n255\n" + bytes([0, 255, 128, 64]))

    # JSON/CSV round trip: csv regenerated from the json document
    sample = harness.SampleResult(index=0, clean_correct=True,
                                  adv_correct=False, first_success_iter=2,
                                  l2=0.5, linf=0.1, nuclear=0.75,
                                  nonzero_pixels=9)
    report = harness.AggregateReport(
        config={"method": "FWnucl", "radius": 1.0}, clean_accuracy=100.0,
        adversarial_accuracy=0.0, robust_accuracy_given_clean_correct=0.0,
        mean_l2=0.5, median_l2=0.5, mean_linf=0.1, median_linf=0.1,
        mean_nuclear=0.75, median_nuclear=0.75, mean_nonzero_pixels=9.0,
        samples=[sample])
    text = dataio.report_json_text([report])
    csv_text = dataio.csv_text_from_report_doc(json.loads(text))
    csv_ok = (text == dataio.report_json_text([report])
              and csv_text.splitlines()[1] == "0,1,0,2,0.5,0.1,0.75,9")

    ok = idx_ok and roundtrip_ok and pnm_ok and csv_ok
    _verdict(10, "IO bit-exactness", ok,
             f"idx {idx_ok}, idx roundtrip {roundtrip_ok}, pnm {pnm_ok}, "
             f"json/csv {csv_ok}")
