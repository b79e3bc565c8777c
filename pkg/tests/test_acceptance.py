"""End-to-end acceptance checks. Each test prints one PASS/FAIL line for its criterion.

The MNIST runs use the 4096-example subset with a 300-epoch training budget; trained
networks are shared between criteria through the in-process cache in ``labhub``.
"""
import itertools
import time

import numpy as np
import pytest

from permbasin import labhub, runtime
from permbasin.barrier import barrier_value, indirect_matrix, loss_profile, midpoint_stats
from permbasin.cli import run
from permbasin.datahub import load_dataset
from permbasin.labhub import ExperimentSpec
from permbasin.netcore import build_mlp, build_shallow_cnn, forward
from permbasin.permalg import apply, identity_perm, invert, random_perm
from permbasin.permsearch import SAConfig, brute_force_match, fd_align, reduced_energy, sa_search_reduced

from gradcheck import finite_difference_check, kink_free_inputs

pytestmark = pytest.mark.slow

MNIST = {"name": "mnist", "n_train": 4096}
MNIST_TRAIN = {"max_epochs": 300}
BLOBS = {"name": "blobs", "n": 1000, "d": 10, "classes": 4, "separation": 2.0, "seed": 0}
BLOBS_TRAIN = {"lr": 0.05, "max_epochs": 200}


def _mnist_spec(**kw) -> ExperimentSpec:
    base = dict(name="acceptance", widths=(16,), depths=(1,), dataset=MNIST, n_seeds=10,
                metrics=("loss",), splits=("train",), train=MNIST_TRAIN)
    base.update(kw)
    return ExperimentSpec(**base)


def _blobs_spec(**kw) -> ExperimentSpec:
    base = dict(name="blobs", widths=(4,), depths=(1,), dataset=BLOBS, n_seeds=20,
                metrics=("loss",), splits=("train",), train=BLOBS_TRAIN)
    base.update(kw)
    return ExperimentSpec(**base)


@pytest.fixture(scope="module", autouse=True)
def _single_thread():
    runtime.set_threads(1)


@pytest.fixture(scope="module")
def blob_nets():
    nets, _ = labhub.real_world_set(_blobs_spec())
    return nets


# -- 1 ---------------------------------------------------------------------------


def test_criterion_01_permutation_invariance(criterion):
    start = time.perf_counter()
    makers = [
        (lambda s: build_mlp(1, 12, 6, 4, s), (8, 6)),
        (lambda s: build_mlp(2, 10, 6, 4, s), (8, 6)),
        (lambda s: build_mlp(4, 8, 6, 4, s), (8, 6)),
        (lambda s: build_shallow_cnn(1, 6, (2, 7, 7), 4, s), (8, 2, 7, 7)),
        (lambda s: build_shallow_cnn(2, 5, (1, 8, 8), 4, s), (8, 1, 8, 8)),
    ]
    worst, round_trips = 0.0, 0
    for k in range(50):
        make, shape = makers[k % len(makers)]
        net = make(k)
        perm = random_perm(net, 1000 + k)
        x = np.random.default_rng(k).normal(size=shape)
        moved = apply(net, perm)
        worst = max(worst, float(np.max(np.abs(forward(moved, x, canonical=True) - forward(net, x, canonical=True)))))
        back = apply(moved, invert(perm))
        round_trips += all(np.array_equal(a, b) for a, b in zip(back.params(), net.params()))
    elapsed = time.perf_counter() - start
    criterion(1, worst == 0.0 and round_trips == 50 and elapsed < 10,
              f"max |f(P theta) - f(theta)| = {worst!r} over 50 pairs, {round_trips}/50 bit-exact round trips, "
              f"{elapsed:.1f}s")


# -- 2 ---------------------------------------------------------------------------


def test_criterion_02_barrier_contract(criterion, blob_nets):
    start = time.perf_counter()
    ds = load_dataset(BLOBS)
    self_barrier = barrier_value(loss_profile(blob_nets[0], blob_nets[0], ds))
    pairs = list(itertools.combinations(range(len(blob_nets)), 2))[:100]
    values, asym = [], 0.0
    for i, j in pairs:
        fwd = barrier_value(loss_profile(blob_nets[i], blob_nets[j], ds))
        bwd = barrier_value(loss_profile(blob_nets[j], blob_nets[i], ds))
        values.append(fwd)
        asym = max(asym, abs(fwd - bwd))
    spec = _mnist_spec()
    mnist = load_dataset(MNIST)
    nets, _ = labhub.real_world_set(spec)
    gaps = []
    for i, j in list(itertools.combinations(range(len(nets)), 2))[:20]:
        full = barrier_value(loss_profile(nets[i], nets[j], mnist, grid_size=101))
        mid = midpoint_stats(nets[i], nets[j], mnist)["loss"]
        gaps.append(abs(full - mid))
    elapsed = time.perf_counter() - start
    ok = self_barrier == 0.0 and min(values) >= 0 and asym <= 1e-9 and max(gaps) < 1e-3 and elapsed < 300
    criterion(2, ok, f"B(theta,theta)={self_barrier!r}; min over 100 pairs {min(values):.3g}; "
                     f"max swap asymmetry {asym:.2g}; max |grid101 - midpoint| over 20 MNIST pairs "
                     f"{max(gaps):.3g} (median {np.median(gaps):.3g}); {elapsed:.0f}s")


# -- 3 ---------------------------------------------------------------------------


def test_criterion_03_gradient_check(criterion):
    start = time.perf_counter()
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        if seed % 4 == 3:
            net = build_shallow_cnn(1 + seed % 2, 2, (1, 4, 4), 3, seed=seed)
            shape = (3, 1, 4, 4)
        else:
            net = build_mlp(1 + seed % 3, 3, 4, 3, seed=seed)
            shape = (4, 4)
        net = net.with_params([p + rng.normal(scale=0.1, size=p.shape) for p in net.params()], dtype=np.float64)
        x = kink_free_inputs(net, rng, shape)
        y = rng.integers(0, 3, shape[0])
        worst = max(worst, finite_difference_check(net, x, y))
    elapsed = time.perf_counter() - start
    criterion(3, worst <= 1e-4 and elapsed < 30,
              f"max relative error {worst:.2e} over 20 nets (15 MLP, 5 CNN); {elapsed:.1f}s")


# -- 4 ---------------------------------------------------------------------------


def test_criterion_04_brute_force_dominance(criterion, blob_nets):
    start = time.perf_counter()
    ds = load_dataset(BLOBS)
    ordered, close, lines = 0, 0, []
    for k in range(10):
        a, b = blob_nets[2 * k], blob_nets[2 * k + 1]
        energy = reduced_energy(a, b, ds)
        brute = brute_force_match(a, b, ds).final_energy
        fd = energy([fd_align(a, b, ds)])
        ident = energy([identity_perm(a)])
        sa = sa_search_reduced(a, b, ds, SAConfig(steps=5000, seed=k)).final_energy
        ordered += brute <= fd <= ident
        close += sa - brute <= 0.05
        lines.append(f"{brute:.3f}/{fd:.3f}/{ident:.3f}/{sa:.3f}")
    elapsed = time.perf_counter() - start
    criterion(4, ordered == 10 and close >= 8 and elapsed < 600,
              f"brute<=fd<=identity on {ordered}/10 pairs; SA within 0.05 of brute on {close}/10; "
              f"(brute/fd/id/sa) {', '.join(lines)}; {elapsed:.0f}s")


# -- 5 ---------------------------------------------------------------------------


def test_criterion_05_plant_and_recover(criterion, blob_nets):
    start = time.perf_counter()
    ds = load_dataset(BLOBS)
    brute_zero, brute_total = 0, 0
    for width in range(2, 7):
        for seed in range(3):
            net = build_mlp(1, width, ds.in_dim, ds.num_classes, seed=seed)
            pi = random_perm(net, 50 + seed)
            brute_total += 1
            brute_zero += brute_force_match(net, apply(net, pi), ds).final_energy == 0.0
    trained = blob_nets[0]
    brute_total += 1
    brute_zero += brute_force_match(trained, apply(trained, random_perm(trained, 3)), ds).final_energy == 0.0
    fd_ok, fd_total = 0, 0
    for depth, width in [(1, 8), (2, 16), (3, 32)]:
        for seed in range(3):
            net = build_mlp(depth, width, ds.in_dim, ds.num_classes, seed=seed)
            pi = random_perm(net, 70 + seed)
            moved = apply(net, pi)
            q = fd_align(moved, net, ds)
            fd_total += 1
            fd_ok += all(np.array_equal(u, v) for u, v in zip(apply(moved, q).params(), net.params()))
    elapsed = time.perf_counter() - start
    criterion(5, brute_zero == brute_total and fd_ok == fd_total and elapsed < 120,
              f"brute force barrier exactly 0 on {brute_zero}/{brute_total} planted pairs (widths 2-6); "
              f"fd_align zero-cost recovery on {fd_ok}/{fd_total}; {elapsed:.1f}s")


# -- 6 ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def compare_report():
    start = time.perf_counter()
    report = labhub.run_experiment(_mnist_spec(kind="compare", widths=(16, 256)))
    return report, time.perf_counter() - start


def test_criterion_06_s_vs_sprime(criterion, compare_report):
    report, elapsed = compare_report
    ok, parts = elapsed < 3600, []
    for w in (16, 256):
        s = report.values(width=w, set="S", phase="before").mean()
        sp = report.values(width=w, set="S'", phase="before").mean()
        rel = abs(s - sp) / abs(s)
        ok &= rel <= 0.30
        parts.append(f"width {w}: S {s:.4f} vs S' {sp:.4f} (rel diff {rel:.1%})")
    criterion(6, bool(ok), "; ".join(parts) + f"; {elapsed:.0f}s")


# -- 7 ---------------------------------------------------------------------------


SA_SCALING = dict(kind="sa_scaling", name="sa_scaling", n_seeds=2, step_list=(10, 100, 1000, 10000))


@pytest.fixture(scope="module")
def sa_report():
    start = time.perf_counter()
    report = labhub.run_experiment(_mnist_spec(**SA_SCALING))
    return report, time.perf_counter() - start


def test_criterion_07_sa_scaling(criterion, sa_report):
    report, elapsed = sa_report
    b = report.summary["barriers"]
    monotone = all(x >= y for x, y in zip(b, b[1:]))
    ratio = b[0] / b[-1] if b[-1] > 0 else float("inf")
    criterion(7, monotone and ratio >= 1.3 and elapsed < 1800,
              f"barrier at steps {report.summary['steps']}: {[round(x, 4) for x in b]} "
              f"(unpermuted {report.summary['initial']:.4f}); ratio 10/10k = {ratio:.2f}; {elapsed:.0f}s")


# -- 8 ---------------------------------------------------------------------------


def test_criterion_08_width_and_depth_trends(criterion):
    start = time.perf_counter()
    widths = labhub.run_experiment(_mnist_spec(kind="width_sweep", widths=(8, 64, 1024)))
    means = {w: widths.values(width=w, set="S").mean() for w in (8, 64, 1024)}
    peak = max(means, key=means.get)
    depths = labhub.run_experiment(_mnist_spec(kind="depth_sweep", widths=(1024,), depths=(1, 4)))
    d1, d4 = (depths.values(depth=d, set="S").mean() for d in (1, 4))
    elapsed = time.perf_counter() - start
    ok = means[1024] < means[peak] and d4 > d1 and elapsed < 3600
    criterion(8, ok, f"S barrier by width {{8: {means[8]:.4f}, 64: {means[64]:.4f}, 1024: {means[1024]:.4f}}}, "
                     f"peak at {peak}; width 1024 depth 1 {d1:.4f} vs depth 4 {d4:.4f}; {elapsed:.0f}s")


# -- 9 ---------------------------------------------------------------------------


THEOREM_H = [2**6, 2**8, 2**10, 2**12, 2**14]


@pytest.fixture(scope="module")
def theorem_report():
    start = time.perf_counter()
    report = labhub.theorem1_check(2, THEOREM_H, trials=10, probe_count=200, seed=0)
    return report, time.perf_counter() - start


def test_criterion_09_theorem1_rate(criterion, theorem_report):
    report, elapsed = theorem_report
    med = report.summary["median_deviation"]
    decreasing = all(a > b for a, b in zip(med, med[1:]))
    slope = report.summary["slope"]
    criterion(9, decreasing and slope < -0.03 and elapsed < 300,
              f"median deviation {[f'{m:.3g}' for m in med]} for h={THEOREM_H}; slope {slope:.3f} "
              f"(upper-bound rate {report.summary['predicted_rate']}); {elapsed:.0f}s")


# -- 10 --------------------------------------------------------------------------


def test_criterion_10_noisy_labels(criterion):
    start = time.perf_counter()
    report = labhub.run_experiment(_mnist_spec(kind="noisy_labels", widths=(256,), noise_fractions=(0.0, 0.5)))
    train_err = {b["param"]: max(e["train_error"] for e in b["endpoints"]) for b in report.summary["blocks"]}
    bar = {f: report.values(param=f).mean() for f in (0.0, 0.5)}
    elapsed = time.perf_counter() - start
    ok = max(train_err.values()) < 0.02 and bar[0.5] >= bar[0.0] - 0.02 and elapsed < 1800
    criterion(10, ok, f"worst train error {train_err}; barrier {bar[0.0]:.4f} at 0 vs {bar[0.5]:.4f} at 0.5; "
                      f"{elapsed:.0f}s")


# -- 11 --------------------------------------------------------------------------


def test_criterion_11_indirect_oracle(criterion):
    start = time.perf_counter()
    rng = np.random.default_rng(0)
    mismatches = 0
    for _ in range(100):
        m = rng.random((6, 6))
        m = (m + m.T) / 2
        np.fill_diagonal(m, 0)
        ind = indirect_matrix(m)
        for i, j in itertools.combinations(range(6), 2):
            oracle = min(max(m[i][k], m[k][j]) for k in range(6) if k not in (i, j))
            mismatches += ind[i, j] != oracle or ind[j, i] != oracle
    elapsed = time.perf_counter() - start
    criterion(11, mismatches == 0 and elapsed < 1,
              f"{mismatches} mismatches against the exhaustive-intermediate oracle on 100 matrices; {elapsed:.2f}s")


# -- 12 --------------------------------------------------------------------------


def _cli_csv(tmp_path, tag, spec_text, name):
    spec = tmp_path / f"{tag}.yaml"
    spec.write_text(spec_text)
    labhub.clear_cache()  # force retraining so the rerun is end to end
    out = tmp_path / tag
    assert run(["experiment", str(spec), "--threads", "1", "--out-dir", str(out)]) == 0
    return (out / f"{name}.csv").read_bytes()


def test_criterion_12_determinism(criterion, tmp_path, sa_report, theorem_report):
    checks = {}
    theorem_yaml = (f"kind: theorem1\nname: theorem1\ntheorem_d: 2\ntheorem_h: {THEOREM_H}\n"
                    "theorem_trials: 10\ntheorem_probes: 200\nmaster_seed: 0\n")
    a = _cli_csv(tmp_path, "t1", theorem_yaml, "theorem1")
    b = _cli_csv(tmp_path, "t2", theorem_yaml, "theorem1")
    checks["theorem1 (criterion 9)"] = a == b == theorem_report[0].to_csv().encode()
    sa_yaml = ("kind: sa_scaling\nname: sa_scaling\nwidths: [16]\nn_seeds: 2\nmetrics: [loss]\n"
               "step_list: [10, 100, 1000, 10000]\ndataset: {name: mnist, n_train: 4096}\n"
               "train: {max_epochs: 300}\n")
    checks["sa_scaling (criterion 7)"] = _cli_csv(tmp_path, "sa", sa_yaml, "sa_scaling") == sa_report[0].to_csv().encode()
    compare_yaml = ("kind: compare\nname: compare\nwidths: [16]\nn_seeds: 10\nmetrics: [loss, error]\n"
                    "splits: [train, test]\ndataset: {name: mnist, n_train: 4096}\ntrain: {max_epochs: 300}\n")
    c1 = _cli_csv(tmp_path, "c1", compare_yaml, "compare")
    c2 = _cli_csv(tmp_path, "c2", compare_yaml, "compare")
    checks["compare width 16 (criterion 6)"] = c1 == c2
    criterion(12, all(checks.values()),
              "byte-identical CSV on rerun: " + ", ".join(f"{k} {'yes' if v else 'NO'}" for k, v in checks.items()))
