import csv
import io
import itertools
import json
import math

import numpy as np
import pytest

from permbasin import labhub
from permbasin.barrier import midpoint_stats
from permbasin.datahub import load_dataset
from permbasin.labhub import (REPORT_COLUMNS, ExperimentReport, ExperimentSpec, SpecError, derive_seed,
                              ensemble_eval, load_spec, midpoint_deviation, model_set, run_experiment,
                              sample_probes, theorem1_check, train_member)
from permbasin.netcore import build_mlp, evaluate, forward

BLOBS = {"name": "blobs", "n": 300, "d": 5, "classes": 3, "separation": 3.0, "seed": 2}


def _spec(**kw):
    base = dict(kind="compare", name="t", widths=(4,), depths=(1,), dataset=BLOBS, n_seeds=3,
                train={"lr": 0.05, "max_epochs": 25})
    base.update(kw)
    return ExperimentSpec(**base)


def test_derive_seed_properties():
    assert derive_seed(0, "net", 1) == derive_seed(0, "net", 1)
    seeds = {derive_seed(0, "net", i) for i in range(100)}
    assert len(seeds) == 100 and all(0 <= s < 2**31 for s in seeds)
    assert derive_seed(1, "net", 0) != derive_seed(0, "net", 0)
    assert derive_seed(0, "net", 0) != derive_seed(0, "sa", 0)


def test_spec_validation():
    with pytest.raises(SpecError):
        _spec(kind="nope")
    with pytest.raises(SpecError):
        _spec(widths=())
    with pytest.raises(SpecError):
        _spec(n_seeds=1)
    with pytest.raises(SpecError):
        _spec(search="hungarian")
    with pytest.raises(SpecError):
        _spec(n_pairs=2)  # only one disjoint pair among 3 seeds
    with pytest.raises(SpecError):
        _spec(noise_fractions=(1.5,))
    with pytest.raises(SpecError):
        ExperimentSpec.from_dict({"kind": "compare", "widhts": [4]})


def test_spec_yaml_round_trip(tmp_path):
    spec = _spec(search="fd", n_pairs=1)
    path = tmp_path / "s.yaml"
    path.write_text("kind: compare\nname: t\nwidths: [4]\ndepths: [1]\nn_seeds: 3\nn_pairs: 1\n"
                    "search: fd\ntrain: {lr: 0.05, max_epochs: 25}\n"
                    f"dataset: {json.dumps(BLOBS)}\n")
    assert load_spec(path) == spec
    assert ExperimentSpec.from_dict(spec.to_dict()) == spec
    path.write_text("- 1\n- 2\n")
    with pytest.raises(SpecError):
        load_spec(path)


def test_real_world_set_is_seeded():
    spec = _spec(n_seeds=2)
    nets, seeds = labhub.real_world_set(spec)
    assert seeds == labhub.member_seeds(spec) and seeds[0] != seeds[1]
    assert not np.array_equal(nets[0].layers[0].weight, nets[1].layers[0].weight)
    labhub.clear_cache()
    again, _ = labhub.real_world_set(spec)
    assert all(np.array_equal(a, b) for a, b in zip(again[0].params(), nets[0].params()))
    for net in nets:
        rec = net.meta["train"]
        assert rec["reached_stop_loss"] or rec["epochs"] == 25


def test_model_set_members_are_functionally_identical(blobs):
    theta = build_mlp(2, 6, blobs.in_dim, 3, seed=3)
    nets, seeds = model_set(theta, 4, seed=1)
    assert nets[0] is theta and seeds[0] == labhub.IDENTITY_MEMBER and len(set(seeds)) == 4
    probes = np.random.default_rng(0).normal(size=(100, blobs.in_dim))
    ref = forward(theta, probes, canonical=True)
    for net in nets[1:]:
        assert np.max(np.abs(forward(net, probes, canonical=True) - ref)) == 0.0
        assert evaluate(net, blobs, "test", canonical=True) == evaluate(theta, blobs, "test", canonical=True)
    mids = [midpoint_stats(nets[i], nets[j], blobs)["loss"] for i, j in itertools.combinations(range(4), 2)]
    assert any(abs(v) > 1e-6 for v in mids)


def test_model_set_width_one(blobs):
    theta = build_mlp(1, 1, blobs.in_dim, 3, seed=3)
    nets, _ = model_set(theta, 2, seed=0)
    assert midpoint_stats(nets[0], nets[1], blobs)["loss"] == 0.0
    with pytest.raises(ValueError):
        model_set(theta, 1, seed=0)


def test_pair_indices():
    assert labhub.pair_indices(4, None) == [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)]
    assert labhub.pair_indices(10, 5) == [(0, 1), (2, 3), (4, 5), (6, 7), (8, 9)]


def test_compare_row_counts_and_rederivation():
    spec = _spec(search="fd")
    report = run_experiment(spec)
    per = 3 * len(spec.splits) * len(spec.metrics)  # C(3,2) pairs
    for s in ("S", "S'"):
        for phase in ("before", "after"):
            assert len(report.select(set=s, phase=phase)) == per
    block = report.summary["blocks"][0]
    assert block["sprime_seed_network"] == report.select(set="S")[0]["seed_a"]
    # any row can be recomputed from its recorded seeds
    row = report.select(set="S", phase="before", split="test", metric="error")[-1]
    ds = load_dataset(BLOBS)
    labhub.clear_cache()
    a = train_member(spec, BLOBS, 4, 1, row["seed_a"])
    b = train_member(spec, BLOBS, 4, 1, row["seed_b"])
    assert midpoint_stats(a, b, ds, "test")["error"] == row["barrier"]


def test_width_one_model_set_has_no_barrier():
    report = run_experiment(_spec(widths=(1,), metrics=("loss",), splits=("train",)))
    assert len(report.values(set="S'")) == 3 and np.all(report.values(set="S'") == 0.0)


def test_sweeps_one_block_per_value():
    rep = run_experiment(_spec(kind="width_sweep", widths=(2, 3), metrics=("loss",), splits=("train",)))
    assert sorted({r["param"] for r in rep.rows}) == [2, 3]
    rep = run_experiment(_spec(kind="depth_sweep", depths=(1, 2), metrics=("loss",), splits=("train",)))
    assert sorted({r["depth"] for r in rep.rows}) == [1, 2]


def test_noisy_labels_zero_fraction_matches_plain():
    spec = _spec(kind="noisy_labels", noise_fractions=(0.5, 0.0), metrics=("loss",), splits=("train",))
    rep = run_experiment(spec)
    assert [b["param"] for b in rep.summary["blocks"]] == [0.0, 0.5]
    plain = run_experiment(_spec(metrics=("loss",), splits=("train",)))
    assert np.array_equal(rep.values(param=0.0), plain.values(set="S"))
    assert {r["set"] for r in rep.rows} == {"S"}


def test_sa_scaling_rows():
    rep = run_experiment(_spec(kind="sa_scaling", step_list=(5, 20), metrics=("loss",), sa_t_max=1.0,
                               sa_t_min=1e-3))
    assert [r["param"] for r in rep.rows] == [0, 5, 20]
    assert rep.summary["barriers"][1] <= rep.rows[0]["barrier"] + 1e-12 or rep.summary["barriers"][1] == 0
    with pytest.raises(ValueError):
        labhub.sa_scaling_study(_spec(kind="sa_scaling"), [20, 5])


def test_histograms_small_set():
    spec = _spec(kind="histograms", n_nets=3, metrics=("loss",), splits=("train",))
    rep = run_experiment(spec)
    assert len(rep.select(phase="direct")) == 3 and len(rep.select(phase="indirect")) == 3
    assert len(rep.select(phase="after")) == 3 and rep.summary["method"] == "brute"
    d = np.array(rep.summary["direct"])
    ind = np.array(rep.summary["indirect"])
    for i, j in itertools.combinations(range(3), 2):
        k = 3 - i - j
        assert ind[i, j] <= max(d[i, k], d[k, j])
    assert sum(rep.summary["histograms"]["direct"]["counts"]) == 3
    iid = labhub.barrier_histograms(spec, n_nets=4, iid=True)
    assert len(iid.select(phase="direct")) == 2 and not iid.select(phase="indirect")


def test_ensemble_equal_nets(blobs):
    net = build_mlp(1, 5, blobs.in_dim, 3, seed=1)
    ref = evaluate(net, blobs, "test")
    for method in ("naive-avg", "fd-avg", "logit-ensemble"):
        out = ensemble_eval(net, net, blobs, method)
        assert out.loss == pytest.approx(ref.loss, abs=1e-12) and out.error == ref.error
    with pytest.raises(ValueError):
        ensemble_eval(net, net, blobs, "median")


def test_ensemble_experiment_rows():
    rep = run_experiment(_spec(kind="ensemble", n_seeds=2, metrics=("error",), splits=("test",)))
    assert {r["phase"] for r in rep.rows} == {"naive-avg", "fd-avg", "logit-ensemble"}


# -- random two-layer construction ---------------------------------------------


def test_midpoint_deviation_identity():
    rng = np.random.default_rng(0)
    U, v = rng.uniform(-0.7, 0.7, (32, 2)), rng.uniform(-0.2, 0.2, 32)
    x = sample_probes(50, 2, rng)
    assert np.allclose(np.linalg.norm(x, axis=1), math.sqrt(2))
    assert np.all(midpoint_deviation(v, U, v, U, x) == 0)


def test_theorem1_small_run():
    rep = theorem1_check(d=2, h_list=[16, 256], trials=5, probe_count=20, seed=3)
    assert len(rep.rows) == 10
    s = rep.summary
    assert len(s["median_deviation"]) == 2 and s["predicted_rate"] == -0.125
    assert all(m <= mx for m, mx in zip(s["median_deviation"], s["max_deviation"]))
    again = theorem1_check(d=2, h_list=[16, 256], trials=5, probe_count=20, seed=3)
    assert again.to_csv() == rep.to_csv()


@pytest.mark.parametrize("kw", [dict(trials=4), dict(h_list=[256, 16]), dict(xi_rule="bogus"),
                                dict(xi_rule=lambda h, d: 0.0)])
def test_theorem1_rejects(kw):
    args = dict(d=2, h_list=[16, 256], trials=5, probe_count=5)
    args.update(kw)
    with pytest.raises(ValueError):
        theorem1_check(**args)


# -- reports -------------------------------------------------------------------


def test_report_csv_and_json(tmp_path):
    rep = ExperimentReport("r", {"k": 1})
    row = dict(arch="mlp", width=4, depth=1, dataset="blobs", seed_a=1, seed_b=2, phase="before",
               metric="loss", split="train", barrier=0.1, set="S", param=4)
    rep.add(**row)
    rep.add(**{**row, "barrier": 0.30000000000000004})
    with pytest.raises(KeyError):
        rep.add(arch="mlp")
    csv_path, json_path = rep.write(tmp_path)
    rows = list(csv.reader(io.StringIO(csv_path.read_text())))
    assert tuple(rows[0]) == REPORT_COLUMNS
    assert float(rows[2][REPORT_COLUMNS.index("barrier")]) == 0.30000000000000004
    summary = json.loads(json_path.read_text())
    agg = summary["aggregate"][0]
    assert summary["schema_version"] == 1 and agg["n"] == 2
    assert agg["mean"] == pytest.approx(0.2) and agg["std"] == pytest.approx(np.std([0.1, 0.3], ddof=1))
