"""Experiment protocols: sets of SGD solutions, permuted copies, sweeps and reports.

Every trained network is identified by an integer seed derived from the master seed, so
any report row can be recomputed on its own from the seeds it records.
"""
from __future__ import annotations

import csv
import dataclasses
import io
import itertools
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import yaml

from . import permalg, runtime
from .barrier import ERROR, LOSS, indirect_matrix, midpoint_stats
from .datahub import Dataset, load_dataset
from .netcore import (MLP, SHALLOW_CNN, EvalResult, Network, TrainConfig, TrainingDiverged, average,
                      build_mlp, build_shallow_cnn, evaluate, evaluate_logits, forward, train)
from .permsearch import (BRUTE_FORCE_LIMIT, SA1, SAConfig, brute_force_match, fd_align,
                         grid_bucket_match, incoming_weights, sa_search, sa_search_reduced)

REPORT_COLUMNS = ("arch", "width", "depth", "dataset", "seed_a", "seed_b", "phase", "metric",
                  "split", "barrier", "set", "param")
REPORT_SCHEMA_VERSION = 1

SEARCH_METHODS = ("none", "sa", "sa-reduced", "fd", "grid", "brute")
KINDS = ("compare", "width_sweep", "depth_sweep", "noisy_labels", "theorem1", "sa_scaling",
         "histograms", "ensemble")

IDENTITY_MEMBER = -1  # seed recorded for the unpermuted member of S'


class SpecError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentSpec:
    kind: str = "compare"
    name: str = "experiment"
    arch: str = MLP
    widths: tuple[int, ...] = (16,)
    depths: tuple[int, ...] = (1,)
    dataset: dict = field(default_factory=lambda: {"name": "mnist", "n_train": 4096})
    n_seeds: int = 10
    n_pairs: int | None = None  # None: all C(n, 2) pairs; k: the first k disjoint pairs
    search: str = "none"
    metrics: tuple[str, ...] = (LOSS, ERROR)
    splits: tuple[str, ...] = ("train", "test")
    master_seed: int = 0
    train: dict = field(default_factory=dict)  # TrainConfig overrides
    sa_steps: int = 5000
    sa_t_max: float = 25_000.0
    sa_t_min: float = 2.5
    # kind-specific knobs
    noise_fractions: tuple[float, ...] = (0.0, 0.5)
    step_list: tuple[int, ...] = (10, 100, 1000, 10000)
    n_nets: int = 10
    iid: bool = False
    hist_bins: int = 10
    theorem_d: int = 2
    theorem_h: tuple[int, ...] = (2**6, 2**8, 2**10, 2**12, 2**14)
    theorem_trials: int = 10
    theorem_probes: int = 200
    ensemble_methods: tuple[str, ...] = ("naive-avg", "fd-avg", "logit-ensemble")

    def __post_init__(self):
        for name in ("widths", "depths", "metrics", "splits", "noise_fractions", "step_list",
                     "theorem_h", "ensemble_methods"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if self.kind not in KINDS:
            raise SpecError(f"unknown experiment kind {self.kind!r}; choose from {KINDS}")
        if self.arch not in (MLP, SHALLOW_CNN):
            raise SpecError(f"unknown architecture {self.arch!r}")
        if self.search not in SEARCH_METHODS:
            raise SpecError(f"unknown search method {self.search!r}")
        for name in ("widths", "depths", "metrics", "splits"):
            if not getattr(self, name):
                raise SpecError(f"{name} must be non-empty")
        if self.kind not in ("theorem1",) and self.n_seeds < 2:
            raise SpecError("barrier experiments need n_seeds >= 2")
        if self.n_pairs is not None and not 1 <= self.n_pairs <= self.n_seeds // 2:
            raise SpecError("n_pairs must lie in [1, n_seeds // 2]")
        if any(not 0.0 <= f <= 1.0 for f in self.noise_fractions):
            raise SpecError("noise fractions must lie in [0, 1]")
        if list(self.step_list) != sorted(self.step_list):
            raise SpecError("step_list must be ascending")
        if list(self.theorem_h) != sorted(self.theorem_h):
            raise SpecError("theorem_h must be ascending")

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig.table_defaults(self.arch, self.dataset.get("name", "mnist"),
                                          **{**self.train, "seed": seed})

    def sa_config(self, seed: int, steps: int | None = None, **kw) -> SAConfig:
        return SAConfig(steps=self.sa_steps if steps is None else steps, t_max=self.sa_t_max,
                        t_min=self.sa_t_min, seed=seed, **kw)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentSpec":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise SpecError(f"unknown spec keys: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        return json.loads(json.dumps(dataclasses.asdict(self)))


def load_spec(path) -> ExperimentSpec:
    """Read a YAML (or JSON, which is valid YAML) experiment spec."""
    data = yaml.safe_load(Path(path).read_text())
    if not isinstance(data, dict):
        raise SpecError("spec file must hold a mapping")
    return ExperimentSpec.from_dict(data)


@dataclass
class ExperimentReport:
    name: str
    spec: dict
    rows: list[dict] = field(default_factory=list)
    summary: dict = field(default_factory=dict)

    def add(self, **row) -> None:
        missing = set(REPORT_COLUMNS) - set(row)
        if missing:
            raise KeyError(f"report row missing {sorted(missing)}")
        self.rows.append({k: row[k] for k in REPORT_COLUMNS})

    def select(self, **match) -> list[dict]:
        return [r for r in self.rows if all(r[k] == v for k, v in match.items())]

    def values(self, **match) -> np.ndarray:
        return np.array([r["barrier"] for r in self.select(**match)], dtype=float)

    def aggregate(self) -> list[dict]:
        """Mean/std of the barrier per (set, param, arch, width, depth, phase, metric, split)."""
        keys = ("set", "param", "arch", "width", "depth", "phase", "metric", "split")
        groups: dict[tuple, list[float]] = {}
        for r in self.rows:
            groups.setdefault(tuple(r[k] for k in keys), []).append(r["barrier"])
        out = []
        for key, vals in groups.items():
            v = np.asarray(vals, dtype=float)
            out.append({**dict(zip(keys, key)), "n": len(v), "mean": float(v.mean()),
                        "std": float(v.std(ddof=1)) if len(v) > 1 else 0.0})
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(REPORT_COLUMNS)
        for r in self.rows:
            writer.writerow([repr(r[k]) if isinstance(r[k], float) else r[k] for k in REPORT_COLUMNS])
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps({"schema_version": REPORT_SCHEMA_VERSION, "name": self.name,
                           "columns": list(REPORT_COLUMNS), "spec": self.spec,
                           "aggregate": self.aggregate(), "summary": self.summary},
                          indent=2, sort_keys=True, default=_json_default)

    def write(self, out_dir) -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        csv_path, json_path = out / f"{self.name}.csv", out / f"{self.name}.json"
        csv_path.write_text(self.to_csv())
        json_path.write_text(self.to_json() + "\n")
        return csv_path, json_path


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o)}")


# ---------------------------------------------------------------------------
# seeds and trained-network cache


def derive_seed(master: int, *keys) -> int:
    """Deterministic 31-bit seed for a path of integer/string keys below ``master``."""
    words = [int(master) & 0xFFFFFFFF]
    for k in keys:
        if isinstance(k, str):
            words.extend(k.encode())
        else:
            words.append(int(k) & 0xFFFFFFFF)
    return int(np.random.SeedSequence(words).generate_state(1)[0] >> 1)


_cache: dict[str, Network] = {}


def clear_cache() -> None:
    _cache.clear()


def build_network(arch: str, width: int, depth: int, ds: Dataset, seed: int) -> Network:
    if arch == MLP:
        return build_mlp(depth, width, ds.in_dim, ds.num_classes, seed)
    return build_shallow_cnn(depth, width, ds.input_shape, ds.num_classes, seed)


def train_member(spec: ExperimentSpec, dataset_desc: dict, width: int, depth: int, seed: int) -> Network:
    """One SGD solution; init and shuffling both follow ``seed`` (memoized in-process)."""
    cfg = spec.train_config(seed)
    key = json.dumps([spec.arch, width, depth, dataset_desc, dataclasses.asdict(cfg)], sort_keys=True)
    if key not in _cache:
        ds = load_dataset(dataset_desc)
        net = build_network(spec.arch, width, depth, ds, seed)
        _cache[key] = train(net, ds, cfg)
    return _cache[key]


def member_seeds(spec: ExperimentSpec) -> list[int]:
    return [derive_seed(spec.master_seed, "net", i) for i in range(spec.n_seeds)]


def real_world_set(spec: ExperimentSpec, width: int | None = None, depth: int | None = None,
                   dataset_desc: dict | None = None, failures: list | None = None
                   ) -> tuple[list[Network], list[int]]:
    """Independently seeded SGD solutions (the set S) and their seeds.

    Seeds whose training diverges are skipped and appended to ``failures``.
    """
    width = spec.widths[0] if width is None else width
    depth = spec.depths[0] if depth is None else depth
    desc = spec.dataset if dataset_desc is None else dataset_desc
    seeds = member_seeds(spec)

    def one(seed):
        try:
            return train_member(spec, desc, width, depth, seed)
        except TrainingDiverged as exc:
            return exc

    nets, kept = [], []
    for seed, out in zip(seeds, runtime.pmap(one, seeds)):
        if isinstance(out, TrainingDiverged):
            if failures is not None:
                failures.append({"seed": seed, "width": width, "depth": depth, "error": str(out)})
            continue
        nets.append(out)
        kept.append(seed)
    if len(nets) < 2:
        raise TrainingDiverged(f"fewer than two members trained successfully (width {width}, depth {depth})")
    return nets, kept


def model_set(theta: Network, n: int, seed: int) -> tuple[list[Network], list[int]]:
    """``theta`` plus ``n - 1`` randomly permuted copies (the set S'), with their permutation seeds."""
    if n < 2:
        raise ValueError("n must be >= 2")
    seeds = [IDENTITY_MEMBER] + [derive_seed(seed, "perm", k) for k in range(1, n)]
    nets = [theta] + [permalg.apply(theta, permalg.random_perm(theta, s)) for s in seeds[1:]]
    return nets, seeds


# ---------------------------------------------------------------------------
# pairwise measurements


def pair_indices(n: int, n_pairs: int | None) -> list[tuple[int, int]]:
    if n_pairs is None:
        return list(itertools.combinations(range(n), 2))
    return [(2 * k, 2 * k + 1) for k in range(min(n_pairs, n // 2))]


def align(method: str, net1: Network, net2: Network, ds: Dataset, spec: ExperimentSpec, seed: int
          ) -> tuple[permalg.Permutation, dict]:
    """Permutation of ``net1`` that aligns it to ``net2`` with a two-network method."""
    if method == "sa-reduced":
        res = sa_search_reduced(net1, net2, ds, spec.sa_config(seed, split="train"))
        return res.perms[0], {"evaluations": res.evaluations, "initial": res.initial_energy,
                              "final": res.final_energy}
    if method == "fd":
        return fd_align(net1, net2, ds), {}
    if method == "brute":
        res = brute_force_match(net1, net2, ds)
        return res.perms[0], {"evaluations": res.evaluations, "final": res.final_energy}
    if method == "grid":
        return grid_align(net1, net2, seed), {}
    raise ValueError(f"{method!r} is not a two-network alignment method")


def grid_align(net1: Network, net2: Network, seed: int) -> permalg.Permutation:
    """Layer-wise grid-bucket matching of incoming weight rows (rescaled into the unit box)."""
    current = net1
    per_layer = []
    for layer in range(net1.hidden_layers):
        a, b = incoming_weights(current, layer), incoming_weights(net2, layer)
        d = a.shape[1]
        scale = max(np.abs(a).max(), np.abs(b).max()) * math.sqrt(d) or 1.0
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            m = grid_bucket_match(a / scale, b / scale, sqrt_occupancy_xi(len(a), d), seed)
        # m.perm[i] is the row of net2 matched to row i of net1; gather form for net1 is its inverse
        p = np.argsort(m.perm)
        current = permalg.apply(current, permalg.single_layer(current, layer, p))
        per_layer.append(p)
    return permalg.Permutation(tuple(per_layer))


def _endpoint_evals(nets: Sequence[Network], ds: Dataset, splits) -> list[dict[str, EvalResult]]:
    return runtime.pmap(lambda n: {s: evaluate(n, ds, s) for s in splits}, nets)


def _pair_rows(report: ExperimentReport, base: dict, nets, seeds, ds, spec, phase, pairs,
               ends=None) -> None:
    ends = _endpoint_evals(nets, ds, spec.splits) if ends is None else ends

    def one(ij):
        i, j = ij
        return {s: midpoint_stats(nets[i], nets[j], ds, s, (ends[i][s], ends[j][s])) for s in spec.splits}

    for (i, j), stats in zip(pairs, runtime.pmap(one, pairs)):
        for s in spec.splits:
            for metric in spec.metrics:
                report.add(**base, seed_a=seeds[i], seed_b=seeds[j], phase=phase, metric=metric,
                           split=s, barrier=float(stats[s][metric]))


def _endpoint_summary(nets, seeds, ds, splits) -> list[dict]:
    ends = _endpoint_evals(nets, ds, splits)
    return [{"seed": sd, **{f"{s}_{k}": getattr(e[s], k) for s in splits for k in ("loss", "error")},
             "train_record": n.meta.get("train")} for n, sd, e in zip(nets, seeds, ends)]


def _search_set(nets, seeds, ds, spec, pairs, report, base, stats) -> None:
    """Run the spec's search on a set and add 'after' rows."""
    if spec.search == "none":
        return
    if spec.search == "sa":
        cfg = spec.sa_config(derive_seed(spec.master_seed, "sa", base["set"], base["param"]),
                             objective=SA1, n_models=len(nets))
        res = sa_search(nets, ds, cfg)
        moved = [permalg.apply(n, p) for n, p in zip(nets, res.perms)]
        stats.append({"set": base["set"], "method": "sa", "initial": res.initial_energy,
                      "final": res.final_energy, "evaluations": res.evaluations})
        _pair_rows(report, base, moved, seeds, ds, spec, "after", pairs)
        return
    for i, j in pairs:
        seed = derive_seed(spec.master_seed, "align", seeds[i], seeds[j])
        perm, info = align(spec.search, nets[i], nets[j], ds, spec, seed)
        moved = permalg.apply(nets[i], perm)
        stats.append({"set": base["set"], "seed_a": seeds[i], "seed_b": seeds[j],
                      "method": spec.search, **info})
        _pair_rows(report, base, [moved, nets[j]], [seeds[i], seeds[j]], ds, spec, "after", [(0, 1)])


def _dataset_label(desc: dict) -> str:
    label = desc.get("name", "?")
    if desc.get("noise"):
        label += f"+noise{desc['noise']:g}"
    return label


def _compare_block(spec: ExperimentSpec, report: ExperimentReport, width: int, depth: int,
                   param, dataset_desc: dict | None = None, sets=("S", "S'")) -> dict:
    desc = spec.dataset if dataset_desc is None else dataset_desc
    ds = load_dataset(desc)
    failures: list = []
    S, s_seeds = real_world_set(spec, width, depth, desc, failures)
    block = {"width": width, "depth": depth, "param": param, "failures": failures, "search": []}
    members = {"S": (S, s_seeds)}
    if "S'" in sets:
        perm_seed = derive_seed(spec.master_seed, "sprime", width, depth)
        members["S'"] = model_set(S[0], len(S), perm_seed)
        block["sprime_seed_network"] = s_seeds[0]
        block["sprime_perm_seed"] = perm_seed
    for name in sets:
        nets, seeds = members[name]
        base = dict(arch=spec.arch, width=width, depth=depth, dataset=_dataset_label(desc),
                    set=name, param=param)
        pairs = pair_indices(len(nets), spec.n_pairs)
        _pair_rows(report, base, nets, seeds, ds, spec, "before", pairs)
        _search_set(nets, seeds, ds, spec, pairs, report, base, block["search"])
    block["endpoints"] = _endpoint_summary(S, s_seeds, ds, spec.splits)
    return block


# ---------------------------------------------------------------------------
# protocols


def _new_report(spec: ExperimentSpec, suffix: str = "") -> ExperimentReport:
    return ExperimentReport(spec.name + suffix, spec.to_dict())


def compare_s_sprime(spec: ExperimentSpec) -> ExperimentReport:
    """Mean pairwise barrier of S and S' for every (width, depth) in the spec."""
    report = _new_report(spec)
    report.summary["blocks"] = [_compare_block(spec, report, w, d, f"w{w}d{d}")
                                for w in spec.widths for d in spec.depths]
    return report


def width_sweep(spec: ExperimentSpec) -> ExperimentReport:
    report = _new_report(spec)
    report.summary["blocks"] = [_compare_block(spec, report, w, spec.depths[0], w) for w in spec.widths]
    return report


def depth_sweep(spec: ExperimentSpec) -> ExperimentReport:
    report = _new_report(spec)
    report.summary["blocks"] = [_compare_block(spec, report, spec.widths[0], d, d) for d in spec.depths]
    return report


def noisy_desc(spec: ExperimentSpec, fraction: float) -> dict:
    if fraction == 0:
        return dict(spec.dataset)
    return {**spec.dataset, "noise": float(fraction),
            "noise_seed": derive_seed(spec.master_seed, "noise")}


def noisy_label_experiment(spec: ExperimentSpec, fractions: Sequence[float] | None = None) -> ExperimentReport:
    """Barriers of S at each label-noise fraction (ascending)."""
    fractions = sorted(spec.noise_fractions if fractions is None else fractions)
    if any(not 0.0 <= f <= 1.0 for f in fractions):
        raise ValueError("fractions must lie in [0, 1]")
    report = _new_report(spec)
    report.summary["blocks"] = [
        _compare_block(spec, report, spec.widths[0], spec.depths[0], float(f), noisy_desc(spec, f), ("S",))
        for f in fractions]
    return report


def sa_scaling_study(spec: ExperimentSpec, step_list: Sequence[int] | None = None) -> ExperimentReport:
    """SA-reduced on one fixed pair at growing step budgets, each a fresh chain with the same seed."""
    steps = list(spec.step_list if step_list is None else step_list)
    if steps != sorted(steps):
        raise ValueError("step_list must be ascending")
    report = _new_report(spec)
    ds = load_dataset(spec.dataset)
    width, depth = spec.widths[0], spec.depths[0]
    seeds = member_seeds(spec)[:2]
    net1, net2 = (train_member(spec, spec.dataset, width, depth, s) for s in seeds)
    chain_seed = derive_seed(spec.master_seed, "sa-scaling")
    metric = spec.metrics[0]
    base = dict(arch=spec.arch, width=width, depth=depth, dataset=_dataset_label(spec.dataset),
                seed_a=seeds[0], seed_b=seeds[1], metric=metric, split="train", set="S")
    initial = midpoint_stats(net1, net2, ds, "train")[metric]
    report.add(**base, phase="before", barrier=float(initial), param=0)
    barriers = []
    for s in steps:
        res = sa_search_reduced(net1, net2, ds, spec.sa_config(chain_seed, steps=s, metric=metric))
        barriers.append(res.final_energy)
        report.add(**base, phase="after", barrier=float(res.final_energy), param=int(s))
    ratios = [barriers[k] / barriers[k + 1] if barriers[k + 1] > 0 else math.inf
              for k in range(len(barriers) - 1)]
    report.summary.update(steps=steps, barriers=barriers, initial=initial, ratios=ratios,
                          chain_seed=chain_seed)
    return report


def barrier_histograms(spec: ExperimentSpec, n_nets: int | None = None, iid: bool | None = None) -> ExperimentReport:
    """Direct, indirect and post-search barriers over many small networks, plus histograms.

    ``iid=True`` pairs network ``i`` with ``i + n/2`` only, so the direct samples are independent.
    """
    n = spec.n_nets if n_nets is None else n_nets
    iid = spec.iid if iid is None else iid
    if n < 3:
        raise ValueError("n_nets must be >= 3")
    hspec = dataclasses.replace(spec, n_seeds=n, n_pairs=None)
    ds = load_dataset(spec.dataset)
    width, depth = spec.widths[0], spec.depths[0]
    nets, seeds = real_world_set(hspec, width, depth)
    m = len(nets)
    metric, split = spec.metrics[0], spec.splits[0]
    pairs = [(i, i + m // 2) for i in range(m // 2)] if iid else list(itertools.combinations(range(m), 2))
    ends = _endpoint_evals(nets, ds, [split])
    direct = np.zeros((m, m))
    for (i, j), st in zip(pairs, runtime.pmap(
            lambda ij: midpoint_stats(nets[ij[0]], nets[ij[1]], ds, split,
                                      (ends[ij[0]][split], ends[ij[1]][split])), pairs)):
        direct[i, j] = direct[j, i] = st[metric]
    base = dict(arch=spec.arch, width=width, depth=depth, dataset=_dataset_label(spec.dataset),
                metric=metric, split=split, set="S", param=m)
    report = _new_report(spec)
    for i, j in pairs:
        report.add(**base, seed_a=seeds[i], seed_b=seeds[j], phase="direct", barrier=float(direct[i, j]))
    indirect = None
    if not iid:
        indirect = indirect_matrix(direct)
        for i, j in pairs:
            report.add(**base, seed_a=seeds[i], seed_b=seeds[j], phase="indirect",
                       barrier=float(indirect[i, j]))
    method = "brute" if width <= BRUTE_FORCE_LIMIT and depth == 1 else (
        spec.search if spec.search not in ("none", "sa") else "sa-reduced")

    def after(ij):
        i, j = ij
        perm, _ = align(method, nets[i], nets[j], ds, spec, derive_seed(spec.master_seed, "align", seeds[i], seeds[j]))
        moved = permalg.apply(nets[i], perm)
        return midpoint_stats(moved, nets[j], ds, split)[metric]

    post = runtime.pmap(after, pairs)
    for (i, j), v in zip(pairs, post):
        report.add(**base, seed_a=seeds[i], seed_b=seeds[j], phase="after", barrier=float(v))
    hists = {}
    for phase in ("direct", "indirect", "after"):
        vals = report.values(phase=phase)
        if len(vals):
            counts, edges = np.histogram(vals, bins=spec.hist_bins)
            hists[phase] = {"counts": counts.tolist(), "edges": edges.tolist()}
    report.summary.update(method=method, iid=iid, histograms=hists, direct=direct.tolist(),
                          indirect=None if indirect is None else indirect.tolist())
    return report


# ---------------------------------------------------------------------------
# ensembles


NAIVE_AVG = "naive-avg"
FD_AVG = "fd-avg"
LOGIT_ENSEMBLE = "logit-ensemble"


def ensemble_eval(netA: Network, netB: Network, dataset: Dataset, method: str,
                  split: str = "test") -> EvalResult:
    if not netA.same_architecture(netB):
        raise ValueError("networks have different architectures")
    if method == NAIVE_AVG:
        return evaluate(average([netA, netB]), dataset, split)
    if method == FD_AVG:
        moved = permalg.apply(netA, fd_align(netA, netB, dataset))
        return evaluate(average([moved, netB]), dataset, split)
    if method == LOGIT_ENSEMBLE:
        x, y = dataset.split(split)
        return evaluate_logits(lambda xb: 0.5 * (forward(netA, xb) + forward(netB, xb)), x, y)
    raise ValueError(f"unknown ensemble method {method!r}")


def ensemble_experiment(spec: ExperimentSpec) -> ExperimentReport:
    report = _new_report(spec)
    ds = load_dataset(spec.dataset)
    width, depth = spec.widths[0], spec.depths[0]
    nets, seeds = real_world_set(spec, width, depth)
    rows = []
    for i, j in pair_indices(len(nets), spec.n_pairs or len(nets) // 2):
        for split in spec.splits:
            res = {m: ensemble_eval(nets[i], nets[j], ds, m, split) for m in spec.ensemble_methods}
            ends = [evaluate(nets[k], ds, split) for k in (i, j)]
            for m, r in res.items():
                for metric in spec.metrics:
                    report.add(arch=spec.arch, width=width, depth=depth, dataset=_dataset_label(spec.dataset),
                               seed_a=seeds[i], seed_b=seeds[j], phase=m, metric=metric, split=split,
                               barrier=float(getattr(r, metric)), set="ensemble", param=width)
            rows.append({"seed_a": seeds[i], "seed_b": seeds[j], "split": split,
                         "endpoints": [dataclasses.asdict(e) for e in ends],
                         **{m: dataclasses.asdict(r) for m, r in res.items()}})
    report.summary["pairs"] = rows
    return report


# ---------------------------------------------------------------------------
# random-init construction check


def sqrt_occupancy_xi(h: int, d: int) -> float:
    """Cell half-width giving about sqrt(h) rows per occupied cell: m = round(h^(1/(2d))) cells per axis."""
    m = max(1, round(h ** (1.0 / (2 * d))))
    return (1.0 / math.sqrt(d)) / m


XI_RULES: dict[str, Callable[[int, int], float]] = {"sqrt-occupancy": sqrt_occupancy_xi}


def two_layer_output(v: np.ndarray, U: np.ndarray, x: np.ndarray) -> np.ndarray:
    """v^T relu(U x) for a batch of inputs ``x`` (rows)."""
    return np.maximum(x @ U.T, 0.0) @ v


def midpoint_deviation(v, U, v2, U2, x) -> np.ndarray:
    """|f at the averaged parameters - average of the two outputs| per probe."""
    mid = two_layer_output(0.5 * v + 0.5 * v2, 0.5 * U + 0.5 * U2, x)
    return np.abs(mid - 0.5 * two_layer_output(v, U, x) - 0.5 * two_layer_output(v2, U2, x))


def sample_probes(n: int, d: int, rng: np.random.Generator) -> np.ndarray:
    x = rng.standard_normal((n, d))
    return x * (math.sqrt(d) / np.linalg.norm(x, axis=1, keepdims=True))


def theorem1_check(d: int = 2, h_list: Sequence[int] = (2**6, 2**8, 2**10, 2**12, 2**14), trials: int = 10,
                   probe_count: int = 200, xi_rule: Callable[[int, int], float] | str = sqrt_occupancy_xi,
                   seed: int = 0, name: str = "theorem1") -> ExperimentReport:
    """Midpoint deviation of random two-layer ReLU nets after grid-bucket matching, per width h.

    U entries are uniform in [-1/sqrt(d), 1/sqrt(d)], v entries uniform in [-1/sqrt(h), 1/sqrt(h)].
    One permutation (found on the rows of U', with v' as the pairing key) reorders (v', U').
    """
    h_list = list(h_list)
    if h_list != sorted(h_list):
        raise ValueError("h_list must be ascending")
    if trials < 5:
        raise ValueError("trials must be >= 5")
    if isinstance(xi_rule, str):
        if xi_rule not in XI_RULES:
            raise ValueError(f"unknown xi rule {xi_rule!r}")
        xi_rule = XI_RULES[xi_rule]
    r = 1.0 / math.sqrt(d)
    report = ExperimentReport(name, {"d": d, "h_list": h_list, "trials": trials,
                                     "probe_count": probe_count, "seed": seed})
    medians, maxima, leftovers = [], [], []
    for h in h_list:
        xi = xi_rule(h, d)
        if not xi > 0:
            raise ValueError(f"xi rule returned {xi} for h={h}")
        pooled, left = [], []
        for t in range(trials):
            ts = derive_seed(seed, "theorem1", h, t)
            rng = np.random.default_rng(ts)
            U, U_p = rng.uniform(-r, r, (h, d)), rng.uniform(-r, r, (h, d))
            s = 1.0 / math.sqrt(h)
            v, v_p = rng.uniform(-s, s, h), rng.uniform(-s, s, h)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                m = grid_bucket_match(U, U_p, xi, rng, keys=(v, v_p))
            dev = midpoint_deviation(v, U, v_p[m.perm], U_p[m.perm], sample_probes(probe_count, d, rng))
            pooled.append(dev)
            left.append(m.n_leftover)
            report.add(arch="two_layer_relu", width=h, depth=1, dataset=f"uniform_d{d}", seed_a=ts, seed_b=ts,
                       phase="after", metric="deviation_median", split="probe", barrier=float(np.median(dev)),
                       set="theorem1", param=h)
        allv = np.concatenate(pooled)
        medians.append(float(np.median(allv)))
        maxima.append(float(allv.max()))
        leftovers.append(float(np.mean(left)))
    slope = float(np.polyfit(np.log(h_list), np.log(medians), 1)[0]) if len(h_list) > 1 else float("nan")
    report.summary.update(h=h_list, median_deviation=medians, max_deviation=maxima,
                          mean_leftover=leftovers, slope=slope, predicted_rate=-1.0 / (2 * d + 4),
                          xi=[xi_rule(h, d) for h in h_list])
    return report


# ---------------------------------------------------------------------------
# dispatch


def run_experiment(spec: ExperimentSpec) -> ExperimentReport:
    if spec.kind == "compare":
        return compare_s_sprime(spec)
    if spec.kind == "width_sweep":
        return width_sweep(spec)
    if spec.kind == "depth_sweep":
        return depth_sweep(spec)
    if spec.kind == "noisy_labels":
        return noisy_label_experiment(spec)
    if spec.kind == "sa_scaling":
        return sa_scaling_study(spec)
    if spec.kind == "histograms":
        return barrier_histograms(spec)
    if spec.kind == "ensemble":
        return ensemble_experiment(spec)
    return theorem1_check(spec.theorem_d, spec.theorem_h, spec.theorem_trials, spec.theorem_probes,
                          seed=spec.master_seed, name=spec.name)
