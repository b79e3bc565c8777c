"""Command-line entry point: ``permbasin <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
Environment overrides: PERMBASIN_OUT_DIR, PERMBASIN_THREADS.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from . import checkpoint, labhub, permalg, permsearch, runtime
from .barrier import ERROR, LOSS, barrier_value, loss_profile, midpoint_stats
from .datahub import load_dataset
from .netcore import MLP, SHALLOW_CNN, TrainConfig, evaluate, train

OUT_DIR_ENV = "PERMBASIN_OUT_DIR"

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _global_flags() -> argparse.ArgumentParser:
    # SUPPRESS lets the flags appear before or after the subcommand without clobbering each other
    p = _Parser(add_help=False, argument_default=argparse.SUPPRESS)
    p.add_argument("--seed", type=int, help="master seed (default 0)")
    p.add_argument("--threads", type=int, help="worker threads; 1 is bit-reproducible (default 1)")
    p.add_argument("--out-dir", help="output directory (default ./out)")
    p.add_argument("--metric", choices=(LOSS, ERROR), help="barrier metric (default loss)")
    p.add_argument("--split", choices=("train", "test"), help="evaluation split (default train)")
    return p


GLOBAL_DEFAULTS = {"seed": 0, "threads": None, "out_dir": None, "metric": LOSS, "split": "train"}


def _dataset_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--dataset", help="dataset descriptor: a name (mnist, blobs) or a JSON object")


def build_parser() -> argparse.ArgumentParser:
    common = _global_flags()
    parser = _Parser(prog="permbasin", parents=[common],
                     description="Loss barriers between trained networks and permutation search.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, required=True)

    p = sub.add_parser("train", parents=[common], help="train one network and save a checkpoint")
    p.add_argument("output", help="checkpoint path to write")
    p.add_argument("--arch", choices=(MLP, SHALLOW_CNN), default=MLP)
    p.add_argument("--width", type=int, default=16)
    p.add_argument("--depth", type=int, default=1)
    _dataset_args(p)
    p.add_argument("--max-epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--stop-loss", type=float)

    p = sub.add_parser("eval", parents=[common], help="loss and error of a checkpoint")
    p.add_argument("checkpoint")
    _dataset_args(p)

    p = sub.add_parser("barrier", parents=[common], help="barrier profile between two checkpoints")
    p.add_argument("net1")
    p.add_argument("net2")
    p.add_argument("--grid", type=int, default=11, help="odd number of alpha points")
    _dataset_args(p)

    p = sub.add_parser("permute", parents=[common], help="apply a permutation file to a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("perm", help="JSON list of per-layer index lists")
    p.add_argument("-o", "--output", help="checkpoint to write (default <out-dir>/permuted.ckpt)")

    p = sub.add_parser("search", parents=[common], help="search for an aligning permutation")
    p.add_argument("method", choices=("sa", "sa-reduced", "fd", "grid", "brute"))
    p.add_argument("checkpoints", nargs="+")
    p.add_argument("--steps", type=int, default=5000)
    p.add_argument("--t-max", type=float, default=25_000.0)
    p.add_argument("--t-min", type=float, default=2.5)
    p.add_argument("--objective", choices=(permsearch.SA1, permsearch.SA2), default=permsearch.SA1)
    p.add_argument("--width-limit", type=int, default=permsearch.BRUTE_FORCE_LIMIT)
    _dataset_args(p)

    p = sub.add_parser("experiment", parents=[common], help="run an experiment spec (YAML)")
    p.add_argument("spec")

    p = sub.add_parser("theorem1", parents=[common], help="grid-bucket matching deviation vs width")
    p.add_argument("--d", type=int, default=2)
    p.add_argument("--h", type=int, nargs="+", default=[2**6, 2**8, 2**10, 2**12, 2**14])
    p.add_argument("--trials", type=int, default=10)
    p.add_argument("--probes", type=int, default=200)
    return parser


def _settings(args) -> dict:
    g = {k: getattr(args, k, v) for k, v in GLOBAL_DEFAULTS.items()}
    if g["threads"] is None:
        g["threads"] = runtime.threads_from_env(1)
    if g["out_dir"] is None:
        g["out_dir"] = os.environ.get(OUT_DIR_ENV, "out")
    if g["threads"] < 1:
        raise UsageError("--threads must be >= 1")
    return g


def _parse_dataset(text: str | None, fallback: dict | None) -> dict:
    if text is None:
        if fallback is None:
            return {"name": "mnist", "n_train": 4096}
        return fallback
    text = text.strip()
    if text.startswith("{"):
        try:
            return json.loads(text)
        except json.JSONDecodeError as exc:
            raise UsageError(f"--dataset is not valid JSON: {exc}") from exc
    return {"name": text}


def _load(path):
    net, meta = checkpoint.load_checkpoint(path)
    return net, meta


def _dataset_for(args, meta: dict) -> dict:
    return _parse_dataset(getattr(args, "dataset", None), meta.get("dataset"))


def _emit(obj) -> None:
    print(json.dumps(obj, sort_keys=True))


def cmd_train(args, g) -> None:
    desc = _parse_dataset(args.dataset, None)
    ds = load_dataset(desc)
    overrides = {k: v for k, v in (("max_epochs", args.max_epochs), ("lr", args.lr),
                                   ("batch_size", args.batch_size), ("stop_loss", args.stop_loss))
                 if v is not None}
    cfg = TrainConfig.table_defaults(args.arch, desc.get("name", "mnist"), seed=g["seed"], **overrides)
    net = labhub.build_network(args.arch, args.width, args.depth, ds, g["seed"])
    net = train(net, ds, cfg)
    meta = dict(net.meta, dataset=desc)
    Path(args.output).parent.mkdir(parents=True, exist_ok=True)
    checkpoint.save_checkpoint(args.output, net, meta)
    _emit({"checkpoint": str(args.output), **meta["train"]})


def cmd_eval(args, g) -> None:
    net, meta = _load(args.checkpoint)
    res = evaluate(net, load_dataset(_dataset_for(args, meta)), g["split"])
    _emit({"split": g["split"], "loss": res.loss, "error": res.error})


def cmd_barrier(args, g) -> None:
    net1, meta = _load(args.net1)
    net2, _ = _load(args.net2)
    ds = load_dataset(_dataset_for(args, meta))
    prof = loss_profile(net1, net2, ds, args.grid, g["metric"], g["split"])
    out = Path(g["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    prof.to_csv(out / "barrier_profile.csv")
    print(f"barrier {barrier_value(prof)!r}")


def cmd_permute(args, g) -> None:
    net, meta = _load(args.checkpoint)
    perm = checkpoint.load_perm(args.perm)
    moved = permalg.apply(net, perm)
    target = Path(args.output) if args.output else Path(g["out_dir"]) / "permuted.ckpt"
    target.parent.mkdir(parents=True, exist_ok=True)
    meta.pop("perm", None)
    checkpoint.save_checkpoint(target, moved, meta, perm)
    _emit({"checkpoint": str(target)})


def cmd_search(args, g) -> None:
    loaded = [_load(p) for p in args.checkpoints]
    nets = [n for n, _ in loaded]
    ds = load_dataset(_dataset_for(args, loaded[0][1]))
    out = Path(g["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    if args.method == "sa":
        cfg = permsearch.SAConfig(steps=args.steps, t_max=args.t_max, t_min=args.t_min,
                                  objective=args.objective, n_models=len(nets), seed=g["seed"],
                                  metric=g["metric"], split=g["split"])
        res = permsearch.sa_search(nets, ds, cfg)
        (out / "search.json").write_text(res.to_json() + "\n")
        (out / "search_trace.csv").write_text(res.trace_csv())
        for k, p in enumerate(res.perms):
            checkpoint.save_perm(out / f"perm_{k}.json", p)
        _emit({"method": "sa", "initial_energy": res.initial_energy, "final_energy": res.final_energy})
        return
    if len(nets) != 2:
        raise UsageError(f"search {args.method} takes exactly two checkpoints")
    net1, net2 = nets
    before = midpoint_stats(net1, net2, ds, g["split"])[g["metric"]]
    extra = {}
    if args.method == "sa-reduced":
        cfg = permsearch.SAConfig(steps=args.steps, t_max=args.t_max, t_min=args.t_min,
                                  seed=g["seed"], metric=g["metric"], split=g["split"])
        res = permsearch.sa_search_reduced(net1, net2, ds, cfg)
        perm = res.perms[0]
        (out / "search_trace.csv").write_text(res.trace_csv())
        extra["evaluations"] = res.evaluations
    elif args.method == "brute":
        res = permsearch.brute_force_match(net1, net2, ds, args.width_limit, g["metric"], g["split"])
        perm = res.perms[0]
        extra["evaluations"] = res.evaluations
    elif args.method == "fd":
        perm = permsearch.fd_align(net1, net2, ds)
    else:
        perm = labhub.grid_align(net1, net2, g["seed"])
    after = midpoint_stats(permalg.apply(net1, perm), net2, ds, g["split"])[g["metric"]]
    checkpoint.save_perm(out / "perm.json", perm)
    result = {"method": args.method, "barrier_before": before, "barrier_after": after,
              "metric": g["metric"], "split": g["split"], "seed": g["seed"], **extra}
    (out / "search.json").write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
    _emit(result)


def cmd_experiment(args, g) -> None:
    try:
        spec = labhub.load_spec(args.spec)
    except labhub.SpecError as exc:
        raise UsageError(str(exc)) from exc
    if getattr(args, "seed", None) is not None:
        spec = labhub.ExperimentSpec.from_dict({**spec.to_dict(), "master_seed": g["seed"]})
    report = labhub.run_experiment(spec)
    csv_path, json_path = report.write(g["out_dir"])
    _emit({"csv": str(csv_path), "json": str(json_path), "rows": len(report.rows)})


def cmd_theorem1(args, g) -> None:
    report = labhub.theorem1_check(args.d, args.h, args.trials, args.probes, seed=g["seed"])
    csv_path, json_path = report.write(g["out_dir"])
    s = report.summary
    _emit({"csv": str(csv_path), "median_deviation": s["median_deviation"], "slope": s["slope"],
           "predicted_rate": s["predicted_rate"]})


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "barrier": cmd_barrier, "permute": cmd_permute,
            "search": cmd_search, "experiment": cmd_experiment, "theorem1": cmd_theorem1}


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        g = _settings(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if not exc.code else EXIT_USAGE
    runtime.set_threads(g["threads"])
    try:
        COMMANDS[args.command](args, g)
    except UsageError as exc:
        print(f"permbasin: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - every runtime failure maps to exit 2
        print(f"permbasin: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
