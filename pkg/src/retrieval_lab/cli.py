"""Command line entry point: ``retrieval-lab <command> [options]``."""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__

log = logging.getLogger("retrieval_lab")

EXIT_USAGE = 2
EXIT_FAILED = 1
EXIT_DIVERGED = 3


class UsageError(Exception):
    pass


# -- helpers -----------------------------------------------------------------------


def _load_config(path: str | None) -> dict:
    if not path:
        return {}
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc


def _set(d: dict, dotted: str, value) -> None:
    if value is None:
        return
    *head, last = dotted.split(".")
    for k in head:
        d = d.setdefault(k, {})
    d[last] = value


def _need_seed(args, cfg: dict, key: str = "seed") -> int:
    seed = args.seed if args.seed is not None else cfg.get(key)
    if seed is None:
        raise UsageError(f"{args.command}: --seed is required (or set \"{key}\" in the config)")
    return int(seed)


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


def write_manifest(out: Path, command: str, cfg: dict, seed: int | None) -> Path:
    """Record what produced the outputs in ``out`` (no timestamps, so reruns match)."""
    out.mkdir(parents=True, exist_ok=True)
    path = out / "manifest.json"
    manifest = {
        "command": command,
        "config": cfg,
        "config_hash": config_hash(cfg),
        "seed": seed,
        "version": __version__,
    }
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _task_overrides(args, d: dict, prefix: str = "") -> None:
    for flag, key in (("N", "N"), ("D", "D"), ("K", "K"), ("rotary_base", "rotary_base"), ("ic", "ic"),
                      ("pair_order", "pair_order")):
        _set(d, prefix + key, getattr(args, flag, None))


def _add_task_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--N", type=int, help="chains per example")
    p.add_argument("--D", type=int, help="retrieval steps per chain")
    p.add_argument("--K", type=int, help="token embedding width (even)")
    p.add_argument("--rotary-base", dest="rotary_base", type=float)
    p.add_argument("--pair-order", dest="pair_order", choices=["ascending", "descending"])
    g = p.add_mutually_exclusive_group()
    g.add_argument("--ic", dest="ic", action="store_true", default=None, help="targets x_1..x_D (default)")
    g.add_argument("--no-ic", dest="ic", action="store_false", help="target x_D only")


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    _add_task_flags(p)
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--weight-decay", dest="weight_decay", type=float)
    p.add_argument("--train-examples", dest="train_examples", type=int)
    p.add_argument("--val-examples", dest="val_examples", type=int)
    p.add_argument("--val-every", dest="val_every", type=int)
    p.add_argument("--checkpoint-every", dest="checkpoint_every_epochs", type=int, help="epochs between checkpoints")
    p.add_argument("--layers", type=int)
    p.add_argument("--heads", dest="heads_per_layer", type=int)
    p.add_argument("--residual-dim", dest="residual_dim", type=int)
    p.add_argument("--head-dim", dest="head_dim", type=int)
    p.add_argument("--no-mlp", dest="use_mlp", action="store_false", default=None)


def _run_dict(args, cfg: dict, seed: int) -> dict:
    d = json.loads(json.dumps(cfg))
    _task_overrides(args, d, "task.")
    for key in ("steps", "batch_size", "lr", "weight_decay", "train_examples", "val_examples", "val_every",
                "checkpoint_every_epochs"):
        _set(d, key, getattr(args, key, None))
    for key in ("layers", "heads_per_layer", "residual_dim", "head_dim", "use_mlp"):
        _set(d, "model." + key, getattr(args, key, None))
    d["seed"] = seed
    d.setdefault("task", {})["seed"] = seed
    return d


def _validation_for(ck, size: int, seed: int | None):
    from .tasks import TaskConfig, validation_set

    if ck.task is None:
        raise UsageError("checkpoint has no task description; cannot build validation data")
    task = TaskConfig.from_dict(ck.task)
    if seed is None:
        seed = (ck.extra or {}).get("seed", task.seed)
    return validation_set(task, seed, size)


# -- commands ----------------------------------------------------------------------


def cmd_gen(args) -> int:
    from .tasks import TaskConfig, derive_rng, gen_batch, save_dataset, STREAM_TRAIN

    cfg = _load_config(args.config)
    seed = _need_seed(args, cfg)
    d = dict(cfg)
    d.pop("size", None)
    _task_overrides(args, d)
    d["seed"] = seed
    task = TaskConfig.from_dict(d)
    size = args.size if args.size is not None else cfg.get("size", 1024)
    batch = gen_batch(task, derive_rng(seed, STREAM_TRAIN), size)
    out = Path(args.out)
    nbytes = save_dataset(out, batch, seed=seed)
    write_manifest(out.parent, "gen", {**task.to_dict(), "size": size}, seed)
    print(f"wrote {size} examples ({nbytes} bytes) to {out}")
    return 0


def cmd_train(args) -> int:
    from .train import RunConfig, TrainingDiverged, train

    cfg = _load_config(args.config)
    seed = _need_seed(args, cfg)
    run = RunConfig.from_dict(_run_dict(args, cfg, seed))
    out = Path(args.out)
    write_manifest(out, "train", run.to_dict(), seed)
    try:
        res = train(run, out_dir=out, progress=args.verbose)
    except TrainingDiverged as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    m = res.metrics
    print(f"final validation loss {m.val_loss[-1]:.6f} after {run.steps} steps")
    if run.task.ic:
        firsts = [m.first_below(0.5, j) for j in range(run.task.D)]
        print("first step below 0.5 per position: " + ", ".join(f"x{j + 1}={s}" for j, s in enumerate(firsts)))
    return 0


def cmd_sweep(args) -> int:
    from .train import SweepConfig, sweep

    cfg = _load_config(args.config)
    if "base" not in cfg:
        cfg = {"base": cfg}
    if args.seed is not None:
        cfg["seeds"] = [args.seed + i for i in range(args.n_seeds)]
    if "seeds" not in cfg:
        raise UsageError("sweep: --seed is required (or set \"seeds\" in the config)")
    base = _run_dict(args, cfg["base"], int(cfg["seeds"][0]))
    scfg = SweepConfig.from_dict({**cfg, "base": base, **({"workers": args.workers} if args.workers else {})})
    out = Path(args.out)
    write_manifest(out, "sweep", scfg.to_dict(), int(scfg.seeds[0]))
    report = sweep(scfg, out)
    for row in report.summary():
        print(f"{row['formulation']:>7} layers={row['layers']} mean_final_loss={row['mean_final_loss']:.4f} "
              f"failed={row['n_failed']}")
    return 0 if all(c.status == "ok" for c in report.cells) else EXIT_FAILED


def cmd_analyze(args) -> int:
    from .circuits import export_attention_maps
    from .model import load_checkpoint
    from .tasks import load_dataset

    ck = load_checkpoint(args.checkpoint)
    data = load_dataset(args.data) if args.data else _validation_for(ck, args.n_examples, args.seed)
    data = data.take(np.arange(min(args.n_examples, len(data))))
    out = Path(args.out)
    export_attention_maps(ck, data, out, per_example=args.per_example)
    write_manifest(out, "analyze", {"checkpoint": str(args.checkpoint), "n_examples": len(data)}, args.seed)
    print(f"wrote attention maps for {ck.config.layers} layers to {out}")
    return 0


def cmd_ablate(args) -> int:
    from .circuits import CircuitSpec, validate_circuit
    from .model import load_checkpoint

    ck = load_checkpoint(args.checkpoint)
    circuit = CircuitSpec.load(args.circuit)
    data = _validation_for(ck, args.n_examples, args.seed)
    rep = validate_circuit(ck, circuit, data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rep.write_csv(out / "ablation.csv")
    write_manifest(out, "ablate", {"checkpoint": str(args.checkpoint), "circuit": circuit.to_dict(),
                                   "n_examples": args.n_examples}, args.seed)
    print(f"{'unablated':<48} {rep.unablated_mse:.5f}")
    for row in rep.rows():
        print(f"{row['ablation']:<48} {row['mse']:.5f}")
    return 0


def cmd_emerge(args) -> int:
    from .circuits import CircuitSpec, crossing_epoch, emergence_trace, list_checkpoints, write_traces
    from .model import load_checkpoint

    circuit = CircuitSpec.load(args.circuit)
    ckpts = list_checkpoints(args.checkpoints)
    if not ckpts:
        raise UsageError(f"no checkpoints found in {args.checkpoints}")
    data = _validation_for(load_checkpoint(ckpts[-1]), args.n_examples, args.seed)
    traces = emergence_trace(args.checkpoints, circuit, data, n_examples=args.n_examples)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_traces(traces, out / "traces.csv")
    write_manifest(out, "emerge", {"checkpoints": str(args.checkpoints), "circuit": circuit.to_dict(),
                                   "n_examples": args.n_examples}, args.seed)
    for pid, tr in traces.items():
        x = crossing_epoch(tr, args.threshold)
        print(f"{pid:<40} final={tr.values[-1]:.3f} crossing={'never' if x is None else f'{x:.2f}'}")
    return 0


def cmd_flow(args) -> int:
    from .flow import interval_table, min_layers, min_layers_closed_form, theorem1_bound

    if args.d_min < 1 or args.d_max < args.d_min:
        raise UsageError("flow: need 1 <= --d-min <= --d-max")
    print(f"{'D':>6} {'min_layers':>10} {'theorem1_bound':>14}")
    for D in range(args.d_min, args.d_max + 1):
        ml = min_layers(D)
        assert ml == min_layers_closed_form(D)
        print(f"{D:>6} {ml:>10} {theorem1_bound(D):>14}")
    if args.intervals:
        rows = interval_table(args.intervals)
        path = Path(args.intervals_out or f"intervals_D{args.intervals}.csv")
        with open(path, "w") as fh:
            fh.write("t,position,lo,hi\n")
            for r in rows:
                fh.write(f"{r['t']},{r['position']},{r['lo']},{r['hi']}\n")
        print(f"wrote interval dump for D={args.intervals} to {path}")
    return 0


def cmd_bench(args) -> int:
    from .bench import FORMULATIONS, BenchReport, HTTPChatClient, MockClient, ProviderConfig, TransportError
    from .bench.harness import run_benchmark

    cfg = _load_config(args.config)
    seed = _need_seed(args, cfg)
    if args.mock and args.live:
        raise UsageError("bench: choose either --mock or --live")
    if not args.mock and not args.live:
        raise UsageError("bench: pass --mock uniform|correct|garbage, or --live to call a real provider")
    provider = ProviderConfig(**cfg.get("provider", {}))
    for key in ("base_url", "model", "token_env", "max_attempts"):
        if getattr(args, key, None) is not None:
            setattr(provider, key, getattr(args, key))
    if provider.max_attempts < 1:
        raise UsageError("bench: --max-attempts must be >= 1")
    try:
        client = MockClient(args.mock, seed) if args.mock else HTTPChatClient(provider)
    except TransportError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILED
    forms = args.formulation or cfg.get("formulations") or list(FORMULATIONS)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    transcript = out / "transcripts.jsonl"
    transcript.write_text("")
    results = {}
    for i, f in enumerate(forms):
        r, _ = run_benchmark(client, f, args.n_cases, seed + i, D=args.D, n_chains=args.chains,
                             max_attempts=provider.max_attempts, workers=args.workers, transcript=transcript)
        results[f] = r
        print(f"{f:<10} accuracy={r.accuracy:.3f} baseline={r.baseline:.3f} attempts={r.mean_attempts:.2f} "
              f"skipped={r.n_skipped}")
    BenchReport(results).write_csv(out / "report.csv")
    write_manifest(out, "bench", {"formulations": forms, "n_cases": args.n_cases, "D": args.D,
                                  "chains": args.chains, "mock": args.mock,
                                  "provider": {"base_url": provider.base_url, "model": provider.model,
                                               "max_attempts": provider.max_attempts}}, seed)
    return 0 if all(r.n_skipped == 0 for r in results.values()) else EXIT_FAILED


def cmd_plot(args) -> int:
    from .plots import emit_plot

    try:
        svg = emit_plot(args.kind, args.input, args.out)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILED
    print(f"wrote {svg} and {svg.with_suffix('.csv')}")
    return 0


# -- parser ------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="retrieval-lab", description="Multi-step retrieval experiments.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = p.add_subparsers(dest="command", metavar="command")
    sub.required = True

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_, description=help_)
        sp.set_defaults(fn=fn)
        sp.add_argument("--config", help="JSON file; flags override its fields")
        sp.add_argument("--seed", type=int)
        return sp

    sp = add("gen", cmd_gen, "generate a dataset file")
    _add_task_flags(sp)
    sp.add_argument("--size", type=int)
    sp.add_argument("--out", required=True, help="dataset path")

    sp = add("train", cmd_train, "train one model")
    _add_train_flags(sp)
    sp.add_argument("--out", required=True, help="run directory")

    sp = add("sweep", cmd_sweep, "IC / non-IC sweep over depth and seeds")
    _add_train_flags(sp)
    sp.add_argument("--n-seeds", dest="n_seeds", type=int, default=2, help="seeds starting at --seed")
    sp.add_argument("--workers", type=int)
    sp.add_argument("--out", required=True)

    sp = add("analyze", cmd_analyze, "export attention maps of a checkpoint")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", help="dataset file (default: validation set of the run)")
    sp.add_argument("--n-examples", dest="n_examples", type=int, default=32)
    sp.add_argument("--per-example", dest="per_example", type=int, default=4)
    sp.add_argument("--out", required=True)

    sp = add("ablate", cmd_ablate, "validate a circuit by attention replacement")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--circuit", required=True, help="circuit JSON")
    sp.add_argument("--n-examples", dest="n_examples", type=int, default=512)
    sp.add_argument("--out", required=True)

    sp = add("emerge", cmd_emerge, "trace circuit-path attention across checkpoints")
    sp.add_argument("--checkpoints", required=True, help="directory of epoch-*.ckpt files")
    sp.add_argument("--circuit", required=True)
    sp.add_argument("--n-examples", dest="n_examples", type=int, default=32)
    sp.add_argument("--threshold", type=float, default=0.5)
    sp.add_argument("--out", required=True)

    sp = add("flow", cmd_flow, "minimum layers under maximal information flow")
    sp.add_argument("--d-min", dest="d_min", type=int, default=1)
    sp.add_argument("--d-max", dest="d_max", type=int, default=20)
    sp.add_argument("--intervals", type=int, help="also dump per-layer intervals for this D")
    sp.add_argument("--intervals-out", dest="intervals_out")

    sp = add("bench", cmd_bench, "benchmark a chat model (or a mock) on text prompts")
    sp.add_argument("--formulation", action="append", choices=["Equations", "LivesWith", "Kingdoms", "Functions",
                                                               "Relatives"])
    sp.add_argument("--n-cases", dest="n_cases", type=int, default=500)
    sp.add_argument("--D", type=int)
    sp.add_argument("--chains", type=int, default=4)
    sp.add_argument("--mock", choices=["uniform", "correct", "garbage"])
    sp.add_argument("--live", action="store_true", help="call the configured provider (costs money)")
    sp.add_argument("--base-url", dest="base_url")
    sp.add_argument("--model")
    sp.add_argument("--token-env", dest="token_env", help="environment variable holding the API token")
    sp.add_argument("--max-attempts", dest="max_attempts", type=int)
    sp.add_argument("--workers", type=int, default=4)
    sp.add_argument("--out", required=True)

    sp = add("plot", cmd_plot, "render a figure (SVG plus CSV of the plotted data)")
    sp.add_argument("--kind", required=True, choices=["layers", "partial", "emergence", "accuracy"])
    sp.add_argument("--input", required=True, help="metrics.csv, sweep_summary.csv, traces.csv or report.csv")
    sp.add_argument("--out", required=True)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.fn(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
