"""``neuralme`` command line: generate, simulate, train, eval, bench.

Every command that writes files also writes ``manifest.json`` into its
output directory.  The manifest holds one entry per output file (argv,
seed, solver and training settings, input hashes, version, timestamps);
``neuralme replay <manifest> [output]`` re-runs the recorded command.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .cardio import HeartProfile, build_model, default_heart, load_network, reference_waveforms
from .cardio.network import BUNDLED, bundled_network_path
from .cardio.waveforms import REFERENCE_ATOL, REFERENCE_RTOL, sample_grid, simulate_model
from .dataset import Dataset, write_waveform_csv
from .errors import NeuralMEError
from .hybrid import HybridModel, build_topology, init_params, load_checkpoint, read_checkpoint, save_checkpoint
from .odesolve import SolverConfig
from .train import TrainConfig, benchmark, build_dataset, evaluate, prepare_hybrid, simulate_on, train

PUBLISHED_SPEEDUP = 3750.0


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# -- helpers -------------------------------------------------------------------
def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _network_source(spec: str):
    p = Path(spec)
    if p.exists():
        return p
    if spec in BUNDLED or (p.suffix == ".net" and p.stem in BUNDLED):
        return Path(str(bundled_network_path(p.stem if p.suffix == ".net" else spec)))
    return p


def _threads() -> int:
    raw = os.environ.get("NEURALME_THREADS", "")
    try:
        return max(1, int(raw)) if raw else 1
    except ValueError:
        raise UsageError(f"NEURALME_THREADS must be an integer, got {raw!r}") from None


def _write_manifest(out_dir: Path, outputs, args, inputs, numerics: dict, started: float):
    """Add or replace the entries for ``outputs`` in ``out_dir/manifest.json``."""
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "manifest.json"
    doc = {"tool": "neuralme", "version": __version__, "runs": {}}
    if path.exists():
        try:
            old = json.loads(path.read_text())
            doc["runs"].update(old.get("runs", {}))
        except json.JSONDecodeError:
            pass
    entry = {
        "command": args.command,
        "argv": list(args.argv),
        "cwd": os.getcwd(),
        "seed": getattr(args, "seed", None),
        "config": getattr(args, "config", None),
        "inputs": {str(p): _sha256(p) for p in inputs if p is not None and Path(p).is_file()},
        "numerics": numerics,
        "version": __version__,
        "started": datetime.fromtimestamp(started, timezone.utc).isoformat(),
        "finished": datetime.now(timezone.utc).isoformat(),
    }
    for o in outputs:
        doc["runs"][Path(o).name] = entry
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def _heart(net, bpm, stroke_volume=None) -> HeartProfile:
    base = default_heart(net)
    return HeartProfile(bpm if bpm is not None else base.heart_rate,
                        stroke_volume if stroke_volume is not None else base.stroke_volume,
                        base.systolic_fraction)


def _plot(path, times, series: dict, title: str):
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        raise NeuralMEError("--plot needs matplotlib (pip install 'artifact[plot]')") from None
    fig, ax = plt.subplots(figsize=(8, 4.5))
    for label, values in series.items():
        ax.plot(times, np.asarray(values) / 133.322, label=label)
    ax.set_xlabel("t [s]")
    ax.set_ylabel("p [mmHg]")
    ax.set_title(title)
    ax.legend(fontsize=7, ncol=2)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _solver(args, times) -> SolverConfig:
    if args.method == "rk4":
        return SolverConfig(method="rk4", fixed_step=args.step, save_times=times)
    return SolverConfig(method="rk45", rel_tol=args.rtol, abs_tol=args.atol, save_times=times)


# -- commands ------------------------------------------------------------------
def cmd_generate(args):
    net = load_network(args.network)
    heart = _heart(net, args.bpm, args.stroke_volume)
    ds = reference_waveforms(net, heart=heart, n_cycles=args.cycles, rate=args.rate, rtol=args.rtol, atol=args.atol)
    out = Path(args.output)
    ds.to_csv(out)
    print(f"wrote {out} ({ds.n_samples} samples x {ds.n_obs} segments, {ds.stats['n_steps']} steps)")
    numerics = {"network": args.network, "bpm": heart.heart_rate, "stroke_volume": heart.stroke_volume,
                "cycles": args.cycles, "rate": args.rate, "method": "rk45", "rtol": args.rtol, "atol": args.atol}
    return [out], [_network_source(args.network)], numerics


def cmd_simulate(args):
    net = load_network(args.network)
    heart = _heart(net, args.bpm, args.stroke_volume)
    times = sample_grid(args.cycles * heart.period, args.rate)
    inputs = [_network_source(args.network)]
    if args.checkpoint:
        header = read_checkpoint(args.checkpoint)[0]
        inner = build_model(net, "simple_" + header["topology"][2], heart=heart)
        model = load_checkpoint(args.checkpoint, inner)
        inputs.append(Path(args.checkpoint))
    else:
        model = build_model(net, args.variant, heart=heart)
    method = args.method or ("rk4" if args.checkpoint else "rk45")
    args.method = method
    traj = simulate_model(model, heart, times, _solver(args, times))
    obs = model.observe(traj.states)
    out = Path(args.output)
    write_waveform_csv(out, times, obs, net.observed)
    print(f"wrote {out} ({times.size} samples x {len(net.observed)} segments)")
    if args.plot:
        _plot(out.with_suffix(".png"), times, {f"seg {s}": obs[:, j] for j, s in enumerate(net.observed)},
              f"{net.name or 'network'}: {getattr(model, 'variant', 'hybrid')}")
    numerics = {"network": args.network, "variant": args.variant, "checkpoint": args.checkpoint,
                "bpm": heart.heart_rate, "stroke_volume": heart.stroke_volume, "cycles": args.cycles,
                "rate": args.rate, "method": method, "step": args.step, "rtol": args.rtol, "atol": args.atol}
    return [out], inputs, numerics


def _load_training_data(path, bpm, rate):
    raw = Dataset.from_csv(path)
    return build_dataset(raw, bpm, rate, label=Path(path).stem)


def _train_config(args) -> TrainConfig:
    cfg = TrainConfig.from_json(args.config) if args.config else TrainConfig()
    for name in ("epochs", "learning_rate", "unfreeze_threshold", "subset_size"):
        v = getattr(args, name, None)
        if v is not None:
            setattr(cfg, name, v)
    if args.seed is not None:
        cfg.rng_seed = args.seed
    return cfg


def cmd_train(args):
    net = load_network(args.network)
    heart = _heart(net, args.bpm)
    cfg = _train_config(args)
    variant = args.variant.upper()
    inner = build_model(net, "simple_" + variant, heart=heart)
    topo = build_topology(inner.partition.n_wk, net.n_observed, variant, args.hidden)
    print(f"topology: {variant} placeholders, {topo.n_states} states ({topo.n_art}|{topo.n_wk}), "
          f"{topo.n_params} trainable parameters")
    print(topo.table())
    data = _load_training_data(args.data, heart.heart_rate, args.rate)
    model = prepare_hybrid(inner, data, variant, heart, cfg.rng_seed, args.hidden, not args.no_skip, cfg.solver_step)
    every = max(1, cfg.epochs // 20) if cfg.epochs else 1

    def log(epoch, loss, horizon, subset, frozen):
        if epoch % every == 0 or epoch == cfg.epochs - 1:
            print(f"epoch {epoch:4d}  loss {loss:.6g}  horizon {horizon:3d}  frozen {int(frozen)}", flush=True)

    _, met = train(model, data, cfg, heart, log=log)
    out = Path(args.out_dir)
    ck = out / "checkpoint.csv"
    save_checkpoint(ck, model, {"network": args.network, "train_config": json.loads(cfg.to_json())})
    met.to_csv(out / "metrics.csv")
    summary = met.summary()
    (out / "summary.json").write_text(json.dumps(summary, indent=1) + "\n")
    print(f"initial MSE {met.initial_mse:.6g} Pa^2, final MSE {met.total_mse:.6g} Pa^2, "
          f"unfreeze epoch {met.unfreeze_epoch}")
    numerics = {"network": args.network, "variant": variant, "bpm": heart.heart_rate, "rate": args.rate,
                "hidden": args.hidden, "skip": not args.no_skip, "train_config": json.loads(cfg.to_json())}
    inputs = [_network_source(args.network), Path(args.data)] + ([Path(args.config)] if args.config else [])
    return [ck, out / "metrics.csv", out / "summary.json"], inputs, numerics


def cmd_eval(args):
    header = read_checkpoint(args.checkpoint)[0]
    network = args.network or header.get("network")
    if not network:
        raise UsageError("--network is required (checkpoint does not name its network)")
    net = load_network(network)
    rates = args.bpm or [None]
    if len(rates) not in (1, len(args.data)):
        raise UsageError(f"--bpm takes one value or one per --data file ({len(args.data)})")
    hearts = [_heart(net, b) for b in (rates * len(args.data) if len(rates) == 1 else rates)]
    variant = header["topology"][2]
    step = header.get("train_config", {}).get("solver_step", 1.0 / 160.0)

    def one(job):
        path, heart = job
        data = _load_training_data(path, heart.heart_rate, args.rate)
        inner = build_model(net, "simple_" + variant, heart=default_heart(net))
        model = load_checkpoint(args.checkpoint, inner)
        met = evaluate(model, data, heart, step)
        base = evaluate(inner, data, heart, step)
        pred, _ = simulate_on(model, data, heart, step)
        return path, data, met, base, pred

    with ThreadPoolExecutor(max_workers=min(_threads(), len(args.data))) as pool:
        results = list(pool.map(one, zip(args.data, hearts)))
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    outputs = []
    for path, data, met, base, pred in results:
        stem = Path(path).stem
        rows = ["segment,hybrid_mse,untrained_mse"]
        for s in data.segment_ids:
            rows.append(f"{s},{repr(met.per_segment_mse[s])},{repr(base.per_segment_mse[s])}")
        rows.append(f"total,{repr(met.total_mse)},{repr(base.total_mse)}")
        (out / f"eval_{stem}.csv").write_text("\n".join(rows) + "\n")
        write_waveform_csv(out / f"pred_{stem}.csv", data.times, pred, data.segment_ids)
        outputs += [out / f"eval_{stem}.csv", out / f"pred_{stem}.csv"]
        print(f"{stem}: hybrid MSE {met.total_mse:.6g} Pa^2, untrained MSE {base.total_mse:.6g} Pa^2, "
              f"{met.wall_time_per_pulse * 1e3:.3g} ms per pulse wave")
        for s in data.segment_ids:
            print(f"  segment {s}: {met.per_segment_mse[s]:.6g} (untrained {base.per_segment_mse[s]:.6g})")
        if args.plot:
            series = {}
            for j, s in enumerate(data.segment_ids):
                series[f"ref {s}"] = data.pressures[:, j]
                series[f"hybrid {s}"] = pred[:, j]
            _plot(out / f"eval_{stem}.png", data.times, series, f"{stem}: hybrid vs reference")
    numerics = {"network": network, "variant": variant, "bpm": [h.heart_rate for h in hearts], "rate": args.rate,
                "step": step, "checkpoint": args.checkpoint}
    inputs = [_network_source(network), Path(args.checkpoint)] + [Path(p) for p in args.data]
    return outputs, inputs, numerics


def bench_report(net, heart, n_pulses=1, repetitions=3, rtol=REFERENCE_RTOL, atol=REFERENCE_ATOL, seed=0,
                 step=1.0 / 160.0, hybrid_pulses=3, hybrid_repetitions=7):
    """Reference vs C/LC hybrids on ``net``; returns the timing report.

    The hybrids carry small random parameters so the ANN path is exercised.
    They are cheap, so they get more pulses and repetitions than the
    reference to steady the median.
    """
    ref = build_model(net, "reference_elastic", heart=heart)
    ref_cfg = SolverConfig(method="rk45", rel_tol=rtol, abs_tol=atol, save_times=[1.0])
    rep = benchmark({"reference_elastic": ref}, heart, n_pulses, repetitions, {"reference_elastic": ref_cfg})
    hybrids, solvers = {}, {}
    for v in ("C", "LC"):
        inner = build_model(net, "simple_" + v, heart=heart)
        topo = build_topology(inner.partition.n_wk, net.n_observed, v, 30)
        m = HybridModel(inner, topo, init_params(topo, seed))
        m.params.flat[:] = np.random.default_rng(seed).normal(0.0, 1e-3, m.params.size)
        hybrids[f"hybrid_{v}"] = m
        solvers[f"hybrid_{v}"] = SolverConfig(method="rk4", fixed_step=step, save_times=[1.0])
    hyb = benchmark(hybrids, heart, hybrid_pulses, hybrid_repetitions, solvers)
    for name, r in hyb["models"].items():
        r.update(n_pulses=hybrid_pulses, repetitions=hybrid_repetitions)
    rep["models"]["reference_elastic"].update(n_pulses=n_pulses, repetitions=repetitions)
    rep["models"].update(hyb["models"])
    t_ref = rep["models"]["reference_elastic"]["median"]
    c, lc = rep["models"]["hybrid_C"]["median"], rep["models"]["hybrid_LC"]["median"]
    rep["speedup_C"] = t_ref / c
    rep["speedup_LC"] = t_ref / lc
    rep["lc_over_c"] = lc / c
    rep["published_speedup"] = PUBLISHED_SPEEDUP
    return rep


def cmd_bench(args):
    if hasattr(os, "sched_setaffinity") and hasattr(os, "sched_getaffinity"):
        cpus = sorted(os.sched_getaffinity(0))
        if cpus:
            os.sched_setaffinity(0, {cpus[0]})
    net = load_network(args.network)
    heart = _heart(net, args.bpm)
    rep = bench_report(net, heart, args.pulses, args.repetitions, args.rtol, args.atol, args.seed or 0)
    for name, r in rep["models"].items():
        print(f"{name:<18} median {r['median']:.4g} s per pulse wave  ({r['n_states']} states, "
              f"{r['n_rhs_evals']} rhs evaluations)")
    print(f"speedup reference/hybrid: C {rep['speedup_C']:.1f}x, LC {rep['speedup_LC']:.1f}x "
          f"(published figure on different hardware: ~{PUBLISHED_SPEEDUP:.0f}x)")
    print(f"LC/C hybrid time ratio {rep['lc_over_c']:.3f}")
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "bench.json").write_text(json.dumps(rep, indent=1) + "\n")
    numerics = {"network": args.network, "bpm": heart.heart_rate, "pulses": args.pulses,
                "repetitions": args.repetitions, "rtol": args.rtol, "atol": args.atol}
    return [out / "bench.json"], [_network_source(args.network)], numerics


def cmd_topology(args):
    net = load_network(args.network)
    inner = build_model(net, "simple_" + args.variant.upper())
    topo = build_topology(inner.partition.n_wk, net.n_observed, args.variant, args.hidden)
    print(f"{topo.variant} placeholders: {topo.n_states} states ({topo.n_art}|{topo.n_wk}), "
          f"{topo.n_params} trainable parameters")
    print(topo.table())
    return [], [], {}


def cmd_replay(args):
    doc = json.loads(Path(args.manifest).read_text())
    runs = doc.get("runs", {})
    if not runs:
        raise UsageError(f"{args.manifest}: manifest holds no runs")
    if args.output:
        if args.output not in runs:
            raise UsageError(f"{args.manifest}: no run recorded for output {args.output!r}")
        entry = runs[args.output]
    else:
        entry = runs[sorted(runs)[0]]
    cwd = os.getcwd()
    os.chdir(entry.get("cwd", cwd))
    try:
        return main(entry["argv"])
    finally:
        os.chdir(cwd)


# -- parser --------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="neuralme", description="Hybrid arterial pulse-wave models.")
    p.add_argument("--version", action="version", version=f"neuralme {__version__}")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp, seed=True):
        sp.add_argument("--network", default="desk7", help="network file or bundled name (desk7, full_arterial)")
        sp.add_argument("--bpm", type=float, default=None, help="heart rate [1/min]")
        if seed:
            sp.add_argument("--seed", type=int, default=None)

    def solver(sp, method=None):
        sp.add_argument("--method", choices=("rk4", "rk45"), default=method)
        sp.add_argument("--step", type=float, default=1.0 / 160.0, help="rk4 step [s]")
        sp.add_argument("--rtol", type=float, default=REFERENCE_RTOL)
        sp.add_argument("--atol", type=float, default=REFERENCE_ATOL)

    g = sub.add_parser("generate", help="reference waveforms to CSV")
    common(g)
    g.add_argument("--cycles", type=int, default=3)
    g.add_argument("--rate", type=float, default=500.0)
    g.add_argument("--stroke-volume", type=float, default=None)
    g.add_argument("--rtol", type=float, default=REFERENCE_RTOL)
    g.add_argument("--atol", type=float, default=REFERENCE_ATOL)
    g.add_argument("-o", "--output", required=True)

    s = sub.add_parser("simulate", help="simulate a model variant or checkpoint to CSV")
    common(s)
    s.add_argument("--variant", default="c", choices=("c", "lc", "reference", "simple_C", "simple_LC",
                                                      "reference_elastic"))
    s.add_argument("--checkpoint", default=None)
    s.add_argument("--cycles", type=int, default=3)
    s.add_argument("--rate", type=float, default=500.0)
    s.add_argument("--stroke-volume", type=float, default=None)
    solver(s)
    s.add_argument("--plot", action="store_true")
    s.add_argument("-o", "--output", required=True)

    t = sub.add_parser("train", help="train a hybrid model")
    common(t)
    t.add_argument("--variant", default="c", choices=("c", "lc", "C", "LC"))
    t.add_argument("--data", required=True, help="reference waveform CSV (>= 3 cycles)")
    t.add_argument("--config", default=None, help="training config JSON")
    t.add_argument("--epochs", type=int, default=None)
    t.add_argument("--lr", dest="learning_rate", type=float, default=None)
    t.add_argument("--threshold", dest="unfreeze_threshold", type=float, default=None)
    t.add_argument("--subset", dest="subset_size", type=int, default=None)
    t.add_argument("--hidden", type=int, default=30)
    t.add_argument("--rate", type=float, default=40.0)
    t.add_argument("--no-skip", action="store_true", help="plain derivative ANN without residual connection")
    t.add_argument("--out-dir", default="runs/train")

    e = sub.add_parser("eval", help="evaluate a checkpoint on patient data")
    e.add_argument("--network", default=None, help="defaults to the network recorded in the checkpoint")
    e.add_argument("--bpm", type=float, nargs="+", default=None, help="heart rate per data file (or one for all)")
    e.add_argument("--seed", type=int, default=None)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True, nargs="+")
    e.add_argument("--rate", type=float, default=40.0)
    e.add_argument("--plot", action="store_true")
    e.add_argument("--out-dir", default="runs/eval")

    b = sub.add_parser("bench", help="time reference vs hybrid per pulse wave")
    common(b)
    b.set_defaults(network="full_arterial")
    b.add_argument("--pulses", type=int, default=1)
    b.add_argument("--repetitions", type=int, default=3)
    b.add_argument("--rtol", type=float, default=REFERENCE_RTOL)
    b.add_argument("--atol", type=float, default=REFERENCE_ATOL)
    b.add_argument("--out-dir", default="runs/bench")

    tp = sub.add_parser("topology", help="print the hybrid layer table")
    tp.add_argument("--network", default="full_arterial")
    tp.add_argument("--variant", default="c", choices=("c", "lc", "C", "LC"))
    tp.add_argument("--hidden", type=int, default=30)

    r = sub.add_parser("replay", help="re-run a command recorded in a manifest")
    r.add_argument("manifest")
    r.add_argument("output", nargs="?", default=None)
    return p


COMMANDS = {"generate": cmd_generate, "simulate": cmd_simulate, "train": cmd_train, "eval": cmd_eval,
            "bench": cmd_bench, "topology": cmd_topology}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("missing subcommand (generate, simulate, train, eval, bench, topology, replay)")
        args.argv = argv
        if args.command == "replay":
            return cmd_replay(args)
        started = time.time()
        outputs, inputs, numerics = COMMANDS[args.command](args)
        if outputs:
            out_dir = Path(outputs[0]).parent
            _write_manifest(out_dir, outputs, args, inputs, numerics, started)
        return 0
    except UsageError as exc:
        print(f"neuralme: usage error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:
        return int(exc.code or 0)
    except (NeuralMEError, OSError, ValueError) as exc:
        msg = str(exc).replace("\n", " ")
        print(f"neuralme: error: {msg}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - last resort, keep the exit-code contract
        print(f"neuralme: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
