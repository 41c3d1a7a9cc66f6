"""Command-line entry point.

Exit codes: 0 classical verdict or plain success, 10 quantum verdict,
2 usage or configuration error, 3 runtime error.  Every run first echoes
its resolved configuration as ``# key=value`` lines.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import os
import sys
from importlib import resources
from typing import Any, Sequence, TextIO

from . import __version__
from .chsh import chsh_s, summarize
from .config import to_dict
from .conformal import OnlineMondrian
from .datagen import MODELS, SCHEDULES, ConfigError, GeneratorConfig, generate
from .dataio import (DatasetParseError, iter_records, load_any_dataset, read_calibration, read_config,
                     read_envelope, write_calibration, write_dataset, write_envelope)
from .experiments import (ROLE_TRAIN, ConformalArtifacts, ablation_study, build_calibration, dataset_features,
                          derive_rng, family_datasets, hardware_report, leakage_experiment)
from .tara_k import detect_batch, fit_envelope
from .tara_m import UNSAFE_DISCLAIMER, UNSAFE_STRATEGY, detect_stream

EXIT_OK = 0
EXIT_QUANTUM = 10
EXIT_USAGE = 2
EXIT_RUNTIME = 3
DEFAULT_SEED = 0
SEED_ENV = "TARA_SEED"

log = logging.getLogger("tara")


class UsageError(Exception):
    pass


def packaged_config(name: str) -> str:
    return str(resources.files("tara") / "configs" / name)


def _fmt(value: Any) -> str:
    if isinstance(value, float):
        return f"{value:.6g}"
    if isinstance(value, (list, tuple)):
        return "[" + ",".join(_fmt(v) for v in value) + "]"
    return str(value)


class Output:
    """Writes echo lines and results in the selected format."""

    def __init__(self, stream: TextIO, fmt: str):
        self.stream = stream
        self.fmt = fmt

    def echo(self, pairs: dict[str, Any]) -> None:
        for key in sorted(pairs):
            self.stream.write(f"# {key}={_fmt(pairs[key])}\n")

    def keyvalues(self, pairs: Sequence[tuple[str, Any]]) -> None:
        if self.fmt == "csv":
            w = csv.writer(self.stream, lineterminator="\n")
            w.writerow(["key", "value"])
            w.writerows((k, _fmt(v)) for k, v in pairs)
        else:
            for k, v in pairs:
                self.stream.write(f"{k}={_fmt(v)}\n")

    def table(self, rows: list[dict[str, Any]]) -> None:
        if not rows:
            return
        cols = list(rows[0])
        cells = [[_fmt(r[c]) for c in cols] for r in rows]
        if self.fmt == "csv":
            w = csv.writer(self.stream, lineterminator="\n")
            w.writerow(cols)
            w.writerows(cells)
            return
        widths = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(cols)]
        self.stream.write("  ".join(c.ljust(w) for c, w in zip(cols, widths)).rstrip() + "\n")
        for row in cells:
            self.stream.write("  ".join(v.ljust(w) for v, w in zip(row, widths)).rstrip() + "\n")


# -- subcommands ----------------------------------------------------------

def cmd_simulate(args: argparse.Namespace, out: Output) -> int:
    if args.config:
        cfg = read_config(args.config, "generator")
        if args.seed_given:
            cfg = cfg.replace(seed=args.seed)
    else:
        if args.model is None or args.trials is None:
            raise UsageError("simulate needs --model and --trials (or --config)")
        kwargs = {k: getattr(args, k) for k in ("eta", "kappa", "visibility", "bias", "memory_order",
                                                 "schedule") if getattr(args, k) is not None}
        if args.strategy_index is not None:
            kwargs["strategy"] = args.strategy_index
        cfg = GeneratorConfig(model=args.model, trials_per_context=args.trials, seed=args.seed, **kwargs)
    out.echo({f"generator.{k}": v for k, v in cfg.to_dict().items()} | {"out": args.out})
    ds = generate(cfg)
    write_dataset(args.out, ds, {"generator": cfg.to_dict()})
    out.keyvalues([("n_trials", len(ds)), ("chsh_s", chsh_s(summarize(ds))), ("written", args.out)])
    return EXIT_OK


def cmd_calibrate(args: argparse.Namespace, out: Output) -> int:
    manifold = read_config(args.manifold, "ablation")
    batch_trials = args.batch_trials or manifold.trials_per_context
    n_train = args.n_train or manifold.n_train
    target_fpr = args.target_fpr or manifold.target_fpr
    out.echo({
        "input": args.input, "out": args.out, "model_out": args.model_out or "none",
        "manifold": args.manifold, "pseudo_count": args.pseudo_count, "batch_trials": batch_trials,
        "n_train": n_train, "target_fpr": target_fpr, "set_alpha": manifold.alpha,
    })
    data = load_any_dataset(args.input, args.mapping)
    art = build_calibration(data, args.pseudo_count, derive_rng(args.seed, 0))
    info = {"source": os.path.basename(args.input), "n_trials": len(data), "seed": args.seed}
    write_calibration(args.out, art.model, art.cal, art.reference_pvalues, info)
    pairs: list[tuple[str, Any]] = [
        ("calibration_sizes", list(art.cal.sizes)),
        ("n_reference_pvalues", len(art.reference_pvalues)),
        ("written", args.out),
    ]
    if args.model_out:
        log.info("training envelope on %d manifold datasets", n_train)
        train = family_datasets(manifold.lhv_families, args.seed, ROLE_TRAIN, n_train, batch_trials)
        feats = dataset_features(train, art, manifold.alpha, args.seed, ROLE_TRAIN)
        env = fit_envelope(feats, target_fpr)
        write_envelope(args.model_out, env)
        pairs += [("envelope_threshold", env.threshold), ("written", args.model_out)]
    out.keyvalues(pairs)
    return EXIT_OK


def _artifacts(path: str) -> ConformalArtifacts:
    model, cal, ref = read_calibration(path)
    return ConformalArtifacts(model, cal, ref)


def cmd_detect_batch(args: argparse.Namespace, out: Output) -> int:
    out.echo({"model": args.model, "calibration": args.calibration, "input": args.input,
              "alpha": args.alpha, "set_alpha": args.set_alpha, "mapping": args.mapping or "none"})
    env = read_envelope(args.model)
    art = _artifacts(args.calibration)
    if len(art.reference_pvalues) == 0:
        raise ConfigError("calibration file carries no reference p-values")
    data = load_any_dataset(args.input, args.mapping)
    report = detect_batch(env, art.reference_pvalues, data, art.model, art.cal, ks_alpha=args.alpha,
                          alpha=args.set_alpha, rng=derive_rng(args.seed, 0))
    pairs = [(k, v) for k, v in report.as_dict().items() if k != "decision"]
    out.keyvalues(pairs + [("decision", report.decision)])
    return EXIT_QUANTUM if report.decision == "Quantum" else EXIT_OK


def cmd_detect_stream(args: argparse.Namespace, out: Output) -> int:
    strategy = UNSAFE_STRATEGY if args.unsafe_paper_kelly else args.strategy
    out.echo({"calibration": args.calibration, "input": args.input, "alpha": args.alpha,
              "lambda": args.lam, "strategy": strategy, "stop_on_detection": not args.no_stop})
    if strategy == UNSAFE_STRATEGY:
        out.stream.write(f"# {UNSAFE_DISCLAIMER}\n")
        print(UNSAFE_DISCLAIMER, file=sys.stderr)
    art = _artifacts(args.calibration)
    online = OnlineMondrian(art.model, art.cal, derive_rng(args.seed, 1))
    fh = sys.stdin if args.input == "-" else open(args.input, newline="")
    try:
        pvals = (online.pvalue(r.x, r.z, r.a, r.b) for r in iter_records(fh))
        report = detect_stream(pvals, alpha=args.alpha, lam=args.lam, strategy=strategy,
                               stop_on_detection=not args.no_stop)
    finally:
        if fh is not sys.stdin:
            fh.close()
    if out.fmt == "csv":
        out.table([{"t": t, "p": p, "beta": b, "log_wealth": lw} for t, p, b, lw in report.trajectory])
    else:
        for t, p, b, lw in report.trajectory:
            out.stream.write(f"t={t} p={p:.6g} beta={b:.6g} log_wealth={lw:.6g}\n")
    verdict = "Quantum" if report.detected else "Classical"
    stop = "none" if report.stop_time is None else report.stop_time
    out.stream.write(f"verdict={verdict} stop_time={stop} steps={report.steps} "
                     f"log_wealth={report.final_log_wealth:.6g} valid={str(report.valid).lower()}\n")
    return EXIT_QUANTUM if report.detected else EXIT_OK


def cmd_roc(args: argparse.Namespace, out: Output) -> int:
    cfg = read_config(args.config, "ablation")
    if args.seed_given:
        cfg = _with_seed(cfg, args.seed)
    out.echo({f"config.{k}": v for k, v in _flat(to_dict(cfg)).items()} | {"shuffle_labels": args.shuffle_labels})
    result = ablation_study(cfg, shuffle_labels=args.shuffle_labels)
    out.table(result.rows())
    return EXIT_OK


def cmd_leakage(args: argparse.Namespace, out: Output) -> int:
    cfg = read_config(args.config, "leakage")
    if args.seed_given:
        cfg = _with_seed(cfg, args.seed)
    out.echo({f"config.{k}": v for k, v in _flat(to_dict(cfg)).items()} | {"shuffle_labels": args.shuffle_labels})
    rep = leakage_experiment(cfg, shuffle_labels=args.shuffle_labels)
    out.stream.write(f"# score: {rep.score}\n")
    out.table(rep.rows())
    return EXIT_OK


def cmd_hardware_report(args: argparse.Namespace, out: Output) -> int:
    out.echo({"input": args.input, "calibration": args.calibration or "none", "model": args.model or "none",
              "mapping": args.mapping or "none", "alpha": args.alpha, "lambda": args.lam})
    if args.model and not args.calibration:
        raise UsageError("--model needs --calibration")
    data = load_any_dataset(args.input, args.mapping)
    art = _artifacts(args.calibration) if args.calibration else None
    env = read_envelope(args.model) if args.model else None
    if art is not None and env is not None and len(art.reference_pvalues) == 0:
        raise ConfigError("calibration file carries no reference p-values")
    rep = hardware_report(data, art, env, alpha=args.alpha, lam=args.lam, seed=args.seed)
    out.keyvalues(rep.rows())
    quantum = (rep.batch is not None and rep.batch.decision == "Quantum") or (
        rep.stream is not None and rep.stream.detected)
    return EXIT_QUANTUM if quantum else EXIT_OK


def _with_seed(cfg: Any, seed: int) -> Any:
    import dataclasses
    return dataclasses.replace(cfg, seed=seed)


def _flat(d: dict[str, Any], prefix: str = "") -> dict[str, Any]:
    out: dict[str, Any] = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flat(v, key + "."))
        elif isinstance(v, list) and v and isinstance(v[0], dict):
            for i, item in enumerate(v):
                out.update(_flat(item, f"{key}[{i}]."))
        else:
            out[key] = v
    return out


# -- parser ---------------------------------------------------------------

def _seed_type(text: str) -> int:
    value = int(text)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must lie in [0, 2**64)")
    return value


def _unit_open(text: str) -> float:
    value = float(text)
    if not 0.0 < value < 1.0:
        raise argparse.ArgumentTypeError("must lie in (0, 1)")
    return value


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=_seed_type, default=argparse.SUPPRESS,
                        help=f"master seed (default: ${SEED_ENV} if set, else {DEFAULT_SEED})")
    common.add_argument("--verbose", action="store_true", default=argparse.SUPPRESS,
                        help="diagnostics on stderr")
    common.add_argument("--output-format", choices=("table", "csv"), default=argparse.SUPPRESS,
                        help="result format (default: table)")

    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="tara", parents=[common], formatter_class=fmt,
                                     description="Classical-vs-quantum certification of CHSH trial data.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("simulate", parents=[common], formatter_class=fmt, help="generate a trial dataset")
    p.add_argument("--model", choices=MODELS)
    p.add_argument("--trials", type=int, help="trials per context")
    p.add_argument("--config", help="generator config JSON (replaces the model flags)")
    p.add_argument("--eta", type=float, help="detector efficiency (generator default 1.0)")
    p.add_argument("--kappa", type=float, help="communication rate (generator default 0.0)")
    p.add_argument("--visibility", type=float, help="singlet visibility (generator default 1.0)")
    p.add_argument("--bias", type=float, help="weight on optimal classical strategies (default 1.0)")
    p.add_argument("--memory-order", type=int, help="memory depth (default 1)")
    p.add_argument("--strategy-index", type=int, help="deterministic strategy 0..15 (default 0)")
    p.add_argument("--schedule", choices=SCHEDULES, help="context schedule (default round-robin)")
    p.add_argument("--out", required=True, help="output dataset CSV")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("calibrate", parents=[common], formatter_class=fmt,
                       help="fit the conformal model and, optionally, the batch envelope")
    p.add_argument("--input", required=True, help="classical calibration dataset CSV")
    p.add_argument("--out", required=True, help="calibration JSON to write")
    p.add_argument("--model-out", help="envelope JSON to write (trains on the LHV manifold)")
    p.add_argument("--manifold", default=packaged_config("ablation_default.json"),
                   help="ablation config whose lhv_families define the manifold")
    p.add_argument("--mapping", help="column-mapping sidecar for hardware CSVs")
    p.add_argument("--pseudo-count", type=float, default=1.0)
    p.add_argument("--batch-trials", type=int, help="trials per context of training batches (default: manifold)")
    p.add_argument("--n-train", type=int, help="number of training batches (default: manifold)")
    p.add_argument("--target-fpr", type=_unit_open, help="envelope false-positive target (default: manifold)")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("detect-batch", parents=[common], formatter_class=fmt, help="batch verdict")
    p.add_argument("--model", required=True, help="envelope JSON")
    p.add_argument("--calibration", required=True, help="calibration JSON")
    p.add_argument("--input", required=True, help="dataset CSV")
    p.add_argument("--mapping", help="column-mapping sidecar for hardware CSVs")
    p.add_argument("--alpha", type=_unit_open, default=0.05, help="two-sample KS level")
    p.add_argument("--set-alpha", type=_unit_open, default=0.1, help="prediction-set level for the set-size feature")
    p.set_defaults(func=cmd_detect_batch)

    p = sub.add_parser("detect-stream", parents=[common], formatter_class=fmt, help="sequential verdict")
    p.add_argument("--calibration", required=True, help="calibration JSON")
    p.add_argument("--input", default="-", help="dataset CSV, '-' for stdin")
    p.add_argument("--alpha", type=_unit_open, default=0.05)
    p.add_argument("--lambda", dest="lam", type=_unit_open, default=0.2, help="bet size")
    p.add_argument("--strategy", choices=("sign", "mixture"), default="sign")
    p.add_argument("--unsafe-paper-kelly", action="store_true",
                   help="bet on the current p-value (not a valid test; reproduction only)")
    p.add_argument("--no-stop", action="store_true", help="consume the whole stream after detection")
    p.set_defaults(func=cmd_detect_stream)

    p = sub.add_parser("roc", parents=[common], formatter_class=fmt, help="ROC feature ablation")
    p.add_argument("--config", default=packaged_config("ablation_default.json"))
    p.add_argument("--shuffle-labels", action="store_true", help="label-permutation control")
    p.set_defaults(func=cmd_roc)

    p = sub.add_parser("leakage", parents=[common], formatter_class=fmt, help="calibration leakage experiment")
    p.add_argument("--config", default=packaged_config("leakage_default.json"))
    p.add_argument("--shuffle-labels", action="store_true", help="label-permutation control")
    p.set_defaults(func=cmd_leakage)

    p = sub.add_parser("hardware-report", parents=[common], formatter_class=fmt, help="summarise a hardware run")
    p.add_argument("--input", required=True)
    p.add_argument("--calibration")
    p.add_argument("--model", help="envelope JSON (enables the batch verdict)")
    p.add_argument("--mapping", help="column-mapping sidecar for hardware CSVs")
    p.add_argument("--alpha", type=_unit_open, default=0.05)
    p.add_argument("--lambda", dest="lam", type=_unit_open, default=0.2)
    p.set_defaults(func=cmd_hardware_report)
    return parser


def _resolve_seed(args: argparse.Namespace, environ: dict[str, str]) -> tuple[int, str]:
    if "seed" in args:
        return args.seed, "flag"
    raw = environ.get(SEED_ENV)
    if raw is not None:
        try:
            return _seed_type(raw), "env"
        except (ValueError, argparse.ArgumentTypeError):
            raise UsageError(f"{SEED_ENV} must be an integer in [0, 2**64), got {raw!r}") from None
    return DEFAULT_SEED, "default"


def main(argv: Sequence[str] | None = None, stdout: TextIO | None = None,
         environ: dict[str, str] | None = None) -> int:
    stdout = stdout or sys.stdout
    environ = dict(os.environ if environ is None else environ)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    verbose = getattr(args, "verbose", False)
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, stream=sys.stderr,
                        format="tara: %(message)s")
    fmt = getattr(args, "output_format", "table")
    buf = io.StringIO()
    out = Output(buf, fmt)
    try:
        args.seed_given = "seed" in args
        args.seed, source = _resolve_seed(args, environ)
        out.echo({"command": args.command, "seed": args.seed, "seed_source": source, "output_format": fmt})
        code = args.func(args, out)
    except UsageError as exc:
        stdout.write(buf.getvalue())
        print(f"tara: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, DatasetParseError, FileNotFoundError, IsADirectoryError) as exc:
        stdout.write(buf.getvalue())
        print(f"tara: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - anything else is a runtime failure
        stdout.write(buf.getvalue())
        log.debug("runtime failure", exc_info=True)
        print(f"tara: runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    stdout.write(buf.getvalue())
    return code


def main_entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
