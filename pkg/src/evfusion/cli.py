"""Command-line entry point: generate, train, quantize, eval and bench.

Every subcommand takes ``--config FILE``, a flat ``key = value`` text file
whose keys are the long flag names. Values given on the command line win
over the file, which wins over built-in defaults. Artifacts go to a
timestamped run directory holding ``config.txt`` with the resolved values.

Exit codes: 0 success, 1 usage error, 2 runtime or IO error.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import json
import logging
import sys
from pathlib import Path

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2

log = logging.getLogger("evfusion")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# --------------------------------------------------------------------------
# argument parsing


def _scheme(text: str):
    from .quant.qat import QuantScheme, SchemeError

    try:
        return QuantScheme.parse(text)
    except SchemeError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def _common(p: argparse.ArgumentParser, out_default: str = "runs") -> None:
    p.add_argument("--config", default=None, help="key = value file mirroring the long flag names")
    p.add_argument("--seed", type=int, default=0, help="global seed")
    p.add_argument("--out", default=out_default, help="output directory")
    p.add_argument("--run-name", default=None,
                   help="run directory name under --out (default: <command>-<timestamp>)")
    p.add_argument("--threads", type=_positive_int, default=None, help="cap on BLAS/worker threads")
    p.add_argument("-v", "--verbose", action="store_true", default=False, help="log progress")


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = _Parser(prog="evfusion", description=__doc__.splitlines()[0], formatter_class=fmt)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="render synthetic recordings and a split manifest", formatter_class=fmt)
    g.add_argument("--count", type=int, required=True, help="number of recordings (required)")
    _common(g, out_default="data")

    t = sub.add_parser("train", help="train a network (FP32 or quantization-aware)", formatter_class=fmt)
    t.add_argument("--manifest", required=True, help="manifest.tsv from generate (required)")
    t.add_argument("--modality", choices=("evs", "rgb", "fusion"), default="evs", help="input branch(es)")
    t.add_argument("--scheme", type=_scheme, default="fp32",
                   help="fp32, lsq+:BITS (2-8), dorefa, irnet, irnet_star or reactnet")
    t.add_argument("--T", dest="T", type=float, default=20.0, help="window length in ms")
    t.add_argument("--stack", type=_positive_int, default=1, help="windows stacked per input")
    t.add_argument("--epochs", type=_positive_int, default=30, help="maximum epochs")
    t.add_argument("--batch-size", type=_positive_int, default=16, help="minibatch size")
    t.add_argument("--lr", type=float, default=1e-4, help="initial learning rate")
    t.add_argument("--weight-decay", type=float, default=1e-5, help="decoupled weight decay")
    t.add_argument("--windows-per-recording", type=int, default=8,
                   help="evenly spaced windows drawn per recording (0 = all)")
    t.add_argument("--init", default=None, help="FP32 checkpoint to fine-tune from")
    t.add_argument("--teacher", default=None, help="FP32 checkpoint for distillation (reactnet)")
    _common(t)

    e = sub.add_parser("eval", help="distance-binned error tables and plots", formatter_class=fmt)
    e.add_argument("--checkpoint", required=True, help="model, packed or oracle checkpoint (required)")
    e.add_argument("--manifest", required=True, help="manifest.tsv from generate (required)")
    e.add_argument("--split", choices=("val", "test1", "test2"), default="test1", help="split to score")
    e.add_argument("--mad", choices=("max", "median"), default="max",
                   help="M.A.D. as maximum or median absolute deviation")
    _common(e)

    q = sub.add_parser("quantize", help="export a QAT checkpoint to packed inference form", formatter_class=fmt)
    q.add_argument("--checkpoint", required=True, help="QAT model checkpoint (required)")
    q.add_argument("--export", action="store_true", default=False, help="write packed.evfc")
    _common(q)

    b = sub.add_parser("bench", help="single-window throughput and OPs as JSON lines", formatter_class=fmt)
    b.add_argument("--checkpoint", required=True, help="model or packed checkpoint (required)")
    b.add_argument("--iters", type=_positive_int, default=200, help="timed iterations")
    b.add_argument("--warmup", type=int, default=20, help="untimed iterations")
    _common(b)
    return parser


def read_config_file(path) -> dict[str, str]:
    """Flat ``key = value`` (or ``key value``) lines; ``#`` starts a comment."""
    out = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc}") from exc
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            key, _, value = line.partition(" ")
        key = key.strip().lstrip("-").replace("-", "_")
        if not key:
            raise UsageError(f"{path}:{n}: malformed line {raw!r}")
        out[key] = value.strip()
    return out


_TRUE, _FALSE = {"1", "true", "yes", "on"}, {"0", "false", "no", "off"}


def _subparser(parser, command):
    for action in parser._subparsers._group_actions:
        return action.choices[command]


def parse_args(argv) -> argparse.Namespace:
    parser = build_parser()
    # required flags may come from the config file, so they are checked after merging
    required = {}
    for name, sub in parser._subparsers._group_actions[0].choices.items():
        required[name] = [a for a in sub._actions if a.required]
        for a in required[name]:
            a.required = False
    args = parser.parse_args(argv)
    sub = _subparser(parser, args.command)
    if args.config is not None:
        actions = {a.dest: a for a in sub._actions if a.dest not in ("help", "config")}
        values = read_config_file(args.config)
        unknown = sorted(set(values) - set(actions))
        if unknown:
            raise UsageError(f"unknown key(s) in {args.config}: {', '.join(unknown)}")
        defaults = {}
        for key, value in values.items():
            if value == "":
                continue  # written for unset optional flags
            if isinstance(actions[key], (argparse._StoreTrueAction, argparse._StoreFalseAction)):
                low = value.lower()
                if low not in _TRUE | _FALSE:
                    raise UsageError(f"{args.config}: {key} expects true/false, got {value!r}")
                defaults[key] = low in _TRUE
            else:
                defaults[key] = value
        # re-parse so the command line overrides the file; string defaults go through each flag's type
        sub.set_defaults(**defaults)
        args = parser.parse_args(argv)
    missing = [a.option_strings[0] for a in required[args.command] if getattr(args, a.dest) is None]
    if missing:
        raise UsageError(f"evfusion {args.command}: the following arguments are required: {', '.join(missing)}")
    return args


def resolved_config(args: argparse.Namespace) -> dict:
    out = {}
    for k, v in sorted(vars(args).items()):
        if k in ("config",):
            continue
        out[k] = str(v) if v is not None else ""
    return out


def write_config(args: argparse.Namespace, path) -> None:
    lines = [f"{k} = {v}" for k, v in resolved_config(args).items() if k != "command"]
    Path(path).write_text(f"# evfusion {args.command}\n" + "\n".join(lines) + "\n")


def make_run_dir(args: argparse.Namespace) -> Path:
    name = args.run_name or f"{args.command}-{_dt.datetime.now():%Y%m%d-%H%M%S}"
    base = Path(args.out)
    run = base / name
    n = 1
    while args.run_name is None and run.exists():
        n += 1
        run = base / f"{name}-{n}"
    run.mkdir(parents=True, exist_ok=args.run_name is not None)
    write_config(args, run / "config.txt")
    return run


# --------------------------------------------------------------------------
# subcommands


def _label_norm(meta: dict):
    import numpy as np

    if "label_mean" not in meta or "label_std" not in meta:
        raise RuntimeError("checkpoint lacks label standardization (label_mean/label_std)")
    return np.asarray(meta["label_mean"], np.float32), np.asarray(meta["label_std"], np.float32)


def cmd_generate(args) -> int:
    from .synthetic import generate_dataset

    if args.count < 1:
        raise UsageError("--count must be at least 1 (nothing to split)")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    def progress(i, n):
        log.info("recording %d/%d", i, n)

    manifest = generate_dataset(out, args.count, seed=args.seed, progress=progress)
    write_config(args, out / "config.txt")
    print(manifest)
    return EXIT_OK


def cmd_train(args) -> int:
    import numpy as np

    from .checkpoint import load_model, save_model
    from .dataset import label_stats, load_split
    from .events import WindowConfig
    from .model import CollisionNet, ModelConfig
    from .quant.qat import qat_wrap
    from .training import TrainConfig, config_dict, fit

    scheme = args.scheme
    if args.modality == "fusion" and scheme.kind == "reactnet" and not args.teacher:
        raise UsageError("--modality fusion --scheme reactnet requires --teacher")
    if not Path(args.manifest).is_file():
        raise FileNotFoundError(f"manifest not found: {args.manifest}")
    window = WindowConfig(T_ms=args.T, stack_k=args.stack)
    if args.init:
        model = load_model(args.init)
        if model.scheme is not None and model.scheme.kind != "fp32":
            raise RuntimeError(f"--init must be an FP32 checkpoint, got scheme {model.scheme}")
        if (model.cfg.modality, model.cfg.stack_k) != (args.modality, args.stack):
            raise RuntimeError(f"--init checkpoint is {model.cfg.modality}/stack {model.cfg.stack_k}, "
                               f"expected {args.modality}/stack {args.stack}")
    else:
        model = CollisionNet(ModelConfig(modality=args.modality, stack_k=args.stack, seed=args.seed))
    model = qat_wrap(model, scheme)
    teacher = None
    if args.teacher:
        teacher = load_model(args.teacher)
        if teacher.cfg.modality != args.modality or teacher.cfg.stack_k != args.stack:
            raise RuntimeError("teacher modality/stack does not match the student")

    cfg = TrainConfig(batch_size=args.batch_size, lr0=args.lr, weight_decay=args.weight_decay,
                      max_epochs=args.epochs, seed=args.seed,
                      windows_per_recording=args.windows_per_recording or None)
    run = make_run_dir(args)
    train_set = load_split(args.manifest, "train", window, cfg.windows_per_recording)
    val_set = load_split(args.manifest, "val", window, cfg.windows_per_recording)
    mean, std = label_stats(train_set.labels)
    log.info("%d train / %d val windows", len(train_set), len(val_set))
    result = fit(model, train_set, val_set, cfg, teacher=teacher, log_path=run / "train_log.csv",
                 label_norm=(mean, std))
    meta = {"label_mean": [float(v) for v in mean], "label_std": [float(v) for v in std],
            "T_ms": args.T, "stack_k": args.stack, "train": config_dict(cfg),
            "best_epoch": result.best_epoch}
    save_model(run / "model.evfc", result.model, meta)
    if result.swa_state is not None:
        from .training import set_state

        set_state(model, result.swa_state)
        save_model(run / "swa_model.evfc", model, meta)
        set_state(model, result.best_state)
    print(run / "model.evfc")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .checkpoint import load
    from .evaluation import MeanPredictor, ModelPredictor, OraclePredictor, emit_report, evaluate
    from .events import WindowConfig

    model, ck = load(args.checkpoint)
    window = WindowConfig(T_ms=float(ck.meta.get("T_ms", 20.0)), stack_k=int(ck.config.get("stack_k", 1)))
    if ck.kind == "oracle":
        kind = ck.meta.get("predictor", "oracle")
        if kind == "oracle":
            predictor = OraclePredictor()
        elif kind == "mean":
            predictor = MeanPredictor(_label_norm(ck.meta)[0])
        else:
            raise RuntimeError(f"unknown oracle predictor {kind!r}")
    else:
        predictor = ModelPredictor(model, *_label_norm(ck.meta), name=Path(args.checkpoint).stem)
    run = make_run_dir(args)
    records, tabs = evaluate(predictor, args.manifest, args.split, window, args.mad)
    paths = emit_report(tabs, records, run, name=getattr(predictor, "name", "model"))
    for p in paths:
        print(p)
    return EXIT_OK


def cmd_quantize(args) -> int:
    import numpy as np

    from .checkpoint import load_model, save_packed
    from .quant.qat import export_packed
    from .tensor import no_grad

    model = load_model(args.checkpoint)
    if model.scheme is None or model.scheme.kind == "fp32":
        raise RuntimeError("checkpoint/scheme mismatch: an FP32 checkpoint has nothing to pack; "
                           "train with --scheme first")
    from .checkpoint import read_container

    meta = read_container(args.checkpoint).meta
    packed = export_packed(model)
    cfg = model.cfg
    rng = np.random.default_rng(args.seed)
    inputs = {}
    if cfg.modality in ("evs", "fusion"):
        inputs["evs"] = rng.uniform(-1, 1, (4, cfg.in_channels_evs, 80, 80)).astype(np.float32)
    if cfg.modality in ("rgb", "fusion"):
        inputs["rgb"] = rng.uniform(-1, 1, (4, cfg.in_channels_rgb, 80, 80)).astype(np.float32)
    with no_grad():
        ref = model.forward(**inputs, mode="eval").data
    diff = float(np.abs(packed.forward(**inputs) - ref).max())
    report = {"scheme": str(model.scheme), "max_abs_diff": diff}
    if args.export:
        run = make_run_dir(args)
        meta = {k: v for k, v in meta.items() if k != "layers"}
        save_packed(run / "packed.evfc", packed, meta)
        report["packed"] = str(run / "packed.evfc")
    print(json.dumps(report, sort_keys=True))
    return EXIT_OK


def cmd_bench(args) -> int:
    from .checkpoint import load
    from .evaluation import benchmark_throughput
    from .opcount import model_report, write_table_csv

    model, ck = load(args.checkpoint)
    if model is None:
        raise RuntimeError("oracle checkpoints cannot be benchmarked")
    report, rows = model_report(model.cfg, model.scheme)
    timing = benchmark_throughput(model, n_iters=args.iters, warmup=args.warmup, seed=args.seed)
    record = {
        "checkpoint": str(args.checkpoint), "kind": ck.kind, "modality": model.cfg.modality,
        "scheme": str(model.scheme), **timing, "total_ops": report.total_ops, "bops": report.bops,
        "int4_ops": report.int4_ops, "int8_ops": report.int8_ops, "flops": report.flops,
        "param_bytes": report.param_bytes,
    }
    line = json.dumps(record, sort_keys=True)
    run = make_run_dir(args)
    with open(run / "bench.jsonl", "a") as fh:
        fh.write(line + "\n")
    write_table_csv(rows, run / "ops_table.csv")
    print(line)
    return EXIT_OK


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "eval": cmd_eval,
            "quantize": cmd_quantize, "bench": cmd_bench}


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if not exc.code else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(message)s")
    try:
        if args.threads:
            from threadpoolctl import threadpool_limits

            with threadpool_limits(limits=args.threads):
                return COMMANDS[args.command](args)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"evfusion {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - every runtime failure maps to exit 2
        log.debug("failure", exc_info=True)
        print(f"evfusion {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
