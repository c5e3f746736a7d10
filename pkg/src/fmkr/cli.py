"""``fmkr`` command-line front end.

Every sub-command writes its reports under ``--out`` (default ``.``) with
write-then-rename. CSV reports start with one ``# generated <UTC time>``
line; everything after it is a deterministic function of the arguments.

Exit codes: 0 ok, 2 usage error, 3 missing file, 4 config violation,
5 malformed input data, 6 I/O failure.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import json
import logging
import os
import sys
import tempfile
from pathlib import Path


from fmkr import __version__, nn
from fmkr.config import ConfigError, build, load_config, parse_counts
from fmkr.episodes import InsufficientSamplesError
from fmkr.finetune import finetune
from fmkr.fleet import Strategy, simulate, synthetic_endpoint_datasets
from fmkr.ingest import (ParseError, align_and_fuse, parse_flow_file, parse_syslog_file,
                         read_fused_file, samples_to_arrays, split_support_query, write_fused_file)
from fmkr.meta import FileInbox, meta_train
from fmkr.metrics import per_stage_report, report_csv, report_json
from fmkr.stages import StageLabel
from fmkr.synth import SynthConfig, fused_samples, write_corpus

log = logging.getLogger("fmkr")

EXIT_USAGE, EXIT_MISSING, EXIT_CONFIG, EXIT_DATA, EXIT_IO = 2, 3, 4, 5, 6

# held-out test mix for ablate-batch when no evaluation file is given
ABLATION_TEST_COUNTS = {StageLabel.NT: 300, StageLabel.RN: 100, StageLabel.EF: 100,
                        StageLabel.LM: 100, StageLabel.DE: 100}


# ---------------------------------------------------------------------------
# output helpers
# ---------------------------------------------------------------------------

def _stamp() -> str:
    now = _dt.datetime.now(_dt.timezone.utc).replace(microsecond=0)
    return f"# generated {now.isoformat().replace('+00:00', 'Z')}\n"


def write_atomic(path: Path, data, header: bool = False) -> Path:
    """Write ``data`` (str or bytes) to a temp file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = ((_stamp() if header else "") + data).encode("utf-8")
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def strip_header(text: str) -> str:
    """Drop the timestamp line, for comparing reports across runs."""
    return text.split("\n", 1)[1] if text.startswith("# generated") else text


def _require(path) -> Path:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"no such file: {p}")
    return p


def _json(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True) + "\n"


# ---------------------------------------------------------------------------
# config plumbing
# ---------------------------------------------------------------------------

def _configs(args) -> dict:
    return load_config(args.config) if args.config else {}


def _seeded(args, extra=None) -> dict:
    out = dict(extra or {})
    if args.seed is not None:
        out["seed"] = args.seed
    return out


def _synth_cfg(args, file_values, **extra) -> SynthConfig:
    return build("synth", file_values, _seeded(args, extra))


def _load_dataset(args, file_values):
    """Fused samples from ``--data`` or, if absent, from the synthetic generator."""
    if getattr(args, "data", None):
        samples = read_fused_file(_require(args.data))
    else:
        samples = fused_samples(_synth_cfg(args, file_values), build("align", file_values))
    if not samples:
        raise ParseError("dataset is empty", path=getattr(args, "data", None))
    return samples


def _episode_and_train(args, file_values):
    ep = build("episodes", file_values, _seeded(args, {
        "k": args.k, "n_shot": args.n_shot, "n_query": args.n_query,
        "tasks_per_batch": args.tasks_per_batch}))
    balance = False if args.no_class_balance else None
    tr = build("train", file_values, _seeded(args, {
        "alpha": args.alpha, "beta": args.beta, "rounds": args.rounds,
        "batch_size": getattr(args, "batch_size", None), "class_balance": balance}))
    return ep, tr


# ---------------------------------------------------------------------------
# sub-commands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    fv = _configs(args)
    extra = {"separation": args.separation, "syslog_prob": args.syslog_prob, "shift": args.shift,
             "flow_dim": args.flow_dim}
    if args.counts:
        extra["counts"] = parse_counts(args.counts)
    cfg = _synth_cfg(args, fv, **extra)
    flows, syslog = write_corpus(cfg, args.out)
    print(f"wrote {flows} and {syslog}")
    return 0


def cmd_ingest(args) -> int:
    fv = _configs(args)
    align = build("align", fv, {"window": args.window, "label_fusion_rule": args.label_rule})
    strict = not args.lenient
    flows = parse_flow_file(_require(args.flows), flow_dim=args.flow_dim, strict=strict)
    syslogs = parse_syslog_file(_require(args.syslog), strict=strict)
    fused = align_and_fuse(flows, syslogs, align)
    ds = split_support_query(fused)
    out = Path(args.out)
    write_fused_file(out / "fused.csv", fused)
    errors = [{"path": e.path, "line": e.line, "message": str(e)}
              for e in [*flows.errors, *syslogs.errors]]
    summary = {
        "flows": len(flows), "syslogs": len(syslogs), "fused": len(fused),
        "syslog_matched": sum(s.syslog_matched for s in fused),
        "support": len(ds.support), "query": len(ds.query),
        "class_counts": {s.name: int(ds.class_counts.get(s, 0)) for s in StageLabel},
        "window": align.window, "label_fusion_rule": align.label_fusion_rule.value,
        "skipped_lines": errors,
    }
    write_atomic(out / "ingest.json", _json(summary))
    print(f"fused {len(fused)} samples ({len(ds.query)} DE) -> {out / 'fused.csv'}")
    return 0


def cmd_train(args) -> int:
    fv = _configs(args)
    ep, tr = _episode_and_train(args, fv)
    ds = split_support_query(_load_dataset(args, fv))
    init = nn.load_model(_require(args.init_model)) if args.init_model else None
    inbox = FileInbox(args.inbox) if args.inbox else None
    model, report = meta_train(ds, ep, tr, inbox=inbox, init_model=init)
    out = Path(args.out)
    model_path = out / "model.fmkr"
    write_atomic(model_path, nn.model_to_bytes(model))
    report.final_model_path = str(model_path)
    write_atomic(out / "train_report.csv", report.to_csv(), header=True)
    summary = {
        "initial_digest": report.initial_digest, "final_digest": report.final_digest,
        "rounds": tr.rounds, "alpha": tr.alpha, "beta": tr.beta, "batch_size": tr.batch_size,
        "class_balance": tr.class_balance, "k": ep.k, "n_shot": ep.n_shot,
        "n_query": ep.n_query, "tasks_per_batch": ep.tasks_per_batch,
        "replacements": [list(r) for r in report.replacements],
        "model": model_path.name, "support": len(ds.support), "query": len(ds.query),
    }
    write_atomic(out / "train_summary.json", _json(summary))
    print(f"final model {report.final_digest[:12]} -> {model_path}")
    return 0


def cmd_finetune(args) -> int:
    fv = _configs(args)
    model = nn.load_model(_require(args.model))
    cfg = build("finetune", fv, _seeded(args, {
        "mode": args.mode, "freeze": args.freeze, "n_layers": args.n_layers,
        "new_head_classes": args.new_head_classes, "epochs": args.epochs, "lr": args.lr,
        "batch_size": args.batch_size, "holdout": args.holdout,
        "class_balance": False if args.no_class_balance else None}))
    local = read_fused_file(_require(args.data))
    tuned, report = finetune(model, local, cfg)
    out = Path(args.out)
    write_atomic(out / "finetuned.fmkr", nn.model_to_bytes(tuned))
    write_atomic(out / "finetune_report.json", report.to_json() + "\n")
    print(f"held-out accuracy {report.pre_accuracy:.4f} -> {report.post_accuracy:.4f}")
    return 0


def cmd_simulate_fleet(args) -> int:
    fv = _configs(args)
    base = build("fleet", fv, _seeded(args, {
        "participants": args.participants, "rounds": args.rounds,
        "local_epochs": args.local_epochs, "cost_unit": args.cost_unit}))
    if args.model:
        model = nn.load_model(_require(args.model))
    else:
        ep, tr = build("episodes", fv, _seeded(args)), build("train", fv, _seeded(args))
        ds = split_support_query(fused_samples(_synth_cfg(args, fv)))
        model, _ = meta_train(ds, ep, tr)
    datasets = synthetic_endpoint_datasets(base.participants, seed=base.seed, shift=args.shift)
    if datasets[0].feature_dim != model.n_inputs:
        raise ConfigError(f"model expects {model.n_inputs} inputs, endpoint data has "
                          f"{datasets[0].feature_dim}")
    strategies = list(Strategy) if args.strategy == "all" else [Strategy(args.strategy)]
    out = Path(args.out)
    summaries = []
    for strat in strategies:
        cfg = build("fleet", fv, _seeded(args, {
            "participants": base.participants, "rounds": base.rounds, "strategy": strat,
            "local_epochs": base.local_epochs, "cost_unit": base.cost_unit}))
        report = simulate(cfg, model, datasets)
        write_atomic(out / f"fleet_{strat.value}.csv", report.to_csv(), header=True)
        summaries.append(report.summary())
        print(f"{strat.value}: total cost {report.total_cost:g}, ratio {report.cost_ratio}")
    write_atomic(out / "fleet_summary.json", _json(summaries))
    return 0


def _read_predictions(path: Path) -> tuple[list, list]:
    truths, preds = [], []
    with open(path, encoding="utf-8") as fh:
        lines = [ln.strip() for ln in fh if ln.strip() and not ln.startswith("#")]
    if not lines:
        raise ParseError("empty predictions file", path=str(path))
    header = [h.strip().lower() for h in lines[0].split(",")]
    if "truth" not in header or "pred" not in header:
        raise ParseError("predictions header must contain truth and pred", line=1, path=str(path))
    ti, pi = header.index("truth"), header.index("pred")
    for n, ln in enumerate(lines[1:], start=2):
        cells = ln.split(",")
        try:
            truths.append(StageLabel.parse(cells[ti].strip()))
            preds.append(StageLabel.parse(cells[pi].strip()))
        except (ValueError, IndexError) as exc:
            raise ParseError(str(exc), line=n, path=str(path)) from None
    return truths, preds


def cmd_eval(args) -> int:
    if args.predictions:
        truths, preds = _read_predictions(_require(args.predictions))
    elif args.model and args.data:
        model = nn.load_model(_require(args.model))
        X, y = samples_to_arrays(read_fused_file(_require(args.data)))
        preds = [StageLabel(int(p)) for p in nn.predict(model, X)]
        truths = [StageLabel(int(v)) for v in y]
    else:
        raise ConfigError("eval needs --predictions or both --model and --data")
    rows = per_stage_report(preds, truths)
    out = Path(args.out)
    write_atomic(out / "eval.csv", report_csv(rows), header=True)
    write_atomic(out / "eval.json", report_json(rows) + "\n")
    total = rows[-1]
    print(f"Total acc {total.accuracy:.4f} f1 {total.f1:.4f}")
    return 0


def cmd_ablate_batch(args) -> int:
    fv = _configs(args)
    try:
        sizes = [int(s) for s in args.sizes.split(",") if s.strip()]
    except ValueError:
        raise ConfigError(f"--sizes must be comma-separated integers, got {args.sizes!r}") from None
    if not sizes or any(s < 1 for s in sizes):
        raise ConfigError("--sizes needs at least one positive batch size")
    ds = split_support_query(_load_dataset(args, fv))
    if args.eval_data:
        Xe, ye = samples_to_arrays(read_fused_file(_require(args.eval_data)))
    else:
        synth = _synth_cfg(args, fv)
        test_cfg = _synth_cfg(args, fv, counts=ABLATION_TEST_COUNTS, seed=synth.seed + 2000)
        Xe, ye = samples_to_arrays(fused_samples(test_cfg, build("align", fv)))
    out = Path(args.out)
    summary = []
    for size in sizes:
        args.batch_size = size
        ep, tr = _episode_and_train(args, fv)
        _, report = meta_train(ds, ep, tr, eval_set=(Xe, ye))
        write_atomic(out / f"ablate_bs{size}.csv", report.to_csv(with_eval=True), header=True)
        accs = [r.eval_acc for r in report.rows]
        summary.append({"batch_size": size, "effective_batch_size": min(size, len(ds.query)),
                        "final_eval_acc": accs[-1], "best_eval_acc": max(accs),
                        "final_digest": report.final_digest})
        print(f"batch {size}: final eval acc {accs[-1]:.4f}")
    write_atomic(out / "ablate_summary.json", _json(summary))
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _global_flags(p: argparse.ArgumentParser, suppress: bool) -> None:
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    p.add_argument("--seed", type=int, default=d(None), help="master seed for every RNG stream")
    p.add_argument("--out", default=d("."), help="output directory")
    p.add_argument("--config", default=d(None), help="INI config file (see README)")


def _train_flags(p: argparse.ArgumentParser, batch: bool = True) -> None:
    p.add_argument("--data", help="fused CSV from `ingest` (default: synthetic corpus)")
    p.add_argument("--rounds", type=int)
    p.add_argument("--alpha", type=float, help="inner (support) learning rate")
    p.add_argument("--beta", type=float, help="outer (query) learning rate")
    if batch:
        p.add_argument("--batch-size", type=int, help="query batch size")
    p.add_argument("--k", type=int, help="classes per task")
    p.add_argument("--n-shot", type=int)
    p.add_argument("--n-query", type=int)
    p.add_argument("--tasks-per-batch", type=int)
    p.add_argument("--no-class-balance", action="store_true", help="use unit class weights")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fmkr", description="Meta-learning kill-chain stage detection on fused flow + syslog data.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_):
        p = sub.add_parser(name, help=help_)
        _global_flags(p, suppress=True)
        p.set_defaults(func=func)
        return p

    p = add("synth", cmd_synth, "generate a synthetic flow + syslog corpus")
    p.add_argument("--counts", help="e.g. NT:3000,RN:300,EF:150,LM:40,DE:10")
    p.add_argument("--separation", type=float, help="class mean distance in noise sigmas")
    p.add_argument("--syslog-prob", type=float)
    p.add_argument("--shift", type=float, help="domain shift magnitude")
    p.add_argument("--flow-dim", type=int)

    p = add("ingest", cmd_ingest, "align flows with syslog lines into fused samples")
    p.add_argument("--flows", required=True)
    p.add_argument("--syslog", required=True)
    p.add_argument("--window", type=float, help="alignment window in seconds")
    p.add_argument("--label-rule", choices=["max-severity", "flow-wins"])
    p.add_argument("--flow-dim", type=int, default=80)
    p.add_argument("--lenient", action="store_true", help="skip malformed lines instead of failing")

    p = add("train", cmd_train, "meta-train a stage classifier")
    _train_flags(p)
    p.add_argument("--inbox", help="NDJSON file of model replacement messages")
    p.add_argument("--init-model", help="start from this model instead of a fresh init")

    p = add("finetune", cmd_finetune, "fine-tune a model on local data")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True, help="fused CSV of local samples")
    p.add_argument("--mode", choices=["extend-n", "reinit-n", "replace-head"])
    p.add_argument("--freeze", type=int, help="number of leading layers to freeze")
    p.add_argument("--n-layers", type=int)
    p.add_argument("--new-head-classes", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--holdout", type=float)
    p.add_argument("--no-class-balance", action="store_true")

    p = add("simulate-fleet", cmd_simulate_fleet, "simulate model deployment strategies")
    p.add_argument("--model", help="base model (default: meta-train one on synthetic data)")
    p.add_argument("--participants", type=int)
    p.add_argument("--rounds", type=int)
    p.add_argument("--strategy", default="all", choices=["all", *(s.value for s in Strategy)])
    p.add_argument("--local-epochs", type=int)
    p.add_argument("--cost-unit", type=float)
    p.add_argument("--shift", type=float, default=1.0, help="per-endpoint domain shift")

    p = add("eval", cmd_eval, "per-stage metrics for predictions or a model")
    p.add_argument("--predictions", help="CSV with truth,pred columns")
    p.add_argument("--model")
    p.add_argument("--data", help="fused CSV to score --model on")

    p = add("ablate-batch", cmd_ablate_batch, "meta-train once per query batch size")
    _train_flags(p, batch=False)
    p.add_argument("--sizes", default="32,64,128")
    p.add_argument("--eval-data", help="fused CSV scored every round (default: synthetic test mix)")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"fmkr: missing file: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (ParseError, nn.IntegrityError, InsufficientSamplesError) as exc:
        print(f"fmkr: bad input data: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ConfigError as exc:
        print(f"fmkr: config violation: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as exc:
        print(f"fmkr: invalid value: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"fmkr: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
