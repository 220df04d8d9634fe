"""Command-line entry point: ``tttse {gen-data,train,enhance,eval}``.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numeric failure.
Log verbosity comes from ``TTTSE_LOG_LEVEL`` (default INFO).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import fields
from pathlib import Path

from . import __version__
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .data import DataError, DatasetHandle, DomainSpec, build_dataset, default_benchmark, derive_seed
from .dsp import SignalError
from .metrics import aggregate
from .model import ModelError, NumericError
from .tasks import VARIANTS, AuxTask, NoiseBank, TaskError
from .train import TrainConfig, build_and_train
from .ttt import STRATEGIES, TttConfig, TttError, TttState, noisy_records, reevaluate_source, run_ttt_eval
from .wavio import WavFormatError, write_wav

logger = logging.getLogger("tttse")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
LOG_ENV = "TTTSE_LOG_LEVEL"
TASK_ALIASES = {"nytt": "nytt-real"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 by default, which here means a data error
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _read_config(path: str | None) -> dict:
    if not path:
        return {}
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise UsageError(f"config {path} must hold a JSON object")
    return cfg


def _merge(file_cfg: dict, overrides: dict) -> dict:
    """File values, then every flag the user actually set."""
    out = dict(file_cfg)
    out.update({k: v for k, v in overrides.items() if v is not None})
    return out


def _variant(name: str) -> str:
    v = TASK_ALIASES.get(name, name)
    if v not in VARIANTS:
        raise UsageError(f"unknown task {name!r}; choose from msp, nytt, {', '.join(sorted(VARIANTS))}")
    return v


# -- gen-data --------------------------------------------------------------

def cmd_gen_data(args) -> int:
    out = Path(args.out)
    if args.spec:
        cfg = _read_config(args.spec)
        specs = [DomainSpec.from_dict(d) for d in cfg.get("domains", [cfg])]
        if args.seed is not None:
            for i, s in enumerate(specs):
                s.seed = derive_seed(args.seed, i)
    else:
        specs = list(default_benchmark(args.seed or 0, args.n_train, args.n_test, args.duration).values())
    names = [s.name for s in specs]
    if len(set(names)) != len(names):
        raise UsageError(f"domain names must be unique, got {names}")
    for spec in specs:
        handle = build_dataset(spec, out / spec.name)
        print(f"{spec.name}: {len(handle)} utterances, families {sorted(handle.families)}, "
              f"snr {spec.snr_range[0]:g}..{spec.snr_range[1]:g} dB -> {out / spec.name}")
    return EXIT_OK


# -- train -----------------------------------------------------------------

def cmd_train(args) -> int:
    file_cfg = _read_config(args.config)
    overrides = {"epochs": args.epochs, "batch_size": args.batch_size, "lr": args.lr, "seed": args.seed,
                 "variant": _variant(args.task) if args.task else None,
                 "ss_weight": 0.0 if args.baseline else None}
    try:
        cfg = TrainConfig.from_dict(_merge(file_cfg, overrides))
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc
    cfg.variant = _variant(cfg.variant)
    data = DatasetHandle(args.data).load()
    if any(u.clean is None for u in data):
        raise DataError(f"{args.data} has no clean references; training needs a generated corpus")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    history_path = Path(args.history) if args.history else out.with_suffix(".history.jsonl")
    t0 = time.perf_counter()
    with open(history_path, "w") as hist:
        def on_epoch(rec):
            hist.write(json.dumps(rec, sort_keys=True) + "\n")
            hist.flush()

        result = build_and_train(data, cfg, on_epoch)
    meta = result.metadata()
    meta["method"] = "baseline" if not cfg.ss_weight else cfg.variant
    meta["train_seconds"] = round(time.perf_counter() - t0, 3)
    opt = result.optimizer
    state = opt.state_dict() if len(opt.params) == len(result.model.registry) else None
    save_checkpoint(result.model, out, meta, state)
    last = result.history[-1]
    print(f"trained {meta['method']} ({result.model.task}, {result.model.topology()['encoder_blocks']} encoder "
          f"blocks) for {cfg.epochs} epochs in {meta['train_seconds']:.1f} s; "
          f"val SI-SDR {last.get('val_si_sdr', float('nan')):.2f} dB "
          f"(noisy {last.get('val_noisy_si_sdr', float('nan')):.2f}) -> {out}")
    return EXIT_OK


# -- enhance / eval helpers ------------------------------------------------

def _load(path: str):
    ck = load_checkpoint(path)
    conf = ck.metadata.get("config", {})
    method = ck.metadata.get("method") or conf.get("variant") or ("msp" if ck.model.task == "msp" else "nytt-real")
    variant = conf.get("variant") or ("msp" if ck.model.task == "msp" else "nytt-real")
    return ck.model, _variant(variant), method


def _aux(variant: str, noise_dir: str | None) -> AuxTask:
    bank = NoiseBank.from_directory(noise_dir) if noise_dir else None
    if noise_dir and not bank:
        raise DataError(f"no .wav files in noise directory {noise_dir}")
    return AuxTask(variant, bank=bank)


def _ttt_config(args, strategy: str | None) -> TttConfig:
    file_cfg = _read_config(args.config)
    overrides = {"strategy": strategy, "lr": args.ttt_lr, "steps": args.steps, "window": args.window,
                 "seed": args.seed, "bias_only": True if getattr(args, "bias_only", False) else None}
    merged = _merge(file_cfg, overrides)
    try:
        return TttConfig(**merged)
    except TypeError as exc:
        known = [f.name for f in fields(TttConfig)]
        raise UsageError(f"unknown TTT options in {sorted(merged)}; known: {known}") from exc


def cmd_enhance(args) -> int:
    model, variant, _ = _load(args.ckpt)
    cfg = _ttt_config(args, args.ttt or "none")
    aux = _aux(variant, args.noise_dir)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    state = TttState(model, aux, cfg)
    n = 0
    with open(out / "diagnostics.jsonl", "w") as diag_fh:
        for utt in DatasetHandle(args.inp):
            enhanced, diag = state.step(utt.uid, utt.noisy)
            write_wav(out / f"{utt.uid}.wav", enhanced)
            diag_fh.write(json.dumps(diag, sort_keys=True) + "\n")
            n += 1
    print(f"enhanced {n} file(s) with strategy {cfg.label} -> {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    strategies = [s.strip() for s in args.strategies.split(",") if s.strip()]
    bad = [s for s in strategies if s not in STRATEGIES]
    if bad:
        raise UsageError(f"unknown strategies {bad}; choose from {list(STRATEGIES)}")
    source = DatasetHandle(args.source).load() if args.source else []
    shifted = DatasetHandle(args.shifted).load()
    records = noisy_records(shifted, "shifted") + noisy_records(source, "source")
    for path in args.ckpt:
        model, variant, method = _load(path)
        aux = _aux(variant, args.noise_dir)
        plan = ["none"] if method == "baseline" else strategies
        for strategy in plan:
            cfg = _ttt_config(args, strategy)
            t0 = time.perf_counter()
            recs, state = run_ttt_eval(model, shifted, cfg, aux, method=method, domain="shifted")
            if source:
                recs += reevaluate_source(state, source, domain="source")
            for r in recs:
                r.method = method
                if method == "baseline":
                    r.strategy = "-"
            records += recs
            logger.info("%s / %s done in %.1f s", method, cfg.label, time.perf_counter() - t0)
    table = aggregate(records)
    if args.report:
        Path(args.report).parent.mkdir(parents=True, exist_ok=True)
        Path(args.report).write_text(table.to_csv())
    if args.records:
        with open(args.records, "w") as fh:
            for r in records:
                fh.write(json.dumps(r.as_dict(), sort_keys=True) + "\n")
    print(table.to_text())
    return EXIT_OK


# -- parser ----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="tttse", description="Speech enhancement with test-time training on a Y-shaped mask model.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="synthesize train/test corpora")
    g.add_argument("--spec", help="JSON DomainSpec, or {\"domains\": [...]}; default: the built-in benchmark")
    g.add_argument("--out", required=True, help="output directory (one subdirectory per domain)")
    g.add_argument("--seed", type=int, default=None)
    g.add_argument("--n-train", type=int, default=200)
    g.add_argument("--n-test", type=int, default=40)
    g.add_argument("--duration", type=float, default=2.0, help="seconds per utterance")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="joint training of main and self-supervised branches")
    t.add_argument("--task", help="msp, nytt (= nytt-real), nytt-real or nytt-gaussian")
    t.add_argument("--baseline", action="store_true", help="main loss only (no self-supervised branch)")
    t.add_argument("--data", required=True, help="corpus directory written by gen-data")
    t.add_argument("--config", help="JSON file with TrainConfig fields; flags override it")
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--history", help="per-epoch JSON lines (default: next to the checkpoint)")
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_train)

    def ttt_flags(q, many_ckpts=False):
        q.add_argument("--ckpt", required=True, action="append" if many_ckpts else "store",
                       help="checkpoint" + (" (repeat for several methods)" if many_ckpts else ""))
        q.add_argument("--config", help="JSON file with TttConfig fields; flags override it")
        q.add_argument("--ttt-lr", type=float)
        q.add_argument("--steps", type=int, help="gradient steps per sample")
        q.add_argument("--window", type=int, help="online-batch window size")
        q.add_argument("--noise-dir", help="WAV directory used as the NyTT-real noise bank")
        q.add_argument("--seed", type=int)

    e = sub.add_parser("enhance", help="enhance WAV files, optionally adapting at test time")
    ttt_flags(e)
    e.add_argument("--in", dest="inp", required=True, help="a .wav file or a directory of them")
    e.add_argument("--out", required=True)
    e.add_argument("--ttt", choices=STRATEGIES[1:], help="adaptation strategy (default: none)")
    e.add_argument("--bias-only", action="store_true")
    e.set_defaults(func=cmd_enhance)

    v = sub.add_parser("eval", help="strategy matrix on shifted data plus source re-evaluation")
    ttt_flags(v, many_ckpts=True)
    v.add_argument("--source", help="source-domain corpus for the forgetting check")
    v.add_argument("--shifted", required=True, help="shifted-domain corpus")
    v.add_argument("--strategies", default=",".join(STRATEGIES))
    v.add_argument("--report", help="CSV path for the aggregated table")
    v.add_argument("--records", help="JSON lines path for per-utterance records")
    v.set_defaults(func=cmd_eval)
    return p


def main(argv: list[str] | None = None) -> int:
    level = os.environ.get(LOG_ENV, "INFO").upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO), format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, TttError, ModelError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, CheckpointError, WavFormatError, SignalError, TaskError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
