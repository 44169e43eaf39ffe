"""Command-line entry point: ``emma <command> [--config FILE] [--section-key VALUE ...]``.

Every field of :class:`~emma.config.RunConfig` is exposed as a flag named
``--<section>-<key>`` (underscores become dashes). Flags override the config
file. Each command writes a config snapshot to ``<output_dir>/config.ini`` and
keeps all of its artifacts under ``output_dir``.

Exit codes: 0 success, 1 usage or config error, 2 runtime or numeric error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import numerics as nx
from .alignment import emma_alignment, legacy_alignment, oracle_alignment
from .config import ConfigError, RunConfig
from .evaluation import average_lagging, evaluate_traces, records_to_csv, sweep, toy_bleu
from .inference import extract_delays, offline_decode, run_emma_inference, wait_k_inference, write_trace
from .model import (
    CURVE_HEADER,
    InvariantViolation,
    TrainingDiverged,
    finetune_simultaneous,
    load_checkpoint,
    load_training_state,
    save_checkpoint,
    save_training_state,
    train_offline,
)
from .tasks import write_lexicon, write_split

log = logging.getLogger("emma")

COMMANDS = ("gen", "train", "finetune", "infer", "sweep", "bench-stability", "visualize", "eval")
BENCH_HEADER = ("length", "estimator", "max_abs_error", "nonfinite_count")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _flag(section: str, key: str) -> str:
    return f"--{section}-{key}".replace("_", "-")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="emma", description="Monotonic multihead attention toolkit on toy translation tasks.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        cmd = sub.add_parser(name)
        cmd.add_argument("--config", type=Path, help="INI file; flags override its values")
        cmd.add_argument("-v", "--verbose", action="store_true")
        group = cmd.add_argument_group("config fields")
        for section, obj in RunConfig().sections().items():
            for f in fields(obj):
                group.add_argument(_flag(section, f.name), dest=f"cfg:{section}:{f.name}", metavar="VALUE",
                                   help=f"{section}.{f.name}")
        if name in ("train", "finetune"):
            cmd.add_argument("--resume", type=Path, help="training state written by an earlier run")
        if name == "infer":
            cmd.add_argument("--policy", choices=("emma", "wait-k", "offline"), default="emma")
            cmd.add_argument("--source", help="space-separated source ids; default is a test example")
            cmd.add_argument("--threshold", type=float, help="default is the first eval threshold")
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    for dest, value in vars(args).items():
        if dest.startswith("cfg:") and value is not None:
            _, section, key = dest.split(":")
            cfg.set(section, key, value)
    return cfg


def _output_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.run.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _checkpoint(cfg: RunConfig, out: Path) -> Path:
    path = Path(cfg.run.checkpoint) if cfg.run.checkpoint else out / "simultaneous.ckpt"
    if not path.is_file():
        raise ConfigError(f"checkpoint not found: {path} (set run.checkpoint)")
    return path


def _eval_examples(cfg: RunConfig):
    test = cfg.task.build().splits()["test"]
    return test[:cfg.eval.eval_size] if cfg.eval.eval_size > 0 else test


def _max_len(cfg: RunConfig):
    return cfg.eval.max_len or None


def cmd_gen(cfg: RunConfig, out: Path, args) -> int:
    task = cfg.task.build()
    for name, examples in task.splits().items():
        write_split(out / f"{name}.tsv", examples)
    write_lexicon(out / "lexicon.tsv", task.lexicon())
    print(f"wrote {task.kind} splits to {out}")
    return 0


def cmd_train(cfg: RunConfig, out: Path, args) -> int:
    splits = cfg.task.build().splits()
    resume = load_training_state(args.resume) if args.resume else None
    model = train_offline(splits["train"], cfg.model, cfg.train.build(), out / "offline_curve.csv",
                          valid=splits["valid"], resume=resume)
    save_checkpoint(model, out / "offline.ckpt", {"steps": model.training_state.step})
    save_training_state(out / "offline.state", model.training_state)
    _report(model.training_log, out / "offline.ckpt")
    return 0


def cmd_finetune(cfg: RunConfig, out: Path, args) -> int:
    source = Path(cfg.run.offline_checkpoint) if cfg.run.offline_checkpoint else out / "offline.ckpt"
    if not source.is_file():
        raise ConfigError(f"offline checkpoint not found: {source}; run 'emma train' or set run.offline_checkpoint")
    offline = load_checkpoint(source)
    splits = cfg.task.build().splits()
    ft = cfg.finetune
    resume = load_training_state(args.resume) if args.resume else None
    model = finetune_simultaneous(offline, splits["train"], ft.weights(), ft.build(), out / "finetune_curve.csv",
                                  policy_seed=ft.policy_seed, resume=resume)
    manifest = {"steps": model.training_state.step, "offline": str(source),
                "latency_weight": ft.latency_weight, "variance_weight": ft.variance_weight}
    save_checkpoint(model, out / "simultaneous.ckpt", manifest)
    save_training_state(out / "finetune.state", model.training_state)
    _report(model.training_log, out / "simultaneous.ckpt")
    return 0


def _report(history, path: Path) -> None:
    if history:
        last = history[-1]
        print(f"step {last['step']}: " + ", ".join(f"{k}={last[k]:.6f}" for k in CURVE_HEADER[1:]))
    print(f"checkpoint {path}")


def cmd_infer(cfg: RunConfig, out: Path, args) -> int:
    model = load_checkpoint(_checkpoint(cfg, out))
    if args.source:
        source = [int(t) for t in args.source.split()]
    else:
        source = _eval_examples(cfg)[cfg.eval.example][0]
    threshold = args.threshold if args.threshold is not None else cfg.eval.thresholds[0]
    if args.policy == "emma":
        trace = run_emma_inference(model, source, threshold, _max_len(cfg))
    elif args.policy == "wait-k":
        trace = wait_k_inference(model, source, cfg.eval.wait_k, _max_len(cfg))
        threshold = None
    else:
        tokens = offline_decode(model, source, _max_len(cfg))
        print(" ".join(map(str, tokens)))
        return 0
    chunk = cfg.eval.chunk_seconds or None
    write_trace(out / "trace.txt", trace, threshold, chunk)
    sys.stdout.write(trace.to_lines())
    delays = extract_delays(trace, chunk)
    print(f"# output {' '.join(map(str, trace.tokens))}")
    print(f"# delays {' '.join(str(d) for d in delays)}")
    return 0


def cmd_eval(cfg: RunConfig, out: Path, args) -> int:
    model = load_checkpoint(_checkpoint(cfg, out))
    examples = _eval_examples(cfg)
    refs = [tgt for _, tgt in examples]
    rows = []
    for threshold in cfg.eval.thresholds:
        traces = [run_emma_inference(model, src, threshold, _max_len(cfg)) for src, _ in examples]
        bleu, al, incomplete, first = evaluate_traces(traces, examples)
        rows.append(("emma", repr(float(threshold)), bleu, al, incomplete, first))
    traces = [wait_k_inference(model, src, cfg.eval.wait_k, _max_len(cfg)) for src, _ in examples]
    bleu, al, incomplete, first = evaluate_traces(traces, examples)
    rows.append((f"wait-{cfg.eval.wait_k}", "", bleu, al, incomplete, first))
    hyps = [offline_decode(model, src, _max_len(cfg)) for src, _ in examples]
    offline_al = np.mean([average_lagging([len(s)] * max(len(h), 1), len(s), len(t)).value
                          for h, (s, t) in zip(hyps, examples)])
    rows.append(("offline", "", toy_bleu(hyps, refs), offline_al, 0, float("nan")))
    path = out / "eval.csv"
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(("policy", "threshold", "bleu", "al", "incomplete_count", "mean_first_delay"))
        for policy, threshold, bleu, al, incomplete, first in rows:
            writer.writerow((policy, threshold, f"{bleu:.6f}", f"{al:.6f}", incomplete, f"{first:.6f}"))
    sys.stdout.write(path.read_text(encoding="utf-8"))
    return 0


def cmd_sweep(cfg: RunConfig, out: Path, args) -> int:
    paths = [Path(p) for p in cfg.run.sweep_checkpoints] or [_checkpoint(cfg, out)]
    examples = _eval_examples(cfg)
    for path in paths:
        if not path.is_file():
            raise ConfigError(f"sweep checkpoint not found: {path}")
    for path in paths:
        model = load_checkpoint(path)
        records = sweep(model, examples, cfg.eval.thresholds, cfg.eval.seeds, cfg.task.kind, _max_len(cfg))
        target = out / ("sweep.csv" if len(paths) == 1 else f"sweep_{path.stem}.csv")
        target.write_text(records_to_csv(records), encoding="utf-8", newline="\n")
        print(f"# {path} -> {target}")
        sys.stdout.write(records_to_csv(records))
    return 0


def bench_rows(lengths, p_value: float, ylen: int) -> list[tuple[int, str, float, int]]:
    """Max error against the oracle and non-finite count for each estimator and source length."""
    rows = []
    for xlen in lengths:
        p = np.full((ylen, xlen), p_value)
        reference = oracle_alignment(p)
        with nx.allow_nonfinite():
            results = {
                "legacy_eps0": legacy_alignment(p, eps=0.0).alpha,
                "legacy_eps1e-10": legacy_alignment(p, eps=1e-10).alpha,
                "emma": emma_alignment(nx.constant(p)).data,
            }
        for name, alpha in results.items():
            finite = np.isfinite(alpha)
            err = float(np.max(np.abs(alpha - reference))) if finite.all() else float("nan")
            rows.append((int(xlen), name, err, int((~finite).sum())))
    return rows


def cmd_bench_stability(cfg: RunConfig, out: Path, args) -> int:
    rows = bench_rows(cfg.run.bench_lengths, cfg.run.bench_p, cfg.run.bench_ylen)
    path = out / "bench_stability.csv"
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(BENCH_HEADER)
        for xlen, name, err, bad in rows:
            writer.writerow((xlen, name, repr(err), bad))
    print(f"{'|X|':>6}  {'estimator':<16} {'max_abs_error':>14} {'nonfinite':>10}")
    for xlen, name, err, bad in rows:
        print(f"{xlen:>6}  {name:<16} {err:>14.3e} {bad:>10}")
    return 0


def cmd_visualize(cfg: RunConfig, out: Path, args) -> int:
    model = load_checkpoint(_checkpoint(cfg, out))
    src, tgt = _eval_examples(cfg)[cfg.eval.example]
    res = model.forward([(src, tgt)], simultaneous=True, absorb_eos=cfg.finetune.absorb_eos)
    target = out / "visualize"
    target.mkdir(exist_ok=True)
    heads = model.config.heads
    for k, (p, alpha) in enumerate(zip(res.probs[0], res.alphas[0])):
        layer, head = divmod(k, heads)
        np.savetxt(target / f"p_l{layer}_h{head}.csv", p.data, delimiter=",", fmt="%.9g")
        np.savetxt(target / f"alpha_l{layer}_h{head}.csv", alpha.data, delimiter=",", fmt="%.9g")
    print(f"example {cfg.eval.example}: |X|={len(src)} |Y|={len(tgt) + 1} (with EOS), "
          f"{len(res.alphas[0])} heads -> {target}")
    return 0


HANDLERS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "finetune": cmd_finetune,
    "infer": cmd_infer,
    "sweep": cmd_sweep,
    "bench-stability": cmd_bench_stability,
    "visualize": cmd_visualize,
    "eval": cmd_eval,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = resolve_config(args)
    except UsageError as exc:
        print(f"emma: error: {exc}", file=sys.stderr)
        return 1
    except (ConfigError, OSError) as exc:
        print(f"emma: config error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    try:
        out = _output_dir(cfg)
        cfg.save(out / "config.ini")
        return HANDLERS[args.command](cfg, out, args)
    except ConfigError as exc:
        print(f"emma: config error: {exc}", file=sys.stderr)
        return 1
    except (TrainingDiverged, InvariantViolation, FloatingPointError, ValueError, OSError) as exc:
        print(f"emma: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
