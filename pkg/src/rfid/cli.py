"""Command-line entry point: ``rfid {gen-data,train,eval,analyze,case,experiment}``.

Exit codes: 0 success, 2 usage/config error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
from collections import Counter
from importlib import resources
from pathlib import Path

import torch

from .analysis import ca_ratio, case_report
from .data import (CompatibilityError, ConfigurationError, CorpusError, SynthesisConfig, Vocabulary,
                   format_input, generate_synthetic_corpus, load_corpus, split_corpus, write_corpus)
from .evaluation import Prediction, evaluate, report_from_predictions
from .model import ModelConfig, load_checkpoint
from .training import NumericError, TrainConfig, Variant, train

logger = logging.getLogger("rfid")

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4
SPLITS = ("train", "dev", "test")
VARIANTS = ("fid", "rfid", "rfid-noguide")
BUNDLED_CONFIGS = ("desk", "full")
_SECTIONS = {"synthesis": SynthesisConfig, "model": ModelConfig, "train": TrainConfig}
# fields that come from the data or the variant rather than from the user
_DERIVED = {"vocab_size", "guide_decoder", "variant", "K"}


class UsageError(Exception):
    pass


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def _add_overrides(parser, *sections):
    group = parser.add_argument_group("config overrides")
    for section in sections:
        for f in dataclasses.fields(_SECTIONS[section]):
            if (f.name in _DERIVED and section != "synthesis") or f.name == "seed":
                continue
            dest = f"{section}.{f.name}"
            if f.type in ("bool", bool):
                group.add_argument(_flag(f.name), dest=dest, type=_parse_bool, default=None, metavar="BOOL")
            elif f.name == "num_rational_range":
                group.add_argument(_flag(f.name), dest=dest, type=int, nargs=2, default=None, metavar=("LO", "HI"))
            else:
                typ = {"int": int, "float": float, "str": str}.get(str(f.type), str)
                group.add_argument(_flag(f.name), dest=dest, type=typ, default=None)


def _parse_bool(s: str) -> bool:
    if s.lower() in ("1", "true", "yes"):
        return True
    if s.lower() in ("0", "false", "no"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {s!r}")


def load_config(path) -> dict:
    """Read a JSON config with optional ``synthesis``/``model``/``train`` sections.

    ``desk`` and ``full`` name the bundled configurations.
    """
    if path is None:
        return {}
    if path in BUNDLED_CONFIGS:
        text = resources.files("rfid").joinpath(f"configs/{path}.json").read_text()
    else:
        p = Path(path)
        if not p.is_file():
            raise UsageError(f"config file not found: {path}")
        text = p.read_text()
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as e:
        raise UsageError(f"{path}: invalid JSON ({e.msg})") from None
    unknown = set(cfg) - set(_SECTIONS) - {"experiment"}
    if unknown:
        raise UsageError(f"{path}: unknown config sections {sorted(unknown)}")
    return cfg


def resolve(args, section: str, **fixed):
    """Config-file values, then CLI overrides, then ``fixed`` values."""
    values = dict(load_config(args.config).get(section, {}))
    for key, val in vars(args).items():
        if key.startswith(section + ".") and val is not None:
            values[key.split(".", 1)[1]] = val
    values.update(fixed)
    if section == "model":
        return ModelConfig.from_dict(values)
    if section == "synthesis":
        return SynthesisConfig.from_dict(values)
    return TrainConfig(**values)


# -- data helpers --------------------------------------------------------------

def _data_meta(data_dir: Path) -> dict:
    meta = data_dir / "meta.json"
    return json.loads(meta.read_text()) if meta.is_file() else {}


def _load_split(data: str, split: str, K=None):
    """``data`` is either a generated corpus directory or a JSONL file."""
    path = Path(data)
    if path.is_dir():
        meta = _data_meta(path)
        K = K or meta.get("K")
        path = path / f"{split}.jsonl"
    if not path.is_file():
        raise CorpusError(f"corpus file not found: {path}")
    if K is None:
        raise UsageError("K unknown: pass --K or use a directory written by gen-data")
    return load_corpus(path, K)


def _data_vocab(data: str):
    path = Path(data)
    vocab_file = (path if path.is_dir() else path.parent) / "vocab.txt"
    return Vocabulary.load(vocab_file) if vocab_file.is_file() else None


def _load_model(args):
    ckpt = load_checkpoint(args.ckpt)
    vocab = ckpt.vocab
    data_vocab = _data_vocab(args.data)
    if vocab is None:
        vocab = data_vocab
    elif data_vocab is not None and data_vocab != vocab:
        raise CompatibilityError("vocab mismatch: corpus vocabulary differs from the checkpoint's")
    if vocab is None:
        raise CompatibilityError("vocab missing: checkpoint has no vocabulary and none found next to the corpus")
    if Path(args.data).is_dir():
        meta = _data_meta(Path(args.data))
        if meta.get("K", ckpt.model.cfg.K) != ckpt.model.cfg.K:
            raise CompatibilityError(f"K mismatch: corpus K={meta['K']}, checkpoint K={ckpt.model.cfg.K}")
        if meta.get("max_input_tokens", 0) > ckpt.model.cfg.L:
            raise CompatibilityError(f"L mismatch: corpus inputs need {meta['max_input_tokens']} tokens, checkpoint L={ckpt.model.cfg.L}")
    return ckpt, vocab


def _emit(text: str, out) -> None:
    if out:
        Path(out).write_text(text + "\n", encoding="utf-8")
    else:
        print(text)


# -- subcommands ---------------------------------------------------------------

def cmd_gen_data(args) -> int:
    scfg = resolve(args, "synthesis", **({"seed": args.seed} if args.seed is not None else {}))
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise UsageError(f"cannot create {out}: {e.strerror}") from None
    if not os.access(out, os.W_OK):
        raise UsageError(f"output directory not writable: {out}")
    examples = generate_synthetic_corpus(scfg)
    splits = dict(zip(SPLITS, split_corpus(examples)))
    for name, exs in splits.items():
        write_corpus(out / f"{name}.jsonl", exs)
    vocab = Vocabulary.from_corpus(examples)
    vocab.save(out / "vocab.txt")
    max_tokens = max(len(format_input(e.question, p).split()) for e in examples for p in e.passages)
    meta = {"K": scfg.K, "max_input_tokens": max_tokens, "synthesis": dataclasses.asdict(scfg),
            "counts": {k: len(v) for k, v in splits.items()}, "vocab_size": len(vocab)}
    (out / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    hist = Counter(sum(e.labels) for e in examples)
    print(f"wrote {out}: " + ", ".join(f"{k}={len(v)}" for k, v in splits.items())
          + f"; K={scfg.K}; vocab={len(vocab)}; max input tokens={max_tokens}")
    print("rational passages per question: " + ", ".join(f"{r}:{hist[r]}" for r in sorted(hist)))
    return 0


def _train_configs(args, variant, seed):
    data = Path(args.data)
    meta = _data_meta(data) if data.is_dir() else {}
    K = meta.get("K") or args.K
    if K is None:
        raise UsageError("K unknown: pass --K or use a directory written by gen-data")
    seed = {} if seed is None else {"seed": seed}
    tcfg = resolve(args, "train", variant=variant, **seed)
    mcfg = resolve(args, "model", K=K, **seed)
    return K, tcfg, mcfg


def _run_training(args, variant, seed, out_dir, resume=False, stop_at=None):
    K, tcfg, mcfg = _train_configs(args, variant, seed)
    train_ex = _load_split(args.data, "train", K)
    dev_ex = _load_split(args.data, "dev", K)
    vocab = _data_vocab(args.data) or Vocabulary.from_corpus(list(train_ex) + list(dev_ex))
    return train(train_ex, dev_ex, tcfg, mcfg, vocab, out_dir=out_dir, resume=resume, stop_at=stop_at), vocab


def cmd_train(args) -> int:
    result, _ = _run_training(args, args.variant, args.seed, args.out, resume=args.resume, stop_at=args.stop_at)
    last = next((r for r in reversed(result.history) if r["dev_EM"] is not None), None)
    best = next(r for r in result.history if r["step"] == result.best_step)
    if last is not None:
        acc = best["dev_ratn_acc"]
        print(f"best step {result.best_step}: dev EM {best['dev_EM']:.4f}, dev rationale accuracy "
              + (f"{acc:.4f}" if acc is not None else "n/a"))
    print(f"checkpoint: {Path(args.out) / 'best.ckpt'}; metrics: {Path(args.out) / 'metrics.csv'}")
    return 0


def cmd_eval(args) -> int:
    if args.oracle:
        examples = _load_split(args.data, args.split, args.K)
        preds = [Prediction(ex.id, ex.answers[0], list(map(int, ex.labels))) for ex in examples]
        report = report_from_predictions(examples, preds)
    else:
        ckpt, vocab = _load_model(args)
        examples = _load_split(args.data, args.split, ckpt.model.cfg.K)
        report = evaluate(examples, ckpt.model, vocab)
    _emit(report.to_json(), args.out)
    if args.records:
        with open(args.records, "w", encoding="utf-8") as fh:
            for r in report.records:
                fh.write(json.dumps(r) + "\n")
    if args.out:
        print(f"EM {report.exact_match:.4f}  rationale accuracy {report.ratn_accuracy:.4f}  n={report.n_questions}")
    return 0


def cmd_analyze(args) -> int:
    ckpt, vocab = _load_model(args)
    examples = _load_split(args.data, args.split, ckpt.model.cfg.K)
    if args.id:
        return _case(args, ckpt, vocab, examples)
    report = ca_ratio(examples, ckpt.model, vocab)
    _emit(report.to_json(with_rows=args.rows), args.out)
    if args.csv:
        with open(args.csv, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            K = ckpt.model.cfg.K
            w.writerow(["id"] + [f"label_{k}" for k in range(K)] + [f"ca_{k}" for k in range(K)]
                       + [f"guidance_{k}" for k in range(K)])
            for r in report.rows:
                w.writerow([r["id"]] + r["labels"] + [repr(x) for x in r["ca"]] + [repr(x) for x in r["guidance"]])
    return 0


def _case(args, ckpt, vocab, examples) -> int:
    try:
        rep = case_report(args.id, examples, ckpt.model, vocab)
    except KeyError:
        print(f"error: question id not found: {args.id}", file=sys.stderr)
        return EXIT_DATA
    _emit(rep.to_json() if args.json else rep.to_table(), args.out)
    return 0


def cmd_case(args) -> int:
    ckpt, vocab = _load_model(args)
    examples = _load_split(args.data, args.split, ckpt.model.cfg.K)
    return _case(args, ckpt, vocab, examples)


EXPERIMENT_COLUMNS = ("variant", "seed", "EM", "ratn_acc", "r_pos_neg", "dev_EM", "best_step")


def _mean(values):
    values = [v for v in values if v is not None]
    return sum(values) / len(values) if values else None


def experiment_orderings(means: dict) -> dict:
    """Directional checks over per-variant means."""
    em = {v: means[v]["EM"] for v in VARIANTS}
    r = {v: means[v]["r_pos_neg"] for v in VARIANTS}
    ok = all(x is not None for x in r.values())
    return {
        "EM rfid > fid": em["rfid"] > em["fid"],
        "EM rfid-noguide > fid": em["rfid-noguide"] > em["fid"],
        "EM rfid >= rfid-noguide >= fid": em["rfid"] >= em["rfid-noguide"] >= em["fid"],
        "r rfid > rfid-noguide > fid": ok and r["rfid"] > r["rfid-noguide"] > r["fid"],
    }


def run_experiment(args, seeds, out: Path, split: str = "test") -> tuple[list, dict]:
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    table = out / "experiment.csv"

    def flush(extra=()):
        with open(table, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(EXPERIMENT_COLUMNS)
            for r in list(rows) + list(extra):
                w.writerow(["" if r[c] is None else (repr(r[c]) if isinstance(r[c], float) else r[c])
                            for c in EXPERIMENT_COLUMNS])

    for seed in seeds:
        for variant in VARIANTS:
            run_dir = out / f"{variant}-seed{seed}"
            logger.info("training %s seed %d", variant, seed)
            result, vocab = _run_training(args, variant, seed, run_dir)
            examples = _load_split(args.data, split, result.model.cfg.K)
            report = evaluate(examples, result.model, vocab)
            ratio = ca_ratio(examples, result.model, vocab)
            (run_dir / "eval.json").write_text(report.to_json() + "\n")
            (run_dir / "analyze.json").write_text(ratio.to_json() + "\n")
            best = next(r for r in result.history if r["step"] == result.best_step)
            rows.append({"variant": variant, "seed": seed, "EM": report.exact_match,
                         "ratn_acc": report.ratn_accuracy if Variant.parse(variant).uses_rationale_loss else None,
                         "r_pos_neg": ratio.r_pos_neg, "dev_EM": best["dev_EM"], "best_step": result.best_step})
            flush()
            print(f"{variant:>13} seed {seed}: EM {report.exact_match:.4f}  r_pos/neg {ratio.r_pos_neg}", flush=True)
    means = {}
    for variant in VARIANTS:
        sel = [r for r in rows if r["variant"] == variant]
        means[variant] = {"variant": variant, "seed": "mean", "best_step": None,
                          **{c: _mean([r[c] for r in sel]) for c in ("EM", "ratn_acc", "r_pos_neg", "dev_EM")}}
    flush(means.values())
    return rows, means


def cmd_experiment(args) -> int:
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    rows, means = run_experiment(args, seeds, Path(args.out), split=args.split)
    print(f"\n{'variant':>13}  {'EM':>7}  {'ratn_acc':>8}  {'r_pos/neg':>9}")
    for v in VARIANTS:
        m = means[v]
        acc = f"{m['ratn_acc']:.4f}" if m["ratn_acc"] is not None else "-"
        r = f"{m['r_pos_neg']:.3f}" if m["r_pos_neg"] is not None else "-"
        print(f"{v:>13}  {m['EM']:.4f}  {acc:>8}  {r:>9}")
    for name, ok in experiment_orderings(means).items():
        print(f"[{'holds' if ok else 'fails'}] {name}")
    return 0


# -- parser --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rfid", description="Fusion-in-decoder reader with rationale guidance.")
    p.add_argument("--threads", type=int, default=None, help="cap on torch worker threads (default: $RFID_THREADS or 1)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic train/dev/test corpus")
    g.add_argument("--out", required=True)
    g.add_argument("--config", default=None, help="JSON config path, or a bundled name: desk, full")
    g.add_argument("--seed", type=int, default=None)
    _add_overrides(g, "synthesis")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train one variant")
    t.add_argument("--data", required=True)
    t.add_argument("--variant", choices=VARIANTS, default="rfid")
    t.add_argument("--config", default=None, help="JSON config path, or a bundled name: desk, full")
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--K", type=int, default=None, help="passages per question when --data is a JSONL file")
    t.add_argument("--resume", action="store_true", help="continue from the state saved in --out")
    t.add_argument("--stop-at", type=int, default=None, help="stop at this step, leaving a resumable state")
    _add_overrides(t, "model", "train")
    t.set_defaults(func=cmd_train)

    for name, func, help_ in (("eval", cmd_eval, "exact match and rationale metrics"),
                              ("analyze", cmd_analyze, "cross-attention positive/negative ratio"),
                              ("case", cmd_case, "per-passage report for one question")):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--ckpt", required=name != "eval")
        s.add_argument("--data", required=True)
        s.add_argument("--split", choices=SPLITS, default="test")
        s.add_argument("--K", type=int, default=None)
        s.add_argument("--out", default=None)
        if name == "eval":
            s.add_argument("--records", default=None, help="write per-example records as JSONL")
            s.add_argument("--oracle", action="store_true", help="score the gold answers instead of a model")
        if name in ("analyze", "case"):
            s.add_argument("--id", required=name == "case", default=None)
            s.add_argument("--json", action="store_true", help="case report as JSON instead of a table")
        if name == "analyze":
            s.add_argument("--rows", action="store_true", help="include per-question rows in the JSON")
            s.add_argument("--csv", default=None, help="write per-question attention rows as CSV")
        s.set_defaults(func=func)

    e = sub.add_parser("experiment", help="paired fid / rfid / rfid-noguide runs over seeds")
    e.add_argument("--data", required=True)
    e.add_argument("--seeds", default="0,1,2")
    e.add_argument("--out", required=True)
    e.add_argument("--config", default=None, help="JSON config path, or a bundled name: desk, full")
    e.add_argument("--split", choices=SPLITS, default="test")
    e.add_argument("--K", type=int, default=None)
    _add_overrides(e, "model", "train")
    e.set_defaults(func=cmd_experiment)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    threads = args.threads or int(os.environ.get("RFID_THREADS", "1"))
    torch.set_num_threads(max(threads, 1))
    if getattr(args, "func", None) is cmd_eval and not args.oracle and not args.ckpt:
        parser.error("eval requires --ckpt unless --oracle is given")
    try:
        return args.func(args)
    except (UsageError, ConfigurationError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (CorpusError, CompatibilityError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
