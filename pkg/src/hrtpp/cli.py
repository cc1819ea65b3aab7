"""Command-line entry point: ``hrtpp {simulate,fit,mine,trace,evaluate}``.

Exit codes: 0 success, 2 invalid input, 3 file-system failure, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import warnings
from pathlib import Path

from .config import ConfigError, RunConfig
from .core import InvalidRuleError, InvalidSequenceError, RuleSet
from .dsl import RuleSyntaxError, name_table, parse_rules_text
from .evaluation import EvaluationError, evaluate
from .io import FORMAT_VERSION, CorpusFormatError, atomic_write, dumps_json, load_names, read_corpus, write_corpus
from .mining import MiningError, mine
from .simulation import ScenarioError, ScenarioSpec, simulate_corpus
from .trace import intensity_trace
from .training import DivergentPredictionError, FitError, FittedModel, NumericalFailure, fit

EXIT_OK, EXIT_INVALID, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("hrtpp")


class UsageError(ValueError):
    pass


def _read_json(path: str) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None


def _load_corpus(path: str):
    corpus = read_corpus(path)
    if not corpus:
        raise UsageError(f"{path}: corpus is empty")
    return corpus, load_names(path, corpus[0].num_types)


def _load_rules(path: str | None, names, max_predicates: int, target: int) -> RuleSet:
    if path is None:
        return RuleSet([], target=target, max_predicates=max_predicates)
    parsed = parse_rules_text(Path(path).read_text(), name_table(list(names)), max_predicates)
    return RuleSet([r for r, _ in parsed], target=target, max_predicates=max_predicates)


def _load_model(path: str) -> FittedModel:
    """A fitted model file, or a mining report whose best model is used."""
    data = _read_json(path)
    if isinstance(data, dict) and data.get("kind") == "hrtpp-mining-report":
        if "best_model" not in data:
            raise UsageError(f"{path}: mining report has no model (empty rule set)")
        data = data["best_model"]
    try:
        return FittedModel.from_dict(data)
    except (KeyError, TypeError) as exc:
        raise UsageError(f"{path}: malformed model file ({exc!r})") from None


def cmd_simulate(args) -> int:
    spec = ScenarioSpec.from_dict(_read_json(args.spec))
    corpus, manifest = simulate_corpus(spec)
    out = Path(args.out)
    write_corpus(out / "corpus.jsonl", corpus)
    atomic_write(out / "manifest.json", dumps_json(manifest))
    atomic_write(out / "true_rules.txt", spec.rules_text())
    print(f"wrote {len(corpus)} sequences to {out / 'corpus.jsonl'}")
    return EXIT_OK


def cmd_fit(args) -> int:
    cfg = RunConfig.load(args.config)
    corpus, names = _load_corpus(args.corpus)
    rules = _load_rules(args.rules, names, cfg.encoding.max_predicates, corpus[0].target_type)
    model = fit(corpus, rules, cfg.fit, cfg.encoding, names=names)
    atomic_write(args.out, dumps_json(model.to_dict()))
    print(f"train NLL: {model.train_nll!r}")
    return EXIT_OK


def cmd_mine(args) -> int:
    cfg = RunConfig.load(args.config)
    corpus, names = _load_corpus(args.corpus)
    out = Path(args.out)
    rules_out = Path(args.rules_out) if args.rules_out else out.with_name(out.stem + ".rules.txt")
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        report = mine(corpus, cfg.mining, cfg.fit, cfg.encoding, names=names, seed=cfg.seed)
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    if report is None:
        atomic_write(out, dumps_json({"format_version": FORMAT_VERSION, "kind": "hrtpp-mining-report", "best_rules": [],
                                      "warning": "no predicate passed filtering; empty rule set"}))
        atomic_write(rules_out, "")
        print("no predicate passed filtering; wrote an empty rule set")
        return EXIT_OK
    atomic_write(out, dumps_json(report.to_dict()))
    atomic_write(rules_out, report.rules_text())
    stats = report.to_dict()["stats"]
    print(f"evaluations: {stats['evaluations']}  cache hit rate: {stats['cache_hit_rate']:.3f}")
    print(f"best held-out log-likelihood: {report.best_score!r}")
    sys.stdout.write(report.rules_text())
    return EXIT_OK


def cmd_trace(args) -> int:
    model = _load_model(args.model)
    corpus, _ = _load_corpus(args.corpus)
    if not 0 <= args.seq < len(corpus):
        raise UsageError(f"--seq {args.seq} out of range [0, {len(corpus) - 1}]")
    tr = intensity_trace(model, corpus[args.seq], args.dt)
    out = Path(args.out)
    ann = Path(args.annotations) if args.annotations else out.with_name(out.stem + ".annotations.csv")
    atomic_write(out, tr.to_csv())
    atomic_write(ann, tr.annotations_csv())
    print(f"wrote {len(tr.times)} rows to {out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    model = _load_model(args.model)
    corpus, _ = _load_corpus(args.corpus)
    truth = None
    if args.truth:
        truth = _load_rules(args.truth, model.names, model.encoding.max_predicates, model.target_type)
    report = evaluate(model, corpus, truth)
    atomic_write(args.out, dumps_json(report.to_dict()))
    out = Path(args.out)
    atomic_write(out.with_name(out.stem + ".table.txt"), report.table())
    atomic_write(out.with_name(out.stem + ".details.csv"), report.details_csv())
    sys.stdout.write(report.table())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hrtpp", description="Rule-augmented temporal point process toolkit")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="simulate a corpus from a scenario JSON")
    s.add_argument("--spec", required=True)
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("fit", help="fit weights for a fixed rule set")
    s.add_argument("--corpus", required=True)
    s.add_argument("--rules", help="rules file; omit for a rule-free fit")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_fit)

    s = sub.add_parser("mine", help="discover a rule set")
    s.add_argument("--corpus", required=True)
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--rules-out", help="winning rules file (default <out>.rules.txt)")
    s.set_defaults(func=cmd_mine)

    s = sub.add_parser("trace", help="write the intensity curve of one sequence as CSV")
    s.add_argument("--model", required=True, help="model JSON or mining report")
    s.add_argument("--corpus", required=True)
    s.add_argument("--seq", type=int, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--dt", type=float, help="grid step (default horizon/2000)")
    s.add_argument("--annotations", help="marker CSV (default <out>.annotations.csv)")
    s.set_defaults(func=cmd_trace)

    s = sub.add_parser("evaluate", help="NLL, RMSE and optional rule accuracy")
    s.add_argument("--model", required=True, help="model JSON or mining report")
    s.add_argument("--corpus", required=True)
    s.add_argument("--truth", help="ground-truth rules file")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_evaluate)
    return p


INVALID = (UsageError, ConfigError, ScenarioError, CorpusFormatError, InvalidSequenceError, InvalidRuleError,
           RuleSyntaxError, EvaluationError)
NUMERIC = (NumericalFailure, DivergentPredictionError, MiningError, FloatingPointError)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NUMERIC as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FitError, *INVALID) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
