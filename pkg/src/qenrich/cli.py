"""Command-line entry point.

    qenrich <command> [--config FILE] [--section.key=value ...]

Commands: prepare, train-cs, train-qse, train-rl, build-index, build-pools,
evaluate, sweep, search, decode.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import encoder as enc
from . import pipeline
from .checkpoint import CheckpointError
from .config import ConfigError, RunConfig
from .corpus import CorpusError, MAX_LEN, encode_tokens, tokenize_text
from .encoder import TrainingError
from .qse import greedy_decode
from .ranker import EVAL_FIELDS, MODES, RankerError, SearchIndex, SynonymLexicon, enrich, search

EXIT_CONFIG, EXIT_STAGE, EXIT_TRAINING = 2, 3, 4
WRITING = {"prepare", "train-cs", "train-qse", "train-rl", "build-index", "build-pools", "sweep"}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qenrich", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config (defaults built in)")
    common.add_argument("--workdir", help="shortcut for --paths.workdir")
    common.add_argument("--seed", type=int, help="global seed")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", parents=[common], help="ingest or synthesize, split, build vocabularies")
    p.add_argument("--synthetic", type=int, help="generate N synthetic triples instead of reading a corpus")
    p.add_argument("--corpus", help="input JSONL corpus")
    for name in ("train-cs", "train-qse", "train-rl", "build-index", "build-pools"):
        sub.add_parser(name, parents=[common])

    p = sub.add_parser("evaluate", parents=[common], help="R@1/5/10 and MRR over the fixed pools")
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--beta", type=float)
    p.add_argument("--eval-field", choices=EVAL_FIELDS, default="query")
    p.add_argument("--enricher", help="enricher checkpoint overriding the mode's default")
    p.add_argument("--output", help="write the report here instead of reports/eval_{mode}_{field}.json")

    p = sub.add_parser("sweep", parents=[common], help="grid over alpha or beta, CSV output")
    p.add_argument("--param", choices=("alpha", "beta"), required=True)
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("--eval-field", choices=EVAL_FIELDS, default="query")

    p = sub.add_parser("search", parents=[common], help="interactive search, one query per line")
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--beta", type=float)
    p.add_argument("--top-k", type=int)
    p.add_argument("--enricher")

    p = sub.add_parser("decode", parents=[common], help="batch enrichment to JSONL")
    p.add_argument("--input", help="queries, one per line (default: test-split queries)")
    p.add_argument("--output", help="output JSONL (default stdout)")
    p.add_argument("--enricher")
    return parser


def resolve_config(args, extra: list[str]) -> RunConfig:
    overrides = list(extra)
    if args.workdir:
        overrides.append(f"paths.workdir={args.workdir}")
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if getattr(args, "synthetic", None) is not None:
        overrides += [f"corpus.synthetic={args.synthetic}", "paths.corpus=null"]
    if getattr(args, "corpus", None):
        overrides.append(f"paths.corpus={args.corpus}")
    if getattr(args, "mode", None):
        overrides.append(f"hybrid.mode={args.mode}")
    if getattr(args, "beta", None) is not None:
        overrides.append(f"hybrid.beta={args.beta}")
    if getattr(args, "top_k", None) is not None:
        overrides.append(f"hybrid.top_k={args.top_k}")
    for item in overrides:
        if not item.lstrip("-") or "=" not in item:
            raise ConfigError(f"unrecognized argument {item!r}")
    if args.config:
        return RunConfig.load(args.config, overrides)
    return RunConfig().with_overrides(overrides)


def cmd_search(cfg: RunConfig, args) -> int:
    ws = pipeline.Workspace(cfg.paths.workdir)
    cs_model = enc.load_model(ws.cs)
    if not ws.index.exists():
        raise pipeline.StageError("no index; run build-index first")
    index = SearchIndex.load(ws.index, expected_fingerprint=cs_model.fingerprint())
    qse_model = None
    if cfg.hybrid.uses_enricher:
        qse_model = pipeline.enricher_for_serving(cfg, args.enricher)
    lexicon = SynonymLexicon.load(cfg.paths.lexicon) if cfg.paths.lexicon else SynonymLexicon()
    interactive = sys.stdin.isatty()
    while True:
        if interactive:
            print("query> ", end="", flush=True)
        line = sys.stdin.readline()
        if not line:
            break
        tokens = tokenize_text(line, "query")
        if not tokens.tokens:
            print("(empty query)")
            continue
        if qse_model is not None:
            print("enriched: " + " ".join(enrich(qse_model, tokens.tokens)))
        for rank, (cid, score) in enumerate(search(index, cs_model, qse_model, tokens, cfg.hybrid,
                                                   lexicon=lexicon), 1):
            print(f"{rank}\t{cid}\t{score:.6f}")
        print(flush=True)
    return 0


def cmd_decode(cfg: RunConfig, args) -> int:
    qse_model = pipeline.enricher_for_serving(cfg, args.enricher)
    if args.input:
        queries = [line.strip() for line in Path(args.input).read_text(encoding="utf-8").splitlines()]
        queries = [q for q in queries if q]
    else:
        data = pipeline.load_prepared(cfg)
        queries = [t.query for t in data.split.test if t.query]
    out = open(args.output, "w", encoding="utf-8") if args.output else sys.stdout
    try:
        for q in queries:
            tokens = tokenize_text(q, "query")
            if not tokens.tokens:
                continue
            src = encode_tokens(tokens, qse_model.query_vocab, True, MAX_LEN["query"])
            result = greedy_decode(qse_model, src)
            enriched = enrich(qse_model, tokens.tokens)
            out.write(json.dumps({"query": q, "enriched_query": " ".join(enriched),
                                  "log_prob": result.log_prob}) + "\n")
    finally:
        if out is not sys.stdout:
            out.close()
    return 0


def run(args, cfg: RunConfig) -> int:
    cmd = args.command
    if cmd == "prepare":
        info = pipeline.prepare(cfg)
        print(json.dumps(info, sort_keys=True))
    elif cmd == "train-cs":
        history = pipeline.train_cs(cfg)
        print(json.dumps(history[-1] if history else {}, sort_keys=True))
    elif cmd == "train-qse":
        history = pipeline.train_qse(cfg)
        print(json.dumps({"final_loss": history[-1] if history else None}))
    elif cmd == "train-rl":
        trace = pipeline.train_rl(cfg)
        print(json.dumps(trace[-1] if trace else {}, sort_keys=True))
    elif cmd == "build-index":
        index = pipeline.build_index_stage(cfg)
        print(json.dumps({"entries": len(index), "dim": index.dim, "fingerprint": index.fingerprint}))
    elif cmd == "build-pools":
        print(json.dumps(pipeline.build_pools_stage(cfg), sort_keys=True))
    elif cmd == "evaluate":
        # an explicit --output replaces the per-mode report so ad hoc runs never clobber it
        result = pipeline.evaluate(cfg, args.eval_field, args.enricher, write=not args.output)
        if args.output:
            Path(args.output).write_text(result.dumps() + "\n")
        print(result.dumps())
    elif cmd == "sweep":
        try:
            values = [float(v) for v in args.values.split(",") if v.strip()]
        except ValueError:
            raise ConfigError(f"bad --values {args.values!r}") from None
        for row in pipeline.sweep(cfg, args.param, values, args.eval_field):
            print(json.dumps(row))
    elif cmd == "search":
        return cmd_search(cfg, args)
    elif cmd == "decode":
        return cmd_decode(cfg, args)
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args, extra)
        if args.command in WRITING:
            with pipeline.Workspace(cfg.paths.workdir).lock():
                return run(args, cfg)
        return run(args, cfg)
    except (ConfigError, CorpusError, FileNotFoundError) as exc:
        print(f"qenrich: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (pipeline.StageError, CheckpointError, RankerError) as exc:
        print(f"qenrich: {exc}", file=sys.stderr)
        return EXIT_STAGE
    except TrainingError as exc:
        print(f"qenrich: training failed: {exc}", file=sys.stderr)
        return EXIT_TRAINING


if __name__ == "__main__":
    sys.exit(main())
