"""Stagewise training / evaluation pipeline over a working directory.

Layout under ``paths.workdir``::

    data/         triples.jsonl, split.json, {code,description,query}.vocab
    checkpoints/  cs/, qse/, rl/ (post-RL enricher), critic/
    pools.jsonl   fixed evaluation pools (+ pools.meta.json)
    index.jsonl   code-vector index
    reports/      metric reports, reward trace, sweep CSVs
    manifests/    one run manifest per stage
"""

from __future__ import annotations

import contextlib
import csv
import fcntl
import hashlib
import json
import logging
import platform
import random
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from . import __version__
from . import encoder as enc
from . import qse as seq
from . import rl
from .config import RunConfig
from .corpus import (
    DatasetSplit, Triple, Vocabulary, build_vocabulary, encode_tokens, field_stream,
    generate_synthetic_corpus, preprocess_corpus, read_jsonl, split_dataset, write_jsonl,
)
from .metrics import MetricReport
from .ranker import (
    SearchIndex, SynonymLexicon, build_eval_pools, build_index,
    evaluate_testset, load_pools, save_pools,
)

log = logging.getLogger(__name__)


class StageError(RuntimeError):
    """A prerequisite artifact is missing or was produced under another config."""


class Workspace:
    def __init__(self, root):
        self.root = Path(root)

    data = property(lambda self: self.root / "data")
    triples = property(lambda self: self.root / "data" / "triples.jsonl")
    split = property(lambda self: self.root / "data" / "split.json")
    cs = property(lambda self: self.root / "checkpoints" / "cs")
    qse = property(lambda self: self.root / "checkpoints" / "qse")
    rl = property(lambda self: self.root / "checkpoints" / "rl")
    critic = property(lambda self: self.root / "checkpoints" / "critic")
    pools = property(lambda self: self.root / "pools.jsonl")
    pools_meta = property(lambda self: self.root / "pools.meta.json")
    index = property(lambda self: self.root / "index.jsonl")
    reports = property(lambda self: self.root / "reports")
    manifests = property(lambda self: self.root / "manifests")

    def vocab(self, name: str) -> Path:
        return self.data / f"{name}.vocab"

    @contextlib.contextmanager
    def lock(self):
        self.root.mkdir(parents=True, exist_ok=True)
        with open(self.root / ".lock", "w") as fh:
            fcntl.flock(fh, fcntl.LOCK_EX)
            try:
                yield
            finally:
                fcntl.flock(fh, fcntl.LOCK_UN)


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(ws: Workspace, cfg: RunConfig, stage: str, artifacts: Sequence[Path], **extra) -> dict:
    files = []
    for a in artifacts:
        a = Path(a)
        files.extend(sorted(p for p in a.rglob("*") if p.is_file()) if a.is_dir() else [a])
    manifest = {
        "stage": stage,
        "config_hash": cfg.stage_hash(stage) if stage in _HASHED else cfg.full_hash(),
        "seed": cfg.seed,
        "versions": {"qenrich": __version__, "python": platform.python_version(),
                     "torch": torch.__version__, "numpy": np.__version__},
        "artifacts": {str(p.relative_to(ws.root)): sha256_file(p) for p in files},
    }
    manifest.update(extra)
    ws.manifests.mkdir(parents=True, exist_ok=True)
    path = ws.manifests / f"{stage}.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


_HASHED = ("prepare", "train-cs", "train-qse", "train-rl", "build-index", "build-pools")


def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)


# --------------------------------------------------------------------------
# Data


@dataclass
class Prepared:
    triples: dict[str, Triple]
    split: DatasetSplit
    code_vocab: Vocabulary
    desc_vocab: Vocabulary
    query_vocab: Vocabulary


def prepare(cfg: RunConfig, corpus_path: Optional[str] = None) -> dict:
    """Ingest (or synthesize), preprocess, split 8:1:1 and build vocabularies."""
    ws = Workspace(cfg.paths.workdir)
    corpus_path = corpus_path or cfg.paths.corpus
    if corpus_path:
        raw = read_jsonl(corpus_path)
    else:
        raw = generate_synthetic_corpus(cfg.corpus.synthetic, cfg.seed)
    triples, dropped = preprocess_corpus(raw)
    split = split_dataset(triples, cfg.seed)
    ws.data.mkdir(parents=True, exist_ok=True)
    write_jsonl(triples, ws.triples)
    ws.split.write_text(json.dumps(split.manifest(), indent=1) + "\n")
    size = cfg.corpus.vocab_size
    for name, source in (("code", "code"), ("description", "description"), ("query", "query")):
        streams = [field_stream(t, source) for t in split.train if getattr(t, source)]
        build_vocabulary(streams, size).save(ws.vocab(name))
    info = {"records": len(raw), "kept": len(triples), "dropped": dropped,
            "train": len(split.train), "valid": len(split.valid), "test": len(split.test)}
    (ws.data / "stats.json").write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")
    write_manifest(ws, cfg, "prepare", [ws.data])
    return info


def _check_stage(ws: Workspace, cfg: RunConfig, stage: str) -> None:
    path = ws.manifests / f"{stage}.json"
    if not path.exists():
        raise StageError(f"stage '{stage}' has not been run in {ws.root}")
    recorded = json.loads(path.read_text())["config_hash"]
    if recorded != cfg.stage_hash(stage):
        raise StageError(f"artifacts of stage '{stage}' were produced under a different config "
                         f"({recorded} != {cfg.stage_hash(stage)})")


def load_prepared(cfg: RunConfig) -> Prepared:
    ws = Workspace(cfg.paths.workdir)
    _check_stage(ws, cfg, "prepare")
    triples = read_jsonl(ws.triples)
    split = DatasetSplit.from_manifest(json.loads(ws.split.read_text()), triples)
    return Prepared({t.id: t for t in triples}, split, Vocabulary.load(ws.vocab("code")),
                    Vocabulary.load(ws.vocab("description")), Vocabulary.load(ws.vocab("query")))


def cs_pairs(model: enc.CodeSearchModel, triples: Sequence[Triple], cfg: RunConfig) -> list[tuple]:
    return [(enc.text_sequence(model, field_stream(t, "description").tokens, cfg.corpus.max_desc_len),
             enc.code_sequence(model, t.code, cfg.corpus.max_code_len)) for t in triples]


def qse_pairs(model: seq.Seq2Seq, triples: Sequence[Triple], cfg: RunConfig) -> list[tuple]:
    return [(encode_tokens(field_stream(t, "query"), model.query_vocab, True, cfg.corpus.max_query_len),
             encode_tokens(field_stream(t, "description"), model.desc_vocab, True, cfg.corpus.max_desc_len))
            for t in triples if t.query]


# --------------------------------------------------------------------------
# Training stages


def train_cs(cfg: RunConfig) -> list[dict]:
    ws = Workspace(cfg.paths.workdir)
    data = load_prepared(cfg)
    seed_everything(cfg.seed)
    model = enc.CodeSearchModel(cfg.encoder, data.code_vocab, data.desc_vocab)
    history = enc.fit_cs(model, cs_pairs(model, data.split.train, cfg), cfg.encoder.epochs,
                         random.Random(cfg.seed), cs_pairs(model, data.split.valid, cfg))
    enc.save_model(model, ws.cs, {"config_hash": cfg.stage_hash("train-cs"), "stage": "cs"})
    write_manifest(ws, cfg, "train-cs", [ws.cs])
    return history


def train_qse(cfg: RunConfig) -> list[float]:
    ws = Workspace(cfg.paths.workdir)
    data = load_prepared(cfg)
    seed_everything(cfg.seed)
    model = seq.Seq2Seq(cfg.qse, data.query_vocab, data.desc_vocab)
    pairs = qse_pairs(model, data.split.train, cfg)
    if not pairs:
        raise StageError("no training triples carry a query; cannot train the enricher")
    history = seq.fit_qse(model, pairs, cfg.qse.epochs, random.Random(cfg.seed))
    seq.save_model(model, ws.qse, {"config_hash": cfg.stage_hash("train-qse"), "stage": "qse"})
    write_manifest(ws, cfg, "train-qse", [ws.qse])
    return history


def rl_items(actor: seq.Seq2Seq, triples: Sequence[Triple], cfg: RunConfig) -> list[rl.RLItem]:
    return [rl.RLItem(t.id, encode_tokens(field_stream(t, "query"), actor.query_vocab, True,
                                          cfg.corpus.max_query_len),
                      list(field_stream(t, "description").tokens))
            for t in triples if t.query]


def run_rl(cfg: RunConfig, cs_model: enc.CodeSearchModel, actor: seq.Seq2Seq,
           train: Sequence[Triple]) -> tuple[seq.Seq2Seq, rl.Critic, list[dict], list[float]]:
    """Critic pretraining on the frozen actor, then joint actor-critic training."""
    seed_everything(cfg.seed)
    items = rl_items(actor, train, cfg)
    corpus = {t.id: enc.code_sequence(cs_model, t.code, cfg.corpus.max_code_len) for t in train}
    env = rl.RewardEnv(cs_model, corpus, cfg.reward)
    critic = rl.Critic(actor.config.hidden_dim, cfg.reward.critic_hidden, seed=cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    for p in cs_model.parameters():
        p.requires_grad_(False)
    critic, critic_hist = rl.pretrain_critic(critic, actor, items, env, cfg.reward.epochs_critic,
                                             cfg.reward, gen)
    actor, critic, trace = rl.train_rl(actor, critic, env, items, cfg.reward, cfg.reward.epochs_joint, gen)
    return actor, critic, trace, critic_hist


def train_rl(cfg: RunConfig, out_dir: Optional[Path] = None) -> list[dict]:
    ws = Workspace(cfg.paths.workdir)
    data = load_prepared(cfg)
    for stage, path in (("train-cs", ws.cs), ("train-qse", ws.qse)):
        if not path.exists():
            raise StageError(f"train-rl needs the {stage} checkpoint at {path}; run {stage} first")
        _check_stage(ws, cfg, stage)
    cs_model = enc.load_model(ws.cs)
    actor = seq.load_model(ws.qse)
    actor, critic, trace, _ = run_rl(cfg, cs_model, actor, data.split.train)
    rl_dir = Path(out_dir) if out_dir else ws.rl
    critic_dir = rl_dir.parent / (rl_dir.name + "-critic") if out_dir else ws.critic
    meta = {"config_hash": cfg.stage_hash("train-rl"), "stage": "rl"}
    seq.save_model(actor, rl_dir, meta)
    rl.save_critic(critic, critic_dir, cfg.reward, meta)
    ws.reports.mkdir(parents=True, exist_ok=True)
    trace_path = rl_dir / "reward_trace.csv"
    rl.write_trace(trace, trace_path)
    if out_dir is None:
        rl.write_trace(trace, ws.reports / "reward_trace.csv")
        write_manifest(ws, cfg, "train-rl", [ws.rl, ws.critic, ws.reports / "reward_trace.csv"])
    return trace


def build_index_stage(cfg: RunConfig) -> SearchIndex:
    ws = Workspace(cfg.paths.workdir)
    data = load_prepared(cfg)
    _check_stage(ws, cfg, "train-cs")
    cs_model = enc.load_model(ws.cs)
    snippets = [(t.id, enc.code_sequence(cs_model, t.code, cfg.corpus.max_code_len), t.code)
                for t in sorted(data.triples.values(), key=lambda t: t.id)]
    index = build_index(cs_model, snippets)
    index.save(ws.index)
    write_manifest(ws, cfg, "build-index", [ws.index])
    return index


def build_pools_stage(cfg: RunConfig) -> dict:
    ws = Workspace(cfg.paths.workdir)
    data = load_prepared(cfg)
    pools, meta = build_eval_pools(data.split.test, sorted(data.triples), cfg.seed)
    save_pools(pools, ws.pools)
    meta["config_hash"] = cfg.stage_hash("build-pools")
    ws.pools_meta.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    write_manifest(ws, cfg, "build-pools", [ws.pools, ws.pools_meta])
    return meta


# --------------------------------------------------------------------------
# Evaluation


def load_enricher(cfg: RunConfig, mode: str, enricher: Optional[str] = None) -> Optional[seq.Seq2Seq]:
    ws = Workspace(cfg.paths.workdir)
    if mode in ("base_only", "qe_baseline"):
        return None
    if enricher:
        return seq.load_model(enricher)
    if mode == "no_rl":
        _check_stage(ws, cfg, "train-qse")
        return seq.load_model(ws.qse)
    _check_stage(ws, cfg, "train-rl")
    return seq.load_model(ws.rl)


def evaluate(cfg: RunConfig, eval_field: str = "query", enricher: Optional[str] = None,
             write: bool = True) -> MetricReport:
    ws = Workspace(cfg.paths.workdir)
    data = load_prepared(cfg)
    _check_stage(ws, cfg, "train-cs")
    _check_stage(ws, cfg, "build-pools")
    cs_model = enc.load_model(ws.cs)
    qse_model = load_enricher(cfg, cfg.hybrid.mode, enricher)
    lexicon = SynonymLexicon.load(cfg.paths.lexicon) if cfg.paths.lexicon else SynonymLexicon()
    if cfg.hybrid.mode == "qe_baseline" and not cfg.paths.lexicon:
        log.warning("qe_baseline without a lexicon degenerates to base_only")
    pools = load_pools(ws.pools)
    pool_meta = json.loads(ws.pools_meta.read_text())
    result = evaluate_testset(cs_model, qse_model, pools, data.triples, cfg.hybrid, eval_field, lexicon,
                              cs_fingerprint=cs_model.fingerprint(),
                              enricher_fingerprint=qse_model.fingerprint() if qse_model else None,
                              requested_negatives=pool_meta["requested_negatives"])
    if write:
        ws.reports.mkdir(parents=True, exist_ok=True)
        path = ws.reports / f"eval_{cfg.hybrid.mode}_{eval_field}.json"
        path.write_text(result.dumps() + "\n")
    return result


def sweep(cfg: RunConfig, param: str, values: Sequence[float], eval_field: str = "query") -> list[dict]:
    """Grid over beta (evaluation only) or alpha (retrains RL per value)."""
    ws = Workspace(cfg.paths.workdir)
    rows = []
    for value in values:
        if param == "beta":
            run_cfg = replace(cfg, hybrid=replace(cfg.hybrid, beta=value, mode="hybrid"))
            result = evaluate(run_cfg, eval_field, write=False)
        elif param == "alpha":
            run_cfg = replace(cfg, reward=replace(cfg.reward, alpha=value),
                              hybrid=replace(cfg.hybrid, mode="hybrid"))
            out = ws.root / "checkpoints" / f"sweep-alpha-{value:g}"
            train_rl(run_cfg, out_dir=out)
            result = evaluate(run_cfg, eval_field, enricher=str(out), write=False)
        else:
            raise ValueError(f"cannot sweep {param!r}; use alpha or beta")
        rows.append({"param": param, "value": value, "r1": result.r_at[1], "r5": result.r_at[5],
                     "r10": result.r_at[10], "mrr": result.mrr})
    ws.reports.mkdir(parents=True, exist_ok=True)
    with open(ws.reports / f"sweep_{param}.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["param", "value", "r1", "r5", "r10", "mrr"],
                                lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    return rows


def enricher_for_serving(cfg: RunConfig, enricher: Optional[str] = None) -> seq.Seq2Seq:
    """Post-RL enricher when available, otherwise the teacher-forced one."""
    ws = Workspace(cfg.paths.workdir)
    if enricher:
        return seq.load_model(enricher)
    if cfg.hybrid.mode != "no_rl" and ws.rl.exists():
        _check_stage(ws, cfg, "train-rl")
        return seq.load_model(ws.rl)
    if ws.qse.exists():
        _check_stage(ws, cfg, "train-qse")
        return seq.load_model(ws.qse)
    raise StageError("no enricher checkpoint; run train-qse first")

