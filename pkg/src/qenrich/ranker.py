"""Retrieval: code index, hybrid original/enriched scoring, evaluation pools."""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Optional, Sequence

import numpy as np

from .corpus import MAX_LEN, Triple, TokenStream, decode_indices, encode_tokens, field_stream
from .encoder import CodeSearchModel, code_sequence, cosine_scores, embed_many, text_sequence
from .metrics import MetricReport, frank_from_array, report
from .qse import Seq2Seq, greedy_decode

MODES = ("base_only", "enriched_only", "hybrid", "qe_baseline", "no_rl")
EVAL_FIELDS = ("query", "description")
INDEX_FORMAT_VERSION = 1
N_NEGATIVES = 999


class RankerError(ValueError):
    pass


@dataclass
class HybridConfig:
    beta: float = 0.6
    mode: str = "hybrid"
    top_k: int = 10

    def __post_init__(self):
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError("beta must lie in [0, 1]")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")

    @property
    def uses_enricher(self) -> bool:
        return self.mode in ("enriched_only", "hybrid", "no_rl")


def hybrid_score(sim_enriched, sim_original, beta: float):
    """beta * sim(q', c) + (1 - beta) * sim(q, c); works elementwise on arrays."""
    if not 0.0 <= beta <= 1.0:
        raise ValueError("beta must lie in [0, 1]")
    return beta * sim_enriched + (1.0 - beta) * sim_original


# --------------------------------------------------------------------------
# Synonym expansion baseline


class SynonymLexicon(dict):
    """token -> synonyms; self-references and duplicates are removed on load."""

    def __init__(self, mapping: Mapping[str, Iterable[str]] | None = None):
        super().__init__()
        for token, synonyms in (mapping or {}).items():
            clean = []
            for syn in synonyms:
                if syn != token and syn not in clean:
                    clean.append(syn)
            self[token] = clean

    @classmethod
    def load(cls, path) -> "SynonymLexicon":
        return cls(json.loads(Path(path).read_text(encoding="utf-8")))


def qe_expand(query: TokenStream, lexicon: Mapping[str, Sequence[str]]) -> TokenStream:
    present = set(query.tokens)
    out = []
    for tok in query.tokens:
        out.append(tok)
        for syn in lexicon.get(tok, ()):
            if syn not in present:
                present.add(syn)
                out.append(syn)
    return TokenStream(tuple(out), query.source)


# --------------------------------------------------------------------------
# Index


@dataclass
class SearchIndex:
    ids: list[str]
    vectors: np.ndarray
    raw: list[str]
    fingerprint: str

    def __post_init__(self):
        if len(set(self.ids)) != len(self.ids):
            raise RankerError("index ids must be unique")
        if self.vectors.ndim != 2 or self.vectors.shape[0] != len(self.ids):
            raise RankerError("index vectors must be a (n, dim) matrix aligned with ids")

    def __len__(self):
        return len(self.ids)

    @property
    def dim(self) -> int:
        return int(self.vectors.shape[1])

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            header = {"format_version": INDEX_FORMAT_VERSION, "dim": self.dim,
                      "fingerprint": self.fingerprint, "count": len(self)}
            fh.write(json.dumps(header, sort_keys=True) + "\n")
            for cid, vec, raw in zip(self.ids, self.vectors, self.raw):
                fh.write(json.dumps({"id": cid, "vector": vec.tolist(), "raw": raw}) + "\n")

    @classmethod
    def load(cls, path, expected_fingerprint: Optional[str] = None) -> "SearchIndex":
        with open(path, encoding="utf-8") as fh:
            header = json.loads(fh.readline())
            if header.get("format_version") != INDEX_FORMAT_VERSION:
                raise RankerError(f"{path}: unsupported index format {header.get('format_version')}")
            if expected_fingerprint is not None and header["fingerprint"] != expected_fingerprint:
                raise RankerError(f"{path}: index built by model {header['fingerprint']}, "
                                  f"expected {expected_fingerprint}")
            rows = [json.loads(line) for line in fh if line.strip()]
        vectors = np.array([r["vector"] for r in rows], dtype=np.float64).reshape(len(rows), header["dim"])
        return cls([r["id"] for r in rows], vectors, [r["raw"] for r in rows], header["fingerprint"])


def build_index(cs_model: CodeSearchModel, snippets: Sequence[tuple]) -> SearchIndex:
    """Index (id, code indices, raw text) snippets, one embedding call each."""
    if not snippets:
        raise RankerError("cannot index zero snippets")
    cs_model.eval()
    vectors = embed_many(cs_model, "code", [s[1] for s in snippets])
    return SearchIndex([s[0] for s in snippets], vectors, [s[2] for s in snippets],
                       cs_model.fingerprint())


# --------------------------------------------------------------------------
# Scoring


def enrich(qse_model: Seq2Seq, query_tokens: Sequence[str]) -> list[str]:
    """Greedy enriched query as description-vocabulary words, UNK dropped."""
    src = encode_tokens(TokenStream(tuple(query_tokens), "query"), qse_model.query_vocab,
                        add_bos_eos=True, max_len=MAX_LEN["query"])
    result = greedy_decode(qse_model, src)
    return decode_indices(result.tokens, qse_model.desc_vocab)


def text_vector(cs_model: CodeSearchModel, tokens: Sequence[str]) -> np.ndarray:
    return embed_many(cs_model, "text", [text_sequence(cs_model, tokens)])[0]


@dataclass
class QueryScorer:
    """Scores one query against a matrix of code vectors under a HybridConfig."""

    cs_model: CodeSearchModel
    qse_model: Optional[Seq2Seq]
    cfg: HybridConfig
    lexicon: Mapping[str, Sequence[str]] = field(default_factory=dict)

    def __post_init__(self):
        if self.cfg.uses_enricher and self.qse_model is None:
            raise RankerError(f"mode {self.cfg.mode} needs an enrichment model")

    def __call__(self, query_tokens: Sequence[str], code_vectors: np.ndarray) -> tuple[np.ndarray, list[str]]:
        if not query_tokens:
            raise RankerError("query must be non-empty")
        mode = self.cfg.mode
        if mode == "qe_baseline":
            expanded = qe_expand(TokenStream(tuple(query_tokens), "query"), self.lexicon).tokens
            return cosine_scores(text_vector(self.cs_model, expanded), code_vectors), list(expanded)
        original = None
        if mode != "enriched_only":
            original = cosine_scores(text_vector(self.cs_model, query_tokens), code_vectors)
        if mode == "base_only":
            return original, []
        enriched_tokens = enrich(self.qse_model, query_tokens)
        enriched = cosine_scores(text_vector(self.cs_model, enriched_tokens), code_vectors)
        if mode == "enriched_only":
            return enriched, enriched_tokens
        return hybrid_score(enriched, original, self.cfg.beta), enriched_tokens


def rank_ids(ids: Sequence[str], scores: np.ndarray, top_k: int) -> list[tuple[str, float]]:
    """Descending score, ties broken by ascending id."""
    order = sorted(range(len(ids)), key=lambda i: (-scores[i], ids[i]))
    return [(ids[i], float(scores[i])) for i in order[:top_k]]


def search(index: SearchIndex, cs_model: CodeSearchModel, qse_model: Optional[Seq2Seq],
           query: TokenStream, cfg: HybridConfig, top_k: Optional[int] = None,
           lexicon: Mapping[str, Sequence[str]] | None = None) -> list[tuple[str, float]]:
    if len(index) == 0:
        raise RankerError("index is empty")
    if index.fingerprint != cs_model.fingerprint():
        raise RankerError("index was built by a different code-search model")
    scores, _ = QueryScorer(cs_model, qse_model, cfg, lexicon or {})(query.tokens, index.vectors)
    return rank_ids(index.ids, scores, cfg.top_k if top_k is None else top_k)


# --------------------------------------------------------------------------
# Evaluation pools


@dataclass
class EvalPool:
    query_id: str
    positive_id: str
    negative_ids: list[str]
    seed: int
    desk_fallback: bool = False

    def __post_init__(self):
        if self.positive_id in self.negative_ids:
            raise RankerError(f"pool {self.query_id}: positive listed as a negative")
        if len(set(self.negative_ids)) != len(self.negative_ids):
            raise RankerError(f"pool {self.query_id}: duplicate negatives")
        if not self.desk_fallback and len(self.negative_ids) != N_NEGATIVES:
            raise RankerError(f"pool {self.query_id}: expected {N_NEGATIVES} negatives")

    @property
    def candidate_ids(self) -> list[str]:
        return [self.positive_id] + self.negative_ids

    def to_json(self) -> dict:
        return {"query_id": self.query_id, "positive_id": self.positive_id,
                "negative_ids": self.negative_ids, "seed": self.seed,
                "desk_fallback": self.desk_fallback}


def build_eval_pools(test_triples: Sequence[Triple], corpus_ids: Sequence[str], seed: int,
                     n_negatives: int = N_NEGATIVES) -> tuple[list[EvalPool], dict]:
    """Fixed negatives per test triple, sampled without replacement.

    A corpus with fewer than ``n_negatives + 1`` snippets falls back to every
    other snippet; the returned metadata records it.
    """
    universe = sorted(set(corpus_ids))
    universe_set = set(universe)
    if len(universe) < 2:
        raise RankerError("corpus too small to build evaluation pools")
    k = min(n_negatives, len(universe) - 1)
    pools = []
    for t in test_triples:
        if t.id not in universe_set:
            raise RankerError(f"test triple {t.id} missing from the corpus")
        rng = random.Random(f"{seed}:{t.id}")
        others = [cid for cid in universe if cid != t.id]
        pools.append(EvalPool(t.id, t.id, rng.sample(others, k), seed, desk_fallback=k < N_NEGATIVES))
    meta = {"seed": seed, "requested_negatives": n_negatives, "negatives": k,
            "pool_size": k + 1, "desk_fallback": k < N_NEGATIVES, "corpus_size": len(universe)}
    return pools, meta


def save_pools(pools: Sequence[EvalPool], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for p in pools:
            fh.write(json.dumps(p.to_json(), sort_keys=True) + "\n")


def load_pools(path) -> list[EvalPool]:
    with open(path, encoding="utf-8") as fh:
        return [EvalPool(**json.loads(line)) for line in fh if line.strip()]


def evaluate_pools(pools: Sequence[EvalPool], score_fn: Callable[[EvalPool], np.ndarray],
                   **metadata) -> MetricReport:
    """Generic harness: ``score_fn(pool)`` scores ``pool.candidate_ids`` in order."""
    if not pools:
        raise RankerError("no evaluation pools")
    ranks = []
    for pool in pools:
        scores = np.asarray(score_fn(pool), dtype=np.float64)
        if scores.shape != (len(pool.candidate_ids),):
            raise RankerError(f"scorer returned shape {scores.shape} for pool {pool.query_id}")
        ranks.append(frank_from_array(scores, 0))
    sizes = sorted({len(p.candidate_ids) for p in pools})
    return report(ranks, pool_sizes=sizes, desk_fallback=any(p.desk_fallback for p in pools), **metadata)


def code_vector_table(cs_model: CodeSearchModel, triples: Iterable[Triple]) -> dict[str, np.ndarray]:
    triples = list(triples)
    vecs = embed_many(cs_model, "code", [code_sequence(cs_model, t.code) for t in triples])
    return {t.id: vecs[i] for i, t in enumerate(triples)}


def evaluate_testset(cs_model: CodeSearchModel, qse_model: Optional[Seq2Seq], pools: Sequence[EvalPool],
                     triples: Mapping[str, Triple] | Sequence[Triple], cfg: HybridConfig,
                     eval_field: str = "query", lexicon: Mapping[str, Sequence[str]] | None = None,
                     code_vectors: Optional[Mapping[str, np.ndarray]] = None, **metadata) -> MetricReport:
    """Score every pool using the chosen text field as the search text."""
    if eval_field not in EVAL_FIELDS:
        raise RankerError(f"eval_field must be one of {EVAL_FIELDS}")
    if not isinstance(triples, Mapping):
        triples = {t.id: t for t in triples}
    cs_model.eval()
    if code_vectors is None:
        needed = sorted({cid for p in pools for cid in p.candidate_ids})
        missing = [cid for cid in needed if cid not in triples]
        if missing:
            raise RankerError(f"pools reference unknown snippets, e.g. {missing[0]}")
        code_vectors = code_vector_table(cs_model, [triples[c] for c in needed])
    scorer = QueryScorer(cs_model, qse_model, cfg, lexicon or {})

    def score(pool: EvalPool) -> np.ndarray:
        if pool.query_id not in triples:
            raise RankerError(f"no triple for pool {pool.query_id}")
        text = field_stream(triples[pool.query_id], eval_field).tokens
        if not text:
            raise RankerError(f"triple {pool.query_id} has no {eval_field}")
        matrix = np.stack([code_vectors[c] for c in pool.candidate_ids])
        return scorer(text, matrix)[0]

    return evaluate_pools(pools, score, mode=cfg.mode, beta=cfg.beta, eval_field=eval_field,
                          seed=pools[0].seed if pools else None, **metadata)
