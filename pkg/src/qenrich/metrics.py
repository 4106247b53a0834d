"""Ranking metrics (FRank, R@k, MRR) and sentence-level smoothed BLEU-4."""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Hashable, Iterable, Sequence

TIE_POLICY = "pessimistic"
BLEU_EPSILON = 0.1
BLEU_SMOOTHING = "epsilon 0.1 numerator for zero-match orders (Chen & Cherry method 1)"
DEFAULT_KS = (1, 5, 10)


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class RankResult:
    frank: int
    pool_size: int

    def __post_init__(self):
        if not 1 <= self.frank <= self.pool_size:
            raise MetricError(f"frank {self.frank} outside [1, {self.pool_size}]")


def frank(scores: Iterable[tuple[Hashable, float]], positive_id: Hashable) -> RankResult:
    """Rank of the positive; every candidate scoring >= the positive counts against it."""
    scores = list(scores)
    positive = [s for cid, s in scores if cid == positive_id]
    if len(positive) != 1:
        raise MetricError(f"positive {positive_id!r} present {len(positive)} times, expected once")
    pos_score = positive[0]
    if isinstance(pos_score, float) and math.isnan(pos_score):
        raise MetricError("positive score is NaN")
    ahead = sum(1 for cid, s in scores if cid != positive_id and s >= pos_score)
    return RankResult(1 + ahead, len(scores))


def frank_from_array(scores, positive_index: int) -> RankResult:
    """Vectorised frank for a score array with the positive at ``positive_index``."""
    import numpy as np

    scores = np.asarray(scores)
    pos = scores[positive_index]
    ahead = int(np.count_nonzero(scores >= pos)) - 1
    return RankResult(1 + ahead, int(scores.shape[0]))


def _ranks(franks: Sequence) -> list[int]:
    if len(franks) == 0:
        raise MetricError("no rank results")
    return [r.frank if isinstance(r, RankResult) else int(r) for r in franks]


def recall_at_k(franks: Sequence, k: int) -> float:
    if k < 1:
        raise MetricError("k must be >= 1")
    ranks = _ranks(franks)
    return sum(1 for r in ranks if r <= k) / len(ranks)


def mrr(franks: Sequence) -> float:
    ranks = _ranks(franks)
    return sum(1.0 / r for r in ranks) / len(ranks)


@dataclass
class MetricReport:
    r_at: dict[int, float]
    mrr: float
    n_queries: int
    metadata: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "r_at": {str(k): v for k, v in sorted(self.r_at.items())},
            "mrr": self.mrr,
            "n_queries": self.n_queries,
            "metadata": self.metadata,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "MetricReport":
        return cls({int(k): v for k, v in obj["r_at"].items()}, obj["mrr"], obj["n_queries"],
                   obj.get("metadata", {}))

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True)


def report(franks: Sequence, ks: Sequence[int] = DEFAULT_KS, **metadata) -> MetricReport:
    meta = {"tie_policy": TIE_POLICY, "bleu_smoothing": BLEU_SMOOTHING}
    meta.update(metadata)
    return MetricReport({k: recall_at_k(franks, k) for k in ks}, mrr(franks), len(franks), meta)


# --------------------------------------------------------------------------
# BLEU


def _ngram_counts(tokens: Sequence, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu4(candidate: Sequence, reference: Sequence) -> float:
    """Sentence BLEU-4; orders with no matching n-gram get a numerator of ``BLEU_EPSILON``.

    Orders longer than the candidate count as a zero-match over one n-gram,
    so short candidates still score above 0.
    """
    if len(reference) == 0:
        raise MetricError("reference must be non-empty")
    if len(candidate) == 0:
        return 0.0
    log_p = 0.0
    for n in range(1, 5):
        cand = _ngram_counts(candidate, n)
        ref = _ngram_counts(reference, n)
        matched = sum(min(c, ref[g]) for g, c in cand.items())
        total = max(1, sum(cand.values()))
        log_p += math.log((matched or BLEU_EPSILON) / total) / 4
    c, r = len(candidate), len(reference)
    bp = 1.0 if c > r else math.exp(1 - r / c)
    return min(1.0, bp * math.exp(log_p))
