"""Corpus ingestion: triples, identifier tokenization, vocabularies, splits.

Also hosts the synthetic corpus generator used for desk-scale experiments.
"""

from __future__ import annotations

import json
import random
import re
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

LANGUAGES = ("java", "python", "synthetic")
SOURCES = ("code", "description", "query")

PAD, UNK, BOS, EOS = 0, 1, 2, 3
SPECIAL_TOKENS = ("<pad>", "<unk>", "<bos>", "<eos>")

# Default truncation lengths (indices, including BOS/EOS framing).
MAX_LEN = {"code": 200, "description": 60, "query": 30}


class CorpusError(ValueError):
    pass


@dataclass(frozen=True)
class Triple:
    id: str
    language: str
    code: str
    description: str
    query: Optional[str] = None

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "Triple":
        language = obj.get("language", "synthetic")
        if language not in LANGUAGES:
            raise CorpusError(f"unknown language {language!r} for record {obj.get('id')!r}")
        return cls(
            id=str(obj["id"]),
            language=language,
            code=obj["code"],
            description=obj["description"],
            query=obj.get("query"),
        )


@dataclass(frozen=True)
class TokenStream:
    tokens: tuple[str, ...]
    source: str = "code"

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(self.tokens))

    def __len__(self):
        return len(self.tokens)

    def __iter__(self):
        return iter(self.tokens)

    def joined(self) -> str:
        return " ".join(self.tokens)


# --------------------------------------------------------------------------
# Tokenization


_FRAGMENT = re.compile(r"[^\W_]+")


def _char_class(ch: str) -> str:
    if ch.isdigit():
        return "digit"
    if ch.isupper():
        return "upper"
    return "lower"


def _split_fragment(frag: str) -> list[str]:
    # Boundaries: lower->upper, letter<->digit, and inside an upper run the last
    # capital starts a new token when a lowercase letter follows (HTTPServer).
    pieces = []
    start = 0
    n = len(frag)
    for i in range(1, n):
        prev, cur = _char_class(frag[i - 1]), _char_class(frag[i])
        boundary = False
        if (prev == "digit") != (cur == "digit"):
            boundary = True
        elif prev == "lower" and cur == "upper":
            boundary = True
        elif prev == "upper" and cur == "upper" and i + 1 < n and _char_class(frag[i + 1]) == "lower":
            boundary = True
        if boundary:
            pieces.append(frag[start:i])
            start = i
    pieces.append(frag[start:])
    return pieces


def tokenize_identifier(raw: str, source: str = "code") -> TokenStream:
    """Split CamelCase / snake_case / digit runs into lowercase sub-tokens.

    Any non-alphanumeric character acts as a separator, so the function can be
    applied to whole code snippets as well as single identifiers.

    >>> tokenize_identifier("parseJSONResponse2").tokens
    ('parse', 'json', 'response', '2')
    """
    tokens = []
    for match in _FRAGMENT.finditer(raw or ""):
        for piece in _split_fragment(match.group(0)):
            tok = piece.lower()
            # lower() can leave cased code points or emit combining marks ("İ");
            # keeping only what _FRAGMENT accepts makes re-tokenizing a no-op
            tok = "".join(ch for ch in tok if ch.isalnum() and not ch.isupper())
            if tok:
                tokens.append(tok)
    return TokenStream(tuple(tokens), source)


def tokenize_text(raw: str, source: str = "description") -> TokenStream:
    """Natural-language fields: whitespace/punctuation split, then identifier split."""
    tokens = []
    for word in re.split(r"[\s\W_]+", raw or ""):
        if word:
            tokens.extend(tokenize_identifier(word).tokens)
    return TokenStream(tuple(tokens), source)


_CODE_KEYWORDS = frozenset(
    "def class public private protected static final void int long float double boolean "
    "char byte short async synchronized abstract return object string".split())


def extract_method_name(code: str) -> TokenStream:
    """Heuristic method-name extraction.

    On raw code: the first identifier directly followed by ``(``. On
    preprocessed code (no punctuation left): the first token that is not a
    declaration keyword.
    """
    match = re.search(r"([A-Za-z_]\w*)\s*\(", code or "")
    if match is not None:
        return tokenize_identifier(match.group(1))
    for tok in (code or "").split():
        if tok not in _CODE_KEYWORDS:
            return TokenStream((tok,), "code")
    return TokenStream((), "code")


def preprocess_triple(t: Triple) -> Optional[Triple]:
    """Normalize every field to space-joined lowercase sub-tokens.

    Returns None (the drop signal) when code or description is empty after
    cleaning. A query that cleans to nothing is treated as absent.
    """
    code = tokenize_identifier(t.code, "code").joined()
    description = tokenize_text(t.description, "description").joined()
    if not code or not description:
        return None
    query = None
    if t.query is not None:
        query = tokenize_text(t.query, "query").joined() or None
    return Triple(t.id, t.language, code, description, query)


def preprocess_corpus(triples: Iterable[Triple]) -> tuple[list[Triple], int]:
    """Preprocess all records, returning the kept triples and the drop count."""
    kept, dropped = [], 0
    seen = set()
    for t in triples:
        if t.id in seen:
            raise CorpusError(f"duplicate triple id {t.id!r}")
        seen.add(t.id)
        p = preprocess_triple(t)
        if p is None:
            dropped += 1
        else:
            kept.append(p)
    return kept, dropped


def field_stream(t: Triple, source: str) -> TokenStream:
    """TokenStream of an already-preprocessed triple field."""
    text = getattr(t, source)
    return TokenStream(tuple((text or "").split()), source)


# --------------------------------------------------------------------------
# Vocabulary


@dataclass
class Vocabulary:
    itos: list[str]
    max_size: int = 10000
    stoi: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        if tuple(self.itos[:4]) != SPECIAL_TOKENS:
            raise CorpusError("vocabulary must start with <pad>, <unk>, <bos>, <eos>")
        self.stoi = {tok: i for i, tok in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise CorpusError("duplicate tokens in vocabulary")

    def __len__(self):
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def index(self, token: str) -> int:
        return self.stoi.get(token, UNK)

    def token(self, index: int) -> str:
        return self.itos[index]

    @property
    def content_tokens(self) -> list[str]:
        return self.itos[4:]

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.itos) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        itos = Path(path).read_text(encoding="utf-8").split("\n")
        if itos and itos[-1] == "":
            itos = itos[:-1]
        return cls(itos, max_size=len(itos) - 4)


def build_vocabulary(streams: Sequence[TokenStream], max_size: int = 10000) -> Vocabulary:
    """Keep the ``max_size`` most frequent tokens; ties break lexicographically."""
    if max_size < 1:
        raise CorpusError("max_size must be >= 1")
    counts: Counter = Counter()
    for s in streams:
        counts.update(s.tokens)
    for tok in SPECIAL_TOKENS:
        counts.pop(tok, None)
    if not counts:
        raise CorpusError("cannot build a vocabulary from zero tokens")
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[:max_size]
    return Vocabulary(list(SPECIAL_TOKENS) + [tok for tok, _ in ranked], max_size=max_size)


def encode_tokens(ts: TokenStream, vocab: Vocabulary, add_bos_eos: bool = True,
                  max_len: int = 60) -> list[int]:
    if len(ts) == 0:
        raise CorpusError("cannot encode an empty token stream")
    if add_bos_eos:
        if max_len < 2:
            raise CorpusError("max_len must be >= 2 with BOS/EOS framing")
        body = [vocab.index(t) for t in ts.tokens[: max_len - 2]]
        return [BOS] + body + [EOS]
    if max_len < 1:
        raise CorpusError("max_len must be >= 1")
    return [vocab.index(t) for t in ts.tokens[:max_len]]


def decode_indices(indices: Iterable[int], vocab: Vocabulary, keep_unk: bool = False) -> list[str]:
    """Map indices back to tokens, dropping specials (and UNK unless asked)."""
    out = []
    for i in indices:
        i = int(i)
        if i in (PAD, BOS, EOS) or (i == UNK and not keep_unk):
            continue
        out.append(vocab.itos[i])
    return out


# --------------------------------------------------------------------------
# Splits and IO


@dataclass
class DatasetSplit:
    train: list[Triple]
    valid: list[Triple]
    test: list[Triple]
    seed: int

    def manifest(self) -> dict:
        return {
            "seed": self.seed,
            "train": [t.id for t in self.train],
            "valid": [t.id for t in self.valid],
            "test": [t.id for t in self.test],
        }

    @classmethod
    def from_manifest(cls, manifest: dict, triples: Sequence[Triple]) -> "DatasetSplit":
        by_id = {t.id: t for t in triples}
        try:
            parts = [[by_id[i] for i in manifest[name]] for name in ("train", "valid", "test")]
        except KeyError as exc:
            raise CorpusError(f"split manifest references unknown id {exc}") from None
        return cls(*parts, seed=manifest["seed"])


def split_dataset(triples: Sequence[Triple], seed: int) -> DatasetSplit:
    """Seeded shuffle, then 8:1:1 with the rounding remainder going to train."""
    if len(triples) < 10:
        raise CorpusError(f"need at least 10 triples to split, got {len(triples)}")
    order = sorted(triples, key=lambda t: t.id)
    random.Random(seed).shuffle(order)
    n = len(order)
    n_valid = n_test = n // 10
    n_train = n - n_valid - n_test
    return DatasetSplit(
        train=order[:n_train],
        valid=order[n_train:n_train + n_valid],
        test=order[n_train + n_valid:],
        seed=seed,
    )


def read_jsonl(path) -> list[Triple]:
    triples = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                triples.append(Triple.from_json(json.loads(line)))
            except (KeyError, json.JSONDecodeError) as exc:
                raise CorpusError(f"{path}:{lineno}: bad record ({exc})") from None
    return triples


def write_jsonl(triples: Iterable[Triple], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for t in triples:
            fh.write(json.dumps(t.to_json(), ensure_ascii=False, sort_keys=True) + "\n")


# --------------------------------------------------------------------------
# Synthetic corpus
#
# Each triple is keyed by a distinct (verb, adjective, object) combination.
# The domain word is a fixed function of the object and the context word a
# fixed function of the verb, so a query carrying only some keywords still
# determines part of the missing description content.

_VERBS = ["read", "write", "parse", "sort", "merge", "split", "load", "save", "filter",
          "compress", "encode", "decode", "validate", "render", "compute", "update",
          "delete", "insert", "search", "convert"]
_ADJECTIVES = ["empty", "nested", "large", "sorted", "unique", "remote", "local", "cached",
               "binary", "temporary", "default", "recent", "invalid", "shared", "hidden"]
_OBJECTS = ["file", "list", "string", "image", "matrix", "table", "record", "socket",
            "token", "graph", "queue", "buffer", "array", "document", "message", "packet",
            "column", "vector", "cookie", "header", "directory", "stream", "pixel",
            "account", "date"]
_DOMAINS = ["disk", "memory", "network", "database", "browser", "console", "archive", "cloud"]
_CONTEXTS = ["config", "session", "cache", "request", "thread", "schema", "index", "batch",
             "pipeline", "window"]

_DESC_TEMPLATES = [
    "{verb} the {adj} {obj} from the {domain} {ctx}",
    "method that will {verb} a {adj} {obj} stored in the {domain} {ctx}",
    "{verb} each {adj} {obj} of the current {domain} {ctx} and then report it",
    "helper that can {verb} the given {adj} {obj} using the {domain} {ctx} settings",
    "{verb} one {adj} {obj} inside the {domain} {ctx} for the caller",
]
_QUERY_TEMPLATES = [
    "how to {verb} {obj}",
    "{verb} {adj} {obj}",
    "how do i {verb} a {obj}",
    "{verb} {obj} in {domain}",
    "best way to {verb} {adj} {obj}",
]
_CODE_TEMPLATES = {
    "python": "def {verb}_{adj}_{obj}(self, {domain}_{ctx}):\n    {obj}_value = {domain}_{ctx}.get_{obj}()\n    return self.{verb}({obj}_value)\n",
    "java": "public Object {verb}{Adj}{Obj}({Domain}{Ctx} {domain}{Ctx}) {{ Object {obj}Value = {domain}{Ctx}.get{Obj}(); return this.{verb}({obj}Value); }}",
}


def _domain_of(obj: str) -> str:
    return _DOMAINS[_OBJECTS.index(obj) % len(_DOMAINS)]


def _context_of(verb: str) -> str:
    return _CONTEXTS[_VERBS.index(verb) % len(_CONTEXTS)]


def synthetic_keywords(t: Triple) -> frozenset:
    """The keyword set shared by a synthetic triple's description and code."""
    words = set(t.description.split())
    pools = set(_VERBS) | set(_ADJECTIVES) | set(_OBJECTS) | set(_DOMAINS) | set(_CONTEXTS)
    return frozenset(words & pools)


def generate_synthetic_corpus(n: int, seed: int = 0) -> list[Triple]:
    """Generate ``n`` aligned triples with lossy queries, deterministically by seed."""
    if n < 1:
        raise CorpusError("n must be >= 1")
    capacity = len(_VERBS) * len(_ADJECTIVES) * len(_OBJECTS)
    if n > capacity:
        raise CorpusError(f"synthetic grammar supports at most {capacity} triples")
    rng = random.Random(seed)
    combos = rng.sample(range(capacity), n)
    triples = []
    for k, combo in enumerate(combos):
        verb = _VERBS[combo // (len(_ADJECTIVES) * len(_OBJECTS))]
        adj = _ADJECTIVES[(combo // len(_OBJECTS)) % len(_ADJECTIVES)]
        obj = _OBJECTS[combo % len(_OBJECTS)]
        slots = dict(verb=verb, adj=adj, obj=obj, domain=_domain_of(obj), ctx=_context_of(verb))
        description = rng.choice(_DESC_TEMPLATES).format(**slots)
        query = rng.choice(_QUERY_TEMPLATES).format(**slots)
        style = rng.choice(sorted(_CODE_TEMPLATES))
        caps = {key.capitalize(): value.capitalize() for key, value in slots.items()}
        code = _CODE_TEMPLATES[style].format(**slots, **caps)
        triples.append(Triple(f"syn-{seed}-{k:06d}", "synthetic", code, description, query))
    return triples
