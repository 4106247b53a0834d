"""Two-tower code/text embedding models trained with a margin ranking loss."""

from __future__ import annotations

import logging
import math
import random
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
import torch
from torch import nn
from torch.nn.utils.rnn import pack_padded_sequence

from . import checkpoint
from .corpus import MAX_LEN, PAD, TokenStream, Vocabulary, encode_tokens, extract_method_name
from .metrics import frank_from_array, mrr

log = logging.getLogger(__name__)

MODEL_KINDS = ("bag_attention", "recurrent")
TOWERS = ("code", "text")
NORM_EPS = 1e-12


class TrainingError(RuntimeError):
    """Raised when a loss turns non-finite."""


@dataclass
class EncoderConfig:
    model_kind: str = "bag_attention"
    embed_dim: int = 128
    hidden_dim: int = 256
    margin: float = 0.05
    learning_rate: float = 1e-3
    lr_decay: float = 0.5
    lr_patience: int = 2
    epochs: int = 120
    batch_size: int = 32
    clip_norm: float = 5.0
    init_scale: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.model_kind not in MODEL_KINDS:
            raise ValueError(f"model_kind must be one of {MODEL_KINDS}")
        if self.margin <= 0:
            raise ValueError("margin must be > 0")
        if not 0 < self.lr_decay <= 1:
            raise ValueError("lr_decay must lie in (0, 1]")
        if min(self.embed_dim, self.hidden_dim, self.batch_size) < 1:
            raise ValueError("dimensions and batch size must be >= 1")


class BagAttentionTower(nn.Module):
    """Token embeddings pooled by a learned attention vector."""

    def __init__(self, vocab_size: int, embed_dim: int):
        super().__init__()
        self.embedding = nn.Embedding(vocab_size, embed_dim)
        self.attention = nn.Parameter(torch.zeros(embed_dim))

    def forward(self, indices: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        emb = self.embedding(indices)
        logits = (emb @ self.attention).masked_fill(~mask, float("-inf"))
        weights = torch.softmax(logits, dim=-1)
        return (weights.unsqueeze(-1) * emb).sum(dim=1)


class RecurrentTower(nn.Module):
    """Bi-directional LSTM; final forward/backward states projected to embed_dim."""

    def __init__(self, vocab_size: int, embed_dim: int, hidden_dim: int):
        super().__init__()
        self.embedding = nn.Embedding(vocab_size, embed_dim)
        self.rnn = nn.LSTM(embed_dim, hidden_dim, batch_first=True, bidirectional=True)
        self.project = nn.Linear(2 * hidden_dim, embed_dim)

    def forward(self, indices: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        lengths = mask.sum(dim=1).cpu()
        packed = pack_padded_sequence(self.embedding(indices), lengths, batch_first=True,
                                      enforce_sorted=False)
        _, (h_n, _) = self.rnn(packed)
        return torch.tanh(self.project(torch.cat([h_n[0], h_n[1]], dim=-1)))


class CodeSearchModel(nn.Module):
    def __init__(self, config: EncoderConfig, code_vocab: Vocabulary, text_vocab: Vocabulary):
        super().__init__()
        self.config = config
        self.code_vocab = code_vocab
        self.text_vocab = text_vocab
        if config.model_kind == "bag_attention":
            self.code_tower = BagAttentionTower(len(code_vocab), config.embed_dim)
            self.text_tower = BagAttentionTower(len(text_vocab), config.embed_dim)
        else:
            self.code_tower = RecurrentTower(len(code_vocab), config.embed_dim, config.hidden_dim)
            self.text_tower = RecurrentTower(len(text_vocab), config.embed_dim, config.hidden_dim)
        gen = torch.Generator().manual_seed(config.seed)
        with torch.no_grad():
            for p in self.parameters():
                p.uniform_(-config.init_scale, config.init_scale, generator=gen)
        self._optimizer = None

    def tower(self, name: str) -> nn.Module:
        if name not in TOWERS:
            raise ValueError(f"tower must be one of {TOWERS}")
        return self.code_tower if name == "code" else self.text_tower

    @property
    def optimizer(self) -> torch.optim.Optimizer:
        if self._optimizer is None:
            self._optimizer = torch.optim.Adam(self.parameters(), lr=self.config.learning_rate)
        return self._optimizer

    def fingerprint(self) -> str:
        return checkpoint.fingerprint(self)


def pad_batch(seqs: Sequence[Sequence[int]]) -> tuple[torch.Tensor, torch.Tensor]:
    """Right-pad index sequences; returns (indices, bool mask)."""
    if any(len(s) == 0 for s in seqs):
        raise ValueError("cannot embed an empty sequence")
    width = max(len(s) for s in seqs)
    idx = torch.full((len(seqs), width), PAD, dtype=torch.long)
    mask = torch.zeros((len(seqs), width), dtype=torch.bool)
    for i, s in enumerate(seqs):
        idx[i, : len(s)] = torch.as_tensor(list(s), dtype=torch.long)
        mask[i, : len(s)] = True
    return idx, mask


def embed_batch(model: CodeSearchModel, tower: str, seqs: Sequence[Sequence[int]]) -> torch.Tensor:
    idx, mask = pad_batch(seqs)
    return model.tower(tower)(idx, mask)


def embed_sequence(model: CodeSearchModel, tower: str, indices, mask=None) -> torch.Tensor:
    """Embed one sequence. Masked positions are removed before the tower runs,
    so trailing padding gives bit-identical output."""
    indices = [int(i) for i in indices]
    if not indices:
        raise ValueError("indices must be non-empty")
    if mask is None:
        mask = [1] * len(indices)
    mask = [bool(m) for m in mask]
    if len(mask) != len(indices):
        raise ValueError("mask and indices differ in length")
    kept = [i for i, m in zip(indices, mask) if m]
    if not kept:
        raise ValueError("all positions are masked")
    return embed_batch(model, tower, [kept])[0]


def code_sequence(model: CodeSearchModel, code: str, max_len: int = MAX_LEN["code"]) -> list[int]:
    """Code-tower input for a preprocessed code field.

    Recurrent models get the method-name tokens prepended.
    """
    tokens = tuple(code.split())
    if model.config.model_kind == "recurrent":
        tokens = extract_method_name(code).tokens + tokens
    return encode_tokens(TokenStream(tokens, "code"), model.code_vocab, add_bos_eos=False,
                         max_len=max_len)


def text_sequence(model: CodeSearchModel, tokens, max_len: int = MAX_LEN["description"]) -> list[int]:
    """Text-tower input; an empty token list gives an empty sequence."""
    tokens = tuple(tokens)
    if not tokens:
        return []
    return encode_tokens(TokenStream(tokens, "description"), model.text_vocab, add_bos_eos=False,
                         max_len=max_len)


@torch.no_grad()
def embed_many(model: CodeSearchModel, tower: str, seqs: Sequence[Sequence[int]]) -> np.ndarray:
    """Inference helper: one embed_sequence call per sequence, stacked as float64.

    Empty sequences map to the zero vector (similarity 0 with everything).
    """
    out = np.zeros((len(seqs), model.config.embed_dim), dtype=np.float64)
    for row, seq in enumerate(seqs):
        if len(seq):
            out[row] = embed_sequence(model, tower, seq).double().numpy()
    return out


# --------------------------------------------------------------------------
# Similarity and loss


def cosine_scores(query, matrix) -> np.ndarray:
    """Cosine similarity of one vector against each row of ``matrix``."""
    q = np.asarray(query, dtype=np.float64)
    m = np.atleast_2d(np.asarray(matrix, dtype=np.float64))
    if q.ndim != 1 or m.shape[1] != q.shape[0]:
        raise ValueError(f"dimension mismatch: {q.shape} vs {m.shape}")
    qn = np.linalg.norm(q)
    mn = np.linalg.norm(m, axis=1)
    denom = qn * mn
    ok = (mn >= NORM_EPS) & (qn >= NORM_EPS)
    out = np.zeros(m.shape[0], dtype=np.float64)
    out[ok] = (m[ok] @ q) / denom[ok]
    return np.clip(out, -1.0, 1.0)


def similarity(a, b) -> float:
    a = a.detach().double().numpy() if isinstance(a, torch.Tensor) else a
    b = b.detach().double().numpy() if isinstance(b, torch.Tensor) else b
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < NORM_EPS or nb < NORM_EPS:
        return 0.0
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def torch_cosine(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return (a * b).sum(-1) / (a.norm(dim=-1) * b.norm(dim=-1)).clamp_min(NORM_EPS)


def ranking_loss(sim_pos, sim_neg, margin: float):
    """max(0, margin - sim_pos + sim_neg); accepts floats or tensors."""
    if margin <= 0:
        raise ValueError("margin must be > 0")
    if isinstance(sim_pos, torch.Tensor) or isinstance(sim_neg, torch.Tensor):
        return torch.clamp(margin - sim_pos + sim_neg, min=0.0)
    return max(0.0, margin - sim_pos + sim_neg)


def sample_negative(corpus_ids: Sequence, positive_id, rng: random.Random):
    """Uniform draw from ``corpus_ids`` excluding ``positive_id``."""
    n = len(corpus_ids)
    if n < 2:
        raise ValueError("need at least two corpus ids to sample a negative")
    try:
        pos = corpus_ids.index(positive_id)
    except ValueError:
        return corpus_ids[rng.randrange(n)]
    j = rng.randrange(n - 1)
    return corpus_ids[j + 1 if j >= pos else j]


def triplet_loss(model: CodeSearchModel, descs, pos_codes, neg_codes) -> torch.Tensor:
    """Per-triplet ranking losses for a batch."""
    d = embed_batch(model, "text", descs)
    cp = embed_batch(model, "code", pos_codes)
    cn = embed_batch(model, "code", neg_codes)
    return ranking_loss(torch_cosine(d, cp), torch_cosine(d, cn), model.config.margin)


def train_cs_epoch(model: CodeSearchModel, pairs: Sequence[tuple], rng: random.Random,
                   optimizer: torch.optim.Optimizer | None = None) -> tuple[CodeSearchModel, float]:
    """One shuffled pass; each pair yields a triplet <d, c+, c->.

    A pair given as (desc, code, negative_code) uses that fixed negative instead
    of sampling one from the other pairs' code.
    """
    if not pairs:
        raise ValueError("pairs must be non-empty")
    optimizer = optimizer or model.optimizer
    cfg = model.config
    corpus = range(len(pairs))
    order = list(corpus)
    rng.shuffle(order)
    model.train()
    total, count = 0.0, 0
    for start in range(0, len(order), cfg.batch_size):
        chunk = order[start:start + cfg.batch_size]
        descs, pos, neg = [], [], []
        for i in chunk:
            pair = pairs[i]
            descs.append(pair[0])
            pos.append(pair[1])
            if len(pair) > 2:
                neg.append(pair[2])
            else:
                neg.append(pairs[sample_negative(corpus, i, rng)][1])
        losses = triplet_loss(model, descs, pos, neg)
        loss = losses.mean()
        if not torch.isfinite(loss):
            raise TrainingError(f"non-finite ranking loss {loss.item()}")
        optimizer.zero_grad()
        loss.backward()
        if cfg.clip_norm:
            nn.utils.clip_grad_norm_(model.parameters(), cfg.clip_norm)
        optimizer.step()
        total += float(losses.detach().sum())
        count += len(chunk)
    for p in model.parameters():
        if not torch.isfinite(p).all():
            raise TrainingError("non-finite parameters after update")
    return model, total / count


def pool_mrr(model: CodeSearchModel, pairs: Sequence[tuple]) -> float:
    """MRR of each description against all codes in ``pairs`` (self-pool)."""
    model.eval()
    text = embed_many(model, "text", [p[0] for p in pairs])
    code = embed_many(model, "code", [p[1] for p in pairs])
    ranks = [frank_from_array(cosine_scores(text[i], code), i) for i in range(len(pairs))]
    return mrr(ranks)


def fit_cs(model: CodeSearchModel, pairs: Sequence[tuple], epochs: int, rng: random.Random,
           valid_pairs: Sequence[tuple] | None = None) -> list[dict]:
    """Train for ``epochs``; halve the learning rate when validation MRR stalls."""
    history = []
    best, stale = -math.inf, 0
    for epoch in range(1, epochs + 1):
        _, loss = train_cs_epoch(model, pairs, rng)
        row = {"epoch": epoch, "loss": loss, "lr": model.optimizer.param_groups[0]["lr"]}
        if valid_pairs and len(valid_pairs) >= 2:
            score = pool_mrr(model, valid_pairs)
            row["valid_mrr"] = score
            if score > best:
                best, stale = score, 0
            else:
                stale += 1
                if stale >= model.config.lr_patience:
                    for group in model.optimizer.param_groups:
                        group["lr"] *= model.config.lr_decay
                    stale = 0
        log.info("cs epoch %d loss %.4f %s", epoch, loss,
                 f"valid_mrr {row['valid_mrr']:.4f}" if "valid_mrr" in row else "")
        history.append(row)
    return history


def save_model(model: CodeSearchModel, directory, meta: dict | None = None) -> str:
    return checkpoint.save(directory, "encoder", asdict(model.config),
                           {"code": model.code_vocab, "text": model.text_vocab}, model, meta)


def load_model(directory) -> CodeSearchModel:
    header, vocabs, state = checkpoint.load(directory, "encoder")
    model = CodeSearchModel(EncoderConfig(**header["config"]), vocabs["code"], vocabs["text"])
    model.load_state_dict(state)
    model.eval()
    if model.fingerprint() != header["fingerprint"]:
        raise checkpoint.CheckpointError(f"{directory}: parameter fingerprint mismatch")
    return model
