"""Query enrichment seq2seq: bi-LSTM query encoder, attentive LSTM decoder.

Decoder wiring, per step t:

    a_t  = softmax(v . tanh(K h_enc + Q s_{t-1}))      additive attention
    ctx  = sum_i a_t[i] h_enc[i]
    s_t  = LSTMCell([embed(d_{t-1}); ctx], s_{t-1})
    p(d_t | d_<t, q) = softmax(W s_t + b)

The initial decoder state is a tanh projection of the concatenated final
forward/backward encoder states. PAD and BOS are never emitted.
"""

from __future__ import annotations

import logging
import random
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import torch
from torch import nn
from torch.nn.utils.rnn import pack_padded_sequence, pad_packed_sequence

from . import checkpoint
from .corpus import BOS, EOS, PAD, Vocabulary
from .encoder import TrainingError, pad_batch

log = logging.getLogger(__name__)


@dataclass
class Seq2SeqConfig:
    embed_dim: int = 128
    hidden_dim: int = 256
    max_decode_len: int = 60
    learning_rate: float = 1e-3
    epochs: int = 20
    batch_size: int = 32
    clip_norm: float = 5.0
    init_scale: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.max_decode_len < 2:
            raise ValueError("max_decode_len must be >= 2")
        if min(self.embed_dim, self.hidden_dim, self.batch_size) < 1:
            raise ValueError("dimensions and batch size must be >= 1")


@dataclass
class GenerationResult:
    tokens: list[int]
    logprobs: list[float]
    mode: str
    trace: Optional[dict] = field(default=None, repr=False)

    @property
    def log_prob(self) -> float:
        return float(sum(self.logprobs))


class Seq2Seq(nn.Module):
    def __init__(self, config: Seq2SeqConfig, query_vocab: Vocabulary, desc_vocab: Vocabulary):
        super().__init__()
        self.config = config
        self.query_vocab = query_vocab
        self.desc_vocab = desc_vocab
        E, H = config.embed_dim, config.hidden_dim
        self.src_embed = nn.Embedding(len(query_vocab), E)
        self.encoder = nn.LSTM(E, H, batch_first=True, bidirectional=True)
        self.bridge_h = nn.Linear(2 * H, H)
        self.bridge_c = nn.Linear(2 * H, H)
        self.attn_key = nn.Linear(2 * H, H)
        self.attn_query = nn.Linear(H, H, bias=False)
        self.attn_v = nn.Linear(H, 1, bias=False)
        self.tgt_embed = nn.Embedding(len(desc_vocab), E)
        self.cell = nn.LSTMCell(E + 2 * H, H)
        self.out = nn.Linear(H, len(desc_vocab))
        blocked = torch.zeros(len(desc_vocab))
        blocked[PAD] = blocked[BOS] = float("-inf")
        self.register_buffer("action_mask", blocked, persistent=False)
        gen = torch.Generator().manual_seed(config.seed)
        with torch.no_grad():
            for p in self.parameters():
                p.uniform_(-config.init_scale, config.init_scale, generator=gen)
        self._optimizer = None

    @property
    def optimizer(self) -> torch.optim.Optimizer:
        if self._optimizer is None:
            self._optimizer = torch.optim.Adam(self.parameters(), lr=self.config.learning_rate)
        return self._optimizer

    def fingerprint(self) -> str:
        return checkpoint.fingerprint(self)

    def encode(self, src: torch.Tensor, mask: torch.Tensor):
        lengths = mask.sum(dim=1).cpu()
        packed = pack_padded_sequence(self.src_embed(src), lengths, batch_first=True,
                                      enforce_sorted=False)
        out, (h_n, c_n) = self.encoder(packed)
        out, _ = pad_packed_sequence(out, batch_first=True, total_length=src.shape[1])
        h0 = torch.tanh(self.bridge_h(torch.cat([h_n[0], h_n[1]], dim=-1)))
        c0 = torch.tanh(self.bridge_c(torch.cat([c_n[0], c_n[1]], dim=-1)))
        return out, self.attn_key(out), (h0, c0)

    def step(self, prev: torch.Tensor, state, enc_out, keys, mask):
        """One decoder step -> (masked logits, new state, attention weights)."""
        h, c = state
        scores = self.attn_v(torch.tanh(keys + self.attn_query(h).unsqueeze(1))).squeeze(-1)
        weights = torch.softmax(scores.masked_fill(~mask, float("-inf")), dim=-1)
        ctx = (weights.unsqueeze(-1) * enc_out).sum(dim=1)
        h, c = self.cell(torch.cat([self.tgt_embed(prev), ctx], dim=-1), (h, c))
        return self.out(h) + self.action_mask, (h, c), weights


def batch_teacher_forcing_loss(model: Seq2Seq, queries: Sequence[Sequence[int]],
                               targets: Sequence[Sequence[int]], reduction: str = "mean") -> torch.Tensor:
    """Mean per-token NLL of BOS/EOS-framed targets, PAD positions excluded."""
    src, src_mask = pad_batch(queries)
    tgt, tgt_mask = pad_batch(targets)
    enc_out, keys, state = model.encode(src, src_mask)
    nll = []
    for t in range(tgt.shape[1] - 1):
        logits, state, _ = model.step(tgt[:, t], state, enc_out, keys, src_mask)
        nll.append(nn.functional.cross_entropy(logits, tgt[:, t + 1], reduction="none"))
    nll = torch.stack(nll, dim=1)
    valid = tgt_mask[:, 1:]
    total = nll.masked_select(valid).sum()
    if reduction == "sum":
        return total
    return total / valid.sum()


def teacher_forcing_loss(model: Seq2Seq, query_indices: Sequence[int],
                         target_indices: Sequence[int]) -> torch.Tensor:
    if len(target_indices) < 2 or target_indices[0] != BOS or target_indices[-1] != EOS:
        raise ValueError("target must be framed with BOS ... EOS")
    loss = batch_teacher_forcing_loss(model, [query_indices], [target_indices])
    if not torch.isfinite(loss):
        raise TrainingError(f"non-finite teacher-forcing loss {loss.item()}")
    return loss


def rollout(model: Seq2Seq, query_indices: Sequence[int], choose, trace: bool = False):
    """Run the decoder from BOS until EOS or max_decode_len tokens.

    ``choose(logits) -> (token, logprob tensor)`` picks each action. Returns
    (tokens, logprobs tensor [N], decoder states [N, H], trace dict or None).
    """
    if len(query_indices) == 0:
        raise ValueError("query must be non-empty")
    src, mask = pad_batch([query_indices])
    enc_out, keys, state = model.encode(src, mask)
    prev = torch.tensor([BOS])
    tokens, logprobs, states = [], [], []
    record = {"attention": [], "distributions": []} if trace else None
    for _ in range(model.config.max_decode_len):
        logits, state, weights = model.step(prev, state, enc_out, keys, mask)
        token, logprob = choose(logits[0])
        tokens.append(token)
        logprobs.append(logprob)
        states.append(state[0][0])
        if trace:
            record["attention"].append(weights[0].detach())
            record["distributions"].append(torch.softmax(logits[0], dim=-1).detach())
        if token == EOS:
            break
        prev = torch.tensor([token])
    return tokens, torch.stack(logprobs), torch.stack(states), record


def _greedy_choice(logits):
    logp = torch.log_softmax(logits, dim=-1)
    token = int(torch.argmax(logp))
    return token, logp[token]


def sampling_choice(generator: torch.Generator, temperature: float = 1.0):
    if temperature <= 0:
        raise ValueError("temperature must be > 0")

    def choose(logits):
        logp = torch.log_softmax(logits / temperature, dim=-1)
        token = int(torch.multinomial(logp.detach().exp(), 1, generator=generator))
        return token, logp[token]

    return choose


@torch.no_grad()
def greedy_decode(model: Seq2Seq, query_indices: Sequence[int], trace: bool = False) -> GenerationResult:
    model.eval()
    tokens, logprobs, _, record = rollout(model, query_indices, _greedy_choice, trace)
    return GenerationResult(tokens, logprobs.tolist(), "greedy", record)


@torch.no_grad()
def sample_decode(model: Seq2Seq, query_indices: Sequence[int], generator: torch.Generator,
                  temperature: float = 1.0, trace: bool = False) -> GenerationResult:
    model.eval()
    choose = sampling_choice(generator, temperature)
    tokens, logprobs, _, record = rollout(model, query_indices, choose, trace)
    return GenerationResult(tokens, logprobs.tolist(), "sampled", record)


def train_qse_epoch(model: Seq2Seq, pairs: Sequence[tuple], rng: random.Random,
                    optimizer: torch.optim.Optimizer | None = None) -> tuple[Seq2Seq, float]:
    """One shuffled teacher-forcing pass over (query, description) index pairs."""
    if not pairs:
        raise ValueError("pairs must be non-empty")
    optimizer = optimizer or model.optimizer
    cfg = model.config
    order = list(range(len(pairs)))
    rng.shuffle(order)
    model.train()
    total, tokens = 0.0, 0
    for start in range(0, len(order), cfg.batch_size):
        chunk = [pairs[i] for i in order[start:start + cfg.batch_size]]
        loss_sum = batch_teacher_forcing_loss(model, [p[0] for p in chunk], [p[1] for p in chunk],
                                              reduction="sum")
        n_tok = sum(len(p[1]) - 1 for p in chunk)
        loss = loss_sum / n_tok
        if not torch.isfinite(loss):
            raise TrainingError(f"non-finite teacher-forcing loss {loss.item()}")
        optimizer.zero_grad()
        loss.backward()
        if cfg.clip_norm:
            nn.utils.clip_grad_norm_(model.parameters(), cfg.clip_norm)
        optimizer.step()
        total += float(loss_sum.detach())
        tokens += n_tok
    return model, total / tokens


def fit_qse(model: Seq2Seq, pairs: Sequence[tuple], epochs: int, rng: random.Random) -> list[float]:
    history = []
    for epoch in range(1, epochs + 1):
        _, loss = train_qse_epoch(model, pairs, rng)
        log.info("qse epoch %d loss %.4f", epoch, loss)
        history.append(loss)
    return history


def save_model(model: Seq2Seq, directory, meta: dict | None = None) -> str:
    return checkpoint.save(directory, "qse", asdict(model.config),
                           {"query": model.query_vocab, "description": model.desc_vocab}, model, meta)


def load_model(directory) -> Seq2Seq:
    header, vocabs, state = checkpoint.load(directory, "qse")
    model = Seq2Seq(Seq2SeqConfig(**header["config"]), vocabs["query"], vocabs["description"])
    model.load_state_dict(state)
    model.eval()
    if model.fingerprint() != header["fingerprint"]:
        raise checkpoint.CheckpointError(f"{directory}: parameter fingerprint mismatch")
    return model
