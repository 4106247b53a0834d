"""Advantage actor-critic fine-tuning of the enrichment model.

The reward is sparse: zero at every step except the terminal one (EOS, or
truncation at max_decode_len), where it mixes the reciprocal rank of the gold
snippet under the generated text with sentence BLEU-4 against the gold
description.
"""

from __future__ import annotations

import logging
import random
from dataclasses import asdict, dataclass
from typing import Callable, Optional, Sequence

import numpy as np
import torch
from torch import nn

from . import checkpoint
from .corpus import EOS, Vocabulary, decode_indices
from .encoder import CodeSearchModel, TrainingError, cosine_scores, embed_many
from .metrics import bleu4, frank, mrr
from .qse import Seq2Seq, rollout, sampling_choice

log = logging.getLogger(__name__)


@dataclass
class RewardConfig:
    alpha: float = 1.0
    pool_size: int = 100
    bleu_order: int = 4
    epochs_critic: int = 10
    epochs_joint: int = 40
    temperature: float = 1.0
    rollouts_per_query: int = 1
    learning_rate: float = 1e-3
    critic_learning_rate: float = 1e-3
    critic_hidden: int = 128
    batch_size: int = 16
    clip_norm: float = 5.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.pool_size < 2:
            raise ValueError("pool_size must be >= 2")
        if self.bleu_order != 4:
            raise ValueError("only BLEU-4 is supported")
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")


@dataclass
class RewardPool:
    """Candidate code vectors for one rollout; exactly one is the positive."""

    positive_id: str
    ids: list
    vectors: np.ndarray


@dataclass
class RLItem:
    id: str
    query_indices: list[int]
    gold_description: list[str]


@dataclass
class Reward:
    total: float
    rank_term: float = 0.0
    bleu_term: float = 0.0


@dataclass
class Episode:
    query_indices: list[int]
    actions: list[int]
    logprobs: torch.Tensor
    values: torch.Tensor
    rewards: list[float]
    returns: torch.Tensor
    terminal_reward: float
    rank_term: float = 0.0
    bleu_term: float = 0.0


class RewardError(ValueError):
    pass


# --------------------------------------------------------------------------
# Reward


def generated_tokens(indices: Sequence[int], vocab: Vocabulary) -> list[str]:
    """Strip the terminal EOS, specials and UNK from generated indices."""
    return decode_indices(indices, vocab)


def terminal_reward(text_tokens: Sequence[str], pool: RewardPool, gold_description: Sequence[str],
                    cfg: RewardConfig, cs_model: CodeSearchModel) -> Reward:
    if sum(1 for i in pool.ids if i == pool.positive_id) != 1:
        raise RewardError(f"pool must contain the positive {pool.positive_id!r} exactly once")
    seq = [cs_model.text_vocab.index(t) for t in text_tokens]
    vec = embed_many(cs_model, "text", [seq])[0]
    scores = cosine_scores(vec, pool.vectors)
    rank_term = mrr([frank(zip(pool.ids, scores.tolist()), pool.positive_id)])
    # alpha == 1 skips BLEU entirely, so the gold description cannot matter.
    bleu_term = bleu4(list(text_tokens), list(gold_description)) if cfg.alpha < 1.0 else 0.0
    total = cfg.alpha * rank_term + (1.0 - cfg.alpha) * bleu_term if cfg.alpha < 1.0 else rank_term
    return Reward(total, rank_term, bleu_term)


def step_reward(prefix: Sequence[int], token: int, pool: RewardPool, gold_description: Sequence[str],
                cfg: RewardConfig, cs_model: CodeSearchModel, truncated: bool = False) -> Reward:
    """r(s_t, d_t): zero unless d_t is EOS or the generation was cut off here.

    At EOS the text scored is d_1..d_{t-1}; on truncation d_t is kept as the
    last word of the text.
    """
    if token == EOS:
        text = list(prefix)
    elif truncated:
        text = list(prefix) + [token]
    else:
        return Reward(0.0)
    return terminal_reward(generated_tokens(text, cs_model.text_vocab), pool, gold_description,
                           cfg, cs_model)


def episode_returns(rewards: Sequence[float]) -> list[float]:
    """Suffix sums R_t = sum_{t' >= t} r_t'."""
    out = [0.0] * len(rewards)
    acc = 0.0
    for t in range(len(rewards) - 1, -1, -1):
        acc = rewards[t] + acc
        out[t] = acc
    return out


class RewardEnv:
    """Scores generated descriptions against a frozen code-search model.

    A fresh pool (the positive plus ``pool_size - 1`` sampled negatives) is
    drawn per episode from a seeded generator.
    """

    def __init__(self, cs_model: CodeSearchModel, corpus: dict[str, Sequence[int]],
                 cfg: RewardConfig, seed: int | None = None):
        self.cs_model = cs_model.eval()
        self.cfg = cfg
        self.ids = sorted(corpus)
        if len(self.ids) < 2:
            raise RewardError("reward corpus needs at least two snippets")
        self.row = {cid: i for i, cid in enumerate(self.ids)}
        self.vectors = embed_many(cs_model, "code", [corpus[c] for c in self.ids])
        self.rng = random.Random(cfg.seed if seed is None else seed)

    def pool(self, positive_id: str) -> RewardPool:
        if positive_id not in self.row:
            raise RewardError(f"positive {positive_id!r} not in reward corpus")
        k = min(self.cfg.pool_size - 1, len(self.ids) - 1)
        pos = self.row[positive_id]
        picks = self.rng.sample(range(len(self.ids) - 1), k)
        negatives = [j + 1 if j >= pos else j for j in picks]
        rows = [pos] + negatives
        return RewardPool(positive_id, [self.ids[r] for r in rows], self.vectors[rows])

    def step_rewards(self, actions: Sequence[int], item: RLItem, max_len: int) -> tuple[list[float], Reward]:
        pool = self.pool(item.id)
        rewards, final = [], Reward(0.0)
        for t, token in enumerate(actions):
            truncated = t == len(actions) - 1 and token != EOS and len(actions) >= max_len
            r = step_reward(actions[:t], token, pool, item.gold_description, self.cfg,
                            self.cs_model, truncated)
            rewards.append(r.total)
            if token == EOS or truncated:
                final = r
        return rewards, final


def sparse_rewards(reward_fn: Callable, actions: Sequence[int], item) -> tuple[list[float], Reward]:
    """Wrap a terminal reward function (tokens, item) -> float | Reward."""
    r = reward_fn(list(actions), item)
    if not isinstance(r, Reward):
        r = Reward(float(r))
    return [0.0] * (len(actions) - 1) + [r.total], r


# --------------------------------------------------------------------------
# Critic and losses


class Critic(nn.Module):
    """Value head over (detached) decoder states."""

    def __init__(self, state_dim: int, hidden: int = 128, seed: int = 0, init_scale: float = 0.1):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(state_dim, hidden), nn.Tanh(), nn.Linear(hidden, 1))
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for p in self.parameters():
                p.uniform_(-init_scale, init_scale, generator=gen)

    def forward(self, states: torch.Tensor) -> torch.Tensor:
        return self.net(states).squeeze(-1)


def a2c_losses(ep: Episode) -> tuple[torch.Tensor, torch.Tensor]:
    """Actor: -sum (R_t - V_t) log p(d_t), advantage held constant. Critic: sum (V_t - R_t)^2."""
    advantage = (ep.returns - ep.values).detach()
    actor_loss = -(advantage * ep.logprobs).sum()
    critic_loss = ((ep.values - ep.returns) ** 2).sum()
    return actor_loss, critic_loss


def make_episode(actor: Seq2Seq, critic: Critic, item, rewarder, generator: torch.Generator,
                 temperature: float = 1.0) -> Episode:
    """Sample one rollout and score it.

    ``rewarder`` is either a RewardEnv or a plain terminal reward function.
    """
    tokens, logprobs, states, _ = rollout(actor, item.query_indices,
                                          sampling_choice(generator, temperature))
    if isinstance(rewarder, RewardEnv):
        rewards, final = rewarder.step_rewards(tokens, item, actor.config.max_decode_len)
    else:
        rewards, final = sparse_rewards(rewarder, tokens, item)
    values = critic(states.detach())
    returns = torch.tensor(episode_returns(rewards), dtype=values.dtype)
    return Episode(list(item.query_indices), tokens, logprobs, values, rewards, returns,
                   final.total, final.rank_term, final.bleu_term)


def _check_finite(*losses):
    for loss in losses:
        if not torch.isfinite(loss):
            raise TrainingError(f"non-finite RL loss {loss.item()}")


@dataclass
class FrozenRollout:
    states: torch.Tensor
    returns: torch.Tensor


def collect_rollouts(actor: Seq2Seq, items: Sequence, rewarder, generator: torch.Generator,
                     temperature: float = 1.0) -> list[FrozenRollout]:
    """Rollouts from a frozen actor, keeping only what the critic needs."""
    actor.eval()
    out = []
    with torch.no_grad():
        for item in items:
            tokens, _, states, _ = rollout(actor, item.query_indices,
                                           sampling_choice(generator, temperature))
            if isinstance(rewarder, RewardEnv):
                rewards, _ = rewarder.step_rewards(tokens, item, actor.config.max_decode_len)
            else:
                rewards, _ = sparse_rewards(rewarder, tokens, item)
            out.append(FrozenRollout(states, torch.tensor(episode_returns(rewards), dtype=states.dtype)))
    return out


def critic_loss_on(critic: Critic, rollouts: Sequence[FrozenRollout]) -> float:
    with torch.no_grad():
        return float(np.mean([((critic(r.states) - r.returns) ** 2).sum().item() for r in rollouts]))


def pretrain_critic(critic: Critic, actor: Seq2Seq, items: Sequence, rewarder, epochs: int,
                    cfg: RewardConfig, generator: Optional[torch.Generator] = None,
                    rollouts: Optional[Sequence[FrozenRollout]] = None) -> tuple[Critic, list[float]]:
    """Fit the critic to returns of the frozen actor; returns per-epoch critic loss.

    With ``rollouts`` given, every epoch reuses that fixed set; otherwise each
    epoch samples fresh rollouts.
    """
    generator = generator or torch.Generator().manual_seed(cfg.seed)
    shuffle = random.Random(cfg.seed)
    opt = torch.optim.Adam(critic.parameters(), lr=cfg.critic_learning_rate)
    for p in actor.parameters():
        p.requires_grad_(False)
    history = []
    try:
        for epoch in range(1, epochs + 1):
            batch_set = list(rollouts) if rollouts is not None else collect_rollouts(
                actor, items, rewarder, generator, cfg.temperature)
            order = list(range(len(batch_set)))
            shuffle.shuffle(order)
            critic.train()
            for start in range(0, len(order), cfg.batch_size):
                chunk = [batch_set[i] for i in order[start:start + cfg.batch_size]]
                loss = sum(((critic(r.states) - r.returns) ** 2).sum() for r in chunk) / len(chunk)
                _check_finite(loss)
                opt.zero_grad()
                loss.backward()
                nn.utils.clip_grad_norm_(critic.parameters(), cfg.clip_norm)
                opt.step()
            history.append(critic_loss_on(critic, batch_set))
            log.info("critic epoch %d loss %.5f", epoch, history[-1])
    finally:
        for p in actor.parameters():
            p.requires_grad_(True)
    return critic, history


def train_rl(actor: Seq2Seq, critic: Critic, rewarder, items: Sequence, cfg: RewardConfig,
             epochs: int, generator: Optional[torch.Generator] = None) -> tuple[Seq2Seq, Critic, list[dict]]:
    """Joint actor/critic training; the code-search model inside ``rewarder`` stays frozen.

    Returns the reward trace: one row per epoch with the mean terminal reward
    and its rank / BLEU components.
    """
    generator = generator or torch.Generator().manual_seed(cfg.seed)
    shuffle = random.Random(cfg.seed + 1)
    actor_opt = torch.optim.Adam(actor.parameters(), lr=cfg.learning_rate)
    critic_opt = torch.optim.Adam(critic.parameters(), lr=cfg.critic_learning_rate)
    trace = []
    for epoch in range(1, epochs + 1):
        actor.train()
        critic.train()
        order = list(range(len(items)))
        shuffle.shuffle(order)
        totals = np.zeros(3)
        n_episodes = 0
        for start in range(0, len(order), cfg.batch_size):
            actor_loss = critic_loss = 0.0
            count = 0
            for i in order[start:start + cfg.batch_size]:
                for _ in range(cfg.rollouts_per_query):
                    ep = make_episode(actor, critic, items[i], rewarder, generator, cfg.temperature)
                    a_loss, c_loss = a2c_losses(ep)
                    actor_loss = actor_loss + a_loss
                    critic_loss = critic_loss + c_loss
                    totals += (ep.terminal_reward, ep.rank_term, ep.bleu_term)
                    count += 1
            actor_loss = actor_loss / count
            critic_loss = critic_loss / count
            _check_finite(actor_loss, critic_loss)
            actor_opt.zero_grad()
            critic_opt.zero_grad()
            (actor_loss + critic_loss).backward()
            nn.utils.clip_grad_norm_(actor.parameters(), cfg.clip_norm)
            nn.utils.clip_grad_norm_(critic.parameters(), cfg.clip_norm)
            actor_opt.step()
            critic_opt.step()
            n_episodes += count
        mean = totals / max(n_episodes, 1)
        row = {"epoch": epoch, "mean_reward": float(mean[0]), "mean_rank_term": float(mean[1]),
               "mean_bleu_term": float(mean[2])}
        log.info("rl epoch %d mean reward %.4f", epoch, row["mean_reward"])
        trace.append(row)
    return actor, critic, trace


def write_trace(trace: Sequence[dict], path) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["epoch", "mean_reward", "mean_rank_term", "mean_bleu_term"],
                                lineterminator="\n")
        writer.writeheader()
        for row in trace:
            writer.writerow({k: (f"{v:.10g}" if isinstance(v, float) else v) for k, v in row.items()})


def save_critic(critic: Critic, directory, cfg: RewardConfig, meta: dict | None = None) -> str:
    state_dim = critic.net[0].in_features
    config = {"state_dim": state_dim, "hidden": cfg.critic_hidden, "reward": asdict(cfg)}
    return checkpoint.save(directory, "critic", config, {}, critic, meta)


def load_critic(directory) -> Critic:
    header, _, state = checkpoint.load(directory, "critic")
    cfg = header["config"]
    critic = Critic(cfg["state_dim"], cfg["hidden"])
    critic.load_state_dict(state)
    return critic
