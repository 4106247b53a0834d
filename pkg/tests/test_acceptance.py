"""Acceptance suite: twelve criteria, each reported as one PASS/FAIL line.

Criteria 8-10 and 12 share one run of the desk configuration
(configs/desk.json, 500 synthetic triples), built once per session.
"""

import json
import random
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from qenrich import encoder as enc
from qenrich import metrics, pipeline, qse, rl
from qenrich.cli import main
from qenrich.config import RunConfig
from qenrich.corpus import (
    BOS, TokenStream, Triple, build_vocabulary, encode_tokens, field_stream, generate_synthetic_corpus,
    preprocess_corpus,
)
from qenrich.ranker import (
    HybridConfig, QueryScorer, build_eval_pools, code_vector_table, evaluate_pools, load_pools, rank_ids,
)

from oracles import brute_metrics, central_difference, harmonic

DESK_CONFIG = Path(__file__).resolve().parents[1] / "configs" / "desk.json"
STAGES = ["prepare", "train-cs", "train-qse", "train-rl", "build-index", "build-pools"]
MODES = ["base_only", "no_rl", "hybrid", "enriched_only"]


def cli(*argv):
    return main([str(a) for a in argv])


def run_desk(workdir: Path) -> dict:
    """All stages, every evaluation mode and a decode pass; returns per-step wall times."""
    times = {}
    for stage in STAGES:
        start = time.perf_counter()
        assert cli(stage, "--config", DESK_CONFIG, "--workdir", workdir) == 0, stage
        times[stage] = time.perf_counter() - start
    for mode in MODES:
        start = time.perf_counter()
        assert cli("evaluate", "--config", DESK_CONFIG, "--workdir", workdir, "--mode", mode) == 0
        times[f"evaluate-{mode}"] = time.perf_counter() - start
    assert cli("evaluate", "--config", DESK_CONFIG, "--workdir", workdir, "--mode", "base_only",
               "--eval-field", "description") == 0
    assert cli("decode", "--config", DESK_CONFIG, "--workdir", workdir,
               "--output", workdir / "reports" / "decoded.jsonl") == 0
    return times


@pytest.fixture(scope="module")
def desk(tmp_path_factory):
    workdir = tmp_path_factory.mktemp("desk") / "run"
    times = run_desk(workdir)
    reports = {m: json.loads((workdir / "reports" / f"eval_{m}_query.json").read_text()) for m in MODES}
    reports["description"] = json.loads((workdir / "reports" / "eval_base_only_description.json").read_text())
    return {"workdir": workdir, "times": times, "reports": reports}


# --------------------------------------------------------------------------


def test_c01_metric_oracle_equivalence(criterion):
    criterion.start(1)
    start = time.perf_counter()
    rng = np.random.default_rng(0)
    mismatches = 0
    for _ in range(1000):
        n_queries = int(rng.integers(1, 12))
        pool = int(rng.integers(2, 51))
        # coarse score grid so ties are common
        scores = rng.integers(0, 8, size=(n_queries, pool)) / 7.0
        positives = rng.integers(0, pool, size=n_queries).tolist()
        oracle = brute_metrics(scores, positives)
        ranks = [metrics.frank([(j, s) for j, s in enumerate(row.tolist())], p) for row, p in zip(scores, positives)]
        vec_ranks = [metrics.frank_from_array(row, p) for row, p in zip(scores, positives)]
        rep = metrics.report(ranks)
        ok = ([r.frank for r in ranks] == oracle["ranks"] == [r.frank for r in vec_ranks]
              and rep.mrr == oracle["mrr"] and rep.r_at == oracle["r_at"])
        mismatches += not ok
    elapsed = time.perf_counter() - start
    criterion(1, "metric oracle equivalence", mismatches == 0 and elapsed < 10,
              f"{mismatches} mismatches over 1000 matrices, {elapsed:.1f}s (< 10s)")


def _fd_relative_error(model, loss_fn):
    model.double()
    params = list(model.parameters())
    model.zero_grad()
    loss_fn().backward()
    analytic = np.concatenate([p.grad.numpy().ravel() for p in params])
    with torch.no_grad():
        numeric = np.concatenate([g.ravel() for g in central_difference(lambda: loss_fn().item(), params)])
    n_params = sum(p.numel() for p in params)
    return np.linalg.norm(analytic - numeric) / (np.linalg.norm(analytic) + np.linalg.norm(numeric)), n_params


def test_c02_gradient_correctness(criterion):
    criterion.start(2)
    start = time.perf_counter()
    words = tuple(f"w{i}" for i in range(12))
    vocab = build_vocabulary([TokenStream(words, "code")], 100)
    results = {}
    for kind in enc.MODEL_KINDS:
        cfg = enc.EncoderConfig(model_kind=kind, embed_dim=8 if kind == "bag_attention" else 4,
                                hidden_dim=3, margin=1.0, seed=3)
        m = enc.CodeSearchModel(cfg, vocab, vocab)
        results[f"encoder/{kind}"] = _fd_relative_error(
            m, lambda: enc.triplet_loss(m, [[4, 5, 6]], [[7, 8]], [[9, 10, 11]]).sum())
    qv = build_vocabulary([TokenStream(tuple(f"q{i}" for i in range(8)), "query")], 100)
    dv = build_vocabulary([TokenStream(tuple(f"d{i}" for i in range(8)), "description")], 100)
    s2s = qse.Seq2Seq(qse.Seq2SeqConfig(embed_dim=3, hidden_dim=3, init_scale=0.5, seed=2), qv, dv)
    results["qse"] = _fd_relative_error(
        s2s, lambda: qse.teacher_forcing_loss(s2s, [BOS, 4, 6, 5, 3], [BOS, 7, 4, 9, 3]))
    elapsed = time.perf_counter() - start
    ok = all(err < 1e-4 and n <= 2000 for err, n in results.values()) and elapsed < 60
    detail = ", ".join(f"{k} rel {err:.1e} ({n} params)" for k, (err, n) in results.items())
    criterion(2, "gradient correctness", ok, f"{detail}; {elapsed:.1f}s (< 60s)")


def test_c03_cs_overfit(criterion):
    criterion.start(3)
    start = time.perf_counter()
    text = [f"t{i}" for i in range(24)]
    code = [f"c{i}" for i in range(24)]
    tv = build_vocabulary([TokenStream(tuple(text), "description")], 100)
    cv = build_vocabulary([TokenStream(tuple(code), "code")], 100)
    pairs = [([tv.index(w) for w in text[3 * i:3 * i + 3]], [cv.index(w) for w in code[3 * i:3 * i + 3]])
             for i in range(8)]
    m = enc.CodeSearchModel(enc.EncoderConfig(embed_dim=16, batch_size=8, learning_rate=1e-2), cv, tv)
    rng = random.Random(0)
    epochs, r1 = 0, 0.0
    while epochs < 200 and r1 < 1.0:
        enc.train_cs_epoch(m, pairs, rng)
        epochs += 1
        text_vecs = enc.embed_many(m, "text", [p[0] for p in pairs])
        code_vecs = enc.embed_many(m, "code", [p[1] for p in pairs])
        ranks = [metrics.frank_from_array(enc.cosine_scores(text_vecs[i], code_vecs), i) for i in range(8)]
        r1 = metrics.recall_at_k(ranks, 1)
    elapsed = time.perf_counter() - start
    criterion(3, "CS overfit", r1 == 1.0 and elapsed < 120,
              f"training R@1 {r1:.2f} after {epochs} epochs (<= 200), {elapsed:.1f}s (< 120s)")


def test_c04_qse_overfit(criterion):
    criterion.start(4)
    start = time.perf_counter()
    triples, _ = preprocess_corpus(generate_synthetic_corpus(32, seed=0))
    qv = build_vocabulary([field_stream(t, "query") for t in triples], 1000)
    dv = build_vocabulary([field_stream(t, "description") for t in triples], 1000)
    pairs = [(encode_tokens(field_stream(t, "query"), qv, True, 30),
              encode_tokens(field_stream(t, "description"), dv, True, 60)) for t in triples]
    cfg = qse.Seq2SeqConfig(embed_dim=32, hidden_dim=64, learning_rate=1e-2, batch_size=8, max_decode_len=30)
    m = qse.Seq2Seq(cfg, qv, dv)
    rng = random.Random(0)
    epochs, match = 0, 0.0
    while epochs < 300 and match < 0.9:
        qse.train_qse_epoch(m, pairs, rng)
        epochs += 1
        if epochs % 5 == 0:
            match = float(np.mean([qse.greedy_decode(m, q).tokens == d[1:] for q, d in pairs]))
    elapsed = time.perf_counter() - start
    criterion(4, "QSE overfit", match >= 0.9 and elapsed < 300,
              f"greedy exact match {match:.2%} after {epochs} epochs (<= 300), {elapsed:.1f}s (< 300s)")


def test_c05_reward_contract(criterion):
    criterion.start(5)
    words = tuple(f"w{i}" for i in range(20))
    vocab = build_vocabulary([TokenStream(words, "code")], 100)
    cs = enc.CodeSearchModel(enc.EncoderConfig(embed_dim=8, seed=1), vocab, vocab).eval()
    corpus = {f"c{i}": [4 + i % 20, 4 + (3 * i) % 20] for i in range(40)}
    env = rl.RewardEnv(cs, corpus, rl.RewardConfig(pool_size=15, seed=0))
    rng = random.Random(0)
    nonzero_midway = const_violations = alpha_violations = 0
    max_len = 8
    for k in range(300):
        length = rng.randint(1, max_len)
        actions = [rng.randrange(4, 24) for _ in range(length - 1)]
        actions.append(3 if rng.random() < 0.5 or length < max_len else rng.randrange(4, 24))
        item = rl.RLItem(f"c{k % 40}", [BOS, 4, 3], [f"w{rng.randrange(20)}" for _ in range(5)])
        rewards, _ = env.step_rewards(actions, item, max_len)
        nonzero_midway += any(r != 0.0 for r in rewards[:-1])
        const_violations += len(set(rl.episode_returns(rewards))) != 1
        pool = env.pool(item.id)
        text = [f"w{a - 4}" for a in actions if a >= 4]
        cfg = rl.RewardConfig(alpha=1.0)
        a = rl.terminal_reward(text, pool, item.gold_description, cfg, cs).total
        b = rl.terminal_reward(text, pool, ["garbage"] * rng.randint(1, 30), cfg, cs).total
        alpha_violations += a != b
    ok = nonzero_midway == const_violations == alpha_violations == 0
    criterion(5, "reward contract", ok,
              f"300 episodes: {nonzero_midway} nonzero non-terminal rewards, {const_violations} non-constant "
              f"returns, {alpha_violations} alpha=1 gold-description dependencies")


def _bandit_actor(seed=1):
    qv = build_vocabulary([TokenStream(("q",), "query")], 10)
    dv = build_vocabulary([TokenStream(("A", "B"), "description")], 10)
    return qse.Seq2Seq(qse.Seq2SeqConfig(embed_dim=8, hidden_dim=8, max_decode_len=2, seed=seed), qv, dv)


def test_c06_a2c_sanity(criterion):
    criterion.start(6)
    start = time.perf_counter()
    actor = _bandit_actor()
    A = actor.desc_vocab.index("A")
    items = [rl.RLItem(f"i{k}", [BOS, 4, 3], []) for k in range(16)]
    cfg = rl.RewardConfig(learning_rate=5e-2, critic_learning_rate=1e-2, batch_size=16)
    actor, _, _ = rl.train_rl(actor, rl.Critic(8, 16), lambda toks, item: float(toks[0] == A), items, cfg,
                              epochs=40, generator=torch.Generator().manual_seed(0))
    p_a = qse.greedy_decode(actor, [BOS, 4, 3], trace=True).trace["distributions"][0][A].item()

    fresh = _bandit_actor(seed=2)
    tokens, logprobs, _, _ = qse.rollout(fresh, [BOS, 4, 3], qse.sampling_choice(torch.Generator().manual_seed(0)))
    returns = torch.full((len(tokens),), 0.8)
    ep = rl.Episode([BOS, 4, 3], tokens, logprobs, returns.clone(), [0.0] * len(tokens), returns, 0.8)
    fresh.zero_grad()
    rl.a2c_losses(ep)[0].backward()
    grad_norm = sum(float(p.grad.abs().sum()) for p in fresh.parameters() if p.grad is not None)
    elapsed = time.perf_counter() - start
    criterion(6, "A2C sanity", p_a > 0.95 and grad_norm == 0.0 and elapsed < 120,
              f"P(rewarded token) {p_a:.4f} (> 0.95), zero-advantage actor grad L1 {grad_norm}, {elapsed:.1f}s")


def test_c07_critic_regression(criterion):
    criterion.start(7)
    qv = build_vocabulary([TokenStream(("q",), "query")], 10)
    dv = build_vocabulary([TokenStream(("A", "B"), "description")], 10)
    actor = qse.Seq2Seq(qse.Seq2SeqConfig(embed_dim=8, hidden_dim=8, max_decode_len=6, init_scale=0.5, seed=2),
                        qv, dv)
    items = [rl.RLItem(f"i{k}", [BOS] + [4] * (1 + k % 3) + [3], []) for k in range(32)]
    worst = 0.0
    for c in (0.0, 0.37, 1.0):
        critic, _ = rl.pretrain_critic(rl.Critic(8, 16, seed=1), actor, items, lambda t, i: c, 60,
                                       rl.RewardConfig(critic_learning_rate=1e-2, batch_size=8),
                                       torch.Generator().manual_seed(0))
        held_out = rl.collect_rollouts(actor, items, lambda t, i: c, torch.Generator().manual_seed(123))
        with torch.no_grad():
            preds = torch.cat([critic(r.states) for r in held_out])
        worst = max(worst, (preds - c).abs().max().item())
    criterion(7, "critic regression", worst < 0.05,
              f"max |V - c| on held-out rollouts {worst:.4f} (< 0.05) for c in {{0, 0.37, 1}}")


@pytest.mark.slow
def test_c08_hybrid_degeneracy(desk, criterion):
    criterion.start(8)
    workdir = desk["workdir"]
    cfg = RunConfig.load(DESK_CONFIG, [f"paths.workdir={workdir}"])
    data = pipeline.load_prepared(cfg)
    ws = pipeline.Workspace(workdir)
    cs = enc.load_model(ws.cs)
    actor = qse.load_model(ws.rl)
    pools = load_pools(ws.pools)
    vectors = code_vector_table(cs, [data.triples[c] for c in sorted({c for p in pools for c in p.candidate_ids})])
    scorers = {name: QueryScorer(cs, actor, HybridConfig(mode=mode, beta=beta)) for name, mode, beta in [
        ("base", "base_only", 0.6), ("beta0", "hybrid", 0.0), ("enriched", "enriched_only", 0.6),
        ("beta1", "hybrid", 1.0)]}
    diffs = {"beta0": 0, "beta1": 0}
    for pool in pools:
        ids = pool.candidate_ids
        matrix = np.stack([vectors[c] for c in ids])
        query = field_stream(data.triples[pool.query_id], "query").tokens
        order = {k: [i for i, _ in rank_ids(ids, s(query, matrix)[0], len(ids))] for k, s in scorers.items()}
        diffs["beta0"] += order["beta0"] != order["base"]
        diffs["beta1"] += order["beta1"] != order["enriched"]
    reports = {}
    for beta in ("0", "1"):
        out = workdir / "reports" / f"beta{beta}.json"
        assert cli("evaluate", "--config", DESK_CONFIG, "--workdir", workdir, "--mode", "hybrid",
                   "--beta", beta, "--output", out) == 0
        reports[beta] = json.loads(out.read_text())
    same_reports = (reports["0"]["r_at"] == desk["reports"]["base_only"]["r_at"]
                    and reports["0"]["mrr"] == desk["reports"]["base_only"]["mrr"]
                    and reports["1"]["r_at"] == desk["reports"]["enriched_only"]["r_at"]
                    and reports["1"]["mrr"] == desk["reports"]["enriched_only"]["mrr"])
    criterion(8, "hybrid degeneracy", diffs == {"beta0": 0, "beta1": 0} and same_reports,
              f"{len(pools)} pools: beta=0 vs base_only differing rankings {diffs['beta0']}, "
              f"beta=1 vs enriched_only {diffs['beta1']}; CLI reports identical: {same_reports}")


@pytest.mark.slow
def test_c09_description_beats_query(desk, criterion):
    criterion.start(9)
    t = desk["times"]
    elapsed = t["prepare"] + t["train-cs"] + t["build-pools"] + t["evaluate-base_only"] * 2
    desc = desk["reports"]["description"]["mrr"]
    query = desk["reports"]["base_only"]["mrr"]
    criterion(9, "description-set vs query-set", desc >= query and elapsed < 600,
              f"description MRR {desc:.4f} >= query MRR {query:.4f}; ~{elapsed:.0f}s (< 600s)")


@pytest.mark.slow
def test_c10_full_pipeline_vs_base(desk, criterion):
    criterion.start(10)
    hybrid = desk["reports"]["hybrid"]["mrr"]
    base = desk["reports"]["base_only"]["mrr"]
    trace = (desk["workdir"] / "reports" / "reward_trace.csv").read_text().splitlines()[1:]
    rewards = [float(line.split(",")[1]) for line in trace]
    elapsed = sum(desk["times"].values())
    ok = hybrid >= base - 0.02 and rewards[-1] >= rewards[0] - 0.02 and elapsed < 1800
    criterion(10, "full pipeline vs base", ok,
              f"hybrid query MRR {hybrid:.4f} vs base {base:.4f} (need >= base - 0.02); reward trace "
              f"{rewards[0]:.4f} -> {rewards[-1]:.4f} over {len(rewards)} epochs (need final >= first - 0.02); "
              f"{elapsed:.0f}s (< 1800s)")


def test_c11_random_scorer_calibration(criterion):
    criterion.start(11)
    triples = [Triple(f"s{i:05d}", "synthetic", "x", "y") for i in range(2000)]
    pools, meta = build_eval_pools(triples[:600], [t.id for t in triples], seed=5)
    rng = np.random.default_rng(11)
    rep = evaluate_pools(pools, lambda p: rng.random(len(p.candidate_ids)))
    expected = harmonic(1000) / 1000
    ok = meta["pool_size"] == 1000 and abs(rep.mrr - 0.0075) <= 0.003
    criterion(11, "random-scorer calibration", ok,
              f"MRR {rep.mrr:.5f} over {rep.n_queries} queries, pools of {meta['pool_size']} "
              f"(target 0.0075 +/- 0.003; H_1000/1000 = {expected:.5f})")


@pytest.mark.slow
def test_c12_determinism(desk, criterion, tmp_path):
    criterion.start(12)
    first = desk["workdir"]
    second = tmp_path / "rerun"
    run_desk(second)

    def snapshot(root: Path) -> dict:
        files = {}
        for path in sorted(root.rglob("*")):
            if path.is_file() and path.name != ".lock" and "beta" not in path.name:
                files[str(path.relative_to(root))] = pipeline.sha256_file(path)
        return files

    a, b = snapshot(first), snapshot(second)
    differing = sorted(k for k in set(a) | set(b) if a.get(k) != b.get(k))
    manifests = sorted(p.stem for p in (first / "manifests").glob("*.json"))
    criterion(12, "determinism", not differing and manifests == sorted(STAGES),
              f"{len(a)} artifacts from {len(manifests)} stages plus evaluate/decode compared by sha256, "
              f"{len(differing)} differ {differing[:3]}")
