import io
import json
import subprocess
import sys

import pytest

from qenrich import pipeline
from qenrich.cli import EXIT_CONFIG, EXIT_STAGE, main
from qenrich.config import ConfigError, RunConfig, apply_overrides

STAGES = ["prepare", "train-cs", "train-qse", "train-rl", "build-index", "build-pools"]


def run_cli(*argv):
    return main([str(a) for a in argv])


def run_all(config, workdir):
    for stage in STAGES:
        assert run_cli(stage, "--config", config, "--workdir", workdir) == 0, stage


def artifact_hashes(workdir):
    out = {}
    for manifest in sorted((workdir / "manifests").glob("*.json")):
        out[manifest.stem] = json.loads(manifest.read_text())["artifacts"]
    return out


def test_config_overrides_and_hashes():
    cfg = RunConfig().with_overrides(["--encoder.epochs=3", "seed=7", "paths.workdir=x"])
    assert cfg.encoder.epochs == 3 and cfg.encoder.seed == cfg.qse.seed == cfg.reward.seed == 7
    assert cfg.paths.workdir == "x"
    changed = cfg.with_overrides(["hybrid.beta=0.1"])
    assert changed.stage_hash("train-cs") == cfg.stage_hash("train-cs")
    assert changed.full_hash() != cfg.full_hash()
    assert cfg.with_overrides(["encoder.epochs=4"]).stage_hash("train-cs") != cfg.stage_hash("train-cs")
    with pytest.raises(ConfigError):
        apply_overrides({}, ["nope.key=1"])
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"encoder": {"bogus": 1}})
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"reward": {"alpha": 2}})


def test_full_pipeline_is_deterministic(tiny_config, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    run_all(tiny_config, a)
    run_all(tiny_config, b)
    hashes = artifact_hashes(a)
    assert set(hashes) == set(STAGES)
    assert hashes == artifact_hashes(b)
    assert (a / "reports" / "reward_trace.csv").read_text() == (b / "reports" / "reward_trace.csv").read_text()


@pytest.fixture
def built(tiny_config, tmp_path):
    work = tmp_path / "work"
    run_all(tiny_config, work)
    return tiny_config, work


def evaluate_json(config, *extra, capsys):
    capsys.readouterr()
    assert run_cli("evaluate", "--config", config, *extra) == 0
    return json.loads(capsys.readouterr().out)


def test_evaluate_modes_and_beta_degeneracy(built, capsys):
    config, work = built
    base = evaluate_json(config, "--mode", "base_only", capsys=capsys)
    hybrid0 = evaluate_json(config, "--mode", "hybrid", "--beta", "0", capsys=capsys)
    enriched = evaluate_json(config, "--mode", "enriched_only", capsys=capsys)
    hybrid1 = evaluate_json(config, "--mode", "hybrid", "--beta", "1", capsys=capsys)
    assert (base["r_at"], base["mrr"]) == (hybrid0["r_at"], hybrid0["mrr"])
    assert (enriched["r_at"], enriched["mrr"]) == (hybrid1["r_at"], hybrid1["mrr"])
    assert base["metadata"]["desk_fallback"] is True
    assert (work / "reports" / "eval_hybrid_query.json").exists()
    desc = evaluate_json(config, "--mode", "base_only", "--eval-field", "description", capsys=capsys)
    assert desc["metadata"]["eval_field"] == "description"


def test_explicit_output_leaves_mode_report_alone(built, tmp_path, capsys):
    config, work = built
    default = work / "reports" / "eval_hybrid_query.json"
    evaluate_json(config, "--mode", "hybrid", capsys=capsys)
    before = default.read_text()
    out = tmp_path / "beta1.json"
    evaluate_json(config, "--mode", "hybrid", "--beta", "1", "--output", out, capsys=capsys)
    assert default.read_text() == before
    assert json.loads(out.read_text())["metadata"]["beta"] == 1.0


def test_no_rl_with_rl_checkpoint_matches_hybrid(built, capsys):
    config, work = built
    via_mode = evaluate_json(config, "--mode", "hybrid", capsys=capsys)
    via_override = evaluate_json(config, "--mode", "no_rl", "--enricher", work / "checkpoints" / "rl",
                                 capsys=capsys)
    assert via_mode["mrr"] == via_override["mrr"] and via_mode["r_at"] == via_override["r_at"]


def test_sweep_beta_writes_six_rows(built, capsys):
    config, work = built
    assert run_cli("sweep", "--config", config, "--param", "beta", "--values", "0,0.2,0.4,0.6,0.8,1.0") == 0
    lines = (work / "reports" / "sweep_beta.csv").read_text().splitlines()
    assert lines[0] == "param,value,r1,r5,r10,mrr"
    assert len(lines) == 7


def test_sweep_alpha_retrains(built):
    config, work = built
    assert run_cli("sweep", "--config", config, "--param", "alpha", "--values", "0.5") == 0
    assert (work / "checkpoints" / "sweep-alpha-0.5" / "reward_trace.csv").exists()


def test_stage_order_errors(tiny_config, capsys):
    assert run_cli("train-cs", "--config", tiny_config) == EXIT_STAGE
    assert run_cli("prepare", "--config", tiny_config) == 0
    assert run_cli("train-rl", "--config", tiny_config) == EXIT_STAGE
    assert run_cli("evaluate", "--config", tiny_config) == EXIT_STAGE
    assert "train-cs" in capsys.readouterr().err


def test_config_mismatch_refused(built):
    config, _ = built
    assert run_cli("evaluate", "--config", config, "--encoder.epochs=99") == EXIT_STAGE


def test_bad_config_exit_code(tmp_path):
    assert run_cli("prepare", "--config", tmp_path / "missing.json") == EXIT_CONFIG
    assert run_cli("prepare", "--workdir", tmp_path, "--bogus.key=1") == EXIT_CONFIG


def test_search_reads_stdin(built, capsys, monkeypatch):
    config, _ = built
    monkeypatch.setattr(sys, "stdin", io.StringIO("sort a list\n\n"))
    assert run_cli("search", "--config", config, "--top-k", "3") == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0].startswith("enriched: ")
    hits = [line.split("\t") for line in out[1:4]]
    assert [h[0] for h in hits] == ["1", "2", "3"]
    scores = [float(h[2]) for h in hits]
    assert scores == sorted(scores, reverse=True)
    assert "(empty query)" in out


def test_decode_writes_jsonl(built, tmp_path):
    config, _ = built
    queries = tmp_path / "q.txt"
    queries.write_text("open a file\nParse JSON string\n")
    out = tmp_path / "out.jsonl"
    assert run_cli("decode", "--config", config, "--input", queries, "--output", out) == 0
    rows = [json.loads(line) for line in out.read_text().splitlines()]
    assert [r["query"] for r in rows] == ["open a file", "Parse JSON string"]
    assert all(r["log_prob"] <= 0 and isinstance(r["enriched_query"], str) for r in rows)


def test_build_index_fingerprint_tracks_cs_checkpoint(built):
    config, work = built
    cfg = RunConfig.load(config)
    index = pipeline.build_index_stage(cfg)
    from qenrich import encoder

    assert index.fingerprint == encoder.load_model(work / "checkpoints" / "cs").fingerprint()


def test_console_script_help():
    proc = subprocess.run([sys.executable, "-m", "qenrich.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    assert "train-rl" in proc.stdout
