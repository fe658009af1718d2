import csv
import json
import time

import numpy as np
import pytest

from upesi.cli import main
from upesi.config import METHODS, RunConfig, parse_config_text
from upesi.pipeline import Run, StageError, STAGES

TINY = {
    "env.max_steps": 20, "data.n_theta": 12, "data.target_episodes": 3, "data.heldout_theta": 4,
    "data.heldout_episodes": 2, "policy.episodes": 4, "model.steps": 30, "osi.steps": 30,
    "bo.iterations": 12, "eval.n_theta": 2, "eval.episodes": 2, "td3.start_steps": 30, "td3.batch_size": 16,
}


def tiny_config(seed=0, **extra):
    return RunConfig.build("pendulum", "ci", {**TINY, **extra}, seed=seed)


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny")
    run = Run(tiny_config(), out)
    run.run_all()
    return run


def read(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def test_parse_config_text():
    vals = parse_config_text("# comment\nseed_like = 3\n[bo]\niterations = 7  # inline\nx.y = a,b\nr = 0.5\n")
    assert vals == {"seed_like": 3, "bo.iterations": 7, "x.y": "a,b", "bo.r": 0.5}
    with pytest.raises(ValueError, match="line 1"):
        parse_config_text("no equals sign")


def test_profiles_scale_budgets():
    full = RunConfig.build("pendulum", "full")
    ci = RunConfig.build("pendulum", "ci")
    assert full["data.n_theta"] == 10000 and ci["data.n_theta"] == 1000
    assert full["policy.episodes"] == 2000 and ci["policy.episodes"] == 200
    assert full["data.target_episodes"] == 1000 and ci["data.target_episodes"] == 100
    assert full["bo.iterations"] == 500 and ci["bo.iterations"] == 100
    assert full["run.n_seeds"] == 3 and full["eval.n_theta"] == 10 and full["eval.episodes"] == 10
    chain = RunConfig.build("chain", "full")
    assert chain["data.n_theta"] == 2000 and chain["policy.episodes"] == 25000 and chain["model.latent_dim"] == 4
    assert full.methods == list(METHODS)


def test_config_rejections_and_file(tmp_path):
    with pytest.raises(ValueError, match="unknown config keys"):
        RunConfig.build(overrides={"bo.iteratons": 5})
    with pytest.raises(ValueError):
        RunConfig.build(overrides={"run.methods": "no_dr,magic"})
    with pytest.raises(ValueError):
        RunConfig.build(overrides={"bo.iterations": 0})
    with pytest.raises(ValueError):
        RunConfig.build("hopper")
    p = tmp_path / "c.cfg"
    p.write_text("env.kind = chain\nrun.profile = full\n[bo]\niterations = 42\n")
    cfg = RunConfig.from_file(p, seed=5)
    assert cfg.env_kind == "chain" and cfg["bo.iterations"] == 42 and cfg["run.seed"] == 5
    assert RunConfig.from_file(p, profile="ci")["data.n_theta"] == 200


def test_streams_are_named_and_seeded():
    a, b = tiny_config(0), tiny_config(1)
    assert a.stream("x").random() == a.stream("x").random()
    assert a.stream("x").random() != a.stream("y").random()
    assert a.stream("x").random() != b.stream("x").random()
    assert a.hash() == tiny_config(0).hash() != b.hash()


def test_fit_embedding_before_train_dynamics_rejected(tmp_path):
    run = Run(tiny_config(), tmp_path)
    run.run_stage("collect")
    with pytest.raises(StageError, match="needs 'train-dynamics'"):
        run.run_stage("fit-embedding")
    with pytest.raises(StageError, match="unknown stage"):
        run.run_stage("deploy")


def test_manifest_records_every_stage(tiny_run):
    m = json.loads(tiny_run.manifest_path.read_text())
    assert set(m["stages"]) == set(STAGES)
    for rec in m["stages"].values():
        assert rec["status"] == "complete" and rec["outputs"]
    assert m["config_hash"] == tiny_run.config.hash()


def test_modified_output_and_config_change_detected(tiny_run, tmp_path):
    other = Run(tiny_config(seed=9), tiny_run.out)
    with pytest.raises(StageError, match="different configuration"):
        other.run_stage("report")
    # copy the run so the shared fixture stays intact
    import shutil
    dst = tmp_path / "copy"
    shutil.copytree(tiny_run.out, dst)
    run = Run(tiny_run.config, dst)
    run.run_stage("report")
    with open(dst / "bo" / "fitted.csv", "a") as f:
        f.write("tampered\n")
    with pytest.raises(StageError, match="modified"):
        run.run_stage("evaluate")


def test_report_consistency(tiny_run):
    t0 = time.time()
    tiny_run.run_stage("report")
    assert time.time() - t0 < 5.0
    table = read(tiny_run.out / "report" / "table.csv")
    assert [r["method"] for r in table] == list(METHODS)
    raw = read(tiny_run.out / "report" / "episode_rewards.csv")
    for r in table:
        vals = np.array([float(e["reward"]) for e in raw if e["method"] == r["method"]])
        assert len(vals) == int(r["episodes"]) == 4
        assert abs(vals.mean() - float(r["mean"])) < 1e-9
        assert abs(vals.std() - float(r["std"])) < 1e-9
    ident = read(tiny_run.out / "report" / "identifiability.csv")
    assert len(ident) == 2
    for row in ident:
        assert abs(float(row["ratio"]) - float(row["objective"]) / float(row["true_objective"])) < 1e-12
    traces = read(tiny_run.out / "report" / "bo_traces.csv")
    assert len(traces) == 2 * 12
    curves = read(tiny_run.out / "report" / "learning_curves.csv")
    assert {c["variant"] for c in curves} == {"no_dr", "dr_only", "up_true_theta", "up_embedding"}
    info = read(tiny_run.out / "curves" / "informativeness.csv")
    assert len(info) == 4


def test_target_data_hides_theta(tiny_run):
    from upesi.envs import TransitionDataset
    raw = TransitionDataset.load(tiny_run.out / "data" / "target_0.ds")
    assert np.all(np.isnan(raw.theta))


def test_tiny_runs_reproduce(tiny_run, tmp_path):
    again = Run(tiny_config(), tmp_path)
    again.run_all()
    for rel in ("results/summary.csv", "results/episode_rewards.csv", "bo/fitted.csv", "report/table.csv"):
        assert (again.out / rel).read_bytes() == (tiny_run.out / rel).read_bytes()


def test_cli_exit_codes(tmp_path, capsys):
    cfg = tmp_path / "tiny.cfg"
    cfg.write_text("".join(f"{k} = {v}\n" for k, v in TINY.items()))
    out = tmp_path / "run"
    assert main(["fit-embedding", "--config", str(cfg), "--out", str(out)]) == 2
    assert "needs 'collect'" in capsys.readouterr().err
    assert main(["collect", "--config", str(cfg), "--out", str(out), "--method", "no_dr"]) == 0
    assert main(["train-dynamics", "--config", str(cfg), "--out", str(out)]) == 2  # different methods
    assert main(["train-dynamics", "--config", str(cfg), "--out", str(out), "--method", "no_dr"]) == 0
    assert main(["collect", "--config", str(tmp_path / "missing.cfg"), "--out", str(out)]) == 2
    with pytest.raises(SystemExit):
        main(["collect", "--profile", "huge"])


def test_cli_verify_theory(tmp_path, capsys):
    assert main(["verify-theory", "--instances", "5", "--out", str(tmp_path)]) == 0
    text = capsys.readouterr().out
    assert text.count("PASS") == 6 and (tmp_path / "theory.csv").exists()
