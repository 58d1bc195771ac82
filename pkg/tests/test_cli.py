import csv
import os

import pytest
import yaml

from safeq import config
from safeq.cli import convergence_episode, main, parse_overrides
from safeq.lagrangian import ConfigError

FAST = ["--agent.hidden", "[8]", "--agent.batch_size", "4", "--agent.learning_starts", "4",
        "--agent.horizon", "5"]


def read_csv(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


# -- config -----------------------------------------------------------------------


def test_empty_config_gives_documented_defaults(tmp_path):
    p = tmp_path / "empty.yaml"
    p.write_text("")
    cfg = config.load(str(p))
    a, d = cfg.agent, cfg.duals
    assert (a.gamma, a.batch_size, a.buffer_capacity, a.horizon, a.lr) == (0.95, 1024, 50_000, 100, 2e-5)
    assert (d.beta_lambda, d.xi, d.rho0, d.rho_max) == (0.1, 1.1, 0.05, 1e5)
    assert cfg.env_name == "cmdp"


def test_bare_and_dotted_overrides():
    assert config.load(overrides={"gamma": 0.9}).agent.gamma == 0.9
    assert config.load(overrides={"agent.lr": 1e-3}).agent.lr == 1e-3


def test_misspelled_key_rejected():
    with pytest.raises(ConfigError, match="gamam"):
        config.load(overrides={"agent.gamam": 0.9})


def test_unknown_yaml_key_rejected(tmp_path):
    p = tmp_path / "bad.yaml"
    p.write_text("agent:\n  batchsize: 3\n")
    with pytest.raises(ConfigError, match="batchsize"):
        config.load(str(p))


def test_wrong_type_names_path():
    with pytest.raises(ConfigError, match="agent.batch_size"):
        config.load(overrides={"agent.batch_size": "many"})


def test_constraint_id_collision_reports_path(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text(yaml.safe_dump({"constraints": [{"id": "x", "kind": "instant"}, {"id": "x", "kind": "instant"}]}))
    with pytest.raises(ConfigError, match=r"constraints\[1\]\.id"):
        config.load(str(p))


def test_constraint_selection_checks_env():
    cfg = config.load(overrides={"env.name": "uav",
                                 "constraints": [{"id": "collision", "kind": "instant"}]})
    assert [c.id for c in config.make_env(cfg).constraints] == ["collision"]
    bad = config.load(overrides={"env.name": "uav", "constraints": [{"id": "nope", "kind": "instant"}]})
    with pytest.raises(ConfigError):
        config.make_env(bad)


def test_shipped_presets_load():
    root = os.path.join(os.path.dirname(__file__), "..", "configs")
    for name in sorted(os.listdir(root)):
        cfg = config.load(os.path.join(root, name))
        config.make_env(cfg)


def test_parse_overrides_forms():
    assert parse_overrides(["--a.b", "3", "--c=[1, 2]", "--d-e", "x"]) == {"a.b": 3, "c": [1, 2], "d_e": "x"}
    with pytest.raises(ConfigError):
        parse_overrides(["--a"])


def test_convergence_episode():
    assert convergence_episode([1, 0, 0, 0], window=3) == 1
    assert convergence_episode([0, 1, 0], window=3) is None


# -- commands -----------------------------------------------------------------------


def test_train_writes_rows_and_is_reproducible(tmp_path):
    args = ["train", "--env", "cmdp", "--episodes", "2", "--agent.kind", "tabular"] + FAST
    assert main(args + ["-o", str(tmp_path / "a")]) == 0
    assert main(args + ["-o", str(tmp_path / "b")]) == 0
    rows = read_csv(tmp_path / "a" / "metrics.csv")
    assert len(rows) == 2
    a = (tmp_path / "a" / "metrics.csv").read_bytes()
    assert a == (tmp_path / "b" / "metrics.csv").read_bytes()
    echoed = yaml.safe_load((tmp_path / "a" / "resolved_config.yaml").read_text())
    assert echoed["episodes"] == 2 and echoed["agent"]["kind"] == "tabular"
    assert (tmp_path / "a" / "summary.yaml").exists()


def test_uav_train_and_eval(tmp_path, capsys):
    out = str(tmp_path / "uav")
    assert main(["train", "--env", "uav", "--episodes", "2", "--env.uav.power_levels", "[5, 23]", "-o", out] + FAST) == 0
    rows = read_csv(os.path.join(out, "metrics.csv"))
    assert len(rows) == 2 * 5
    assert "shield_overrides" in rows[0]
    assert all(r["collisions"] == "0" for r in rows)
    assert main(["eval", "--env", "uav", "--eval_episodes", "2", "--env.uav.power_levels", "[5, 23]",
                 "-o", out] + FAST) == 0
    summary = yaml.safe_load(open(os.path.join(out, "eval_summary.yaml")))
    assert summary["distance_violation_rate"] == 0


def test_ris_train_and_eval(tmp_path):
    out = str(tmp_path / "ris")
    small = ["--env.ris.M_t", "2", "--env.ris.M_r", "4", "--env.ris.M_u", "1", "--env.ris.blocks", "[1, 1]"]
    assert main(["train", "--env", "ris", "--episodes", "3", "-o", out] + FAST + small) == 0
    assert main(["eval", "--env", "ris", "--eval_episodes", "5", "-o", out] + FAST + small) == 0
    summary = yaml.safe_load(open(os.path.join(out, "eval_summary.yaml")))
    assert 0.0 <= summary["feasible_probability"] <= 1.0
    rows = read_csv(os.path.join(out, "eval_episodes.csv"))
    assert list(rows[0]) == ["episode", "feasible", "energy_cost_watts", "min_sinr_db"] and len(rows) == 5


def test_eval_without_checkpoint_fails(tmp_path):
    assert main(["eval", "--env", "cmdp", "-o", str(tmp_path)]) == 1


def test_unknown_key_exit_code(capsys):
    assert main(["train", "--agent.gamam", "0.9"]) == 2
    assert "gamam" in capsys.readouterr().err


def test_oracle_check_exit_codes(tmp_path, capsys):
    base = ["oracle-check", "--agent.batch_size", "16", "--agent.learning_starts", "16",
            "--agent.tabular_lr", "0.5", "--gamma", "0.9", "--oracle.seeds", "[0]"]
    code = main(base + ["--oracle.episodes", "200", "--ablation.penalties_enabled", "false",
                        "-o", str(tmp_path / "off")])
    assert code == 1
    assert "failing seeds: 0" in capsys.readouterr().err
    assert read_csv(tmp_path / "off" / "oracle_check.csv")[0]["passed"] == "False"
    code = main(base + ["--oracle.episodes", "500", "-o", str(tmp_path / "on")])
    assert code == 0
    assert "seed 0: pass" in capsys.readouterr().out
