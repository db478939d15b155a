import csv
import math

import numpy as np
import pytest

from ceapg import harness
from ceapg.apg import rollout
from ceapg.cli import main
from ceapg.config import ConfigError, build, load, parse_lines
from ceapg.dynamics import make_env, reset
from ceapg.harness import balance_metric, read_csv, relative_error
from ceapg.policy import default_arch, init_params, load_policy, save_policy

FAST = ["--set", "env.horizon=15", "--set", "apg.epochs=2", "--set", "apg.batch=2",
        "--set", "cem.k_a=3", "--set", "cem.k_e=2", "--set", "cem.generations=2",
        "--set", "policy.fc_layers=2x3x1", "--set", "policy.gru_hidden=2"]


def rows(path):
    with open(path, encoding="utf-8", newline="") as f:
        return list(csv.reader(f))


def assert_clean_csv(path):
    raw = path.read_bytes()
    raw.decode("utf-8")
    assert b"\r" not in raw and raw.endswith(b"\n")


# ---------------------------------------------------------------------------
# config


def test_default_hyperparameters():
    cfg = build({})
    assert cfg["env"] == "acrobot"
    assert (cfg["cem.k_a"], cfg["cem.k_e"], cfg["cem.generations"]) == (24, 8, 200)
    assert (cfg["apg.epochs"], cfg["apg.batch"], cfg["cem.sigma0"]) == (100, 4, 0.05)
    assert (cfg["lr.start"], cfg["lr.end"]) == (1e-3, 1e-6)
    assert cfg["policy.fc_layers"] == (4, 16, 16, 1)
    assert cfg["env.u_max"] == 4.0 and cfg["env.horizon"] == 500 and cfg["env.dt"] == 0.02
    dc = build({"env": "double_cartpole"})
    assert dc["policy.gru_hidden"] == 6 and dc["env.u_max"] == 10.0


def test_parse_and_override():
    raw = parse_lines("# comment\nenv = cartpole\ncem.k_a = 12  # inline\n\nseeds = 0, 1,2\n")
    assert raw == {"env": "cartpole", "cem.k_a": "12", "seeds": "0, 1,2"}
    cfg = build(raw)
    assert cfg["seeds"] == (0, 1, 2) and cfg["cem.k_a"] == 12
    assert cfg.arch.obs_dim == 4 and cfg.env_spec.kind == "cartpole"


def test_mass_override_rederives_rods():
    cfg = build({"env": "acrobot", "env.masses": "2,1", "env.lengths": "1,0.5"})
    assert cfg["env.com"] == (0.5, 0.25)
    assert cfg["env.inertias"] == (2 / 12, 0.25 / 12)


def test_dump_roundtrip():
    cfg = build({"env": "double_cartpole", "cem.k_a": "9", "lr.start": "0.0123",
                 "env.y_des": "0.9", "cem.inject_mean": "yes"})
    again = build(parse_lines(cfg.dump()))
    assert again.values == cfg.values
    assert again.dump() == cfg.dump()


@pytest.mark.parametrize("raw", [{"nope": "1"}, {"env": "pendulum"}, {"cem.k_a": "x"},
                                 {"cem.k_e": "30"}, {"mode": "ppo"}, {"env.dt": "-1"},
                                 {"cem.inject_mean": "maybe"}])
def test_config_errors(raw):
    with pytest.raises(ConfigError):
        build(raw)


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError):
        load(tmp_path / "missing.cfg")
    (tmp_path / "bad.cfg").write_text("no equals sign\n")
    with pytest.raises(ConfigError):
        load(tmp_path / "bad.cfg")


def test_budget_matching_for_cem_mode():
    cfg = build({"mode": "cem", "apg.epochs": "30", "cem.generations": "30"})
    assert cfg.cem.generations == 900
    cfg = build({"mode": "cem", "apg.epochs": "30", "cem.generations": "30",
                 "cem.budget_match": "false"})
    assert cfg.cem.generations == 30


# ---------------------------------------------------------------------------
# metrics and helpers


def test_balance_metric():
    spec = make_env("cartpole")
    q = np.zeros((150, 2))
    assert balance_metric(spec, q) == 1.0
    q[-10:, 1] = 0.3
    assert balance_metric(spec, q) == 0.9
    q[:, 1] = 2 * math.pi + 0.1
    assert balance_metric(spec, q) == 1.0
    acro = make_env("acrobot")
    qa = np.zeros((100, 2))
    qa[:50, 1] = 0.25
    assert balance_metric(acro, qa) == 0.5


def test_zero_policy_never_balances():
    spec = make_env("cartpole")
    arch = default_arch(spec)
    stats = harness.evaluate_policy(spec, arch, np.zeros(477), np.random.default_rng(0), 3)
    assert stats.balance == [0.0, 0.0, 0.0]


def test_relative_error_floor():
    assert relative_error(2.0, 1.0) == 0.5
    assert relative_error(1e-9, 0.0) == pytest.approx(1e-7)


# ---------------------------------------------------------------------------
# CLI


def test_train_outputs(tmp_path, capsys):
    out = tmp_path / "run"
    code = main(["train", "--env", "cartpole", "--seed", "0,1,2", "--out", str(out), *FAST])
    assert code == 0
    for seed in range(3):
        hist = rows(out / f"history_{seed}.csv")
        assert hist[0] == ["generation", "best_return", "elite_mean_return", "sigma_mean",
                           "env_steps", "wall_ms"]
        assert len(hist) == 3
        assert [r[0] for r in hist[1:]] == ["0", "1"]
        assert_clean_csv(out / f"history_{seed}.csv")
        arch, theta = load_policy(out / f"policy_{seed}.txt")
        assert arch.gru_hidden == 2
    summary = rows(out / "summary.csv")
    assert summary[0] == ["seed", "best_return"]
    assert [r[0] for r in summary[1:]] == ["0", "1", "2", "mean", "stddev"]
    per_seed = [float(rows(out / f"history_{s}.csv")[-1][1]) for s in range(3)]
    assert [float(r[1]) for r in summary[1:4]] == per_seed
    assert float(summary[4][1]) == pytest.approx(np.mean(per_seed), rel=1e-15)
    assert float(summary[5][1]) == pytest.approx(np.std(per_seed), rel=1e-12, abs=1e-12)
    assert (out / "config.txt").exists()


def test_train_byte_identical_and_config_echo_reproduces(tmp_path):
    a, b, c = tmp_path / "a", tmp_path / "b", tmp_path / "c"
    args = ["train", "--env", "acrobot", "--seed", "4", *FAST]
    assert main([*args, "--out", str(a)]) == 0
    assert main([*args, "--out", str(b)]) == 0
    for name in ("history_4.csv", "policy_4.txt", "summary.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    assert main(["train", "--config", str(a / "config.txt"), "--out", str(c)]) == 0
    assert (a / "history_4.csv").read_bytes() == (c / "history_4.csv").read_bytes()


def test_worker_count_does_not_change_history(tmp_path):
    args = ["train", "--env", "cartpole", "--seed", "1", *FAST, "--set", "log.wall_time=false"]
    assert main([*args, "--out", str(tmp_path / "s")]) == 0
    assert main([*args, "--out", str(tmp_path / "p"), "--workers", "3"]) == 0
    assert ((tmp_path / "s" / "history_1.csv").read_bytes()
            == (tmp_path / "p" / "history_1.csv").read_bytes())


@pytest.mark.parametrize("mode", ["papg", "cem"])
def test_train_modes(tmp_path, mode):
    assert main(["train", "--env", "cartpole", "--mode", mode, "--out", str(tmp_path), *FAST]) == 0
    assert len(rows(tmp_path / "history_0.csv")) > 1


def test_rollout_command(tmp_path, capsys):
    spec = make_env("cartpole", horizon=30)
    arch = default_arch(spec)
    theta = init_params(arch, np.random.default_rng(0))
    save_policy(tmp_path / "p.txt", arch, theta)
    out = tmp_path / "eval"
    code = main(["rollout", "--env", "cartpole", "--policy", str(tmp_path / "p.txt"),
                 "--count", "10", "--out", str(out), "--set", "env.horizon=30"])
    assert code == 0
    assert "+-" in capsys.readouterr().out
    files = sorted(out.glob("trajectory_*.csv"))
    assert len(files) == 10
    header = rows(files[0])[0]
    assert header == ["step", "time", "q0", "q1", "qdot0", "qdot1", "action", "reward",
                      "obs0", "obs1", "obs2", "obs3"]
    stats = rows(out / "rollouts.csv")
    for i, f in enumerate(files):
        body = rows(out / f"trajectory_{i}.csv")[1:]
        assert len(body) == 30
        assert float(stats[1 + i][1]) == pytest.approx(sum(float(r[7]) for r in body), rel=1e-12)
        assert_clean_csv(f)
    rets = [float(r[1]) for r in stats[1:11]]
    assert stats[11][0] == "mean" and float(stats[11][1]) == pytest.approx(np.mean(rets))


def test_rollout_arch_mismatch(tmp_path):
    spec = make_env("cartpole")
    save_policy(tmp_path / "p.txt", default_arch(spec), np.zeros(477))
    assert main(["rollout", "--env", "double_cartpole", "--policy", str(tmp_path / "p.txt"),
                 "--out", str(tmp_path)]) == 1


def test_landscape_command(tmp_path):
    code = main(["landscape", "--env", "acrobot", "--samples", "11", "--half-range", "2",
                 "--out", str(tmp_path), "--set", "env.horizon=100"])
    assert code == 0
    table = rows(tmp_path / "landscape.csv")
    assert table[0] == ["alpha", "return"]
    assert len(table) == 12
    alphas = [float(r[0]) for r in table[1:]]
    assert alphas[5] == 0.0 and alphas[0] == -2.0 and alphas[-1] == 2.0
    assert len({r[1] for r in table[1:]}) >= 2


def test_landscape_center_is_plain_rollout(tmp_path):
    cfg = build({"env": "acrobot", "env.horizon": "80"})
    arch, theta = harness.policy_or_random(cfg)
    s0 = harness.landscape_initial_state(cfg)
    alphas, rets = harness.landscape(cfg.env_spec, arch, theta, 3, 0.5, 5, s0)
    assert rets[2] == rollout(cfg.env_spec, arch, theta, init_state=s0).ret
    with pytest.raises(ValueError):
        harness.landscape(cfg.env_spec, arch, theta, 3, 0.5, 4, s0)


@pytest.mark.parametrize("samples", ["4", "1"])
def test_landscape_bad_samples(tmp_path, samples):
    assert main(["landscape", "--samples", samples, "--out", str(tmp_path)]) == 1


def test_gradcheck_command(capsys):
    assert main(["gradcheck", "--env", "acrobot", "--seed", "0,1", "--coords", "5"]) == 0
    assert "max relative error" in capsys.readouterr().out
    # an impossible threshold trips exit code 3
    assert main(["gradcheck", "--env", "acrobot", "--coords", "5", "--horizon", "10",
                 "--set", "gradcheck.threshold=1e-20"]) == 3
    # long horizons only report
    assert main(["gradcheck", "--env", "cartpole", "--coords", "2", "--horizon", "60",
                 "--set", "gradcheck.threshold=1e-20"]) == 0


def test_gradcheck_one_step():
    def fd5(f, x, i, h=1e-4):
        e = np.zeros_like(x)
        e[i] = h
        return (8 * (f(x + e) - f(x - e)) - (f(x + 2 * e) - f(x - 2 * e))) / (12 * h)

    for kind in ("acrobot", "cartpole", "double_cartpole"):
        spec = make_env(kind)
        arch = default_arch(spec)
        rng = np.random.default_rng(0)
        theta = init_params(arch, rng)
        s0 = reset(spec, rng)
        g = rollout(spec, arch, theta, init_state=s0, want_grad=True, horizon=1).grad
        f = lambda th: rollout(spec, arch, th, init_state=s0, horizon=1).ret
        idx = rng.choice(theta.size, 20, replace=False)
        fd = np.array([fd5(f, theta, int(i)) for i in idx])
        assert relative_error(g[idx], fd).max() < 1e-8


def test_numerical_failure_exit_code(tmp_path):
    assert main(["landscape", "--env", "acrobot", "--out", str(tmp_path), "--samples", "3",
                 "--set", "env.dt=1000"]) == 0  # landscape records NaN rather than failing
    assert main(["gradcheck", "--env", "acrobot", "--set", "env.dt=1000",
                 "--coords", "2"]) == 2


def test_config_error_exit_codes(tmp_path, capsys):
    assert main(["train", "--set", "cem.k_a=abc", "--out", str(tmp_path)]) == 1
    assert main(["train", "--set", "noequals", "--out", str(tmp_path)]) == 1
    assert main(["train", "--config", str(tmp_path / "nope.cfg")]) == 1
    assert "config error" in capsys.readouterr().err
