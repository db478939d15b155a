"""Training/evaluation drivers behind the command line, plus their CSV outputs."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .apg import rollout
from .cem import TRAINERS, GenerationRecord
from .config import RunConfig
from .dynamics import EnvSpec, IntegrationError, reset, wrap
from .policy import PolicyArch, init_params, load_policy, param_count, save_policy
from .seeding import derive

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_NUMERIC = 2
EXIT_THRESHOLD = 3

HISTORY_COLUMNS = ["generation", "best_return", "elite_mean_return", "sigma_mean", "env_steps",
                   "wall_ms"]

# stream tags under the master seed
_TRAIN, _ROLLOUT, _LANDSCAPE, _GRADCHECK = range(4)


def _fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


class CsvWriter:
    """UTF-8, LF-terminated CSV with a header row; flushed after every row."""

    def __init__(self, path, header):
        self.f = open(path, "w", encoding="utf-8", newline="")
        self.w = csv.writer(self.f, lineterminator="\n")
        self.w.writerow(header)
        self.f.flush()

    def row(self, values):
        self.w.writerow([v if isinstance(v, str) else _fmt(v) for v in values])
        self.f.flush()

    def close(self):
        self.f.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def angle_columns(spec: EnvSpec) -> list:
    return [0, 1] if spec.kind == "acrobot" else list(range(1, spec.ndof))


def balance_metric(spec: EnvSpec, q: np.ndarray, tol: float = 0.2, window: int = 100) -> float:
    """Fraction of the last ``window`` rows whose wrapped angles are all within ``tol`` of upright."""
    q = np.asarray(q)
    if len(q) == 0:
        return 0.0
    tail = q[-window:][:, angle_columns(spec)]
    ok = np.all(np.abs(wrap(tail)) < tol, axis=1)
    return float(ok.mean())


def trajectory_header(spec: EnvSpec) -> list:
    n = spec.ndof
    return (["step", "time"] + [f"q{i}" for i in range(n)] + [f"qdot{i}" for i in range(n)]
            + ["action", "reward"] + [f"obs{i}" for i in range(spec.obs_dim)])


def write_trajectory(path, spec: EnvSpec, traj: dict) -> None:
    with CsvWriter(path, trajectory_header(spec)) as w:
        for k in range(len(traj["reward"])):
            w.row([k, (k + 1) * spec.dt, *traj["q"][k], *traj["qdot"][k], traj["action"][k],
                   traj["reward"][k], *traj["obs"][k]])


def read_csv(path) -> tuple[list, list]:
    with open(path, encoding="utf-8", newline="") as f:
        rows = list(csv.reader(f))
    return rows[0], rows[1:]


# ---------------------------------------------------------------------------
# train


def train(cfg: RunConfig, out: Path) -> dict:
    """Train every configured seed; returns {seed: best_return}."""
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.dump(), encoding="utf-8")
    spec, arch, cem_cfg = cfg.env_spec, cfg.arch, cfg.cem
    trainer = TRAINERS[cfg["mode"]]
    wall = cfg["log.wall_time"]
    results = {}
    for seed in cfg["seeds"]:
        with CsvWriter(out / f"history_{seed}.csv", HISTORY_COLUMNS) as hist:
            def on_record(rec: GenerationRecord):
                hist.row([rec.generation, rec.best_so_far, rec.elite_mean, rec.sigma_mean,
                          rec.env_steps, rec.wall_ms if wall else 0])

            best, history = trainer(cem_cfg, spec, arch, derive(cfg["master_seed"], _TRAIN, seed),
                                    on_record=on_record)
        save_policy(out / f"policy_{seed}.txt", arch, best)
        results[seed] = history[-1].best_so_far
        log.info("seed %s best return %.4f", seed, results[seed])
    vals = np.array(list(results.values()))
    with CsvWriter(out / "summary.csv", ["seed", "best_return"]) as w:
        for seed, r in results.items():
            w.row([seed, r])
        w.row(["mean", float(vals.mean())])
        w.row(["stddev", float(vals.std())])
    return results


# ---------------------------------------------------------------------------
# rollout evaluation


@dataclass
class RolloutStats:
    returns: list
    balance: list

    @property
    def mean(self) -> float:
        return float(np.mean(self.returns))

    @property
    def std(self) -> float:
        return float(np.std(self.returns))


def check_arch(spec: EnvSpec, arch: PolicyArch) -> None:
    if arch.obs_dim != spec.obs_dim:
        raise ValueError(f"policy obs_dim {arch.obs_dim} does not match {spec.kind} "
                         f"({spec.obs_dim})")


def evaluate_policy(spec: EnvSpec, arch: PolicyArch, theta, rng: np.random.Generator, count: int,
                    tol: float = 0.2, window: int = 100, out: Path | None = None) -> RolloutStats:
    check_arch(spec, arch)
    stats = RolloutStats([], [])
    for i in range(count):
        res = rollout(spec, arch, theta, rng, want_traj=True)
        stats.returns.append(res.ret)
        stats.balance.append(balance_metric(spec, res.trajectory["q"], tol, window))
        if out is not None:
            write_trajectory(out / f"trajectory_{i}.csv", spec, res.trajectory)
    return stats


def rollouts(cfg: RunConfig, policy_path, out: Path, count: int) -> RolloutStats:
    arch, theta = load_policy(policy_path)
    spec = cfg.env_spec
    check_arch(spec, arch)
    out.mkdir(parents=True, exist_ok=True)
    seed = cfg["seeds"][0]
    stats = evaluate_policy(spec, arch, theta, derive(cfg["master_seed"], _ROLLOUT, seed), count,
                            cfg["eval.balance_tol"], cfg["eval.balance_window"], out)
    with CsvWriter(out / "rollouts.csv", ["rollout", "return", "balance"]) as w:
        for i, (r, b) in enumerate(zip(stats.returns, stats.balance)):
            w.row([i, r, b])
        w.row(["mean", stats.mean, float(np.mean(stats.balance))])
        w.row(["stddev", stats.std, float(np.std(stats.balance))])
    return stats


# ---------------------------------------------------------------------------
# landscape


def landscape(spec: EnvSpec, arch: PolicyArch, theta, direction_seed: int, half_range: float,
              samples: int, init_state) -> tuple[np.ndarray, np.ndarray]:
    """Returns along theta + alpha * d for one unit random direction d."""
    if samples < 3 or samples % 2 == 0:
        raise ValueError("samples must be odd and >= 3")
    d = np.random.default_rng(direction_seed).standard_normal(param_count(arch))
    d /= np.linalg.norm(d)
    alphas = np.linspace(-half_range, half_range, samples)
    alphas[samples // 2] = 0.0
    rets = np.empty(samples)
    for i, a in enumerate(alphas):
        try:
            rets[i] = rollout(spec, arch, theta + a * d, init_state=init_state).ret
        except IntegrationError:
            rets[i] = np.nan
    return alphas, rets


def landscape_initial_state(cfg: RunConfig):
    return reset(cfg.env_spec, derive(cfg["master_seed"], _LANDSCAPE, cfg["seeds"][0]))


def policy_or_random(cfg: RunConfig, policy_path=None):
    if policy_path is not None:
        arch, theta = load_policy(policy_path)
        check_arch(cfg.env_spec, arch)
        return arch, theta
    arch = cfg.arch
    return arch, init_params(arch, derive(cfg["master_seed"], _LANDSCAPE, cfg["seeds"][0], 1))


# ---------------------------------------------------------------------------
# gradient check


def relative_error(a, b, floor: float = 1e-2):
    """|a - b| / max(|a|, |b|, floor).

    The floor keeps near-zero entries, where central differences are pure
    round-off (~eps * |return| / h), from dominating the check.
    """
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def central_difference(f, theta, i: int, rel_step: float = 1e-6) -> float:
    h = rel_step * max(1.0, abs(theta[i]))
    e = np.zeros_like(theta)
    e[i] = h
    return (f(theta + e) - f(theta - e)) / (2 * h)


def gradcheck(spec: EnvSpec, arch: PolicyArch, seed_root: int, seeds, coords: int,
              horizon: int) -> list:
    """Max relative error of BPTT vs central differences, one entry per seed."""
    out = []
    for seed in seeds:
        rng = derive(seed_root, _GRADCHECK, seed)
        theta = init_params(arch, rng)
        s0 = reset(spec, rng)
        idx = rng.choice(theta.size, size=min(coords, theta.size), replace=False)
        grad = rollout(spec, arch, theta, init_state=s0, want_grad=True, horizon=horizon).grad

        def ret(th):
            return rollout(spec, arch, th, init_state=s0, horizon=horizon).ret

        fd = np.array([central_difference(ret, theta, int(i)) for i in idx])
        err = relative_error(grad[idx], fd)
        out.append(float(err.max()) if err.size else 0.0)
    return out
