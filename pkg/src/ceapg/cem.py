"""Diagonal-Gaussian cross-entropy search and the CE-APG / PAPG / CEM drivers."""
from __future__ import annotations

import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .apg import ApgConfig, apg_epoch, apg_run, evaluate
from .dynamics import EnvSpec
from .optim import LrSchedule, lr_at
from .policy import PolicyArch, init_params
from .seeding import CANDIDATE, INIT, SAMPLE, derive, root_from

log = logging.getLogger(__name__)

MODES = ("ce-apg", "papg", "cem")


@dataclass
class CemDistribution:
    mean: np.ndarray
    std: np.ndarray
    generation: int = 0

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float)
        self.std = np.asarray(self.std, dtype=float)
        if self.mean.shape != self.std.shape:
            raise ValueError("mean and std must have the same shape")
        if not (np.all(np.isfinite(self.mean)) and np.all(np.isfinite(self.std))):
            raise FloatingPointError("non-finite search distribution")
        if np.any(self.std < 0):
            raise ValueError("std must be >= 0")


@dataclass(frozen=True)
class CemConfig:
    k_a: int = 24
    k_e: int = 8
    generations: int = 200
    sigma0: float = 0.05
    mode: str = "ce-apg"
    apg: ApgConfig = field(default_factory=ApgConfig)
    lr_start: float = 1e-3
    lr_end: float = 1e-6
    inject_mean: bool = False
    workers: int = 1

    def __post_init__(self):
        if not 1 <= self.k_e <= self.k_a:
            raise ValueError("need 1 <= k_e <= k_a")
        if self.generations < 1:
            raise ValueError("generations must be >= 1")
        if self.sigma0 < 0:
            raise ValueError("sigma0 must be >= 0")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")

    @property
    def schedule(self) -> LrSchedule:
        return LrSchedule(self.lr_start, self.lr_end, self.generations)


@dataclass
class GenerationRecord:
    generation: int
    scores: list
    elite_mean: float
    best_so_far: float
    sigma_mean: float
    env_steps: int
    wall_ms: float


def sample_candidates(dist: CemDistribution, k_a: int, rng: np.random.Generator) -> list:
    z = rng.standard_normal((k_a, dist.mean.size))
    return [dist.mean + dist.std * z[i] for i in range(k_a)]


def rank(scores) -> list:
    """Candidate indices by descending score; ties keep index order, non-finite last."""
    keyed = [(-s if np.isfinite(s) else np.inf, i) for i, s in enumerate(scores)]
    return [i for _, i in sorted(keyed)]


def elite_update(dist: CemDistribution, scored: list, k_e: int) -> CemDistribution:
    """Mean of the top ``k_e`` parameter vectors; per-coordinate spread about that new mean."""
    if len(scored) < k_e:
        raise ValueError(f"need at least {k_e} scored candidates, got {len(scored)}")
    order = rank([s for _, s in scored])
    elites = np.stack([np.asarray(scored[i][0], dtype=float) for i in order[:k_e]])
    mean = elites.sum(axis=0) / k_e
    std = np.sqrt(((mean - elites) ** 2).sum(axis=0) / k_e)
    return CemDistribution(mean, std, dist.generation + 1)


# ---------------------------------------------------------------------------
# candidate tasks (top level so worker processes can import them)


def _apg_candidate(task):
    env, arch, theta, apg_cfg, root, path = task
    try:
        return apg_run(env, arch, theta, apg_cfg, derive(root, *path))
    except FloatingPointError as exc:
        log.info("candidate %s failed: %s", path, exc)
        return np.asarray(theta, dtype=float), -np.inf


def _eval_candidate(task):
    env, arch, theta, apg_cfg, root, path = task
    return np.asarray(theta, dtype=float), evaluate(env, arch, theta, derive(root, *path),
                                                    apg_cfg.batch)


def _papg_chunk(task):
    env, arch, theta, adam, apg_cfg, root, path = task
    rng = derive(root, *path)
    score = -np.inf
    try:
        if apg_cfg.epochs == 0:
            return theta, adam, evaluate(env, arch, theta, rng, apg_cfg.batch)
        for _ in range(apg_cfg.epochs):
            theta, adam, score, _ = apg_epoch(env, arch, theta, adam, apg_cfg, rng)
    except FloatingPointError as exc:
        log.info("papg run %s failed: %s", path, exc)
        score = -np.inf
    return theta, adam, score


class _Pool:
    """Ordered map over candidate tasks, in-process or across workers."""

    def __init__(self, workers: int):
        self.ex = ProcessPoolExecutor(workers) if workers > 1 else None

    def map(self, fn, tasks):
        if self.ex is None:
            return [fn(t) for t in tasks]
        return list(self.ex.map(fn, tasks))

    def close(self):
        if self.ex is not None:
            self.ex.shutdown()


def _steps_per_run(env: EnvSpec, apg_cfg: ApgConfig) -> int:
    return max(apg_cfg.epochs, 1) * apg_cfg.batch * env.horizon


def _cem_loop(cfg: CemConfig, mu0: np.ndarray, score_batch: Callable, root: int,
              steps_per_gen: int, on_record: Callable | None,
              on_update: Callable | None = None):
    dist = CemDistribution(mu0, np.full(mu0.size, cfg.sigma0))
    history = []
    best_theta, best_score = mu0.copy(), -np.inf
    steps = 0
    for g in range(cfg.generations):
        t0 = time.perf_counter()
        cands = sample_candidates(dist, cfg.k_a, derive(root, SAMPLE, g))
        if cfg.inject_mean:
            cands[0] = dist.mean.copy()
        scored = score_batch(g, cands)
        scores = [float(s) for _, s in scored]
        order = rank(scores)
        if np.isfinite(scores[order[0]]) and scores[order[0]] > best_score:
            best_score = scores[order[0]]
            best_theta = np.asarray(scored[order[0]][0], dtype=float).copy()
        dist = elite_update(dist, scored, cfg.k_e)
        if on_update is not None:
            on_update(dist)
        steps += steps_per_gen
        elite = [scores[i] for i in order[:cfg.k_e]]
        rec = GenerationRecord(g, scores, float(np.mean(elite)), best_score,
                               float(dist.std.mean()), steps,
                               (time.perf_counter() - t0) * 1e3)
        history.append(rec)
        log.info("gen %d best %.3f elite %.3f sigma %.3g", g, best_score, rec.elite_mean,
                 rec.sigma_mean)
        if on_record is not None:
            on_record(rec)
    return best_theta, history


def cem_maximize(objective: Callable, mu0, cfg: CemConfig, rng: np.random.Generator,
                 on_update: Callable | None = None):
    """Maximise an arbitrary ``objective(theta) -> float`` with the diagonal CEM loop.

    Returns ``(best_theta, history)``; ``on_update`` sees each new distribution.
    """
    root = root_from(rng)
    mu0 = np.asarray(mu0, dtype=float)

    def score_batch(g, cands):
        return [(c, float(objective(c))) for c in cands]

    return _cem_loop(cfg, mu0, score_batch, root, 0, None, on_update)


def ce_apg_train(cfg: CemConfig, env: EnvSpec, arch: PolicyArch, rng: np.random.Generator,
                 on_record: Callable | None = None):
    """CE-APG: every sampled candidate is refined by an APG run before elite selection.

    Returns ``(best_theta, history)``; best_theta is the highest-scoring
    refined candidate seen in any generation.
    """
    root = root_from(rng)
    mu0 = init_params(arch, derive(root, INIT))
    pool = _Pool(cfg.workers)

    def score_batch(g, cands):
        run_cfg = replace(cfg.apg, lr=lr_at(cfg.schedule, g))
        tasks = [(env, arch, c, run_cfg, root, (CANDIDATE, g, i)) for i, c in enumerate(cands)]
        return pool.map(_apg_candidate, tasks)

    try:
        return _cem_loop(cfg, mu0, score_batch, root, cfg.k_a * _steps_per_run(env, cfg.apg),
                         on_record)
    finally:
        pool.close()


def cem_only_train(cfg: CemConfig, env: EnvSpec, arch: PolicyArch, rng: np.random.Generator,
                   on_record: Callable | None = None):
    """Gradient-free ablation: candidates scored by the mean return of N rollouts."""
    root = root_from(rng)
    mu0 = init_params(arch, derive(root, INIT))
    pool = _Pool(cfg.workers)
    eval_cfg = replace(cfg.apg, epochs=0)

    def score_batch(g, cands):
        tasks = [(env, arch, c, eval_cfg, root, (CANDIDATE, g, i)) for i, c in enumerate(cands)]
        return pool.map(_eval_candidate, tasks)

    try:
        return _cem_loop(cfg, mu0, score_batch, root, cfg.k_a * _steps_per_run(env, eval_cfg),
                         on_record)
    finally:
        pool.close()


def papg_train(cfg: CemConfig, env: EnvSpec, arch: PolicyArch, rng: np.random.Generator,
               on_record: Callable | None = None):
    """Parallel-APG ablation: ``k_a`` independent APG runs, best result wins.

    Each run lasts ``generations * apg.epochs`` epochs (the CE-APG budget),
    processed in generation-sized chunks that share the CE-APG learning-rate
    schedule and keep their Adam state.
    """
    root = root_from(rng)
    thetas = [init_params(arch, derive(root, INIT, i)) for i in range(cfg.k_a)]
    adams = [cfg.apg.fresh_adam(th.size) for th in thetas]
    pool = _Pool(cfg.workers)
    history = []
    best_theta, best_score = thetas[0].copy(), -np.inf
    steps = 0
    try:
        for g in range(cfg.generations):
            t0 = time.perf_counter()
            run_cfg = replace(cfg.apg, lr=lr_at(cfg.schedule, g))
            tasks = [(env, arch, thetas[i], adams[i], run_cfg, root, (CANDIDATE, g, i))
                     for i in range(cfg.k_a)]
            results = pool.map(_papg_chunk, tasks)
            thetas = [r[0] for r in results]
            adams = [r[1] for r in results]
            scores = [float(r[2]) for r in results]
            order = rank(scores)
            if np.isfinite(scores[order[0]]) and scores[order[0]] > best_score:
                best_score = scores[order[0]]
                best_theta = np.array(thetas[order[0]])
            steps += cfg.k_a * _steps_per_run(env, cfg.apg)
            top = [scores[i] for i in order[:cfg.k_e]]
            spread = float(np.std(np.stack(thetas), axis=0).mean())
            rec = GenerationRecord(g, scores, float(np.mean(top)), best_score, spread, steps,
                                   (time.perf_counter() - t0) * 1e3)
            history.append(rec)
            log.info("papg gen %d best %.3f", g, best_score)
            if on_record is not None:
                on_record(rec)
    finally:
        pool.close()
    return best_theta, history


TRAINERS = {"ce-apg": ce_apg_train, "papg": papg_train, "cem": cem_only_train}
