"""Differentiable rollouts and the analytic-policy-gradient inner loop."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from numba import njit

from . import autodiff as ad
from .dynamics import ChainState, EnvSpec, IntegrationError, observe_kernel, reset, step_kernel
from .optim import AdamState, adam_step, sanitize_gradient
from .policy import PolicyArch, param_count, policy_kernel

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ApgConfig:
    epochs: int = 100
    batch: int = 4
    lr: float = 1e-3
    clip: float = 10.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def fresh_adam(self, size: int) -> AdamState:
        return AdamState.zeros(size, beta1=self.beta1, beta2=self.beta2, eps=self.eps)

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch < 1:
            raise ValueError("batch must be >= 1")


@dataclass
class RolloutResult:
    ret: float
    grad: np.ndarray | None = None
    trajectory: dict | None = None


@njit(cache=True)
def rollout_kernel(t, p, kind, n_obs, hdim, widths, umax, theta, q0, qd0, horizon,
                   tq, tqd, tu, tr, tobs):
    """Record a full episode; returns (return id, failing step or -1).

    Theta leaves occupy ids 0..P-1.  Trajectory arrays are filled when
    ``tr`` has length ``horizon``; pass empty arrays to skip recording.
    Row k holds the state and observation after transition k.
    """
    P = theta.shape[0]
    th = np.empty(P, np.int64)
    for i in range(P):
        th[i] = ad.leaf(t, theta[i])
    n = q0.shape[0]
    q = np.empty(n, np.int64)
    qd = np.empty(n, np.int64)
    for i in range(n):
        q[i] = ad.leaf(t, q0[i])
        qd[i] = ad.leaf(t, qd0[i])
    zero = ad.leaf(t, 0.0)
    h = np.empty(hdim, np.int64)
    h[:] = zero
    obs = np.empty(n_obs, np.int64)
    observe_kernel(t, p, kind, q, qd, obs)
    total = zero
    record = tr.shape[0] > 0
    for k in range(horizon):
        h_next = np.empty(hdim, np.int64)
        a = policy_kernel(t, n_obs, hdim, widths, umax, th, h, obs, h_next)
        q_next = np.empty(n, np.int64)
        qd_next = np.empty(n, np.int64)
        obs_next = np.empty(n_obs, np.int64)
        r = step_kernel(t, p, kind, q, qd, a, q_next, qd_next, obs_next)
        total = ad.add(t, total, r)
        if t.meta[1] != 0:
            return total, k
        if record:
            for i in range(n):
                tq[k, i] = t.val[q_next[i]]
                tqd[k, i] = t.val[qd_next[i]]
            tu[k] = t.val[a]
            tr[k] = t.val[r]
            for i in range(n_obs):
                tobs[k, i] = t.val[obs_next[i]]
        q = q_next
        qd = qd_next
        obs = obs_next
        h = h_next
    return total, -1


_EMPTY1 = np.empty(0)
_EMPTY2 = np.empty((0, 0))
_node_counts: dict = {}
_buffer: list = []


def _kernel_args(spec: EnvSpec, arch: PolicyArch):
    return (spec.param_array(), spec.code, arch.obs_dim, arch.gru_hidden, arch.widths,
            float(arch.u_max))


def _nodes_needed(spec: EnvSpec, arch: PolicyArch, horizon: int) -> int:
    """Exact tape length of a rollout (the per-step op count is data independent)."""
    key = (spec.code, arch)
    if key not in _node_counts:
        sizes = []
        theta = np.zeros(param_count(arch))
        s0 = spec.nominal_state()
        for hz in (1, 2):
            buf = ad.new_buffer(4 * param_count(arch) + 4096)
            rollout_kernel(buf, *_kernel_args(spec, arch), theta, s0.q, s0.qdot, hz,
                           _EMPTY2, _EMPTY2, _EMPTY1, _EMPTY1, _EMPTY2)
            sizes.append(int(buf.meta[0]))
        per_step = sizes[1] - sizes[0]
        _node_counts[key] = (sizes[0] - per_step, per_step)
    base, per_step = _node_counts[key]
    return base + horizon * per_step


def _tape_for(capacity: int) -> ad.TapeBuf:
    # one reusable buffer per process; a rollout owns it until it returns
    if not _buffer or _buffer[0].val.shape[0] < capacity:
        _buffer[:] = [ad.new_buffer(capacity)]
    buf = _buffer[0]
    ad.reset_buffer(buf)
    return buf


def rollout(spec: EnvSpec, arch: PolicyArch, theta, rng: np.random.Generator | None = None,
            want_grad: bool = False, want_traj: bool = False,
            init_state: ChainState | None = None, horizon: int | None = None) -> RolloutResult:
    """Run one episode from ``reset(spec, rng)`` (or ``init_state``).

    The return is the undiscounted sum of the ``horizon`` step rewards.  With
    ``want_grad`` the whole episode is differentiated by a reverse sweep.
    """
    theta = np.ascontiguousarray(theta, dtype=float)
    P = param_count(arch)
    if theta.shape != (P,):
        raise ValueError(f"theta has shape {theta.shape}, arch needs ({P},)")
    if arch.obs_dim != spec.obs_dim:
        raise ValueError(f"arch obs_dim {arch.obs_dim} != env obs_dim {spec.obs_dim}")
    T = spec.horizon if horizon is None else int(horizon)
    if init_state is None:
        if rng is None:
            raise ValueError("need rng or init_state")
        init_state = reset(spec, rng)
    q0 = np.ascontiguousarray(init_state.q, dtype=float)
    qd0 = np.ascontiguousarray(init_state.qdot, dtype=float)
    n = spec.ndof
    if want_traj:
        tq, tqd = np.zeros((T, n)), np.zeros((T, n))
        tu, tr, tobs = np.zeros(T), np.zeros(T), np.zeros((T, spec.obs_dim))
    else:
        tq = tqd = tobs = _EMPTY2
        tu = tr = _EMPTY1
    buf = _tape_for(_nodes_needed(spec, arch, T))
    total, failed = rollout_kernel(buf, *_kernel_args(spec, arch), theta, q0, qd0, T,
                                   tq, tqd, tu, tr, tobs)
    if failed >= 0:
        raise IntegrationError(int(failed))
    result = RolloutResult(float(buf.val[total]))
    if want_grad:
        adj = np.empty(int(buf.meta[0]))
        ad.backward_kernel(buf.op, buf.args, buf.val, int(total), adj)
        result.grad = adj[:P].copy()
    if want_traj:
        result.trajectory = dict(q=tq, qdot=tqd, action=tu, reward=tr, obs=tobs, dt=spec.dt)
    return result


def batch_gradient(spec: EnvSpec, arch: PolicyArch, theta, starts) -> tuple[float, np.ndarray]:
    """Mean return and mean BPTT gradient over rollouts from ``starts``.

    Rollouts that blow up are skipped; if all do, IntegrationError(-1).
    """
    returns, grads = [], []
    for s0 in starts:
        try:
            res = rollout(spec, arch, theta, want_grad=True, init_state=s0)
        except IntegrationError as exc:
            log.debug("rollout failed: %s", exc)
            continue
        returns.append(res.ret)
        grads.append(res.grad)
    if not returns:
        raise IntegrationError(-1, f"all {len(starts)} rollouts failed")
    return float(np.mean(returns)), np.sum(grads, axis=0) / len(grads)


def apg_epoch(spec: EnvSpec, arch: PolicyArch, theta, adam: AdamState, cfg: ApgConfig,
              rng: np.random.Generator):
    """N rollouts, averaged BPTT gradient, clip, one Adam ascent step.

    Returns ``(theta_next, adam_next, mean_return, grad_norm)`` where
    ``grad_norm`` is measured before clipping.
    """
    starts = [reset(spec, rng) for _ in range(cfg.batch)]
    mean_return, grad = batch_gradient(spec, arch, theta, starts)
    grad, n_bad = sanitize_gradient(grad, None)
    if n_bad:
        log.info("zeroed %d non-finite gradient entries", n_bad)
    norm = float(np.linalg.norm(grad))
    grad, _ = sanitize_gradient(grad, cfg.clip)
    theta_next, adam_next = adam_step(adam, theta, grad, cfg.lr)
    return theta_next, adam_next, mean_return, norm


def evaluate(spec: EnvSpec, arch: PolicyArch, theta, rng: np.random.Generator, n: int) -> float:
    """Mean return of ``n`` fresh rollouts (no gradients)."""
    rets = []
    for _ in range(n):
        try:
            rets.append(rollout(spec, arch, theta, rng).ret)
        except IntegrationError:
            pass
    return float(np.mean(rets)) if rets else -np.inf


def apg_run(spec: EnvSpec, arch: PolicyArch, theta0, cfg: ApgConfig,
            rng: np.random.Generator):
    """``cfg.epochs`` APG epochs from theta0.

    Returns ``(theta_final, score)`` with score the mean return of the last
    epoch's batch (or of an evaluation batch when ``epochs == 0``).
    """
    theta = np.array(theta0, dtype=float)
    if cfg.epochs == 0:
        return theta, evaluate(spec, arch, theta, rng, cfg.batch)
    adam = cfg.fresh_adam(theta.size)
    score = -np.inf
    for _ in range(cfg.epochs):
        theta, adam, score, _ = apg_epoch(spec, arch, theta, adam, cfg, rng)
    return theta, score
