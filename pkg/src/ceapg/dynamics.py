"""Differentiable planar-chain environments: cartpole, acrobot, double cartpole.

All three obey ``M(q) q'' + C(q, q') q' + G(q) = B u``.  Angles are measured
from the upright position (phi = 0 is straight up, y axis up), positions in
metres.  The second link angle of the acrobot and the double cartpole is
relative to the first link.  Links are uniform rods unless overridden.

The tape kernels (``*_kernel``) record every arithmetic step on a
:class:`ceapg.autodiff.TapeBuf`; the Python functions below wrap them for
plain floats or for VarIds on a caller-supplied :class:`~ceapg.autodiff.Tape`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from numba import njit

from . import autodiff as ad
from .autodiff import Tape

CARTPOLE = 0
ACROBOT = 1
DOUBLE_CARTPOLE = 2

ENV_KINDS = {"cartpole": CARTPOLE, "acrobot": ACROBOT, "double_cartpole": DOUBLE_CARTPOLE}
NDOF = {CARTPOLE: 2, ACROBOT: 2, DOUBLE_CARTPOLE: 3}
OBS_DIM = {CARTPOLE: 4, ACROBOT: 4, DOUBLE_CARTPOLE: 8}

# layout of the flat parameter vector handed to the kernels
P_CART, P_M1, P_M2, P_L1, P_L2, P_LC1, P_LC2, P_I1, P_I2 = range(9)
P_G, P_UMAX, P_DT, P_ALIVE, P_WX, P_WY, P_YDES = range(9, 16)
N_PARAMS = 16

TWO_PI = 2.0 * math.pi


class IntegrationError(FloatingPointError):
    def __init__(self, step: int, detail: str = "non-finite state"):
        self.step = step
        super().__init__(f"{detail} at step {step}")


@dataclass(frozen=True)
class EnvSpec:
    """Physical and task parameters of one environment.

    ``masses``, ``lengths``, ``com`` and ``inertias`` are per link; ``com`` is
    the pivot-to-centre-of-mass distance and ``inertias`` are about the
    centre of mass.  ``cart_mass`` is ignored by the acrobot.
    """

    kind: str
    masses: tuple
    lengths: tuple
    com: tuple
    inertias: tuple
    cart_mass: float = 1.0
    gravity: float = 9.81
    u_max: float = 10.0
    dt: float = 0.02
    horizon: int = 500
    init_noise: float = 0.1
    alive_bonus: float = 10.0
    dist_weight_x: float = 0.05
    dist_weight_y: float = 1.0
    y_des: float | None = None

    def __post_init__(self):
        if self.kind not in ENV_KINDS:
            raise ValueError(f"unknown env kind {self.kind!r}")
        n = 1 if self.kind == "cartpole" else 2
        for name in ("masses", "lengths", "com", "inertias"):
            vals = getattr(self, name)
            if len(vals) != n:
                raise ValueError(f"{self.kind} needs {n} {name}, got {len(vals)}")
            if any(not v > 0 for v in vals):
                raise ValueError(f"{name} must be positive")
        if self.kind != "acrobot" and not self.cart_mass > 0:
            raise ValueError("cart_mass must be positive")
        if not (self.gravity > 0 and self.u_max > 0 and self.dt > 0):
            raise ValueError("gravity, u_max and dt must be positive")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.init_noise < 0:
            raise ValueError("init_noise must be >= 0")

    @property
    def code(self) -> int:
        return ENV_KINDS[self.kind]

    @property
    def ndof(self) -> int:
        return NDOF[self.code]

    @property
    def obs_dim(self) -> int:
        return OBS_DIM[self.code]

    @property
    def goal_height(self) -> float:
        return sum(self.lengths) if self.y_des is None else self.y_des

    def param_array(self) -> np.ndarray:
        p = np.zeros(N_PARAMS)
        m = list(self.masses) + [0.0]
        l = list(self.lengths) + [0.0]
        c = list(self.com) + [0.0]
        i = list(self.inertias) + [0.0]
        p[P_CART] = self.cart_mass
        p[P_M1], p[P_M2] = m[0], m[1]
        p[P_L1], p[P_L2] = l[0], l[1]
        p[P_LC1], p[P_LC2] = c[0], c[1]
        p[P_I1], p[P_I2] = i[0], i[1]
        p[P_G] = self.gravity
        p[P_UMAX] = self.u_max
        p[P_DT] = self.dt
        p[P_ALIVE] = self.alive_bonus
        p[P_WX] = self.dist_weight_x
        p[P_WY] = self.dist_weight_y
        p[P_YDES] = self.goal_height
        return p

    def nominal_state(self) -> "ChainState":
        q = {"cartpole": [0.0, math.pi], "acrobot": [math.pi, 0.0],
             "double_cartpole": [0.0, math.pi, 0.0]}[self.kind]
        return ChainState(np.array(q), np.zeros(self.ndof))


def _rods(masses, lengths):
    return dict(
        masses=tuple(masses),
        lengths=tuple(lengths),
        com=tuple(0.5 * l for l in lengths),
        inertias=tuple(m * l * l / 12.0 for m, l in zip(masses, lengths)),
    )


def make_env(kind: str, **overrides) -> EnvSpec:
    """Default environment of the given kind, with keyword overrides."""
    if kind == "cartpole":
        spec = EnvSpec("cartpole", cart_mass=1.0, u_max=10.0, **_rods([0.1], [1.0]))
    elif kind == "acrobot":
        spec = EnvSpec("acrobot", cart_mass=1.0, u_max=4.0, **_rods([1.0, 1.0], [1.0, 1.0]))
    elif kind == "double_cartpole":
        spec = EnvSpec("double_cartpole", cart_mass=1.0, u_max=10.0,
                       **_rods([0.5, 0.5], [0.5, 0.5]))
    else:
        raise ValueError(f"unknown env kind {kind!r}")
    return replace(spec, **overrides) if overrides else spec


@dataclass
class ChainState:
    """Generalised coordinates and velocities.

    Holds floats, or VarIds when used with an explicit tape.
    """

    q: np.ndarray
    qdot: np.ndarray

    def copy(self) -> "ChainState":
        return ChainState(self.q.copy(), self.qdot.copy())


@dataclass
class DynamicsTerms:
    M: np.ndarray
    Cqdot: np.ndarray
    G: np.ndarray
    B: np.ndarray = field(default=None)


# ---------------------------------------------------------------------------
# float helpers


@njit(cache=True)
def wrap_shift(x):
    """Multiple of 2*pi to subtract so that x lands in (-pi, pi]."""
    if -math.pi < x <= math.pi:
        return 0.0
    k = math.ceil((x - math.pi) / TWO_PI)
    y = x - TWO_PI * k
    if y <= -math.pi:
        k -= 1.0
    elif y > math.pi:
        k += 1.0
    return TWO_PI * k


def wrap(x):
    """Map angles to (-pi, pi]."""
    if np.ndim(x) == 0:
        return float(x) - wrap_shift(float(x))
    x = np.asarray(x, dtype=float)
    return np.array([v - wrap_shift(v) for v in x.ravel()]).reshape(x.shape)


# ---------------------------------------------------------------------------
# tape kernels


@njit(cache=True)
def _c(t, v):
    return ad.leaf(t, v)


@njit(cache=True)
def wrap_kernel(t, a):
    return ad.sub(t, a, ad.leaf(t, wrap_shift(t.val[a])))


@njit(cache=True)
def terms_kernel(t, p, kind, q, qd, M, cq, G):
    """Fill id arrays M (n x n), cq (n), G (n) for the state (q, qd)."""
    g = p[P_G]
    m1 = p[P_M1]
    m2 = p[P_M2]
    l1 = p[P_L1]
    lc1 = p[P_LC1]
    lc2 = p[P_LC2]
    i1 = p[P_I1]
    i2 = p[P_I2]
    if kind == CARTPOLE:
        phi = q[1]
        s = ad.sin(t, phi)
        c = ad.cos(t, phi)
        M[0, 0] = _c(t, p[P_CART] + m1)
        M[0, 1] = ad.mul(t, _c(t, m1 * lc1), c)
        M[1, 0] = M[0, 1]
        M[1, 1] = _c(t, m1 * lc1 * lc1 + i1)
        cq[0] = ad.mul(t, _c(t, -m1 * lc1), ad.mul(t, s, ad.square(t, qd[1])))
        cq[1] = _c(t, 0.0)
        G[0] = _c(t, 0.0)
        G[1] = ad.mul(t, _c(t, -m1 * g * lc1), s)
        return
    # two-link chain; offset 1 when a cart coordinate precedes the angles
    o = 0 if kind == ACROBOT else 1
    phi1 = q[o]
    phi2 = q[o + 1]
    w1 = qd[o]
    w2 = qd[o + 1]
    a = m1 * lc1 + m2 * l1
    b = m2 * lc2
    h = m2 * l1 * lc2
    s1 = ad.sin(t, phi1)
    s2 = ad.sin(t, phi2)
    c2 = ad.cos(t, phi2)
    p12 = ad.add(t, phi1, phi2)
    s12 = ad.sin(t, p12)
    hc2 = ad.mul(t, _c(t, h), c2)
    hs2 = ad.mul(t, _c(t, h), s2)
    M[o, o] = ad.add(t, _c(t, m1 * lc1 * lc1 + m2 * (l1 * l1 + lc2 * lc2) + i1 + i2),
                     ad.add(t, hc2, hc2))
    M[o, o + 1] = ad.add(t, _c(t, m2 * lc2 * lc2 + i2), hc2)
    M[o + 1, o] = M[o, o + 1]
    M[o + 1, o + 1] = _c(t, m2 * lc2 * lc2 + i2)
    # -h s2 (2 w1 w2 + w2^2) and h s2 w1^2
    w1w2 = ad.mul(t, w1, w2)
    cq[o] = ad.neg(t, ad.mul(t, hs2, ad.add(t, ad.add(t, w1w2, w1w2), ad.square(t, w2))))
    cq[o + 1] = ad.mul(t, hs2, ad.square(t, w1))
    gs12 = ad.mul(t, _c(t, -g * b), s12)
    G[o] = ad.add(t, ad.mul(t, _c(t, -g * a), s1), gs12)
    G[o + 1] = gs12
    if kind == DOUBLE_CARTPOLE:
        c1 = ad.cos(t, phi1)
        c12 = ad.cos(t, p12)
        bc12 = ad.mul(t, _c(t, b), c12)
        M[0, 0] = _c(t, p[P_CART] + m1 + m2)
        M[0, 1] = ad.add(t, ad.mul(t, _c(t, a), c1), bc12)
        M[0, 2] = bc12
        M[1, 0] = M[0, 1]
        M[2, 0] = M[0, 2]
        # -a s1 w1^2 - b s12 (w1 + w2)^2
        cq[0] = ad.neg(t, ad.add(t, ad.mul(t, ad.mul(t, _c(t, a), s1), ad.square(t, w1)),
                                 ad.mul(t, ad.mul(t, _c(t, b), s12),
                                        ad.square(t, ad.add(t, w1, w2)))))
        G[0] = _c(t, 0.0)


@njit(cache=True)
def solve_kernel(t, M, r, out):
    """out = M^-1 r for symmetric 2x2 or 3x3 M by the adjugate (Cramer)."""
    n = r.shape[0]
    if n == 2:
        det = ad.sub(t, ad.mul(t, M[0, 0], M[1, 1]), ad.square(t, M[0, 1]))
        out[0] = ad.div(t, ad.sub(t, ad.mul(t, r[0], M[1, 1]), ad.mul(t, M[0, 1], r[1])), det)
        out[1] = ad.div(t, ad.sub(t, ad.mul(t, M[0, 0], r[1]), ad.mul(t, M[0, 1], r[0])), det)
        return
    c00 = ad.sub(t, ad.mul(t, M[1, 1], M[2, 2]), ad.square(t, M[1, 2]))
    c01 = ad.sub(t, ad.mul(t, M[1, 2], M[0, 2]), ad.mul(t, M[0, 1], M[2, 2]))
    c02 = ad.sub(t, ad.mul(t, M[0, 1], M[1, 2]), ad.mul(t, M[1, 1], M[0, 2]))
    c11 = ad.sub(t, ad.mul(t, M[0, 0], M[2, 2]), ad.square(t, M[0, 2]))
    c12 = ad.sub(t, ad.mul(t, M[0, 1], M[0, 2]), ad.mul(t, M[0, 0], M[1, 2]))
    c22 = ad.sub(t, ad.mul(t, M[0, 0], M[1, 1]), ad.square(t, M[0, 1]))
    det = ad.add(t, ad.add(t, ad.mul(t, M[0, 0], c00), ad.mul(t, M[0, 1], c01)),
                 ad.mul(t, M[0, 2], c02))
    x0 = ad.add(t, ad.add(t, ad.mul(t, c00, r[0]), ad.mul(t, c01, r[1])), ad.mul(t, c02, r[2]))
    x1 = ad.add(t, ad.add(t, ad.mul(t, c01, r[0]), ad.mul(t, c11, r[1])), ad.mul(t, c12, r[2]))
    x2 = ad.add(t, ad.add(t, ad.mul(t, c02, r[0]), ad.mul(t, c12, r[1])), ad.mul(t, c22, r[2]))
    out[0] = ad.div(t, x0, det)
    out[1] = ad.div(t, x1, det)
    out[2] = ad.div(t, x2, det)


@njit(cache=True)
def tips_kernel(t, p, kind, q, out):
    """World (x, y) of each link end: out = [x1, y1, x2, y2] (len 2*links)."""
    o = 0 if kind == ACROBOT else 1
    phi1 = q[o]
    x1 = ad.mul(t, _c(t, p[P_L1]), ad.sin(t, phi1))
    if o == 1:
        x1 = ad.add(t, q[0], x1)
    y1 = ad.mul(t, _c(t, p[P_L1]), ad.cos(t, phi1))
    out[0] = x1
    out[1] = y1
    if kind != CARTPOLE:
        p12 = ad.add(t, phi1, q[o + 1])
        out[2] = ad.add(t, x1, ad.mul(t, _c(t, p[P_L2]), ad.sin(t, p12)))
        out[3] = ad.add(t, y1, ad.mul(t, _c(t, p[P_L2]), ad.cos(t, p12)))


@njit(cache=True)
def observe_kernel(t, p, kind, q, qd, obs):
    if kind == CARTPOLE:
        obs[0] = q[0]
        obs[1] = qd[0]
        obs[2] = wrap_kernel(t, q[1])
        obs[3] = qd[1]
    elif kind == ACROBOT:
        obs[0] = wrap_kernel(t, q[0])
        obs[1] = wrap_kernel(t, q[1])
        obs[2] = qd[0]
        obs[3] = qd[1]
    else:
        tips = np.empty(4, np.int64)
        tips_kernel(t, p, kind, q, tips)
        obs[0] = q[0]
        obs[1] = qd[0]
        obs[2] = tips[0]
        obs[3] = tips[1]
        obs[4] = tips[2]
        obs[5] = tips[3]
        obs[6] = qd[1]
        obs[7] = qd[2]


@njit(cache=True)
def reward_kernel(t, p, kind, q, qd, u):
    # u is unused by all three rewards; kept for the r(s, a, s') signature
    if kind == CARTPOLE:
        return ad.neg(t, ad.square(t, wrap_kernel(t, q[1])))
    if kind == ACROBOT:
        return ad.neg(t, ad.add(t, ad.square(t, wrap_kernel(t, q[0])),
                                ad.square(t, wrap_kernel(t, q[1]))))
    tips = np.empty(4, np.int64)
    tips_kernel(t, p, kind, q, tips)
    dist = ad.add(t, ad.mul(t, _c(t, p[P_WX]), ad.square(t, tips[2])),
                  ad.mul(t, _c(t, p[P_WY]), ad.square(t, ad.sub(t, tips[3], _c(t, p[P_YDES])))))
    vel = ad.add(t, qd[1], qd[2])
    return ad.sub(t, ad.sub(t, _c(t, p[P_ALIVE]), dist), vel)


@njit(cache=True)
def step_kernel(t, p, kind, q, qd, u, q_out, qd_out, obs_out):
    """One semi-implicit Euler step; returns the reward id."""
    n = q.shape[0]
    M = np.empty((n, n), np.int64)
    cq = np.empty(n, np.int64)
    G = np.empty(n, np.int64)
    terms_kernel(t, p, kind, q, qd, M, cq, G)
    umax = p[P_UMAX]
    uc = ad.clamp(t, u, _c(t, -umax), _c(t, umax))
    act = 1 if kind == ACROBOT else 0
    rhs = np.empty(n, np.int64)
    for i in range(n):
        f = ad.neg(t, ad.add(t, cq[i], G[i]))
        if i == act:
            f = ad.add(t, f, uc)
        rhs[i] = f
    qdd = np.empty(n, np.int64)
    solve_kernel(t, M, rhs, qdd)
    dt = _c(t, p[P_DT])
    for i in range(n):
        qd_out[i] = ad.add(t, qd[i], ad.mul(t, dt, qdd[i]))
    for i in range(n):
        q_out[i] = ad.add(t, q[i], ad.mul(t, dt, qd_out[i]))
    r = reward_kernel(t, p, kind, q_out, qd_out, uc)
    observe_kernel(t, p, kind, q_out, qd_out, obs_out)
    return r


# ---------------------------------------------------------------------------
# Python surface

_SCRATCH = 4096


def _float_leaves(tape: Tape, values) -> np.ndarray:
    return np.array([tape.leaf(v) for v in np.asarray(values, dtype=float)], dtype=np.int64)


def _check_finite(state: ChainState):
    if not (np.all(np.isfinite(state.q)) and np.all(np.isfinite(state.qdot))):
        raise ValueError("state must be finite")


def actuation(spec: EnvSpec) -> np.ndarray:
    B = np.zeros(spec.ndof)
    B[1 if spec.kind == "acrobot" else 0] = 1.0
    return B


def terms(spec: EnvSpec, state: ChainState) -> DynamicsTerms:
    """Float M, C(q, q')q', G and B at ``state``."""
    _check_finite(state)
    n = spec.ndof
    tape = Tape(_SCRATCH)
    q = _float_leaves(tape, state.q)
    qd = _float_leaves(tape, state.qdot)
    M = np.empty((n, n), np.int64)
    cq = np.empty(n, np.int64)
    G = np.empty(n, np.int64)
    terms_kernel(tape.reserve(_SCRATCH), spec.param_array(), spec.code, q, qd, M, cq, G)
    return DynamicsTerms(tape.values(M), tape.values(cq), tape.values(G), actuation(spec))


def step(spec: EnvSpec, state: ChainState, action, tape: Tape | None = None):
    """Advance one timestep; returns ``(next_state, reward, observation)``.

    Without ``tape`` everything is float.  With ``tape``, ``state`` must hold
    VarIds on it (``action`` too) and VarIds are returned.
    """
    n = spec.ndof
    if tape is None:
        _check_finite(state)
        if not math.isfinite(float(action)):
            raise ValueError("action must be finite")
        work = Tape(_SCRATCH)
        q = _float_leaves(work, state.q)
        qd = _float_leaves(work, state.qdot)
        u = work.leaf(action)
    else:
        work = tape
        q = np.asarray(state.q, dtype=np.int64)
        qd = np.asarray(state.qdot, dtype=np.int64)
        u = int(action)
    q_out = np.empty(n, np.int64)
    qd_out = np.empty(n, np.int64)
    obs = np.empty(spec.obs_dim, np.int64)
    r = int(step_kernel(work.reserve(_SCRATCH), spec.param_array(), spec.code, q, qd, u,
                        q_out, qd_out, obs))
    vals = work.values(np.concatenate([q_out, qd_out]))
    if not np.all(np.isfinite(vals)) or not math.isfinite(work.value(r)):
        raise IntegrationError(0)
    if tape is not None:
        return ChainState(q_out, qd_out), r, obs
    return ChainState(vals[:n], vals[n:]), work.value(r), work.values(obs)


def reward(spec: EnvSpec, next_state: ChainState, action: float = 0.0) -> float:
    _check_finite(next_state)
    tape = Tape(_SCRATCH)
    q = _float_leaves(tape, next_state.q)
    qd = _float_leaves(tape, next_state.qdot)
    u = tape.leaf(action)
    r = reward_kernel(tape.reserve(_SCRATCH), spec.param_array(), spec.code, q, qd, u)
    return tape.value(r)


def observe(spec: EnvSpec, state: ChainState) -> np.ndarray:
    _check_finite(state)
    tape = Tape(_SCRATCH)
    q = _float_leaves(tape, state.q)
    qd = _float_leaves(tape, state.qdot)
    obs = np.empty(spec.obs_dim, np.int64)
    observe_kernel(tape.reserve(_SCRATCH), spec.param_array(), spec.code, q, qd, obs)
    return tape.values(obs)


def reset(spec: EnvSpec, rng: np.random.Generator) -> ChainState:
    """Hanging start plus uniform noise of ``spec.init_noise`` on q and q'."""
    nominal = spec.nominal_state()
    s = spec.init_noise
    if s == 0:
        return nominal
    n = spec.ndof
    return ChainState(nominal.q + rng.uniform(-s, s, n), nominal.qdot + rng.uniform(-s, s, n))


def potential_energy(spec: EnvSpec, q) -> float:
    """Gravitational potential with zero at the pivot (cart rail) height."""
    g = spec.gravity
    if spec.kind == "cartpole":
        return spec.masses[0] * g * spec.com[0] * math.cos(q[1])
    o = 0 if spec.kind == "acrobot" else 1
    m1, m2 = spec.masses
    y1 = spec.com[0] * math.cos(q[o])
    y2 = spec.lengths[0] * math.cos(q[o]) + spec.com[1] * math.cos(q[o] + q[o + 1])
    return g * (m1 * y1 + m2 * y2)


def total_energy(spec: EnvSpec, state: ChainState) -> float:
    M = terms(spec, state).M
    qd = np.asarray(state.qdot, dtype=float)
    return 0.5 * float(qd @ M @ qd) + potential_energy(spec, state.q)
