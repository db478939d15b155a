"""Deterministic GRU + fully connected controller over a flat parameter vector.

Packing order of theta (all matrices row-major, gates ordered z, r, n):

1. GRU input weights   W[3, hidden, obs_dim]
2. GRU recurrent weights U[3, hidden, hidden]
3. GRU biases          b[3, hidden]          (one bias per gate)
4. for each FC layer:  W[out, in] then b[out]

The hidden FC layers use relu, the last one tanh; the action is
``u_max * tanh(.)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numba import njit

from . import autodiff as ad
from .autodiff import Tape


@dataclass(frozen=True)
class PolicyArch:
    obs_dim: int
    gru_hidden: int
    fc_layers: tuple  # widths, first == gru_hidden, last == 1
    u_max: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "fc_layers", tuple(int(w) for w in self.fc_layers))
        if self.obs_dim < 1 or self.gru_hidden < 1:
            raise ValueError("obs_dim and gru_hidden must be >= 1")
        if len(self.fc_layers) < 2 or self.fc_layers[-1] != 1:
            raise ValueError("fc_layers must have at least two widths and end in 1")
        if self.fc_layers[0] != self.gru_hidden:
            raise ValueError("first fc width must equal gru_hidden")
        if any(w < 1 for w in self.fc_layers):
            raise ValueError("fc widths must be >= 1")
        if not self.u_max > 0:
            raise ValueError("u_max must be positive")

    @property
    def widths(self) -> np.ndarray:
        return np.asarray(self.fc_layers, dtype=np.int64)

    def header(self) -> str:
        fc = ",".join(str(w) for w in self.fc_layers)
        return (f"obs_dim={self.obs_dim} gru_hidden={self.gru_hidden} "
                f"fc_layers={fc} u_max={self.u_max!r}")


def default_arch(env) -> PolicyArch:
    """Default architecture for an :class:`EnvSpec`."""
    if env.kind == "double_cartpole":
        return PolicyArch(env.obs_dim, 6, (6, 32, 32, 1), env.u_max)
    return PolicyArch(env.obs_dim, 4, (4, 16, 16, 1), env.u_max)


def param_count(arch: PolicyArch) -> int:
    h, n = arch.gru_hidden, arch.obs_dim
    fc = arch.fc_layers
    return 3 * (h * n + h * h + h) + sum(a * b + b for a, b in zip(fc[:-1], fc[1:]))


def unpack(arch: PolicyArch, theta: np.ndarray) -> dict:
    """Views of theta as named weight arrays."""
    theta = np.asarray(theta)
    if theta.shape != (param_count(arch),):
        raise ValueError(f"theta has shape {theta.shape}, expected ({param_count(arch)},)")
    h, n = arch.gru_hidden, arch.obs_dim
    out = {}
    k = 0
    for name, shape in (("W", (3, h, n)), ("U", (3, h, h)), ("b", (3, h))):
        size = int(np.prod(shape))
        out[name] = theta[k:k + size].reshape(shape)
        k += size
    fc = arch.fc_layers
    for i, (a, b) in enumerate(zip(fc[:-1], fc[1:])):
        out[f"fc{i}.W"] = theta[k:k + a * b].reshape(b, a)
        k += a * b
        out[f"fc{i}.b"] = theta[k:k + b]
        k += b
    return out


def pack(arch: PolicyArch, parts: dict) -> np.ndarray:
    names = ["W", "U", "b"]
    for i in range(len(arch.fc_layers) - 1):
        names += [f"fc{i}.W", f"fc{i}.b"]
    return np.concatenate([np.asarray(parts[k], dtype=float).ravel() for k in names])


def init_params(arch: PolicyArch, rng: np.random.Generator) -> np.ndarray:
    """Weights uniform in +-1/sqrt(fan_in), biases zero."""
    theta = np.zeros(param_count(arch))
    parts = unpack(arch, theta)
    h, n = arch.gru_hidden, arch.obs_dim
    parts["W"][...] = rng.uniform(-1, 1, (3, h, n)) / math.sqrt(n)
    parts["U"][...] = rng.uniform(-1, 1, (3, h, h)) / math.sqrt(h)
    fc = arch.fc_layers
    for i, (a, b) in enumerate(zip(fc[:-1], fc[1:])):
        parts[f"fc{i}.W"][...] = rng.uniform(-1, 1, (b, a)) / math.sqrt(a)
    return theta


# ---------------------------------------------------------------------------
# tape kernel


@njit(cache=True)
def policy_kernel(t, n, hdim, widths, umax, th, h, obs, h_out):
    """Record one controller step; returns the action id and fills h_out."""
    ow = 0
    ou = 3 * hdim * n
    ob = ou + 3 * hdim * hdim
    z = np.empty(hdim, np.int64)
    r = np.empty(hdim, np.int64)
    for g in range(2):
        for i in range(hdim):
            acc = ad.dot(t, th[ow + (g * hdim + i) * n: ow + (g * hdim + i + 1) * n], obs)
            acc = ad.add(t, acc, ad.dot(t, th[ou + (g * hdim + i) * hdim:
                                              ou + (g * hdim + i + 1) * hdim], h))
            acc = ad.add(t, acc, th[ob + g * hdim + i])
            if g == 0:
                z[i] = ad.sigmoid(t, acc)
            else:
                r[i] = ad.sigmoid(t, acc)
    rh = np.empty(hdim, np.int64)
    for j in range(hdim):
        rh[j] = ad.mul(t, r[j], h[j])
    one = ad.leaf(t, 1.0)
    for i in range(hdim):
        acc = ad.dot(t, th[ow + (2 * hdim + i) * n: ow + (2 * hdim + i + 1) * n], obs)
        acc = ad.add(t, acc, ad.dot(t, th[ou + (2 * hdim + i) * hdim:
                                          ou + (2 * hdim + i + 1) * hdim], rh))
        cand = ad.tanh(t, ad.add(t, acc, th[ob + 2 * hdim + i]))
        keep = ad.mul(t, ad.sub(t, one, z[i]), h[i])
        h_out[i] = ad.add(t, keep, ad.mul(t, z[i], cand))
    k = ob + 3 * hdim
    x = h_out.copy()
    nl = widths.shape[0] - 1
    for layer in range(nl):
        a = widths[layer]
        b = widths[layer + 1]
        y = np.empty(b, np.int64)
        for i in range(b):
            acc = ad.add(t, ad.dot(t, th[k + i * a: k + (i + 1) * a], x), th[k + a * b + i])
            if layer < nl - 1:
                y[i] = ad.relu(t, acc)
            else:
                y[i] = ad.tanh(t, acc)
        k += a * b + b
        x = y
    return ad.mul(t, ad.leaf(t, umax), x[0])


# ---------------------------------------------------------------------------
# Python surface


def forward(arch: PolicyArch, theta, h, obs, tape: Tape | None = None):
    """One controller step, returning ``(action, h_next)``.

    With ``tape``, theta, h and obs are arrays of VarIds and VarIds come back.
    """
    P = param_count(arch)
    theta, h, obs = np.asarray(theta), np.asarray(h), np.asarray(obs)
    if theta.shape != (P,) or h.shape != (arch.gru_hidden,) or obs.shape != (arch.obs_dim,):
        raise ValueError(
            f"dimension mismatch: theta {theta.shape}, h {h.shape}, obs {obs.shape} "
            f"for arch ({P},), ({arch.gru_hidden},), ({arch.obs_dim},)")
    if tape is None:
        work = Tape(P + 4 * _step_bound(arch))
        ids = [np.array([work.leaf(v) for v in arr], dtype=np.int64)
               for arr in (theta.astype(float), h.astype(float), obs.astype(float))]
    else:
        work = tape
        ids = [arr.astype(np.int64) for arr in (theta, h, obs)]
    h_out = np.empty(arch.gru_hidden, np.int64)
    buf = work.reserve(_step_bound(arch))
    a = int(policy_kernel(buf, arch.obs_dim, arch.gru_hidden, arch.widths, float(arch.u_max),
                          ids[0], ids[1], ids[2], h_out))
    ad.raise_if_failed(buf)
    if tape is not None:
        return a, h_out
    return work.value(a), work.values(h_out)


def _step_bound(arch: PolicyArch) -> int:
    # generous node bound for one controller step
    return 4 * param_count(arch) + 64


def save_policy(path, arch: PolicyArch, theta) -> None:
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (param_count(arch),):
        raise ValueError("theta does not match arch")
    lines = [arch.header()] + [f"{v:.17g}" for v in theta]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_policy(path) -> tuple[PolicyArch, np.ndarray]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines:
        raise ValueError(f"{path}: empty policy file")
    fields = dict(item.split("=", 1) for item in lines[0].split())
    try:
        arch = PolicyArch(
            obs_dim=int(fields["obs_dim"]),
            gru_hidden=int(fields["gru_hidden"]),
            fc_layers=tuple(int(w) for w in fields["fc_layers"].split(",")),
            u_max=float(fields["u_max"]),
        )
    except KeyError as exc:
        raise ValueError(f"{path}: header missing {exc}") from None
    theta = np.array([float(s) for s in lines[1:] if s.strip()])
    if theta.shape != (param_count(arch),):
        raise ValueError(f"{path}: {theta.size} parameters, arch needs {param_count(arch)}")
    return arch, theta
