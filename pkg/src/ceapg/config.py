"""Flat ``key = value`` run configuration.

Lines are ``dotted.key = value``; ``#`` starts a comment.  Command-line
``--set key=value`` pairs are applied on top of the file.  Every key has a
default; :func:`dump` writes the complete effective configuration, which
parses back to the same :class:`RunConfig`.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from .apg import ApgConfig
from .cem import MODES, CemConfig
from .dynamics import ENV_KINDS, EnvSpec, make_env
from .policy import PolicyArch, default_arch


class ConfigError(ValueError):
    pass


def _floats(s: str) -> tuple:
    return tuple(float(v) for v in s.replace(" ", "").split(",") if v)


def _ints(s: str) -> tuple:
    return tuple(int(v) for v in s.replace(" ", "").split(",") if v)


def _bool(s: str) -> bool:
    low = s.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {s!r}")


def _opt_float(s: str):
    return None if s.strip().lower() in ("", "none", "auto") else float(s)


# key -> parser; env.* and policy.* defaults depend on the env kind
KEYS = {
    "env": str,
    "mode": str,
    "master_seed": int,
    "seeds": _ints,
    "out": str,
    "workers": int,
    "log.wall_time": _bool,
    "env.horizon": int,
    "env.dt": float,
    "env.u_max": float,
    "env.gravity": float,
    "env.cart_mass": float,
    "env.masses": _floats,
    "env.lengths": _floats,
    "env.com": _floats,
    "env.inertias": _floats,
    "env.init_noise": float,
    "env.alive_bonus": float,
    "env.dist_weight_x": float,
    "env.dist_weight_y": float,
    "env.y_des": _opt_float,
    "policy.gru_hidden": int,
    "policy.fc_layers": lambda s: tuple(int(v) for v in s.lower().split("x")),
    "apg.epochs": int,
    "apg.batch": int,
    "apg.clip": float,
    "optim.beta1": float,
    "optim.beta2": float,
    "optim.eps": float,
    "lr.start": float,
    "lr.end": float,
    "cem.k_a": int,
    "cem.k_e": int,
    "cem.generations": int,
    "cem.sigma0": float,
    "cem.inject_mean": _bool,
    "cem.budget_match": _bool,
    "eval.rollouts": int,
    "eval.balance_tol": float,
    "eval.balance_window": int,
    "landscape.half_range": float,
    "landscape.samples": int,
    "landscape.direction_seed": int,
    "gradcheck.horizon": int,
    "gradcheck.coords": int,
    "gradcheck.threshold": float,
}

BASE_DEFAULTS = {
    "env": "acrobot",
    "mode": "ce-apg",
    "master_seed": 0,
    "seeds": (0,),
    "out": "runs/out",
    "workers": 1,
    "log.wall_time": False,
    "apg.epochs": 100,
    "apg.batch": 4,
    "apg.clip": 10.0,
    "optim.beta1": 0.9,
    "optim.beta2": 0.999,
    "optim.eps": 1e-8,
    "lr.start": 1e-3,
    "lr.end": 1e-6,
    "cem.k_a": 24,
    "cem.k_e": 8,
    "cem.generations": 200,
    "cem.sigma0": 0.05,
    "cem.inject_mean": False,
    "cem.budget_match": True,
    "eval.rollouts": 10,
    "eval.balance_tol": 0.2,
    "eval.balance_window": 100,
    "landscape.half_range": 1.0,
    "landscape.samples": 101,
    "landscape.direction_seed": 0,
    "gradcheck.horizon": 50,
    "gradcheck.coords": 20,
    "gradcheck.threshold": 1e-4,
}


def _env_defaults(kind: str) -> dict:
    spec = make_env(kind)
    arch = default_arch(spec)
    return {
        "env.horizon": spec.horizon,
        "env.dt": spec.dt,
        "env.u_max": spec.u_max,
        "env.gravity": spec.gravity,
        "env.cart_mass": spec.cart_mass,
        "env.masses": spec.masses,
        "env.lengths": spec.lengths,
        "env.com": spec.com,
        "env.inertias": spec.inertias,
        "env.init_noise": spec.init_noise,
        "env.alive_bonus": spec.alive_bonus,
        "env.dist_weight_x": spec.dist_weight_x,
        "env.dist_weight_y": spec.dist_weight_y,
        "env.y_des": spec.y_des,
        "policy.gru_hidden": arch.gru_hidden,
        "policy.fc_layers": arch.fc_layers,
    }


def parse_lines(text: str, source: str = "<config>") -> dict:
    raw = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        raw[key] = value
    return raw


@dataclass(frozen=True)
class RunConfig:
    values: dict

    def __getitem__(self, key):
        return self.values[key]

    @property
    def env_spec(self) -> EnvSpec:
        v = self.values
        return EnvSpec(
            kind=v["env"], masses=v["env.masses"], lengths=v["env.lengths"], com=v["env.com"],
            inertias=v["env.inertias"], cart_mass=v["env.cart_mass"], gravity=v["env.gravity"],
            u_max=v["env.u_max"], dt=v["env.dt"], horizon=v["env.horizon"],
            init_noise=v["env.init_noise"], alive_bonus=v["env.alive_bonus"],
            dist_weight_x=v["env.dist_weight_x"], dist_weight_y=v["env.dist_weight_y"],
            y_des=v["env.y_des"])

    @property
    def arch(self) -> PolicyArch:
        spec = self.env_spec
        return PolicyArch(spec.obs_dim, self["policy.gru_hidden"], self["policy.fc_layers"],
                          spec.u_max)

    @property
    def apg(self) -> ApgConfig:
        v = self.values
        return ApgConfig(epochs=v["apg.epochs"], batch=v["apg.batch"], lr=v["lr.start"],
                         clip=v["apg.clip"], beta1=v["optim.beta1"], beta2=v["optim.beta2"],
                         eps=v["optim.eps"])

    @property
    def cem(self) -> CemConfig:
        v = self.values
        generations = v["cem.generations"]
        if v["mode"] == "cem" and v["cem.budget_match"]:
            # CE-APG spends apg.epochs x batch rollouts per candidate; CEM spends batch
            generations *= max(v["apg.epochs"], 1)
        return CemConfig(k_a=v["cem.k_a"], k_e=v["cem.k_e"], generations=generations,
                         sigma0=v["cem.sigma0"], mode=v["mode"], apg=self.apg,
                         lr_start=v["lr.start"], lr_end=v["lr.end"],
                         inject_mean=v["cem.inject_mean"], workers=v["workers"])

    def with_overrides(self, pairs: dict) -> "RunConfig":
        return build(pairs, base=self.values)

    def dump(self) -> str:
        lines = []
        for key in KEYS:
            val = self.values[key]
            if isinstance(val, bool):
                text = "true" if val else "false"
            elif key == "policy.fc_layers":
                text = "x".join(str(w) for w in val)
            elif isinstance(val, tuple):
                text = ",".join(repr(x) for x in val)
            elif val is None:
                text = "none"
            elif isinstance(val, float):
                text = repr(val)
            else:
                text = str(val)
            lines.append(f"{key} = {text}")
        return "\n".join(lines) + "\n"


def build(raw: dict, base: dict | None = None) -> RunConfig:
    """Parse raw string pairs on top of ``base`` (or the defaults) and validate."""
    unknown = sorted(set(raw) - set(KEYS))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    parsed = {}
    for key, text in raw.items():
        try:
            parsed[key] = KEYS[key](text)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad value for {key}: {text!r} ({exc})") from None
    kind = parsed.get("env", (base or BASE_DEFAULTS)["env"])
    if kind not in ENV_KINDS:
        raise ConfigError(f"unknown env {kind!r}; choose from {', '.join(ENV_KINDS)}")
    if base is None or base["env"] != kind:
        values = {**BASE_DEFAULTS, **(base or {}), **_env_defaults(kind)}
    else:
        values = dict(base)
    # changing rod masses or lengths re-derives the uniform-rod COM and inertia
    if ("env.masses" in parsed or "env.lengths" in parsed) and not (
            "env.com" in parsed or "env.inertias" in parsed):
        m = parsed.get("env.masses", values["env.masses"])
        l = parsed.get("env.lengths", values["env.lengths"])
        values["env.com"] = tuple(0.5 * x for x in l)
        values["env.inertias"] = tuple(a * b * b / 12.0 for a, b in zip(m, l))
    values.update(parsed)
    if values["mode"] not in MODES:
        raise ConfigError(f"unknown mode {values['mode']!r}; choose from {', '.join(MODES)}")
    cfg = RunConfig(values)
    try:
        cfg.env_spec, cfg.arch, cfg.cem
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def load(path=None, overrides: dict | None = None) -> RunConfig:
    raw = {}
    if path is not None:
        p = Path(path)
        try:
            text = p.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {p}: {exc}") from None
        raw = parse_lines(text, str(p))
    # env first so kind-dependent defaults are in place before other keys
    raw.update(overrides or {})
    return build(raw)


def parse_set(items) -> dict:
    out = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


__all__ = ["RunConfig", "ConfigError", "load", "build", "parse_lines", "parse_set", "KEYS"]
