"""Experiment configuration: an INI file validated against a fixed schema.

Every tunable value lives in :data:`SCHEMA` with its default, so
``--print-effective-config`` shows the complete set of choices for a run.
"""
from __future__ import annotations

import configparser
import hashlib
import io
from dataclasses import dataclass
from types import SimpleNamespace

from .errors import InvalidSpec


def _floats(text):
    return tuple(float(t) for t in _items(text))


def _ints(text):
    return tuple(int(t) for t in _items(text))


def _items(text):
    return [t.strip() for t in str(text).split(",") if t.strip()]


def _bool(text):
    v = str(text).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _strs(text):
    return tuple(_items(text))


# (parser, default, check) per key; check returns an error message or None
def _pos(v):
    return None if v > 0 else "must be > 0"


def _nonneg(v):
    return None if v >= 0 else "must be >= 0"


def _unit(v):
    return None if 0 <= v <= 1 else "must lie in [0, 1]"


def _one_of(*opts):
    def check(v):
        return None if v in opts else f"must be one of {', '.join(opts)}"
    return check


def _subset(*opts):
    def check(v):
        bad = [x for x in v if x not in opts]
        return f"unknown entries {bad}" if bad else None
    return check


METHODS = ("full_rank", "fixed_low_rank", "adaptive_svd", "random_rank", "dr_rl", "oracle")
VARIANTS = ("full", "no_rl", "no_perturbation", "no_reward_shaping")

SCHEMA = {
    "workload": {
        "seq_len": (int, 512, _pos),
        "head_dim": (int, 64, _pos),
        "segment_len": (int, 32, _pos),
        "num_segments": (int, 16, _pos),
        "amplitude": (float, 0.5, _pos),
        "tau_dense": (float, 0.07, _pos),
        "tau_sparse": (float, 0.2, _pos),
        "stay_prob": (float, 0.75, _unit),
        "layers": (int, 1, _pos),
        "layer_tau_scale": (float, 0.85, _pos),
        "train_pool": (int, 24, _pos),
        "eval_episodes": (int, 8, _pos),
    },
    "actions": {
        "r_min": (int, 16, _pos),
        "r_max": (int, 64, _pos),
        "step": (int, 4, _pos),
    },
    "reward": {
        "alpha": (float, 1.0, _nonneg),
        "beta": (float, 0.5, _nonneg),
        "gamma": (float, 0.02, _nonneg),
        "sim_target": (str, "attention", _one_of("attention", "outputs")),
    },
    "safety": {
        "epsilon0": (float, 1.0, _pos),
        "lambda": (float, 0.001, _nonneg),
        "estimator": (str, "spectrum", _one_of("spectrum", "qk_bound")),
        "reset_each_episode": (_bool, True, None),
    },
    "flops": {
        "svd_overhead_coeff": (float, 6.0, _nonneg),
    },
    "policy": {
        "encoder": (str, "mlp", _one_of("mlp", "attention")),
        "window": (int, 4, _pos),
        "hidden": (int, 32, _pos),
    },
    "train": {
        "bc_epochs": (int, 400, _nonneg),
        "bc_lr": (float, 3e-3, _pos),
        "ppo_updates": (int, 200, _nonneg),
        "episodes_per_update": (int, 4, _pos),
        "clip": (float, 0.2, _nonneg),
        "discount": (float, 0.99, _unit),
        "gae_lambda": (float, 0.95, _unit),
        "ppo_epochs": (int, 4, _pos),
        "lr": (float, 3e-4, _pos),
        "entropy_coef": (float, 0.01, _nonneg),
        "value_coef": (float, 0.5, _nonneg),
        "center_rewards": (_bool, True, None),
        "value_warmup": (int, 200, _nonneg),
    },
    "bench": {
        "methods": (_strs, METHODS, _subset(*METHODS)),
        "fixed_rank": (int, 32, _pos),
        "energy_threshold": (float, 0.90, _unit),
        "flops_lengths": (_ints, (128, 256, 512, 1024, 2048, 4096), None),
        "flops_segments": (int, 4, _pos),
        "flops_episodes": (int, 2, _pos),
    },
    "ablation": {
        "variants": (_strs, VARIANTS, _subset(*VARIANTS)),
    },
    "run": {
        "seed": (int, 0, _nonneg),
    },
}


def _render_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ", ".join(_render_value(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


@dataclass
class ExperimentConfig:
    values: dict

    def __getattr__(self, section):
        # unpickling probes attributes before ``values`` exists
        if section.startswith("__") or section == "values":
            raise AttributeError(section)
        try:
            return SimpleNamespace(**self.values[section])
        except KeyError:
            raise AttributeError(section) from None

    def get(self, section, key):
        return self.values[section][key]

    def replace(self, **overrides) -> "ExperimentConfig":
        """Copy with ``section__key=value`` overrides applied and re-validated."""
        vals = {s: dict(kv) for s, kv in self.values.items()}
        for name, v in overrides.items():
            section, key = name.split("__", 1)
            if section not in SCHEMA or key not in SCHEMA[section]:
                raise InvalidSpec(f"unknown config key {section}.{key}")
            vals[section][key] = v
        return validate(ExperimentConfig(vals))

    def render(self) -> str:
        buf = io.StringIO()
        for section, keys in SCHEMA.items():
            buf.write(f"[{section}]\n")
            for key in keys:
                buf.write(f"{key} = {_render_value(self.values[section][key])}\n")
            buf.write("\n")
        return buf.getvalue()


def defaults() -> ExperimentConfig:
    return ExperimentConfig({s: {k: spec[1] for k, spec in keys.items()}
                             for s, keys in SCHEMA.items()})


def parse(text: str) -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise InvalidSpec(f"config syntax error: {exc}") from exc
    cfg = defaults()
    for section in cp.sections():
        if section not in SCHEMA:
            raise InvalidSpec(f"unknown config section [{section}]")
        for key, raw in cp.items(section):
            if key not in SCHEMA[section]:
                raise InvalidSpec(f"unknown config key {section}.{key}")
            conv = SCHEMA[section][key][0]
            try:
                cfg.values[section][key] = conv(raw)
            except ValueError as exc:
                raise InvalidSpec(f"{section}.{key}: {exc}") from exc
    return validate(cfg)


def load(path) -> ExperimentConfig:
    try:
        with open(path) as fh:
            return parse(fh.read())
    except OSError as exc:
        raise InvalidSpec(f"cannot read config {path}: {exc}") from exc


def validate(cfg: ExperimentConfig) -> ExperimentConfig:
    for section, keys in SCHEMA.items():
        for key, (_, _, check) in keys.items():
            v = cfg.values[section][key]
            msg = check(v) if check else None
            if msg:
                raise InvalidSpec(f"{section}.{key} = {v!r}: {msg}")
    w, a = cfg.workload, cfg.actions
    if w.seq_len != w.segment_len * w.num_segments:
        raise InvalidSpec("workload.seq_len must equal segment_len * num_segments")
    if w.head_dim % 2:
        raise InvalidSpec("workload.head_dim must be even")
    if a.r_min > a.r_max:
        raise InvalidSpec("actions.r_min must not exceed actions.r_max")
    if a.r_max > w.seq_len:
        raise InvalidSpec("actions.r_max exceeds workload.seq_len")
    lengths = cfg.bench.flops_lengths
    if list(lengths) != sorted(lengths) or not lengths:
        raise InvalidSpec("bench.flops_lengths must be non-empty and ascending")
    for n in lengths:
        if n % cfg.bench.flops_segments or n < a.r_max:
            raise InvalidSpec(f"flops length {n} must be a multiple of flops_segments and >= r_max")
    return cfg


def derive_seed(master: int, *names) -> int:
    """Independent 63-bit stream seed for a named component."""
    key = ":".join([str(master)] + [str(n) for n in names]).encode()
    return int.from_bytes(hashlib.sha256(key).digest()[:8], "little") & ((1 << 63) - 1)
