"""Rank-selection policy: a small numpy network with hand-written gradients.

Two encoders are available over a window of the ``H`` most recent states:

* ``mlp``: the flattened window goes through two tanh layers.
* ``attention``: each state is embedded as a token, mixed by one head of
  self-attention with a residual connection, mean-pooled, then passed through
  tanh and one more tanh layer.

Both feed a logits head and a scalar value head.  Masked actions get a
``-inf`` logit so they carry neither probability nor gradient.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .csvio import write_csv
from .errors import InvalidParams, InvalidSpec, SafetyDeadlock, TrainingDiverged

MAGIC = b"DRRL"
FORMAT_VERSION = 1

ENCODERS = ("mlp", "attention")


@dataclass
class PolicyParams:
    tensors: dict
    encoder: str
    window: int
    state_dim: int
    n_actions: int
    hidden: int

    def __post_init__(self):
        if self.encoder not in ENCODERS:
            raise InvalidParams(f"unknown encoder {self.encoder!r}")
        for name, shape in _shapes(self.encoder, self.window, self.state_dim, self.n_actions,
                                   self.hidden).items():
            t = self.tensors.get(name)
            if t is None or t.shape != shape:
                got = None if t is None else t.shape
                raise InvalidParams(f"tensor {name}: expected {shape}, got {got}")
            if not np.all(np.isfinite(t)):
                raise InvalidParams(f"tensor {name} is not finite")

    @property
    def names(self) -> list[str]:
        return list(_shapes(self.encoder, self.window, self.state_dim, self.n_actions,
                            self.hidden))

    def meta(self) -> dict:
        return {"encoder": self.encoder, "window": self.window, "state_dim": self.state_dim,
                "n_actions": self.n_actions, "hidden": self.hidden}

    def copy(self) -> "PolicyParams":
        return PolicyParams({k: v.copy() for k, v in self.tensors.items()}, **self.meta())

    def with_tensors(self, tensors: dict) -> "PolicyParams":
        return PolicyParams(tensors, **self.meta())

    def flat(self) -> np.ndarray:
        return np.concatenate([self.tensors[k].ravel() for k in self.names])


def _shapes(encoder, window, state_dim, n_actions, hidden) -> dict:
    if encoder == "mlp":
        enc = {"w1": (window * state_dim, hidden), "b1": (hidden,)}
    else:
        enc = {
            "we": (state_dim, hidden), "be": (hidden,), "pos": (window, hidden),
            "wq": (hidden, hidden), "wk": (hidden, hidden), "wv": (hidden, hidden),
        }
    return {
        **enc,
        "w2": (hidden, hidden), "b2": (hidden,),
        "wp": (hidden, n_actions), "bp": (n_actions,),
        "wval": (hidden, 1), "bval": (1,),
    }


def init_params(state_dim: int, n_actions: int, *, window: int = 4, hidden: int = 32,
                encoder: str = "mlp", seed: int = 0) -> PolicyParams:
    """Glorot-uniform weights, zero biases."""
    if min(state_dim, n_actions, window, hidden) < 1:
        raise InvalidParams("dimensions must be positive")
    if encoder not in ENCODERS:
        raise InvalidParams(f"unknown encoder {encoder!r}")
    rng = np.random.default_rng(seed)
    out = {}
    for name, shape in _shapes(encoder, window, state_dim, n_actions, hidden).items():
        if len(shape) == 1:
            out[name] = np.zeros(shape)
        else:
            lim = math.sqrt(6.0 / (shape[0] + shape[1]))
            out[name] = rng.uniform(-lim, lim, shape)
    return PolicyParams(out, encoder, window, state_dim, n_actions, hidden)


def zero_params(state_dim, n_actions, *, window=4, hidden=32, encoder="mlp") -> PolicyParams:
    p = init_params(state_dim, n_actions, window=window, hidden=hidden, encoder=encoder)
    return p.with_tensors({k: np.zeros_like(v) for k, v in p.tensors.items()})


# -- windows -----------------------------------------------------------------


def pad_window(states, window: int, state_dim: int) -> np.ndarray:
    """Most recent ``window`` states, zero-padded at the front."""
    arr = np.asarray(states, dtype=np.float64).reshape(-1, state_dim) if len(states) else \
        np.zeros((0, state_dim))
    if arr.shape[0] > window:
        arr = arr[-window:]
    out = np.zeros((window, state_dim))
    if arr.shape[0]:
        out[window - arr.shape[0]:] = arr
    return out


class StateWindow:
    def __init__(self, window: int, state_dim: int):
        self.window = window
        self.state_dim = state_dim
        self.items: list[np.ndarray] = []

    def push(self, vec) -> np.ndarray:
        v = np.asarray(vec, dtype=np.float64)
        if v.shape != (self.state_dim,):
            raise InvalidParams(f"state width {v.shape} != {self.state_dim}")
        self.items.append(v)
        self.items = self.items[-self.window:]
        return self.array()

    def array(self) -> np.ndarray:
        return pad_window(self.items, self.window, self.state_dim)


# -- forward / backward --------------------------------------------------------


def _check_batch(params: PolicyParams, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3 or x.shape[1:] != (params.window, params.state_dim):
        raise InvalidParams(
            f"window batch shape {x.shape} incompatible with "
            f"(*, {params.window}, {params.state_dim})"
        )
    return x


def forward_batch(params: PolicyParams, x):
    """Logits ``(B, A)``, values ``(B,)`` and a cache for :func:`backward`."""
    x = _check_batch(params, x)
    p = params.tensors
    cache = {"x": x}
    if params.encoder == "mlp":
        flat = x.reshape(x.shape[0], -1)
        a1 = np.tanh(flat @ p["w1"] + p["b1"])
        cache["flat"] = flat
    else:
        h = params.hidden
        e = x @ p["we"] + p["be"] + p["pos"]
        qa, ka, va = e @ p["wq"], e @ p["wk"], e @ p["wv"]
        s = qa @ np.swapaxes(ka, 1, 2) / math.sqrt(h)
        s = s - s.max(axis=2, keepdims=True)
        pr = np.exp(s)
        pr /= pr.sum(axis=2, keepdims=True)
        z = pr @ va
        pooled = (e + z).mean(axis=1)
        a1 = np.tanh(pooled)
        cache.update(e=e, qa=qa, ka=ka, va=va, pr=pr)
    a2 = np.tanh(a1 @ p["w2"] + p["b2"])
    logits = a2 @ p["wp"] + p["bp"]
    values = (a2 @ p["wval"] + p["bval"])[:, 0]
    cache.update(a1=a1, a2=a2)
    return logits, values, cache


def forward(params: PolicyParams, window):
    """Single-window forward pass; a short window is zero-padded at the front."""
    w = np.asarray(window, dtype=np.float64)
    if w.ndim == 1:
        w = w[None]
    if w.ndim != 2 or w.shape[1] != params.state_dim or w.shape[0] > params.window:
        raise InvalidParams(f"window shape {w.shape} incompatible with policy")
    logits, values, _ = forward_batch(params, pad_window(w, params.window, params.state_dim))
    return logits[0], float(values[0])


def backward(params: PolicyParams, cache, dlogits, dvalues) -> dict:
    p = params.tensors
    a1, a2 = cache["a1"], cache["a2"]
    dvalues = np.asarray(dvalues, dtype=np.float64).reshape(-1, 1)
    g = {
        "wp": a2.T @ dlogits, "bp": dlogits.sum(axis=0),
        "wval": a2.T @ dvalues, "bval": dvalues.sum(axis=0),
    }
    dz2 = (dlogits @ p["wp"].T + dvalues @ p["wval"].T) * (1.0 - a2 * a2)
    g["w2"] = a1.T @ dz2
    g["b2"] = dz2.sum(axis=0)
    dz1 = (dz2 @ p["w2"].T) * (1.0 - a1 * a1)
    if params.encoder == "mlp":
        g["w1"] = cache["flat"].T @ dz1
        g["b1"] = dz1.sum(axis=0)
        return g
    x, e, qa, ka, va, pr = (cache[k] for k in ("x", "e", "qa", "ka", "va", "pr"))
    hdim = params.hidden
    window = x.shape[1]
    dr = np.repeat(dz1[:, None, :] / window, window, axis=1)
    de = dr.copy()
    dpr = dr @ np.swapaxes(va, 1, 2)
    dva = np.swapaxes(pr, 1, 2) @ dr
    ds = pr * (dpr - np.sum(dpr * pr, axis=2, keepdims=True)) / math.sqrt(hdim)
    dqa = ds @ ka
    dka = np.swapaxes(ds, 1, 2) @ qa
    g["wq"] = np.einsum("bth,btk->hk", e, dqa)
    g["wk"] = np.einsum("bth,btk->hk", e, dka)
    g["wv"] = np.einsum("bth,btk->hk", e, dva)
    de += dqa @ p["wq"].T + dka @ p["wk"].T + dva @ p["wv"].T
    g["we"] = np.einsum("bts,bth->sh", x, de)
    g["be"] = de.sum(axis=(0, 1))
    g["pos"] = de.sum(axis=0)
    return g


# -- distributions -------------------------------------------------------------


def masked_log_softmax(logits, mask=None) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if not np.all(np.any(mask, axis=-1)):
            raise SafetyDeadlock("every action is masked")
        z = np.where(mask, z, -np.inf)
    m = np.max(z, axis=-1, keepdims=True)
    with np.errstate(invalid="ignore"):
        shifted = z - m
    lse = np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))
    return shifted - lse


def masked_softmax(logits, mask=None) -> np.ndarray:
    return np.exp(masked_log_softmax(logits, mask))


def sample_action(logits, mask, rng) -> tuple[int, float]:
    """Draw from the softmax restricted to unmasked arms; returns (index, log-prob)."""
    logp = masked_log_softmax(logits, mask)
    p = np.exp(logp)
    # inverse-CDF draw; masked arms have p == 0 exactly and are never selected
    u = rng.random()
    c = np.cumsum(p)
    idx = int(np.searchsorted(c, u * c[-1], side="right"))
    idx = min(idx, p.size - 1)
    while p[idx] == 0.0:
        idx -= 1
    return idx, float(logp[idx])


def greedy_action(logits, mask=None) -> int:
    z = np.asarray(logits, dtype=np.float64)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if not mask.any():
            raise SafetyDeadlock("every action is masked")
        z = np.where(mask, z, -np.inf)
    return int(np.argmax(z))


# -- losses ------------------------------------------------------------------


def bc_loss_and_grad(params: PolicyParams, x, labels, masks=None):
    """Mean cross-entropy against expert labels and its gradient."""
    logits, values, cache = forward_batch(params, x)
    labels = np.asarray(labels, dtype=np.int64)
    b = labels.size
    logp = masked_log_softmax(logits, masks)
    loss = float(-np.mean(logp[np.arange(b), labels]))
    dlogits = np.exp(logp)
    dlogits[np.arange(b), labels] -= 1.0
    dlogits /= b
    grads = backward(params, cache, dlogits, np.zeros(b))
    return loss, grads


@dataclass
class PPOBatch:
    x: np.ndarray
    actions: np.ndarray
    old_logp: np.ndarray
    advantages: np.ndarray
    returns: np.ndarray
    masks: np.ndarray


def ppo_loss_and_grad(params: PolicyParams, batch: PPOBatch, clip_eps=0.2, value_coef=0.5,
                      entropy_coef=0.01):
    """Clipped surrogate + value regression - entropy bonus.  Returns (loss, grads, info)."""
    logits, values, cache = forward_batch(params, batch.x)
    b = batch.actions.size
    rows = np.arange(b)
    logp_all = masked_log_softmax(logits, batch.masks)
    p = np.exp(logp_all)
    logp = logp_all[rows, batch.actions]
    ratio = np.exp(logp - batch.old_logp)
    adv = batch.advantages
    unclipped = ratio * adv
    clipped = np.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps) * adv
    surr = np.minimum(unclipped, clipped)
    # plogp with 0*log0 = 0 on masked arms
    plogp = np.where(p > 0, p * np.where(p > 0, logp_all, 0.0), 0.0)
    entropy = -plogp.sum(axis=1)
    verr = values - batch.returns
    loss = float(-surr.mean() + value_coef * np.mean(verr ** 2) - entropy_coef * entropy.mean())

    # the gradient flows only through the branch selected by the min
    active = unclipped <= clipped
    dlogp = np.where(active, -ratio * adv, 0.0) / b
    onehot = np.zeros_like(p)
    onehot[rows, batch.actions] = 1.0
    dlogits = dlogp[:, None] * (onehot - p)
    dlogits += entropy_coef / b * (plogp + p * entropy[:, None])
    dvalues = 2.0 * value_coef * verr / b
    grads = backward(params, cache, dlogits, dvalues)
    info = {"ratio": ratio, "entropy": float(entropy.mean()), "surrogate": float(surr.mean()),
            "value_loss": float(np.mean(verr ** 2))}
    return loss, grads, info


# -- optimization --------------------------------------------------------------


class Adam:
    def __init__(self, lr=3e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m: dict = {}
        self.v: dict = {}
        self.t = 0

    def step(self, params: PolicyParams, grads: dict, lr=None) -> PolicyParams:
        lr = self.lr if lr is None else lr
        self.t += 1
        new = {}
        for k, w in params.tensors.items():
            g = grads[k]
            m = self.m.get(k, np.zeros_like(w)) * self.beta1 + (1 - self.beta1) * g
            v = self.v.get(k, np.zeros_like(w)) * self.beta2 + (1 - self.beta2) * g * g
            self.m[k], self.v[k] = m, v
            mh = m / (1 - self.beta1 ** self.t)
            vh = v / (1 - self.beta2 ** self.t)
            new[k] = w - lr * mh / (np.sqrt(vh) + self.eps)
        return params.with_tensors(new)


def _finite(loss, grads) -> bool:
    return math.isfinite(loss) and all(np.all(np.isfinite(g)) for g in grads.values())


def bc_pretrain(params: PolicyParams, data, epochs: int, lr: float = 1e-2, *,
                batch_size: int | None = None, seed: int = 0, history: list | None = None,
                optimizer: Adam | None = None) -> PolicyParams:
    """Behavior cloning on ``data = (windows, labels)``.

    Each epoch is one pass in seeded shuffled minibatches (full batch when
    ``batch_size`` is None).  ``history`` receives the mean loss per epoch.
    """
    x, y = data
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if y.size == 0:
        raise InvalidSpec("behavior cloning needs at least one labelled state")
    if np.any(y < 0) or np.any(y >= params.n_actions):
        raise InvalidSpec("label outside the action range")
    x = _check_batch(params, x)
    opt = optimizer or Adam(lr)
    rng = np.random.default_rng(seed)
    bs = y.size if batch_size is None else batch_size
    for _ in range(epochs):
        order = rng.permutation(y.size) if bs < y.size else np.arange(y.size)
        losses = []
        for s in range(0, y.size, bs):
            idx = order[s:s + bs]
            loss, grads = bc_loss_and_grad(params, x[idx], y[idx])
            if not _finite(loss, grads):
                raise TrainingDiverged("non-finite behavior-cloning loss", last_good=params)
            params = opt.step(params, grads, lr)
            losses.append(loss * idx.size)
        if history is not None:
            history.append(float(sum(losses) / y.size))
    return params


# -- trajectories ---------------------------------------------------------------


@dataclass
class Trajectory:
    states: list = field(default_factory=list)
    actions: list = field(default_factory=list)
    logps: list = field(default_factory=list)
    rewards: list = field(default_factory=list)
    values: list = field(default_factory=list)
    masks: list = field(default_factory=list)
    advantages: np.ndarray | None = None
    returns: np.ndarray | None = None

    def add(self, window, action, logp, reward, value, mask):
        if not mask[action]:
            raise InvalidSpec("masked action recorded as taken")
        if logp > 0:
            raise InvalidSpec("log-probability must be <= 0")
        self.states.append(np.asarray(window, dtype=np.float64))
        self.actions.append(int(action))
        self.logps.append(float(logp))
        self.rewards.append(float(reward))
        self.values.append(float(value))
        self.masks.append(np.asarray(mask, dtype=bool))

    def __len__(self):
        return len(self.actions)

    @property
    def episode_return(self) -> float:
        return float(sum(self.rewards))


def compute_gae(rewards, values, gamma=0.99, lam=0.95, last_value=0.0):
    """Generalized advantage estimates and returns for one finished episode."""
    r = np.asarray(rewards, dtype=np.float64)
    v = np.append(np.asarray(values, dtype=np.float64), last_value)
    adv = np.zeros_like(r)
    acc = 0.0
    for t in range(r.size - 1, -1, -1):
        delta = r[t] + gamma * v[t + 1] - v[t]
        acc = delta + gamma * lam * acc
        adv[t] = acc
    return adv, adv + v[:-1]


def make_batch(trajectories: Sequence[Trajectory], gamma=0.99, lam=0.95,
               normalize=True) -> PPOBatch:
    xs, acts, olds, advs, rets, masks = [], [], [], [], [], []
    for tr in trajectories:
        if tr.advantages is None or tr.returns is None:
            tr.advantages, tr.returns = compute_gae(tr.rewards, tr.values, gamma, lam)
        xs += tr.states
        acts += tr.actions
        olds += tr.logps
        advs.append(tr.advantages)
        rets.append(tr.returns)
        masks += tr.masks
    if not acts:
        raise InvalidSpec("no transitions to learn from")
    adv = np.concatenate(advs)
    if normalize:
        adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    return PPOBatch(np.array(xs), np.array(acts, dtype=np.int64), np.array(olds), adv,
                    np.concatenate(rets), np.array(masks))


def ppo_update(params: PolicyParams, trajectories: Sequence[Trajectory], clip_eps=0.2,
               gamma_discount=0.99, gae_lambda=0.95, epochs=4, lr=3e-4, *, value_coef=0.5,
               entropy_coef=0.01, optimizer: Adam | None = None,
               stats: dict | None = None) -> PolicyParams:
    """Several full-batch epochs on the clipped PPO objective.

    ``stats`` (if given) receives per-epoch losses and the largest deviation of
    the importance ratio from 1 at the first epoch.
    """
    batch = make_batch(trajectories, gamma_discount, gae_lambda)
    opt = optimizer or Adam(lr)
    losses = []
    first_dev = None
    for ep in range(epochs):
        loss, grads, info = ppo_loss_and_grad(params, batch, clip_eps, value_coef, entropy_coef)
        if not _finite(loss, grads):
            raise TrainingDiverged("non-finite PPO loss", last_good=params)
        if ep == 0:
            first_dev = float(np.max(np.abs(info["ratio"] - 1.0)))
        losses.append(loss)
        params = opt.step(params, grads, lr)
    if stats is not None:
        stats["losses"] = losses
        stats["first_ratio_deviation"] = first_dev
    return params


def value_warmup(params: PolicyParams, trajectories: Sequence[Trajectory], steps: int,
                 lr: float = 1e-2, gamma_discount=0.99, gae_lambda=0.95) -> PolicyParams:
    """Fit only the value head to the batch returns; the trunk and policy head stay put."""
    if steps <= 0:
        return params
    batch = make_batch(trajectories, gamma_discount, gae_lambda)
    opt = Adam(lr)
    for _ in range(steps):
        loss, grads, _ = ppo_loss_and_grad(params, batch, 0.0, 1.0, 0.0)
        if not _finite(loss, grads):
            raise TrainingDiverged("non-finite value loss", last_good=params)
        grads = {k: (g if k in ("wval", "bval") else np.zeros_like(g)) for k, g in grads.items()}
        params = opt.step(params, grads, lr)
    return params


# -- serialization ---------------------------------------------------------------


def save_checkpoint(path, params: PolicyParams, extra: dict | None = None) -> Path:
    """Magic, version, JSON header length, JSON header, then little-endian float64 tensors."""
    header = dict(params.meta())
    header["tensors"] = [[k, list(params.tensors[k].shape)] for k in params.names]
    if extra:
        header["extra"] = extra
    hb = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(hb)))
        fh.write(hb)
        for k in params.names:
            fh.write(np.ascontiguousarray(params.tensors[k], dtype="<f8").tobytes())
    return path


def load_checkpoint(path, with_extra: bool = False):
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise InvalidParams(f"{path}: not a policy checkpoint")
    version, hlen = struct.unpack("<II", raw[4:12])
    if version != FORMAT_VERSION:
        raise InvalidParams(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[12:12 + hlen])
    off = 12 + hlen
    tensors = {}
    for name, shape in header["tensors"]:
        count = int(np.prod(shape)) if shape else 1
        nbytes = 8 * count
        if off + nbytes > len(raw):
            raise InvalidParams(f"{path}: truncated at tensor {name}")
        tensors[name] = np.frombuffer(raw[off:off + nbytes], dtype="<f8").reshape(shape).copy()
        off += nbytes
    if off != len(raw):
        raise InvalidParams(f"{path}: trailing bytes")
    params = PolicyParams(tensors, header["encoder"], header["window"], header["state_dim"],
                          header["n_actions"], header["hidden"])
    return (params, header.get("extra", {})) if with_extra else params


def export_params_csv(path, params: PolicyParams) -> Path:
    rows = []
    for k in params.names:
        t = params.tensors[k]
        for idx, val in np.ndenumerate(t):
            rows.append([k, ":".join(str(i) for i in idx), float(val)])
    return write_csv(path, ("tensor", "index", "value"), rows)
