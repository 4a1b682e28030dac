"""Rank-selection MDP over synthetic attention workloads.

Each decision point (a segment) presents an ``n``-token attention window whose
spectral decay is set by the segment's ``tau``.  The agent picks a truncation
rank, is scored on fidelity, normalized FLOPs and the size of the rank jump,
and is restricted by an annealed perturbation threshold.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np

from . import constants as C
from .attention import (
    DEFAULT_FLOPS,
    AttentionInput,
    AttentionOutput,
    FlopsModel,
    attention_matrix,
    count_flops,
    fidelity,
)
from .csvio import write_csv
from .errors import InvalidInput, InvalidSpec, RankOutOfBounds, SafetyViolation
from .spectral import (
    check_spectrum,
    leading_singular_values,
    power_iteration_norm,
    qk_perturbation_bound,
    singular_values,
    spectral_energy_ratio,
    svd_full,
    truncate,
)

log = logging.getLogger(__name__)

SEQ_FEATURES = 8
LAYER_STATS = 9


def default_candidates(r_min=C.R_MIN, r_max=C.R_MAX, step=C.RANK_STEP) -> tuple[int, ...]:
    if not 1 <= r_min <= r_max or step < 1:
        raise InvalidSpec(f"bad candidate range {r_min}..{r_max} step {step}")
    c = list(range(r_min, r_max + 1, step))
    if c[-1] != r_max:
        c.append(r_max)
    return tuple(c)


# -- workloads ---------------------------------------------------------------


@dataclass(frozen=True)
class WorkloadSpec:
    seq_len: int
    head_dim: int
    segment_len: int
    num_segments: int
    decay_profile: tuple
    seed: int = 0
    amplitude: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "decay_profile", tuple(float(t) for t in self.decay_profile))
        if min(self.seq_len, self.head_dim, self.segment_len, self.num_segments) < 1:
            raise InvalidSpec("lengths and counts must be positive")
        if self.seq_len != self.segment_len * self.num_segments:
            raise InvalidSpec(
                f"seq_len {self.seq_len} != segment_len {self.segment_len} x "
                f"num_segments {self.num_segments}"
            )
        if self.head_dim % 2:
            raise InvalidSpec("head_dim must be even (cosine/sine feature pairs)")
        if len(self.decay_profile) != self.num_segments:
            raise InvalidSpec(
                f"{len(self.decay_profile)} decay rates for {self.num_segments} segments"
            )
        if not all(math.isfinite(t) and t > 0 for t in self.decay_profile):
            raise InvalidSpec("every decay rate must be finite and > 0")
        if not self.amplitude > 0:
            raise InvalidSpec("amplitude must be > 0")


def bimodal_profile(num_segments: int, tau_dense: float, tau_sparse: float,
                    stay_prob: float = 0.75, seed: int = 0) -> tuple[float, ...]:
    """Sticky two-state chain over dense (slow decay) and sparse (fast decay) segments."""
    if not 0.0 <= stay_prob <= 1.0:
        raise InvalidSpec("stay_prob must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    state = int(rng.integers(2))
    out = []
    for _ in range(num_segments):
        out.append(tau_dense if state == 0 else tau_sparse)
        if rng.random() >= stay_prob:
            state = 1 - state
    return tuple(out)


@dataclass(frozen=True)
class LayerWeights:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray

    def as_tuple(self):
        return self.wq, self.wk, self.wv

    @cached_property
    def statistics(self) -> np.ndarray:
        # weights never change after construction, so the power iterations run once
        return layer_statistics(self.as_tuple())


def _orthogonal(rng, d):
    q, r = np.linalg.qr(rng.standard_normal((d, d)))
    return q * np.sign(np.diag(r))


def layer_weights(d: int, seed: int, layer: int = 0) -> LayerWeights:
    # W_Q W_K^T is a multiple of the identity so logits reproduce the kernel
    rng = np.random.default_rng([seed, layer, 0x57])
    o = _orthogonal(rng, d)
    g = math.exp(rng.uniform(-0.25, 0.25))
    gv = math.exp(rng.uniform(-0.25, 0.25))
    return LayerWeights(g * o, o / g, gv * _orthogonal(rng, d))


def harmonic_embeddings(n: int, d: int, tau: float, amplitude: float, rng) -> np.ndarray:
    """Token embeddings whose inner-product kernel decays geometrically in frequency."""
    m = np.arange(1, d // 2 + 1)
    theta = 2 * np.pi * np.arange(n) / n + rng.normal(0.0, 0.2 * 2 * np.pi / n, n)
    amp = np.sqrt(amplitude * np.exp(-2.0 * tau * m))
    ph = np.outer(theta, m)
    # scaled by d^(1/4) so that the 1/sqrt(d) in attention cancels
    return np.hstack([amp * np.cos(ph), amp * np.sin(ph)]) * d ** 0.25


class Segment:
    """One decision point: an attention window plus cached spectral summaries.

    Projections are regenerated on demand from the seed so large workload
    pools only keep the small cached summaries in memory.
    """

    def __init__(self, spec: WorkloadSpec, index: int, layer: int = 0,
                 layer_tau_scale: float = 1.0):
        if not 0 <= index < spec.num_segments:
            raise InvalidSpec(f"segment index {index} out of range")
        self.spec = spec
        self.index = index
        self.layer = layer
        self.tau = spec.decay_profile[index] * layer_tau_scale ** layer
        self.n = spec.seq_len
        self.d = spec.head_dim
        self.weights = layer_weights(self.d, spec.seed, layer)
        self._sigma = None
        self._energy = None
        self._dec = None
        self._features = None
        self._qk = None

    def embeddings(self) -> np.ndarray:
        rng = np.random.default_rng([self.spec.seed, self.layer, self.index])
        return harmonic_embeddings(self.n, self.d, self.tau, self.spec.amplitude, rng)

    def attention_input(self) -> AttentionInput:
        x = self.embeddings()
        w = self.weights
        return AttentionInput(x @ w.wq, x @ w.wk, x @ w.wv)

    def attention(self) -> np.ndarray:
        return attention_matrix(self.attention_input())

    def spectrum(self, k: int | None = None):
        """Leading singular values of the attention matrix and its squared Frobenius norm."""
        need = min(self.n, k if k is not None else self.n)
        if self._sigma is None or self._sigma.size < need:
            a = self.attention()
            self._energy = float(np.sum(a * a))
            if self.n <= C.DENSE_SPECTRUM_MAX_N or need == self.n:
                self._sigma = singular_values(a)
            else:
                self._sigma = leading_singular_values(a, need, seed=self.index)
        return self._sigma, self._energy

    def decomposition(self):
        if self._dec is None:
            self._dec = svd_full(self.attention())
            if self._sigma is None or self._sigma.size < self.n:
                self._sigma = self._dec.sigma
                self._energy = float(np.sum(self._dec.sigma ** 2))
        return self._dec

    def seq_features(self) -> np.ndarray:
        if self._features is None:
            self._features = conv_features(self.embeddings())
        return self._features

    def qk_spectra(self):
        if self._qk is None:
            inp = self.attention_input()
            self._qk = singular_values(inp.q), singular_values(inp.k)
        return self._qk


def generate_segments(spec: WorkloadSpec, layer: int = 0,
                      layer_tau_scale: float = 1.0) -> list[Segment]:
    return [Segment(spec, i, layer, layer_tau_scale) for i in range(spec.num_segments)]


def generate_workload(spec: WorkloadSpec, layer: int = 0,
                      layer_tau_scale: float = 1.0) -> list[AttentionInput]:
    return [s.attention_input() for s in generate_segments(spec, layer, layer_tau_scale)]


# -- state -------------------------------------------------------------------

_CONV_WIDTH = 3
_CONV_SEED = 20240917


def _conv_bank(d: int) -> np.ndarray:
    rng = np.random.default_rng([_CONV_SEED, d])
    return rng.standard_normal((SEQ_FEATURES, _CONV_WIDTH, d)) / math.sqrt(_CONV_WIDTH * d)


def conv_features(x: np.ndarray) -> np.ndarray:
    """Root-mean-square pooled responses of a fixed bank of width-3 filters."""
    x = np.asarray(x, dtype=np.float64)
    n, d = x.shape
    bank = _conv_bank(d)
    if n < _CONV_WIDTH:
        x = np.vstack([x, np.zeros((_CONV_WIDTH - n, d))])
        n = _CONV_WIDTH
    resp = np.zeros((n - _CONV_WIDTH + 1, SEQ_FEATURES))
    for w in range(_CONV_WIDTH):
        resp += x[w:n - _CONV_WIDTH + 1 + w] @ bank[:, w, :].T
    return np.sqrt(np.mean(resp * resp, axis=0))


def layer_statistics(weights) -> np.ndarray:
    out = []
    for w in weights:
        w = np.asarray(w, dtype=np.float64)
        out += [float(np.mean(w)), float(np.var(w)), power_iteration_norm(w, C.POWER_ITERATIONS)]
    return np.array(out)


def ner_profile(sigma, candidates, total_energy=None) -> np.ndarray:
    s = check_spectrum(sigma)
    total = float(np.sum(s * s)) if total_energy is None else float(total_energy)
    if total <= 0.0:
        return np.zeros(len(candidates))
    if min(candidates) < 1:
        raise RankOutOfBounds("candidate ranks must be >= 1")
    return np.array([min(1.0, float(np.sum(s[:min(r, s.size)] ** 2)) / total)
                     for r in candidates])


@dataclass(frozen=True)
class RankState:
    seq_features: np.ndarray
    layer_stats: np.ndarray
    prev_rank: float
    ner_profile: np.ndarray
    layer: float | None = None

    def vector(self) -> np.ndarray:
        parts = [self.seq_features, self.layer_stats, [self.prev_rank], self.ner_profile]
        if self.layer is not None:
            parts.append([self.layer])
        return np.concatenate([np.asarray(p, dtype=np.float64) for p in parts])

    @property
    def width(self) -> int:
        return self.vector().size


def state_width(num_candidates: int, with_layer: bool = False) -> int:
    return SEQ_FEATURES + LAYER_STATS + 1 + num_candidates + int(with_layer)


def build_state(inp, weights, prev: int, candidates: Sequence[int], *,
                sigma=None, total_energy=None, features=None,
                layer: float | None = None) -> RankState:
    """Fuse sequence, layer and spectral features with the previous rank.

    ``inp`` is either an :class:`AttentionInput` (its attention spectrum is
    computed here, and the convolution runs over its queries) or raw
    embeddings when ``sigma`` is supplied.  Precomputed ``features`` skip the
    convolution entirely.
    """
    r_max = max(candidates)
    if prev not in candidates:
        raise RankOutOfBounds(f"previous rank {prev} not a candidate")
    if sigma is None:
        if not isinstance(inp, AttentionInput):
            raise InvalidInput("spectrum required when no AttentionInput is given")
        a = attention_matrix(inp)
        sigma = singular_values(a)
        total_energy = float(np.sum(a * a))
    if features is None:
        x = inp.q if isinstance(inp, AttentionInput) else inp
        features = conv_features(x)
    if isinstance(weights, LayerWeights):
        stats = weights.statistics
    else:
        stats = layer_statistics(weights)
    return RankState(
        np.asarray(features, dtype=np.float64),
        stats,
        prev / r_max,
        ner_profile(sigma, candidates, total_energy),
        layer,
    )


# -- safety ------------------------------------------------------------------


@dataclass
class SafetySchedule:
    epsilon0: float = C.EPSILON0
    lam: float = C.DECAY
    t: int = 0

    def __post_init__(self):
        if not self.epsilon0 > 0 or not self.lam >= 0:
            raise InvalidSpec("epsilon0 must be > 0 and lambda >= 0")

    def epsilon(self, t: int | None = None) -> float:
        return self.epsilon0 * math.exp(-self.lam * (self.t if t is None else t))

    def advance(self, k: int = 1):
        self.t += k


def _transition(s: np.ndarray, current: int, target: int) -> float:
    # ||A_hi - A_lo||_F from an already validated spectrum; ranks past its end add nothing
    lo, hi = min(current, target), max(current, target)
    if lo < 1:
        raise RankOutOfBounds(f"rank {lo} < 1")
    if lo >= s.size:
        return 0.0
    return math.sqrt(float(np.sum(s[lo:min(hi, s.size)] ** 2)))


def predicted_perturbation(sigma, current: int, target: int) -> float:
    return _transition(check_spectrum(sigma), current, target)


def qk_predicted_perturbation(sigma_q, sigma_k, current: int, target: int, d: int) -> float:
    """Logit-change bound for moving Q and K between truncation ranks."""
    lo, hi = min(current, target), max(current, target)
    if lo == hi:
        return 0.0
    dq = float(sigma_q[lo]) if lo < len(sigma_q) else 0.0
    dk = float(sigma_k[lo]) if lo < len(sigma_k) else 0.0
    return qk_perturbation_bound(dq, dk, float(sigma_q[0]), float(sigma_k[0]), d)


def safety_mask(candidates: Sequence[int], current: int, sigma, schedule: SafetySchedule, *,
                estimator: str = "spectrum", qk=None, d: int | None = None) -> np.ndarray:
    """Boolean mask over ``candidates``: True where the predicted change fits under epsilon(t)."""
    if len(candidates) == 0:
        raise InvalidSpec("empty candidate set")
    if current not in candidates:
        raise RankOutOfBounds(f"current rank {current} not a candidate")
    eps = schedule.epsilon()
    if estimator == "spectrum":
        sigma = check_spectrum(sigma)
    out = np.zeros(len(candidates), dtype=bool)
    for i, r in enumerate(candidates):
        if r == current:
            out[i] = True
        elif estimator == "spectrum":
            out[i] = _transition(sigma, current, r) <= eps
        elif estimator == "qk_bound":
            if qk is None or d is None:
                raise InvalidSpec("qk_bound estimator needs Q/K spectra and d")
            out[i] = qk_predicted_perturbation(qk[0], qk[1], current, r, d) <= eps
        else:
            raise InvalidSpec(f"unknown safety estimator {estimator!r}")
    return out


# -- reward ------------------------------------------------------------------


@dataclass(frozen=True)
class RewardCoeffs:
    alpha: float = C.ALPHA
    beta: float = C.BETA
    gamma: float = C.GAMMA

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise InvalidSpec("reward coefficients must be nonnegative")


@dataclass(frozen=True)
class RewardBreakdown:
    fidelity_term: float
    flops_term: float
    stability_term: float
    total: float
    alpha: float
    beta: float
    gamma: float

    @classmethod
    def compose(cls, fid, flops_term, stability, coeffs: RewardCoeffs):
        total = coeffs.alpha * fid - coeffs.beta * flops_term - coeffs.gamma * stability
        return cls(fid, flops_term, stability, total, coeffs.alpha, coeffs.beta, coeffs.gamma)


def spectral_reward(sigma, total_energy, r: int, prev: int, n: int, d: int, r_max: int,
                    coeffs: RewardCoeffs, model: FlopsModel = DEFAULT_FLOPS) -> RewardBreakdown:
    """Reward from the spectrum alone; fidelity of an SVD truncation is sqrt(NER)."""
    s = np.asarray(sigma, dtype=np.float64)
    if total_energy <= 0.0:
        log.warning("degenerate segment with zero attention energy")
        fid = 0.0
    else:
        fid = math.sqrt(spectral_energy_ratio(s, min(r, s.size), total_energy))
    flops_term = count_flops(n, d, r, model=model) / count_flops(n, d, r_max, model=model)
    return RewardBreakdown.compose(fid, flops_term, predicted_perturbation(s, prev, r), coeffs)


# -- environment ---------------------------------------------------------------


@dataclass
class EnvConfig:
    candidates: tuple = field(default_factory=default_candidates)
    coeffs: RewardCoeffs = field(default_factory=RewardCoeffs)
    epsilon0: float = C.EPSILON0
    lam: float = C.DECAY
    estimator: str = "spectrum"
    sim_target: str = "attention"
    mask_enabled: bool = True
    reset_each_episode: bool = True
    initial_rank: int | None = None
    materialize: bool = False
    model: FlopsModel = DEFAULT_FLOPS

    def __post_init__(self):
        self.candidates = tuple(int(c) for c in self.candidates)
        if not self.candidates:
            raise InvalidSpec("empty candidate set")
        if list(self.candidates) != sorted(set(self.candidates)):
            raise InvalidSpec("candidates must be strictly increasing")
        if self.estimator not in ("spectrum", "qk_bound"):
            raise InvalidSpec(f"unknown safety estimator {self.estimator!r}")
        if self.sim_target not in ("attention", "outputs"):
            raise InvalidSpec(f"unknown sim_target {self.sim_target!r}")
        if self.initial_rank is None:
            self.initial_rank = self.candidates[0]
        if self.initial_rank not in self.candidates:
            raise InvalidSpec("initial rank must be a candidate")

    @property
    def r_max(self) -> int:
        return self.candidates[-1]


@dataclass(frozen=True)
class StepRecord:
    episode: int
    t: int
    rank: int
    fidelity: float
    flops_term: float
    stability: float
    total: float
    masked_count: int
    flops: int


TRAJECTORY_HEADER = ("episode", "t", "rank", "fidelity", "flops_term", "stability", "total",
                     "masked_count")


def write_trajectory_csv(path, records: Sequence[StepRecord], extra_header=(), extra_rows=None):
    rows = []
    for i, rec in enumerate(records):
        row = [rec.episode, rec.t, rec.rank, rec.fidelity, rec.flops_term, rec.stability,
               rec.total, rec.masked_count]
        if extra_rows is not None:
            row += list(extra_rows[i])
        rows.append(row)
    return write_csv(path, TRAJECTORY_HEADER + tuple(extra_header), rows)


class RankEnv:
    """Episodic environment over one layer's segment sequence.

    The safety schedule's step counter restarts with every episode unless
    ``reset_each_episode`` is off, in which case epsilon keeps annealing
    across episodes.
    """

    def __init__(self, config: EnvConfig | None = None, layer_index: float | None = None):
        self.config = config or EnvConfig()
        self.schedule = SafetySchedule(self.config.epsilon0, self.config.lam)
        self.layer_index = layer_index
        self.segments: list[Segment] = []
        self.pos = 0
        self.prev = self.config.initial_rank
        self.episode = -1
        self.records: list[StepRecord] = []

    # bookkeeping -------------------------------------------------------------
    @property
    def done(self) -> bool:
        return self.pos >= len(self.segments)

    @property
    def current(self) -> Segment:
        return self.segments[self.pos]

    def _usable(self, seg: Segment) -> tuple[int, ...]:
        if self.config.r_max > seg.n:
            raise RankOutOfBounds(f"r_max {self.config.r_max} exceeds sequence length {seg.n}")
        return self.config.candidates

    def state(self) -> RankState:
        seg = self.current
        cands = self._usable(seg)
        sigma, energy = seg.spectrum(self.config.r_max + 1)
        return build_state(None, seg.weights, self.prev, cands, sigma=sigma,
                           total_energy=energy, features=seg.seq_features(),
                           layer=self.layer_index)

    def mask(self) -> np.ndarray:
        cands = self.config.candidates
        if not self.config.mask_enabled:
            return np.ones(len(cands), dtype=bool)
        seg = self.current
        sigma, _ = seg.spectrum(self.config.r_max + 1)
        qk = seg.qk_spectra() if self.config.estimator == "qk_bound" else None
        return safety_mask(cands, self.prev, sigma, self.schedule,
                           estimator=self.config.estimator, qk=qk, d=seg.d)

    # episode API -------------------------------------------------------------
    def reset(self, segments: Sequence[Segment]) -> RankState:
        if not segments:
            raise InvalidSpec("an episode needs at least one segment")
        self.segments = list(segments)
        self.pos = 0
        self.prev = self.config.initial_rank
        self.episode += 1
        if self.config.reset_each_episode:
            self.schedule.t = 0
        return self.state()

    def reward(self, seg: Segment, r: int, prev: int) -> RewardBreakdown:
        cfg = self.config
        sigma, energy = seg.spectrum(cfg.r_max + 1)
        bd = spectral_reward(sigma, energy, r, prev, seg.n, seg.d, cfg.r_max, cfg.coeffs, cfg.model)
        if cfg.sim_target == "outputs":
            inp = seg.attention_input()
            dec = seg.decomposition()
            a = dec.reconstruct()
            fid = fidelity(a @ inp.v, truncate(dec, r).reconstruct() @ inp.v)
            bd = RewardBreakdown.compose(fid, bd.flops_term, bd.stability_term, cfg.coeffs)
        return bd

    def step(self, rank: int):
        """Apply ``rank`` to the current segment.

        Returns ``(reward, next_state, output)``; ``next_state`` is None once the
        episode ends and ``output`` is only materialized when configured.
        """
        if self.done:
            raise InvalidSpec("episode finished; call reset()")
        cfg = self.config
        if rank not in cfg.candidates:
            raise RankOutOfBounds(f"rank {rank} not a candidate")
        mask = self.mask()
        idx = cfg.candidates.index(rank)
        if not mask[idx]:
            raise SafetyViolation(
                f"rank {self.prev}->{rank} exceeds epsilon={self.schedule.epsilon():.6g}"
            )
        seg = self.current
        bd = self.reward(seg, rank, self.prev)
        flops = count_flops(seg.n, seg.d, rank, model=cfg.model)
        out = None
        if cfg.materialize:
            inp = seg.attention_input()
            a_r = truncate(seg.decomposition(), rank).reconstruct()
            out = AttentionOutput(a_r, a_r @ inp.v, flops, rank)
        self.records.append(StepRecord(
            self.episode, self.pos, rank, bd.fidelity_term, bd.flops_term, bd.stability_term,
            bd.total, int(np.sum(~mask)), flops,
        ))
        self.schedule.advance()
        self.prev = rank
        self.pos += 1
        nxt = None if self.done else self.state()
        return bd, nxt, out
