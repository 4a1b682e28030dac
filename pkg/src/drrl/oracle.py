"""Offline greedy rank oracle and a brute-force single-segment reference.

The greedy oracle scores every candidate with the environment's reward and
takes the best, ignoring the safety mask.  It is myopic: the stability term
is charged against its own previous choice, with no lookahead.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .attention import DEFAULT_FLOPS, AttentionInput, FlopsModel, attention_matrix, count_flops
from .attention import fidelity as cosine_fidelity
from .constants import REWARD_TOL
from .env import (
    EnvConfig,
    RankEnv,
    RankState,
    RewardCoeffs,
    Segment,
    StepRecord,
    write_trajectory_csv,
)
from .errors import InvalidSpec
from .policy import StateWindow
from .spectral import svd_full, truncate


def pick_best(rewards, tol: float = REWARD_TOL) -> int:
    """Index of the maximal reward; near-ties (within ``tol``) go to the smaller index."""
    r = np.asarray(rewards, dtype=np.float64)
    return int(np.flatnonzero(r >= r.max() - tol)[0])


@dataclass
class OracleRecord:
    state: RankState
    rank: int
    candidate_rewards: np.ndarray


@dataclass
class OracleTrajectory:
    candidates: tuple
    seed: int
    records: list = field(default_factory=list)
    steps: list = field(default_factory=list)

    @property
    def ranks(self) -> list[int]:
        return [r.rank for r in self.records]

    @property
    def episode_reward(self) -> float:
        return float(sum(s.total for s in self.steps))

    def bc_pairs(self, window: int):
        """(windows, labels) for behavior cloning."""
        if not self.records:
            return np.zeros((0, window, 0)), np.zeros(0, dtype=np.int64)
        width = self.records[0].state.width
        w = StateWindow(window, width)
        xs = [w.push(rec.state.vector()) for rec in self.records]
        ys = [self.candidates.index(rec.rank) for rec in self.records]
        return np.array(xs), np.array(ys, dtype=np.int64)


def greedy_rollout(segments: Sequence[Segment], reward_coeffs: RewardCoeffs | None = None,
                   candidates: Sequence[int] | None = None, *, seed: int = 0,
                   config: EnvConfig | None = None, layer_index: float | None = None,
                   episode: int = 0) -> OracleTrajectory:
    """Per-segment argmax of the reward over all candidates (safety mask ignored)."""
    if not segments:
        raise InvalidSpec("no segments to roll out")
    base = config or EnvConfig()
    cands = tuple(candidates) if candidates is not None else base.candidates
    cfg = EnvConfig(
        candidates=cands,
        coeffs=reward_coeffs if reward_coeffs is not None else base.coeffs,
        epsilon0=base.epsilon0, lam=base.lam, estimator=base.estimator,
        sim_target=base.sim_target, mask_enabled=False, reset_each_episode=True,
        initial_rank=base.initial_rank if config is not None and base.initial_rank in cands
        else None,
        model=base.model,
    )
    env = RankEnv(cfg, layer_index=layer_index)
    env.episode = episode - 1
    state = env.reset(segments)
    traj = OracleTrajectory(cands, seed)
    while state is not None:
        seg = env.current
        rewards = np.array([env.reward(seg, r, env.prev).total for r in cands])
        best = cands[pick_best(rewards)]
        traj.records.append(OracleRecord(state, best, rewards))
        _, state, _ = env.step(best)
    traj.steps = list(env.records)
    return traj


def exhaustive_best_rank(inp: AttentionInput, reward_coeffs: RewardCoeffs,
                         candidates: Sequence[int], prev: int | None = None, *,
                         r_max: int | None = None,
                         model: FlopsModel = DEFAULT_FLOPS) -> tuple[int, float]:
    """Best candidate from explicit reconstructions of every truncation.

    Fidelity is the cosine between matrices, the stability term the Frobenius
    distance to the reconstruction at ``prev`` (zero when ``prev`` is None).
    """
    cands = list(candidates)
    if not cands:
        raise InvalidSpec("empty candidate set")
    a = attention_matrix(inp)
    dec = svd_full(a)
    n, d = inp.n, inp.head_dim
    top = r_max if r_max is not None else max(cands)
    denom = count_flops(n, d, top, model=model)
    a_prev = truncate(dec, prev).reconstruct() if prev is not None else None
    rewards = []
    for r in cands:
        a_r = truncate(dec, r).reconstruct()
        fid = cosine_fidelity(a, a_r)
        stab = 0.0 if a_prev is None else float(np.linalg.norm(a_r - a_prev))
        rewards.append(reward_coeffs.alpha * fid
                       - reward_coeffs.beta * count_flops(n, d, r, model=model) / denom
                       - reward_coeffs.gamma * stab)
    i = pick_best(rewards)
    return cands[i], float(rewards[i])


def write_oracle_csv(path, trajectories: Sequence[OracleTrajectory]):
    """Trajectory columns followed by one reward column per candidate."""
    if not trajectories:
        return write_trajectory_csv(path, [])
    cands = trajectories[0].candidates
    steps: list[StepRecord] = []
    wide = []
    for tr in trajectories:
        steps += tr.steps
        wide += [rec.candidate_rewards for rec in tr.records]
    return write_trajectory_csv(path, steps, [f"reward_r{c}" for c in cands], wide)
