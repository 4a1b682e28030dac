"""Experiment drivers: workload pools, training, baselines, ablations and the
CSV reports built on top of them."""
from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .attention import FlopsModel, count_flops
from .config import ExperimentConfig, VARIANTS, METHODS, derive_seed
from .csvio import write_csv
from .env import (
    EnvConfig,
    RankEnv,
    RewardBreakdown,
    RewardCoeffs,
    Segment,
    StepRecord,
    WorkloadSpec,
    bimodal_profile,
    default_candidates,
    generate_segments,
    ner_profile,
    predicted_perturbation,
    state_width,
    write_trajectory_csv,
)
from .errors import InvalidSpec, MissingArtifact
from .oracle import greedy_rollout
from .policy import (
    Adam,
    PolicyParams,
    StateWindow,
    Trajectory,
    bc_pretrain,
    forward,
    greedy_action,
    init_params,
    load_checkpoint,
    masked_log_softmax,
    ppo_update,
    sample_action,
    value_warmup,
)
from .spectral import rank_transition_norm

log = logging.getLogger(__name__)


# -- configuration plumbing ------------------------------------------------------


def candidates_of(cfg: ExperimentConfig) -> tuple[int, ...]:
    a = cfg.actions
    return default_candidates(a.r_min, a.r_max, a.step)


def coeffs_of(cfg: ExperimentConfig) -> RewardCoeffs:
    r = cfg.reward
    return RewardCoeffs(r.alpha, r.beta, r.gamma)


def env_config(cfg: ExperimentConfig, *, coeffs: RewardCoeffs | None = None,
               mask_enabled: bool = True, initial_rank: int | None = None) -> EnvConfig:
    s = cfg.safety
    return EnvConfig(
        candidates=candidates_of(cfg),
        coeffs=coeffs if coeffs is not None else coeffs_of(cfg),
        epsilon0=s.epsilon0,
        lam=cfg.get("safety", "lambda"),
        estimator=s.estimator,
        sim_target=cfg.reward.sim_target,
        mask_enabled=mask_enabled,
        reset_each_episode=s.reset_each_episode,
        initial_rank=initial_rank,
        model=FlopsModel(cfg.flops.svd_overhead_coeff),
    )


def layer_index(layer: int, layers: int) -> float | None:
    if layers < 2:
        return None
    return layer / (layers - 1)


# -- workload pools ----------------------------------------------------------------


def workload_spec(cfg: ExperimentConfig, pool: str, i: int, seq_len: int | None = None,
                  num_segments: int | None = None) -> WorkloadSpec:
    w = cfg.workload
    n = seq_len or w.seq_len
    e = num_segments or w.num_segments
    seed = derive_seed(cfg.run.seed, pool, i)
    prof = bimodal_profile(e, w.tau_dense, w.tau_sparse, w.stay_prob, seed=seed)
    return WorkloadSpec(n, w.head_dim, n // e, e, prof, seed=seed, amplitude=w.amplitude)


@lru_cache(maxsize=4096)
def _segments(spec: WorkloadSpec, layer: int, scale: float) -> tuple:
    # cached so spectra computed once are shared by every run in the process
    return tuple(generate_segments(spec, layer, scale))


def episodes(cfg: ExperimentConfig, pool: str, count: int, seq_len: int | None = None,
             num_segments: int | None = None) -> list:
    """Episode list of ``(segments, layer_index)``; each workload yields one per layer."""
    w = cfg.workload
    out = []
    for i in range(count):
        spec = workload_spec(cfg, pool, i, seq_len, num_segments)
        for layer in range(w.layers):
            out.append((_segments(spec, layer, w.layer_tau_scale), layer_index(layer, w.layers)))
    return out


def policy_state_dim(cfg: ExperimentConfig) -> int:
    return state_width(len(candidates_of(cfg)), cfg.workload.layers >= 2)


# -- episode runners ---------------------------------------------------------------


def _episode_with(chooser: Callable, segments, econf: EnvConfig, lidx, episode: int):
    env = RankEnv(econf, layer_index=lidx)
    env.episode = episode - 1
    state = env.reset(segments)
    while state is not None:
        _, state, _ = env.step(chooser(env, state))
    return env.records


def policy_rollout(params: PolicyParams, segments, econf: EnvConfig, lidx=None, *,
                   rng=None, greedy: bool = False, episode: int = 0):
    """Run one episode with the policy; returns (Trajectory, step records)."""
    env = RankEnv(econf, layer_index=lidx)
    env.episode = episode - 1
    cands = econf.candidates
    state = env.reset(segments)
    win = StateWindow(params.window, params.state_dim)
    traj = Trajectory()
    while state is not None:
        x = win.push(state.vector())
        logits, value = forward(params, x)
        mask = env.mask()
        if greedy:
            a = greedy_action(logits, mask)
            logp = float(masked_log_softmax(logits, mask)[a])
        else:
            a, logp = sample_action(logits, mask, rng)
        bd, state, _ = env.step(cands[a])
        traj.add(x, a, logp, bd.total, value, mask)
    return traj, env.records


def full_rank_episode(segments, econf: EnvConfig, episode: int = 0) -> list[StepRecord]:
    """Untruncated attention: fidelity 1 at the full count; the first step pays
    the jump from the initial rank to full rank."""
    recs = []
    prev = econf.initial_rank
    for t, seg in enumerate(segments):
        sigma, energy = seg.spectrum(seg.n)
        flops = count_flops(seg.n, seg.d, model=econf.model)
        ft = flops / count_flops(seg.n, seg.d, econf.r_max, model=econf.model)
        stab = 0.0 if prev is None else rank_transition_norm(sigma, prev, sigma.size)
        bd = RewardBreakdown.compose(1.0, ft, stab, econf.coeffs)
        recs.append(StepRecord(episode, t, seg.n, 1.0, ft, stab, bd.total, 0, flops))
        prev = None
    return recs


def adaptive_rank(seg: Segment, candidates: Sequence[int], threshold: float) -> int:
    sigma, energy = seg.spectrum(max(candidates) + 1)
    prof = ner_profile(sigma, candidates, energy)
    hit = np.flatnonzero(prof >= threshold)
    return candidates[int(hit[0])] if hit.size else candidates[-1]


# -- training ------------------------------------------------------------------------


@dataclass
class TrainLog:
    bc_losses: list = field(default_factory=list)
    ppo_rows: list = field(default_factory=list)  # (loss, mean reward, mean rank, masked rate)


def oracle_trajectories(cfg: ExperimentConfig, coeffs: RewardCoeffs | None = None):
    econf = env_config(cfg, coeffs=coeffs)
    out = []
    for k, (segs, lidx) in enumerate(episodes(cfg, "train", cfg.workload.train_pool)):
        out.append(greedy_rollout(segs, econf.coeffs, econf.candidates, seed=cfg.run.seed,
                                  config=econf, layer_index=lidx, episode=k))
    return out


def train_policy(cfg: ExperimentConfig, *, coeffs: RewardCoeffs | None = None,
                 mask_enabled: bool = True, log_out: TrainLog | None = None,
                 tag: str = "policy") -> PolicyParams:
    """Behavior cloning on greedy-oracle labels, then PPO under the safety mask."""
    t = cfg.train
    p = cfg.policy
    coeffs = coeffs if coeffs is not None else coeffs_of(cfg)
    tl = log_out if log_out is not None else TrainLog()
    params = init_params(policy_state_dim(cfg), len(candidates_of(cfg)), window=p.window,
                         hidden=p.hidden, encoder=p.encoder,
                         seed=derive_seed(cfg.run.seed, tag, "init"))
    xs, ys = [], []
    for tr in oracle_trajectories(cfg, coeffs):
        x, y = tr.bc_pairs(p.window)
        xs.append(x)
        ys.append(y)
    params = bc_pretrain(params, (np.concatenate(xs), np.concatenate(ys)), t.bc_epochs,
                         t.bc_lr, seed=derive_seed(cfg.run.seed, tag, "bc"),
                         history=tl.bc_losses)

    econf = env_config(cfg, coeffs=coeffs, mask_enabled=mask_enabled)
    pool = episodes(cfg, "train", cfg.workload.train_pool)
    rng = np.random.default_rng(derive_seed(cfg.run.seed, tag, "ppo"))
    if t.ppo_updates == 0:
        return params
    # a fixed baseline (the cloned policy's mean step reward) keeps returns near zero
    shift = 0.0
    if t.center_rewards:
        shift = float(np.mean([r for segs, lidx in pool
                               for r in policy_rollout(params, segs, econf, lidx,
                                                       greedy=True)[0].rewards]))

    def collect(count):
        trajs, recs = [], []
        for _ in range(count):
            segs, lidx = pool[int(rng.integers(len(pool)))]
            tr, rr = policy_rollout(params, segs, econf, lidx, rng=rng)
            tr.rewards = [r - shift for r in tr.rewards]
            trajs.append(tr)
            recs += rr
        return trajs, recs

    if t.value_warmup:
        params = value_warmup(params, collect(len(pool))[0], t.value_warmup,
                              gamma_discount=t.discount, gae_lambda=t.gae_lambda)
    opt = Adam(t.lr)
    for u in range(t.ppo_updates):
        trajs, recs = collect(t.episodes_per_update)
        ranks = [r.rank for r in recs]
        masked = sum(r.masked_count for r in recs)
        steps = len(recs)
        stats = {}
        params = ppo_update(params, trajs, t.clip, t.discount, t.gae_lambda, t.ppo_epochs, t.lr,
                            value_coef=t.value_coef, entropy_coef=t.entropy_coef,
                            optimizer=opt, stats=stats)
        tl.ppo_rows.append((stats["losses"][0], sum(r.total for r in recs) / len(trajs),
                            float(np.mean(ranks)),
                            masked / (steps * len(econf.candidates))))
    return params


def emit_training_dynamics(tl: TrainLog, path):
    rows = []
    for i, loss in enumerate(tl.bc_losses):
        rows.append([i, "bc", loss, math.nan, math.nan, math.nan])
    for i, (loss, rew, rank, mrate) in enumerate(tl.ppo_rows):
        rows.append([i, "ppo", loss, rew, rank, mrate])
    return write_csv(path, ("update", "phase", "loss", "mean_episode_reward", "mean_rank",
                            "masked_rate"), rows)


# -- baselines -----------------------------------------------------------------------


@dataclass(frozen=True)
class BenchRow:
    method: str
    mean_fidelity: float
    mean_reward: float
    total_flops: int
    seq_len: int
    seed: int
    mean_rank: float
    volatility: float

    HEADER = ("method", "mean_fidelity", "mean_reward", "total_flops", "seq_len", "seed",
              "mean_rank", "volatility")

    def row(self):
        return [self.method, self.mean_fidelity, self.mean_reward, self.total_flops,
                self.seq_len, self.seed, self.mean_rank, self.volatility]


def summarize(method: str, records: list[list[StepRecord]], seq_len: int, seed: int) -> BenchRow:
    flat = [r for ep in records for r in ep]
    if not flat:
        raise InvalidSpec("no steps to summarize")
    vol = []
    for ep in records:
        ranks = [r.rank for r in ep]
        vol += [abs(b - a) for a, b in zip(ranks, ranks[1:])]
    total_flops = int(sum(r.flops for r in flat))
    if total_flops <= 0:
        raise InvalidSpec("FLOPs must be positive")
    return BenchRow(
        method,
        float(np.mean([r.fidelity for r in flat])),
        float(np.mean([sum(r.total for r in ep) for ep in records])),
        total_flops,
        seq_len,
        seed,
        float(np.mean([r.rank for r in flat])),
        float(np.mean(vol)) if vol else 0.0,
    )


def method_records(method: str, cfg: ExperimentConfig, eps, params: PolicyParams | None = None,
                   *, econf: EnvConfig | None = None) -> list[list[StepRecord]]:
    """Step records of ``method`` over the episode list ``eps``."""
    if method not in METHODS:
        raise InvalidSpec(f"unknown method {method!r}")
    base = econf or env_config(cfg)
    free = env_config(cfg, coeffs=base.coeffs, mask_enabled=False)
    cands = base.candidates
    out = []
    if method == "random_rank":
        rng = np.random.default_rng(derive_seed(cfg.run.seed, "random_rank"))
    for k, (segs, lidx) in enumerate(eps):
        if method == "full_rank":
            recs = full_rank_episode(segs, free, k)
        elif method == "fixed_low_rank":
            r = cfg.bench.fixed_rank
            if r not in cands:
                raise InvalidSpec(f"fixed rank {r} is not a candidate")
            recs = _episode_with(lambda env, s: r, segs, free, lidx, k)
        elif method == "adaptive_svd":
            thr = cfg.bench.energy_threshold
            recs = _episode_with(lambda env, s: adaptive_rank(env.current, cands, thr),
                                 segs, free, lidx, k)
        elif method == "random_rank":
            recs = _episode_with(lambda env, s: cands[int(rng.integers(len(cands)))],
                                 segs, free, lidx, k)
        elif method == "oracle":
            recs = greedy_rollout(segs, base.coeffs, cands, config=base, layer_index=lidx,
                                  episode=k).steps
        else:
            if params is None:
                raise MissingArtifact("dr_rl needs a trained checkpoint")
            recs = policy_rollout(params, segs, base, lidx, greedy=True, episode=k)[1]
        out.append(recs)
    return out


def run_baseline(method: str, cfg: ExperimentConfig, params: PolicyParams | None = None,
                 checkpoint=None) -> BenchRow:
    if method not in METHODS:
        raise InvalidSpec(f"unknown method {method!r}")
    if method == "dr_rl" and params is None:
        if checkpoint is None or not Path(checkpoint).exists():
            raise MissingArtifact(f"checkpoint not found: {checkpoint}")
        params = load_checkpoint(checkpoint)
    eps = episodes(cfg, "eval", cfg.workload.eval_episodes)
    recs = method_records(method, cfg, eps, params)
    return summarize(method, recs, cfg.workload.seq_len, cfg.run.seed)


def _records_cell(args):
    method, cfg, params = args
    eps = episodes(cfg, "eval", cfg.workload.eval_episodes)
    return method_records(method, cfg, eps, params)


def evaluate_methods(cfg: ExperimentConfig, methods, params=None, parallel: int = 1) -> dict:
    """Step records per method on the eval pool, keyed in the order given."""
    methods = list(methods)
    for m in methods:
        if m not in METHODS:
            raise InvalidSpec(f"unknown method {m!r}")
    if "dr_rl" in methods and params is None:
        raise MissingArtifact("dr_rl needs a trained checkpoint")
    recs = _map(_records_cell, [(m, cfg, params) for m in methods], parallel)
    return dict(zip(methods, recs))


def run_baselines(cfg: ExperimentConfig, methods, params=None, parallel: int = 1) -> list[BenchRow]:
    return [summarize(m, recs, cfg.workload.seq_len, cfg.run.seed)
            for m, recs in evaluate_methods(cfg, methods, params, parallel).items()]


def _map(fn, cells, parallel: int):
    # results come back in cell order whatever the completion order
    if parallel > 1 and len(cells) > 1:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            return list(pool.map(fn, cells))
    return [fn(c) for c in cells]


def trajectory_rows(records_by_method: dict) -> tuple:
    header = ("method",) + tuple(h for h in ("episode", "t", "rank", "fidelity", "flops_term",
                                             "stability", "total", "masked_count"))
    rows = []
    for m, eps in records_by_method.items():
        for ep in eps:
            for r in ep:
                rows.append([m, r.episode, r.t, r.rank, r.fidelity, r.flops_term, r.stability,
                             r.total, r.masked_count])
    return header, rows


# -- ablations ---------------------------------------------------------------------------


def variant_settings(variant: str, cfg: ExperimentConfig):
    """(training coefficients, mask enabled) for an ablation variant."""
    base = coeffs_of(cfg)
    if variant in ("full", "no_rl"):
        return base, True
    if variant == "no_perturbation":
        return RewardCoeffs(base.alpha, base.beta, 0.0), False
    if variant == "no_reward_shaping":
        return RewardCoeffs(base.alpha, 0.0, base.gamma), True
    raise InvalidSpec(f"unknown ablation variant {variant!r}")


def run_ablation(variant: str, cfg: ExperimentConfig,
                 params: PolicyParams | None = None) -> BenchRow:
    """Evaluate an ablation on the eval pool.

    Variants are trained under their own reward and mask settings but every
    row reports reward under the base coefficients so rows are comparable.
    ``params`` supplies an already trained full policy.
    """
    if variant not in VARIANTS:
        raise InvalidSpec(f"unknown ablation variant {variant!r}")
    coeffs, mask = variant_settings(variant, cfg)
    eps = episodes(cfg, "eval", cfg.workload.eval_episodes)
    if variant == "no_rl":
        r = cfg.bench.fixed_rank
        econf = env_config(cfg, initial_rank=r)
        recs = [_episode_with(lambda env, s: r, segs, econf, lidx, k)
                for k, (segs, lidx) in enumerate(eps)]
    else:
        if variant == "full" and params is not None:
            pol = params
        else:
            pol = train_policy(cfg, coeffs=coeffs, mask_enabled=mask,
                               tag="policy" if variant == "full" else f"ablation-{variant}")
        econf = env_config(cfg, mask_enabled=mask)
        recs = [policy_rollout(pol, segs, econf, lidx, greedy=True, episode=k)[1]
                for k, (segs, lidx) in enumerate(eps)]
    return summarize(variant, recs, cfg.workload.seq_len, cfg.run.seed)


def _ablation_cell(args):
    variant, cfg, params = args
    return run_ablation(variant, cfg, params)


def run_ablations(cfg: ExperimentConfig, variants, params=None, parallel: int = 1):
    for v in variants:
        if v not in VARIANTS:
            raise InvalidSpec(f"unknown ablation variant {v!r}")
    return _map(_ablation_cell, [(v, cfg, params) for v in variants], parallel)


# -- FLOPs scaling ------------------------------------------------------------------------


def loglog_slope(xs, ys) -> float:
    return float(np.polyfit(np.log(np.asarray(xs, float)), np.log(np.asarray(ys, float)), 1)[0])


def flops_scaling_sweep(lengths, cfg: ExperimentConfig, params: PolicyParams):
    """Per-length mean episode FLOPs for full rank and the policy, plus log-log fits."""
    rows = []
    b = cfg.bench
    econf = env_config(cfg)
    for n in lengths:
        eps = episodes(cfg, f"flops-{n}", b.flops_episodes, seq_len=n,
                       num_segments=b.flops_segments)
        # the full path's count needs no spectrum
        full = [sum(count_flops(seg.n, seg.d, model=econf.model) for seg in segs)
                for segs, _ in eps]
        pol = method_records("dr_rl", cfg, eps, params, econf=econf)
        dr = [sum(r.flops for r in ep) for ep in pol]
        ranks = [r.rank for ep in pol for r in ep]
        fm, dm = float(np.mean(full)), float(np.mean(dr))
        rows.append([n, fm, dm, dm / fm, float(np.mean(ranks))])
    fits = {
        "full_rank": loglog_slope([r[0] for r in rows], [r[1] for r in rows]),
        "dr_rl": loglog_slope([r[0] for r in rows], [r[2] for r in rows]),
    }
    return rows, fits


FLOPS_HEADER = ("seq_len", "full_flops", "dr_rl_flops", "ratio", "dr_rl_mean_rank")


def write_flops_csv(out_dir, rows, fits):
    out_dir = Path(out_dir)
    a = write_csv(out_dir / "flops_scaling.csv", FLOPS_HEADER, rows)
    b = write_csv(out_dir / "flops_fit.csv", ("series", "loglog_slope"),
                  [[k, v] for k, v in fits.items()])
    return a, b


# -- perturbation grid and heatmap -----------------------------------------------------------


def perturbation_grid(spectrum, candidates) -> np.ndarray:
    """|C| x |C| matrix of ||A_r' - A_r||_F from the spectrum."""
    c = list(candidates)
    g = np.zeros((len(c), len(c)))
    for i, r in enumerate(c):
        for j, rp in enumerate(c):
            g[i, j] = predicted_perturbation(spectrum, r, rp)
    return g


def write_grid_csv(path, grid, candidates):
    header = ("rank",) + tuple(f"r{c}" for c in candidates)
    return write_csv(path, header, [[c] + list(row) for c, row in zip(candidates, grid)])


def rank_heatmap(cfg: ExperimentConfig, params: PolicyParams | None = None,
                 method: str = "dr_rl", workload: int = 0) -> np.ndarray:
    """Layers x segments grid of chosen ranks on one eval workload."""
    w = cfg.workload
    if w.layers < 2:
        log.warning("single-layer config: heatmap has one row")
    spec = workload_spec(cfg, "eval", workload)
    eps = [(_segments(spec, l, w.layer_tau_scale), layer_index(l, w.layers))
           for l in range(w.layers)]
    recs = method_records(method, cfg, eps, params)
    return np.array([[r.rank for r in ep] for ep in recs])


def emit_rank_heatmap(path, grid):
    grid = np.atleast_2d(grid)
    if grid.shape[0] < 2:
        log.warning("single-layer heatmap")
    header = ("layer",) + tuple(f"seg{j}" for j in range(grid.shape[1]))
    return write_csv(path, header, [[i] + [int(v) for v in row] for i, row in enumerate(grid)])


def write_bench_csv(path, rows: Sequence[BenchRow]):
    return write_csv(path, BenchRow.HEADER, [r.row() for r in rows])
