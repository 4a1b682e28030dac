import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from drrl import policy as P
from drrl.constants import GRAD_FD_STEP, GRAD_REL_TOL
from drrl.env import EnvConfig, RewardCoeffs, WorkloadSpec, bimodal_profile, generate_segments
from drrl.errors import InvalidParams, InvalidSpec, SafetyDeadlock, TrainingDiverged
from drrl.oracle import greedy_rollout

from oracles import numeric_grad, relative_error

# recorded from the first verified run of init_params(6, 4, window=3, hidden=5, seed=42)
# on default_rng(1).standard_normal((3, 6))
GOLDEN_MLP = ([-0.7382951309150694, -0.5574352628206646, 0.3223599014325693, -0.8188589362651589],
              1.35727110694606)
GOLDEN_ATTN = ([0.013669611012626485, -0.5387233860401193, -0.6623990319614734,
                0.7574798553197585], -0.5181216127685423)

ENCODERS = ("mlp", "attention")


def probe(encoder, seed=0, b=6, window=3, dim=5, actions=4, hidden=4):
    rng = np.random.default_rng(seed)
    params = P.init_params(dim, actions, window=window, hidden=hidden, encoder=encoder,
                           seed=seed + 1)
    # push weights off their init so every nonlinearity is exercised
    params = params.with_tensors({k: v + 0.3 * rng.standard_normal(v.shape)
                                  for k, v in params.tensors.items()})
    x = rng.standard_normal((b, window, dim))
    return params, x, rng


def probe_batch(params, x, rng, clip=0.2):
    logits, _, _ = P.forward_batch(params, x)
    masks = rng.random(logits.shape) < 0.7
    masks[:, 0] = True
    acts = np.array([rng.choice(np.flatnonzero(m)) for m in masks])
    logp = P.masked_log_softmax(logits, masks)[np.arange(len(acts)), acts]
    # old log-probs shifted so ratios land on both sides of the clip range
    old = logp + rng.uniform(-0.5, 0.5, len(acts))
    return P.PPOBatch(x, acts, old, rng.standard_normal(len(acts)),
                      rng.standard_normal(len(acts)), masks)


def test_golden_logits():
    x = np.random.default_rng(1).standard_normal((3, 6))
    for enc, (gl, gv) in zip(ENCODERS, (GOLDEN_MLP, GOLDEN_ATTN)):
        p = P.init_params(6, 4, window=3, hidden=5, seed=42, encoder=enc)
        logits, value = P.forward(p, x)
        np.testing.assert_allclose(logits, gl, rtol=1e-12, atol=1e-14)
        assert value == pytest.approx(gv, rel=1e-12)


@pytest.mark.parametrize("encoder", ENCODERS)
def test_zero_weights_uniform(encoder):
    p = P.zero_params(5, 7, window=2, hidden=3, encoder=encoder)
    logits, value = P.forward(p, np.ones((2, 5)))
    assert np.all(logits == 0.0) and value == 0.0


@pytest.mark.parametrize("encoder", ENCODERS)
def test_forward_deterministic_and_padded(encoder):
    p, x, _ = probe(encoder)
    w = np.vstack([x[0, 1], x[0, 1]])
    a = P.forward(p, w)
    b = P.forward(p, w)
    assert np.array_equal(a[0], b[0]) and a[1] == b[1]
    padded = np.vstack([np.zeros((1, 5)), w])
    assert np.array_equal(P.forward(p, padded)[0], a[0])


def test_forward_shape_errors():
    p, _, _ = probe("mlp")
    with pytest.raises(InvalidParams):
        P.forward(p, np.zeros((4, 5)))
    with pytest.raises(InvalidParams):
        P.forward(p, np.zeros((2, 6)))
    with pytest.raises(InvalidParams):
        P.PolicyParams({}, "mlp", 3, 5, 4, 4)


# -- sampling ---------------------------------------------------------------------


def test_uniform_sampling_frequencies():
    rng = np.random.default_rng(0)
    k, draws = 5, 10_000
    counts = np.bincount([P.sample_action(np.zeros(k), None, rng)[0] for _ in range(draws)],
                         minlength=k)
    sd = np.sqrt(draws * (1 / k) * (1 - 1 / k))
    assert np.all(np.abs(counts - draws / k) < 3 * sd)


def test_forced_action():
    mask = np.array([False, False, True, False])
    idx, logp = P.sample_action([5.0, 1.0, -3.0, 9.0], mask, np.random.default_rng(0))
    assert idx == 2 and logp == 0.0


def test_softmax_values():
    np.testing.assert_allclose(P.masked_softmax([1.0, 2.0, 3.0]), [0.0900, 0.2447, 0.6652],
                               atol=5e-5)


def test_deadlock():
    with pytest.raises(SafetyDeadlock):
        P.sample_action([0.0, 1.0], [False, False], np.random.default_rng(0))
    with pytest.raises(SafetyDeadlock):
        P.greedy_action([0.0, 1.0], [False, False])


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-30, 30), min_size=2, max_size=12), st.integers(0, 2 ** 32 - 1))
def test_probability_conservation(logits, seed):
    rng = np.random.default_rng(seed)
    mask = rng.random(len(logits)) < 0.5
    mask[rng.integers(len(logits))] = True
    p = P.masked_softmax(logits, mask)
    assert abs(p.sum() - 1.0) < 1e-12
    assert np.all(p[~mask] == 0.0)


def test_masked_arms_never_drawn():
    rng = np.random.default_rng(3)
    logits = np.array([10.0, 0.0, 10.0, -5.0, 10.0])
    mask = np.array([False, True, False, True, True])
    drawn = np.array([P.sample_action(logits, mask, rng)[0] for _ in range(100_000)])
    assert not np.any(np.isin(drawn, np.flatnonzero(~mask)))


# -- gradients ------------------------------------------------------------------------


@pytest.mark.parametrize("encoder", ENCODERS)
def test_bc_gradient(encoder):
    params, x, rng = probe(encoder)
    labels = rng.integers(4, size=x.shape[0])
    _, grads = P.bc_loss_and_grad(params, x, labels)
    for name in params.names:
        num = numeric_grad(lambda p: P.bc_loss_and_grad(p, x, labels)[0], params, name,
                           GRAD_FD_STEP)
        assert relative_error(grads[name], num) < GRAD_REL_TOL, name


@pytest.mark.parametrize("encoder", ENCODERS)
def test_ppo_gradient(encoder):
    params, x, rng = probe(encoder, seed=5)
    batch = probe_batch(params, x, rng)
    _, grads, _ = P.ppo_loss_and_grad(params, batch, 0.2, 0.5, 0.01)
    for name in params.names:
        num = numeric_grad(lambda p: P.ppo_loss_and_grad(p, batch, 0.2, 0.5, 0.01)[0],
                           params, name, GRAD_FD_STEP)
        assert relative_error(grads[name], num) < GRAD_REL_TOL, name


def test_masked_logits_get_no_gradient():
    params, x, rng = probe("mlp", seed=2)
    batch = probe_batch(params, x, rng)
    # bp's gradient is the column sum of dlogits; a column masked in every row gets none
    masks = batch.masks.copy()
    masks[:, 3] = False
    batch.masks = masks
    batch.actions = np.where(batch.actions == 3, 0, batch.actions)
    _, grads, _ = P.ppo_loss_and_grad(params, batch)
    assert grads["bp"][3] == 0.0


# -- behavior cloning ---------------------------------------------------------------------


def test_bc_memorizes_single_pair():
    p = P.init_params(5, 4, window=2, hidden=8, seed=0)
    x = np.tile(np.arange(10.0).reshape(1, 2, 5) / 10, (8, 1, 1))
    y = np.full(8, 2)
    p = P.bc_pretrain(p, (x, y), 100, 1e-2)
    assert P.greedy_action(P.forward(p, x[0])[0]) == 2


def test_bc_zero_epochs_noop():
    p = P.init_params(5, 4, window=2, seed=0)
    q = P.bc_pretrain(p, (np.zeros((3, 2, 5)), np.zeros(3, dtype=int)), 0)
    assert all(np.array_equal(p.tensors[k], q.tensors[k]) for k in p.names)


def test_bc_errors():
    p = P.init_params(5, 4, window=2, seed=0)
    with pytest.raises(InvalidSpec):
        P.bc_pretrain(p, (np.zeros((0, 2, 5)), np.zeros(0, dtype=int)), 3)
    with pytest.raises(InvalidSpec):
        P.bc_pretrain(p, (np.zeros((1, 2, 5)), np.array([4])), 3)


def oracle_dataset(count, window=4, seed=0):
    cands = (16, 20, 24, 28, 32)
    cfg = EnvConfig(candidates=cands, coeffs=RewardCoeffs(1.0, 0.5, 0.02))
    xs, ys = [], []
    for i in range(count):
        prof = bimodal_profile(4, 0.1, 0.6, 0.5, seed=seed + i)
        segs = generate_segments(WorkloadSpec(64, 8, 16, 4, prof, seed=seed + i))
        x, y = greedy_rollout(segs, config=cfg, seed=seed + i).bc_pairs(window)
        xs.append(x)
        ys.append(y)
    return np.concatenate(xs), np.concatenate(ys), len(cands)


def test_bc_on_oracle_trajectories():
    x, y, k = oracle_dataset(200)
    p = P.init_params(x.shape[2], k, window=4, hidden=32, seed=7)
    hist = []
    p = P.bc_pretrain(p, (x, y), 300, 3e-3, seed=1, history=hist)
    assert hist[-1] < hist[0]
    logits, _, _ = P.forward_batch(p, x)
    acc = float(np.mean(np.argmax(logits, axis=1) == y))
    assert acc >= 0.8


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_bc_diverged_keeps_last_good():
    p = P.init_params(5, 4, window=2, seed=0)
    x = np.full((2, 2, 5), np.inf)
    with pytest.raises(TrainingDiverged) as info:
        P.bc_pretrain(p, (x, np.zeros(2, dtype=int)), 2)
    assert info.value.last_good is p


# -- PPO ----------------------------------------------------------------------------------


def rollout_like(params, rng, episodes=3, steps=5, zero=False):
    trajs = []
    for _ in range(episodes):
        tr = P.Trajectory()
        for _ in range(steps):
            w = rng.standard_normal((params.window, params.state_dim))
            logits, value = P.forward(params, w)
            mask = np.ones(params.n_actions, dtype=bool)
            a, lp = P.sample_action(logits, mask, rng)
            tr.add(w, a, lp, 0.0 if zero else rng.standard_normal(), 0.0 if zero else value, mask)
        trajs.append(tr)
    return trajs


def test_first_epoch_ratios_are_one():
    params, _, rng = probe("mlp", seed=3)
    stats = {}
    P.ppo_update(params, rollout_like(params, rng), epochs=3, stats=stats)
    assert stats["first_ratio_deviation"] < 1e-10
    assert len(stats["losses"]) == 3


def test_zero_advantage_leaves_params():
    params, _, rng = probe("attention", seed=4)
    trajs = rollout_like(params, rng, zero=True)
    new = P.ppo_update(params, trajs, epochs=3, value_coef=0.0, entropy_coef=0.0)
    assert all(np.array_equal(params.tensors[k], new.tensors[k]) for k in params.names)


def test_zero_clip_blocks_favoured_moves():
    # with clip 0 the clipped branch is constant; the min picks it wherever the ratio
    # has already moved in the direction the advantage rewards
    params, x, rng = probe("mlp", seed=8)
    batch = probe_batch(params, x, rng)
    _, _, info = P.ppo_loss_and_grad(params, batch, 0.0, 0.0, 0.0)
    favoured = (info["ratio"] - 1.0) * batch.advantages > 0
    assert favoured.any() and (~favoured).any()
    sub = P.PPOBatch(batch.x[favoured], batch.actions[favoured], batch.old_logp[favoured],
                     batch.advantages[favoured], batch.returns[favoured], batch.masks[favoured])
    _, grads, _ = P.ppo_loss_and_grad(params, sub, 0.0, 0.0, 0.0)
    assert all(np.all(g == 0.0) for g in grads.values())
    _, grads, _ = P.ppo_loss_and_grad(params, batch, 0.0, 0.0, 0.0)
    assert any(np.any(g != 0.0) for g in grads.values())


def test_gae_matches_hand_recursion():
    adv, ret = P.compute_gae([1.0, 0.0, 2.0], [0.5, 0.2, 0.1], gamma=0.9, lam=0.8)
    d2 = 2.0 - 0.1
    d1 = 0.0 + 0.9 * 0.1 - 0.2
    d0 = 1.0 + 0.9 * 0.2 - 0.5
    a2 = d2
    a1 = d1 + 0.72 * a2
    a0 = d0 + 0.72 * a1
    np.testing.assert_allclose(adv, [a0, a1, a2], atol=1e-15)
    np.testing.assert_allclose(ret, adv + [0.5, 0.2, 0.1], atol=1e-15)


def test_batch_normalizes_advantages():
    params, _, rng = probe("mlp", seed=9)
    batch = P.make_batch(rollout_like(params, rng))
    assert abs(batch.advantages.mean()) < 1e-12
    assert batch.advantages.std() == pytest.approx(1.0, abs=1e-6)


def test_ppo_seeded_reproducible():
    def run():
        params, _, rng = probe("mlp", seed=11)
        opt = P.Adam()
        for _ in range(3):
            params = P.ppo_update(params, rollout_like(params, rng), optimizer=opt)
        return params.flat()
    assert np.array_equal(run(), run())


def test_value_warmup_touches_value_head_only():
    params, _, rng = probe("mlp", seed=12)
    trajs = rollout_like(params, rng)
    new = P.value_warmup(params, trajs, 20)
    for k in params.names:
        same = np.array_equal(params.tensors[k], new.tensors[k])
        assert same == (k not in ("wval", "bval")), k


def test_trajectory_guards():
    tr = P.Trajectory()
    with pytest.raises(InvalidSpec):
        tr.add(np.zeros((1, 1)), 0, -0.1, 0.0, 0.0, [False, True])
    with pytest.raises(InvalidSpec):
        tr.add(np.zeros((1, 1)), 1, 0.5, 0.0, 0.0, [False, True])


# -- checkpoints ------------------------------------------------------------------------------


@pytest.mark.parametrize("encoder", ENCODERS)
def test_checkpoint_roundtrip(tmp_path, encoder):
    params, _, _ = probe(encoder)
    path = P.save_checkpoint(tmp_path / "p.bin", params, extra={"note": 1})
    raw = path.read_bytes()
    assert raw[:4] == b"DRRL"
    loaded, extra = P.load_checkpoint(path, with_extra=True)
    assert extra == {"note": 1}
    assert loaded.meta() == params.meta()
    assert all(np.array_equal(loaded.tensors[k], params.tensors[k]) for k in params.names)


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "bad.bin"
    path.write_bytes(b"NOPE" + b"\0" * 16)
    with pytest.raises(InvalidParams):
        P.load_checkpoint(path)


def test_params_csv(tmp_path):
    params, _, _ = probe("mlp")
    path = P.export_params_csv(tmp_path / "p.csv", params)
    lines = path.read_text().splitlines()
    assert len(lines) == 1 + params.flat().size
