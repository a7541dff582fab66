import numpy as np
import pytest

from navkit import ppo
from navkit import tensor as T
from navkit import world as W
from navkit.policy import BetaPolicy, PolicyConfig
from navkit.perturb import PerturbSpec

from test_policy import tiny_config, random_packed


def brute_force_gae(rewards, values, dones, bootstrap, gamma, lam):
    """Double-sum definition with explicit survival products."""
    t_len, e = rewards.shape
    v_ext = np.concatenate([values, bootstrap[None, :]], axis=0)
    delta = np.zeros((t_len, e))
    for t in range(t_len):
        delta[t] = rewards[t] + gamma * v_ext[t + 1] * (1 - dones[t]) - values[t]
    adv = np.zeros((t_len, e))
    for t in range(t_len):
        for l in range(t_len - t):
            keep = np.ones(e)
            for m in range(t, t + l):
                keep *= 1 - dones[m]
            adv[t] += (gamma * lam) ** l * delta[t + l] * keep
    return adv


def random_rollout(rng, t_len=12, e=4, p_done=0.2):
    return (rng.normal(size=(t_len, e)), rng.normal(size=(t_len, e)),
            (rng.random((t_len, e)) < p_done).astype(float), rng.normal(size=e))


def test_gae_lambda_zero_collapses_to_td_error():
    rng = np.random.default_rng(0)
    rewards, values, dones, boot = random_rollout(rng)
    adv, ret = ppo.compute_gae(rewards, values, dones, boot, 0.9, 0.0)
    v_ext = np.concatenate([values, boot[None, :]], axis=0)
    delta = rewards + 0.9 * v_ext[1:] * (1 - dones) - values
    assert np.allclose(adv, delta, atol=1e-12)
    assert np.allclose(ret, adv + values, atol=1e-12)


def test_gae_lambda_one_is_discounted_return_minus_value():
    rng = np.random.default_rng(1)
    t_len, e = 10, 3
    rewards = rng.normal(size=(t_len, e))
    values = rng.normal(size=(t_len, e))
    dones = np.zeros((t_len, e))
    boot = rng.normal(size=e)
    adv, _ = ppo.compute_gae(rewards, values, dones, boot, 0.97, 1.0)
    for t in range(t_len):
        expected = sum(0.97 ** (k - t) * rewards[k] for k in range(t, t_len))
        expected += 0.97 ** (t_len - t) * boot - values[t]
        assert np.allclose(adv[t], expected, atol=1e-10)


@pytest.mark.parametrize("gamma", [0.0, 0.5, 0.95, 1.0])
@pytest.mark.parametrize("lam", [0.0, 0.5, 0.95, 1.0])
def test_gae_matches_brute_force_double_sum(gamma, lam):
    rng = np.random.default_rng(int(gamma * 10 + lam * 100))
    for _ in range(10):
        rewards, values, dones, boot = random_rollout(rng)
        adv, _ = ppo.compute_gae(rewards, values, dones, boot, gamma, lam)
        oracle = brute_force_gae(rewards, values, dones, boot, gamma, lam)
        assert np.max(np.abs(adv - oracle)) < 1e-10


def test_done_cuts_dependence_on_later_data():
    rng = np.random.default_rng(2)
    rewards, values, dones, boot = random_rollout(rng, t_len=8, e=1, p_done=0.0)
    dones[3, 0] = 1.0
    adv_a, _ = ppo.compute_gae(rewards, values, dones, boot, 0.99, 0.95)
    rewards2 = rewards.copy()
    rewards2[4:] = 123.0
    boot2 = boot + 55.0
    adv_b, _ = ppo.compute_gae(rewards2, values, dones, boot2, 0.99, 0.95)
    assert np.allclose(adv_a[:4], adv_b[:4], atol=1e-12)


def test_ratio_one_gives_negative_mean_advantage():
    rng = np.random.default_rng(3)
    logp = rng.normal(size=32)
    adv = rng.normal(size=32)
    loss = ppo.clipped_surrogate(T.Tensor(logp.copy()), logp, adv, 0.2)
    assert abs(loss.item() - (-np.mean(adv))) < 1e-12


def test_clipped_sample_has_zero_gradient():
    # positive advantage with ratio above 1+eps: the clipped branch is active
    logp_old = np.array([0.0, 0.0])
    lp = T.parameter(np.array([0.5, 0.0]))  # ratio e^0.5 > 1.2 for the first sample
    adv = np.array([1.0, 1.0])
    loss = ppo.clipped_surrogate(lp, logp_old, adv, 0.2)
    loss.backward()
    assert lp.grad[0] == 0.0
    assert lp.grad[1] != 0.0


def test_clipped_loss_never_below_unclipped_surrogate():
    rng = np.random.default_rng(4)
    for _ in range(50):
        logp_old = rng.normal(size=16)
        logp_new = logp_old + rng.normal(scale=0.5, size=16)
        adv = rng.normal(size=16)
        clipped = ppo.clipped_surrogate(T.Tensor(logp_new), logp_old, adv, 0.2).item()
        unclipped = -np.mean(np.exp(logp_new - logp_old) * adv)
        assert clipped >= unclipped - 1e-12


def test_advantage_normalization_properties():
    rng = np.random.default_rng(5)
    x = rng.normal(3.0, 7.0, size=4096)
    normed = ppo.normalize_advantages(x)
    assert abs(normed.mean()) < 1e-10
    assert abs(normed.std() - 1.0) < 1e-6


def hand_loss(policy, batch, cfg):
    """Independent numpy evaluation of the PPO objective."""
    from navkit.policy import beta_log_prob_np, beta_entropy_np
    with T.no_grad():
        alpha, beta, value = policy.forward(batch["obs"])
    a, b, v = alpha.data, beta.data, value.data
    logp = beta_log_prob_np(a, b, batch["actions"])
    ratio = np.exp(logp - batch["logp"])
    surr = np.minimum(ratio * batch["advantages"],
                      np.clip(ratio, 1 - cfg.clip_eps, 1 + cfg.clip_eps) * batch["advantages"])
    actor = -surr.mean()
    critic = cfg.value_coef * np.mean((v - batch["returns"]) ** 2)
    entropy = beta_entropy_np(a, b).mean()
    return actor + critic - cfg.entropy_coef * entropy


def test_loss_matches_hand_computation():
    rng = np.random.default_rng(6)
    cfg = ppo.TrainConfig()
    policy = BetaPolicy(tiny_config(), seed=11)
    batch = {
        "obs": random_packed(rng, e=8, cfg=tiny_config()),
        "actions": rng.uniform(0.1, 0.9, size=(8, 2)),
        "logp": rng.normal(size=8),
        "advantages": rng.normal(size=8),
        "returns": rng.normal(size=8),
    }
    loss, stats = ppo.ppo_loss(policy, batch, cfg, train=False)
    assert abs(loss.item() - hand_loss(policy, batch, cfg)) < 1e-8


def test_ppo_loss_gradients_match_finite_differences():
    from conftest import relative_error
    rng = np.random.default_rng(7)
    cfg = ppo.TrainConfig()
    policy = BetaPolicy(tiny_config(), seed=12)
    batch = {
        "obs": random_packed(rng, e=4, cfg=tiny_config()),
        "actions": rng.uniform(0.2, 0.8, size=(4, 2)),
        "logp": rng.normal(scale=0.1, size=4),
        "advantages": rng.normal(size=4),
        "returns": rng.normal(size=4),
    }
    params = policy.parameters()
    loss, _ = ppo.ppo_loss(policy, batch, cfg, train=False)
    T.zero_grads(params)
    loss.backward()
    coord_rng = np.random.default_rng(8)
    worst = 0.0
    for p in params:
        flat = p.data.reshape(-1)
        grad = (p.grad if p.grad is not None else np.zeros_like(p.data)).reshape(-1)
        for idx in coord_rng.choice(flat.size, size=min(3, flat.size), replace=False):
            orig = flat[idx]
            flat[idx] = orig + 1e-5
            up, _ = ppo.ppo_loss(policy, batch, cfg, train=False)
            flat[idx] = orig - 1e-5
            down, _ = ppo.ppo_loss(policy, batch, cfg, train=False)
            flat[idx] = orig
            numeric = (up.item() - down.item()) / 2e-5
            worst = max(worst, relative_error(grad[idx], numeric))
    assert worst < 1e-4, worst


def test_no_parameter_tensor_is_gradient_dead():
    rng = np.random.default_rng(9)
    cfg = ppo.TrainConfig()
    policy = BetaPolicy(tiny_config(), seed=13)
    batch = {
        "obs": random_packed(rng, e=6, cfg=tiny_config()),
        "actions": rng.uniform(0.2, 0.8, size=(6, 2)),
        "logp": rng.normal(scale=0.1, size=6),
        "advantages": rng.normal(size=6),
        "returns": rng.normal(size=6),
    }
    params = policy.parameters()
    loss, _ = ppo.ppo_loss(policy, batch, cfg, train=False)
    T.zero_grads(params)
    loss.backward()
    for name, p in policy.named_parameters():
        assert p.grad is not None and np.any(p.grad != 0.0), f"dead gradient on {name}"


def desk_world(n_static=0, n_dynamic=0, seed=0):
    return W.EpisodeConfig(arena=(20.0, 20.0), n_static=n_static, n_dynamic=n_dynamic,
                           dim=2, seed=seed, policy_period=0.1)


def quick_train_cfg(**kw):
    base = dict(n_envs=8, horizon=16, epochs=2, minibatch=1024, total_frames=4000,
                sr_window=50, seed=1)
    base.update(kw)
    return ppo.TrainConfig(**base)


def test_poisoned_update_preserves_parameters():
    policy_cfg = tiny_config()
    trainer = ppo.Trainer(desk_world(), quick_train_cfg(), policy_cfg)
    buf = ppo.RolloutBuffer(16, 8, policy_cfg)
    buf.rewards[0, 0] = np.nan
    before = [p.data.copy() for p in trainer.policy.parameters()]
    with pytest.raises(T.PoisonedUpdateError):
        ppo.ppo_update(trainer.policy, trainer.adam, buf, trainer.cfg,
                       trainer.shuffle_rng, trainer.dropout_rng)
    for prev, p in zip(before, trainer.policy.parameters()):
        assert np.array_equal(prev, p.data)


def test_finetune_requires_perturbations(tmp_path):
    policy_cfg = tiny_config()
    pre = ppo.Trainer(desk_world(), quick_train_cfg(), policy_cfg)
    ck = tmp_path / "pre.nvkt"
    pre.save_checkpoint(ck)
    with pytest.raises(ValueError):
        ppo.Trainer(desk_world(), quick_train_cfg(), policy_cfg, finetune_from=ck)
    tuned = ppo.Trainer(desk_world(), quick_train_cfg(), policy_cfg,
                        perturb=PerturbSpec.all_on(), finetune_from=ck)
    assert tuned.lr == tuned.cfg.finetune_lr
    assert tuned.perturb.any_enabled


def test_fixed_seed_reproduces_metrics_exactly():
    rows = []
    for _ in range(2):
        trainer = ppo.Trainer(desk_world(seed=5), quick_train_cfg(total_frames=2000, seed=9),
                              tiny_config())
        trainer.train()
        rows.append(trainer.metrics_rows)
    assert rows[0] == rows[1]


def test_curriculum_advances_without_skipping(tmp_path):
    schedule = ppo.CurriculumSchedule(stages=[(0, 0), (0, 0), (0, 0)])
    cfg = quick_train_cfg(total_frames=60_000, sr_window=20, advance_sr=0.0, seed=2)
    trainer = ppo.Trainer(desk_world(), cfg, tiny_config(), schedule=schedule,
                          out_dir=tmp_path / "run")
    trainer.train()
    stages = [row["stage"] for row in trainer.metrics_rows]
    assert stages[0] == 1
    assert all(b - a in (0, 1) for a, b in zip(stages, stages[1:]))
    assert max(stages) == 3
    assert (tmp_path / "run" / "manifest.json").exists()
    assert (tmp_path / "run" / "metrics.csv").exists()
    assert (tmp_path / "run" / "final.nvkt").exists()


@pytest.mark.slow
def test_empty_arena_learning_sanity():
    # goal seeking with no obstacles: a tiny net must clear 95% SR well inside 200k frames
    cfg = ppo.TrainConfig(lr=1e-3, n_envs=16, horizon=32, epochs=4, minibatch=512,
                          total_frames=200_000, sr_window=100, seed=4)
    trainer = ppo.Trainer(desk_world(seed=11), cfg, tiny_config())
    while trainer.frames < cfg.total_frames and trainer.rolling_sr < 0.95:
        trainer.train(max_updates=trainer.updates + 10)
    assert trainer.rolling_sr >= 0.95, f"SR {trainer.rolling_sr} after {trainer.frames} frames"
