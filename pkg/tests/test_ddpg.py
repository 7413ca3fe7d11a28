import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lrrl import ddpg as dd
from lrrl import numerics as nn
from lrrl.dataset import Batch


def make_agent(seed=0, state_dim=1, cfg=None):
    cfg = cfg or dd.DdpgConfig(actor_hidden=(8, 8), critic_hidden=(8, 8))
    rng = np.random.default_rng(seed)
    return dd.init_agent(state_dim, 1, [-1.0], [1.0], cfg, rng), cfg


def make_batch(n=16, state_dim=1, seed=1):
    rng = np.random.default_rng(seed)
    return Batch(
        s=rng.normal(size=(n, state_dim)),
        a=rng.uniform(-1, 1, size=(n, 1)),
        r=rng.normal(size=n),
        s_next=rng.normal(size=(n, state_dim)),
        done=np.zeros(n, dtype=bool),
    )


def abs_value_critic(agent):
    """Exact Q(s, a) = -|a - 0.3| via two relu units; concave with max at 0.3."""
    q_spec = nn.MlpSpec((agent.state_dim + 1, 2, 1), "relu", "identity")
    q_params = nn.zeros_like_params(q_spec)
    q_params.weights[0][0, agent.state_dim] = 1.0
    q_params.weights[0][1, agent.state_dim] = -1.0
    q_params.biases[0][:] = [-0.3, 0.3]
    q_params.weights[1][0, :] = [-1.0, -1.0]
    return dd.replace_params(agent, q_spec=q_spec, q_params=q_params,
                             q_target_params=q_params.copy())


class TestPolicyAction:
    def test_zero_weight_actor_outputs_zero(self):
        agent, _ = make_agent()
        agent = dd.replace_params(agent, pi_params=nn.zeros_like_params(agent.pi_spec))
        assert np.array_equal(dd.policy_action(agent, np.array([0.7])), [0.0])

    def test_always_inside_box(self):
        agent, _ = make_agent(seed=2)
        rng = np.random.default_rng(3)
        states = rng.normal(scale=5.0, size=(10_000, 1))
        actions = dd.policy_action(agent, states)
        assert np.all(actions >= -1.0) and np.all(actions <= 1.0)

    def test_fresh_agent_target_equals_online(self):
        agent, _ = make_agent(seed=4)
        s = np.random.default_rng(5).normal(size=(32, 1))
        assert np.array_equal(
            dd.policy_action(agent, s, use_target=True), dd.policy_action(agent, s)
        )


class TestCriticTarget:
    def test_gamma_zero_gives_rewards(self):
        agent, _ = make_agent()
        batch = make_batch()
        y = dd.critic_target(agent, batch, 0.0, dd.identity_selector)
        assert np.allclose(y, batch.r, atol=1e-15)

    def test_done_masks_bootstrap(self):
        agent, _ = make_agent(seed=6)
        batch = make_batch()
        masked = Batch(batch.s, batch.a, batch.r, batch.s_next, np.ones(len(batch), dtype=bool))
        y = dd.critic_target(agent, masked, 0.99, dd.identity_selector)
        assert np.array_equal(y, batch.r)

    def test_hand_built_backup(self):
        agent, _ = make_agent()
        q_params = nn.zeros_like_params(agent.q_spec)
        q_params.biases[-1][0] = 2.0
        agent = dd.replace_params(agent, q_target_params=q_params)
        batch = Batch(
            s=np.zeros((1, 1)), a=np.zeros((1, 1)), r=np.array([1.0]),
            s_next=np.zeros((1, 1)), done=np.zeros(1, dtype=bool),
        )
        y = dd.critic_target(agent, batch, 0.5, dd.identity_selector)
        assert y[0] == 2.0

    def test_only_target_networks_evaluated(self):
        # poisoning the online nets must not change targets
        agent, _ = make_agent(seed=7)
        batch = make_batch()
        y1 = dd.critic_target(agent, batch, 0.9, dd.identity_selector)
        poisoned = dd.replace_params(
            agent,
            q_params=nn.init_params(agent.q_spec, np.random.default_rng(99)),
            pi_params=nn.init_params(agent.pi_spec, np.random.default_rng(98)),
        )
        y2 = dd.critic_target(poisoned, batch, 0.9, dd.identity_selector)
        assert np.array_equal(y1, y2)

    def test_selector_receives_target_proposal(self):
        agent, _ = make_agent(seed=8)
        batch = make_batch()
        seen = {}

        def selector(s_next, a_prop):
            seen["a"] = a_prop.copy()
            return a_prop

        dd.critic_target(agent, batch, 0.9, selector)
        assert np.array_equal(seen["a"], dd.policy_action(agent, batch.s_next, use_target=True))


class TestCriticUpdate:
    def test_zero_lr_keeps_params_and_reports_loss(self):
        agent, _ = make_agent(seed=9)
        batch = make_batch()
        y = np.zeros(len(batch))
        opt = nn.init_adam(agent.q_spec, nn.AdamHyper(lr=0.0))
        new_agent, _, loss = dd.critic_update(agent, batch, y, opt)
        assert loss > 0.0
        assert new_agent.q_params == agent.q_params

    def test_zero_loss_at_minimum(self):
        agent, _ = make_agent(seed=10)
        batch = make_batch()
        x = np.concatenate([batch.s, batch.a], axis=1)
        y = nn.mlp_forward(agent.q_spec, agent.q_params, x)[:, 0]
        opt = nn.init_adam(agent.q_spec, nn.AdamHyper(lr=1e-3))
        loss, grads = dd.critic_loss_and_grads(agent, batch, y)
        assert loss == 0.0
        assert not grads.flat.any()
        new_agent, _, _ = dd.critic_update(agent, batch, y, opt)
        assert new_agent.q_params == agent.q_params

    def test_overfits_one_batch(self):
        agent, _ = make_agent(seed=11)
        batch = make_batch(n=8)
        y = np.random.default_rng(12).normal(size=8)
        opt = nn.init_adam(agent.q_spec, nn.AdamHyper(lr=1e-2))
        first_loss = None
        for _ in range(500):
            agent, opt, loss = dd.critic_update(agent, batch, y, opt)
            first_loss = first_loss if first_loss is not None else loss
        assert loss < 1e-3 * first_loss

    def test_critic_gradient_matches_finite_differences(self):
        agent, _ = make_agent(seed=13)
        batch = make_batch(n=6)
        y = np.random.default_rng(14).normal(size=6)
        _, grads = dd.critic_loss_and_grads(agent, batch, y)
        h = 1e-5
        flat = agent.q_params.flat
        for j in range(0, len(flat), 11):
            p2 = agent.q_params.copy()
            p2.flat[j] += h
            lp, _ = dd.critic_loss_and_grads(dd.replace_params(agent, q_params=p2), batch, y)
            p2.flat[j] -= 2 * h
            lm, _ = dd.critic_loss_and_grads(dd.replace_params(agent, q_params=p2), batch, y)
            fd = (lp - lm) / (2 * h)
            assert abs(fd - grads.flat[j]) <= 1e-4 * max(abs(fd), abs(grads.flat[j]), 1e-3)

    def test_actor_untouched_by_critic_step(self):
        agent, _ = make_agent(seed=15)
        batch = make_batch()
        opt = nn.init_adam(agent.q_spec, nn.AdamHyper(lr=1e-3))
        new_agent, _, _ = dd.critic_update(agent, batch, np.zeros(len(batch)), opt)
        assert new_agent.pi_params == agent.pi_params
        assert new_agent.q_params != agent.q_params


class TestActorUpdate:
    def test_zero_lr_keeps_actor(self):
        agent, _ = make_agent(seed=16)
        batch = make_batch()
        opt = nn.init_adam(agent.pi_spec, nn.AdamHyper(lr=0.0))
        new_agent, _ = dd.actor_update(agent, batch, opt)
        assert new_agent.pi_params == agent.pi_params

    def test_actor_gradient_matches_finite_differences(self):
        agent, _ = make_agent(seed=17)
        batch = make_batch(n=6)
        _, grads = dd.actor_objective_grad(agent, batch)

        def objective(pi_params):
            a = dd.replace_params(agent, pi_params=pi_params)
            actions = dd.policy_action(a, batch.s)
            x = np.concatenate([batch.s, actions], axis=1)
            return float(nn.mlp_forward(agent.q_spec, agent.q_params, x).mean())

        h = 1e-5
        for j in range(0, len(agent.pi_params.flat), 7):
            p2 = agent.pi_params.copy()
            p2.flat[j] += h
            fp = objective(p2)
            p2.flat[j] -= 2 * h
            fm = objective(p2)
            fd = (fp - fm) / (2 * h)
            assert abs(fd - grads.flat[j]) <= 1e-4 * max(abs(fd), abs(grads.flat[j]), 1e-4)

    def test_converges_to_toy_critic_optimum(self):
        agent, _ = make_agent(seed=18)
        agent = abs_value_critic(agent)
        batch = make_batch(n=32, seed=19)
        opt = nn.init_adam(agent.pi_spec, nn.AdamHyper(lr=1e-3))
        for _ in range(2000):
            agent, opt = dd.actor_update(agent, batch, opt)
        mean_action = dd.policy_action(agent, batch.s).mean()
        assert abs(mean_action - 0.3) < 0.05

    def test_critic_untouched_by_actor_step(self):
        agent, _ = make_agent(seed=20)
        batch = make_batch()
        opt = nn.init_adam(agent.pi_spec, nn.AdamHyper(lr=1e-3))
        new_agent, _ = dd.actor_update(agent, batch, opt)
        assert new_agent.q_params == agent.q_params
        assert new_agent.q_target_params == agent.q_target_params
        assert new_agent.pi_params != agent.pi_params


class TestSoftUpdate:
    def test_tau_one_keeps_targets(self):
        agent, _ = make_agent(seed=21)
        batch = make_batch()
        opt = nn.init_adam(agent.q_spec, nn.AdamHyper(lr=1e-2))
        agent, _, _ = dd.critic_update(agent, batch, np.zeros(len(batch)), opt)
        updated = dd.soft_update(agent, 1.0)
        assert updated.q_target_params == agent.q_target_params

    def test_tau_zero_copies_online(self):
        agent, _ = make_agent(seed=22)
        batch = make_batch()
        opt = nn.init_adam(agent.q_spec, nn.AdamHyper(lr=1e-2))
        agent, _, _ = dd.critic_update(agent, batch, np.zeros(len(batch)), opt)
        updated = dd.soft_update(agent, 0.0)
        assert updated.q_target_params == agent.q_params

    def test_fixed_point(self):
        agent, _ = make_agent(seed=23)
        for tau in (0.0, 1.0):
            updated = dd.soft_update(agent, tau)  # fresh agent: targets == online
            assert updated.q_target_params == agent.q_params
        # interior tau: fixed point up to one rounding of tau*x + (1-tau)*x
        updated = dd.soft_update(agent, 0.3)
        assert updated.q_target_params.allclose(agent.q_params, rtol=1e-14)

    @settings(max_examples=40, deadline=None)
    @given(tau=st.floats(0.0, 1.0), seed=st.integers(0, 2**31))
    def test_convexity_property(self, tau, seed):
        agent, _ = make_agent(seed=seed)
        rng = np.random.default_rng(seed + 1)
        online = nn.init_params(agent.q_spec, rng)
        agent = dd.replace_params(agent, q_params=online)
        mixed = dd.soft_update(agent, tau)
        lo = np.minimum(agent.q_target_params.flat, online.flat)
        hi = np.maximum(agent.q_target_params.flat, online.flat)
        assert np.all(mixed.q_target_params.flat >= lo - 1e-15)
        assert np.all(mixed.q_target_params.flat <= hi + 1e-15)

    def test_invalid_tau(self):
        agent, _ = make_agent()
        with pytest.raises(ValueError):
            dd.soft_update(agent, 1.5)


class TestAgentCheckpoint:
    def test_roundtrip(self, tmp_path):
        agent, cfg = make_agent(seed=24, state_dim=2)
        dd.save_agent(tmp_path / "agent", agent, {"algo": "ddpg", "seed": 24, "step_count": 0})
        loaded, manifest = dd.load_agent(tmp_path / "agent")
        assert loaded.q_params == agent.q_params
        assert loaded.pi_params == agent.pi_params
        assert loaded.q_target_params == agent.q_target_params
        assert loaded.pi_target_params == agent.pi_target_params
        assert manifest["algo"] == "ddpg"
        assert np.array_equal(loaded.action_low, agent.action_low)
