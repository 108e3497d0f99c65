import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate

from graphprune import autograd as ag
from graphprune.autograd import Tensor
from graphprune.ddpg import (DDPGAgent, InfeasibleBudgetError, ReplayBuffer, RewardNormalizer, SearchConfig, Transition,
                             actor_forward, bellman_targets, critic_update, critic_value, enforce_budget, make_actor,
                             make_critic, min_flops, run_episode, sample_action, search, snap_to_grid)
from graphprune.graph import RatioAssignment, apply_ratio_sharing, channel_count, count_flops, parse_model_description

from ddpg_harness import GRID, toy_graph, toy_problem
from gradcheck import max_rel_error

TWO = parse_model_description("0 conv 3 8 1 3 8\n1 conv 8 8 1 3 8\nedges:\n0 1\n")


def batch_of(rng, n, dim=64, terminal=None):
    return [Transition(rng.standard_normal(dim), float(rng.random()), float(rng.standard_normal()),
                       rng.standard_normal(dim), bool(rng.random() < 0.3) if terminal is None else terminal)
            for _ in range(n)]


# -- networks ----------------------------------------------------------------

def test_zero_actor_gives_half():
    actor = make_actor(np.random.default_rng(0))
    for p in actor.parameters():
        p.data[...] = 0
    assert actor_forward(actor, np.ones(64)) == 0.5


def test_actor_bounded():
    actor = make_actor(np.random.default_rng(1))
    states = np.random.default_rng(2).standard_normal((10_000, 64)) * 10
    with ag.no_grad():
        out = actor(Tensor(states, dtype=np.float64)).data
    assert out.min() >= 0 and out.max() <= 1


@pytest.mark.parametrize("seed", range(3))
def test_actor_critic_gradients(seed):
    rng = np.random.default_rng(seed)
    dim, n = int(rng.integers(2, 6)), int(rng.integers(1, 5))
    actor, critic = make_actor(rng, dim, 5), make_critic(rng, dim, 5)
    s, a = rng.standard_normal((n, dim)), rng.random(n)
    assert max_rel_error(lambda: actor(Tensor(s, dtype=np.float64)).sum(), actor.parameters()) < 1e-4
    assert max_rel_error(lambda: (critic_value(critic, s, a) ** 2).mean(), critic.parameters()) < 1e-4


# -- exploration -----------------------------------------------------------

def test_zero_noise_is_deterministic():
    rng = np.random.default_rng(0)
    assert sample_action(0.37, 0.0, rng) == 0.37
    with pytest.raises(ValueError):
        sample_action(0.5, -0.1, rng)


def test_samples_bounded():
    draws = sample_action(0.95, 0.5, np.random.default_rng(1), size=1_000_000)
    assert draws.min() >= 0 and draws.max() <= 1


def test_sample_mean_matches_integrated_moment():
    mu, eta = 0.5, 0.2
    pdf = lambda x: np.exp(-0.5 * ((x - mu) / eta) ** 2)
    mass = integrate.quad(pdf, 0, 1)[0]
    mean = integrate.quad(lambda x: x * pdf(x), 0, 1)[0] / mass
    var = integrate.quad(lambda x: (x - mean) ** 2 * pdf(x), 0, 1)[0] / mass
    draws = sample_action(mu, eta, np.random.default_rng(2), size=100_000)
    assert abs(draws.mean() - mean) < 3 * np.sqrt(var / draws.size)
    # skewed case: the integrated mean is pulled away from mu
    mu = 0.9
    mass = integrate.quad(pdf, 0, 1)[0]
    mean = integrate.quad(lambda x: x * pdf(x), 0, 1)[0] / mass
    var = integrate.quad(lambda x: (x - mean) ** 2 * pdf(x), 0, 1)[0] / mass
    draws = sample_action(mu, eta, np.random.default_rng(3), size=100_000)
    assert abs(draws.mean() - mean) < 3 * np.sqrt(var / draws.size)


def test_noise_schedule_strictly_decreasing():
    c = SearchConfig()
    seq = [c.noise(e) for e in range(300)]
    assert seq[0] == 0.5 and all(0 < b < a for a, b in zip(seq, seq[1:]))


@pytest.mark.parametrize("kwargs", [dict(warmup_episodes=-1), dict(discount=1.0), dict(noise_init=0.0)])
def test_config_invariants(kwargs):
    with pytest.raises(ValueError):
        SearchConfig(**kwargs)


# -- budget ----------------------------------------------------------------

def test_generous_budget_keeps_action():
    assert enforce_budget([1.0, 1.0], 0, 0.73, count_flops(TWO), TWO, GRID) == 0.73
    assert enforce_budget([1.0, 1.0], 0, 0.73, None, TWO, GRID) == 0.73


@pytest.mark.parametrize("first,budget", [(1.0, 60_000), (0.5, 40_000), (0.8, 90_000), (1.0, 150_000)])
def test_last_layer_clip_matches_enumeration(first, budget):
    flops = {k: count_flops(TWO, apply_ratio_sharing(TWO, [first, k / 8])) for k in range(1, 9)}
    k_max = max(k for k, f in flops.items() if f <= budget)
    got = enforce_budget([first, 1.0], 1, 1.0, budget, TWO, GRID)
    assert channel_count(8, got) == k_max
    if k_max < 8:
        assert got == k_max / 8
    assert count_flops(TWO, apply_ratio_sharing(TWO, [first, got])) <= budget


def test_feasible_action_is_a_noop():
    budget = count_flops(TWO, apply_ratio_sharing(TWO, [0.5, 0.5]))
    assert enforce_budget([0.5, 1.0], 1, 0.5, budget, TWO, GRID) == 0.5


def test_infeasible_budget_rejected_at_episode_start():
    g, state_fn, reward_fn, _ = toy_problem(0)
    config = SearchConfig(episodes=1, budget=min_flops(g, GRID) - 1, ratio_grid=GRID)
    with pytest.raises(InfeasibleBudgetError):
        run_episode(g, state_fn, reward_fn, DDPGAgent(config), config, 0, np.random.default_rng(0))


def test_snap_lands_on_grid_within_budget():
    budget = count_flops(TWO, apply_ratio_sharing(TWO, [0.5, 0.35]))
    r = snap_to_grid([0.5, 1.0], 1, 0.36, budget, TWO, GRID)
    assert r in GRID and count_flops(TWO, apply_ratio_sharing(TWO, [0.5, r])) <= budget


# -- critic update -----------------------------------------------------------

def test_zero_discount_targets_equal_rewards():
    rng = np.random.default_rng(0)
    r = rng.standard_normal(32)
    y = bellman_targets(r, rng.standard_normal(32) * 100, rng.random(32) < 0.5, 0.0)
    assert np.array_equal(y, r)


def test_zero_discount_loss_uses_rewards_only():
    rng = np.random.default_rng(1)
    agent = DDPGAgent(SearchConfig(discount=0.0, seed=1), 64)
    batch = batch_of(rng, 16, terminal=False)
    r_hat = rng.standard_normal(16)
    with ag.no_grad():
        q = critic_value(agent.critic, np.stack([t.state for t in batch]), [t.action for t in batch]).data[:, 0]
    assert critic_update(batch, 0.0, agent, r_hat) == pytest.approx(np.mean((r_hat - q) ** 2), abs=1e-12)


def test_single_transition_loss():
    rng = np.random.default_rng(2)
    agent = DDPGAgent(SearchConfig(seed=2), 64)
    (t,) = batch_of(rng, 1, terminal=False)
    with ag.no_grad():
        q = critic_value(agent.critic, t.state[None], [t.action]).data[0, 0]
        a_next = agent.actor_target(Tensor(t.next_state[None], dtype=np.float64)).data[:, 0]
        q_next = critic_value(agent.critic_target, t.next_state[None], a_next).data[0, 0]
    y = t.reward + 0.9 * q_next
    assert critic_update([t], 0.9, agent) == pytest.approx((y - q) ** 2, rel=1e-12)


def test_empty_batch_rejected():
    with pytest.raises(ValueError):
        critic_update([], 0.9, DDPGAgent(SearchConfig(), 64))


@pytest.mark.parametrize("seed", range(3))
def test_loss_falls_on_fixed_batch(seed):
    rng = np.random.default_rng(seed)
    agent = DDPGAgent(SearchConfig(seed=seed), 8)
    batch = batch_of(rng, 32, dim=8)
    losses = [critic_update(batch, 0.9, agent) for _ in range(50)]
    assert losses[-1] < losses[0]


def test_soft_update_moves_targets():
    agent = DDPGAgent(SearchConfig(tau=0.5), 64)
    before = agent.critic_target.w1.data.copy()
    critic_update(batch_of(np.random.default_rng(3), 4), 0.9, agent)
    want = 0.5 * before + 0.5 * agent.critic.w1.data
    np.testing.assert_allclose(agent.critic_target.w1.data, want, atol=1e-15)


# -- replay and reward normalization ---------------------------------------

def test_buffer_fifo_eviction():
    buf = ReplayBuffer(3, np.random.default_rng(0))
    for k in range(5):
        buf.add(Transition(np.zeros(2), 0.5, float(k), np.zeros(2), True))
        assert len(buf) <= 3
    assert [t.reward for t in buf.items] == [2.0, 3.0, 4.0]
    assert len(buf.sample(10)) == 3
    with pytest.raises(ValueError):
        buf.add(Transition(np.zeros(2), 1.5, 0.0, np.zeros(2), True))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=2, max_size=80), st.lists(st.floats(0, 1), min_size=2, max_size=20))
def test_normalization_preserves_argmax(history, candidates):
    norm = RewardNormalizer(64)
    for r in history:
        norm.push(r)
    hat = norm(candidates)
    order = np.argsort(candidates, kind="stable")
    assert np.all(np.diff(hat[order]) >= 0)
    assert np.argmax(hat) == np.argmax(candidates)


# -- episodes and search -----------------------------------------------------

def test_episode_structure_and_states():
    g, state_fn, reward_fn, _ = toy_problem(0)
    config = SearchConfig(warmup_episodes=0, ratio_grid=GRID, budget=count_flops(g) * 0.5)
    ep = run_episode(g, state_fn, reward_fn, DDPGAgent(config), config, 0, np.random.default_rng(0))
    assert len(ep.transitions) == len(g.prunable)
    assert len({t.reward for t in ep.transitions}) == 1
    assert [t.terminal for t in ep.transitions] == [False] * 3 + [True]
    free = ep.ratios.free(g)
    for i, node in enumerate(g.prunable):
        # state of layer i sees the choices before it and 1.0 for the rest
        partial = free[:i] + [1.0] * (len(free) - i)
        assert np.array_equal(ep.states[i], state_fn(apply_ratio_sharing(g, partial))[node])
    assert ep.flops <= config.budget


def test_warmup_episode_follows_seeded_draws():
    g, state_fn, reward_fn, _ = toy_problem(1)
    config = SearchConfig(ratio_grid=GRID)
    ep = run_episode(g, state_fn, reward_fn, DDPGAgent(config), config, 0, np.random.default_rng(42))
    rng = np.random.default_rng(42)
    assert ep.ratios.free(g) == [GRID[rng.integers(len(GRID))] for _ in g.prunable]


def test_all_warmup_is_seeded_random_search():
    g, state_fn, reward_fn, _ = toy_problem(2)
    config = SearchConfig(episodes=30, warmup_episodes=30, ratio_grid=GRID, seed=5, batch_size=8)
    result = search(g, state_fn, reward_fn, config)
    rng = np.random.default_rng(np.random.SeedSequence([5, 11]))
    draws = [[GRID[rng.integers(len(GRID))] for _ in g.prunable] for _ in range(30)]
    assert [e["ratios"] for e in result.log] == draws
    best = max(draws, key=lambda d: reward_fn(RatioAssignment(d)))
    assert result.best_ratios.free(g) == best


def test_search_respects_budget_and_is_deterministic():
    g, state_fn, reward_fn, _ = toy_problem(3)
    config = SearchConfig(episodes=40, warmup_episodes=10, batch_size=16, ratio_grid=GRID, seed=3,
                          budget=count_flops(g) * 0.4)
    a = search(g, state_fn, reward_fn, config)
    b = search(g, state_fn, reward_fn, config)
    assert a.best_flops <= config.budget and all(e["flops"] <= config.budget for e in a.log)
    assert a.log == b.log
    assert [e["noise"] for e in a.log] == [config.noise(e) for e in range(40)]
