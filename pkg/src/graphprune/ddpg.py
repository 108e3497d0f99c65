"""DDPG search over per-layer compression ratios under a FLOPs budget.

The agent visits the free layers in order.  Its state for layer ``i`` is row
``i`` of the aggregator output computed with the ratios chosen so far (layers
not yet decided stay at 1.0).  Every transition of an episode stores the same
episode reward, the recalibrated accuracy of the finished configuration.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Sequence

import numpy as np
from scipy.stats import truncnorm

from . import autograd as ag
from .autograd import Tensor
from .graph import ModelGraph, RatioAssignment, apply_ratio_sharing, count_flops

logger = logging.getLogger(__name__)


class InfeasibleBudgetError(ValueError):
    pass


@dataclass
class SearchConfig:
    episodes: int = 300
    warmup_episodes: int = 100
    noise_init: float = 0.5
    noise_decay: float = 0.995
    discount: float = 0.9
    budget: float | None = None  # absolute MACs; None means unconstrained
    batch_size: int = 64
    tau: float = 0.01
    seed: int = 0
    buffer_capacity: int = 2000
    hidden: int = 64
    actor_lr: float = 1e-3
    critic_lr: float = 3e-3
    reward_window: int = 64
    updates_per_episode: int | None = 16  # None: one per transition
    actor_during_warmup: bool = True
    logit_penalty: float = 1e-2
    ratio_grid: tuple = tuple(round(0.1 * k, 1) for k in range(1, 11))

    def __post_init__(self):
        if self.warmup_episodes < 0:
            raise ValueError("warmup_episodes must be >= 0")
        if not 0.0 <= self.discount < 1.0:
            raise ValueError("discount must lie in [0, 1)")
        if self.noise_init <= 0 or not 0 < self.noise_decay <= 1:
            raise ValueError("noise_init must be > 0 and noise_decay in (0, 1]")
        if self.episodes < 0 or self.batch_size < 1 or self.buffer_capacity < 1:
            raise ValueError("episodes, batch_size and buffer_capacity must be positive")
        self.ratio_grid = tuple(sorted(float(r) for r in self.ratio_grid))

    def noise(self, episode: int) -> float:
        return self.noise_init * self.noise_decay ** episode


class Transition(NamedTuple):
    state: np.ndarray
    action: float
    reward: float
    next_state: np.ndarray
    terminal: bool


class ReplayBuffer:
    """Bounded FIFO of transitions with a seeded uniform sampler."""

    def __init__(self, capacity: int, rng: np.random.Generator):
        self.capacity = capacity
        self.items: deque[Transition] = deque(maxlen=capacity)
        self.rng = rng

    def __len__(self) -> int:
        return len(self.items)

    def add(self, t: Transition) -> None:
        if not 0.0 <= t.action <= 1.0 or not np.isfinite(t.reward):
            raise ValueError(f"invalid transition action={t.action} reward={t.reward}")
        self.items.append(t)

    def sample(self, batch_size: int) -> list[Transition]:
        idx = self.rng.choice(len(self.items), size=min(batch_size, len(self.items)), replace=False)
        return [self.items[i] for i in idx]


# ----------------------------------------------------------------------------
# networks


class MLP:
    """Two affine layers with a ReLU between them."""

    def __init__(self, rng: np.random.Generator, n_in: int, hidden: int, n_out: int, squash: bool = False):
        self.w1 = ag.glorot_uniform(rng, (n_in, hidden), n_in, hidden, np.float64)
        self.b1 = Tensor(np.zeros(hidden), requires_grad=True, dtype=np.float64)
        self.w2 = ag.glorot_uniform(rng, (hidden, n_out), hidden, n_out, np.float64)
        self.b2 = Tensor(np.zeros(n_out), requires_grad=True, dtype=np.float64)
        self.squash = squash

    def parameters(self) -> list[Tensor]:
        return [self.w1, self.b1, self.w2, self.b2]

    def logits(self, x: Tensor) -> Tensor:
        return ag.linear(ag.relu(ag.linear(x, self.w1, self.b1)), self.w2, self.b2)

    def __call__(self, x: Tensor) -> Tensor:
        out = self.logits(x)
        return ag.sigmoid(out) if self.squash else out

    def copy_from(self, other: "MLP") -> None:
        for p, q in zip(self.parameters(), other.parameters()):
            p.data[...] = q.data

    def soft_update(self, other: "MLP", tau: float) -> None:
        for p, q in zip(self.parameters(), other.parameters()):
            p.data *= 1.0 - tau
            p.data += tau * q.data


def make_actor(rng, state_dim: int = 64, hidden: int = 64) -> MLP:
    return MLP(rng, state_dim, hidden, 1, squash=True)


def make_critic(rng, state_dim: int = 64, hidden: int = 64) -> MLP:
    return MLP(rng, state_dim + 1, hidden, 1)


def actor_forward(actor: MLP, state) -> float:
    s = np.asarray(state, dtype=np.float64).reshape(1, -1)
    with ag.no_grad():
        return float(actor(Tensor(s, dtype=np.float64)).data[0, 0])


def critic_value(critic: MLP, states: np.ndarray, actions: np.ndarray) -> Tensor:
    x = np.concatenate([np.asarray(states, dtype=np.float64),
                        np.asarray(actions, dtype=np.float64).reshape(-1, 1)], axis=1)
    return critic(Tensor(x, dtype=np.float64))


# ----------------------------------------------------------------------------
# exploration and budget


def sample_action(mu: float, eta: float, rng: np.random.Generator, size: int | None = None):
    """Draw from a normal(mu, eta^2) truncated to [0, 1]; ``eta == 0`` returns ``mu``.

    With ``size`` an array of that many draws is returned instead of a float.
    """
    if eta < 0:
        raise ValueError("noise scale must be >= 0")
    mu = float(np.clip(mu, 0.0, 1.0))
    if eta == 0:
        return mu if size is None else np.full(size, mu)
    a, b = (0.0 - mu) / eta, (1.0 - mu) / eta
    draw = np.clip(truncnorm.rvs(a, b, loc=mu, scale=eta, size=size, random_state=rng), 0.0, 1.0)
    return float(draw) if size is None else draw


def _flops_of(g: ModelGraph, free: Sequence[float]) -> int:
    return count_flops(g, apply_ratio_sharing(g, list(free)))


def min_flops(g: ModelGraph, ratio_grid: Sequence[float]) -> int:
    return _flops_of(g, [min(ratio_grid)] * len(g.prunable))


def enforce_budget(partial: Sequence[float], index: int, action: float, budget: float | None,
                   g: ModelGraph, ratio_grid: Sequence[float]) -> float:
    """Largest ratio <= ``action`` for free layer ``index`` that keeps the budget reachable.

    Layers before ``index`` keep their chosen ratios; every later free layer
    is assumed to end at the grid minimum.  Candidates are the proposed value,
    the grid, and every ratio ``k / base`` that yields exactly ``k`` channels.
    """
    if budget is None:
        return action
    low = min(ratio_grid)
    prefix = list(partial[:index])
    rest = [low] * (len(g.prunable) - index - 1)

    def feasible(r: float) -> bool:
        return _flops_of(g, prefix + [r] + rest) <= budget

    if feasible(action):
        return action
    base = g.nodes[g.prunable[index]].base_out_channels
    candidates = {k / base for k in range(1, base + 1)} | set(ratio_grid)
    for r in sorted((c for c in candidates if c <= action), reverse=True):
        if feasible(r):
            return r
    raise InfeasibleBudgetError(f"no ratio for layer {g.prunable[index]} satisfies budget {budget}")


def snap_to_grid(partial: Sequence[float], index: int, action: float, budget: float | None,
                 g: ModelGraph, ratio_grid: Sequence[float]) -> float:
    """Nearest grid value, stepping down while it would break the budget."""
    grid = sorted(ratio_grid)
    k = int(np.argmin([abs(r - action) for r in grid]))
    if budget is None:
        return grid[k]
    prefix = list(partial[:index])
    rest = [grid[0]] * (len(g.prunable) - index - 1)
    while k > 0 and _flops_of(g, prefix + [grid[k]] + rest) > budget:
        k -= 1
    return grid[k]


# ----------------------------------------------------------------------------
# agent


class RewardNormalizer:
    """(R - mean) / (std + eps) over a sliding window of episode rewards."""

    def __init__(self, window: int = 64, eps: float = 1e-8):
        self.rewards: deque[float] = deque(maxlen=window)
        self.eps = eps

    def push(self, reward: float) -> None:
        self.rewards.append(float(reward))

    def __call__(self, rewards) -> np.ndarray:
        r = np.asarray(rewards, dtype=np.float64)
        if not self.rewards:
            return r
        window = np.asarray(self.rewards)
        return (r - window.mean()) / (window.std() + self.eps)


def bellman_targets(rewards_hat: np.ndarray, next_q: np.ndarray, terminal: np.ndarray, gamma: float) -> np.ndarray:
    """``y = R_hat + gamma * Q'(s', mu'(s'))``, with no bootstrap on terminal transitions."""
    return rewards_hat + gamma * np.where(terminal, 0.0, next_q)


class DDPGAgent:
    def __init__(self, config: SearchConfig, state_dim: int = 64):
        self.config = config
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, 7]))
        self.actor = make_actor(rng, state_dim, config.hidden)
        self.critic = make_critic(rng, state_dim, config.hidden)
        self.actor_target = make_actor(rng, state_dim, config.hidden)
        self.critic_target = make_critic(rng, state_dim, config.hidden)
        self.actor_target.copy_from(self.actor)
        self.critic_target.copy_from(self.critic)
        self.actor_opt = ag.Adam(self.actor.parameters(), config.actor_lr)
        self.critic_opt = ag.Adam(self.critic.parameters(), config.critic_lr)
        self.normalizer = RewardNormalizer(config.reward_window)

    def act(self, state) -> float:
        return actor_forward(self.actor, state)

    def update(self, batch: Sequence[Transition], update_actor: bool = True) -> float:
        return critic_update(batch, self.config.discount, self, self.normalizer(
            [t.reward for t in batch]), update_actor)


def critic_update(batch: Sequence[Transition], gamma: float, agent: DDPGAgent,
                  rewards_hat: np.ndarray | None = None, update_actor: bool = True) -> float:
    """One critic regression step, one deterministic policy-gradient step, soft target update.

    Returns the critic loss ``mean((y - Q(s, a))^2)`` before the step.
    """
    if not batch:
        raise ValueError("critic update needs a non-empty batch")
    states = np.stack([t.state for t in batch]).astype(np.float64)
    actions = np.array([t.action for t in batch])
    next_states = np.stack([t.next_state for t in batch]).astype(np.float64)
    terminal = np.array([t.terminal for t in batch])
    if rewards_hat is None:
        rewards_hat = np.array([t.reward for t in batch], dtype=np.float64)
    with ag.no_grad():
        next_actions = agent.actor_target(Tensor(next_states, dtype=np.float64)).data[:, 0]
        next_q = critic_value(agent.critic_target, next_states, next_actions).data[:, 0]
    y = bellman_targets(rewards_hat, next_q, terminal, gamma)

    agent.critic_opt.zero_grad()
    q = critic_value(agent.critic, states, actions)
    diff = q - Tensor(y.reshape(-1, 1), dtype=np.float64)
    loss = (diff * diff).mean()
    loss_value = loss.item()
    ag.backward(loss)
    agent.critic_opt.step()

    if update_actor:
        agent.actor_opt.zero_grad()
        s = Tensor(states, dtype=np.float64)
        logit = agent.actor.logits(s)
        q_pi = agent.critic(ag.concat([s, ag.sigmoid(logit)], axis=1))
        objective = -q_pi.mean()
        if agent.config.logit_penalty:
            objective = objective + agent.config.logit_penalty * (logit * logit).mean()
        ag.backward(objective)
        agent.actor_opt.step()
        agent.critic_opt.zero_grad()

    agent.actor_target.soft_update(agent.actor, agent.config.tau)
    agent.critic_target.soft_update(agent.critic, agent.config.tau)
    return loss_value


# ----------------------------------------------------------------------------
# episodes and search


StateFn = Callable[[RatioAssignment], np.ndarray]
RewardFn = Callable[[RatioAssignment], float]


@dataclass
class EpisodeResult:
    ratios: RatioAssignment
    reward: float
    transitions: list[Transition]
    flops: int
    states: list[np.ndarray] = field(repr=False, default_factory=list)


def run_episode(g: ModelGraph, state_fn: StateFn, reward_fn: RewardFn, agent: DDPGAgent,
                config: SearchConfig, episode: int, rng: np.random.Generator) -> EpisodeResult:
    """Choose a ratio for every free layer, then score the finished configuration.

    ``state_fn`` maps a ratio assignment to the l x d node-embedding matrix;
    ``reward_fn`` recalibrates and evaluates a complete assignment.
    """
    grid = config.ratio_grid
    n_free = len(g.prunable)
    if config.budget is not None and min_flops(g, grid) > config.budget:
        raise InfeasibleBudgetError(f"budget {config.budget} is below the minimum {min_flops(g, grid)} MACs")
    noise = config.noise(episode)
    partial = [1.0] * n_free
    states, actions = [], []  # actions as proposed by the agent, before grid snapping
    for t, node in enumerate(g.prunable):
        state = np.array(state_fn(apply_ratio_sharing(g, partial))[node], dtype=np.float64)
        if episode < config.warmup_episodes:
            proposed = float(grid[rng.integers(len(grid))])
        else:
            proposed = sample_action(agent.act(state), noise, rng)
        clipped = enforce_budget(partial, t, proposed, config.budget, g, grid)
        action = snap_to_grid(partial, t, clipped, config.budget, g, grid)
        partial[t] = action
        states.append(state)
        actions.append(float(np.clip(clipped, 0.0, 1.0)))
    ratios = apply_ratio_sharing(g, partial)
    reward = float(reward_fn(ratios))
    transitions = [
        Transition(states[t], actions[t], reward,
                   states[t + 1] if t + 1 < n_free else np.zeros_like(states[t]), t + 1 == n_free)
        for t in range(n_free)
    ]
    return EpisodeResult(ratios, reward, transitions, count_flops(g, ratios), states)


@dataclass
class SearchResult:
    best_ratios: RatioAssignment
    best_reward: float
    best_flops: int
    log: list[dict]


def search(g: ModelGraph, state_fn: StateFn, reward_fn: RewardFn, config: SearchConfig,
           agent: DDPGAgent | None = None) -> SearchResult:
    """Run ``config.episodes`` episodes and return the best feasible configuration seen."""
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 11]))
    agent = agent or DDPGAgent(config, state_dim=np.asarray(state_fn(apply_ratio_sharing(
        g, [1.0] * len(g.prunable)))).shape[1])
    buffer = ReplayBuffer(config.buffer_capacity, np.random.default_rng(np.random.SeedSequence([config.seed, 13])))
    best: EpisodeResult | None = None
    log: list[dict] = []
    for episode in range(config.episodes):
        result = run_episode(g, state_fn, reward_fn, agent, config, episode, rng)
        for t in result.transitions:
            buffer.add(t)
        agent.normalizer.push(result.reward)
        if len(buffer) >= config.batch_size:
            n_updates = config.updates_per_episode or len(result.transitions)
            update_actor = config.actor_during_warmup or episode >= config.warmup_episodes
            for _ in range(n_updates):
                agent.update(buffer.sample(config.batch_size), update_actor)
        feasible = config.budget is None or result.flops <= config.budget
        if feasible and (best is None or result.reward > best.reward):
            best = result
        log.append({"episode": episode, "reward": result.reward, "flops": result.flops,
                    "noise": config.noise(episode), "ratios": result.ratios.free(g)})
        logger.debug("episode %d reward %.4f flops %d", episode, result.reward, result.flops)
    if best is None:
        raise InfeasibleBudgetError("no feasible configuration was found")
    return SearchResult(best.ratios, best.reward, best.flops, log)
