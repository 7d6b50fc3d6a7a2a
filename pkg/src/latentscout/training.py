"""Episode orchestration, replay, joint optimization, and regret tracking.

The loop is deliberately plain: roll an episode with epsilon-greedy actions
over the candidate grid, push joint transitions into a small FIFO buffer,
then take a configured number of Adam steps on the per-agent TD losses and
on the mixing loss, and finally soft-update the target parameters.  On
synthetic games the loop also keeps an exact regret ledger and measures
exploitability every ten episodes.
"""
from __future__ import annotations

import csv
from collections import deque
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import mixing as mixing_mod
from .belief import (
    AgentStep,
    BeliefNetParams,
    GroupEncoderParams,
    Observation,
    PromptEmbedding,
    Trajectory,
    action_values,
    candidate_grid,
    init_belief_net,
    init_group_encoder,
    td_loss,
    td_target,
)
from .errors import (
    BackendError,
    ConfigurationError,
    EpisodeAborted,
    InvariantViolation,
    UsageError,
)
from .games import SyntheticGame, best_response_values, expected_utility, exploitability
from .mixing import MixingParams, init_mixing, mixing_loss, update_targets
from .nn.autodiff import backward
from .nn.checkpoint import save_params
from .nn.optim import adam_step, zero_grads

EPSILON_START = 0.5
EPSILON_END = 0.05
EXPLOIT_MEASURE_EVERY = 10
EARLY_STOP_WINDOW = 10
EARLY_STOP_PATIENCE = 5


@dataclass(frozen=True)
class Transition:
    """One joint step: per-agent snapshots plus the shared fields."""
    trajectories: Tuple[Trajectory, ...]
    observations: Tuple[Observation, ...]
    actions: Tuple[PromptEmbedding, ...]
    rewards: Tuple[float, ...]
    total_reward: float
    next_trajectories: Tuple[Trajectory, ...]
    done: bool

    def __post_init__(self):
        counts = {len(self.trajectories), len(self.observations),
                  len(self.actions), len(self.rewards), len(self.next_trajectories)}
        if len(counts) != 1:
            raise UsageError("transition fields disagree on agent count")

    def agent_view(self, i: int) -> AgentStep:
        return AgentStep(
            trajectory=self.trajectories[i],
            observation=self.observations[i],
            action=self.actions[i],
            reward=self.rewards[i],
            next_trajectory=self.next_trajectories[i],
            done=self.done,
        )


class ReplayBuffer:
    """Bounded FIFO of joint transitions with seeded sampling."""

    def __init__(self, capacity: int = 32):
        if capacity < 1:
            raise ConfigurationError("replay capacity must be positive")
        self.capacity = capacity
        self._items: deque = deque(maxlen=capacity)

    def __len__(self) -> int:
        return len(self._items)

    def push(self, item: Transition) -> None:
        self._items.append(item)

    def items(self) -> List[Transition]:
        return list(self._items)

    def sample(self, k: int, rng: np.random.Generator) -> List[Transition]:
        if k < 1 or k > len(self._items):
            raise UsageError(f"cannot sample {k} of {len(self._items)} items")
        idx = rng.choice(len(self._items), size=k, replace=False)
        pool = list(self._items)
        return [pool[i] for i in idx]


@dataclass
class TrainingConfig:
    episodes: int = 100
    learning_rate: float = 0.001
    gamma: float = 0.99
    d_entity: int = 256
    d_belief: int = 128
    hidden: int = 256
    lambda_m: float = 0.1
    r_max: float = 1.0
    soft_update_rate: float = 0.01
    batch_size: int = 32
    buffer_capacity: int = 32
    grid_g: int = 5
    seed: int = 0
    early_stop_threshold: float = 1e-3
    updates_per_episode: int = 16
    mixing_updates_per_episode: int = 4
    encoder_heads: int = 1
    mixing_heads: int = 2

    def validate(self) -> None:
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigurationError(f"gamma must be in [0,1), got {self.gamma}")
        if self.lambda_m < 0:
            raise ConfigurationError("lambda_m must be >= 0")
        for name in ("d_entity", "d_belief", "hidden", "batch_size",
                     "buffer_capacity", "grid_g", "updates_per_episode"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be positive")
        if self.episodes < 0:
            raise ConfigurationError("episodes must be >= 0")
        if self.learning_rate <= 0:
            raise ConfigurationError("learning rate must be positive")


@dataclass
class RegretLedger:
    """Exact per-step optimal-vs-actual values for synthetic games."""
    records: List[Tuple[int, Tuple[float, ...], Tuple[float, ...]]] = field(
        default_factory=list)

    def append(self, t: int, v_star: Tuple[float, ...],
               v_pi: Tuple[float, ...]) -> None:
        self.records.append((t, tuple(v_star), tuple(v_pi)))

    def __len__(self) -> int:
        return len(self.records)


def bayesian_regret(ledger: RegretLedger, T: int) -> Tuple[float, float]:
    """Cumulative regret R(T) and the least-squares c in R(t) ~ c*sqrt(t).

    R(T) sums every agent's optimal-minus-actual value gap over the first T
    records; the fit minimizes sum_t (R(t) - c*sqrt(t))^2 over t = 1..T.
    """
    if T < 1 or T > len(ledger.records):
        raise UsageError(f"T={T} outside ledger of length {len(ledger.records)}")
    running = 0.0
    cum: List[float] = []
    for t, v_star, v_pi in ledger.records[:T]:
        running += sum(s - p for s, p in zip(v_star, v_pi))
        cum.append(running)
    ts = np.arange(1, T + 1, dtype=np.float64)
    roots = np.sqrt(ts)
    c = float(np.dot(cum, roots) / np.dot(roots, roots))
    return running, c


def epsilon_for_episode(episode: int, total_episodes: int) -> float:
    """Linear anneal from EPSILON_START to EPSILON_END over the first half."""
    half = max(1, total_episodes // 2)
    frac = min(1.0, episode / half)
    return EPSILON_START + frac * (EPSILON_END - EPSILON_START)


def greedy_action_index(net: BeliefNetParams, trajectory: Trajectory,
                        obs: Observation,
                        grid: Sequence[PromptEmbedding]) -> int:
    """Index of the grid action with the highest online Q (no recording)."""
    return int(np.argmax(action_values(net, trajectory, obs, grid)))


def select_action(net: BeliefNetParams, trajectory: Trajectory, obs: Observation,
                  grid: Sequence[PromptEmbedding], epsilon: float,
                  rng: np.random.Generator) -> PromptEmbedding:
    if epsilon > 0 and rng.random() < epsilon:
        return grid[int(rng.integers(0, len(grid)))]
    return grid[greedy_action_index(net, trajectory, obs, grid)]


def run_episode(env, nets: Sequence[BeliefNetParams],
                grid: Sequence[PromptEmbedding], epsilon: float,
                rng_env: np.random.Generator,
                rng_explore: np.random.Generator) -> List[Transition]:
    """Roll one episode; returns chronologically ordered joint transitions."""
    transitions: List[Transition] = []
    try:
        observations = env.reset(rng_env)
        trajectories: List[Trajectory] = [() for _ in range(env.n_agents)]
        done = False
        while not done:
            actions = [
                select_action(net, traj, obs, grid, epsilon, rng_explore)
                for net, traj, obs in zip(nets, trajectories, observations)]
            next_obs, rewards, done = env.step(actions, rng_env)
            next_trajectories = [
                traj + ((obs, act),)
                for traj, obs, act in zip(trajectories, observations, actions)]
            transitions.append(Transition(
                trajectories=tuple(trajectories),
                observations=tuple(observations),
                actions=tuple(actions),
                rewards=tuple(float(r) for r in rewards),
                total_reward=float(np.mean(rewards)),
                next_trajectories=tuple(next_trajectories),
                done=done,
            ))
            trajectories = next_trajectories
            observations = next_obs
    except BackendError as exc:
        raise EpisodeAborted(
            f"episode aborted after {len(transitions)} transitions: {exc}",
            partial_trace=transitions) from exc
    return transitions


def extract_policies(env, nets: Sequence[BeliefNetParams],
                     grid: Sequence[PromptEmbedding]) -> List[Tuple[int, ...]]:
    """Greedy type-to-action maps for a synthetic environment."""
    game: SyntheticGame = env.game
    policies = []
    for i, net in enumerate(nets):
        actions = []
        for theta in range(game.n_types[i]):
            obs = env.observation_for_type(i, theta, 0)
            idx = greedy_action_index(net, (), obs, grid)
            actions.append(env.game_action(grid[idx]))
        policies.append(tuple(actions))
    return policies


@dataclass
class TrainResult:
    nets: List[BeliefNetParams]
    encoder: GroupEncoderParams
    mixing: MixingParams
    ledger: Optional[RegretLedger]
    history: List[Dict]
    stopped_early: bool


def _all_online_params(nets, encoder, mixing_params):
    out = []
    for net in nets:
        out.extend(net.online.values())
    out.extend(encoder.params.values())
    out.extend(mixing_params.online.values())
    return out


def _check_finite(value: float, what: str, diagnostics_dir, nets, encoder,
                  mixing_params, config) -> None:
    if np.isfinite(value):
        return
    if diagnostics_dir is not None:
        path = f"{diagnostics_dir}/diverged.ckpt"
        save_params(path, "training-diagnostic", config.seed,
                    _checkpoint_groups(nets, encoder, mixing_params))
    raise InvariantViolation(f"{what} diverged to {value}")


def _checkpoint_groups(nets, encoder, mixing_params) -> Dict[str, dict]:
    groups = {f"belief_{i}": net.online for i, net in enumerate(nets)}
    groups.update({f"belief_{i}_target": net.target for i, net in enumerate(nets)})
    groups["encoder"] = encoder.params
    groups["mixing"] = mixing_params.online
    groups["mixing_target"] = mixing_params.target
    return groups


def train(config: TrainingConfig, env, diagnostics_dir=None) -> TrainResult:
    """Run the full training loop against `env`.

    Synthetic-game environments (anything exposing a `game` attribute and
    type observations) additionally get exact exploitability measurements and
    a regret ledger; for live pipeline environments those are unavailable and
    left empty.
    """
    config.validate()
    rng_init = np.random.default_rng([config.seed, 0])
    rng_env = np.random.default_rng([config.seed, 1])
    rng_explore = np.random.default_rng([config.seed, 2])
    rng_replay = np.random.default_rng([config.seed, 3])

    nets = [init_belief_net(rng_init, env.d_obs, config.d_belief, config.hidden)
            for _ in range(env.n_agents)]
    encoder = init_group_encoder(rng_init, config.d_belief, config.d_entity,
                                 config.encoder_heads)
    mixing_params = init_mixing(rng_init, config.d_entity, config.mixing_heads)

    grid = candidate_grid(config.grid_g)
    grids = [grid] * env.n_agents
    buffer = ReplayBuffer(config.buffer_capacity)

    game: Optional[SyntheticGame] = getattr(env, "game", None)
    ledger = RegretLedger() if game is not None else None
    v_star: Tuple[float, ...] = ()
    if game is not None:
        _, v_star = best_response_values(game)

    history: List[Dict] = []
    episode_rewards: List[float] = []
    stop_streak = 0
    stopped_early = False
    step_counter = 0

    for episode in range(1, config.episodes + 1):
        epsilon = epsilon_for_episode(episode - 1, config.episodes)

        if game is not None:
            policies = extract_policies(env, nets, grid)
            v_pi = tuple(expected_utility(game, policies, i)
                         for i in range(env.n_agents))

        transitions = run_episode(env, nets, grid, epsilon, rng_env, rng_explore)
        for tr in transitions:
            buffer.push(tr)
            step_counter += 1
            if ledger is not None:
                ledger.append(step_counter, v_star, v_pi)
        episode_reward = float(sum(t.total_reward for t in transitions))
        episode_rewards.append(episode_reward)

        batch_size = min(len(buffer), config.batch_size)
        td_losses = [float("nan")] * env.n_agents
        mix_loss_value = float("nan")

        # Bootstrapped targets only move when the target nets do (end of
        # episode), so compute them once per item here and reuse across the
        # episode's update steps.
        td_cache: Dict[int, List[float]] = {}
        mix_cache: Dict[int, float] = {}

        def td_targets_for(batch: List[Transition], agent: int) -> List[float]:
            out = []
            for item in batch:
                key = id(item)
                if key not in td_cache:
                    td_cache[key] = [None] * env.n_agents
                cached = td_cache[key]
                if cached[agent] is None:
                    view = item.agent_view(agent)
                    if view.done:
                        cached[agent] = view.reward
                    else:
                        cached[agent] = td_target(
                            view.reward, view.next_trajectory, nets[agent],
                            config.gamma, grid)
                out.append(cached[agent])
            return out

        def mix_targets_for(batch: List[Transition]) -> List[float]:
            out = []
            for item in batch:
                key = id(item)
                if key not in mix_cache:
                    if item.done:
                        mix_cache[key] = item.total_reward
                    else:
                        jm = mixing_mod.joint_target_max(
                            item.next_trajectories, nets, encoder,
                            mixing_params, grids)
                        mix_cache[key] = item.total_reward + config.gamma * jm
                out.append(mix_cache[key])
            return out

        for _ in range(config.updates_per_episode):
            batch = buffer.sample(batch_size, rng_replay)
            for i, net in enumerate(nets):
                views = [item.agent_view(i) for item in batch]
                targets = td_targets_for(batch, i)
                zero_grads(net.online.values())
                loss = td_loss(views, net, config.gamma, grid, targets=targets)
                td_losses[i] = float(loss.data)
                _check_finite(td_losses[i], f"td loss (agent {i})",
                              diagnostics_dir, nets, encoder, mixing_params, config)
                backward(loss)
                adam_step(net.online.values(), config.learning_rate)

        for _ in range(config.mixing_updates_per_episode):
            batch = buffer.sample(batch_size, rng_replay)
            targets = mix_targets_for(batch)
            all_params = _all_online_params(nets, encoder, mixing_params)
            zero_grads(all_params)
            mloss = mixing_loss(batch, mixing_params, nets, encoder,
                                config.gamma, config.lambda_m, grids,
                                targets=targets)
            mix_loss_value = float(mloss.data)
            _check_finite(mix_loss_value, "mixing loss", diagnostics_dir,
                          nets, encoder, mixing_params, config)
            backward(mloss)
            adam_step(all_params, config.learning_rate)

        update_targets(mixing_params, nets, config.soft_update_rate)

        row = {
            "episode": episode,
            "epsilon": round(epsilon, 6),
            "total_reward": episode_reward,
            "mixing_loss": mix_loss_value,
            "exploitability": "",
            "regret": "",
        }
        for i, v in enumerate(td_losses):
            row[f"td_loss_{i}"] = v
        if game is not None:
            row["regret"] = bayesian_regret(ledger, len(ledger))[0]
            if episode % EXPLOIT_MEASURE_EVERY == 0:
                policies = extract_policies(env, nets, grid)
                row["exploitability"] = exploitability(game, policies)
        history.append(row)

        # A flat reward trace only signals convergence once exploration has
        # annealed to its floor; before that the moving average mostly tracks
        # epsilon noise, so the stopping rule stays disarmed.
        anneal_done = episode > config.episodes // 2
        if anneal_done and len(episode_rewards) >= 2 * EARLY_STOP_WINDOW:
            ma_now = float(np.mean(episode_rewards[-EARLY_STOP_WINDOW:]))
            ma_prev = float(np.mean(episode_rewards[-EARLY_STOP_WINDOW - 1:-1]))
            if abs(ma_now - ma_prev) < config.early_stop_threshold:
                stop_streak += 1
            else:
                stop_streak = 0
            if stop_streak >= EARLY_STOP_PATIENCE:
                stopped_early = True
                break

    return TrainResult(nets=nets, encoder=encoder, mixing=mixing_params,
                       ledger=ledger, history=history, stopped_early=stopped_early)


def write_training_log(history: List[Dict], path) -> None:
    """CSV log: one row per episode with losses, rewards, and diagnostics."""
    if not history:
        fieldnames = ["episode", "epsilon", "total_reward", "mixing_loss",
                      "exploitability", "regret"]
    else:
        fieldnames = list(history[0].keys())
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        for row in history:
            writer.writerow(row)
