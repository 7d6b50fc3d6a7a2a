"""Shared oracles and builders used across the test modules.

The gradient checker rebuilds the loss graph from scratch on every
evaluation, so finite differences see exactly what the tape saw.
"""
from __future__ import annotations

from typing import Callable, List, Sequence, Tuple

import numpy as np

from latentscout.belief import (
    AgentStep,
    BeliefNetParams,
    Observation,
    PromptEmbedding,
    Trajectory,
)
from latentscout.nn.autodiff import backward
from latentscout.nn.optim import Parameter, zero_grads

FD_STEP = 1e-5
GRAD_TOL = 1e-4


def loss_scalar(loss_fn: Callable) -> float:
    return float(loss_fn().data.reshape(-1)[0])


def numeric_gradient(loss_fn: Callable, param: Parameter,
                     step: float = FD_STEP) -> np.ndarray:
    """Central finite differences of a rebuilt scalar loss, one coordinate
    at a time."""
    grad = np.zeros_like(param.value)
    flat = param.value.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + step
        up = loss_scalar(loss_fn)
        flat[i] = keep - step
        down = loss_scalar(loss_fn)
        flat[i] = keep
        gflat[i] = (up - down) / (2.0 * step)
    return grad


def analytic_gradients(loss_fn: Callable,
                       params: Sequence[Parameter]) -> List[np.ndarray]:
    zero_grads(params)
    backward(loss_fn())
    return [p.grad.copy() for p in params]


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """Symmetric norm-relative gap; zero-against-zero counts as exact."""
    scale = float(np.linalg.norm(a) + np.linalg.norm(b))
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(a - b) / scale)


def check_gradients(loss_fn: Callable, params: Sequence[Parameter],
                    tol: float = GRAD_TOL) -> float:
    """Worst relative error between tape gradients and finite differences."""
    analytic = analytic_gradients(loss_fn, params)
    worst = 0.0
    for param, grad in zip(params, analytic):
        numeric = numeric_gradient(loss_fn, param)
        worst = max(worst, relative_error(grad, numeric))
    assert worst < tol, f"gradient mismatch: relative error {worst:.3e}"
    return worst


def random_embedding(rng: np.random.Generator) -> PromptEmbedding:
    t, p = rng.uniform(0.05, 0.95, size=2)
    return PromptEmbedding(float(t), float(p))


def random_observation(rng: np.random.Generator, d_obs: int,
                       round_index: int) -> Observation:
    feats = tuple(float(x) for x in rng.normal(size=d_obs))
    return Observation(features=feats, round_index=round_index)


def random_trajectory(rng: np.random.Generator, d_obs: int,
                      length: int) -> Trajectory:
    return tuple(
        (random_observation(rng, d_obs, r), random_embedding(rng))
        for r in range(length))


def random_agent_step(rng: np.random.Generator, d_obs: int,
                      history: int = 1, done: bool = False) -> AgentStep:
    trajectory = random_trajectory(rng, d_obs, history)
    obs = random_observation(rng, d_obs, history)
    action = random_embedding(rng)
    next_trajectory = trajectory + ((obs, action),)
    return AgentStep(
        trajectory=trajectory, observation=obs, action=action,
        reward=float(rng.uniform(-1.0, 1.0)),
        next_trajectory=next_trajectory, done=done)


def online_parameters(net: BeliefNetParams) -> List[Parameter]:
    return list(net.online.values())


def joint_random_step(
        rng: np.random.Generator, d_obs: int, n_agents: int,
        history: int = 1) -> Tuple[Tuple[AgentStep, ...], "JointItem"]:
    """A matching (per-agent steps, mixing batch item) pair."""
    steps = tuple(random_agent_step(rng, d_obs, history) for _ in range(n_agents))
    item = JointItem(
        trajectories=tuple(s.trajectory for s in steps),
        observations=tuple(s.observation for s in steps),
        actions=tuple(s.action for s in steps),
        total_reward=float(np.mean([s.reward for s in steps])),
        next_trajectories=tuple(s.next_trajectory for s in steps),
        done=steps[0].done)
    return steps, item


class JointItem:
    """Duck-typed mixing batch item (what the replay buffer stores)."""

    def __init__(self, trajectories, observations, actions, total_reward,
                 next_trajectories, done):
        self.trajectories = trajectories
        self.observations = observations
        self.actions = actions
        self.total_reward = total_reward
        self.next_trajectories = next_trajectories
        self.done = done
