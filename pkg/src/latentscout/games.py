"""Finite Bayesian games used to validate equilibrium convergence.

A SyntheticGame holds per-agent type sets with independent priors, finite
action sets, and a payoff array.  Everything here is small enough to
enumerate exactly, which is the point: exploitability and optimal values are
computed by brute force, no approximation.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from .errors import ConfigurationError

# A pure policy for one agent: action index per type index.
Policy = Tuple[int, ...]


@dataclass
class SyntheticGame:
    """Payoffs indexed as payoffs[theta_1, ..., theta_N, a_1, ..., a_N, agent]."""
    n_types: Tuple[int, ...]
    priors: Tuple[Tuple[float, ...], ...]
    n_actions: Tuple[int, ...]
    payoffs: np.ndarray
    horizon: int = 1
    r_max: float = 1.0

    def __post_init__(self):
        n = len(self.n_types)
        expected = tuple(self.n_types) + tuple(self.n_actions) + (n,)
        if self.payoffs.shape != expected:
            raise ConfigurationError(
                f"payoff shape {self.payoffs.shape} != expected {expected}")
        for prior in self.priors:
            if abs(sum(prior) - 1.0) > 1e-9 or any(p < 0 for p in prior):
                raise ConfigurationError(f"type prior {prior} is not a distribution")
        if np.max(np.abs(self.payoffs)) > self.r_max + 1e-12:
            raise ConfigurationError("payoffs exceed the configured reward bound")
        if self.horizon < 1:
            raise ConfigurationError("horizon must be >= 1")

    @property
    def n_agents(self) -> int:
        return len(self.n_types)

    def reward(self, types: Sequence[int], actions: Sequence[int]) -> Tuple[float, ...]:
        idx = tuple(types) + tuple(actions)
        return tuple(float(x) for x in self.payoffs[idx])

    def type_profiles(self):
        """All joint type draws with their probabilities."""
        for combo in itertools.product(*(range(k) for k in self.n_types)):
            prob = 1.0
            for i, t in enumerate(combo):
                prob *= self.priors[i][t]
            yield combo, prob

    def pure_policies(self, agent: int) -> List[Policy]:
        return [tuple(p) for p in itertools.product(
            range(self.n_actions[agent]), repeat=self.n_types[agent])]


def expected_utility(game: SyntheticGame, policies: Sequence[Policy],
                     agent: int) -> float:
    """Expected payoff of `agent` under a joint pure policy profile."""
    total = 0.0
    for types, prob in game.type_profiles():
        if prob == 0.0:
            continue
        actions = [policies[i][types[i]] for i in range(game.n_agents)]
        total += prob * game.reward(types, actions)[agent]
    return total


def exploitability(game: SyntheticGame, policies: Sequence[Policy]) -> float:
    """Largest expected-utility gain any agent gets from a pure deviation.

    Zero exactly when the profile is a Bayesian Nash equilibrium; never
    negative because the identity deviation is always available.
    """
    if len(policies) != game.n_agents:
        raise ConfigurationError("one policy per agent required")
    for i, pol in enumerate(policies):
        if len(pol) != game.n_types[i]:
            raise ConfigurationError(f"policy for agent {i} must cover all types")
    worst = 0.0
    for i in range(game.n_agents):
        base = expected_utility(game, policies, i)
        for deviation in game.pure_policies(i):
            trial = list(policies)
            trial[i] = deviation
            worst = max(worst, expected_utility(game, trial, i) - base)
    return worst


def best_response_values(game: SyntheticGame) -> Tuple[Tuple[Policy, ...], Tuple[float, ...]]:
    """An exact BNE profile and each agent's value under it.

    Found by enumerating all joint pure profiles and keeping one with zero
    exploitability; ties broken lexicographically for determinism.
    """
    all_profiles = itertools.product(
        *(game.pure_policies(i) for i in range(game.n_agents)))
    for profile in all_profiles:
        if exploitability(game, list(profile)) == 0.0:
            values = tuple(expected_utility(game, list(profile), i)
                           for i in range(game.n_agents))
            return tuple(profile), values
    raise ConfigurationError("game has no pure-strategy equilibrium")


def coordination_game(horizon: int = 1) -> SyntheticGame:
    """The bundled 2-agent, 2-type, 2-action cooperative coordination game.

    Both agents share one reward: each earns 0.35 for playing the action that
    matches its own private type (penalized symmetrically when it does not),
    plus a joint bonus of 0.3 only when both match.  Payoffs are centered
    around zero and bounded by 1; the unique equilibrium is truthful
    type-matching by both agents.
    """
    payoffs = np.zeros((2, 2, 2, 2, 2))
    for t0, t1, a0, a1 in itertools.product(range(2), repeat=4):
        s0 = 1.0 if a0 == t0 else -1.0
        s1 = 1.0 if a1 == t1 else -1.0
        both = 1.0 if (s0 > 0 and s1 > 0) else -1.0
        r = 0.35 * s0 + 0.35 * s1 + 0.3 * both
        payoffs[t0, t1, a0, a1, :] = r
    return SyntheticGame(
        n_types=(2, 2),
        priors=((0.5, 0.5), (0.5, 0.5)),
        n_actions=(2, 2),
        payoffs=payoffs,
        horizon=horizon,
    )
