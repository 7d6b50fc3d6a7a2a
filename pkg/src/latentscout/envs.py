"""Environment adapters for episode rollouts.

An environment exposes `n_agents`, `d_obs`, `reset(rng) -> observations`, and
`step(actions, rng) -> (next_observations, rewards, done)`.  The synthetic
adapter wraps a finite Bayesian game; the evidence pipeline adapter lives in
the pipeline module because it pulls in backends and retrieval.
"""
from __future__ import annotations

from typing import List, Sequence, Tuple

import numpy as np

from .belief import Observation, PromptEmbedding
from .errors import UsageError
from .games import SyntheticGame


class SyntheticGameEnv:
    """One episode = one play of the game (repeated `horizon` times with the
    same private types).

    Observations are scaled one-hot type encodings; the scale keeps the
    private-type signal comparable in magnitude to the action coordinates
    downstream networks see.  Continuous actions map to game actions by
    thresholding the temperature coordinate at 0.5.
    """

    def __init__(self, game: SyntheticGame, feature_scale: float = 3.0):
        self.game = game
        self.feature_scale = feature_scale
        self.n_agents = game.n_agents
        self.d_obs = max(game.n_types)
        self._types: Tuple[int, ...] = ()
        self._round = 0

    def observation_for_type(self, agent: int, type_index: int,
                             round_index: int = 0) -> Observation:
        feats = np.zeros(self.d_obs)
        feats[type_index] = self.feature_scale
        return Observation(features=tuple(feats), round_index=round_index)

    def game_action(self, embedding: PromptEmbedding) -> int:
        if self.game.n_actions != tuple([2] * self.n_agents):
            raise UsageError("threshold discretization needs 2-action games")
        return 1 if embedding.T >= 0.5 else 0

    def reset(self, rng: np.random.Generator) -> List[Observation]:
        self._types = tuple(
            int(rng.choice(len(prior), p=np.asarray(prior)))
            for prior in self.game.priors)
        self._round = 0
        return [self.observation_for_type(i, self._types[i], 0)
                for i in range(self.n_agents)]

    def step(self, actions: Sequence[PromptEmbedding], rng: np.random.Generator):
        if len(actions) != self.n_agents:
            raise UsageError(f"expected {self.n_agents} actions, got {len(actions)}")
        game_actions = [self.game_action(a) for a in actions]
        rewards = self.game.reward(self._types, game_actions)
        self._round += 1
        done = self._round >= self.game.horizon
        next_obs = [self.observation_for_type(i, self._types[i], self._round)
                    for i in range(self.n_agents)]
        return next_obs, rewards, done
