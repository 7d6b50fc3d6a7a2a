"""Per-agent belief networks and the shared group-belief encoder.

Each agent owns a small network that folds its trajectory of (observation,
action) steps into a belief vector, emits a prompt-embedding action through
sigmoid heads, and scores actions with a Q-head.  TD training follows the
standard bootstrapped squared-error form with a frozen target Q-head; the
action maximum is taken over a fixed candidate grid so it is exhaustively
testable.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigurationError, DimensionError
from .nn import autodiff as ad
from .nn.autodiff import Tensor
from .nn.layers import affine, multi_head_attention
from .nn.optim import ParamDict, Parameter, init_bias, init_weight


@dataclass(frozen=True)
class PromptEmbedding:
    """Action vector [T, p]: decoding-temperature and repetition-penalty
    fractions, both strictly inside (0, 1)."""
    T: float
    p: float

    def __post_init__(self):
        if not (0.0 < self.T < 1.0 and 0.0 < self.p < 1.0):
            raise ConfigurationError(
                f"prompt embedding coordinates must lie in (0,1), got ({self.T}, {self.p})")

    def vector(self) -> np.ndarray:
        return np.array([self.T, self.p])


@dataclass(frozen=True)
class Observation:
    features: tuple
    round_index: int

    def feature_array(self) -> np.ndarray:
        return np.asarray(self.features, dtype=np.float64)


# One past step: the observation the agent saw and the action it then took.
Step = Tuple[Observation, PromptEmbedding]
Trajectory = Tuple[Step, ...]


@dataclass(frozen=True)
class AgentStep:
    """Per-agent view of one stored transition."""
    trajectory: Trajectory
    observation: Observation
    action: PromptEmbedding
    reward: float
    next_trajectory: Trajectory
    done: bool


@dataclass
class BeliefNetParams:
    d_obs: int
    d_b: int
    hidden: int
    online: ParamDict
    target: ParamDict  # Q-head copy only; the encoder has no target twin.


@dataclass
class GroupEncoderParams:
    d_b: int
    d_entity: int
    heads: int
    params: ParamDict


def candidate_grid(g: int) -> List[PromptEmbedding]:
    """G x G grid of candidate actions over (0.05, 0.95) squared."""
    if g < 1:
        raise ConfigurationError(f"grid size must be >= 1, got {g}")
    axis = np.linspace(0.05, 0.95, g)
    return [PromptEmbedding(float(t), float(p)) for t in axis for p in axis]


Q_HEAD_KEYS = ("q_w1", "q_b1", "q_w2", "q_b2")


def init_belief_net(rng: np.random.Generator, d_obs: int, d_b: int,
                    hidden: int) -> BeliefNetParams:
    step_dim = d_obs + 3  # features + [T, p] + round index
    online: ParamDict = {
        "enc_w1": init_weight(rng, hidden, step_dim),
        "enc_b1": init_bias(hidden),
        "enc_w2": init_weight(rng, d_b, hidden),
        "enc_b2": init_bias(d_b),
        "t_w": init_weight(rng, 1, d_b),
        "t_b": init_bias(1),
        "p_w": init_weight(rng, 1, d_b),
        "p_b": init_bias(1),
        "q_w1": init_weight(rng, hidden, d_b + 2),
        "q_b1": init_bias(hidden),
        "q_w2": init_weight(rng, 1, hidden),
        "q_b2": init_bias(1),
    }
    target = {k: Parameter(online[k].value) for k in Q_HEAD_KEYS}
    return BeliefNetParams(d_obs=d_obs, d_b=d_b, hidden=hidden,
                           online=online, target=target)


def init_group_encoder(rng: np.random.Generator, d_b: int, d_entity: int,
                       heads: int = 1) -> GroupEncoderParams:
    if heads < 1 or d_b % heads != 0:
        raise ConfigurationError(f"{heads} heads do not divide belief dim {d_b}")
    params: ParamDict = {
        "w_q": init_weight(rng, d_b, d_b),
        "w_k": init_weight(rng, d_b, d_b),
        "w_v": init_weight(rng, d_b, d_b),
        "w_o": init_weight(rng, d_entity, d_b),
    }
    return GroupEncoderParams(d_b=d_b, d_entity=d_entity, heads=heads, params=params)


def _leaves(params: ParamDict, frozen: bool) -> dict:
    return {k: (p.frozen() if frozen else p.tensor()) for k, p in params.items()}


def validate_trajectory(trajectory: Trajectory) -> None:
    last = -1
    for obs, _action in trajectory:
        if obs.round_index <= last:
            raise ConfigurationError(
                "trajectory round indices must be strictly increasing")
        last = obs.round_index


def _step_vector(obs: Observation, action_vec: np.ndarray, d_obs: int) -> np.ndarray:
    feats = obs.feature_array()
    if feats.shape != (d_obs,):
        raise DimensionError(
            f"observation has {feats.shape} features, expected ({d_obs},)")
    return np.concatenate([feats, action_vec, [float(obs.round_index)]])


def _encode(leaves: dict, net: BeliefNetParams, trajectory: Trajectory,
            obs: Optional[Observation]) -> Tensor:
    """Belief vector: tanh-encoded steps, mean-pooled, projected to d_b.

    The current observation (when given) joins the pool as a pseudo-step with
    a zero action, since no action has been taken for it yet.
    """
    validate_trajectory(trajectory)
    steps = [_step_vector(o, a.vector(), net.d_obs) for o, a in trajectory]
    if obs is not None:
        steps.append(_step_vector(obs, np.zeros(2), net.d_obs))
    if steps:
        encoded = [ad.tanh(affine(leaves["enc_w1"], Tensor(s), leaves["enc_b1"]))
                   for s in steps]
        pooled = encoded[0] if len(encoded) == 1 else ad.mean_rows(ad.stack_rows(encoded))
    else:
        pooled = Tensor(np.zeros(net.hidden))
    return affine(leaves["enc_w2"], pooled, leaves["enc_b2"])


def q_value(leaves: dict, b: Tensor, action: PromptEmbedding) -> Tensor:
    """Q-head on concat(belief, action); returns a shape-(1,) tensor."""
    x = ad.concat([b, Tensor(action.vector())])
    h = ad.tanh(affine(leaves["q_w1"], x, leaves["q_b1"]))
    return affine(leaves["q_w2"], h, leaves["q_b2"])


@dataclass
class BeliefForward:
    belief: Tensor
    embedding: PromptEmbedding
    q: Tensor


def belief_forward(net: BeliefNetParams, trajectory: Trajectory,
                   obs: Observation, frozen: bool = False) -> BeliefForward:
    """Belief vector, sigmoid-head action, and the local Q at that action."""
    leaves = _leaves(net.online, frozen)
    b = _encode(leaves, net, trajectory, obs)
    t_head = ad.sigmoid(affine(leaves["t_w"], b, leaves["t_b"]))
    p_head = ad.sigmoid(affine(leaves["p_w"], b, leaves["p_b"]))
    embedding = PromptEmbedding(float(t_head.data[0]), float(p_head.data[0]))
    q = q_value(leaves, b, embedding)
    return BeliefForward(belief=b, embedding=embedding, q=q)


def belief_vector(net: BeliefNetParams, trajectory: Trajectory,
                  obs: Optional[Observation], frozen: bool = False) -> Tensor:
    """Just the belief encoding; used by losses and action selection."""
    return _encode(_leaves(net.online, frozen), net, trajectory, obs)


def target_q(net: BeliefNetParams, b: Tensor, action: PromptEmbedding) -> float:
    """Target-head Q as a detached float."""
    leaves = _leaves(net.target, frozen=True)
    return float(q_value(leaves, b, action).data[0])


def td_target(reward: float, next_trajectory: Trajectory, net: BeliefNetParams,
              gamma: float, candidates: Sequence[PromptEmbedding]) -> float:
    """reward + gamma * max over candidates of the target-network Q."""
    if not candidates:
        raise ConfigurationError("td_target needs a nonempty candidate set")
    if not 0.0 <= gamma < 1.0:
        raise ConfigurationError(f"gamma must lie in [0, 1), got {gamma}")
    b_next = belief_vector(net, next_trajectory, None, frozen=True)
    best = max(target_q(net, b_next, c) for c in candidates)
    return reward + gamma * best


def td_loss(batch: Sequence[AgentStep], net: BeliefNetParams, gamma: float,
            candidates: Sequence[PromptEmbedding],
            targets: Optional[Sequence[float]] = None) -> Tensor:
    """Mean squared TD error over the batch; targets are detached.

    Terminal steps bootstrap nothing: their target is the bare reward.
    `targets` may carry precomputed td_target values (cached by the training
    loop between target-network updates); omitted, they are computed here.
    """
    if not batch:
        raise ConfigurationError("td_loss needs a nonempty batch")
    if targets is not None and len(targets) != len(batch):
        raise ConfigurationError("targets must align with the batch")
    terms = []
    for idx, item in enumerate(batch):
        if targets is not None:
            y = targets[idx]
        elif item.done:
            y = item.reward
        else:
            y = td_target(item.reward, item.next_trajectory, net, gamma, candidates)
        leaves = _leaves(net.online, frozen=False)
        b = _encode(leaves, net, item.trajectory, item.observation)
        q = q_value(leaves, b, item.action)
        delta = ad.sub(Tensor(np.array([y])), q)
        terms.append(ad.mul(delta, delta))
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return ad.mul(ad.sum_all(total), 1.0 / len(batch))


def action_values(net: BeliefNetParams, trajectory: Trajectory,
                  obs: Optional[Observation],
                  candidates: Sequence[PromptEmbedding]) -> List[float]:
    """Online-network Q for every candidate action, without tape recording."""
    leaves = _leaves(net.online, frozen=True)
    b = _encode(leaves, net, trajectory, obs)
    return [float(q_value(leaves, b, c).data[0]) for c in candidates]


def encode_group(beliefs: Sequence[Tensor], encoder: GroupEncoderParams,
                 frozen: bool = False) -> Tensor:
    """Attention over projected beliefs, one row per agent (N x d_entity)."""
    if not beliefs:
        raise ConfigurationError("encode_group needs at least one belief")
    widths = {b.data.shape for b in beliefs}
    if widths != {(encoder.d_b,)}:
        raise ConfigurationError(
            f"belief dimensions {sorted(widths)} do not match d_b={encoder.d_b}")
    leaves = _leaves(encoder.params, frozen)
    stacked = ad.stack_rows(list(beliefs))
    return multi_head_attention(
        stacked, leaves["w_q"], leaves["w_k"], leaves["w_v"], leaves["w_o"],
        heads=encoder.heads)
