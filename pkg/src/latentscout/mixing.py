"""Global value composition across agents.

Lifted prompt embeddings go through self-attention, fuse with the group
belief rows, and join lifted local Q-values as tokens for a multi-head
attention block whose mean-pooled output reads out the joint value Q_tot.
The loss combines a bootstrapped squared error on Q_tot with a consistency
penalty keeping local Q-values near the joint one.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .belief import (
    BeliefNetParams,
    GroupEncoderParams,
    PromptEmbedding,
    Trajectory,
    belief_vector,
    encode_group,
    q_value,
    target_q,
)
from .errors import ConfigurationError
from .nn import autodiff as ad
from .nn.autodiff import Tensor
from .nn.layers import affine, multi_head_attention, scaled_dot_attention
from .nn.optim import ParamDict, Parameter, init_bias, init_weight, soft_update


@dataclass
class MixingParams:
    d_entity: int
    heads: int
    online: ParamDict
    target: ParamDict


@dataclass
class MixingIntermediate:
    upsilon: np.ndarray  # (N, d_entity)
    fused: np.ndarray  # (N, d_entity)


def init_mixing(rng: np.random.Generator, d_entity: int, heads: int = 2) -> MixingParams:
    token_dim = 2 * d_entity
    if heads < 1 or token_dim % heads != 0:
        raise ConfigurationError(f"{heads} heads do not divide token dim {token_dim}")
    online: ParamDict = {
        "e_lift_w": init_weight(rng, d_entity, 2),
        "e_lift_b": init_bias(d_entity),
        "sa_wq": init_weight(rng, d_entity, d_entity),
        "sa_wk": init_weight(rng, d_entity, d_entity),
        "sa_wv": init_weight(rng, d_entity, d_entity),
        "fus_w": init_weight(rng, d_entity, token_dim),
        "fus_b": init_bias(d_entity),
        "q_lift_w": init_weight(rng, d_entity, 1),
        "q_lift_b": init_bias(d_entity),
        "mha_wq": init_weight(rng, token_dim, token_dim),
        "mha_wk": init_weight(rng, token_dim, token_dim),
        "mha_wv": init_weight(rng, token_dim, token_dim),
        "mha_wo": init_weight(rng, token_dim, token_dim),
        "out_w": init_weight(rng, 1, token_dim),
        "out_b": init_bias(1),
    }
    target = {k: Parameter(p.value) for k, p in online.items()}
    return MixingParams(d_entity=d_entity, heads=heads, online=online, target=target)


def _leaves(params: ParamDict, frozen: bool) -> dict:
    return {k: (p.frozen() if frozen else p.tensor()) for k, p in params.items()}


def mix_forward(embeddings: Sequence[PromptEmbedding], group: Tensor,
                local_qs: Sequence[Tensor], params: MixingParams,
                frozen: bool = False, use_target: bool = False):
    """Joint value from per-agent actions, group-belief rows, and local Qs.

    Returns (q_tot as a shape-(1,) tensor, MixingIntermediate).
    """
    n = len(embeddings)
    if n < 1:
        raise ConfigurationError("mix_forward needs at least one agent")
    if group.data.shape != (n, params.d_entity) or len(local_qs) != n:
        raise ConfigurationError(
            f"agent count mismatch: {n} embeddings, group rows "
            f"{group.data.shape[0]}, {len(local_qs)} local Qs")
    leaves = _leaves(params.target if use_target else params.online,
                     frozen or use_target)

    lifted = ad.stack_rows([
        affine(leaves["e_lift_w"], Tensor(e.vector()), leaves["e_lift_b"])
        for e in embeddings])
    # Attention projections use the row convention x @ w throughout.
    upsilon = scaled_dot_attention(
        ad.matmul(lifted, leaves["sa_wq"]),
        ad.matmul(lifted, leaves["sa_wk"]),
        ad.matmul(lifted, leaves["sa_wv"])).values
    fused = ad.tanh(affine(leaves["fus_w"], ad.hcat([upsilon, group]), leaves["fus_b"]))

    lifted_qs = ad.stack_rows([
        affine(leaves["q_lift_w"], q, leaves["q_lift_b"]) for q in local_qs])
    tokens = ad.hcat([lifted_qs, fused])
    attended = multi_head_attention(
        tokens, leaves["mha_wq"], leaves["mha_wk"], leaves["mha_wv"],
        leaves["mha_wo"], heads=params.heads)
    q_tot = affine(leaves["out_w"], ad.mean_rows(attended), leaves["out_b"])
    inter = MixingIntermediate(upsilon=upsilon.data.copy(), fused=fused.data.copy())
    return q_tot, inter


def _target_q_tot(nets: Sequence[BeliefNetParams], encoder: GroupEncoderParams,
                  params: MixingParams, beliefs: Sequence[Tensor],
                  group: Tensor, actions: Sequence[PromptEmbedding]) -> float:
    qs = [Tensor(np.array([target_q(net, b, a)]))
          for net, b, a in zip(nets, beliefs, actions)]
    q_tot, _ = mix_forward(actions, group, qs, params, use_target=True)
    return float(q_tot.data[0])


def joint_target_max(next_trajectories: Sequence[Trajectory],
                     nets: Sequence[BeliefNetParams],
                     encoder: GroupEncoderParams, params: MixingParams,
                     grids: Sequence[Sequence[PromptEmbedding]]) -> float:
    """Maximize the target Q_tot over the joint candidate grid.

    Exact joint enumeration is exponential in the agent count, so this runs
    one coordinate-greedy sweep in agent id order: agents start at their own
    locally greedy candidate and are improved one at a time with the others
    frozen.  Each swap only ever increases the value.
    """
    if any(not g for g in grids):
        raise ConfigurationError("joint_target_max needs nonempty grids")
    beliefs = [belief_vector(net, traj, None, frozen=True)
               for net, traj in zip(nets, next_trajectories)]
    group = encode_group(beliefs, encoder, frozen=True)

    chosen = []
    for net, b, grid in zip(nets, beliefs, grids):
        best = max(grid, key=lambda c: target_q(net, b, c))
        chosen.append(best)

    value = _target_q_tot(nets, encoder, params, beliefs, group, chosen)
    for i, grid in enumerate(grids):
        for cand in grid:
            if cand == chosen[i]:
                continue
            trial = list(chosen)
            trial[i] = cand
            v = _target_q_tot(nets, encoder, params, beliefs, group, trial)
            if v > value:
                value = v
                chosen = trial
    return value


def joint_target_max_exhaustive(next_trajectories, nets, encoder, params,
                                grids) -> float:
    """Brute-force product enumeration; usable as an oracle for small N."""
    import itertools

    beliefs = [belief_vector(net, traj, None, frozen=True)
               for net, traj in zip(nets, next_trajectories)]
    group = encode_group(beliefs, encoder, frozen=True)
    best = -np.inf
    for combo in itertools.product(*grids):
        v = _target_q_tot(nets, encoder, params, beliefs, group, list(combo))
        best = max(best, v)
    return best


def mixing_loss(batch: Sequence, params: MixingParams,
                nets: Sequence[BeliefNetParams], encoder: GroupEncoderParams,
                gamma: float, lambda_m: float,
                grids: Sequence[Sequence[PromptEmbedding]],
                targets: Optional[Sequence[float]] = None) -> Tensor:
    """Bootstrapped squared error on Q_tot plus the consistency penalty.

    Per item: (r_tot + gamma * joint_target_max - Q_tot)^2
              + lambda_m * sum_i (Q_i - Q_tot)^2,
    averaged over the batch.  Target quantities are detached floats; batch
    items need trajectories/observations/actions/total_reward/
    next_trajectories/done fields (the training module's Transition).
    `targets` may carry precomputed bootstrapped targets.
    """
    if not batch:
        raise ConfigurationError("mixing_loss needs a nonempty batch")
    if lambda_m < 0:
        raise ConfigurationError(f"lambda_m must be >= 0, got {lambda_m}")
    if targets is not None and len(targets) != len(batch):
        raise ConfigurationError("targets must align with the batch")
    terms = []
    for idx, item in enumerate(batch):
        if targets is not None:
            y = targets[idx]
        elif item.done:
            y = item.total_reward
        else:
            y = item.total_reward + gamma * joint_target_max(
                item.next_trajectories, nets, encoder, params, grids)
        beliefs = [belief_vector(net, traj, obs)
                   for net, traj, obs in zip(nets, item.trajectories, item.observations)]
        local_qs = [q_value(_leaves(net.online, False), b, a)
                    for net, b, a in zip(nets, beliefs, item.actions)]
        group = encode_group(beliefs, encoder)
        q_tot, _ = mix_forward(item.actions, group, local_qs, params)
        delta = ad.sub(Tensor(np.array([y])), q_tot)
        term = ad.mul(delta, delta)
        for q_i in local_qs:
            gap = ad.sub(q_i, q_tot)
            term = ad.add(term, ad.mul(ad.mul(gap, gap), lambda_m))
        terms.append(term)
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return ad.mul(ad.sum_all(total), 1.0 / len(batch))


def update_targets(params: MixingParams, nets: Sequence[BeliefNetParams],
                   rate: float) -> None:
    """Soft-update every target set toward its online twin."""
    soft_update(params.target, params.online, rate)
    for net in nets:
        online_subset = {k: net.online[k] for k in net.target}
        soft_update(net.target, online_subset, rate)
