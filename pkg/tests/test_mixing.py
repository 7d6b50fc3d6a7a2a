"""Joint value mixing: forward composition, the combined loss, joint
candidate maximization, and target updates."""
from __future__ import annotations

from typing import Dict, List, Sequence

import numpy as np
import pytest

from latentscout.belief import (
    BeliefNetParams,
    PromptEmbedding,
    candidate_grid,
    encode_group,
    init_belief_net,
    init_group_encoder,
)
from latentscout.errors import ConfigurationError
from latentscout.mixing import (
    MixingParams,
    init_mixing,
    joint_target_max,
    joint_target_max_exhaustive,
    mix_forward,
    mixing_loss,
    update_targets,
)
from latentscout.nn.autodiff import Tensor, backward
from latentscout.nn.optim import adam_step, zero_grads

from helpers import JointItem, check_gradients, joint_random_step

D_ENTITY = 4


def make_parts(seed: int, n: int, d_obs: int = 3, d_b: int = 4):
    rng = np.random.default_rng(seed)
    nets = [init_belief_net(rng, d_obs, d_b, hidden=5) for _ in range(n)]
    encoder = init_group_encoder(rng, d_b=d_b, d_entity=D_ENTITY)
    mixing = init_mixing(rng, d_entity=D_ENTITY, heads=2)
    return nets, encoder, mixing


def zero_all(nets: Sequence[BeliefNetParams], mixing: MixingParams) -> None:
    for net in nets:
        for group in (net.online, net.target):
            for p in group.values():
                p.value[...] = 0.0
    for group in (mixing.online, mixing.target):
        for p in group.values():
            p.value[...] = 0.0


def random_inputs(rng: np.random.Generator, n: int):
    embeddings = [PromptEmbedding(float(rng.uniform(0.1, 0.9)),
                                  float(rng.uniform(0.1, 0.9)))
                  for _ in range(n)]
    group = Tensor(rng.normal(size=(n, D_ENTITY)))
    local_qs = [Tensor(rng.normal(size=1)) for _ in range(n)]
    return embeddings, group, local_qs


def test_init_rejects_bad_head_counts() -> None:
    rng = np.random.default_rng(0)
    with pytest.raises(ConfigurationError):
        init_mixing(rng, d_entity=4, heads=3)
    with pytest.raises(ConfigurationError):
        init_mixing(rng, d_entity=4, heads=0)


def test_forward_is_deterministic() -> None:
    _, _, mixing = make_parts(1, 1)
    emb, group, qs = random_inputs(np.random.default_rng(2), 1)
    a, _ = mix_forward(emb, group, qs, mixing)
    b, _ = mix_forward(emb, group, qs, mixing)
    assert a.data.tobytes() == b.data.tobytes()


def test_forward_checks_agent_counts() -> None:
    _, _, mixing = make_parts(3, 2)
    emb, group, qs = random_inputs(np.random.default_rng(3), 2)
    with pytest.raises(ConfigurationError):
        mix_forward(emb[:1], group, qs, mixing)
    with pytest.raises(ConfigurationError):
        mix_forward(emb, group, qs[:1], mixing)
    with pytest.raises(ConfigurationError):
        mix_forward([], Tensor(np.zeros((0, D_ENTITY))), [], mixing)


def test_joint_value_permutation_invariant() -> None:
    """Reordering agents (with their group rows and local Qs) leaves the
    joint value unchanged."""
    _, _, mixing = make_parts(4, 5)
    rng = np.random.default_rng(5)
    emb, group, qs = random_inputs(rng, 5)
    base, _ = mix_forward(emb, group, qs, mixing)
    for _ in range(5):
        perm = rng.permutation(5)
        shuffled, _ = mix_forward(
            [emb[i] for i in perm], Tensor(group.data[perm]),
            [qs[i] for i in perm], mixing)
        np.testing.assert_allclose(shuffled.data, base.data, atol=1e-10)


def softmax_rows(m: np.ndarray) -> np.ndarray:
    e = np.exp(m - m.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def sda_oracle(q: np.ndarray, k: np.ndarray, v: np.ndarray) -> np.ndarray:
    return softmax_rows(q @ k.T / np.sqrt(q.shape[1])) @ v


def mha_oracle(x: np.ndarray, w: Dict[str, np.ndarray], heads: int) -> np.ndarray:
    q, k, v = x @ w["mha_wq"], x @ w["mha_wk"], x @ w["mha_wv"]
    step = x.shape[1] // heads
    parts = [sda_oracle(q[:, h * step:(h + 1) * step],
                        k[:, h * step:(h + 1) * step],
                        v[:, h * step:(h + 1) * step]) for h in range(heads)]
    return np.hstack(parts) @ w["mha_wo"].T


def mix_oracle(embeddings: Sequence[PromptEmbedding], group: np.ndarray,
               local_qs: Sequence[float], params: MixingParams):
    """Plain numpy re-implementation of the joint value pipeline."""
    w = {k: p.value for k, p in params.online.items()}
    lifted = np.stack([w["e_lift_w"] @ e.vector() + w["e_lift_b"]
                       for e in embeddings])
    upsilon = sda_oracle(lifted @ w["sa_wq"], lifted @ w["sa_wk"],
                         lifted @ w["sa_wv"])
    fused = np.tanh(np.hstack([upsilon, group]) @ w["fus_w"].T + w["fus_b"])
    lifted_qs = np.stack([w["q_lift_w"] @ np.array([q]) + w["q_lift_b"]
                          for q in local_qs])
    tokens = np.hstack([lifted_qs, fused])
    attended = mha_oracle(tokens, w, params.heads)
    q_tot = w["out_w"] @ attended.mean(axis=0) + w["out_b"]
    return q_tot, upsilon, fused


def test_three_agent_forward_matches_stage_oracle() -> None:
    _, _, mixing = make_parts(6, 3)
    rng = np.random.default_rng(7)
    emb, group, qs = random_inputs(rng, 3)
    got, inter = mix_forward(emb, group, qs, mixing)
    want_q, want_upsilon, want_fused = mix_oracle(
        emb, group.data, [float(q.data[0]) for q in qs], mixing)
    np.testing.assert_allclose(got.data, want_q, atol=1e-12)
    np.testing.assert_allclose(inter.upsilon, want_upsilon, atol=1e-12)
    np.testing.assert_allclose(inter.fused, want_fused, atol=1e-12)


def perfect_fit_batch(nets, total_reward: float, done: bool = True,
                      n: int = 2) -> List[JointItem]:
    rng = np.random.default_rng(8)
    _, item = joint_random_step(rng, 3, n)
    return [JointItem(trajectories=item.trajectories,
                      observations=item.observations,
                      actions=item.actions, total_reward=total_reward,
                      next_trajectories=item.next_trajectories, done=done)]


def test_loss_zero_when_fit_and_lambda_zero() -> None:
    """With the penalty off, a Q_tot that already equals its target makes
    the loss vanish even though local Qs disagree with the joint value."""
    nets, encoder, mixing = make_parts(9, 2)
    zero_all(nets, mixing)
    mixing.online["out_b"].value[...] = 0.4
    mixing.target["out_b"].value[...] = 0.4
    for net in nets:
        net.online["q_b2"].value[...] = -0.2
        net.target["q_b2"].value[...] = -0.2
    batch = perfect_fit_batch(nets, total_reward=0.4)
    grids = [candidate_grid(2)] * 2
    loss = mixing_loss(batch, mixing, nets, encoder, 0.99, 0.0, grids)
    assert float(loss.data) == pytest.approx(0.0, abs=1e-24)


def test_regularizer_silent_when_locals_match_joint() -> None:
    nets, encoder, mixing = make_parts(10, 2)
    zero_all(nets, mixing)
    batch = perfect_fit_batch(nets, total_reward=0.5)
    grids = [candidate_grid(2)] * 2
    # Q_i = Q_tot = 0, lambda 1: only the squared target error survives.
    loss = mixing_loss(batch, mixing, nets, encoder, 0.99, 1.0, grids)
    assert float(loss.data) == pytest.approx(0.25, abs=1e-15)


def test_two_agent_hand_arithmetic() -> None:
    """Constant heads: Q_tot 0.3, local Qs 0.1, reward 0.5, lambda 0.1.

    (0.5 - 0.3)^2 + 0.1 * 2 * (0.1 - 0.3)^2 = 0.048.
    """
    nets, encoder, mixing = make_parts(11, 2)
    zero_all(nets, mixing)
    mixing.online["out_b"].value[...] = 0.3
    for net in nets:
        net.online["q_b2"].value[...] = 0.1
    batch = perfect_fit_batch(nets, total_reward=0.5)
    loss = mixing_loss(batch, mixing, nets, encoder, 0.99, 0.1,
                       [candidate_grid(2)] * 2)
    assert float(loss.data) == pytest.approx(0.048, abs=1e-15)


def test_loss_input_validation() -> None:
    nets, encoder, mixing = make_parts(12, 2)
    grids = [candidate_grid(2)] * 2
    with pytest.raises(ConfigurationError):
        mixing_loss([], mixing, nets, encoder, 0.99, 0.1, grids)
    batch = perfect_fit_batch(nets, 0.0)
    with pytest.raises(ConfigurationError):
        mixing_loss(batch, mixing, nets, encoder, 0.99, -0.1, grids)
    with pytest.raises(ConfigurationError):
        mixing_loss(batch, mixing, nets, encoder, 0.99, 0.1, grids,
                    targets=[0.0, 0.0])


def test_loss_gradient_matches_finite_differences() -> None:
    nets, encoder, mixing = make_parts(13, 2, d_obs=2, d_b=3)
    rng = np.random.default_rng(13)
    batch = []
    for _ in range(2):
        _, item = joint_random_step(rng, 2, 2)
        batch.append(item)
    grids = [candidate_grid(2)] * 2
    targets = [item.total_reward + 0.9 * joint_target_max(
        item.next_trajectories, nets, encoder, mixing, grids)
        for item in batch]
    params = list(mixing.online.values()) + list(encoder.params.values())
    for net in nets:
        params.extend(net.online.values())

    def loss():
        return mixing_loss(batch, mixing, nets, encoder, 0.9, 0.1, grids,
                           targets=targets)

    check_gradients(loss, params)


def test_target_parameters_get_no_gradient() -> None:
    nets, encoder, mixing = make_parts(14, 2)
    _, item = joint_random_step(np.random.default_rng(14), 3, 2)
    loss = mixing_loss([item], mixing, nets, encoder, 0.9, 0.1,
                       [candidate_grid(2)] * 2)
    backward(loss)
    for p in mixing.target.values():
        np.testing.assert_array_equal(p.grad, np.zeros_like(p.grad))
    for net in nets:
        for p in net.target.values():
            np.testing.assert_array_equal(p.grad, np.zeros_like(p.grad))


def test_single_agent_joint_max_equals_grid_max() -> None:
    nets, encoder, mixing = make_parts(15, 1)
    rng = np.random.default_rng(15)
    from helpers import random_trajectory
    nxt = [random_trajectory(rng, 3, 1)]
    grid = candidate_grid(3)
    greedy = joint_target_max(nxt, nets, encoder, mixing, [grid])
    exact = joint_target_max_exhaustive(nxt, nets, encoder, mixing, [grid])
    assert greedy == pytest.approx(exact, abs=1e-12)


def monotone_mixing(n: int) -> MixingParams:
    """Hand-set weights making Q_tot = 2*tanh(0.2*mean_i(T_i + p_i)).

    Strictly increasing in every coordinate, so one coordinate-greedy sweep
    reaches the global joint max.
    """
    mixing = init_mixing(np.random.default_rng(16), d_entity=2, heads=2)
    for group in (mixing.online, mixing.target):
        for p in group.values():
            p.value[...] = 0.0
        group["e_lift_w"].value[...] = 1.0
        group["sa_wv"].value[...] = np.eye(2)
        group["fus_w"].value[...] = 0.1 * np.array(
            [[1.0, 1.0, 0.0, 0.0], [1.0, 1.0, 0.0, 0.0]])
        group["mha_wv"].value[...] = np.eye(4)
        group["mha_wo"].value[...] = np.eye(4)
        group["out_w"].value[...] = np.array([[0.0, 0.0, 1.0, 1.0]])
    return mixing


def test_two_agent_greedy_matches_exhaustive_on_monotone_fixture() -> None:
    rng = np.random.default_rng(17)
    nets = [init_belief_net(rng, 3, 4, 5) for _ in range(2)]
    encoder = init_group_encoder(rng, d_b=4, d_entity=2)
    mixing = monotone_mixing(2)
    for net in nets:
        for group in (net.online, net.target):
            for p in group.values():
                p.value[...] = 0.0
    from helpers import random_trajectory
    nxt = [random_trajectory(rng, 3, 1) for _ in range(2)]
    grids = [candidate_grid(3)] * 2  # 9 candidates each, 81 joint points
    greedy = joint_target_max(nxt, nets, encoder, mixing, grids)
    exact = joint_target_max_exhaustive(nxt, nets, encoder, mixing, grids)
    assert greedy == pytest.approx(exact, abs=1e-12)
    assert exact == pytest.approx(2.0 * np.tanh(0.2 * 1.9), abs=1e-12)


def test_greedy_never_exceeds_exhaustive() -> None:
    nets, encoder, mixing = make_parts(18, 2)
    rng = np.random.default_rng(18)
    from helpers import random_trajectory
    nxt = [random_trajectory(rng, 3, 1) for _ in range(2)]
    grids = [candidate_grid(2)] * 2
    greedy = joint_target_max(nxt, nets, encoder, mixing, grids)
    exact = joint_target_max_exhaustive(nxt, nets, encoder, mixing, grids)
    assert greedy <= exact + 1e-12


def test_identical_candidates_single_value() -> None:
    nets, encoder, mixing = make_parts(19, 2)
    rng = np.random.default_rng(19)
    from helpers import random_trajectory
    nxt = [random_trajectory(rng, 3, 1) for _ in range(2)]
    c = PromptEmbedding(0.5, 0.5)
    grids = [[c, c, c], [c, c, c]]
    greedy = joint_target_max(nxt, nets, encoder, mixing, grids)
    exact = joint_target_max_exhaustive(nxt, nets, encoder, mixing, grids)
    assert greedy == pytest.approx(exact, abs=1e-15)


def test_empty_grid_rejected() -> None:
    nets, encoder, mixing = make_parts(20, 1)
    with pytest.raises(ConfigurationError):
        joint_target_max([()], nets, encoder, mixing, [[]])


def all_target_pairs(mixing: MixingParams, nets: Sequence[BeliefNetParams]):
    yield from ((mixing.target[k], mixing.online[k]) for k in mixing.target)
    for net in nets:
        yield from ((net.target[k], net.online[k]) for k in net.target)


def test_update_rate_one_copies_online() -> None:
    nets, _, mixing = make_parts(21, 2)
    update_targets(mixing, nets, 1.0)
    for tgt, onl in all_target_pairs(mixing, nets):
        np.testing.assert_array_equal(tgt.value, onl.value)


def test_update_rate_zero_is_identity() -> None:
    nets, _, mixing = make_parts(22, 2)
    before = [tgt.value.copy() for tgt, _ in all_target_pairs(mixing, nets)]
    update_targets(mixing, nets, 0.0)
    for (tgt, _), prev in zip(all_target_pairs(mixing, nets), before):
        np.testing.assert_array_equal(tgt.value, prev)


def test_repeated_small_updates_shrink_gap_geometrically() -> None:
    """100 updates at rate 0.01 with frozen online weights scale every
    target-online gap by 0.99^100."""
    nets, _, mixing = make_parts(23, 2)
    gaps = [onl.value - tgt.value for tgt, onl in all_target_pairs(mixing, nets)]
    for _ in range(100):
        update_targets(mixing, nets, 0.01)
    factor = 0.99 ** 100
    for (tgt, onl), gap in zip(all_target_pairs(mixing, nets), gaps):
        np.testing.assert_allclose(onl.value - tgt.value, factor * gap,
                                   rtol=1e-10, atol=1e-15)


def test_training_shrinks_local_joint_spread() -> None:
    """A few optimizer steps on a fixed batch reduce how far local Qs sit
    from the joint value."""
    nets, encoder, mixing = make_parts(24, 2, d_obs=2, d_b=3)
    rng = np.random.default_rng(24)
    batch = [joint_random_step(rng, 2, 2)[1] for _ in range(4)]
    grids = [candidate_grid(2)] * 2
    params = {}
    for i, net in enumerate(nets):
        params.update({f"n{i}_{k}": p for k, p in net.online.items()})
    params.update({f"mx_{k}": p for k, p in mixing.online.items()})
    params.update({f"enc_{k}": p for k, p in encoder.params.items()})

    def spread() -> float:
        total = 0.0
        for item in batch:
            from latentscout.belief import belief_vector, q_value
            beliefs = [belief_vector(net, t, o) for net, t, o
                       in zip(nets, item.trajectories, item.observations)]
            qs = [float(q_value({k: p.frozen() for k, p in net.online.items()},
                                b, a).data[0])
                  for net, b, a in zip(nets, beliefs, item.actions)]
            q_tot, _ = mix_forward(item.actions,
                                   encode_group(beliefs, encoder, frozen=True),
                                   [Tensor(np.array([q])) for q in qs],
                                   mixing, frozen=True)
            total += sum((q - float(q_tot.data[0])) ** 2 for q in qs)
        return total

    start = spread()
    for _ in range(40):
        zero_grads(params.values())
        loss = mixing_loss(batch, mixing, nets, encoder, 0.9, 0.5, grids)
        backward(loss)
        adam_step(params.values(), lr=0.01)
    assert spread() < start
