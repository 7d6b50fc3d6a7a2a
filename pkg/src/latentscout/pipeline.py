"""End-to-end discovery stages and their composition.

The pipeline environment runs the real inference loop (query, fan-out,
aggregate, verify) as a multi-agent episode so the same training code that
handles synthetic games drives prompt-embedding policies against backends.
Each stage reads and writes plain JSON/CSV artifacts; `run_discover` is just
the stages run back to back, so a staged run and a one-shot run produce
byte-identical files.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .agents import (
    CoordinatorOutput,
    LatentHypothesis,
    MockBackend,
    HttpBackend,
    aggregate,
    build_query,
    fan_out,
    parse_hypothesis_text,
)
from .belief import (
    BeliefNetParams,
    GroupEncoderParams,
    Observation,
    PromptEmbedding,
    candidate_grid,
    init_belief_net,
    init_group_encoder,
)
from .config import RunConfig
from .envs import SyntheticGameEnv
from .errors import ConfigurationError, UsageError
from .evidence import EvidenceRecord, format_digest, verify
from .games import coordination_game
from .graph import CausalGraph, latent_incident_edges, latent_queries, load_graph
from .metrics import MetricsReport, build_report, load_ground_truth
from .mixing import MixingParams, init_mixing
from .nn.checkpoint import load_params, save_params
from .rewards import (
    RewardWeights,
    action_likelihood,
    collaborative_contribution,
    evidence_reliability,
    total_reward,
    uncertainty_reduction,
)
from .nn.layers import cosine_similarity
from .training import (
    TrainingConfig,
    TrainResult,
    run_episode,
    train,
    write_training_log,
)

PIPELINE_OBS_DIM = 5  # prev action (2), consensus sim, pair sim, last reliability


@dataclass
class LatentOutcome:
    """What one inference episode produced for one latent."""
    hypothesis: LatentHypothesis
    coordinator: CoordinatorOutput
    records: Tuple[EvidenceRecord, ...]


class PipelineEnv:
    """Multi-agent episode over the live inference loop.

    One episode works on one latent for a fixed number of rounds.  Each step:
    build the query (with the prior round's evidence digest), fan out to the
    executors, aggregate through the coordinator, verify the aggregate against
    the sources, then pay each agent its blended reward.  Observations expose
    only similarity statistics, never raw peer text.
    """

    def __init__(self, graph: CausalGraph, executors, coordinator,
                 sources, weights: RewardWeights, r_max: float, rounds: int,
                 domain: str = "general", blanket_policy: str = "strict",
                 judge=None, timeout: float = 30.0):
        if rounds < 1:
            raise ConfigurationError(f"rounds must be >= 1, got {rounds}")
        self.graph = graph
        self.executors = list(executors)
        self.coordinator = coordinator
        self.sources = sources
        self.weights = weights
        self.r_max = r_max
        self.rounds = rounds
        self.domain = domain
        self.judge = judge
        self.timeout = timeout
        self.latents = latent_queries(graph, blanket_policy)
        if not self.latents:
            raise ConfigurationError("graph has no latent variables")
        self.n_agents = len(self.executors)
        self.d_obs = PIPELINE_OBS_DIM
        self._cursor = 0
        self._pinned: Optional[str] = None
        self.last_outcome: Optional[LatentOutcome] = None

    def pin_latent(self, latent_id: str) -> None:
        """Make every following episode work on one specific latent."""
        if latent_id not in {v.id for v, _ in self.latents}:
            raise UsageError(f"unknown latent {latent_id!r}")
        self._pinned = latent_id

    def unpin(self) -> None:
        self._pinned = None

    def reset(self, rng) -> List[Observation]:
        if self._pinned is not None:
            self._latent, self._blanket = next(
                pair for pair in self.latents if pair[0].id == self._pinned)
        else:
            self._latent, self._blanket = self.latents[self._cursor]
            self._cursor = (self._cursor + 1) % len(self.latents)
        self._round = 0
        self._digest: Optional[str] = None
        self._records: Tuple[EvidenceRecord, ...] = ()
        zeros = (0.0,) * PIPELINE_OBS_DIM
        return [Observation(features=zeros, round_index=0)
                for _ in range(self.n_agents)]

    def step(self, actions: Sequence[PromptEmbedding], rng
             ) -> Tuple[List[Observation], List[float], bool]:
        query = build_query(self._latent, self._blanket, self.graph,
                            domain=self.domain, evidence_digest=self._digest)
        items = fan_out(query, self.executors, actions, timeout=self.timeout)
        coordinator_out, hypothesis = aggregate(
            self._latent.id, items, self._records, self.coordinator)
        consensus = coordinator_out.record

        result = verify(hypothesis, self.graph, self.sources, self.judge)
        self._records = result.records
        self._digest = format_digest(result.records)

        answers = {item.identity: item.answer for item in items
                   if item.answer is not None}
        rewards: List[float] = []
        observations: List[Observation] = []
        self._round += 1
        for executor, action in zip(self.executors, actions):
            answer = answers.get(executor.identity)
            if answer is None:
                rewards.append(0.0)
                observations.append(Observation(
                    features=(action.T, action.p, 0.0, 0.0, 0.0),
                    round_index=self._round))
                continue
            others = [a for ident, a in sorted(answers.items())
                      if ident != executor.identity]
            # Reliability of this agent's own proposal, not the consensus:
            # each answer's first line is treated as its candidate name.
            own_name, _ = parse_hypothesis_text(answer.text)
            own = LatentHypothesis(
                latent_id=self._latent.id, proposed_name=own_name,
                semantics="", evidence_refs=(), confidence=answer.confidence)
            own_result = verify(own, self.graph, self.sources, self.judge)
            r_er = evidence_reliability(own_result.records)
            breakdown = total_reward(
                action_likelihood(answer, consensus, self.r_max),
                uncertainty_reduction(answer, consensus),
                collaborative_contribution(answer, others, consensus, self.r_max),
                r_er, self.weights)
            rewards.append(breakdown.total)
            sim_to_consensus = cosine_similarity(answer.embedding,
                                                 consensus.embedding)
            all_answers = [answers[k] for k in sorted(answers)]
            pair_sims = [
                cosine_similarity(a.embedding, b.embedding)
                for idx, a in enumerate(all_answers)
                for b in all_answers[idx + 1:]]
            pair_mean = float(np.mean(pair_sims)) if pair_sims else 0.0
            observations.append(Observation(
                features=(action.T, action.p, sim_to_consensus, pair_mean, r_er),
                round_index=self._round))
        done = self._round >= self.rounds
        if done:
            self.last_outcome = LatentOutcome(
                hypothesis=hypothesis, coordinator=coordinator_out,
                records=result.records)
        return observations, rewards, done


def build_backends(config: RunConfig):
    """Instantiate executors and the coordinator from the config."""
    spec = config.backends
    if spec.mode == "mock":
        executors = [MockBackend.from_json(path) for path in spec.executor_tables]
        coordinator = MockBackend.from_json(spec.coordinator_table)
    else:
        executors = [
            HttpBackend(identity=name, endpoint=spec.endpoint, model=spec.model,
                        api_key=spec.api_key, seed=config.seed,
                        timeout=spec.timeout)
            for name in spec.identities]
        coordinator = HttpBackend(
            identity="coordinator", endpoint=spec.endpoint, model=spec.model,
            api_key=spec.api_key, seed=config.seed, timeout=spec.timeout)
    return executors, coordinator


def build_pipeline_env(config: RunConfig) -> PipelineEnv:
    graph = load_graph(config.graph_path)
    executors, coordinator = build_backends(config)
    return PipelineEnv(
        graph=graph, executors=executors, coordinator=coordinator,
        sources=config.sources, weights=config.weights, r_max=config.r_max,
        rounds=config.rounds, domain=config.domain,
        blanket_policy=config.blanket_policy,
        timeout=config.backends.timeout)


def build_training_env(config: RunConfig):
    if config.training_env == "synthetic":
        return SyntheticGameEnv(coordination_game())
    return build_pipeline_env(config)


CHECKPOINT_MODULE = "policy"


def save_policy(path, seed: int, nets: Sequence[BeliefNetParams],
                encoder: GroupEncoderParams, mixing: MixingParams) -> None:
    groups = {f"belief_{i}": net.online for i, net in enumerate(nets)}
    groups.update(
        {f"belief_{i}_target": net.target for i, net in enumerate(nets)})
    groups["encoder"] = encoder.params
    groups["mixing"] = mixing.online
    groups["mixing_target"] = mixing.target
    save_params(path, CHECKPOINT_MODULE, seed, groups)


def load_policy(path, training: TrainingConfig, d_obs: int, n_agents: int
                ) -> Tuple[List[BeliefNetParams], GroupEncoderParams, MixingParams]:
    """Rebuild policy parameter structures from a checkpoint.

    Dimensions come from the training config; the stored shapes must agree
    with them or the checkpoint belongs to a different configuration.
    """
    module, _, groups = load_params(path)
    if module != CHECKPOINT_MODULE:
        raise ConfigurationError(
            f"checkpoint {path} holds {module!r} parameters, not a policy")
    nets: List[BeliefNetParams] = []
    for i in range(n_agents):
        try:
            online = groups[f"belief_{i}"]
            target = groups[f"belief_{i}_target"]
        except KeyError as exc:
            raise ConfigurationError(
                f"checkpoint {path} lacks parameters for agent {i}") from exc
        expected = (training.hidden, d_obs + 3)
        actual = tuple(online["enc_w1"].value.shape)
        if actual != expected:
            raise ConfigurationError(
                f"checkpoint {path} was trained for a different shape: "
                f"first encoder layer {actual}, expected {expected}")
        nets.append(BeliefNetParams(d_obs=d_obs, d_b=training.d_belief,
                                    hidden=training.hidden,
                                    online=online, target=target))
    if f"belief_{n_agents}" in groups:
        raise ConfigurationError(
            f"checkpoint {path} holds more agents than the configured {n_agents}")
    encoder = GroupEncoderParams(
        d_b=training.d_belief, d_entity=training.d_entity,
        heads=training.encoder_heads, params=groups["encoder"])
    mixing = MixingParams(
        d_entity=training.d_entity, heads=training.mixing_heads,
        online=groups["mixing"], target=groups["mixing_target"])
    return nets, encoder, mixing


def write_regret_csv(ledger, path) -> None:
    """Cumulative regret per environment step."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "cumulative_regret"])
        running = 0.0
        for t, v_star, v_pi in ledger.records:
            running += sum(s - p for s, p in zip(v_star, v_pi))
            writer.writerow([t, repr(running)])


def artifact_paths(config: RunConfig) -> Dict[str, Path]:
    out = Path(config.output_dir)
    return {
        "checkpoint": out / "checkpoint.bin",
        "training_log": out / "training_log.csv",
        "regret": out / "regret.csv",
        "hypotheses": out / "hypotheses.json",
        "evidence": out / "evidence.json",
        "metrics": out / "metrics.json",
    }


def run_train(config: RunConfig) -> TrainResult:
    """Train the policies and persist checkpoint plus logs."""
    env = build_training_env(config)
    result = train(config.training, env)
    paths = artifact_paths(config)
    paths["checkpoint"].parent.mkdir(parents=True, exist_ok=True)
    save_policy(paths["checkpoint"], config.seed, result.nets, result.encoder,
                result.mixing)
    write_training_log(result.history, paths["training_log"])
    if result.ledger is not None:
        write_regret_csv(result.ledger, paths["regret"])
    return result


def run_infer(config: RunConfig) -> List[LatentOutcome]:
    """Greedy inference per latent with the trained (checkpointed) policies."""
    env = build_pipeline_env(config)
    paths = artifact_paths(config)
    checkpoint = config.checkpoint_path or paths["checkpoint"]
    if not Path(checkpoint).exists():
        raise ConfigurationError(
            f"no checkpoint at {checkpoint}; run the training stage first")
    nets, _, _ = load_policy(checkpoint, config.training, env.d_obs,
                             env.n_agents)
    grid = candidate_grid(config.training.grid_g)
    rng_env = np.random.default_rng([config.seed, 10])
    rng_greedy = np.random.default_rng([config.seed, 11])
    outcomes: List[LatentOutcome] = []
    for latent, _ in env.latents:
        env.pin_latent(latent.id)
        run_episode(env, nets, grid, epsilon=0.0, rng_env=rng_env,
                    rng_explore=rng_greedy)
        outcomes.append(env.last_outcome)
    env.unpin()
    paths["hypotheses"].parent.mkdir(parents=True, exist_ok=True)
    payload = [o.hypothesis.to_dict() for o in
               sorted(outcomes, key=lambda o: o.hypothesis.latent_id)]
    paths["hypotheses"].write_text(
        json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return outcomes


def _load_hypotheses(path) -> List[LatentHypothesis]:
    if not Path(path).exists():
        raise ConfigurationError(
            f"no hypotheses file at {path}; run the inference stage first")
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    return [
        LatentHypothesis(
            latent_id=h["latent_id"], proposed_name=h["name"],
            semantics=h.get("semantics", ""),
            evidence_refs=tuple(h.get("evidence", [])),
            confidence=float(h.get("confidence", 0.0)))
        for h in raw
    ]


def _record_to_dict(record: EvidenceRecord) -> dict:
    return {
        "record_id": record.record_id,
        "edge": {"from": record.edge[0], "to": record.edge[1],
                 "direction": record.edge[2]},
        "query": record.query,
        "supports": record.supports,
        "support_score": record.support_score,
        "documents": [
            {"source": d.source, "doc_id": d.doc_id, "title": d.title,
             "snippet": d.snippet, "url": d.url,
             "retrieval_score": d.retrieval_score}
            for d in record.documents
        ],
    }


def unique_edge_counts(records: Sequence[EvidenceRecord]) -> Tuple[int, int]:
    """(supported, searched) over unique undirected edge keys.

    An edge joining two latents shows up once per hypothesis; the run-level
    ratios count it once, supported if any record supports it.
    """
    searched: Dict[Tuple[str, str], bool] = {}
    for record in records:
        key = tuple(sorted(record.edge[:2]))
        if record.documents:
            searched[key] = searched.get(key, False) or record.supports
    n = sum(1 for supported in searched.values() if supported)
    return n, len(searched)


def run_verify(config: RunConfig) -> Tuple[List[EvidenceRecord], int, int, int]:
    """Verify the final hypotheses and persist records plus counts."""
    graph = load_graph(config.graph_path)
    paths = artifact_paths(config)
    hypotheses = _load_hypotheses(paths["hypotheses"])
    records: List[EvidenceRecord] = []
    for hyp in sorted(hypotheses, key=lambda h: h.latent_id):
        result = verify(hyp, graph, config.sources)
        records.extend(result.records)
    n, eg = unique_edge_counts(records)
    ea = len(latent_incident_edges(graph))
    records.sort(key=lambda r: r.record_id)
    payload = {
        "counts": {"n": n, "eg": eg, "ea": ea},
        "records": [_record_to_dict(r) for r in records],
    }
    paths["evidence"].parent.mkdir(parents=True, exist_ok=True)
    paths["evidence"].write_text(
        json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return records, n, eg, ea


def run_eval(config: RunConfig) -> MetricsReport:
    """Score hypotheses against ground truth and persist the report."""
    if config.ground_truth_path is None:
        raise ConfigurationError("[run] ground_truth is required for evaluation")
    paths = artifact_paths(config)
    hypotheses = _load_hypotheses(paths["hypotheses"])
    if not Path(paths["evidence"]).exists():
        raise ConfigurationError(
            f"no evidence file at {paths['evidence']}; run the verify stage first")
    evidence_payload = json.loads(paths["evidence"].read_text(encoding="utf-8"))
    counts = evidence_payload["counts"]
    truth = load_ground_truth(config.ground_truth_path)
    # The embedding fallback needs hypothesis embeddings; recover them from
    # the text with the first executor backend's embedder when available.
    executors, _ = build_backends(config)
    scored = []
    for hyp in hypotheses:
        embedding = executors[0].embed(hyp.proposed_name) if executors else None
        scored.append(LatentHypothesis(
            latent_id=hyp.latent_id, proposed_name=hyp.proposed_name,
            semantics=hyp.semantics, evidence_refs=hyp.evidence_refs,
            confidence=hyp.confidence, embedding=embedding))
    report = build_report(scored, truth, n=counts["n"], eg=counts["eg"],
                          ea=counts["ea"])
    paths["metrics"].write_text(report.to_json(), encoding="utf-8")
    return report


def run_discover(config: RunConfig) -> MetricsReport:
    """Full pipeline: train, infer, verify, evaluate, in one call."""
    if config.training_env != "pipeline":
        raise ConfigurationError(
            "discover trains on the live pipeline; set [training] env = 'pipeline'")
    run_train(config)
    run_infer(config)
    run_verify(config)
    return run_eval(config)
