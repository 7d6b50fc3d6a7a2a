#!/usr/bin/env python3
"""Build the bundled demo: graph, corpus, recorded payloads, mock tables.

The mock reply tables are produced by a recording pass: scripted backends run
the real discovery pipeline once and write down every query key that was
actually requested.  A replay pass with the finished tables then re-runs
discovery twice to prove the fixtures are complete, the headline numbers
hold, and the artifacts are byte-stable.

Run from anywhere; everything lands next to this file.
"""
from __future__ import annotations

import json
import re
import tempfile
from pathlib import Path

from latentscout import pipeline
from latentscout.agents import LatentHypothesis, query_key, seeded_embedding
from latentscout.config import load_config
from latentscout.evidence import edge_queries, record_fixture
from latentscout.graph import load_graph
from latentscout.rewards import AnswerRecord

DEMO = Path(__file__).resolve().parent
SEED = 7

GRAPH = {
    "variables": [
        {"id": "smoking", "kind": "observed", "name": "smoking"},
        {"id": "lung_cancer", "kind": "observed", "name": "lung cancer"},
        {"id": "asbestos", "kind": "observed", "name": "asbestos exposure"},
        {"id": "job_strain", "kind": "observed", "name": "job strain"},
        {"id": "insomnia", "kind": "observed", "name": "insomnia"},
        {"id": "L1", "kind": "latent"},
        {"id": "L2", "kind": "latent"},
    ],
    "edges": [
        {"from": "smoking", "to": "L1"},
        {"from": "L1", "to": "lung_cancer"},
        {"from": "asbestos", "to": "lung_cancer"},
        {"from": "job_strain", "to": "L2"},
        {"from": "L2", "to": "insomnia"},
    ],
}

GROUND_TRUTH = {
    "L1": ["tar deposits"],
    "L2": ["chronic stress"],
}

CORPUS = [
    {
        "doc_id": "corpus-001",
        "title": "Smoking residue study",
        "text": "Tar deposits from smoking accumulate in lung tissue and are "
                "associated with lung cancer.",
    },
    {
        "doc_id": "corpus-002",
        "title": "Occupational strain report",
        "text": "Sustained job strain wears down workers over months.",
    },
    {
        "doc_id": "corpus-003",
        "title": "Regional rainfall almanac",
        "text": "Monthly cloud tallies and rainfall figures for the coastal "
                "plain.",
    },
]

# What each scripted agent says about each latent.  First line is the proposed
# name; the rest is the definition.  Coordinator names must match the ground
# truth above, so the finished demo scores a full match.
REPLIES = {
    ("exec-a", "L1"): ("Tar deposits\nResidue from smoke that builds up in "
                       "lung tissue.", 0.8),
    ("exec-b", "L1"): ("Tar deposits\nSticky smoke byproduct coating the "
                       "airways.", 0.7),
    ("coordinator", "L1"): ("Tar deposits\nSmoke residue that accumulates in "
                            "the lungs and raises cancer risk.", 0.9),
    ("exec-a", "L2"): ("Chronic stress\nOngoing strain response from "
                       "sustained workplace pressure.", 0.75),
    ("exec-b", "L2"): ("Chronic stress\nPersistent stress state produced by "
                       "job strain.", 0.7),
    ("coordinator", "L2"): ("Chronic stress\nLasting stress condition driven "
                            "by job strain that disrupts sleep.", 0.85),
}

# Authored source payloads per verification record id.  Support is spread so
# each source is the sole supporter of at least one edge:
#   L1:L1->lung_cancer   wikipedia + local
#   L1:smoking->L1       all three
#   L2:L2->insomnia      arxiv only
#   L2:job_strain->L2    local only
ARXIV_ENTRIES = {
    "L1:L1->lung_cancer": [
        ("2101.00001", "Airway residue histology",
         "Histology of airway residue in heavy cigarette users."),
    ],
    "L1:smoking->L1": [
        ("2101.00002", "Tar deposition in smokers' airways",
         "Cigarette smoking deposits tar in airway tissue of habitual "
         "smokers."),
    ],
    "L2:L2->insomnia": [
        ("2101.00003", "Stress physiology and sleep",
         "Chronic stress is a physiological driver of insomnia and "
         "fragmented sleep."),
    ],
    "L2:job_strain->L2": [
        ("2101.00004", "Shift rotation and scheduling",
         "Workplace scheduling and shift rotation patterns in logistics."),
    ],
}

WIKI_PAGES = {
    "L1:L1->lung_cancer": [
        (90001, "Lung cancer", "Lung_cancer",
         "Tar deposits are linked to lung cancer in smokers."),
    ],
    "L1:smoking->L1": [
        (90002, "Tar (tobacco residue)", "Tar_(tobacco_residue)",
         "Tar deposits build up from smoking."),
    ],
    "L2:L2->insomnia": [
        (90003, "Insomnia", "Insomnia",
         "Insomnia is difficulty falling or staying asleep."),
    ],
    "L2:job_strain->L2": [
        (90004, "Sleep hygiene", "Sleep_hygiene",
         "An overview of sleep hygiene practice."),
    ],
}

CONFIG_TOML = """\
[run]
graph = "graph.json"
ground_truth = "ground_truth.json"
output = "out"
seed = 7
domain = "epidemiology"
rounds = 2
blanket_policy = "strict"

[training]
env = "pipeline"
episodes = 6
learning_rate = 0.001
gamma = 0.99
d_entity = 8
d_belief = 8
hidden = 16
lambda_m = 0.1
grid_g = 3
batch_size = 8
buffer_capacity = 32
updates_per_episode = 2
mixing_updates_per_episode = 1

[reward]
r_max = 1.0
alignment = 0.25
uncertainty = 0.25
contribution = 0.25
evidence = 0.25

[sources]
offline = true
fixture_dir = "fixtures"
corpus_dir = "corpus"
top_k = 5
support_threshold = 0.5

[backends]
mode = "mock"
executors = ["backends/exec_a.json", "backends/exec_b.json"]
coordinator = "backends/coordinator.json"
"""


def atom_feed(entries) -> bytes:
    parts = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        '<feed xmlns="http://www.w3.org/2005/Atom">',
        "  <title>ArXiv Query Results</title>",
    ]
    for doc_id, title, summary in entries:
        parts += [
            "  <entry>",
            f"    <id>http://arxiv.org/abs/{doc_id}</id>",
            f"    <title>{title}</title>",
            f"    <summary>{summary}</summary>",
            "  </entry>",
        ]
    parts.append("</feed>")
    return "\n".join(parts).encode("utf-8")


def wiki_payload(pages) -> bytes:
    body = {
        "pages": [
            {"id": page_id, "key": key, "title": title, "excerpt": excerpt}
            for page_id, title, key, excerpt in pages
        ]
    }
    return json.dumps(body, indent=2).encode("utf-8")


def write_statics() -> None:
    (DEMO / "graph.json").write_text(
        json.dumps(GRAPH, indent=2) + "\n", encoding="utf-8")
    (DEMO / "ground_truth.json").write_text(
        json.dumps(GROUND_TRUTH, indent=2) + "\n", encoding="utf-8")
    corpus_dir = DEMO / "corpus"
    corpus_dir.mkdir(exist_ok=True)
    for doc in CORPUS:
        (corpus_dir / f"{doc['doc_id']}.json").write_text(
            json.dumps(doc, indent=2) + "\n", encoding="utf-8")
    (DEMO / "config.toml").write_text(CONFIG_TOML, encoding="utf-8")


def write_payload_fixtures() -> None:
    graph = load_graph(DEMO / "graph.json")
    fixture_dir = DEMO / "fixtures"
    for latent_id, names in GROUND_TRUTH.items():
        # Verification queries always carry the coordinator's proposed name,
        # which the replies above fix per latent.
        proposed = REPLIES[("coordinator", latent_id)][0].splitlines()[0]
        assert proposed.lower() == names[0], (proposed, names)
        hypothesis = LatentHypothesis(
            latent_id=latent_id, proposed_name=proposed, semantics="",
            evidence_refs=(), confidence=1.0)
        for eq in edge_queries(hypothesis, graph):
            record_fixture(fixture_dir, "arxiv", eq.query, "demo://authored",
                           atom_feed(ARXIV_ENTRIES[eq.record_id]))
            record_fixture(fixture_dir, "wikipedia", eq.query,
                           "demo://authored",
                           wiki_payload(WIKI_PAGES[eq.record_id]))


LATENT_RE = re.compile(r"hidden variable '([^']+)'")


class RecordingBackend:
    """Answers from the reply script while noting every query key served."""

    def __init__(self, identity: str):
        self.identity = identity
        self.entries: dict = {}

    def embed(self, text: str):
        return seeded_embedding(text, SEED)

    def generate(self, query: str, params) -> AnswerRecord:
        match = LATENT_RE.search(query)
        if match is None:
            raise RuntimeError(f"cannot find a latent id in: {query[:80]!r}")
        text, confidence = REPLIES[(self.identity, match.group(1))]
        self.entries[query_key(query)] = (text, confidence)
        return AnswerRecord(text=text, embedding=self.embed(text),
                            confidence=confidence)


def dump_table(identity: str, entries: dict, path: Path) -> None:
    payload = {
        "identity": identity,
        "seed": SEED,
        "entries": [
            {"query_sha16": key, "t_bucket": "*", "p_bucket": "*",
             "text": text, "confidence": confidence}
            for key, (text, confidence) in sorted(entries.items())
        ],
    }
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n",
                    encoding="utf-8")


def record_tables() -> None:
    backends_dir = DEMO / "backends"
    backends_dir.mkdir(exist_ok=True)
    # Placeholder tables so the config loads; overwritten after recording.
    for name, stem in (("exec-a", "exec_a"), ("exec-b", "exec_b"),
                       ("coordinator", "coordinator")):
        dump_table(name, {}, backends_dir / f"{stem}.json")
    recorders = {name: RecordingBackend(name)
                 for name in ("exec-a", "exec-b", "coordinator")}
    original = pipeline.build_backends
    pipeline.build_backends = lambda config: (
        [recorders["exec-a"], recorders["exec-b"]], recorders["coordinator"])
    try:
        with tempfile.TemporaryDirectory() as tmp:
            config = load_config(DEMO / "config.toml",
                                 out=str(Path(tmp) / "out"))
            pipeline.run_discover(config)
    finally:
        pipeline.build_backends = original
    for name, stem in (("exec-a", "exec_a"), ("exec-b", "exec_b"),
                       ("coordinator", "coordinator")):
        dump_table(name, recorders[name].entries,
                   backends_dir / f"{stem}.json")
        print(f"{stem}.json: {len(recorders[name].entries)} entries")


def replay_check() -> None:
    digests = []
    for _ in range(2):
        with tempfile.TemporaryDirectory() as tmp:
            out = Path(tmp) / "out"
            config = load_config(DEMO / "config.toml", out=str(out))
            report = pipeline.run_discover(config)
            assert report.acc == 1.0, report
            assert (report.n, report.eg, report.ea) == (4, 4, 4), report
            blobs = {name: (out / name).read_bytes()
                     for name in ("checkpoint.bin", "training_log.csv",
                                  "hypotheses.json", "evidence.json",
                                  "metrics.json")}
            digests.append(blobs)
    for name in digests[0]:
        assert digests[0][name] == digests[1][name], f"{name} not byte-stable"
    print("replay: acc=1.0, n=eg=ea=4, artifacts byte-stable across two runs")


def main() -> None:
    write_statics()
    write_payload_fixtures()
    record_tables()
    replay_check()


if __name__ == "__main__":
    main()
