"""Dataset files and the sampling protocol for patching experiments.

A dataset file is JSON lines, one query per line::

    {"query_id": "q1", "query": "...", "docs": [{"doc_id": "d1", "text": "...", "label": 1}, ...]}

``docs`` are the retrieved candidates in retrieval order (e.g. BM25 top-100).
Labels are graded relevance; anything > 0 counts as relevant when sampling.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

from .errors import InsufficientCandidates, MalformedRecord
from .prompts import INSTRUCTIONS, POINTWISE, Document, Lexicon, _LABELS, default_lexicon, enumerate_roles, POLARITIES
from .tokenizer import build_toy_vocab

CANDIDATE_POOL = 100


@dataclass(frozen=True)
class QueryRecord:
    query_id: str
    query: str
    docs: tuple[Document, ...]

    def to_dict(self) -> dict:
        return {"query_id": self.query_id, "query": self.query,
                "docs": [{"doc_id": d.doc_id, "text": d.text, "label": d.label} for d in self.docs]}


@dataclass(frozen=True)
class RankingSample:
    """One query with the document(s) it is judged against.

    Pointwise samples carry one candidate; pairwise samples carry (A, B) with
    opposite relevance.
    """

    query_id: str
    query: str
    candidates: tuple[Document, ...]
    labels: dict[str, int] = field(default_factory=dict)

    @property
    def doc_type(self) -> str:
        """``relevant`` / ``irrelevant`` for the (first) judged document."""
        return "relevant" if self.labels[self.candidates[0].doc_id] > 0 else "irrelevant"

    def to_dict(self) -> dict:
        return {"query_id": self.query_id, "query": self.query,
                "candidates": [{"doc_id": d.doc_id, "text": d.text, "label": d.label} for d in self.candidates]}


def load_dataset(path: str | Path) -> list[QueryRecord]:
    records = []
    seen = set()
    with open(path, encoding="utf-8") as f:
        for n, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                raw = json.loads(line)
                qid, query = str(raw["query_id"]), raw["query"]
                docs = tuple(Document(str(d["doc_id"]), d["text"], int(d["label"])) for d in raw["docs"])
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
                raise MalformedRecord(f"{path}:{n}: {e.__class__.__name__}: {e}") from None
            if not isinstance(query, str) or not all(isinstance(d.text, str) for d in docs):
                raise MalformedRecord(f"{path}:{n}: query and document texts must be strings")
            if len({d.doc_id for d in docs}) != len(docs):
                raise MalformedRecord(f"{path}:{n}: duplicate doc_id in query {qid}")
            if qid in seen:
                raise MalformedRecord(f"{path}:{n}: duplicate query_id {qid}")
            seen.add(qid)
            records.append(QueryRecord(qid, query, docs))
    return records


def qrels_from_records(records: Iterable[QueryRecord]) -> dict[str, dict[str, int]]:
    return {r.query_id: {d.doc_id: d.label for d in r.docs} for r in records}


def ingest_dataset(path: str | Path, mode: str, seed: int, n_samples: int = 100) -> list[RankingSample]:
    """Sample ``n_samples`` queries, half judged against a relevant document and half against an irrelevant one.

    For pairwise mode the first half has Document A relevant and B irrelevant,
    the second half the reverse. Documents are drawn from each query's first
    100 candidates.
    """
    if n_samples % 2:
        raise ValueError("n_samples must be even for a balanced split")
    records = load_dataset(path)
    pools = {}
    for r in records:
        pool = r.docs[:CANDIDATE_POOL]
        rel = [d for d in pool if d.label > 0]
        irr = [d for d in pool if d.label == 0]
        if not rel:
            raise InsufficientCandidates(f"query {r.query_id} has no relevant document among its candidates")
        if not irr:
            raise InsufficientCandidates(f"query {r.query_id} has no irrelevant document among its candidates")
        pools[r.query_id] = (rel, irr)
    if len(records) < n_samples:
        raise InsufficientCandidates(f"need {n_samples} queries, file has {len(records)}")

    rng = random.Random(seed)
    chosen = rng.sample(records, n_samples)
    out = []
    for i, r in enumerate(chosen):
        rel, irr = pools[r.query_id]
        d_rel, d_irr = rng.choice(rel), rng.choice(irr)
        first_relevant = i < n_samples // 2
        if mode == POINTWISE:
            cands = (d_rel,) if first_relevant else (d_irr,)
        else:
            cands = (d_rel, d_irr) if first_relevant else (d_irr, d_rel)
        out.append(RankingSample(r.query_id, r.query, cands, {d.doc_id: d.label for d in cands}))
    return out


def write_samples(samples: Sequence[RankingSample], path: str | Path, config_hash: str = "") -> None:
    stamp = {"config_hash": config_hash} if config_hash else {}
    with open(path, "w", encoding="utf-8") as f:
        for s in samples:
            f.write(json.dumps({**stamp, **s.to_dict()}, ensure_ascii=False) + "\n")


# -- synthetic toy corpus ---------------------------------------------------

_TOPICS = [
    ("paris", "france"), ("tokyo", "japan"), ("nile", "egypt"), ("everest", "nepal"),
    ("amazon", "brazil"), ("sahara", "africa"), ("danube", "europe"), ("andes", "peru"),
    ("alps", "swiss"), ("ganges", "india"), ("rhine", "germany"), ("volga", "russia"),
]
_FACTS = ["is in", "lies near", "is found in", "belongs to"]
_FILLER = ["old", "big", "famous", "quiet", "busy", "green"]


def synthetic_records(n_queries: int = 120, n_docs: int = 10, seed: int = 0) -> list[QueryRecord]:
    """Small-vocabulary corpus with graded labels for toy-model runs.

    Each query has at least one relevant (label 1 or 2) and one irrelevant
    document among its candidates.
    """
    rng = random.Random(seed)
    out = []
    for q in range(n_queries):
        topic, place = _TOPICS[q % len(_TOPICS)]
        query = f"where is the {rng.choice(_FILLER)} {topic}"
        docs = []
        n_rel = rng.randint(1, 3)
        for j in range(n_docs):
            if j < n_rel:
                text = f"the {topic} {rng.choice(_FACTS)} {place} and is {rng.choice(_FILLER)}"
                label = 2 if j == 0 else 1
            else:
                other, oplace = _TOPICS[(q + rng.randint(1, len(_TOPICS) - 1)) % len(_TOPICS)]
                text = f"the {other} {rng.choice(_FACTS)} {oplace} and is {rng.choice(_FILLER)}"
                label = 0
            docs.append(Document(f"q{q}d{j}", text, label))
        rng.shuffle(docs)
        out.append(QueryRecord(f"q{q}", query, tuple(docs)))
    return out


def write_records(records: Iterable[QueryRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for r in records:
            f.write(json.dumps(r.to_dict(), ensure_ascii=False) + "\n")


def toy_dataset_path() -> Path:
    return Path(str(resources.files("rolepatch").joinpath("data/toy_dataset.jsonl")))


def toy_vocab(records: Iterable[QueryRecord], lexicon: Lexicon | None = None) -> dict[str, int]:
    """Word vocabulary covering prompt skeletons, every role rendering, and the corpus."""
    lexicon = lexicon or default_lexicon()
    texts = [*INSTRUCTIONS.values(), *_LABELS.values(), "Yes No"]
    texts += [r.text for p in POLARITIES for r in enumerate_roles(p, lexicon)]
    for r in records:
        texts.append(r.query)
        texts.extend(d.text for d in r.docs)
    return build_toy_vocab(texts)
