"""Pointwise/pairwise reranking with the model and nDCG@k against TREC qrels."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence


from .ablation import correct_score
from .dataset import QueryRecord
from .errors import UnknownQuery
from .model import HookedTransformer
from .parallel import ordered_map
from .prompts import PAIRWISE, POINTWISE, Document, RolePrompt, build_prompt
from .tokenizer import AnswerTokens, Tokenizer, resolve_answer_tokens

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RunList:
    query_id: str
    entries: tuple[tuple[str, float], ...]  # (doc_id, score), best first

    @classmethod
    def from_scores(cls, query_id: str, scored: Sequence[tuple[str, float]]) -> "RunList":
        """Sort descending by score; equal scores fall back to doc_id."""
        return cls(query_id, tuple(sorted(scored, key=lambda e: (-e[1], e[0]))))

    @property
    def doc_ids(self) -> list[str]:
        return [d for d, _ in self.entries]

    def __len__(self) -> int:
        return len(self.entries)


def dcg(gains: Sequence[float]) -> float:
    return math.fsum((2.0 ** g - 1.0) / math.log2(i + 2) for i, g in enumerate(gains))


def ndcg_at_k(run: RunList, qrels: Mapping[str, Mapping[str, int]], k: int = 10) -> float:
    """nDCG@k with gain 2^rel - 1 and log2(rank + 1) discount; 0 when no document is relevant."""
    if run.query_id not in qrels:
        raise UnknownQuery(f"query {run.query_id} not in qrels")
    judged = qrels[run.query_id]
    gains = [max(judged.get(d, 0), 0) for d in run.doc_ids[:k]]
    ideal = sorted((max(r, 0) for r in judged.values()), reverse=True)[:k]
    idcg = dcg(ideal)
    return dcg(gains) / idcg if idcg > 0 else 0.0


def _prompt(model, tokenizer, mode, role, query, docs, order):
    return build_prompt(mode, role, query, docs, tokenizer, order=order, max_len=model.cfg.max_seq,
                        require_label=False)


def p_yes(model: HookedTransformer, tokenizer: Tokenizer, answers: AnswerTokens, mode: str,
          role: RolePrompt | None, query: str, docs: Sequence[Document], order=None, head_replace=None) -> float:
    prompt = _prompt(model, tokenizer, mode, role, query, docs, order)
    if head_replace:
        logits = model.run_with_ablation(prompt.token_ids, head_replace)
    else:
        logits = model.forward(prompt.token_ids)
    return correct_score(logits, answers, "Yes")


def rerank_pointwise(
    model: HookedTransformer,
    tokenizer: Tokenizer,
    role: RolePrompt | None,
    query: str,
    candidates: Sequence[Document],
    k: int = 10,
    answers: AnswerTokens | None = None,
    query_id: str = "",
    order=None,
    head_replace=None,
) -> RunList:
    """Score the first ``k`` candidates by two-way P(Yes); ties keep candidate order, then doc_id."""
    answers = answers or resolve_answer_tokens(tokenizer)
    scored = []
    for idx, doc in enumerate(candidates[:k]):
        s = p_yes(model, tokenizer, answers, POINTWISE, role, query, [doc], order, head_replace)
        scored.append((idx, doc.doc_id, s))
    scored.sort(key=lambda e: (-e[2], e[0], e[1]))
    return RunList(query_id, tuple((d, s) for _, d, s in scored))


@dataclass(frozen=True)
class Preference:
    winner: str  # "A" or "B"
    p_yes: float
    tie: bool


def pairwise_prefer(model, tokenizer, role, query, doc_a: Document, doc_b: Document,
                    answers: AnswerTokens | None = None, order=None, head_replace=None) -> Preference:
    """Prefer A iff two-way P(Yes) > 0.5; an exact 0.5 goes to A and is flagged as a tie."""
    answers = answers or resolve_answer_tokens(tokenizer)
    p = p_yes(model, tokenizer, answers, PAIRWISE, role, query, [doc_a, doc_b], order, head_replace)
    tie = p == 0.5
    if tie:
        log.info("pairwise tie (P(Yes)=0.5) for %s vs %s; preferring A", doc_a.doc_id, doc_b.doc_id)
    return Preference("A" if p >= 0.5 else "B", p, tie)


@dataclass(frozen=True)
class SwapCheck:
    forward: Preference  # (doc_a, doc_b)
    swapped: Preference  # (doc_b, doc_a)

    @property
    def agree(self) -> bool:
        """Both orders pick the same document."""
        return self.forward.winner != self.swapped.winner

    @property
    def positional_bias(self) -> bool:
        """Same slot wins in both orders, whatever the document."""
        return self.forward.winner == self.swapped.winner


def swap_check(model, tokenizer, role, query, doc_a, doc_b, answers=None, order=None) -> SwapCheck:
    return SwapCheck(
        pairwise_prefer(model, tokenizer, role, query, doc_a, doc_b, answers, order),
        pairwise_prefer(model, tokenizer, role, query, doc_b, doc_a, answers, order),
    )


def rerank_pairwise(model, tokenizer, role, query, candidates: Sequence[Document], k: int = 10,
                    answers: AnswerTokens | None = None, query_id: str = "", order=None, head_replace=None) -> RunList:
    """Round-robin: every ordered pair (i, j), i != j, is judged; score = wins."""
    answers = answers or resolve_answer_tokens(tokenizer)
    cands = list(candidates[:k])
    wins = [0.0] * len(cands)
    for i, a in enumerate(cands):
        for j, b in enumerate(cands):
            if i == j:
                continue
            pref = pairwise_prefer(model, tokenizer, role, query, a, b, answers, order, head_replace)
            wins[i if pref.winner == "A" else j] += 1.0
    scored = sorted(((i, d.doc_id, wins[i]) for i, d in enumerate(cands)), key=lambda e: (-e[2], e[0], e[1]))
    return RunList(query_id, tuple((d, s) for _, d, s in scored))


# -- TREC formats -----------------------------------------------------------

def write_run(runs: Sequence[RunList], path: str | Path, tag: str = "rolepatch") -> None:
    with open(path, "w") as f:
        for run in runs:
            for rank, (doc, score) in enumerate(run.entries, 1):
                f.write(f"{run.query_id} Q0 {doc} {rank} {score!r} {tag}\n")


def read_run(path: str | Path) -> dict[str, RunList]:
    scored: dict[str, list] = {}
    with open(path) as f:
        for line in f:
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 6:
                raise ValueError(f"bad run line: {line!r}")
            qid, _, doc, _, score, _ = parts
            scored.setdefault(qid, []).append((doc, float(score)))
    return {q: RunList.from_scores(q, s) for q, s in scored.items()}


def write_qrels(qrels: Mapping[str, Mapping[str, int]], path: str | Path) -> None:
    with open(path, "w") as f:
        for qid, docs in qrels.items():
            for doc, rel in docs.items():
                f.write(f"{qid} 0 {doc} {rel}\n")


def read_qrels(path: str | Path) -> dict[str, dict[str, int]]:
    out: dict[str, dict[str, int]] = {}
    with open(path) as f:
        for line in f:
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 4:
                raise ValueError(f"bad qrels line: {line!r}")
            qid, _, doc, rel = parts
            out.setdefault(qid, {})[doc] = int(rel)
    return out


# -- role-prompt sweep ------------------------------------------------------

@dataclass(frozen=True)
class _RankJob:
    model: HookedTransformer
    tokenizer: Tokenizer
    answers: AnswerTokens
    queries: tuple[QueryRecord, ...]
    qrels: Mapping
    mode: str
    k: int
    order: tuple | None


def _rank_task(job: _RankJob, role: RolePrompt | None) -> tuple[list[RunList], list[float]]:
    runs, vals = [], []
    rerank = rerank_pointwise if job.mode == POINTWISE else rerank_pairwise
    for q in job.queries:
        run = rerank(job.model, job.tokenizer, role, q.query, q.docs, job.k, answers=job.answers,
                     query_id=q.query_id, order=job.order)
        runs.append(run)
        vals.append(ndcg_at_k(run, job.qrels, 10))
    return runs, vals


@dataclass
class EvalResult:
    name: str
    polarity: str
    metric: str
    per_query: dict[str, float]
    runs: list[RunList]

    @property
    def mean(self) -> float:
        v = list(self.per_query.values())
        return math.fsum(v) / len(v) if v else math.nan


def sweep_role_prompts(
    model: HookedTransformer,
    tokenizer: Tokenizer,
    roles: Sequence[RolePrompt],
    queries: Sequence[QueryRecord],
    mode: str = POINTWISE,
    k: int = 10,
    qrels: Mapping | None = None,
    answers: AnswerTokens | None = None,
    order=None,
    workers: int = 1,
) -> tuple[list[EvalResult], dict]:
    """nDCG@10 per role prompt plus the no-role baseline (last row), and a per-polarity summary."""
    answers = answers or resolve_answer_tokens(tokenizer)
    qrels = qrels or {q.query_id: {d.doc_id: d.label for d in q.docs} for q in queries}
    job = _RankJob(model, tokenizer, answers, tuple(queries), qrels, mode, k, tuple(order) if order else None)
    items = [*roles, None]
    out = ordered_map(_rank_task, items, job, workers)
    results = []
    for role, (runs, vals) in zip(items, out):
        name = role.text if role else "baseline"
        pol = role.polarity if role else "none"
        results.append(EvalResult(name, pol, "ndcg@10", {q.query_id: v for q, v in zip(queries, vals)}, runs))
    summary = {}
    for pol in sorted({r.polarity for r in results}):
        means = [r.mean for r in results if r.polarity == pol]
        summary[pol] = {"n": len(means), "min": min(means), "max": max(means),
                        "mean": math.fsum(means) / len(means)}
    return results, summary
