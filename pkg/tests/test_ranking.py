import random

import numpy as np
import pytest

from brute_ndcg import brute_ndcg
from rolepatch.errors import UnknownQuery
from rolepatch.prompts import Document, render_role
from rolepatch.ranking import (
    RunList,
    ndcg_at_k,
    pairwise_prefer,
    read_qrels,
    read_run,
    rerank_pairwise,
    rerank_pointwise,
    swap_check,
    sweep_role_prompts,
    write_qrels,
    write_run,
)


def test_ndcg_against_brute_force():
    rng = random.Random(7)
    for i in range(100):
        docs = [f"d{j}" for j in range(rng.randint(1, 7))]
        judged = {d: rng.randint(0, 3) for d in docs if rng.random() < 0.8}
        ranked = docs[:]
        rng.shuffle(ranked)
        k = rng.randint(1, 10)
        run = RunList.from_scores(f"q{i}", [(d, float(len(ranked) - r)) for r, d in enumerate(ranked)])
        assert abs(ndcg_at_k(run, {f"q{i}": judged}, k) - brute_ndcg(ranked, judged, k)) <= 1e-9


def test_ndcg_known_values():
    qrels = {"q": {"a": 1, "b": 0, "c": 2}}
    assert ndcg_at_k(RunList("q", (("c", 3.0), ("a", 2.0), ("b", 1.0))), qrels) == 1.0
    assert ndcg_at_k(RunList("q", (("b", 3.0), ("x", 2.0))), qrels) == 0.0
    assert ndcg_at_k(RunList("q", (("a", 1.0),)), {"q": {"a": 0}}) == 0.0
    with pytest.raises(UnknownQuery):
        ndcg_at_k(RunList("zz", ()), qrels)


def test_ndcg_monotone_under_improving_swap():
    rng = random.Random(3)
    for _ in range(50):
        docs = [f"d{j}" for j in range(8)]
        judged = {d: rng.randint(0, 3) for d in docs}
        rng.shuffle(docs)
        i = rng.randrange(7)
        better = docs[:]
        if judged[better[i]] < judged[better[i + 1]]:
            better[i], better[i + 1] = better[i + 1], better[i]
        base = ndcg_at_k(RunList("q", tuple((d, 0.0) for d in docs)), {"q": judged})
        up = ndcg_at_k(RunList("q", tuple((d, 0.0) for d in better)), {"q": judged})
        assert up >= base - 1e-15


def test_run_ties_break_by_doc_id():
    run = RunList.from_scores("q", [("b", 1.0), ("a", 1.0), ("c", 2.0)])
    assert run.doc_ids == ["c", "a", "b"]


def test_trec_round_trip(tmp_path):
    runs = [RunList("q1", (("d2", 0.75), ("d1", 0.125))), RunList("q2", (("d9", 1e-12),))]
    write_run(runs, tmp_path / "r.trec", tag="exp")
    lines = (tmp_path / "r.trec").read_text().splitlines()
    assert lines[0] == "q1 Q0 d2 1 0.75 exp"
    back = read_run(tmp_path / "r.trec")
    assert back["q1"] == runs[0] and back["q2"] == runs[1]
    qrels = {"q1": {"d1": 1, "d2": 0}, "q2": {"d9": 2}}
    write_qrels(qrels, tmp_path / "q.trec")
    assert (tmp_path / "q.trec").read_text().splitlines()[0] == "q1 0 d1 1"
    assert read_qrels(tmp_path / "q.trec") == qrels
    (tmp_path / "bad").write_text("q1 Q0 d1\n")
    with pytest.raises(ValueError):
        read_run(tmp_path / "bad")


class FixedModel:
    """Stand-in model whose Yes/No logits are chosen per call by a function of the tokens."""

    def __init__(self, fn, cfg):
        self.fn, self.cfg = fn, cfg

    def forward(self, tokens):
        return self.fn(tokens)


def test_pointwise_ties_keep_candidate_order(toy):
    from rolepatch.dataset import load_dataset

    q = load_dataset(toy.cfg.dataset_path())[0]
    flat = FixedModel(lambda t: np.zeros(toy.model.cfg.vocab_size, dtype=np.float32), toy.model.cfg)
    run = rerank_pointwise(flat, toy.tok, None, q.query, q.docs, k=10, answers=toy.answers, query_id=q.query_id)
    assert run.doc_ids == [d.doc_id for d in q.docs[:10]]
    assert all(s == 0.5 for _, s in run.entries)


def test_pairwise_tie_and_swap(toy):
    from rolepatch.dataset import load_dataset

    q = load_dataset(toy.cfg.dataset_path())[0]
    a, b = q.docs[0], q.docs[1]
    flat = FixedModel(lambda t: np.zeros(toy.model.cfg.vocab_size, dtype=np.float32), toy.model.cfg)
    pref = pairwise_prefer(flat, toy.tok, None, q.query, a, b, toy.answers)
    assert pref.winner == "A" and pref.tie
    sc = swap_check(flat, toy.tok, None, q.query, a, b, toy.answers)
    assert sc.positional_bias and not sc.agree
    run = rerank_pairwise(toy.model, toy.tok, None, q.query, q.docs, k=4, answers=toy.answers, query_id="q")
    assert sum(s for _, s in run.entries) == 12  # 4*3 ordered comparisons, one win each


def test_role_sweep_baseline_last(toy):
    from rolepatch.dataset import load_dataset

    queries = load_dataset(toy.cfg.dataset_path())[:3]
    roles = [render_role("talented", "can", "carefully"), render_role("faulty", "will", "poorly")]
    results, summary = sweep_role_prompts(toy.model, toy.tok, roles, queries, answers=toy.answers)
    assert [r.polarity for r in results] == ["positive", "negative", "none"]
    assert results[-1].name == "baseline"
    assert set(summary) == {"positive", "negative", "none"}
    for r in results:
        assert len(r.per_query) == 3 and 0.0 <= r.mean <= 1.0
    again, _ = sweep_role_prompts(toy.model, toy.tok, roles, queries, answers=toy.answers, workers=2)
    assert [r.per_query for r in again] == [r.per_query for r in results]


def test_rerank_matches_frozen_run(toy, tmp_path):
    from conftest import FIXTURES
    from rolepatch.dataset import load_dataset

    role = render_role("talented", "can", "carefully")
    runs = [rerank_pointwise(toy.model, toy.tok, role, q.query, q.docs, 10, answers=toy.answers, query_id=q.query_id)
            for q in load_dataset(toy.cfg.dataset_path())[:3]]
    write_run(runs, tmp_path / "r.trec", tag="toy")
    assert (tmp_path / "r.trec").read_text() == (FIXTURES / "rerank_toy.trec").read_text()


def test_single_and_duplicate_candidates(toy):
    from rolepatch.dataset import load_dataset

    q = load_dataset(toy.cfg.dataset_path())[5]
    one = rerank_pointwise(toy.model, toy.tok, None, q.query, q.docs[:1], answers=toy.answers)
    assert len(one) == 1
    dup = [q.docs[0], Document("copy", q.docs[0].text, 0)]
    run = rerank_pointwise(toy.model, toy.tok, None, q.query, dup, answers=toy.answers)
    assert run.entries[0][1] == run.entries[1][1]
