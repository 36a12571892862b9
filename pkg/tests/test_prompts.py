import json

import pytest

from rolepatch.errors import MissingLabel, MixedPolarity, TokenBudgetExceeded, UnknownSlotWord
from rolepatch.prompts import (
    NEGATIVE,
    PAIRWISE,
    POINTWISE,
    POSITIVE,
    Document,
    Lexicon,
    build_prompt,
    check_token_alignment,
    default_lexicon,
    enumerate_roles,
    filter_lexicon,
    lexicon_alignment,
    make_counter_pairs,
    named_order,
    render_role,
    validate_order,
    write_prompt_dump,
)

POS_ADJ = "talented expert superb capable reliable gifted brilliant focused clear knowledgeable".split()
NEG_ADJ = "faulty confused clumsy sluggish incorrect awful hopeless flawed problematic unreliable".split()
POS_ADV = "carefully correctly swiftly wisely perfectly accurately nicely fairly logically clearly".split()
NEG_ADV = "wrongly poorly mistakenly slowly falsely terribly badly incorrectly sadly horribly".split()


def test_lexicon_matches_table():
    lex = default_lexicon()
    assert list(lex.adjectives[POSITIVE]) == POS_ADJ
    assert list(lex.adjectives[NEGATIVE]) == NEG_ADJ
    assert list(lex.adverbs[POSITIVE]) == POS_ADV
    assert list(lex.adverbs[NEGATIVE]) == NEG_ADV
    assert list(lex.modals) == ["can", "will", "shall"]


def test_role_counts_and_order():
    pos, neg = enumerate_roles(POSITIVE), enumerate_roles(NEGATIVE)
    assert len(pos) == len(neg) == 300
    assert len({r.text for r in pos + neg}) == 600
    first = pos[0]
    assert (first.adjective, first.modal, first.adverb) == ("talented", "can", "carefully")
    assert first.text == ("You are a talented search assistant that can rank passages carefully, "
                          "based on their relevance to a query.")


def test_article_rule():
    assert render_role("expert", "will", "wisely").text.startswith("You are an expert ")
    assert render_role("unreliable", "can", "poorly").text.startswith("You are an unreliable ")
    assert render_role("faulty", "can", "poorly").text.startswith("You are a faulty ")


def test_render_errors():
    with pytest.raises(UnknownSlotWord):
        render_role("talented", "might", "carefully")
    with pytest.raises(UnknownSlotWord):
        render_role("purple", "can", "carefully")
    with pytest.raises(MixedPolarity):
        render_role("talented", "can", "poorly")


def test_pieces_concatenate_to_text():
    for r in enumerate_roles(NEGATIVE)[:20]:
        assert "".join(t for _, t in r.pieces()) == r.text


def test_counter_pairs():
    pairs = make_counter_pairs(0)
    assert len(pairs) == 10
    for field in ("adjective", "adverb"):
        for side in ("clean", "corrupted"):
            words = [getattr(getattr(p, side), field) for p in pairs]
            assert len(set(words)) == 10
    for p in pairs:
        assert p.clean.polarity == POSITIVE and p.corrupted.polarity == NEGATIVE
        assert p.clean.modal == p.corrupted.modal
    assert make_counter_pairs(0) == pairs
    assert make_counter_pairs(1) != pairs


def test_gpt2_alignment_passes(gpt2_tok):
    report = lexicon_alignment(gpt2_tok, mode=POINTWISE)
    assert report.passed and len(report.lengths) == 600
    assert set(report.lengths) == {report.modal_length}
    lex, excluded = filter_lexicon(gpt2_tok)
    assert excluded == [] and lex == default_lexicon()


def test_alignment_flags_multi_token_word(gpt2_tok):
    d = default_lexicon().to_dict()
    d["adjective"]["positive"][0] = "supercalifragilistic"
    lex = Lexicon.from_dict(d)
    report = lexicon_alignment(gpt2_tok, lex)
    assert not report.passed
    assert [o["word"] for o in report.offending_words] == ["supercalifragilistic"]
    assert len(report.deviating_prompts) == 30
    kept, excluded = filter_lexicon(gpt2_tok, lex)
    assert "supercalifragilistic" not in kept.adjectives[POSITIVE]
    assert excluded[0]["word"] == "supercalifragilistic"


def _tiles(prompt):
    """Segments + skeleton tokens must cover every position exactly once."""
    covered = set()
    for name, (a, b) in prompt.segments.items():
        span = set(range(a, b))
        assert not covered & span, name
        covered |= span
    return covered


@pytest.mark.parametrize("mode", [POINTWISE, PAIRWISE])
@pytest.mark.parametrize("order", ["default", "query-first", "role-late"])
def test_segments_partition_and_round_trip(gpt2_tok, mode, order):
    role = render_role("capable", "can", "nicely")
    docs = [Document("a", "Paris is the capital of France.", 1)]
    if mode == PAIRWISE:
        docs.append(Document("b", "Bananas are yellow.", 0))
    p = build_prompt(mode, role, "capital of france", docs, gpt2_tok, order=named_order(order, mode))
    covered = _tiles(p)
    assert p.segments["LastToken"] == (len(p) - 1, len(p))
    assert gpt2_tok.decode(p.token_ids) == p.text
    assert list(p.token_ids) == gpt2_tok.encode(p.text)
    skeleton = [i for i in range(len(p)) if i not in covered]
    assert all(gpt2_tok.decode([p.token_ids[i]]).strip() in ("", "Query", "Document", "A", "B", ":")
               for i in skeleton)
    for slot, word in (("adjective", "capable"), ("modal", "can"), ("adverb", "nicely")):
        a, b = p.slot_spans[slot]
        assert gpt2_tok.decode(p.token_ids[a:b]) == " " + word
    assert p.expected_answer == "Yes"
    if mode == PAIRWISE:
        assert set(p.positions("Document")) == set(p.positions("DocumentA")) | set(p.positions("DocumentB"))


def test_pointwise_skeleton_text(gpt2_tok):
    role = render_role("talented", "can", "carefully")
    p = build_prompt(POINTWISE, role, "q text", [Document("d", "doc text", 0)], gpt2_tok)
    assert p.text == (role.text + "\nDocument: doc text\nQuery: q text\n"
                      "Does the document answer the query? Answer only 'Yes' or 'No'.\nAnswer:")
    assert p.expected_answer == "No"
    assert gpt2_tok.decode(p.token_ids[-1:]) == ":"


def test_baseline_prompt_is_suffix(gpt2_tok):
    role = render_role("talented", "can", "carefully")
    docs = [Document("d", "doc text", 1)]
    with_role = build_prompt(POINTWISE, role, "q", docs, gpt2_tok)
    base = build_prompt(POINTWISE, None, "q", docs, gpt2_tok)
    assert "Role" not in base.segments
    assert with_role.text.endswith(base.text)


def test_pairwise_labels(gpt2_tok):
    role = render_role("talented", "can", "carefully")
    rel, irr = Document("r", "yes doc", 1), Document("i", "no doc", 0)
    assert build_prompt(PAIRWISE, role, "q", [rel, irr], gpt2_tok).expected_answer == "Yes"
    assert build_prompt(PAIRWISE, role, "q", [irr, rel], gpt2_tok).expected_answer == "No"


def test_budget_and_label_errors(gpt2_tok):
    role = render_role("talented", "can", "carefully")
    long_doc = Document("d", "word " * 500, 1)
    p = build_prompt(POINTWISE, role, "q", [long_doc], gpt2_tok, doc_budget=220)
    a, b = p.segments["Document"]
    assert b - a == 220
    with pytest.raises(TokenBudgetExceeded):
        build_prompt(POINTWISE, role, "q", [long_doc], gpt2_tok, max_len=100)
    with pytest.raises(MissingLabel):
        build_prompt(POINTWISE, role, "q", [Document("d", "x")], gpt2_tok)
    assert build_prompt(POINTWISE, role, "q", [Document("d", "x")], gpt2_tok, require_label=False).expected_answer is None


def test_order_validation():
    with pytest.raises(ValueError):
        validate_order(["Role", "Query", "Instruction", "Document"], POINTWISE)
    with pytest.raises(ValueError):
        validate_order(["Role", "Query", "Instruction"], POINTWISE)
    assert [s.value for s in named_order("query-first", POINTWISE)] == ["Role", "Query", "Document", "Instruction"]
    assert [s.value for s in named_order("role-late", PAIRWISE)] == [
        "DocumentA", "DocumentB", "Query", "Role", "Instruction"]
    with pytest.raises(ValueError):
        named_order("sideways", POINTWISE)


def test_pair_alignment_report(gpt2_tok):
    pairs = make_counter_pairs(3)
    docs = [Document("d", "some text here", 1)]
    prompts = [build_prompt(POINTWISE, r, "q", docs, gpt2_tok) for p in pairs for r in (p.clean, p.corrupted)]
    assert check_token_alignment(prompts).passed


def test_prompt_dump(gpt2_tok, tmp_path):
    role = render_role("talented", "can", "carefully")
    p = build_prompt(POINTWISE, role, "q", [Document("d", "x", 1)], gpt2_tok)
    write_prompt_dump([p], tmp_path / "p.jsonl")
    row = json.loads((tmp_path / "p.jsonl").read_text())
    assert row["token_ids"] == list(p.token_ids) and row["segments"]["LastToken"] == [len(p) - 1, len(p)]
