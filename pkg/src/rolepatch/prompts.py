"""Role-play sentences, counter-pairs, and segmented ranking prompts.

Prompt skeletons (``{...}`` are filled; segments are joined by newlines)::

    Pointwise:
    {role}
    Document: {doc}
    Query: {query}
    Does the document answer the query? Answer only 'Yes' or 'No'.
    Answer:

    Pairwise:
    {role}
    Document A: {docA}
    Document B: {docB}
    Query: {query}
    Is Document A more relevant to the query than Document B? Answer only 'Yes' or 'No'.
    Answer:

Prompts are tokenized piece by piece so every segment's token span is exact.
The newline and label in front of a segment ("\\nDocument:") are skeleton
tokens and belong to no segment; the final token of the instruction is split
off as the ``LastToken`` segment.
"""

from __future__ import annotations

import json
import random
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import yaml

from .errors import MissingLabel, MixedPolarity, TokenBudgetExceeded, UnknownSlotWord
from .tokenizer import Tokenizer

POSITIVE = "positive"
NEGATIVE = "negative"
POLARITIES = (POSITIVE, NEGATIVE)
POINTWISE = "pointwise"
PAIRWISE = "pairwise"
SLOTS = ("adjective", "modal", "adverb")

DEFAULT_DOC_BUDGET = 220

INSTRUCTIONS = {
    POINTWISE: "Does the document answer the query? Answer only 'Yes' or 'No'.\nAnswer:",
    PAIRWISE: "Is Document A more relevant to the query than Document B? Answer only 'Yes' or 'No'.\nAnswer:",
}


class Segment(str, Enum):
    ROLE = "Role"
    DOCUMENT = "Document"
    DOCUMENT_A = "DocumentA"
    DOCUMENT_B = "DocumentB"
    QUERY = "Query"
    INSTRUCTION = "Instruction"
    LAST_TOKEN = "LastToken"


_LABELS = {
    Segment.DOCUMENT: "Document:",
    Segment.DOCUMENT_A: "Document A:",
    Segment.DOCUMENT_B: "Document B:",
    Segment.QUERY: "Query:",
}

# orderable segments; LastToken is always the final token
MODE_SEGMENTS = {
    POINTWISE: (Segment.ROLE, Segment.DOCUMENT, Segment.QUERY, Segment.INSTRUCTION),
    PAIRWISE: (Segment.ROLE, Segment.DOCUMENT_A, Segment.DOCUMENT_B, Segment.QUERY, Segment.INSTRUCTION),
}

# grid columns for segment sweeps; "Document" means both documents in pairwise mode
SWEEP_SEGMENTS = ("Role", "Document", "Query", "Instruction", "LastToken")


def named_order(name: str, mode: str) -> tuple[Segment, ...]:
    """Orders studied in the segment-order experiments.

    ``default``     role first, instruction last
    ``query-first`` query before the document(s)
    ``role-late``   role placed right before the instruction
    """
    base = list(MODE_SEGMENTS[mode])
    docs = [s for s in base if s.name.startswith("DOCUMENT")]
    if name == "default":
        return tuple(base)
    if name == "query-first":
        return (Segment.ROLE, Segment.QUERY, *docs, Segment.INSTRUCTION)
    if name == "role-late":
        return (*docs, Segment.QUERY, Segment.ROLE, Segment.INSTRUCTION)
    raise ValueError(f"unknown segment order {name!r}")


def validate_order(order: Sequence[Segment | str], mode: str) -> tuple[Segment, ...]:
    order = tuple(Segment(s) for s in order)
    if sorted(order) != sorted(MODE_SEGMENTS[mode]):
        raise ValueError(f"order {[s.value for s in order]} is not a permutation of the {mode} segments")
    if order[-1] is not Segment.INSTRUCTION:
        raise ValueError("the instruction must be the last segment (the answer follows it)")
    return order


@dataclass(frozen=True)
class Lexicon:
    adjectives: dict[str, tuple[str, ...]]
    adverbs: dict[str, tuple[str, ...]]
    modals: tuple[str, ...]

    @classmethod
    def from_dict(cls, d: dict) -> "Lexicon":
        lex = cls(
            adjectives={p: tuple(d["adjective"][p]) for p in POLARITIES},
            adverbs={p: tuple(d["adverb"][p]) for p in POLARITIES},
            modals=tuple(d["modal"]),
        )
        for slot in (lex.adjectives, lex.adverbs):
            for p in POLARITIES:
                if len(set(slot[p])) != len(slot[p]):
                    raise ValueError(f"duplicate words in {p} slot list")
            if set(slot[POSITIVE]) & set(slot[NEGATIVE]):
                raise ValueError("a word cannot be both positive and negative")
        return lex

    @classmethod
    def load(cls, path: str | Path | None = None) -> "Lexicon":
        if path is None:
            text = resources.files("rolepatch").joinpath("data/lexicon.yaml").read_text()
        else:
            text = Path(path).read_text()
        return cls.from_dict(yaml.safe_load(text))

    def to_dict(self) -> dict:
        return {
            "adjective": {p: list(self.adjectives[p]) for p in POLARITIES},
            "adverb": {p: list(self.adverbs[p]) for p in POLARITIES},
            "modal": list(self.modals),
        }

    def polarity(self, slot: str, word: str) -> str:
        table = self.adjectives if slot == "adjective" else self.adverbs
        for p in POLARITIES:
            if word in table[p]:
                return p
        raise UnknownSlotWord(f"{word!r} is not a known {slot}")

    def words(self) -> Iterable[str]:
        for table in (self.adjectives, self.adverbs):
            for p in POLARITIES:
                yield from table[p]
        yield from self.modals


_DEFAULT_LEXICON: Lexicon | None = None


def default_lexicon() -> Lexicon:
    global _DEFAULT_LEXICON
    if _DEFAULT_LEXICON is None:
        _DEFAULT_LEXICON = Lexicon.load()
    return _DEFAULT_LEXICON


def article(word: str) -> str:
    return "an" if word[:1].lower() in "aeiou" else "a"


@dataclass(frozen=True)
class RolePrompt:
    adjective: str
    modal: str
    adverb: str
    polarity: str
    text: str

    def pieces(self) -> list[tuple[str | None, str]]:
        """(slot name or None, text) chunks that concatenate to ``text``."""
        return [
            (None, f"You are {article(self.adjective)}"),
            ("adjective", " " + self.adjective),
            (None, " search assistant that"),
            ("modal", " " + self.modal),
            (None, " rank passages"),
            ("adverb", " " + self.adverb),
            (None, ", based on their relevance to a query."),
        ]

    def to_dict(self) -> dict:
        return {"adjective": self.adjective, "modal": self.modal, "adverb": self.adverb,
                "polarity": self.polarity, "text": self.text}


def render_role(adjective: str, modal: str, adverb: str, lexicon: Lexicon | None = None) -> RolePrompt:
    lexicon = lexicon or default_lexicon()
    if modal not in lexicon.modals:
        raise UnknownSlotWord(f"{modal!r} is not a known modal")
    pa = lexicon.polarity("adjective", adjective)
    pv = lexicon.polarity("adverb", adverb)
    if pa != pv:
        raise MixedPolarity(f"adjective {adjective!r} is {pa} but adverb {adverb!r} is {pv}")
    text = (
        f"You are {article(adjective)} {adjective} search assistant that {modal} rank passages "
        f"{adverb}, based on their relevance to a query."
    )
    return RolePrompt(adjective, modal, adverb, pa, text)


def enumerate_roles(polarity: str, lexicon: Lexicon | None = None) -> list[RolePrompt]:
    """All adjective x modal x adverb renderings for one polarity, adjective-major."""
    lexicon = lexicon or default_lexicon()
    return [
        render_role(a, m, v, lexicon)
        for a in lexicon.adjectives[polarity]
        for m in lexicon.modals
        for v in lexicon.adverbs[polarity]
    ]


@dataclass(frozen=True)
class PromptPair:
    clean: RolePrompt
    corrupted: RolePrompt

    def to_dict(self) -> dict:
        return {"clean": self.clean.to_dict(), "corrupted": self.corrupted.to_dict()}


def make_counter_pairs(seed: int, lexicon: Lexicon | None = None, n: int = 10) -> list[PromptPair]:
    """Positive/negative pairs using each adjective and adverb at most once.

    Both members of a pair share a modal; modals are the only slot allowed to repeat.
    """
    lexicon = lexicon or default_lexicon()
    rng = random.Random(seed)
    lists = []
    for table in (lexicon.adjectives, lexicon.adverbs):
        for p in POLARITIES:
            words = list(table[p])
            rng.shuffle(words)
            lists.append(words)
    pos_adj, neg_adj, pos_adv, neg_adv = lists
    n = min(n, *(len(x) for x in lists))
    pairs = []
    for i in range(n):
        modal = rng.choice(lexicon.modals)
        pairs.append(PromptPair(
            render_role(pos_adj[i], modal, pos_adv[i], lexicon),
            render_role(neg_adj[i], modal, neg_adv[i], lexicon),
        ))
    return pairs


@dataclass(frozen=True)
class Document:
    doc_id: str
    text: str
    label: int | None = None


@dataclass(frozen=True)
class RankingPrompt:
    mode: str
    token_ids: tuple[int, ...]
    segments: dict[str, tuple[int, int]]  # half-open token ranges
    expected_answer: str | None
    text: str
    role: RolePrompt | None = None
    slot_spans: dict[str, tuple[int, int]] = field(default_factory=dict)
    order: tuple[str, ...] = ()

    def __len__(self) -> int:
        return len(self.token_ids)

    def positions(self, name: str) -> tuple[int, ...]:
        """Token positions of a segment or role slot; ``all`` is the whole role span."""
        if name in self.slot_spans:
            a, b = self.slot_spans[name]
            return tuple(range(a, b))
        if name == "all":
            name = Segment.ROLE.value
        if name == Segment.DOCUMENT.value and self.mode == PAIRWISE:
            return self.positions(Segment.DOCUMENT_A.value) + self.positions(Segment.DOCUMENT_B.value)
        if name not in self.segments:
            return ()
        a, b = self.segments[name]
        return tuple(range(a, b))

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "text": self.text,
            "token_ids": list(self.token_ids),
            "segments": {k: list(v) for k, v in self.segments.items()},
            "slot_spans": {k: list(v) for k, v in self.slot_spans.items()},
            "expected_answer": self.expected_answer,
            "order": list(self.order),
            "role": self.role.to_dict() if self.role else None,
        }


def _expected(mode: str, docs: Sequence[Document]) -> str:
    if any(d.label is None for d in docs):
        raise MissingLabel("every document needs a relevance label")
    if mode == POINTWISE:
        return "Yes" if docs[0].label > 0 else "No"
    return "Yes" if docs[0].label > docs[1].label else "No"


def build_prompt(
    mode: str,
    role: RolePrompt | None,
    query: str,
    docs: Sequence[Document],
    tokenizer: Tokenizer,
    order: Sequence[Segment | str] | None = None,
    doc_budget: int = DEFAULT_DOC_BUDGET,
    max_len: int | None = None,
    add_bos: bool = False,
    require_label: bool = True,
) -> RankingPrompt:
    if mode not in MODE_SEGMENTS:
        raise ValueError(f"unknown mode {mode!r}")
    want = 1 if mode == POINTWISE else 2
    if len(docs) != want:
        raise ValueError(f"{mode} prompts take {want} document(s), got {len(docs)}")
    order = validate_order(order or MODE_SEGMENTS[mode], mode)
    if require_label:
        expected = _expected(mode, docs)
    else:
        expected = _expected(mode, docs) if all(d.label is not None for d in docs) else None

    ids: list[int] = []
    text: list[str] = []
    spans: dict[str, tuple[int, int]] = {}
    slots: dict[str, tuple[int, int]] = {}

    def emit(piece: str, cap: int | None = None) -> tuple[int, int]:
        toks = tokenizer.encode(piece)
        if cap is not None and len(toks) > cap:
            toks = toks[:cap]
            piece = tokenizer.decode(toks)
        start = len(ids)
        ids.extend(toks)
        text.append(piece)
        return start, len(ids)

    if add_bos:
        if tokenizer.bos_id is None:
            raise ValueError("tokenizer has no BOS id configured")
        ids.append(tokenizer.bos_id)

    doc_for = {Segment.DOCUMENT: docs[0], Segment.DOCUMENT_A: docs[0]}
    if mode == PAIRWISE:
        doc_for[Segment.DOCUMENT_B] = docs[1]
    last = None
    for i, seg in enumerate(order):
        if seg is Segment.ROLE and role is None:
            continue
        sep = "\n" if i > 0 else ""
        if seg is Segment.ROLE:
            if sep:
                emit(sep)
            start = len(ids)
            for slot, piece in role.pieces():
                a, b = emit(piece)
                if slot:
                    slots[slot] = (a, b)
            spans[seg.value] = (start, len(ids))
        elif seg is Segment.INSTRUCTION:
            if sep:
                emit(sep)
            a, b = emit(INSTRUCTIONS[mode])
            if b - a < 2:
                raise ValueError("instruction must tokenize to at least two tokens")
            spans[seg.value] = (a, b - 1)
            last = (b - 1, b)
        else:
            emit(sep + _LABELS[seg])
            content = doc_for[seg].text if seg in doc_for else query
            cap = doc_budget if seg in doc_for else None
            spans[seg.value] = emit(" " + content, cap)
    spans[Segment.LAST_TOKEN.value] = last
    if max_len is not None and len(ids) > max_len:
        raise TokenBudgetExceeded(f"prompt has {len(ids)} tokens, budget is {max_len}")
    return RankingPrompt(
        mode=mode,
        token_ids=tuple(ids),
        segments=spans,
        expected_answer=expected,
        text="".join(text),
        role=role,
        slot_spans=slots,
        order=tuple(s.value for s in order),
    )


@dataclass
class AlignmentReport:
    lengths: list[int]
    modal_length: int
    passed: bool
    offending_words: list[dict]  # {slot, word, tokens, expected_tokens}
    deviating_prompts: list[int]

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "modal_length": self.modal_length,
            "n_prompts": len(self.lengths),
            "lengths": self.lengths,
            "deviating_prompts": self.deviating_prompts,
            "offending_words": self.offending_words,
        }


def _modal(values: Iterable[int]) -> int:
    counts = Counter(values)
    # ties -> smallest value, for determinism
    return min(counts, key=lambda v: (-counts[v], v))


def check_token_alignment(prompts: Sequence[RankingPrompt]) -> AlignmentReport:
    lengths = [len(p) for p in prompts]
    if not prompts:
        return AlignmentReport([], 0, True, [], [])
    modal = _modal(lengths)
    deviating = [i for i, n in enumerate(lengths) if n != modal]
    slot_modal = {}
    for slot in SLOTS:
        spans = [p.slot_spans[slot] for p in prompts if slot in p.slot_spans]
        if spans:
            slot_modal[slot] = _modal(b - a for a, b in spans)
    offenders: dict[tuple[str, str], dict] = {}
    for i in deviating:
        p = prompts[i]
        if p.role is None:
            continue
        for slot, expect in slot_modal.items():
            a, b = p.slot_spans[slot]
            if b - a != expect:
                word = getattr(p.role, slot)
                offenders.setdefault((slot, word), {
                    "slot": slot, "word": word, "tokens": b - a, "expected_tokens": expect,
                })
    return AlignmentReport(lengths, modal, not deviating, sorted(offenders.values(), key=lambda d: (d["slot"], d["word"])), deviating)


def lexicon_alignment(
    tokenizer: Tokenizer,
    lexicon: Lexicon | None = None,
    mode: str = POINTWISE,
    query: str = "",
    doc: str = "",
) -> AlignmentReport:
    """Alignment report over every positive and negative rendering of the lexicon."""
    lexicon = lexicon or default_lexicon()
    docs = [Document("d0", doc, 1)] if mode == POINTWISE else [Document("a", doc, 1), Document("b", doc, 0)]
    prompts = [
        build_prompt(mode, r, query, docs, tokenizer)
        for p in POLARITIES
        for r in enumerate_roles(p, lexicon)
    ]
    return check_token_alignment(prompts)


def filter_lexicon(tokenizer: Tokenizer, lexicon: Lexicon | None = None) -> tuple[Lexicon, list[dict]]:
    """Drop slot words whose token count differs from the modal count for their slot."""
    lexicon = lexicon or default_lexicon()
    excluded = []

    def keep(slot: str, words_by_pol: dict[str, tuple[str, ...]]) -> dict[str, tuple[str, ...]]:
        counts = {w: len(tokenizer.encode(" " + w)) for p in POLARITIES for w in words_by_pol[p]}
        modal = _modal(counts.values())
        out = {}
        for p in POLARITIES:
            out[p] = tuple(w for w in words_by_pol[p] if counts[w] == modal)
            excluded.extend({"slot": slot, "word": w, "tokens": counts[w], "expected_tokens": modal}
                            for w in words_by_pol[p] if counts[w] != modal)
        return out

    adjs = keep("adjective", lexicon.adjectives)
    advs = keep("adverb", lexicon.adverbs)
    mod_counts = {m: len(tokenizer.encode(" " + m)) for m in lexicon.modals}
    mm = _modal(mod_counts.values())
    modals = tuple(m for m in lexicon.modals if mod_counts[m] == mm)
    excluded.extend({"slot": "modal", "word": m, "tokens": n, "expected_tokens": mm}
                    for m, n in mod_counts.items() if n != mm)
    return Lexicon(adjs, advs, modals), excluded


def write_prompt_dump(prompts: Iterable[RankingPrompt], path: str | Path, config_hash: str = "") -> None:
    stamp = {"config_hash": config_hash} if config_hash else {}
    with open(path, "w", encoding="utf-8") as f:
        for p in prompts:
            f.write(json.dumps({**stamp, **p.to_dict()}, ensure_ascii=False) + "\n")
