"""Clean / corrupted / patched runs, logit-difference metrics and sweep grids.

A sweep is a set of cells (e.g. layer x segment). For every (pair, sample)
the clean prompt (positive role) is run once with a full activation cache,
the corrupted prompt (negative role) once plainly, and then once per cell
with that cell's sites overwritten from the clean cache.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .dataset import RankingSample
from .errors import DegenerateBaseline, LengthMismatch, SlotNotAligned
from .model import ActivationSite, HookedTransformer, PatchPlan, SiteKind, all_sites
from .parallel import ordered_map
from .prompts import POINTWISE, SLOTS, SWEEP_SEGMENTS, PromptPair, RankingPrompt, build_prompt
from .tokenizer import AnswerTokens, Tokenizer, resolve_answer_tokens

EPS_BASE = 1e-6
YES, NO = "Yes", "No"


def logit_diff(logits: np.ndarray, answers: AnswerTokens, correct: str) -> float:
    """Correct-answer logit minus the other answer's logit."""
    y, n = float(logits[answers.yes_id]), float(logits[answers.no_id])
    return y - n if correct == YES else n - y


def normalized_ld(ld_patched: float, ld_corrupted: float, ld_clean: float, eps: float = EPS_BASE) -> float:
    """(patched - corrupted) / (clean - corrupted); not clamped."""
    denom = ld_clean - ld_corrupted
    if not abs(denom) > eps:
        raise DegenerateBaseline(f"|ld_clean - ld_corrupted| = {abs(denom):.3g} <= {eps}")
    return (ld_patched - ld_corrupted) / denom


def predicted_label(logits: np.ndarray, answers: AnswerTokens) -> str:
    return YES if logits[answers.yes_id] >= logits[answers.no_id] else NO


@dataclass
class LogitDiffRecord:
    ld_clean: float
    ld_corrupted: float
    ld_patched: float
    normalized: float | None  # None when the baseline is degenerate
    orientation: str  # "YesCorrect" / "NoCorrect"
    corrupted_prediction: str

    @property
    def excluded(self) -> bool:
        return self.normalized is None


def _record(ld_clean, ld_corr, ld_patched, correct, pred, eps) -> LogitDiffRecord:
    try:
        norm = normalized_ld(ld_patched, ld_corr, ld_clean, eps)
    except DegenerateBaseline:
        norm = None
    return LogitDiffRecord(ld_clean, ld_corr, ld_patched, norm, f"{correct}Correct", pred)


@dataclass(frozen=True)
class Cell:
    """One grid cell: which activation to patch and at which named positions."""

    row: int
    col: str
    kind: SiteKind
    layer: int
    head: int | None
    positions: str  # segment or slot name resolved per prompt


@dataclass(frozen=True)
class PatchContext:
    model: HookedTransformer
    tokenizer: Tokenizer
    answers: AnswerTokens
    pairs: tuple[PromptPair, ...]
    samples: tuple[RankingSample, ...]
    mode: str = POINTWISE
    order: tuple | None = None
    eps: float = EPS_BASE
    doc_budget: int = 220

    def prompts(self, pair: PromptPair, sample: RankingSample) -> tuple[RankingPrompt, RankingPrompt]:
        kw = dict(order=self.order, doc_budget=self.doc_budget, max_len=self.model.cfg.max_seq)
        clean = build_prompt(self.mode, pair.clean, sample.query, sample.candidates, self.tokenizer, **kw)
        corrupted = build_prompt(self.mode, pair.corrupted, sample.query, sample.candidates, self.tokenizer, **kw)
        if len(clean) != len(corrupted):
            raise LengthMismatch(f"clean prompt has {len(clean)} tokens, corrupted has {len(corrupted)}")
        for slot in SLOTS:
            if clean.slot_spans.get(slot) != corrupted.slot_spans.get(slot):
                raise SlotNotAligned(
                    f"{slot} spans differ: {getattr(pair.clean, slot)!r} vs {getattr(pair.corrupted, slot)!r}"
                )
        return clean, corrupted


def _make_context(model, tokenizer, pairs, samples, mode, order, eps, answers, doc_budget=220) -> PatchContext:
    answers = answers or resolve_answer_tokens(tokenizer)
    return PatchContext(model, tokenizer, answers, tuple(pairs), tuple(samples), mode,
                        tuple(order) if order else None, eps, doc_budget)


def run_patched_sample(
    model: HookedTransformer,
    tokenizer: Tokenizer,
    pair: PromptPair,
    sample: RankingSample,
    sites: Sequence[ActivationSite] | Callable[[RankingPrompt], Sequence[ActivationSite]],
    mode: str = POINTWISE,
    order=None,
    answers: AnswerTokens | None = None,
    eps: float = EPS_BASE,
) -> LogitDiffRecord:
    """Three-stage patching for one sample; raises DegenerateBaseline when the metric is undefined.

    ``sites`` may be a callable receiving the clean prompt, to resolve segment positions.
    """
    ctx = _make_context(model, tokenizer, [pair], [sample], mode, order, eps, answers)
    clean, corrupted = ctx.prompts(pair, sample)
    sites = list(sites(clean) if callable(sites) else sites)
    clean_logits, cache = model.run_with_cache(clean.token_ids, sites)
    corr_logits = model.forward(corrupted.token_ids)
    patched = model.run_with_patch(corrupted.token_ids, PatchPlan(sites, cache))
    correct = clean.expected_answer
    a = ctx.answers
    ld_clean = logit_diff(clean_logits, a, correct)
    ld_corr = logit_diff(corr_logits, a, correct)
    ld_patch = logit_diff(patched, a, correct)
    return LogitDiffRecord(ld_clean, ld_corr, ld_patch, normalized_ld(ld_patch, ld_corr, ld_clean, eps),
                           f"{correct}Correct", predicted_label(corr_logits, a))


def _sample_task(job: tuple[PatchContext, tuple[Cell, ...]], item: tuple[int, int]) -> dict:
    ctx, cells = job
    pi, si = item
    pair, sample = ctx.pairs[pi], ctx.samples[si]
    clean, corrupted = ctx.prompts(pair, sample)
    model = ctx.model
    kinds = sorted({c.kind for c in cells}, key=lambda k: k.value)
    clean_logits, cache = model.run_with_cache(clean.token_ids, all_sites(model.cfg, len(clean), kinds))
    corr_logits = model.forward(corrupted.token_ids)
    correct = clean.expected_answer
    a = ctx.answers
    ld_clean = logit_diff(clean_logits, a, correct)
    ld_corr = logit_diff(corr_logits, a, correct)
    patched = []
    for c in cells:
        site = ActivationSite(c.kind, c.layer, c.head, clean.positions(c.positions))
        logits = model.run_with_patch(corrupted.token_ids, PatchPlan([site], cache))
        patched.append(logit_diff(logits, a, correct))
    return {
        "pair": pi,
        "sample": si,
        "query_id": sample.query_id,
        "doc_type": sample.doc_type,
        "correct": correct,
        "ld_clean": ld_clean,
        "ld_corrupted": ld_corr,
        "corrupted_prediction": predicted_label(corr_logits, a),
        "ld_patched": patched,
    }


@dataclass
class ScoreGrid:
    """Mean normalized LD per cell, averaged over (pair, sample) records."""

    row_name: str
    rows: list[int]
    cols: list[str]
    values: np.ndarray
    std: np.ndarray
    counts: np.ndarray
    n_samples: int
    n_pairs: int
    exclusions: int
    kind: str = ""
    meta: dict = field(default_factory=dict)
    records: list[dict] = field(default_factory=list)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @property
    def vmin(self) -> float:
        return float(np.nanmin(self.values)) if np.isfinite(self.values).any() else math.nan

    @property
    def vmax(self) -> float:
        return float(np.nanmax(self.values)) if np.isfinite(self.values).any() else math.nan

    def cell(self, row: int, col: str) -> float:
        return float(self.values[self.rows.index(row), self.cols.index(col)])

    def to_csv(self, config_hash: str = "") -> str:
        lines = []
        if config_hash:
            lines.append(f"# config_hash={config_hash}")
        lines.append(",".join([self.row_name, *self.cols]))
        for i, r in enumerate(self.rows):
            lines.append(",".join([str(r), *(_fmt(v) for v in self.values[i])]))
        return "\n".join(lines) + "\n"

    def sidecar(self, config_hash: str = "") -> dict:
        return {
            "config_hash": config_hash,
            "kind": self.kind,
            "row_name": self.row_name,
            "rows": self.rows,
            "cols": self.cols,
            "n_samples": self.n_samples,
            "n_pairs": self.n_pairs,
            "exclusions": self.exclusions,
            "counts": self.counts.tolist(),
            "std": [[_json_float(v) for v in row] for row in self.std],
            "min": _json_float(self.vmin),
            "max": _json_float(self.vmax),
            **self.meta,
        }

    def record_rows(self):
        """Flattened per-sample, per-cell records (the data every cell mean is computed from)."""
        for rec in self.records:
            for j, ldp in enumerate(rec["ld_patched"]):
                r, c = divmod(j, len(self.cols))
                try:
                    norm = normalized_ld(ldp, rec["ld_corrupted"], rec["ld_clean"], self.meta.get("eps", EPS_BASE))
                except DegenerateBaseline:
                    norm = None
                yield {
                    "pair": rec["pair"], "sample": rec["sample"], "query_id": rec["query_id"],
                    "doc_type": rec["doc_type"], "orientation": f"{rec['correct']}Correct",
                    "row": self.rows[r], "col": self.cols[c],
                    "ld_clean": rec["ld_clean"], "ld_corrupted": rec["ld_corrupted"], "ld_patched": ldp,
                    "normalized": norm,
                }

    def write(self, out_dir: str | Path, stem: str, config_hash: str = "") -> dict[str, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        paths = {
            "csv": out_dir / f"{stem}.csv",
            "json": out_dir / f"{stem}.json",
            "records": out_dir / f"{stem}_records.jsonl",
        }
        paths["csv"].write_text(self.to_csv(config_hash))
        paths["json"].write_text(json.dumps(self.sidecar(config_hash), indent=1, sort_keys=True) + "\n")
        with open(paths["records"], "w") as f:
            for row in self.record_rows():
                f.write(json.dumps({"config_hash": config_hash, **row}, sort_keys=True) + "\n")
        return paths


def _fmt(v: float) -> str:
    return "nan" if not math.isfinite(v) else repr(float(v))


def _json_float(v: float):
    return None if not math.isfinite(v) else float(v)


def _aggregate(records: list[dict], rows: list[int], cols: list[str], eps: float) -> tuple:
    n_cells = len(rows) * len(cols)
    sums = [[] for _ in range(n_cells)]
    exclusions = 0
    for rec in records:  # ordered: pair-major, then sample
        denom = rec["ld_clean"] - rec["ld_corrupted"]
        if not abs(denom) > eps:
            exclusions += 1
            continue
        for j, ldp in enumerate(rec["ld_patched"]):
            sums[j].append((ldp - rec["ld_corrupted"]) / denom)
    means = np.array([math.fsum(v) / len(v) if v else math.nan for v in sums], dtype=np.float64)
    std = np.array([
        math.sqrt(math.fsum((x - m) ** 2 for x in v) / len(v)) if v else math.nan
        for v, m in zip(sums, means)
    ])
    counts = np.array([len(v) for v in sums], dtype=np.int64)
    shape = (len(rows), len(cols))
    return means.reshape(shape), std.reshape(shape), counts.reshape(shape), exclusions


def run_sweep(ctx: PatchContext, cells: Sequence[Cell], rows: list[int], cols: list[str], row_name: str,
              kind: str, workers: int = 1, meta: dict | None = None) -> ScoreGrid:
    cells = tuple(cells)
    items = [(pi, si) for pi in range(len(ctx.pairs)) for si in range(len(ctx.samples))]
    records = ordered_map(_sample_task, items, (ctx, cells), workers)
    values, std, counts, excl = _aggregate(records, rows, cols, ctx.eps)
    return ScoreGrid(row_name, rows, cols, values, std, counts, len(ctx.samples), len(ctx.pairs), excl,
                     kind=kind, meta={"eps": ctx.eps, "mode": ctx.mode, **(meta or {})}, records=records)


def sweep_residual(
    model: HookedTransformer,
    tokenizer: Tokenizer,
    pairs: Sequence[PromptPair],
    samples: Sequence[RankingSample],
    segments: Sequence[str] = SWEEP_SEGMENTS,
    order=None,
    mode: str = POINTWISE,
    kind: SiteKind | str = SiteKind.RESID_PRE,
    workers: int = 1,
    eps: float = EPS_BASE,
    answers: AnswerTokens | None = None,
) -> ScoreGrid:
    """Layer x segment grid. ``kind`` may also be attn_out or mlp_out."""
    kind = SiteKind(kind)
    if kind is SiteKind.HEAD:
        raise ValueError("use sweep_heads for head sites")
    ctx = _make_context(model, tokenizer, pairs, samples, mode, order, eps, answers)
    rows = list(range(model.cfg.n_layers))
    cols = list(segments)
    cells = [Cell(l, s, kind, l, None, s) for l in rows for s in cols]
    return run_sweep(ctx, cells, rows, cols, "layer", kind.value, workers,
                     {"order": list(ctx.order or [])})


def sweep_heads(
    model: HookedTransformer,
    tokenizer: Tokenizer,
    pairs: Sequence[PromptPair],
    samples: Sequence[RankingSample],
    positions: str = "LastToken",
    order=None,
    mode: str = POINTWISE,
    workers: int = 1,
    eps: float = EPS_BASE,
    answers: AnswerTokens | None = None,
) -> ScoreGrid:
    """Layer x head grid, patching each head's contribution at one segment's positions."""
    ctx = _make_context(model, tokenizer, pairs, samples, mode, order, eps, answers)
    rows = list(range(model.cfg.n_layers))
    heads = list(range(model.cfg.n_heads))
    cols = [str(h) for h in heads]
    cells = [Cell(l, str(h), SiteKind.HEAD, l, h, positions) for l in rows for h in heads]
    return run_sweep(ctx, cells, rows, cols, "layer", "head", workers, {"segment": positions})


def sweep_slot_tokens(
    model: HookedTransformer,
    tokenizer: Tokenizer,
    pairs: Sequence[PromptPair],
    samples: Sequence[RankingSample],
    order=None,
    mode: str = POINTWISE,
    workers: int = 1,
    eps: float = EPS_BASE,
    answers: AnswerTokens | None = None,
) -> ScoreGrid:
    """Layer x {adjective, modal, adverb, all} residual grid over role-slot tokens."""
    ctx = _make_context(model, tokenizer, pairs, samples, mode, order, eps, answers)
    rows = list(range(model.cfg.n_layers))
    cols = [*SLOTS, "all"]
    cells = [Cell(l, c, SiteKind.RESID_PRE, l, None, c) for l in rows for c in cols]
    return run_sweep(ctx, cells, rows, cols, "layer", "slot", workers)

