"""Top-k head selection from patching grids, zero/mean head ablation, and correct-score reports."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .dataset import QueryRecord, RankingSample
from .errors import EmptyReference, KTooLarge, MissingMeans
from .model import DTYPE, HookedTransformer, SiteKind, all_sites
from .parallel import ordered_map
from .patching import ScoreGrid, YES
from .prompts import POINTWISE, RolePrompt, build_prompt
from .tokenizer import AnswerTokens, Tokenizer, resolve_answer_tokens

ZERO, MEAN = "zero", "mean"


@dataclass(frozen=True)
class HeadSelection:
    segment: str
    heads: tuple[tuple[int, int, float], ...]  # (layer, head, score), best first

    @property
    def k(self) -> int:
        return len(self.heads)

    @property
    def name(self) -> str:
        return f"{self.segment}@{self.k}"

    def to_records(self) -> list[dict]:
        return [{"segment": self.segment, "layer": l, "head": h, "score": s} for l, h, s in self.heads]


def _ranked(scores: dict[tuple[int, int], float]) -> list[tuple[int, int, float]]:
    # NaN cells (all samples excluded) sort last
    return sorted(((l, h, s) for (l, h), s in scores.items()),
                  key=lambda t: (math.isnan(t[2]), -t[2] if not math.isnan(t[2]) else 0.0, t[0], t[1]))


def select_top_heads(grid: ScoreGrid, k: int, segment: str | None = None) -> HeadSelection:
    """Top-k heads by cell value; ties go to the lower layer, then the lower head index."""
    if grid.kind != "head":
        raise ValueError("grid has no head axis")
    n = grid.values.size
    if k > n:
        raise KTooLarge(f"k={k} exceeds the {n} heads in the grid")
    scores = {(l, int(h)): float(grid.values[i, j]) for i, l in enumerate(grid.rows) for j, h in enumerate(grid.cols)}
    return HeadSelection(segment or grid.meta.get("segment", ""), tuple(_ranked(scores)[:k]))


def mix_selection(grids: dict[str, ScoreGrid], k: int) -> HeadSelection:
    """Pool heads across segment grids, scoring each head by its best value over segments."""
    best: dict[tuple[int, int], float] = {}
    for grid in grids.values():
        for i, l in enumerate(grid.rows):
            for j, h in enumerate(grid.cols):
                v = float(grid.values[i, j])
                key = (l, int(h))
                if key not in best or (not math.isnan(v) and (math.isnan(best[key]) or v > best[key])):
                    best[key] = v
    if k > len(best):
        raise KTooLarge(f"k={k} exceeds the {len(best)} heads available")
    return HeadSelection("Mix", tuple(_ranked(best)[:k]))


def load_selections(path: str | Path) -> dict[str, HeadSelection]:
    """Read a head-selection file (JSON list of {segment, layer, head, score}); keeps file order per segment."""
    by_seg: dict[str, list] = {}
    for row in json.loads(Path(path).read_text()):
        by_seg.setdefault(row["segment"], []).append((int(row["layer"]), int(row["head"]), float(row["score"])))
    return {s: HeadSelection(s, tuple(h)) for s, h in by_seg.items()}


def write_selections(selections: Sequence[HeadSelection], path: str | Path, config_hash: str = "") -> None:
    stamp = {"config_hash": config_hash} if config_hash else {}
    rows = [{**stamp, **r} for sel in selections for r in sel.to_records()]
    Path(path).write_text(json.dumps(rows, indent=1) + "\n")


@dataclass(frozen=True)
class AblationMode:
    kind: str  # "zero" or "mean"
    means: np.ndarray | None = None  # (n_layers, n_heads, d_model)
    reference: str = ""

    def __post_init__(self):
        if self.kind not in (ZERO, MEAN):
            raise ValueError(f"unknown ablation kind {self.kind!r}")


def compute_head_means(model: HookedTransformer, reference_prompts: Sequence[Sequence[int]]) -> np.ndarray:
    """Mean head contribution over every position of every reference prompt, shape (layers, heads, d_model)."""
    if not reference_prompts:
        raise EmptyReference("mean ablation needs at least one reference prompt")
    cfg = model.cfg
    total = np.zeros((cfg.n_layers, cfg.n_heads, cfg.d_model), dtype=np.float64)
    count = 0
    for toks in reference_prompts:
        _, cache = model.run_with_cache(toks, all_sites(cfg, len(toks), [SiteKind.HEAD]))
        for (kind, layer, head), (_, arr) in cache.entries.items():
            total[layer, head] += arr.astype(np.float64).sum(axis=0)
        count += len(toks)
    return (total / count).astype(DTYPE)


def head_replacements(model: HookedTransformer, selection: HeadSelection, mode: AblationMode) -> dict:
    if mode.kind == MEAN and mode.means is None:
        raise MissingMeans("mean ablation requested without reference means")
    out = {}
    for layer, head, _ in selection.heads:
        if mode.kind == ZERO:
            out[(layer, head)] = np.zeros(model.cfg.d_model, dtype=DTYPE)
        else:
            out[(layer, head)] = mode.means[layer, head]
    return out


def ablated_run(model: HookedTransformer, tokens: Sequence[int], selection: HeadSelection, mode: AblationMode) -> np.ndarray:
    """Logits with each selected head's contribution replaced at every position."""
    return model.run_with_ablation(tokens, head_replacements(model, selection, mode))


def correct_score(logits: np.ndarray, answers: AnswerTokens, correct: str) -> float:
    """Probability of the correct answer under a softmax over the Yes/No logits only."""
    y, n = float(logits[answers.yes_id]), float(logits[answers.no_id])
    margin = y - n if correct == YES else n - y
    if margin >= 0:
        return 1.0 / (1.0 + math.exp(-margin))
    e = math.exp(margin)
    return e / (1.0 + e)


@dataclass
class AblationReport:
    rows: list[dict]
    per_sample: list[dict] = field(default_factory=list)

    FACETS = ("segment", "k", "mode", "polarity", "doc_type", "metric")

    def get(self, **facets) -> list[dict]:
        return [r for r in self.rows if all(r[k] == v for k, v in facets.items())]

    def to_csv(self, config_hash: str = "") -> str:
        cols = [*self.FACETS, "n", "baseline", "ablated", "delta"]
        lines = [f"# config_hash={config_hash}"] if config_hash else []
        lines.append(",".join(cols))
        for r in self.rows:
            lines.append(",".join(repr(r[c]) if isinstance(r[c], float) else str(r[c]) for c in cols))
        return "\n".join(lines) + "\n"

    def write(self, out_dir: str | Path, stem: str = "ablation", config_hash: str = "") -> dict[str, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        paths = {"csv": out_dir / f"{stem}.csv", "json": out_dir / f"{stem}.json",
                 "records": out_dir / f"{stem}_records.jsonl"}
        paths["csv"].write_text(self.to_csv(config_hash))
        paths["json"].write_text(json.dumps({"config_hash": config_hash, "rows": self.rows}, indent=1) + "\n")
        with open(paths["records"], "w") as f:
            for r in self.per_sample:
                f.write(json.dumps({"config_hash": config_hash, **r}, sort_keys=True) + "\n")
        return paths


@dataclass(frozen=True)
class _AblationJob:
    model: HookedTransformer
    tokenizer: Tokenizer
    answers: AnswerTokens
    mode: str
    order: tuple | None
    variants: tuple[tuple[str, int, str, dict], ...]  # (segment, k, mode, head_replace)


def _ablation_task(job: _AblationJob, item: tuple[RolePrompt, RankingSample]) -> dict:
    role, sample = item
    prompt = build_prompt(job.mode, role, sample.query, sample.candidates, job.tokenizer, order=job.order,
                          max_len=job.model.cfg.max_seq)
    base = correct_score(job.model.forward(prompt.token_ids), job.answers, prompt.expected_answer)
    ablated = [correct_score(job.model.run_with_ablation(prompt.token_ids, repl), job.answers, prompt.expected_answer)
               for _, _, _, repl in job.variants]
    return {"baseline": base, "ablated": ablated}


def _mean(xs: list[float]) -> float:
    return math.fsum(xs) / len(xs) if xs else math.nan


def ablation_report(
    model: HookedTransformer,
    tokenizer: Tokenizer,
    samples: Sequence[RankingSample],
    selections: Sequence[HeadSelection],
    modes: Sequence[AblationMode],
    roles: Sequence[RolePrompt],
    mode: str = POINTWISE,
    order=None,
    answers: AnswerTokens | None = None,
    workers: int = 1,
    queries: Sequence[QueryRecord] | None = None,
    k_rerank: int = 10,
) -> AblationReport:
    """Mean correct-score change per (selection, mode, role polarity, document type).

    With ``queries``, pointwise reranking of each query's top ``k_rerank``
    candidates adds ``ndcg@10`` rows (doc_type ``all``).
    """
    answers = answers or resolve_answer_tokens(tokenizer)
    variants = tuple((sel.segment, sel.k, m.kind, head_replacements(model, sel, m)) for sel in selections for m in modes)
    job = _AblationJob(model, tokenizer, answers, mode, tuple(order) if order else None, variants)
    items = [(r, s) for r in roles for s in samples]
    results = ordered_map(_ablation_task, items, job, workers)

    per_sample = []
    for (role, sample), res in zip(items, results):
        for (seg, k, mkind, _), abl in zip(variants, res["ablated"]):
            per_sample.append({
                "segment": seg, "k": k, "mode": mkind, "polarity": role.polarity, "role": role.text,
                "query_id": sample.query_id, "doc_type": sample.doc_type,
                "baseline": res["baseline"], "ablated": abl, "delta": abl - res["baseline"],
            })

    rows = []
    polarities = sorted({r.polarity for r in roles}, key=lambda p: p != "positive")
    for seg, k, mkind, _ in variants:
        for pol in polarities:
            for dt in ("all", "relevant", "irrelevant"):
                sel = [p for p in per_sample if p["segment"] == seg and p["k"] == k and p["mode"] == mkind
                       and p["polarity"] == pol and (dt == "all" or p["doc_type"] == dt)]
                if not sel:
                    continue
                b = _mean([p["baseline"] for p in sel])
                a = _mean([p["ablated"] for p in sel])
                rows.append({"segment": seg, "k": k, "mode": mkind, "polarity": pol, "doc_type": dt,
                             "metric": "correct_score", "n": len(sel), "baseline": b, "ablated": a,
                             "delta": _mean([p["delta"] for p in sel])})

    if queries:
        from .ranking import ndcg_at_k, rerank_pointwise

        qrels = {q.query_id: {d.doc_id: d.label for d in q.docs} for q in queries}
        for pol in polarities:
            pol_roles = [r for r in roles if r.polarity == pol]
            base_runs = {}
            for (seg, k, mkind, repl) in variants:
                b_vals, a_vals = [], []
                for r in pol_roles:
                    for q in queries:
                        key = (r.text, q.query_id)
                        if key not in base_runs:
                            run = rerank_pointwise(model, tokenizer, r, q.query, q.docs, k_rerank, answers=answers,
                                                   query_id=q.query_id, order=order)
                            base_runs[key] = ndcg_at_k(run, qrels, 10)
                        run = rerank_pointwise(model, tokenizer, r, q.query, q.docs, k_rerank, answers=answers,
                                               query_id=q.query_id, order=order, head_replace=repl)
                        b_vals.append(base_runs[key])
                        a_vals.append(ndcg_at_k(run, qrels, 10))
                b, a = _mean(b_vals), _mean(a_vals)
                rows.append({"segment": seg, "k": k, "mode": mkind, "polarity": pol, "doc_type": "all",
                             "metric": "ndcg@10", "n": len(b_vals), "baseline": b, "ablated": a, "delta": a - b})
    return AblationReport(rows, per_sample)
