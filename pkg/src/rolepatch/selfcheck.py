"""Invariant checks runnable from the CLI against the configured toy model."""

from __future__ import annotations

import itertools
import math
import random
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .ablation import HeadSelection, AblationMode, ablated_run, correct_score
from .dataset import ingest_dataset
from .model import DTYPE, HookedTransformer, PatchPlan, SiteKind, all_sites, resid_pre
from .patching import normalized_ld, run_patched_sample, sweep_residual
from .prompts import NEGATIVE, POSITIVE, enumerate_roles, make_counter_pairs
from .ranking import RunList, ndcg_at_k
from .tokenizer import resolve_answer_tokens


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float


def brute_force_ndcg(ranked: list[str], judged: dict[str, int], k: int) -> float:
    """nDCG by definition; the ideal ordering is found by trying every permutation of judged docs."""
    def dcg_of(seq):
        total = 0.0
        for pos in range(min(k, len(seq))):
            rel = judged.get(seq[pos], 0)
            total += (2 ** rel - 1) / math.log(pos + 2, 2)
        return total

    best = 0.0
    for perm in itertools.permutations(list(judged)):
        best = max(best, dcg_of(perm))
    return dcg_of(ranked) / best if best > 0 else 0.0


def random_prompts(model: HookedTransformer, n: int, seed: int) -> list[list[int]]:
    rng = random.Random(seed)
    cfg = model.cfg
    return [[rng.randrange(cfg.vocab_size) for _ in range(rng.randint(2, min(24, cfg.max_seq)))] for _ in range(n)]


def bias_only_attention(model: HookedTransformer) -> HookedTransformer:
    """Copy of ``model`` whose attention blocks output only their bias."""
    w = dict(model.w)
    for layer in range(model.cfg.n_layers):
        w[f"blocks.{layer}.W_O"] = np.zeros_like(model.w[f"blocks.{layer}.W_O"])
    return HookedTransformer(model.cfg, w, model.tied_unembed)


def head_decomposition_error(model: HookedTransformer, tokens) -> float:
    """Max relative error of (sum of head contributions + b_O) vs the attention output, over layers."""
    cfg = model.cfg
    _, cache = model.run_with_cache(tokens, all_sites(cfg, len(tokens), [SiteKind.HEAD, SiteKind.ATTN_OUT]))
    worst = 0.0
    for layer in range(cfg.n_layers):
        total = np.zeros((len(tokens), cfg.d_model), dtype=np.float64)
        for h in range(cfg.n_heads):
            total += cache.entries[(SiteKind.HEAD, layer, h)][1]
        total += model.w[f"blocks.{layer}.b_O"]
        ref = cache.entries[(SiteKind.ATTN_OUT, layer, None)][1].astype(np.float64)
        err = np.abs(total - ref).max() / max(np.abs(ref).max(), 1e-12)
        worst = max(worst, float(err))
    return worst


def run_selfcheck(model: HookedTransformer, tokenizer, dataset_path, mode: str = "pointwise", seed: int = 0) -> list[CheckResult]:
    answers = resolve_answer_tokens(tokenizer)
    samples = ingest_dataset(dataset_path, mode, seed)
    pairs = make_counter_pairs(seed)
    results: list[CheckResult] = []

    def check(name: str, fn: Callable[[], tuple[bool, str]]):
        t = time.perf_counter()
        try:
            ok, detail = fn()
        except Exception as e:  # a crashing check is a failing check
            ok, detail = False, f"{type(e).__name__}: {e}"
        results.append(CheckResult(name, ok, detail, time.perf_counter() - t))

    def identity():
        rng = random.Random(seed)
        for toks in random_prompts(model, 20, seed):
            sites = all_sites(model.cfg, len(toks))
            chosen = rng.sample(sites, rng.randint(1, len(sites)))
            base, cache = model.run_with_cache(toks, chosen)
            patched = model.run_with_patch(toks, PatchPlan(chosen, cache))
            if not np.array_equal(base, patched):
                return False, "self-patched logits differ"
        return True, "20 prompts bitwise identical"

    def restoration():
        worst = 0.0
        for s in samples[:10]:
            full = lambda p: [resid_pre(0, range(len(p)))]
            rec = run_patched_sample(model, tokenizer, pairs[0], s, full, mode, answers=answers)
            worst = max(worst, abs(rec.normalized - 1.0))
            empty = run_patched_sample(model, tokenizer, pairs[0], s, [], mode, answers=answers)
            if empty.normalized != 0.0:
                return False, f"empty plan gave {empty.normalized}"
        return worst <= 1e-5, f"max |normalized - 1| = {worst:.2e}"

    def decomposition():
        worst = max(head_decomposition_error(model, t) for t in random_prompts(model, 5, seed))
        return worst <= 1e-4, f"max relative error {worst:.2e}"

    def zero_ablation():
        sel = HeadSelection("all", tuple((l, h, 0.0) for l in range(model.cfg.n_layers) for h in range(model.cfg.n_heads)))
        ref = bias_only_attention(model)
        worst = 0.0
        for toks in random_prompts(model, 5, seed):
            a = ablated_run(model, toks, sel, AblationMode("zero"))
            worst = max(worst, float(np.abs(a - ref.forward(toks)).max()))
        return worst <= 1e-5, f"max abs diff {worst:.2e}"

    def ndcg_oracle():
        rng = random.Random(seed)
        worst = 0.0
        for i in range(100):
            docs = [f"d{j}" for j in range(rng.randint(1, 7))]
            judged = {d: rng.randint(0, 3) for d in docs}
            ranked = docs[:]
            rng.shuffle(ranked)
            run = RunList(f"q{i}", tuple((d, float(len(ranked) - r)) for r, d in enumerate(ranked)))
            k = rng.randint(1, 10)
            worst = max(worst, abs(ndcg_at_k(run, {f"q{i}": judged}, k) - brute_force_ndcg(ranked, judged, k)))
        return worst <= 1e-9, f"max abs diff {worst:.2e} over 100 instances"

    def counts():
        pos, neg = enumerate_roles(POSITIVE), enumerate_roles(NEGATIVE)
        adj = {p.clean.adjective for p in pairs} | {p.corrupted.adjective for p in pairs}
        ok = len(pos) == 300 and len(neg) == 300 and len(pairs) == 10 and len(adj) == 20
        return ok, f"{len(pos)} positive, {len(neg)} negative roles, {len(pairs)} pairs"

    def determinism():
        sub = samples[:4]
        a = sweep_residual(model, tokenizer, pairs[:2], sub, mode=mode, workers=1, answers=answers).to_csv()
        b = sweep_residual(model, tokenizer, pairs[:2], sub, mode=mode, workers=2, answers=answers).to_csv()
        return a == b, "workers=1 vs workers=2 grids " + ("identical" if a == b else "differ")

    def causality():
        toks = random_prompts(model, 1, seed + 1)[0]
        full = model.forward(toks, all_positions=True)
        pre = model.forward(toks[: len(toks) // 2], all_positions=True)
        err = float(np.abs(full[: len(pre)] - pre).max())
        return err <= 1e-5, f"prefix logits max abs diff {err:.2e}"

    def score_bounds():
        logits = np.zeros(model.cfg.vocab_size, dtype=DTYPE)
        logits[answers.yes_id] = 3.0
        s_yes, s_no = correct_score(logits, answers, "Yes"), correct_score(logits, answers, "No")
        ok = 0.0 <= s_no <= s_yes <= 1.0 and abs(s_yes + s_no - 1.0) < 1e-12 and normalized_ld(2.0, -1.0, 5.0) == 0.5
        return ok, f"scores {s_yes:.4f} + {s_no:.4f}"

    check("identity_patching", identity)
    check("full_restoration", restoration)
    check("head_decomposition", decomposition)
    check("zero_ablation_bias_only", zero_ablation)
    check("ndcg_oracle", ndcg_oracle)
    check("prompt_counts", counts)
    check("sweep_determinism", determinism)
    check("causality_prefix", causality)
    check("metric_bounds", score_bounds)
    return results
