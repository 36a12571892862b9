"""Freeze numeric fixtures after checking them against the float64 reference.

Run from the repo root: ``python3 tests/oracles/make_fixtures.py``.

* toy_forward.json: reference logits for small toy models (the reference
  value itself is frozen, so the test compares the package to it).
* sweep_resid_pre.csv / sweep_heads_LastToken.csv: the end-to-end toy
  sweep grids for the default experiment config.  Per-sample logit
  differences for a subset of (pair, sample) records are checked against
  the reference at 1e-5 before the package output is frozen byte for byte.
"""

import json
import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).parent))
from reference_model import reference_forward, reference_patch  # noqa: E402

from rolepatch.config import ExperimentConfig
from rolepatch.dataset import ingest_dataset
from rolepatch.model import ModelConfig, make_toy_model
from rolepatch.patching import PatchContext, sweep_heads, sweep_residual
from rolepatch.prompts import SWEEP_SEGMENTS, filter_lexicon, make_counter_pairs
from rolepatch.tokenizer import resolve_answer_tokens

FIX = Path(__file__).resolve().parents[1] / "fixtures"
TOL = 1e-5

TOY_CASES = [
    {"config": {}, "seed": 42, "tokens": [1, 2, 3]},
    {"config": {"norm_kind": "rmsnorm", "pos_kind": "rotary", "activation": "silu"}, "seed": 42, "tokens": [1, 2, 3]},
    {"config": {"n_layers": 3, "n_heads": 4, "d_model": 16, "vocab_size": 32}, "seed": 7,
     "tokens": [5, 0, 31, 9, 9, 2, 17]},
]


def freeze_toy_forward():
    out = []
    for case in TOY_CASES:
        cfg = ModelConfig(**case["config"])
        model = make_toy_model(cfg, case["seed"])
        ref, _ = reference_forward(cfg, model.w, case["tokens"])
        got = model.forward(case["tokens"], all_positions=True)
        err = float(np.abs(ref - got).max())
        assert err <= TOL, err
        out.append({**case, "logits": ref.tolist()})
        print(f"toy forward {case['config']}: package vs reference max abs diff {err:.2e}")
    (FIX / "toy_forward.json").write_text(json.dumps(out, indent=1) + "\n")


def sweep_inputs():
    cfg = ExperimentConfig()
    tok = cfg.build_tokenizer()
    model = cfg.build_model(tok)
    lex, _ = filter_lexicon(tok, cfg.load_lexicon())
    pairs = make_counter_pairs(cfg.pair_seed, lex, cfg.n_pairs)
    samples = ingest_dataset(cfg.dataset_path(), cfg.mode, cfg.sample_seed, cfg.n_samples)
    return cfg, tok, model, pairs, samples


def verify_records(grid, model, tok, pairs, samples, key_of, n_pairs=2, n_samples=4):
    answers = resolve_answer_tokens(tok)
    ctx = PatchContext(model, tok, answers, tuple(pairs), tuple(samples))
    worst = 0.0
    for rec in grid.records:
        if rec["pair"] >= n_pairs or rec["sample"] >= n_samples:
            continue
        clean, corr = ctx.prompts(pairs[rec["pair"]], samples[rec["sample"]])
        cells = [(key_of(r, c), clean.positions(seg)) for r, c, seg in grid_cells(grid)]
        lc, lk, lp = reference_patch(model.cfg, model.w, clean.token_ids, corr.token_ids,
                                     answers.yes_id, answers.no_id, rec["correct"], cells)
        diffs = [abs(lc - rec["ld_clean"]), abs(lk - rec["ld_corrupted"])]
        diffs += [abs(a - b) for a, b in zip(lp, rec["ld_patched"])]
        worst = max(worst, max(diffs))
    assert worst <= TOL, worst
    return worst


def grid_cells(grid):
    for r in grid.rows:
        for c in grid.cols:
            yield r, c, (c if grid.kind != "head" else grid.meta["segment"])


def freeze_sweeps():
    cfg, tok, model, pairs, samples = sweep_inputs()
    h = cfg.hash()
    resid = sweep_residual(model, tok, pairs, samples, SWEEP_SEGMENTS)
    err = verify_records(resid, model, tok, pairs, samples, lambda r, c: ("resid_pre", r))
    print(f"resid_pre sweep: max abs LD diff vs reference {err:.2e}")
    (FIX / "sweep_resid_pre.csv").write_text(resid.to_csv(h))
    heads = sweep_heads(model, tok, pairs, samples, "LastToken")
    err = verify_records(heads, model, tok, pairs, samples, lambda r, c: ("head", r, int(c)))
    print(f"head sweep: max abs LD diff vs reference {err:.2e}")
    (FIX / "sweep_heads_LastToken.csv").write_text(heads.to_csv(h))


def freeze_rerank_run():
    import math

    from rolepatch.dataset import load_dataset
    from rolepatch.prompts import build_prompt, render_role
    from rolepatch.ranking import rerank_pointwise, write_run

    cfg, tok, model, _, _ = sweep_inputs()
    answers = resolve_answer_tokens(tok)
    role = render_role("talented", "can", "carefully")
    runs = []
    worst = 0.0
    for q in load_dataset(cfg.dataset_path())[:3]:
        run = rerank_pointwise(model, tok, role, q.query, q.docs, 10, answers=answers, query_id=q.query_id)
        for doc_id, score in run.entries:
            doc = next(d for d in q.docs if d.doc_id == doc_id)
            p = build_prompt("pointwise", role, q.query, [doc], tok, require_label=False)
            logits, _ = reference_forward(model.cfg, model.w, p.token_ids)
            m = logits[-1, answers.yes_id] - logits[-1, answers.no_id]
            worst = max(worst, abs(score - 1.0 / (1.0 + math.exp(-m))))
        runs.append(run)
    assert worst <= TOL, worst
    print(f"rerank run: max abs score diff vs reference {worst:.2e}")
    write_run(runs, FIX / "rerank_toy.trec", tag="toy")


if __name__ == "__main__":
    freeze_toy_forward()
    freeze_rerank_run()
    if "--skip-sweeps" not in sys.argv:
        freeze_sweeps()
