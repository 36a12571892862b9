"""Command-line entry point: ``rolepatch <command> [--config FILE] [overrides]``."""

from __future__ import annotations

import argparse
import json
import os
import platform
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .ablation import (
    AblationMode,
    HeadSelection,
    ablation_report,
    compute_head_means,
    load_selections,
    mix_selection,
    select_top_heads,
    write_selections,
)
from .config import ExperimentConfig
from .dataset import ingest_dataset, load_dataset, write_samples
from .errors import KTooLarge, RolePatchError
from .heatmap import write_svg
from .patching import ScoreGrid, sweep_heads, sweep_residual, sweep_slot_tokens
from .prompts import (
    NEGATIVE,
    POSITIVE,
    SWEEP_SEGMENTS,
    build_prompt,
    check_token_alignment,
    enumerate_roles,
    filter_lexicon,
    lexicon_alignment,
    make_counter_pairs,
    write_prompt_dump,
)
from .ranking import sweep_role_prompts, write_qrels, write_run
from .selfcheck import run_selfcheck
from .tokenizer import resolve_answer_tokens


class Session:
    """Resolved config plus the objects every command needs."""

    def __init__(self, cfg: ExperimentConfig, command: str):
        self.cfg = cfg
        self.command = command
        self.hash = cfg.hash()
        self.out = Path(cfg.out) / command
        self.out.mkdir(parents=True, exist_ok=True)
        self.t0 = time.perf_counter()
        self.artifacts: list[str] = []
        self.tokenizer = cfg.build_tokenizer()
        self.answers = resolve_answer_tokens(self.tokenizer)
        self._model = None

    @property
    def model(self):
        if self._model is None:
            self._model = self.cfg.build_model(self.tokenizer)
        return self._model

    def lexicon(self):
        lex, excluded = filter_lexicon(self.tokenizer, self.cfg.load_lexicon())
        return lex, excluded

    def pairs(self):
        lex, _ = self.lexicon()
        return make_counter_pairs(self.cfg.pair_seed, lex, self.cfg.n_pairs)

    def samples(self):
        return ingest_dataset(self.cfg.dataset_path(), self.cfg.mode, self.cfg.sample_seed, self.cfg.n_samples)

    def write_json(self, name: str, obj) -> Path:
        p = self.out / name
        p.write_text(json.dumps({"config_hash": self.hash, **obj} if isinstance(obj, dict) else obj,
                                indent=1, sort_keys=True, ensure_ascii=False) + "\n")
        self.artifacts.append(name)
        return p

    def write_grid(self, grid: ScoreGrid, stem: str, vlim: float = 1.0, title: str = "") -> None:
        paths = grid.write(self.out, stem, self.hash)
        write_svg(grid, self.out / f"{stem}.svg", vlim, title or stem, self.hash)
        self.artifacts += [p.name for p in paths.values()] + [f"{stem}.svg"]

    def manifest(self, exclusions: int = 0, extra: dict | None = None) -> None:
        import yaml

        man = {
            "command": self.command,
            "config_hash": self.hash,
            "config": self.cfg.to_dict(),
            "versions": {"rolepatch": __version__, "numpy": np.__version__, "python": platform.python_version(),
                         "yaml": yaml.__version__},
            "answer_tokens": {"yes_id": self.answers.yes_id, "no_id": self.answers.no_id,
                              "surface_forms": self.answers.surface_forms},
            "runtime_seconds": round(time.perf_counter() - self.t0, 3),
            "exclusions": exclusions,
            "artifacts": sorted(self.artifacts),
            **(extra or {}),
        }
        (self.out / "manifest.json").write_text(json.dumps(man, indent=1, sort_keys=True) + "\n")


def cmd_gen_prompts(s: Session, args) -> int:
    cfg = s.cfg
    lex, excluded = s.lexicon()
    roles = {p: enumerate_roles(p, cfg.load_lexicon()) for p in (POSITIVE, NEGATIVE)}
    with open(s.out / "roles.jsonl", "w") as f:
        for p in (POSITIVE, NEGATIVE):
            for r in roles[p]:
                f.write(json.dumps({"config_hash": s.hash, **r.to_dict()}) + "\n")
    s.artifacts.append("roles.jsonl")
    pairs = s.pairs()
    s.write_json("pairs.json", {"seed": cfg.pair_seed, "pairs": [p.to_dict() for p in pairs]})
    report = lexicon_alignment(s.tokenizer, cfg.load_lexicon(), cfg.mode)
    s.write_json("alignment.json", {"tokenizer": s.tokenizer.kind, "report": report.to_dict(), "excluded_words": excluded})

    samples = s.samples()
    write_samples(samples, s.out / "samples.jsonl", s.hash)
    s.artifacts.append("samples.jsonl")
    order = cfg.segment_order()
    prompts = []
    for pair in pairs:
        for smp in samples:
            for role in (pair.clean, pair.corrupted):
                prompts.append(build_prompt(cfg.mode, role, smp.query, smp.candidates, s.tokenizer, order=order,
                                            doc_budget=cfg.doc_budget))
    write_prompt_dump(prompts, s.out / "prompts.jsonl", s.hash)
    s.artifacts.append("prompts.jsonl")
    pair_report = check_token_alignment(prompts)
    s.manifest(extra={"n_roles": {p: len(v) for p, v in roles.items()}, "n_pairs": len(pairs),
                      "alignment_passed": report.passed, "pair_prompts_aligned": pair_report.passed})
    print(f"{len(roles[POSITIVE])} positive + {len(roles[NEGATIVE])} negative roles, {len(pairs)} pairs, "
          f"alignment {'pass' if report.passed else 'FAIL'} -> {s.out}")
    return 0


def cmd_rank(s: Session, args) -> int:
    cfg = s.cfg
    lex, _ = s.lexicon()
    roles = []
    for p in (POSITIVE, NEGATIVE):
        rs = enumerate_roles(p, lex)
        roles += rs if cfg.rank_roles is None else rs[: cfg.rank_roles]
    queries = load_dataset(cfg.dataset_path())[: cfg.rank_queries]
    qrels = {q.query_id: {d.doc_id: d.label for d in q.docs} for q in queries}
    results, summary = sweep_role_prompts(s.model, s.tokenizer, roles, queries, cfg.mode, 10, qrels, s.answers,
                                          cfg.segment_order(), cfg.workers)
    runs_dir = s.out / "runs"
    runs_dir.mkdir(exist_ok=True)
    lines = [f"# config_hash={s.hash}", "index,polarity,ndcg@10,role"]
    for i, r in enumerate(results):
        name = "baseline" if r.polarity == "none" else f"role_{i:03d}"
        # the run tag is the only free field in a TREC line, so it carries the hash
        write_run(r.runs, runs_dir / f"{name}.trec", tag=f"{name}.{s.hash}")
        lines.append(f"{name},{r.polarity},{r.mean!r},\"{r.name}\"")
    (s.out / "rank_results.csv").write_text("\n".join(lines) + "\n")
    write_qrels(qrels, s.out / "qrels.trec")
    s.artifacts += ["rank_results.csv", "qrels.trec", "runs/"]
    s.write_json("rank_summary.json", {"summary": summary, "n_queries": len(queries)})
    s.manifest()
    for pol, v in summary.items():
        print(f"{pol}: n={v['n']} min={v['min']:.4f} max={v['max']:.4f} mean={v['mean']:.4f}")
    return 0


def cmd_patch_sweep(s: Session, args) -> int:
    cfg = s.cfg
    grid = sweep_residual(s.model, s.tokenizer, s.pairs(), s.samples(), SWEEP_SEGMENTS, cfg.segment_order(), cfg.mode,
                          args.kind, cfg.workers, cfg.eps, s.answers)
    order_name = cfg.order if isinstance(cfg.order, str) else "custom"
    stem = f"{args.kind}_{cfg.mode}_{order_name}"
    vlim = 1.0 if args.kind == "resid_pre" else 0.2
    s.write_grid(grid, stem, vlim, f"{args.kind} patching ({cfg.mode}, order={order_name})")
    s.manifest(grid.exclusions)
    print(grid.to_csv(), end="")
    return 0


def _head_grids(s: Session, segments) -> dict[str, ScoreGrid]:
    cfg = s.cfg
    pairs, samples = s.pairs(), s.samples()
    grids = {}
    for seg in segments:
        grids[seg] = sweep_heads(s.model, s.tokenizer, pairs, samples, seg, cfg.segment_order(), cfg.mode,
                                 cfg.workers, cfg.eps, s.answers)
    return grids


def cmd_head_sweep(s: Session, args) -> int:
    grids = _head_grids(s, args.segment or SWEEP_SEGMENTS)
    sels = []
    for seg, grid in grids.items():
        s.write_grid(grid, f"heads_{seg}", 0.2, f"head patching at {seg}")
        k = min(max(int(k) for k in s.cfg.k), grid.values.size)
        sels.append(select_top_heads(grid, k, seg))
    if len(grids) > 1:
        sels.append(mix_selection(grids, k))
    write_selections(sels, s.out / "head_selection.json", s.hash)
    s.artifacts.append("head_selection.json")
    s.manifest(sum(g.exclusions for g in grids.values()))
    for sel in sels:
        top = ", ".join(f"L{l}H{h} ({v:.4f})" for l, h, v in sel.heads[:3])
        print(f"{sel.segment}: {top}")
    return 0


def cmd_slot_sweep(s: Session, args) -> int:
    cfg = s.cfg
    grid = sweep_slot_tokens(s.model, s.tokenizer, s.pairs(), s.samples(), cfg.segment_order(), cfg.mode,
                             cfg.workers, cfg.eps, s.answers)
    s.write_grid(grid, f"slots_{cfg.mode}", 1.0, "role-token patching")
    s.manifest(grid.exclusions)
    print(grid.to_csv(), end="")
    return 0


def cmd_ablate(s: Session, args) -> int:
    cfg = s.cfg
    pairs, samples = s.pairs(), s.samples()
    model = s.model
    exclusions = 0
    if args.selections:
        pooled = list(load_selections(args.selections).values())
    else:
        grids = _head_grids(s, SWEEP_SEGMENTS)
        exclusions = sum(g.exclusions for g in grids.values())
        kmax = max(int(k) for k in cfg.k)
        pooled = [select_top_heads(g, kmax, seg) for seg, g in grids.items()] + [mix_selection(grids, kmax)]
    # rankings are prefix-stable, so every k is a prefix of the longest list
    short = [sel.name for sel in pooled if sel.k < max(int(k) for k in cfg.k)]
    if short:
        raise KTooLarge(f"selections {short} have fewer heads than k={max(cfg.k)}")
    selections = [HeadSelection(sel.segment, sel.heads[: int(k)]) for k in sorted(cfg.k) for sel in pooled]
    write_selections(pooled, s.out / "head_selection.json", s.hash)
    s.artifacts.append("head_selection.json")

    roles = [p.clean for p in pairs] + [p.corrupted for p in pairs]
    if cfg.ablation == "mean":
        order = cfg.segment_order()
        ref = [build_prompt(cfg.mode, r, smp.query, smp.candidates, s.tokenizer, order=order).token_ids
               for r in roles for smp in samples]
        mode = AblationMode("mean", compute_head_means(model, ref), reference="evaluation samples, unablated")
    else:
        mode = AblationMode("zero")
    queries = None
    if cfg.mode == "pointwise" and cfg.rerank_queries > 0:
        by_id = {q.query_id: q for q in load_dataset(cfg.dataset_path())}
        seen = []
        for smp in samples:
            if smp.query_id not in seen:
                seen.append(smp.query_id)
        queries = [by_id[q] for q in seen[: cfg.rerank_queries]]
    report = ablation_report(model, s.tokenizer, samples, selections, [mode], roles, cfg.mode, cfg.segment_order(),
                             s.answers, cfg.workers, queries)
    paths = report.write(s.out, "ablation", s.hash)
    s.artifacts += [p.name for p in paths.values()]
    s.manifest(exclusions)
    for r in report.get(doc_type="all", metric="correct_score"):
        print(f"{r['segment']:>11} k={r['k']:<2} {r['polarity']:<8} delta={r['delta']:+.4f}")
    return 0


def cmd_selfcheck(s: Session, args) -> int:
    results = run_selfcheck(s.model, s.tokenizer, s.cfg.dataset_path(), s.cfg.mode, s.cfg.sample_seed)
    ok = all(r.passed for r in results)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:<26} {r.detail}  ({r.seconds:.2f}s)")
    s.write_json("selfcheck.json", {"passed": ok, "checks": [r.__dict__ for r in results]})
    s.manifest(extra={"passed": ok})
    return 0 if ok else 1


COMMANDS = {
    "gen-prompts": cmd_gen_prompts,
    "rank": cmd_rank,
    "patch-sweep": cmd_patch_sweep,
    "head-sweep": cmd_head_sweep,
    "slot-sweep": cmd_slot_sweep,
    "ablate": cmd_ablate,
    "selfcheck": cmd_selfcheck,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML experiment config")
    common.add_argument("--out", help="output directory (overrides ROLEPATCH_OUT and the config)")
    common.add_argument("--workers", type=int)
    common.add_argument("--seed", type=int, help="seed for counter-pairs and sample selection")
    common.add_argument("--mode", choices=["pointwise", "pairwise"])
    common.add_argument("--order", help="default | query-first | role-late")
    common.add_argument("--k", type=int, nargs="+", help="top-k head counts")
    abl = common.add_mutually_exclusive_group()
    abl.add_argument("--mean", dest="ablation", action="store_const", const="mean")
    abl.add_argument("--zero", dest="ablation", action="store_const", const="zero")

    parser = argparse.ArgumentParser(prog="rolepatch", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-prompts", parents=[common], help="role sentences, counter-pairs, alignment report")
    p = sub.add_parser("rank", parents=[common], help="nDCG@10 for every role prompt and the no-role baseline")
    p.add_argument("--roles", type=int, dest="rank_roles", help="roles per polarity (default: all)")
    p.add_argument("--queries", type=int, dest="rank_queries", help="number of queries to rerank")
    p = sub.add_parser("patch-sweep", parents=[common], help="layer x segment patching grid")
    p.add_argument("--kind", default="resid_pre", choices=["resid_pre", "attn_out", "mlp_out"])
    p = sub.add_parser("head-sweep", parents=[common], help="layer x head patching grids")
    p.add_argument("--segment", action="append", choices=list(SWEEP_SEGMENTS))
    sub.add_parser("slot-sweep", parents=[common], help="layer x role-slot patching grid")
    p = sub.add_parser("ablate", parents=[common], help="top-k head ablation report")
    p.add_argument("--selections", help="head-selection JSON to use instead of running head sweeps")
    sub.add_parser("selfcheck", parents=[common], help="run invariant checks on the configured model")
    return parser


def resolve_config(args) -> ExperimentConfig:
    overrides = {"workers": args.workers, "mode": args.mode, "order": args.order, "k": args.k,
                 "ablation": args.ablation}
    for key in ("rank_roles", "rank_queries"):
        if getattr(args, key, None) is not None:
            overrides[key] = getattr(args, key)
    if args.seed is not None:
        overrides["pair_seed"] = overrides["sample_seed"] = args.seed
    cfg = ExperimentConfig.load(args.config, **overrides)
    if os.environ.get("ROLEPATCH_OUT"):
        cfg.out = os.environ["ROLEPATCH_OUT"]
    if args.out:
        cfg.out = args.out
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        session = Session(cfg, args.command)
        return COMMANDS[args.command](session, args)
    except (RolePatchError, ValueError, FileNotFoundError) as e:
        err = e.to_dict() if isinstance(e, RolePatchError) else {"error": type(e).__name__, "message": str(e)}
        print(json.dumps(err), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
