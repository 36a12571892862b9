"""Experiment configuration: one YAML file plus command-line overrides."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .checkpoint import load_gpt2_checkpoint
from .dataset import load_dataset, toy_dataset_path, toy_vocab
from .errors import InvalidConfig
from .model import HookedTransformer, ModelConfig, make_toy_model
from .prompts import MODE_SEGMENTS, Lexicon, default_lexicon, named_order
from .tokenizer import Tokenizer, WhitespaceTokenizer, load_bpe, load_whitespace

DEFAULT_TOY_MODEL = {
    "n_layers": 4,
    "n_heads": 4,
    "d_model": 32,
    "d_head": 8,
    "d_mlp": 128,
    "max_seq": 160,
}

# fields that never change results, so they stay out of the hash
_UNHASHED = {"workers", "out"}


@dataclass
class ExperimentConfig:
    model: dict = field(default_factory=lambda: {"kind": "toy", "seed": 42, "config": dict(DEFAULT_TOY_MODEL)})
    tokenizer: dict = field(default_factory=lambda: {"kind": "toy"})
    dataset: str | None = None
    lexicon: str | None = None
    mode: str = "pointwise"
    order: str | list = "default"
    pair_seed: int = 0
    sample_seed: int = 0
    n_samples: int = 100
    n_pairs: int = 10
    k: list = field(default_factory=lambda: [1, 10])
    eps: float = 1e-6
    ablation: str = "mean"
    rank_roles: int | None = None  # roles per polarity for `rank`; None = all 300
    rank_queries: int = 100
    rerank_queries: int = 10  # queries reranked for the nDCG rows of `ablate`
    doc_budget: int = 220
    workers: int = 1
    out: str = "out"

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidConfig(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(**d)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str | Path | None = None, **overrides: Any) -> "ExperimentConfig":
        d = {}
        if path is not None:
            d = yaml.safe_load(Path(path).read_text()) or {}
        d.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_dict(d)

    def validate(self) -> None:
        if self.mode not in MODE_SEGMENTS:
            raise InvalidConfig(f"mode must be pointwise or pairwise, got {self.mode!r}")
        self.segment_order()
        if self.model.get("kind") not in ("toy", "checkpoint"):
            raise InvalidConfig("model.kind must be 'toy' or 'checkpoint'")
        if self.model["kind"] == "checkpoint" and not self.model.get("path"):
            raise InvalidConfig("checkpoint models need model.path")
        if self.tokenizer.get("kind") not in ("toy", "whitespace", "bpe"):
            raise InvalidConfig("tokenizer.kind must be toy, whitespace or bpe")
        if self.ablation not in ("mean", "zero"):
            raise InvalidConfig("ablation must be 'mean' or 'zero'")
        if self.n_samples < 2 or self.n_samples % 2:
            raise InvalidConfig("n_samples must be a positive even number")
        if any(int(k) < 1 for k in self.k):
            raise InvalidConfig("k values must be >= 1")
        if not self.eps > 0:
            raise InvalidConfig("eps must be positive")
        if self.rank_queries < 1 or (self.rank_roles is not None and self.rank_roles < 0):
            raise InvalidConfig("rank_queries must be >= 1 and rank_roles >= 0")
        if self.workers < 1:
            raise InvalidConfig("workers must be >= 1")

    def segment_order(self):
        if isinstance(self.order, str):
            try:
                return named_order(self.order, self.mode)
            except ValueError as e:
                raise InvalidConfig(str(e)) from None
        from .prompts import validate_order

        try:
            return validate_order(self.order, self.mode)
        except ValueError as e:
            raise InvalidConfig(str(e)) from None

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        d = {k: v for k, v in self.to_dict().items() if k not in _UNHASHED}
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"), default=str)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    # -- resource construction --------------------------------------------

    def dataset_path(self) -> Path:
        return Path(self.dataset) if self.dataset else toy_dataset_path()

    def load_lexicon(self) -> Lexicon:
        return Lexicon.load(self.lexicon) if self.lexicon else default_lexicon()

    def build_tokenizer(self) -> Tokenizer:
        t = self.tokenizer
        bos = t.get("bos_id")
        if t["kind"] == "bpe":
            return load_bpe(t["vocab"], t["merges"], bos_id=bos)
        if t["kind"] == "whitespace":
            return load_whitespace(t["vocab"], bos_id=bos)
        return WhitespaceTokenizer(toy_vocab(load_dataset(self.dataset_path()), self.load_lexicon()), bos_id=bos)

    def build_model(self, tokenizer: Tokenizer) -> HookedTransformer:
        m = self.model
        if m["kind"] == "checkpoint":
            cfg = ModelConfig.from_dict(m["config"]) if m.get("config") else None
            return load_gpt2_checkpoint(m["path"], cfg)
        d = dict(m.get("config") or DEFAULT_TOY_MODEL)
        if m.get("config_file"):
            d = ModelConfig.from_file(m["config_file"]).to_dict()
        d.setdefault("vocab_size", tokenizer.vocab_size)
        if d["vocab_size"] < tokenizer.vocab_size:
            raise InvalidConfig(f"model vocab_size {d['vocab_size']} < tokenizer vocab {tokenizer.vocab_size}")
        return make_toy_model(ModelConfig.from_dict(d), int(m.get("seed", 0)))
