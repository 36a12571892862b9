"""Deterministic decoder-only transformer with named, patchable activation sites.

All math is float32 numpy on a single sequence. Every forward pass takes the
same code path whether or not anything is captured or patched, which is what
makes self-sourced patching bitwise-identical to an unpatched run.

Activation sites per layer:

* ``resid_pre``  residual stream entering the layer, before the first norm
* ``attn_out``   attention block output (sum of head contributions + output bias)
* ``mlp_out``    MLP block output
* ``head``       one head's post-output-projection write, shape (seq, d_model)
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import yaml

from .errors import (
    InvalidConfig,
    InvalidSite,
    LengthMismatch,
    MissingCacheEntry,
    SequenceTooLong,
    TokenOutOfRange,
)

DTYPE = np.float32


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 2
    n_heads: int = 2
    d_model: int = 8
    d_head: int = 4
    d_mlp: int = 32
    vocab_size: int = 16
    max_seq: int = 128
    norm_kind: str = "layernorm"  # or "rmsnorm"
    pos_kind: str = "learned"  # or "rotary"
    activation: str = "gelu"  # tanh-approximate GELU, or "silu"
    norm_eps: float = 1e-5
    rotary_base: float = 10000.0

    def __post_init__(self):
        for name in ("n_layers", "n_heads", "d_model", "d_head", "d_mlp", "vocab_size", "max_seq"):
            if getattr(self, name) < 1:
                raise InvalidConfig(f"{name} must be >= 1")
        if self.d_model != self.n_heads * self.d_head:
            raise InvalidConfig(f"d_model ({self.d_model}) != n_heads*d_head ({self.n_heads}*{self.d_head})")
        if self.norm_kind not in ("layernorm", "rmsnorm"):
            raise InvalidConfig(f"unknown norm_kind {self.norm_kind!r}")
        if self.pos_kind not in ("learned", "rotary"):
            raise InvalidConfig(f"unknown pos_kind {self.pos_kind!r}")
        if self.pos_kind == "rotary" and self.d_head % 2:
            raise InvalidConfig("rotary embeddings need an even d_head")
        if self.activation not in ("gelu", "silu"):
            raise InvalidConfig(f"unknown activation {self.activation!r}")
        if not self.norm_eps > 0:
            raise InvalidConfig("norm_eps must be positive")

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidConfig(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_file(cls, path: str | Path) -> "ModelConfig":
        return cls.from_dict(yaml.safe_load(Path(path).read_text()) or {})

    def to_dict(self) -> dict:
        return asdict(self)


class SiteKind(str, Enum):
    RESID_PRE = "resid_pre"
    ATTN_OUT = "attn_out"
    MLP_OUT = "mlp_out"
    HEAD = "head"


@dataclass(frozen=True)
class ActivationSite:
    kind: SiteKind
    layer: int
    head: int | None = None
    positions: tuple[int, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "kind", SiteKind(self.kind))
        object.__setattr__(self, "positions", tuple(int(p) for p in self.positions))

    @property
    def address(self) -> tuple[SiteKind, int, int | None]:
        return (self.kind, self.layer, self.head)

    def validate(self, cfg: ModelConfig, seq_len: int) -> None:
        if not 0 <= self.layer < cfg.n_layers:
            raise InvalidSite(f"layer {self.layer} out of range [0, {cfg.n_layers})")
        if self.kind is SiteKind.HEAD:
            if self.head is None or not 0 <= self.head < cfg.n_heads:
                raise InvalidSite(f"head site needs head in [0, {cfg.n_heads}), got {self.head}")
        elif self.head is not None:
            raise InvalidSite(f"{self.kind.value} site must not name a head")
        if len(set(self.positions)) != len(self.positions):
            raise InvalidSite("duplicate positions")
        for p in self.positions:
            if not 0 <= p < seq_len:
                raise InvalidSite(f"position {p} out of range [0, {seq_len})")


def resid_pre(layer: int, positions: Iterable[int]) -> ActivationSite:
    return ActivationSite(SiteKind.RESID_PRE, layer, None, tuple(positions))


def attn_out(layer: int, positions: Iterable[int]) -> ActivationSite:
    return ActivationSite(SiteKind.ATTN_OUT, layer, None, tuple(positions))


def mlp_out(layer: int, positions: Iterable[int]) -> ActivationSite:
    return ActivationSite(SiteKind.MLP_OUT, layer, None, tuple(positions))


def head_site(layer: int, head: int, positions: Iterable[int]) -> ActivationSite:
    return ActivationSite(SiteKind.HEAD, layer, head, tuple(positions))


@dataclass
class ActivationCache:
    """Captured activations for one (model, token sequence) pair."""

    tokens: tuple[int, ...]
    logits: np.ndarray
    entries: dict = field(default_factory=dict)  # address -> (positions, array[len(positions), d_model])

    def __len__(self) -> int:
        return len(self.entries)

    def sites(self) -> list[ActivationSite]:
        return [ActivationSite(a[0], a[1], a[2], pos) for a, (pos, _) in self.entries.items()]

    def get(self, site: ActivationSite) -> np.ndarray:
        """Rows for ``site.positions``; the stored site may cover a superset of them."""
        try:
            stored_pos, arr = self.entries[site.address]
        except KeyError:
            raise MissingCacheEntry(f"cache has no entry for {site.kind.value} layer={site.layer} head={site.head}") from None
        index = {p: i for i, p in enumerate(stored_pos)}
        try:
            rows = [index[p] for p in site.positions]
        except KeyError as e:
            raise MissingCacheEntry(f"position {e.args[0]} not cached for {site.kind.value} layer={site.layer}") from None
        return arr[rows]


@dataclass
class PatchPlan:
    sites: list[ActivationSite]
    source: ActivationCache


def _softmax_rows(x: np.ndarray) -> np.ndarray:
    x = x - x.max(axis=-1, keepdims=True)
    e = np.exp(x)
    return e / e.sum(axis=-1, keepdims=True)


def _gelu(x: np.ndarray) -> np.ndarray:
    c = DTYPE(math.sqrt(2.0 / math.pi))
    return DTYPE(0.5) * x * (DTYPE(1.0) + np.tanh(c * (x + DTYPE(0.044715) * x * x * x)))


def _silu(x: np.ndarray) -> np.ndarray:
    return x / (DTYPE(1.0) + np.exp(-x))


class HookedTransformer:
    """Decoder-only transformer; weights are a flat dict of float32 arrays.

    Per-layer tensor names (``blocks.{i}.`` prefix): ``ln1_w``, ``ln1_b``,
    ``W_Q``/``W_K``/``W_V`` (n_heads, d_model, d_head), ``b_Q``/``b_K``/``b_V``
    (n_heads, d_head), ``W_O`` (n_heads, d_head, d_model), ``b_O`` (d_model),
    ``ln2_w``, ``ln2_b``, ``W_in`` (d_model, d_mlp), ``b_in``, ``W_out``
    (d_mlp, d_model), ``b_out``. Globals: ``W_E``, ``W_pos`` (learned
    positions only), ``ln_f_w``, ``ln_f_b``, ``W_U`` (d_model, vocab), ``b_U``.
    RMSNorm models carry no ``*_b`` norm biases.
    """

    def __init__(self, cfg: ModelConfig, weights: Mapping[str, np.ndarray], tied_unembed: bool = False):
        self.cfg = cfg
        self.tied_unembed = tied_unembed
        self.w = {k: np.ascontiguousarray(v, dtype=DTYPE) for k, v in weights.items()}
        for v in self.w.values():
            v.setflags(write=False)
        if cfg.pos_kind == "rotary":
            half = cfg.d_head // 2
            inv = 1.0 / (cfg.rotary_base ** (np.arange(half, dtype=np.float64) / half))
            ang = np.arange(cfg.max_seq, dtype=np.float64)[:, None] * inv[None, :]
            self._cos = np.cos(ang).astype(DTYPE)
            self._sin = np.sin(ang).astype(DTYPE)

    def n_params(self) -> int:
        """Parameter count; a tied unembedding is counted once, with the embedding."""
        return int(sum(v.size for k, v in self.w.items() if not (k == "W_U" and self.tied_unembed)))

    # -- building blocks -------------------------------------------------

    def _norm(self, x: np.ndarray, prefix: str) -> np.ndarray:
        eps = DTYPE(self.cfg.norm_eps)
        if self.cfg.norm_kind == "layernorm":
            mu = x.mean(axis=-1, keepdims=True)
            xc = x - mu
            var = (xc * xc).mean(axis=-1, keepdims=True)
            return xc / np.sqrt(var + eps) * self.w[prefix + "_w"] + self.w[prefix + "_b"]
        ms = (x * x).mean(axis=-1, keepdims=True)
        return x / np.sqrt(ms + eps) * self.w[prefix + "_w"]

    def _rotate(self, x: np.ndarray, seq: int) -> np.ndarray:
        half = self.cfg.d_head // 2
        cos, sin = self._cos[:seq], self._sin[:seq]
        x1, x2 = x[..., :half], x[..., half:]
        return np.concatenate([x1 * cos - x2 * sin, x2 * cos + x1 * sin], axis=-1)

    def _heads(self, x: np.ndarray, layer: int) -> np.ndarray:
        """Per-head output-projected contributions, shape (n_heads, seq, d_model)."""
        p = f"blocks.{layer}."
        seq = x.shape[0]
        q = np.matmul(x, self.w[p + "W_Q"]) + self.w[p + "b_Q"][:, None, :]
        k = np.matmul(x, self.w[p + "W_K"]) + self.w[p + "b_K"][:, None, :]
        v = np.matmul(x, self.w[p + "W_V"]) + self.w[p + "b_V"][:, None, :]
        if self.cfg.pos_kind == "rotary":
            q, k = self._rotate(q, seq), self._rotate(k, seq)
        scores = np.matmul(q, k.transpose(0, 2, 1)) * DTYPE(1.0 / math.sqrt(self.cfg.d_head))
        mask = np.triu(np.ones((seq, seq), dtype=bool), k=1)
        scores = np.where(mask, DTYPE(-np.inf), scores)
        pattern = _softmax_rows(scores)
        z = np.matmul(pattern, v)
        return np.matmul(z, self.w[p + "W_O"])

    # -- core pass -------------------------------------------------------

    def check_tokens(self, tokens: Sequence[int]) -> np.ndarray:
        toks = np.asarray(tokens, dtype=np.int64).reshape(-1)
        if len(toks) == 0:
            raise TokenOutOfRange("empty token sequence")
        if len(toks) > self.cfg.max_seq:
            raise SequenceTooLong(f"{len(toks)} tokens > max_seq {self.cfg.max_seq}")
        if toks.min() < 0 or toks.max() >= self.cfg.vocab_size:
            raise TokenOutOfRange(f"token ids must lie in [0, {self.cfg.vocab_size})")
        return toks

    def _run(
        self,
        tokens: Sequence[int],
        capture: Sequence[ActivationSite] = (),
        patches: Sequence[tuple[ActivationSite, np.ndarray]] = (),
        head_replace: Mapping[tuple[int, int], np.ndarray] | None = None,
        all_positions: bool = False,
    ):
        """One forward pass.

        ``patches`` overwrite rows of a site with given values; ``head_replace``
        maps (layer, head) to a (d_model,) vector written at every position.
        """
        cfg = self.cfg
        toks = self.check_tokens(tokens)
        seq = len(toks)
        for s in capture:
            s.validate(cfg, seq)
        for s, _ in patches:
            s.validate(cfg, seq)

        want: dict[tuple, list[ActivationSite]] = {}
        for s in capture:
            want.setdefault(s.address, []).append(s)
        todo: dict[tuple, list[tuple[ActivationSite, np.ndarray]]] = {}
        for s, vals in patches:
            todo.setdefault(s.address, []).append((s, vals))
        head_replace = head_replace or {}
        cache: dict = {}

        def hook(x: np.ndarray, kind: SiteKind, layer: int, head: int | None = None) -> np.ndarray:
            addr = (kind, layer, head)
            for s, vals in todo.get(addr, ()):
                if s.positions:
                    x[list(s.positions)] = vals
            for s in want.get(addr, ()):
                cache[addr] = (s.positions, x[list(s.positions)].copy())
            return x

        resid = self.w["W_E"][toks].copy()
        if cfg.pos_kind == "learned":
            resid = resid + self.w["W_pos"][:seq]
        for layer in range(cfg.n_layers):
            p = f"blocks.{layer}."
            resid = hook(resid, SiteKind.RESID_PRE, layer)
            heads = self._heads(self._norm(resid, p + "ln1"), layer)
            for h in range(cfg.n_heads):
                if (layer, h) in head_replace:
                    heads[h] = head_replace[(layer, h)]
                hook(heads[h], SiteKind.HEAD, layer, h)
            # fixed summation order over heads
            attn = heads[0].copy()
            for h in range(1, cfg.n_heads):
                attn += heads[h]
            attn += self.w[p + "b_O"]
            attn = hook(attn, SiteKind.ATTN_OUT, layer)
            resid = resid + attn
            hidden = np.matmul(self._norm(resid, p + "ln2"), self.w[p + "W_in"]) + self.w[p + "b_in"]
            hidden = _gelu(hidden) if cfg.activation == "gelu" else _silu(hidden)
            mlp = np.matmul(hidden, self.w[p + "W_out"]) + self.w[p + "b_out"]
            mlp = hook(mlp, SiteKind.MLP_OUT, layer)
            resid = resid + mlp
        final = self._norm(resid if all_positions else resid[-1:], "ln_f")
        logits = np.matmul(final, self.w["W_U"])
        if "b_U" in self.w:
            logits = logits + self.w["b_U"]
        if not all_positions:
            logits = logits[0]
        return logits, cache

    # -- public surface --------------------------------------------------

    def forward(self, tokens: Sequence[int], all_positions: bool = False) -> np.ndarray:
        """Final-position logits (vocab_size,), or (seq, vocab_size) with ``all_positions``."""
        return self._run(tokens, all_positions=all_positions)[0]

    def run_with_cache(self, tokens: Sequence[int], sites: Sequence[ActivationSite]) -> tuple[np.ndarray, ActivationCache]:
        logits, entries = self._run(tokens, capture=sites)
        return logits, ActivationCache(tuple(int(t) for t in tokens), logits, entries)

    def run_with_patch(self, tokens: Sequence[int], plan: PatchPlan) -> np.ndarray:
        if len(tokens) != len(plan.source.tokens):
            raise LengthMismatch(f"target has {len(tokens)} tokens, source cache has {len(plan.source.tokens)}")
        patches = [(s, plan.source.get(s)) for s in plan.sites]
        return self._run(tokens, patches=patches)[0]

    def run_with_ablation(self, tokens: Sequence[int], head_replace: Mapping[tuple[int, int], np.ndarray]) -> np.ndarray:
        return self._run(tokens, head_replace=head_replace)[0]


def forward(model: HookedTransformer, tokens: Sequence[int]) -> np.ndarray:
    return model.forward(tokens)


def run_with_cache(model: HookedTransformer, tokens: Sequence[int], sites: Sequence[ActivationSite]):
    return model.run_with_cache(tokens, sites)


def run_with_patch(model: HookedTransformer, tokens: Sequence[int], plan: PatchPlan) -> np.ndarray:
    return model.run_with_patch(tokens, plan)


def all_sites(cfg: ModelConfig, seq_len: int, kinds: Iterable[SiteKind] = tuple(SiteKind)) -> list[ActivationSite]:
    """Every site of the given kinds at every position."""
    pos = tuple(range(seq_len))
    out = []
    for layer in range(cfg.n_layers):
        for kind in kinds:
            kind = SiteKind(kind)
            if kind is SiteKind.HEAD:
                out.extend(ActivationSite(kind, layer, h, pos) for h in range(cfg.n_heads))
            else:
                out.append(ActivationSite(kind, layer, None, pos))
    return out


def make_toy_model(cfg: ModelConfig, seed: int) -> HookedTransformer:
    """Random weights from a seeded generator; draw order is fixed so (cfg, seed) pins every bit."""
    rng = np.random.default_rng(seed)
    d, h, dh, m, v = cfg.d_model, cfg.n_heads, cfg.d_head, cfg.d_mlp, cfg.vocab_size

    def normal(shape, scale):
        return (rng.standard_normal(shape) * scale).astype(DTYPE)

    w: dict[str, np.ndarray] = {"W_E": normal((v, d), 1.0)}
    if cfg.pos_kind == "learned":
        w["W_pos"] = normal((cfg.max_seq, d), 0.5)
    for layer in range(cfg.n_layers):
        p = f"blocks.{layer}."
        w[p + "ln1_w"] = (1.0 + normal((d,), 0.1)).astype(DTYPE)
        if cfg.norm_kind == "layernorm":
            w[p + "ln1_b"] = normal((d,), 0.1)
        for name in ("Q", "K", "V"):
            w[p + "W_" + name] = normal((h, d, dh), 1.0 / math.sqrt(d))
            w[p + "b_" + name] = normal((h, dh), 0.1)
        w[p + "W_O"] = normal((h, dh, d), 1.0 / math.sqrt(dh * h))
        w[p + "b_O"] = normal((d,), 0.1)
        w[p + "ln2_w"] = (1.0 + normal((d,), 0.1)).astype(DTYPE)
        if cfg.norm_kind == "layernorm":
            w[p + "ln2_b"] = normal((d,), 0.1)
        w[p + "W_in"] = normal((d, m), 1.0 / math.sqrt(d))
        w[p + "b_in"] = normal((m,), 0.1)
        w[p + "W_out"] = normal((m, d), 1.0 / math.sqrt(m))
        w[p + "b_out"] = normal((d,), 0.1)
    w["ln_f_w"] = (1.0 + normal((d,), 0.1)).astype(DTYPE)
    if cfg.norm_kind == "layernorm":
        w["ln_f_b"] = normal((d,), 0.1)
    w["W_U"] = normal((d, v), 1.0 / math.sqrt(d))
    return HookedTransformer(cfg, w)
