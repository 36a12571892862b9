"""Activation patching and head ablation for role prompts in LLM rerankers."""

__version__ = "0.1.0"

from .errors import RolePatchError
from .model import ActivationCache, ActivationSite, HookedTransformer, ModelConfig, PatchPlan, SiteKind
from .tokenizer import BPETokenizer, WhitespaceTokenizer, load_bpe, resolve_answer_tokens

__all__ = [
    "ActivationCache",
    "ActivationSite",
    "BPETokenizer",
    "HookedTransformer",
    "ModelConfig",
    "PatchPlan",
    "RolePatchError",
    "SiteKind",
    "WhitespaceTokenizer",
    "load_bpe",
    "resolve_answer_tokens",
]
