"""Exception types raised across the package.

Every error carries a short machine-readable ``code`` so the CLI can emit
structured error JSON without string matching.
"""


class RolePatchError(Exception):
    code = "error"

    def to_dict(self) -> dict:
        return {"error": self.code, "message": str(self)}


# tokenizer
class FileMissing(RolePatchError):
    code = "file_missing"


class MalformedVocab(RolePatchError):
    code = "malformed_vocab"


class MalformedMerges(RolePatchError):
    code = "malformed_merges"


class OutOfVocabulary(RolePatchError):
    code = "out_of_vocabulary"


class NoSingleTokenForm(RolePatchError):
    code = "no_single_token_form"


# model
class InvalidConfig(RolePatchError):
    code = "invalid_config"


class SequenceTooLong(RolePatchError):
    code = "sequence_too_long"


class TokenOutOfRange(RolePatchError):
    code = "token_out_of_range"


class InvalidSite(RolePatchError):
    code = "invalid_site"


class MissingCacheEntry(RolePatchError):
    code = "missing_cache_entry"


class LengthMismatch(RolePatchError):
    code = "length_mismatch"


class MissingTensor(RolePatchError):
    code = "missing_tensor"


class ShapeMismatch(RolePatchError):
    code = "shape_mismatch"


class UnsupportedDtype(RolePatchError):
    code = "unsupported_dtype"


# prompts
class UnknownSlotWord(RolePatchError):
    code = "unknown_slot_word"


class MixedPolarity(RolePatchError):
    code = "mixed_polarity"


class TokenBudgetExceeded(RolePatchError):
    code = "token_budget_exceeded"


class MissingLabel(RolePatchError):
    code = "missing_label"


# patching / ablation
class DegenerateBaseline(RolePatchError):
    code = "degenerate_baseline"


class SlotNotAligned(RolePatchError):
    code = "slot_not_aligned"


class KTooLarge(RolePatchError):
    code = "k_too_large"


class EmptyReference(RolePatchError):
    code = "empty_reference"


class MissingMeans(RolePatchError):
    code = "missing_means"


# ranking / data
class UnknownQuery(RolePatchError):
    code = "unknown_query"


class MalformedRecord(RolePatchError):
    code = "malformed_record"


class InsufficientCandidates(RolePatchError):
    code = "insufficient_candidates"
