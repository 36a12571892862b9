import sys
from pathlib import Path

import pytest

HERE = Path(__file__).parent
FIXTURES = HERE / "fixtures"
sys.path.insert(0, str(HERE / "oracles"))


@pytest.fixture(scope="session")
def gpt2_tok():
    from rolepatch.tokenizer import load_bpe

    return load_bpe(FIXTURES / "gpt2" / "vocab.json", FIXTURES / "gpt2" / "merges.txt")


class ToySetup:
    def __init__(self):
        from rolepatch.config import ExperimentConfig
        from rolepatch.dataset import ingest_dataset
        from rolepatch.prompts import filter_lexicon, make_counter_pairs
        from rolepatch.tokenizer import resolve_answer_tokens

        self.cfg = ExperimentConfig()
        self.tok = self.cfg.build_tokenizer()
        self.model = self.cfg.build_model(self.tok)
        lex, _ = filter_lexicon(self.tok, self.cfg.load_lexicon())
        self.pairs = make_counter_pairs(self.cfg.pair_seed, lex, self.cfg.n_pairs)
        self.samples = ingest_dataset(self.cfg.dataset_path(), "pointwise", 0, 100)
        self.pair_samples = ingest_dataset(self.cfg.dataset_path(), "pairwise", 0, 100)
        self.answers = resolve_answer_tokens(self.tok)


@pytest.fixture(scope="session")
def toy():
    """Default experiment config: toy whitespace tokenizer, 4x4 toy model, 10 pairs, 100 samples."""
    return ToySetup()


@pytest.fixture(scope="session")
def random_gpt2_dir(tmp_path_factory):
    """A GPT-2-small-shaped checkpoint with random weights, written by transformers."""
    torch = pytest.importorskip("torch")
    transformers = pytest.importorskip("transformers")
    torch.manual_seed(0)
    model = transformers.GPT2LMHeadModel(transformers.GPT2Config(initializer_range=0.1))
    model.eval()
    out = tmp_path_factory.mktemp("gpt2rand")
    model.save_pretrained(out, safe_serialization=True)
    return out


# acceptance criteria outcomes, printed once at the end of the run
ACCEPTANCE: dict[str, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(ACCEPTANCE, key=lambda c: int(c[1:])):
        ok, detail = ACCEPTANCE[cid]
        terminalreporter.write_line(f"{cid} {'PASS' if ok else 'FAIL'}  {detail}")
