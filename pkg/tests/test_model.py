import json
import random

import numpy as np
import pytest

from conftest import FIXTURES
from reference_model import reference_forward
from rolepatch.errors import (
    InvalidConfig,
    InvalidSite,
    LengthMismatch,
    MissingCacheEntry,
    SequenceTooLong,
    TokenOutOfRange,
)
from rolepatch.model import (
    ActivationSite,
    ModelConfig,
    PatchPlan,
    SiteKind,
    all_sites,
    attn_out,
    head_site,
    make_toy_model,
    mlp_out,
    resid_pre,
)
from rolepatch.selfcheck import bias_only_attention, head_decomposition_error

TOY = json.loads((FIXTURES / "toy_forward.json").read_text())
VARIANTS = [
    {},
    {"norm_kind": "rmsnorm"},
    {"pos_kind": "rotary"},
    {"activation": "silu"},
    {"norm_kind": "rmsnorm", "pos_kind": "rotary", "activation": "silu"},
]


@pytest.mark.parametrize("case", TOY, ids=lambda c: json.dumps(c["config"]))
def test_forward_matches_frozen_reference(case):
    model = make_toy_model(ModelConfig(**case["config"]), case["seed"])
    got = model.forward(case["tokens"], all_positions=True)
    np.testing.assert_allclose(got, np.array(case["logits"]), atol=1e-5, rtol=0)


@pytest.mark.parametrize("variant", VARIANTS, ids=lambda v: json.dumps(v))
def test_forward_matches_reference_all_variants(variant):
    cfg = ModelConfig(n_layers=2, n_heads=3, d_model=12, d_head=4, d_mlp=24, vocab_size=20, **variant)
    model = make_toy_model(cfg, 3)
    toks = [4, 19, 0, 7, 7, 11]
    ref, _ = reference_forward(cfg, model.w, toks)
    assert np.abs(model.forward(toks, all_positions=True) - ref).max() <= 1e-5


def test_forward_sensitive_to_order_and_seed():
    cfg = ModelConfig()
    m = make_toy_model(cfg, 42)
    assert not np.array_equal(m.forward([1, 2, 3]), m.forward([3, 2, 1]))
    assert not np.array_equal(m.forward([1, 2, 3]), make_toy_model(cfg, 43).forward([1, 2, 3]))
    assert np.array_equal(m.forward([1, 2, 3]), make_toy_model(cfg, 42).forward([1, 2, 3]))


def test_config_validation(tmp_path):
    with pytest.raises(InvalidConfig):
        ModelConfig(d_model=8, n_heads=3, d_head=4)
    with pytest.raises(InvalidConfig):
        ModelConfig(norm_kind="batchnorm")
    with pytest.raises(InvalidConfig):
        ModelConfig(pos_kind="rotary", d_head=3, n_heads=2, d_model=6)
    p = tmp_path / "m.yaml"
    p.write_text("n_layers: 3\nvocab_size: 30\n")
    cfg = ModelConfig.from_file(p)
    assert (cfg.n_layers, cfg.vocab_size) == (3, 30)
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


def test_input_errors():
    m = make_toy_model(ModelConfig(max_seq=8), 0)
    with pytest.raises(SequenceTooLong):
        m.forward(list(range(9)))
    with pytest.raises(TokenOutOfRange):
        m.forward([16])
    with pytest.raises(TokenOutOfRange):
        m.forward([-1])
    with pytest.raises(TokenOutOfRange):
        m.forward([])


def test_site_validation():
    cfg = ModelConfig()
    with pytest.raises(InvalidSite):
        resid_pre(2, [0]).validate(cfg, 3)
    with pytest.raises(InvalidSite):
        head_site(0, 2, [0]).validate(cfg, 3)
    with pytest.raises(InvalidSite):
        attn_out(0, [3]).validate(cfg, 3)
    m = make_toy_model(cfg, 0)
    with pytest.raises(InvalidSite):
        m.run_with_cache([1, 2, 3], [mlp_out(5, [0])])


def test_cache_lookup_and_missing():
    m = make_toy_model(ModelConfig(), 0)
    _, cache = m.run_with_cache([1, 2, 3], [resid_pre(1, [0, 1, 2])])
    assert cache.get(resid_pre(1, [2])).shape == (1, 8)
    with pytest.raises(MissingCacheEntry):
        cache.get(attn_out(1, [0]))
    with pytest.raises(MissingCacheEntry):
        m.run_with_patch([1, 2, 3], PatchPlan([mlp_out(0, [0])], cache))
    with pytest.raises(LengthMismatch):
        m.run_with_patch([1, 2, 3, 4], PatchPlan([resid_pre(1, [0])], cache))


@pytest.mark.parametrize("variant", VARIANTS, ids=lambda v: json.dumps(v))
def test_identity_patching_bitwise(variant):
    m = make_toy_model(ModelConfig(**variant), 5)
    rng = random.Random(1)
    for _ in range(10):
        toks = [rng.randrange(16) for _ in range(rng.randint(1, 12))]
        sites = all_sites(m.cfg, len(toks))
        chosen = rng.sample(sites, rng.randint(1, len(sites)))
        base, cache = m.run_with_cache(toks, chosen)
        assert np.array_equal(m.run_with_patch(toks, PatchPlan(chosen, cache)), base)
        assert np.array_equal(m.forward(toks), base)


def test_patch_transplants_downstream():
    m = make_toy_model(ModelConfig(), 5)
    a, b = [1, 2, 3, 4], [5, 6, 7, 8]
    full = [resid_pre(0, range(4))]
    _, cache = m.run_with_cache(a, full)
    assert np.array_equal(m.run_with_patch(b, PatchPlan(full, cache)), m.forward(a))
    # patching the last layer's three sites at the final token reproduces the final logits
    L = m.cfg.n_layers - 1
    last = [resid_pre(L, [3]), attn_out(L, [3]), mlp_out(L, [3])]
    _, cache = m.run_with_cache(a, last)
    np.testing.assert_allclose(m.run_with_patch(b, PatchPlan(last, cache)), m.forward(a), atol=1e-5)


def test_head_patch_matches_reference():
    cfg = ModelConfig(n_layers=2, n_heads=2)
    m = make_toy_model(cfg, 9)
    clean, corr = [1, 2, 3, 4, 5], [1, 9, 3, 4, 5]
    site = head_site(1, 0, [4])
    _, cache = m.run_with_cache(clean, [site])
    got = m.run_with_patch(corr, PatchPlan([site], cache))
    _, inter = reference_forward(cfg, m.w, clean)
    ref, _ = reference_forward(cfg, m.w, corr, {("head", 1, 0): ([4], inter[("head", 1, 0)][[4]])})
    assert np.abs(got - ref[-1]).max() <= 1e-5


@pytest.mark.parametrize("variant", VARIANTS, ids=lambda v: json.dumps(v))
def test_head_decomposition(variant):
    m = make_toy_model(ModelConfig(**variant), 2)
    assert head_decomposition_error(m, [3, 1, 4, 1, 5, 9, 2, 6]) <= 1e-4


def test_causality_prefix():
    m = make_toy_model(ModelConfig(pos_kind="rotary"), 4)
    toks = [3, 1, 4, 1, 5, 9, 2, 6, 5, 3]
    full = m.forward(toks, all_positions=True)
    pre = m.forward(toks[:6], all_positions=True)
    assert np.abs(full[:6] - pre).max() <= 1e-5


def test_zero_ablation_equals_bias_only_model():
    m = make_toy_model(ModelConfig(n_layers=3, n_heads=4, d_model=16), 8)
    toks = [1, 5, 2, 7, 3]
    zeros = {(l, h): np.zeros(16, dtype=np.float32) for l in range(3) for h in range(4)}
    got = m.run_with_ablation(toks, zeros)
    assert np.abs(got - bias_only_attention(m).forward(toks)).max() <= 1e-5


def test_weights_read_only_and_param_count():
    m = make_toy_model(ModelConfig(), 0)
    with pytest.raises(ValueError):
        m.w["W_E"][0, 0] = 1.0
    cfg = m.cfg
    per_layer = (2 * cfg.d_model * 2 + 3 * cfg.n_heads * cfg.d_head * (cfg.d_model + 1)
                 + cfg.n_heads * cfg.d_head * cfg.d_model + cfg.d_model
                 + cfg.d_model * cfg.d_mlp + cfg.d_mlp + cfg.d_mlp * cfg.d_model + cfg.d_model)
    expected = (cfg.vocab_size * cfg.d_model + cfg.max_seq * cfg.d_model + cfg.n_layers * per_layer
                + 2 * cfg.d_model + cfg.d_model * cfg.vocab_size)
    assert m.n_params() == expected


def test_site_address():
    s = ActivationSite(SiteKind.HEAD, 1, 0, (2, 3))
    assert s.address == (SiteKind.HEAD, 1, 0)
