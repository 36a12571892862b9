"""Load GPT-2-family safetensors checkpoints into a HookedTransformer.

Expected tensor names (an optional ``transformer.`` prefix is stripped)::

    wte.weight                 (vocab, d_model)
    wpe.weight                 (n_ctx, d_model)
    h.{i}.ln_1.weight/.bias    (d_model,)
    h.{i}.attn.c_attn.weight   (d_model, 3*d_model)   fused QKV, Conv1D layout
    h.{i}.attn.c_attn.bias     (3*d_model,)
    h.{i}.attn.c_proj.weight   (d_model, d_model)
    h.{i}.attn.c_proj.bias     (d_model,)
    h.{i}.ln_2.weight/.bias    (d_model,)
    h.{i}.mlp.c_fc.weight      (d_model, d_mlp)
    h.{i}.mlp.c_fc.bias        (d_mlp,)
    h.{i}.mlp.c_proj.weight    (d_mlp, d_model)
    h.{i}.mlp.c_proj.bias      (d_model,)
    ln_f.weight/.bias          (d_model,)
    lm_head.weight             (vocab, d_model)        optional; tied to wte when absent

16-bit floats are upcast to float32.
"""

from __future__ import annotations

import json
import re
from pathlib import Path

import numpy as np

from .errors import FileMissing, MissingTensor, ShapeMismatch, UnsupportedDtype
from .model import DTYPE, HookedTransformer, ModelConfig

_FLOAT_DTYPES = {"F32", "F16", "F64"}


def _read_safetensors(path: Path) -> dict[str, np.ndarray]:
    # header check first so bf16/int payloads give a typed error
    with open(path, "rb") as f:
        n = int.from_bytes(f.read(8), "little")
        header = json.loads(f.read(n))
    for name, meta in header.items():
        if name == "__metadata__":
            continue
        if meta["dtype"] not in _FLOAT_DTYPES:
            raise UnsupportedDtype(f"{name}: dtype {meta['dtype']} not supported (need F32/F16)")
    from safetensors.numpy import load_file

    return load_file(str(path))


def config_from_hf(path: str | Path, max_seq: int | None = None) -> ModelConfig:
    """Build a ModelConfig from a Hugging Face GPT-2 ``config.json``."""
    d = json.loads(Path(path).read_text())
    n_embd, n_head = d["n_embd"], d["n_head"]
    return ModelConfig(
        n_layers=d["n_layer"],
        n_heads=n_head,
        d_model=n_embd,
        d_head=n_embd // n_head,
        d_mlp=d.get("n_inner") or 4 * n_embd,
        vocab_size=d["vocab_size"],
        max_seq=max_seq or d["n_positions"],
        norm_kind="layernorm",
        pos_kind="learned",
        activation="gelu",
        norm_eps=d.get("layer_norm_epsilon", 1e-5),
    )


def load_gpt2_checkpoint(path: str | Path, config: ModelConfig | None = None) -> HookedTransformer:
    path = Path(path)
    files = sorted(path.glob("*.safetensors")) if path.is_dir() else [path]
    if not files or not all(f.is_file() for f in files):
        raise FileMissing(f"no safetensors file under {path}")
    if config is None:
        cfg_file = path / "config.json"
        if not cfg_file.is_file():
            raise FileMissing(f"no config given and {cfg_file} missing")
        config = config_from_hf(cfg_file)

    raw: dict[str, np.ndarray] = {}
    for f in files:
        for k, v in _read_safetensors(f).items():
            raw[k.removeprefix("transformer.")] = v

    layers_present = {int(m.group(1)) for k in raw if (m := re.match(r"h\.(\d+)\.", k))}
    n_ckpt = max(layers_present) + 1 if layers_present else 0
    if n_ckpt != config.n_layers:
        raise ShapeMismatch(f"checkpoint has {n_ckpt} layers, config says {config.n_layers}")

    def get(name: str, shape: tuple[int, ...]) -> np.ndarray:
        if name not in raw:
            raise MissingTensor(name)
        arr = raw[name]
        if tuple(arr.shape) != shape:
            raise ShapeMismatch(f"{name}: expected {shape}, got {tuple(arr.shape)}")
        return arr.astype(DTYPE)

    c = config
    d, h, dh, m, v = c.d_model, c.n_heads, c.d_head, c.d_mlp, c.vocab_size
    wte = get("wte.weight", (v, d))
    wpe = raw.get("wpe.weight")
    if wpe is None:
        raise MissingTensor("wpe.weight")
    if wpe.shape[1] != d or wpe.shape[0] < c.max_seq:
        raise ShapeMismatch(f"wpe.weight: expected (>= {c.max_seq}, {d}), got {tuple(wpe.shape)}")

    w: dict[str, np.ndarray] = {"W_E": wte, "W_pos": wpe[: c.max_seq].astype(DTYPE)}
    for i in range(c.n_layers):
        src, dst = f"h.{i}.", f"blocks.{i}."
        w[dst + "ln1_w"] = get(src + "ln_1.weight", (d,))
        w[dst + "ln1_b"] = get(src + "ln_1.bias", (d,))
        qkv_w = get(src + "attn.c_attn.weight", (d, 3 * d))
        qkv_b = get(src + "attn.c_attn.bias", (3 * d,))
        for j, name in enumerate("QKV"):
            wj = qkv_w[:, j * d : (j + 1) * d]  # (d_model, n_heads*d_head)
            w[dst + "W_" + name] = np.ascontiguousarray(wj.reshape(d, h, dh).transpose(1, 0, 2))
            w[dst + "b_" + name] = qkv_b[j * d : (j + 1) * d].reshape(h, dh)
        w[dst + "W_O"] = get(src + "attn.c_proj.weight", (d, d)).reshape(h, dh, d)
        w[dst + "b_O"] = get(src + "attn.c_proj.bias", (d,))
        w[dst + "ln2_w"] = get(src + "ln_2.weight", (d,))
        w[dst + "ln2_b"] = get(src + "ln_2.bias", (d,))
        w[dst + "W_in"] = get(src + "mlp.c_fc.weight", (d, m))
        w[dst + "b_in"] = get(src + "mlp.c_fc.bias", (m,))
        w[dst + "W_out"] = get(src + "mlp.c_proj.weight", (m, d))
        w[dst + "b_out"] = get(src + "mlp.c_proj.bias", (d,))
    w["ln_f_w"] = get("ln_f.weight", (d,))
    w["ln_f_b"] = get("ln_f.bias", (d,))
    tied = "lm_head.weight" not in raw
    if tied:
        w["W_U"] = np.ascontiguousarray(wte.T)
    else:
        w["W_U"] = np.ascontiguousarray(get("lm_head.weight", (v, d)).T)
    return HookedTransformer(config, w, tied_unembed=tied)


def find_gpt2_small() -> Path | None:
    """Locate a local GPT-2-small checkpoint: ``$ROLEPATCH_GPT2_DIR`` or the Hugging Face cache."""
    import os

    env = os.environ.get("ROLEPATCH_GPT2_DIR")
    if env and any(Path(env).glob("*.safetensors")):
        return Path(env)
    hub = Path(os.environ.get("HF_HOME", Path.home() / ".cache" / "huggingface")) / "hub"
    for repo in ("models--gpt2", "models--openai-community--gpt2"):
        for snap in sorted((hub / repo / "snapshots").glob("*")):
            if (snap / "model.safetensors").exists():
                return snap
    return None
