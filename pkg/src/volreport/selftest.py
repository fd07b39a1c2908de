"""Fast built-in verification: gradient checks and identity suites.

Run from the CLI as ``volreport selftest``. Each check prints one line; the
suite fails loudly on the first broken invariant. This is a smoke screen,
not the full test suite.
"""

from __future__ import annotations

import numpy as np

from . import lm as lm_mod
from . import tensor as T
from .lm import LmConfig, init_adapters, init_lm_params, lm_forward
from .nifti import Volume, parse_nifti, write_nifti
from .tokenizer import build_vocab, decode, encode
from .vision import ImageContext, VisionConfig, encode_volume, init_vision_params


def _fd_scalar(fn, tensors, rng, h=1e-5, samples=3):
    """Max relative error between tape gradients and central differences."""
    with T.Tape() as tape:
        loss = fn()
    tape.backward(loss)
    worst = 0.0
    for t in tensors:
        flat = t.data.reshape(-1)
        gflat = t.grad.reshape(-1)
        for i in rng.choice(flat.size, size=min(samples, flat.size), replace=False):
            orig = flat[i]
            flat[i] = orig + h
            up = fn().item()
            flat[i] = orig - h
            down = fn().item()
            flat[i] = orig
            num = (up - down) / (2 * h)
            rel = abs(gflat[i] - num) / max(1e-6, abs(gflat[i]) + abs(num))
            worst = max(worst, rel)
    return worst


def check_gradients() -> str:
    rng = np.random.default_rng(0)
    vis_cfg = VisionConfig(patch_size=(2, 4, 4), d_vis=16, n_layers=1, n_heads=2,
                           pool_stride=(1, 2, 2), d_lm=24)
    lm_cfg = LmConfig(vocab_size=11, d_lm=24, n_layers=1, n_heads=2, max_seq_len=32)
    vparams = init_vision_params(vis_cfg, (4, 8, 8), rng, "float64")
    lparams = init_lm_params(lm_cfg, rng, "float64")
    for p in lparams.values():
        p.requires_grad = True
    adapters = init_adapters(lm_cfg, rng, rank=2, alpha=4.0, dtype="float64")
    vol = T.Tensor(rng.normal(size=(4, 8, 8)), dtype="float64")
    vocab_stub = build_vocab(["a b c d e f"])

    def fn():
        image = encode_volume(vol, vis_cfg, vparams)
        inp = lm_mod.assemble_input([7, vocab_stub.img_id, 8], image, [9, 10],
                                    vocab_stub, lparams["tok_embed"], lm_cfg.max_seq_len)
        logits = lm_forward(inp, lm_cfg, lparams, adapters)
        return T.mean(T.log_softmax(logits, axis=-1)) * -1.0

    tensors = list(vparams.values())[:4] + [lparams["tok_embed"], lparams["head_w"],
                                            adapters["blocks.0.wq"].A, adapters["blocks.0.wq"].B]
    worst = _fd_scalar(fn, tensors, rng)
    if worst >= 1e-4:
        raise AssertionError(f"gradient check failed: rel err {worst:.2e}")
    return f"gradient check (vision+LM stack, 64-bit): rel err {worst:.2e} < 1e-4"


def check_lora_identity() -> str:
    rng = np.random.default_rng(1)
    cfg = LmConfig(vocab_size=13, d_lm=16, n_layers=2, n_heads=2, max_seq_len=16)
    params = init_lm_params(cfg, rng, "float64")
    adapters = init_adapters(cfg, rng, rank=4, dtype="float64")
    vocab_stub = build_vocab(["a b c d"])
    image = ImageContext(tokens=T.Tensor(rng.normal(size=(2, 16)), dtype="float64"))
    inp = lm_mod.assemble_input([5, vocab_stub.img_id, 6], image, [7],
                                vocab_stub, params["tok_embed"], cfg.max_seq_len)
    with_adapters = lm_forward(inp, cfg, params, adapters)
    base_only = lm_forward(inp, cfg, params, None)
    if not np.array_equal(with_adapters.data, base_only.data):
        raise AssertionError("fresh adapters changed the logits")
    return "LoRA zero-init identity: adapted logits equal base logits exactly"


def check_nifti_roundtrip() -> str:
    rng = np.random.default_rng(2)
    vox = rng.normal(size=(3, 4, 5)).astype(np.float32)
    vol = Volume(vox, (1.0, 2.0, 3.0), "selftest")
    _, back = parse_nifti(write_nifti(vol))
    if not np.array_equal(back.voxels, vox):
        raise AssertionError("NIfTI round trip changed voxels")
    return "NIfTI parse(write(v)) round trip: bit-exact"


def check_tokenizer_roundtrip() -> str:
    corpus = ["the liver contains a lesion measuring 7 mm.",
              "no abnormality detected in the lungs or pleura."]
    vocab = build_vocab(corpus)
    for text in corpus:
        if decode(encode(text, vocab), vocab) != text:
            raise AssertionError(f"tokenizer round trip failed for {text!r}")
    return "tokenizer round trip on canonical text: exact"


CHECKS = (check_gradients, check_lora_identity, check_nifti_roundtrip, check_tokenizer_roundtrip)


def run(verbose: bool = True) -> int:
    for check in CHECKS:
        try:
            msg = check()
        except Exception as exc:  # report which check broke, then fail
            if verbose:
                print(f"FAIL {check.__name__}: {exc}")
            return 1
        if verbose:
            print(f"ok   {msg}")
    return 0
