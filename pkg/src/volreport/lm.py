"""Decoder-only transformer with LoRA adapters on frozen base weights.

The conditional next-token distribution is computed over an assembled
multimodal sequence: [BOS, prompt-before-IMG, image tokens, prompt-after-IMG,
target]. Image tokens occupy ordinary positions and receive ordinary
positional embeddings. Base weights stay frozen; adapters add
(alpha/rank) * B @ A on top of their targets without mutating them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import ConfigError, ContractError, ShapeError
from .layers import block_forward, causal_mask, gaussian, init_block, linear, ones, zeros
from .tensor import Tensor, add, concat, embedding_lookup, layer_norm, matmul, take_rows
from .tokenizer import Vocab
from .vision import ImageContext

LORA_TARGETS_DEFAULT = ("wq", "wv")


@dataclass
class LmConfig:
    vocab_size: int
    d_lm: int = 128
    n_layers: int = 2
    n_heads: int = 4
    max_seq_len: int = 160
    mlp_mult: int = 4

    def __post_init__(self):
        if self.d_lm % self.n_heads:
            raise ConfigError(f"d_lm {self.d_lm} not divisible by n_heads {self.n_heads}")

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "d_lm": self.d_lm,
            "n_layers": self.n_layers,
            "n_heads": self.n_heads,
            "max_seq_len": self.max_seq_len,
            "mlp_mult": self.mlp_mult,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LmConfig":
        return cls(**d)


@dataclass
class LoraAdapter:
    """Low-rank delta for one frozen weight: effective W = W + (alpha/rank) * B @ A."""

    target: str
    A: Tensor
    B: Tensor
    rank: int
    alpha: float

    def __post_init__(self):
        if self.rank < 1:
            raise ConfigError(f"LoRA rank must be >= 1, got {self.rank}")
        if self.A.shape[0] != self.rank or self.B.shape[1] != self.rank:
            raise ConfigError(
                f"adapter shapes {self.A.shape}/{self.B.shape} inconsistent with rank {self.rank}"
            )


@dataclass
class MultimodalInput:
    """Embedded sequence plus bookkeeping for loss masking."""

    embeddings: Tensor
    token_ids: np.ndarray
    answer_mask: np.ndarray
    n_image: int

    @property
    def length(self) -> int:
        return self.embeddings.shape[0]


def init_lm_params(cfg: LmConfig, rng: np.random.Generator, dtype) -> dict[str, Tensor]:
    """Base LM weights; all frozen (requires_grad=False)."""
    std = 1.0 / np.sqrt(cfg.d_lm)
    params: dict[str, Tensor] = {
        "tok_embed": gaussian(rng, (cfg.vocab_size, cfg.d_lm), 0.02, dtype, requires_grad=False),
        "pos_embed": gaussian(rng, (cfg.max_seq_len, cfg.d_lm), 0.02, dtype, requires_grad=False),
    }
    for i in range(cfg.n_layers):
        for k, t in init_block(rng, cfg.d_lm, cfg.mlp_mult, dtype, requires_grad=False).items():
            params[f"blocks.{i}.{k}"] = t
    params["ln_f_g"] = ones((cfg.d_lm,), dtype, requires_grad=False)
    params["ln_f_b"] = zeros((cfg.d_lm,), dtype, requires_grad=False)
    params["head_w"] = gaussian(rng, (cfg.vocab_size, cfg.d_lm), std, dtype, requires_grad=False)
    return params


def init_adapters(
    cfg: LmConfig,
    rng: np.random.Generator,
    rank: int = 8,
    alpha: float = 16.0,
    targets: tuple[str, ...] = LORA_TARGETS_DEFAULT,
    dtype="float32",
) -> dict[str, LoraAdapter]:
    """Fresh adapters for every (layer, target): A gaussian, B zeros."""
    adapters: dict[str, LoraAdapter] = {}
    for i in range(cfg.n_layers):
        for tgt in targets:
            name = f"blocks.{i}.{tgt}"
            adapters[name] = LoraAdapter(
                target=name,
                A=gaussian(rng, (rank, cfg.d_lm), 1.0 / np.sqrt(rank), dtype),
                B=zeros((cfg.d_lm, rank), dtype),
                rank=rank,
                alpha=alpha,
            )
    return adapters


def lora_apply(base: Tensor, adapter: LoraAdapter) -> Tensor:
    """Effective weight W + (alpha/rank) * B @ A; the base is never mutated."""
    d_out, d_in = base.shape
    if adapter.B.shape[0] != d_out or adapter.A.shape[1] != d_in:
        raise ConfigError(
            f"adapter delta shape ({adapter.B.shape[0]}, {adapter.A.shape[1]}) "
            f"does not match target shape {base.shape}"
        )
    delta = matmul(adapter.B, adapter.A) * (adapter.alpha / adapter.rank)
    return add(base, delta)


def assemble_input(
    prompt_ids: list[int],
    image: ImageContext,
    target_ids: list[int],
    vocab: Vocab,
    tok_embed: Tensor,
    max_seq_len: int,
) -> MultimodalInput:
    """Splice image tokens into the prompt at its single IMG slot.

    Layout: [BOS, prompt-before-IMG, image tokens, prompt-after-IMG, target].
    ``answer_mask`` is true exactly on target positions; image positions get
    PAD in ``token_ids`` (the mask never selects them).
    """
    img_slots = [i for i, t in enumerate(prompt_ids) if t == vocab.img_id]
    if len(img_slots) != 1:
        raise ContractError(f"prompt must contain exactly one IMG placeholder, found {len(img_slots)}")
    if image.tokens.shape[1] != tok_embed.shape[1]:
        raise ShapeError(
            f"image token width {image.tokens.shape[1]} != LM embedding width {tok_embed.shape[1]}"
        )
    slot = img_slots[0]
    before = prompt_ids[:slot]
    after = prompt_ids[slot + 1 :]
    n_img = image.n_tokens

    length = 1 + len(before) + n_img + len(after) + len(target_ids)
    if length > max_seq_len:
        raise ContractError(f"assembled length {length} exceeds max_seq_len {max_seq_len}")

    pieces = [embedding_lookup(tok_embed, [vocab.bos_id])]
    if before:
        pieces.append(embedding_lookup(tok_embed, before))
    pieces.append(image.tokens)
    if after:
        pieces.append(embedding_lookup(tok_embed, after))
    if target_ids:
        pieces.append(embedding_lookup(tok_embed, target_ids))
    embeddings = concat(pieces, axis=0)

    token_ids = np.concatenate(
        [
            [vocab.bos_id],
            before,
            [vocab.pad_id] * n_img,
            after,
            target_ids,
        ]
    ).astype(np.int64)
    answer_mask = np.zeros(length, dtype=bool)
    if target_ids:
        answer_mask[length - len(target_ids) :] = True
    return MultimodalInput(embeddings=embeddings, token_ids=token_ids, answer_mask=answer_mask, n_image=n_img)


def _block_params(params: dict[str, Tensor], i: int, adapters: dict[str, LoraAdapter] | None) -> dict[str, Tensor]:
    blk = {}
    for k in ("ln1_g", "ln1_b", "wq", "wk", "wv", "wo", "ln2_g", "ln2_b", "w1", "b1", "w2", "b2"):
        name = f"blocks.{i}.{k}"
        w = params[name]
        if adapters and name in adapters:
            w = lora_apply(w, adapters[name])
        blk[k] = w
    return blk


def lm_forward(
    inp: MultimodalInput,
    cfg: LmConfig,
    params: dict[str, Tensor],
    adapters: dict[str, LoraAdapter] | None = None,
) -> Tensor:
    """Causal transformer over the assembled sequence; returns [L, V] logits."""
    length = inp.length
    if length > cfg.max_seq_len:
        raise ContractError(f"sequence length {length} exceeds max_seq_len {cfg.max_seq_len}")
    pos = take_rows(params["pos_embed"], np.arange(length, dtype=np.int64))
    x = add(inp.embeddings, pos)
    mask = causal_mask(length, x.dtype)
    for i in range(cfg.n_layers):
        x = block_forward(x, _block_params(params, i, adapters), cfg.n_heads, mask)
    x = layer_norm(x, params["ln_f_g"], params["ln_f_b"])
    return linear(x, params["head_w"])


def sequence_log_prob(
    prompt_ids: list[int],
    image: ImageContext,
    target_ids: list[int],
    cfg: LmConfig,
    params: dict[str, Tensor],
    adapters: dict[str, LoraAdapter] | None,
    vocab: Vocab,
) -> float:
    """log P(target | prompt, image): teacher-forced, one forward pass."""
    if not target_ids:
        raise ContractError("sequence_log_prob requires a nonempty target")
    inp = assemble_input(prompt_ids, image, target_ids, vocab, params["tok_embed"], cfg.max_seq_len)
    logits = lm_forward(inp, cfg, params, adapters)
    positions = np.nonzero(inp.answer_mask)[0]
    rows = kernels.log_softmax_rows(np.ascontiguousarray(logits.data[positions - 1]))
    return float(rows[np.arange(len(positions)), inp.token_ids[positions]].sum())


def generate(
    prompt_ids: list[int],
    image: ImageContext,
    cfg: LmConfig,
    params: dict[str, Tensor],
    adapters: dict[str, LoraAdapter] | None,
    vocab: Vocab,
    mode: str = "greedy",
    temperature: float = 1.0,
    top_k: int = 0,
    seed: int = 0,
    max_new: int = 32,
) -> list[int]:
    """Autoregressive decoding; stops at EOS (not returned) or after max_new.

    Greedy ties break toward the lowest token id (argmax picks the first
    maximum). Sampling draws from an explicit generator seeded by ``seed``.
    temperature <= 0 switches to greedy. No KV cache: each step re-runs the
    grown sequence, which is fine at desk-scale lengths.
    """
    if max_new < 1:
        raise ContractError(f"max_new must be >= 1, got {max_new}")
    if mode not in ("greedy", "temperature", "top_k"):
        raise ConfigError(f"unknown generation mode {mode!r}")
    if mode != "greedy" and temperature <= 0.0:
        mode = "greedy"
    rng = np.random.default_rng(seed)
    out: list[int] = []
    for _ in range(max_new):
        inp = assemble_input(prompt_ids, image, out, vocab, params["tok_embed"], cfg.max_seq_len)
        logits = lm_forward(inp, cfg, params, adapters).data[-1]
        if mode == "greedy":
            nxt = int(np.argmax(logits))
        else:
            scaled = logits / temperature
            if mode == "top_k" and 0 < top_k < scaled.size:
                cutoff = np.sort(scaled)[-top_k]
                scaled = np.where(scaled >= cutoff, scaled, -np.inf)
            z = scaled - scaled.max()
            probs = np.exp(z)
            probs /= probs.sum()
            nxt = int(rng.choice(probs.size, p=probs))
        if nxt == vocab.eos_id:
            break
        out.append(nxt)
    return out
