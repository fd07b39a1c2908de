"""Masked cross-entropy training with AdamW and the trainability split:
vision encoder and projector fully trained, LoRA adapters trained, LM base
frozen. Loss is mean per masked token, so curves are scale-free.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .errors import ContractError, NumericsError
from .tensor import Tape, Tensor, log_softmax, mean, take_pairs, take_rows, zero_grads


@dataclass
class TrainConfig:
    lr: float = 1e-5
    batch_size: int = 8
    epochs: int = 8
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip: float = 1.0
    seed: int = 0
    precision: str = "float32"
    max_steps: int | None = None
    log_every: int = 1

    def __post_init__(self):
        if self.lr <= 0:
            raise ContractError(f"learning rate must be > 0, got {self.lr}")
        if self.batch_size < 1:
            raise ContractError(f"batch size must be >= 1, got {self.batch_size}")
        if self.precision not in ("float32", "float64"):
            raise ContractError(f"precision must be float32 or float64, got {self.precision!r}")

    def to_dict(self) -> dict:
        return {
            "lr": self.lr,
            "batch_size": self.batch_size,
            "epochs": self.epochs,
            "weight_decay": self.weight_decay,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "grad_clip": self.grad_clip,
            "seed": self.seed,
            "precision": self.precision,
            "max_steps": self.max_steps,
            "log_every": self.log_every,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class LossRecord:
    step: int
    loss: float
    tokens: int
    seconds: float

    def to_json(self) -> dict:
        return {"step": self.step, "loss": self.loss, "tokens": self.tokens, "seconds": self.seconds}


def masked_ce_loss(logits: Tensor, token_ids: np.ndarray, answer_mask: np.ndarray) -> Tensor:
    """Mean over masked positions of -log softmax(preceding logits)[token].

    Position p's token is scored from the logits at p-1, so prompt and image
    positions contribute nothing and position 0 can never be masked.
    """
    answer_mask = np.asarray(answer_mask, dtype=bool)
    token_ids = np.asarray(token_ids, dtype=np.int64)
    positions = np.nonzero(answer_mask)[0]
    if positions.size == 0:
        raise ContractError("answer mask selects no positions")
    if positions[0] == 0:
        raise ContractError("a masked target at position 0 has no preceding logits")
    rows = take_rows(logits, positions - 1)
    logp = log_softmax(rows, axis=-1)
    picked = take_pairs(logp, np.arange(positions.size), token_ids[positions])
    return mean(picked) * -1.0


def sum_ce_and_count(logits: Tensor, token_ids, answer_mask) -> tuple[Tensor, int]:
    """Unreduced masked CE (sum over tokens) plus the token count."""
    n = int(np.asarray(answer_mask, dtype=bool).sum())
    return masked_ce_loss(logits, token_ids, answer_mask) * float(n), n


class AdamW:
    """Decoupled-weight-decay Adam over a named parameter dict."""

    def __init__(self, params: dict[str, Tensor], cfg: TrainConfig):
        self.cfg = cfg
        self.params = params
        self.t = 0
        self.state = {
            name: (np.zeros(p.size, dtype=p.dtype), np.zeros(p.size, dtype=p.dtype))
            for name, p in params.items()
        }

    def step(self) -> None:
        self.t += 1
        c = self.cfg
        c1 = 1.0 - c.beta1**self.t
        c2 = 1.0 - c.beta2**self.t
        for name, p in self.params.items():
            if p.grad is None:
                continue
            m, v = self.state[name]
            kernels.adamw_update(
                p.data.reshape(-1), p.grad.reshape(-1), m, v,
                c.lr, c.beta1, c.beta2, c.eps, c.weight_decay, c1, c2,
            )


def clip_gradients(params: dict[str, Tensor], max_norm: float) -> float:
    """Scale all grads so the global norm is at most max_norm; returns the norm."""
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float((p.grad.astype(np.float64) ** 2).sum())
    norm = float(np.sqrt(total))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad *= scale
    return norm


def param_count(groups: dict[str, dict[str, Tensor]]) -> dict[str, int]:
    """Exact per-group parameter counts from shapes, plus totals."""
    counts = {name: sum(t.size for t in tensors.values()) for name, tensors in groups.items()}
    counts["trainable"] = sum(
        t.size for tensors in groups.values() for t in tensors.values() if t.requires_grad
    )
    counts["frozen"] = sum(
        t.size for tensors in groups.values() for t in tensors.values() if not t.requires_grad
    )
    counts["total"] = counts["trainable"] + counts["frozen"]
    return counts


def format_param_report(counts: dict[str, int]) -> str:
    lines = ["parameter counts:"]
    for name, n in counts.items():
        lines.append(f"  {name:<12} {n:>12,}")
    return "\n".join(lines)


@dataclass
class TrainExample:
    """One teacher-forced training example, already tokenized."""

    voxels: np.ndarray
    prompt_ids: list[int]
    target_ids: list[int]
    meta: dict = field(default_factory=dict)


def train_loop(
    examples: list[TrainExample],
    model,
    cfg: TrainConfig,
    out_dir=None,
    on_step=None,
) -> list[LossRecord]:
    """Seeded shuffled minibatches; per step: forward, masked CE, backward,
    clip, AdamW on the trainable group only. Checkpoints per epoch and a
    JSONL loss log when out_dir is given. NaN loss aborts with diagnostics.
    """
    if not examples:
        raise ContractError("train_loop requires a nonempty dataset")
    trainable = model.trainable_params()
    opt = AdamW(trainable, cfg)
    rng = np.random.default_rng(cfg.seed)
    records: list[LossRecord] = []
    log_file = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        log_file = open(out_dir / "losses.jsonl", "w", encoding="utf-8")

    step = 0
    t0 = time.perf_counter()
    try:
        for epoch in range(cfg.epochs):
            order = rng.permutation(len(examples))
            for start in range(0, len(examples), cfg.batch_size):
                batch = [examples[i] for i in order[start : start + cfg.batch_size]]
                zero_grads(trainable.values())
                with Tape() as tape:
                    total = None
                    tokens = 0
                    for ex in batch:
                        logits, inp = model.forward_example(ex.voxels, ex.prompt_ids, ex.target_ids)
                        ce_sum, n = sum_ce_and_count(logits, inp.token_ids, inp.answer_mask)
                        total = ce_sum if total is None else total + ce_sum
                        tokens += n
                    loss = total * (1.0 / tokens)
                loss_val = loss.item()
                if not np.isfinite(loss_val):
                    raise NumericsError(
                        f"non-finite loss {loss_val} at step {step} (epoch {epoch}); aborting"
                    )
                tape.backward(loss)
                clip_gradients(trainable, cfg.grad_clip)
                opt.step()
                step += 1
                rec = LossRecord(step=step, loss=loss_val, tokens=tokens,
                                 seconds=time.perf_counter() - t0)
                records.append(rec)
                if log_file is not None and step % cfg.log_every == 0:
                    log_file.write(json.dumps(rec.to_json()) + "\n")
                    log_file.flush()
                if on_step is not None and on_step(rec) is False:
                    return records
                if cfg.max_steps is not None and step >= cfg.max_steps:
                    return records
            if out_dir is not None:
                model.save(out_dir / f"epoch_{epoch + 1:03d}")
    finally:
        if log_file is not None:
            log_file.close()
        if out_dir is not None:
            model.save(out_dir / "final")
    return records
