"""The assembled pipeline model: vision encoder + projector (trained),
frozen LM base, LoRA adapters (trained), vocabulary and prompt templates.

Parameter names are prefixed vision. / lm. / lora. so checkpoints and the
optimizer see one flat registry; the trainable/frozen split follows the
prefixes. Checkpoints are self-contained: manifest + blob + vocab.json +
templates.json.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from . import lm as lm_mod
from . import vision as vision_mod
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import ConfigError
from .lm import LmConfig, LoraAdapter, MultimodalInput, assemble_input, lm_forward
from .nifti import PreprocessConfig, Volume, load_nifti, preprocess
from .tensor import Tensor
from .tokenizer import IMG_MARKER, Vocab, decode, encode
from .vision import ImageContext, VisionConfig

OPTION_LETTERS = "abcde"


def load_default_templates() -> dict[str, str]:
    raw = resources.files("volreport.data").joinpath("prompt_templates.json").read_text("utf-8")
    return json.loads(raw)


def render_options(options: list[str], templates: dict[str, str]) -> str:
    item = templates.get("option_item", "{letter}) {text}")
    return " ".join(item.format(letter=OPTION_LETTERS[i], text=t) for i, t in enumerate(options))


@dataclass
class ModelConfig:
    vision: VisionConfig
    lm: LmConfig
    preprocess: PreprocessConfig
    lora_rank: int = 8
    lora_alpha: float = 16.0
    lora_targets: tuple[str, ...] = lm_mod.LORA_TARGETS_DEFAULT
    precision: str = "float32"

    def __post_init__(self):
        if self.vision.d_lm != self.lm.d_lm:
            raise ConfigError(
                f"projector output width {self.vision.d_lm} != LM width {self.lm.d_lm}"
            )
        # raises early when the model input shape does not tile into patches
        self.vision.grid_for(self.preprocess.target_shape)

    def to_dict(self) -> dict:
        return {
            "vision": self.vision.to_dict(),
            "lm": self.lm.to_dict(),
            "preprocess": self.preprocess.to_dict(),
            "lora_rank": self.lora_rank,
            "lora_alpha": self.lora_alpha,
            "lora_targets": list(self.lora_targets),
            "precision": self.precision,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(
            vision=VisionConfig.from_dict(d["vision"]),
            lm=LmConfig.from_dict(d["lm"]),
            preprocess=PreprocessConfig.from_dict(d["preprocess"]),
            lora_rank=d["lora_rank"],
            lora_alpha=d["lora_alpha"],
            lora_targets=tuple(d["lora_targets"]),
            precision=d["precision"],
        )


class ReportModel:
    """End-to-end model instance with a flat named-parameter registry."""

    def __init__(
        self,
        cfg: ModelConfig,
        vocab: Vocab,
        templates: dict[str, str],
        vision_params: dict[str, Tensor],
        lm_params: dict[str, Tensor],
        adapters: dict[str, LoraAdapter],
    ):
        self.cfg = cfg
        self.vocab = vocab
        self.templates = templates
        self.vision_params = vision_params
        self.lm_params = lm_params
        self.adapters = adapters

    @classmethod
    def build(cls, cfg: ModelConfig, vocab: Vocab, templates: dict[str, str] | None = None,
              seed: int = 0) -> "ReportModel":
        if cfg.lm.vocab_size != vocab.size:
            raise ConfigError(f"LM vocab size {cfg.lm.vocab_size} != vocabulary size {vocab.size}")
        templates = dict(templates or load_default_templates())
        rng = np.random.default_rng(np.random.SeedSequence(seed))
        dtype = cfg.precision
        vision_params = vision_mod.init_vision_params(cfg.vision, cfg.preprocess.target_shape, rng, dtype)
        lm_params = lm_mod.init_lm_params(cfg.lm, rng, dtype)
        adapters = lm_mod.init_adapters(
            cfg.lm, rng, rank=cfg.lora_rank, alpha=cfg.lora_alpha,
            targets=cfg.lora_targets, dtype=dtype,
        )
        return cls(cfg, vocab, templates, vision_params, lm_params, adapters)

    # -- parameter registry ------------------------------------------------

    def named_parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for k, t in self.vision_params.items():
            out[f"vision.{k}"] = t
        for k, t in self.lm_params.items():
            out[f"lm.{k}"] = t
        for k, ad in self.adapters.items():
            out[f"lora.{k}.A"] = ad.A
            out[f"lora.{k}.B"] = ad.B
        return out

    def trainable_params(self) -> dict[str, Tensor]:
        return {k: t for k, t in self.named_parameters().items() if t.requires_grad}

    def frozen_params(self) -> dict[str, Tensor]:
        return {k: t for k, t in self.named_parameters().items() if not t.requires_grad}

    def parameter_groups(self) -> dict[str, dict[str, Tensor]]:
        groups: dict[str, dict[str, Tensor]] = {"vision": {}, "projector": {}, "lora": {}, "lm_base": {}}
        for k, t in self.named_parameters().items():
            if k.startswith("vision.proj_"):
                groups["projector"][k] = t
            elif k.startswith("vision."):
                groups["vision"][k] = t
            elif k.startswith("lora."):
                groups["lora"][k] = t
            else:
                groups["lm_base"][k] = t
        return groups

    # -- prompts -----------------------------------------------------------

    def mrg_prompt_ids(self, region: str) -> list[int]:
        text = self.templates["mrg"].format(region=region)
        return encode(text, self.vocab)

    def vqa_prompt_ids(self, question: str, options: list[str]) -> list[int]:
        text = self.templates["vqa"].format(
            question=question, options=render_options(options, self.templates)
        )
        return encode(text, self.vocab)

    # -- forward paths -----------------------------------------------------

    def encode_volume(self, voxels) -> ImageContext:
        vol = voxels if isinstance(voxels, Tensor) else Tensor(voxels, dtype=self.cfg.precision)
        if vol.dtype != np.dtype(self.cfg.precision):
            vol = vol.astype(self.cfg.precision)
        return vision_mod.encode_volume(vol, self.cfg.vision, self.vision_params)

    def assemble(self, image: ImageContext, prompt_ids: list[int], target_ids: list[int]) -> MultimodalInput:
        return assemble_input(
            prompt_ids, image, target_ids, self.vocab,
            self.lm_params["tok_embed"], self.cfg.lm.max_seq_len,
        )

    def forward_example(self, voxels, prompt_ids: list[int], target_ids: list[int]):
        """Returns (logits, assembled input) for one teacher-forced example."""
        image = self.encode_volume(voxels)
        inp = self.assemble(image, prompt_ids, target_ids)
        logits = lm_forward(inp, self.cfg.lm, self.lm_params, self.adapters)
        return logits, inp

    def sequence_log_prob(self, voxels, prompt_ids: list[int], target_ids: list[int]) -> float:
        image = self.encode_volume(voxels)
        return lm_mod.sequence_log_prob(
            prompt_ids, image, target_ids, self.cfg.lm, self.lm_params, self.adapters, self.vocab
        )

    def generate_ids(self, voxels, prompt_ids: list[int], **gen_kwargs) -> list[int]:
        image = self.encode_volume(voxels)
        return lm_mod.generate(
            prompt_ids, image, self.cfg.lm, self.lm_params, self.adapters, self.vocab, **gen_kwargs
        )

    def preprocess_volume(self, volume: Volume) -> Tensor:
        return preprocess(volume, self.cfg.preprocess, dtype=self.cfg.precision)

    def generate_report(self, volume: Volume, region: str, **gen_kwargs) -> str:
        vox = self.preprocess_volume(volume)
        ids = self.generate_ids(vox, self.mrg_prompt_ids(region), **gen_kwargs)
        return decode(ids, self.vocab)

    def answer_question(self, volume: Volume, question: str, options: list[str], **gen_kwargs) -> str:
        vox = self.preprocess_volume(volume)
        gen_kwargs.setdefault("max_new", 4)
        ids = self.generate_ids(vox, self.vqa_prompt_ids(question, options), **gen_kwargs)
        return decode(ids, self.vocab)

    def report_for_volume_file(self, path, region: str, **gen_kwargs) -> str:
        return self.generate_report(load_nifti(path), region, **gen_kwargs)

    # -- persistence ---------------------------------------------------------

    def save(self, path) -> Path:
        path = Path(path)
        configs = {
            "model": self.cfg.to_dict(),
            "groups": {
                "trainable": sorted(self.trainable_params()),
                "frozen": sorted(self.frozen_params()),
            },
        }
        save_checkpoint(path, self.named_parameters(), configs=configs)
        self.vocab.save(path / "vocab.json")
        (path / "templates.json").write_text(
            json.dumps(self.templates, indent=2) + "\n", encoding="utf-8"
        )
        return path

    @classmethod
    def load(cls, path) -> "ReportModel":
        path = Path(path)
        arrays, manifest = load_checkpoint(path)
        cfg = ModelConfig.from_dict(manifest["configs"]["model"])
        vocab = Vocab.load(path / "vocab.json")
        templates = json.loads((path / "templates.json").read_text(encoding="utf-8"))

        vision_params: dict[str, Tensor] = {}
        lm_params: dict[str, Tensor] = {}
        lora_arrays: dict[str, np.ndarray] = {}
        for name, arr in arrays.items():
            if name.startswith("vision."):
                vision_params[name[len("vision.") :]] = Tensor(arr, requires_grad=True)
            elif name.startswith("lm."):
                lm_params[name[len("lm.") :]] = Tensor(arr, requires_grad=False)
            elif name.startswith("lora."):
                lora_arrays[name[len("lora.") :]] = arr
        adapters: dict[str, LoraAdapter] = {}
        for key in sorted({n.rsplit(".", 1)[0] for n in lora_arrays}):
            adapters[key] = LoraAdapter(
                target=key,
                A=Tensor(lora_arrays[f"{key}.A"], requires_grad=True),
                B=Tensor(lora_arrays[f"{key}.B"], requires_grad=True),
                rank=cfg.lora_rank,
                alpha=cfg.lora_alpha,
            )
        return cls(cfg, vocab, templates, vision_params, lm_params, adapters)


def prompt_has_img_marker(templates: dict[str, str]) -> bool:
    return all(IMG_MARKER in templates[k] for k in ("mrg", "vqa"))
