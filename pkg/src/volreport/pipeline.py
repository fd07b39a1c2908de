"""Wiring between datasets on disk and the model: row loading, vocabulary
construction from rendered prompts and targets, and training-example
assembly with a preprocessed-volume cache.

Row schemas are self-describing: report rows carry {volume_path, region,
report_text}, question rows {volume_path, question, options, answer_index}.
volume_path is resolved relative to the JSONL file's directory.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import DataError
from .harmonize import VqaRecord, read_jsonl
from .model import OPTION_LETTERS, ReportModel, render_options
from .nifti import PreprocessConfig, load_nifti, preprocess
from .tokenizer import Vocab, build_vocab, encode
from .train import TrainExample

TASKS = ("mrg", "vqa", "both")


def row_task(row: dict) -> str:
    if "question" in row and "options" in row:
        return "vqa"
    if "region" in row and "report_text" in row:
        return "mrg"
    raise DataError(f"row matches neither task schema: {sorted(row)}")


def load_task_rows(paths, task: str) -> list[dict]:
    """Read one or more JSONL files, tagging each row with its source dir."""
    if task not in TASKS:
        raise DataError(f"unknown task {task!r}; expected one of {TASKS}")
    rows = []
    for p in [paths] if isinstance(paths, (str, Path)) else list(paths):
        p = Path(p)
        for row in read_jsonl(p):
            t = row_task(row)
            if task != "both" and t != task:
                raise DataError(f"{p} holds a {t} row but task is {task}")
            row["_root"] = str(p.parent)
            rows.append(row)
    if not rows:
        raise DataError(f"no rows loaded for task {task}")
    return rows


class VolumeCache:
    """Preprocess each referenced volume once; keyed by resolved path."""

    def __init__(self, cfg: PreprocessConfig, dtype: str = "float32"):
        self.cfg = cfg
        self.dtype = dtype
        self._cache: dict[str, np.ndarray] = {}

    def resolve(self, row: dict) -> Path:
        return Path(row.get("_root", ".")) / row["volume_path"]

    def get(self, row: dict) -> np.ndarray:
        key = str(self.resolve(row))
        if key not in self._cache:
            path = self.resolve(row)
            if not path.exists():
                raise DataError(f"volume file missing: {path}")
            self._cache[key] = preprocess(load_nifti(path), self.cfg, dtype=self.dtype).data
        return self._cache[key]


def corpus_texts(rows: list[dict], templates: dict[str, str]) -> list[str]:
    """Rendered prompts plus targets: the closed language the vocab must cover."""
    texts = []
    for row in rows:
        if row_task(row) == "vqa":
            texts.append(
                templates["vqa"].format(
                    question=row["question"],
                    options=render_options(row["options"], templates),
                )
            )
            texts.append(OPTION_LETTERS[row["answer_index"]])
        else:
            texts.append(templates["mrg"].format(region=row["region"]))
            texts.append(row["report_text"])
    return texts


def build_vocab_for_rows(rows: list[dict], templates: dict[str, str]) -> Vocab:
    return build_vocab(corpus_texts(rows, templates))


def make_examples(model: ReportModel, rows: list[dict], cache: VolumeCache) -> list[TrainExample]:
    """Teacher-forced examples; targets get a trailing EOS so generation
    learns to stop.
    """
    vocab = model.vocab
    examples = []
    for row in rows:
        vox = cache.get(row)
        if row_task(row) == "vqa":
            prompt = model.vqa_prompt_ids(row["question"], row["options"])
            target = encode(OPTION_LETTERS[row["answer_index"]], vocab)
        else:
            prompt = model.mrg_prompt_ids(row["region"])
            target = encode(row["report_text"], vocab)
        examples.append(
            TrainExample(voxels=vox, prompt_ids=prompt, target_ids=target + [vocab.eos_id],
                         meta={"task": row_task(row)})
        )
    return examples


def vqa_records_of(rows: list[dict]) -> list[VqaRecord]:
    return [VqaRecord.from_json(r) for r in rows]


def findings_by_volume(findings_path) -> dict[str, list[dict]]:
    return {r["volume_path"]: r["findings"] for r in read_jsonl(findings_path)}


def locate_findings_file(data_paths) -> Path | None:
    """findings.jsonl next to a data file or one directory up, if present."""
    for p in [data_paths] if isinstance(data_paths, (str, Path)) else list(data_paths):
        p = Path(p)
        for candidate in (p.parent / "findings.jsonl", p.parent.parent / "findings.jsonl"):
            if candidate.exists():
                return candidate
    return None
