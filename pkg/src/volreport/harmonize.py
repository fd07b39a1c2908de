"""Dataset harmonization: sentence-level organ extraction routes report text
into chest/abdomen/pelvis sections, plus the JSONL training-data builder.
"""

from __future__ import annotations

import json
import logging
import os
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError

log = logging.getLogger(__name__)

REGIONS = ("chest", "abdomen", "pelvis")

# Tokens ending in "." that do not terminate a sentence.
ABBREVIATIONS = frozenset(
    {"approx.", "e.g.", "i.e.", "etc.", "vs.", "cf.", "ca.", "dr.", "fig.", "mr.", "mrs.", "st."}
)

_TERMINATORS = ".!?"


@dataclass
class OrganLexicon:
    """Case-insensitive organ term -> region map with longest-match scanning."""

    term_to_region: dict[str, str]
    _patterns: list[tuple[re.Pattern, str, str]] = field(default_factory=list, repr=False)

    def __post_init__(self):
        norm = {}
        for term, region in self.term_to_region.items():
            if region not in REGIONS:
                raise ConfigError(f"lexicon term {term!r} maps to unknown region {region!r}")
            norm[term.lower()] = region
        self.term_to_region = norm
        # longest terms first so multiword entries win over their substrings
        for term in sorted(norm, key=lambda t: (-len(t), t)):
            pat = re.compile(r"\b" + re.escape(term) + r"\b")
            self._patterns.append((pat, term, norm[term]))

    @classmethod
    def from_mapping(cls, mapping: dict[str, str]) -> "OrganLexicon":
        return cls(term_to_region=dict(mapping))

    @classmethod
    def from_json(cls, path) -> "OrganLexicon":
        return cls.from_mapping(json.loads(Path(path).read_text(encoding="utf-8")))

    @classmethod
    def load_default(cls) -> "OrganLexicon":
        raw = resources.files("volreport.data").joinpath("organ_lexicon.json").read_text("utf-8")
        return cls.from_mapping(json.loads(raw))


def split_sentences(text: str) -> list[str]:
    """Split on sentence terminators with an abbreviation guard."""
    sentences: list[str] = []
    buf: list[str] = []
    for ch in text:
        buf.append(ch)
        if ch in _TERMINATORS:
            if ch == ".":
                word = "".join(buf).rstrip().rsplit(None, 1)[-1].lower() if "".join(buf).strip() else ""
                if word in ABBREVIATIONS:
                    continue
            sent = "".join(buf).strip()
            if sent:
                sentences.append(sent)
            buf = []
    tail = "".join(buf).strip()
    if tail:
        sentences.append(tail)
    return sentences


def ner_extract_organs(sentence: str, lexicon: OrganLexicon) -> list[tuple[str, str]]:
    """Longest-match lexicon scan over word boundaries; deduplicated."""
    text = sentence.lower()
    consumed = np.zeros(len(text), dtype=bool)
    hits: list[tuple[int, str, str]] = []
    for pat, term, region in lexicon._patterns:
        for m in pat.finditer(text):
            if consumed[m.start() : m.end()].any():
                continue
            consumed[m.start() : m.end()] = True
            hits.append((m.start(), term, region))
    hits.sort()
    seen = set()
    out = []
    for _, term, region in hits:
        if term not in seen:
            seen.add(term)
            out.append((term, region))
    return out


def route_sentence(sentence: str, lexicon: OrganLexicon) -> set[str]:
    """Regions a sentence belongs to: the union over its organ mentions."""
    return {region for _, region in ner_extract_organs(sentence, lexicon)}


def harmonize_report(text: str, lexicon: OrganLexicon) -> tuple[dict[str, list[str]], int]:
    """Split a free-text report and copy each sentence into every matched
    region's section. Organ-free sentences are dropped; the count returned.
    """
    sections: dict[str, list[str]] = {}
    dropped = 0
    for sent in split_sentences(text):
        regions = route_sentence(sent, lexicon)
        if not regions:
            dropped += 1
            continue
        for region in regions:
            sections.setdefault(region, []).append(sent)
    if dropped:
        log.info("harmonize: dropped %d organ-free sentence(s)", dropped)
    return sections, dropped


@dataclass
class ReportRecord:
    """One report example: a volume plus region-sectioned findings text."""

    volume_path: str
    sections: dict[str, list[str]]
    source: str = "native"

    def __post_init__(self):
        for region, sents in self.sections.items():
            if region not in REGIONS:
                raise DataError(f"unknown region {region!r} in record {self.volume_path}")
            if any(not s for s in sents):
                raise DataError(f"empty sentence in record {self.volume_path}")

    def to_json(self) -> dict:
        return {"volume_path": self.volume_path, "sections": self.sections, "source": self.source}

    @classmethod
    def from_json(cls, d: dict) -> "ReportRecord":
        return cls(volume_path=d["volume_path"], sections=d["sections"], source=d.get("source", "native"))


@dataclass
class VqaRecord:
    """One multiple-choice question about a volume."""

    volume_path: str
    question: str
    options: list[str]
    answer_index: int

    def __post_init__(self):
        if not 2 <= len(self.options) <= 5:
            raise DataError(f"need 2..5 options, got {len(self.options)}")
        if len(set(self.options)) != len(self.options):
            raise DataError(f"options must be pairwise distinct: {self.options}")
        if not 0 <= self.answer_index < len(self.options):
            raise DataError(f"answer_index {self.answer_index} out of range")

    def to_json(self) -> dict:
        return {
            "volume_path": self.volume_path,
            "question": self.question,
            "options": self.options,
            "answer_index": self.answer_index,
        }

    @classmethod
    def from_json(cls, d: dict) -> "VqaRecord":
        return cls(d["volume_path"], d["question"], list(d["options"]), d["answer_index"])


def write_jsonl(path, rows: list[dict]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for row in rows:
            f.write(json.dumps(row) + "\n")


def read_jsonl(path) -> list[dict]:
    rows = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                rows.append(json.loads(line))
    return rows


def build_dataset(
    records: list[ReportRecord],
    vqa_records: list[VqaRecord],
    out_dir,
    train_fraction: float = 0.75,
    seed: int = 0,
    volume_root=None,
) -> dict:
    """Emit MRG/VQA train+val JSONL files with a seeded split by volume.

    MRG rows: {volume_path, region, report_text}. VQA rows: the record
    fields. Records with empty sections produce no MRG rows but keep their
    questions. Referenced volumes must exist under ``volume_root``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    root = Path(volume_root) if volume_root is not None else out_dir

    volumes: list[str] = []
    seen = set()
    for rec in records:
        if rec.volume_path not in seen:
            seen.add(rec.volume_path)
            volumes.append(rec.volume_path)
    for q in vqa_records:
        if q.volume_path not in seen:
            seen.add(q.volume_path)
            volumes.append(q.volume_path)

    missing = [v for v in volumes if not (root / v).exists()]
    if missing:
        raise DataError("missing volume files: " + ", ".join(missing))

    rng = np.random.default_rng(seed)
    order = list(rng.permutation(len(volumes)))
    n_train = int(round(train_fraction * len(volumes)))
    train_set = {volumes[i] for i in order[:n_train]}

    def rel(vp: str) -> str:
        # rows resolve volume paths against their own directory
        return os.path.relpath(root / vp, out_dir)

    mrg = {"train": [], "val": []}
    for rec in records:
        split = "train" if rec.volume_path in train_set else "val"
        for region in REGIONS:
            sents = rec.sections.get(region)
            if sents:
                mrg[split].append(
                    {"volume_path": rel(rec.volume_path), "region": region, "report_text": " ".join(sents)}
                )
    vqa = {"train": [], "val": []}
    for q in vqa_records:
        split = "train" if q.volume_path in train_set else "val"
        row = q.to_json()
        row["volume_path"] = rel(q.volume_path)
        vqa[split].append(row)

    paths = {}
    for task, rows_by_split in (("mrg", mrg), ("vqa", vqa)):
        for split, rows in rows_by_split.items():
            p = out_dir / f"{task}_{split}.jsonl"
            write_jsonl(p, rows)
            paths[f"{task}_{split}"] = str(p)
    summary = {
        "n_volumes": len(volumes),
        "n_train_volumes": len(train_set),
        "rows": {
            "mrg_train": len(mrg["train"]),
            "mrg_val": len(mrg["val"]),
            "vqa_train": len(vqa["train"]),
            "vqa_val": len(vqa["val"]),
        },
        "paths": paths,
    }
    return summary
