"""Scoring for report generation and question answering.

Report overlap uses token-level longest-common-subsequence F1 plus an exact
finding-recall oracle against the synthetic ground truth. These are declared
proxies for judge-model metrics, and every emitted report says so. VQA is
exact option-letter accuracy.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal

import numpy as np

from . import kernels
from .errors import ContractError, DataError
from .harmonize import REGIONS, VqaRecord
from .tokenizer import normalize_tokens

METRIC_NOTE = "proxy metrics (LCS overlap + planted-finding recall), not a judge-model score"

_LETTER = re.compile(r"^[a-e]$")


def round_half_up(x: float, places: int = 2) -> float:
    """Half-up decimal rounding (0.2967 -> 0.30, 0.125 -> 0.13)."""
    q = Decimal(1).scaleb(-places)
    return float(Decimal(repr(x)).quantize(q, rounding=ROUND_HALF_UP))


def macro_average(values) -> float:
    values = list(values)
    if not values:
        raise ContractError("macro average of no values")
    return float(sum(values) / len(values))


@dataclass
class EvalReport:
    """Per-region scores plus their macro average, one metric per report."""

    task: str
    metric: str
    per_region: dict[str, float]
    n_examples: int
    note: str = METRIC_NOTE
    overall: float | None = None
    average: float | None = field(init=False, default=None)

    def __post_init__(self):
        for region, score in self.per_region.items():
            if not 0.0 <= score <= 1.0:
                raise ContractError(f"score for {region} out of [0,1]: {score}")
        if self.per_region:
            self.average = macro_average(self.per_region.values())
        if self.overall is not None and not 0.0 <= self.overall <= 1.0:
            raise ContractError(f"overall score out of [0,1]: {self.overall}")

    def to_json(self) -> dict:
        out = {
            "task": self.task,
            "metric": self.metric,
            "note": self.note,
            "n_examples": self.n_examples,
            "per_region": {k: v for k, v in self.per_region.items()},
            "average": self.average,
        }
        if self.overall is not None:
            out["overall"] = self.overall
        return out

    def table(self) -> str:
        """Aligned text table: regions as columns plus the macro average."""
        cols = [r for r in REGIONS if r in self.per_region]
        header = [c.capitalize() for c in cols] + (["Avg."] if cols else [])
        values = [f"{round_half_up(self.per_region[c]):.2f}" for c in cols]
        if cols:
            values.append(f"{round_half_up(self.average):.2f}")
        if self.overall is not None:
            header = ["Overall"] + header
            values = [f"{round_half_up(self.overall):.2f}"] + values
        width = max([len(h) for h in header] + [6])
        lines = [
            f"{self.task.upper()} ({self.metric}; {self.note}; n={self.n_examples})",
            "  ".join(h.rjust(width) for h in header),
            "  ".join(v.rjust(width) for v in values),
        ]
        return "\n".join(lines)


def parse_option_letter(text: str, n_options: int) -> int:
    """First standalone option letter in the text, or -1 if unparseable."""
    for tok in normalize_tokens(text):
        if _LETTER.match(tok):
            idx = ord(tok) - ord("a")
            if idx < n_options:
                return idx
    return -1


def vqa_accuracy(predictions: list[str], records: list[VqaRecord]) -> EvalReport:
    """Exact-match accuracy of the predicted option letter."""
    if not records:
        raise DataError("vqa_accuracy needs at least one record")
    if len(predictions) != len(records):
        raise ContractError(f"{len(predictions)} predictions for {len(records)} records")
    ok = 0
    for pred, rec in zip(predictions, records):
        ok += int(parse_option_letter(pred, len(rec.options)) == rec.answer_index)
    return EvalReport(
        task="vqa",
        metric="accuracy",
        per_region={},
        n_examples=len(records),
        note="exact option-letter match",
        overall=ok / len(records),
    )


def lcs_overlap_f1(generated: str, reference: str) -> float:
    """Token-level LCS F1: precision vs the generation, recall vs the reference."""
    ref = normalize_tokens(reference)
    if not ref:
        raise ContractError("reference text must be nonempty")
    gen = normalize_tokens(generated)
    if not gen:
        return 0.0
    table: dict[str, int] = {}
    for tok in ref + gen:
        table.setdefault(tok, len(table))
    a = np.array([table[t] for t in gen], dtype=np.int64)
    b = np.array([table[t] for t in ref], dtype=np.int64)
    lcs = kernels.lcs_length(a, b)
    if lcs == 0:
        return 0.0
    p = lcs / len(gen)
    r = lcs / len(ref)
    return 2 * p * r / (p + r)


def finding_recall(generated_sections: dict[str, str], findings: list[dict]) -> float:
    """Fraction of planted findings whose organ term AND keyword both appear
    in the generated text for the finding's region. No findings -> 1.0.
    """
    if not findings:
        return 1.0
    hits = 0
    for f in findings:
        text = generated_sections.get(f["region"], "").lower()
        if re.search(rf"\b{re.escape(f['organ'].lower())}\b", text) and re.search(
            rf"\b{re.escape(f['keyword'].lower())}\b", text
        ):
            hits += 1
    return hits / len(findings)


def evaluate_vqa(model, records: list[VqaRecord], volume_loader, max_new: int = 4) -> EvalReport:
    """Greedy generation per question, scored by option-letter accuracy."""
    from .tokenizer import decode

    preds = []
    for rec in records:
        vox = volume_loader(rec.volume_path)
        ids = model.generate_ids(
            vox, model.vqa_prompt_ids(rec.question, rec.options), max_new=max_new
        )
        preds.append(decode(ids, model.vocab))
    return vqa_accuracy(preds, records)


def evaluate_mrg(
    model,
    rows: list[dict],
    findings_by_volume: dict[str, list[dict]] | None,
    volume_loader,
    max_new: int = 48,
) -> tuple[EvalReport, EvalReport | None]:
    """Greedy per-region report generation scored with LCS F1 and, when the
    planted ground truth is available, finding recall. Regions without
    examples are reported as absent.
    """
    from .tokenizer import decode

    if not rows:
        raise DataError("evaluate_mrg needs at least one row")
    lcs_scores: dict[str, list[float]] = {}
    generated: dict[str, dict[str, str]] = {}
    for row in rows:
        vox = volume_loader(row["volume_path"])
        ids = model.generate_ids(vox, model.mrg_prompt_ids(row["region"]), max_new=max_new)
        text = decode(ids, model.vocab)
        generated.setdefault(row["volume_path"], {})[row["region"]] = text
        lcs_scores.setdefault(row["region"], []).append(lcs_overlap_f1(text, row["report_text"]))

    lcs_report = EvalReport(
        task="mrg",
        metric="lcs_overlap_f1",
        per_region={r: float(np.mean(v)) for r, v in lcs_scores.items()},
        n_examples=len(rows),
    )
    if findings_by_volume is None:
        return lcs_report, None

    recall_scores: dict[str, list[float]] = {}
    for vp, sections in generated.items():
        for region in sections:
            region_findings = [f for f in findings_by_volume.get(vp, []) if f["region"] == region]
            if region_findings:
                recall_scores.setdefault(region, []).append(
                    finding_recall(sections, region_findings)
                )
    recall_report = EvalReport(
        task="mrg",
        metric="finding_recall",
        per_region={r: float(np.mean(v)) for r, v in recall_scores.items()},
        n_examples=len(rows),
    )
    return lcs_report, recall_report


def reports_to_json(reports: list[EvalReport]) -> str:
    return json.dumps([r.to_json() for r in reports], indent=2)
