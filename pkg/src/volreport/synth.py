"""Synthetic scan corpus with known ground truth.

Each volume is noise plus 0..3 planted ellipsoidal findings. Every finding
type owns a fixed spatial cell (one region per in-plane quadrant, depth half
and intensity sign separating the two types within a region), so presence,
count and size are recoverable from the voxels. Reports and multiple-choice
questions are generated from closed templates stating exactly the planted
facts; the planted list is persisted for exact scoring.

Question set per volume: one count question per region, one total count,
and one size-or-absent question per finding type. All carry four options,
so guessing scores 0.25.

All text is emitted in canonical form (lowercase, punctuation attached), so
tokenizer round trips are exact.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .harmonize import REGIONS, ReportRecord, VqaRecord, write_jsonl
from .nifti import Volume, save_nifti

OPTION_LETTERS = "abcde"


@dataclass(frozen=True)
class FindingType:
    name: str
    region: str
    organ: str
    keyword: str
    intensity_hu: float
    center_norm: tuple[float, float, float]
    sentence: str  # format field {size}


# One in-plane quadrant per region; depth half + bright/dark split the two
# types sharing a region. Centers sit at patch-cell centers of the default
# 8x32x32 / 4x8x8 model input grid.
DEFAULT_FINDINGS: tuple[FindingType, ...] = (
    FindingType(
        "lung nodule", "chest", "lung", "nodule", 800.0, (0.25, 0.25, 0.25),
        "the lung contains a nodule measuring {size} mm.",
    ),
    FindingType(
        "pleural effusion", "chest", "pleura", "effusion", -800.0, (0.75, 0.25, 0.25),
        "there is an effusion along the pleura measuring {size} mm.",
    ),
    FindingType(
        "liver lesion", "abdomen", "liver", "lesion", 800.0, (0.25, 0.75, 0.75),
        "the liver contains a lesion measuring {size} mm.",
    ),
    FindingType(
        "kidney cyst", "abdomen", "kidney", "cyst", -800.0, (0.75, 0.75, 0.75),
        "the kidney contains a cyst measuring {size} mm.",
    ),
    FindingType(
        "bladder mass", "pelvis", "bladder", "mass", 800.0, (0.25, 0.25, 0.75),
        "the bladder contains a mass measuring {size} mm.",
    ),
    FindingType(
        "rectal thickening", "pelvis", "rectum", "thickening", -800.0, (0.75, 0.25, 0.75),
        "there is thickening of the rectum measuring {size} mm.",
    ),
)

NORMAL_SENTENCES = {
    "chest": "no abnormality detected in the lungs or pleura.",
    "abdomen": "no abnormality detected in the liver or kidneys.",
    "pelvis": "no abnormality detected in the bladder or rectum.",
}

SIZES_MM = (3, 5, 7, 9)
SIZE_OPTIONS = ("not present", "3 mm", "5 mm", "7 mm or larger")
COUNT_OPTIONS = ("0", "1", "2", "3")

REGION_COUNT_QUESTION = "how many findings are present in the {region} region?"
TOTAL_COUNT_QUESTION = "how many findings are present in this scan?"
SIZE_QUESTION = "what is the size of the {name}?"


def size_option_index(size_mm: int | None) -> int:
    if size_mm is None:
        return 0
    if size_mm == 3:
        return 1
    if size_mm == 5:
        return 2
    return 3


@dataclass
class SyntheticSpec:
    seed: int = 0
    n_examples: int = 20
    volume_shape: tuple[int, int, int] = (8, 32, 32)
    spacing_mm: tuple[float, float, float] = (1.0, 1.0, 1.0)
    background_hu: float = -80.0
    noise_hu: float = 40.0
    max_findings: int = 3
    jitter_norm: float = 0.02
    findings: tuple[FindingType, ...] = field(default=DEFAULT_FINDINGS)

    def __post_init__(self):
        if self.n_examples < 1:
            raise ConfigError("n_examples must be >= 1")
        if self.max_findings > len(self.findings):
            raise ConfigError("max_findings exceeds the findings menu")

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "n_examples": self.n_examples,
            "volume_shape": list(self.volume_shape),
            "spacing_mm": list(self.spacing_mm),
            "background_hu": self.background_hu,
            "noise_hu": self.noise_hu,
            "max_findings": self.max_findings,
            "jitter_norm": self.jitter_norm,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        kwargs = dict(d)
        if "volume_shape" in kwargs:
            kwargs["volume_shape"] = tuple(kwargs["volume_shape"])
        if "spacing_mm" in kwargs:
            kwargs["spacing_mm"] = tuple(kwargs["spacing_mm"])
        return cls(**kwargs)


@dataclass
class PlantedFinding:
    type: FindingType
    size_mm: int
    center_norm: tuple[float, float, float]

    def to_json(self) -> dict:
        return {
            "name": self.type.name,
            "region": self.type.region,
            "organ": self.type.organ,
            "keyword": self.type.keyword,
            "size_mm": self.size_mm,
        }


def _rasterize(vox: np.ndarray, center_norm, radii_vox, intensity: float) -> None:
    shape = vox.shape
    center = [c * (s - 1) for c, s in zip(center_norm, shape)]
    lo = [max(0, int(np.floor(c - r - 1))) for c, r in zip(center, radii_vox)]
    hi = [min(s, int(np.ceil(c + r + 2))) for c, r, s in zip(center, radii_vox, shape)]
    zz, yy, xx = np.meshgrid(
        np.arange(lo[0], hi[0]), np.arange(lo[1], hi[1]), np.arange(lo[2], hi[2]), indexing="ij"
    )
    dist2 = (
        ((zz - center[0]) / radii_vox[0]) ** 2
        + ((yy - center[1]) / radii_vox[1]) ** 2
        + ((xx - center[2]) / radii_vox[2]) ** 2
    )
    sub = vox[lo[0] : hi[0], lo[1] : hi[1], lo[2] : hi[2]]
    sub[dist2 <= 1.0] = intensity


def _make_volume(spec: SyntheticSpec, planted: list[PlantedFinding], rng: np.random.Generator) -> np.ndarray:
    vox = rng.normal(spec.background_hu, spec.noise_hu, size=spec.volume_shape).astype(np.float32)
    # size is a diameter in mm; in-plane spacing converts it to voxels, and
    # depth extent is capped so two findings sharing a quadrant never merge
    depth_cap = spec.volume_shape[0] / 4.0 - 0.25
    for pf in planted:
        r = (pf.size_mm / 2.0) / spec.spacing_mm[1]
        radii = (min(r / spec.spacing_mm[0] * spec.spacing_mm[1], depth_cap), r, r)
        _rasterize(vox, pf.center_norm, radii, pf.type.intensity_hu)
    return vox


def _report_sections(planted: list[PlantedFinding]) -> dict[str, list[str]]:
    sections: dict[str, list[str]] = {r: [] for r in REGIONS}
    for pf in planted:
        sections[pf.type.region].append(pf.type.sentence.format(size=pf.size_mm))
    for region in REGIONS:
        if not sections[region]:
            sections[region].append(NORMAL_SENTENCES[region])
    return sections


def _vqa_records(spec: SyntheticSpec, volume_path: str, planted: list[PlantedFinding]) -> list[VqaRecord]:
    per_region = {r: 0 for r in REGIONS}
    sizes: dict[str, int] = {}
    for pf in planted:
        per_region[pf.type.region] += 1
        sizes[pf.type.name] = pf.size_mm

    records = []
    for region in REGIONS:
        records.append(VqaRecord(
            volume_path,
            REGION_COUNT_QUESTION.format(region=region),
            list(COUNT_OPTIONS),
            per_region[region],
        ))
    records.append(VqaRecord(volume_path, TOTAL_COUNT_QUESTION, list(COUNT_OPTIONS), len(planted)))
    for ft in spec.findings:
        records.append(VqaRecord(
            volume_path,
            SIZE_QUESTION.format(name=ft.name),
            list(SIZE_OPTIONS),
            size_option_index(sizes.get(ft.name)),
        ))
    return records


def synthesize_corpus(spec: SyntheticSpec, out_dir) -> dict:
    """Generate volumes, reports, questions and the ground-truth finding list.

    Deterministic for a given spec: per-example generators are spawned from
    one seed sequence, and gzip output carries no timestamps.
    """
    out_dir = Path(out_dir)
    (out_dir / "volumes").mkdir(parents=True, exist_ok=True)

    children = np.random.SeedSequence(spec.seed).spawn(spec.n_examples)
    reports: list[ReportRecord] = []
    questions: list[VqaRecord] = []
    truth_rows: list[dict] = []

    for i in range(spec.n_examples):
        rng = np.random.default_rng(children[i])
        n = int(rng.integers(0, spec.max_findings + 1))
        chosen = sorted(rng.choice(len(spec.findings), size=n, replace=False).tolist())
        planted = []
        for idx in chosen:
            ft = spec.findings[idx]
            size = int(SIZES_MM[rng.integers(0, len(SIZES_MM))])
            jitter = rng.uniform(-spec.jitter_norm, spec.jitter_norm, size=3)
            center = tuple(float(np.clip(c + j, 0.05, 0.95)) for c, j in zip(ft.center_norm, jitter))
            planted.append(PlantedFinding(type=ft, size_mm=size, center_norm=center))

        vox = _make_volume(spec, planted, rng)
        rel_path = f"volumes/vol_{i:04d}.nii.gz"
        save_nifti(Volume(vox, spec.spacing_mm, f"vol_{i:04d}"), out_dir / rel_path)

        reports.append(ReportRecord(volume_path=rel_path, sections=_report_sections(planted)))
        questions.extend(_vqa_records(spec, rel_path, planted))
        truth_rows.append({"volume_path": rel_path, "findings": [pf.to_json() for pf in planted]})

    write_jsonl(out_dir / "reports.jsonl", [r.to_json() for r in reports])
    write_jsonl(out_dir / "vqa.jsonl", [q.to_json() for q in questions])
    write_jsonl(out_dir / "findings.jsonl", truth_rows)
    meta = {"spec": spec.to_dict(), "n_reports": len(reports), "n_questions": len(questions)}
    (out_dir / "meta.json").write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")
    return meta
