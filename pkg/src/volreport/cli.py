"""Command-line entrypoint wiring the full pipeline:
synth -> ingest -> harmonize -> train -> generate -> eval, plus selftest.

Errors derived from VolreportError exit 1 with one machine-parseable JSON
line on stderr; argparse usage errors exit 2.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import checkpoint, evaluate, pipeline, selftest
from .config import RunConfig
from .errors import DataError
from .errors import VolreportError
from .harmonize import (OrganLexicon, ReportRecord, VqaRecord, build_dataset,
                        harmonize_report, read_jsonl, write_jsonl)
from .lm import LmConfig
from .model import ModelConfig, ReportModel, load_default_templates
from .nifti import PreprocessConfig, load_nifti, preprocess
from .synth import SyntheticSpec, synthesize_corpus
from .tokenizer import decode
from .train import TrainConfig, format_param_report, param_count, train_loop
from .vision import VisionConfig

TRAIN_DEFAULTS = {
    "lr": 1e-5,
    "batch_size": 8,
    "epochs": 8,
    "weight_decay": 0.01,
    "grad_clip": 1.0,
    "seed": 0,
    "precision": "float32",
    "max_steps": None,
    "lora_rank": 8,
    "lora_alpha": 16.0,
    "d_lm": 128,
    "lm_layers": 2,
    "lm_heads": 4,
    "max_seq_len": 160,
}


def _parse_triplet(text: str) -> tuple[int, int, int]:
    parts = [int(x) for x in text.split(",")]
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected D,H,W got {text!r}")
    return tuple(parts)


def _parse_pair(text: str) -> tuple[float, float]:
    parts = [float(x) for x in text.split(",")]
    if len(parts) != 2:
        raise argparse.ArgumentTypeError(f"expected lo,hi got {text!r}")
    return tuple(parts)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="volreport",
                                 description="volumetric report generation toolkit")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic scan corpus with ground truth")
    p.add_argument("--spec", help="JSON file of corpus settings")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--n", type=int, default=None, help="number of volumes")
    p.add_argument("--split", type=float, default=0.75, help="train fraction")

    p = sub.add_parser("ingest", help="parse volumes and cache preprocessed tensors")
    p.add_argument("--in", dest="inputs", required=True, nargs="+")
    p.add_argument("--out", required=True)
    p.add_argument("--shape", type=_parse_triplet, default=(8, 32, 32))
    p.add_argument("--window", type=_parse_pair, default=(-1000.0, 1000.0))
    p.add_argument("--mode", choices=("trilinear", "nearest"), default="trilinear")

    p = sub.add_parser("harmonize", help="route report sentences into body regions")
    p.add_argument("--in", dest="inputs", required=True)
    p.add_argument("--lexicon", help="organ lexicon JSON (default: bundled)")
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train on MRG and/or VQA rows")
    p.add_argument("--task", choices=pipeline.TASKS, required=True)
    p.add_argument("--data", required=True, nargs="+", help="JSONL row files")
    p.add_argument("--config", help="JSON training config file")
    p.add_argument("--out", required=True)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--precision", choices=("float32", "float64"))
    p.add_argument("--max-steps", type=int)

    p = sub.add_parser("generate", help="generate a report or answer from a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--volume", required=True)
    p.add_argument("--region", choices=("chest", "abdomen", "pelvis"))
    p.add_argument("--question")
    p.add_argument("--options", help="semicolon-separated option texts")
    p.add_argument("--mode", choices=("greedy", "temperature", "top_k"), default="greedy")
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--top-k", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-new", type=int, default=48)
    p.add_argument("--json", action="store_true")

    p = sub.add_parser("eval", help="score a checkpoint on MRG or VQA rows")
    p.add_argument("--task", choices=("mrg", "vqa"), required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--findings", help="planted-findings JSONL for recall (MRG)")
    p.add_argument("--out", help="write metrics JSON here")

    sub.add_parser("selftest", help="run the built-in gradient and identity checks")
    return ap


def _load_model(ckpt: str) -> ReportModel:
    path = Path(ckpt)
    if (path / "final").exists():
        path = path / "final"
    return ReportModel.load(path)


def cmd_synth(args) -> int:
    spec_kwargs = {}
    if args.spec:
        spec_kwargs = json.loads(Path(args.spec).read_text(encoding="utf-8"))
    spec = SyntheticSpec.from_dict(spec_kwargs) if spec_kwargs else SyntheticSpec()
    if args.seed is not None:
        spec.seed = args.seed
    if args.n is not None:
        spec.n_examples = args.n
    out = Path(args.out)
    meta = synthesize_corpus(spec, out)
    reports = [ReportRecord.from_json(r) for r in read_jsonl(out / "reports.jsonl")]
    vqa = [VqaRecord.from_json(r) for r in read_jsonl(out / "vqa.jsonl")]
    summary = build_dataset(reports, vqa, out, train_fraction=args.split,
                            seed=spec.seed, volume_root=out)
    print(json.dumps({"synth": meta, "dataset": summary}, indent=2))
    return 0


def cmd_ingest(args) -> int:
    cfg = PreprocessConfig(target_shape=args.shape, window=args.window, resample_mode=args.mode)
    tensors = {}
    for item in args.inputs:
        path = Path(item)
        files = sorted(path.glob("**/*.nii*")) if path.is_dir() else [path]
        if not files:
            raise DataError(f"no NIfTI files under {path}")
        for f in files:
            vol = load_nifti(f)
            tensors[vol.source_id or f.stem] = preprocess(vol, cfg)
    checkpoint.save_checkpoint(args.out, tensors, configs={"preprocess": cfg.to_dict()})
    print(json.dumps({"ingested": len(tensors), "out": str(args.out)}))
    return 0


def cmd_harmonize(args) -> int:
    lexicon = OrganLexicon.from_json(args.lexicon) if args.lexicon else OrganLexicon.load_default()
    rows_out = []
    dropped_total = 0
    for row in read_jsonl(args.inputs):
        sections, dropped = harmonize_report(row["report_text"], lexicon)
        dropped_total += dropped
        rows_out.append({
            "volume_path": row.get("volume_path", ""),
            "sections": sections,
            "source": "harmonized",
        })
    write_jsonl(args.out, rows_out)
    print(json.dumps({"records": len(rows_out), "dropped_sentences": dropped_total,
                      "out": str(args.out)}))
    return 0


def cmd_train(args) -> int:
    run_cfg = RunConfig(TRAIN_DEFAULTS)
    if args.config:
        run_cfg.apply_file(args.config)
    run_cfg.apply_env()
    run_cfg.apply_flags({
        "lr": args.lr,
        "batch_size": args.batch_size,
        "epochs": args.epochs,
        "seed": args.seed,
        "precision": args.precision,
        "max_steps": args.max_steps,
    })
    print("resolved config:")
    for line in run_cfg.provenance_lines():
        print(line)

    rows = pipeline.load_task_rows(args.data, args.task)
    templates = load_default_templates()
    vocab = pipeline.build_vocab_for_rows(rows, templates)
    pp = PreprocessConfig()
    model_cfg = ModelConfig(
        vision=VisionConfig(d_lm=run_cfg["d_lm"]),
        lm=LmConfig(vocab_size=vocab.size, d_lm=run_cfg["d_lm"],
                    n_layers=run_cfg["lm_layers"], n_heads=run_cfg["lm_heads"],
                    max_seq_len=run_cfg["max_seq_len"]),
        preprocess=pp,
        lora_rank=run_cfg["lora_rank"],
        lora_alpha=run_cfg["lora_alpha"],
        precision=run_cfg["precision"],
    )
    model = ReportModel.build(model_cfg, vocab, templates, seed=run_cfg["seed"])
    print(format_param_report(param_count(model.parameter_groups())))

    cache = pipeline.VolumeCache(pp, dtype=run_cfg["precision"])
    examples = pipeline.make_examples(model, rows, cache)
    train_cfg = TrainConfig(
        lr=run_cfg["lr"], batch_size=run_cfg["batch_size"], epochs=run_cfg["epochs"],
        weight_decay=run_cfg["weight_decay"], grad_clip=run_cfg["grad_clip"],
        seed=run_cfg["seed"], precision=run_cfg["precision"], max_steps=run_cfg["max_steps"],
    )
    records = train_loop(examples, model, train_cfg, out_dir=args.out)
    print(json.dumps({"steps": len(records),
                      "final_loss": records[-1].loss if records else None,
                      "out": str(args.out)}))
    return 0


def cmd_generate(args) -> int:
    model = _load_model(args.ckpt)
    volume = load_nifti(args.volume)
    gen_kwargs = dict(mode=args.mode, temperature=args.temperature, top_k=args.top_k,
                      seed=args.seed, max_new=args.max_new)
    if args.question:
        options = [o.strip() for o in (args.options or "").split(";") if o.strip()]
        if len(options) < 2:
            raise DataError("VQA generation needs --options with at least two entries")
        text = model.answer_question(volume, args.question, options, **gen_kwargs)
        payload = {"task": "vqa", "question": args.question, "answer": text,
                   "option_index": evaluate.parse_option_letter(text, len(options))}
    elif args.region:
        text = model.generate_report(volume, args.region, **gen_kwargs)
        payload = {"task": "mrg", "region": args.region, "report": text}
    else:
        raise DataError("generate needs --region (MRG) or --question/--options (VQA)")
    print(json.dumps(payload, indent=2) if args.json else text)
    return 0


def cmd_eval(args) -> int:
    model = _load_model(args.ckpt)
    rows = pipeline.load_task_rows(args.data, args.task)
    cache = pipeline.VolumeCache(model.cfg.preprocess, dtype=model.cfg.precision)
    # key rows and ground truth by resolved path so different roots agree
    for row in rows:
        row["volume_path"] = str(cache.resolve(row).resolve())
        row["_root"] = "/"

    reports = []
    if args.task == "vqa":
        records = pipeline.vqa_records_of(rows)
        preds = []
        for row, rec in zip(rows, records):
            ids = model.generate_ids(cache.get(row),
                                     model.vqa_prompt_ids(rec.question, rec.options),
                                     max_new=4)
            preds.append(decode(ids, model.vocab))
        reports.append(evaluate.vqa_accuracy(preds, records))
    else:
        findings_path = args.findings or pipeline.locate_findings_file(args.data)
        fbv = None
        if findings_path:
            root = Path(findings_path).parent
            fbv = {str((root / vp).resolve()): f
                   for vp, f in pipeline.findings_by_volume(findings_path).items()}

        def loader(volume_path):
            return cache.get({"volume_path": volume_path, "_root": "/"})

        lcs_report, recall_report = evaluate.evaluate_mrg(model, rows, fbv, loader)
        reports.append(lcs_report)
        if recall_report is not None:
            reports.append(recall_report)

    for rep in reports:
        print(rep.table())
        print()
    payload = evaluate.reports_to_json(reports)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(payload + "\n", encoding="utf-8")
    else:
        print(payload)
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "ingest": cmd_ingest,
    "harmonize": cmd_harmonize,
    "train": cmd_train,
    "generate": cmd_generate,
    "eval": cmd_eval,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "selftest":
        return selftest.run()
    try:
        return COMMANDS[args.command](args)
    except VolreportError as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
