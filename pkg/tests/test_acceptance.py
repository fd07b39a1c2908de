"""Acceptance gate: one test per criterion, each printing a PASS line.

The end-to-end learning-signal test trains a full toy model and takes
around 20 minutes on a laptop CPU; everything else is fast. Run with -s to
watch the per-criterion lines.
"""

import json
import time

import numpy as np
import pytest

from gradcheck import max_grad_error
from volreport import cli, evaluate, nifti, pipeline
from volreport import lm as L
from volreport import tensor as T
from volreport import train as tr
from volreport.harmonize import OrganLexicon, read_jsonl, route_sentence
from volreport.lm import LmConfig
from volreport.model import ModelConfig, ReportModel
from volreport.nifti import PreprocessConfig
from volreport.synth import SyntheticSpec, synthesize_corpus
from volreport.tokenizer import build_vocab, decode
from volreport.vision import ImageContext, VisionConfig

rng = np.random.default_rng(2024)


def _announce(line: str) -> None:
    print(f"\nPASS: {line}")


# ---------------------------------------------------------------------------
# shared toy fixtures


def small_vision():
    return VisionConfig(patch_size=(2, 4, 4), d_vis=16, n_layers=2, n_heads=2,
                        pool_stride=(1, 2, 2), d_lm=32)


def small_model_cfg(vocab_size, precision="float32"):
    return ModelConfig(
        vision=small_vision(),
        lm=LmConfig(vocab_size=vocab_size, d_lm=32, n_layers=2, n_heads=2, max_seq_len=96),
        preprocess=PreprocessConfig(target_shape=(4, 8, 8)),
        lora_rank=4,
        precision=precision,
    )


@pytest.fixture(scope="module")
def overfit_corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("overfit_corpus")
    code = cli.main(["synth", "--out", str(out), "--seed", "3", "--n", "8", "--split", "1.0"])
    assert code == 0
    return out


@pytest.fixture(scope="module")
def e2e(tmp_path_factory):
    """Synthesize the 200-volume corpus and train one joint model via the CLI."""
    root = tmp_path_factory.mktemp("e2e")
    corpus = root / "corpus"
    t0 = time.perf_counter()
    assert cli.main(["synth", "--out", str(corpus), "--seed", "7", "--n", "200"]) == 0
    run = root / "run"
    assert cli.main([
        "train", "--task", "both",
        "--data", str(corpus / "mrg_train.jsonl"), str(corpus / "vqa_train.jsonl"),
        "--out", str(run),
        "--epochs", "40", "--batch-size", "16", "--lr", "7e-4", "--seed", "0",
    ]) == 0
    assert cli.main(["eval", "--task", "vqa", "--data", str(corpus / "vqa_val.jsonl"),
                     "--ckpt", str(run), "--out", str(root / "vqa.json")]) == 0
    assert cli.main(["eval", "--task", "mrg", "--data", str(corpus / "mrg_val.jsonl"),
                     "--ckpt", str(run), "--out", str(root / "mrg.json")]) == 0
    return {
        "corpus": corpus,
        "run": run,
        "vqa_metrics": json.loads((root / "vqa.json").read_text()),
        "mrg_metrics": json.loads((root / "mrg.json").read_text()),
        "seconds": time.perf_counter() - t0,
    }


# ---------------------------------------------------------------------------
# criteria


def test_gradient_suite_every_op_and_full_stack():
    t0 = time.perf_counter()

    def fd(fn, tensors, samples=5):
        err = max_grad_error(fn, tensors, rng, samples=samples)
        assert err < 1e-4, err
        return err

    worst = 0.0
    for shape in [(2, 3), (4, 5), (3, 7)]:
        a = T.Tensor(rng.normal(size=shape), requires_grad=True, dtype="float64")
        b = T.Tensor(rng.normal(size=shape), requires_grad=True, dtype="float64")
        g = T.Tensor(rng.normal(size=shape[-1]), requires_grad=True, dtype="float64")
        bias = T.Tensor(rng.normal(size=shape[-1]), requires_grad=True, dtype="float64")
        cases = [
            (lambda: T.mean(T.add(a, b) * T.sub(a, b)), [a, b]),
            (lambda: T.mean(a * b) + T.tensor_sum(a) * 0.01, [a, b]),
            (lambda: T.mean(T.matmul(a, T.transpose(b))), [a, b]),
            (lambda: T.mean(T.softmax(a, axis=-1) * T.gelu(b)), [a, b]),
            (lambda: T.mean(T.log_softmax(a, axis=-1) * T.gelu(b)), [a, b]),
            (lambda: T.mean(T.layer_norm(a, g, bias) * b), [a, g, bias, b]),
            (lambda: T.mean(T.reshape(T.concat([a, b], axis=0), (-1,)) * 1.3), [a, b]),
            (lambda: T.mean(T.tensor_sum(a, axis=0) * T.mean(b, axis=0)), [a, b]),
        ]
        for fn, tensors in cases:
            worst = max(worst, fd(fn, tensors))
    table = T.Tensor(rng.normal(size=(9, 6)), requires_grad=True, dtype="float64")
    logits = T.Tensor(rng.normal(size=(5, 7)), requires_grad=True, dtype="float64")
    ids = np.array([0, 8, 3, 3], np.int64)
    rows = np.array([0, 2, 4], np.int64)
    cols = np.array([1, 6, 0], np.int64)
    worst = max(worst, fd(
        lambda: T.mean(T.embedding_lookup(table, ids) * 2.0)
        + T.tensor_sum(T.take_pairs(logits, rows, cols))
        + T.mean(T.take_rows(logits, rows)),
        [table, logits]))

    # full vision + LM stack, float64
    vocab = build_vocab(["alpha beta gamma delta epsilon zeta"])
    cfg = small_model_cfg(vocab.size, precision="float64")
    model = ReportModel.build(cfg, vocab, seed=0)
    vox = rng.normal(size=(4, 8, 8))
    prompt = model.mrg_prompt_ids("abdomen")
    target = [5, 6, vocab.eos_id]

    def stack():
        logits_t, inp = model.forward_example(vox, prompt, target)
        return tr.masked_ce_loss(logits_t, inp.token_ids, inp.answer_mask)

    params = model.named_parameters()
    for p in params.values():
        p.requires_grad = True  # include the frozen base in the check
    subset = [params[k] for k in
              ("vision.patch_w", "vision.pos", "vision.blocks.0.wq", "vision.proj_w1",
               "lm.tok_embed", "lm.pos_embed", "lm.blocks.0.wv", "lm.blocks.1.w1",
               "lm.head_w", "lora.blocks.0.wq.A", "lora.blocks.0.wq.B")]
    worst = max(worst, max_grad_error(stack, subset, rng, samples=3))
    assert worst < 1e-4
    elapsed = time.perf_counter() - t0
    assert elapsed < 120, f"gradient suite took {elapsed:.0f}s"
    _announce(f"gradient suite: every op + full vision+LM stack, rel err {worst:.2e} < 1e-4 "
              f"in {elapsed:.0f}s (< 2 min)")


def test_lora_identity_fresh_adapters():
    vocab = build_vocab(["alpha beta gamma delta"])
    cfg = small_model_cfg(vocab.size, precision="float64")
    model = ReportModel.build(cfg, vocab, seed=1)
    img = ImageContext(tokens=T.Tensor(rng.normal(size=(4, 32)), dtype="float64"))
    inp = L.assemble_input([5, vocab.img_id, 6], img, [7, 8], vocab,
                           model.lm_params["tok_embed"], cfg.lm.max_seq_len)
    adapted = L.lm_forward(inp, cfg.lm, model.lm_params, model.adapters).data
    base = L.lm_forward(inp, cfg.lm, model.lm_params, None).data
    assert np.array_equal(adapted, base)
    _announce("LoRA identity: fresh adapters (B=0) leave all logits bitwise unchanged (64-bit)")


def _toy_examples_from_corpus(corpus, model, task, limit):
    rows = pipeline.load_task_rows([corpus / f"{task}_train.jsonl"], task)[:limit]
    cache = pipeline.VolumeCache(model.cfg.preprocess, dtype=model.cfg.precision)
    return pipeline.make_examples(model, rows, cache), rows


def test_freeze_contract_full_training_run(overfit_corpus, tmp_path):
    from volreport.model import load_default_templates

    rows = pipeline.load_task_rows([overfit_corpus / "mrg_train.jsonl"], "mrg")[:12]
    vocab = pipeline.build_vocab_for_rows(rows, load_default_templates())
    cfg = ModelConfig(vision=VisionConfig(), lm=LmConfig(vocab_size=vocab.size),
                      preprocess=PreprocessConfig())
    model = ReportModel.build(cfg, vocab, seed=0)
    frozen_before = {k: t.data.copy() for k, t in model.frozen_params().items()}
    trainable_before = {k: t.data.copy() for k, t in model.trainable_params().items()}
    cache = pipeline.VolumeCache(cfg.preprocess)
    examples = pipeline.make_examples(model, rows, cache)
    tr.train_loop(examples, model, tr.TrainConfig(lr=1e-3, batch_size=4, epochs=2, seed=0),
                  out_dir=tmp_path / "run")
    for k, before in frozen_before.items():
        assert np.array_equal(model.frozen_params()[k].data, before), f"frozen {k} changed"
    changed = [k for k, before in trainable_before.items()
               if not np.array_equal(model.trainable_params()[k].data, before)]
    groups_changed = {k.split(".")[0] for k in changed}
    assert {"vision", "lora"} <= groups_changed
    assert any(k.startswith("vision.proj_") for k in changed)
    _announce("freeze contract: LM base bitwise unchanged after a full training run; "
              f"{len(changed)} vision/projector/LoRA tensors changed")


def test_eq1_eq2_duality_100_cases():
    vocab = build_vocab(["alpha beta gamma delta epsilon zeta eta theta iota kappa"])
    cfg = small_model_cfg(vocab.size, precision="float64")
    model = ReportModel.build(cfg, vocab, seed=2)
    gen = np.random.default_rng(99)
    worst = 0.0
    for _ in range(100):
        n_img = int(gen.integers(1, 5))
        img = ImageContext(tokens=T.Tensor(gen.normal(size=(n_img, 32)), dtype="float64"))
        words = list(gen.integers(5, vocab.size, size=gen.integers(1, 6)))
        prompt = words[:1] + [vocab.img_id] + words[1:]
        target = [int(x) for x in gen.integers(5, vocab.size, size=gen.integers(1, 8))]
        lp = L.sequence_log_prob(prompt, img, target, cfg.lm, model.lm_params,
                                 model.adapters, vocab)
        inp = L.assemble_input(prompt, img, target, vocab, model.lm_params["tok_embed"],
                               cfg.lm.max_seq_len)
        logits = L.lm_forward(inp, cfg.lm, model.lm_params, model.adapters)
        ce_sum, _ = tr.sum_ce_and_count(logits, inp.token_ids, inp.answer_mask)
        worst = max(worst, abs(lp - (-ce_sum.item())))
    assert worst < 1e-6
    _announce(f"log-prob / masked-CE duality on 100 random cases: max |diff| {worst:.2e} < 1e-6")


def test_overfit_convergence(overfit_corpus):
    t0 = time.perf_counter()
    reached = {}
    for task, threshold in (("mrg", 0.1), ("vqa", 0.05)):
        rows = pipeline.load_task_rows([overfit_corpus / f"{task}_train.jsonl"], task)[:16]
        assert len(rows) == 16
        from volreport.model import load_default_templates

        vocab = pipeline.build_vocab_for_rows(rows, load_default_templates())
        cfg = ModelConfig(vision=VisionConfig(), lm=LmConfig(vocab_size=vocab.size),
                          preprocess=PreprocessConfig())
        model = ReportModel.build(cfg, vocab, seed=0)
        cache = pipeline.VolumeCache(cfg.preprocess)
        examples = pipeline.make_examples(model, rows, cache)
        hit_step = None

        def stop_when_converged(rec):
            nonlocal hit_step
            if rec.loss < threshold:
                hit_step = rec.step
                return False

        tr.train_loop(examples, model,
                      tr.TrainConfig(lr=3e-3, batch_size=16, epochs=500, weight_decay=0.0,
                                     seed=0, max_steps=500),
                      on_step=stop_when_converged)
        assert hit_step is not None and hit_step <= 500, f"{task} CE never dropped below {threshold}"
        reached[task] = hit_step
    elapsed = time.perf_counter() - t0
    assert elapsed < 600, f"overfit harness took {elapsed:.0f}s"
    _announce(f"overfit analog: MRG CE<0.1 at step {reached['mrg']}, VQA CE<0.05 at step "
              f"{reached['vqa']} (both within 500 steps, {elapsed:.0f}s < 10 min)")


def test_nifti_roundtrip_50_volumes():
    gen = np.random.default_rng(123)
    dtypes = ["uint8", "int16", "int32", "float32", "float64"]
    count = 0
    for i in range(50):
        dtype = dtypes[i % len(dtypes)]
        little = bool(i % 2)
        shape = tuple(gen.integers(2, 9, size=3))
        if dtype.startswith(("u", "i")):
            vox = gen.integers(0, 250, size=shape).astype(np.float32)
        else:
            vox = gen.normal(scale=50, size=shape).astype(dtype)
            vox = vox.astype(np.float64 if dtype == "float64" else np.float32)
        spacing = tuple(float(np.float32(x)) for x in gen.uniform(0.5, 4.0, size=3))
        vol = nifti.Volume(vox, spacing, f"v{i}")
        _, back = nifti.parse_nifti(nifti.write_nifti(vol, dtype=dtype, little_endian=little))
        assert np.array_equal(back.voxels, vol.voxels), (dtype, little)
        assert back.spacing_mm == vol.spacing_mm
        count += 1
    assert count == 50
    _announce("NIfTI parse(write(v)) identity on 50 randomized volumes, "
              "all 5 dtypes, both byte orders")


def test_harmonizer_routing_500_sentences(tmp_path):
    lexicon = OrganLexicon.load_default()
    synthesize_corpus(SyntheticSpec(seed=21, n_examples=160), tmp_path)
    checked = 0
    for rec in read_jsonl(tmp_path / "reports.jsonl"):
        for region, sentences in rec["sections"].items():
            for s in sentences:
                assert route_sentence(s, lexicon) == {region}, s
                checked += 1
    assert checked >= 500
    multi = "the lungs and liver are both unremarkable."
    assert route_sentence(multi, lexicon) == {"chest", "abdomen"}
    from volreport.harmonize import harmonize_report

    sections, _ = harmonize_report(multi, lexicon)
    assert set(sections) == {"chest", "abdomen"}
    assert sections["chest"] == sections["abdomen"] == [multi]
    _announce(f"harmonizer: {checked} generated sentences all route to their region; "
              "multi-organ sentences appear in every matched region")


def test_determinism_train_eval_float64(tmp_path):
    corpus = tmp_path / "corpus"
    assert cli.main(["synth", "--out", str(corpus), "--seed", "5", "--n", "8",
                     "--split", "0.75"]) == 0
    logs, metrics = [], []
    for run in range(2):
        out = tmp_path / f"run{run}"
        assert cli.main([
            "train", "--task", "vqa", "--data", str(corpus / "vqa_train.jsonl"),
            "--out", str(out), "--epochs", "2", "--batch-size", "4",
            "--lr", "1e-3", "--seed", "11", "--precision", "float64", "--max-steps", "8",
        ]) == 0
        assert cli.main(["eval", "--task", "vqa", "--data", str(corpus / "vqa_val.jsonl"),
                         "--ckpt", str(out), "--out", str(out / "metrics.json")]) == 0
        rows = [json.loads(line) for line in (out / "losses.jsonl").read_text().splitlines()]
        logs.append([(r["step"], r["loss"], r["tokens"]) for r in rows])
        metrics.append((out / "metrics.json").read_bytes())
    assert logs[0] == logs[1], "loss logs differ between identically-seeded runs"
    assert metrics[0] == metrics[1], "metric JSON differs between identically-seeded runs"
    _announce("determinism: identically-seeded train+eval reruns reproduce the loss log "
              "(step/loss/tokens) and metric JSON exactly (64-bit)")


def test_table1_macro_average_rounding():
    avg = evaluate.macro_average([0.20, 0.32, 0.37])
    assert evaluate.round_half_up(avg) == 0.30
    rep = evaluate.EvalReport(task="mrg", metric="lcs_overlap_f1",
                              per_region={"chest": 0.20, "abdomen": 0.32, "pelvis": 0.37},
                              n_examples=3)
    assert f"{evaluate.round_half_up(rep.average):.2f}" == "0.30"
    assert "0.30" in rep.table()
    _announce("table arithmetic: macro average of (0.20, 0.32, 0.37) renders 0.30 "
              "under documented half-up rounding")


# -- end-to-end learning signal (the long one) ------------------------------


def test_end_to_end_learning_signal(e2e):
    vqa_overall = e2e["vqa_metrics"][0]["overall"]
    recall_avg = next(m for m in e2e["mrg_metrics"] if m["metric"] == "finding_recall")["average"]

    # untrained baseline with the same vocabulary and config
    corpus = e2e["corpus"]
    from volreport.model import load_default_templates

    templates = load_default_templates()
    train_rows = pipeline.load_task_rows(
        [corpus / "mrg_train.jsonl", corpus / "vqa_train.jsonl"], "both")
    vocab = pipeline.build_vocab_for_rows(train_rows, templates)
    cfg = ModelConfig(vision=VisionConfig(), lm=LmConfig(vocab_size=vocab.size),
                      preprocess=PreprocessConfig())
    untrained = ReportModel.build(cfg, vocab, seed=0)
    cache = pipeline.VolumeCache(cfg.preprocess)

    vqa_val = pipeline.load_task_rows([corpus / "vqa_val.jsonl"], "vqa")
    records = pipeline.vqa_records_of(vqa_val)
    preds = []
    for row, rec in zip(vqa_val, records):
        ids = untrained.generate_ids(cache.get(row),
                                     untrained.vqa_prompt_ids(rec.question, rec.options),
                                     max_new=4)
        preds.append(decode(ids, vocab))
    base_vqa = evaluate.vqa_accuracy(preds, records).overall

    mrg_val = pipeline.load_task_rows([corpus / "mrg_val.jsonl"], "mrg")
    fbv = {str((corpus / vp).resolve()): f
           for vp, f in pipeline.findings_by_volume(corpus / "findings.jsonl").items()}
    for row in mrg_val:
        row["volume_path"] = str(cache.resolve(row).resolve())
        row["_root"] = "/"
    _, base_recall_rep = evaluate.evaluate_mrg(
        untrained, mrg_val, fbv,
        lambda vp: cache.get({"volume_path": vp, "_root": "/"}), max_new=48)
    base_recall = base_recall_rep.average

    assert vqa_overall >= 0.8, f"trained VQA accuracy {vqa_overall:.3f} < 0.8"
    assert recall_avg >= 0.7, f"trained finding recall {recall_avg:.3f} < 0.7"
    assert base_vqa <= 0.35, f"untrained VQA accuracy {base_vqa:.3f} > 0.35"
    assert base_recall <= 0.1, f"untrained finding recall {base_recall:.3f} > 0.1"
    assert e2e["seconds"] < 1800, f"end-to-end run took {e2e['seconds']:.0f}s"
    _announce(
        f"end-to-end learning signal: VQA {vqa_overall:.3f} >= 0.8 (untrained {base_vqa:.3f}"
        f" <= 0.35), finding recall {recall_avg:.3f} >= 0.7 (untrained {base_recall:.3f}"
        f" <= 0.1), {e2e['seconds']:.0f}s < 30 min"
    )
