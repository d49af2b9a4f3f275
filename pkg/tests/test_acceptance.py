"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v -s`` to see the lines
interleaved, or look for ``[acceptance]`` in the normal output.
"""
import math
import time
from collections import Counter

import numpy as np
import pytest

from raclap import cli, dataio
from raclap import gradcore as gc
from raclap.dataio import SyntheticSpec, generate_synthetic, load_features
from raclap.evaluation import (Direction, EmbeddingSet, caption_relevance, evaluate,
                               evaluate_embeddings)
from raclap.losses import (DistillTemperatures, Modality, distillation_loss, info_nce,
                           kl_divergence, student_similarities, teacher_target)
from raclap.model import ClapModel, snapshot_teacher
from raclap.training import (AdamState, TrainConfig, balanced_batches, contrastive_backward,
                             contrastive_objective, distill_backward, distill_objective,
                             teacher_matrix, train_distill, train_pretrain)
from tests.conftest import random_batch


@pytest.fixture
def report(capsys):
    def emit(number, title, ok, detail):
        with capsys.disabled():
            print(f"\n[acceptance] {number} {'PASS' if ok else 'FAIL'} {title}: {detail}")
        assert ok, detail
    return emit


def _toy(tmp_path, **kw):
    spec = SyntheticSpec(num_pairs=32, cluster_separation=5.0, latent_dim=16, **kw)
    return load_features(generate_synthetic(spec, tmp_path).manifest)


def _perfect(reports):
    return all(r.r_at[1] == 1.0 and r.map_at_10 == 1.0 for r in reports.values())


# 1 ---------------------------------------------------------------------------------

def test_1_gradient_correctness(report):
    started = time.perf_counter()
    worst = {"contrastive": 0.0, "distill": 0.0}
    for seed in range(20):
        model, speech, text = random_batch(seed, n=4, layers=3, frames=5, d=8, d_text=6)
        contrastive_backward(model, speech, text)
        r = gc.check_gradients(lambda: contrastive_objective(model, speech, text),
                               model.parameters(), step=1e-6, vectorized=True)
        worst["contrastive"] = max(worst["contrastive"], r.max_rel_error)

        teacher = snapshot_teacher(model)
        rng = np.random.default_rng(1000 + seed)
        for p in model.parameters():
            p.value = p.value + 0.05 * rng.standard_normal(p.value.shape)
        cfg = TrainConfig(batch_size=4)
        target = teacher_matrix(teacher, speech, text, cfg.temperatures.teacher_scale)
        distill_backward(model, speech, text, target, cfg)
        r = gc.check_gradients(lambda: distill_objective(model, speech, text, target, cfg),
                               model.parameters(), step=1e-6, vectorized=True)
        worst["distill"] = max(worst["distill"], r.max_rel_error)
    elapsed = time.perf_counter() - started
    ok = max(worst.values()) < 1e-5 and elapsed < 30
    report(1, "gradient correctness", ok,
           f"max rel err L_cl {worst['contrastive']:.2e}, L_d {worst['distill']:.2e}, "
           f"{elapsed:.1f}s")


# 2 ---------------------------------------------------------------------------------

def test_2_loss_identities(report):
    e = np.eye(2, 512)
    one = info_nce(e[:1], e[:1], 0.07)
    two = info_nce(e, e, 1.0)
    two_paper = info_nce(e, e, 1.0, "paper_one_directional")
    target = math.log(1 + math.exp(-1))

    rng = np.random.default_rng(0)
    zs = gc.l2_normalize_rows(rng.standard_normal((8, 512)))
    zt = gc.l2_normalize_rows(rng.standard_normal((8, 512)))
    temps = DistillTemperatures()
    c_s, c_t = student_similarities(zs, zt, temps)
    l_d = distillation_loss(c_s, c_t, teacher_target(zs, zt, temps.teacher_scale))

    kl_self, kl_min = 0.0, 0.0
    for seed in range(200):
        r = np.random.default_rng(seed)
        p = gc.softmax_rows(4 * r.standard_normal((5, 7)))
        p[0] = 0.0
        p[0, seed % 7] = 1.0
        kl_self = max(kl_self, abs(kl_divergence(p, np.log(np.where(p > 0, p, 1e-300)))))
        kl_min = min(kl_min, kl_divergence(p, gc.log_softmax_rows(4 * r.standard_normal((5, 7)))))
    ok = (one == 0.0 and abs(two - target) <= 1e-9 and abs(two_paper - target) <= 1e-9
          and abs(l_d) <= 1e-10 and kl_self <= 1e-12 and kl_min >= -1e-12)
    report(2, "loss identities", ok,
           f"N=1 {one}, N=2 err {abs(two - target):.1e}, L_d {l_d:.1e}, "
           f"KL(P,logP) {kl_self:.1e}, min KL {kl_min:.1e}")


# 3 ---------------------------------------------------------------------------------

class _Converged(Exception):
    pass


def test_3_overfit(tmp_path, report):
    data = _toy(tmp_path, seed=0)
    model = ClapModel(data.num_layers, data.speech_dim, data.text_dim, seed=0)
    cfg = TrainConfig(learning_rate=1e-3, batch_size=8, epochs=500, seed=0)
    reached = []

    def check(record, m, state):
        if _perfect(evaluate(m, data)):
            reached.append(record.epoch + 1)
            raise _Converged

    started = time.perf_counter()
    try:
        train_pretrain(model, data, cfg, on_epoch=check)
    except _Converged:
        pass
    elapsed = time.perf_counter() - started
    final = evaluate(model, data)
    ok = bool(reached) and _perfect(final) and elapsed < 60
    detail = "; ".join(r.percent_line() for r in final.values())
    report(3, "overfit reproduction", ok,
           f"perfect after {reached[0] if reached else '>500'} epochs in {elapsed:.1f}s; {detail}")


# 4 ---------------------------------------------------------------------------------

def test_4_distillation_fixed_point_and_descent(tmp_path, report):
    data = _toy(tmp_path, seed=7)
    model = ClapModel(data.num_layers, data.speech_dim, data.text_dim, seed=0)
    train_pretrain(model, data, TrainConfig(learning_rate=1e-3, batch_size=8, epochs=100))
    teacher = snapshot_teacher(model)
    student = teacher.make_student()
    # full batch, so one epoch is one step on the whole toy set
    cfg = TrainConfig(learning_rate=1e-4, batch_size=len(data), epochs=10, seed=0)
    target = teacher_matrix(teacher, data.speech, data.text, cfg.temperatures.teacher_scale)
    at_snapshot = distill_objective(student, data.speech, data.text, target, cfg)

    rng = np.random.default_rng(0)
    for p in student.parameters():
        if p.name.startswith(("speech.W", "speech.b", "text.W", "text.b")):
            p.value = p.value + 0.01 * rng.standard_normal(p.value.shape)
    before = distill_objective(student, data.speech, data.text, target, cfg)
    train_distill(teacher, student, data, cfg)
    after = distill_objective(student, data.speech, data.text, target, cfg)
    reduction = 1 - after / before
    ok = at_snapshot < 1e-10 and reduction >= 0.5 and teacher.digest() == teacher.source_digest
    report(4, "distillation fixed point and descent", ok,
           f"L_d at snapshot {at_snapshot:.1e}; perturbed {before:.4f} -> {after:.4f} "
           f"({100 * reduction:.0f}% reduction)")


# 5 ---------------------------------------------------------------------------------

def _oracle_metrics(q_ids, q, c_ids, c, relevance):
    """Brute-force double loop: sequential dot products, sort by (-sim, id), count."""
    n_q = len(q_ids)
    hits = {1: 0, 5: 0, 10: 0}
    ap_total = 0.0
    for i in sorted(range(n_q), key=lambda i: q_ids[i]):
        sims = []
        for j in range(len(c_ids)):
            s = 0.0
            for k in range(q.shape[1]):
                s += q[i, k] * c[j, k]
            sims.append((-s, c_ids[j]))
        ranked = [cid for _, cid in sorted(sims)]
        rel = relevance[q_ids[i]]
        for k in hits:
            hits[k] += any(x in rel for x in ranked[:k])
        found, ap = 0, 0.0
        for pos, cid in enumerate(ranked[:10], start=1):
            if cid in rel:
                found += 1
                ap += found / pos
        ap_total += ap / min(len(rel), 10)
    return {k: v / n_q for k, v in hits.items()}, ap_total / n_q


def test_5_metric_oracle_equivalence(report):
    mismatches = 0
    for seed in range(50):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, 33))
        d = int(rng.choice([8, 64, 512]))
        ids = [f"x{k:03d}" for k in rng.permutation(n)]
        speech = gc.l2_normalize_rows(rng.standard_normal((n, d)))
        text = gc.l2_normalize_rows(rng.standard_normal((n, d)))
        if n > 3:
            # exact ties exercise the id tie-break
            text[1] = text[0]
            speech[2] = speech[3]
        captions = [f"c{int(v)}" for v in rng.integers(0, max(1, n - n // 4), n)]
        relevance = caption_relevance(ids, captions)
        reports = evaluate_embeddings(EmbeddingSet(ids, speech, Modality.SPEECH),
                                      EmbeddingSet(ids, text, Modality.TEXT), relevance)
        for direction, rep in reports.items():
            q, c = (speech, text) if direction is Direction.AUDIO_TO_TEXT else (text, speech)
            r_at, mp = _oracle_metrics(ids, q, ids, c, relevance)
            if rep.r_at != r_at or rep.map_at_10 != mp:
                mismatches += 1
    report(5, "metric oracle equivalence", mismatches == 0,
           f"{mismatches} mismatching reports over 50 sets x 2 directions")


# 6 ---------------------------------------------------------------------------------

def test_6_balanced_sampler(report):
    sizes = {"PS": 30, "SC": 300, "TS": 30}
    groups, start = {}, 0
    for tag, n in sizes.items():
        groups[tag] = list(range(start, start + n))
        start += n
    total = good = 0
    off_ok = True
    for epoch in range(3):
        for plan in balanced_batches(groups, TrainConfig(batch_size=6, seed=11), epoch):
            total += 1
            good += Counter(plan.tags) == {"PS": 2, "SC": 2, "TS": 2}
        plans = balanced_batches(groups, TrainConfig(batch_size=6, seed=11,
                                                     balanced_sampling=False), epoch)
        seen = Counter(t for p in plans for t in p.tags)
        off_ok &= dict(seen) == sizes
        off_ok &= sorted(i for p in plans for i in p.indices) == list(range(360))
    ok = good == total and off_ok
    report(6, "balanced sampler", ok,
           f"{good}/{total} balanced batches exact; unbalanced counts match sizes: {off_ok}")


# 7 ---------------------------------------------------------------------------------

def test_7_joint_training_trend(tmp_path, report):
    started = time.perf_counter()
    scores = {("A",): [], ("A", "B"): []}
    for seed in range(5):
        spec = SyntheticSpec(num_pairs=128, num_tags=2, tags=("A", "B"), tag_shift=1.5,
                             eval_fraction=0.25, seed=seed)
        corpus = generate_synthetic(spec, tmp_path / f"s{seed}")
        train = load_features(corpus.train_manifest)
        held_b = load_features(corpus.eval_manifest, tags=["B"])
        for tags in scores:
            model = ClapModel(train.num_layers, train.speech_dim, train.text_dim, seed=seed)
            cfg = TrainConfig(learning_rate=1e-3, batch_size=8, epochs=30, seed=seed)
            train_pretrain(model, train.with_tags(tags), cfg)
            reports = evaluate(model, held_b)
            scores[tags].append({
                "R@10": np.mean([r.r_at[10] for r in reports.values()]),
                "mAP@10": np.mean([r.map_at_10 for r in reports.values()]),
            })
    elapsed = time.perf_counter() - started
    mean = {tags: {m: float(np.mean([s[m] for s in v])) for m in ("R@10", "mAP@10")}
            for tags, v in scores.items()}
    joint, alone = mean[("A", "B")], mean[("A",)]
    ok = all(joint[m] >= alone[m] for m in joint) and elapsed < 300
    report(7, "joint-training trend", ok,
           f"B eval, mean of 5 seeds: A-only R@10 {alone['R@10']:.3f} mAP@10 "
           f"{alone['mAP@10']:.3f}; A+B R@10 {joint['R@10']:.3f} mAP@10 {joint['mAP@10']:.3f}; "
           f"{elapsed:.1f}s")


# 8 ---------------------------------------------------------------------------------

def _pipeline(root):
    common = ["--seed", "5", "--set", "synth.num_pairs=24", "--set", "synth.eval_fraction=0.25",
              "--set", "train.batch_size=6", "--set", "train.learning_rate=1e-3"]
    data, run = root / "data", root / "run"
    steps = [
        ["gen-synthetic", "--out", data],
        ["train", "--manifest", data / "train.tsv", "--out", run, "--set", "train.epochs=20",
         "--set", f"data.eval_manifest={data / 'eval.tsv'}"],
        ["distill", "--teacher", run / "model_pretrain.ckpt", "--manifest", data / "train.tsv",
         "--out", run, "--set", "train.epochs=5"],
        ["eval", "--checkpoint", run / "model_distill.ckpt", "--manifest", data / "eval.tsv",
         "--out", run / "eval"],
    ]
    for argv in steps:
        code = cli.main([str(a) for a in argv] + common)
        assert code == 0, argv
    return run


def test_8_determinism_and_persistence(tmp_path, report, capsys):
    runs = [_pipeline(tmp_path / name) for name in ("first", "second")]
    capsys.readouterr()
    artefacts = ["model_pretrain.ckpt", "model_distill.ckpt",
                 "eval/metrics_audio_to_text.txt", "eval/metrics_text_to_audio.txt",
                 "eval/metrics_audio_to_text.json", "eval/metrics_text_to_audio.json"]
    differing = [a for a in artefacts
                 if (runs[0] / a).read_bytes() != (runs[1] / a).read_bytes()]
    # the third log column is wall time; epoch and loss must still agree exactly
    logs = [[line.split("\t")[:2] for line in (r / "train_log.txt").read_text().splitlines()]
            for r in runs]
    logs_equal = logs[0] == logs[1]

    round_trip = True
    for name in ("model_pretrain.ckpt", "model_distill.ckpt"):
        ckpt = dataio.load_checkpoint(runs[0] / name)
        model = ckpt.to_model()
        round_trip &= all(np.array_equal(model.state()[k], ckpt.params[k]) for k in ckpt.params)
        copy = tmp_path / f"copy_{name}"
        opt = AdamState.from_dict(ckpt.optimizer) if ckpt.optimizer is not None else None
        dataio.save_checkpoint(model, copy, stage=ckpt.stage, seed=ckpt.seed, config=ckpt.config,
                               optimizer=opt)
        round_trip &= copy.read_bytes() == (runs[0] / name).read_bytes()
    ok = not differing and logs_equal and round_trip
    report(8, "determinism and persistence", ok,
           f"{len(artefacts) - len(differing)}/{len(artefacts)} checkpoints and reports "
           f"byte-identical across runs; loss logs equal: {logs_equal}; "
           f"checkpoint round trip bit-exact: {round_trip}")
