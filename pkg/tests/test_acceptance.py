"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v``. Criteria 6 and 7 train
real models and take several minutes each (marked ``slow``).
"""

import json
import math
import time
from dataclasses import replace

import numpy as np
import pytest

from morecap.autodiff import Tensor
from morecap.cli import STUDY_CONFIG, main
from morecap.config import GeneratorConfig, RunConfig
from morecap.data import ObjectProposal, Scene, generate_synthetic, split_of
from morecap.decoder import DecoderParams, DecoderState, decode_step
from morecap.geometry import VERTICAL_BOTTOM, VERTICAL_NONE, VERTICAL_TOP, Box3, corners, vertical_case
from morecap.gradcheck import TOLERANCE, run_gradcheck
from morecap.metrics import CorpusStats, EvalRecord, bleu4, cider, m_at_k_iou, rouge_l
from morecap.otag import OtagParams, otag_batch
from morecap.pipeline import (
    build_model,
    make_dataset,
    predict,
    references_by_object,
    score_report,
    train,
    vertical_accuracy,
)
from morecap.slgc import SlgcParams, build_layout_graph, slgc_forward
from morecap.study import madgap_sweep

from test_slgc import BANK


@pytest.fixture
def report(capsys):
    def emit(n, name, ok, detail=""):
        with capsys.disabled():
            print(f"\ncriterion {n} {name}: {'PASS' if ok else 'FAIL'} {detail}".rstrip())
        assert ok, f"criterion {n} {name} failed: {detail}"

    return emit


def test_c1_gradient_fidelity(report):
    t = time.perf_counter()
    results = run_gradcheck()
    dt = time.perf_counter() - t
    worst = max(r.max_rel_error for r in results)
    bad = [r.component for r in results if not r.passed]
    ok = not bad and worst < TOLERANCE and dt < 60
    report(1, "gradient fidelity", ok, f"(max_rel_err={worst:.2e}, {dt:.1f}s, failing={bad})")


def test_c2_vertical_oracle(report):
    rng = np.random.default_rng(2024)
    lo, hi = np.array([-2, -2, -2, 0.05, 0.05, 0.05]), np.array([2, 2, 2, 2, 2, 2])
    params = rng.uniform(lo, hi, size=(10_000, 2, 6))
    t = time.perf_counter()
    mismatch = asym = 0
    for a_p, b_p in params:
        a, b = Box3(*a_p), Box3(*b_p)
        d = corners(a)[:, 2][:, None] - corners(b)[:, 2][None, :]   # 64 corner pairs
        want = VERTICAL_TOP if (d > 0).all() else VERTICAL_BOTTOM if (d < 0).all() else VERTICAL_NONE
        got, rev = vertical_case(a, b), vertical_case(b, a)
        mismatch += got != want
        flip = {VERTICAL_TOP: VERTICAL_BOTTOM, VERTICAL_BOTTOM: VERTICAL_TOP, VERTICAL_NONE: VERTICAL_NONE}
        asym += rev != flip[got]
    dt = time.perf_counter() - t
    report(2, "vertical oracle", mismatch == 0 and asym == 0 and dt < 5,
           f"(mismatches={mismatch}, antisymmetry violations={asym}, {dt:.2f}s)")


def _random_scene(rng):
    n = int(rng.integers(1, 9))
    objs = [ObjectProposal(k, rng.normal(size=128) * rng.uniform(0.1, 5),
                           Box3(*rng.uniform(-3, 3, 3), *rng.uniform(0.2, 1.5, 3)), "box")
            for k in range(n)]
    return Scene(f"r{n}", objs)


def test_c3_softmax_normalization(report):
    rng = np.random.default_rng(3)
    worst = {"alpha": 0.0, "beta_hat": 0.0, "otag": 0.0, "gamma_hat": 0.0}

    def dev(w, axis=-1, mask=None):
        s = w.sum(axis=axis)
        if mask is not None:
            s = s[mask]
        return float(np.max(np.abs(s - 1.0))) if s.size else 0.0

    emb = rng.normal(size=(30, 300)) / 10
    for p in range(1000):
        if p % 50 == 0:
            sp, op = SlgcParams.init(rng), OtagParams.init(rng)
            dp = DecoderParams.init(rng, emb, 16)
        scene = _random_scene(rng)
        g = build_layout_graph(scene, sp, BANK, k=int(rng.integers(1, 5)))
        if g.alpha is not None and g.alpha.size:
            worst["alpha"] = max(worst["alpha"], dev(g.alpha.data))
        out, beta = slgc_forward(g, sp, return_attention=True)
        worst["beta_hat"] = max(worst["beta_hat"], dev(beta.data))
        g2 = type(g)(g.structure, g.bank, out, g.edge_features, g.alpha)
        ob = otag_batch(g2, list(g.structure.object_nodes), op)
        worst["otag"] = max(worst["otag"], dev(ob.attention.data, mask=ob.mask))
        x = rng.normal(size=(2, 128))
        ctx = rng.normal(size=(2, 5, 128)) * 3
        mask = rng.random((2, 5)) < 0.7
        mask[:, 0] = True
        _, _, gamma = decode_step(DecoderState.initial(2, 16), [1, 4], x, ctx, mask, dp)
        worst["gamma_hat"] = max(worst["gamma_hat"], dev(gamma.data))
    ok = all(v <= 1e-12 for v in worst.values())
    report(3, "softmax normalization", ok, "(" + ", ".join(f"{k}={v:.1e}" for k, v in worst.items()) + ")")


def test_c4_shape_conformance(report):
    rng = np.random.default_rng(4)
    sp, op = SlgcParams.init(rng), OtagParams.init(rng)
    want = {"W_v": (256, 128), "W_c": (2, 128), "W_alpha": (128, 5), "W_e": (600, 128)}
    got = {k: getattr(sp, k).shape for k in want}
    want_o = {"W_t": (384, 128), "W_q": (640, 128)}
    got.update({k: getattr(op, k).shape for k in want_o})
    want.update(want_o)
    rejected = 0
    for obj, name in [(sp, "W_v"), (sp, "W_c"), (sp, "W_alpha"), (sp, "W_e"), (op, "W_t"), (op, "W_q")]:
        bad = Tensor(np.zeros((getattr(obj, name).shape[0] + 1, 128)))
        try:
            replace(obj, **{name: bad})
        except ValueError:
            rejected += 1
    report(4, "shape conformance", got == want and rejected == 6,
           f"(shapes ok={got == want}, bad shapes rejected at construction={rejected}/6)")


def test_c5_oversmoothing_trend(report):
    t = time.perf_counter()
    res = madgap_sweep(STUDY_CONFIG, n_seeds=20, max_layers=4)
    dt = time.perf_counter() - t
    v = res.values
    monotone = int(np.sum(np.all(np.diff(v[:, :4], axis=1) <= 0, axis=1)))
    otag_beats = int(np.sum(v[:, 4] > v[:, 1]))
    mean = " ".join(f"{r}={m:.4f}" for r, m in zip(res.rows, res.mean()))
    report(5, "over-smoothing trend", monotone >= 15 and otag_beats >= 15 and dt < 120,
           f"(non-increasing {monotone}/20, OTAG>SLGCx2 {otag_beats}/20, {dt:.1f}s; {mean})")


def _fit_and_score(cfg):
    scenes, caps = generate_synthetic(cfg.data, cfg.seed)
    ds = make_dataset(scenes, caps, cfg.val_percent)
    model = build_model(cfg, ds.vocab)
    train(model, ds)
    val = [s for s in scenes if split_of(s.scene_id) == "val"]
    preds = predict(model, val, references_by_object(caps))
    return preds, score_report(preds, [0.5])[0], len(ds.train)


@pytest.mark.slow
def test_c6_toy_learning(report):
    cfg = RunConfig(data=GeneratorConfig(n_scenes=200))   # defaults: lr 1e-4, 30 epochs, H=256
    t = time.perf_counter()
    preds, block, n_train = _fit_and_score(cfg)
    dt = time.perf_counter() - t
    acc, n_stacked = vertical_accuracy(preds)
    ok = block["bleu4"] >= 0.5 and acc >= 0.9 and dt < 20 * 60
    report(6, "toy end-to-end learning", ok,
           f"(BLEU-4={block['bleu4']:.3f}, vertical acc={acc:.3f} on {n_stacked} stacked targets, "
           f"{n_train} train samples, {dt / 60:.1f} min)")


@pytest.mark.slow
def test_c7_ablation_direction(report):
    wins, rows = 0, []
    for seed in range(5):
        base = RunConfig(seed=seed, hidden=64, epochs=6, lr=2e-3, data=GeneratorConfig(n_scenes=200))
        scores = {}
        for ablate in ("", "edges", "slgc", "otag"):
            cfg = replace(base, ablate=[ablate] if ablate else [])
            scores[ablate or "full"] = _fit_and_score(cfg)[1]["cider"]
        win = all(scores["full"] >= scores[a] for a in ("edges", "slgc", "otag"))
        wins += win
        rows.append(f"seed{seed}:" + ",".join(f"{k}={v:.2f}" for k, v in scores.items()))
    report(7, "ablation direction", wins >= 3, f"(full best in {wins}/5; {' '.join(rows)})")


def test_c8_metric_correctness(report):
    sent = "the chair is to the left of the desk".split()
    exact = bleu4(sent, [sent]) == 1.0 and rouge_l(sent, [sent]) == 1.0
    # micro-corpus of three one-reference images: "a b", "a c", "d e"
    stats = CorpusStats.build([[["a", "b"]], [["a", "c"]], [["d", "e"]]])
    la, lb = math.log(1.5), math.log(3.0)
    hand = {
        ("a b", "a b"): 5.0,
        ("a c", "a b"): 10 * (la ** 2 / (la ** 2 + lb ** 2)) / 4,
        ("x y", "d e"): 0.0,
    }
    cider_err = max(abs(cider(c.split(), [r.split()], stats) - v) for (c, r), v in hand.items())
    rng = np.random.default_rng(8)
    gt = [Box3(0, 0, 0, 1, 1, 1)] * 12
    pred = [Box3(float(d), 0, 0, 1, 1, 1) for d in rng.uniform(0, 1.2, 12)]
    scores = rng.uniform(0, 1, 12)
    recs = [EvalRecord(p, g, ["x"], [["x"]]) for p, g in zip(pred, gt)]
    ious = np.array([max(0.0, (1 - p.cx)) / (1 + min(p.cx, 1)) for p in pred])  # unit cubes, x offset
    ks = np.linspace(0, 1, 21)
    direct = [float(np.mean(scores * (ious >= k))) for k in ks]
    got = [m_at_k_iou(recs, list(scores), k) for k in ks]
    formula_err = max(abs(a - b) for a, b in zip(direct, got))
    monotone = all(a >= b for a, b in zip(got, got[1:]))
    ok = exact and cider_err <= 1e-6 and formula_err <= 1e-12 and monotone
    report(8, "metric correctness", ok,
           f"(identity={exact}, CIDEr err={cider_err:.1e}, m@kIoU err={formula_err:.1e}, monotone={monotone})")


def test_c9_determinism(report, tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"epochs": 2, "hidden": 16, "lr": 0.002, "data": {"n_scenes": 12}}))
    outputs = []
    for run in ("a", "b"):
        d = tmp_path / run
        assert main(["gen-data", "--config", str(cfg), "--out", str(d / "data")]) == 0
        assert main(["train", "--config", str(cfg), "--data", str(d / "data"), "--out", str(d / "ck.json")]) == 0
        assert main(["eval", "--checkpoint", str(d / "ck.json"), "--data", str(d / "data"),
                     "--out", str(d / "eval")]) == 0
        capsys.readouterr()
        files = ["data/scenes.jsonl", "data/captions.jsonl", "ck.json", "ck.json.log.jsonl",
                 "eval/report.json", "eval/predictions.jsonl", "eval/relational.png"]
        outputs.append({f: (d / f).read_bytes() for f in files})
    differ = [f for f in outputs[0] if outputs[0][f] != outputs[1][f]]
    report(9, "determinism", not differ, f"(files compared={len(outputs[0])}, differing={differ})")
