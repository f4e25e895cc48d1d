"""End-to-end acceptance checks, one test per criterion.

Each test records a ``criterion N: PASS|FAIL ...`` line; the lines are printed
as they are produced and repeated in the terminal summary.
"""

import filecmp
import math
import time

import numpy as np
import pytest

import oracles
from conftest import toy_output, toy_scene
from weakseg3d.cli import main
from weakseg3d.clustering import kmeans_fixed_seeds, nearest_seed_assignment, nn_assign_multiclick
from weakseg3d.evaluation import map50, pseudo_accuracy, pseudo_counts
from weakseg3d.losses import InstanceGroups, l_ce, l_dist, l_regress, l_var, total_loss
from weakseg3d.model import PARAM_NAMES, Hyperparams, ModelOutput, backward, forward, init_params
from weakseg3d.pipeline import (PseudoLabels, assignable_points, default_pseudo_config, evaluate_run,
                                fused_probabilities, prepare_weak_labels, pseudo_gen_click, train)
from weakseg3d.pointcloud import ClickAnnotation
from weakseg3d.similarity import SimilarityConfig, point_features, semantic_sim, similarity, similarity_matrix
from weakseg3d.suites import ACCEPTANCE_HP, ACCEPTANCE_SV, BOUNDARY, EASY, HARD
from weakseg3d.supervoxel import WeakLabels

RESULTS: list[str] = []


def record(n, ok, detail):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'} {detail}"
    RESULTS.append(line)
    print(line)
    return ok


def slope(curve):
    e, a = (np.asarray(v, dtype=float) for v in zip(*curve))
    de = e - e.mean()
    return float((de * (a - a.mean())).sum() / (de * de).sum())


# ---------------------------------------------------------------------------
# 1. gradients

def _rel_err(a, n):
    a, n = np.ravel(a), np.ravel(n)
    return float(np.linalg.norm(a - n) / max(np.linalg.norm(a), np.linalg.norm(n), 1e-8))


def _fd(f, x, h=1e-5):
    g = np.zeros_like(x)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f()
        flat[i] = old - h
        down = f()
        flat[i] = old
        gf[i] = (up - down) / (2 * h)
    return g


def _gradient_instance(rng):
    n = int(rng.integers(4, 21))
    e = int(rng.integers(1, 5))
    k = int(rng.integers(2, 4))
    scene = toy_scene(rng.uniform(-1, 1, size=(n, 3)), instance=rng.integers(0, 3, size=n),
                      colors=rng.uniform(size=(n, 3)), num_classes=k)
    emb, logits, off = rng.normal(size=(n, e)), rng.normal(size=(n, k)), rng.normal(size=(n, 3))
    weak_inst = np.where(rng.uniform(size=n) < 0.5, rng.integers(0, 3, size=n), -1)
    weak_sem = np.where(weak_inst >= 0, rng.integers(0, k, size=n), -1)
    pseudo_inst = rng.integers(0, 3, size=n)
    pseudo_sem = np.where(rng.uniform(size=n) < 0.7, rng.integers(0, k, size=n), -1)
    pseudo = PseudoLabels(pseudo_inst, pseudo_sem, np.ones(n), filtered=bool(rng.uniform() < 0.3))
    return scene, emb, logits, off, WeakLabels(weak_inst, weak_sem), pseudo, e, k


def test_criterion_1_gradients():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = {name: 0.0 for name in ("var", "dist", "ce", "reg", "total")}
    count = 120
    for _ in range(count):
        scene, emb, logits, off, weak, pseudo, e, k = _gradient_instance(rng)
        groups = InstanceGroups.from_labels(pseudo.instance)
        dv = rng.uniform(0.05, 0.5)
        dd = rng.uniform(2 * dv + 0.1, 2.5)

        def out():
            return ModelOutput(emb, logits, off)
        checks = {
            "var": (lambda: l_var(out(), groups, dv)[0], emb, l_var(out(), groups, dv)[1]),
            "dist": (lambda: l_dist(out(), groups, dd)[0], emb, l_dist(out(), groups, dd)[1]),
            "ce": (lambda: l_ce(out(), pseudo.semantic)[0], logits, l_ce(out(), pseudo.semantic)[1]),
            "reg": (lambda: l_regress(out(), scene, groups)[0], off, l_regress(out(), scene, groups)[1]),
        }
        for name, (f, x, analytic) in checks.items():
            worst[name] = max(worst[name], _rel_err(analytic, _fd(f, x)))

        hp = Hyperparams(delta_v=dv, delta_d=dd, pseudo_start=0, embed_dim=e, hidden=5)
        params = init_params(e, k, 5, int(rng.integers(1 << 30)))
        flat = params.flat()

        def loss_of(vec):
            p = params.with_flat(vec)
            return total_loss(forward(p, scene), scene, weak, pseudo, hp, 0)[0].total
        _, g_out = total_loss(forward(params, scene), scene, weak, pseudo, hp, 0)
        g = backward(params, scene, g_out)
        analytic = np.concatenate([g[name].ravel() for name in PARAM_NAMES])
        numeric = _fd(lambda: loss_of(flat), flat)
        worst["total"] = max(worst["total"], _rel_err(analytic, numeric))
    elapsed = time.perf_counter() - t0
    ok = max(worst.values()) <= 1e-4 and elapsed < 60
    detail = " ".join(f"{k}={v:.1e}" for k, v in worst.items())
    assert record(1, ok, f"{count} instances, worst relative error {detail}, {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 2. clustering invariants

def test_criterion_2_clustering_invariants():
    rng = np.random.default_rng(7)
    cases, stops, bad = 1200, 0, []
    for t in range(cases):
        n = int(rng.integers(2, 25))
        k = int(rng.integers(1, min(n, 5) + 1))
        seeds = rng.choice(n, size=k, replace=False)
        out = toy_output(rng.normal(size=(n, int(rng.integers(1, 4)))) * rng.uniform(0.3, 3),
                         probs=rng.dirichlet(np.ones(3), size=n), offsets=rng.normal(size=(n, 3)) * 0.1)
        scene = toy_scene(rng.normal(size=(n, 3)), instance=np.zeros(n, int))
        cfg = [SimilarityConfig("weak"), SimilarityConfig("composite"),
               SimilarityConfig("full", use_offsets=True)][t % 3]
        clicks = ClickAnnotation([[s, c, 0] for c, s in enumerate(seeds)])
        a = kmeans_fixed_seeds(out, scene, cfg, clicks, max_iters=int(rng.integers(0, 10)))
        stops += a.stop_reason == "seed_conflict"
        if any(np.isin(a.members(c), seeds).sum() != 1 for c in range(k)):
            bad.append(("one-click", t))
        zero = kmeans_fixed_seeds(out, scene, cfg, clicks, max_iters=0)
        near = nearest_seed_assignment(out, scene, cfg, clicks)
        f = point_features(out, scene, cfg)
        direct = np.argmax(similarity_matrix(f, f.take(seeds), cfg), axis=1)
        direct[seeds] = np.arange(k)
        if not (np.array_equal(zero.cluster_id, near.cluster_id) and np.array_equal(near.cluster_id, direct)):
            bad.append(("zero-iter", t))
        if not np.array_equal(nn_assign_multiclick(out, scene, cfg, clicks).cluster_id, near.cluster_id):
            bad.append(("multiclick", t))
    assert record(2, not bad, f"{cases} inputs ({stops} took the seed-conflict stop), {len(bad)} violations")


# ---------------------------------------------------------------------------
# 3. oracle equivalence

def test_criterion_3_oracles():
    rng = np.random.default_rng(11)
    cases, mism = 3000, 0
    for _ in range(cases):
        n = 14
        n_gt = int(rng.integers(1, 5))
        owner = rng.integers(-1, n_gt, size=n)
        gts = [(np.flatnonzero(owner == g), int(rng.integers(0, 2))) for g in range(n_gt)]
        gts = [(p, c) for p, c in gts if len(p)] or [(np.arange(2), 0)]
        preds = []
        confs = rng.permutation(6)[:int(rng.integers(0, 7))] / 6 + 0.05
        for conf in confs:
            if rng.uniform() < 0.6:
                base = gts[int(rng.integers(len(gts)))][0]
                pts = np.union1d(base[rng.uniform(size=len(base)) < 0.8], rng.choice(n, int(rng.integers(0, 3))))
            else:
                pts = rng.choice(n, size=int(rng.integers(1, 7)), replace=False)
            preds.append((pts, int(rng.integers(0, 2)), float(conf)))
        ignore = np.flatnonzero(rng.uniform(size=n) < 0.1)
        per, m = map50(preds, gts, ignore)
        per_o, m_o = oracles.map50(preds, gts, ignore)
        if abs(m - m_o) > 1e-12 or any(abs(per[c] - per_o[c]) > 1e-12 for c in per_o):
            mism += 1

    # tabulated similarity, semantic and fusion examples
    errs = []
    cases_tab = [
        ([[0.0, 0.0], [1.0, 0.0]], [[0, 0, 0], [0.5, 0, 0]], [[0.5, 0.5], [1.0, 0.0]], [[0, 0, 0]] * 2, 1.0, 1.0),
        ([[0.2, -0.1, 0.4], [0.1, 0.3, -0.2]], [[1, 2, 0], [1.3, 1.8, 0.2]], [[0.7, 0.2, 0.1], [0.3, 0.3, 0.4]],
         [[0.1, 0, 0], [-0.1, 0.2, 0]], 0.5, 2.0),
        ([[1.5], [0.5]], [[0, 0, 0], [0, 0, 1.0]], [[0.9, 0.1], [0.6, 0.4]], [[0, 0, 0.5], [0, 0, -0.5]], 2.0, 0.7),
    ]
    for e, p, s, o, se, sp in cases_tab:
        out, sc = toy_output(e, probs=s, offsets=o), toy_scene(p, instance=[0, 0])
        q = np.asarray(p) + np.asarray(o)
        errs.append(abs(similarity(0, 1, out, sc, SimilarityConfig("weak")) - oracles.weak_sim(e[0], e[1])))
        errs.append(abs(similarity(0, 1, out, sc, SimilarityConfig("full", se, sp, use_offsets=True))
                        - oracles.full_sim(e[0], e[1], q[0], q[1], se, sp)))
        errs.append(abs(similarity(0, 1, out, sc, SimilarityConfig("composite", se, sp, use_offsets=True))
                        - oracles.composite_sim(e[0], e[1], q[0], q[1], s[0], s[1], se, sp)))
        errs.append(abs(semantic_sim(s[0], s[1]) - oracles.cosine(s[0], s[1])))
    errs.append(abs(semantic_sim([0.5, 0.5], [1, 0]) - 0.5 / math.sqrt(0.5)))
    out, sc = toy_output([[0.0, 0.0], [0.6, 0.8]]), toy_scene(np.zeros((2, 3)), instance=[0, 0])
    errs.append(abs(similarity(0, 1, out, sc, SimilarityConfig("weak")) - math.exp(-1)))
    probs = [[0.6, 0.4], [0.1, 0.9], [0.45, 0.55]]
    emb = [0.0, 0.5, 1.4]
    out, sc = toy_output(emb, probs=probs), toy_scene(np.zeros((3, 3)), instance=[0, 0, 0])
    table = [[oracles.weak_sim([a], [b]) for b in emb] for a in emb]
    fused = fused_probabilities(out, sc, SimilarityConfig("weak"), 0.3)
    errs.append(float(np.max(np.abs(fused - np.array(oracles.fuse(table, probs, 0.3))))))
    worst = max(errs)
    ok = mism == 0 and worst <= 1e-12
    assert record(3, ok, f"map50 agrees with brute force on {cases - mism}/{cases} cases; "
                         f"tabulated similarity/fusion max error {worst:.1e}")


# ---------------------------------------------------------------------------
# shared end-to-end runs

class Fit:
    def __init__(self, run, final_acc):
        self.run = run
        self.final_acc = final_acc


def _fit(suite, version, cfg=None):
    scenes, clicks = suite.load("train")
    weak = prepare_weak_labels(scenes, clicks, ACCEPTANCE_SV)
    acc = {}

    def cb(epoch, k, p):
        if epoch == ACCEPTANCE_HP.epochs - 1:
            c, m = pseudo_counts(p, scenes[k])
            acc[k] = c / m if m else 0.0
    run = train(scenes, clicks, ACCEPTANCE_HP, version, cfg=cfg, sv=ACCEPTANCE_SV, weak_labels=weak, callback=cb)
    return Fit(run, np.array([acc[k] for k in sorted(acc)]))


class Runs:
    """Trains each (suite, version) at most once per session."""

    def __init__(self):
        self._fits, self._evals, self.seconds = {}, {}, 0.0

    def fit(self, key):
        if key not in self._fits:
            t0 = time.perf_counter()
            suite, version, cfg = {
                ("easy", "weak"): (EASY, "weak", None),
                ("easy", "click"): (EASY, "click", None),
                ("hard", "weak"): (HARD, "weak", None),
                ("hard", "baseline"): (HARD, "baseline", None),
                ("hard", "click"): (HARD, "click", None),
                ("hard", "click-emb"): (HARD, "click", default_pseudo_config(
                    ACCEPTANCE_HP, use_spatial=False, use_semantic=False)),
            }[key]
            self._fits[key] = _fit(suite, version, cfg)
            self.seconds += time.perf_counter() - t0
        return self._fits[key]

    def evaluate(self, key):
        if key not in self._evals:
            t0 = time.perf_counter()
            suite = EASY if key[0] == "easy" else HARD
            self._evals[key] = evaluate_run(self.fit(key).run, suite.scenes("eval"))
            self.seconds += time.perf_counter() - t0
        return self._evals[key]


@pytest.fixture(scope="session")
def runs():
    return Runs()


# ---------------------------------------------------------------------------
# 4-9

def test_criterion_4_easy_suite(runs):
    t0 = runs.seconds
    click_rep, click_res = runs.evaluate(("easy", "click"))
    _, weak_res = runs.evaluate(("easy", "weak"))
    lower = sum(w.map50 < c.map50 for w, c in zip(weak_res, click_res))
    elapsed = runs.seconds - t0
    ok = click_rep.map50 >= 0.90 and click_rep.miou >= 0.90 and lower >= 18 and elapsed < 600
    assert record(4, ok, f"CLICK mAP@50 {click_rep.map50:.3f} mIoU {click_rep.miou:.3f}; "
                         f"WEAK_ONLY strictly below CLICK on {lower}/20 scenes (need 18); {elapsed:.0f}s")


def test_criterion_5_version_ordering(runs):
    means = {v: float(np.mean([r.map50 for r in runs.evaluate(("hard", v))[1]]))
             for v in ("weak", "baseline", "click")}
    ok = means["weak"] <= means["baseline"] <= means["click"] and means["click"] - means["baseline"] >= 0.03
    assert record(5, ok, "hard-suite mean mAP@50 " + " ".join(f"{k}={v:.3f}" for k, v in means.items()))


def test_criterion_6_similarity_ablation(runs):
    full = runs.fit(("hard", "click")).final_acc
    emb = runs.fit(("hard", "click-emb")).final_acc
    gain = full.mean() - emb.mean()
    wins = int(np.sum(full > emb))
    ok = gain >= 0.02 and wins >= 15
    assert record(6, ok, f"pseudo accuracy composite {full.mean():.3f} vs embedding-only {emb.mean():.3f} "
                         f"(gain {gain:+.3f}); per-scene gain > 0 on {wins}/20")


def test_criterion_7_kmeans_vs_nearest():
    scenes, clicks = BOUNDARY.load("train")
    weak = prepare_weak_labels(scenes, clicks, ACCEPTANCE_SV)
    hp = ACCEPTANCE_HP
    run = train(scenes, clicks, hp.replace(epochs=hp.pseudo_start), "weak", sv=ACCEPTANCE_SV, weak_labels=weak)
    cfg = default_pseudo_config(hp)
    km, nn = [], []
    for s, c, w in zip(scenes, clicks, weak):
        out = forward(run.params, s)
        pts = assignable_points(out, w)
        km.append(pseudo_accuracy(pseudo_gen_click(out, s, c, w, cfg, hp, points=pts, method="kmeans"), s))
        nn.append(pseudo_accuracy(pseudo_gen_click(out, s, c, w, cfg, hp, points=pts, method="nearest"), s))
    km, nn = np.array(km), np.array(nn)
    geq = int(np.sum(km >= nn))
    assert record(7, geq >= 16, f"k-means >= nearest seed on {geq}/20 boundary-click scenes "
                                f"(strictly better on {int(np.sum(km > nn))}); "
                                f"mean {km.mean():.3f} vs {nn.mean():.3f}")


def test_criterion_8_pseudo_accuracy_trend(runs):
    parts, ok = [], True
    for key in (("easy", "click"), ("hard", "click"), ("hard", "click-emb")):
        curve = runs.fit(key).run.pseudo_curve()
        first, last, b = curve[0][1], curve[-1][1], slope(curve)
        ok &= last >= first and b >= 0
        parts.append(f"{key[0]}/{key[1]} {first:.3f}->{last:.3f} slope {b:.1e}")
    assert record(8, ok, "; ".join(parts))


def test_criterion_9_fusion(runs):
    easy_rep, easy_res = runs.evaluate(("easy", "click"))
    unfused = evaluate_run(runs.fit(("easy", "click")).run, EASY.scenes("eval"), fuse=False)[0].miou
    _, hard_res = runs.evaluate(("hard", "click"))
    wins = sum(r.miou > r.miou_unfused for r in hard_res)
    ok = easy_rep.miou >= unfused - 0.005 and wins >= 12
    assert record(9, ok, f"easy mIoU fused {easy_rep.miou:.4f} vs unfused {unfused:.4f}; "
                         f"hard fused > unfused on {wins}/20 scenes")


# ---------------------------------------------------------------------------
# 10. determinism

FAST = ["--epochs", "8", "--pseudo-start", "4", "--hidden", "12", "--lr", "0.1"]


def _pipeline(root):
    d = root / "w"
    d.mkdir(parents=True)
    steps = [
        ["gen", "--out", d / "s.cs", "--scene-num-instances", 3, "--scene-seed", 5, "--scene-background", "true"],
        ["gen", "--suite", "easy", "--split", "eval", "--out", d / "suite"],
        ["annotate", "--scene", d / "s.cs", "--out", d / "c.txt", "--m", 2],
        ["partition", "--scene", d / "s.cs", "--clicks", d / "c.txt", "--out", d / "p.txt"],
        ["train", "--scenes", d / "s.cs", "--clicks", d / "c.txt", "--out", d / "run", *FAST],
        ["train", "--scenes", d / "s.cs", "--clicks", d / "c.txt", "--out", d / "base", "--version", "baseline",
         *FAST],
        ["infer", "--run", d / "run", "--scene", d / "s.cs", "--out", d / "pred"],
        ["eval", "--run", d / "run", "--scenes", d / "s.cs", "--out", d / "ev"],
        ["eval", "--run", d / "base", "--scenes", d / "s.cs", "--out", d / "ev_base"],
        ["report", "--runs", d / "ev.json", d / "ev_base.json", "--out", d / "table.tsv"],
        ["plot-data", "--runs", d / "run", d / "base", "--reports", d / "ev.json", "--out", d / "fig"],
    ]
    for argv in steps:
        assert main([str(a) for a in argv]) == 0, argv
    return d, {s[0] for s in steps}


def _tree_equal(a, b):
    cmp = filecmp.dircmp(a, b)
    if cmp.left_only or cmp.right_only or cmp.funny_files:
        return False
    _, mismatch, errors = filecmp.cmpfiles(a, b, cmp.common_files, shallow=False)
    return not mismatch and not errors and all(_tree_equal(a / s, b / s) for s in cmp.common_dirs)


def test_criterion_10_determinism(tmp_path):
    a, commands = _pipeline(tmp_path / "first")
    b, _ = _pipeline(tmp_path / "second")
    files = sum(1 for p in a.rglob("*") if p.is_file())
    ok = _tree_equal(a, b)
    assert record(10, ok, f"{len(commands)} subcommands run twice, {files} output files "
                          f"{'byte-identical' if ok else 'DIFFER'}")
