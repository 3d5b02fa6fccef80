"""Acceptance criteria, each at its stated tolerance.

Every test prints one ``ACCEPTANCE n: PASS|FAIL`` line; the lines are
repeated in the terminal summary.
"""

import hashlib
import itertools
import json
import time

import numpy as np

from conftest import make_bag, report_criterion
from oracles import adamw_oracle, auc_pairs, km_oracle, max_rel_error, numeric_grad, ssgsea_oracle
from pdac_subtype.cli import main
from pdac_subtype.evaluation import PredictionRecord, confusion_metrics, mann_whitney_u, roc_auc
from pdac_subtype.expression import GeneSet
from pdac_subtype.model.bags import SlideBag
from pdac_subtype.model.network import ModelConfig, Mode, backward, forward, fuse
from pdac_subtype.model.optim import OptState, adamw_step
from pdac_subtype.model.params import init_params
from pdac_subtype.subtyping import (
    Label,
    SsgseaParams,
    SubtypeRecord,
    TertileCutoffs,
    assign_labels,
    refine_with_gata6,
    ssgsea_es,
)
from pdac_subtype.survival import SurvivalRecord, chi2_1df_pvalue, km_estimate, logrank_test
from pdac_subtype.synth import SynthSpec, synth_survival


def _digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


# 1 ------------------------------------------------------------------------------------


def test_criterion_1_ssgsea_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(101)
    worst = 0.0
    for i in range(200):
        n = int(rng.integers(2, 51))
        genes = [f"G{j:03d}" for j in rng.permutation(n)]
        # coarse values force ties
        values = np.round(rng.normal(size=n), int(rng.integers(0, 3)))
        k = int(rng.integers(1, n))
        members = list(rng.choice(genes, size=k, replace=False))
        alpha = (0.0, 0.25, 0.75)[i % 3]
        got = ssgsea_es(values, genes, GeneSet("s", members), SsgseaParams(alpha=alpha))
        worst = max(worst, abs(got - ssgsea_oracle(values.tolist(), genes, members, alpha)))
    n_exh = 0
    for n in range(2, 9):
        genes = [f"G{j}" for j in range(n)]
        values = np.round(rng.normal(size=n), 1)
        for r in range(1, n):
            for members in itertools.combinations(genes, r):
                for alpha in (0.0, 0.25, 0.75):
                    got = ssgsea_es(values, genes, GeneSet("s", members), SsgseaParams(alpha=alpha))
                    worst = max(worst, abs(got - ssgsea_oracle(values.tolist(), genes, members, alpha)))
                    n_exh += 1
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-9 and elapsed < 10.0
    report_criterion(1, ok, f"ssGSEA vs oracle: max abs err {worst:.2e} (tol 1e-9), 200 random + {n_exh} exhaustive, {elapsed:.1f}s (<10s)")
    assert ok


# 2 ------------------------------------------------------------------------------------

FLIP = {Label.BASAL: Label.CLASSICAL, Label.CLASSICAL: Label.BASAL, Label.INTERMEDIATE: Label.INTERMEDIATE}


def _label_violations(rng, n_cohorts):
    violations = 0
    for c in range(n_cohorts):
        n = int(rng.integers(2, 40))
        if c % 10 == 0:
            # z lands exactly on -1, 0, +1
            scores = np.array([-1.0, 0.0, 1.0] * max(1, n // 3))
            scores = np.concatenate([scores, [-1.0, 1.0]]) if c % 20 == 0 else scores
        else:
            scores = rng.normal(size=n) * rng.uniform(0.1, 5)
        if np.ptp(scores) == 0:
            continue
        z_lab = assign_labels(scores)
        neg = assign_labels(-scores)
        gata6 = rng.uniform(0, 150, size=scores.size)
        recs = [SubtypeRecord(f"s{i}", 0.0, 0.0, float(s), z, lab, float(g))
                for i, (s, (z, lab), g) in enumerate(zip(scores, z_lab, gata6))]
        lo, hi = sorted(rng.uniform(0, 150, size=2))
        refined = refine_with_gata6(recs, TertileCutoffs(lo, hi))
        for r, rr, (zn, ln) in zip(recs, refined, neg):
            # partition: one label per sample from the closed set
            violations += rr.label not in tuple(Label)
            violations += rr.sample_id != r.sample_id
            # boundary: |z| <= 1 is intermediate before refinement
            violations += (abs(r.zscore) <= 1.0) != (r.label is Label.INTERMEDIATE)
            violations += r.zscore > 1.0 and r.label is not Label.CLASSICAL
            violations += r.zscore < -1.0 and r.label is not Label.BASAL
            # antisymmetry under score negation
            violations += abs(zn + r.zscore) > 1e-12
            violations += abs(r.zscore) != 1.0 and ln is not FLIP[r.label]
            # refinement never touches called samples and follows the cutoffs otherwise
            if r.label is not Label.INTERMEDIATE:
                violations += rr != r
            else:
                want = Label.BASAL if r.gata6_tpm <= lo else Label.CLASSICAL if r.gata6_tpm >= hi else Label.AMBIGUOUS
                violations += rr.label is not want
        # exact boundary cohorts: z of +-1 must stay INTERMEDIATE
        if c % 10 == 0 and c % 20 != 0:
            violations += sum(lab is not Label.INTERMEDIATE for z, lab in z_lab if abs(z) == 1.0)
    return violations


def test_criterion_2_labeling_rule():
    n = 1200
    v = _label_violations(np.random.default_rng(202), n)
    ok = v == 0
    report_criterion(2, ok, f"labeling invariants: {v} violations over {n} random cohorts (need 0, >=1000 cohorts)")
    assert ok


# 3 ------------------------------------------------------------------------------------


def test_criterion_3_gradients():
    t0 = time.perf_counter()
    worst = 0.0
    for seed in range(25):
        rng = np.random.default_rng(300 + seed)
        bag = make_bag(rng, n_patches=3, max_cells=5, d_patch=6, d_cell=4)
        p = init_params(6, 4, 8, seed=seed, lambda_dist=float(rng.uniform(0.001, 0.02)))
        p.cls_token[:] = rng.normal(0, 0.5, 4)
        p.head_b[...] = rng.normal(0, 0.3)
        y = seed % 2
        _, g = backward(bag, p, y)
        num = numeric_grad(lambda q: backward(bag, q, y)[0], p, p.names(), h=1e-5)
        for name in p.names():
            worst = max(worst, max_rel_error(getattr(g, name).ravel().tolist(), num[name]))
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-4 and elapsed < 30.0
    report_criterion(3, ok, f"analytic vs central-difference gradients: max rel err {worst:.2e} (<1e-4) on 25 bags, {elapsed:.1f}s (<30s)")
    assert ok


# 4 ------------------------------------------------------------------------------------


def test_criterion_4_architecture_invariants():
    rng = np.random.default_rng(404)
    n = 120
    counts = dict(translation=0, permutation=0, normalization=0, bilinearity=0, baseline=0)
    base_cfg = ModelConfig(Mode.ATTMIL_BASELINE)
    for i in range(n):
        bag = make_bag(rng, n_patches=int(rng.integers(1, 6)), d_patch=6, d_cell=4)
        p = init_params(6, 4, 8, seed=i, lambda_dist=float(rng.uniform(0, 0.02)))
        p0, a0 = forward(bag, p)

        shift = rng.integers(0, 8, size=2)
        moved = SlideBag("m", bag.patch_emb, bag.grid + shift, bag.cell_emb, bag.centroids + shift * 512.0)
        counts["translation"] += abs(forward(moved, p)[0] - p0) > 1e-12

        pp, cp = rng.permutation(bag.n_patches), rng.permutation(bag.n_cells)
        perm = SlideBag("p", bag.patch_emb[pp], bag.grid[pp], bag.cell_emb[cp], bag.centroids[cp])
        p1, a1 = forward(perm, p)
        counts["permutation"] += abs(p1 - p0) > 1e-12 or not np.allclose(a1, a0[pp], atol=1e-12)

        counts["normalization"] += abs(a0.sum() - 1.0) > 1e-12 or np.any(a0 < 0)

        W = rng.normal(size=(3, 12))
        x1, x2, c1, c2 = rng.normal(size=3), rng.normal(size=3), rng.normal(size=4), rng.normal(size=4)
        s, t = rng.normal(size=2)
        lin_p = np.allclose(fuse(s * x1 + t * x2, c1, W), s * fuse(x1, c1, W) + t * fuse(x2, c1, W), atol=1e-10)
        lin_c = np.allclose(fuse(x1, s * c1 + t * c2, W), s * fuse(x1, c1, W) + t * fuse(x1, c2, W), atol=1e-10)
        counts["bilinearity"] += not (lin_p and lin_c)

        other = SlideBag("o", bag.patch_emb, bag.grid, rng.normal(size=bag.cell_emb.shape), bag.centroids)
        counts["baseline"] += forward(bag, p, config=base_cfg)[0] != forward(other, p, config=base_cfg)[0]
    total = sum(counts.values())
    ok = total == 0
    detail = ", ".join(f"{k} {v}" for k, v in counts.items())
    report_criterion(4, ok, f"architecture invariants over {n} instances each: violations {detail}")
    assert ok


# 5 ------------------------------------------------------------------------------------

# patience is 3 (not 10) to fit the 5-minute budget on one core
TRAIN_ARGS = ["--k-folds", "5", "--lr", "5e-5", "--weight-decay", "1e-5", "--patience", "3"]


def _cli_auc(tmp_path, delta, seed):
    cohort = tmp_path / f"c_{delta}_{seed}"
    out = tmp_path / f"t_{delta}_{seed}"
    assert main(["synth", "--out-dir", str(cohort), "--seed", str(seed), "--delta", str(delta),
                 "--n-slides", "60", "--n-expression", "60", "--packed"]) == 0
    assert main(["train", "--out-dir", str(out), "--manifest", str(cohort / "manifest.tsv"),
                 "--seed", str(seed), *TRAIN_ARGS]) == 0
    return json.loads((out / "metrics.json").read_text())["aggregate"]["auc"]["mean"]


def test_criterion_5_end_to_end(tmp_path):
    t0 = time.perf_counter()
    auc_signal = _cli_auc(tmp_path, 3.0, 0)
    null = [_cli_auc(tmp_path, 0.0, s) for s in (0, 1, 2)]
    elapsed = time.perf_counter() - t0
    null_mean = float(np.mean(null))
    ok_signal = auc_signal >= 0.95
    ok_null = 0.35 <= null_mean <= 0.65
    ok_time = elapsed < 300.0
    ok = ok_signal and ok_null and ok_time
    per_seed = ", ".join(f"{a:.3f}" for a in null)
    report_criterion(
        5, ok,
        f"CLI synth->train: delta=3 mean AUC {auc_signal:.3f} (>=0.95); delta=0 mean AUC {null_mean:.3f} "
        f"over seeds 0-2 [{per_seed}] (in [0.35, 0.65]); {elapsed:.0f}s (<300s)",
    )
    assert ok


# 6 ------------------------------------------------------------------------------------


def test_criterion_6_auc_mann_whitney():
    rng = np.random.default_rng(606)
    mismatches = checked = 0
    while checked < 100:
        n = int(rng.integers(2, 120))
        levels = rng.uniform(size=int(rng.integers(1, 5)))  # heavy ties
        prob = rng.choice(levels, size=n)
        truth = rng.integers(0, 2, size=n)
        if len(set(truth.tolist())) < 2:
            continue
        recs = [PredictionRecord(f"s{i}", int(t), float(p)) for i, (t, p) in enumerate(zip(truth, prob))]
        auc = roc_auc(recs)
        mw = mann_whitney_u(prob[truth == 1], prob[truth == 0])
        n1, n0 = int((truth == 1).sum()), int((truth == 0).sum())
        mismatches += auc != mw.u / (n1 * n0) or abs(auc - auc_pairs(truth, prob)) > 1e-12
        checked += 1
    ok = mismatches == 0
    report_criterion(6, ok, f"roc_auc == U/(n1*n0) exactly on {checked} tied prediction sets: {mismatches} mismatches")
    assert ok


# 7 ------------------------------------------------------------------------------------


def test_criterion_7_confusion_arithmetic():
    truth = [0] * 99 + [1] * 90
    prob = [0.8] * 14 + [0.2] * 85 + [0.3] * 15 + [0.7] * 75
    m = confusion_metrics([PredictionRecord(f"s{i}", t, p) for i, (t, p) in enumerate(zip(truth, prob))])
    err_c, err_b = 1 - m.specificity, 1 - m.sensitivity
    ok = (abs(m.accuracy - 0.847) <= 5e-4 and round(100 * err_c, 1) == 14.1 and round(100 * err_b, 1) == 16.7
          and m.n == 189)
    report_criterion(7, ok, f"189 records: accuracy {m.accuracy:.4f} (0.847 +- 5e-4), classical error {100 * err_c:.1f}% (14.1), basal error {100 * err_b:.1f}% (16.7)")
    assert ok


# 8 ------------------------------------------------------------------------------------

KM_FIXTURES = [
    ([1, 2, 3, 4, 5], [1, 1, 1, 1, 1], [4 / 5, 3 / 5, 2 / 5, 1 / 5, 0.0]),
    ([1, 2, 2, 3, 4], [1, 0, 1, 1, 0], [0.8, 0.6, 0.3]),
    ([2, 2, 2, 5, 5, 7], [1, 1, 0, 1, 0, 1], [4 / 6, 4 / 9, 0.0]),
    ([3, 1, 4, 1, 5, 9, 2, 6], [1, 0, 1, 1, 0, 1, 1, 0], [7 / 8, 35 / 48, 7 / 12, 7 / 16, 0.0]),
    ([10, 20, 30], [0, 1, 0], [0.5]),
]


def _recs(times, events, group=""):
    return [SurvivalRecord(f"s{i}", float(t), int(e), group) for i, (t, e) in enumerate(zip(times, events))]


def test_criterion_8_survival():
    km_err = 0.0
    for times, events, want in KM_FIXTURES:
        got = km_estimate(_recs(times, events)).survival
        oracle = [r[3] for r in km_oracle(times, events)]
        km_err = max(km_err, float(np.max(np.abs(got - want))), float(np.max(np.abs(got - oracle))))
    g = _recs([2, 4, 4, 7, 9, 12], [1, 1, 0, 1, 0, 1])
    same = logrank_test(g, list(g))
    p05, p01 = chi2_1df_pvalue(3.841), chi2_1df_pvalue(6.635)

    spec = SynthSpec(hazard_ratio=3.0)
    y = np.repeat([0, 1], 100)
    rejects = 0
    for seed in range(20):
        recs = synth_survival(y, spec, seed)
        a = [SurvivalRecord(r.sample_id, r.os_months, r.event) for r, t in zip(recs, y) if t == 1]
        b = [SurvivalRecord(r.sample_id, r.os_months, r.event) for r, t in zip(recs, y) if t == 0]
        rejects += logrank_test(a, b).pvalue < 0.05

    ok = (km_err <= 1e-12 and same.chi2 == 0.0 and same.pvalue == 1.0
          and abs(p05 - 0.05) <= 5e-4 and abs(p01 - 0.01) <= 5e-4 and rejects >= 18)
    report_criterion(
        8, ok,
        f"KM max err {km_err:.1e} (<=1e-12, 5 fixtures); identical groups chi2 {same.chi2} p {same.pvalue}; "
        f"p(3.841) {p05:.5f}, p(6.635) {p01:.5f}; HR 3 rejections {rejects}/20 (>=18)",
    )
    assert ok


# 9 ------------------------------------------------------------------------------------


def test_criterion_9_adamw():
    p = init_params(4, 2, 3, seed=9, lambda_dist=0.3)
    before = p.copy()
    lr, wd = 5e-5, 1e-5
    adamw_step(p, p.zeros_like(), OptState(), lr=lr, wd=wd)
    decay_exact = all(np.array_equal(a, getattr(before, n) * (1 - lr * wd)) for n, a in p.items())

    rng = np.random.default_rng(909)
    worst = 0.0
    for trial in range(20):
        q = init_params(4, 2, 3, seed=trial)
        lr, wd = [(5e-5, 1e-5), (1e-3, 0.01), (0.1, 0.0)][trial % 3]
        grads_seq = rng.normal(0, rng.uniform(0.01, 10), size=(30,) + q.W_q.shape)
        start = q.W_q.copy()
        state = OptState()
        g = q.zeros_like()
        traj = []
        for gi in grads_seq:
            g.W_q[...] = gi
            adamw_step(q, g, state, lr=lr, wd=wd, names=["W_q"])
            traj.append(q.W_q.copy())
        for idx in np.ndindex(start.shape):
            want = adamw_oracle(float(start[idx]), [float(gs[idx]) for gs in grads_seq], lr, wd)
            worst = max(worst, max(abs(t[idx] - w) for t, w in zip(traj, want)))
    ok = decay_exact and worst <= 1e-12
    report_criterion(9, ok, f"AdamW: zero-grad step exact decay {decay_exact}; 20 trajectories x 30 steps max abs dev {worst:.1e} (<=1e-12)")
    assert ok


# 10 -----------------------------------------------------------------------------------


def _run_all(root, n_jobs):
    c, small = root / "c", ["--n-slides", "24", "--d-patch", "16", "--n-expression", "60"]
    steps = [
        ["synth", "--out-dir", str(c), "--seed", "7", *small, "--packed"],
        ["label", "--out-dir", str(root / "l"), "--expression", str(c / "expression_tpm.tsv"), "--seed", "7"],
        ["train", "--out-dir", str(root / "t"), "--manifest", str(c / "manifest.tsv"), "--seed", "7",
         "--k-folds", "3", "--max-epochs", "4", "--patience", "1", "--lr", "1e-3", "--n-jobs", str(n_jobs)],
        ["evaluate", "--out-dir", str(root / "e"), "--checkpoint", str(root / "t" / "best_model.ckpt"),
         "--manifest", str(c / "manifest.tsv"), "--seed", "7"],
        ["survival", "--out-dir", str(root / "s"), "--clinical", str(c / "clinical.csv"),
         "--labels", str(root / "l" / "labels.tsv"), "--predictions", str(root / "e" / "concordance.tsv"), "--seed", "7"],
        ["attention", "--out-dir", str(root / "a"), "--checkpoint", str(root / "t" / "best_model.ckpt"),
         "--manifest", str(c / "manifest.tsv"), "--seed", "7"],
    ]
    for argv in steps:
        assert main(argv) == 0, argv
    return {str(p.relative_to(root)): _digest(p) for p in sorted(root.rglob("*")) if p.is_file()}


def test_criterion_10_determinism(tmp_path):
    first = _run_all(tmp_path / "r1", n_jobs=1)
    second = _run_all(tmp_path / "r2", n_jobs=1)
    differing = sorted(k for k in first if first[k] != second.get(k))
    parallel = _run_all(tmp_path / "r3", n_jobs=2)
    m_seq = json.loads((tmp_path / "r1" / "t" / "metrics.json").read_text())
    m_par = json.loads((tmp_path / "r3" / "t" / "metrics.json").read_text())
    keys = ("folds", "aggregate", "pooled_oof", "best_fold", "checkpoint_sha256")
    same_metrics = all(m_seq[k] == m_par[k] for k in keys)
    ckpt_same = first["t/best_model.ckpt"] == parallel["t/best_model.ckpt"]
    ok = not differing and set(first) == set(second) and same_metrics and ckpt_same
    report_criterion(
        10, ok,
        f"rerun of all 6 commands: {len(first)} files, {len(differing)} differ; "
        f"parallel (2 jobs) vs sequential metrics identical {same_metrics}, checkpoints identical {ckpt_same}",
    )
    assert ok
