"""Acceptance suite: one test per criterion, one printed pass/fail line each.

The heavy fixtures build a full desk-scale workspace once per session:
dataset (3 categories x 80 shapes, 512-point completes, 128-point partials),
one pretraining, the four flag-setting runs, and the prior-count sweep.
Run with `pytest -s tests/test_acceptance.py` to see the per-criterion lines.
"""

import dataclasses
import json
import time
from pathlib import Path

import numpy as np
import pytest

import shapemem.autodiff as ad
import shapemem.causal as causal
import shapemem.geometry as geo
import shapemem.pipeline as pipeline
from shapemem import Tape, gradient_check
from shapemem.config import ExperimentConfig
from shapemem.data import DatasetManifest, load_split, make_partial
from shapemem.memory import MemoryBank
from shapemem.models import CompletionModel, PointEncoder, ShapeDecoder
from shapemem.pretrain import ContrastiveBatch, cross_loss, intra_loss

import oracles


def report(criterion, passed, detail=""):
    line = f"[criterion {criterion}] {'PASS' if passed else 'FAIL'} {detail}"
    print(line, flush=True)
    assert passed, line


# -- shared desk-scale workspace -------------------------------------------------


@pytest.fixture(scope="module")
def desk(tmp_path_factory):
    """Dataset + pretraining + the training runs used by criteria 6 to 10."""
    root = tmp_path_factory.mktemp("desk")
    config = ExperimentConfig(data_dir=str(root / "data"), out_dir=str(root / "runs"))
    config.validate()
    pipeline.ensure_dataset(config)
    manifest = DatasetManifest.load(config.data_dir + "/manifest.json")

    t0 = time.time()
    pipeline.pretrain_stage(config)
    pretrain_seconds = time.time() - t0

    runs = {}
    t0 = time.time()
    for name in ("A", "B", "D", "F"):
        memory, pretrain, causal_flag = pipeline.ABLATION_SETTINGS[name]
        cfg = dataclasses.replace(config, use_memory=memory, use_pretrain=pretrain,
                                  use_causal=causal_flag)
        artifacts = pipeline.train_run(cfg, label=f"setting_{name}")
        rep = pipeline.evaluate(artifacts.model, artifacts.bank, cfg,
                                config.data_dir, manifest)
        runs[name] = (cfg, artifacts, rep)
    ablation_seconds = time.time() - t0

    # prior-count sweep over the full model; the k=0 row is the all-off
    # baseline by definition, so it reuses the setting-A run
    sweeps = {0: runs["A"], 3: runs["F"]}
    for k in (1, 5):
        cfg = dataclasses.replace(config, prior_count=k)
        artifacts = pipeline.train_run(cfg, label=f"priors_{k}")
        rep = pipeline.evaluate(artifacts.model, artifacts.bank, cfg,
                                config.data_dir, manifest)
        sweeps[k] = (cfg, artifacts, rep)

    return {
        "root": root,
        "config": config,
        "manifest": manifest,
        "runs": runs,
        "sweeps": sweeps,
        "pretrain_seconds": pretrain_seconds,
        "ablation_seconds": ablation_seconds,
    }


# -- criterion 1: metric oracle equivalence ---------------------------------------


def test_criterion_1_metric_oracles():
    rng = np.random.default_rng(1001)
    t0 = time.time()
    max_err = 0.0
    recent_refs = []
    for _ in range(200):
        a = rng.uniform(-1, 1, (int(rng.integers(1, 65)), 3))
        b = rng.uniform(-1, 1, (int(rng.integers(1, 65)), 3))
        al, bl = a.tolist(), b.tolist()
        d_ab = oracles.min_dists(al, bl, oracles.l2_dist)
        d_ba = oracles.min_dists(bl, al, oracles.l2_dist)
        m_ab = oracles.min_dists(al, bl, oracles.l1_dist)
        m_ba = oracles.min_dists(bl, al, oracles.l1_dist)
        checks = [
            (geo.chamfer_l2(a, b),
             sum(d * d for d in d_ab) / len(a) + sum(d * d for d in d_ba) / len(b)),
            (geo.chamfer_l1_metric(a, b),
             0.5 * (sum(d_ab) / len(a) + sum(d_ba) / len(b))),
            (geo.chamfer_l1_literal(a, b),
             sum(m_ab) / len(a) + sum(m_ba) / len(b)),
            (geo.fidelity(a, b), sum(d_ab) / len(a)),
        ]
        threshold = 0.4
        precision = sum(1 for d in d_ab if d <= threshold) / len(a)
        recall = sum(1 for d in d_ba if d <= threshold) / len(b)
        brute_f = (0.0 if precision + recall == 0
                   else 2 * precision * recall / (precision + recall))
        checks.append((geo.f_score(a, b, threshold), brute_f))
        refs = recent_refs[-4:] + [b]
        checks.append((geo.mmd(a, refs),
                       min(oracles.chamfer_l2_brute(al, r.tolist()) for r in refs)))
        recent_refs.append(b)
        max_err = max(max_err, max(abs(x - y) for x, y in checks))
    elapsed = time.time() - t0
    report(1, max_err < 1e-9 and elapsed < 10.0,
           f"max |kernel - brute| = {max_err:.2e} over 200 pairs x 6 metrics "
           f"in {elapsed:.1f}s")


# -- criterion 2: gradient suite ----------------------------------------------------


def test_criterion_2_gradient_suite():
    t0 = time.time()
    failures = []
    checks = 0

    def run(name, f, x):
        nonlocal checks
        rep = gradient_check(f, x, h=1e-5, tol=1e-4)
        checks += 1
        if not rep.passed:
            failures.append((name, rep.max_rel_error))

    for seed in range(20):
        rng = np.random.default_rng(2000 + seed)
        f2 = rng.normal(size=(3, 4))
        fc = rng.normal(size=(3, 4))
        run("intra", lambda x: intra_loss(ContrastiveBatch(
            x.reshape((3, 4)), x.tape.tensor(f2), x.tape.tensor(fc), 0.1)),
            rng.normal(size=12))
        run("cross", lambda x: cross_loss(ContrastiveBatch(
            x.reshape((3, 4)), x.tape.tensor(f2), x.tape.tensor(fc), 0.1)),
            rng.normal(size=12))

        dec = ShapeDecoder(6, 8, 2, 2, rng)
        gt = rng.uniform(-0.5, 0.5, (5, 3))

        def through_decoder(x):
            tape = x.tape
            lifted = dec.lift(tape)
            lifted["w2"] = x.reshape(dec.params["w2"].shape)
            _, dense = dec.forward(tape, tape.tensor(rng_fused), lifted)
            return geo.chamfer_l1_literal(dense, gt)

        rng_fused = rng.normal(size=6)
        run("chamfer-through-decoder", through_decoder,
            rng.normal(size=dec.params["w2"].size) * 0.3)

        fv = rng.normal(size=4)

        def strat(x):
            tape = x.tape
            lifted = dec.lift(tape)
            return causal.causal_loss(
                x, tape.tensor(fv), causal.partition(4, 2),
                causal.threshold_set(fv, 0.3),
                lambda fused: dec.forward(tape, fused, lifted), gt)

        run("stratified", strat, rng.normal(size=2))

        enc = PointEncoder(4, 2, rng)
        cloud = rng.uniform(-0.5, 0.5, (6, 3))

        def combined(x):
            tape = x.tape
            le = {k: tape.tensor(v) for k, v in enc.params.items()}
            le["w3"] = x.reshape(enc.params["w3"].shape)
            f_partial = enc.forward(tape, cloud, le)
            ld = dec.lift(tape)
            fused = ad.concat([f_partial, tape.tensor(fv)])
            l_caus = causal.causal_loss(
                f_partial, tape.tensor(fv), causal.partition(4, 2),
                causal.threshold_set(fv, 0.3),
                lambda z: dec.forward(tape, z, ld), gt)
            centers, _ = dec.forward(tape, fused, ld)
            l_recon = geo.chamfer_l1_literal(centers, gt)
            return causal.combined_loss(l_caus, l_recon, 0.5)

        run("combined-end-to-end", combined, rng.normal(size=enc.params["w3"].size) * 0.4)

    elapsed = time.time() - t0
    report(2, not failures and elapsed < 60.0,
           f"{checks} gradient checks, failures: {failures or 'none'}, {elapsed:.1f}s")


# -- criterion 3: contrastive closed forms --------------------------------------------


def test_criterion_3_closed_forms():
    tape = Tape()
    u = np.array([1.0, 0.0, 0.0, 0.0])
    f = tape.tensor(np.stack([u, u]))
    batch = ContrastiveBatch(f, f, f, temperature=0.1)
    err_ln3 = abs(float(intra_loss(batch).data) - np.log(3.0))
    errs = [err_ln3]
    for n in (2, 3):
        t = Tape()
        eye = t.tensor(np.eye(n, 6))
        b = ContrastiveBatch(eye, eye, eye, temperature=0.1)
        expected = -np.log(np.exp(10.0) / (np.exp(10.0) + 2 * n - 2))
        errs.append(abs(float(intra_loss(b).data) - expected))
        errs.append(abs(float(cross_loss(b).data) - expected))
    report(3, max(errs) < 1e-9,
           f"ln3 error {err_ln3:.2e}, orthogonal-case max error {max(errs):.2e}")


# -- criterion 4: memory invariants ---------------------------------------------------


def test_criterion_4_memory_invariants(tmp_path):
    rng = np.random.default_rng(4004)
    dim, n_slots = 12, 24

    def cloud():
        return rng.uniform(-0.5, 0.5, (10, 3)).astype(np.float32).astype(np.float64)

    bank = MemoryBank(capacity=n_slots, delta=0.05, top_k=3)
    pool = [cloud() for _ in range(n_slots)]
    bank.seed([(c, rng.normal(size=dim)) for c in pool])

    t0 = time.time()
    violations = []
    for step in range(10_000):
        if step % 2 == 0:
            q = rng.normal(size=dim)
            res = bank.query(q)
            keys = [s.key.tolist() for s in bank.slots]
            if res.indices.tolist() != oracles.top_k_by_cosine(keys, q.tolist(), 3):
                violations.append(f"query oracle mismatch at step {step}")
                break
        else:
            gt = pool[rng.integers(0, len(pool))] if rng.uniform() < 0.6 else cloud()
            ages_before = [s.age for s in bank.slots]
            values_before = [s.value.tobytes() for s in bank.slots]
            out = bank.update(rng.normal(size=dim), gt)
            ages = [s.age for s in bank.slots]
            if ages.count(0) != 1 or ages.index(0) != out.slot:
                violations.append(f"age invariant broken at step {step}")
                break
            if any(a1 != a0 + 1 for i, (a0, a1) in enumerate(zip(ages_before, ages))
                   if i != out.slot):
                violations.append(f"age increment broken at step {step}")
                break
            if any(abs(np.linalg.norm(s.key) - 1.0) > 1e-9 for s in bank.slots):
                violations.append(f"key norm broken at step {step}")
                break
            after = [s.value.tobytes() for s in bank.slots]
            if out.positive and after != values_before:
                violations.append(f"positive update changed a value at step {step}")
                break

    path = tmp_path / "bank.ppcm"
    bank.save(path)
    loaded = MemoryBank.load(path, top_k=3, delta=bank.delta)
    loaded_state = [(s.key.tobytes(), s.value.tobytes(), s.age) for s in loaded.slots]
    orig_state = [(s.key.tobytes(), s.value.tobytes(), s.age) for s in bank.slots]
    if loaded_state != orig_state:
        violations.append("save/load round trip not bit-exact")
    elapsed = time.time() - t0
    report(4, not violations,
           f"10,000 ops, violations: {violations or 'none'}, {elapsed:.1f}s")


# -- criterion 5: stratification algebra ----------------------------------------------


def test_criterion_5_stratification_algebra():
    rng = np.random.default_rng(5005)
    problems = []
    for trial in range(50):
        n = int(rng.choice([1, 2, 3, 4, 6]))
        dim = n * int(rng.integers(1, 8))
        fv = rng.normal(size=dim)
        t = float(rng.uniform(0.0, 1.2))
        strata = causal.partition(dim, n)
        union = np.sort(np.concatenate(strata))
        if not np.array_equal(union, np.arange(dim)):
            problems.append("strata do not partition the index set")
        selected = causal.threshold_set(fv, t)
        if sum(len(np.intersect1d(h, selected)) for h in strata) != len(selected):
            problems.append("per-stratum selected sizes do not sum to |S_t|")
        for h in strata[:2]:
            once = causal.select(fv, h, selected)
            if not np.array_equal(once, causal.select(once, h, selected)):
                problems.append("select is not idempotent")

    dec = ShapeDecoder(9, 10, 3, 2, np.random.default_rng(1))
    gt = rng.uniform(-0.5, 0.5, (6, 3))
    fp, fv = rng.normal(size=3), rng.normal(size=6)
    tape = Tape()
    lifted = dec.lift(tape)
    decode = lambda fused: dec.forward(tape, fused, lifted)
    l_strat = causal.causal_loss(tape.tensor(fp), tape.tensor(fv),
                                 causal.partition(6, 1), causal.threshold_set(fv, 0.0),
                                 decode, gt)
    fused = ad.concat([tape.tensor(fp), tape.tensor(fv)])
    _, dense = decode(fused)
    l_plain = geo.chamfer_l1_literal(dense, gt)
    if float(l_strat.data) != float(l_plain.data):
        problems.append("n=1, t=0 stratified loss is not bit-equal to the fused loss")
    report(5, not problems, f"50 random trials, problems: {problems or 'none'}")


# -- criterion 6: pretraining retrieval ------------------------------------------------


def test_criterion_6_pretraining_retrieval(desk):
    config = desk["config"]
    manifest = desk["manifest"]
    model = CompletionModel(config.feature_dim, config.hidden_dim,
                            config.decoder_hidden, config.num_centers,
                            config.expansion, config.prior_count, config.seed)
    model.load_encoders(Path(config.out_dir) / "pretrain" / "encoders.ppcw")
    test_clouds = [c for _, _, c in load_split(config.data_dir, manifest, "test")]
    feats = np.stack([model.encoder_complete.forward_np(c) for c in test_clouds])
    feats /= np.linalg.norm(feats, axis=1, keepdims=True)
    hits = trials = 0
    for vp in range(8):
        for frac in config.fractions:
            for i, cloud in enumerate(test_clouds):
                partial = make_partial(cloud, vp, frac, config.partial_points)
                f = model.encoder_partial.forward_np(partial)
                sims = feats @ (f / np.linalg.norm(f))
                hits += int(np.argmax(sims) == i)
                trials += 1
    accuracy = hits / trials
    chance = 1.0 / len(test_clouds)
    ok = accuracy > 5.0 * chance and desk["pretrain_seconds"] < 900.0
    report(6, ok,
           f"top-1 retrieval {accuracy:.3f} vs chance {chance:.4f} "
           f"({accuracy / chance:.1f}x), pretrain {desk['pretrain_seconds']:.0f}s")


# -- criterion 7: ablation trend --------------------------------------------------------


def test_criterion_7_ablation_trend(desk):
    cd = {name: desk["runs"][name][2].mean("cd_l2") for name in ("A", "B", "D", "F")}
    chain = cd["F"] < cd["D"] < cd["B"] < cd["A"]
    improvement = (cd["A"] - cd["F"]) / cd["A"]
    fallback = cd["F"] < cd["A"] and improvement >= 0.20
    ok = (chain or fallback) and desk["ablation_seconds"] < 3600.0
    detail = (f"cd_l2: A={cd['A']:.2f} B={cd['B']:.2f} D={cd['D']:.2f} F={cd['F']:.2f}; "
              f"full chain {'holds' if chain else 'fails'}, "
              f"F vs A improvement {improvement:.0%}, "
              f"four runs {desk['ablation_seconds']:.0f}s")
    report(7, ok, detail)


# -- criterion 8: prior-count trend ------------------------------------------------------


def test_criterion_8_prior_count_trend(desk):
    cd = {k: desk["sweeps"][k][2].mean("cd_l2") for k in sorted(desk["sweeps"])}
    ok = cd[1] < cd[0] and cd[3] < cd[0]
    detail = " ".join(f"k={k}:{v:.2f}" for k, v in cd.items())
    report(8, ok, f"cd_l2 by prior count: {detail} "
                  f"(beyond-optimum behavior reported, not asserted)")


# -- criterion 9: protocol correctness ----------------------------------------------------


def test_criterion_9_protocol_correctness(desk):
    config = desk["config"]
    manifest = desk["manifest"]
    oracle_report = pipeline.evaluate(None, None, config, config.data_dir, manifest,
                                      predictor=lambda partial, complete: complete)
    exact = (all(r.cd_l1 == 0.0 and r.cd_l2 == 0.0 for r in oracle_report.records)
             and all(r.fscore == 1.0 for r in oracle_report.records))
    cells = len(oracle_report.records)
    expected_cells = len(manifest.test_ids) * 8 * len(config.fractions)

    # harder crops must score worse for every trained model
    orderings = {}
    for name in ("A", "B", "D", "F"):
        summary = desk["runs"][name][2].summary()
        orderings[name] = (summary["cd_h"], summary["cd_s"])
    ordered = all(h >= s for h, s in orderings.values())
    report(9, exact and cells == expected_cells and ordered,
           f"identity predictor exact on {cells} cells; "
           + "; ".join(f"{n}: cd_h={h:.2f} >= cd_s={s:.2f}"
                       for n, (h, s) in orderings.items()))


# -- criterion 10: determinism -------------------------------------------------------------


def test_criterion_10_determinism(desk):
    config = desk["config"]
    manifest = desk["manifest"]

    cfg_a, artifacts_a, report_a = desk["runs"]["A"]
    rerun = pipeline.train_run(cfg_a, label="setting_A_rerun")
    rerun_report = pipeline.evaluate(rerun.model, rerun.bank, cfg_a,
                                     config.data_dir, manifest)
    train_same = all(
        np.array_equal(artifacts_a.model.decoder.params[k], rerun.model.decoder.params[k])
        for k in artifacts_a.model.decoder.params)
    metrics_same = (
        report_a.mean("cd_l2") == rerun_report.mean("cd_l2")
        and report_a.mean("cd_l1") == rerun_report.mean("cd_l1")
        and report_a.mean("fscore") == rerun_report.mean("fscore"))

    cfg_f, artifacts_f, report_f = desk["runs"]["F"]
    eval_again = pipeline.evaluate(artifacts_f.model, artifacts_f.bank, cfg_f,
                                   config.data_dir, manifest)
    eval_same = [dataclasses.astuple(r) for r in report_f.records] == \
                [dataclasses.astuple(r) for r in eval_again.records]

    report(10, train_same and metrics_same and eval_same,
           f"re-trained run bit-equal: {train_same and metrics_same}; "
           f"re-evaluated report bit-equal: {eval_same}")
