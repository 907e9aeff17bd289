"""Built-in sanity checks: metric oracles, gradient checks, memory invariants.

Runs in a few seconds and prints one line per check; intended for quick
verification of an installation rather than as the full test suite.
"""

from __future__ import annotations

import sys

import numpy as np

from . import autodiff as ad
from . import causal, geometry
from .memory import MemoryBank
from .models import ShapeDecoder
from .pretrain import ContrastiveBatch, cross_loss, intra_loss


def _brute_chamfer_l2(a, b):
    fwd = sum(min(sum((p - q) ** 2 for p, q in zip(pa, pb)) for pb in b) for pa in a) / len(a)
    bwd = sum(min(sum((p - q) ** 2 for p, q in zip(pb, pa)) for pa in a) for pb in b) / len(b)
    return fwd + bwd


def run_selfcheck() -> int:
    rng = np.random.default_rng(12345)
    failures = 0

    def check(name, ok):
        nonlocal failures
        print(f"{'ok' if ok else 'FAIL'} {name}", file=sys.stderr)
        if not ok:
            failures += 1

    # metric kernels against a python brute-force oracle
    ok = True
    for _ in range(20):
        a = rng.uniform(-1, 1, (rng.integers(1, 24), 3))
        b = rng.uniform(-1, 1, (rng.integers(1, 24), 3))
        if abs(geometry.chamfer_l2(a, b) - _brute_chamfer_l2(a, b)) > 1e-9:
            ok = False
    check("chamfer_l2 matches brute force", ok)

    # closed-form contrastive value
    tape = ad.Tape()
    u = np.array([1.0, 0.0, 0.0])
    feats = tape.tensor(np.stack([u, u]))
    batch = ContrastiveBatch(feats, feats, feats, temperature=0.1)
    check("intra loss closed form",
          abs(float(intra_loss(batch).data) - np.log(3.0)) < 1e-9)
    check("cross loss closed form",
          abs(float(cross_loss(batch).data) - np.log(3.0)) < 1e-9)

    # gradient checks on the main differentiable pieces
    gt = rng.uniform(-0.5, 0.5, (6, 3))
    rep = ad.gradient_check(
        lambda x: geometry.chamfer_l1_literal(x.reshape((5, 3)), gt),
        rng.uniform(-0.5, 0.5, 15))
    check("chamfer_l1_literal gradient", rep.passed)

    dec = ShapeDecoder(8, 12, 3, 2, rng)
    fv = rng.normal(size=4)

    def causal_fn(x):
        t = x.tape
        lifted = dec.lift(t)
        return causal.causal_loss(
            x, t.tensor(fv), causal.partition(4, 2), causal.threshold_set(fv, 0.1),
            lambda fused: dec.forward(t, fused, lifted), gt)

    rep = ad.gradient_check(causal_fn, rng.normal(size=4))
    check("stratified loss gradient", rep.passed)

    # memory invariants over a short random run
    bank = MemoryBank(capacity=16, delta=0.01, top_k=3)
    clouds = [rng.uniform(-0.5, 0.5, (12, 3)) for _ in range(8)]
    bank.seed([(c, rng.normal(size=6)) for c in clouds])
    ok = True
    for _ in range(50):
        bank.update(rng.normal(size=6), clouds[rng.integers(0, 8)])
        ages = [s.age for s in bank.slots]
        if ages.count(0) != 1:
            ok = False
        if any(abs(np.linalg.norm(s.key) - 1.0) > 1e-9 for s in bank.slots):
            ok = False
    check("memory invariants over random updates", ok)

    print(f"selfcheck: {6 - failures}/6 passed", file=sys.stderr)
    return 0 if failures == 0 else 1
