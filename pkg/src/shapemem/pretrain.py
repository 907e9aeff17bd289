"""Contrastive alignment of partial and complete shape features.

Two temperature-scaled cosine losses: one between two partial views of the
same shape (view invariance), one between the averaged partial feature and
the complete-shape feature (modality alignment). In both, the negative pool
for anchor i sums the off-diagonal same-side similarities plus the full
cross-side row, including the positive itself, and each loss averages its
two symmetric per-sample terms over 2N.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .data import FIXED_VIEWPOINTS, make_partial
from .errors import ContractError, DomainError
from .geometry import as_cloud, fps, viewpoint_crop
from .models import PointEncoder, make_optimizer


@dataclass
class ViewPair:
    source: np.ndarray
    partials: tuple          # two (partial_size, 3) arrays
    viewpoints: tuple        # viewpoint indices used
    keep_counts: tuple


def make_view_pair(source, rng, partial_size: int,
                   fraction_range=(0.25, 0.75),
                   viewpoints=FIXED_VIEWPOINTS) -> ViewPair:
    """Crop the same shape twice from independently drawn viewpoints.

    Keep fractions are uniform in `fraction_range`; both crops are then
    FPS-downsampled to the fixed partial size.
    """
    source = as_cloud(source)
    lo, hi = fraction_range
    vps = rng.integers(0, len(viewpoints), size=2)
    fracs = rng.uniform(lo, hi, size=2)
    keeps = []
    parts = []
    for vi, fr in zip(vps, fracs):
        keep_n = max(1, int(round(fr * len(source))))
        if partial_size > keep_n:
            raise ContractError(
                f"source of {len(source)} points too small for partial size "
                f"{partial_size} at keep fraction {fr:.3f}"
            )
        cropped = viewpoint_crop(source, viewpoints[int(vi)], keep_n)
        parts.append(fps(cropped, partial_size, seed_index=0))
        keeps.append(keep_n)
    return ViewPair(source=source, partials=tuple(parts),
                    viewpoints=tuple(int(v) for v in vps),
                    keep_counts=tuple(keeps))


@dataclass
class ContrastiveBatch:
    """Stacked per-sample features: two partial views and the complete shape."""

    f_view1: ad.Tensor       # (N, C)
    f_view2: ad.Tensor       # (N, C)
    f_complete: ad.Tensor    # (N, C)
    temperature: float

    def __post_init__(self):
        if self.temperature <= 0:
            raise ContractError("temperature must be positive")
        shapes = {self.f_view1.shape, self.f_view2.shape, self.f_complete.shape}
        if len(shapes) != 1 or self.f_view1.data.ndim != 2:
            raise ContractError("batch features must share one (N, C) shape")
        if self.f_view1.shape[0] < 2:
            raise ContractError("contrastive batches need at least 2 samples")


def _unit_rows(f: ad.Tensor) -> ad.Tensor:
    norms_sq = (f * f).sum(axis=1, keepdims=True)
    if np.any(norms_sq.data == 0.0):
        raise DomainError("contrastive feature row is the zero vector")
    return f / (norms_sq ** 0.5)


def _nt_xent_row_losses(fa: ad.Tensor, fb: ad.Tensor, tau: float) -> ad.Tensor:
    """Per-anchor -log(pos/neg) terms for anchors fa against pair side fb."""
    n = fa.shape[0]
    a = _unit_rows(fa)
    b = _unit_rows(fb)
    e_ab = ((a @ b.T) * (1.0 / tau)).exp()
    e_aa = ((a @ a.T) * (1.0 / tau)).exp()
    diag = np.arange(n) * n + np.arange(n)
    pos = ad.gather(e_ab.reshape((n * n,)), diag)
    diag_aa = ad.gather(e_aa.reshape((n * n,)), diag)
    neg = e_aa.sum(axis=1) - diag_aa + e_ab.sum(axis=1)
    return neg.log() - pos.log()


def intra_loss(batch: ContrastiveBatch) -> ad.Tensor:
    """View-invariance loss over the two partial feature sets."""
    n = batch.f_view1.shape[0]
    terms = (_nt_xent_row_losses(batch.f_view1, batch.f_view2, batch.temperature).sum()
             + _nt_xent_row_losses(batch.f_view2, batch.f_view1, batch.temperature).sum())
    return terms * (1.0 / (2 * n))


def cross_loss(batch: ContrastiveBatch) -> ad.Tensor:
    """Partial/complete alignment loss on the averaged partial feature."""
    n = batch.f_view1.shape[0]
    f_partial = (batch.f_view1 + batch.f_view2) * 0.5
    terms = (_nt_xent_row_losses(f_partial, batch.f_complete, batch.temperature).sum()
             + _nt_xent_row_losses(batch.f_complete, f_partial, batch.temperature).sum())
    return terms * (1.0 / (2 * n))


def pretrain_loss(batch: ContrastiveBatch) -> ad.Tensor:
    return intra_loss(batch) + cross_loss(batch)


# -- training loop -------------------------------------------------------------


@dataclass
class PretrainResult:
    encoder_partial: PointEncoder
    encoder_complete: PointEncoder
    trace: list              # per-epoch dicts


def pretrain_run(train_clouds, config, trace_path=None) -> PretrainResult:
    """Jointly train both encoders on the training split's complete clouds.

    `train_clouds` is a sequence of complete clouds; `config` supplies
    dimensions, temperature, batch size, epochs, learning schedule, seed.
    Deterministic for a fixed seed. Appends one JSON line per epoch to
    `trace_path` when given.
    """
    clouds = [as_cloud(c) for c in train_clouds]
    if len(clouds) < 2:
        raise ContractError("pretraining needs at least two clouds")
    rng_init = np.random.default_rng([config.seed, 31])
    enc_k = PointEncoder(config.hidden_dim, config.feature_dim, rng_init)
    enc_v = PointEncoder(config.hidden_dim, config.feature_dim, rng_init)

    params = {}
    params.update({f"enc_partial/{k}": v for k, v in enc_k.params.items()})
    params.update({f"enc_complete/{k}": v for k, v in enc_v.params.items()})
    opt = make_optimizer(config.optimizer, params, config.pretrain_learning_rate,
                         momentum=config.momentum, weight_decay=config.weight_decay,
                         decay=config.lr_decay, decay_every=config.lr_decay_every)

    trace = []
    trace_fh = open(trace_path, "a") if trace_path else None
    try:
        for epoch in range(config.pretrain_epochs):
            rng = np.random.default_rng([config.seed, 32, epoch])
            order = rng.permutation(len(clouds))
            sums = np.zeros(2)
            batches = 0
            for start in range(0, len(order), config.batch_size):
                idx = order[start:start + config.batch_size]
                if len(idx) < 2:
                    continue
                pairs = [make_view_pair(clouds[i], rng, config.partial_points)
                         for i in idx]
                tape = ad.Tape()
                lifted_k = {k: tape.tensor(v) for k, v in enc_k.params.items()}
                lifted_v = {k: tape.tensor(v) for k, v in enc_v.params.items()}
                f1 = [enc_k.forward(tape, p.partials[0], lifted_k) for p in pairs]
                f2 = [enc_k.forward(tape, p.partials[1], lifted_k) for p in pairs]
                fc = [enc_v.forward(tape, p.source, lifted_v) for p in pairs]
                batch = ContrastiveBatch(
                    f_view1=_stack(tape, f1),
                    f_view2=_stack(tape, f2),
                    f_complete=_stack(tape, fc),
                    temperature=config.temperature,
                )
                l_intra = intra_loss(batch)
                l_cross = cross_loss(batch)
                total = l_intra + l_cross
                tape.backward(total)
                grads = {}
                for k, t in lifted_k.items():
                    grads[f"enc_partial/{k}"] = t.grad
                for k, t in lifted_v.items():
                    grads[f"enc_complete/{k}"] = t.grad
                opt.step(grads, epoch)
                sums += (float(l_intra.data), float(l_cross.data))
                batches += 1
            record = {
                "epoch": epoch,
                "l_intra": sums[0] / batches,
                "l_cross": sums[1] / batches,
                "l_pre": (sums[0] + sums[1]) / batches,
            }
            trace.append(record)
            if trace_fh:
                trace_fh.write(json.dumps(record) + "\n")
                trace_fh.flush()
    finally:
        if trace_fh:
            trace_fh.close()
    return PretrainResult(encoder_partial=enc_k, encoder_complete=enc_v, trace=trace)


def _stack(tape: ad.Tape, rows) -> ad.Tensor:
    """Stack rank-1 tensors (C,) into (N, C)."""
    return ad.concat([r.reshape((1, r.shape[0])) for r in rows])


def retrieval_accuracy(enc_k: PointEncoder, enc_v: PointEncoder, clouds,
                       partial_size: int, viewpoint_index: int = 0,
                       fraction: float = 0.5) -> float:
    """Top-1 partial-to-own-complete retrieval rate by cosine similarity."""
    if not clouds:
        raise ContractError("retrieval needs a nonempty cloud set")
    complete_feats = np.stack([enc_v.forward_np(c) for c in clouds])
    norms = np.linalg.norm(complete_feats, axis=1, keepdims=True)
    complete_unit = complete_feats / np.where(norms == 0, 1.0, norms)
    hits = 0
    for i, cloud in enumerate(clouds):
        partial = make_partial(cloud, viewpoint_index, fraction, partial_size)
        f = enc_k.forward_np(partial)
        n = np.linalg.norm(f)
        if n == 0:
            continue
        sims = complete_unit @ (f / n)
        if int(np.argmax(sims)) == i:
            hits += 1
    return hits / len(clouds)
