"""End-to-end orchestration: training, evaluation, ablation matrix.

A run consumes a generated dataset, optionally pretrained encoders, and
produces weights, a memory bank, a loss trace, and a run manifest holding
the fully resolved configuration. Everything is deterministic in the seed.
"""

from __future__ import annotations

import csv
import dataclasses
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import causal
from .config import ExperimentConfig
from .data import DatasetManifest, build_dataset, load_split, make_partial
from .errors import ContractError, StateError
from .geometry import chamfer_l1_literal, chamfer_l1_metric, chamfer_l2, f_score, fidelity, mmd
from .memory import MemoryBank
from .models import CompletionModel, make_optimizer
from .pretrain import pretrain_run

ABLATION_SETTINGS = {
    # label: (memory, pretrain, causal), mirroring the standard six-way grid
    "A": (False, False, False),
    "B": (True, False, False),
    "C": (False, True, False),
    "D": (True, True, False),
    "E": (True, False, True),
    "F": (True, True, True),
}


def difficulty_labels(fractions) -> dict:
    """Most points kept = simple; fewest = hard."""
    names = ["simple", "moderate", "hard"]
    ordered = sorted(set(fractions), reverse=True)
    if len(ordered) > len(names):
        names += [f"level{i}" for i in range(3, len(ordered))]
    return {f: names[i] for i, f in enumerate(ordered)}


# -- evaluation ----------------------------------------------------------------


@dataclass
class EvalRecord:
    sample_id: str
    category: str
    viewpoint: int
    fraction: float
    difficulty: str
    cd_l1: float            # chamfer_l1_metric x 1000
    cd_l2: float            # chamfer_l2 x 1000
    fscore: float
    fidelity: float | None = None
    mmd: float | None = None


@dataclass
class EvalReport:
    records: list

    def mean(self, name: str) -> float:
        return float(np.mean([getattr(r, name) for r in self.records]))

    def mean_by_difficulty(self, name: str) -> dict:
        out = {}
        for record in self.records:
            out.setdefault(record.difficulty, []).append(getattr(record, name))
        return {k: float(np.mean(v)) for k, v in out.items()}

    def summary(self) -> dict:
        by_l2 = self.mean_by_difficulty("cd_l2")
        return {
            "count": len(self.records),
            "cd_l1": self.mean("cd_l1"),
            "cd_l2": self.mean("cd_l2"),
            "fscore": self.mean("fscore"),
            "cd_s": by_l2.get("simple"),
            "cd_m": by_l2.get("moderate"),
            "cd_h": by_l2.get("hard"),
        }

    def write_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            for r in self.records:
                fh.write(json.dumps(dataclasses.asdict(r)) + "\n")


def _parallel_map(fn, items, threads: int):
    if threads <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


class Completer:
    """Inference path shared by evaluation and the CLI completion command."""

    def __init__(self, model: CompletionModel, bank: MemoryBank | None,
                 config: ExperimentConfig):
        self.model = model
        self.bank = bank
        self.config = config
        if config.use_memory:
            if bank is None:
                raise StateError("memory is enabled but no bank was provided")
            self._slot_features = [
                model.encoder_complete.forward_np(s.value) for s in bank.slots
            ]
        else:
            self._slot_features = None

    def prior_feature(self, f_partial: np.ndarray) -> np.ndarray:
        cfg = self.config
        if not cfg.use_memory or cfg.prior_count == 0:
            return np.zeros(cfg.prior_dim)
        result = self.bank.query(f_partial)
        return np.concatenate([self._slot_features[i] for i in result.indices])

    def complete(self, partial: np.ndarray) -> np.ndarray:
        cfg = self.config
        f_partial = self.model.encoder_partial.forward_np(partial)
        f_prior = self.prior_feature(f_partial)
        if cfg.use_causal:
            t = causal.magnitude_threshold(f_prior, cfg.magnitude_rule)
        else:
            t = 0.0
        selected = causal.threshold_set(f_prior, t)
        return causal.infer(f_partial, f_prior, selected, self.model.decoder.forward_np)


def evaluate(model: CompletionModel | None, bank: MemoryBank | None,
             config: ExperimentConfig, data_root, manifest: DatasetManifest,
             split: str = "test", predictor=None) -> EvalReport:
    """Score every (sample, viewpoint, fraction) cell of a split.

    `predictor(partial, complete) -> cloud` overrides the model path (used
    for oracle checks). Never mutates the model or the bank.
    """
    samples = load_split(data_root, manifest, split)
    if not samples:
        raise ContractError(f"split {split!r} is empty")
    if predictor is None:
        if model is None:
            raise ContractError("evaluate needs a model or an explicit predictor")
        completer = Completer(model, bank, config)
        predictor = lambda partial, complete: completer.complete(partial)
    labels = difficulty_labels(config.fractions)
    train_refs = None
    if config.eval_mmd:
        train_refs = [c for _, _, c in load_split(data_root, manifest, "train")]

    cells = [
        (sid, category, complete, vp, frac)
        for sid, category, complete in samples
        for vp in range(8)
        for frac in config.fractions
    ]

    def run_cell(cell) -> EvalRecord:
        sid, category, complete, vp, frac = cell
        partial = make_partial(complete, vp, frac, config.partial_points,
                               allowed_fractions=config.fractions)
        pred = predictor(partial, complete)
        return EvalRecord(
            sample_id=sid,
            category=category,
            viewpoint=vp,
            fraction=frac,
            difficulty=labels[frac],
            cd_l1=chamfer_l1_metric(pred, complete) * 1000.0,
            cd_l2=chamfer_l2(pred, complete) * 1000.0,
            fscore=f_score(pred, complete, 0.01),
            fidelity=fidelity(partial, pred) if config.eval_fidelity else None,
            mmd=mmd(pred, train_refs, config.mmd_metric) if config.eval_mmd else None,
        )

    return EvalReport(records=_parallel_map(run_cell, cells, config.threads))


# -- training ------------------------------------------------------------------


@dataclass
class TrainArtifacts:
    model: CompletionModel
    bank: MemoryBank | None
    trace: list
    run_dir: Path
    weights_path: Path
    bank_path: Path | None
    manifest_path: Path


def _dataset_paths(config: ExperimentConfig):
    data_root = Path(config.data_dir)
    manifest_path = data_root / "manifest.json"
    if not manifest_path.exists():
        raise StateError(
            f"dataset manifest {manifest_path} not found; run the gen-data stage first"
        )
    return data_root, DatasetManifest.load(manifest_path)


def ensure_dataset(config: ExperimentConfig) -> DatasetManifest:
    manifest_path = Path(config.data_dir) / "manifest.json"
    if manifest_path.exists():
        return DatasetManifest.load(manifest_path)
    return build_dataset(
        config.data_dir, config.categories, config.samples_per_category,
        config.complete_points, config.partial_points, config.train_fraction,
        config.seed, fractions=config.fractions,
    )


def pretrain_stage(config: ExperimentConfig) -> Path:
    """Run encoder pretraining and persist the encoders; returns the path."""
    data_root, manifest = _dataset_paths(config)
    out_dir = Path(config.out_dir) / "pretrain"
    out_dir.mkdir(parents=True, exist_ok=True)
    clouds = [c for _, _, c in load_split(data_root, manifest, "train")]
    trace_path = out_dir / "trace.jsonl"
    trace_path.unlink(missing_ok=True)
    result = pretrain_run(clouds, config, trace_path=trace_path)
    weights_path = out_dir / "encoders.ppcw"
    from .models import pack_params, save_weights
    arrays = {}
    arrays.update(pack_params("enc_partial", result.encoder_partial.params))
    arrays.update(pack_params("enc_complete", result.encoder_complete.params))
    save_weights(weights_path, arrays)
    (out_dir / "pretrain_manifest.json").write_text(
        json.dumps({"config": config.to_dict()}, indent=2, sort_keys=True) + "\n"
    )
    return weights_path


def seed_bank(config: ExperimentConfig, model: CompletionModel, train_samples) -> MemoryBank:
    """Fill a bank from the training split, uniformly subsampled at capacity."""
    bank = MemoryBank(capacity=config.memory_capacity,
                      delta=config.chamfer_threshold,
                      top_k=max(config.prior_count, 1))
    clouds = [c for _, _, c in train_samples]
    if len(clouds) > config.memory_capacity:
        rng = np.random.default_rng([config.seed, 41])
        keep = np.sort(rng.choice(len(clouds), size=config.memory_capacity, replace=False))
        clouds = [clouds[i] for i in keep]
    pairs = [(c, model.encoder_complete.forward_np(c)) for c in clouds]
    bank.seed(pairs)
    return bank


def train_run(config: ExperimentConfig, label: str = "run") -> TrainArtifacts:
    """Main training: encoder + decoder, with memory writes per sample."""
    config.validate()
    data_root, manifest = _dataset_paths(config)
    train_samples = load_split(data_root, manifest, "train")
    if not train_samples:
        raise ContractError("training split is empty")

    model = CompletionModel(
        config.feature_dim, config.hidden_dim, config.decoder_hidden,
        config.num_centers, config.expansion, config.prior_count, config.seed,
    )
    if config.use_pretrain:
        pre_path = Path(config.out_dir) / "pretrain" / "encoders.ppcw"
        if not pre_path.exists():
            raise StateError(
                f"pretrained encoders {pre_path} not found; run the pretrain stage first"
            )
        model.load_encoders(pre_path)

    bank = None
    slot_features: list = []
    if config.use_memory:
        bank = seed_bank(config, model, train_samples)
        slot_features = [model.encoder_complete.forward_np(s.value) for s in bank.slots]

    # the freeze applies to a *pretrained* complete encoder; without
    # pretraining there is nothing worth freezing and E_V trains jointly
    freeze_complete = config.freeze_complete_encoder and config.use_pretrain
    trainable = {}
    trainable.update({f"enc_partial/{k}": v for k, v in model.encoder_partial.params.items()})
    trainable.update({f"decoder/{k}": v for k, v in model.decoder.params.items()})
    if not freeze_complete:
        trainable.update({f"enc_complete/{k}": v
                          for k, v in model.encoder_complete.params.items()})
    opt = make_optimizer(config.optimizer, trainable, config.learning_rate,
                         momentum=config.momentum, weight_decay=config.weight_decay,
                         decay=config.lr_decay, decay_every=config.lr_decay_every)

    prior_dim = config.prior_dim
    full_index = np.arange(prior_dim)
    strata = causal.partition(prior_dim, config.strata if config.use_causal else 1)

    run_dir = Path(config.out_dir) / "train" / label
    run_dir.mkdir(parents=True, exist_ok=True)
    trace_path = run_dir / "trace.jsonl"
    trace = []

    clouds = [c for _, _, c in train_samples]
    with open(trace_path, "w") as trace_fh:
        for epoch in range(config.epochs):
            rng = np.random.default_rng([config.seed, 42, epoch])
            order = rng.permutation(len(clouds))
            sums = np.zeros(3)
            count = 0
            for start in range(0, len(order), config.batch_size):
                batch = order[start:start + config.batch_size]
                grads = {k: np.zeros_like(v) for k, v in trainable.items()}
                for i in batch:
                    complete = clouds[i]
                    vp = int(rng.integers(0, 8))
                    frac = float(config.fractions[rng.integers(0, len(config.fractions))])
                    partial = make_partial(complete, vp, frac, config.partial_points,
                                           allowed_fractions=config.fractions)

                    tape = ad.Tape()
                    lifted_k = {k: tape.tensor(v)
                                for k, v in model.encoder_partial.params.items()}
                    lifted_dec = {k: tape.tensor(v)
                                  for k, v in model.decoder.params.items()}
                    f_partial = model.encoder_partial.forward(tape, partial, lifted_k)

                    if config.use_memory and prior_dim > 0:
                        query = bank.query(f_partial.data)
                        if freeze_complete:
                            f_prior = tape.tensor(
                                np.concatenate([slot_features[j] for j in query.indices])
                            )
                        else:
                            lifted_v = {k: tape.tensor(v)
                                        for k, v in model.encoder_complete.params.items()}
                            f_prior = ad.concat([
                                model.encoder_complete.forward(tape, bank.slots[j].value,
                                                               lifted_v)
                                for j in query.indices
                            ])
                    else:
                        f_prior = tape.tensor(np.zeros(prior_dim))

                    decode = lambda fused: model.decoder.forward(tape, fused, lifted_dec)
                    if config.use_causal:
                        t_val = causal.magnitude_threshold(f_prior.data, config.magnitude_rule)
                        selected = causal.threshold_set(f_prior.data, t_val)
                        l_caus = causal.causal_loss(f_partial, f_prior, strata, selected,
                                                    decode, complete)
                        fused_union = ad.concat(
                            [f_partial, causal.select(f_prior, full_index, selected)])
                        centers, _ = decode(fused_union)
                    else:
                        selected = causal.threshold_set(f_prior.data, 0.0)
                        fused = ad.concat(
                            [f_partial, causal.select(f_prior, full_index, selected)])
                        centers, dense = decode(fused)
                        l_caus = chamfer_l1_literal(dense, complete)
                    l_recon = chamfer_l1_literal(centers, complete)
                    total = causal.combined_loss(l_caus, l_recon, config.loss_mix)
                    tape.backward(total)

                    for k, t in lifted_k.items():
                        grads[f"enc_partial/{k}"] += t.grad
                    for k, t in lifted_dec.items():
                        grads[f"decoder/{k}"] += t.grad
                    if not freeze_complete and config.use_memory and prior_dim > 0:
                        for k, t in lifted_v.items():
                            grads[f"enc_complete/{k}"] += t.grad

                    if config.use_memory:
                        outcome = bank.update(f_partial.data, complete)
                        if not outcome.positive:
                            slot_features[outcome.slot] = model.encoder_complete.forward_np(
                                bank.slots[outcome.slot].value)

                    sums += (float(total.data), float(l_caus.data), float(l_recon.data))
                    count += 1
                for k in grads:
                    grads[k] /= len(batch)
                opt.step(grads, epoch)
            record = {
                "epoch": epoch,
                "loss": sums[0] / count,
                "l_caus": sums[1] / count,
                "l_recon": sums[2] / count,
            }
            trace.append(record)
            trace_fh.write(json.dumps(record) + "\n")

    weights_path = run_dir / "weights.ppcw"
    model.save(weights_path)
    bank_path = None
    if bank is not None:
        bank_path = run_dir / "bank.ppcm"
        bank.save(bank_path)
    manifest_path = run_dir / "run_manifest.json"
    manifest_path.write_text(
        json.dumps({"label": label, "config": config.to_dict()},
                   indent=2, sort_keys=True) + "\n"
    )
    return TrainArtifacts(model=model, bank=bank, trace=trace, run_dir=run_dir,
                          weights_path=weights_path, bank_path=bank_path,
                          manifest_path=manifest_path)


# -- ablation matrix -----------------------------------------------------------


@dataclass
class AblationRow:
    setting: str
    flags: dict
    summary: dict


def ablation_matrix(config: ExperimentConfig, settings=None, prior_counts=None,
                    deltas=None) -> list[AblationRow]:
    """Run the flag grid plus prior-count and write-threshold sweeps.

    Reuses one dataset and one pretraining for every cell that wants them;
    writes report.csv and report.jsonl under out_dir/ablation.
    """
    config.validate()
    ensure_dataset(config)
    if settings is None:
        settings = list(ABLATION_SETTINGS)
    if prior_counts is None:
        prior_counts = [0, 1, 2, 3, 4, 5]
    if deltas is None:
        deltas = [0.0005, 0.001, 0.0015, 0.002, 0.0025]

    cells: list[tuple[str, ExperimentConfig]] = []
    for name in settings:
        memory, pretrain, causal_flag = ABLATION_SETTINGS[name]
        cells.append((f"setting_{name}", dataclasses.replace(
            config, use_memory=memory, use_pretrain=pretrain, use_causal=causal_flag)))
    for k in prior_counts:
        if k == 0:
            # zero priors means no memory to retrieve from, nothing for the
            # selection stage to select, and no retrieval for pretraining to
            # sharpen: the k=0 row is the all-off baseline by definition
            cells.append((f"priors_{k}", dataclasses.replace(
                config, use_memory=False, use_pretrain=False, use_causal=False)))
        else:
            cells.append((f"priors_{k}", dataclasses.replace(
                config, prior_count=k)))
    for delta in deltas:
        cells.append((f"delta_{delta:g}", dataclasses.replace(
            config, chamfer_threshold=delta)))

    if any(cfg.use_pretrain for _, cfg in cells):
        pre_path = Path(config.out_dir) / "pretrain" / "encoders.ppcw"
        if not pre_path.exists():
            pretrain_stage(config)

    data_root, manifest = _dataset_paths(config)
    rows = []
    for label, cfg in cells:
        artifacts = train_run(cfg, label=label)
        report = evaluate(artifacts.model, artifacts.bank, cfg, data_root, manifest)
        rows.append(AblationRow(setting=label,
                                flags={"memory": cfg.use_memory,
                                       "pretrain": cfg.use_pretrain,
                                       "causal": cfg.use_causal,
                                       "prior_count": cfg.prior_count,
                                       "delta": cfg.chamfer_threshold},
                                summary=report.summary()))

    out_dir = Path(config.out_dir) / "ablation"
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "report.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["setting", "cd_l1", "cd_l2", "fscore", "cd_s", "cd_m", "cd_h"])
        for row in rows:
            s = row.summary
            writer.writerow([row.setting, s["cd_l1"], s["cd_l2"], s["fscore"],
                             s["cd_s"], s["cd_m"], s["cd_h"]])
    with open(out_dir / "report.jsonl", "w") as fh:
        for row in rows:
            fh.write(json.dumps(dataclasses.asdict(row)) + "\n")
    return rows
