"""Experiment orchestration: dataset splits, training loops, evaluation, sweeps.

Every run is a pure function of (config, seed): all randomness flows from
seeds derived with the dataset's splittable hash, and results.csv rows carry
no wall-clock so repeated runs are byte-identical.
"""

from __future__ import annotations

import csv
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import matching, model as mdl
from .autodiff import Tensor, adamw_step, zero_grads
from .baselines import train_vector_encoder, vector_encoder_predictions
from .config import ExperimentConfig
from .dataset import Dataset, derive_pair_seed, load_dataset, make_dataset
from .errors import DegenerateSegmentation
from .metrics import EvalBatch, EvalReport, assign_slots_to_objects, eval_report, mcc

_SPLIT_TAG = {"train": 1 << 40, "val": (1 << 40) + 1, "test": (1 << 40) + 2}
# rejection sampling needs room: larger scenes use smaller fixed object sizes
SIZE_FOR_K = {1: 0.18, 2: 0.18, 3: 0.13, 4: 0.11}
CODE_VERSION = "slotlab-0.1.0"


@dataclass
class RunRecord:
    config_hash: str
    code_version: str = CODE_VERSION
    epoch_losses: list = field(default_factory=list)
    eval_history: list = field(default_factory=list)
    wall_clock: float = 0.0
    checkpoint_path: str = ""


def ensure_outdir(path: str, force: bool = False):
    if os.path.isdir(path) and os.listdir(path) and not force:
        raise FileExistsError(f"{path} exists and is not empty; pass --force to overwrite")
    os.makedirs(path, exist_ok=True)


def split_seed(base_seed: int, split: str) -> int:
    return derive_pair_seed(base_seed, _SPLIT_TAG[split])


def generate_splits(config: ExperimentConfig, out_dir: str, force: bool = False,
                    injective: bool = None, n_train: int = None) -> dict:
    """Write train/val/test dataset directories; returns the loaded splits."""
    ensure_outdir(out_dir, force)
    dgp = config.dgp_config(injective=injective)
    sizes = {
        "train": n_train if n_train is not None else config.n_train_per_property * dgp.property_spec.d,
        "val": config.n_val,
        "test": config.n_test,
    }
    splits = {}
    for name, size in sizes.items():
        splits[name] = make_dataset(dgp, size, split_seed(config.base_seed, name),
                                    os.path.join(out_dir, name))
    return splits


def load_splits(path: str) -> dict:
    return {name: load_dataset(os.path.join(path, name)) for name in ("train", "val", "test")}


# ---------------------------------------------------------------------------
# evaluation


def evaluate_object_centric(model: mdl.Model, dataset: Dataset, *, batch_size: int = 128,
                            eval_seed: int = 0) -> EvalReport:
    """Pool matched slot projections against ground truth over a dataset."""
    rng = np.random.default_rng(eval_seed)
    side = model.image_side
    m = model.config.n_slots
    z_true_rows, z_pred_rows, ious = [], [], []
    excluded = 0
    n = dataset.n_pairs
    for start in range(0, n, batch_size):
        stop = min(start + batch_size, n)
        images = dataset.images_t[start:stop].astype(np.float64)
        slots, _ = mdl.encode(model, Tensor(images), rng)
        _, alphas = mdl.decode_slots(model, slots)
        z_pred = mdl.project_slots(model, slots).data
        for b in range(stop - start):
            masks = dataset.masks_t[start + b]
            try:
                mapping, _, iou = assign_slots_to_objects(
                    alphas.data[b].reshape(m, side, side), masks)
            except DegenerateSegmentation:
                excluded += 1
                continue
            ious.append(iou.mean())
            for obj, slot in mapping.items():
                z_true_rows.append(dataset.latents_t[start + b, obj])
                z_pred_rows.append(z_pred[b, slot])
    batch = EvalBatch(
        z_true=np.asarray(z_true_rows, dtype=np.float64),
        z_pred=np.asarray(z_pred_rows, dtype=np.float64),
        assignment_diagnostics={
            "exclusion_rate": excluded / n if n else 0.0,
            "mean_iou": float(np.mean(ious)) if ious else float("nan"),
        },
    )
    return eval_report(batch)


def evaluate_vector_encoder(enc, dataset: Dataset) -> float:
    """MCC of the flat k*d representation against default-order true latents."""
    z_true, z_pred = vector_encoder_predictions(enc, dataset)
    score, _ = mcc(z_true, z_pred)
    return score


def pooled_slots(model: mdl.Model, dataset: Dataset, *, batch_size: int = 128,
                 eval_seed: int = 0):
    """(slots N x D, z_true N x d) for matched non-background slots."""
    rng = np.random.default_rng(eval_seed)
    side, m = model.image_side, model.config.n_slots
    slot_rows, z_true_rows = [], []
    n = dataset.n_pairs
    for start in range(0, n, batch_size):
        stop = min(start + batch_size, n)
        images = dataset.images_t[start:stop].astype(np.float64)
        slots, _ = mdl.encode(model, Tensor(images), rng)
        _, alphas = mdl.decode_slots(model, slots)
        for b in range(stop - start):
            try:
                mapping, _, _ = assign_slots_to_objects(
                    alphas.data[b].reshape(m, side, side), dataset.masks_t[start + b])
            except DegenerateSegmentation:
                continue
            for obj, slot in mapping.items():
                slot_rows.append(slots.data[b, slot])
                z_true_rows.append(dataset.latents_t[start + b, obj])
    return np.asarray(slot_rows), np.asarray(z_true_rows, dtype=np.float64)


# ---------------------------------------------------------------------------
# training


def train_object_centric(config: ExperimentConfig, splits: dict, *, seed: int = None,
                         out_dir: str = None, epochs_pretrain: int = None,
                         epochs_joint: int = None, verbose: bool = False):
    """Two-phase training: reconstruction pretrain, then the joint objective.

    Returns (model, final test EvalReport, RunRecord).
    """
    seed = config.base_seed if seed is None else seed
    pre = config.epochs_pretrain if epochs_pretrain is None else epochs_pretrain
    joint = config.epochs_joint if epochs_joint is None else epochs_joint
    rng = np.random.default_rng(derive_pair_seed(seed, 1 << 41))
    train = splits["train"]
    d = int(train.manifest["d"])
    side = int(train.manifest["image_side"])
    model = mdl.init_model(config.encoder_config(), d, side, rng)
    record = RunRecord(config_hash=config.hash())
    started = time.monotonic()

    images_t = train.images_t.astype(np.float64)
    images_t1 = train.images_t1.astype(np.float64)
    n = train.n_pairs
    step = 0
    step_log = _StepLog(os.path.join(out_dir, "steps.csv")) if out_dir and config.log_steps else None
    best_val, stale = -np.inf, 0
    best_params = None
    try:
        total = pre + joint
        for epoch in range(total):
            pretraining = epoch < pre
            frac = epoch / max(total - 1, 1)
            lr = config.lr * (1.0 + (config.lr_decay - 1.0) * frac)
            order = rng.permutation(n)
            epoch_recon, epoch_latent, batches = 0.0, 0.0, 0
            for start in range(0, n, config.batch_size):
                idx = order[start:start + config.batch_size]
                loss, info = matching.total_loss(
                    model, images_t[idx], images_t1[idx],
                    [train.perturbations[i] for i in idx], rng,
                    mode=config.offset_mode, c=config.offset_c,
                    w_recons=config.w_recons,
                    w_latent=0.0 if pretraining else config.w_latent,
                    matching=config.matching,
                )
                loss.backward()
                adamw_step(model.params, lr=lr, weight_decay=config.weight_decay)
                zero_grads(model.params)
                epoch_recon += info["recon_loss"]
                epoch_latent += info.get("latent_loss", 0.0)
                batches += 1
                if step_log is not None:
                    step_log.write(step, info)
                step += 1
            record.epoch_losses.append(
                (epoch, "pretrain" if pretraining else "joint",
                 epoch_recon / batches, epoch_latent / batches))
            if verbose:
                print(f"epoch {epoch} ({'pre' if pretraining else 'joint'}): "
                      f"recon {epoch_recon / batches:.5f} latent {epoch_latent / batches:.5f}")
            if not pretraining and (epoch - pre + 1) % config.eval_every == 0:
                report = evaluate_object_centric(model, splits["val"])
                record.eval_history.append((epoch, report.mcc, report.ld_r2))
                if verbose:
                    print(f"  val mcc {report.mcc:.4f} ld {report.ld_r2:.4f}")
                if report.mcc > best_val + 1e-4:
                    best_val, stale = report.mcc, 0
                    best_params = {k: p.tensor.data.copy()
                                   for k, p in model.params.items()}
                else:
                    stale += 1
                    if stale >= config.early_stop_patience:
                        break
    finally:
        if step_log is not None:
            step_log.close()
    # the validation MCC trace is noisy; report the best validation
    # parameters rather than whatever the last epoch happened to leave
    if best_params is not None:
        for k, p in model.params.items():
            p.tensor.data[...] = best_params[k]
    record.wall_clock = time.monotonic() - started
    report = evaluate_object_centric(model, splits["test"])
    if out_dir is not None:
        checkpoint = os.path.join(out_dir, "checkpoint")
        mdl.save_checkpoint(model, checkpoint)
        record.checkpoint_path = checkpoint
        _write_run_record(os.path.join(out_dir, "run_log.csv"), record)
    return model, report, record


class _StepLog:
    def __init__(self, path):
        os.makedirs(os.path.dirname(path), exist_ok=True)
        self._fh = open(path, "w", newline="")
        self._writer = csv.writer(self._fh)
        self._writer.writerow(["step", "recon_loss", "latent_loss", "slot_t", "slot_t1", "cost"])

    def write(self, step, info):
        match = info["matches"][0] if info.get("matches") else ("", "", "")
        self._writer.writerow([step, repr(info["recon_loss"]),
                               repr(info.get("latent_loss", 0.0)), *match])

    def close(self):
        self._fh.close()


def _write_run_record(path, record: RunRecord):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["config_hash", record.config_hash])
        writer.writerow(["code_version", record.code_version])
        writer.writerow(["wall_clock_s", f"{record.wall_clock:.1f}"])
        writer.writerow(["checkpoint", record.checkpoint_path])
        writer.writerow(["epoch", "phase", "recon_loss", "latent_loss"])
        for row in record.epoch_losses:
            writer.writerow(row)
        writer.writerow(["eval_epoch", "val_mcc", "val_ld"])
        for row in record.eval_history:
            writer.writerow(row)


def append_results(path: str, run_id: str, config_hash: str, report: EvalReport):
    """Append one EvalReport row; no timestamps so reruns are byte-identical."""
    new = not os.path.exists(path)
    with open(path, "a", newline="") as fh:
        writer = csv.writer(fh)
        if new:
            writer.writerow(["run_id", "config_hash", "mcc", "ld",
                             "per_property_correlation", "exclusion_rate"])
        writer.writerow([
            run_id, config_hash, repr(report.mcc), repr(report.ld_r2),
            "|".join(repr(v) for v in report.per_property_correlation),
            repr(report.exclusion_rate),
        ])


# ---------------------------------------------------------------------------
# studies


def run_figure1(config: ExperimentConfig, out_dir: str, *, ks=(2, 3, 4), force: bool = False,
                vector_epochs: int = 60, oc_kwargs: dict = None, verbose: bool = False):
    """Injective vs non-injective vector encoders vs the object-centric model.

    Emits figure1.csv rows of (method, k, mcc).
    """
    ensure_outdir(out_dir, force)
    rows = []
    for k in ks:
        cfg_k = _with(config, k=k, n_slots=k + 1, size_fixed=SIZE_FOR_K.get(k, 0.10))
        for injective, name in ((True, "vector_injective"), (False, "vector_noninjective")):
            splits = generate_splits(cfg_k, os.path.join(out_dir, f"data_k{k}_{name}"),
                                     force=force, injective=injective)
            enc = train_vector_encoder(splits["train"], mode=config.offset_mode,
                                       seed=cfg_k.base_seed, epochs=vector_epochs,
                                       lr=config.lr, weight_decay=config.weight_decay,
                                       c=config.offset_c)
            rows.append((name, k, evaluate_vector_encoder(enc, splits["test"])))
        splits = generate_splits(cfg_k, os.path.join(out_dir, f"data_k{k}_object_centric"),
                                 force=force, injective=False)
        _, report, _ = train_object_centric(cfg_k, splits, verbose=verbose,
                                            **(oc_kwargs or {}))
        rows.append(("object_centric", k, report.mcc))
    _write_rows(os.path.join(out_dir, "figure1.csv"), ["method", "k", "mcc"], rows)
    return rows


def run_sample_efficiency(config: ExperimentConfig, out_dir: str, *,
                          sizes=(50, 100, 250, 500, 1000, 2500), seeds=(0, 1, 2),
                          threshold: float = 0.85, force: bool = False,
                          vector_epochs: int = 60, oc_kwargs: dict = None,
                          verbose: bool = False):
    """MCC vs training-set size for the object-centric model and the injective
    vector encoder; also reports each method's smallest size reaching threshold.

    Returns (rows, thresholds) where thresholds maps method -> median crossing size.
    """
    ensure_outdir(out_dir, force)
    rows = []
    crossings = {"object_centric": [], "vector_injective": []}
    for seed in seeds:
        cfg_seed = _with(config, base_seed=seed)
        found = {"object_centric": None, "vector_injective": None}
        for size in sizes:
            if found["object_centric"] is None:
                splits = generate_splits(
                    cfg_seed, os.path.join(out_dir, f"data_oc_s{seed}_n{size}"),
                    force=force, injective=False, n_train=size)
                _, report, _ = train_object_centric(cfg_seed, splits, verbose=verbose,
                                                    **(oc_kwargs or {}))
                rows.append(("object_centric", size, seed, report.mcc))
                if report.mcc >= threshold:
                    found["object_centric"] = size
            if found["vector_injective"] is None:
                splits = generate_splits(
                    cfg_seed, os.path.join(out_dir, f"data_vec_s{seed}_n{size}"),
                    force=force, injective=True, n_train=size)
                enc = train_vector_encoder(splits["train"], mode=config.offset_mode,
                                           seed=seed, epochs=vector_epochs,
                                           lr=config.lr, weight_decay=config.weight_decay,
                                           c=config.offset_c)
                score = evaluate_vector_encoder(enc, splits["test"])
                rows.append(("vector_injective", size, seed, score))
                if score >= threshold:
                    found["vector_injective"] = size
            if all(v is not None for v in found.values()):
                break
        for method, size in found.items():
            crossings[method].append(size if size is not None else float("inf"))
    thresholds = {method: float(np.median(vals)) for method, vals in crossings.items()}
    _write_rows(os.path.join(out_dir, "sample_efficiency.csv"),
                ["method", "n_pairs", "seed", "mcc"], rows)
    return rows, thresholds


def _with(config: ExperimentConfig, **overrides) -> ExperimentConfig:
    from dataclasses import replace

    return replace(config, **overrides)


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow(row)
