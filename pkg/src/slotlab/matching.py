"""Matching step and the joint reconstruction + disentanglement objective.

Given projections of the slots before and after a 1-sparse perturbation, the
matching step finds the slot pair whose difference best explains the encoded
offset; the latent loss then flows gradients only through that pair.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import model as mdl
from .autodiff import Tensor
from .dgp import PerturbationRecord

DEFAULT_UNKNOWN_C = 0.1


@dataclass(frozen=True)
class OffsetEncoding:
    mode: str                  # "known" | "unknown" | "blind"
    property_index: int
    sign: int
    magnitude: float


@dataclass
class MatchResult:
    slot_t: int
    slot_t1: int
    cost: float
    full_cost_table: np.ndarray


def encode_offset(record: PerturbationRecord, d: int, mode: str = "unknown",
                  c: float = DEFAULT_UNKNOWN_C) -> np.ndarray:
    """Model-visible 1-sparse offset vector.

    known: the exact ground-truth magnitude. unknown: the magnitude is replaced
    by the constant c, keeping the perturbed coordinate and sign visible.
    """
    if mode not in ("known", "unknown"):
        raise ValueError(f"unsupported offset mode {mode!r}")
    delta = np.zeros(d)
    if mode == "known":
        delta[record.property_index] = record.magnitude
    else:
        delta[record.property_index] = record.sign * c
    return delta


def _cost_table(z_t: np.ndarray, z_t1: np.ndarray, delta: np.ndarray) -> np.ndarray:
    shifted = z_t + delta                            # m x d
    diff = z_t1[None, :, :] - shifted[:, None, :]    # i (t) x j (t+1) x d
    return (diff * diff).sum(axis=-1)


def match_sparse(z_t: np.ndarray, z_t1: np.ndarray, delta: np.ndarray) -> MatchResult:
    """Exhaustive argmin over all slot pairs; ties break lexicographically."""
    table = _cost_table(z_t, z_t1, delta)
    flat = int(np.argmin(table))  # row-major argmin is lexicographic on (i, j)
    i, j = divmod(flat, table.shape[1])
    return MatchResult(slot_t=i, slot_t1=j, cost=float(table[i, j]), full_cost_table=table)


def match_aligned(z_t: np.ndarray, z_t1: np.ndarray, delta: np.ndarray) -> MatchResult:
    """Diagonal-only variant for warm-started slots: i = j."""
    table = _cost_table(z_t, z_t1, delta)
    diag = np.diagonal(table)
    i = int(np.argmin(diag))
    return MatchResult(slot_t=i, slot_t1=i, cost=float(diag[i]), full_cost_table=table)


def match_blind(z_t: np.ndarray, z_t1: np.ndarray, c: float = DEFAULT_UNKNOWN_C):
    """Fully blind mode: also search the 2d candidate offsets +-c * e_l.

    Returns (MatchResult, chosen offset vector).
    """
    d = z_t.shape[1]
    best, best_delta = None, None
    for l in range(d):
        for sign in (1, -1):
            delta = np.zeros(d)
            delta[l] = sign * c
            result = match_sparse(z_t, z_t1, delta)
            if best is None or result.cost < best.cost:
                best, best_delta = result, delta
    return best, best_delta


def total_loss(model: mdl.Model, images_t: np.ndarray, images_t1: np.ndarray,
               records, rng, mode: str = "unknown", c: float = DEFAULT_UNKNOWN_C,
               w_recons: float = 100.0, w_latent: float = 10.0,
               matching: str = "sparse"):
    """Joint loss over a batch of perturbation pairs.

    Returns (loss Tensor, info dict). The argmin over slot pairs is a hard,
    non-differentiable selection; the latent term only touches the matched
    pair, so every other slot's parameters receive zero gradient from it.
    """
    batch = images_t.shape[0]
    x_t, x_t1 = Tensor(images_t), Tensor(images_t1)
    slots_t, att_t = mdl.encode(model, x_t, rng)
    if model.config.warm_start:
        init_t1 = ad.stop_gradient(slots_t)
    else:
        init_t1 = mdl.sample_init_slots(model, batch, rng)
    slots_t1, att_t1 = mdl.encode(model, x_t1, rng, init_slots=init_t1)

    n = model.image_side * model.image_side
    recon_t, _ = mdl.decode_slots(model, slots_t)
    recon_t1, _ = mdl.decode_slots(model, slots_t1)
    recon_loss = ad.mse(recon_t, ad.reshape(x_t, (batch, n, 3))) \
        + ad.mse(recon_t1, ad.reshape(x_t1, (batch, n, 3)))

    info = {"recon_loss": float(recon_loss.data), "matches": []}
    loss = ad.mul(recon_loss, w_recons)
    if w_latent != 0.0:
        z_t = mdl.project_slots(model, slots_t)
        z_t1 = mdl.project_slots(model, slots_t1)
        rows_t, rows_t1, deltas = [], [], np.zeros((batch, model.d))
        for b, record in enumerate(records):
            if mode == "blind":
                result, delta = match_blind(z_t.data[b], z_t1.data[b], c)
            else:
                delta = encode_offset(record, model.d, mode, c)
                match_fn = match_aligned if matching == "aligned" else match_sparse
                result = match_fn(z_t.data[b], z_t1.data[b], delta)
            rows_t.append(result.slot_t)
            rows_t1.append(result.slot_t1)
            deltas[b] = delta
            info["matches"].append((result.slot_t, result.slot_t1, result.cost))
        idx = np.arange(batch)
        z_sel_t = z_t[idx, np.asarray(rows_t)]
        z_sel_t1 = z_t1[idx, np.asarray(rows_t1)]
        resid = z_sel_t1 - (z_sel_t + Tensor(deltas))
        latent_loss = ad.tsum(resid * resid) * (1.0 / batch)
        info["latent_loss"] = float(latent_loss.data)
        loss = loss + ad.mul(latent_loss, w_latent)
    return loss, info
