"""Disentanglement metrics: assignment, MCC, and linear disentanglement (R^2)."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import DegenerateSegmentation, InsufficientSamples, RankDeficient

RIDGE_LAMBDA = 1e-8


@dataclass
class EvalBatch:
    z_true: np.ndarray   # N x d pooled ground truth, one row per matched object
    z_pred: np.ndarray   # N x d pooled slot projections, rows aligned to z_true
    assignment_diagnostics: dict = field(default_factory=dict)


@dataclass
class EvalReport:
    mcc: float
    ld_r2: float
    per_property_correlation: np.ndarray
    permutation: np.ndarray
    exclusion_rate: float = 0.0
    mean_iou: float = float("nan")
    used_ridge: bool = False


def hungarian(cost: np.ndarray) -> np.ndarray:
    """Column index per row of the minimum-cost assignment.

    Among all optimal assignments, returns the lexicographically smallest
    (row 0 gets its smallest optimal column, then row 1, ...).
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.shape[0] != cost.shape[1]:
        raise ValueError(f"expected a square cost matrix, got {cost.shape}")
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost matrix must be finite")
    n = cost.shape[0]

    def optimum(sub):
        if sub.size == 0:
            return 0.0
        r, c = linear_sum_assignment(sub)
        return float(sub[r, c].sum())

    total = optimum(cost)
    tol = 1e-9 * (1.0 + abs(total))
    assigned = np.full(n, -1, dtype=int)
    free_cols = list(range(n))
    fixed_cost = 0.0
    for i in range(n):
        rest_rows = np.arange(i + 1, n)
        for j in free_cols:
            rest_cols = [cc for cc in free_cols if cc != j]
            rest = optimum(cost[np.ix_(rest_rows, rest_cols)])
            if fixed_cost + cost[i, j] + rest <= total + tol:
                assigned[i] = j
                fixed_cost += cost[i, j]
                free_cols.remove(j)
                break
    return assigned


def assign_slots_to_objects(alphas: np.ndarray, masks_gt: np.ndarray):
    """Pair ground-truth objects with slots via IoU of argmax-alpha segments.

    Returns (mapping, background_slot, iou_per_object) where mapping[obj] is a
    slot index. Raises DegenerateSegmentation when some object overlaps no slot
    segment at all.
    """
    m = alphas.shape[0]
    k = masks_gt.shape[0]
    seg = alphas.reshape(m, -1).argmax(axis=0)
    flat_masks = masks_gt.reshape(k, -1).astype(bool)
    iou = np.zeros((k, m))
    for s in range(m):
        seg_s = seg == s
        for o in range(k):
            union = (seg_s | flat_masks[o]).sum()
            if union:
                iou[o, s] = (seg_s & flat_masks[o]).sum() / union
    if np.any(iou.max(axis=1) == 0.0):
        bad = int(np.argmin(iou.max(axis=1)))
        raise DegenerateSegmentation(f"object {bad} overlaps no slot segment")
    # pad with zero-cost dummy objects so every slot has a row
    cost = np.zeros((m, m))
    cost[:k] = -iou
    assignment = hungarian(cost)
    mapping = {o: int(assignment[o]) for o in range(k)}
    matched = set(mapping.values())
    background = next(s for s in range(m) if s not in matched)
    return mapping, background, np.array([iou[o, mapping[o]] for o in range(k)])


def mcc(z_true: np.ndarray, z_pred: np.ndarray):
    """Mean of |Pearson| correlations under the best dimension assignment.

    Returns (score, permutation) where permutation[j] is the predicted
    dimension matched to true dimension j.
    """
    z_true, z_pred = np.asarray(z_true, float), np.asarray(z_pred, float)
    n, d = z_true.shape
    if n < d + 2:
        raise InsufficientSamples(f"need at least d+2={d + 2} rows, got {n}")
    t = z_true - z_true.mean(axis=0)
    p = z_pred - z_pred.mean(axis=0)
    t_norm = np.sqrt((t * t).sum(axis=0))
    p_norm = np.sqrt((p * p).sum(axis=0))
    corr = np.zeros((d, d))
    live = p_norm > 0.0  # constant predicted dimensions contribute 0
    if live.any():
        corr[:, live] = np.abs(t.T @ p[:, live]) / np.outer(t_norm, p_norm[live])
    permutation = hungarian(-corr)
    selected = corr[np.arange(d), permutation]
    return float(selected.mean()), permutation


def _ols_fit(x: np.ndarray, y: np.ndarray):
    """Least squares y ~ x @ A + b by normal equations; ridge fallback."""
    design = np.concatenate([x, np.ones((x.shape[0], 1))], axis=1)
    gram = design.T @ design
    rhs = design.T @ y
    try:
        chol = np.linalg.cholesky(gram)
        coef = np.linalg.solve(chol.T, np.linalg.solve(chol, rhs))
        used_ridge = False
    except np.linalg.LinAlgError:
        # documented fallback for rank-deficient designs
        gram = gram + RIDGE_LAMBDA * np.eye(gram.shape[0])
        coef = np.linalg.solve(gram, rhs)
        used_ridge = True
    return design @ coef, used_ridge


def linear_disentanglement(z_true: np.ndarray, z_pred: np.ndarray, return_details: bool = False):
    """R^2 of the best linear map from z_pred to z_true, averaged over targets."""
    z_true, z_pred = np.asarray(z_true, float), np.asarray(z_pred, float)
    n, d = z_true.shape
    if n < z_pred.shape[1] + 1:
        raise RankDeficient(f"need more rows ({n}) than predictors ({z_pred.shape[1]})")
    fitted, used_ridge = _ols_fit(z_pred, z_true)
    ss_res = ((z_true - fitted) ** 2).sum(axis=0)
    ss_tot = ((z_true - z_true.mean(axis=0)) ** 2).sum(axis=0)
    per_target = 1.0 - ss_res / ss_tot
    r2 = float(per_target.mean())
    if return_details:
        return r2, {"per_target_r2": per_target, "used_ridge": used_ridge}
    return r2


def eval_report(batch: EvalBatch) -> EvalReport:
    score, permutation = mcc(batch.z_true, batch.z_pred)
    d = batch.z_true.shape[1]
    t = batch.z_true - batch.z_true.mean(axis=0)
    p = batch.z_pred - batch.z_pred.mean(axis=0)
    per_prop = np.zeros(d)
    for j in range(d):
        pj = p[:, permutation[j]]
        denom = np.sqrt((t[:, j] ** 2).sum() * (pj**2).sum())
        per_prop[j] = abs(t[:, j] @ pj) / denom if denom > 0 else 0.0
    r2, details = linear_disentanglement(batch.z_true, batch.z_pred, return_details=True)
    diag = batch.assignment_diagnostics
    return EvalReport(
        mcc=score, ld_r2=r2, per_property_correlation=per_prop,
        permutation=permutation,
        exclusion_rate=diag.get("exclusion_rate", 0.0),
        mean_iou=diag.get("mean_iou", float("nan")),
        used_ridge=details["used_ridge"],
    )
