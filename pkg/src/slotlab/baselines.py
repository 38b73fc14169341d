"""Comparator models: a flat vector encoder and linear probes on frozen slots.

The vector encoder maps the whole image to a k*d vector and is trained with
the plain paired-offset objective (no object-centric structure); it succeeds
when the renderer identity-codes objects and fails when it does not. The
probes (random projection, principal components, supervised linear regression)
measure how much property information plain reconstruction training already
put into the slot vectors.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor, adamw_step, zero_grads
from .dataset import Dataset
from .errors import RankDeficient
from .metrics import _ols_fit


@dataclass
class VectorEncoder:
    k: int
    d: int
    image_side: int
    hidden: tuple = (256, 256, 256)
    trunk_width: int = 128
    params: dict = field(default_factory=dict)


def init_vector_encoder(k, d, image_side, rng, hidden=(256, 256, 256), trunk_width=128):
    enc = VectorEncoder(k=k, d=d, image_side=image_side, hidden=hidden, trunk_width=trunk_width)
    widths = [image_side * image_side * 3, *hidden, trunk_width]
    for i, (fan_in, fan_out) in enumerate(zip(widths, widths[1:])):
        lim = np.sqrt(6.0 / (fan_in + fan_out))
        enc.params[f"l{i}.w"] = Parameter(Tensor(rng.uniform(-lim, lim, (fan_in, fan_out))))
        enc.params[f"l{i}.b"] = Parameter(Tensor(np.zeros(fan_out)))
    lim = np.sqrt(6.0 / (trunk_width + 1))
    # d scalar heads per object coordinate, mirrored as one k*d output block
    enc.params["heads.w"] = Parameter(Tensor(rng.uniform(-lim, lim, (trunk_width, k * d))))
    enc.params["heads.b"] = Parameter(Tensor(np.zeros(k * d)))
    return enc


def vector_encode(enc: VectorEncoder, images: np.ndarray) -> Tensor:
    """Flattened image batch -> (B, k*d) Tensor."""
    x = Tensor(images.reshape(images.shape[0], -1))
    n_layers = len(enc.hidden) + 1
    for i in range(n_layers):
        x = ad.leaky_relu(ad.matmul(x, enc.params[f"l{i}.w"].tensor) + enc.params[f"l{i}.b"].tensor)
    return ad.matmul(x, enc.params["heads.w"].tensor) + enc.params["heads.b"].tensor


def flat_offset(record, k, d, mode, c=0.1):
    """k*d offset vector at the DGP's hidden default object order."""
    delta = np.zeros(k * d)
    coord = record.target_object * d + record.property_index
    delta[coord] = record.magnitude if mode == "known" else record.sign * c
    return delta


def train_vector_encoder(dataset: Dataset, mode: str = "unknown", *, seed: int = 0,
                         epochs: int = 60, batch_size: int = 64, lr: float = 2e-4,
                         weight_decay: float = 0.01, c: float = 0.1,
                         hidden=(256, 256, 256)) -> VectorEncoder:
    """Minimize E||f(x) + offset - f(x')||^2 with AdamW."""
    k = int(dataset.manifest["k"])
    d = int(dataset.manifest["d"])
    side = int(dataset.manifest["image_side"])
    rng = np.random.default_rng(seed)
    enc = init_vector_encoder(k, d, side, rng, hidden=hidden)
    n = dataset.n_pairs
    deltas = np.stack([flat_offset(r, k, d, mode, c) for r in dataset.perturbations])
    images_t = dataset.images_t.astype(np.float64)
    images_t1 = dataset.images_t1.astype(np.float64)
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            f_t = vector_encode(enc, images_t[idx])
            f_t1 = vector_encode(enc, images_t1[idx])
            resid = f_t + Tensor(deltas[idx]) - f_t1
            loss = ad.tsum(resid * resid) * (1.0 / len(idx))
            loss.backward()
            adamw_step(enc.params, lr=lr, weight_decay=weight_decay)
            zero_grads(enc.params)
    return enc


def vector_encoder_predictions(enc: VectorEncoder, dataset: Dataset, batch_size: int = 256):
    """(z_true, z_pred) as N x k*d matrices, true latents in default order."""
    n = dataset.n_pairs
    preds = np.zeros((n, enc.k * enc.d))
    imgs = dataset.images_t.astype(np.float64)
    for start in range(0, n, batch_size):
        preds[start:start + batch_size] = vector_encode(enc, imgs[start:start + batch_size]).data
    z_true = dataset.latents_t.reshape(n, enc.k * enc.d).astype(np.float64)
    return z_true, preds


# ---------------------------------------------------------------------------
# linear probes on frozen slot representations


def probe_random_projection(slots: np.ndarray, d: int, seed: int) -> np.ndarray:
    """Distance-preserving Gaussian projection, entries scaled by 1/sqrt(D)."""
    D = slots.shape[1]
    rng = np.random.default_rng(seed)
    proj = rng.standard_normal((D, d)) / np.sqrt(D)
    return slots @ proj


def jacobi_eigh(a: np.ndarray, tol: float = 1e-10, max_sweeps: int = 100):
    """Cyclic Jacobi eigendecomposition of a symmetric matrix.

    Returns (eigenvalues, eigenvectors) in descending eigenvalue order,
    iterated until the off-diagonal Frobenius norm falls below tol.
    """
    a = np.array(a, dtype=np.float64)
    n = a.shape[0]
    v = np.eye(n)
    for _ in range(max_sweeps):
        off = np.linalg.norm(a - np.diag(np.diag(a)))
        if off < tol:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                if abs(a[p, q]) < tol / (n * n):
                    continue
                theta = 0.5 * np.arctan2(2.0 * a[p, q], a[q, q] - a[p, p])
                c, s = np.cos(theta), np.sin(theta)
                rot = np.eye(n)
                rot[p, p] = rot[q, q] = c
                rot[p, q] = s
                rot[q, p] = -s
                a = rot.T @ a @ rot
                v = v @ rot
    order = np.argsort(np.diag(a))[::-1]
    return np.diag(a)[order], v[:, order]


def probe_pca(slots: np.ndarray, d: int):
    """Project onto the top-d principal components of the slot covariance.

    Sign convention: the largest-magnitude loading of each component is
    positive. Raises RankDeficient when fewer than d directions carry variance.
    """
    centered = slots - slots.mean(axis=0)
    cov = centered.T @ centered / max(len(slots) - 1, 1)
    eigvals, eigvecs = jacobi_eigh(cov)
    rank = int((eigvals > 1e-12 * max(eigvals[0], 1e-300)).sum())
    if rank < d:
        raise RankDeficient(f"covariance rank {rank} < requested components {d}")
    components = eigvecs[:, :d]
    for j in range(d):
        lead = np.argmax(np.abs(components[:, j]))
        if components[lead, j] < 0:
            components[:, j] = -components[:, j]
    return centered @ components


def probe_linear_regression(slots: np.ndarray, z_true: np.ndarray) -> np.ndarray:
    """Supervised upper bound: fitted values of least squares z_true ~ slots."""
    if slots.shape[0] < slots.shape[1] + 1:
        raise RankDeficient(
            f"need more samples ({slots.shape[0]}) than slot dims + 1 ({slots.shape[1] + 1})"
        )
    fitted, _ = _ols_fit(slots, z_true)
    return fitted
