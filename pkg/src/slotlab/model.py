"""Slot attention encoder, Sinkhorn/MESH attention, decoder, projection heads.

The encoder maps an image to per-pixel features (a shared MLP over RGB plus
four positional channels), then runs T rounds of slot-competitive attention
with a GRU update. Attention can optionally be sharpened into a near-partition
by entropy-minimized Sinkhorn (MESH). Slots are decoded back to pixels by a
spatial-broadcast MLP with softmax alpha compositing, and projected to the
d-dimensional latent space by d shared per-property heads.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .dataset import read_manifest, write_manifest
from .errors import NonFiniteActivation

_LN_EPS = 1e-6


@dataclass(frozen=True)
class EncoderConfig:
    n_slots: int = 3            # objects + 1 background slot
    slot_dim: int = 32
    n_iterations: int = 3
    feature_dim: int = 32
    decoder_hidden: int = 48
    head_widths: tuple = (32, 32, 16)
    mesh_enabled: bool = True
    sinkhorn_iterations: int = 30
    mesh_steps: int = 4
    mesh_step_size: float = 50.0
    mesh_noise_scale: float = 1e-3
    temperature: float = 1.0
    gru_update: bool = True     # False: slots <- MLP-free mean update (ablation)
    warm_start: bool = True

    def __post_init__(self):
        if self.n_slots < 2:
            raise ValueError("need at least 2 slots (objects + background)")
        if self.n_iterations < 1:
            raise ValueError("need at least one slot iteration")


@dataclass
class SlotSet:
    """Unordered slot vectors plus their attention map over inputs."""

    slots: np.ndarray      # m x D
    attention: np.ndarray  # m x n, each input column sums to 1


@dataclass
class Model:
    config: EncoderConfig
    d: int
    image_side: int
    params: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# initialization


def _xavier(rng, fan_in, fan_out):
    lim = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=(fan_in, fan_out))


def _linear_params(params, name, rng, fan_in, fan_out, bias=True):
    params[f"{name}.w"] = Parameter(Tensor(_xavier(rng, fan_in, fan_out)))
    if bias:
        params[f"{name}.b"] = Parameter(Tensor(np.zeros(fan_out)))


def init_model(config: EncoderConfig, d: int, image_side: int, rng) -> Model:
    c, D, h = config.feature_dim, config.slot_dim, config.decoder_hidden
    p = {}
    _linear_params(p, "feat.l1", rng, 7, c)
    _linear_params(p, "feat.l2", rng, c, c)
    for ln in ("attn.ln_in", "attn.ln_slot"):
        p[f"{ln}.g"] = Parameter(Tensor(np.ones(c if ln.endswith("in") else D)))
        p[f"{ln}.b"] = Parameter(Tensor(np.zeros(c if ln.endswith("in") else D)))
    _linear_params(p, "attn.q", rng, D, D, bias=False)
    _linear_params(p, "attn.k", rng, c, D, bias=False)
    _linear_params(p, "attn.v", rng, c, D, bias=False)
    for gate in ("z", "r", "h"):
        p[f"gru.w{gate}"] = Parameter(Tensor(_xavier(rng, D, D)))
        p[f"gru.u{gate}"] = Parameter(Tensor(_xavier(rng, D, D)))
        p[f"gru.b{gate}"] = Parameter(Tensor(np.zeros(D)))
    p["slots.mu"] = Parameter(Tensor(rng.normal(0.0, 0.1, size=D)))
    p["slots.log_sigma"] = Parameter(Tensor(np.full(D, -1.0)))
    _linear_params(p, "dec.l1", rng, D + 4, h)
    _linear_params(p, "dec.l2", rng, h, h)
    _linear_params(p, "dec.l3", rng, h, 4)
    w1, w2, w3 = config.head_widths
    for j in range(d):
        _linear_params(p, f"head{j}.l1", rng, D, w1)
        _linear_params(p, f"head{j}.l2", rng, w1, w2)
        # bias-free ReLU layers start with non-negative weights; a signed init
        # can kill the whole head at step 0 (output identically zero => no
        # gradient ever reaches it)
        p[f"head{j}.l3.w"] = Parameter(Tensor(np.abs(_xavier(rng, w2, w3))))
        p[f"head{j}.l4.w"] = Parameter(Tensor(np.abs(_xavier(rng, w3, 1))))
    return Model(config=config, d=d, image_side=image_side, params=p)


def _linear(model, name, x, bias=True):
    out = ad.matmul(x, model.params[f"{name}.w"].tensor)
    if bias:
        out = out + model.params[f"{name}.b"].tensor
    return out


def _layernorm(x, g, b):
    mu = ad.tmean(x, axis=-1, keepdims=True)
    xc = x - mu
    var = ad.tmean(xc * xc, axis=-1, keepdims=True)
    return ad.mul(xc, ad.powc(var + _LN_EPS, -0.5)) * g + b


# ---------------------------------------------------------------------------
# features


def positional_channels(side: int) -> np.ndarray:
    """(side*side, 4) array of (x, y, 1-x, 1-y) at pixel centers."""
    coords = (np.arange(side) + 0.5) / side
    xs, ys = np.meshgrid(coords, coords)
    x, y = xs.ravel(), ys.ravel()
    return np.stack([x, y, 1.0 - x, 1.0 - y], axis=1)


def encode_features(model: Model, images: Tensor) -> Tensor:
    """Per-pixel shared MLP on RGB + positional channels; (B, n, c)."""
    b = images.shape[0]
    side = model.image_side
    n = side * side
    rgb = ad.reshape(images, (b, n, 3))
    pos = ad.broadcast_to(Tensor(positional_channels(side)[None]), (b, n, 4))
    x = ad.concat([rgb, pos], axis=-1)
    x = ad.relu(_linear(model, "feat.l1", x))
    return _linear(model, "feat.l2", x)


# ---------------------------------------------------------------------------
# Sinkhorn and MESH


def sinkhorn_log(logits: Tensor, iterations: int, temperature: float = 1.0) -> Tensor:
    """Log-domain Sinkhorn on exp(C/tau): rows sum to n/m, columns sum to 1.

    Each round rescales rows then columns, so column marginals are exact on
    exit up to float round-off.
    """
    m, n = logits.shape[-2], logits.shape[-1]
    log_p = logits if temperature == 1.0 else ad.mul(logits, 1.0 / temperature)
    row_target = math.log(n / m)
    for _ in range(iterations):
        log_p = log_p - ad.logsumexp(log_p, axis=-1, keepdims=True) + row_target
        log_p = log_p - ad.logsumexp(log_p, axis=-2, keepdims=True)
    return log_p


def sinkhorn(logits: Tensor, iterations: int, temperature: float = 1.0) -> Tensor:
    return ad.exp(sinkhorn_log(logits, iterations, temperature))


def _sinkhorn_log_np(logits: np.ndarray, iterations: int, temperature: float = 1.0):
    log_p = logits / temperature
    m, n = log_p.shape[-2], log_p.shape[-1]

    def lse(a, axis):
        mx = a.max(axis=axis, keepdims=True)
        return mx + np.log(np.exp(a - mx).sum(axis=axis, keepdims=True))

    for _ in range(iterations):
        log_p = log_p - lse(log_p, -1) + math.log(n / m)
        log_p = log_p - lse(log_p, -2)
    return log_p


def transport_entropy_np(logits: np.ndarray, iterations: int, temperature: float = 1.0) -> float:
    log_p = _sinkhorn_log_np(logits, iterations, temperature)
    p = np.exp(log_p)
    return float(-(p * np.where(p > 0.0, log_p, 0.0)).sum())


def _transport_entropy(log_p: Tensor) -> Tensor:
    return ad.tsum(ad.mul(ad.exp(log_p), log_p)) * -1.0


def mesh_refine(logits: Tensor, config: EncoderConfig, rng, entropy_trace=None) -> Tensor:
    """Entropy-minimized Sinkhorn transport of noisy logits.

    Noise breaks exact ties; ``mesh_steps`` unrolled gradient-descent steps on
    the transport entropy (differentiating through the Sinkhorn iterations)
    sharpen the logits, with backtracking halving so entropy never increases.
    The inner logit updates are treated as constants for the training gradient,
    which flows through the final Sinkhorn only.
    """
    iters, tau = config.sinkhorn_iterations, config.temperature
    noisy = logits.data + rng.normal(0.0, config.mesh_noise_scale, size=logits.shape)
    current = noisy
    entropy = transport_entropy_np(current, iters, tau)
    if entropy_trace is not None:
        entropy_trace.append(entropy)
    for _ in range(config.mesh_steps):
        leaf = Tensor(current)
        h = _transport_entropy(sinkhorn_log(leaf, iters, tau))
        h.backward()
        grad = leaf.grad
        step = config.mesh_step_size
        improved = False
        for _ in range(30):
            candidate = current - step * grad
            cand_entropy = transport_entropy_np(candidate, iters, tau)
            if cand_entropy <= entropy:
                current, entropy, improved = candidate, cand_entropy, True
                break
            step *= 0.5
        if entropy_trace is not None:
            entropy_trace.append(entropy)
        if not improved:
            break
    refined = logits + Tensor(current - logits.data)  # constant shift on the tape
    return sinkhorn(refined, iters, tau)


# ---------------------------------------------------------------------------
# slot attention


def sample_init_slots(model: Model, batch: int, rng) -> Tensor:
    cfg = model.config
    eps = rng.standard_normal((batch, cfg.n_slots, cfg.slot_dim))
    mu = model.params["slots.mu"].tensor
    sigma = ad.exp(model.params["slots.log_sigma"].tensor)
    return mu + sigma * Tensor(eps)


def _gru_cell(model, x, h):
    z = ad.sigmoid(_linear_pair(model, "z", x, h))
    r = ad.sigmoid(_linear_pair(model, "r", x, h))
    n = ad.tanh(ad.matmul(x, model.params["gru.wh"].tensor)
                + ad.matmul(r * h, model.params["gru.uh"].tensor)
                + model.params["gru.bh"].tensor)
    return (1.0 - z) * n + z * h


def _linear_pair(model, gate, x, h):
    return (ad.matmul(x, model.params[f"gru.w{gate}"].tensor)
            + ad.matmul(h, model.params[f"gru.u{gate}"].tensor)
            + model.params[f"gru.b{gate}"].tensor)


def slot_attention_iterate(model: Model, features: Tensor, init_slots: Tensor, rng):
    """T rounds of competitive attention; returns (slots, attention) Tensors.

    Gradients are truncated through the recurrence: slots entering the final
    round pass through stop_gradient.
    """
    cfg = model.config
    x = _layernorm(features, model.params["attn.ln_in.g"].tensor,
                   model.params["attn.ln_in.b"].tensor)
    keys = _linear(model, "attn.k", x, bias=False)
    values = _linear(model, "attn.v", x, bias=False)
    scale = 1.0 / math.sqrt(cfg.slot_dim)
    slots, attention = init_slots, None
    for t in range(cfg.n_iterations):
        if t == cfg.n_iterations - 1:
            slots = ad.stop_gradient(slots)
        q = _linear(model, "attn.q",
                    _layernorm(slots, model.params["attn.ln_slot.g"].tensor,
                               model.params["attn.ln_slot.b"].tensor),
                    bias=False)
        logits = ad.mul(ad.matmul(q, ad.swap_last2(keys)), scale)
        if not np.all(np.isfinite(logits.data)):
            raise NonFiniteActivation("slot attention logits diverged")
        if cfg.mesh_enabled:
            attention = mesh_refine(logits, cfg, rng)
        else:
            attention = ad.softmax(ad.mul(logits, 1.0 / cfg.temperature), axis=-2)
        weights = ad.div(attention, attention.sum(axis=-1, keepdims=True) + 1e-8)
        updates = ad.matmul(weights, values)
        if cfg.gru_update:
            slots = _gru_cell(model, updates, slots)
        else:
            slots = updates
        if not np.all(np.isfinite(slots.data)):
            raise NonFiniteActivation("slot update diverged")
    return slots, attention


def encode(model: Model, images: Tensor, rng, init_slots: Tensor = None):
    """Image batch -> (slots, attention)."""
    features = encode_features(model, images)
    if init_slots is None:
        init_slots = sample_init_slots(model, images.shape[0], rng)
    return slot_attention_iterate(model, features, init_slots, rng)


# ---------------------------------------------------------------------------
# decoding and projection


def decode_slots(model: Model, slots: Tensor):
    """Spatial-broadcast decode; returns (reconstruction (B,n,3), alphas (B,m,n))."""
    b, m, D = slots.shape
    side = model.image_side
    n = side * side
    tiled = ad.broadcast_to(ad.reshape(slots, (b, m, 1, D)), (b, m, n, D))
    pos = ad.broadcast_to(Tensor(positional_channels(side)[None, None]), (b, m, n, 4))
    h = ad.concat([tiled, pos], axis=-1)
    h = ad.relu(_linear(model, "dec.l1", h))
    h = ad.relu(_linear(model, "dec.l2", h))
    out = _linear(model, "dec.l3", h)                    # B x m x n x 4
    rgb = out[..., 0:3]
    alphas = ad.softmax(out[..., 3:4], axis=1)           # over slots
    recon = ad.tsum(alphas * rgb, axis=1)
    return recon, ad.reshape(alphas, (b, m, n))


def project_slots(model: Model, slots: Tensor) -> Tensor:
    """Apply the d shared projection heads to every slot; (B, m, d), ReLU >= 0."""
    outs = []
    for j in range(model.d):
        h = ad.relu(_linear(model, f"head{j}.l1", slots))
        h = ad.relu(_linear(model, f"head{j}.l2", h))
        h = ad.relu(_linear(model, f"head{j}.l3", h, bias=False))
        outs.append(ad.relu(_linear(model, f"head{j}.l4", h, bias=False)))
    return ad.concat(outs, axis=-1)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model: Model, out_dir: str):
    os.makedirs(out_dir, exist_ok=True)
    cfg = model.config
    manifest = {
        "d": str(model.d),
        "image_side": str(model.image_side),
        **{k: repr(getattr(cfg, k)) for k in cfg.__dataclass_fields__},
    }
    for name, param in model.params.items():
        manifest[f"param.{name}"] = ",".join(str(s) for s in param.tensor.shape)
        param.tensor.data.astype("<f8").tofile(os.path.join(out_dir, f"{name}.f64"))
    write_manifest(os.path.join(out_dir, "manifest.txt"), manifest)


def load_checkpoint(path: str) -> Model:
    manifest = read_manifest(os.path.join(path, "manifest.txt"))
    import ast

    cfg_kwargs = {k: ast.literal_eval(manifest[k]) for k in EncoderConfig.__dataclass_fields__}
    model = Model(config=EncoderConfig(**cfg_kwargs), d=int(manifest["d"]),
                  image_side=int(manifest["image_side"]))
    for key, value in manifest.items():
        if not key.startswith("param."):
            continue
        name = key[len("param."):]
        shape = tuple(int(s) for s in value.split(",")) if value else ()
        data = np.fromfile(os.path.join(path, f"{name}.f64"), dtype="<f8").reshape(shape)
        model.params[name] = Parameter(Tensor(data))
    return model
