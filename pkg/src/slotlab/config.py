"""Experiment configuration: a flat dataclass with INI round-trip.

Config files use ``key = value`` lines under bracketed section headers.
parse -> emit -> parse is a fixpoint.
"""

from __future__ import annotations

import configparser
import hashlib
import math
from dataclasses import dataclass, fields

from .dgp import DGPConfig, PropertySpec
from .model import EncoderConfig


@dataclass
class ExperimentConfig:
    # [dgp]
    k: int = 2
    image_side: int = 24
    injective: bool = False
    injectivity_property: str = "color"
    active_properties: tuple = ("pos_x", "pos_y")
    hue_palette: tuple = (0.0, 0.25, 0.5, 0.75)
    shape_palette: tuple = ("circle", "square", "triangle", "heart", "diamond")
    size_fixed: float = 0.18  # inactive-size half-extent; shrink for k > 2
    max_rejections: int = 10_000
    # [encoder]
    n_slots: int = 3
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
    warm_start: bool = True
    # [loss]
    w_recons: float = 100.0
    w_latent: float = 10.0
    offset_mode: str = "unknown"
    offset_c: float = 0.1
    matching: str = "sparse"
    # [optim]
    lr: float = 2e-4
    # final learning rate = lr * lr_decay, reached by linear interpolation
    # over the full run; 1.0 keeps the rate fixed
    lr_decay: float = 1.0
    weight_decay: float = 0.01
    # [train]
    batch_size: int = 32
    epochs_pretrain: int = 200
    epochs_joint: int = 200
    eval_every: int = 10
    early_stop_patience: int = 20
    base_seed: int = 0
    n_train_per_property: int = 1000
    n_val: int = 1000
    n_test: int = 1000
    log_steps: bool = True

    def hash(self) -> str:
        return hashlib.sha256(repr(self).encode()).hexdigest()[:16]

    def property_spec(self) -> PropertySpec:
        from .dgp import _DEFAULT_FIXED

        return PropertySpec(
            active_properties=self.active_properties,
            hue_palette=self.hue_palette,
            shape_palette=self.shape_palette,
            fixed_values={**_DEFAULT_FIXED, "size": self.size_fixed},
        )

    def dgp_config(self, injective=None) -> DGPConfig:
        return DGPConfig(
            k=self.k,
            image_side=self.image_side,
            injective=self.injective if injective is None else injective,
            injectivity_property=self.injectivity_property,
            property_spec=self.property_spec(),
            max_rejections=self.max_rejections,
        )

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(
            n_slots=self.n_slots, slot_dim=self.slot_dim,
            n_iterations=self.n_iterations, feature_dim=self.feature_dim,
            decoder_hidden=self.decoder_hidden,
            head_widths=tuple(int(w) for w in self.head_widths),
            mesh_enabled=self.mesh_enabled,
            sinkhorn_iterations=self.sinkhorn_iterations, mesh_steps=self.mesh_steps,
            mesh_step_size=self.mesh_step_size, mesh_noise_scale=self.mesh_noise_scale,
            temperature=self.temperature, warm_start=self.warm_start,
        )


_SECTIONS = {
    "dgp": ("k", "image_side", "injective", "injectivity_property", "active_properties",
            "hue_palette", "shape_palette", "size_fixed", "max_rejections"),
    "encoder": ("n_slots", "slot_dim", "n_iterations", "feature_dim", "decoder_hidden",
                "head_widths", "mesh_enabled", "sinkhorn_iterations", "mesh_steps", "mesh_step_size",
                "mesh_noise_scale", "temperature", "warm_start"),
    "loss": ("w_recons", "w_latent", "offset_mode", "offset_c", "matching"),
    "optim": ("lr", "lr_decay", "weight_decay"),
    "train": ("batch_size", "epochs_pretrain", "epochs_joint", "eval_every",
              "early_stop_patience", "base_seed", "n_train_per_property",
              "n_val", "n_test", "log_steps"),
}

_FIELD_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}


def _format_value(value):
    if isinstance(value, tuple):
        return ",".join(_format_value(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_value(name, raw):
    kind = _FIELD_TYPES[name]
    raw = raw.strip()
    if kind == "bool":
        if raw not in ("true", "false"):
            raise ValueError(f"{name}: expected true/false, got {raw!r}")
        return raw == "true"
    if kind == "int":
        return int(raw)
    if kind == "float":
        value = float(raw)
        if not math.isfinite(value):
            raise ValueError(f"{name}: non-finite value")
        return value
    if kind == "tuple":
        items = tuple(v.strip() for v in raw.split(",") if v.strip())
        for cast in (int, float):
            try:
                return tuple(cast(v) for v in items)
            except ValueError:
                continue
        return items
    return raw


def emit_config(config: ExperimentConfig, path: str):
    with open(path, "w", newline="\n") as fh:
        for section, names in _SECTIONS.items():
            fh.write(f"[{section}]\n")
            for name in names:
                fh.write(f"{name} = {_format_value(getattr(config, name))}\n")
            fh.write("\n")


def parse_config(path: str) -> ExperimentConfig:
    parser = configparser.ConfigParser()
    with open(path) as fh:
        parser.read_file(fh)
    kwargs = {}
    for section, names in _SECTIONS.items():
        if not parser.has_section(section):
            continue
        for name, raw in parser.items(section):
            if name not in names:
                raise ValueError(f"unknown key {name!r} in section [{section}] of {path}")
            kwargs[name] = _parse_value(name, raw)
    return ExperimentConfig(**kwargs)
