"""On-disk dataset format: manifest + raw tensors + perturbation CSV.

Layout of a dataset directory:

    manifest.txt        key = value lines (version, shapes, DGP settings)
    images_t.f32        n x H x W x 3, little-endian float32, row-major
    images_t1.f32       same shape
    latents_t.f32       n x k x d
    latents_t1.f32      n x k x d
    masks_t.u8          n x k x H x W, one byte per pixel (0/1)
    perturbations.csv   pair_index, target_object, property_index, magnitude, sign

Regeneration with the same (config, base_seed) is byte-identical; the per-pair
seed is a pure function of (base_seed, pair_index) so order never matters.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass

import numpy as np

from .dgp import DGPConfig, PerturbationRecord, PropertySpec, render_pair

FORMAT_VERSION = 1
_MASK64 = (1 << 64) - 1


def derive_pair_seed(base_seed: int, pair_index: int) -> int:
    """splitmix64 finalizer over the (base_seed, pair_index) stream position."""
    x = (base_seed + (pair_index + 1) * 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


@dataclass
class Dataset:
    images_t: np.ndarray
    images_t1: np.ndarray
    latents_t: np.ndarray
    latents_t1: np.ndarray
    masks_t: np.ndarray
    perturbations: list
    manifest: dict

    @property
    def n_pairs(self):
        return self.images_t.shape[0]


def generate_pairs(config: DGPConfig, n_pairs: int, base_seed: int) -> Dataset:
    """Generate n_pairs rendered perturbation pairs in memory."""
    side, k, d = config.image_side, config.k, config.property_spec.d
    data = Dataset(
        images_t=np.zeros((n_pairs, side, side, 3), dtype=np.float32),
        images_t1=np.zeros((n_pairs, side, side, 3), dtype=np.float32),
        latents_t=np.zeros((n_pairs, k, d), dtype=np.float32),
        latents_t1=np.zeros((n_pairs, k, d), dtype=np.float32),
        masks_t=np.zeros((n_pairs, k, side, side), dtype=bool),
        perturbations=[],
        manifest=_manifest(config, n_pairs, base_seed),
    )
    for i in range(n_pairs):
        seed = derive_pair_seed(base_seed, i)
        pair = render_pair(config, np.random.default_rng(seed), seed=seed)
        data.images_t[i] = pair.image_t
        data.images_t1[i] = pair.image_t1
        data.latents_t[i] = pair.latents_t
        data.latents_t1[i] = pair.latents_t1
        data.masks_t[i] = pair.masks_t
        data.perturbations.append(pair.perturbation)
    return data


def _manifest(config: DGPConfig, n_pairs: int, base_seed: int) -> dict:
    spec = config.property_spec
    side, k, d = config.image_side, config.k, spec.d
    return {
        "version": str(FORMAT_VERSION),
        "k": str(k),
        "d": str(d),
        "image_side": str(side),
        "n_pairs": str(n_pairs),
        "active_properties": ",".join(spec.active_properties),
        "hue_palette": ",".join(repr(h) for h in spec.hue_palette),
        "shape_palette": ",".join(spec.shape_palette),
        "injective": str(config.injective).lower(),
        "injectivity_property": config.injectivity_property,
        "base_seed": str(base_seed),
        "images_t_shape": f"{n_pairs},{side},{side},3",
        "images_t1_shape": f"{n_pairs},{side},{side},3",
        "latents_t_shape": f"{n_pairs},{k},{d}",
        "latents_t1_shape": f"{n_pairs},{k},{d}",
        "masks_t_shape": f"{n_pairs},{k},{side},{side}",
    }


def write_manifest(path: str, manifest: dict):
    with open(path, "w", newline="\n") as fh:
        for key, value in manifest.items():
            fh.write(f"{key} = {value}\n")


def read_manifest(path: str) -> dict:
    manifest = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition("=")
            manifest[key.strip()] = value.strip()
    return manifest


def save_dataset(data: Dataset, out_dir: str):
    """Write a dataset directory; failures carry the offending path."""
    try:
        os.makedirs(out_dir, exist_ok=True)
        write_manifest(os.path.join(out_dir, "manifest.txt"), data.manifest)
        for name in ("images_t", "images_t1", "latents_t", "latents_t1"):
            arr = getattr(data, name).astype("<f4")
            arr.tofile(os.path.join(out_dir, f"{name}.f32"))
        data.masks_t.astype(np.uint8).tofile(os.path.join(out_dir, "masks_t.u8"))
        with open(os.path.join(out_dir, "perturbations.csv"), "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["pair_index", "target_object", "property_index", "magnitude", "sign"])
            for i, rec in enumerate(data.perturbations):
                writer.writerow([i, rec.target_object, rec.property_index, repr(rec.magnitude), rec.sign])
    except OSError as err:
        raise OSError(f"failed writing dataset under {out_dir}: {err}") from err


def make_dataset(config: DGPConfig, n_pairs: int, base_seed: int, out_dir: str) -> Dataset:
    data = generate_pairs(config, n_pairs, base_seed)
    save_dataset(data, out_dir)
    return data


def _parse_shape(value: str):
    return tuple(int(v) for v in value.split(","))


def load_dataset(path: str) -> Dataset:
    try:
        manifest = read_manifest(os.path.join(path, "manifest.txt"))
        arrays = {}
        for name in ("images_t", "images_t1", "latents_t", "latents_t1"):
            shape = _parse_shape(manifest[f"{name}_shape"])
            arrays[name] = np.fromfile(os.path.join(path, f"{name}.f32"), dtype="<f4").reshape(shape)
        mask_shape = _parse_shape(manifest["masks_t_shape"])
        masks = np.fromfile(os.path.join(path, "masks_t.u8"), dtype=np.uint8).reshape(mask_shape)
        perturbations = []
        with open(os.path.join(path, "perturbations.csv")) as fh:
            for row in csv.DictReader(fh):
                perturbations.append(PerturbationRecord(
                    target_object=int(row["target_object"]),
                    property_index=int(row["property_index"]),
                    magnitude=float(row["magnitude"]),
                    sign=int(row["sign"]),
                ))
    except OSError as err:
        raise OSError(f"failed reading dataset under {path}: {err}") from err
    return Dataset(perturbations=perturbations, manifest=manifest,
                   masks_t=masks.astype(bool), **arrays)
