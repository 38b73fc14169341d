"""2D multi-object scene generator with 1-sparse perturbation pairs.

Scenes hold k non-overlapping shapes on a white background. Each pair of
observations differs in exactly one property of exactly one object, and the
ground truth for that change is recorded alongside the rendered images.
"""

from __future__ import annotations

import colorsys
import hashlib
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DegenerateObject, RejectionBudgetExceeded

PROPERTIES = ("pos_x", "pos_y", "color", "shape", "size", "rotation")
CONTINUOUS = ("pos_x", "pos_y", "size", "rotation")
SHAPE_NAMES = ("circle", "square", "triangle", "heart", "diamond")

# conservative circumradius of each shape in units of its half-extent
_BOUND_FACTOR = {"circle": 1.0, "square": math.sqrt(2), "triangle": 1.0,
                 "heart": 1.45, "diamond": math.sqrt(2)}

_DEFAULT_RANGES = {
    "pos_x": (0.0, 1.0),
    "pos_y": (0.0, 1.0),
    "size": (0.12, 0.24),
    "rotation": (0.0, math.pi / 4),
}

_DEFAULT_PERTURB = {
    "pos_x": (-0.2, 0.2),
    "pos_y": (-0.2, 0.2),
    "size": (-0.02, 0.02),
    "rotation": (-0.2, 0.2),
}

_DEFAULT_FIXED = {
    "pos_x": 0.5,
    "pos_y": 0.5,
    "color": 0,      # hue palette index
    "shape": 1,      # square
    "size": 0.18,
    "rotation": 0.0,
}


@dataclass(frozen=True)
class PropertySpec:
    """Which object properties vary, their ranges, and palette encodings."""

    active_properties: tuple = ("pos_x", "pos_y")
    hue_palette: tuple = (0.0, 0.25, 0.5, 0.75)
    shape_palette: tuple = SHAPE_NAMES
    ranges: dict = field(default_factory=lambda: dict(_DEFAULT_RANGES))
    perturb_ranges: dict = field(default_factory=lambda: dict(_DEFAULT_PERTURB))
    fixed_values: dict = field(default_factory=lambda: dict(_DEFAULT_FIXED))

    def __post_init__(self):
        unknown = set(self.active_properties) - set(PROPERTIES)
        if unknown:
            raise ValueError(f"unknown properties: {sorted(unknown)}")
        if len(set(self.active_properties)) != len(self.active_properties):
            raise ValueError("duplicate active properties")
        if len(set(self.hue_palette)) != len(self.hue_palette):
            raise ValueError("hue palette values must be pairwise distinct")
        if any(not (0.0 <= h < 1.0) for h in self.hue_palette):
            # hue is cylindrical: 1.0 aliases 0.0, so the palette must stay below it
            raise ValueError("hue palette values must lie in [0, 1)")
        if any(s not in SHAPE_NAMES for s in self.shape_palette):
            raise ValueError(f"shape palette entries must come from {SHAPE_NAMES}")
        if "rotation" in self.active_properties and "circle" in self.shape_palette:
            raise ValueError("rotation is a target: circle must be excluded (not pixel-visible)")

    @property
    def d(self):
        return len(self.active_properties)


@dataclass(frozen=True)
class ObjectState:
    pos_x: float
    pos_y: float
    hue_index: int
    shape_index: int
    size: float
    rotation: float


@dataclass(frozen=True)
class SceneSample:
    objects: tuple
    seed: int
    config_hash: str


@dataclass(frozen=True)
class PerturbationRecord:
    """Ground truth for one 1-sparse perturbation.

    ``target_object`` is never shown to the model; ``magnitude`` is the
    model-unit encoding (palette deltas are scaled by palette size).
    """

    target_object: int
    property_index: int
    magnitude: float
    sign: int


@dataclass(frozen=True)
class RenderedPair:
    image_t: np.ndarray
    image_t1: np.ndarray
    masks_t: np.ndarray
    masks_t1: np.ndarray
    perturbation: PerturbationRecord
    latents_t: np.ndarray
    latents_t1: np.ndarray


@dataclass(frozen=True)
class DGPConfig:
    k: int = 2
    image_side: int = 24
    injective: bool = False
    injectivity_property: str = "color"
    property_spec: PropertySpec = field(default_factory=PropertySpec)
    max_rejections: int = 10_000
    perturbation_mode: str = "sparse"

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.image_side < 16:
            raise ValueError("image_side must be >= 16")
        if self.perturbation_mode != "sparse":
            raise ValueError("only fully sparse perturbations are supported")
        if self.injective:
            if self.injectivity_property in self.property_spec.active_properties:
                raise ValueError("injectivity property must not be a disentanglement target")
            if self.injectivity_property not in ("color", "shape"):
                raise ValueError("injectivity is imposed via a discrete property (color or shape)")
            palette = (self.property_spec.hue_palette
                       if self.injectivity_property == "color"
                       else self.property_spec.shape_palette)
            if len(palette) < self.k:
                raise ValueError("palette too small to identity-code every object")

    def hash(self) -> str:
        return hashlib.sha256(repr(self).encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# rasterization


def _local_membership(shape_name, x, y):
    """Point-in-shape test in object-local coordinates (half-extent 1, y up)."""
    if shape_name == "circle":
        return x * x + y * y <= 1.0
    if shape_name == "square":
        return np.maximum(np.abs(x), np.abs(y)) <= 1.0
    if shape_name == "diamond":
        return np.abs(x) + np.abs(y) <= math.sqrt(2)
    if shape_name == "triangle":
        # equilateral, vertices on the unit circle, apex up
        verts = [(math.cos(a), math.sin(a))
                 for a in (math.pi / 2, math.pi / 2 + 2 * math.pi / 3, math.pi / 2 + 4 * math.pi / 3)]
        inside = np.ones_like(x, dtype=bool)
        for (x0, y0), (x1, y1) in zip(verts, verts[1:] + verts[:1]):
            inside &= (x1 - x0) * (y - y0) - (y1 - y0) * (x - x0) >= 0.0
        return inside
    if shape_name == "heart":
        r2 = x * x + y * y
        return (r2 - 1.0) ** 3 - x * x * y**3 <= 0.0
    raise ValueError(f"unknown shape {shape_name!r}")


def _membership_at(obj: ObjectState, spec: PropertySpec, xs, ys):
    """Evaluate shape membership at scene coordinates (arrays of any shape)."""
    dx, dy = xs - obj.pos_x, ys - obj.pos_y
    c, s = math.cos(-obj.rotation), math.sin(-obj.rotation)
    lx = (c * dx - s * dy) / obj.size
    ly = (s * dx + c * dy) / obj.size
    return _local_membership(spec.shape_palette[obj.shape_index], lx, ly)


def _pixel_grid(side, supersample=1):
    """Scene coordinates of sample points; y increases upward."""
    step = 1.0 / (side * supersample)
    coords = (np.arange(side * supersample) + 0.5) * step
    xs, ys = np.meshgrid(coords, 1.0 - coords)
    return xs, ys


def object_mask(obj, spec, side):
    """Boolean pixel-center mask."""
    xs, ys = _pixel_grid(side)
    return _membership_at(obj, spec, xs, ys)


def object_coverage(obj, spec, side, supersample=2):
    """Per-pixel coverage fraction from supersampled point tests."""
    xs, ys = _pixel_grid(side, supersample)
    hits = _membership_at(obj, spec, xs, ys).astype(np.float64)
    return hits.reshape(side, supersample, side, supersample).mean(axis=(1, 3))


def _object_color(obj, spec):
    hue = spec.hue_palette[obj.hue_index]
    return np.array(colorsys.hsv_to_rgb(hue, 0.6, 0.6))


def _in_frame(obj, spec):
    bound = obj.size * _BOUND_FACTOR[spec.shape_palette[obj.shape_index]]
    return (bound <= obj.pos_x <= 1.0 - bound) and (bound <= obj.pos_y <= 1.0 - bound)


def scene_is_valid(scene: SceneSample, config: DGPConfig) -> bool:
    """In-frame, pixel-coverage-disjoint, and every object visible."""
    spec = config.property_spec
    occupancy = None
    for obj in scene.objects:
        if not _in_frame(obj, spec):
            return False
        cov = object_coverage(obj, spec, config.image_side) > 0.0
        if not cov.any():
            return False
        if occupancy is None:
            occupancy = cov
        elif (occupancy & cov).any():
            return False
        else:
            occupancy |= cov
    return True


def render(scene: SceneSample, config: DGPConfig):
    """Rasterize a scene to an RGB image in [-1, 1] plus per-object masks.

    Deterministic in (scene, config): shapes are alpha-composited over white
    with 2x2 supersampled coverage; masks are pixel-center membership.
    """
    spec = config.property_spec
    side = config.image_side
    image = np.ones((side, side, 3))
    masks = np.zeros((len(scene.objects), side, side), dtype=bool)
    for i, obj in enumerate(scene.objects):
        mask = object_mask(obj, spec, side)
        if not mask.any():
            raise DegenerateObject(f"object {i} rasterized to zero pixels at side={side}")
        masks[i] = mask
        cov = object_coverage(obj, spec, side)[..., None]
        image = image * (1.0 - cov) + _object_color(obj, spec) * cov
    return np.clip(image * 2.0 - 1.0, -1.0, 1.0), masks


# ---------------------------------------------------------------------------
# sampling


def _sample_object(config: DGPConfig, rng, object_index):
    spec = config.property_spec
    values = dict(spec.fixed_values)
    for prop in spec.active_properties:
        if prop == "color":
            values[prop] = int(rng.integers(len(spec.hue_palette)))
        elif prop == "shape":
            values[prop] = int(rng.integers(len(spec.shape_palette)))
        else:
            lo, hi = spec.ranges[prop]
            values[prop] = float(rng.uniform(lo, hi))
    if config.injective:
        values[config.injectivity_property] = object_index
    return ObjectState(
        pos_x=values["pos_x"], pos_y=values["pos_y"],
        hue_index=int(values["color"]), shape_index=int(values["shape"]),
        size=values["size"], rotation=values["rotation"],
    )


def sample_scene(config: DGPConfig, rng, seed: int = 0) -> SceneSample:
    """Draw whole scenes until every constraint holds (uniform over valid scenes)."""
    for _ in range(config.max_rejections):
        objects = tuple(_sample_object(config, rng, i) for i in range(config.k))
        scene = SceneSample(objects=objects, seed=seed, config_hash=config.hash())
        if scene_is_valid(scene, config):
            return scene
    raise RejectionBudgetExceeded(
        f"no valid scene in {config.max_rejections} draws (k={config.k}, "
        f"image_side={config.image_side}); the config is over-crowded"
    )


def _perturb_object(obj, prop, spec, rng):
    """Returns (new object, encoded magnitude) or None for a null redraw."""
    if prop == "color":
        choices = [i for i in range(len(spec.hue_palette)) if i != obj.hue_index]
        j = int(rng.choice(choices))
        mag = (spec.hue_palette[j] - spec.hue_palette[obj.hue_index]) / len(spec.hue_palette)
        return replace(obj, hue_index=j), mag
    if prop == "shape":
        choices = [i for i in range(len(spec.shape_palette)) if i != obj.shape_index]
        j = int(rng.choice(choices))
        mag = (j - obj.shape_index) / len(spec.shape_palette)
        return replace(obj, shape_index=j), mag
    lo, hi = spec.perturb_ranges[prop]
    mag = float(rng.uniform(lo, hi))
    if mag == 0.0:
        return None
    field_name = {"pos_x": "pos_x", "pos_y": "pos_y", "size": "size", "rotation": "rotation"}[prop]
    value = getattr(obj, field_name) + mag
    plo, phi = spec.ranges[prop]
    if not (plo <= value <= phi):
        return None
    return replace(obj, **{field_name: value}), mag


def sample_sparse_perturbation(scene: SceneSample, config: DGPConfig, rng):
    """Perturb one property of one object; rejection keeps the scene valid.

    On rejection the target object, property, and magnitude are all redrawn so
    the accepted perturbation stays uniform over the feasible set.
    """
    spec = config.property_spec
    for _ in range(config.max_rejections):
        target = int(rng.integers(config.k))
        prop = spec.active_properties[int(rng.integers(spec.d))]
        result = _perturb_object(scene.objects[target], prop, spec, rng)
        if result is None:
            continue
        new_obj, magnitude = result
        objects = scene.objects[:target] + (new_obj,) + scene.objects[target + 1:]
        new_scene = replace(scene, objects=objects)
        if not scene_is_valid(new_scene, config):
            continue
        record = PerturbationRecord(
            target_object=target,
            property_index=spec.active_properties.index(prop),
            magnitude=magnitude,
            sign=1 if magnitude > 0 else -1,
        )
        return new_scene, record
    raise RejectionBudgetExceeded(
        f"no valid perturbation in {config.max_rejections} draws"
    )


def encode_latents(scene: SceneSample, spec: PropertySpec) -> np.ndarray:
    """k x d ground-truth latents in model units, rows in default object order.

    Palette-indexed properties are scaled by palette size so that a discrete
    perturbation's encoded magnitude equals the latent difference exactly.
    """
    out = np.zeros((len(scene.objects), spec.d))
    for i, obj in enumerate(scene.objects):
        for j, prop in enumerate(spec.active_properties):
            if prop == "color":
                out[i, j] = spec.hue_palette[obj.hue_index] / len(spec.hue_palette)
            elif prop == "shape":
                out[i, j] = obj.shape_index / len(spec.shape_palette)
            else:
                out[i, j] = getattr(obj, prop)
    return out


def render_pair(config: DGPConfig, rng, seed: int = 0) -> RenderedPair:
    """Sample a scene, perturb it, and render both observations."""
    scene_t = sample_scene(config, rng, seed=seed)
    scene_t1, record = sample_sparse_perturbation(scene_t, config, rng)
    image_t, masks_t = render(scene_t, config)
    image_t1, masks_t1 = render(scene_t1, config)
    spec = config.property_spec
    return RenderedPair(
        image_t=image_t, image_t1=image_t1,
        masks_t=masks_t, masks_t1=masks_t1,
        perturbation=record,
        latents_t=encode_latents(scene_t, spec),
        latents_t1=encode_latents(scene_t1, spec),
    )
