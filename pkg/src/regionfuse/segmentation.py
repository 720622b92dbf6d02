"""Prompt-guided segmentation of a reference image into labeled region crops.

The reference is encoded to a latent, noised to a probe timestep, and passed
once through the probed denoiser. Word-level attention maps are aggregated
per region, min-max normalized, and thresholded into tight bounding boxes,
which are then scaled to pixel space and cropped.

Raw softmax mass per cell is far below any useful fixed threshold on real
grids, so the threshold applies to the min-max normalized map.
"""

from dataclasses import dataclass

import numpy as np

from .engine import forward_noise, latent_encode, Conditioning, NoiseSchedule
from .errors import NoCellAboveThreshold
from .probe import (aggregate_layers, aggregate_region, aggregate_timesteps,
                    normalize_map, record_layer_attention, WordAttentionMap)
from .seeding import derive_rng
from .text import PromptSpec, encode_tokens, tokenize


@dataclass(frozen=True)
class RegionBox:
    """Inclusive 1-indexed box [x1, x2] x [y1, y2] on some grid."""

    x1: int
    x2: int
    y1: int
    y2: int

    def __post_init__(self):
        if not (1 <= self.x1 <= self.x2 and 1 <= self.y1 <= self.y2):
            raise ValueError(f"invalid box {self}")

    @property
    def width(self) -> int:
        return self.x2 - self.x1 + 1

    @property
    def height(self) -> int:
        return self.y2 - self.y1 + 1

    def scaled(self, factor: int) -> "RegionBox":
        """Map a latent-grid box onto the pixel grid (factor pixels per cell)."""
        return RegionBox(x1=(self.x1 - 1) * factor + 1, x2=self.x2 * factor,
                         y1=(self.y1 - 1) * factor + 1, y2=self.y2 * factor)

    def slices(self):
        return slice(self.y1 - 1, self.y2), slice(self.x1 - 1, self.x2)

    def to_mask(self, h: int, w: int) -> np.ndarray:
        mask = np.zeros((h, w), dtype=np.float64)
        mask[self.slices()] = 1.0
        return mask


@dataclass(frozen=True)
class RegionCrop:
    """One labeled crop of a reference image."""

    label: str
    box: RegionBox  # latent-grid coordinates
    pixels: np.ndarray  # (box.height * factor, box.width * factor, channels)
    source: int = 0  # character index of the reference


def threshold_box(attention_map, gamma1: float) -> RegionBox:
    """Tight bounding box of cells whose normalized value exceeds gamma1."""
    if not 0.0 < gamma1 < 1.0:
        raise ValueError("gamma1 must lie in (0, 1)")
    values = attention_map.values if isinstance(attention_map, WordAttentionMap) \
        else np.asarray(attention_map, dtype=np.float64)
    normalized = normalize_map(values)
    ys, xs = np.nonzero(normalized > gamma1)
    if ys.size == 0:
        raise NoCellAboveThreshold(f"no cell above {gamma1} after normalization")
    return RegionBox(x1=int(xs.min()) + 1, x2=int(xs.max()) + 1,
                     y1=int(ys.min()) + 1, y2=int(ys.max()) + 1)


def segment_reference(reference, spec: PromptSpec, engine, *, patch_factor: int,
                      gamma1: float = 0.8, t_probe=None,
                      steps: int = 20, seed: int = 0, fixture=None):
    """Split a reference image into per-region crops.

    ``t_probe`` is the single noising step whose attention is probed (default
    half of ``steps``); passing a sequence probes each step and averages the
    region maps. Returns (crops, boxes): a list of RegionCrop and a dict
    label -> RegionBox in latent coordinates. A region whose map never clears
    gamma1 raises NoCellAboveThreshold tagged with the region label; callers
    decide whether to fall back to a full-image box.
    """
    if not spec.regions:
        raise ValueError("spec has no regions to segment")
    reference = np.asarray(reference, dtype=np.float64)
    schedule = NoiseSchedule.cosine(steps)
    if t_probe is None:
        t_probe = max(1, round(0.5 * steps))
    t_probes = [t_probe] if np.isscalar(t_probe) else sorted(t_probe)
    z0 = latent_encode(reference, patch_factor)
    # noise depends on the seed alone so identical references segment
    # identically regardless of character index
    rng = derive_rng("segment", seed)
    eps = rng.standard_normal(z0.values.shape)
    ctx = Conditioning(text=encode_tokens(tokenize(spec.full_text), seed=engine.config.seed))
    records_by_t = {}
    for t in t_probes:
        z_t = forward_noise(z0, t, schedule, eps)
        records_by_t[t] = record_layer_attention(engine, z_t, t, ctx, fixture=fixture)
    out_shape = (z0.height, z0.width)

    crops = []
    boxes = {}
    for region in spec.regions:
        begin, end = region.span
        per_step = []
        for t in t_probes:
            word_maps = [aggregate_layers(records_by_t[t], word, out_shape)
                         for word in range(begin, end + 1)]
            per_step.append(aggregate_region(word_maps, region.span,
                                             label=region.label))
        agg = aggregate_timesteps(per_step, (t_probes[0], t_probes[-1]),
                                  key=region.label)
        try:
            box = threshold_box(agg.values, gamma1)
        except NoCellAboveThreshold as exc:
            tagged = NoCellAboveThreshold(f"region '{region.label}': {exc}")
            tagged.label = region.label
            raise tagged from exc
        boxes[region.label] = box
        pixel_box = box.scaled(patch_factor)
        crops.append(RegionCrop(label=region.label, box=box,
                                pixels=reference[pixel_box.slices()].copy(),
                                source=spec.character_index))
    return crops, boxes
