"""Region-level adapter math: masks, masked attention, embeddings, fusion.

The masked weighting of a region is an elementwise product of its layout
attention map with a hard mask (or the map itself in soft mode). A region's
adapter embedding broadcasts that spatial weighting over the value-projected
reference features, so the adapter influences exactly the cells the
weighting touches and is forced to exact zero everywhere else.
"""

from dataclasses import dataclass

import numpy as np

from .errors import MissingRegionFeatures, ShapeMismatch
from .probe import WordAttentionMap
from .text import LABEL_ORDER


@dataclass(frozen=True)
class RegionMask:
    """Spatial mask for one region; hard masks hold only 0/1 values."""

    label: object
    mode: str  # "hard" | "soft"
    values: np.ndarray  # (h, w)


@dataclass(frozen=True)
class RegionAdapterOutput:
    """Latent-shaped adapter embedding of one region at one layer."""

    label: object
    layer: int
    values: np.ndarray  # (h_k, w_k, channels)


def _map_values(m) -> np.ndarray:
    if isinstance(m, (WordAttentionMap, RegionMask)):
        return np.asarray(m.values, dtype=np.float64)
    return np.asarray(m, dtype=np.float64)


def binarize_mask(attention_map, gamma2: float, label=None) -> RegionMask:
    """Hard mask: 1 where the normalized map exceeds gamma2, else 0.

    A cell exactly at the threshold maps to 0.
    """
    values = _map_values(attention_map)
    return RegionMask(label=label, mode="hard",
                      values=(values > gamma2).astype(np.float64))


def masked_region_attention(attention_map, mask: RegionMask) -> np.ndarray:
    """Elementwise product of a region's attention map with its mask."""
    values = _map_values(attention_map)
    mask_values = _map_values(mask)
    if values.shape != mask_values.shape:
        raise ShapeMismatch(f"map {values.shape} vs mask {mask_values.shape}")
    return values * mask_values


def soft_region_attention(attention_map) -> np.ndarray:
    """Soft weighting: the normalized attention map itself, mask dropped."""
    return _map_values(attention_map).copy()


def region_embedding(weighting, entry, layer: int) -> RegionAdapterOutput:
    """Broadcast a spatial weighting over value-projected region features.

    ``entry`` carries the region's feature tokens and per-layer value
    projections; tokens are mean-pooled after projection. Cells with zero
    weighting are forced to exact zero so a region cannot leak outside its
    own support.
    """
    if entry is None:
        raise MissingRegionFeatures("no adapter entry for this region")
    weighting = _map_values(weighting)
    projected = entry.features @ entry.value_proj(layer)  # (tokens, channels)
    pooled = projected.mean(axis=0)
    values = weighting[:, :, None] * pooled[None, None, :]
    values[weighting == 0.0] = 0.0
    return RegionAdapterOutput(label=entry.label, layer=layer, values=values)


def _sort_key(output: RegionAdapterOutput):
    label = output.label
    if isinstance(label, tuple):  # (character_index, region label)
        return (label[0], LABEL_ORDER.get(label[1], 8), str(label[1]))
    return (0, LABEL_ORDER.get(label, 8), str(label))


def fuse_region_outputs(z_layer: np.ndarray, outputs, scale: float) -> np.ndarray:
    """z + scale * sum of region embeddings, summed in sorted label order.

    With scale 0 or no outputs the input comes back bit-unchanged (copy), and
    the sorted summation order makes the result exactly invariant to the
    order the outputs are supplied in.
    """
    z_layer = np.asarray(z_layer, dtype=np.float64)
    if scale == 0.0 or not outputs:
        return z_layer.copy()
    total = None
    for out in sorted(outputs, key=_sort_key):
        if out.values.shape != z_layer.shape:
            raise ShapeMismatch(
                f"embedding {out.values.shape} vs latent {z_layer.shape}")
        total = out.values.copy() if total is None else total + out.values
    if not total.any():
        return z_layer.copy()
    return z_layer + scale * total
