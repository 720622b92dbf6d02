"""Synthetic attention fixtures with known ground truth.

An untrained denoiser's attention maps do not localize semantically, so
segmentation and adapter behavior are exercised against planted maps: high
mass inside a known box, low mass outside. Ground-truth boxes make recovered
boxes checkable by IoU, and planted layouts with disjoint supports make
adapter locality checkable bit for bit.
"""

import numpy as np

from .seeding import derive_rng
from .segmentation import RegionBox

REGION_LABELS = ("face", "upper", "lower")


def planted_map(h: int, w: int, box: RegionBox, rng,
                background=(0.0, 0.05), foreground=(0.9, 1.0)) -> np.ndarray:
    """A map with high values inside the box and near-zero values outside.

    After min-max normalization every inside cell stays above 0.8 and every
    outside cell stays far below it, so a 0.8 threshold recovers the box
    exactly.
    """
    values = rng.uniform(background[0], background[1], size=(h, w))
    values[box.slices()] = rng.uniform(foreground[0], foreground[1],
                                       size=(box.height, box.width))
    return values


def stacked_region_boxes(h: int, w: int, rng=None) -> dict:
    """Face / upper / lower boxes stacked top to bottom, optionally jittered."""
    bands = [(1, h // 3), (h // 3 + 1, 2 * h // 3), (2 * h // 3 + 1, h)]
    boxes = {}
    for label, (lo, hi) in zip(REGION_LABELS, bands):
        if rng is None:
            y1, y2 = lo, hi
            x1, x2 = 1, w
        else:
            # keep at least a 2-cell extent per axis so boxes stay non-trivial
            y1 = int(rng.integers(lo, hi - 1))
            y2 = int(rng.integers(y1 + 1, hi + 1))
            x1 = int(rng.integers(1, w - 1))
            x2 = int(rng.integers(x1 + 1, w + 1))
        boxes[label] = RegionBox(x1=x1, x2=x2, y1=y1, y2=y2)
    return boxes


def planted_fixture_suite(count: int, h: int, w: int, seed: int = 0):
    """Independent fixtures, each a (maps, ground-truth boxes) pair."""
    suite = []
    for i in range(count):
        rng = derive_rng("fixture", seed, i)
        boxes = stacked_region_boxes(h, w, rng)
        maps = {label: planted_map(h, w, box, rng) for label, box in boxes.items()}
        suite.append((maps, boxes))
    return suite


def word_fixture_from_regions(spec, region_maps: dict, n_words: int):
    """Probe fixture callable: every word of a region carries its region's map.

    Words outside any region get a flat map, which normalizes to zero and can
    never win a threshold.
    """
    h, w = next(iter(region_maps.values())).shape
    maps = np.full((n_words, h, w), 0.5, dtype=np.float64)
    for region in spec.regions:
        begin, end = region.span
        maps[begin - 1:end] = region_maps[region.label]

    def fixture(layer, t):
        return maps

    return fixture


def half_layout_boxes(h: int, w: int, side: str) -> dict:
    """Stacked region boxes confined to the left or right half of the grid."""
    if side == "left":
        x1, x2 = 1, w // 2
    elif side == "right":
        x1, x2 = w // 2 + 1, w
    else:
        raise ValueError("side must be 'left' or 'right'")
    bands = [(1, h // 3), (h // 3 + 1, 2 * h // 3), (2 * h // 3 + 1, h)]
    return {label: RegionBox(x1=x1, x2=x2, y1=lo, y2=hi)
            for label, (lo, hi) in zip(REGION_LABELS, bands)}


def binary_layouts(h: int, w: int, boxes: dict) -> dict:
    """Exactly {0, 1}-valued layout maps, one per label."""
    return {label: box.to_mask(h, w) for label, box in boxes.items()}


def two_character_layouts(h: int, w: int, binary: bool = True, seed: int = 0) -> dict:
    """Disjoint layouts for two characters: 1 on the left half, 2 on the right.

    Keys are (character_index, label). Non-binary maps grade the interior but
    keep an exactly-zero background, which the locality guarantees rely on.
    """
    layouts = {}
    for char, side in ((1, "left"), (2, "right")):
        boxes = half_layout_boxes(h, w, side)
        for label, box in boxes.items():
            if binary:
                values = box.to_mask(h, w)
            else:
                rng = derive_rng("layout2", seed, char, label)
                values = np.zeros((h, w))
                values[box.slices()] = rng.uniform(0.85, 1.0,
                                                   size=(box.height, box.width))
            layouts[(char, label)] = values
    return layouts


def toy_reference(h_pix: int, w_pix: int, seed: int = 0, channels: int = 3) -> np.ndarray:
    """A smooth random image in [0, 1] for demos and tests."""
    rng = derive_rng("toyref", seed)
    coarse = rng.uniform(0.0, 1.0, size=(max(h_pix // 8, 1), max(w_pix // 8, 1), channels))
    reps_y = -(-h_pix // coarse.shape[0])
    reps_x = -(-w_pix // coarse.shape[1])
    img = np.repeat(np.repeat(coarse, reps_y, axis=0), reps_x, axis=1)
    return np.ascontiguousarray(img[:h_pix, :w_pix, :])
