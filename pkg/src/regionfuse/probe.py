"""Capture and aggregation of word-to-latent cross-attention maps.

A probe passively copies the per-word softmax weights out of each
cross-attention layer during a denoiser pass. Capture never feeds back into
the forward computation, so latents with and without a probe attached are
bit-identical.

A probe can also carry an injected fixture: a callable ``(layer, t) -> maps``
whose tensors are recorded verbatim in place of the measured ones. Synthetic
fixtures are how segmentation and adapter behavior are tested, since an
untrained denoiser's attention does not localize semantically.
"""

from dataclasses import dataclass, field

import numpy as np

from .backend import bilinear_resize
from .errors import EmptyRecords, EmptySpan, EmptyWindow, ProbeDisabled


@dataclass(frozen=True)
class LayerAttentionRecord:
    """Per-word attention maps of one cross-attention layer at one timestep."""

    layer: int
    timestep: int
    maps: np.ndarray  # (n_words, h_k, w_k), softmax slices in [0, 1]

    @property
    def resolution(self):
        return self.maps.shape[1], self.maps.shape[2]


@dataclass(frozen=True)
class WordAttentionMap:
    """A single spatial attention map for one word index or region label."""

    key: object  # 1-indexed word position (int) or region label (str)
    values: np.ndarray  # (h, w)
    timesteps: tuple = ()


class AttentionProbe:
    """Collects LayerAttentionRecords emitted by the denoiser."""

    def __init__(self, enabled: bool = True, fixture=None):
        self.enabled = enabled
        self.fixture = fixture
        self._records = []

    def capture(self, layer: int, timestep: int, maps: np.ndarray):
        if not self.enabled:
            return
        if self.fixture is not None:
            maps = np.asarray(self.fixture(layer, timestep))  # recorded verbatim
        else:
            maps = np.array(maps, copy=True)
        self._records.append(LayerAttentionRecord(layer=layer, timestep=timestep, maps=maps))

    @property
    def records(self):
        if not self.enabled:
            raise ProbeDisabled("probe was constructed with enabled=False")
        return list(self._records)

    def records_at(self, timestep: int):
        return [r for r in self.records if r.timestep == timestep]


def record_layer_attention(engine, z, t, ctx, fixture=None):
    """Run one denoiser forward with a fresh probe and return its records."""
    probe = AttentionProbe(fixture=fixture)
    engine.denoise(z, t, ctx, probe=probe)
    return probe.records


def normalize_map(values: np.ndarray) -> np.ndarray:
    """Min-max normalize to [0, 1]; a constant map maps to all zeros (0/0 -> 0)."""
    values = np.asarray(values, dtype=np.float64)
    lo = values.min()
    hi = values.max()
    if hi == lo:
        return np.zeros_like(values)
    return (values - lo) / (hi - lo)


def aggregate_layers(records, word: int, out_shape) -> WordAttentionMap:
    """Sum one word's maps over layers after resizing each to out_shape.

    Records are summed in sorted (timestep, layer) order regardless of input
    order, so the result is exactly permutation-invariant.
    """
    records = sorted(records, key=lambda r: (r.timestep, r.layer))
    if not records:
        raise EmptyRecords("no attention records to aggregate")
    out_h, out_w = out_shape
    total = np.zeros((out_h, out_w), dtype=np.float64)
    steps = set()
    for rec in records:
        if word < 1 or word > rec.maps.shape[0]:
            raise IndexError(f"word {word} outside record of {rec.maps.shape[0]} words")
        total += bilinear_resize(rec.maps[word - 1], out_h, out_w)
        steps.add(rec.timestep)
    return WordAttentionMap(key=word, values=total, timesteps=tuple(sorted(steps)))


def aggregate_region(word_maps, span, label=None) -> WordAttentionMap:
    """Pointwise maximum of the word maps inside the inclusive span."""
    begin, end = span
    if begin > end:
        raise EmptySpan(f"span [{begin}, {end}] is empty")
    selected = sorted((m for m in word_maps if begin <= m.key <= end), key=lambda m: m.key)
    if not selected:
        raise EmptySpan(f"no word maps inside span [{begin}, {end}]")
    have = {m.key for m in selected}
    missing = [i for i in range(begin, end + 1) if i not in have]
    if missing:
        raise ValueError(f"span words {missing} have no attention map")
    values = selected[0].values.copy()
    steps = set(selected[0].timesteps)
    for m in selected[1:]:
        if m.values.shape != values.shape:
            raise ValueError("word maps in one span must share a resolution")
        np.maximum(values, m.values, out=values)
        steps.update(m.timesteps)
    return WordAttentionMap(key=label if label is not None else span,
                            values=values, timesteps=tuple(sorted(steps)))


def aggregate_timesteps(maps, window, key=None) -> WordAttentionMap:
    """Arithmetic mean of maps whose timestep falls inside [t_lo, t_hi]."""
    t_lo, t_hi = window
    picked = [m for m in maps if m.timesteps and t_lo <= m.timesteps[0] <= t_hi]
    if not picked:
        raise EmptyWindow(f"no maps inside timestep window [{t_lo}, {t_hi}]")
    picked.sort(key=lambda m: m.timesteps[0])
    total = np.zeros_like(picked[0].values)
    steps = set()
    for m in picked:
        total += m.values
        steps.update(m.timesteps)
    return WordAttentionMap(key=key if key is not None else picked[0].key,
                            values=total / len(picked), timesteps=tuple(sorted(steps)))
