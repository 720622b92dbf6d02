"""A small deterministic latent-diffusion engine.

The denoiser is a fixed two-resolution network with four text cross-attention
layers, seeded random weights, and no training: the point is mechanism
correctness, not image quality. Two structural properties are load-bearing
and deliberately preserved by the architecture:

* Everything outside cross-attention is per-position or aligned to 2x2
  blocks (channel MLPs, block-mean downsample, nearest upsample). Spatial
  information therefore never crosses a 2x2-block boundary, which is what
  makes region-masked adapter influence provably local.
* Adapter branches short-circuit when their scale is zero or their
  contribution is exactly zero, so adapter-off runs are bit-identical to
  plain text-conditioned runs.

Sampler (normative): with cumulative signal levels a_t (strictly decreasing,
a_0 = 1), noise prediction e at step t, and seeded per-step noise n:

    x0_hat = (z_t - sqrt(1 - a_t) * e) / sqrt(a_t)
    sigma  = sqrt((1 - a_{t-1}) / (1 - a_t)) * sqrt(1 - a_t / a_{t-1})
    z_{t-1} = sqrt(a_{t-1}) * x0_hat
              + sqrt(max(1 - a_{t-1} - sigma^2, 0)) * e
              + sigma * n

This is the ancestral (eta = 1) member of the Euler-style family; the final
step has sigma = 0 and returns x0_hat exactly. All randomness comes from
generators derived with seeding.derive_rng, so runs are reproducible bit
for bit.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .backend import bilinear_resize, block_mean, softmax_attention
from .errors import (DegenerateRegion, MissingRegionFeatures, NotDivisible,
                     ShapeMismatch)
from .seeding import derive_rng, derive_seed
from .text import LABEL_ORDER, TEXT_DIM

IMG_DIM = 32
TIME_DIM = 8
FEATURE_GRID = 4  # reference crops are resampled to FEATURE_GRID^2 patch tokens

# layer index -> (downsampling factor relative to the latent, width group)
_LAYER_FACTOR = {1: 1, 2: 1, 3: 2, 4: 2}


# ---------------------------------------------------------------------------
# schedules and latents
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NoiseSchedule:
    """Cumulative signal levels a_t for t = 0..T, a_0 = 1, strictly decreasing."""

    alpha_bar: np.ndarray

    def __post_init__(self):
        ab = np.asarray(self.alpha_bar, dtype=np.float64)
        object.__setattr__(self, "alpha_bar", ab)
        if ab.ndim != 1 or ab.shape[0] < 2:
            raise ValueError("schedule needs entries for t = 0..T with T >= 1")
        if ab[0] != 1.0:
            raise ValueError("alpha_bar[0] must be exactly 1.0")
        if np.any(ab <= 0.0) or np.any(ab > 1.0):
            raise ValueError("alpha_bar entries must lie in (0, 1]")
        if np.any(np.diff(ab) >= 0.0):
            raise ValueError("alpha_bar must be strictly decreasing")

    @property
    def T(self) -> int:
        return self.alpha_bar.shape[0] - 1

    @classmethod
    def cosine(cls, steps: int, s: float = 0.008, floor: float = 1e-4):
        """Squared-cosine schedule with a geometric floor.

        The floor term floor**(t/T) is itself strictly decreasing, so taking
        the elementwise maximum keeps the schedule strictly decreasing while
        bounding a_T away from zero.
        """
        if steps < 1:
            raise ValueError("steps must be >= 1")
        t = np.arange(steps + 1, dtype=np.float64)
        theta = (t / steps + s) / (1.0 + s) * (math.pi / 2.0)
        raw = np.cos(theta) ** 2
        ab = np.maximum(raw / raw[0], floor ** (t / steps))
        ab[0] = 1.0
        return cls(alpha_bar=ab)


@dataclass(frozen=True)
class LatentImage:
    """A spatial latent tensor (channels, height, width) at a timestep."""

    values: np.ndarray
    timestep: int = 0

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "values", v)
        if v.ndim != 3:
            raise ValueError("latent must be (channels, height, width)")
        _, h, w = v.shape
        # denoiser-grade geometry (sides >= 4, even) is enforced by UNetConfig
        # and the denoise shape check; the codec allows smaller latents
        if h < 1 or w < 1:
            raise ValueError("latent sides must be >= 1")
        if not np.all(np.isfinite(v)):
            raise ValueError("latent holds non-finite values")

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    @property
    def height(self) -> int:
        return self.values.shape[1]

    @property
    def width(self) -> int:
        return self.values.shape[2]


def _values_of(z):
    return z.values if isinstance(z, LatentImage) else np.asarray(z, dtype=np.float64)


def forward_noise(z0, t: int, schedule: NoiseSchedule, eps) -> "LatentImage | np.ndarray":
    """Mix clean latent and noise: sqrt(a_t) * z0 + sqrt(1 - a_t) * eps.

    t = 0 is an exact identity (a_0 == 1). Accepts a LatentImage or a bare
    array and returns the same kind.
    """
    values = _values_of(z0)
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != values.shape:
        raise ShapeMismatch(f"noise {eps.shape} vs latent {values.shape}")
    if not 0 <= t <= schedule.T:
        raise ValueError(f"timestep {t} outside schedule 0..{schedule.T}")
    if t == 0:
        mixed = values.copy()
    else:
        ab = schedule.alpha_bar[t]
        mixed = math.sqrt(ab) * values + math.sqrt(1.0 - ab) * eps
    if isinstance(z0, LatentImage):
        return LatentImage(values=mixed, timestep=t)
    return mixed


# ---------------------------------------------------------------------------
# attention weights, adapter bundles, conditioning
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AttentionWeights:
    """Projections of one text cross-attention layer."""

    layer: int
    wq: np.ndarray  # (width, d)
    wk: np.ndarray  # (TEXT_DIM, d)
    wv: np.ndarray  # (TEXT_DIM, width)

    @property
    def d(self) -> int:
        return self.wq.shape[1]


@dataclass(frozen=True)
class AdapterEntry:
    """Feature tokens plus per-layer key/value projections for one region.

    key is (character_index, label); label None marks a whole-image adapter.
    """

    key: tuple
    features: np.ndarray  # (tokens, IMG_DIM)
    key_projs: dict  # layer -> (IMG_DIM, d)
    value_projs: dict  # layer -> (IMG_DIM, width)

    @property
    def label(self):
        return self.key

    def key_proj(self, layer: int) -> np.ndarray:
        return self.key_projs[layer]

    def value_proj(self, layer: int) -> np.ndarray:
        return self.value_projs[layer]


def _entry_sort_key(entry: AdapterEntry):
    char, label = entry.key
    return (char, LABEL_ORDER.get(label, 8), str(label))


@dataclass(frozen=True)
class AdapterBundle:
    """All region adapters of a request plus the shared fusion scale."""

    entries: tuple
    scale: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "entries",
                           tuple(sorted(self.entries, key=_entry_sort_key)))
        if not math.isfinite(self.scale) or self.scale < 0:
            raise ValueError("adapter scale must be finite and >= 0")

    def entry(self, key) -> AdapterEntry:
        for e in self.entries:
            if e.key == key:
                return e
        raise MissingRegionFeatures(f"no adapter entry for region {key!r}")


@dataclass
class Conditioning:
    """Everything the denoiser is conditioned on during one sampling run."""

    text: np.ndarray  # (n_tokens, TEXT_DIM)
    bundle: AdapterBundle | None = None
    region_weightings: dict | None = None  # (char, label) -> (H, W) map
    cfg_scale: float = 7.0
    _factor_cache: dict = field(default_factory=dict, repr=False)

    def weightings_at(self, factor: int):
        """Region weightings downscaled to a layer's resolution (cached)."""
        if self.region_weightings is None:
            return None
        if factor not in self._factor_cache:
            if factor == 1:
                maps = {k: np.asarray(v, dtype=np.float64)
                        for k, v in self.region_weightings.items()}
            else:
                maps = {k: block_mean(v, factor)
                        for k, v in self.region_weightings.items()}
            self._factor_cache[factor] = maps
        return self._factor_cache[factor]


class FusionTrace:
    """Copies of post-fusion latents per (timestep, layer), for diagnostics."""

    def __init__(self):
        self.records = []  # (timestep, layer, values (h_k, w_k, width))

    def capture(self, t: int, layer: int, x: np.ndarray, hw):
        h_k, w_k = hw
        self.records.append((t, layer, x.reshape(h_k, w_k, -1).copy()))

    def at(self, t: int, layer: int) -> np.ndarray:
        for rt, rl, values in self.records:
            if rt == t and rl == layer:
                return values
        raise KeyError((t, layer))


# ---------------------------------------------------------------------------
# attention operations
# ---------------------------------------------------------------------------

def cross_attention(z_tokens, text_matrix, weights: AttentionWeights) -> np.ndarray:
    """Text cross-attention output for a matrix of latent tokens."""
    out, _ = _text_attention(z_tokens, text_matrix, weights)
    return out


def _text_attention(z_tokens, text_matrix, weights):
    z_tokens = np.asarray(z_tokens, dtype=np.float64)
    text_matrix = np.asarray(text_matrix, dtype=np.float64)
    if z_tokens.ndim != 2 or z_tokens.shape[1] != weights.wq.shape[0]:
        raise ShapeMismatch(f"latent tokens {z_tokens.shape} vs wq {weights.wq.shape}")
    if text_matrix.ndim != 2 or text_matrix.shape[1] != weights.wk.shape[0]:
        raise ShapeMismatch(f"text {text_matrix.shape} vs wk {weights.wk.shape}")
    q = z_tokens @ weights.wq
    k = text_matrix @ weights.wk
    v = text_matrix @ weights.wv
    return softmax_attention(q, k, v)


def adapter_contribution(z_tokens, weights: AttentionWeights, bundle: AdapterBundle,
                         region_attn=None):
    """Summed adapter term of one layer, before scaling, or None if no entries.

    With region_attn (a dict of per-region masked weighting maps at this
    layer's resolution) each labeled entry contributes its spatial weighting
    times its pooled value-projected features. Whole-image entries (label
    None) always attend over their feature tokens with the layer's queries,
    with or without region maps; labeled entries without a map are an error.
    """
    if bundle is None or not bundle.entries:
        return None
    from .adapters import region_embedding  # local import avoids a cycle

    z_tokens = np.asarray(z_tokens, dtype=np.float64)
    if region_attn is not None:
        for key in region_attn:
            bundle.entry(key)  # raises MissingRegionFeatures when absent
    total = None
    for entry in bundle.entries:
        if entry.key[1] is None:
            q = z_tokens @ weights.wq
            k = entry.features @ entry.key_proj(weights.layer)
            v = entry.features @ entry.value_proj(weights.layer)
            term, _ = softmax_attention(q, k, v)
        else:
            if region_attn is None or entry.key not in region_attn:
                raise MissingRegionFeatures(
                    f"region entry {entry.key!r} requires a weighting map")
            weighting = region_attn[entry.key]
            if weighting.shape[0] * weighting.shape[1] != z_tokens.shape[0]:
                raise ShapeMismatch(
                    f"weighting {weighting.shape} does not cover {z_tokens.shape[0]} tokens")
            emb = region_embedding(weighting, entry, weights.layer)
            term = emb.values.reshape(-1, emb.values.shape[-1])
        total = term if total is None else total + term
    return total


def decoupled_cross_attention(z_tokens, text_matrix, weights: AttentionWeights,
                              bundle: AdapterBundle | None = None,
                              region_attn=None) -> np.ndarray:
    """Text attention plus the scaled adapter branch.

    Reduces bit-exactly to cross_attention when the bundle is absent, its
    scale is zero, or the adapter contribution is exactly zero.
    """
    out, _ = _text_attention(z_tokens, text_matrix, weights)
    if bundle is None or bundle.scale == 0.0 or not bundle.entries:
        return out
    contrib = adapter_contribution(z_tokens, weights, bundle, region_attn)
    if contrib is None or not contrib.any():
        return out
    return out + bundle.scale * contrib


def cfg_combine(uncond_pred, cond_pred, scale: float) -> np.ndarray:
    """Classifier-free guidance: uncond + scale * (cond - uncond).

    scale 1 returns the conditional prediction exactly and scale 0 the
    unconditional one, with no floating-point round trip.
    """
    uncond_pred = np.asarray(uncond_pred, dtype=np.float64)
    cond_pred = np.asarray(cond_pred, dtype=np.float64)
    if uncond_pred.shape != cond_pred.shape:
        raise ShapeMismatch(f"{uncond_pred.shape} vs {cond_pred.shape}")
    if scale == 1.0:
        return cond_pred.copy()
    if scale == 0.0:
        return uncond_pred.copy()
    return uncond_pred + scale * (cond_pred - uncond_pred)


# ---------------------------------------------------------------------------
# reference features and the pixel <-> latent stand-ins
# ---------------------------------------------------------------------------

def encode_reference_features(image, region, seed: int,
                              grid: int = FEATURE_GRID, dim: int = IMG_DIM) -> np.ndarray:
    """Crop, resample to a grid x grid patch grid, project patches to tokens.

    ``region`` uses 1-indexed inclusive coordinates in the image's own pixel
    grid. The projection is a seeded linear map without bias, so an all-zero
    crop yields all-zero tokens.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = image[:, :, None]
    h, w, c = image.shape
    x1, x2, y1, y2 = region.x1, region.x2, region.y1, region.y2
    if not (1 <= x1 <= x2 <= w and 1 <= y1 <= y2 <= h):
        raise DegenerateRegion(f"box x[{x1},{x2}] y[{y1},{y2}] outside {w}x{h} image")
    crop = image[y1 - 1:y2, x1 - 1:x2, :]
    patches = np.stack([bilinear_resize(crop[:, :, ch], grid, grid) for ch in range(c)],
                       axis=-1)
    tokens = patches.reshape(grid * grid, c)
    proj = derive_rng("reffeat", seed).standard_normal((c, dim)) / math.sqrt(c)
    return tokens @ proj


def latent_encode(image, factor: int) -> LatentImage:
    """Blockwise-mean downsample of an (H, W, C) image into a latent."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = image[:, :, None]
    h, w, c = image.shape
    if h % factor or w % factor:
        raise NotDivisible(f"{h}x{w} image not divisible by patch factor {factor}")
    pooled = image.reshape(h // factor, factor, w // factor, factor, c).mean(axis=(1, 3))
    return LatentImage(values=np.moveaxis(pooled, -1, 0), timestep=0)


def latent_decode(z, factor: int) -> np.ndarray:
    """Nearest-neighbor upsample of a latent back to (H, W, C) pixels."""
    values = _values_of(z)
    img = np.moveaxis(values, 0, -1)
    return np.repeat(np.repeat(img, factor, axis=0), factor, axis=1)


# ---------------------------------------------------------------------------
# the denoiser
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class UNetConfig:
    """Fixed denoiser geometry; weights are a pure function of seed."""

    height: int = 64
    width: int = 64
    latent_channels: int = 3
    base_width: int = 8
    mid_width: int = 16
    attn_dim: int = 16
    seed: int = 1234

    def __post_init__(self):
        if self.height < 4 or self.width < 4:
            raise ValueError("latent sides must be >= 4")
        if self.height % 2 or self.width % 2:
            raise ValueError("latent sides must be even for the 2x down level")

    @property
    def num_attention_layers(self) -> int:
        return len(_LAYER_FACTOR)


def _time_features(t: int) -> np.ndarray:
    half = TIME_DIM // 2
    freqs = np.exp(-np.log(200.0) * np.arange(half) / (half - 1))
    ang = t * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)])


class DiffusionEngine:
    """Denoiser weights plus sampling; immutable after construction."""

    def __init__(self, config: UNetConfig | None = None):
        self.config = config or UNetConfig()
        cfg = self.config
        widths = {1: cfg.base_width, 2: cfg.base_width, 3: cfg.mid_width, 4: cfg.mid_width}
        self._layer_width = widths
        init = self._init_weight
        self.attention = {
            k: AttentionWeights(
                layer=k,
                wq=init(f"attn{k}.wq", (widths[k], cfg.attn_dim), widths[k]),
                wk=init(f"attn{k}.wk", (TEXT_DIM, cfg.attn_dim), TEXT_DIM),
                wv=init(f"attn{k}.wv", (TEXT_DIM, widths[k]), TEXT_DIM),
            )
            for k in _LAYER_FACTOR
        }
        c_in, base, mid = cfg.latent_channels, cfg.base_width, cfg.mid_width
        self.w_in = init("stem.w", (c_in, base), c_in)
        self.b_in = init("stem.b", (base,), 100)
        self.w_time_a = init("time.a", (TIME_DIM, base), TIME_DIM)
        self.w_time_b = init("time.b", (TIME_DIM, mid), TIME_DIM)
        self.mlp_a = (init("mlp_a.w1", (base, 2 * base), base),
                      init("mlp_a.b1", (2 * base,), 100),
                      init("mlp_a.w2", (2 * base, base), 2 * base))
        self.mlp_b = (init("mlp_b.w1", (mid, 2 * mid), mid),
                      init("mlp_b.b1", (2 * mid,), 100),
                      init("mlp_b.w2", (2 * mid, mid), 2 * mid))
        self.w_down = init("down.w", (base, mid), base)
        self.w_up = init("up.w", (mid, base), mid)
        self.w_out = init("head.w", (base, c_in), base)
        self._adapter_proj_cache = {}

    def _init_weight(self, name: str, shape, fan_in: int) -> np.ndarray:
        rng = derive_rng("unet", self.config.seed, name)
        return rng.standard_normal(shape) / math.sqrt(fan_in)

    # -- adapter projection family -----------------------------------------

    def adapter_projections(self, label, layer: int):
        """Seeded (key, value) projections shared per (label, layer).

        Characters reuse one projection family per region label; only their
        features and weighting maps distinguish them.
        """
        cache_key = (label, layer)
        if cache_key not in self._adapter_proj_cache:
            name = "image" if label is None else str(label)
            wk = derive_rng("adapter", self.config.seed, name, layer, "key") \
                .standard_normal((IMG_DIM, self.config.attn_dim)) / math.sqrt(IMG_DIM)
            wv = derive_rng("adapter", self.config.seed, name, layer, "value") \
                .standard_normal((IMG_DIM, self._layer_width[layer])) / math.sqrt(IMG_DIM)
            self._adapter_proj_cache[cache_key] = (wk, wv)
        return self._adapter_proj_cache[cache_key]

    def build_bundle(self, features: dict, scale: float = 1.0) -> AdapterBundle:
        """Wrap per-region feature tokens with this engine's projections.

        features maps (character_index, label) -> (tokens, IMG_DIM) arrays;
        label None selects the whole-image adapter family.
        """
        entries = []
        for key, feats in features.items():
            char, label = key
            feats = np.asarray(feats, dtype=np.float64)
            if feats.ndim != 2 or feats.shape[1] != IMG_DIM:
                raise ShapeMismatch(f"features for {key!r} must be (tokens, {IMG_DIM})")
            key_projs = {}
            value_projs = {}
            for layer in _LAYER_FACTOR:
                wk, wv = self.adapter_projections(label, layer)
                key_projs[layer] = wk
                value_projs[layer] = wv
            entries.append(AdapterEntry(key=(char, label), features=feats,
                                        key_projs=key_projs, value_projs=value_projs))
        return AdapterBundle(entries=tuple(entries), scale=scale)

    # -- forward pass --------------------------------------------------------

    def _attn_block(self, layer: int, x: np.ndarray, hw, ctx: Conditioning,
                    probe, trace, t: int) -> np.ndarray:
        weights = self.attention[layer]
        out, attn_w = _text_attention(x, ctx.text, weights)
        dec = out
        if ctx.bundle is not None and ctx.bundle.scale != 0.0 and ctx.bundle.entries:
            region_attn = ctx.weightings_at(_LAYER_FACTOR[layer])
            contrib = adapter_contribution(x, weights, ctx.bundle, region_attn)
            if contrib is not None and contrib.any():
                dec = out + ctx.bundle.scale * contrib
        x_new = x + dec
        if probe is not None:
            h_k, w_k = hw
            probe.capture(layer, t, np.ascontiguousarray(attn_w.T).reshape(-1, h_k, w_k))
        if trace is not None:
            trace.capture(t, layer, x_new, hw)
        return x_new

    @staticmethod
    def _mlp(x: np.ndarray, params) -> np.ndarray:
        w1, b1, w2 = params
        return x + np.tanh(x @ w1 + b1) @ w2

    def denoise(self, z, t: int, ctx: Conditioning, probe=None, trace=None) -> np.ndarray:
        """One noise-prediction forward pass (no guidance)."""
        values = _values_of(z)
        c, h, w = values.shape
        if (h, w) != (self.config.height, self.config.width):
            raise ShapeMismatch(f"latent {h}x{w} vs engine {self.config.height}x{self.config.width}")
        temb = _time_features(t)
        x = values.reshape(c, h * w).T @ self.w_in + self.b_in + temb @ self.w_time_a
        x = self._attn_block(1, x, (h, w), ctx, probe, trace, t)
        x = self._mlp(x, self.mlp_a)
        x = self._attn_block(2, x, (h, w), ctx, probe, trace, t)
        skip = x
        h2, w2 = h // 2, w // 2
        grid = x.reshape(h2, 2, w2, 2, -1).mean(axis=(1, 3))
        xd = grid.reshape(h2 * w2, -1) @ self.w_down + temb @ self.w_time_b
        xd = self._attn_block(3, xd, (h2, w2), ctx, probe, trace, t)
        xd = self._mlp(xd, self.mlp_b)
        xd = self._attn_block(4, xd, (h2, w2), ctx, probe, trace, t)
        up = np.repeat(np.repeat(xd.reshape(h2, w2, -1), 2, axis=0), 2, axis=1)
        x = skip + up.reshape(h * w, -1) @ self.w_up
        eps = x @ self.w_out
        return np.ascontiguousarray(eps.T).reshape(c, h, w)

    def predict(self, z, t: int, ctx: Conditioning, probe=None, trace=None) -> np.ndarray:
        """Guided noise prediction; only the conditional pass is probed/traced."""
        uncond = Conditioning(text=np.zeros((1, TEXT_DIM)), bundle=None,
                              cfg_scale=ctx.cfg_scale)
        eps_u = self.denoise(z, t, uncond)
        eps_c = self.denoise(z, t, ctx, probe=probe, trace=trace)
        return cfg_combine(eps_u, eps_c, ctx.cfg_scale)

    # -- sampling --------------------------------------------------------------

    def sample(self, ctx: Conditioning, steps: int, seed: int, *,
               init: LatentImage | None = None, probe=None, trace=None,
               predictor=None) -> LatentImage:
        """Ancestral denoising from t = steps down to 0 (see module docstring).

        ``predictor`` overrides the guided noise prediction (diagnostics and
        closed-form tests); everything else, including the per-step ancestral
        noise, derives from (seed, step) alone.
        """
        schedule = NoiseSchedule.cosine(steps)
        cfg = self.config
        rng = derive_rng("sample", seed)
        if init is not None:
            z = init.values.copy()
        else:
            z = rng.standard_normal((cfg.latent_channels, cfg.height, cfg.width))
        ab = schedule.alpha_bar
        for t in range(steps, 0, -1):
            if predictor is not None:
                eps = predictor(z, t)
            else:
                eps = self.predict(z, t, ctx, probe=probe, trace=trace)
            a_t, a_p = ab[t], ab[t - 1]
            x0_hat = (z - math.sqrt(1.0 - a_t) * eps) / math.sqrt(a_t)
            sigma = math.sqrt((1.0 - a_p) / (1.0 - a_t)) * math.sqrt(max(1.0 - a_t / a_p, 0.0))
            direction = math.sqrt(max(1.0 - a_p - sigma * sigma, 0.0))
            z = math.sqrt(a_p) * x0_hat + direction * eps
            if sigma > 0.0:
                z = z + sigma * rng.standard_normal(z.shape)
        return LatentImage(values=z, timestep=0)
