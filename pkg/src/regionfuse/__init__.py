"""regionfuse: prompt-guided region segmentation and region-level
image-prompt adapter fusion on a small deterministic latent-diffusion engine.
"""

from .adapters import (RegionAdapterOutput, RegionMask, binarize_mask,
                       fuse_region_outputs, masked_region_attention,
                       region_embedding, soft_region_attention)
from .backend import BACKEND
from .engine import (AdapterBundle, AdapterEntry, AttentionWeights, Conditioning,
                     DiffusionEngine, FusionTrace, LatentImage, NoiseSchedule,
                     UNetConfig, cfg_combine, cross_attention,
                     decoupled_cross_attention, encode_reference_features,
                     forward_noise, latent_decode, latent_encode)
from .pipeline import (AblationEntry, GenerationArtifacts, GenerationRequest,
                       LayoutResult, ablate_regions, generate_multi,
                       generate_single, generate_text_only, generate_whole_image,
                       layout_pass, make_engine, mask_iou, toy_alignment_scores,
                       toy_image_score, toy_text_score)
from .probe import (AttentionProbe, LayerAttentionRecord, WordAttentionMap,
                    aggregate_layers, aggregate_region, aggregate_timesteps,
                    normalize_map, record_layer_attention)
from .segmentation import RegionBox, RegionCrop, segment_reference, threshold_box
from .text import (PromptSpec, RegionPrompt, TokenSequence, encode_tokens,
                   parse_region_prompts, tokenize)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
