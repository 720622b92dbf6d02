"""Flat key-value prompt configuration.

Format: one ``key = value`` per line, ``#`` starts a comment, a bare
``[character]`` line opens the next character block. The prompt is shared
by all characters; each character block names the sub-prompts of its
regions, which must occur verbatim (as word sequences) inside the prompt.

    prompt = a boy standing in a library, wearing green jacket and blue pants
    steps = 20
    cfg_scale = 7
    mask_mode = soft

    [character]
    face = a boy
    upper = green jacket
    lower = blue pants

Missing parameters take the documented defaults (steps 20, cfg_scale 7,
adapter_scale 1, gamma1/gamma2 0.8, mask_mode soft, seed 0, latent 64,
patch_factor 4). Region sub-prompts are located by their first contiguous
match in the prompt.
"""

from dataclasses import dataclass

import numpy as np

from .errors import UsageError
from .pipeline import DEFAULT_ENGINE_SEED, GenerationRequest
from .text import parse_region_prompts

_TOP_DEFAULTS = {
    "steps": 20,
    "cfg_scale": 7.0,
    "adapter_scale": 1.0,
    "gamma1": 0.8,
    "gamma2": 0.8,
    "mask_mode": "soft",
    "seed": 0,
    "latent": 64,
    "patch_factor": 4,
    "engine_seed": DEFAULT_ENGINE_SEED,
}
_INT_KEYS = {"steps", "seed", "latent", "patch_factor", "engine_seed"}
_FLOAT_KEYS = {"cfg_scale", "adapter_scale", "gamma1", "gamma2"}
_CHAR_KEYS = ("face", "upper", "lower")


@dataclass(frozen=True)
class PromptConfig:
    prompt: str
    characters: tuple  # tuple of dicts: label -> sub-prompt
    params: dict


def parse_prompt_config(source: str) -> PromptConfig:
    """Parse config text; raises UsageError on anything malformed."""
    params = dict(_TOP_DEFAULTS)
    prompt = None
    characters = []
    current = None  # None = top-level section
    for lineno, raw in enumerate(source.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line == "[character]":
            current = {}
            characters.append(current)
            continue
        if "=" not in line:
            raise UsageError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if current is None:
            if key == "prompt":
                prompt = value
            elif key in _INT_KEYS:
                try:
                    params[key] = int(value)
                except ValueError:
                    raise UsageError(f"line {lineno}: {key} wants an integer") from None
            elif key in _FLOAT_KEYS:
                try:
                    params[key] = float(value)
                except ValueError:
                    raise UsageError(f"line {lineno}: {key} wants a number") from None
            elif key == "mask_mode":
                if value not in ("hard", "soft"):
                    raise UsageError(f"line {lineno}: mask_mode must be hard or soft")
                params[key] = value
            else:
                raise UsageError(f"line {lineno}: unknown key {key!r}")
        else:
            if key not in _CHAR_KEYS:
                raise UsageError(f"line {lineno}: unknown region key {key!r} "
                                 f"(expected one of {_CHAR_KEYS})")
            if key in current:
                raise UsageError(f"line {lineno}: duplicate region {key!r}")
            current[key] = value
    if prompt is None:
        raise UsageError("config is missing the 'prompt' key")
    if not characters:
        raise UsageError("config declares no [character] block")
    for i, char in enumerate(characters, start=1):
        if not char:
            raise UsageError(f"character {i} declares no regions")
    return PromptConfig(prompt=prompt, characters=tuple(characters), params=params)


def load_prompt_config(path) -> PromptConfig:
    with open(path, "r", encoding="utf-8") as f:
        return parse_prompt_config(f.read())


def specs_from_config(config: PromptConfig) -> tuple:
    """One PromptSpec per character block, spans located in the shared prompt."""
    specs = []
    for j, char in enumerate(config.characters, start=1):
        annotations = [(label, char[label]) for label in _CHAR_KEYS if label in char]
        specs.append(parse_region_prompts(config.prompt, annotations, character_index=j))
    return tuple(specs)


def build_request(config: PromptConfig, references, seed=None, **overrides) -> GenerationRequest:
    """Turn a parsed config plus reference images into a GenerationRequest."""
    references = [np.asarray(r, dtype=np.float64) for r in references]
    if len(references) != len(config.characters):
        raise UsageError(f"config declares {len(config.characters)} character(s) "
                         f"but {len(references)} reference(s) were given")
    specs = specs_from_config(config)
    p = config.params
    request = GenerationRequest(
        specs=specs, references=tuple(references),
        steps=p["steps"], cfg_scale=p["cfg_scale"], adapter_scale=p["adapter_scale"],
        gamma1=p["gamma1"], gamma2=p["gamma2"], mask_mode=p["mask_mode"],
        seed=p["seed"] if seed is None else seed,
        latent_size=p["latent"], patch_factor=p["patch_factor"],
        engine_seed=p["engine_seed"], **overrides)
    return request


def resolved_params_line(request: GenerationRequest) -> str:
    """One log line with every resolved parameter, for reproducibility."""
    return ("params: steps=%d cfg_scale=%g adapter_scale=%g gamma1=%g gamma2=%g "
            "mask_mode=%s seed=%d latent=%d patch_factor=%d engine_seed=%d "
            "characters=%d" % (
                request.steps, request.cfg_scale, request.adapter_scale,
                request.gamma1, request.gamma2, request.mask_mode, request.seed,
                request.latent_size, request.patch_factor, request.engine_seed,
                request.num_characters))
