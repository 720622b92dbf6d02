import numpy as np
import pytest

from regionfuse.backend import warm_up
from regionfuse.fixtures import toy_reference
from regionfuse.pipeline import GenerationRequest
from regionfuse.text import parse_region_prompts

FULL_PROMPT = "a boy standing in a library, wearing green jacket and blue pants"
ANNOTATIONS = [("face", "a boy"), ("upper", "green jacket"), ("lower", "blue pants")]


@pytest.fixture(scope="session", autouse=True)
def _warm_kernels():
    # compile numba kernels once so timed tests measure steady-state behavior
    warm_up()


@pytest.fixture()
def rng():
    return np.random.default_rng(20240811)


@pytest.fixture()
def boy_spec():
    return parse_region_prompts(FULL_PROMPT, ANNOTATIONS)


def small_request(seed=0, latent=16, factor=2, steps=6, **kw):
    """A cheap single-character request for unit tests."""
    spec = parse_region_prompts(FULL_PROMPT, ANNOTATIONS,
                                character_index=kw.pop("character_index", 1))
    ref = toy_reference(latent * factor, latent * factor, seed=seed + 100)
    return GenerationRequest(specs=(spec,), references=(ref,), steps=steps,
                             latent_size=latent, patch_factor=factor, seed=seed, **kw)
