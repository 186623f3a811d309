"""Tagged personalized reasoning: rewards, a user-conditioned reward model,
sequence-level policy optimization on a toy policy, and a data pipeline."""

from .tags import TagRegistry, parse_chain, validate, tag_histogram
from .rewards import RewardContext, RewardWeights, RepetitionConfig, score_response
from .env import EnvConfig, SynthEnv
from .config import RunConfig, desk_config, load_config

__all__ = [
    "TagRegistry", "parse_chain", "validate", "tag_histogram",
    "RewardContext", "RewardWeights", "RepetitionConfig", "score_response",
    "EnvConfig", "SynthEnv", "RunConfig", "desk_config", "load_config",
]

__version__ = "0.1.0"
