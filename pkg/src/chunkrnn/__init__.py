"""Temporal-chunking RNN experiment platform.

A community-structured token environment, truncated-BPTT recurrent learners,
an offline sleep phase that discovers context tags from hidden-state
dynamics, a two-layer chunked model, a transfer harness, and the analysis /
export tooling around them.
"""

__version__ = "0.1.0"

from .environment import (  # noqa: F401
    EnvConfig,
    EnvState,
    Environment,
    direction_rule,
    full_environment,
    generate,
    next_token,
    oracle_distribution,
    restricted_environment,
    theoretical_ceiling,
)
from .nn import RnnLayerParams, OutputHead, TrainConfig, grad_check  # noqa: F401
from .naive import NaiveModel, RunMetrics, build_naive_model, train_online  # noqa: F401
from .chunking import ContextTagger, ReplayBuffer, TagStream, detect_peaks  # noqa: F401
from .chunked import ChunkedModel, PhaseSchedule, build_chunked_model, transfer  # noqa: F401
from .analysis import classical_mds, community_separation, knee  # noqa: F401
