"""RL-driven selection of feature-pyramid scales for dense correspondence matching."""

from .env import (
    EnvConfig,
    EnvState,
    EpisodeTrace,
    MatchingEnv,
    SubsetScorer,
    Transition,
    beam_search_baseline,
    exhaustive_oracle,
    random_selection_eval,
    score,
)
from .hough import (
    Correlation,
    DenseFlow,
    MatchResult,
    OffsetBinGrid,
    build_hyperimage,
    compute_correlation,
    dense_flow,
    hough_vote,
    match_pair,
    reweight,
    transfer_keypoints,
)
from .metrics import MaskMetrics, PckResult, mask_metrics, pck, warp_mask
from .pyramid import (
    FeatureMap,
    FeaturePyramid,
    ImagePair,
    KeypointSet,
    LevelSpec,
    SyntheticSpec,
    Warp,
    concat_channels,
    gen_synthetic_pair,
    load_pyramid,
    save_pyramid,
    upsample,
)
from .qnet import (
    NetConfig,
    Observation,
    QNetwork,
    QOutput,
    backward,
    dueling_combine,
    encode,
    forward,
    init_network,
    load_checkpoint,
    save_checkpoint,
    soft_update,
)
from .trainer import (
    ReplayBuffer,
    TrainerConfig,
    optimizer_step,
    rollout,
    target_double,
    target_retrace,
    target_standard,
    td_loss,
    train,
)

__version__ = "0.1.0"
