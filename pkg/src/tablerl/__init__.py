"""tablerl: training orchestration and inference-time answer selection for
table-reasoning RL, verifiable at desk scale against built-in oracles."""

__version__ = "0.1.0"

from .answers import NormalizationPolicy, match_answers, normalize_answer, parse_output, self_verify
from .curriculum import (
    Bucket,
    CurriculumState,
    PassAtKConfig,
    TrainerConfig,
    partition,
    pass_at_k,
    route_sample,
    stage1_run,
    stage2_init,
    stage2_run,
    stage2_step,
)
from .grpo import (
    AdvantageSpec,
    ClipBounds,
    group_advantages,
    grpo_gradient,
    grpo_objective,
    sgd_step,
    token_ratios,
)
from .policy import TabularPolicy
from .reward import RewardWeights, score, score_batch
from .types import (
    GroupRollout,
    ParsedAnswer,
    RewardBreakdown,
    Table,
    TableSample,
    TokenStats,
    Trajectory,
    validate_trajectory,
)
from .uncertainty import (
    FusionReport,
    FusionWeights,
    avg_entropy,
    avg_logprob,
    calibrate_weights,
    confidence,
    fuse_select,
    majority_select,
)
