"""moeup: upcycle independently trained dense transformer experts into a
sparse Mixture-of-Experts whose routers are solved in closed form from
streamed ridge-regression statistics, with a baseline ladder for comparison."""

from .corpus import (
    Batch,
    DomainCorpus,
    TokenSequence,
    detokenize,
    gen_synthetic_domain,
    ingest_text_file,
    interleave_batches,
    make_batches,
    make_domain_suite,
    tokenize_bytes,
)
from .counters import CostCounters
from .errors import (
    ConfigError,
    DivergenceError,
    MissingArtifactError,
    MoeupError,
    NotPositiveDefiniteError,
    NumericalError,
)
from .eval_harness import (
    EvalReport,
    LadderSpec,
    Suite,
    default_ladder_spec,
    dense_grid,
    eval_perplexity,
    normalized_score,
    routing_accuracy,
    run_ladder,
    run_sweep,
    train_suite,
)
from .model import (
    ForwardTrace,
    ModelConfig,
    ModelParams,
    desk_config,
    forward,
    init_params,
    lm_loss,
    load_checkpoint,
    save_checkpoint,
)
from .moerging import (
    MoEModel,
    RoutingPolicy,
    RoutingRecord,
    assemble_moe,
    average_all_params,
    average_trunk,
    count_active_params,
    load_moe_checkpoint,
    moe_forward,
    save_moe_checkpoint,
)
from .numerics import matmul, softmax, solve_spd
from .ridge_router import (
    RidgeStats,
    RouterSolution,
    accumulate,
    add_domain,
    fit_routers_pipeline,
    load_stats,
    merge_stats,
    new_stats,
    normalize_solution,
    save_stats,
    solve_routers,
)
from .trainer import (
    OptimizerState,
    TrainConfig,
    backward,
    finetune_routers,
    lr_at,
    train,
)

__version__ = "0.1.0"
