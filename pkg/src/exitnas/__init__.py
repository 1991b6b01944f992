"""Multi-objective architecture search for early-exit convolutional networks."""

from .genome import (
    Genome,
    SearchSpace,
    ThresholdVector,
    crossover,
    decode,
    encode,
    genome_from_dict,
    genome_id,
    genome_to_dict,
    mutate,
    sample_exit_layers,
    sample_genome,
    validate,
)
from .macmodel import (
    BACKBONE_MODE,
    EXIT_MODE,
    LayerSpec,
    MacProfile,
    average_macs,
    layer_macs,
    profile,
)
from .exitsim import EvalTrace, PolicyResult, assign_exits, read_trace, score_margin, write_trace
from .tuner import TuneOutcome, TunerConfig, objective, tune
from .surrogate import SurrogateHyper, SurrogatePair, fit, predict
from .oracle import (
    EvaluatorRequest,
    ExternalEvaluator,
    SyntheticEvaluator,
    SyntheticOracleParams,
    external_evaluate,
    synthetic_evaluate,
)
from .search import (
    ArchiveEntry,
    ObjectiveVector,
    SearchConfig,
    SearchResult,
    macs_error,
    nondominated_sort,
    objectives,
    run_search,
    select_candidates,
)
from .config import EngineConfig, load_config

__version__ = "0.1.0"
