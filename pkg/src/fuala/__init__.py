"""Deterministic federated-learning simulator for horizontally partitioned
clinical-style data.

The package implements FUALA (generalization-weighted client sampling via
permutation-based cross-evaluation, model averaging, and final-round head
ensembling) alongside FedAvg, weighted FedAvg, and centralized baselines,
with a synthetic non-i.i.d. cohort generator, exact ranking metrics, a typed
in-memory transport with a privacy audit, and a CLI experiment harness.
"""

from .data import (
    Encounter,
    FeatureVector,
    HospitalDataset,
    PatientRecord,
    featurize,
    featurize_all,
    load_cohort,
    pooled_records,
    save_cohort,
    split_hospitals,
)
from .ensemble import (
    DEFAULT_AGE_BINS,
    EnsembleModel,
    UncertaintyReport,
    build_report,
    ensemble_from_result,
    ensemble_predict,
    ensemble_scores,
    final_prediction,
    group_uncertainty,
    vote_counts,
)
from .errors import (
    FualaError,
    NumericalError,
    SingleClassError,
    TransportError,
    ValidationError,
)
from .experiment import (
    ExperimentConfig,
    cmd_evaluate,
    cmd_generate,
    cmd_report,
    cmd_train,
    cmd_uncertainty,
    derive_seed,
)
from .federation import (
    AlgorithmKind,
    FederationConfig,
    FederatorState,
    HospitalNode,
    RoundArtifacts,
    TrainedResult,
    aggregate_mean,
    aggregate_weighted,
    initial_state,
    local_seed,
    make_derangement,
    make_permutation,
    run_round_fuala,
    run_training,
    select_fraction,
    update_sampling_weights,
)
from .learner import (
    Arch,
    Body,
    Head,
    LearnerConfig,
    ModelParams,
    flat_vector_as_params,
    init_model,
    load_model,
    loss,
    loss_gradient,
    params_as_flat_vector,
    predict_proba,
    predict_with_head,
    save_model,
    train_epochs,
)
from .metrics import ScoredSet, auprc, auroc, generalization_score, scored_set
from .synth import SynthConfig, cohort_stats, generate_cohort, mean_pairwise_tv
from .transport import Bus, Message, TransportLog, audit_privacy

__version__ = "0.1.0"
