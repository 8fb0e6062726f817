"""Diffusion-based synthesis and evaluation of mixed-type longitudinal tables."""

from .schema import (
    BINARY,
    CATEGORICAL,
    NUMERIC,
    DatasetSchema,
    EpisodeBatch,
    SchemaError,
    TableFormatError,
    VariableSpec,
    decode,
    encode,
    encode_rows,
    infer_lengths,
    load_csv,
    load_fixture,
    save_csv,
    validate_table,
)
from .diffusion import (
    NoiseSchedule,
    PosteriorParams,
    build_schedule,
    one_step_reconstruct,
    posterior_params,
    q_sample,
    reverse_step,
    sample_episodes,
)
from .denoiser import (
    DenoiserConfig,
    DenoisingUnet,
    default_seq_lengths,
    load_checkpoint,
    save_checkpoint,
    sinusoidal_embed,
)
from .training import (
    LossRecord,
    RandomProjection,
    TrainConfig,
    TrainingDiverged,
    draw_projection,
    noise_loss,
    recon_loss_1,
    recon_loss_2,
    train,
    write_loss_log,
)
from .synthesizer import DiffusionSynthesizer
from .fidelity import (
    CascadeResult,
    KlResult,
    TestResult,
    f_test,
    kl_divergence,
    kl_table,
    ks_test,
    run_cascade,
    t_test,
    three_sigma_test,
)
from .structure import (
    CorrelationBundle,
    CoverageResult,
    DecomposedSeries,
    LogClusterResult,
    category_coverage,
    correlation_bundle,
    decompose,
    demographic_coverage,
    dynamic_correlations,
    kendall_tau,
    log_cluster_u,
    log_cluster_value,
    static_correlations,
)
from .privacy import RISK_THRESHOLD, RiskReport, disclosure_risk, min_euclidean_distance
from .rl import (
    ActionSpace,
    BcqPolicy,
    MdpDataset,
    action_heatmap,
    action_space,
    band_reward,
    bcq_train,
    build_mdp,
    build_states,
    compare_policies,
    cross_decompose,
)
from .toydata import generate_toy_table, toy_schema

__version__ = "0.1.0"
