//! Max-entropy reinforcement learning over per-horizon softmax policies.
//!
//! The library trains an extended policy — one softmax policy per lookahead
//! depth — with nested policy-gradient updates, provides an exact
//! soft-Bellman dynamic-programming oracle on finite MDPs, and checks
//! trained policies against that oracle with spectral optimality
//! certificates.

pub mod certify;
pub mod env;
pub mod error;
pub mod experiment;
pub mod instances;
pub mod mdp;
pub mod neural;
pub mod policy;
pub mod softdp;
pub mod train;

pub use certify::{
    certify, compute_d_map, orthogonality_residuals, random_feature_kernel, truncated_kernel,
    CertificateReport, DMap, GramSpectrum, LAMBDA_CUT_REL,
};
pub use env::{
    bandit_env, frozen_lake_4x4, frozen_lake_8x8, frozenlake_as_mdp, parse_layout, BanditEnv,
    CartPole, CartPoleState, Environment, FrozenLakeSpec, Shaping,
};
pub use error::{MpgError, Result};
pub use experiment::{
    aggregate, agents_csv, evaluate_cartpole, evaluate_frozenlake, evaluate_frozenlake_neural,
    gradient_fd_max_rel_err,
    load_checkpoint, markdown_report, pin_policy_to_tables, results_csv, rows_from_results_csv,
    run_experiment, run_seed, save_checkpoint, train_neural_policy, unbiasedness_check,
    verify_suite, verify_suite_injected, write_outputs, AgentRecord, EnvKind, EvalOutcome,
    ExperimentSpec, LoadedPolicy, ModelKind, NeuralSettings, ParamCell, ResultRow, VerifyCheck,
    VerifyLevel,
    VerifyReport,
};
pub use mdp::{
    propagate, sample_trajectory, sample_trajectory_with, FiniteMdp, StateDistribution, Trajectory,
};
pub use neural::{
    neural_sampled_update, ntk_gram, HorizonEncoding, Mlp, NeuralPolicy, NtkGram,
};
pub use policy::{ExtendedPolicy, FeatureKind, FeatureMap, PolicyTable, SoftmaxPolicy};
pub use train::{
    decay_schedule, mpg_ideal_update, mpg_multi_update, mpg_sampled_update, train, train_from,
    TrainConfig, TrainLog, UpdateRecord, UpdateVariant,
};
pub use softdp::{
    evaluate_policy, objective, solve_infinite_discounted, solve_optimal, truncate_policy,
    truncate_solution, value_gap, PolicyEvaluation, SoftDpSolution, ValueGap,
};
