#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "off2on/agents.hpp"
#include "off2on/config.hpp"
#include "off2on/dataset.hpp"
#include "off2on/density_ratio.hpp"
#include "off2on/env.hpp"
#include "off2on/metrics.hpp"
#include "off2on/replay.hpp"

namespace off2on {

struct EvalResult {
    double mean = 0.0;
    double stddev = 0.0;  // population std; 0 for a single episode
};

/// Undiscounted return statistics of a deterministic policy over fresh
/// episodes.
EvalResult evaluate_policy(PointMassEnv& env, const std::function<Vector(const Vector&)>& policy,
                           int episodes, Rng& rng);

/// Return of a uniform-random policy (the normalization anchor).
EvalResult evaluate_random_policy(PointMassEnv& env, int episodes, Rng& rng);

/// Area under the ROC curve of `scores_real` vs `scores_fake` via the
/// rank-statistic formula with tie correction.
double auroc_from_scores(const std::vector<double>& scores_real,
                         const std::vector<double>& scores_fake);

/// Q-discriminativeness probe: each real (state, action) pair is contrasted
/// with `fake_per_real` uniform actions at the same state; the given scorer
/// (typically the ensemble Q) ranks real against fake.
double auroc_analysis(const std::function<Vector(const Matrix&, const Matrix&)>& scorer,
                      const Matrix& states, const Matrix& seen_actions, int fake_per_real,
                      Rng& rng);

// ---------------------------------------------------------------------------
// Behavior-policy training (dataset generation support)
// ---------------------------------------------------------------------------

/// Trains a single SAC agent online from scratch, snapshotting the policy at
/// every evaluation point, and selects the expert (best return) and medium
/// (first snapshot inside the normalized-score band) checkpoints.
BehaviorArtifacts train_behavior_policies(const RunConfig& cfg, long seed);

// ---------------------------------------------------------------------------
// Offline phase
// ---------------------------------------------------------------------------

/// Trains `cfg.ensemble_size` independent conservative agents on the dataset
/// (each member has its own init and minibatch stream; members may train on
/// parallel workers) and assembles them into one ensemble agent.
EnsembleAgent train_offline_ensemble(const RunConfig& cfg, const Dataset& dataset, long seed,
                                     int n_threads = 1);

/// Policy-evaluation Q-function of a frozen policy, trained from a fresh
/// random init on the dataset.
nn::MlpNetwork train_fqe(const nn::MlpNetwork& frozen_policy, const Dataset& dataset,
                         const RunConfig& cfg, Rng rng);

/// Replaces every member's critics (and targets) with freshly FQE-trained
/// evaluation Q-functions of that member's policy.
void apply_fqe_init(EnsembleAgent& ensemble, const Dataset& dataset, const RunConfig& cfg,
                    long seed, int n_threads = 1);

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

/// Agent bundle: every member network plus temperatures, the density-ratio
/// estimator when present, and the resolved config of the producing run.
struct CheckpointBundle {
    std::string config_json;
    EnsembleAgent ensemble;
    std::optional<DensityRatioEstimator> estimator;
};

void save_checkpoint(const CheckpointBundle& bundle, const std::filesystem::path& path);
CheckpointBundle load_checkpoint(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Online fine-tuning
// ---------------------------------------------------------------------------

struct FinetuneResult {
    std::vector<MetricsRecord> records;
    double final_return = 0.0;
    double start_return = 0.0;  // offline evaluation point (step 0)
};

/// Online fine-tuning loop: one collected transition per iteration, one
/// density-ratio update and one ensemble update per collected transition
/// (plus warmup_multiplier x 1000 extra updates once the first 1000
/// transitions are in), sampling per cfg.strategy; priorities of sampled
/// transitions are rewritten to self-normalized density ratios. Evaluation
/// runs every cfg.eval_interval steps with the deterministic mean action.
///
/// cfg.objective = "cql_reg" keeps the conservative critic term during
/// fine-tuning. On non-finite losses a diagnostic checkpoint is written to
/// <run_dir>/checkpoints/abort.ckpt and the error is rethrown.
FinetuneResult finetune_online(const RunConfig& cfg, EnsembleAgent& ensemble,
                               const Dataset& offline_data, long seed,
                               const std::filesystem::path& run_dir, int n_threads = 1);

/// CQL-regularized variant of the fine-tuning loop (objective forced to
/// cql_reg; everything else identical).
FinetuneResult finetune_cql_regularized(const RunConfig& cfg, EnsembleAgent& ensemble,
                                        const Dataset& offline_data, long seed,
                                        const std::filesystem::path& run_dir, int n_threads = 1);

// ---------------------------------------------------------------------------
// Aggregation
// ---------------------------------------------------------------------------

/// Aggregates per-seed metrics streams into a mean/std curve CSV (one row per
/// step present in any run).
void analyze_runs(const std::vector<std::filesystem::path>& run_dirs,
                  const std::filesystem::path& report_csv);

}  // namespace off2on
