#pragma once

// Training objective and loop: class-weighted negative log-likelihood plus an
// elastic penalty on the relevance map, optimized with Adam. The penalty term
// contains an input gradient, so its parameter gradient is obtained by
// differentiating through the first reverse pass (double backprop).

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "drr/attribution.hpp"
#include "drr/model.hpp"
#include "drr/types.hpp"

namespace drr {

struct TrainConfig {
  double lambda1 = 0.0;  // weight of ||rho||_1
  double lambda2 = 0.0;  // weight of ||rho||_2^2
  double lr = 1e-3;
  int epochs = 30;
  int batch_size = 32;
  uint64_t seed = 0;
  ScoreMode score_mode = ScoreMode::Logit;
  bool class_weights = true;
  double weight_decay = 0.0;  // decoupled L2 step on the parameters; 0 disables
  std::optional<Vector> penalty_mask;  // nonnegative, length n; scales rho inside the penalty

  bool penalized() const { return lambda1 > 0.0 || lambda2 > 0.0; }
};

// Reads keys lambda1, lambda2, lr, epochs, batch_size, seed, score_mode,
// class_weights, weight_decay, penalty_mask_path from a JSON file. Missing
// keys keep their defaults; unknown keys are rejected.
TrainConfig load_train_config(const std::filesystem::path& path);
TrainConfig train_config_from_json_text(const std::string& json_text);
std::string train_config_to_json(const TrainConfig& cfg);

struct EpochStats {
  double total = 0.0;
  double nll = 0.0;
  double l1 = 0.0;  // lambda1 * ||rho||_1 term
  double l2 = 0.0;  // lambda2 * ||rho||_2^2 term
};

struct TrainReport {
  std::vector<EpochStats> epochs;
  double wall_seconds = 0.0;
  uint64_t seed = 0;
  int64_t nll_clamp_events = 0;  // times a class probability underflowed the 1e-12 floor
};

struct Example {
  const Spectrum* x = nullptr;
  int y = 0;
};

// Stream tag of the epoch-shuffle substream; fixed so that the training
// trajectory is reproducible from the seed alone.
inline constexpr uint64_t kShuffleStreamTag = 0x7368756666ULL;

// w_y = N / (C * N_y); throws when a class is absent.
Vector class_weight_vector(std::span<const int> labels, int classes);

// -log(max(p_y, 1e-12))
double nll_loss(const Vector& p, int y);

// lambda1 * ||mask.rho||_1 + lambda2 * ||mask.rho||_2^2 (mask = 1 if null).
double drr_penalty(const Vector& rho, double lambda1, double lambda2,
                   const Vector* mask = nullptr);

// The batch objective as tape nodes. total = nll_term + l1_term + l2_term,
// each already scaled by 1/batch. When both lambdas are zero no relevance or
// penalty nodes are recorded at all.
struct BatchObjective {
  ad::NodeId total = ad::kNoNode;
  ad::NodeId nll_term = ad::kNoNode;
  ad::NodeId l1_term = ad::kNoNode;
  ad::NodeId l2_term = ad::kNoNode;
  ModelLeaves leaves;
  int64_t nll_clamp_events = 0;
};

BatchObjective total_objective(ad::Tape& tape, const ModelParams& model,
                               std::span<const Example> batch, const TrainConfig& cfg,
                               const Vector& class_w);

// Standard Adam (beta1 .9, beta2 .999, eps 1e-8, bias correction).
struct AdamState {
  std::vector<Array> m;
  std::vector<Array> v;
  int64_t t = 0;
};

void adam_step(std::vector<Array*> params, const std::vector<const Array*>& grads,
               AdamState& state, double lr);

// Seeded-shuffle mini-batch training of the full objective. Throws
// NumericError with context on divergence or non-finite gradients.
std::pair<ModelParams, TrainReport> train(const ModelParams& init,
                                          std::span<const Example> data, const TrainConfig& cfg);

}  // namespace drr
