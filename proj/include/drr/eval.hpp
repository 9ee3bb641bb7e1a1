#pragma once

// Metrics, the peak-picking + LDA comparison pipeline, fold construction, and
// the nested inter-lab cross-validation orchestrator.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "drr/cohort.hpp"
#include "drr/training.hpp"
#include "drr/types.hpp"

namespace drr {

// mean of the per-class true rates; throws unless both classes appear in truth.
double balanced_accuracy(std::span<const int> predicted, std::span<const int> truth);

// Majority vote per patient; exact ties go to class 0. Returns (patient, label)
// pairs sorted by patient id.
std::vector<std::pair<std::string, int>> patient_aggregate(
    std::span<const std::string> patient_ids, std::span<const int> predictions);

// Mann-Whitney formulation: P(random positive outranks random negative), ties
// counted half. Throws when only one class is present.
double auroc(std::span<const double> values, std::span<const int> labels);

// Indices of the k most discriminative bins. two_sided ranks by |AUROC - 0.5|
// (keeps bins discriminative in either direction), otherwise by raw AUROC.
// Ties resolve to the lower bin index.
std::vector<int> pick_peaks_auroc(const Matrix& features, std::span<const int> labels, int k,
                                  bool two_sided = true);

// Linear discriminant analysis with shrinkage: pooled covariance blended with
// a trace-scaled identity, class priors from training frequencies.
struct LdaModel {
  Matrix means;       // classes x k
  Matrix icov;        // inverse shrunk pooled covariance
  Vector log_priors;  // length classes
};
LdaModel lda_fit(const Matrix& features, std::span<const int> labels, double shrinkage = 0.1);
int lda_predict(const LdaModel& model, const Vector& x);

// Seeded shuffle + round-robin; group sizes differ by at most one.
std::vector<std::vector<std::string>> make_folds(std::vector<std::string> patients, int folds,
                                                 uint64_t seed);

// Picks the next-higher grid value above the best validation score (ties
// toward the larger value); the grid maximum stays put.
double select_lambda(std::span<const double> grid_ascending, std::span<const double> scores);

// Picks the next-lower peak count below the best score (ties toward the
// smaller value); the grid minimum stays put.
int select_k(std::span<const int> grid_ascending, std::span<const double> scores);

enum class Method { DrrNN, PlainNN, RocLda };
const char* method_name(Method m);
Method method_from_name(const std::string& name);

enum class LambdaSelection { NextHighest, LogMeanRange };

struct CvConfig {
  Method method = Method::PlainNN;
  std::vector<double> lambda_grid = {1e-4, 3.1622776601683794e-4, 1e-3, 3.1622776601683794e-3};
  std::vector<int> k_grid;  // defaults to 16 log-spaced values in [5, 200]
  int outer_folds = 5;
  int inner_folds = 5;
  uint64_t seed = 1;
  TrainConfig train;  // lambdas overridden per grid point / method
  int workers = 1;
  bool one_sided_auroc = false;
  LambdaSelection lambda_selection = LambdaSelection::NextHighest;
  bool relevance_diagnostics = true;  // mean maps, cosine, sparsity per outer fold
  std::optional<std::filesystem::path> checkpoint_dir;  // save final fold models
  std::optional<std::filesystem::path> relevance_dir;   // export per-fold relevance CSVs

  CvConfig();
};

CvConfig load_cv_config(const std::filesystem::path& path);

struct InnerResult {
  int inner_fold = 0;
  double grid_value = 0.0;  // lambda, or k for the peak-picking pipeline
  double score = 0.0;       // spot balanced accuracy on the validation fold
};

struct RelevanceDiagnostics {
  // per class: mean map over the training split and the cross-lab test split
  std::vector<double> cosine_train_test;  // length classes
  std::vector<double> sparsity_train;     // tau = 0.01
  std::vector<double> sparsity_test;
  double mean_cosine = 0.0;
  double mean_sparsity_test = 0.0;
};

struct OuterFoldReport {
  std::string train_lab;
  std::string test_lab;
  int fold = 0;
  double chosen_lambda = 0.0;  // tuned NN runs
  int chosen_k = 0;            // peak-picking runs
  std::vector<InnerResult> inner;
  std::vector<std::string> train_patients;
  std::vector<std::string> test_patients;
  std::optional<RelevanceDiagnostics> relevance;
};

struct SpotPrediction {
  std::string sample_id;
  std::string patient_id;
  std::string train_lab;
  int fold = 0;
  int predicted = 0;
  int truth = 0;
};

struct CvReport {
  Method method = Method::PlainNN;
  std::vector<OuterFoldReport> folds;
  std::vector<SpotPrediction> predictions;  // pooled over labs and folds
  double spot_balacc = 0.0;
  double patient_balacc = 0.0;
  int64_t model_count = 0;
  uint64_t seed = 0;
};

// labs * outer * inner * grid + labs * outer for tuned methods,
// labs * outer otherwise.
int64_t expected_model_count(int labs, int outer, int inner, int grid, bool tuned);

// Trains on one lab's patient folds and tests on the other lab's spectra of
// the held-out patients, tuning on an inner intra-lab CV where the method
// calls for it. Throws unless the cohort has exactly two labs with both
// classes in each.
CvReport nested_cv(const Cohort& cohort, const CvConfig& cfg);

// Asserts the no-leakage contract over a finished report; throws on violation.
void check_no_leakage(const CvReport& report, const Cohort& cohort);

// report.json, predictions.csv, summary.csv under dir.
void write_cv_report(const CvReport& report, const std::filesystem::path& dir);

}  // namespace drr
