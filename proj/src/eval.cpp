#include "drr/eval.hpp"

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <functional>
#include <json.hpp>
#include <limits>
#include <map>
#include <mutex>
#include <numeric>
#include <set>
#include <thread>

#include "drr/attribution.hpp"
#include "drr/errors.hpp"
#include "drr/io.hpp"
#include "drr/rng.hpp"

namespace drr {

double balanced_accuracy(std::span<const int> predicted, std::span<const int> truth) {
  if (predicted.size() != truth.size())
    throw ShapeError("balanced_accuracy: prediction/truth length mismatch");
  if (truth.empty()) throw DataError("balanced_accuracy: empty inputs");
  std::map<int, std::pair<int64_t, int64_t>> per_class;  // class -> (correct, total)
  for (size_t i = 0; i < truth.size(); ++i) {
    auto& [correct, total] = per_class[truth[i]];
    ++total;
    if (predicted[i] == truth[i]) ++correct;
  }
  if (per_class.size() < 2)
    throw DataError("balanced_accuracy: only one class present in the truth labels");
  double acc = 0.0;
  for (const auto& [cls, ct] : per_class)
    acc += static_cast<double>(ct.first) / static_cast<double>(ct.second);
  return acc / static_cast<double>(per_class.size());
}

std::vector<std::pair<std::string, int>> patient_aggregate(
    std::span<const std::string> patient_ids, std::span<const int> predictions) {
  if (patient_ids.size() != predictions.size())
    throw ShapeError("patient_aggregate: id/prediction length mismatch");
  std::map<std::string, std::map<int, int>> votes;
  for (size_t i = 0; i < patient_ids.size(); ++i) ++votes[patient_ids[i]][predictions[i]];
  std::vector<std::pair<std::string, int>> out;
  out.reserve(votes.size());
  for (const auto& [patient, counts] : votes) {
    int best_label = 0;
    int best_count = -1;
    for (const auto& [label, count] : counts) {
      if (count > best_count) {  // map order: ties keep the lowest label
        best_count = count;
        best_label = label;
      }
    }
    out.emplace_back(patient, best_label);
  }
  return out;
}

double auroc(std::span<const double> values, std::span<const int> labels) {
  if (values.size() != labels.size()) throw ShapeError("auroc: value/label length mismatch");
  int64_t n_pos = 0, n_neg = 0;
  for (int y : labels) {
    if (y == 1) ++n_pos;
    else if (y == 0) ++n_neg;
    else throw DataError("auroc: labels must be 0 or 1");
  }
  if (n_pos == 0 || n_neg == 0) throw DataError("auroc: both classes must be present");

  std::vector<size_t> order(values.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](size_t a, size_t b) { return values[a] < values[b]; });

  // rank-sum with average ranks over tie groups
  double rank_sum_pos = 0.0;
  size_t i = 0;
  while (i < order.size()) {
    size_t j = i;
    while (j < order.size() && values[order[j]] == values[order[i]]) ++j;
    const double avg_rank = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j));
    for (size_t k = i; k < j; ++k)
      if (labels[order[k]] == 1) rank_sum_pos += avg_rank;
    i = j;
  }
  const double u = rank_sum_pos - 0.5 * static_cast<double>(n_pos) * (n_pos + 1);
  return u / (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

std::vector<int> pick_peaks_auroc(const Matrix& features, std::span<const int> labels, int k,
                                  bool two_sided) {
  const int n = static_cast<int>(features.cols());
  if (static_cast<size_t>(features.rows()) != labels.size())
    throw ShapeError("pick_peaks_auroc: feature/label row mismatch");
  if (k < 1 || k > n)
    throw ConfigError("pick_peaks_auroc: k = " + std::to_string(k) + " outside [1, " +
                      std::to_string(n) + "]");
  std::vector<double> score(static_cast<size_t>(n));
  std::vector<double> col(static_cast<size_t>(features.rows()));
  for (int b = 0; b < n; ++b) {
    for (Eigen::Index r = 0; r < features.rows(); ++r) col[static_cast<size_t>(r)] = features(r, b);
    const double a = auroc(col, labels);
    score[static_cast<size_t>(b)] = two_sided ? std::abs(a - 0.5) : a;
  }
  std::vector<int> idx(static_cast<size_t>(n));
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) {
    return score[static_cast<size_t>(a)] > score[static_cast<size_t>(b)];
  });
  idx.resize(static_cast<size_t>(k));
  return idx;
}

LdaModel lda_fit(const Matrix& features, std::span<const int> labels, double shrinkage) {
  const Eigen::Index n = features.rows();
  const Eigen::Index k = features.cols();
  if (static_cast<size_t>(n) != labels.size()) throw ShapeError("lda_fit: row/label mismatch");
  if (k < 1) throw ShapeError("lda_fit: empty feature matrix");
  int classes = 0;
  for (int y : labels) {
    if (y < 0) throw DataError("lda_fit: negative label");
    classes = std::max(classes, y + 1);
  }
  if (classes < 2) throw DataError("lda_fit: needs at least two classes");
  Vector counts = Vector::Zero(classes);
  for (int y : labels) counts(y) += 1.0;
  if ((counts.array() == 0.0).any()) throw DataError("lda_fit: a class has no samples");
  if (n <= classes) throw DataError("lda_fit: too few samples for a pooled covariance");

  LdaModel model;
  model.means = Matrix::Zero(classes, k);
  for (Eigen::Index i = 0; i < n; ++i) model.means.row(labels[i]) += features.row(i);
  for (int c = 0; c < classes; ++c) model.means.row(c) /= counts(c);

  Matrix cov = Matrix::Zero(k, k);
  for (Eigen::Index i = 0; i < n; ++i) {
    const Vector d = features.row(i).transpose() - model.means.row(labels[i]).transpose();
    cov.noalias() += d * d.transpose();
  }
  cov /= static_cast<double>(n - classes);
  const double tr_scale = cov.trace() / static_cast<double>(k);
  Matrix shrunk = (1.0 - shrinkage) * cov;
  shrunk.diagonal().array() += shrinkage * tr_scale;

  Eigen::LLT<Matrix> llt(shrunk);
  if (llt.info() != Eigen::Success)
    throw NumericError("lda_fit: covariance is singular even after shrinkage");
  model.icov = llt.solve(Matrix::Identity(k, k));

  model.log_priors = Vector(classes);
  for (int c = 0; c < classes; ++c)
    model.log_priors(c) = std::log(counts(c) / static_cast<double>(n));
  return model;
}

int lda_predict(const LdaModel& model, const Vector& x) {
  if (x.size() != model.means.cols()) throw ShapeError("lda_predict: feature length mismatch");
  int best = 0;
  double best_score = -std::numeric_limits<double>::infinity();
  for (int c = 0; c < model.means.rows(); ++c) {
    const Vector mu = model.means.row(c).transpose();
    const Vector im = model.icov * mu;
    const double score = x.dot(im) - 0.5 * mu.dot(im) + model.log_priors(c);
    if (score > best_score) {
      best_score = score;
      best = c;
    }
  }
  return best;
}

std::vector<std::vector<std::string>> make_folds(std::vector<std::string> patients, int folds,
                                                 uint64_t seed) {
  if (folds < 1) throw ConfigError("make_folds: folds must be positive");
  if (static_cast<int>(patients.size()) < folds)
    throw DataError("make_folds: " + std::to_string(patients.size()) +
                    " patients cannot fill " + std::to_string(folds) + " folds");
  Rng rng(seed);
  rng.shuffle(patients);
  std::vector<std::vector<std::string>> groups(static_cast<size_t>(folds));
  for (size_t i = 0; i < patients.size(); ++i)
    groups[i % static_cast<size_t>(folds)].push_back(patients[i]);
  return groups;
}

namespace {

// argmax over mean scores; tie_to_later picks the last maximal entry
size_t argmax_scores(std::span<const double> scores, bool tie_to_later) {
  size_t best = 0;
  for (size_t i = 1; i < scores.size(); ++i) {
    if (tie_to_later ? scores[i] >= scores[best] : scores[i] > scores[best]) best = i;
  }
  return best;
}

}  // namespace

double select_lambda(std::span<const double> grid_ascending, std::span<const double> scores) {
  if (grid_ascending.empty() || grid_ascending.size() != scores.size())
    throw ConfigError("select_lambda: grid/score size mismatch");
  const size_t best = argmax_scores(scores, /*tie_to_later=*/true);
  return grid_ascending[std::min(best + 1, grid_ascending.size() - 1)];
}

int select_k(std::span<const int> grid_ascending, std::span<const double> scores) {
  if (grid_ascending.empty() || grid_ascending.size() != scores.size())
    throw ConfigError("select_k: grid/score size mismatch");
  const size_t best = argmax_scores(scores, /*tie_to_later=*/false);
  return grid_ascending[best == 0 ? 0 : best - 1];
}

const char* method_name(Method m) {
  switch (m) {
    case Method::DrrNN: return "drr-nn";
    case Method::PlainNN: return "plain-nn";
    case Method::RocLda: return "roc-lda";
  }
  return "?";
}

Method method_from_name(const std::string& name) {
  if (name == "drr-nn") return Method::DrrNN;
  if (name == "plain-nn" || name == "unregularized-nn") return Method::PlainNN;
  if (name == "roc-lda") return Method::RocLda;
  throw ConfigError("unknown method '" + name + "' (expected drr-nn|plain-nn|roc-lda)");
}

CvConfig::CvConfig() {
  // 16 log-spaced peak counts in [5, 200]
  const double lo = std::log10(5.0), hi = std::log10(200.0);
  std::set<int> ks;
  for (int i = 0; i < 16; ++i)
    ks.insert(static_cast<int>(std::llround(std::pow(10.0, lo + (hi - lo) * i / 15.0))));
  k_grid.assign(ks.begin(), ks.end());
}

CvConfig load_cv_config(const std::filesystem::path& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(io::read_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("cv config " + path.string() + ": " + e.what());
  }
  CvConfig cfg;
  for (const auto& [key, value] : j.items()) {
    if (key == "method") cfg.method = method_from_name(value.get<std::string>());
    else if (key == "lambda_grid") cfg.lambda_grid = value.get<std::vector<double>>();
    else if (key == "k_grid") cfg.k_grid = value.get<std::vector<int>>();
    else if (key == "outer_folds") cfg.outer_folds = value.get<int>();
    else if (key == "inner_folds") cfg.inner_folds = value.get<int>();
    else if (key == "seed") cfg.seed = value.get<uint64_t>();
    else if (key == "workers") cfg.workers = value.get<int>();
    else if (key == "one_sided_auroc") cfg.one_sided_auroc = value.get<bool>();
    else if (key == "relevance_diagnostics") cfg.relevance_diagnostics = value.get<bool>();
    else if (key == "lambda_selection") {
      const std::string mode = value.get<std::string>();
      if (mode == "next_highest") cfg.lambda_selection = LambdaSelection::NextHighest;
      else if (mode == "log_mean_range") cfg.lambda_selection = LambdaSelection::LogMeanRange;
      else throw ConfigError("cv config: unknown lambda_selection '" + mode + "'");
    } else if (key == "train") {
      cfg.train = train_config_from_json_text(value.dump());
    } else {
      throw ConfigError("cv config " + path.string() + ": unknown key '" + key + "'");
    }
  }
  if (cfg.outer_folds < 2 || cfg.inner_folds < 2)
    throw ConfigError("cv config: outer_folds and inner_folds must be >= 2");
  if (!std::is_sorted(cfg.lambda_grid.begin(), cfg.lambda_grid.end()) ||
      !std::is_sorted(cfg.k_grid.begin(), cfg.k_grid.end()))
    throw ConfigError("cv config: grids must be ascending");
  if (cfg.workers < 1) throw ConfigError("cv config: workers must be >= 1");
  return cfg;
}

int64_t expected_model_count(int labs, int outer, int inner, int grid, bool tuned) {
  const int64_t finals = static_cast<int64_t>(labs) * outer;
  if (!tuned) return finals;
  return static_cast<int64_t>(labs) * outer * inner * grid + finals;
}

// --- nested cross-validation ------------------------------------------------

namespace {

void run_jobs(std::vector<std::function<void()>>& jobs, int workers) {
  if (workers <= 1 || jobs.size() <= 1) {
    for (auto& job : jobs) job();
    return;
  }
  std::atomic<size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mu;
  std::vector<std::thread> pool;
  const int count = std::min<int>(workers, static_cast<int>(jobs.size()));
  for (int w = 0; w < count; ++w) {
    pool.emplace_back([&] {
      while (true) {
        const size_t i = next.fetch_add(1);
        if (i >= jobs.size()) return;
        try {
          jobs[i]();
        } catch (...) {
          std::lock_guard<std::mutex> lock(error_mu);
          if (!error) error = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

std::vector<const CohortSample*> samples_of_patients(
    const std::vector<const CohortSample*>& pool, const std::set<std::string>& patients) {
  std::vector<const CohortSample*> out;
  for (const CohortSample* s : pool)
    if (patients.count(s->patient_id)) out.push_back(s);
  return out;
}

std::vector<Example> to_examples(const std::vector<const CohortSample*>& samples) {
  std::vector<Example> ex;
  ex.reserve(samples.size());
  for (const CohortSample* s : samples) ex.push_back({&s->spectrum, s->label});
  return ex;
}

double score_nn(const ModelParams& model, const std::vector<const CohortSample*>& samples) {
  std::vector<int> pred, truth;
  pred.reserve(samples.size());
  truth.reserve(samples.size());
  for (const CohortSample* s : samples) {
    pred.push_back(classify(model, s->spectrum));
    truth.push_back(s->label);
  }
  return balanced_accuracy(pred, truth);
}

Matrix feature_matrix(const std::vector<const CohortSample*>& samples) {
  if (samples.empty()) throw DataError("nested_cv: empty sample set");
  const Eigen::Index n = samples[0]->spectrum.intensities.size();
  Matrix x(static_cast<Eigen::Index>(samples.size()), n);
  for (size_t i = 0; i < samples.size(); ++i)
    x.row(static_cast<Eigen::Index>(i)) = samples[i]->spectrum.intensities.transpose();
  return x;
}

std::vector<int> label_vector(const std::vector<const CohortSample*>& samples) {
  std::vector<int> y(samples.size());
  for (size_t i = 0; i < samples.size(); ++i) y[i] = samples[i]->label;
  return y;
}

Matrix select_columns(const Matrix& x, const std::vector<int>& cols) {
  Matrix out(x.rows(), static_cast<Eigen::Index>(cols.size()));
  for (size_t c = 0; c < cols.size(); ++c) out.col(static_cast<Eigen::Index>(c)) = x.col(cols[c]);
  return out;
}

double select_lambda_log_mean(std::span<const double> grid, std::span<const double> scores) {
  // contiguous near-optimal range around the argmax, combined on the log scale
  const size_t best = argmax_scores(scores, true);
  const double tol = 0.01;
  size_t lo = best, hi = best;
  while (lo > 0 && scores[lo - 1] >= scores[best] - tol) --lo;
  while (hi + 1 < scores.size() && scores[hi + 1] >= scores[best] - tol) ++hi;
  const double target = 0.5 * (std::log10(grid[lo]) + std::log10(grid[hi]));
  size_t snapped = 0;
  double dist = std::numeric_limits<double>::infinity();
  for (size_t i = 0; i < grid.size(); ++i) {
    const double d = std::abs(std::log10(grid[i]) - target);
    if (d < dist) {
      dist = d;
      snapped = i;
    }
  }
  return grid[snapped];
}

ModelParams train_nn(const Cohort& cohort, const std::vector<const CohortSample*>& samples,
                     const TrainConfig& base, double lambda, uint64_t seed) {
  TrainConfig tc = base;
  tc.seed = seed;
  tc.lambda1 = lambda;
  tc.lambda2 = lambda;
  const ModelParams init =
      build_isotopenet_lite(cohort.n, 2, cohort.mz_step, mix_seed(seed, 0x1217));
  const std::vector<Example> ex = to_examples(samples);
  return train(init, ex, tc).first;
}

}  // namespace

CvReport nested_cv(const Cohort& cohort, const CvConfig& cfg) {
  const std::vector<std::string> labs = cohort.lab_ids();
  if (labs.size() != 2)
    throw DataError("nested_cv: expected exactly 2 labs, found " + std::to_string(labs.size()));
  for (const std::string& lab : labs) {
    std::set<int> classes;
    for (const CohortSample& s : cohort.samples)
      if (s.lab_id == lab) classes.insert(s.label);
    if (classes.size() < 2)
      throw DataError("nested_cv: lab " + lab + " does not contain both classes");
  }
  const bool tuned = cfg.method != Method::PlainNN;
  const int grid_size = cfg.method == Method::RocLda ? static_cast<int>(cfg.k_grid.size())
                                                     : static_cast<int>(cfg.lambda_grid.size());
  if (tuned && grid_size == 0) throw ConfigError("nested_cv: empty hyperparameter grid");

  CvReport report;
  report.method = cfg.method;
  report.seed = cfg.seed;

  struct FoldSetup {
    std::string train_lab, test_lab;
    int fold;
    std::vector<const CohortSample*> outer_train;   // train lab
    std::vector<const CohortSample*> test;          // other lab, held-out patients
    std::vector<std::string> train_patients, test_patients;
    // inner split, on the training lab only
    std::vector<std::vector<const CohortSample*>> inner_train, inner_val;
  };
  std::vector<FoldSetup> setups;

  for (size_t li = 0; li < labs.size(); ++li) {
    const std::string& lab = labs[li];
    const std::string& other = labs[1 - li];
    const std::vector<const CohortSample*> lab_pool = cohort.lab_samples(lab);
    const std::vector<const CohortSample*> other_pool = cohort.lab_samples(other);
    const std::vector<std::string> patients = cohort.patients_of_lab(lab);
    const auto outer_groups =
        make_folds(patients, cfg.outer_folds, mix_seed(cfg.seed, hash_str(lab)));

    for (int fold = 0; fold < cfg.outer_folds; ++fold) {
      FoldSetup fs;
      fs.train_lab = lab;
      fs.test_lab = other;
      fs.fold = fold;
      fs.test_patients = outer_groups[static_cast<size_t>(fold)];
      std::sort(fs.test_patients.begin(), fs.test_patients.end());
      const std::set<std::string> test_set(fs.test_patients.begin(), fs.test_patients.end());
      for (const std::string& p : patients)
        if (!test_set.count(p)) fs.train_patients.push_back(p);
      const std::set<std::string> train_set(fs.train_patients.begin(), fs.train_patients.end());

      fs.outer_train = samples_of_patients(lab_pool, train_set);
      fs.test = samples_of_patients(other_pool, test_set);

      if (tuned) {
        const auto inner_groups =
            make_folds(fs.train_patients, cfg.inner_folds,
                       mix_seed(mix_seed(cfg.seed, hash_str(lab)), 0x1000 + fold));
        for (int i = 0; i < cfg.inner_folds; ++i) {
          std::set<std::string> val_set(inner_groups[static_cast<size_t>(i)].begin(),
                                        inner_groups[static_cast<size_t>(i)].end());
          for (const std::string& p : val_set)
            if (!train_set.count(p))
              throw Error("nested_cv: internal fold bookkeeping error");
          std::set<std::string> tr_set;
          for (const std::string& p : fs.train_patients)
            if (!val_set.count(p)) tr_set.insert(p);
          fs.inner_train.push_back(samples_of_patients(lab_pool, tr_set));
          fs.inner_val.push_back(samples_of_patients(lab_pool, val_set));
        }
      }
      setups.push_back(std::move(fs));
    }
  }

  // --- stage 1: inner grid search ---------------------------------------------
  // scores[setup][grid] = mean validation balanced accuracy
  std::vector<std::vector<double>> mean_scores(setups.size(),
                                               std::vector<double>(std::max(grid_size, 1), 0.0));
  std::vector<std::vector<std::vector<InnerResult>>> inner_results(setups.size());
  int64_t model_count = 0;

  if (tuned) {
    for (auto& ir : inner_results)
      ir.resize(static_cast<size_t>(cfg.inner_folds));
    std::vector<std::function<void()>> jobs;
    if (cfg.method == Method::DrrNN) {
      for (size_t si = 0; si < setups.size(); ++si)
        for (int i = 0; i < cfg.inner_folds; ++i) {
          inner_results[si][static_cast<size_t>(i)].resize(static_cast<size_t>(grid_size));
          for (int g = 0; g < grid_size; ++g) {
            jobs.push_back([&, si, i, g] {
              const FoldSetup& fs = setups[si];
              const double lambda = cfg.lambda_grid[static_cast<size_t>(g)];
              const uint64_t seed = mix_seed(
                  mix_seed(mix_seed(cfg.seed, hash_str(fs.train_lab)),
                           0x100 * (fs.fold + 1) + static_cast<uint64_t>(i)),
                  static_cast<uint64_t>(g));
              const ModelParams model =
                  train_nn(cohort, fs.inner_train[static_cast<size_t>(i)], cfg.train, lambda, seed);
              const double score = score_nn(model, fs.inner_val[static_cast<size_t>(i)]);
              inner_results[si][static_cast<size_t>(i)][static_cast<size_t>(g)] = {
                  i, lambda, score};
            });
          }
        }
      model_count += static_cast<int64_t>(jobs.size());
    } else {  // RocLda: one job per inner fold, all k values inside
      for (size_t si = 0; si < setups.size(); ++si)
        for (int i = 0; i < cfg.inner_folds; ++i) {
          inner_results[si][static_cast<size_t>(i)].resize(static_cast<size_t>(grid_size));
          jobs.push_back([&, si, i] {
            const FoldSetup& fs = setups[si];
            const auto& tr = fs.inner_train[static_cast<size_t>(i)];
            const auto& val = fs.inner_val[static_cast<size_t>(i)];
            const Matrix x_tr = feature_matrix(tr);
            const std::vector<int> y_tr = label_vector(tr);
            const Matrix x_val = feature_matrix(val);
            const std::vector<int> y_val = label_vector(val);
            const std::vector<int> ranking =
                pick_peaks_auroc(x_tr, y_tr, static_cast<int>(x_tr.cols()), !cfg.one_sided_auroc);
            for (int g = 0; g < grid_size; ++g) {
              const int k = cfg.k_grid[static_cast<size_t>(g)];
              std::vector<int> bins(ranking.begin(), ranking.begin() + k);
              const LdaModel lda = lda_fit(select_columns(x_tr, bins), y_tr);
              std::vector<int> pred(val.size());
              Vector feat(static_cast<Eigen::Index>(bins.size()));
              for (size_t v = 0; v < val.size(); ++v) {
                for (size_t b = 0; b < bins.size(); ++b)
                  feat(static_cast<Eigen::Index>(b)) = x_val(static_cast<Eigen::Index>(v), bins[b]);
                pred[v] = lda_predict(lda, feat);
              }
              inner_results[si][static_cast<size_t>(i)][static_cast<size_t>(g)] = {
                  i, static_cast<double>(k), balanced_accuracy(pred, y_val)};
            }
          });
          model_count += grid_size;
        }
    }
    run_jobs(jobs, cfg.workers);
    for (size_t si = 0; si < setups.size(); ++si)
      for (int g = 0; g < grid_size; ++g) {
        double acc = 0.0;
        for (int i = 0; i < cfg.inner_folds; ++i)
          acc += inner_results[si][static_cast<size_t>(i)][static_cast<size_t>(g)].score;
        mean_scores[si][static_cast<size_t>(g)] = acc / cfg.inner_folds;
      }
  }

  // --- stage 2: final fold models + cross-lab predictions ----------------------
  report.folds.resize(setups.size());
  std::vector<std::vector<SpotPrediction>> fold_predictions(setups.size());
  std::vector<std::function<void()>> final_jobs;

  for (size_t si = 0; si < setups.size(); ++si) {
    final_jobs.push_back([&, si] {
      const FoldSetup& fs = setups[si];
      OuterFoldReport& fr = report.folds[si];
      fr.train_lab = fs.train_lab;
      fr.test_lab = fs.test_lab;
      fr.fold = fs.fold;
      fr.train_patients = fs.train_patients;
      fr.test_patients = fs.test_patients;
      for (const auto& per_fold : inner_results[si])
        fr.inner.insert(fr.inner.end(), per_fold.begin(), per_fold.end());

      const uint64_t seed =
          mix_seed(mix_seed(cfg.seed, hash_str(fs.train_lab)), 0xF17A1 + fs.fold);
      std::vector<int> pred;

      if (cfg.method == Method::RocLda) {
        std::vector<double> scores = mean_scores[si];
        fr.chosen_k = select_k(cfg.k_grid, scores);
        const Matrix x_tr = feature_matrix(fs.outer_train);
        const std::vector<int> y_tr = label_vector(fs.outer_train);
        const std::vector<int> ranking =
            pick_peaks_auroc(x_tr, y_tr, static_cast<int>(x_tr.cols()), !cfg.one_sided_auroc);
        std::vector<int> bins(ranking.begin(), ranking.begin() + fr.chosen_k);
        const LdaModel lda = lda_fit(select_columns(x_tr, bins), y_tr);
        for (const CohortSample* s : fs.test) {
          Vector feat(static_cast<Eigen::Index>(bins.size()));
          for (size_t b = 0; b < bins.size(); ++b) feat(static_cast<Eigen::Index>(b)) =
              s->spectrum.intensities(bins[b]);
          pred.push_back(lda_predict(lda, feat));
        }
      } else {
        double lambda = 0.0;
        if (cfg.method == Method::DrrNN) {
          lambda = cfg.lambda_selection == LambdaSelection::NextHighest
                       ? select_lambda(cfg.lambda_grid, mean_scores[si])
                       : select_lambda_log_mean(cfg.lambda_grid, mean_scores[si]);
        }
        fr.chosen_lambda = lambda;
        const ModelParams model = train_nn(cohort, fs.outer_train, cfg.train, lambda, seed);
        for (const CohortSample* s : fs.test) pred.push_back(classify(model, s->spectrum));

        if (cfg.relevance_diagnostics) {
          RelevanceDiagnostics diag;
          std::array<Vector, 2> train_maps, test_maps;
          for (int c = 0; c < 2; ++c) {
            std::vector<Spectrum> train_c, test_c;
            for (const CohortSample* s : fs.outer_train)
              if (s->label == c) train_c.push_back(s->spectrum);
            for (const CohortSample* s : fs.test)
              if (s->label == c) test_c.push_back(s->spectrum);
            train_maps[c] = mean_relevance(model, train_c, c).values;
            test_maps[c] = mean_relevance(model, test_c, c).values;
            diag.cosine_train_test.push_back(cosine_similarity(train_maps[c], test_maps[c]));
            diag.sparsity_train.push_back(relevance_sparsity(train_maps[c]));
            diag.sparsity_test.push_back(relevance_sparsity(test_maps[c]));
          }
          diag.mean_cosine =
              0.5 * (diag.cosine_train_test[0] + diag.cosine_train_test[1]);
          diag.mean_sparsity_test = 0.5 * (diag.sparsity_test[0] + diag.sparsity_test[1]);
          fr.relevance = std::move(diag);

          if (cfg.relevance_dir) {
            std::filesystem::create_directories(*cfg.relevance_dir);
            for (const auto& [split, maps] :
                 {std::pair{std::string("train"), &train_maps},
                  std::pair{std::string("test"), &test_maps}}) {
              std::string csv = "mz,relevance_class0,relevance_class1\n";
              for (int b = 0; b < cohort.n; ++b) {
                csv += io::fmt_double(cohort.mz_start + cohort.mz_step * b);
                csv += ',';
                csv += io::fmt_double((*maps)[0](b));
                csv += ',';
                csv += io::fmt_double((*maps)[1](b));
                csv += '\n';
              }
              io::write_file(*cfg.relevance_dir /
                                 ("relevance_" + fs.train_lab + "_fold" +
                                  std::to_string(fs.fold) + "_" + split + ".csv"),
                             csv);
            }
          }
        }
        if (cfg.checkpoint_dir) {
          std::filesystem::create_directories(*cfg.checkpoint_dir);
          nlohmann::ordered_json meta;
          meta["method"] = method_name(cfg.method);
          meta["train_lab"] = fs.train_lab;
          meta["fold"] = fs.fold;
          meta["lambda"] = lambda;
          save_checkpoint(model,
                          *cfg.checkpoint_dir / ("model_" + fs.train_lab + "_fold" +
                                                 std::to_string(fs.fold) + ".json"),
                          meta.dump());
        }
      }

      std::vector<int> truth;
      for (const CohortSample* s : fs.test) truth.push_back(s->label);
      for (size_t i = 0; i < fs.test.size(); ++i)
        fold_predictions[si].push_back({fs.test[i]->sample_id, fs.test[i]->patient_id,
                                        fs.train_lab, fs.fold, pred[i], truth[i]});
    });
  }
  run_jobs(final_jobs, cfg.workers);
  model_count += static_cast<int64_t>(setups.size());
  report.model_count = model_count;

  for (auto& fp : fold_predictions)
    report.predictions.insert(report.predictions.end(), fp.begin(), fp.end());

  // pooled spot-level accuracy over the disjoint prediction sets
  std::vector<int> pred, truth;
  std::vector<std::string> patient_ids;
  for (const SpotPrediction& p : report.predictions) {
    pred.push_back(p.predicted);
    truth.push_back(p.truth);
    patient_ids.push_back(p.patient_id);
  }
  report.spot_balacc = balanced_accuracy(pred, truth);

  // patient-level: majority vote over each patient's pooled test spots
  const auto votes = patient_aggregate(patient_ids, pred);
  std::map<std::string, int> patient_truth;
  for (const SpotPrediction& p : report.predictions) patient_truth[p.patient_id] = p.truth;
  std::vector<int> ppred, ptruth;
  for (const auto& [patient, label] : votes) {
    ppred.push_back(label);
    ptruth.push_back(patient_truth.at(patient));
  }
  report.patient_balacc = balanced_accuracy(ppred, ptruth);
  return report;
}

void check_no_leakage(const CvReport& report, const Cohort& cohort) {
  std::map<std::string, const CohortSample*> by_id;
  for (const CohortSample& s : cohort.samples) by_id[s.sample_id] = &s;

  std::map<std::pair<std::string, int>, const OuterFoldReport*> fold_index;
  for (const OuterFoldReport& fr : report.folds) {
    fold_index[{fr.train_lab, fr.fold}] = &fr;
    std::set<std::string> train(fr.train_patients.begin(), fr.train_patients.end());
    for (const std::string& p : fr.test_patients)
      if (train.count(p))
        throw Error("leakage: patient " + p + " in both train and test of " + fr.train_lab +
                    " fold " + std::to_string(fr.fold));
    if (fr.train_lab == fr.test_lab)
      throw Error("leakage: fold " + std::to_string(fr.fold) + " tests on its training lab");
  }

  for (const SpotPrediction& p : report.predictions) {
    const auto fit = fold_index.find({p.train_lab, p.fold});
    if (fit == fold_index.end()) throw Error("leakage: prediction references unknown fold");
    const OuterFoldReport& fr = *fit->second;
    const auto sit = by_id.find(p.sample_id);
    if (sit == by_id.end()) throw Error("leakage: prediction for unknown sample " + p.sample_id);
    const CohortSample& s = *sit->second;
    if (s.lab_id == p.train_lab)
      throw Error("leakage: sample " + p.sample_id + " tested on its training lab");
    if (std::find(fr.test_patients.begin(), fr.test_patients.end(), p.patient_id) ==
        fr.test_patients.end())
      throw Error("leakage: sample " + p.sample_id + " not in the fold's test patients");
    if (std::find(fr.train_patients.begin(), fr.train_patients.end(), p.patient_id) !=
        fr.train_patients.end())
      throw Error("leakage: patient " + p.patient_id + " also in training patients");
    if (s.patient_id != p.patient_id)
      throw Error("leakage: prediction/patient mismatch for " + p.sample_id);
  }
}

void write_cv_report(const CvReport& report, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);

  nlohmann::ordered_json j;
  j["method"] = method_name(report.method);
  j["seed"] = report.seed;
  j["spot_balanced_accuracy"] = report.spot_balacc;
  j["patient_balanced_accuracy"] = report.patient_balacc;
  j["model_count"] = report.model_count;
  j["folds"] = nlohmann::ordered_json::array();
  for (const OuterFoldReport& fr : report.folds) {
    nlohmann::ordered_json fj;
    fj["train_lab"] = fr.train_lab;
    fj["test_lab"] = fr.test_lab;
    fj["fold"] = fr.fold;
    if (report.method == Method::RocLda) fj["chosen_k"] = fr.chosen_k;
    else fj["chosen_lambda"] = fr.chosen_lambda;
    fj["inner"] = nlohmann::ordered_json::array();
    for (const InnerResult& ir : fr.inner) {
      nlohmann::ordered_json ij;
      ij["inner_fold"] = ir.inner_fold;
      ij["grid_value"] = ir.grid_value;
      ij["score"] = ir.score;
      fj["inner"].push_back(ij);
    }
    fj["train_patients"] = fr.train_patients;
    fj["test_patients"] = fr.test_patients;
    if (fr.relevance) {
      nlohmann::ordered_json rj;
      rj["cosine_train_test"] = fr.relevance->cosine_train_test;
      rj["sparsity_train"] = fr.relevance->sparsity_train;
      rj["sparsity_test"] = fr.relevance->sparsity_test;
      rj["mean_cosine"] = fr.relevance->mean_cosine;
      rj["mean_sparsity_test"] = fr.relevance->mean_sparsity_test;
      fj["relevance"] = rj;
    }
    j["folds"].push_back(fj);
  }
  io::write_file(dir / "report.json", j.dump(1) + "\n");

  std::string csv = "sample_id,patient_id,train_lab,fold,predicted,true\n";
  for (const SpotPrediction& p : report.predictions) {
    csv += p.sample_id + ',' + p.patient_id + ',' + p.train_lab + ',' + std::to_string(p.fold) +
           ',' + std::to_string(p.predicted) + ',' + std::to_string(p.truth) + '\n';
  }
  io::write_file(dir / "predictions.csv", csv);

  std::string summary = "method,spot_balacc,patient_balacc\n";
  summary += std::string(method_name(report.method)) + ',' + io::fmt_double(report.spot_balacc) +
             ',' + io::fmt_double(report.patient_balacc) + '\n';
  io::write_file(dir / "summary.csv", summary);
}

}  // namespace drr
