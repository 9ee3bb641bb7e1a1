// Command-line front end: cohort generation, training, nested cross-
// validation and relevance-map export, each run leaving a manifest behind.

#include <CLI11.hpp>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <json.hpp>
#include <optional>
#include <string>
#include <vector>

#include "drr/attribution.hpp"
#include "drr/cohort.hpp"
#include "drr/errors.hpp"
#include "drr/eval.hpp"
#include "drr/io.hpp"
#include "drr/model.hpp"
#include "drr/rng.hpp"
#include "drr/training.hpp"
#include "drr/version.hpp"

namespace {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  char buf[32];
  std::tm tm_utc{};
  gmtime_r(&t, &tm_utc);
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm_utc);
  return buf;
}

void write_manifest(const fs::path& out_dir, const std::string& command,
                    const ordered_json& config_snapshot, uint64_t seed,
                    const std::vector<std::string>& outputs) {
  ordered_json m;
  m["command"] = command;
  m["version"] = drr::kVersion;
  m["seed"] = seed;
  m["timestamp_utc"] = utc_timestamp();
  m["config"] = config_snapshot;
  m["outputs"] = outputs;
  drr::io::write_file(out_dir / "manifest.json", m.dump(1) + "\n");
}

void ensure_out_dir(const fs::path& out) {
  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec || !fs::is_directory(out))
    throw drr::DataError("cannot create output directory " + out.string());
  const fs::path probe = out / ".write_probe";
  try {
    drr::io::write_file(probe, "");
  } catch (const drr::DataError&) {
    throw drr::DataError("output directory " + out.string() + " is not writable");
  }
  fs::remove(probe, ec);
}

int cmd_generate(const std::string& config_path, const std::string& out,
                 std::optional<uint64_t> seed_override) {
  drr::SynthConfig cfg =
      config_path.empty() ? drr::SynthConfig{} : drr::load_synth_config(config_path);
  if (seed_override) cfg.seed = *seed_override;
  ensure_out_dir(out);
  const drr::Cohort cohort = drr::generate_cohort(cfg);
  drr::export_cohort(cohort, out);
  write_manifest(out, "generate", ordered_json::parse(drr::synth_config_to_json(cfg)), cfg.seed,
                 {"meta.json", "intensities.csv"});
  std::printf("generated %zu spectra (%d bins) into %s\n", cohort.samples.size(), cohort.n,
              out.c_str());
  return 0;
}

int cmd_train(const std::string& cohort_path, const std::string& config_path,
              const std::string& out, std::optional<uint64_t> seed_override) {
  drr::TrainConfig cfg =
      config_path.empty() ? drr::TrainConfig{} : drr::load_train_config(config_path);
  if (seed_override) cfg.seed = *seed_override;
  ensure_out_dir(out);
  const drr::Cohort cohort = drr::import_cohort(cohort_path);

  std::vector<drr::Example> data;
  data.reserve(cohort.samples.size());
  for (const drr::CohortSample& s : cohort.samples) data.push_back({&s.spectrum, s.label});

  const drr::ModelParams init = drr::build_isotopenet_lite(
      cohort.n, static_cast<int>(cohort.class_names.size()), cohort.mz_step,
      drr::mix_seed(cfg.seed, 0x1217));
  auto [model, report] = drr::train(init, data, cfg);

  ordered_json meta;
  meta["trained_on"] = cohort_path;
  meta["epochs"] = cfg.epochs;
  meta["lambda1"] = cfg.lambda1;
  meta["lambda2"] = cfg.lambda2;
  drr::save_checkpoint(model, fs::path(out) / "checkpoint.json", meta.dump());

  std::string csv = "epoch,total,nll,l1,l2\n";
  for (size_t e = 0; e < report.epochs.size(); ++e) {
    const drr::EpochStats& s = report.epochs[e];
    csv += std::to_string(e) + ',' + drr::io::fmt_double(s.total) + ',' +
           drr::io::fmt_double(s.nll) + ',' + drr::io::fmt_double(s.l1) + ',' +
           drr::io::fmt_double(s.l2) + '\n';
  }
  drr::io::write_file(fs::path(out) / "loss_history.csv", csv);

  write_manifest(out, "train", ordered_json::parse(drr::train_config_to_json(cfg)), cfg.seed,
                 {"checkpoint.json", "loss_history.csv"});
  std::printf("trained %d epochs, final loss %s, wall %.1fs\n", cfg.epochs,
              drr::io::fmt_double(report.epochs.back().total).c_str(), report.wall_seconds);
  return 0;
}

int cmd_cv(const std::string& cohort_path, const std::string& config_path,
           const std::string& method, const std::string& out,
           std::optional<uint64_t> seed_override, std::optional<int> workers_override) {
  drr::CvConfig cfg = config_path.empty() ? drr::CvConfig{} : drr::load_cv_config(config_path);
  if (!method.empty()) cfg.method = drr::method_from_name(method);
  if (seed_override) cfg.seed = *seed_override;
  if (workers_override) cfg.workers = *workers_override;
  ensure_out_dir(out);
  if (cfg.method != drr::Method::RocLda) {
    cfg.checkpoint_dir = fs::path(out) / "checkpoints";
    cfg.relevance_dir = fs::path(out) / "relevance";
  }

  const drr::Cohort cohort = drr::import_cohort(cohort_path);
  const drr::CvReport report = drr::nested_cv(cohort, cfg);
  drr::check_no_leakage(report, cohort);
  drr::write_cv_report(report, out);

  ordered_json snapshot;
  snapshot["method"] = drr::method_name(cfg.method);
  snapshot["outer_folds"] = cfg.outer_folds;
  snapshot["inner_folds"] = cfg.inner_folds;
  snapshot["lambda_grid"] = cfg.lambda_grid;
  snapshot["k_grid"] = cfg.k_grid;
  snapshot["workers"] = cfg.workers;
  snapshot["train"] = ordered_json::parse(drr::train_config_to_json(cfg.train));
  write_manifest(out, "cv", snapshot, cfg.seed,
                 {"report.json", "predictions.csv", "summary.csv"});
  std::printf("%s: spot balacc %.4f, patient balacc %.4f, %lld models\n",
              drr::method_name(report.method), report.spot_balacc, report.patient_balacc,
              static_cast<long long>(report.model_count));
  return 0;
}

int cmd_attribute(const std::string& checkpoint_path, const std::string& cohort_path,
                  const std::string& out, const std::string& train_lab,
                  const std::string& test_lab, const std::vector<int>& bins,
                  const std::string& score_mode_name_str) {
  ensure_out_dir(out);
  const drr::ModelParams model = drr::load_checkpoint(checkpoint_path);
  const drr::Cohort cohort = drr::import_cohort(cohort_path);
  if (cohort.n != model.input_length)
    throw drr::ShapeError("attribute: cohort bins " + std::to_string(cohort.n) +
                          " != model input length " + std::to_string(model.input_length));
  const drr::ScoreMode mode = drr::score_mode_from_name(score_mode_name_str);

  const auto subset_of = [&](const std::string& lab) {
    std::vector<drr::Spectrum> per_class[2];
    for (const drr::CohortSample& s : cohort.samples)
      if (lab.empty() || s.lab_id == lab) per_class[s.label].push_back(s.spectrum);
    return std::array<std::vector<drr::Spectrum>, 2>{per_class[0], per_class[1]};
  };

  const auto test_subset = subset_of(test_lab);
  std::array<drr::Vector, 2> test_maps;
  for (int c = 0; c < 2; ++c) {
    if (test_subset[c].empty()) throw drr::DataError("attribute: empty class subset");
    test_maps[c] = drr::mean_relevance(model, test_subset[c], c, mode).values;
  }

  std::string csv = "mz,relevance_class0,relevance_class1\n";
  for (int b = 0; b < cohort.n; ++b) {
    csv += drr::io::fmt_double(cohort.mz_start + cohort.mz_step * b);
    csv += ',' + drr::io::fmt_double(test_maps[0](b)) + ',' + drr::io::fmt_double(test_maps[1](b));
    csv += '\n';
  }
  drr::io::write_file(fs::path(out) / "mean_relevance.csv", csv);

  ordered_json rep;
  rep["score_mode"] = drr::score_mode_name(mode);
  rep["self_cosine"] = drr::cosine_similarity(test_maps[0], test_maps[0]);
  rep["sparsity_class0"] = drr::relevance_sparsity(test_maps[0]);
  rep["sparsity_class1"] = drr::relevance_sparsity(test_maps[1]);

  if (!train_lab.empty()) {
    const auto train_subset = subset_of(train_lab);
    for (int c = 0; c < 2; ++c) {
      if (train_subset[c].empty()) throw drr::DataError("attribute: empty class subset");
      const drr::Vector train_map =
          drr::mean_relevance(model, train_subset[c], c, mode).values;
      rep["cosine_train_test_class" + std::to_string(c)] =
          drr::cosine_similarity(train_map, test_maps[c]);
    }
  }

  if (!bins.empty()) {
    std::string bcsv = "sample_id,label,bin,mz,relevance\n";
    for (const drr::CohortSample& s : cohort.samples) {
      if (!test_lab.empty() && s.lab_id != test_lab) continue;
      const drr::Vector rho = mode == drr::ScoreMode::Logit
                                  ? drr::lrp_z(model, s.spectrum, s.label).values
                                  : drr::softmax_relevance(model, s.spectrum, s.label).values;
      for (int b : bins) {
        if (b < 0 || b >= cohort.n)
          throw drr::ConfigError("attribute: bin " + std::to_string(b) + " out of range");
        bcsv += s.sample_id + ',' + std::to_string(s.label) + ',' + std::to_string(b) + ',' +
                drr::io::fmt_double(cohort.mz_start + cohort.mz_step * b) + ',' +
                drr::io::fmt_double(rho(b)) + '\n';
      }
    }
    drr::io::write_file(fs::path(out) / "bin_relevance.csv", bcsv);
  }

  drr::io::write_file(fs::path(out) / "report.json", rep.dump(1) + "\n");

  ordered_json snapshot;
  snapshot["checkpoint"] = checkpoint_path;
  snapshot["cohort"] = cohort_path;
  snapshot["train_lab"] = train_lab;
  snapshot["test_lab"] = test_lab;
  snapshot["bins"] = bins;
  write_manifest(out, "attribute", snapshot, 0, {"mean_relevance.csv", "report.json"});
  std::printf("relevance maps written to %s\n", out.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"spectrum classifiers with relevance-sparsity regularization"};
  app.set_version_flag("--version", drr::kVersion);
  app.require_subcommand(1);

  std::string config_path, cohort_path, out_dir, method, checkpoint_path;
  std::string train_lab, test_lab, score_mode = "logit";
  std::vector<int> bins;
  std::optional<uint64_t> seed;
  std::optional<int> workers;

  CLI::App* gen = app.add_subcommand("generate", "synthesize a two-lab cohort");
  gen->add_option("--config", config_path, "synthesis config (JSON)");
  gen->add_option("--out", out_dir, "output directory")->required();
  gen->add_option("--seed", seed, "override the config seed");

  CLI::App* train = app.add_subcommand("train", "train one classifier on a cohort");
  train->add_option("--cohort", cohort_path, "cohort directory")->required();
  train->add_option("--config", config_path, "training config (JSON)");
  train->add_option("--out", out_dir, "output directory")->required();
  train->add_option("--seed", seed, "override the config seed");

  CLI::App* cv = app.add_subcommand("cv", "nested inter-lab cross-validation");
  cv->add_option("--cohort", cohort_path, "cohort directory")->required();
  cv->add_option("--config", config_path, "cv config (JSON)");
  cv->add_option("--method", method, "drr-nn | plain-nn | roc-lda");
  cv->add_option("--out", out_dir, "output directory")->required();
  cv->add_option("--seed", seed, "override the config seed");
  cv->add_option("--workers", workers, "parallel fold/grid jobs");

  CLI::App* attr = app.add_subcommand("attribute", "relevance maps for a checkpoint");
  attr->add_option("--checkpoint", checkpoint_path, "model checkpoint")->required();
  attr->add_option("--cohort", cohort_path, "cohort directory")->required();
  attr->add_option("--out", out_dir, "output directory")->required();
  attr->add_option("--train-lab", train_lab, "lab id of the training split");
  attr->add_option("--test-lab", test_lab, "lab id of the evaluation split");
  attr->add_option("--bins", bins, "bins for per-spectrum relevance export")->delimiter(',');
  attr->add_option("--score-mode", score_mode, "logit | softmax");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return e.get_exit_code() == 0 ? 0 : 1;
  }

  try {
    if (gen->parsed()) return cmd_generate(config_path, out_dir, seed);
    if (train->parsed()) return cmd_train(cohort_path, config_path, out_dir, seed);
    if (cv->parsed()) return cmd_cv(cohort_path, config_path, method, out_dir, seed, workers);
    if (attr->parsed())
      return cmd_attribute(checkpoint_path, cohort_path, out_dir, train_lab, test_lab, bins,
                           score_mode);
  } catch (const drr::NumericError& e) {
    std::fprintf(stderr, "numeric failure: %s\n", e.what());
    return 3;
  } catch (const drr::Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 1;
}
