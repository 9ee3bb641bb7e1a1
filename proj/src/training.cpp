#include "drr/training.hpp"

#include <chrono>
#include <cmath>
#include <json.hpp>

#include "drr/errors.hpp"
#include "drr/io.hpp"
#include "drr/rng.hpp"

namespace drr {

namespace {

constexpr double kProbFloor = 1e-12;

}  // namespace

TrainConfig load_train_config(const std::filesystem::path& path) {
  try {
    return train_config_from_json_text(io::read_file(path));
  } catch (const ConfigError& e) {
    throw ConfigError("train config " + path.string() + ": " + e.what());
  }
}

TrainConfig train_config_from_json_text(const std::string& json_text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(json_text);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("invalid JSON: ") + e.what());
  }
  TrainConfig cfg;
  for (const auto& [key, value] : j.items()) {
    if (key == "lambda1") cfg.lambda1 = value.get<double>();
    else if (key == "lambda2") cfg.lambda2 = value.get<double>();
    else if (key == "lr") cfg.lr = value.get<double>();
    else if (key == "epochs") cfg.epochs = value.get<int>();
    else if (key == "batch_size") cfg.batch_size = value.get<int>();
    else if (key == "seed") cfg.seed = value.get<uint64_t>();
    else if (key == "score_mode") cfg.score_mode = score_mode_from_name(value.get<std::string>());
    else if (key == "class_weights") cfg.class_weights = value.get<bool>();
    else if (key == "weight_decay") cfg.weight_decay = value.get<double>();
    else if (key == "penalty_mask_path") {
      const auto rows = io::read_csv(std::filesystem::path(value.get<std::string>()));
      std::vector<double> vals;
      for (const auto& row : rows)
        for (const auto& field : row) vals.push_back(io::parse_double(field));
      Vector mask(static_cast<Eigen::Index>(vals.size()));
      for (size_t i = 0; i < vals.size(); ++i) mask(static_cast<Eigen::Index>(i)) = vals[i];
      cfg.penalty_mask = std::move(mask);
    } else {
      throw ConfigError("unknown train config key '" + key + "'");
    }
  }
  if (cfg.lambda1 < 0.0 || cfg.lambda2 < 0.0)
    throw ConfigError("train config: lambda1/lambda2 must be nonnegative");
  if (cfg.epochs < 1 || cfg.batch_size < 1)
    throw ConfigError("train config: epochs and batch_size must be positive");
  if (cfg.penalty_mask && (cfg.penalty_mask->array() < 0.0).any())
    throw ConfigError("train config: penalty mask entries must be nonnegative");
  return cfg;
}

std::string train_config_to_json(const TrainConfig& cfg) {
  nlohmann::ordered_json j;
  j["lambda1"] = cfg.lambda1;
  j["lambda2"] = cfg.lambda2;
  j["lr"] = cfg.lr;
  j["epochs"] = cfg.epochs;
  j["batch_size"] = cfg.batch_size;
  j["seed"] = cfg.seed;
  j["score_mode"] = score_mode_name(cfg.score_mode);
  j["class_weights"] = cfg.class_weights;
  j["weight_decay"] = cfg.weight_decay;
  return j.dump();
}

Vector class_weight_vector(std::span<const int> labels, int classes) {
  if (classes < 1) throw ConfigError("class_weight_vector: classes must be positive");
  Vector counts = Vector::Zero(classes);
  for (int y : labels) {
    if (y < 0 || y >= classes)
      throw DataError("class_weight_vector: label " + std::to_string(y) + " outside [0, " +
                      std::to_string(classes) + ")");
    counts(y) += 1.0;
  }
  const double n = static_cast<double>(labels.size());
  Vector w(classes);
  for (int c = 0; c < classes; ++c) {
    if (counts(c) == 0.0)
      throw DataError("class_weight_vector: class " + std::to_string(c) + " has no samples");
    w(c) = n / (static_cast<double>(classes) * counts(c));
  }
  return w;
}

double nll_loss(const Vector& p, int y) {
  if (y < 0 || y >= p.size())
    throw ConfigError("nll_loss: class index " + std::to_string(y) + " out of range");
  return -std::log(std::max(p(y), kProbFloor));
}

double drr_penalty(const Vector& rho, double lambda1, double lambda2, const Vector* mask) {
  if (lambda1 < 0.0 || lambda2 < 0.0)
    throw ConfigError("drr_penalty: lambda weights must be nonnegative");
  Vector r = rho;
  if (mask) {
    if (mask->size() != rho.size())
      throw ShapeError("drr_penalty: mask length " + std::to_string(mask->size()) +
                       " != relevance length " + std::to_string(rho.size()));
    r = rho.cwiseProduct(*mask);
  }
  return lambda1 * r.lpNorm<1>() + lambda2 * r.squaredNorm();
}

BatchObjective total_objective(ad::Tape& tape, const ModelParams& model,
                               std::span<const Example> batch, const TrainConfig& cfg,
                               const Vector& class_w) {
  if (batch.empty()) throw DataError("total_objective: empty batch");
  if (class_w.size() != model.classes)
    throw ShapeError("total_objective: class weight length mismatch");
  if (cfg.penalty_mask && cfg.penalty_mask->size() != model.input_length)
    throw ShapeError("total_objective: penalty mask length " +
                     std::to_string(cfg.penalty_mask->size()) + " != input length " +
                     std::to_string(model.input_length));

  BatchObjective obj;
  obj.leaves = append_params(tape, model);

  const bool penalized = cfg.penalized();
  ad::NodeId mask_node = ad::kNoNode;
  if (penalized && cfg.penalty_mask)
    mask_node = tape.constant(cfg.penalty_mask->array(),
                              ad::Shape::vec(static_cast<int>(model.input_length)));

  ad::NodeId nll_sum = ad::kNoNode;
  ad::NodeId l1_sum = ad::kNoNode;
  ad::NodeId l2_sum = ad::kNoNode;
  const auto chain = [&tape](ad::NodeId acc, ad::NodeId term) {
    return acc == ad::kNoNode ? term : tape.add(acc, term);
  };

  for (const Example& ex : batch) {
    if (ex.y < 0 || ex.y >= model.classes)
      throw DataError("total_objective: label " + std::to_string(ex.y) + " out of range");
    const ad::NodeId input =
        tape.input(ex.x->intensities.array(), ad::Shape::vec(model.input_length), "x");
    const ad::NodeId logits = append_forward(tape, model, obj.leaves, input);
    const ad::NodeId probs = tape.softmax(logits);
    const ad::NodeId p_y = tape.index(probs, ex.y);
    if (tape.value(p_y)[0] < kProbFloor) ++obj.nll_clamp_events;
    const ad::NodeId nll = tape.neg(tape.log(tape.clamp_min(p_y, kProbFloor)));
    nll_sum = chain(nll_sum, tape.scale(nll, class_w(ex.y)));

    if (penalized) {
      const ad::NodeId score =
          cfg.score_mode == ScoreMode::Logit ? tape.index(logits, ex.y) : p_y;
      const ad::NodeId wrt[] = {input};
      const ad::NodeId grad_x = tape.gradient(score, wrt)[0];
      ad::NodeId rho = tape.mul(input, grad_x);
      if (mask_node != ad::kNoNode) rho = tape.mul(rho, mask_node);
      l1_sum = chain(l1_sum, tape.sum(tape.abs(rho)));
      l2_sum = chain(l2_sum, tape.sum(tape.mul(rho, rho)));
    }
  }

  const double inv_b = 1.0 / static_cast<double>(batch.size());
  obj.nll_term = tape.scale(nll_sum, inv_b);
  obj.total = obj.nll_term;
  if (penalized) {
    obj.l1_term = tape.scale(l1_sum, cfg.lambda1 * inv_b);
    obj.l2_term = tape.scale(l2_sum, cfg.lambda2 * inv_b);
    obj.total = tape.add(tape.add(obj.nll_term, obj.l1_term), obj.l2_term);
  }
  return obj;
}

void adam_step(std::vector<Array*> params, const std::vector<const Array*>& grads,
               AdamState& state, double lr) {
  constexpr double kBeta1 = 0.9;
  constexpr double kBeta2 = 0.999;
  constexpr double kEps = 1e-8;
  if (params.size() != grads.size())
    throw ShapeError("adam_step: parameter/gradient count mismatch");
  if (state.m.empty()) {
    state.m.resize(params.size());
    state.v.resize(params.size());
    for (size_t i = 0; i < params.size(); ++i) {
      state.m[i] = Array::Zero(params[i]->size());
      state.v[i] = Array::Zero(params[i]->size());
    }
  }
  ++state.t;
  const double c1 = 1.0 - std::pow(kBeta1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(kBeta2, static_cast<double>(state.t));
  for (size_t i = 0; i < params.size(); ++i) {
    const Array& g = *grads[i];
    if (g.size() != params[i]->size())
      throw ShapeError("adam_step: gradient " + std::to_string(i) + " has wrong length");
    if (!g.allFinite())
      throw NumericError("adam_step: non-finite gradient in parameter block " +
                         std::to_string(i));
    state.m[i] = kBeta1 * state.m[i] + (1.0 - kBeta1) * g;
    state.v[i] = kBeta2 * state.v[i] + (1.0 - kBeta2) * g * g;
    *params[i] -= lr * (state.m[i] / c1) / ((state.v[i] / c2).sqrt() + kEps);
  }
}

std::pair<ModelParams, TrainReport> train(const ModelParams& init, std::span<const Example> data,
                                          const TrainConfig& cfg) {
  if (data.empty()) throw DataError("train: empty training set");
  for (const Example& ex : data)
    if (ex.x->intensities.size() != init.input_length)
      throw ShapeError("train: spectrum length mismatch");

  const auto t0 = std::chrono::steady_clock::now();
  ModelParams model = init;
  TrainReport report;
  report.seed = cfg.seed;

  std::vector<int> labels(data.size());
  for (size_t i = 0; i < data.size(); ++i) labels[i] = data[i].y;
  const Vector class_w = cfg.class_weights ? class_weight_vector(labels, model.classes)
                                           : Vector::Ones(model.classes);

  // indices of the layers that own parameters, in stack order
  std::vector<size_t> plis;
  for (size_t li = 0; li < model.layers.size(); ++li)
    if (model.weights[li].size() > 0) plis.push_back(li);

  AdamState adam;
  Rng shuffle_rng(mix_seed(cfg.seed, kShuffleStreamTag));
  std::vector<size_t> order(data.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    shuffle_rng.shuffle(order);
    EpochStats stats;
    size_t pos = 0;
    while (pos < order.size()) {
      const size_t bsz = std::min<size_t>(cfg.batch_size, order.size() - pos);
      std::vector<Example> batch(bsz);
      for (size_t i = 0; i < bsz; ++i) batch[i] = data[order[pos + i]];
      pos += bsz;

      ad::Tape tape;
      const BatchObjective obj = total_objective(tape, model, batch, cfg, class_w);
      report.nll_clamp_events += obj.nll_clamp_events;

      const double total = tape.value(obj.total)[0];
      if (!std::isfinite(total))
        throw NumericError("train: objective diverged (epoch " + std::to_string(epoch) + ")");

      std::vector<ad::NodeId> wrt;
      for (size_t li : plis) {
        wrt.push_back(obj.leaves.weights[li]);
        wrt.push_back(obj.leaves.biases[li]);
      }
      const std::vector<ad::NodeId> grads = tape.gradient(obj.total, wrt);

      std::vector<Array*> param_ptrs;
      std::vector<const Array*> grad_ptrs;
      size_t gi = 0;
      for (size_t li : plis) {
        param_ptrs.push_back(&model.weights[li]);
        grad_ptrs.push_back(&tape.value(grads[gi++]));
        param_ptrs.push_back(&model.biases[li]);
        grad_ptrs.push_back(&tape.value(grads[gi++]));
      }
      try {
        adam_step(param_ptrs, grad_ptrs, adam, cfg.lr);
      } catch (const NumericError& e) {
        throw NumericError(std::string(e.what()) + " (epoch " + std::to_string(epoch) + ")");
      }
      if (cfg.weight_decay > 0.0) {
        // decoupled decay: not part of the recorded loss
        for (Array* p : param_ptrs) *p -= cfg.lr * cfg.weight_decay * *p;
      }

      const double frac = static_cast<double>(bsz) / static_cast<double>(data.size());
      stats.total += total * frac;
      stats.nll += tape.value(obj.nll_term)[0] * frac;
      if (obj.l1_term != ad::kNoNode) {
        stats.l1 += tape.value(obj.l1_term)[0] * frac;
        stats.l2 += tape.value(obj.l2_term)[0] * frac;
      }
    }
    report.epochs.push_back(stats);
  }

  report.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return {std::move(model), std::move(report)};
}

}  // namespace drr
