#include "drr/attribution.hpp"

#include <cmath>

#include "drr/errors.hpp"

namespace drr {

const char* score_mode_name(ScoreMode m) {
  return m == ScoreMode::Logit ? "logit" : "softmax";
}

ScoreMode score_mode_from_name(const std::string& name) {
  if (name == "logit") return ScoreMode::Logit;
  if (name == "softmax") return ScoreMode::Softmax;
  throw ConfigError("unknown score mode '" + name + "' (expected logit|softmax)");
}

namespace {

void check_class(const ModelParams& model, int y) {
  if (y < 0 || y >= model.classes)
    throw ConfigError("class index " + std::to_string(y) + " outside [0, " +
                      std::to_string(model.classes) + ")");
}

}  // namespace

Vector saliency(const ModelParams& model, const Spectrum& x, int y) {
  check_class(model, y);
  ad::Tape tape;
  const TapedSample s = append_sample(tape, model, x.intensities);
  const ad::NodeId score = tape.index(s.logits, y);
  const ad::NodeId wrt[] = {s.input};
  const std::vector<ad::NodeId> g = tape.gradient(score, wrt);
  return tape.value(g[0]).matrix();
}

Vector std_weighted_saliency(const ModelParams& model, const Spectrum& x, int y,
                             const Vector& per_bin_std) {
  if (per_bin_std.size() != x.intensities.size())
    throw ShapeError("std_weighted_saliency: std length " + std::to_string(per_bin_std.size()) +
                     " != spectrum length " + std::to_string(x.intensities.size()));
  if ((per_bin_std.array() < 0.0).any())
    throw DataError("std_weighted_saliency: negative standard deviation");
  return saliency(model, x, y).cwiseProduct(per_bin_std);
}

RelevanceMap lrp_z(const ModelParams& model, const Spectrum& x, int y) {
  if (!model.relu_only())
    throw ConfigError(
        "lrp_z: the input-times-gradient rule only equals layerwise relevance "
        "propagation for stacks whose nonlinearities are all ReLU; this model "
        "contains a softmax layer");
  RelevanceMap map;
  map.class_index = y;
  map.mode = ScoreMode::Logit;
  map.values = x.intensities.cwiseProduct(saliency(model, x, y));
  return map;
}

RelevanceMap softmax_relevance(const ModelParams& model, const Spectrum& x, int y) {
  if (model.classes != 2)
    throw ConfigError("softmax_relevance: stated identity is two-class; model has " +
                      std::to_string(model.classes));
  check_class(model, y);

  ad::Tape tape;
  const TapedSample s = append_sample(tape, model, x.intensities);
  const ad::NodeId probs = tape.softmax(s.logits);
  const ad::NodeId p_y = tape.index(probs, y);
  const ad::NodeId wrt[] = {s.input};
  const Vector grad_p = tape.value(tape.gradient(p_y, wrt)[0]).matrix();

  // self-check: d p_y/dx == p_y (1 - p_y) (d z_y/dx - d z_other/dx).
  // The factor is formed as p_y * p_other; near-saturated predictions make
  // 1 - p_y catastrophically cancel while p_other stays well-conditioned.
  const Vector grad_zy = tape.value(tape.gradient(tape.index(s.logits, y), wrt)[0]).matrix();
  const Vector grad_zo = tape.value(tape.gradient(tape.index(s.logits, 1 - y), wrt)[0]).matrix();
  const double p = tape.value(p_y)[0];
  const double p_other = tape.value(probs)[1 - y];
  const Vector expect = p * p_other * (grad_zy - grad_zo);
  const double denom = expect.norm() + 1e-30;
  if ((grad_p - expect).norm() / denom > 1e-8 && expect.norm() > 1e-300)
    throw NumericError("softmax_relevance: softmax-gradient identity violated");

  RelevanceMap map;
  map.class_index = y;
  map.mode = ScoreMode::Softmax;
  map.values = x.intensities.cwiseProduct(grad_p);
  return map;
}

RelevanceMap mean_relevance(const ModelParams& model, std::span<const Spectrum> subset, int y,
                            ScoreMode mode) {
  if (subset.empty()) throw DataError("mean_relevance: empty subset");
  Vector acc = Vector::Zero(subset[0].intensities.size());
  for (const Spectrum& x : subset) {
    if (x.intensities.size() != acc.size())
      throw ShapeError("mean_relevance: spectra of mixed lengths");
    acc += (mode == ScoreMode::Logit) ? lrp_z(model, x, y).values
                                      : softmax_relevance(model, x, y).values;
  }
  RelevanceMap map;
  map.class_index = y;
  map.mode = mode;
  map.values = acc / static_cast<double>(subset.size());
  return map;
}

double cosine_similarity(const Vector& u, const Vector& v) {
  if (u.size() != v.size())
    throw ShapeError("cosine_similarity: length mismatch " + std::to_string(u.size()) + " vs " +
                     std::to_string(v.size()));
  const double nu = u.norm();
  const double nv = v.norm();
  if (!(nu > 0.0) || !(nv > 0.0)) throw DataError("cosine_similarity: zero-norm operand");
  return u.dot(v) / (nu * nv);
}

double relevance_sparsity(const Vector& rho, double tau) {
  if (!(tau > 0.0 && tau < 1.0)) throw ConfigError("relevance_sparsity: tau must be in (0, 1)");
  const double peak = rho.cwiseAbs().maxCoeff();
  if (peak == 0.0) return 0.0;
  const double thresh = tau * peak;
  const Eigen::Index hits = (rho.cwiseAbs().array() > thresh).count();
  return static_cast<double>(hits) / static_cast<double>(rho.size());
}

}  // namespace drr
