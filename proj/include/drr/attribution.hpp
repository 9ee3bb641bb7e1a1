#pragma once

// Relevance maps: input gradients, input-times-gradient relevance, softmax-
// score variants, per-class means, and the diagnostics used to compare maps.

#include <span>

#include "drr/model.hpp"
#include "drr/types.hpp"

namespace drr {

enum class ScoreMode { Logit, Softmax };

const char* score_mode_name(ScoreMode m);
ScoreMode score_mode_from_name(const std::string& name);

struct RelevanceMap {
  Vector values;  // per bin; positive = evidence for the class, negative = counterevidence
  int class_index = 0;
  ScoreMode mode = ScoreMode::Logit;
};

// d z_y / dx. Throws on an invalid class index.
Vector saliency(const ModelParams& model, const Spectrum& x, int y);

// saliency weighted elementwise by the per-bin training standard deviation.
Vector std_weighted_saliency(const ModelParams& model, const Spectrum& x, int y,
                             const Vector& per_bin_std);

// x (.) d z_y / dx. Valid only for stacks whose nonlinearities are all ReLU;
// refuses otherwise.
RelevanceMap lrp_z(const ModelParams& model, const Spectrum& x, int y);

// x (.) d p_y / dx for a two-class model. Also verifies numerically that
// d p_0/dx == p_0 (1 - p_0) (d z_0/dx - d z_1/dx) and throws NumericError if
// the identity fails beyond 1e-8 relative error.
RelevanceMap softmax_relevance(const ModelParams& model, const Spectrum& x, int y);

// Arithmetic mean of lrp_z (or the softmax variant) over the given spectra,
// all attributed to class y. Throws on an empty subset.
RelevanceMap mean_relevance(const ModelParams& model, std::span<const Spectrum> subset, int y,
                            ScoreMode mode = ScoreMode::Logit);

// u.v / (|u||v|); throws on zero-norm operands.
double cosine_similarity(const Vector& u, const Vector& v);

// Fraction of bins whose magnitude exceeds tau * max|rho|; 0 for an all-zero
// map, otherwise in [1/n, 1].
double relevance_sparsity(const Vector& rho, double tau = 0.01);

}  // namespace drr
