#pragma once

// 1-D spectrum classifier: layer stack, parameter container, tape wiring,
// inference helpers and checkpoint io.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "drr/tape.hpp"
#include "drr/types.hpp"

namespace drr {

struct Spectrum {
  Vector intensities;
  double mz_start = 0.0;
  double mz_step = 1.0;

  double mz(Eigen::Index bin) const { return mz_start + mz_step * static_cast<double>(bin); }
  Eigen::Index bins() const { return intensities.size(); }
};

// Rescales so the intensities sum to 1; throws DataError on a zero-sum input.
Spectrum tic_normalize(const Spectrum& s);

enum class LayerKind { Conv, LocallyConnected, Dense, Relu, ResidualAdd, Softmax };

const char* layer_kind_name(LayerKind k);
LayerKind layer_kind_from_name(const std::string& name);

struct LayerSpec {
  LayerKind kind = LayerKind::Relu;
  int width = 0;    // kernel bins, odd (conv / locally-connected)
  int filters = 0;  // output channels (conv / locally-connected), units (dense)
  int stride = 1;   // locally-connected
  int skip = 1;     // residual-add: how many layers back the shortcut taps
};

// Activation extents between layers.
struct ActExtent {
  int channels = 1;
  int length = 0;
  int64_t flat() const { return static_cast<int64_t>(channels) * length; }
  bool operator==(const ActExtent& o) const = default;
};

// Walks the stack and returns the extent after every layer (index 0 is the
// input). Throws ShapeError on any inconsistency: even kernel widths,
// residual extent mismatches, dense layers fed zero-length activations.
std::vector<ActExtent> activation_plan(const std::vector<LayerSpec>& layers, int input_length);

struct ModelParams {
  std::vector<LayerSpec> layers;
  std::vector<Array> weights;  // aligned with layers; empty where the layer has none
  std::vector<Array> biases;
  int input_length = 0;
  int classes = 0;
  uint64_t init_seed = 0;

  // True when every nonlinearity in the stack is a ReLU; the input-times-
  // gradient relevance rule is only valid then.
  bool relu_only() const;
  int64_t parameter_count() const;
};

// Fan-in-scaled uniform init (+-sqrt(6/fan_in)), zero biases, seeded.
ModelParams init_params(std::vector<LayerSpec> layers, int input_length, int classes,
                        uint64_t seed);

// Compact stack for desk-scale spectra: two conv layers (8 then 4 filters)
// sized so the combined receptive field covers a full isotopic envelope
// (>= 5 Da), a stride-8 locally-connected layer (4 filters), and a dense
// read-out. Throws ConfigError when the input is too short.
ModelParams build_isotopenet_lite(int input_length, int classes, double bin_width_da,
                                  uint64_t seed);

// Tape wiring. Parameters become kParam leaves (shared across samples on the
// same tape); each call to append_forward adds one sample's subgraph.
struct ModelLeaves {
  std::vector<ad::NodeId> weights;  // aligned with layers; kNoNode where absent
  std::vector<ad::NodeId> biases;
};

ModelLeaves append_params(ad::Tape& tape, const ModelParams& model);

// input_node must be rank-1 of the model's input length; returns the logits
// node (rank-1, classes).
ad::NodeId append_forward(ad::Tape& tape, const ModelParams& model, const ModelLeaves& leaves,
                          ad::NodeId input_node);

// Convenience single-sample wiring: input leaf + params + forward.
struct TapedSample {
  ad::NodeId input;
  ModelLeaves leaves;
  ad::NodeId logits;
};
TapedSample append_sample(ad::Tape& tape, const ModelParams& model, const Vector& x);

Vector predict_logits(const ModelParams& model, const Spectrum& x);

// Overflow-safe softmax of a logit vector.
Vector softmax(const Vector& z);

// Index of the maximal logit; ties resolve to the lowest index.
int classify(const ModelParams& model, const Spectrum& x);
int argmax_lowest(const Vector& v);

// Checkpoint: JSON container with the layer stack, flat weight arrays, seed
// and caller-supplied metadata. Round-trips weights bit-exactly.
void save_checkpoint(const ModelParams& model, const std::filesystem::path& path,
                     const std::string& metadata_json = "{}");
ModelParams load_checkpoint(const std::filesystem::path& path);

}  // namespace drr
