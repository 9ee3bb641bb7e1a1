#include "drr/model.hpp"

#include <cmath>
#include <json.hpp>

#include "drr/errors.hpp"
#include "drr/io.hpp"
#include "drr/rng.hpp"

namespace drr {

namespace {

int ceil_div(int a, int b) { return (a + b - 1) / b; }

int smallest_odd_at_least(int v) {
  if (v < 1) return 1;
  return (v % 2 == 1) ? v : v + 1;
}

}  // namespace

Spectrum tic_normalize(const Spectrum& s) {
  const double total = s.intensities.sum();
  if (!(total > 0.0)) throw DataError("tic_normalize: spectrum has non-positive total ion count");
  Spectrum out = s;
  out.intensities /= total;
  return out;
}

const char* layer_kind_name(LayerKind k) {
  switch (k) {
    case LayerKind::Conv: return "conv";
    case LayerKind::LocallyConnected: return "locally_connected";
    case LayerKind::Dense: return "dense";
    case LayerKind::Relu: return "relu";
    case LayerKind::ResidualAdd: return "residual_add";
    case LayerKind::Softmax: return "softmax";
  }
  return "?";
}

LayerKind layer_kind_from_name(const std::string& name) {
  if (name == "conv") return LayerKind::Conv;
  if (name == "locally_connected") return LayerKind::LocallyConnected;
  if (name == "dense") return LayerKind::Dense;
  if (name == "relu") return LayerKind::Relu;
  if (name == "residual_add") return LayerKind::ResidualAdd;
  if (name == "softmax") return LayerKind::Softmax;
  throw DataError("unknown layer kind '" + name + "'");
}

std::vector<ActExtent> activation_plan(const std::vector<LayerSpec>& layers, int input_length) {
  if (input_length < 1) throw ShapeError("activation_plan: input length must be positive");
  std::vector<ActExtent> plan;
  plan.reserve(layers.size() + 1);
  plan.push_back({1, input_length});
  for (size_t li = 0; li < layers.size(); ++li) {
    const LayerSpec& l = layers[li];
    const ActExtent& cur = plan.back();
    switch (l.kind) {
      case LayerKind::Conv: {
        if (l.width < 1 || l.width % 2 == 0)
          throw ShapeError("layer " + std::to_string(li) + " (conv): kernel width " +
                           std::to_string(l.width) + " must be odd and positive");
        if (l.filters < 1)
          throw ShapeError("layer " + std::to_string(li) + " (conv): needs filters >= 1");
        plan.push_back({l.filters, cur.length});
        break;
      }
      case LayerKind::LocallyConnected: {
        if (l.width < 1 || l.width % 2 == 0)
          throw ShapeError("layer " + std::to_string(li) + " (locally_connected): kernel width " +
                           std::to_string(l.width) + " must be odd and positive");
        if (l.filters < 1 || l.stride < 1)
          throw ShapeError("layer " + std::to_string(li) +
                           " (locally_connected): needs filters >= 1 and stride >= 1");
        plan.push_back({l.filters, ceil_div(cur.length, l.stride)});
        break;
      }
      case LayerKind::Dense: {
        if (l.filters < 1)
          throw ShapeError("layer " + std::to_string(li) + " (dense): needs units >= 1");
        if (cur.flat() < 1)
          throw ShapeError("layer " + std::to_string(li) + " (dense): empty input activation");
        plan.push_back({1, l.filters});
        break;
      }
      case LayerKind::Relu:
      case LayerKind::Softmax:
        plan.push_back(cur);
        break;
      case LayerKind::ResidualAdd: {
        if (l.skip < 1 || static_cast<size_t>(l.skip) > li)
          throw ShapeError("layer " + std::to_string(li) + " (residual_add): skip " +
                           std::to_string(l.skip) + " reaches before the input");
        const ActExtent& from = plan[li + 1 - l.skip];
        if (!(from == cur))
          throw ShapeError("layer " + std::to_string(li) + " (residual_add): extent mismatch");
        plan.push_back(cur);
        break;
      }
    }
  }
  return plan;
}

bool ModelParams::relu_only() const {
  for (const LayerSpec& l : layers)
    if (l.kind == LayerKind::Softmax) return false;
  return true;
}

int64_t ModelParams::parameter_count() const {
  int64_t c = 0;
  for (const Array& w : weights) c += w.size();
  for (const Array& b : biases) c += b.size();
  return c;
}

ModelParams init_params(std::vector<LayerSpec> layers, int input_length, int classes,
                        uint64_t seed) {
  const std::vector<ActExtent> plan = activation_plan(layers, input_length);
  ModelParams m;
  m.layers = std::move(layers);
  m.input_length = input_length;
  m.classes = classes;
  m.init_seed = seed;
  m.weights.resize(m.layers.size());
  m.biases.resize(m.layers.size());

  for (size_t li = 0; li < m.layers.size(); ++li) {
    const LayerSpec& l = m.layers[li];
    const ActExtent& in = plan[li];
    const ActExtent& out = plan[li + 1];
    int64_t wsize = 0;
    int64_t bsize = 0;
    int fan_in = 0;
    switch (l.kind) {
      case LayerKind::Conv:
        wsize = static_cast<int64_t>(l.filters) * in.channels * l.width;
        bsize = l.filters;
        fan_in = in.channels * l.width;
        break;
      case LayerKind::LocallyConnected:
        wsize = static_cast<int64_t>(l.filters) * out.length * in.channels * l.width;
        bsize = static_cast<int64_t>(l.filters) * out.length;
        fan_in = in.channels * l.width;
        break;
      case LayerKind::Dense:
        wsize = static_cast<int64_t>(l.filters) * in.flat();
        bsize = l.filters;
        fan_in = static_cast<int>(in.flat());
        break;
      default:
        break;
    }
    if (wsize > 0) {
      Rng rng(mix_seed(seed, static_cast<uint64_t>(li)));
      const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
      Array w(wsize);
      for (int64_t i = 0; i < wsize; ++i) w[i] = rng.uniform(-bound, bound);
      m.weights[li] = std::move(w);
      m.biases[li] = Array::Zero(bsize);
    }
  }
  return m;
}

ModelParams build_isotopenet_lite(int input_length, int classes, double bin_width_da,
                                  uint64_t seed) {
  if (input_length < 256)
    throw ConfigError("build_isotopenet_lite: input length " + std::to_string(input_length) +
                      " is below the 256-bin minimum");
  if (!(bin_width_da > 0.0)) throw ConfigError("build_isotopenet_lite: bin width must be positive");
  if (classes < 2) throw ConfigError("build_isotopenet_lite: needs at least 2 classes");

  // Receptive field target: one isotopic envelope, ~5 Da. Two stacked conv
  // layers of width w give w + w - 1 covered bins.
  const int rf_bins = static_cast<int>(std::ceil(5.0 / bin_width_da));
  const int conv_width = smallest_odd_at_least((rf_bins + 1) / 2 + ((rf_bins + 1) % 2));
  if (conv_width > input_length)
    throw ConfigError("build_isotopenet_lite: receptive field of " + std::to_string(rf_bins) +
                      " bins does not fit an input of length " + std::to_string(input_length));

  std::vector<LayerSpec> layers;
  layers.push_back({LayerKind::Conv, conv_width, 8, 1, 1});
  layers.push_back({LayerKind::Relu});
  layers.push_back({LayerKind::Conv, conv_width, 4, 1, 1});
  layers.push_back({LayerKind::Relu});
  layers.push_back({LayerKind::LocallyConnected, 9, 4, 8, 1});
  layers.push_back({LayerKind::Relu});
  layers.push_back({LayerKind::Dense, 0, classes, 1, 1});
  return init_params(std::move(layers), input_length, classes, seed);
}

ModelLeaves append_params(ad::Tape& tape, const ModelParams& model) {
  const std::vector<ActExtent> plan = activation_plan(model.layers, model.input_length);
  ModelLeaves leaves;
  leaves.weights.assign(model.layers.size(), ad::kNoNode);
  leaves.biases.assign(model.layers.size(), ad::kNoNode);
  for (size_t li = 0; li < model.layers.size(); ++li) {
    const LayerSpec& l = model.layers[li];
    if (model.weights[li].size() == 0) continue;
    const ActExtent& in = plan[li];
    const ActExtent& out = plan[li + 1];
    const std::string tag = std::to_string(li);
    switch (l.kind) {
      case LayerKind::Conv:
        leaves.weights[li] = tape.param(model.weights[li],
                                        ad::Shape::rank3(l.filters, in.channels, l.width),
                                        "conv" + tag + ".kernel");
        leaves.biases[li] =
            tape.param(model.biases[li], ad::Shape::vec(l.filters), "conv" + tag + ".bias");
        break;
      case LayerKind::LocallyConnected:
        leaves.weights[li] =
            tape.param(model.weights[li],
                       ad::Shape::rank4(l.filters, out.length, in.channels, l.width),
                       "local" + tag + ".weights");
        leaves.biases[li] = tape.param(model.biases[li], ad::Shape::mat(l.filters, out.length),
                                       "local" + tag + ".bias");
        break;
      case LayerKind::Dense:
        leaves.weights[li] =
            tape.param(model.weights[li], ad::Shape::mat(l.filters, static_cast<int>(in.flat())),
                       "dense" + tag + ".weights");
        leaves.biases[li] =
            tape.param(model.biases[li], ad::Shape::vec(l.filters), "dense" + tag + ".bias");
        break;
      default:
        break;
    }
  }
  return leaves;
}

ad::NodeId append_forward(ad::Tape& tape, const ModelParams& model, const ModelLeaves& leaves,
                          ad::NodeId input_node) {
  const std::vector<ActExtent> plan = activation_plan(model.layers, model.input_length);
  if (!(tape.shape(input_node) == ad::Shape::vec(model.input_length)))
    throw ShapeError("append_forward: input node " + tape.describe(input_node) +
                     " does not match model input length " + std::to_string(model.input_length));

  // Activations are carried rank-2 (channels, length); dense output is
  // (1, units). Index 0 holds the input.
  std::vector<ad::NodeId> acts;
  acts.reserve(model.layers.size() + 1);
  acts.push_back(tape.reshape(input_node, ad::Shape::mat(1, model.input_length)));

  for (size_t li = 0; li < model.layers.size(); ++li) {
    const LayerSpec& l = model.layers[li];
    const ad::NodeId cur = acts.back();
    const ActExtent& in = plan[li];
    ad::NodeId next = ad::kNoNode;
    switch (l.kind) {
      case LayerKind::Conv:
        next = tape.add_bias(tape.conv1d(cur, leaves.weights[li]), leaves.biases[li]);
        break;
      case LayerKind::LocallyConnected: {
        const ad::NodeId lin = tape.local1d(cur, leaves.weights[li], l.stride);
        next = tape.add(lin, leaves.biases[li]);
        break;
      }
      case LayerKind::Dense: {
        const ad::NodeId flat = tape.reshape(cur, ad::Shape::vec(static_cast<int>(in.flat())));
        const ad::NodeId lin = tape.matvec(leaves.weights[li], flat);
        next = tape.reshape(tape.add(lin, tape.reshape(leaves.biases[li],
                                                       ad::Shape::vec(l.filters))),
                            ad::Shape::mat(1, l.filters));
        break;
      }
      case LayerKind::Relu:
        next = tape.relu(cur);
        break;
      case LayerKind::Softmax: {
        const ad::NodeId flat = tape.reshape(cur, ad::Shape::vec(static_cast<int>(in.flat())));
        next = tape.reshape(tape.softmax(flat), tape.shape(cur));
        break;
      }
      case LayerKind::ResidualAdd:
        next = tape.add(cur, acts[li + 1 - l.skip]);
        break;
    }
    acts.push_back(next);
  }

  const ActExtent& out = plan.back();
  return tape.reshape(acts.back(), ad::Shape::vec(static_cast<int>(out.flat())));
}

TapedSample append_sample(ad::Tape& tape, const ModelParams& model, const Vector& x) {
  if (x.size() != model.input_length)
    throw ShapeError("append_sample: spectrum length " + std::to_string(x.size()) +
                     " != model input length " + std::to_string(model.input_length));
  TapedSample s;
  s.input = tape.input(x.array(), ad::Shape::vec(model.input_length), "x");
  s.leaves = append_params(tape, model);
  s.logits = append_forward(tape, model, s.leaves, s.input);
  return s;
}

Vector predict_logits(const ModelParams& model, const Spectrum& x) {
  ad::Tape tape;
  const TapedSample s = append_sample(tape, model, x.intensities);
  const Array& z = tape.value(s.logits);
  if (!z.allFinite()) throw NumericError("predict_logits: non-finite logits");
  return z.matrix();
}

Vector softmax(const Vector& z) {
  const double m = z.maxCoeff();
  Vector e = (z.array() - m).exp().matrix();
  return e / e.sum();
}

int argmax_lowest(const Vector& v) {
  int best = 0;
  for (int i = 1; i < v.size(); ++i)
    if (v(i) > v(best)) best = i;
  return best;
}

int classify(const ModelParams& model, const Spectrum& x) {
  return argmax_lowest(predict_logits(model, x));
}

// --- checkpoint io -------------------------------------------------------------

namespace {

nlohmann::ordered_json array_to_json(const Array& a) {
  nlohmann::ordered_json j = nlohmann::ordered_json::array();
  for (Eigen::Index i = 0; i < a.size(); ++i) j.push_back(a[i]);
  return j;
}

Array array_from_json(const nlohmann::json& j) {
  Array a(j.size());
  Eigen::Index i = 0;
  for (const auto& v : j) a[i++] = v.get<double>();
  return a;
}

}  // namespace

void save_checkpoint(const ModelParams& model, const std::filesystem::path& path,
                     const std::string& metadata_json) {
  nlohmann::ordered_json j;
  j["format"] = "drr-checkpoint-v1";
  j["input_length"] = model.input_length;
  j["classes"] = model.classes;
  j["init_seed"] = model.init_seed;
  j["layers"] = nlohmann::ordered_json::array();
  for (const LayerSpec& l : model.layers) {
    nlohmann::ordered_json lj;
    lj["kind"] = layer_kind_name(l.kind);
    lj["width"] = l.width;
    lj["filters"] = l.filters;
    lj["stride"] = l.stride;
    lj["skip"] = l.skip;
    j["layers"].push_back(lj);
  }
  j["weights"] = nlohmann::ordered_json::array();
  j["biases"] = nlohmann::ordered_json::array();
  for (size_t li = 0; li < model.layers.size(); ++li) {
    j["weights"].push_back(array_to_json(model.weights[li]));
    j["biases"].push_back(array_to_json(model.biases[li]));
  }
  j["metadata"] = nlohmann::json::parse(metadata_json);
  io::write_file(path, j.dump(1) + "\n");
}

ModelParams load_checkpoint(const std::filesystem::path& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(io::read_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw DataError("checkpoint " + path.string() + ": " + e.what());
  }
  if (!j.contains("format") || j["format"] != "drr-checkpoint-v1")
    throw DataError("checkpoint " + path.string() + ": unrecognized format");
  ModelParams m;
  m.input_length = j.at("input_length").get<int>();
  m.classes = j.at("classes").get<int>();
  m.init_seed = j.at("init_seed").get<uint64_t>();
  for (const auto& lj : j.at("layers")) {
    LayerSpec l;
    l.kind = layer_kind_from_name(lj.at("kind").get<std::string>());
    l.width = lj.at("width").get<int>();
    l.filters = lj.at("filters").get<int>();
    l.stride = lj.at("stride").get<int>();
    l.skip = lj.at("skip").get<int>();
    m.layers.push_back(l);
  }
  for (const auto& wj : j.at("weights")) m.weights.push_back(array_from_json(wj));
  for (const auto& bj : j.at("biases")) m.biases.push_back(array_from_json(bj));
  if (m.weights.size() != m.layers.size() || m.biases.size() != m.layers.size())
    throw DataError("checkpoint " + path.string() + ": weight arrays do not match layer list");

  // cross-check stored extents against the declared stack
  const std::vector<ActExtent> plan = activation_plan(m.layers, m.input_length);
  ModelParams fresh = init_params(m.layers, m.input_length, m.classes, 0);
  for (size_t li = 0; li < m.layers.size(); ++li) {
    if (m.weights[li].size() != fresh.weights[li].size() ||
        m.biases[li].size() != fresh.biases[li].size())
      throw DataError("checkpoint " + path.string() + ": layer " + std::to_string(li) +
                      " weight sizes inconsistent with its spec");
  }
  (void)plan;
  return m;
}

}  // namespace drr
