#pragma once

// Reverse-mode automatic differentiation on a flat tape of dense arrays.
//
// Values are evaluated eagerly as nodes are recorded (define-by-run). The
// reverse pass emits ordinary tape nodes for every adjoint, so the result of
// gradient() is itself differentiable and a second gradient() call produces
// exact second-order derivatives. This is what lets a training objective
// contain an input-gradient term and still be optimized by gradient descent.
//
// Conventions baked in here and inherited by everything downstream:
//   * relu'(0) = 0, sign(0) = 0, and the clamp mask at its floor is 1
//   * second derivatives of the kink ops are 0 almost everywhere (the
//     distributional term at the kink is dropped)
//   * all math is in 64-bit floats

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "drr/errors.hpp"
#include "drr/types.hpp"

namespace drr::ad {

using NodeId = int32_t;
inline constexpr NodeId kNoNode = -1;

// Dense row-major extents; rank 0 is a scalar. Flat index of (i, j) in a
// rank-2 shape is i * dims[1] + j, and so on for higher ranks.
struct Shape {
  std::vector<int> dims;

  Shape() = default;
  explicit Shape(std::vector<int> d) : dims(std::move(d)) {}

  static Shape scalar() { return Shape{}; }
  static Shape vec(int n) { return Shape{{n}}; }
  static Shape mat(int rows, int cols) { return Shape{{rows, cols}}; }
  static Shape rank3(int a, int b, int c) { return Shape{{a, b, c}}; }
  static Shape rank4(int a, int b, int c, int d) { return Shape{{a, b, c, d}}; }

  int64_t size() const {
    int64_t s = 1;
    for (int d : dims) s *= d;
    return s;
  }
  int rank() const { return static_cast<int>(dims.size()); }
  bool is_scalar() const { return dims.empty(); }
  bool operator==(const Shape& o) const { return dims == o.dims; }
  std::string str() const;
};

enum class Op : uint8_t {
  kParam,      // trainable leaf
  kInput,      // data leaf
  kConst,      // fixed value, zero derivative
  kAdd,
  kSub,
  kMul,        // elementwise
  kDiv,        // elementwise
  kNeg,
  kScale,      // multiply by a compile-time constant
  kSum,        // full reduction to scalar
  kBroadcast,  // scalar -> filled shape
  kRelu,
  kReluMask,   // 1 where input > 0 else 0; derivative treated as 0
  kAbs,
  kSign,       // -1/0/+1; derivative treated as 0
  kLog,
  kExp,
  kClampMin,   // max(x, floor)
  kClampMask,  // 1 where input >= floor else 0; derivative treated as 0
  kSoftmax,    // rank-1, max-subtracted
  kIndex,      // rank-1 -> scalar
  kOneHot,     // scalar -> e_i * value
  kReshape,
  kRowSum,        // (r, c) -> (r)
  kBroadcastCols, // (r) -> (r, c)
  kAddBias,       // (r, c) + per-row bias (r)
  kMatVec,        // (m, k) * (k) -> (m)
  kMatTVec,       // (m, k)^T * (m) -> (k)
  kOuter,         // (m) x (k) -> (m, k)
  kConv,          // zero-padded stride-1 correlation stack, see tape.cpp
  kConvInVjp,
  kConvKerVjp,
  kLocal,         // locally connected, strided, zero-padded
  kLocalInVjp,
  kLocalWVjp,
};

const char* op_name(Op op);

struct Node {
  Op op = Op::kConst;
  Shape shape;
  Array value;
  NodeId a = kNoNode;
  NodeId b = kNoNode;
  int i0 = 0;    // op extra: index / stride / input length
  int i1 = 0;    // op extra: kernel width
  double c = 0;  // op extra: scale factor / clamp floor
  std::string label;  // leaves only
  bool has_parents() const { return a != kNoNode; }
};

class Tape {
 public:
  // --- leaves ------------------------------------------------------------
  NodeId param(Array value, Shape shape, std::string label);
  NodeId input(Array value, Shape shape, std::string label);
  NodeId constant(Array value, Shape shape);
  NodeId constant_scalar(double v);

  // --- elementwise and reductions -----------------------------------------
  NodeId add(NodeId a, NodeId b);
  NodeId sub(NodeId a, NodeId b);
  NodeId mul(NodeId a, NodeId b);
  NodeId div(NodeId a, NodeId b);
  NodeId neg(NodeId a);
  NodeId scale(NodeId a, double c);
  NodeId sum(NodeId a);
  NodeId broadcast(NodeId scalar, const Shape& to);
  NodeId relu(NodeId a);
  NodeId relu_mask(NodeId a);
  NodeId abs(NodeId a);
  NodeId sign(NodeId a);
  NodeId log(NodeId a);
  NodeId exp(NodeId a);
  NodeId clamp_min(NodeId a, double floor);
  NodeId clamp_mask(NodeId a, double floor);
  NodeId softmax(NodeId a);
  NodeId index(NodeId a, int i);
  NodeId one_hot(NodeId scalar, int i, int n);
  NodeId reshape(NodeId a, const Shape& to);

  // --- rank-2 helpers (rows are channels) ----------------------------------
  NodeId row_sum(NodeId a);
  NodeId broadcast_cols(NodeId a, int cols);
  NodeId add_bias(NodeId mat, NodeId bias);

  // --- dense linear algebra ------------------------------------------------
  NodeId matvec(NodeId w, NodeId x);
  NodeId mat_t_vec(NodeId w, NodeId y);
  NodeId outer(NodeId u, NodeId v);

  // --- structured 1-D layers -----------------------------------------------
  // x: (c_in, n), kernel: (c_out, c_in, w) with odd w; output (c_out, n).
  NodeId conv1d(NodeId x, NodeId kernel);
  NodeId conv1d_input_vjp(NodeId g, NodeId kernel);
  NodeId conv1d_kernel_vjp(NodeId x, NodeId g, int width);
  // x: (c_in, n), weights: (c_out, l_out, c_in, w), l_out = ceil(n / stride).
  NodeId local1d(NodeId x, NodeId weights, int stride);
  NodeId local1d_input_vjp(NodeId g, NodeId weights, int stride, int input_len);
  NodeId local1d_weight_vjp(NodeId x, NodeId g, int stride, int width);

  // --- access ---------------------------------------------------------------
  const Array& value(NodeId id) const { return nodes_[check(id)].value; }
  const Shape& shape(NodeId id) const { return nodes_[check(id)].shape; }
  const Node& node(NodeId id) const { return nodes_[check(id)]; }
  int size() const { return static_cast<int>(nodes_.size()); }
  std::string describe(NodeId id) const;

  // Re-evaluates every node in creation order with new leaf values;
  // bit-for-bit reproducible for identical bindings.
  void forward(std::span<const std::pair<NodeId, Array>> bindings);

  // Reverse pass from a scalar node. Returns one adjoint node per requested
  // node, in order; a zero constant when the target does not depend on it.
  // Appends nodes, so the returned gradients can be differentiated again.
  std::vector<NodeId> gradient(NodeId scalar_target, std::span<const NodeId> wrt);

 private:
  NodeId emit(Node n);
  void eval(NodeId id);
  NodeId check(NodeId id) const;
  void require_shape(NodeId id, const Shape& expected, const char* ctx) const;

  std::vector<Node> nodes_;
};

// --- finite-difference oracle ----------------------------------------------

struct FiniteDiffReport {
  double max_rel_error = 0.0;   // over coordinates not excluded
  std::vector<int> excluded;    // coordinates where one-sided slopes disagree
                                // (the function has a kink within +-step)
  int checked = 0;
  std::vector<double> rel_errors;  // per coordinate; NaN where excluded
};

// Compares an analytic gradient against central differences of f at x.
// Relative error per coordinate: |analytic - central| / (|analytic| + eps_abs).
FiniteDiffReport finite_difference_check(const std::function<double(const Vector&)>& f,
                                         const Vector& analytic_grad, const Vector& x,
                                         double step, double eps_abs = 1e-8);

}  // namespace drr::ad
