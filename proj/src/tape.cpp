#include "drr/tape.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace drr::ad {

namespace {

// Extents of conv-family operands.
struct ConvDims {
  int c_out, c_in, n, w, pad;
};

int ceil_div(int a, int b) { return (a + b - 1) / b; }

}  // namespace

const char* op_name(Op op) {
  switch (op) {
    case Op::kParam: return "param";
    case Op::kInput: return "input";
    case Op::kConst: return "const";
    case Op::kAdd: return "add";
    case Op::kSub: return "sub";
    case Op::kMul: return "mul";
    case Op::kDiv: return "div";
    case Op::kNeg: return "neg";
    case Op::kScale: return "scale";
    case Op::kSum: return "sum";
    case Op::kBroadcast: return "broadcast";
    case Op::kRelu: return "relu";
    case Op::kReluMask: return "relu_mask";
    case Op::kAbs: return "abs";
    case Op::kSign: return "sign";
    case Op::kLog: return "log";
    case Op::kExp: return "exp";
    case Op::kClampMin: return "clamp_min";
    case Op::kClampMask: return "clamp_mask";
    case Op::kSoftmax: return "softmax";
    case Op::kIndex: return "index";
    case Op::kOneHot: return "one_hot";
    case Op::kReshape: return "reshape";
    case Op::kRowSum: return "row_sum";
    case Op::kBroadcastCols: return "broadcast_cols";
    case Op::kAddBias: return "add_bias";
    case Op::kMatVec: return "matvec";
    case Op::kMatTVec: return "mat_t_vec";
    case Op::kOuter: return "outer";
    case Op::kConv: return "conv1d";
    case Op::kConvInVjp: return "conv1d_input_vjp";
    case Op::kConvKerVjp: return "conv1d_kernel_vjp";
    case Op::kLocal: return "local1d";
    case Op::kLocalInVjp: return "local1d_input_vjp";
    case Op::kLocalWVjp: return "local1d_weight_vjp";
  }
  return "?";
}

std::string Shape::str() const {
  std::ostringstream ss;
  ss << '(';
  for (size_t i = 0; i < dims.size(); ++i) {
    if (i) ss << ',';
    ss << dims[i];
  }
  ss << ')';
  return ss.str();
}

std::string Tape::describe(NodeId id) const {
  const Node& n = nodes_[id];
  std::ostringstream ss;
  ss << '#' << id << ' ' << op_name(n.op) << ' ' << n.shape.str();
  if (!n.label.empty()) ss << " '" << n.label << "'";
  return ss.str();
}

NodeId Tape::check(NodeId id) const {
  if (id < 0 || id >= static_cast<NodeId>(nodes_.size()))
    throw ShapeError("tape: node id " + std::to_string(id) + " out of range");
  return id;
}

void Tape::require_shape(NodeId id, const Shape& expected, const char* ctx) const {
  if (!(nodes_[id].shape == expected))
    throw ShapeError(std::string("tape: ") + ctx + ": expected " + expected.str() + " at " +
                     describe(id));
}

NodeId Tape::emit(Node n) {
  const NodeId id = static_cast<NodeId>(nodes_.size());
  nodes_.push_back(std::move(n));
  eval(id);
  return id;
}

// --- leaves ------------------------------------------------------------------

NodeId Tape::param(Array value, Shape shape, std::string label) {
  if (value.size() != shape.size())
    throw ShapeError("tape: param '" + label + "': data length " + std::to_string(value.size()) +
                     " != shape " + shape.str());
  Node n;
  n.op = Op::kParam;
  n.shape = std::move(shape);
  n.value = std::move(value);
  n.label = std::move(label);
  return emit(std::move(n));
}

NodeId Tape::input(Array value, Shape shape, std::string label) {
  if (value.size() != shape.size())
    throw ShapeError("tape: input '" + label + "': data length " + std::to_string(value.size()) +
                     " != shape " + shape.str());
  Node n;
  n.op = Op::kInput;
  n.shape = std::move(shape);
  n.value = std::move(value);
  n.label = std::move(label);
  return emit(std::move(n));
}

NodeId Tape::constant(Array value, Shape shape) {
  if (value.size() != shape.size())
    throw ShapeError("tape: constant: data length " + std::to_string(value.size()) +
                     " != shape " + shape.str());
  Node n;
  n.op = Op::kConst;
  n.shape = std::move(shape);
  n.value = std::move(value);
  return emit(std::move(n));
}

NodeId Tape::constant_scalar(double v) {
  Array a(1);
  a[0] = v;
  return constant(std::move(a), Shape::scalar());
}

// --- emitters ----------------------------------------------------------------

NodeId Tape::add(NodeId a, NodeId b) {
  check(a);
  require_shape(b, nodes_[a].shape, "add");
  Node n;
  n.op = Op::kAdd;
  n.shape = nodes_[a].shape;
  n.a = a;
  n.b = b;
  return emit(std::move(n));
}

NodeId Tape::sub(NodeId a, NodeId b) {
  check(a);
  require_shape(b, nodes_[a].shape, "sub");
  Node n;
  n.op = Op::kSub;
  n.shape = nodes_[a].shape;
  n.a = a;
  n.b = b;
  return emit(std::move(n));
}

NodeId Tape::mul(NodeId a, NodeId b) {
  check(a);
  require_shape(b, nodes_[a].shape, "mul");
  Node n;
  n.op = Op::kMul;
  n.shape = nodes_[a].shape;
  n.a = a;
  n.b = b;
  return emit(std::move(n));
}

NodeId Tape::div(NodeId a, NodeId b) {
  check(a);
  require_shape(b, nodes_[a].shape, "div");
  Node n;
  n.op = Op::kDiv;
  n.shape = nodes_[a].shape;
  n.a = a;
  n.b = b;
  return emit(std::move(n));
}

NodeId Tape::neg(NodeId a) {
  check(a);
  Node n;
  n.op = Op::kNeg;
  n.shape = nodes_[a].shape;
  n.a = a;
  return emit(std::move(n));
}

NodeId Tape::scale(NodeId a, double c) {
  check(a);
  Node n;
  n.op = Op::kScale;
  n.shape = nodes_[a].shape;
  n.a = a;
  n.c = c;
  return emit(std::move(n));
}

NodeId Tape::sum(NodeId a) {
  check(a);
  Node n;
  n.op = Op::kSum;
  n.shape = Shape::scalar();
  n.a = a;
  return emit(std::move(n));
}

NodeId Tape::broadcast(NodeId scalar, const Shape& to) {
  require_shape(scalar, Shape::scalar(), "broadcast");
  Node n;
  n.op = Op::kBroadcast;
  n.shape = to;
  n.a = scalar;
  return emit(std::move(n));
}

NodeId Tape::relu(NodeId a) {
  check(a);
  Node n;
  n.op = Op::kRelu;
  n.shape = nodes_[a].shape;
  n.a = a;
  return emit(std::move(n));
}

NodeId Tape::relu_mask(NodeId a) {
  check(a);
  Node n;
  n.op = Op::kReluMask;
  n.shape = nodes_[a].shape;
  n.a = a;
  return emit(std::move(n));
}

NodeId Tape::abs(NodeId a) {
  check(a);
  Node n;
  n.op = Op::kAbs;
  n.shape = nodes_[a].shape;
  n.a = a;
  return emit(std::move(n));
}

NodeId Tape::sign(NodeId a) {
  check(a);
  Node n;
  n.op = Op::kSign;
  n.shape = nodes_[a].shape;
  n.a = a;
  return emit(std::move(n));
}

NodeId Tape::log(NodeId a) {
  check(a);
  Node n;
  n.op = Op::kLog;
  n.shape = nodes_[a].shape;
  n.a = a;
  return emit(std::move(n));
}

NodeId Tape::exp(NodeId a) {
  check(a);
  Node n;
  n.op = Op::kExp;
  n.shape = nodes_[a].shape;
  n.a = a;
  return emit(std::move(n));
}

NodeId Tape::clamp_min(NodeId a, double floor) {
  check(a);
  Node n;
  n.op = Op::kClampMin;
  n.shape = nodes_[a].shape;
  n.a = a;
  n.c = floor;
  return emit(std::move(n));
}

NodeId Tape::clamp_mask(NodeId a, double floor) {
  check(a);
  Node n;
  n.op = Op::kClampMask;
  n.shape = nodes_[a].shape;
  n.a = a;
  n.c = floor;
  return emit(std::move(n));
}

NodeId Tape::softmax(NodeId a) {
  check(a);
  if (nodes_[a].shape.rank() != 1)
    throw ShapeError("tape: softmax needs a rank-1 operand, got " + describe(a));
  Node n;
  n.op = Op::kSoftmax;
  n.shape = nodes_[a].shape;
  n.a = a;
  return emit(std::move(n));
}

NodeId Tape::index(NodeId a, int i) {
  check(a);
  if (nodes_[a].shape.rank() != 1)
    throw ShapeError("tape: index needs a rank-1 operand, got " + describe(a));
  if (i < 0 || i >= nodes_[a].shape.dims[0])
    throw ShapeError("tape: index " + std::to_string(i) + " out of bounds for " + describe(a));
  Node n;
  n.op = Op::kIndex;
  n.shape = Shape::scalar();
  n.a = a;
  n.i0 = i;
  return emit(std::move(n));
}

NodeId Tape::one_hot(NodeId scalar, int i, int len) {
  require_shape(scalar, Shape::scalar(), "one_hot");
  if (i < 0 || i >= len) throw ShapeError("tape: one_hot index out of bounds");
  Node n;
  n.op = Op::kOneHot;
  n.shape = Shape::vec(len);
  n.a = scalar;
  n.i0 = i;
  return emit(std::move(n));
}

NodeId Tape::reshape(NodeId a, const Shape& to) {
  check(a);
  if (nodes_[a].shape.size() != to.size())
    throw ShapeError("tape: reshape to " + to.str() + " changes element count of " + describe(a));
  Node n;
  n.op = Op::kReshape;
  n.shape = to;
  n.a = a;
  return emit(std::move(n));
}

NodeId Tape::row_sum(NodeId a) {
  check(a);
  if (nodes_[a].shape.rank() != 2)
    throw ShapeError("tape: row_sum needs a rank-2 operand, got " + describe(a));
  Node n;
  n.op = Op::kRowSum;
  n.shape = Shape::vec(nodes_[a].shape.dims[0]);
  n.a = a;
  return emit(std::move(n));
}

NodeId Tape::broadcast_cols(NodeId a, int cols) {
  check(a);
  if (nodes_[a].shape.rank() != 1)
    throw ShapeError("tape: broadcast_cols needs a rank-1 operand, got " + describe(a));
  Node n;
  n.op = Op::kBroadcastCols;
  n.shape = Shape::mat(nodes_[a].shape.dims[0], cols);
  n.a = a;
  return emit(std::move(n));
}

NodeId Tape::add_bias(NodeId mat, NodeId bias) {
  check(mat);
  if (nodes_[mat].shape.rank() != 2)
    throw ShapeError("tape: add_bias needs a rank-2 operand, got " + describe(mat));
  require_shape(bias, Shape::vec(nodes_[mat].shape.dims[0]), "add_bias");
  Node n;
  n.op = Op::kAddBias;
  n.shape = nodes_[mat].shape;
  n.a = mat;
  n.b = bias;
  return emit(std::move(n));
}

NodeId Tape::matvec(NodeId w, NodeId x) {
  check(w);
  if (nodes_[w].shape.rank() != 2)
    throw ShapeError("tape: matvec needs a rank-2 matrix, got " + describe(w));
  require_shape(x, Shape::vec(nodes_[w].shape.dims[1]), "matvec");
  Node n;
  n.op = Op::kMatVec;
  n.shape = Shape::vec(nodes_[w].shape.dims[0]);
  n.a = w;
  n.b = x;
  return emit(std::move(n));
}

NodeId Tape::mat_t_vec(NodeId w, NodeId y) {
  check(w);
  if (nodes_[w].shape.rank() != 2)
    throw ShapeError("tape: mat_t_vec needs a rank-2 matrix, got " + describe(w));
  require_shape(y, Shape::vec(nodes_[w].shape.dims[0]), "mat_t_vec");
  Node n;
  n.op = Op::kMatTVec;
  n.shape = Shape::vec(nodes_[w].shape.dims[1]);
  n.a = w;
  n.b = y;
  return emit(std::move(n));
}

NodeId Tape::outer(NodeId u, NodeId v) {
  check(u);
  check(v);
  if (nodes_[u].shape.rank() != 1 || nodes_[v].shape.rank() != 1)
    throw ShapeError("tape: outer needs rank-1 operands, got " + describe(u) + " and " +
                     describe(v));
  Node n;
  n.op = Op::kOuter;
  n.shape = Shape::mat(nodes_[u].shape.dims[0], nodes_[v].shape.dims[0]);
  n.a = u;
  n.b = v;
  return emit(std::move(n));
}

namespace {

void require_odd_width(int w) {
  if (w < 1 || w % 2 == 0)
    throw ShapeError("tape: kernel width must be odd and positive, got " + std::to_string(w));
}

}  // namespace

NodeId Tape::conv1d(NodeId x, NodeId kernel) {
  check(x);
  check(kernel);
  const Shape& xs = nodes_[x].shape;
  const Shape& ks = nodes_[kernel].shape;
  if (xs.rank() != 2 || ks.rank() != 3 || ks.dims[1] != xs.dims[0])
    throw ShapeError("tape: conv1d: incompatible " + describe(x) + " and " + describe(kernel));
  require_odd_width(ks.dims[2]);
  Node n;
  n.op = Op::kConv;
  n.shape = Shape::mat(ks.dims[0], xs.dims[1]);
  n.a = x;
  n.b = kernel;
  return emit(std::move(n));
}

NodeId Tape::conv1d_input_vjp(NodeId g, NodeId kernel) {
  check(g);
  check(kernel);
  const Shape& gs = nodes_[g].shape;
  const Shape& ks = nodes_[kernel].shape;
  if (gs.rank() != 2 || ks.rank() != 3 || ks.dims[0] != gs.dims[0])
    throw ShapeError("tape: conv1d_input_vjp: incompatible " + describe(g) + " and " +
                     describe(kernel));
  require_odd_width(ks.dims[2]);
  Node n;
  n.op = Op::kConvInVjp;
  n.shape = Shape::mat(ks.dims[1], gs.dims[1]);
  n.a = g;
  n.b = kernel;
  return emit(std::move(n));
}

NodeId Tape::conv1d_kernel_vjp(NodeId x, NodeId g, int width) {
  check(x);
  check(g);
  const Shape& xs = nodes_[x].shape;
  const Shape& gs = nodes_[g].shape;
  if (xs.rank() != 2 || gs.rank() != 2 || xs.dims[1] != gs.dims[1])
    throw ShapeError("tape: conv1d_kernel_vjp: incompatible " + describe(x) + " and " +
                     describe(g));
  require_odd_width(width);
  Node n;
  n.op = Op::kConvKerVjp;
  n.shape = Shape::rank3(gs.dims[0], xs.dims[0], width);
  n.a = x;
  n.b = g;
  n.i1 = width;
  return emit(std::move(n));
}

NodeId Tape::local1d(NodeId x, NodeId weights, int stride) {
  check(x);
  check(weights);
  const Shape& xs = nodes_[x].shape;
  const Shape& ws = nodes_[weights].shape;
  if (stride < 1) throw ShapeError("tape: local1d: stride must be >= 1");
  if (xs.rank() != 2 || ws.rank() != 4 || ws.dims[2] != xs.dims[0] ||
      ws.dims[1] != ceil_div(xs.dims[1], stride))
    throw ShapeError("tape: local1d: incompatible " + describe(x) + " and " + describe(weights));
  require_odd_width(ws.dims[3]);
  Node n;
  n.op = Op::kLocal;
  n.shape = Shape::mat(ws.dims[0], ws.dims[1]);
  n.a = x;
  n.b = weights;
  n.i0 = stride;
  return emit(std::move(n));
}

NodeId Tape::local1d_input_vjp(NodeId g, NodeId weights, int stride, int input_len) {
  check(g);
  check(weights);
  const Shape& gs = nodes_[g].shape;
  const Shape& ws = nodes_[weights].shape;
  if (stride < 1) throw ShapeError("tape: local1d_input_vjp: stride must be >= 1");
  if (gs.rank() != 2 || ws.rank() != 4 || ws.dims[0] != gs.dims[0] || ws.dims[1] != gs.dims[1] ||
      ws.dims[1] != ceil_div(input_len, stride))
    throw ShapeError("tape: local1d_input_vjp: incompatible " + describe(g) + " and " +
                     describe(weights));
  require_odd_width(ws.dims[3]);
  Node n;
  n.op = Op::kLocalInVjp;
  n.shape = Shape::mat(ws.dims[2], input_len);
  n.a = g;
  n.b = weights;
  n.i0 = stride;
  return emit(std::move(n));
}

NodeId Tape::local1d_weight_vjp(NodeId x, NodeId g, int stride, int width) {
  check(x);
  check(g);
  const Shape& xs = nodes_[x].shape;
  const Shape& gs = nodes_[g].shape;
  if (stride < 1) throw ShapeError("tape: local1d_weight_vjp: stride must be >= 1");
  if (xs.rank() != 2 || gs.rank() != 2 || gs.dims[1] != ceil_div(xs.dims[1], stride))
    throw ShapeError("tape: local1d_weight_vjp: incompatible " + describe(x) + " and " +
                     describe(g));
  require_odd_width(width);
  Node n;
  n.op = Op::kLocalWVjp;
  n.shape = Shape::rank4(gs.dims[0], gs.dims[1], xs.dims[0], width);
  n.a = x;
  n.b = g;
  n.i0 = stride;
  n.i1 = width;
  return emit(std::move(n));
}

// --- evaluation ----------------------------------------------------------------

void Tape::eval(NodeId id) {
  Node& n = nodes_[id];
  const auto A = [&]() -> const Array& { return nodes_[n.a].value; };
  const auto B = [&]() -> const Array& { return nodes_[n.b].value; };

  switch (n.op) {
    case Op::kParam:
    case Op::kInput:
    case Op::kConst:
      return;  // leaves keep their bound value

    case Op::kAdd: n.value = A() + B(); return;
    case Op::kSub: n.value = A() - B(); return;
    case Op::kMul: n.value = A() * B(); return;
    case Op::kDiv: n.value = A() / B(); return;
    case Op::kNeg: n.value = -A(); return;
    case Op::kScale: n.value = n.c * A(); return;

    case Op::kSum: {
      n.value.resize(1);
      n.value[0] = A().sum();
      return;
    }
    case Op::kBroadcast: {
      n.value.resize(n.shape.size());
      n.value.setConstant(A()[0]);
      return;
    }
    case Op::kRelu: n.value = A().max(0.0); return;
    case Op::kReluMask: n.value = (A() > 0.0).cast<double>(); return;
    case Op::kAbs: n.value = A().abs(); return;
    case Op::kSign: n.value = A().sign(); return;
    case Op::kLog: n.value = A().log(); return;
    case Op::kExp: n.value = A().exp(); return;
    case Op::kClampMin: n.value = A().max(n.c); return;
    case Op::kClampMask: n.value = (A() >= n.c).cast<double>(); return;

    case Op::kSoftmax: {
      const Array& z = A();
      const double m = z.maxCoeff();
      n.value = (z - m).exp();
      n.value /= n.value.sum();
      return;
    }
    case Op::kIndex: {
      n.value.resize(1);
      n.value[0] = A()[n.i0];
      return;
    }
    case Op::kOneHot: {
      n.value.setZero(n.shape.size());
      n.value[n.i0] = A()[0];
      return;
    }
    case Op::kReshape: n.value = A(); return;

    case Op::kRowSum: {
      const int rows = nodes_[n.a].shape.dims[0];
      const int cols = nodes_[n.a].shape.dims[1];
      n.value.resize(rows);
      for (int r = 0; r < rows; ++r) n.value[r] = A().segment(r * cols, cols).sum();
      return;
    }
    case Op::kBroadcastCols: {
      const int rows = n.shape.dims[0];
      const int cols = n.shape.dims[1];
      n.value.resize(n.shape.size());
      for (int r = 0; r < rows; ++r) n.value.segment(r * cols, cols).setConstant(A()[r]);
      return;
    }
    case Op::kAddBias: {
      const int rows = n.shape.dims[0];
      const int cols = n.shape.dims[1];
      n.value = A();
      for (int r = 0; r < rows; ++r) n.value.segment(r * cols, cols) += B()[r];
      return;
    }

    case Op::kMatVec: {
      const int m = n.shape.dims[0];
      const int k = nodes_[n.a].shape.dims[1];
      n.value.resize(m);
      ConstMatMap w(A().data(), m, k);
      VecMap(n.value.data(), m) = w * ConstVecMap(B().data(), k);
      return;
    }
    case Op::kMatTVec: {
      const int m = nodes_[n.a].shape.dims[0];
      const int k = n.shape.dims[0];
      n.value.resize(k);
      ConstMatMap w(A().data(), m, k);
      VecMap(n.value.data(), k) = w.transpose() * ConstVecMap(B().data(), m);
      return;
    }
    case Op::kOuter: {
      const int m = n.shape.dims[0];
      const int k = n.shape.dims[1];
      n.value.resize(n.shape.size());
      MatMap(n.value.data(), m, k) =
          ConstVecMap(A().data(), m) * ConstVecMap(B().data(), k).transpose();
      return;
    }

    // y[o,t] = sum_{i,u} K[o,i,u] * x[i, t+u-pad]
    case Op::kConv: {
      const Shape& ks = nodes_[n.b].shape;
      const ConvDims d{ks.dims[0], ks.dims[1], nodes_[n.a].shape.dims[1], ks.dims[2],
                       (ks.dims[2] - 1) / 2};
      const Array& x = A();
      const Array& k = B();
      n.value.setZero(n.shape.size());
      for (int o = 0; o < d.c_out; ++o)
        for (int i = 0; i < d.c_in; ++i)
          for (int u = 0; u < d.w; ++u) {
            const double kv = k[(o * d.c_in + i) * d.w + u];
            const int t_lo = std::max(0, d.pad - u);
            const int t_hi = std::min(d.n, d.n + d.pad - u);
            if (t_lo >= t_hi) continue;
            n.value.segment(o * d.n + t_lo, t_hi - t_lo) +=
                kv * x.segment(i * d.n + t_lo + u - d.pad, t_hi - t_lo);
          }
      return;
    }
    // dx[i,p] = sum_{o,u} K[o,i,u] * g[o, p+pad-u]
    case Op::kConvInVjp: {
      const Shape& ks = nodes_[n.b].shape;
      const ConvDims d{ks.dims[0], ks.dims[1], nodes_[n.a].shape.dims[1], ks.dims[2],
                       (ks.dims[2] - 1) / 2};
      const Array& g = A();
      const Array& k = B();
      n.value.setZero(n.shape.size());
      for (int o = 0; o < d.c_out; ++o)
        for (int i = 0; i < d.c_in; ++i)
          for (int u = 0; u < d.w; ++u) {
            const double kv = k[(o * d.c_in + i) * d.w + u];
            const int p_lo = std::max(0, u - d.pad);
            const int p_hi = std::min(d.n, d.n + u - d.pad);
            if (p_lo >= p_hi) continue;
            n.value.segment(i * d.n + p_lo, p_hi - p_lo) +=
                kv * g.segment(o * d.n + p_lo + d.pad - u, p_hi - p_lo);
          }
      return;
    }
    // dK[o,i,u] = sum_t x[i, t+u-pad] * g[o, t]
    case Op::kConvKerVjp: {
      const ConvDims d{n.shape.dims[0], n.shape.dims[1], nodes_[n.a].shape.dims[1], n.shape.dims[2],
                       (n.shape.dims[2] - 1) / 2};
      const Array& x = A();
      const Array& g = B();
      n.value.setZero(n.shape.size());
      for (int o = 0; o < d.c_out; ++o)
        for (int i = 0; i < d.c_in; ++i)
          for (int u = 0; u < d.w; ++u) {
            const int t_lo = std::max(0, d.pad - u);
            const int t_hi = std::min(d.n, d.n + d.pad - u);
            if (t_lo >= t_hi) continue;
            n.value[(o * d.c_in + i) * d.w + u] =
                (x.segment(i * d.n + t_lo + u - d.pad, t_hi - t_lo) *
                 g.segment(o * d.n + t_lo, t_hi - t_lo))
                    .sum();
          }
      return;
    }

    // y[o,j] = sum_{i,u} W[o,j,i,u] * x[i, j*s+u-pad]
    case Op::kLocal: {
      const Shape& ws = nodes_[n.b].shape;
      const int c_out = ws.dims[0], l_out = ws.dims[1], c_in = ws.dims[2], w = ws.dims[3];
      const int len = nodes_[n.a].shape.dims[1], s = n.i0, pad = (w - 1) / 2;
      const Array& x = A();
      const Array& wt = B();
      n.value.setZero(n.shape.size());
      for (int o = 0; o < c_out; ++o)
        for (int j = 0; j < l_out; ++j) {
          const int base = j * s - pad;
          const int u_lo = std::max(0, -base);
          const int u_hi = std::min(w, len - base);
          if (u_lo >= u_hi) continue;
          double acc = 0.0;
          for (int i = 0; i < c_in; ++i)
            acc += (wt.segment(((o * l_out + j) * c_in + i) * w + u_lo, u_hi - u_lo) *
                    x.segment(i * len + base + u_lo, u_hi - u_lo))
                       .sum();
          n.value[o * l_out + j] = acc;
        }
      return;
    }
    // dx[i,p] += W[o,j,i,u] * g[o,j] over all (o,j,u) with j*s+u-pad = p
    case Op::kLocalInVjp: {
      const Shape& ws = nodes_[n.b].shape;
      const int c_out = ws.dims[0], l_out = ws.dims[1], c_in = ws.dims[2], w = ws.dims[3];
      const int len = n.shape.dims[1], s = n.i0, pad = (w - 1) / 2;
      const Array& g = A();
      const Array& wt = B();
      n.value.setZero(n.shape.size());
      for (int o = 0; o < c_out; ++o)
        for (int j = 0; j < l_out; ++j) {
          const double gv = g[o * l_out + j];
          const int base = j * s - pad;
          const int u_lo = std::max(0, -base);
          const int u_hi = std::min(w, len - base);
          if (u_lo >= u_hi) continue;
          for (int i = 0; i < c_in; ++i)
            n.value.segment(i * len + base + u_lo, u_hi - u_lo) +=
                gv * wt.segment(((o * l_out + j) * c_in + i) * w + u_lo, u_hi - u_lo);
        }
      return;
    }
    // dW[o,j,i,u] = x[i, j*s+u-pad] * g[o,j]
    case Op::kLocalWVjp: {
      const int c_out = n.shape.dims[0], l_out = n.shape.dims[1], c_in = n.shape.dims[2],
                w = n.shape.dims[3];
      const int len = nodes_[n.a].shape.dims[1], s = n.i0, pad = (w - 1) / 2;
      const Array& x = A();
      const Array& g = B();
      n.value.setZero(n.shape.size());
      for (int o = 0; o < c_out; ++o)
        for (int j = 0; j < l_out; ++j) {
          const double gv = g[o * l_out + j];
          const int base = j * s - pad;
          const int u_lo = std::max(0, -base);
          const int u_hi = std::min(w, len - base);
          if (u_lo >= u_hi) continue;
          for (int i = 0; i < c_in; ++i)
            n.value.segment(((o * l_out + j) * c_in + i) * w + u_lo, u_hi - u_lo) =
                gv * x.segment(i * len + base + u_lo, u_hi - u_lo);
        }
      return;
    }
  }
  throw NumericError("tape: no evaluation rule for op " + std::string(op_name(n.op)));
}

void Tape::forward(std::span<const std::pair<NodeId, Array>> bindings) {
  for (const auto& [id, value] : bindings) {
    Node& n = nodes_[check(id)];
    if (n.op != Op::kParam && n.op != Op::kInput)
      throw ShapeError("tape: forward binding targets non-leaf " + describe(id));
    if (value.size() != n.shape.size())
      throw ShapeError("tape: forward binding for " + describe(id) + ": data length " +
                       std::to_string(value.size()) + " != shape " + n.shape.str());
    n.value = value;
  }
  for (NodeId id = 0; id < static_cast<NodeId>(nodes_.size()); ++id) eval(id);
}

// --- reverse pass ---------------------------------------------------------------

std::vector<NodeId> Tape::gradient(NodeId target, std::span<const NodeId> wrt) {
  check(target);
  if (!nodes_[target].shape.is_scalar())
    throw ShapeError("tape: gradient target must be scalar, got " + describe(target));

  const NodeId frontier = static_cast<NodeId>(nodes_.size());

  // ancestors of the target
  std::vector<char> anc(frontier, 0);
  anc[target] = 1;
  for (NodeId i = target; i >= 0; --i) {
    if (!anc[i]) continue;
    const Node& n = nodes_[i];
    if (n.a != kNoNode) anc[n.a] = 1;
    if (n.b != kNoNode) anc[n.b] = 1;
  }
  // descendants of the requested nodes
  std::vector<char> dsc(frontier, 0);
  for (NodeId w : wrt) dsc[check(w)] = 1;
  for (NodeId i = 0; i < frontier; ++i) {
    const Node& n = nodes_[i];
    if ((n.a != kNoNode && dsc[n.a]) || (n.b != kNoNode && dsc[n.b])) dsc[i] = 1;
  }
  std::vector<char> need(frontier, 0);
  for (NodeId i = 0; i < frontier; ++i) need[i] = anc[i] && dsc[i];

  std::vector<NodeId> adj(frontier, kNoNode);
  adj[target] = constant_scalar(1.0);

  const auto accumulate = [&](NodeId parent, NodeId contrib) {
    adj[parent] = (adj[parent] == kNoNode) ? contrib : add(adj[parent], contrib);
  };

  for (NodeId i = target; i >= 0; --i) {
    if (adj[i] == kNoNode || !need[i]) continue;
    const Node n = nodes_[i];  // copy: emitting vjp nodes may reallocate
    const NodeId g = adj[i];
    const bool want_a = n.a != kNoNode && need[n.a];
    const bool want_b = n.b != kNoNode && need[n.b];
    if (!want_a && !want_b) continue;

    switch (n.op) {
      case Op::kAdd:
        if (want_a) accumulate(n.a, g);
        if (want_b) accumulate(n.b, g);
        break;
      case Op::kSub:
        if (want_a) accumulate(n.a, g);
        if (want_b) accumulate(n.b, neg(g));
        break;
      case Op::kMul:
        if (want_a) accumulate(n.a, mul(g, n.b));
        if (want_b) accumulate(n.b, mul(g, n.a));
        break;
      case Op::kDiv:
        if (want_a) accumulate(n.a, div(g, n.b));
        if (want_b) accumulate(n.b, neg(mul(g, div(i, n.b))));
        break;
      case Op::kNeg:
        if (want_a) accumulate(n.a, neg(g));
        break;
      case Op::kScale:
        if (want_a) accumulate(n.a, scale(g, n.c));
        break;
      case Op::kSum:
        if (want_a) accumulate(n.a, broadcast(g, nodes_[n.a].shape));
        break;
      case Op::kBroadcast:
        if (want_a) accumulate(n.a, sum(g));
        break;
      case Op::kRelu:
        if (want_a) accumulate(n.a, mul(g, relu_mask(n.a)));
        break;
      case Op::kAbs:
        if (want_a) accumulate(n.a, mul(g, sign(n.a)));
        break;
      case Op::kReluMask:
      case Op::kSign:
      case Op::kClampMask:
        break;  // zero almost everywhere; kink term dropped
      case Op::kLog:
        if (want_a) accumulate(n.a, div(g, n.a));
        break;
      case Op::kExp:
        if (want_a) accumulate(n.a, mul(g, i));
        break;
      case Op::kClampMin:
        if (want_a) accumulate(n.a, mul(g, clamp_mask(n.a, n.c)));
        break;
      case Op::kSoftmax: {
        // dz = y .* (g - <g, y>)
        if (want_a) {
          const NodeId dot = sum(mul(g, i));
          accumulate(n.a, mul(i, sub(g, broadcast(dot, n.shape))));
        }
        break;
      }
      case Op::kIndex:
        if (want_a) accumulate(n.a, one_hot(g, n.i0, nodes_[n.a].shape.dims[0]));
        break;
      case Op::kOneHot:
        if (want_a) accumulate(n.a, index(g, n.i0));
        break;
      case Op::kReshape:
        if (want_a) accumulate(n.a, reshape(g, nodes_[n.a].shape));
        break;
      case Op::kRowSum:
        if (want_a) accumulate(n.a, broadcast_cols(g, nodes_[n.a].shape.dims[1]));
        break;
      case Op::kBroadcastCols:
        if (want_a) accumulate(n.a, row_sum(g));
        break;
      case Op::kAddBias:
        if (want_a) accumulate(n.a, g);
        if (want_b) accumulate(n.b, row_sum(g));
        break;
      case Op::kMatVec:
        if (want_a) accumulate(n.a, outer(g, n.b));
        if (want_b) accumulate(n.b, mat_t_vec(n.a, g));
        break;
      case Op::kMatTVec:
        if (want_a) accumulate(n.a, outer(n.b, g));
        if (want_b) accumulate(n.b, matvec(n.a, g));
        break;
      case Op::kOuter:
        if (want_a) accumulate(n.a, matvec(g, n.b));
        if (want_b) accumulate(n.b, mat_t_vec(g, n.a));
        break;
      case Op::kConv:
        if (want_a) accumulate(n.a, conv1d_input_vjp(g, n.b));
        if (want_b) accumulate(n.b, conv1d_kernel_vjp(n.a, g, nodes_[n.b].shape.dims[2]));
        break;
      case Op::kConvInVjp:
        if (want_a) accumulate(n.a, conv1d(g, n.b));
        if (want_b) accumulate(n.b, conv1d_kernel_vjp(g, n.a, nodes_[n.b].shape.dims[2]));
        break;
      case Op::kConvKerVjp:
        if (want_a) accumulate(n.a, conv1d_input_vjp(n.b, g));
        if (want_b) accumulate(n.b, conv1d(n.a, g));
        break;
      case Op::kLocal:
        if (want_a) accumulate(n.a, local1d_input_vjp(g, n.b, n.i0, nodes_[n.a].shape.dims[1]));
        if (want_b) accumulate(n.b, local1d_weight_vjp(n.a, g, n.i0, nodes_[n.b].shape.dims[3]));
        break;
      case Op::kLocalInVjp:
        if (want_a) accumulate(n.a, local1d(g, n.b, n.i0));
        if (want_b) accumulate(n.b, local1d_weight_vjp(g, n.a, n.i0, nodes_[n.b].shape.dims[3]));
        break;
      case Op::kLocalWVjp:
        if (want_a) accumulate(n.a, local1d_input_vjp(n.b, g, n.i0, nodes_[n.a].shape.dims[1]));
        if (want_b) accumulate(n.b, local1d(n.a, g, n.i0));
        break;
      case Op::kParam:
      case Op::kInput:
      case Op::kConst:
        break;
      default:
        throw NumericError("tape: op " + std::string(op_name(n.op)) +
                           " has no registered derivative");
    }
  }

  std::vector<NodeId> out;
  out.reserve(wrt.size());
  for (NodeId w : wrt) {
    if (adj[w] != kNoNode) {
      out.push_back(adj[w]);
    } else {
      // unreachable leaf: the target does not depend on it
      Array z;
      z.setZero(nodes_[w].shape.size());
      out.push_back(constant(std::move(z), nodes_[w].shape));
    }
  }
  return out;
}

// --- finite differences -----------------------------------------------------------

FiniteDiffReport finite_difference_check(const std::function<double(const Vector&)>& f,
                                         const Vector& analytic_grad, const Vector& x, double step,
                                         double eps_abs) {
  if (!(step > 0.0)) throw ConfigError("finite_difference_check: step must be positive");
  if (analytic_grad.size() != x.size())
    throw ShapeError("finite_difference_check: gradient length " +
                     std::to_string(analytic_grad.size()) + " != point length " +
                     std::to_string(x.size()));

  const double f0 = f(x);
  if (!std::isfinite(f0)) throw NumericError("finite_difference_check: f(x) is not finite");

  FiniteDiffReport rep;
  rep.rel_errors.assign(static_cast<size_t>(x.size()), std::nan(""));
  Vector xp = x;
  for (int i = 0; i < x.size(); ++i) {
    xp(i) = x(i) + step;
    const double fp = f(xp);
    xp(i) = x(i) - step;
    const double fm = f(xp);
    xp(i) = x(i);
    if (!std::isfinite(fp) || !std::isfinite(fm))
      throw NumericError("finite_difference_check: non-finite value at coordinate " +
                         std::to_string(i));

    const double fwd = (fp - f0) / step;
    const double bwd = (f0 - fm) / step;
    // One-sided slopes agree to O(step) for smooth f; a gap far beyond that
    // means a kink crossed the stencil, and the central difference is
    // meaningless there.
    const double noise_floor = 1e-12 * (1.0 + std::abs(f0)) / step;
    if (std::abs(fwd - bwd) > 0.1 * (std::abs(fwd) + std::abs(bwd)) + noise_floor) {
      rep.excluded.push_back(i);
      continue;
    }
    const double central = (fp - fm) / (2.0 * step);
    const double rel = std::abs(analytic_grad(i) - central) / (std::abs(analytic_grad(i)) + eps_abs);
    rep.rel_errors[static_cast<size_t>(i)] = rel;
    rep.max_rel_error = std::max(rep.max_rel_error, rel);
    ++rep.checked;
  }
  return rep;
}

}  // namespace drr::ad
