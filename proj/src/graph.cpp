#include "cadp/graph.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <random>

#include "cadp/rng.hpp"

namespace cadp {

std::string_view op_name(OpKind kind) {
  switch (kind) {
    case OpKind::kInput: return "input";
    case OpKind::kParameter: return "parameter";
    case OpKind::kMatMul: return "matmul";
    case OpKind::kAdd: return "add";
    case OpKind::kScale: return "scale";
    case OpKind::kConv2d3x3: return "conv2d-3x3-same";
    case OpKind::kMaxPool2x2: return "maxpool-2x2-stride2";
    case OpKind::kGlobalAvgPool: return "global-avg-pool";
    case OpKind::kLeakyRelu: return "leaky-relu";
    case OpKind::kRelu: return "relu";
    case OpKind::kSigmoid: return "sigmoid";
    case OpKind::kSoftmax: return "softmax";
    case OpKind::kLogSoftmax: return "log-softmax";
    case OpKind::kMul: return "elementwise-mul";
    case OpKind::kSum: return "sum";
    case OpKind::kMean: return "mean";
    case OpKind::kDropout: return "dropout";
    case OpKind::kGaussianNoise: return "gaussian-noise";
    case OpKind::kBatchNorm: return "batchnorm";
    case OpKind::kInstanceNorm: return "instance-norm";
    case OpKind::kReshape: return "reshape";
    case OpKind::kConcat: return "concat";
    case OpKind::kLog: return "log";
    case OpKind::kDetach: return "detach";
  }
  return "unknown";
}

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using MapConstMat = Eigen::Map<const RowMat<T>>;

std::string shape_msg(OpKind kind, std::initializer_list<Shape> shapes, const std::string& detail) {
  std::string msg(op_name(kind));
  msg += ": ";
  msg += detail;
  msg += " (operands";
  for (const auto& s : shapes) msg += " " + to_string(s);
  msg += ")";
  return msg;
}

// Lays out the 3x3 receptive fields of one [C, H, W] sample as a
// [C*9, H*W] matrix with zero padding.
template <typename T>
void im2col3x3(const T* x, std::size_t C, std::size_t H, std::size_t W, T* cols) {
  const std::size_t HW = H * W;
  for (std::size_t c = 0; c < C; ++c) {
    const T* plane = x + c * HW;
    for (int ky = 0; ky < 3; ++ky) {
      for (int kx = 0; kx < 3; ++kx) {
        T* out = cols + ((c * 3 + ky) * 3 + kx) * HW;
        const int dx = kx - 1;
        for (std::size_t y = 0; y < H; ++y) {
          T* row = out + y * W;
          const long sy = static_cast<long>(y) + ky - 1;
          if (sy < 0 || sy >= static_cast<long>(H)) {
            std::fill(row, row + W, T{0});
            continue;
          }
          const T* src = plane + sy * W;
          if (dx == 0) {
            std::copy(src, src + W, row);
          } else if (dx < 0) {
            row[0] = T{0};
            std::copy(src, src + W - 1, row + 1);
          } else {
            std::copy(src + 1, src + W, row);
            row[W - 1] = T{0};
          }
        }
      }
    }
  }
}

template <typename T>
void col2im3x3(const T* cols, std::size_t C, std::size_t H, std::size_t W, T* dx) {
  const std::size_t HW = H * W;
  for (std::size_t c = 0; c < C; ++c) {
    T* plane = dx + c * HW;
    for (int ky = 0; ky < 3; ++ky) {
      for (int kx = 0; kx < 3; ++kx) {
        const T* in = cols + ((c * 3 + ky) * 3 + kx) * HW;
        const int dxo = kx - 1;
        for (std::size_t y = 0; y < H; ++y) {
          const long sy = static_cast<long>(y) + ky - 1;
          if (sy < 0 || sy >= static_cast<long>(H)) continue;
          const T* row = in + y * W;
          T* dst = plane + sy * W;
          if (dxo == 0) {
            for (std::size_t x = 0; x < W; ++x) dst[x] += row[x];
          } else if (dxo < 0) {
            for (std::size_t x = 1; x < W; ++x) dst[x - 1] += row[x];
          } else {
            for (std::size_t x = 0; x + 1 < W; ++x) dst[x + 1] += row[x];
          }
        }
      }
    }
  }
}

// Reductions with eight independent double accumulators, combined in a
// fixed order; deterministic and vectorizable.
template <typename T>
double lane_sum(const T* __restrict p, std::size_t n) {
  double acc[8] = {0, 0, 0, 0, 0, 0, 0, 0};
  std::size_t k = 0;
  for (; k + 8 <= n; k += 8)
    for (std::size_t j = 0; j < 8; ++j) acc[j] += static_cast<double>(p[k + j]);
  double tail = 0;
  for (; k < n; ++k) tail += static_cast<double>(p[k]);
  return ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail;
}

template <typename T>
double lane_sq_dev(const T* __restrict p, std::size_t n, double mu) {
  double acc[8] = {0, 0, 0, 0, 0, 0, 0, 0};
  std::size_t k = 0;
  for (; k + 8 <= n; k += 8)
    for (std::size_t j = 0; j < 8; ++j) {
      const double d = static_cast<double>(p[k + j]) - mu;
      acc[j] += d * d;
    }
  double tail = 0;
  for (; k < n; ++k) {
    const double d = static_cast<double>(p[k]) - mu;
    tail += d * d;
  }
  return ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail;
}

template <typename T>
double lane_dot(const T* __restrict a, const T* __restrict b, std::size_t n) {
  double acc[8] = {0, 0, 0, 0, 0, 0, 0, 0};
  std::size_t k = 0;
  for (; k + 8 <= n; k += 8)
    for (std::size_t j = 0; j < 8; ++j) acc[j] += static_cast<double>(a[k + j]) * static_cast<double>(b[k + j]);
  double tail = 0;
  for (; k < n; ++k) tail += static_cast<double>(a[k]) * static_cast<double>(b[k]);
  return ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail;
}

// Channel layout helper for batchnorm: axis 1 is the channel axis.
struct ChannelLayout {
  std::size_t n, c, inner;
  explicit ChannelLayout(const Shape& s)
      : n(s[0]), c(s[1]), inner(s.size() == 4 ? s[2] * s[3] : 1) {}
  std::size_t count() const { return n * inner; }
};

}  // namespace

template <typename T>
typename Graph<T>::Node& Graph<T>::node(Var v) {
  if (v.id < 0 || static_cast<std::size_t>(v.id) >= nodes_.size()) throw UsageError("graph: invalid node handle");
  return nodes_[v.id];
}

template <typename T>
const typename Graph<T>::Node& Graph<T>::node(Var v) const {
  if (v.id < 0 || static_cast<std::size_t>(v.id) >= nodes_.size()) throw UsageError("graph: invalid node handle");
  return nodes_[v.id];
}

template <typename T>
const Tensor<T>& Graph<T>::val(std::int32_t id) const {
  const Node& n = nodes_[id];
  return n.param ? n.param->value : n.value;
}

template <typename T>
Var Graph<T>::push(Node n) {
  if (n.kind != OpKind::kInput && n.kind != OpKind::kParameter && n.kind != OpKind::kDetach) {
    for (auto p : n.parents) n.needs_grad = n.needs_grad || nodes_[p].needs_grad;
  }
  nodes_.push_back(std::move(n));
  forward_done_ = false;
  return Var{static_cast<std::int32_t>(nodes_.size() - 1)};
}

template <typename T>
Var Graph<T>::input(const Shape& shape, bool requires_grad, std::string name) {
  Node n{};
  n.kind = OpKind::kInput;
  n.shape = shape;
  n.requires_grad = requires_grad;
  n.needs_grad = requires_grad;
  n.name = std::move(name);
  return push(std::move(n));
}

template <typename T>
Var Graph<T>::parameter(Parameter<T>& p, bool trainable) {
  trainable = trainable && p.trainable;
  auto& cache = trainable ? param_nodes_ : const_param_nodes_;
  if (auto it = cache.find(&p); it != cache.end()) return Var{it->second};
  Node n{};
  n.kind = OpKind::kParameter;
  n.shape = p.value.shape();
  n.param = &p;
  n.trainable = trainable;
  n.needs_grad = trainable;
  Var v = push(std::move(n));
  cache.emplace(&p, v.id);
  return v;
}

template <typename T>
Var Graph<T>::constant(Tensor<T> value) {
  Var v = input(value.shape(), false, "constant");
  bind(v, std::move(value));
  return v;
}

template <typename T>
Var Graph<T>::matmul(Var a, Var b) {
  const Shape& sa = shape(a);
  const Shape& sb = shape(b);
  if (sa.size() != 2 || sb.size() != 2 || sa[1] != sb[0]) {
    throw ShapeError(shape_msg(OpKind::kMatMul, {sa, sb}, "expected [N,K] x [K,M]"));
  }
  Node n{};
  n.kind = OpKind::kMatMul;
  n.parents = {a.id, b.id};
  n.shape = {sa[0], sb[1]};
  return push(std::move(n));
}

template <typename T>
Var Graph<T>::add(Var a, Var b) {
  const Shape& sa = shape(a);
  const Shape& sb = shape(b);
  const bool same = sa == sb;
  const bool row = sb.size() == 1 && !sa.empty() && sa.back() == sb[0];
  const bool scalar = numel(sb) == 1;
  if (!same && !row && !scalar) {
    throw ShapeError(shape_msg(OpKind::kAdd, {sa, sb}, "second operand must match, be a row vector, or a scalar"));
  }
  Node n{};
  n.kind = OpKind::kAdd;
  n.parents = {a.id, b.id};
  n.shape = sa;
  return push(std::move(n));
}

template <typename T>
Var Graph<T>::scale(Var a, T factor) {
  Node n{};
  n.kind = OpKind::kScale;
  n.parents = {a.id};
  n.shape = shape(a);
  n.attr = factor;
  return push(std::move(n));
}

template <typename T>
Var Graph<T>::conv3x3(Var x, Var weight) {
  const Shape& sx = shape(x);
  const Shape& sw = shape(weight);
  if (sx.size() != 4 || sw.size() != 4 || sw[1] != sx[1] || sw[2] != 3 || sw[3] != 3) {
    throw ShapeError(shape_msg(OpKind::kConv2d3x3, {sx, sw}, "expected input [N,C,H,W] and weight [O,C,3,3]"));
  }
  Node n{};
  n.kind = OpKind::kConv2d3x3;
  n.parents = {x.id, weight.id};
  n.shape = {sx[0], sw[0], sx[2], sx[3]};
  return push(std::move(n));
}

template <typename T>
Var Graph<T>::maxpool2x2(Var x) {
  const Shape& sx = shape(x);
  if (sx.size() != 4 || sx[2] < 2 || sx[3] < 2) {
    throw ShapeError(shape_msg(OpKind::kMaxPool2x2, {sx}, "expected [N,C,H,W] with H,W >= 2"));
  }
  Node n{};
  n.kind = OpKind::kMaxPool2x2;
  n.parents = {x.id};
  n.shape = {sx[0], sx[1], sx[2] / 2, sx[3] / 2};
  return push(std::move(n));
}

template <typename T>
Var Graph<T>::global_avg_pool(Var x) {
  const Shape& sx = shape(x);
  if (sx.size() != 4) throw ShapeError(shape_msg(OpKind::kGlobalAvgPool, {sx}, "expected [N,C,H,W]"));
  Node n{};
  n.kind = OpKind::kGlobalAvgPool;
  n.parents = {x.id};
  n.shape = {sx[0], sx[1]};
  return push(std::move(n));
}

namespace {
template <typename N>
N unary(OpKind kind, std::int32_t parent, const Shape& s) {
  N n{};
  n.kind = kind;
  n.parents = {parent};
  n.shape = s;
  return n;
}
}  // namespace

template <typename T>
Var Graph<T>::leaky_relu(Var x, T slope) {
  Node n = unary<Node>(OpKind::kLeakyRelu, x.id, shape(x));
  n.attr = slope;
  return push(std::move(n));
}

template <typename T>
Var Graph<T>::relu(Var x) {
  return push(unary<Node>(OpKind::kRelu, x.id, shape(x)));
}

template <typename T>
Var Graph<T>::sigmoid(Var x) {
  return push(unary<Node>(OpKind::kSigmoid, x.id, shape(x)));
}

template <typename T>
Var Graph<T>::softmax(Var x) {
  if (shape(x).empty()) throw ShapeError(shape_msg(OpKind::kSoftmax, {shape(x)}, "needs rank >= 1"));
  return push(unary<Node>(OpKind::kSoftmax, x.id, shape(x)));
}

template <typename T>
Var Graph<T>::log_softmax(Var x) {
  if (shape(x).empty()) throw ShapeError(shape_msg(OpKind::kLogSoftmax, {shape(x)}, "needs rank >= 1"));
  return push(unary<Node>(OpKind::kLogSoftmax, x.id, shape(x)));
}

template <typename T>
Var Graph<T>::mul(Var a, Var b) {
  if (shape(a) != shape(b)) throw ShapeError(shape_msg(OpKind::kMul, {shape(a), shape(b)}, "shapes differ"));
  Node n{};
  n.kind = OpKind::kMul;
  n.parents = {a.id, b.id};
  n.shape = shape(a);
  return push(std::move(n));
}

template <typename T>
Var Graph<T>::sum(Var x) {
  return push(unary<Node>(OpKind::kSum, x.id, Shape{1}));
}

template <typename T>
Var Graph<T>::mean(Var x) {
  return push(unary<Node>(OpKind::kMean, x.id, Shape{1}));
}

template <typename T>
Var Graph<T>::dropout(Var x, T p, std::uint64_t stream) {
  if (!(p >= T{0} && p < T{1})) throw UsageError("dropout: rate must lie in [0, 1)");
  Node n = unary<Node>(OpKind::kDropout, x.id, shape(x));
  n.attr = p;
  n.stream = stream;
  return push(std::move(n));
}

template <typename T>
Var Graph<T>::gaussian_noise(Var x, T sigma, std::uint64_t stream) {
  if (!(sigma >= T{0})) throw UsageError("gaussian-noise: sigma must be non-negative");
  Node n = unary<Node>(OpKind::kGaussianNoise, x.id, shape(x));
  n.attr = sigma;
  n.stream = stream;
  return push(std::move(n));
}

template <typename T>
Var Graph<T>::batchnorm(Var x, Var gamma, Var beta, Parameter<T>& running_mean, Parameter<T>& running_var,
                        bool update_stats) {
  const Shape& sx = shape(x);
  if ((sx.size() != 2 && sx.size() != 4) || shape(gamma) != Shape{sx[1]} || shape(beta) != Shape{sx[1]} ||
      running_mean.value.shape() != Shape{sx[1]} || running_var.value.shape() != Shape{sx[1]}) {
    throw ShapeError(shape_msg(OpKind::kBatchNorm, {sx, shape(gamma), shape(beta)},
                               "expected [N,C] or [N,C,H,W] with per-channel [C] affine and statistics"));
  }
  Node n{};
  n.kind = OpKind::kBatchNorm;
  n.parents = {x.id, gamma.id, beta.id};
  n.shape = sx;
  n.running_mean = &running_mean;
  n.running_var = &running_var;
  n.update_stats = update_stats;
  return push(std::move(n));
}

template <typename T>
Var Graph<T>::instance_norm(Var x) {
  const Shape& sx = shape(x);
  if (sx.size() != 4 || sx[2] * sx[3] < 2) {
    throw ShapeError(shape_msg(OpKind::kInstanceNorm, {sx}, "expected [N,C,H,W] with H*W >= 2"));
  }
  return push(unary<Node>(OpKind::kInstanceNorm, x.id, sx));
}

template <typename T>
Var Graph<T>::reshape(Var x, const Shape& s) {
  if (numel(s) != numel(shape(x))) {
    throw ShapeError(shape_msg(OpKind::kReshape, {shape(x), s}, "element counts differ"));
  }
  return push(unary<Node>(OpKind::kReshape, x.id, s));
}

template <typename T>
Var Graph<T>::concat(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat: no operands");
  Shape out = shape(parts[0]);
  if (out.empty()) throw ShapeError("concat: operands need rank >= 1");
  Node n{};
  n.kind = OpKind::kConcat;
  n.parents.push_back(parts[0].id);
  for (std::size_t i = 1; i < parts.size(); ++i) {
    const Shape& s = shape(parts[i]);
    if (s.size() != out.size() || !std::equal(s.begin() + 1, s.end(), out.begin() + 1)) {
      throw ShapeError(shape_msg(OpKind::kConcat, {shape(parts[0]), s}, "trailing dimensions differ"));
    }
    out[0] += s[0];
    n.parents.push_back(parts[i].id);
  }
  n.shape = out;
  return push(std::move(n));
}

template <typename T>
Var Graph<T>::log(Var x, T floor) {
  Node n = unary<Node>(OpKind::kLog, x.id, shape(x));
  n.attr = floor;
  return push(std::move(n));
}

template <typename T>
Var Graph<T>::detach(Var x) {
  return push(unary<Node>(OpKind::kDetach, x.id, shape(x)));
}

template <typename T>
void Graph<T>::force_eval(Var v) {
  node(v).always_eval = true;
}

template <typename T>
void Graph<T>::bind(Var v, const Tensor<T>& value) {
  bind(v, Tensor<T>(value));
}

template <typename T>
void Graph<T>::bind(Var v, Tensor<T>&& value) {
  Node& n = node(v);
  if (n.kind != OpKind::kInput) throw UsageError("bind: node " + std::to_string(v.id) + " is not an input");
  if (value.shape() != n.shape) {
    throw ShapeError("bind: input '" + n.name + "' expects " + to_string(n.shape) + ", got " +
                     to_string(value.shape()));
  }
  n.value = std::move(value);
  n.bound = true;
  forward_done_ = false;
}

template <typename T>
const Tensor<T>& Graph<T>::value(Var v) const {
  node(v);
  if (!forward_done_ && nodes_[v.id].kind != OpKind::kInput && nodes_[v.id].kind != OpKind::kParameter) {
    throw UsageError("value: graph has not been evaluated");
  }
  return val(v.id);
}

template <typename T>
const Tensor<T>& Graph<T>::grad(Var v) const {
  const Node& n = node(v);
  if (n.grad.empty()) throw UsageError("grad: node " + std::to_string(v.id) + " holds no gradient");
  return n.grad;
}

template <typename T>
Tensor<T>& Graph<T>::grad_slot(std::int32_t id) {
  return nodes_[id].grad;
}

template <typename T>
void Graph<T>::forward(Mode mode, std::uint64_t seed, std::size_t from) {
  if (from > 0 && !forward_done_) throw UsageError("forward: partial re-evaluation requires a prior full pass");
  for (std::size_t i = from; i < nodes_.size(); ++i) forward_node(i, mode, seed);
  forward_done_ = true;
}

template <typename T>
void Graph<T>::forward_node(std::size_t i, Mode mode, std::uint64_t seed) {
  Node& n = nodes_[i];
  if (n.always_eval) mode = Mode::kEval;
  const bool train = mode == Mode::kTrain;
  auto& out = n.value;
  auto ensure = [&](const Shape& s) {
    if (out.shape() != s || out.size() != numel(s)) out.assign_zeros(s);
  };

  switch (n.kind) {
    case OpKind::kInput:
      if (!n.bound) {
        throw UsageError("forward: input '" + n.name + "' (node " + std::to_string(i) + ") is not bound");
      }
      return;
    case OpKind::kParameter:
      if (n.param->value.shape() != n.shape) {
        throw ShapeError("parameter node " + std::to_string(i) + " changed shape to " +
                         to_string(n.param->value.shape()));
      }
      return;
    default:
      break;
  }

  ensure(n.shape);
  T* y = out.ptr();
  const std::size_t size = out.size();

  switch (n.kind) {
    case OpKind::kMatMul: {
      const auto& a = val(n.parents[0]);
      const auto& b = val(n.parents[1]);
      MapConstMat<T> A(a.ptr(), a.dim(0), a.dim(1));
      MapConstMat<T> B(b.ptr(), b.dim(0), b.dim(1));
      MapMat<T> Y(y, n.shape[0], n.shape[1]);
      Y.noalias() = A * B;
      break;
    }
    case OpKind::kAdd: {
      const auto& a = val(n.parents[0]);
      const auto& b = val(n.parents[1]);
      if (b.shape() == a.shape()) {
        for (std::size_t k = 0; k < size; ++k) y[k] = a[k] + b[k];
      } else if (b.size() == 1) {
        for (std::size_t k = 0; k < size; ++k) y[k] = a[k] + b[0];
      } else {
        const std::size_t m = b.size();
        for (std::size_t k = 0; k < size; ++k) y[k] = a[k] + b[k % m];
      }
      break;
    }
    case OpKind::kScale: {
      const auto& a = val(n.parents[0]);
      for (std::size_t k = 0; k < size; ++k) y[k] = n.attr * a[k];
      break;
    }
    case OpKind::kConv2d3x3: {
      const auto& x = val(n.parents[0]);
      const auto& w = val(n.parents[1]);
      const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3), O = w.dim(0);
      const std::size_t HW = H * W;
      n.saved.resize(C * 9 * HW);
      MapConstMat<T> Wm(w.ptr(), O, C * 9);
      for (std::size_t s = 0; s < N; ++s) {
        im2col3x3(x.ptr() + s * C * HW, C, H, W, n.saved.data());
        MapConstMat<T> cols(n.saved.data(), C * 9, HW);
        MapMat<T> Y(y + s * O * HW, O, HW);
        Y.noalias() = Wm * cols;
      }
      break;
    }
    case OpKind::kMaxPool2x2: {
      const auto& x = val(n.parents[0]);
      const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
      const std::size_t OH = H / 2, OW = W / 2;
      n.index.resize(size);
      std::size_t k = 0;
      for (std::size_t p = 0; p < N * C; ++p) {
        const std::size_t base = p * H * W;
        for (std::size_t oy = 0; oy < OH; ++oy) {
          for (std::size_t ox = 0; ox < OW; ++ox, ++k) {
            std::size_t best = base + (2 * oy) * W + 2 * ox;
            for (std::size_t dy = 0; dy < 2; ++dy) {
              for (std::size_t dx = 0; dx < 2; ++dx) {
                const std::size_t idx = base + (2 * oy + dy) * W + 2 * ox + dx;
                if (x[idx] > x[best]) best = idx;
              }
            }
            y[k] = x[best];
            n.index[k] = static_cast<std::uint32_t>(best);
          }
        }
      }
      break;
    }
    case OpKind::kGlobalAvgPool: {
      const auto& x = val(n.parents[0]);
      const std::size_t HW = x.dim(2) * x.dim(3);
      for (std::size_t p = 0; p < size; ++p) {
        T acc = 0;
        for (std::size_t q = 0; q < HW; ++q) acc += x[p * HW + q];
        y[p] = acc / static_cast<T>(HW);
      }
      break;
    }
    case OpKind::kLeakyRelu: {
      // Branchless so the loop vectorizes; exact for both signs.
      const T a = n.attr;
      const T* __restrict xp = val(n.parents[0]).ptr();
      T* __restrict yp = y;
      for (std::size_t k = 0; k < size; ++k) yp[k] = std::max(xp[k], T{0}) + a * std::min(xp[k], T{0});
      break;
    }
    case OpKind::kRelu: {
      const T* __restrict xp = val(n.parents[0]).ptr();
      T* __restrict yp = y;
      for (std::size_t k = 0; k < size; ++k) yp[k] = std::max(xp[k], T{0});
      break;
    }
    case OpKind::kSigmoid: {
      const auto& x = val(n.parents[0]);
      for (std::size_t k = 0; k < size; ++k) {
        if (x[k] >= T{0}) {
          y[k] = T{1} / (T{1} + std::exp(-x[k]));
        } else {
          const T e = std::exp(x[k]);
          y[k] = e / (T{1} + e);
        }
      }
      break;
    }
    case OpKind::kSoftmax:
    case OpKind::kLogSoftmax: {
      const auto& x = val(n.parents[0]);
      const std::size_t K = n.shape.back();
      for (std::size_t r = 0; r < size / K; ++r) {
        const T* xr = x.ptr() + r * K;
        T* yr = y + r * K;
        const T m = *std::max_element(xr, xr + K);
        T s = 0;
        for (std::size_t k = 0; k < K; ++k) s += std::exp(xr[k] - m);
        if (n.kind == OpKind::kSoftmax) {
          for (std::size_t k = 0; k < K; ++k) yr[k] = std::exp(xr[k] - m) / s;
        } else {
          const T ls = std::log(s);
          for (std::size_t k = 0; k < K; ++k) yr[k] = xr[k] - m - ls;
        }
      }
      break;
    }
    case OpKind::kMul: {
      const auto& a = val(n.parents[0]);
      const auto& b = val(n.parents[1]);
      for (std::size_t k = 0; k < size; ++k) y[k] = a[k] * b[k];
      break;
    }
    case OpKind::kSum:
    case OpKind::kMean: {
      const auto& x = val(n.parents[0]);
      T acc = 0;
      for (std::size_t k = 0; k < x.size(); ++k) acc += x[k];
      y[0] = n.kind == OpKind::kSum ? acc : acc / static_cast<T>(x.size());
      break;
    }
    case OpKind::kDropout: {
      const auto& x = val(n.parents[0]);
      n.stats_from_batch = train && n.attr > T{0};
      if (!n.stats_from_batch) {
        std::copy(x.ptr(), x.ptr() + size, y);
        break;
      }
      Rng rng = make_rng({seed, n.stream, 0xd0u});
      std::bernoulli_distribution keep(1.0 - static_cast<double>(n.attr));
      const T inv = T{1} / (T{1} - n.attr);
      n.saved.resize(size);
      for (std::size_t k = 0; k < size; ++k) {
        n.saved[k] = keep(rng) ? inv : T{0};
        y[k] = x[k] * n.saved[k];
      }
      break;
    }
    case OpKind::kGaussianNoise: {
      const auto& x = val(n.parents[0]);
      if (!train || n.attr == T{0}) {
        std::copy(x.ptr(), x.ptr() + size, y);
        break;
      }
      Rng rng = make_rng({seed, n.stream, 0x9au});
      std::normal_distribution<T> normal(T{0}, n.attr);
      for (std::size_t k = 0; k < size; ++k) y[k] = x[k] + normal(rng);
      break;
    }
    case OpKind::kBatchNorm: {
      const auto& x = val(n.parents[0]);
      const auto& gamma = val(n.parents[1]);
      const auto& beta = val(n.parents[2]);
      const ChannelLayout L(n.shape);
      const std::size_t M = L.count();
      n.saved.resize(size);   // normalized input
      n.saved2.resize(L.c);   // inverse std per channel
      n.stats_from_batch = train;
      auto& rm = n.running_mean->value;
      auto& rv = n.running_var->value;
      for (std::size_t c = 0; c < L.c; ++c) {
        T mu, var;
        if (train) {
          double acc = 0;
          for (std::size_t s = 0; s < L.n; ++s) acc += lane_sum(x.ptr() + (s * L.c + c) * L.inner, L.inner);
          mu = static_cast<T>(acc / M);
          double acc2 = 0;
          for (std::size_t s = 0; s < L.n; ++s)
            acc2 += lane_sq_dev(x.ptr() + (s * L.c + c) * L.inner, L.inner, static_cast<double>(mu));
          var = static_cast<T>(acc2 / M);
          if (n.update_stats) {
            const T mom = static_cast<T>(kBatchNormMomentum);
            const T unbiased = M > 1 ? var * static_cast<T>(M) / static_cast<T>(M - 1) : var;
            rm[c] = mom * rm[c] + (T{1} - mom) * mu;
            rv[c] = mom * rv[c] + (T{1} - mom) * unbiased;
          }
        } else {
          mu = rm[c];
          var = rv[c];
        }
        const T inv = T{1} / std::sqrt(var + static_cast<T>(kBatchNormEps));
        n.saved2[c] = inv;
        const T gc = gamma[c], bc = beta[c];
        for (std::size_t s = 0; s < L.n; ++s) {
          const std::size_t off = (s * L.c + c) * L.inner;
          const T* __restrict xp = x.ptr() + off;
          T* __restrict hp = n.saved.data() + off;
          T* __restrict yp = y + off;
          for (std::size_t q = 0; q < L.inner; ++q) {
            hp[q] = (xp[q] - mu) * inv;
            yp[q] = gc * hp[q] + bc;
          }
        }
      }
      break;
    }
    case OpKind::kInstanceNorm: {
      const auto& x = val(n.parents[0]);
      const std::size_t HW = n.shape[2] * n.shape[3];
      const std::size_t planes = size / HW;
      n.saved2.resize(planes);
      n.index.resize(planes);
      for (std::size_t p = 0; p < planes; ++p) {
        const T* xp = x.ptr() + p * HW;
        double acc = 0;
        for (std::size_t q = 0; q < HW; ++q) acc += xp[q];
        const double mu = acc / HW;
        double acc2 = 0;
        for (std::size_t q = 0; q < HW; ++q) acc2 += (xp[q] - mu) * (xp[q] - mu);
        double sd = std::sqrt(acc2 / HW);
        const bool floored = sd < kInstanceNormStdFloor;
        if (floored) sd = kInstanceNormStdFloor;
        n.saved2[p] = static_cast<T>(sd);
        n.index[p] = floored ? 1u : 0u;
        for (std::size_t q = 0; q < HW; ++q) y[p * HW + q] = static_cast<T>((xp[q] - mu) / sd);
      }
      break;
    }
    case OpKind::kReshape:
    case OpKind::kDetach: {
      const auto& x = val(n.parents[0]);
      std::copy(x.ptr(), x.ptr() + size, y);
      break;
    }
    case OpKind::kConcat: {
      std::size_t off = 0;
      for (auto p : n.parents) {
        const auto& x = val(p);
        std::copy(x.ptr(), x.ptr() + x.size(), y + off);
        off += x.size();
      }
      break;
    }
    case OpKind::kLog: {
      const auto& x = val(n.parents[0]);
      for (std::size_t k = 0; k < size; ++k) y[k] = std::log(std::max(x[k], n.attr));
      break;
    }
    case OpKind::kInput:
    case OpKind::kParameter:
      break;
  }

  for (std::size_t k = 0; k < size; ++k) {
    if (!std::isfinite(y[k])) {
      throw NumericalError("forward: " + std::string(op_name(n.kind)) + " at node " + std::to_string(i) +
                               " produced a non-finite value",
                           static_cast<std::ptrdiff_t>(i));
    }
  }
}

template <typename T>
void Graph<T>::backward(Var root) {
  if (!forward_done_) throw UsageError("backward: forward has not been run on the current inputs");
  const Node& r = node(root);
  if (numel(r.shape) != 1) throw UsageError("backward: root must be a scalar, got shape " + to_string(r.shape));

  std::vector<char> reach(nodes_.size(), 0);
  reach[root.id] = 1;
  for (std::int32_t i = root.id; i >= 0; --i) {
    if (!reach[i] || !nodes_[i].needs_grad) continue;
    if (nodes_[i].kind == OpKind::kDetach) continue;
    for (auto p : nodes_[i].parents) reach[p] = 1;
  }
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    Node& n = nodes_[i];
    if (!n.needs_grad) continue;
    if (n.grad.shape() != n.shape || n.grad.size() != numel(n.shape)) {
      n.grad.assign_zeros(n.shape);
    } else if (reach[i] || n.kind == OpKind::kParameter || n.kind == OpKind::kInput) {
      n.grad.fill(T{0});
    }
  }
  if (r.needs_grad) nodes_[root.id].grad[0] = T{1};

  for (std::int32_t i = root.id; i >= 0; --i) {
    const Node& n = nodes_[i];
    if (!reach[i] || !n.needs_grad) continue;
    if (n.kind == OpKind::kInput || n.kind == OpKind::kParameter || n.kind == OpKind::kDetach) continue;
    backward_node(static_cast<std::size_t>(i));
  }

  for (auto& [param, id] : param_nodes_) {
    auto* p = const_cast<Parameter<T>*>(param);
    const Node& n = nodes_[id];
    if (p->grad.shape() != n.shape) p->grad.assign_zeros(n.shape);
    std::copy(n.grad.ptr(), n.grad.ptr() + n.grad.size(), p->grad.ptr());
  }
}

template <typename T>
void Graph<T>::backward_node(std::size_t i) {
  Node& n = nodes_[i];
  const T* dy = n.grad.ptr();
  const std::size_t size = n.value.size();
  auto wants = [&](std::size_t k) { return nodes_[n.parents[k]].needs_grad; };
  auto pgrad = [&](std::size_t k) -> T* { return grad_slot(n.parents[k]).ptr(); };

  switch (n.kind) {
    case OpKind::kMatMul: {
      const auto& a = val(n.parents[0]);
      const auto& b = val(n.parents[1]);
      MapConstMat<T> dY(dy, n.shape[0], n.shape[1]);
      if (wants(0)) {
        MapConstMat<T> B(b.ptr(), b.dim(0), b.dim(1));
        MapMat<T> dA(pgrad(0), a.dim(0), a.dim(1));
        dA.noalias() += dY * B.transpose();
      }
      if (wants(1)) {
        MapConstMat<T> A(a.ptr(), a.dim(0), a.dim(1));
        MapMat<T> dB(pgrad(1), b.dim(0), b.dim(1));
        dB.noalias() += A.transpose() * dY;
      }
      break;
    }
    case OpKind::kAdd: {
      const auto& a = val(n.parents[0]);
      const auto& b = val(n.parents[1]);
      if (wants(0)) {
        T* da = pgrad(0);
        for (std::size_t k = 0; k < size; ++k) da[k] += dy[k];
      }
      if (wants(1)) {
        T* db = pgrad(1);
        if (b.shape() == a.shape()) {
          for (std::size_t k = 0; k < size; ++k) db[k] += dy[k];
        } else if (b.size() == 1) {
          T acc = 0;
          for (std::size_t k = 0; k < size; ++k) acc += dy[k];
          db[0] += acc;
        } else {
          const std::size_t m = b.size();
          for (std::size_t k = 0; k < size; ++k) db[k % m] += dy[k];
        }
      }
      break;
    }
    case OpKind::kScale: {
      T* da = pgrad(0);
      for (std::size_t k = 0; k < size; ++k) da[k] += n.attr * dy[k];
      break;
    }
    case OpKind::kConv2d3x3: {
      const auto& x = val(n.parents[0]);
      const auto& w = val(n.parents[1]);
      const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3), O = w.dim(0);
      const std::size_t HW = H * W;
      std::vector<T>& cols = n.saved;
      std::vector<T>& dcols = n.saved2;
      cols.resize(C * 9 * HW);
      dcols.resize(C * 9 * HW);
      MapConstMat<T> Wm(w.ptr(), O, C * 9);
      for (std::size_t s = 0; s < N; ++s) {
        MapConstMat<T> dY(dy + s * O * HW, O, HW);
        if (wants(1)) {
          im2col3x3(x.ptr() + s * C * HW, C, H, W, cols.data());
          MapConstMat<T> colsm(cols.data(), C * 9, HW);
          MapMat<T> dW(pgrad(1), O, C * 9);
          dW.noalias() += dY * colsm.transpose();
        }
        if (wants(0)) {
          MapMat<T> dC(dcols.data(), C * 9, HW);
          dC.noalias() = Wm.transpose() * dY;
          col2im3x3(dcols.data(), C, H, W, pgrad(0) + s * C * HW);
        }
      }
      break;
    }
    case OpKind::kMaxPool2x2: {
      T* dx = pgrad(0);
      for (std::size_t k = 0; k < size; ++k) dx[n.index[k]] += dy[k];
      break;
    }
    case OpKind::kGlobalAvgPool: {
      const auto& x = val(n.parents[0]);
      const std::size_t HW = x.dim(2) * x.dim(3);
      T* dx = pgrad(0);
      for (std::size_t p = 0; p < size; ++p) {
        const T g = dy[p] / static_cast<T>(HW);
        for (std::size_t q = 0; q < HW; ++q) dx[p * HW + q] += g;
      }
      break;
    }
    case OpKind::kLeakyRelu: {
      const T a = n.attr;
      const T* __restrict xp = val(n.parents[0]).ptr();
      const T* __restrict dyp = dy;
      T* __restrict dx = pgrad(0);
      for (std::size_t k = 0; k < size; ++k) dx[k] += (xp[k] > T{0} ? T{1} : a) * dyp[k];
      break;
    }
    case OpKind::kRelu: {
      const T* __restrict xp = val(n.parents[0]).ptr();
      const T* __restrict dyp = dy;
      T* __restrict dx = pgrad(0);
      for (std::size_t k = 0; k < size; ++k) dx[k] += xp[k] > T{0} ? dyp[k] : T{0};
      break;
    }
    case OpKind::kSigmoid: {
      const T* y = n.value.ptr();
      T* dx = pgrad(0);
      for (std::size_t k = 0; k < size; ++k) dx[k] += dy[k] * y[k] * (T{1} - y[k]);
      break;
    }
    case OpKind::kSoftmax: {
      const T* y = n.value.ptr();
      const std::size_t K = n.shape.back();
      T* dx = pgrad(0);
      for (std::size_t r = 0; r < size / K; ++r) {
        T dot = 0;
        for (std::size_t k = 0; k < K; ++k) dot += dy[r * K + k] * y[r * K + k];
        for (std::size_t k = 0; k < K; ++k) dx[r * K + k] += y[r * K + k] * (dy[r * K + k] - dot);
      }
      break;
    }
    case OpKind::kLogSoftmax: {
      const T* y = n.value.ptr();
      const std::size_t K = n.shape.back();
      T* dx = pgrad(0);
      for (std::size_t r = 0; r < size / K; ++r) {
        T s = 0;
        for (std::size_t k = 0; k < K; ++k) s += dy[r * K + k];
        for (std::size_t k = 0; k < K; ++k) dx[r * K + k] += dy[r * K + k] - std::exp(y[r * K + k]) * s;
      }
      break;
    }
    case OpKind::kMul: {
      const auto& a = val(n.parents[0]);
      const auto& b = val(n.parents[1]);
      if (wants(0)) {
        T* da = pgrad(0);
        for (std::size_t k = 0; k < size; ++k) da[k] += dy[k] * b[k];
      }
      if (wants(1)) {
        T* db = pgrad(1);
        for (std::size_t k = 0; k < size; ++k) db[k] += dy[k] * a[k];
      }
      break;
    }
    case OpKind::kSum:
    case OpKind::kMean: {
      const auto& x = val(n.parents[0]);
      const T g = n.kind == OpKind::kSum ? dy[0] : dy[0] / static_cast<T>(x.size());
      T* dx = pgrad(0);
      for (std::size_t k = 0; k < x.size(); ++k) dx[k] += g;
      break;
    }
    case OpKind::kDropout: {
      T* dx = pgrad(0);
      if (n.stats_from_batch) {
        for (std::size_t k = 0; k < size; ++k) dx[k] += dy[k] * n.saved[k];
      } else {
        for (std::size_t k = 0; k < size; ++k) dx[k] += dy[k];
      }
      break;
    }
    case OpKind::kGaussianNoise:
    case OpKind::kReshape: {
      T* dx = pgrad(0);
      for (std::size_t k = 0; k < size; ++k) dx[k] += dy[k];
      break;
    }
    case OpKind::kBatchNorm: {
      const auto& gamma = val(n.parents[1]);
      const ChannelLayout L(n.shape);
      const T M = static_cast<T>(L.count());
      for (std::size_t c = 0; c < L.c; ++c) {
        double acc_dy = 0, acc_dy_xhat = 0;
        for (std::size_t s = 0; s < L.n; ++s) {
          const std::size_t off = (s * L.c + c) * L.inner;
          acc_dy += lane_sum(dy + off, L.inner);
          acc_dy_xhat += lane_dot(dy + off, n.saved.data() + off, L.inner);
        }
        const T sum_dy = static_cast<T>(acc_dy), sum_dy_xhat = static_cast<T>(acc_dy_xhat);
        if (wants(1)) pgrad(1)[c] += sum_dy_xhat;
        if (wants(2)) pgrad(2)[c] += sum_dy;
        if (!wants(0)) continue;
        const T g = gamma[c] * n.saved2[c];
        const T mean_dy = sum_dy / M, mean_dy_xhat = sum_dy_xhat / M;
        for (std::size_t s = 0; s < L.n; ++s) {
          const std::size_t off = (s * L.c + c) * L.inner;
          const T* __restrict dyp = dy + off;
          const T* __restrict hp = n.saved.data() + off;
          T* __restrict dx = pgrad(0) + off;
          if (n.stats_from_batch) {
            for (std::size_t q = 0; q < L.inner; ++q) dx[q] += g * (dyp[q] - mean_dy - hp[q] * mean_dy_xhat);
          } else {
            for (std::size_t q = 0; q < L.inner; ++q) dx[q] += g * dyp[q];
          }
        }
      }
      break;
    }
    case OpKind::kInstanceNorm: {
      const std::size_t HW = n.shape[2] * n.shape[3];
      const T* y = n.value.ptr();
      T* dx = pgrad(0);
      for (std::size_t p = 0; p < size / HW; ++p) {
        const T* dyp = dy + p * HW;
        const T* yp = y + p * HW;
        T mean_dy = 0, mean_dy_y = 0;
        for (std::size_t q = 0; q < HW; ++q) {
          mean_dy += dyp[q];
          mean_dy_y += dyp[q] * yp[q];
        }
        mean_dy /= static_cast<T>(HW);
        mean_dy_y /= static_cast<T>(HW);
        const T inv = T{1} / n.saved2[p];
        const bool floored = n.index[p] != 0;
        for (std::size_t q = 0; q < HW; ++q) {
          dx[p * HW + q] += floored ? inv * (dyp[q] - mean_dy) : inv * (dyp[q] - mean_dy - yp[q] * mean_dy_y);
        }
      }
      break;
    }
    case OpKind::kConcat: {
      std::size_t off = 0;
      for (std::size_t k = 0; k < n.parents.size(); ++k) {
        const std::size_t len = nodes_[n.parents[k]].shape.empty() ? 1 : numel(nodes_[n.parents[k]].shape);
        if (wants(k)) {
          T* dx = pgrad(k);
          for (std::size_t j = 0; j < len; ++j) dx[j] += dy[off + j];
        }
        off += len;
      }
      break;
    }
    case OpKind::kLog: {
      const auto& x = val(n.parents[0]);
      T* dx = pgrad(0);
      for (std::size_t k = 0; k < size; ++k) {
        if (x[k] > n.attr) dx[k] += dy[k] / x[k];
      }
      break;
    }
    case OpKind::kInput:
    case OpKind::kParameter:
    case OpKind::kDetach:
      break;
  }
}

template class Graph<float>;
template class Graph<double>;

}  // namespace cadp
