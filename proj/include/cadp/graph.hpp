#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "cadp/tensor.hpp"

namespace cadp {

enum class Mode { kTrain, kEval };

/// Operation kinds understood by the graph. Leaves (input, parameter) and the
/// two helpers needed by the losses (log with floor, detach) sit alongside the
/// layer primitives.
enum class OpKind {
  kInput,
  kParameter,
  kMatMul,
  kAdd,
  kScale,
  kConv2d3x3,
  kMaxPool2x2,
  kGlobalAvgPool,
  kLeakyRelu,
  kRelu,
  kSigmoid,
  kSoftmax,
  kLogSoftmax,
  kMul,
  kSum,
  kMean,
  kDropout,
  kGaussianNoise,
  kBatchNorm,
  kInstanceNorm,
  kReshape,
  kConcat,
  kLog,
  kDetach,
};

std::string_view op_name(OpKind kind);

/// A tensor the optimizer owns: value plus gradient slot of the same shape.
/// Non-trainable parameters act as buffers (batchnorm running statistics).
template <typename T>
struct Parameter {
  Tensor<T> value;
  Tensor<T> grad;
  bool trainable = true;

  Parameter() = default;
  explicit Parameter(Tensor<T> v, bool is_trainable = true)
      : value(std::move(v)), grad(value.shape()), trainable(is_trainable) {}
};

/// Handle to a node of a Graph.
struct Var {
  std::int32_t id = -1;
  bool valid() const { return id >= 0; }
};

inline constexpr double kLogFloor = 1e-8;
inline constexpr double kInstanceNormStdFloor = 1e-5;
inline constexpr double kBatchNormEps = 1e-5;
inline constexpr double kBatchNormMomentum = 0.99;

/// Define-then-run reverse-mode graph. Nodes are appended in topological
/// order; shapes are checked while building. `forward` evaluates every node
/// (or a suffix), `backward` accumulates gradients into every node that needs
/// one and writes trainable parameter gradients into `Parameter::grad`.
///
/// A graph is single-owner; distinct graphs share nothing mutable except the
/// parameters they reference.
template <typename T>
class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;
  Graph(Graph&&) = default;
  Graph& operator=(Graph&&) = default;

  // Leaves.
  Var input(const Shape& shape, bool requires_grad = false, std::string name = {});
  /// References `p`; repeated calls with the same parameter return the same
  /// node. A non-trainable reference never receives gradient.
  Var parameter(Parameter<T>& p, bool trainable = true);
  /// Input bound once to a fixed value.
  Var constant(Tensor<T> value);

  // Primitives.
  Var matmul(Var a, Var b);
  /// Same-shape add, or `b` broadcast as a row vector over the last axis, or a
  /// one-element `b` broadcast everywhere.
  Var add(Var a, Var b);
  Var sub(Var a, Var b) { return add(a, scale(b, T{-1})); }
  Var scale(Var a, T factor);
  Var conv3x3(Var x, Var weight);
  Var maxpool2x2(Var x);
  Var global_avg_pool(Var x);
  Var leaky_relu(Var x, T slope);
  Var relu(Var x);
  Var sigmoid(Var x);
  Var softmax(Var x);
  Var log_softmax(Var x);
  Var mul(Var a, Var b);
  Var sum(Var x);
  Var mean(Var x);
  Var dropout(Var x, T p, std::uint64_t stream);
  Var gaussian_noise(Var x, T sigma, std::uint64_t stream);
  /// Per-channel batchnorm over axis 1 of a rank-2 or rank-4 input. Train mode
  /// normalizes with batch statistics and, if `update_stats`, folds them into
  /// the running buffers; eval mode uses the running buffers.
  Var batchnorm(Var x, Var gamma, Var beta, Parameter<T>& running_mean, Parameter<T>& running_var,
                bool update_stats);
  Var instance_norm(Var x);
  Var reshape(Var x, const Shape& shape);
  /// Concatenation along axis 0.
  Var concat(const std::vector<Var>& parts);
  /// ln(max(x, floor)).
  Var log(Var x, T floor = static_cast<T>(kLogFloor));
  /// Identity whose gradient is never propagated.
  Var detach(Var x);

  /// Marks a node as always evaluated in eval mode (teacher branches).
  void force_eval(Var v);

  void bind(Var input, const Tensor<T>& value);
  void bind(Var input, Tensor<T>&& value);

  /// Evaluates nodes [from, size()). Stochastic ops draw from streams derived
  /// from (seed, node stream id); eval mode makes them identity.
  void forward(Mode mode, std::uint64_t seed, std::size_t from = 0);
  void backward(Var root);

  const Tensor<T>& value(Var v) const;
  const Tensor<T>& grad(Var v) const;
  T scalar(Var v) const { return value(v)[0]; }
  const Shape& shape(Var v) const { return nodes_.at(v.id).shape; }
  OpKind kind(Var v) const { return nodes_.at(v.id).kind; }
  std::size_t size() const { return nodes_.size(); }
  /// Index at which the next node will be placed.
  std::size_t mark() const { return nodes_.size(); }

 private:
  struct Node {
    OpKind kind;
    std::vector<std::int32_t> parents;
    Shape shape;
    Tensor<T> value;
    Tensor<T> grad;
    Parameter<T>* param = nullptr;
    bool trainable = false;
    bool requires_grad = false;  // leaf wants gradient
    bool needs_grad = false;     // some ancestor leaf wants gradient
    bool bound = false;
    bool always_eval = false;
    bool update_stats = false;
    bool stats_from_batch = false;  // batchnorm: last forward used batch statistics
    T attr = T{0};
    std::uint64_t stream = 0;
    Parameter<T>* running_mean = nullptr;
    Parameter<T>* running_var = nullptr;
    std::string name;
    std::vector<T> saved;
    std::vector<T> saved2;
    std::vector<std::uint32_t> index;
  };

  Var push(Node node);
  Node& node(Var v);
  const Node& node(Var v) const;
  const Tensor<T>& val(std::int32_t id) const;
  void forward_node(std::size_t i, Mode mode, std::uint64_t seed);
  void backward_node(std::size_t i);
  Tensor<T>& grad_slot(std::int32_t id);

  std::vector<Node> nodes_;
  std::unordered_map<const Parameter<T>*, std::int32_t> param_nodes_;
  std::unordered_map<const Parameter<T>*, std::int32_t> const_param_nodes_;
  bool forward_done_ = false;
};

extern template class Graph<float>;
extern template class Graph<double>;

}  // namespace cadp
