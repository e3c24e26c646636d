#pragma once

#include <cstdint>
#include <deque>
#include <string>
#include <string_view>
#include <vector>

#include "cadp/graph.hpp"

namespace cadp {

enum class LayerKind { kInstanceNorm, kConv3x3, kMaxPool, kDropout, kGaussianNoise, kGlobalAvgPool, kDense };
enum class Activation { kNone, kLeakyRelu, kRelu, kSigmoid, kSoftmax };

std::string_view layer_kind_name(LayerKind kind);
std::string_view activation_name(Activation act);

/// One layer of an architecture. Conv and dense layers optionally carry a
/// pre-activation batchnorm; when they do the bias is dropped.
struct LayerSpec {
  LayerKind kind = LayerKind::kDense;
  std::size_t units = 0;  // output channels (conv) or width (dense)
  bool batchnorm = false;
  Activation activation = Activation::kNone;
  double slope = 0.1;  // leaky-relu parameter
  double rate = 0.0;   // dropout probability or noise sigma
};

struct ArchitectureSpec {
  std::string name;
  Shape input_shape;  // per-sample: {D} for vectors, {C, H, W} for images
  std::vector<LayerSpec> layers;
  std::size_t num_classes = 0;
  /// Index of the last layer of the embedding f; layers after it form g.
  std::size_t feature_split_index = 0;
  bool instance_norm_input = false;

  /// Index of the layer the architecture tables call "L - k".
  std::size_t layer_from_end(std::size_t k) const;
  /// Per-sample output shape of layer `index`.
  Shape layer_shape(std::size_t index) const;
  /// Deterministic text form used for hashing and checkpoints.
  std::string canonical() const;
  std::uint64_t hash() const;
  /// Throws ConfigError on invalid layer lists or split indices.
  void validate(bool require_simplex_output = true) const;
};

/// Ordered, named parameter tensors. Insertion order is iteration order;
/// element addresses are stable for the lifetime of the store.
template <typename T>
class ParameterStore {
 public:
  struct Entry {
    std::string name;
    Parameter<T> param;
  };

  Parameter<T>& add(std::string name, Tensor<T> value, bool trainable = true);
  Parameter<T>& at(std::string_view name);
  const Parameter<T>& at(std::string_view name) const;
  bool contains(std::string_view name) const;

  std::size_t size() const { return entries_.size(); }
  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }
  Entry& entry(std::size_t i) { return entries_[i]; }
  const Entry& entry(std::size_t i) const { return entries_[i]; }

  /// Number of trainable scalars.
  std::size_t parameter_count() const;
  std::uint64_t version() const { return version_; }
  void bump_version() { ++version_; }

  /// Copies values from a store with identical names and shapes.
  void copy_values_from(const ParameterStore& other);
  bool same_layout(const ParameterStore& other) const;

 private:
  std::deque<Entry> entries_;
  std::uint64_t version_ = 0;
};

/// Exponential moving average of a parameter trajectory. Buffers
/// (non-trainable entries) are copied rather than averaged.
template <typename T>
struct EmaState {
  ParameterStore<T> shadow;
  T momentum = static_cast<T>(0.998);

  EmaState() = default;
  EmaState(const ParameterStore<T>& params, T m);
};

/// shadow <- m * shadow + (1 - m) * params.
template <typename T>
void ema_update(EmaState<T>& ema, const ParameterStore<T>& params);

struct BuildOptions {
  std::uint64_t stream_key = 0;  // keys dropout/noise streams; equal keys give equal masks
  bool update_stats = false;     // fold batch statistics into batchnorm running buffers
  bool trainable = true;         // parameters receive gradient
  bool force_eval = false;       // evaluate in eval mode regardless of the graph mode
};

struct NetworkNodes {
  std::vector<Var> layers;  // output of every layer
  Var features;             // output of the split layer
  Var output;               // output of the last layer
};

/// Appends layers [first, last] of `spec` to `g`, consuming `x`.
template <typename T>
std::vector<Var> build_layers(const ArchitectureSpec& spec, ParameterStore<T>& store, Graph<T>& g, Var x,
                              std::size_t first, std::size_t last, const BuildOptions& opt);

template <typename T>
NetworkNodes build_network(const ArchitectureSpec& spec, ParameterStore<T>& store, Graph<T>& g, Var x,
                           const BuildOptions& opt);

/// Allocates and initializes every parameter the spec needs (He-uniform
/// weights, zero biases, unit batchnorm scale).
template <typename T>
ParameterStore<T> init_parameters(const ArchitectureSpec& spec, std::uint64_t seed);

/// A classifier h = g ∘ f mapping inputs to the probability simplex.
template <typename T>
struct Classifier {
  ArchitectureSpec spec;
  ParameterStore<T> params;
};

/// Binary domain discriminator over split-layer features.
template <typename T>
struct Discriminator {
  ArchitectureSpec spec;
  ParameterStore<T> params;
};

template <typename T>
Classifier<T> make_classifier(ArchitectureSpec spec, std::uint64_t seed);

ArchitectureSpec small_cnn_spec(std::size_t num_classes, bool instance_norm, double noise_sigma,
                                std::size_t channels = 3, std::size_t height = 32, std::size_t width = 32);
ArchitectureSpec large_cnn_spec(std::size_t num_classes, bool instance_norm, double noise_sigma);
ArchitectureSpec mlp_spec(const std::vector<std::size_t>& widths, std::size_t num_classes, std::size_t input_dim = 2);
ArchitectureSpec discriminator_spec(const Shape& feature_shape, std::size_t hidden = 100);

template <typename T>
Classifier<T> build_small_cnn(std::size_t num_classes, bool instance_norm, double noise_sigma, std::uint64_t seed = 0);
template <typename T>
Classifier<T> build_mlp(const std::vector<std::size_t>& widths, std::size_t num_classes, std::uint64_t seed = 0,
                        std::size_t input_dim = 2);

enum class DiscriminatorInit { kHeUniform, kZero };
template <typename T>
Discriminator<T> build_discriminator(const Shape& feature_shape, std::uint64_t seed = 0,
                                     DiscriminatorInit init = DiscriminatorInit::kHeUniform);

template <typename T>
struct SplitOutput {
  Tensor<T> features;
  Tensor<T> probabilities;
};

/// Probabilities for a batch [N, ...input_shape].
template <typename T>
Tensor<T> forward(const Classifier<T>& c, const Tensor<T>& x, Mode mode = Mode::kEval, std::uint64_t seed = 0);
/// Split-layer features and the probabilities g produces from them.
template <typename T>
SplitOutput<T> forward_split(const Classifier<T>& c, const Tensor<T>& x, Mode mode = Mode::kEval,
                             std::uint64_t seed = 0);
/// Applies g alone to split-layer features.
template <typename T>
Tensor<T> forward_head(const Classifier<T>& c, const Tensor<T>& features, Mode mode = Mode::kEval,
                       std::uint64_t seed = 0);
/// Eval-mode output of one layer, flattened to [N, D], computed in chunks.
/// Layer -1 denotes the input itself.
template <typename T>
Tensor<T> forward_layer(const ArchitectureSpec& spec, const ParameterStore<T>& params, const Tensor<T>& x,
                        long layer, std::size_t chunk = 256);
/// Eval-mode probabilities computed in chunks, using the given parameters.
template <typename T>
Tensor<T> predict(const ArchitectureSpec& spec, const ParameterStore<T>& params, const Tensor<T>& x,
                  std::size_t chunk = 256);

}  // namespace cadp
