#include "cadp/network.hpp"

#include <cmath>
#include <cstdio>
#include <random>
#include <sstream>

#include "cadp/parallel.hpp"
#include "cadp/rng.hpp"

namespace cadp {

std::string_view layer_kind_name(LayerKind kind) {
  switch (kind) {
    case LayerKind::kInstanceNorm: return "instance-norm";
    case LayerKind::kConv3x3: return "conv3x3";
    case LayerKind::kMaxPool: return "maxpool2x2";
    case LayerKind::kDropout: return "dropout";
    case LayerKind::kGaussianNoise: return "gaussian-noise";
    case LayerKind::kGlobalAvgPool: return "global-avg-pool";
    case LayerKind::kDense: return "dense";
  }
  return "unknown";
}

std::string_view activation_name(Activation act) {
  switch (act) {
    case Activation::kNone: return "none";
    case Activation::kLeakyRelu: return "lrelu";
    case Activation::kRelu: return "relu";
    case Activation::kSigmoid: return "sigmoid";
    case Activation::kSoftmax: return "softmax";
  }
  return "unknown";
}

// ---------------------------------------------------------------------------
// ArchitectureSpec

std::size_t ArchitectureSpec::layer_from_end(std::size_t k) const {
  if (k >= layers.size()) throw ConfigError("layer L-" + std::to_string(k) + " does not exist in " + name);
  return layers.size() - 1 - k;
}

Shape ArchitectureSpec::layer_shape(std::size_t index) const {
  if (index >= layers.size()) throw ConfigError("layer index " + std::to_string(index) + " out of range");
  Shape s = input_shape;
  for (std::size_t i = 0; i <= index; ++i) {
    const LayerSpec& l = layers[i];
    switch (l.kind) {
      case LayerKind::kInstanceNorm:
      case LayerKind::kDropout:
      case LayerKind::kGaussianNoise:
        break;
      case LayerKind::kConv3x3:
        if (s.size() != 3) throw ConfigError(name + ": conv layer " + std::to_string(i) + " needs image input");
        s = {l.units, s[1], s[2]};
        break;
      case LayerKind::kMaxPool:
        if (s.size() != 3 || s[1] < 2 || s[2] < 2) {
          throw ConfigError(name + ": maxpool layer " + std::to_string(i) + " needs image input >= 2x2");
        }
        s = {s[0], s[1] / 2, s[2] / 2};
        break;
      case LayerKind::kGlobalAvgPool:
        if (s.size() != 3) throw ConfigError(name + ": pooling layer " + std::to_string(i) + " needs image input");
        s = {s[0]};
        break;
      case LayerKind::kDense:
        s = {l.units};
        break;
    }
  }
  return s;
}

std::string ArchitectureSpec::canonical() const {
  std::ostringstream os;
  os << "name=" << name << ";input=" << to_string(input_shape) << ";classes=" << num_classes
     << ";split=" << feature_split_index << ";instance_norm=" << (instance_norm_input ? 1 : 0) << ";layers=";
  char buf[64];
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const LayerSpec& l = layers[i];
    if (i) os << '|';
    os << layer_kind_name(l.kind) << '(' << l.units << ',' << (l.batchnorm ? "bn" : "nobn") << ','
       << activation_name(l.activation);
    std::snprintf(buf, sizeof buf, ",%.17g,%.17g)", l.slope, l.rate);
    os << buf;
  }
  return os.str();
}

std::uint64_t ArchitectureSpec::hash() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : canonical()) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

void ArchitectureSpec::validate(bool require_simplex_output) const {
  if (layers.empty()) throw ConfigError(name + ": architecture has no layers");
  if (input_shape.empty() || numel(input_shape) == 0) throw ConfigError(name + ": empty input shape");
  if (feature_split_index >= layers.size()) {
    throw ConfigError(name + ": feature split index " + std::to_string(feature_split_index) + " out of range");
  }
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const LayerSpec& l = layers[i];
    if ((l.kind == LayerKind::kDense || l.kind == LayerKind::kConv3x3) && l.units == 0) {
      throw ConfigError(name + ": layer " + std::to_string(i) + " has zero units");
    }
    if (l.kind == LayerKind::kInstanceNorm && i != 0) {
      throw ConfigError(name + ": instance normalization must be the first layer");
    }
    if (l.kind == LayerKind::kDropout && !(l.rate >= 0 && l.rate < 1)) {
      throw ConfigError(name + ": dropout rate must lie in [0, 1)");
    }
  }
  layer_shape(layers.size() - 1);
  if (require_simplex_output) {
    const LayerSpec& last = layers.back();
    if (num_classes < 2) throw ConfigError(name + ": need at least two classes");
    if (last.kind != LayerKind::kDense || last.activation != Activation::kSoftmax || last.units != num_classes) {
      throw ConfigError(name + ": final layer must be a softmax dense layer with num_classes units");
    }
  }
}

// ---------------------------------------------------------------------------
// ParameterStore / EMA

template <typename T>
Parameter<T>& ParameterStore<T>::add(std::string name, Tensor<T> value, bool trainable) {
  if (contains(name)) throw ConfigError("parameter store: duplicate name '" + name + "'");
  entries_.push_back(Entry{std::move(name), Parameter<T>(std::move(value), trainable)});
  return entries_.back().param;
}

template <typename T>
Parameter<T>& ParameterStore<T>::at(std::string_view name) {
  for (auto& e : entries_)
    if (e.name == name) return e.param;
  throw ConfigError("parameter store: no parameter named '" + std::string(name) + "'");
}

template <typename T>
const Parameter<T>& ParameterStore<T>::at(std::string_view name) const {
  return const_cast<ParameterStore*>(this)->at(name);
}

template <typename T>
bool ParameterStore<T>::contains(std::string_view name) const {
  for (const auto& e : entries_)
    if (e.name == name) return true;
  return false;
}

template <typename T>
std::size_t ParameterStore<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& e : entries_)
    if (e.param.trainable) n += e.param.value.size();
  return n;
}

template <typename T>
bool ParameterStore<T>::same_layout(const ParameterStore& other) const {
  if (entries_.size() != other.entries_.size()) return false;
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    const auto& a = entries_[i];
    const auto& b = other.entries_[i];
    if (a.name != b.name || a.param.value.shape() != b.param.value.shape() || a.param.trainable != b.param.trainable) {
      return false;
    }
  }
  return true;
}

template <typename T>
void ParameterStore<T>::copy_values_from(const ParameterStore& other) {
  if (!same_layout(other)) throw ShapeError("parameter store: layouts differ");
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    auto& dst = entries_[i].param.value;
    const auto& src = other.entries_[i].param.value;
    std::copy(src.ptr(), src.ptr() + src.size(), dst.ptr());
  }
  ++version_;
}

template <typename T>
EmaState<T>::EmaState(const ParameterStore<T>& params, T m) : shadow(params), momentum(m) {
  if (!(m > T{0} && m < T{1})) throw ConfigError("ema: momentum must lie in (0, 1)");
}

template <typename T>
void ema_update(EmaState<T>& ema, const ParameterStore<T>& params) {
  if (!ema.shadow.same_layout(params)) throw ShapeError("ema_update: shadow and parameters have different layouts");
  const T m = ema.momentum;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& p = params.entry(i).param;
    auto& s = ema.shadow.entry(i).param.value;
    if (p.trainable) {
      for (std::size_t k = 0; k < s.size(); ++k) s[k] = m * s[k] + (T{1} - m) * p.value[k];
    } else {
      std::copy(p.value.ptr(), p.value.ptr() + p.value.size(), s.ptr());
    }
  }
  ema.shadow.bump_version();
}

// ---------------------------------------------------------------------------
// Architectures

namespace {

LayerSpec conv(std::size_t units) {
  return LayerSpec{LayerKind::kConv3x3, units, true, Activation::kLeakyRelu, 0.1, 0.0};
}
LayerSpec pool() { return LayerSpec{LayerKind::kMaxPool, 0, false, Activation::kNone, 0.1, 0.0}; }
LayerSpec drop(double p) { return LayerSpec{LayerKind::kDropout, 0, false, Activation::kNone, 0.1, p}; }
LayerSpec noise(double s) { return LayerSpec{LayerKind::kGaussianNoise, 0, false, Activation::kNone, 0.1, s}; }

ArchitectureSpec cnn_spec(std::string name, std::size_t w1, std::size_t w2, std::size_t num_classes,
                          bool instance_norm, double noise_sigma, Shape input) {
  ArchitectureSpec s;
  s.name = std::move(name);
  s.input_shape = std::move(input);
  s.num_classes = num_classes;
  s.instance_norm_input = instance_norm;
  if (instance_norm) s.layers.push_back(LayerSpec{LayerKind::kInstanceNorm, 0, false, Activation::kNone, 0.1, 0.0});
  for (int i = 0; i < 3; ++i) s.layers.push_back(conv(w1));
  s.layers.push_back(pool());
  s.layers.push_back(drop(0.5));
  s.layers.push_back(noise(noise_sigma));
  for (int i = 0; i < 3; ++i) s.layers.push_back(conv(w2));
  s.layers.push_back(pool());
  s.layers.push_back(drop(0.5));
  s.layers.push_back(noise(noise_sigma));
  for (int i = 0; i < 3; ++i) s.layers.push_back(conv(w2));
  s.layers.push_back(LayerSpec{LayerKind::kGlobalAvgPool, 0, false, Activation::kNone, 0.1, 0.0});
  s.layers.push_back(LayerSpec{LayerKind::kDense, num_classes, true, Activation::kSoftmax, 0.1, 0.0});
  s.feature_split_index = s.layer_from_end(5);
  return s;
}

double activation_gain(const LayerSpec& l) {
  switch (l.activation) {
    case Activation::kLeakyRelu: return std::sqrt(2.0 / (1.0 + l.slope * l.slope));
    case Activation::kRelu: return std::sqrt(2.0);
    default: return 1.0;
  }
}

std::string layer_prefix(std::size_t i) { return "layer" + std::to_string(i); }

}  // namespace

ArchitectureSpec small_cnn_spec(std::size_t num_classes, bool instance_norm, double noise_sigma, std::size_t channels,
                                std::size_t height, std::size_t width) {
  return cnn_spec("small-cnn", 64, 64, num_classes, instance_norm, noise_sigma, {channels, height, width});
}

ArchitectureSpec large_cnn_spec(std::size_t num_classes, bool instance_norm, double noise_sigma) {
  return cnn_spec("large-cnn", 96, 192, num_classes, instance_norm, noise_sigma, {3, 32, 32});
}

ArchitectureSpec mlp_spec(const std::vector<std::size_t>& widths, std::size_t num_classes, std::size_t input_dim) {
  if (widths.empty()) throw ConfigError("mlp: at least one hidden layer is required");
  ArchitectureSpec s;
  s.name = "mlp";
  s.input_shape = {input_dim};
  s.num_classes = num_classes;
  for (std::size_t w : widths) s.layers.push_back(LayerSpec{LayerKind::kDense, w, false, Activation::kLeakyRelu, 0.1, 0.0});
  s.layers.push_back(LayerSpec{LayerKind::kDense, num_classes, false, Activation::kSoftmax, 0.1, 0.0});
  // Penultimate hidden layer, or the only hidden layer.
  s.feature_split_index = widths.size() >= 2 ? widths.size() - 2 : 0;
  return s;
}

ArchitectureSpec discriminator_spec(const Shape& feature_shape, std::size_t hidden) {
  ArchitectureSpec s;
  s.name = "discriminator";
  s.input_shape = feature_shape;
  s.num_classes = 1;
  s.layers.push_back(LayerSpec{LayerKind::kDense, hidden, false, Activation::kRelu, 0.1, 0.0});
  s.layers.push_back(LayerSpec{LayerKind::kDense, 1, false, Activation::kSigmoid, 0.1, 0.0});
  s.feature_split_index = 0;
  return s;
}

template <typename T>
ParameterStore<T> init_parameters(const ArchitectureSpec& spec, std::uint64_t seed) {
  ParameterStore<T> store;
  Shape in = spec.input_shape;
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const LayerSpec& l = spec.layers[i];
    const std::string prefix = layer_prefix(i);
    if (l.kind == LayerKind::kConv3x3 || l.kind == LayerKind::kDense) {
      const std::size_t fan_in = l.kind == LayerKind::kConv3x3 ? in[0] * 9 : numel(in);
      const Shape wshape = l.kind == LayerKind::kConv3x3 ? Shape{l.units, in[0], 3, 3} : Shape{fan_in, l.units};
      const double bound = activation_gain(l) * std::sqrt(3.0 / static_cast<double>(fan_in));
      Rng rng = make_rng({seed, i, 0x1417u});
      std::uniform_real_distribution<double> u(-bound, bound);
      Tensor<T> w(wshape);
      for (std::size_t k = 0; k < w.size(); ++k) w[k] = static_cast<T>(u(rng));
      store.add(prefix + ".weight", std::move(w));
      if (l.batchnorm) {
        store.add(prefix + ".bn.gamma", Tensor<T>({l.units}, T{1}));
        store.add(prefix + ".bn.beta", Tensor<T>({l.units}, T{0}));
        store.add(prefix + ".bn.running_mean", Tensor<T>({l.units}, T{0}), false);
        store.add(prefix + ".bn.running_var", Tensor<T>({l.units}, T{1}), false);
      } else if (l.kind == LayerKind::kDense) {
        store.add(prefix + ".bias", Tensor<T>({l.units}, T{0}));
      }
    }
    in = spec.layer_shape(i);
  }
  return store;
}

template <typename T>
std::vector<Var> build_layers(const ArchitectureSpec& spec, ParameterStore<T>& store, Graph<T>& g, Var x,
                              std::size_t first, std::size_t last, const BuildOptions& opt) {
  if (last >= spec.layers.size() || first > last) throw ConfigError("build_layers: invalid layer range");
  const std::size_t start = g.mark();
  std::vector<Var> outs;
  Var h = x;
  for (std::size_t i = first; i <= last; ++i) {
    const LayerSpec& l = spec.layers[i];
    const std::string prefix = layer_prefix(i);
    const std::uint64_t stream = derive_seed({opt.stream_key, i});
    auto param = [&](const std::string& suffix) { return g.parameter(store.at(prefix + suffix), opt.trainable); };
    auto normalize_or_bias = [&](Var v) {
      if (l.batchnorm) {
        return g.batchnorm(v, param(".bn.gamma"), param(".bn.beta"), store.at(prefix + ".bn.running_mean"),
                           store.at(prefix + ".bn.running_var"), opt.update_stats);
      }
      if (l.kind == LayerKind::kDense) return g.add(v, param(".bias"));
      return v;
    };
    auto activate = [&](Var v) {
      switch (l.activation) {
        case Activation::kLeakyRelu: return g.leaky_relu(v, static_cast<T>(l.slope));
        case Activation::kRelu: return g.relu(v);
        case Activation::kSigmoid: return g.sigmoid(v);
        case Activation::kSoftmax: return g.softmax(v);
        case Activation::kNone: return v;
      }
      return v;
    };
    switch (l.kind) {
      case LayerKind::kInstanceNorm: h = g.instance_norm(h); break;
      case LayerKind::kConv3x3: h = activate(normalize_or_bias(g.conv3x3(h, param(".weight")))); break;
      case LayerKind::kMaxPool: h = g.maxpool2x2(h); break;
      case LayerKind::kDropout: h = g.dropout(h, static_cast<T>(l.rate), stream); break;
      case LayerKind::kGaussianNoise: h = g.gaussian_noise(h, static_cast<T>(l.rate), stream); break;
      case LayerKind::kGlobalAvgPool: h = g.global_avg_pool(h); break;
      case LayerKind::kDense: {
        const Shape& s = g.shape(h);
        if (s.size() != 2) h = g.reshape(h, Shape{s[0], numel(s) / s[0]});
        h = activate(normalize_or_bias(g.matmul(h, param(".weight"))));
        break;
      }
    }
    outs.push_back(h);
  }
  if (opt.force_eval) {
    for (std::size_t i = start; i < g.size(); ++i) g.force_eval(Var{static_cast<std::int32_t>(i)});
  }
  return outs;
}

template <typename T>
NetworkNodes build_network(const ArchitectureSpec& spec, ParameterStore<T>& store, Graph<T>& g, Var x,
                           const BuildOptions& opt) {
  NetworkNodes n;
  n.layers = build_layers(spec, store, g, x, 0, spec.layers.size() - 1, opt);
  n.features = n.layers[spec.feature_split_index];
  n.output = n.layers.back();
  return n;
}

template <typename T>
Classifier<T> make_classifier(ArchitectureSpec spec, std::uint64_t seed) {
  spec.validate();
  Classifier<T> c;
  c.params = init_parameters<T>(spec, seed);
  c.spec = std::move(spec);
  return c;
}

template <typename T>
Classifier<T> build_small_cnn(std::size_t num_classes, bool instance_norm, double noise_sigma, std::uint64_t seed) {
  return make_classifier<T>(small_cnn_spec(num_classes, instance_norm, noise_sigma), seed);
}

template <typename T>
Classifier<T> build_mlp(const std::vector<std::size_t>& widths, std::size_t num_classes, std::uint64_t seed,
                        std::size_t input_dim) {
  return make_classifier<T>(mlp_spec(widths, num_classes, input_dim), seed);
}

template <typename T>
Discriminator<T> build_discriminator(const Shape& feature_shape, std::uint64_t seed, DiscriminatorInit init) {
  if (numel(feature_shape) == 0) throw ConfigError("discriminator: feature dimension must be >= 1");
  Discriminator<T> d;
  d.spec = discriminator_spec(feature_shape);
  d.spec.validate(false);
  d.params = init_parameters<T>(d.spec, seed);
  if (init == DiscriminatorInit::kZero) {
    for (auto& e : d.params) e.param.value.fill(T{0});
  }
  return d;
}

namespace {

template <typename T>
Shape batch_shape(std::size_t n, const Shape& sample) {
  Shape s{n};
  s.insert(s.end(), sample.begin(), sample.end());
  return s;
}

template <typename T>
void check_input(const ArchitectureSpec& spec, const Tensor<T>& x) {
  if (x.rank() != spec.input_shape.size() + 1 || x.row_shape() != spec.input_shape) {
    throw ShapeError(spec.name + ": input " + to_string(x.shape()) + " does not match per-sample shape " +
                     to_string(spec.input_shape));
  }
}

template <typename T>
ParameterStore<T>& mut(const ParameterStore<T>& p) {
  // Graphs reference parameters mutably; eval-mode graphs without statistic
  // updates never write through the reference.
  return const_cast<ParameterStore<T>&>(p);
}

}  // namespace

template <typename T>
Tensor<T> forward(const Classifier<T>& c, const Tensor<T>& x, Mode mode, std::uint64_t seed) {
  return forward_split(c, x, mode, seed).probabilities;
}

template <typename T>
SplitOutput<T> forward_split(const Classifier<T>& c, const Tensor<T>& x, Mode mode, std::uint64_t seed) {
  check_input(c.spec, x);
  Graph<T> g;
  Var in = g.input(x.shape(), false, "x");
  g.bind(in, x);
  BuildOptions opt;
  opt.trainable = false;
  NetworkNodes n = build_network(c.spec, mut(c.params), g, in, opt);
  g.forward(mode, seed);
  return {g.value(n.features), g.value(n.output)};
}

template <typename T>
Tensor<T> forward_head(const Classifier<T>& c, const Tensor<T>& features, Mode mode, std::uint64_t seed) {
  Graph<T> g;
  Var in = g.input(features.shape(), false, "features");
  g.bind(in, features);
  BuildOptions opt;
  opt.trainable = false;
  const std::size_t split = c.spec.feature_split_index;
  if (split + 1 >= c.spec.layers.size()) return features;
  auto outs = build_layers(c.spec, mut(c.params), g, in, split + 1, c.spec.layers.size() - 1, opt);
  g.forward(mode, seed);
  return g.value(outs.back());
}

template <typename T>
Tensor<T> forward_layer(const ArchitectureSpec& spec, const ParameterStore<T>& params, const Tensor<T>& x, long layer,
                        std::size_t chunk) {
  check_input(spec, x);
  if (layer < -1 || layer >= static_cast<long>(spec.layers.size())) {
    throw ConfigError("forward_layer: layer " + std::to_string(layer) + " out of range");
  }
  const std::size_t N = x.dim(0);
  const std::size_t D = layer < 0 ? numel(spec.input_shape) : numel(spec.layer_shape(static_cast<std::size_t>(layer)));
  Tensor<T> out({N, D});
  if (layer < 0) {
    std::copy(x.ptr(), x.ptr() + x.size(), out.ptr());
    return out;
  }
  chunk = std::max<std::size_t>(1, chunk);
  const std::size_t n_chunks = (N + chunk - 1) / chunk;
  // Chunks write disjoint rows, so the result does not depend on the worker count.
  parallel_for(n_chunks, [&](std::size_t ci) {
    const std::size_t b = ci * chunk;
    const std::size_t e = std::min(N, b + chunk);
    Graph<T> g;
    Var in = g.input(batch_shape<T>(e - b, spec.input_shape), false, "x");
    g.bind(in, x.slice_rows(b, e));
    BuildOptions opt;
    opt.trainable = false;
    auto outs = build_layers(spec, mut(params), g, in, 0, static_cast<std::size_t>(layer), opt);
    g.forward(Mode::kEval, 0);
    const auto& v = g.value(outs.back());
    std::copy(v.ptr(), v.ptr() + v.size(), out.ptr() + b * D);
  });
  return out;
}

template <typename T>
Tensor<T> predict(const ArchitectureSpec& spec, const ParameterStore<T>& params, const Tensor<T>& x,
                  std::size_t chunk) {
  Tensor<T> p = forward_layer(spec, params, x, static_cast<long>(spec.layers.size()) - 1, chunk);
  return p;
}

#define CADP_INSTANTIATE(T)                                                                                       \
  template class ParameterStore<T>;                                                                               \
  template struct EmaState<T>;                                                                                    \
  template void ema_update<T>(EmaState<T>&, const ParameterStore<T>&);                                           \
  template ParameterStore<T> init_parameters<T>(const ArchitectureSpec&, std::uint64_t);                         \
  template std::vector<Var> build_layers<T>(const ArchitectureSpec&, ParameterStore<T>&, Graph<T>&, Var,         \
                                            std::size_t, std::size_t, const BuildOptions&);                      \
  template NetworkNodes build_network<T>(const ArchitectureSpec&, ParameterStore<T>&, Graph<T>&, Var,            \
                                         const BuildOptions&);                                                   \
  template Classifier<T> make_classifier<T>(ArchitectureSpec, std::uint64_t);                                    \
  template Classifier<T> build_small_cnn<T>(std::size_t, bool, double, std::uint64_t);                          \
  template Classifier<T> build_mlp<T>(const std::vector<std::size_t>&, std::size_t, std::uint64_t, std::size_t); \
  template Discriminator<T> build_discriminator<T>(const Shape&, std::uint64_t, DiscriminatorInit);             \
  template Tensor<T> forward<T>(const Classifier<T>&, const Tensor<T>&, Mode, std::uint64_t);                   \
  template SplitOutput<T> forward_split<T>(const Classifier<T>&, const Tensor<T>&, Mode, std::uint64_t);        \
  template Tensor<T> forward_head<T>(const Classifier<T>&, const Tensor<T>&, Mode, std::uint64_t);              \
  template Tensor<T> forward_layer<T>(const ArchitectureSpec&, const ParameterStore<T>&, const Tensor<T>&, long, \
                                      std::size_t);                                                              \
  template Tensor<T> predict<T>(const ArchitectureSpec&, const ParameterStore<T>&, const Tensor<T>&, std::size_t);

CADP_INSTANTIATE(float)
CADP_INSTANTIATE(double)

#undef CADP_INSTANTIATE

}  // namespace cadp
