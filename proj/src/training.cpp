#include "cadp/training.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>
#include <limits>
#include <ostream>
#include <type_traits>

#include "cadp/array_io.hpp"
#include "cadp/rng.hpp"

namespace cadp {

// ---------------------------------------------------------------------------
// Adam

void AdamConfig::validate() const {
  if (!(learning_rate > 0 && std::isfinite(learning_rate))) throw ConfigError("adam learning_rate must be > 0");
  if (!(beta1 >= 0 && beta1 < 1)) throw ConfigError("adam beta1 must lie in [0, 1)");
  if (!(beta2 >= 0 && beta2 < 1)) throw ConfigError("adam beta2 must lie in [0, 1)");
  if (!(eps_hat > 0 && std::isfinite(eps_hat))) throw ConfigError("adam eps_hat must be > 0");
}

template <typename T>
AdamState<T>::AdamState(const ParameterStore<T>& params, AdamConfig cfg) : config(cfg) {
  config.validate();
  for (const auto& e : params) {
    const Shape s = e.param.trainable ? e.param.value.shape() : Shape{0};
    m.emplace_back(s);
    v.emplace_back(s);
  }
}

template <typename T>
void adam_step(AdamState<T>& state, ParameterStore<T>& params) {
  if (state.m.size() != params.size()) throw ShapeError("adam_step: optimizer state does not match the parameters");
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& e = params.entry(i);
    if (!e.param.trainable) continue;
    if (e.param.grad.shape() != e.param.value.shape() || state.m[i].shape() != e.param.value.shape()) {
      throw ShapeError("adam_step: shape mismatch for " + e.name);
    }
    if (!e.param.grad.all_finite()) throw NumericalError("adam_step: non-finite gradient for parameter " + e.name);
  }
  const AdamConfig& c = state.config;
  ++state.t;
  const double t = static_cast<double>(state.t);
  const T lr_t = static_cast<T>(c.learning_rate * std::sqrt(1 - std::pow(c.beta2, t)) / (1 - std::pow(c.beta1, t)));
  const T b1 = static_cast<T>(c.beta1), b2 = static_cast<T>(c.beta2), eps = static_cast<T>(c.eps_hat);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params.entry(i).param;
    if (!p.trainable) continue;
    T* w = p.value.ptr();
    const T* g = p.grad.ptr();
    T* m = state.m[i].ptr();
    T* v = state.v[i].ptr();
    for (std::size_t k = 0; k < p.value.size(); ++k) {
      m[k] = b1 * m[k] + (T{1} - b1) * g[k];
      v[k] = b2 * v[k] + (T{1} - b2) * g[k] * g[k];
      w[k] -= lr_t * m[k] / (std::sqrt(v[k]) + eps);
    }
  }
  params.bump_version();
}

// ---------------------------------------------------------------------------
// Config

std::string_view mode_name(TrainMode m) {
  switch (m) {
    case TrainMode::kSourceOnly: return "source-only";
    case TrainMode::kDann: return "dann";
    case TrainMode::kVada: return "vada";
    case TrainMode::kDirtt: return "dirt-t";
  }
  return "unknown";
}

TrainMode parse_mode(const std::string& s) {
  for (TrainMode m : {TrainMode::kSourceOnly, TrainMode::kDann, TrainMode::kVada, TrainMode::kDirtt})
    if (s == mode_name(m)) return m;
  throw ConfigError("unknown mode '" + s + "' (source-only, dann, vada, dirt-t)");
}

std::string_view encoder_loss_name(EncoderLoss e) {
  return e == EncoderLoss::kNonSaturating ? "non-saturating" : "saturating";
}

EncoderLoss parse_encoder_loss(const std::string& s) {
  if (s == "non-saturating") return EncoderLoss::kNonSaturating;
  if (s == "saturating") return EncoderLoss::kSaturating;
  throw ConfigError("unknown encoder_loss '" + s + "' (non-saturating, saturating)");
}

void TrainConfig::validate() const {
  weights.validate();
  vat.validate();
  adam.validate();
  if (refinement_interval < 1) throw ConfigError("refinement_interval must be >= 1");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (!(ema_momentum > 0 && ema_momentum < 1)) throw ConfigError("ema_momentum must lie in (0, 1)");
  if (checkpoint_every > 0 && checkpoint_path.empty()) throw ConfigError("checkpoint_every needs checkpoint_path");
}

LossWeights TrainConfig::effective_weights() const {
  LossWeights w = weights;
  if (mode == TrainMode::kSourceOnly || mode == TrainMode::kDann) w.lambda_s = w.lambda_t = 0;
  if (mode == TrainMode::kSourceOnly) w.lambda_d = 0;
  return w;
}

namespace {

// Shortest text that parses back to the same double.
std::string num(double v) {
  char buf[40];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

double to_double(const std::string& key, const std::string& s) {
  std::size_t used = 0;
  double v = 0;
  try {
    v = std::stod(s, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != s.size() || s.empty()) throw ConfigError("'" + key + "' expects a number, got '" + s + "'");
  return v;
}

std::uint64_t to_u64(const std::string& key, const std::string& s) {
  std::size_t used = 0;
  unsigned long long v = 0;
  try {
    if (!s.empty() && s[0] == '-') throw std::invalid_argument("negative");
    v = std::stoull(s, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != s.size() || s.empty()) throw ConfigError("'" + key + "' expects a non-negative integer, got '" + s + "'");
  return v;
}

bool to_bool(const std::string& key, const std::string& s) {
  if (s == "true" || s == "1") return true;
  if (s == "false" || s == "0") return false;
  throw ConfigError("'" + key + "' expects true or false, got '" + s + "'");
}

}  // namespace

std::map<std::string, std::string> TrainConfig::to_map() const {
  return {
      {"mode", std::string(mode_name(mode))},
      {"encoder_loss", std::string(encoder_loss_name(encoder_loss))},
      {"iterations", std::to_string(iterations)},
      {"refinement_interval", std::to_string(refinement_interval)},
      {"batch_size", std::to_string(batch_size)},
      {"seed", std::to_string(seed)},
      {"log_every", std::to_string(log_every)},
      {"checkpoint_every", std::to_string(checkpoint_every)},
      {"checkpoint_path", checkpoint_path},
      {"ema_momentum", num(ema_momentum)},
      {"weights.lambda_d", num(weights.lambda_d)},
      {"weights.lambda_s", num(weights.lambda_s)},
      {"weights.lambda_t", num(weights.lambda_t)},
      {"weights.beta", num(weights.beta)},
      {"weights.target_entropy", weights.target_entropy ? "true" : "false"},
      {"weights.target_vat", weights.target_vat ? "true" : "false"},
      {"vat.epsilon", num(vat.epsilon)},
      {"vat.xi", num(vat.xi)},
      {"vat.power_iterations", std::to_string(vat.power_iterations)},
      {"adam.learning_rate", num(adam.learning_rate)},
      {"adam.beta1", num(adam.beta1)},
      {"adam.beta2", num(adam.beta2)},
      {"adam.eps_hat", num(adam.eps_hat)},
  };
}

TrainConfig TrainConfig::from_map(const std::map<std::string, std::string>& kv) {
  TrainConfig c;
  for (const auto& [k, v] : kv) {
    if (k == "mode") c.mode = parse_mode(v);
    else if (k == "encoder_loss") c.encoder_loss = parse_encoder_loss(v);
    else if (k == "iterations") c.iterations = to_u64(k, v);
    else if (k == "refinement_interval") c.refinement_interval = to_u64(k, v);
    else if (k == "batch_size") c.batch_size = to_u64(k, v);
    else if (k == "seed") c.seed = to_u64(k, v);
    else if (k == "log_every") c.log_every = to_u64(k, v);
    else if (k == "checkpoint_every") c.checkpoint_every = to_u64(k, v);
    else if (k == "checkpoint_path") c.checkpoint_path = v;
    else if (k == "ema_momentum") c.ema_momentum = to_double(k, v);
    else if (k == "weights.lambda_d") c.weights.lambda_d = to_double(k, v);
    else if (k == "weights.lambda_s") c.weights.lambda_s = to_double(k, v);
    else if (k == "weights.lambda_t") c.weights.lambda_t = to_double(k, v);
    else if (k == "weights.beta") c.weights.beta = to_double(k, v);
    else if (k == "weights.target_entropy") c.weights.target_entropy = to_bool(k, v);
    else if (k == "weights.target_vat") c.weights.target_vat = to_bool(k, v);
    else if (k == "vat.epsilon") c.vat.epsilon = to_double(k, v);
    else if (k == "vat.xi") c.vat.xi = to_double(k, v);
    else if (k == "vat.power_iterations") c.vat.power_iterations = static_cast<int>(to_u64(k, v));
    else if (k == "adam.learning_rate") c.adam.learning_rate = to_double(k, v);
    else if (k == "adam.beta1") c.adam.beta1 = to_double(k, v);
    else if (k == "adam.beta2") c.adam.beta2 = to_double(k, v);
    else if (k == "adam.eps_hat") c.adam.eps_hat = to_double(k, v);
    else throw ConfigError("unknown training key '" + k + "'");
  }
  return c;
}

// ---------------------------------------------------------------------------
// Metrics

MetricsLog::MetricsLog(std::ostream* out) : out_(out) {
  if (out_) *out_ << kHeader << '\n';
}

std::string MetricsLog::format(const MetricsRow& r) {
  auto f = [](double v) {
    char buf[32];
    if (std::isnan(v)) return std::string("nan");
    std::snprintf(buf, sizeof buf, "%.9g", v);
    return std::string(buf);
  };
  const LossBreakdown& l = r.loss;
  std::string s = std::to_string(r.step) + "," + std::string(mode_name(r.mode));
  for (double v : {l.l_y, l.l_d_enc, l.l_d_disc, l.l_c, l.l_v_src, l.l_v_tgt, l.l_kl_teacher, l.total, r.src_acc,
                   r.tgt_acc})
    s += "," + f(v);
  s += "," + std::to_string(r.interval);
  return s;
}

void MetricsLog::add(const MetricsRow& row) {
  rows_.push_back(row);
  if (out_) {
    *out_ << format(row) << '\n';
    out_->flush();
  }
}

// ---------------------------------------------------------------------------
// Training loops

namespace {

constexpr std::uint64_t kSourceBatches = 0x51;
constexpr std::uint64_t kTargetBatches = 0x72;

template <typename T>
Tensor<T> as(const Tensor<float>& x) {
  if constexpr (std::is_same_v<T, float>) {
    return x;
  } else {
    return x.cast<T>();
  }
}

template <typename T>
double accuracy_of(const TrainState<T>& st, const DomainDataset* d) {
  if (d == nullptr) return std::numeric_limits<double>::quiet_NaN();
  return evaluate(st.student.spec, st.ema.shadow, *d, WeightsUsed::kEma).accuracy;
}

template <typename T>
void after_step(TrainState<T>& st, const LossBreakdown& b, std::uint64_t row_interval, const EvalSets& eval,
                MetricsLog& log) {
  const TrainConfig& cfg = st.config;
  if (cfg.log_every > 0 && st.step % cfg.log_every == 0) {
    MetricsRow row;
    row.step = st.step;
    row.mode = cfg.mode;
    row.loss = b;
    row.src_acc = accuracy_of(st, eval.source);
    row.tgt_acc = accuracy_of(st, eval.target);
    row.interval = row_interval;
    log.add(row);
  }
  if (cfg.checkpoint_every > 0 && st.step % cfg.checkpoint_every == 0) save_checkpoint(st, cfg.checkpoint_path);
}

[[noreturn]] void rethrow_numerical(const NumericalError& e, std::uint64_t step) {
  throw NumericalError("training diverged at step " + std::to_string(step) + ": " + e.what(), e.node());
}

}  // namespace

template <typename T>
TrainState<T> init_train_state(const ArchitectureSpec& spec, const TrainConfig& cfg) {
  cfg.validate();
  if (cfg.mode == TrainMode::kDirtt) throw ConfigError("init_train_state: use init_refinement_state for dirt-t");
  TrainState<T> st;
  st.config = cfg;
  st.student = make_classifier<T>(spec, derive_seed({cfg.seed, 0xc1a55u}));
  st.ema = EmaState<T>(st.student.params, static_cast<T>(cfg.ema_momentum));
  st.adam = AdamState<T>(st.student.params, cfg.adam);
  if (cfg.effective_weights().lambda_d > 0) {
    st.disc = build_discriminator<T>(spec.layer_shape(spec.feature_split_index), derive_seed({cfg.seed, 0xd15cu}));
    st.adam_disc = AdamState<T>(st.disc->params, cfg.adam);
  }
  return st;
}

template <typename T>
void run_vada(TrainState<T>& st, const DomainDataset& source, const UnlabeledView& target, std::uint64_t until,
              const EvalSets& eval, MetricsLog& log) {
  const TrainConfig& cfg = st.config;
  if (cfg.mode == TrainMode::kDirtt) throw ConfigError("run_vada: state is in dirt-t mode");
  if (source.size() == 0) throw ConfigError("run_vada: source dataset is empty");
  const LossWeights w = cfg.effective_weights();
  ObjectiveOptions opt;
  opt.encoder_loss = cfg.encoder_loss;
  VadaObjective<T> obj(st.student, st.disc ? &*st.disc : nullptr, w, cfg.vat, opt);
  if (obj.uses_target() && target.size() == 0) throw ConfigError("run_vada: target dataset is empty");

  BatchIterator src_it(source.size(), cfg.batch_size, derive_seed({cfg.seed, kSourceBatches}));
  src_it.seek(st.source_epoch, st.source_pos);
  std::optional<BatchIterator> tgt_it;
  if (obj.uses_target()) {
    tgt_it.emplace(target.size(), cfg.batch_size, derive_seed({cfg.seed, kTargetBatches}));
    tgt_it->seek(st.target_epoch, st.target_pos);
  }
  while (st.step < until) {
    const std::uint64_t seed = derive_seed({cfg.seed, st.step, 0x57e9u});
    const auto idx = src_it.next();
    const Tensor<T> xs = as<T>(source.inputs().gather_rows(idx));
    const Tensor<T> ys = as<T>(source.one_hot(idx));
    Tensor<T> xt;
    if (tgt_it) xt = as<T>(target.gather(tgt_it->next()));
    LossBreakdown b;
    try {
      b = obj.evaluate(xs, ys, xt, seed);
      if (st.disc) {
        obj.backward_discriminator();
        adam_step(*st.adam_disc, st.disc->params);
        b = obj.refresh_encoder();
      }
      obj.backward_total();
      adam_step(st.adam, st.student.params);
    } catch (const NumericalError& e) {
      rethrow_numerical(e, st.step);
    }
    ema_update(st.ema, st.student.params);
    st.vat_fallback_rows += obj.fallback_rows();
    ++st.step;
    st.source_epoch = src_it.epoch();
    st.source_pos = src_it.position();
    if (tgt_it) {
      st.target_epoch = tgt_it->epoch();
      st.target_pos = tgt_it->position();
    }
    after_step(st, b, 0, eval, log);
  }
}

template <typename T>
TrainState<T> train_vada(const ArchitectureSpec& spec, const DomainDataset& source, const UnlabeledView& target,
                         const TrainConfig& cfg, const EvalSets& eval, MetricsLog& log) {
  TrainState<T> st = init_train_state<T>(spec, cfg);
  run_vada(st, source, target, cfg.iterations, eval, log);
  return st;
}

template <typename T>
TrainState<T> init_refinement_state(const TrainState<T>& init, const TrainConfig& cfg) {
  cfg.validate();
  if (cfg.mode != TrainMode::kDirtt) throw ConfigError("refinement requires mode dirt-t");
  if (!(cfg.weights.lambda_t > 0)) throw ConfigError("refinement requires lambda_t > 0");
  TrainState<T> st;
  st.config = cfg;
  st.student.spec = init.student.spec;
  st.student.params = init.ema.shadow;
  st.ema = EmaState<T>(st.student.params, static_cast<T>(cfg.ema_momentum));
  st.teacher = st.student;
  st.adam = AdamState<T>(st.student.params, cfg.adam);
  return st;
}

template <typename T>
void run_dirtt(TrainState<T>& st, const UnlabeledView& target, std::uint64_t until, const EvalSets& eval,
               MetricsLog& log) {
  const TrainConfig& cfg = st.config;
  if (cfg.mode != TrainMode::kDirtt || !st.teacher) throw ConfigError("run_dirtt: state is not a refinement state");
  if (target.size() == 0) throw ConfigError("run_dirtt: target dataset is empty");
  ObjectiveOptions opt;
  DirttObjective<T> obj(st.student, *st.teacher, cfg.weights, cfg.vat, opt);
  BatchIterator tgt_it(target.size(), cfg.batch_size, derive_seed({cfg.seed, kTargetBatches}));
  tgt_it.seek(st.target_epoch, st.target_pos);
  const std::uint64_t B = cfg.refinement_interval;
  while (st.step < until) {
    const std::uint64_t seed = derive_seed({cfg.seed, st.step, 0xd177u});
    const Tensor<T> xt = as<T>(target.gather(tgt_it.next()));
    LossBreakdown b;
    try {
      b = obj.evaluate(xt, seed);
      obj.backward_total();
      adam_step(st.adam, st.student.params);
    } catch (const NumericalError& e) {
      rethrow_numerical(e, st.step);
    }
    ema_update(st.ema, st.student.params);
    st.vat_fallback_rows += obj.fallback_rows();
    const std::uint64_t row_interval = st.interval;
    ++st.step;
    st.target_epoch = tgt_it.epoch();
    st.target_pos = tgt_it.position();
    if (st.step % B == 0) {
      st.teacher->params.copy_values_from(st.ema.shadow);
      ++st.teacher_refreshes;
    }
    st.interval = st.step / B;
    after_step(st, b, row_interval, eval, log);
  }
}

template <typename T>
TrainState<T> refine_dirtt(const TrainState<T>& init, const UnlabeledView& target, const TrainConfig& cfg,
                           const EvalSets& eval, MetricsLog& log) {
  if (init.config.mode == TrainMode::kDirtt) throw ConfigError("refine_dirtt: init must be an adaptation checkpoint");
  TrainState<T> st = init_refinement_state(init, cfg);
  run_dirtt(st, target, cfg.iterations, eval, log);
  return st;
}

// ---------------------------------------------------------------------------
// Architecture serialization

std::map<std::string, std::string> spec_to_map(const ArchitectureSpec& spec, const std::string& prefix) {
  std::map<std::string, std::string> kv;
  kv[prefix + "name"] = spec.name;
  std::string in;
  for (std::size_t i = 0; i < spec.input_shape.size(); ++i) in += (i ? "," : "") + std::to_string(spec.input_shape[i]);
  kv[prefix + "input"] = in;
  kv[prefix + "classes"] = std::to_string(spec.num_classes);
  kv[prefix + "split"] = std::to_string(spec.feature_split_index);
  kv[prefix + "instance_norm"] = spec.instance_norm_input ? "true" : "false";
  kv[prefix + "layers"] = std::to_string(spec.layers.size());
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const LayerSpec& l = spec.layers[i];
    char key[32];
    std::snprintf(key, sizeof key, "layer.%03zu", i);
    kv[prefix + key] = std::string(layer_kind_name(l.kind)) + "," + std::to_string(l.units) + "," +
                       (l.batchnorm ? "bn" : "nobn") + "," + std::string(activation_name(l.activation)) + "," +
                       num(l.slope) + "," + num(l.rate);
  }
  kv[prefix + "hash"] = std::to_string(spec.hash());
  return kv;
}

ArchitectureSpec spec_from_map(const std::map<std::string, std::string>& kv, const std::string& prefix) {
  auto get = [&](const std::string& k) -> const std::string& {
    auto it = kv.find(prefix + k);
    if (it == kv.end()) throw FormatError(FormatError::Kind::kMalformed, "architecture field '" + prefix + k + "' missing");
    return it->second;
  };
  auto split = [](const std::string& s) {
    std::vector<std::string> parts;
    std::size_t start = 0;
    for (;;) {
      const auto comma = s.find(',', start);
      parts.push_back(s.substr(start, comma - start));
      if (comma == std::string::npos) break;
      start = comma + 1;
    }
    return parts;
  };
  try {
    ArchitectureSpec spec;
    spec.name = get("name");
    for (const auto& d : split(get("input"))) spec.input_shape.push_back(to_u64("input", d));
    spec.num_classes = to_u64("classes", get("classes"));
    spec.feature_split_index = to_u64("split", get("split"));
    spec.instance_norm_input = get("instance_norm") == "true";
    const std::size_t n = to_u64("layers", get("layers"));
    for (std::size_t i = 0; i < n; ++i) {
      char key[32];
      std::snprintf(key, sizeof key, "layer.%03zu", i);
      const auto f = split(get(key));
      if (f.size() != 6) throw ConfigError("layer entry has wrong field count");
      LayerSpec l;
      bool kind_ok = false, act_ok = false;
      for (LayerKind k : {LayerKind::kInstanceNorm, LayerKind::kConv3x3, LayerKind::kMaxPool, LayerKind::kDropout,
                          LayerKind::kGaussianNoise, LayerKind::kGlobalAvgPool, LayerKind::kDense})
        if (f[0] == layer_kind_name(k)) l.kind = k, kind_ok = true;
      for (Activation a : {Activation::kNone, Activation::kLeakyRelu, Activation::kRelu, Activation::kSigmoid,
                           Activation::kSoftmax})
        if (f[3] == activation_name(a)) l.activation = a, act_ok = true;
      if (!kind_ok || !act_ok) throw ConfigError("unknown layer kind or activation");
      l.units = to_u64("units", f[1]);
      l.batchnorm = f[2] == "bn";
      l.slope = to_double("slope", f[4]);
      l.rate = to_double("rate", f[5]);
      spec.layers.push_back(l);
    }
    if (std::to_string(spec.hash()) != get("hash")) {
      throw FormatError(FormatError::Kind::kMalformed, "architecture block does not match its stored hash");
    }
    return spec;
  } catch (const ConfigError& e) {
    throw FormatError(FormatError::Kind::kMalformed, std::string("malformed architecture block: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

template <typename T>
void put_store(Archive& a, const std::string& prefix, const ParameterStore<T>& s) {
  for (const auto& e : s) a.put(prefix + e.name, e.param.value);
}

template <typename T>
void get_store(const Archive& a, const std::string& prefix, ParameterStore<T>& s) {
  for (auto& e : s) {
    Tensor<T> v = a.get<T>(prefix + e.name);
    if (v.shape() != e.param.value.shape()) {
      throw FormatError(FormatError::Kind::kDimensionMismatch,
                        "array '" + prefix + e.name + "' has shape " + to_string(v.shape()) + ", expected " +
                            to_string(e.param.value.shape()));
    }
    e.param.value = std::move(v);
  }
}

template <typename T>
void put_adam(Archive& a, const std::string& prefix, const AdamState<T>& st, const ParameterStore<T>& s) {
  a.meta[prefix + "t"] = std::to_string(st.t);
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (!s.entry(i).param.trainable) continue;
    a.put(prefix + "m/" + s.entry(i).name, st.m[i]);
    a.put(prefix + "v/" + s.entry(i).name, st.v[i]);
  }
}

template <typename T>
void get_adam(const Archive& a, const std::string& prefix, AdamState<T>& st, const ParameterStore<T>& s) {
  st.t = to_u64(prefix + "t", a.meta_at(prefix + "t"));
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (!s.entry(i).param.trainable) continue;
    for (auto* dst : {&st.m[i], &st.v[i]}) {
      const std::string name = prefix + (dst == &st.m[i] ? "m/" : "v/") + s.entry(i).name;
      Tensor<T> v = a.get<T>(name);
      if (v.shape() != dst->shape()) throw FormatError(FormatError::Kind::kDimensionMismatch, "array '" + name + "'");
      *dst = std::move(v);
    }
  }
}

template <typename T>
constexpr const char* dtype_tag() {
  return std::is_same_v<T, float> ? "f32" : "f64";
}

}  // namespace

template <typename T>
std::vector<std::uint8_t> encode_checkpoint(const TrainState<T>& st) {
  Archive a;
  a.meta["kind"] = "checkpoint";
  a.meta["dtype"] = dtype_tag<T>();
  for (const auto& [k, v] : st.config.to_map()) a.meta["config." + k] = v;
  for (const auto& [k, v] : spec_to_map(st.student.spec, "arch.")) a.meta[k] = v;
  a.meta["state.step"] = std::to_string(st.step);
  a.meta["state.interval"] = std::to_string(st.interval);
  a.meta["state.teacher_refreshes"] = std::to_string(st.teacher_refreshes);
  a.meta["state.source_epoch"] = std::to_string(st.source_epoch);
  a.meta["state.source_pos"] = std::to_string(st.source_pos);
  a.meta["state.target_epoch"] = std::to_string(st.target_epoch);
  a.meta["state.target_pos"] = std::to_string(st.target_pos);
  a.meta["state.vat_fallback_rows"] = std::to_string(st.vat_fallback_rows);
  a.meta["state.teacher"] = st.teacher ? "true" : "false";
  a.meta["state.discriminator"] = st.disc ? "true" : "false";
  put_store(a, "student/", st.student.params);
  put_store(a, "ema/", st.ema.shadow);
  put_adam(a, "adam/", st.adam, st.student.params);
  if (st.teacher) put_store(a, "teacher/", st.teacher->params);
  if (st.disc) {
    for (const auto& [k, v] : spec_to_map(st.disc->spec, "disc_arch.")) a.meta[k] = v;
    put_store(a, "disc/", st.disc->params);
    put_adam(a, "adam_disc/", *st.adam_disc, st.disc->params);
  }
  return encode_archive(a, kCheckpointVersion);
}

template <typename T>
TrainState<T> decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  const Archive a = decode_archive(bytes, kCheckpointVersion);
  if (a.meta_at("kind") != "checkpoint") throw FormatError(FormatError::Kind::kMalformed, "archive is not a checkpoint");
  if (a.meta_at("dtype") != dtype_tag<T>()) {
    throw FormatError(FormatError::Kind::kMalformed, "checkpoint precision is " + a.meta_at("dtype"));
  }
  std::map<std::string, std::string> cfg_kv;
  for (const auto& [k, v] : a.meta)
    if (k.rfind("config.", 0) == 0) cfg_kv[k.substr(7)] = v;
  TrainState<T> st;
  try {
    st.config = TrainConfig::from_map(cfg_kv);
  } catch (const ConfigError& e) {
    throw FormatError(FormatError::Kind::kMalformed, std::string("checkpoint config: ") + e.what());
  }
  const ArchitectureSpec spec = spec_from_map(a.meta, "arch.");
  auto meta_u64 = [&](const std::string& k) { return to_u64(k, a.meta_at(k)); };
  st.student.spec = spec;
  st.student.params = init_parameters<T>(spec, 0);
  get_store(a, "student/", st.student.params);
  st.ema = EmaState<T>(st.student.params, static_cast<T>(st.config.ema_momentum));
  get_store(a, "ema/", st.ema.shadow);
  st.adam = AdamState<T>(st.student.params, st.config.adam);
  get_adam(a, "adam/", st.adam, st.student.params);
  if (a.meta_at("state.teacher") == "true") {
    st.teacher = st.student;
    get_store(a, "teacher/", st.teacher->params);
  }
  if (a.meta_at("state.discriminator") == "true") {
    Discriminator<T> d;
    d.spec = spec_from_map(a.meta, "disc_arch.");
    d.params = init_parameters<T>(d.spec, 0);
    get_store(a, "disc/", d.params);
    st.adam_disc = AdamState<T>(d.params, st.config.adam);
    get_adam(a, "adam_disc/", *st.adam_disc, d.params);
    st.disc = std::move(d);
  }
  st.step = meta_u64("state.step");
  st.interval = meta_u64("state.interval");
  st.teacher_refreshes = meta_u64("state.teacher_refreshes");
  st.source_epoch = meta_u64("state.source_epoch");
  st.source_pos = meta_u64("state.source_pos");
  st.target_epoch = meta_u64("state.target_epoch");
  st.target_pos = meta_u64("state.target_pos");
  st.vat_fallback_rows = meta_u64("state.vat_fallback_rows");
  return st;
}

template <typename T>
void save_checkpoint(const TrainState<T>& st, const std::string& path) {
  write_file_atomic(path, encode_checkpoint(st));
}

template <typename T>
TrainState<T> load_checkpoint(const std::string& path, std::optional<std::uint64_t> expected_hash) {
  TrainState<T> st = decode_checkpoint<T>(read_file_bytes(path));
  if (expected_hash && *expected_hash != st.student.spec.hash()) {
    throw FormatError(FormatError::Kind::kArchitectureMismatch,
                      path + ": checkpoint architecture " + st.student.spec.name + " does not match the configured one");
  }
  return st;
}

#define CADP_INSTANTIATE(T)                                                                                      \
  template struct AdamState<T>;                                                                                  \
  template void adam_step<T>(AdamState<T>&, ParameterStore<T>&);                                                \
  template TrainState<T> init_train_state<T>(const ArchitectureSpec&, const TrainConfig&);                      \
  template void run_vada<T>(TrainState<T>&, const DomainDataset&, const UnlabeledView&, std::uint64_t,          \
                            const EvalSets&, MetricsLog&);                                                       \
  template TrainState<T> train_vada<T>(const ArchitectureSpec&, const DomainDataset&, const UnlabeledView&,     \
                                       const TrainConfig&, const EvalSets&, MetricsLog&);                       \
  template TrainState<T> init_refinement_state<T>(const TrainState<T>&, const TrainConfig&);                    \
  template void run_dirtt<T>(TrainState<T>&, const UnlabeledView&, std::uint64_t, const EvalSets&, MetricsLog&); \
  template TrainState<T> refine_dirtt<T>(const TrainState<T>&, const UnlabeledView&, const TrainConfig&,        \
                                         const EvalSets&, MetricsLog&);                                         \
  template std::vector<std::uint8_t> encode_checkpoint<T>(const TrainState<T>&);                                \
  template TrainState<T> decode_checkpoint<T>(const std::vector<std::uint8_t>&);                                \
  template void save_checkpoint<T>(const TrainState<T>&, const std::string&);                                   \
  template TrainState<T> load_checkpoint<T>(const std::string&, std::optional<std::uint64_t>);

CADP_INSTANTIATE(float)
CADP_INSTANTIATE(double)

#undef CADP_INSTANTIATE

}  // namespace cadp
